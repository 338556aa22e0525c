#include <doctest.h>

#include "gradcheck.hpp"
#include "markvqa/prompts.hpp"
#include "support.hpp"

using namespace markvqa;

namespace {

FeatureMap<double> random_features(int gh, int gw, int c, Rng& rng) {
    return {gh, gw, randn<double>(gh * gw, c, 1.0, rng)};
}

// mask covering exactly the pixel blocks of the listed grid cells
Mask cells_mask(int h, int w, int gh, int gw, const std::vector<std::pair<int, int>>& cells) {
    Mask m(h, w);
    for (auto [i, j] : cells) {
        for (int r = i * h / gh; r < (i + 1) * h / gh; ++r)
            for (int c = j * w / gw; c < (j + 1) * w / gw; ++c) m.set(r, c);
    }
    return m;
}

Detection det(Mask m, int view = 0) {
    Detection d;
    d.mask = std::move(m);
    d.class_label = "car";
    d.view = view;
    return d;
}

}  // namespace

TEST_CASE("constant features pool to the constant") {
    FeatureMap<double> f{4, 4, Mat<double>::Constant(16, 3, 2.5)};
    Rng rng(1);
    for (int t = 0; t < 10; ++t) {
        Mask m(40, 40);
        const int r = rng.integer(0, 39), c = rng.integer(0, 39);
        m.set(r, c);
        const Mat<double> p = mask_average_pool(f, m);
        CHECK((p.array() - 2.5).abs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("full mask gives the global mean") {
    Rng rng(2);
    const auto f = random_features(5, 7, 4, rng);
    Mask m(50, 70);
    std::fill(m.bits.begin(), m.bits.end(), 1);
    CHECK((mask_average_pool(f, m) - f.data.colwise().mean()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("two-cell mask on a 14x14x4 map") {
    Rng rng(3);
    const auto f = random_features(14, 14, 4, rng);
    const Mask m = cells_mask(448, 448, 14, 14, {{0, 0}, {0, 1}});
    const Mat<double> expected = (f.data.row(0) + f.data.row(1)) / 2;
    CHECK((mask_average_pool(f, m) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tiny masks fall back to the centroid cell") {
    Rng rng(4);
    const auto f = random_features(4, 4, 2, rng);
    Mask m(40, 40);
    m.set(11, 1);  // misses every cell centre
    const auto cells = resize_mask_nearest(m, 4, 4);
    CHECK(std::count(cells.begin(), cells.end(), 1) == 0);
    // centroid (1, 11) lies in cell row 1, col 0
    CHECK((mask_average_pool(f, m) - f.data.row(4)).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(mask_average_pool(f, Mask(40, 40)), ValidationError);
}

TEST_CASE("cell_of") {
    CHECK(cell_of({0, 0}, 448, 448, 16, 16) == 0);
    CHECK(cell_of({447.9, 447.9}, 448, 448, 16, 16) == 255);
    CHECK(cell_of({28, 0}, 448, 448, 16, 16) == 1);
    CHECK(cell_of({27.99, 28}, 448, 448, 16, 16) == 16);
}

TEST_CASE("scene pooling") {
    CHECK(scene_pool_matrix(16, 16, 256) == Mat<double>::Identity(256, 256));
    const Mat<double> p = scene_pool_matrix(16, 16, 64);
    REQUIRE(p.rows() == 64);
    REQUIRE(p.cols() == 256);
    // token 0 averages cells (0,0), (0,1), (1,0), (1,1)
    for (int c : {0, 1, 16, 17}) CHECK(p(0, c) == 0.25);
    CHECK(p.row(0).sum() == doctest::Approx(1.0));
    CHECK(p(63, 255) == 0.25);
    CHECK_THROWS_AS(scene_pool_matrix(14, 14, 64), ValidationError);
}

TEST_CASE("scene prompts with zero weights equal the output bias") {
    ConnectedMlp<double> mlp(4, 6, 5, 1);
    mlp.fc1_weight.value.setZero();
    mlp.fc2_weight.value.setZero();
    Rng rng(5);
    mlp.fc2_bias.value = randn<double>(1, 5, 1.0, rng);
    const auto f = random_features(4, 4, 4, rng);
    const Mat<double> t = build_scene_prompts(f, mlp, 4);
    REQUIRE(t.rows() == 4);
    for (Eigen::Index r = 0; r < 4; ++r) CHECK(t.row(r) == mlp.fc2_bias.value);
}

TEST_CASE("scene prompts pool before the mlp") {
    ConnectedMlp<double> mlp(3, 8, 5, 2);
    Rng rng(6);
    const auto f = random_features(4, 4, 3, rng);
    const Mat<double> t = build_scene_prompts(f, mlp, 4);
    const Mat<double> pooled = scene_pool_matrix(4, 4, 4) * f.data;
    CHECK((t - mlp.apply(pooled)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("instance prompts follow marker order") {
    ConnectedMlp<double> mlp(2, 8, 3, 3);
    FeatureMap<double> f{4, 4, Mat<double>::Zero(16, 2)};
    // three regions with distinct constant features
    const std::vector<std::pair<int, int>> a = {{0, 0}}, b = {{1, 2}, {1, 3}}, c = {{3, 0}, {3, 1}, {2, 0}};
    auto paint = [&](const std::vector<std::pair<int, int>>& cells, double x, double y) {
        for (auto [i, j] : cells) f.data.row(i * 4 + j) << x, y;
    };
    paint(a, 1, 0);
    paint(b, 0, 1);
    paint(c, -1, 2);
    const std::vector<Detection> dets = {det(cells_mask(40, 40, 4, 4, a)), det(cells_mask(40, 40, 4, 4, b)),
                                         det(cells_mask(40, 40, 4, 4, c))};
    const auto map = build_index_map(dets).map;
    const auto bundle = build_instance_prompts(f, map, dets, mlp, 40, 40);
    CHECK(bundle.instance_index_order == std::vector<int>{1, 2, 3});
    REQUIRE(bundle.instance_tokens.rows() == 3);
    Mat<double> x(1, 2);
    x << 1, 0;
    CHECK((bundle.instance_tokens.row(0) - mlp.apply(x)).cwiseAbs().maxCoeff() < 1e-12);
    x << 0, 1;
    CHECK((bundle.instance_tokens.row(1) - mlp.apply(x)).cwiseAbs().maxCoeff() < 1e-12);
    x << -1, 2;
    CHECK((bundle.instance_tokens.row(2) - mlp.apply(x)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("single detection on a constant map") {
    ConnectedMlp<double> mlp(3, 4, 2, 4);
    FeatureMap<double> f{2, 2, Mat<double>::Constant(4, 3, 0.7)};
    const std::vector<Detection> dets = {det(cells_mask(20, 20, 2, 2, {{1, 1}}))};
    const auto bundle = build_instance_prompts(f, build_index_map(dets).map, dets, mlp, 20, 20);
    REQUIRE(bundle.instance_tokens.rows() == 1);
    CHECK((bundle.instance_tokens - mlp.apply(Mat<double>::Constant(1, 3, 0.7))).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("question markers pool the cell under their coordinate") {
    ConnectedMlp<double> mlp(2, 4, 2, 5);
    Rng rng(7);
    const auto f = random_features(4, 4, 2, rng);
    const std::vector<Detection> dets = {det(cells_mask(400, 400, 4, 4, {{0, 0}}))};
    auto map = build_index_map(dets).map;
    map = assign_query_coordinate(map, {350, 250}, 400, 400).second;
    REQUIRE(map.size() == 2);
    const auto bundle = build_instance_prompts(f, map, dets, mlp, 400, 400);
    REQUIRE(bundle.instance_tokens.rows() == 2);
    CHECK((bundle.instance_tokens.row(1) - mlp.apply(f.data.row(2 * 4 + 3))).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("bundle assembly order") {
    const Mat<double> v0 = Mat<double>::Constant(2, 3, 1), v1 = Mat<double>::Constant(2, 3, 2);
    const Mat<double> inst = Mat<double>::Constant(1, 3, 3);
    const auto b = assemble_bundle<double>({v0, v1}, inst, {1});
    const Mat<double> all = b.tokens();
    REQUIRE(all.rows() == 5);
    CHECK(all(0, 0) == 1);
    CHECK(all(2, 0) == 2);
    CHECK(all(4, 0) == 3);
    CHECK_THROWS_AS(assemble_bundle<double>({v0, Mat<double>::Zero(2, 4)}, inst, {1}), ValidationError);
    CHECK_THROWS_AS(assemble_bundle<double>({v0}, inst, {}), ValidationError);
}

TEST_CASE("connected mlp gradients") {
    ConnectedMlp<double> mlp(4, 6, 3, 6);
    Rng rng(8);
    mlp.fc1_bias.value = randn<double>(1, 6, 0.5, rng);
    const Mat<double> x = randn<double>(5, 4, 1.0, rng);
    const std::vector<int> targets = {0, 2, 1, 1, 0};
    std::vector<Parameter<double>*> params;
    mlp.visit([&](Parameter<double>& p) { params.push_back(&p); });
    auto loss = [&](bool backward) {
        Graph<double> g;
        Var l = g.cross_entropy(mlp.forward(g, g.constant(x)), targets);
        if (backward) g.backward(l);
        return g.value(l)(0, 0);
    };
    const auto r = testing::check_gradients(params, loss, 1e-5);
    CHECK(r.relative_error < 1e-6);
}
