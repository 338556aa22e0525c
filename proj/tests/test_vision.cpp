#include <doctest.h>

#include "gradcheck.hpp"
#include "markvqa/scene.hpp"
#include "markvqa/vision.hpp"
#include "support.hpp"

using namespace markvqa;

namespace {

std::uint64_t rounded_hash(const Mat<double>& m) {
    std::uint64_t h = 1469598103934665603ULL;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        const long long v = std::llround(m.data()[i] * 1e6);
        for (int b = 0; b < 8; ++b) {
            h ^= static_cast<std::uint64_t>((v >> (8 * b)) & 0xff);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

EncoderConfig tiny() {
    EncoderConfig c;
    c.patch_size = 8;
    c.embed_dim = 8;
    c.depth = 1;
    c.heads = 2;
    c.lora_rank = 2;
    c.mlp_ratio = 2;
    return c;
}

}  // namespace

TEST_CASE("feature grid shape") {
    EncoderConfig c;
    c.patch_size = 32;
    Encoder<float> e(c, 14 * 14, 0);
    const Image img(448, 448, 100);
    const auto f = e.encode(img);
    CHECK(f.grid_h == 14);
    CHECK(f.grid_w == 14);
    CHECK(f.channels() == c.embed_dim);
    CHECK(f.data.rows() == 196);

    EncoderConfig d;
    Encoder<float> e28(d, 256, 0);
    CHECK(e28.encode(img).grid_h == 16);
}

TEST_CASE("image size must divide by the patch size") {
    EncoderConfig c;
    CHECK_THROWS_AS(c.check_image(450, 448), ValidationError);
    CHECK_NOTHROW(c.check_image(448, 224));
    Encoder<float> e(c, 256, 0);
    CHECK_THROWS_AS(e.encode(Image(224, 224)), ValidationError);
}

TEST_CASE("encoder is deterministic") {
    Rng rng(1);
    const Image img = testing::random_image(112, 112, rng);
    EncoderConfig c;
    Encoder<double> a(c, 16, 5), b(c, 16, 5);
    CHECK(a.encode(img).data == a.encode(img).data);
    CHECK(a.encode(img).data == b.encode(img).data);
}

TEST_CASE("encoder golden hash") {
    SceneConfig sc;
    sc.min_objects = 3;
    sc.max_objects = 5;
    sc.seed = 7;
    const Scene s = generate_scene(sc, 0);
    Encoder<double> e(EncoderConfig{}, 256, 1234);
    const auto f = e.encode(s.images[0]);
    CHECK(f.all_finite());
    CHECK(rounded_hash(f.data) == 17697567256178688721ULL);
}

TEST_CASE("patchify layout") {
    EncoderConfig c = tiny();
    Encoder<double> e(c, 4, 0);
    Image img(16, 16);
    for (int r = 0; r < 16; ++r)
        for (int col = 0; col < 16; ++col)
            for (int ch = 0; ch < 3; ++ch) img.at(r, col)[ch] = static_cast<std::uint8_t>((r * 16 + col + ch * 7) % 256);
    const Mat<double> p = e.patchify(img);
    REQUIRE(p.rows() == 4);
    REQUIRE(p.cols() == 8 * 8 * 3);
    for (int r = 0; r < 16; ++r) {
        for (int col = 0; col < 16; ++col) {
            for (int ch = 0; ch < 3; ++ch) {
                const int row = (r / 8) * 2 + col / 8;
                const int k = ((r % 8) * 8 + col % 8) * 3 + ch;
                CHECK(p(row, k) == doctest::Approx(img.at(r, col)[ch] / 255.0 - 0.5));
            }
        }
    }
}

TEST_CASE("marker controlnet is the frozen encoder at initialisation") {
    Rng rng(2);
    MarkerControlNet<double> net(EncoderConfig{}, 112, 112, 9);
    for (int i = 0; i < 5; ++i) {
        const Image a = testing::random_image(112, 112, rng);
        const Image m = testing::random_image(112, 112, rng);
        const auto fused = net.mcnet_forward(a, m);
        CHECK((fused.data - net.encode(a).data).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("zero-linear bias shifts every cell") {
    MarkerControlNet<double> net(tiny(), 32, 32, 1);
    Rng rng(3);
    const Mat<double> b = randn<double>(1, 8, 1.0, rng);
    net.zero().bias.value = b;
    const Image blank(32, 32, 0);
    const auto fused = net.mcnet_forward(blank, blank);
    const auto base = net.encode(blank);
    for (Eigen::Index r = 0; r < fused.data.rows(); ++r) {
        CHECK((fused.data.row(r) - base.data.row(r) - b).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("mcnet requires matching input sizes") {
    MarkerControlNet<double> net(tiny(), 32, 32, 1);
    CHECK_THROWS_AS(net.mcnet_forward(Image(32, 32), Image(40, 32)), ValidationError);
}

TEST_CASE("control copy mirrors the frozen encoder") {
    MarkerControlNet<double> net(tiny(), 32, 32, 4);
    std::vector<Parameter<double>*> frozen, control;
    net.frozen().visit([&](Parameter<double>& p) { frozen.push_back(&p); });
    net.control().visit([&](Parameter<double>& p) {
        if (p.name.find(".lora.") == std::string::npos) control.push_back(&p);
    });
    REQUIRE(frozen.size() == control.size());
    for (std::size_t i = 0; i < frozen.size(); ++i) {
        CHECK(frozen[i]->value == control[i]->value);
        CHECK_FALSE(frozen[i]->trainable);
        CHECK_FALSE(control[i]->trainable);
        CHECK(frozen[i]->name.rfind("enc.frozen.", 0) == 0);
        CHECK(control[i]->name.rfind("enc.ctrl.", 0) == 0);
    }
    int adapters = 0;
    net.control().visit([&](Parameter<double>& p) {
        if (p.name.find(".lora.") != std::string::npos) {
            CHECK(p.trainable);
            ++adapters;
        }
    });
    CHECK(adapters == 2 * 6 * tiny().depth);
}

TEST_CASE("lora is the base layer at initialisation") {
    Rng rng(5);
    LoraLinear<double> layer("l", 6, 4, rng);
    const Mat<double> x = randn<double>(3, 6, 1.0, rng);
    const Mat<double> base = lora_forward(layer, x);
    layer.attach_lora("l.lora", 3, 16, rng);
    CHECK(layer.scaling == doctest::Approx(16.0 / 3));
    CHECK(lora_forward(layer, x) == base);
}

TEST_CASE("rank-1 lora hand-worked case") {
    Rng rng(6);
    LoraLinear<double> layer("l", 4, 4, rng);
    layer.attach_lora("l.lora", 1, 1, rng);
    Mat<double> e = Mat<double>::Zero(1, 4);
    e(0, 0) = 1;
    layer.down.value = e;
    layer.up.value = e.transpose();
    const Mat<double> base = e * layer.weight.value.transpose() + layer.bias.value;
    CHECK((lora_forward(layer, e) - (base + e)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("zero-linear gradient is non-zero on a random batch") {
    MarkerControlNet<double> net(tiny(), 32, 32, 7);
    Rng rng(8);
    const Image a = testing::random_image(32, 32, rng), m = testing::random_image(32, 32, rng);
    const Mat<double> target = randn<double>(16, 8, 1.0, rng);
    Graph<double> g;
    Var y = net.forward(g, a, m);
    Var d = g.add(y, g.constant(-target));
    Var loss = g.cross_entropy(g.matmul_bt(d, g.constant(randn<double>(3, 8, 1.0, rng))), std::vector<int>(16, 1));
    g.backward(loss);
    CHECK(net.zero().weight.grad.cwiseAbs().maxCoeff() > 0);
    CHECK(net.zero().bias.grad.cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("encoder gradients through the control branch") {
    MarkerControlNet<double> net(tiny(), 16, 16, 3);
    Rng rng(10);
    // move away from the zero point so every trainable tensor gets signal
    net.zero().weight.value = randn<double>(8, 8, 0.3, rng);
    std::vector<Parameter<double>*> params = {&net.zero().weight, &net.zero().bias};
    net.control().visit([&](Parameter<double>& p) {
        if (p.trainable) {
            p.value = randn<double>(p.value.rows(), p.value.cols(), 0.3, rng);
            params.push_back(&p);
        }
    });
    const Image a = testing::random_image(16, 16, rng), m = testing::random_image(16, 16, rng);
    const Mat<double> proj = randn<double>(5, 8, 1.0, rng);
    const std::vector<int> targets = {0, 1, 2, 3};
    auto loss = [&](bool backward) {
        Graph<double> g;
        Var out = g.cross_entropy(g.matmul_bt(net.forward(g, a, m), g.constant(proj)), targets);
        if (backward) g.backward(out);
        return g.value(out)(0, 0);
    };
    const auto r = testing::check_gradients(params, loss, 1e-4, 16);
    CHECK(r.analytic_norm > 0);
    CHECK(r.relative_error < 1e-5);
}
