#include <doctest.h>

#include "gradcheck.hpp"
#include "markvqa/autograd.hpp"

using namespace markvqa;
using G = Graph<double>;
using P = Parameter<double>;

namespace {

P rand_param(const char* name, int r, int c, Rng& rng, double std = 1.0) {
    return P(name, randn<double>(r, c, std, rng), true);
}

// scalar head: cross entropy of out * R against fixed targets
double head(G& g, Var out, bool backward, Rng seed_rng) {
    const auto cols = g.value(out).cols();
    const auto rows = g.value(out).rows();
    Rng rng = seed_rng;
    Var proj = g.matmul(out, g.constant(randn<double>(cols, 5, 0.7, rng)));
    std::vector<int> targets;
    for (Eigen::Index r = 0; r < rows; ++r) targets.push_back(rng.integer(0, 4));
    Var loss = g.cross_entropy(proj, targets);
    if (backward) g.backward(loss);
    return g.value(loss)(0, 0);
}

void expect_close_grads(const std::vector<P*>& params, const std::function<Var(G&)>& build) {
    const Rng head_rng(99);
    auto loss = [&](bool backward) {
        G g;
        return head(g, build(g), backward, head_rng);
    };
    const auto r = testing::check_gradients(params, loss, 1e-5);
    CHECK(r.analytic_norm > 0);
    CHECK(r.relative_error < 1e-6);
}

}  // namespace

TEST_CASE("elementwise and matrix ops") {
    Rng rng(1);
    P a = rand_param("a", 4, 3, rng), b = rand_param("b", 4, 3, rng), row = rand_param("row", 1, 3, rng);
    P m = rand_param("m", 3, 6, rng), n = rand_param("n", 6, 3, rng);
    expect_close_grads({&a, &b}, [&](G& g) { return g.add(g.param(a), g.param(b)); });
    expect_close_grads({&a, &row}, [&](G& g) { return g.add_row(g.param(a), g.param(row)); });
    expect_close_grads({&a}, [&](G& g) { return g.scale(g.param(a), -1.7); });
    expect_close_grads({&a, &m}, [&](G& g) { return g.matmul(g.param(a), g.param(m)); });
    expect_close_grads({&a, &n}, [&](G& g) { return g.matmul_bt(g.param(a), g.param(n)); });
}

TEST_CASE("linear, layer norm, gelu") {
    Rng rng(2);
    P x = rand_param("x", 5, 4, rng), w = rand_param("w", 3, 4, rng), bias = rand_param("bias", 1, 3, rng);
    P gain = rand_param("gain", 1, 4, rng), shift = rand_param("shift", 1, 4, rng);
    expect_close_grads({&x, &w, &bias}, [&](G& g) { return g.linear(g.param(x), g.param(w), g.param(bias)); });
    expect_close_grads({&x, &w}, [&](G& g) { return g.linear(g.param(x), g.param(w)); });
    expect_close_grads({&x, &gain, &shift},
                       [&](G& g) { return g.layer_norm(g.param(x), g.param(gain), g.param(shift)); });
    expect_close_grads({&x}, [&](G& g) { return g.gelu(g.param(x)); });
}

TEST_CASE("attention variants") {
    Rng rng(3);
    P q = rand_param("q", 6, 8, rng), k = rand_param("k", 6, 8, rng), v = rand_param("v", 6, 8, rng);
    expect_close_grads({&q, &k, &v},
                       [&](G& g) { return g.attention(g.param(q), g.param(k), g.param(v), 2, true); });
    expect_close_grads({&q, &k, &v},
                       [&](G& g) { return g.attention(g.param(q), g.param(k), g.param(v), 4, false); });
    const std::vector<int> segments = {0, 0, 1, 1, 2, 2};
    expect_close_grads({&q, &k, &v},
                       [&](G& g) { return g.attention(g.param(q), g.param(k), g.param(v), 2, segments); });
}

TEST_CASE("row plumbing") {
    Rng rng(4);
    P a = rand_param("a", 5, 3, rng), b = rand_param("b", 2, 3, rng), table = rand_param("t", 7, 3, rng);
    expect_close_grads({&a}, [&](G& g) { return g.slice_rows(g.param(a), 1, 3); });
    expect_close_grads({&a, &b}, [&](G& g) {
        const std::vector<Var> parts = {g.param(a), g.param(b), g.param(a)};
        return g.concat_rows(parts);
    });
    const std::vector<int> ids = {3, 0, 3, 6};
    expect_close_grads({&table}, [&](G& g) { return g.gather_rows(g.param(table), ids); });
}

TEST_CASE("segment mask matches separate causal runs") {
    Rng rng(5);
    const Mat<double> Q = randn<double>(7, 4, 1.0, rng), K = randn<double>(7, 4, 1.0, rng),
                      V = randn<double>(7, 4, 1.0, rng);
    // rows 0-2 shared prefix, rows 3-4 segment 1, rows 5-6 segment 2
    const std::vector<int> seg = {0, 0, 0, 1, 1, 2, 2};
    G g;
    const Mat<double> packed = g.value(g.attention(g.constant(Q), g.constant(K), g.constant(V), 2, seg));
    auto run = [&](std::vector<int> rows) {
        Mat<double> q(static_cast<Eigen::Index>(rows.size()), 4), k = q, v = q;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            q.row(static_cast<Eigen::Index>(i)) = Q.row(rows[i]);
            k.row(static_cast<Eigen::Index>(i)) = K.row(rows[i]);
            v.row(static_cast<Eigen::Index>(i)) = V.row(rows[i]);
        }
        G h;
        return Mat<double>(h.value(h.attention(h.constant(q), h.constant(k), h.constant(v), 2, true)));
    };
    const Mat<double> first = run({0, 1, 2, 3, 4});
    const Mat<double> second = run({0, 1, 2, 5, 6});
    CHECK((packed.topRows(5) - first).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((packed.row(5) - second.row(3)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((packed.row(6) - second.row(4)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cross entropy values") {
    // one-hot correct with probability ~1 -> loss ~0
    Mat<double> sharp = Mat<double>::Constant(2, 4, -1e4);
    sharp(0, 1) = 0;
    sharp(1, 3) = 0;
    const std::vector<int> t = {1, 3};
    CHECK(cross_entropy_loss<double>(sharp, t) == doctest::Approx(0.0).epsilon(1e-12));

    // uniform logits -> ln V per token
    const Mat<double> flat = Mat<double>::Zero(3, 6);
    const std::vector<int> t3 = {0, 5, 2};
    CHECK(cross_entropy_loss<double>(flat, t3) == doctest::Approx(std::log(6.0)).epsilon(1e-12));

    // random 2-token case vs hand-computed -sum log softmax
    Mat<double> l(2, 3);
    l << 0.2, -1.0, 0.5, 1.5, 0.3, -0.7;
    const std::vector<int> t2 = {2, 0};
    const double l0 = -(0.5 - std::log(std::exp(0.2) + std::exp(-1.0) + std::exp(0.5)));
    const double l1 = -(1.5 - std::log(std::exp(1.5) + std::exp(0.3) + std::exp(-0.7)));
    CHECK(std::abs(cross_entropy_loss<double>(l, t2) - (l0 + l1) / 2) < 1e-6);

    // ignored targets do not count
    const std::vector<int> t_ign = {2, -1};
    CHECK(std::abs(cross_entropy_loss<double>(l, t_ign) - l0) < 1e-12);
}

TEST_CASE("frozen parameters receive no gradient") {
    Rng rng(6);
    P frozen("f", randn<double>(3, 3, 1.0, rng), false);
    P live = rand_param("l", 3, 3, rng);
    G g;
    Var out = g.matmul(g.param(live), g.param(frozen));
    head(g, out, true, Rng(1));
    CHECK(frozen.grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(live.grad.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("shape errors are reported") {
    G g;
    Var a = g.constant(Mat<double>::Zero(2, 3));
    Var b = g.constant(Mat<double>::Zero(2, 4));
    CHECK_THROWS(g.add(a, b));
    CHECK_THROWS(g.matmul(a, a));
    CHECK_THROWS(g.slice_rows(a, 1, 5));
    const std::vector<int> bad = {5};
    CHECK_THROWS(g.gather_rows(a, bad));
}
