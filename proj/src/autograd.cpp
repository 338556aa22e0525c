#include "markvqa/autograd.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace markvqa {

namespace {

void require(bool cond, const char* what) {
    if (!cond) throw std::invalid_argument(what);
}

}  // namespace

template <typename T>
Var Graph<T>::push(Mat<T> value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Graph<T>::constant(Mat<T> value) {
    return push(std::move(value), false);
}

template <typename T>
Var Graph<T>::param(Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.requires_grad = p.trainable;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
const Mat<T>& Graph<T>::value(Var v) const {
    const Node& n = node(v);
    return n.param ? n.param->value : n.value;
}

template <typename T>
Mat<T> Graph<T>::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) {
        const Mat<T>& val = value(v);
        return Mat<T>::Zero(val.rows(), val.cols());
    }
    return n.grad;
}

template <typename T>
Mat<T>& Graph<T>::grad_ref(Var v) {
    Node& n = node(v);
    if (n.grad.size() == 0) {
        const Mat<T>& val = value(v);
        n.grad = Mat<T>::Zero(val.rows(), val.cols());
    }
    return n.grad;
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
    require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add: shape mismatch");
    Var out = push(value(a) + value(b), requires_grad(a) || requires_grad(b));
    if (requires_grad(out)) {
        node(out).backward = [this, a, b, out] {
            const Mat<T>& g = node(out).grad;
            if (requires_grad(a)) grad_ref(a) += g;
            if (requires_grad(b)) grad_ref(b) += g;
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::add_row(Var a, Var row) {
    require(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row: shape mismatch");
    Mat<T> out_v = value(a);
    out_v.rowwise() += value(row).row(0);
    Var out = push(std::move(out_v), requires_grad(a) || requires_grad(row));
    if (requires_grad(out)) {
        node(out).backward = [this, a, row, out] {
            const Mat<T>& g = node(out).grad;
            if (requires_grad(a)) grad_ref(a) += g;
            if (requires_grad(row)) grad_ref(row) += g.colwise().sum();
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::scale(Var a, T s) {
    Var out = push(value(a) * s, requires_grad(a));
    if (requires_grad(out)) {
        node(out).backward = [this, a, out, s] { grad_ref(a) += node(out).grad * s; };
    }
    return out;
}

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
    require(value(a).cols() == value(b).rows(), "matmul: inner dimension mismatch");
    Mat<T> out_v(value(a).rows(), value(b).cols());
    out_v.noalias() = value(a) * value(b);
    Var out = push(std::move(out_v), requires_grad(a) || requires_grad(b));
    if (requires_grad(out)) {
        node(out).backward = [this, a, b, out] {
            const Mat<T>& g = node(out).grad;
            if (requires_grad(a)) grad_ref(a).noalias() += g * value(b).transpose();
            if (requires_grad(b)) grad_ref(b).noalias() += value(a).transpose() * g;
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::matmul_bt(Var a, Var b) {
    require(value(a).cols() == value(b).cols(), "matmul_bt: inner dimension mismatch");
    Mat<T> out_v(value(a).rows(), value(b).rows());
    out_v.noalias() = value(a) * value(b).transpose();
    Var out = push(std::move(out_v), requires_grad(a) || requires_grad(b));
    if (requires_grad(out)) {
        node(out).backward = [this, a, b, out] {
            const Mat<T>& g = node(out).grad;
            if (requires_grad(a)) grad_ref(a).noalias() += g * value(b);
            if (requires_grad(b)) grad_ref(b).noalias() += g.transpose() * value(a);
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::linear(Var x, Var weight, Var bias) {
    Var y = matmul_bt(x, weight);
    return bias.valid() ? add_row(y, bias) : y;
}

template <typename T>
Var Graph<T>::layer_norm(Var x, Var gain, Var bias, T eps) {
    const Mat<T>& xv = value(x);
    const auto n = xv.cols();
    require(value(gain).cols() == n && value(bias).cols() == n, "layer_norm: parameter width mismatch");
    Mat<T> xhat(xv.rows(), n);
    std::vector<T> inv_std(static_cast<std::size_t>(xv.rows()));
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const T mean = xv.row(r).mean();
        const T var = (xv.row(r).array() - mean).square().mean();
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        xhat.row(r) = (xv.row(r).array() - mean) * is;
    }
    Mat<T> out_v = xhat;
    out_v.array().rowwise() *= value(gain).row(0).array();
    out_v.rowwise() += value(bias).row(0);
    const bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
    Var out = push(std::move(out_v), rg);
    if (rg) {
        node(out).backward = [this, x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
            const Mat<T>& g = node(out).grad;
            if (requires_grad(gain)) grad_ref(gain) += (g.array() * xhat.array()).colwise().sum().matrix();
            if (requires_grad(bias)) grad_ref(bias) += g.colwise().sum();
            if (requires_grad(x)) {
                Mat<T>& gx = grad_ref(x);
                const auto n = static_cast<T>(xhat.cols());
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const auto dxhat = (g.row(r).array() * value(gain).row(0).array()).eval();
                    const T mean_d = dxhat.mean();
                    const T mean_dx = (dxhat * xhat.row(r).array()).sum() / n;
                    gx.row(r).array() +=
                        inv_std[static_cast<std::size_t>(r)] * (dxhat - mean_d - xhat.row(r).array() * mean_dx);
                }
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::gelu(Var x) {
    // tanh approximation
    const T c = static_cast<T>(std::sqrt(2.0 / M_PI));
    const T k = static_cast<T>(0.044715);
    const Mat<T>& xv = value(x);
    Mat<T> out_v = xv.unaryExpr([c, k](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v))); });
    Var out = push(std::move(out_v), requires_grad(x));
    if (requires_grad(out)) {
        node(out).backward = [this, x, out, c, k] {
            const Mat<T>& xv = value(x);
            const Mat<T> d = xv.unaryExpr([c, k](T v) {
                const T t = std::tanh(c * (v + k * v * v * v));
                return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
            });
            grad_ref(x).array() += node(out).grad.array() * d.array();
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::attention(Var q, Var k, Var v, int heads, bool causal) {
    return attention_impl(q, k, v, heads, causal, {});
}

template <typename T>
Var Graph<T>::attention(Var q, Var k, Var v, int heads, std::span<const int> segments) {
    require(static_cast<Eigen::Index>(segments.size()) == value(q).rows(), "attention: one segment id per row");
    return attention_impl(q, k, v, heads, true, segments);
}

template <typename T>
Var Graph<T>::attention_impl(Var q, Var k, Var v, int heads, bool causal, std::span<const int> segments) {
    const Mat<T>& Q = value(q);
    const Mat<T>& K = value(k);
    const Mat<T>& V = value(v);
    require(Q.cols() == K.cols() && K.cols() == V.cols() && K.rows() == V.rows(), "attention: shape mismatch");
    require(heads > 0 && Q.cols() % heads == 0, "attention: width not divisible by heads");
    require(!causal || Q.rows() == K.rows(), "attention: causal needs square scores");
    const Eigen::Index L = Q.rows(), S = K.rows(), dh = Q.cols() / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Mat<T> out_v(L, Q.cols());
    std::vector<Mat<T>> probs(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const Mat<T> qh = Q.middleCols(h * dh, dh);
        const Mat<T> kh = K.middleCols(h * dh, dh);
        const Mat<T> vh = V.middleCols(h * dh, dh);
        Mat<T> s(L, S);
        s.noalias() = qh * kh.transpose();
        s *= scale;
        for (Eigen::Index r = 0; r < L; ++r) {
            const Eigen::Index limit = causal ? r + 1 : S;
            auto visible = [&](Eigen::Index c) {
                if (segments.empty()) return true;
                const int sc = segments[static_cast<std::size_t>(c)];
                return sc == 0 || sc == segments[static_cast<std::size_t>(r)];
            };
            T mx = -std::numeric_limits<T>::infinity();
            for (Eigen::Index c = 0; c < limit; ++c) {
                if (visible(c)) mx = std::max(mx, s(r, c));
            }
            T sum = 0;
            for (Eigen::Index c = 0; c < limit; ++c) {
                const T e = visible(c) ? std::exp(s(r, c) - mx) : T(0);
                s(r, c) = e;
                sum += e;
            }
            for (Eigen::Index c = 0; c < limit; ++c) s(r, c) /= sum;
            for (Eigen::Index c = limit; c < S; ++c) s(r, c) = 0;
        }
        Mat<T> oh(L, dh);
        oh.noalias() = s * vh;
        out_v.middleCols(h * dh, dh) = oh;
        probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    const bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
    Var out = push(std::move(out_v), rg);
    if (rg) {
        node(out).backward = [this, q, k, v, out, heads, dh, scale, probs = std::move(probs)] {
            const Mat<T>& G = node(out).grad;
            const Mat<T>& Q = value(q);
            const Mat<T>& K = value(k);
            const Mat<T>& V = value(v);
            for (int h = 0; h < heads; ++h) {
                const Mat<T>& P = probs[static_cast<std::size_t>(h)];
                const Mat<T> gh = G.middleCols(h * dh, dh);
                if (requires_grad(v)) {
                    Mat<T> dv(P.cols(), dh);
                    dv.noalias() = P.transpose() * gh;
                    grad_ref(v).middleCols(h * dh, dh) += dv;
                }
                if (!requires_grad(q) && !requires_grad(k)) continue;
                const Mat<T> vh = V.middleCols(h * dh, dh);
                Mat<T> dp(P.rows(), P.cols());
                dp.noalias() = gh * vh.transpose();
                // softmax backward: dS = P * (dP - rowsum(dP * P))
                const auto rowdot = (dp.array() * P.array()).rowwise().sum().eval();
                Mat<T> ds = (P.array() * (dp.array().colwise() - rowdot)).matrix() * scale;
                if (requires_grad(q)) {
                    const Mat<T> kh = K.middleCols(h * dh, dh);
                    Mat<T> dq(ds.rows(), dh);
                    dq.noalias() = ds * kh;
                    grad_ref(q).middleCols(h * dh, dh) += dq;
                }
                if (requires_grad(k)) {
                    const Mat<T> qh = Q.middleCols(h * dh, dh);
                    Mat<T> dk(ds.cols(), dh);
                    dk.noalias() = ds.transpose() * qh;
                    grad_ref(k).middleCols(h * dh, dh) += dk;
                }
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::slice_rows(Var a, int start, int count) {
    require(start >= 0 && count >= 0 && start + count <= value(a).rows(), "slice_rows: out of range");
    Var out = push(value(a).middleRows(start, count), requires_grad(a));
    if (requires_grad(out)) {
        node(out).backward = [this, a, out, start, count] {
            grad_ref(a).middleRows(start, count) += node(out).grad;
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    const auto cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    bool rg = false;
    for (Var p : parts) {
        require(value(p).cols() == cols, "concat_rows: width mismatch");
        rows += value(p).rows();
        rg = rg || requires_grad(p);
    }
    Mat<T> out_v(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
        out_v.middleRows(at, value(p).rows()) = value(p);
        at += value(p).rows();
    }
    Var out = push(std::move(out_v), rg);
    if (rg) {
        node(out).backward = [this, out, parts = std::vector<Var>(parts.begin(), parts.end())] {
            Eigen::Index at = 0;
            for (Var p : parts) {
                const auto r = value(p).rows();
                if (requires_grad(p)) grad_ref(p) += node(out).grad.middleRows(at, r);
                at += r;
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::gather_rows(Var table, std::span<const int> ids) {
    const Mat<T>& tv = value(table);
    Mat<T> out_v(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && ids[i] < tv.rows(), "gather_rows: id out of range");
        out_v.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
    }
    Var out = push(std::move(out_v), requires_grad(table));
    if (requires_grad(out)) {
        node(out).backward = [this, table, out, ids = std::vector<int>(ids.begin(), ids.end())] {
            Mat<T>& g = grad_ref(table);
            for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += node(out).grad.row(static_cast<Eigen::Index>(i));
        };
    }
    return out;
}

template <typename T>
double cross_entropy_loss(const Mat<T>& logits, std::span<const int> targets) {
    require(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "cross_entropy: target count mismatch");
    double total = 0.0;
    std::size_t n = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const int t = targets[static_cast<std::size_t>(r)];
        if (t < 0) continue;
        require(t < logits.cols(), "cross_entropy: target id out of range");
        const double mx = static_cast<double>(logits.row(r).maxCoeff());
        double sum = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(static_cast<double>(logits(r, c)) - mx);
        total += mx + std::log(sum) - static_cast<double>(logits(r, t));
        ++n;
    }
    return n == 0 ? 0.0 : total / static_cast<double>(n);
}

template <typename T>
Var Graph<T>::cross_entropy(Var logits, std::span<const int> targets) {
    const Mat<T>& lv = value(logits);
    require(static_cast<Eigen::Index>(targets.size()) == lv.rows(), "cross_entropy: target count mismatch");
    Mat<T> probs = Mat<T>::Zero(lv.rows(), lv.cols());
    T total = 0;
    int n = 0;
    for (Eigen::Index r = 0; r < lv.rows(); ++r) {
        const int t = targets[static_cast<std::size_t>(r)];
        if (t < 0) continue;
        require(t < lv.cols(), "cross_entropy: target id out of range");
        const T mx = lv.row(r).maxCoeff();
        probs.row(r) = (lv.row(r).array() - mx).exp();
        const T sum = probs.row(r).sum();
        probs.row(r) /= sum;
        total += mx + std::log(sum) - lv(r, t);
        ++n;
    }
    Mat<T> out_v(1, 1);
    out_v(0, 0) = n == 0 ? T(0) : total / static_cast<T>(n);
    Var out = push(std::move(out_v), requires_grad(logits));
    if (requires_grad(out) && n > 0) {
        node(out).backward = [this, logits, out, n, probs = std::move(probs),
                              targets = std::vector<int>(targets.begin(), targets.end())] {
            const T g = node(out).grad(0, 0) / static_cast<T>(n);
            Mat<T>& gl = grad_ref(logits);
            for (std::size_t r = 0; r < targets.size(); ++r) {
                if (targets[r] < 0) continue;
                const auto row = static_cast<Eigen::Index>(r);
                auto p = probs.row(row).eval();
                p(targets[r]) -= T(1);
                gl.row(row) += p * g;
            }
        };
    }
    return out;
}

template <typename T>
void Graph<T>::backward(Var loss) {
    require(value(loss).size() == 1, "backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!requires_grad(loss)) return;
    grad_ref(loss).setOnes();
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad.size() == 0) continue;
        if (n.backward) {
            n.backward();
        } else if (n.param && n.param->trainable) {
            n.param->grad += n.grad;
        }
    }
}

template class Graph<float>;
template class Graph<double>;
template double cross_entropy_loss<float>(const Mat<float>&, std::span<const int>);
template double cross_entropy_loss<double>(const Mat<double>&, std::span<const int>);

}  // namespace markvqa
