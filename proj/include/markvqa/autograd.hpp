#pragma once

// Minimal tape-based reverse-mode autodiff over row-major 2-D matrices.
// Rows are tokens, columns are features. Values are Eigen matrices; Eigen
// supplies the GEMM kernels, everything else is written out by hand.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "markvqa/common.hpp"

namespace markvqa {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Named tensor with gradient buffer. Frozen parameters never receive gradients.
template <typename T>
struct Parameter {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    bool trainable = false;

    Parameter() = default;
    Parameter(std::string n, Mat<T> v, bool train) : name(std::move(n)), value(std::move(v)), trainable(train) {
        grad = Mat<T>::Zero(value.rows(), value.cols());
    }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// rows x cols matrix of N(0, stddev^2) draws, filled row-major.
template <typename T>
Mat<T> randn(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Mat<T> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<T>(rng.normal() * stddev);
    }
    return m;
}

/// Handle to a node on a Graph.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Mat<T> value);
    /// Leaf bound to an external parameter; gradients accumulate into p.grad when trainable.
    Var param(Parameter<T>& p);

    const Mat<T>& value(Var v) const;
    bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
    /// Gradient of the last backward() target w.r.t. v (zero if unreached).
    Mat<T> grad(Var v) const;

    Var add(Var a, Var b);
    Var add_row(Var a, Var row);  // broadcast a 1 x n row to every row of a
    Var scale(Var a, T s);
    Var matmul(Var a, Var b);      // a * b
    Var matmul_bt(Var a, Var b);   // a * b^T
    Var linear(Var x, Var weight, Var bias = {});  // x * W^T + b, W is out x in
    Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5));
    Var gelu(Var x);
    /// Multi-head scaled dot-product attention over L x D inputs, heads split by column blocks.
    Var attention(Var q, Var k, Var v, int heads, bool causal);
    /// Causal attention where key j is visible to query i only if segments[j] is 0
    /// (shared prefix) or equals segments[i]. One segment id per row.
    Var attention(Var q, Var k, Var v, int heads, std::span<const int> segments);
    Var slice_rows(Var a, int start, int count);
    Var concat_rows(std::span<const Var> parts);
    Var gather_rows(Var table, std::span<const int> ids);
    /// Mean token cross-entropy; targets < 0 are ignored. Returns a 1 x 1 node.
    Var cross_entropy(Var logits, std::span<const int> targets);

    /// Reverse sweep from a 1 x 1 node.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
        std::function<void()> backward;
    };

    Var push(Mat<T> value, bool requires_grad);
    Var attention_impl(Var q, Var k, Var v, int heads, bool causal, std::span<const int> segments);
    Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
    const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }
    /// Gradient buffer of v, allocated on first use.
    Mat<T>& grad_ref(Var v);

    std::vector<Node> nodes_;
};

/// Mean cross-entropy over non-ignored rows (targets < 0 ignored). Plain function form.
template <typename T>
double cross_entropy_loss(const Mat<T>& logits, std::span<const int> targets);

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace markvqa
