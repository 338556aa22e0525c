#include "markvqa/prompts.hpp"

#include <algorithm>
#include <cmath>

namespace markvqa {

template <typename T>
ConnectedMlp<T>::ConnectedMlp(int in_dim, int hidden_dim, int out_dim, std::uint64_t seed) {
    Rng rng(seed);
    fc1_weight = Parameter<T>("mlp.fc1.weight", randn<T>(hidden_dim, in_dim, 1.0 / std::sqrt(double(in_dim)), rng), true);
    fc1_bias = Parameter<T>("mlp.fc1.bias", Mat<T>::Zero(1, hidden_dim), true);
    fc2_weight =
        Parameter<T>("mlp.fc2.weight", randn<T>(out_dim, hidden_dim, 1.0 / std::sqrt(double(hidden_dim)), rng), true);
    fc2_bias = Parameter<T>("mlp.fc2.bias", Mat<T>::Zero(1, out_dim), true);
}

template <typename T>
Var ConnectedMlp<T>::forward(Graph<T>& g, Var x) {
    Var h = g.gelu(g.linear(x, g.param(fc1_weight), g.param(fc1_bias)));
    return g.linear(h, g.param(fc2_weight), g.param(fc2_bias));
}

template <typename T>
Mat<T> ConnectedMlp<T>::apply(const Mat<T>& x) {
    Graph<T> g;
    return g.value(forward(g, g.constant(x)));
}

template <typename T>
void ConnectedMlp<T>::visit(const ParamVisitor<T>& fn) {
    fn(fc1_weight);
    fn(fc1_bias);
    fn(fc2_weight);
    fn(fc2_bias);
}

std::vector<std::uint8_t> resize_mask_nearest(const Mask& mask, int grid_h, int grid_w) {
    std::vector<std::uint8_t> cells(static_cast<std::size_t>(grid_h) * grid_w, 0);
    for (int i = 0; i < grid_h; ++i) {
        const int r = std::min(mask.height - 1, static_cast<int>((2LL * i + 1) * mask.height / (2LL * grid_h)));
        for (int j = 0; j < grid_w; ++j) {
            const int c = std::min(mask.width - 1, static_cast<int>((2LL * j + 1) * mask.width / (2LL * grid_w)));
            cells[static_cast<std::size_t>(i) * grid_w + j] = mask.get(r, c) ? 1 : 0;
        }
    }
    return cells;
}

int cell_of(Point p, int height, int width, int grid_h, int grid_w) {
    const int i = std::clamp(static_cast<int>(std::floor(p.y * grid_h / height)), 0, grid_h - 1);
    const int j = std::clamp(static_cast<int>(std::floor(p.x * grid_w / width)), 0, grid_w - 1);
    return i * grid_w + j;
}

Mat<double> mask_pool_weights(const Mask& mask, int grid_h, int grid_w) {
    if (mask.count() == 0) throw ValidationError("mask average pooling over an empty mask");
    const auto cells = resize_mask_nearest(mask, grid_h, grid_w);
    Mat<double> w = Mat<double>::Zero(1, static_cast<Eigen::Index>(cells.size()));
    const auto n = std::count(cells.begin(), cells.end(), std::uint8_t{1});
    if (n == 0) {
        w(0, cell_of(compute_centroid(mask), mask.height, mask.width, grid_h, grid_w)) = 1.0;
        return w;
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i]) w(0, static_cast<Eigen::Index>(i)) = 1.0 / static_cast<double>(n);
    }
    return w;
}

template <typename T>
Mat<T> mask_average_pool(const FeatureMap<T>& features, const Mask& mask) {
    const Mat<T> w = mask_pool_weights(mask, features.grid_h, features.grid_w).template cast<T>();
    if (w.cols() != features.data.rows()) throw ValidationError("feature map does not match grid");
    return w * features.data;
}

Mat<double> scene_pool_matrix(int grid_h, int grid_w, int scene_tokens) {
    const int n = grid_h * grid_w;
    if (scene_tokens == n) return Mat<double>::Identity(n, n);
    for (int f = 2; f <= std::min(grid_h, grid_w); ++f) {
        if (grid_h % f != 0 || grid_w % f != 0 || (grid_h / f) * (grid_w / f) != scene_tokens) continue;
        const int oh = grid_h / f, ow = grid_w / f;
        Mat<double> p = Mat<double>::Zero(scene_tokens, n);
        const double w = 1.0 / (f * f);
        for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
                for (int di = 0; di < f; ++di) {
                    for (int dj = 0; dj < f; ++dj) p(i * ow + j, (i * f + di) * grid_w + (j * f + dj)) = w;
                }
            }
        }
        return p;
    }
    throw ValidationError("cannot pool a " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid to " +
                          std::to_string(scene_tokens) + " tokens");
}

template <typename T>
Var build_scene_prompts(Graph<T>& g, Var features, int grid_h, int grid_w, ConnectedMlp<T>& mlp, int scene_tokens) {
    Var tokens = features;
    if (scene_tokens != grid_h * grid_w) {
        tokens = g.matmul(g.constant(scene_pool_matrix(grid_h, grid_w, scene_tokens).template cast<T>()), features);
    } else if (scene_tokens <= 0) {
        throw ValidationError("scene token count must be positive");
    }
    return mlp.forward(g, tokens);
}

template <typename T>
Mat<T> build_scene_prompts(const FeatureMap<T>& features, ConnectedMlp<T>& mlp, int scene_tokens) {
    Graph<T> g;
    return g.value(build_scene_prompts(g, g.constant(features.data), features.grid_h, features.grid_w, mlp, scene_tokens));
}

template <typename T>
Var build_instance_prompts(Graph<T>& g, std::span<const Var> features, int height, int width, int grid_h, int grid_w,
                           const MarkerIndexMap& map, const std::vector<Detection>& detections, ConnectedMlp<T>& mlp,
                           std::vector<int>* index_order) {
    if (map.detection_count() > detections.size()) throw ValidationError("marker map does not match detections");
    if (map.size() == 0) return {};
    std::vector<Var> pooled;
    pooled.reserve(map.size());
    for (const auto& e : map.entries()) {
        if (e.view < 0 || static_cast<std::size_t>(e.view) >= features.size()) throw ValidationError("marker view out of range");
        Mat<T> w;
        if (e.source == MarkerSource::detection) {
            w = mask_pool_weights(detections[static_cast<std::size_t>(e.index - 1)].mask, grid_h, grid_w).template cast<T>();
        } else {
            w = Mat<T>::Zero(1, grid_h * grid_w);
            w(0, cell_of(e.centroid, height, width, grid_h, grid_w)) = T(1);
        }
        pooled.push_back(g.matmul(g.constant(std::move(w)), features[static_cast<std::size_t>(e.view)]));
        if (index_order) index_order->push_back(e.index);
    }
    return mlp.forward(g, g.concat_rows(pooled));
}

template <typename T>
Mat<T> PromptBundle<T>::tokens() const {
    Mat<T> out(scene_tokens.rows() + instance_tokens.rows(), std::max(scene_tokens.cols(), instance_tokens.cols()));
    if (scene_tokens.rows() > 0) out.topRows(scene_tokens.rows()) = scene_tokens;
    if (instance_tokens.rows() > 0) out.bottomRows(instance_tokens.rows()) = instance_tokens;
    return out;
}

template <typename T>
PromptBundle<T> build_instance_prompts(const FeatureMap<T>& features, const MarkerIndexMap& map,
                                       const std::vector<Detection>& detections, ConnectedMlp<T>& mlp, int height,
                                       int width) {
    Graph<T> g;
    const Var f = g.constant(features.data);
    PromptBundle<T> out;
    const Var tokens = build_instance_prompts<T>(g, std::span<const Var>(&f, 1), height, width, features.grid_h,
                                                 features.grid_w, map, detections, mlp, &out.instance_index_order);
    out.instance_tokens = tokens.valid() ? g.value(tokens) : Mat<T>(0, mlp.out_dim());
    return out;
}

template <typename T>
PromptBundle<T> assemble_bundle(const std::vector<Mat<T>>& scene_tokens_per_view, const Mat<T>& instance_tokens,
                                std::vector<int> instance_index_order) {
    Eigen::Index rows = 0;
    Eigen::Index dim = instance_tokens.rows() > 0 ? instance_tokens.cols() : -1;
    for (const auto& s : scene_tokens_per_view) {
        if (dim >= 0 && s.cols() != dim) throw ValidationError("prompt token widths differ");
        dim = s.cols();
        rows += s.rows();
    }
    if (static_cast<std::size_t>(instance_tokens.rows()) != instance_index_order.size()) {
        throw ValidationError("instance tokens and index order differ in length");
    }
    PromptBundle<T> out;
    out.scene_tokens.resize(rows, std::max<Eigen::Index>(dim, 0));
    Eigen::Index at = 0;
    for (const auto& s : scene_tokens_per_view) {
        out.scene_tokens.middleRows(at, s.rows()) = s;
        at += s.rows();
    }
    out.instance_tokens = instance_tokens;
    out.instance_index_order = std::move(instance_index_order);
    return out;
}

template struct ConnectedMlp<float>;
template struct ConnectedMlp<double>;
template struct PromptBundle<float>;
template struct PromptBundle<double>;
template Mat<float> mask_average_pool<float>(const FeatureMap<float>&, const Mask&);
template Mat<double> mask_average_pool<double>(const FeatureMap<double>&, const Mask&);
template Var build_scene_prompts<float>(Graph<float>&, Var, int, int, ConnectedMlp<float>&, int);
template Var build_scene_prompts<double>(Graph<double>&, Var, int, int, ConnectedMlp<double>&, int);
template Mat<float> build_scene_prompts<float>(const FeatureMap<float>&, ConnectedMlp<float>&, int);
template Mat<double> build_scene_prompts<double>(const FeatureMap<double>&, ConnectedMlp<double>&, int);
template Var build_instance_prompts<float>(Graph<float>&, std::span<const Var>, int, int, int, int,
                                           const MarkerIndexMap&, const std::vector<Detection>&, ConnectedMlp<float>&,
                                           std::vector<int>*);
template Var build_instance_prompts<double>(Graph<double>&, std::span<const Var>, int, int, int, int,
                                            const MarkerIndexMap&, const std::vector<Detection>&,
                                            ConnectedMlp<double>&, std::vector<int>*);
template PromptBundle<float> build_instance_prompts<float>(const FeatureMap<float>&, const MarkerIndexMap&,
                                                           const std::vector<Detection>&, ConnectedMlp<float>&, int,
                                                           int);
template PromptBundle<double> build_instance_prompts<double>(const FeatureMap<double>&, const MarkerIndexMap&,
                                                             const std::vector<Detection>&, ConnectedMlp<double>&, int,
                                                             int);
template PromptBundle<float> assemble_bundle<float>(const std::vector<Mat<float>>&, const Mat<float>&, std::vector<int>);
template PromptBundle<double> assemble_bundle<double>(const std::vector<Mat<double>>&, const Mat<double>&,
                                                      std::vector<int>);

}  // namespace markvqa
