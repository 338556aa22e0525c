#pragma once

#include <span>
#include <vector>

#include "markvqa/autograd.hpp"
#include "markvqa/marker.hpp"
#include "markvqa/vision.hpp"

namespace markvqa {

/// Two affine layers with GELU between, mapping visual channels C to decoder width D.
/// One instance serves both scene-level and instance-level prompts.
template <typename T>
struct ConnectedMlp {
    Parameter<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;

    ConnectedMlp() = default;
    ConnectedMlp(int in_dim, int hidden_dim, int out_dim, std::uint64_t seed);

    int in_dim() const { return static_cast<int>(fc1_weight.value.cols()); }
    int out_dim() const { return static_cast<int>(fc2_weight.value.rows()); }

    Var forward(Graph<T>& g, Var x);
    Mat<T> apply(const Mat<T>& x);
    void visit(const ParamVisitor<T>& fn);
};

/// 1 x (H'*W') row of weights that averages the feature cells selected by the mask
/// after nearest-neighbour resizing (cell centres sample the mask). If no cell
/// survives, the cell containing the mask centroid gets weight 1.
Mat<double> mask_pool_weights(const Mask& mask, int grid_h, int grid_w);

/// Which cells of the H' x W' grid are set after nearest-neighbour resizing.
std::vector<std::uint8_t> resize_mask_nearest(const Mask& mask, int grid_h, int grid_w);

/// Grid cell (row-major index) containing pixel coordinate p.
int cell_of(Point p, int height, int width, int grid_h, int grid_w);

template <typename T>
Mat<T> mask_average_pool(const FeatureMap<T>& features, const Mask& mask);

/// s_n x (H'*W') averaging matrix for non-overlapping f x f pooling; identity when
/// s_n == H'*W'. Throws ValidationError when no integer factor yields s_n tokens.
Mat<double> scene_pool_matrix(int grid_h, int grid_w, int scene_tokens);

template <typename T>
Var build_scene_prompts(Graph<T>& g, Var features, int grid_h, int grid_w, ConnectedMlp<T>& mlp, int scene_tokens);

template <typename T>
Mat<T> build_scene_prompts(const FeatureMap<T>& features, ConnectedMlp<T>& mlp, int scene_tokens);

/// Instance tokens in marker-index order. `features[v]` is the feature map of view v.
/// Returns an invalid Var when the map is empty.
template <typename T>
Var build_instance_prompts(Graph<T>& g, std::span<const Var> features, int height, int width, int grid_h, int grid_w,
                           const MarkerIndexMap& map, const std::vector<Detection>& detections, ConnectedMlp<T>& mlp,
                           std::vector<int>* index_order = nullptr);

template <typename T>
struct PromptBundle {
    Mat<T> scene_tokens;     // (m * s_n) x D
    Mat<T> instance_tokens;  // K x D
    std::vector<int> instance_index_order;

    Mat<T> tokens() const;
};

template <typename T>
PromptBundle<T> build_instance_prompts(const FeatureMap<T>& features, const MarkerIndexMap& map,
                                       const std::vector<Detection>& detections, ConnectedMlp<T>& mlp, int height,
                                       int width);

/// [view 1 scene tokens, ..., view m scene tokens, instance tokens].
template <typename T>
PromptBundle<T> assemble_bundle(const std::vector<Mat<T>>& scene_tokens_per_view, const Mat<T>& instance_tokens,
                                std::vector<int> instance_index_order);

extern template struct ConnectedMlp<float>;
extern template struct ConnectedMlp<double>;

}  // namespace markvqa
