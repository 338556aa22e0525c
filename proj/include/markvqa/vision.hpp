#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "markvqa/autograd.hpp"
#include "markvqa/image.hpp"

namespace markvqa {

struct EncoderConfig {
    int patch_size = 28;
    int embed_dim = 64;
    int depth = 2;
    int heads = 4;
    int lora_rank = 16;
    double lora_alpha = 16;  // adapter output is scaled by lora_alpha / lora_rank
    int mlp_ratio = 4;

    void validate() const;
    /// Throws ValidationError unless both sides divide by patch_size.
    void check_image(int height, int width) const;
    int patch_dim() const { return patch_size * patch_size * 3; }
};

/// H' x W' x C feature grid stored as (H'*W') x C, row-major over cells.
template <typename T>
struct FeatureMap {
    int grid_h = 0;
    int grid_w = 0;
    Mat<T> data;

    int channels() const { return static_cast<int>(data.cols()); }
    bool all_finite() const { return data.allFinite(); }
};

/// Visits every parameter with its checkpoint name.
template <typename T>
using ParamVisitor = std::function<void(Parameter<T>&)>;

/// Frozen affine layer with an optional low-rank adapter:
/// y = x W^T + b + scaling * (x down^T) up^T. `up` starts at zero.
template <typename T>
struct LoraLinear {
    Parameter<T> weight;  // out x in, frozen
    Parameter<T> bias;    // 1 x out, frozen
    Parameter<T> down;    // rank x in, trainable
    Parameter<T> up;      // out x rank, trainable
    T scaling = T(0);
    bool has_lora = false;

    LoraLinear() = default;
    LoraLinear(const std::string& name, int in, int out, Rng& rng);

    /// Attach a rank-r adapter scaled by alpha / r; `name` prefixes the adapter tensors.
    void attach_lora(const std::string& name, int rank, double alpha, Rng& rng);
    Var forward(Graph<T>& g, Var x);
    void visit(const ParamVisitor<T>& fn);
};

/// Plain forward of a LoraLinear on a matrix (no graph).
template <typename T>
Mat<T> lora_forward(LoraLinear<T>& layer, const Mat<T>& x);

/// C -> C linear applied per grid cell; weight and bias start at exactly zero.
template <typename T>
struct ZeroLinear {
    Parameter<T> weight;
    Parameter<T> bias;

    ZeroLinear() = default;
    explicit ZeroLinear(int channels);
    Var forward(Graph<T>& g, Var x);
    void visit(const ParamVisitor<T>& fn);
};

template <typename T>
struct EncoderBlock {
    Parameter<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    LoraLinear<T> q, k, v, o, fc1, fc2;
};

/// Pre-norm patch transformer.
template <typename T>
class Encoder {
public:
    Encoder() = default;
    /// Random frozen weights; `prefix` names the tensors (e.g. "enc.frozen").
    Encoder(const EncoderConfig& config, int grid_cells, std::uint64_t seed, std::string prefix = "enc.frozen");

    /// Weight-for-weight copy under a new name prefix, with LoRA adapters on the
    /// attention projections and feed-forward layers. The copy's base stays frozen.
    Encoder trainable_copy(std::string prefix, std::uint64_t lora_seed) const;

    const EncoderConfig& config() const { return config_; }
    int grid_cells() const { return grid_cells_; }

    /// Patch matrix (cells x patch_dim) fed to forward().
    Mat<T> patchify(const Image& image) const;
    Var forward(Graph<T>& g, Var patches);
    FeatureMap<T> encode(const Image& image);

    void visit(const ParamVisitor<T>& fn);

private:
    EncoderConfig config_;
    int grid_cells_ = 0;
    std::string prefix_;
    Parameter<T> patch_weight_, patch_bias_, pos_embed_;
    std::vector<EncoderBlock<T>> blocks_;
    Parameter<T> ln_gain_, ln_bias_;
};

/// Frozen encoder plus a trainable control copy joined by a zero linear:
/// y_s = E(I) + Z(E_c(I_m)).
template <typename T>
class MarkerControlNet {
public:
    MarkerControlNet() = default;
    MarkerControlNet(const EncoderConfig& config, int height, int width, std::uint64_t seed);

    Encoder<T>& frozen() { return frozen_; }
    Encoder<T>& control() { return control_; }
    ZeroLinear<T>& zero() { return zero_; }
    int grid_h() const { return grid_h_; }
    int grid_w() const { return grid_w_; }

    /// Fused features as a graph node. `frozen_features`, when given, is E(I) computed earlier.
    Var forward(Graph<T>& g, const Image& image, const Image& marker_image,
                const Mat<T>* frozen_features = nullptr);
    FeatureMap<T> mcnet_forward(const Image& image, const Image& marker_image);
    FeatureMap<T> encode(const Image& image) { return frozen_.encode(image); }

    void visit(const ParamVisitor<T>& fn);

private:
    Encoder<T> frozen_;
    Encoder<T> control_;
    ZeroLinear<T> zero_;
    int grid_h_ = 0;
    int grid_w_ = 0;
};

extern template struct LoraLinear<float>;
extern template struct LoraLinear<double>;
extern template class Encoder<float>;
extern template class Encoder<double>;
extern template class MarkerControlNet<float>;
extern template class MarkerControlNet<double>;

}  // namespace markvqa
