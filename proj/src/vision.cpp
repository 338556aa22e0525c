#include "markvqa/vision.hpp"

#include <cmath>

namespace markvqa {

void EncoderConfig::validate() const {
    if (patch_size < 1 || embed_dim < 1 || depth < 0 || heads < 1 || lora_rank < 1 || !(lora_alpha > 0) || mlp_ratio < 1) {
        throw ValidationError("encoder dimensions must be positive");
    }
    if (embed_dim % heads != 0) throw ValidationError("embed_dim must be divisible by heads");
}

void EncoderConfig::check_image(int height, int width) const {
    if (height <= 0 || width <= 0 || height % patch_size != 0 || width % patch_size != 0) {
        throw ValidationError("image " + std::to_string(height) + "x" + std::to_string(width) +
                              " is not divisible by patch size " + std::to_string(patch_size));
    }
}

// ---------------------------------------------------------------------------

template <typename T>
LoraLinear<T>::LoraLinear(const std::string& name, int in, int out, Rng& rng)
    : weight(name + ".weight", randn<T>(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng), false),
      bias(name + ".bias", Mat<T>::Zero(1, out), false) {}

template <typename T>
void LoraLinear<T>::attach_lora(const std::string& name, int rank, double alpha, Rng& rng) {
    const auto in = weight.value.cols();
    const auto out = weight.value.rows();
    down = Parameter<T>(name + ".down", randn<T>(rank, in, 1.0 / std::sqrt(static_cast<double>(in)), rng), true);
    up = Parameter<T>(name + ".up", Mat<T>::Zero(out, rank), true);
    scaling = static_cast<T>(alpha / rank);
    has_lora = true;
}

template <typename T>
Var LoraLinear<T>::forward(Graph<T>& g, Var x) {
    Var y = g.linear(x, g.param(weight), g.param(bias));
    if (!has_lora) return y;
    Var low = g.matmul_bt(x, g.param(down));
    Var delta = g.matmul_bt(low, g.param(up));
    return g.add(y, g.scale(delta, scaling));
}

template <typename T>
void LoraLinear<T>::visit(const ParamVisitor<T>& fn) {
    fn(weight);
    fn(bias);
    if (has_lora) {
        fn(down);
        fn(up);
    }
}

template <typename T>
Mat<T> lora_forward(LoraLinear<T>& layer, const Mat<T>& x) {
    Graph<T> g;
    return g.value(layer.forward(g, g.constant(x)));
}

// ---------------------------------------------------------------------------

template <typename T>
ZeroLinear<T>::ZeroLinear(int channels)
    : weight("enc.zero.weight", Mat<T>::Zero(channels, channels), true), bias("enc.zero.bias", Mat<T>::Zero(1, channels), true) {}

template <typename T>
Var ZeroLinear<T>::forward(Graph<T>& g, Var x) {
    return g.linear(x, g.param(weight), g.param(bias));
}

template <typename T>
void ZeroLinear<T>::visit(const ParamVisitor<T>& fn) {
    fn(weight);
    fn(bias);
}

// ---------------------------------------------------------------------------

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& config, int grid_cells, std::uint64_t seed, std::string prefix)
    : config_(config), grid_cells_(grid_cells), prefix_(std::move(prefix)) {
    config_.validate();
    Rng rng(seed);
    const int c = config_.embed_dim;
    const int hidden = c * config_.mlp_ratio;
    const int pd = config_.patch_dim();
    const std::string& p = prefix_;
    patch_weight_ = Parameter<T>(p + ".patch.weight", randn<T>(c, pd, 1.0 / std::sqrt(static_cast<double>(pd)), rng), false);
    patch_bias_ = Parameter<T>(p + ".patch.bias", Mat<T>::Zero(1, c), false);
    pos_embed_ = Parameter<T>(p + ".pos_embed", randn<T>(grid_cells, c, 0.1, rng), false);
    for (int b = 0; b < config_.depth; ++b) {
        const std::string bp = p + ".blocks." + std::to_string(b);
        EncoderBlock<T> blk;
        blk.ln1_gain = Parameter<T>(bp + ".ln1.gain", Mat<T>::Ones(1, c), false);
        blk.ln1_bias = Parameter<T>(bp + ".ln1.bias", Mat<T>::Zero(1, c), false);
        blk.ln2_gain = Parameter<T>(bp + ".ln2.gain", Mat<T>::Ones(1, c), false);
        blk.ln2_bias = Parameter<T>(bp + ".ln2.bias", Mat<T>::Zero(1, c), false);
        blk.q = LoraLinear<T>(bp + ".attn.q", c, c, rng);
        blk.k = LoraLinear<T>(bp + ".attn.k", c, c, rng);
        blk.v = LoraLinear<T>(bp + ".attn.v", c, c, rng);
        blk.o = LoraLinear<T>(bp + ".attn.o", c, c, rng);
        blk.fc1 = LoraLinear<T>(bp + ".mlp.fc1", c, hidden, rng);
        blk.fc2 = LoraLinear<T>(bp + ".mlp.fc2", hidden, c, rng);
        blocks_.push_back(std::move(blk));
    }
    ln_gain_ = Parameter<T>(p + ".ln.gain", Mat<T>::Ones(1, c), false);
    ln_bias_ = Parameter<T>(p + ".ln.bias", Mat<T>::Zero(1, c), false);
}

namespace {

std::string rename(const std::string& name, const std::string& from, const std::string& to) {
    return name.rfind(from, 0) == 0 ? to + name.substr(from.size()) : name;
}

}  // namespace

template <typename T>
Encoder<T> Encoder<T>::trainable_copy(std::string prefix, std::uint64_t lora_seed) const {
    Encoder copy = *this;
    const std::string old_prefix = prefix_;
    copy.prefix_ = std::move(prefix);
    copy.visit([&](Parameter<T>& p) {
        p.name = rename(p.name, old_prefix, copy.prefix_);
        p.trainable = false;
    });
    Rng rng(lora_seed);
    const std::string lora_prefix = copy.prefix_ + ".lora";
    for (std::size_t b = 0; b < copy.blocks_.size(); ++b) {
        const std::string bp = lora_prefix + ".blocks." + std::to_string(b);
        auto& blk = copy.blocks_[b];
        blk.q.attach_lora(bp + ".attn.q", config_.lora_rank, config_.lora_alpha, rng);
        blk.k.attach_lora(bp + ".attn.k", config_.lora_rank, config_.lora_alpha, rng);
        blk.v.attach_lora(bp + ".attn.v", config_.lora_rank, config_.lora_alpha, rng);
        blk.o.attach_lora(bp + ".attn.o", config_.lora_rank, config_.lora_alpha, rng);
        blk.fc1.attach_lora(bp + ".mlp.fc1", config_.lora_rank, config_.lora_alpha, rng);
        blk.fc2.attach_lora(bp + ".mlp.fc2", config_.lora_rank, config_.lora_alpha, rng);
    }
    return copy;
}

template <typename T>
Mat<T> Encoder<T>::patchify(const Image& image) const {
    config_.check_image(image.height, image.width);
    const int ps = config_.patch_size;
    const int gh = image.height / ps, gw = image.width / ps;
    if (gh * gw != grid_cells_) throw ValidationError("image grid does not match encoder positional table");
    Mat<T> patches(gh * gw, config_.patch_dim());
    for (int pr = 0; pr < gh; ++pr) {
        for (int pc = 0; pc < gw; ++pc) {
            T* dst = patches.row(pr * gw + pc).data();
            for (int r = 0; r < ps; ++r) {
                const std::uint8_t* src = image.at(pr * ps + r, pc * ps);
                for (int i = 0; i < ps * 3; ++i) *dst++ = static_cast<T>(src[i]) / T(255) - T(0.5);
            }
        }
    }
    return patches;
}

template <typename T>
Var Encoder<T>::forward(Graph<T>& g, Var patches) {
    if (g.value(patches).rows() != grid_cells_ || g.value(patches).cols() != config_.patch_dim()) {
        throw ValidationError("patch matrix shape mismatch");
    }
    Var x = g.linear(patches, g.param(patch_weight_), g.param(patch_bias_));
    x = g.add(x, g.param(pos_embed_));
    for (auto& blk : blocks_) {
        Var h = g.layer_norm(x, g.param(blk.ln1_gain), g.param(blk.ln1_bias));
        Var a = g.attention(blk.q.forward(g, h), blk.k.forward(g, h), blk.v.forward(g, h), config_.heads, false);
        x = g.add(x, blk.o.forward(g, a));
        h = g.layer_norm(x, g.param(blk.ln2_gain), g.param(blk.ln2_bias));
        x = g.add(x, blk.fc2.forward(g, g.gelu(blk.fc1.forward(g, h))));
    }
    return g.layer_norm(x, g.param(ln_gain_), g.param(ln_bias_));
}

template <typename T>
FeatureMap<T> Encoder<T>::encode(const Image& image) {
    Graph<T> g;
    Var out = forward(g, g.constant(patchify(image)));
    const int ps = config_.patch_size;
    return {image.height / ps, image.width / ps, g.value(out)};
}

template <typename T>
void Encoder<T>::visit(const ParamVisitor<T>& fn) {
    fn(patch_weight_);
    fn(patch_bias_);
    fn(pos_embed_);
    for (auto& blk : blocks_) {
        fn(blk.ln1_gain);
        fn(blk.ln1_bias);
        blk.q.visit(fn);
        blk.k.visit(fn);
        blk.v.visit(fn);
        blk.o.visit(fn);
        fn(blk.ln2_gain);
        fn(blk.ln2_bias);
        blk.fc1.visit(fn);
        blk.fc2.visit(fn);
    }
    fn(ln_gain_);
    fn(ln_bias_);
}

// ---------------------------------------------------------------------------

template <typename T>
MarkerControlNet<T>::MarkerControlNet(const EncoderConfig& config, int height, int width, std::uint64_t seed) {
    config.check_image(height, width);
    grid_h_ = height / config.patch_size;
    grid_w_ = width / config.patch_size;
    frozen_ = Encoder<T>(config, grid_h_ * grid_w_, mix_seed(seed, 1), "enc.frozen");
    control_ = frozen_.trainable_copy("enc.ctrl", mix_seed(seed, 2));
    zero_ = ZeroLinear<T>(config.embed_dim);
}

template <typename T>
Var MarkerControlNet<T>::forward(Graph<T>& g, const Image& image, const Image& marker_image,
                                 const Mat<T>* frozen_features) {
    if (image.height != marker_image.height || image.width != marker_image.width) {
        throw ValidationError("image and marker image differ in size");
    }
    Var base = frozen_features ? g.constant(*frozen_features) : frozen_.forward(g, g.constant(frozen_.patchify(image)));
    Var ctrl = control_.forward(g, g.constant(control_.patchify(marker_image)));
    Var injected = zero_.forward(g, ctrl);
    if (g.value(base).rows() != g.value(injected).rows() || g.value(base).cols() != g.value(injected).cols()) {
        throw ValidationError("branch outputs differ in shape");
    }
    return g.add(base, injected);
}

template <typename T>
FeatureMap<T> MarkerControlNet<T>::mcnet_forward(const Image& image, const Image& marker_image) {
    Graph<T> g;
    Var out = forward(g, image, marker_image);
    return {grid_h_, grid_w_, g.value(out)};
}

template <typename T>
void MarkerControlNet<T>::visit(const ParamVisitor<T>& fn) {
    frozen_.visit(fn);
    control_.visit(fn);
    zero_.visit(fn);
}

template struct LoraLinear<float>;
template struct LoraLinear<double>;
template Mat<float> lora_forward<float>(LoraLinear<float>&, const Mat<float>&);
template Mat<double> lora_forward<double>(LoraLinear<double>&, const Mat<double>&);
template struct ZeroLinear<float>;
template struct ZeroLinear<double>;
template class Encoder<float>;
template class Encoder<double>;
template class MarkerControlNet<float>;
template class MarkerControlNet<double>;

}  // namespace markvqa
