#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "markvqa/decoder.hpp"
#include "markvqa/marker.hpp"
#include "markvqa/metrics.hpp"
#include "markvqa/prompts.hpp"
#include "markvqa/scene.hpp"
#include "markvqa/vision.hpp"
#include "markvqa/vocab.hpp"

namespace markvqa {

struct TrainConfig {
    // optimisation
    double initial_lr = 5e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // global-norm clip; <= 0 disables
    int batch_size = 4;      // scenes per step; all QA records of a scene share one encoder pass
    int total_iters = 2000;
    std::uint64_t seed = 0;
    double val_fraction = 0.2;  // trailing share of scenes held out by split_scenes()

    // pipeline switches
    int scene_token_count = 256;
    bool use_markers = true;
    bool use_instance_prompts = true;
    bool use_mcnet = true;
    double overlay_alpha = kDefaultOverlayAlpha;
    double distance_threshold = kDefaultDistanceThreshold;

    // model shape
    int image_height = 448;
    int image_width = 448;
    EncoderConfig encoder;
    int decoder_embed_dim = 64;
    int decoder_depth = 2;
    int decoder_heads = 4;
    int decoder_max_seq_len = 512;
    int mlp_hidden = 128;
    int max_new_tokens = 48;

    /// Throws ValidationError for inconsistent settings (e.g. MCNet without markers).
    void validate() const;

    nlohmann::json to_json() const;
    /// Missing keys keep their defaults; unknown keys are rejected.
    static TrainConfig from_json(const nlohmann::json& j);
    static TrainConfig load(const std::filesystem::path& path);
};

/// Cosine decay from the initial rate to zero over total_iters.
double cosine_lr(double initial_lr, long step, long total_iters);

/// Every component of the pipeline for one ablation setting.
template <typename T>
struct Model {
    TrainConfig config;
    Vocab vocab;
    MarkerControlNet<T> vision;
    ConnectedMlp<T> mlp;
    Decoder<T> decoder;

    void visit(const ParamVisitor<T>& fn);
    std::vector<Parameter<T>*> trainable();
    std::map<std::string, Parameter<T>*> named();
};

/// Build the model for `config`. use_markers=false feeds the original image where
/// the marker image would go and keeps coordinates as text; use_mcnet=false encodes
/// the (marker) image with the frozen encoder alone; use_instance_prompts=false
/// drops the instance tokens.
template <typename T>
Model<T> ablation_variant(const TrainConfig& config, Vocab vocab);

/// Scene-level view of the data as the model sees it.
template <typename T>
struct PreparedScene {
    const Scene* scene = nullptr;
    MarkerIndexMap map;
    std::vector<Image> encoder_inputs;   // what the frozen branch sees, per view
    std::vector<Image> marker_images;    // control-branch inputs, per view
    std::vector<Mat<T>> frozen_features; // cached frozen-branch output, per view
    std::vector<std::vector<int>> question_ids;
    std::vector<std::vector<int>> answer_ids;
};

/// Rewrite the "(x,y)" spans of `text` as <mK> tokens using `coords` (or the parsed
/// values when coords is shorter), growing `map` with question markers as needed.
std::string markerize(const std::string& text, const std::vector<Point>& coords, MarkerIndexMap& map, int height,
                      int width);

template <typename T>
PreparedScene<T> prepare_scene(Model<T>& model, const Scene& scene);

/// Prompt tokens (scene tokens for every view, then instance tokens) as a graph node.
template <typename T>
Var prompt_tokens(Graph<T>& g, Model<T>& model, const PreparedScene<T>& prep);

/// Mean token loss over all QA records of a scene; fills parameter gradients when backward is set.
template <typename T>
double scene_loss(Model<T>& model, const PreparedScene<T>& prep, bool backward, double weight = 1.0,
                  std::size_t* token_count = nullptr);

struct LossPoint {
    long iteration = 0;
    double lr = 0;
    double loss = 0;
};

template <typename T>
struct OptimizerState {
    long step = 0;
    std::map<std::string, Mat<T>> m, v;
};

template <typename T>
struct TrainResult {
    std::vector<LossPoint> curve;
    OptimizerState<T> optimizer;
};

using ProgressFn = std::function<void(const LossPoint&)>;

/// AdamW with decoupled weight decay over the trainable subset only.
template <typename T>
TrainResult<T> train(Model<T>& model, const std::vector<Scene>& scenes, const ProgressFn& progress = {});

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& curve);

/// Greedy answers for every QA record of every scene.
template <typename T>
std::vector<GenerationRecord> generate_answers(Model<T>& model, const std::vector<Scene>& scenes);

/// Vocabulary covering the standard templates plus any extra words in the scenes.
Vocab vocab_for(const std::vector<Scene>& scenes);

// --- checkpoints ---------------------------------------------------------

/// Archive: "MKVQCKPT", u32 version, u64 header length, JSON header, raw little-endian
/// float32 tensors. The header holds the config, vocabulary, iteration and tensor index.
void save_checkpoint(const std::filesystem::path& path, Model<float>& model, const OptimizerState<float>& optimizer,
                     long iteration);

struct LoadedCheckpoint {
    Model<float> model;
    OptimizerState<float> optimizer;
    long iteration = 0;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

extern template struct Model<float>;
extern template struct Model<double>;

}  // namespace markvqa
