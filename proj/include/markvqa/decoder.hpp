#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "markvqa/autograd.hpp"
#include "markvqa/marker.hpp"
#include "markvqa/vision.hpp"
#include "markvqa/vocab.hpp"

namespace markvqa {

struct DecoderConfig {
    int vocab_size = 0;
    int embed_dim = 64;
    int depth = 2;
    int heads = 4;
    int max_seq_len = 512;
    int lora_rank = 16;
    double lora_alpha = 16;
    int mlp_ratio = 4;

    void validate() const;
};

template <typename T>
struct DecoderBlock {
    Parameter<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    LoraLinear<T> q, k, v, o, fc1, fc2;
};

/// Causal transformer over [prompt vectors, <bos>, question, answer]. The base
/// weights stand in for a pretrained language model and stay frozen; only the
/// rank-r adapters on attention and feed-forward layers train.
template <typename T>
class Decoder {
public:
    Decoder() = default;
    Decoder(const DecoderConfig& config, std::uint64_t seed);

    void attach_lora(std::uint64_t seed);
    bool has_lora() const { return has_lora_; }
    const DecoderConfig& config() const { return config_; }

    /// Logits for every position of [prompts; embed(ids)], (P + len(ids)) x V.
    Var forward_all(Graph<T>& g, Var prompts, std::span<const int> ids);

    /// Teacher-forced logits predicting answer_1..answer_n, <eos>: (n + 1) x V.
    Var answer_logits(Graph<T>& g, Var prompts, std::span<const int> question_ids, std::span<const int> answer_ids);

    /// answer_logits() for several samples sharing one prompt prefix, evaluated as a
    /// single packed sequence in which each sample attends to the prompts and itself.
    /// Returns the per-sample blocks stacked in order.
    Var packed_answer_logits(Graph<T>& g, Var prompts, std::span<const std::vector<int>> questions,
                             std::span<const std::vector<int>> answers);

    /// Next-token logits after [prompts, <bos>, question, prefix]: 1 x V.
    Mat<T> next_logits(const Mat<T>& prompts, std::span<const int> question_ids, std::span<const int> prefix);

    /// Sequence length consumed by a sample.
    static int sequence_length(int prompt_rows, std::size_t question_len, std::size_t answer_len) {
        return prompt_rows + 1 + static_cast<int>(question_len + answer_len);
    }

    void visit(const ParamVisitor<T>& fn);

private:
    Var hidden(Graph<T>& g, Var prompts, std::span<const int> ids);
    // positions and segments cover prompt rows followed by ids
    Var hidden(Graph<T>& g, Var prompts, std::span<const int> ids, std::span<const int> positions,
               std::span<const int> segments);

    DecoderConfig config_;
    bool has_lora_ = false;
    Parameter<T> tok_embed_, pos_embed_;
    std::vector<DecoderBlock<T>> blocks_;
    Parameter<T> ln_gain_, ln_bias_, head_;
};

/// Answer-position targets for teacher forcing: answer ids followed by <eos>.
std::vector<int> answer_targets(std::span<const int> answer_ids);

/// Mean cross-entropy over non-pad targets (pad = Vocab::kPad). Always >= 0.
template <typename T>
double loss(const Mat<T>& logits, std::span<const int> target_ids);

struct GenerationResult {
    std::vector<int> token_ids;
    std::string text;
    std::vector<int> referenced_indices;
    std::vector<std::optional<Point>> resolved_coords;  // aligned with referenced_indices
    bool hallucinated_marker = false;
    bool hit_length_limit = false;
};

/// Replace each <mK> in `ids` with "(x,y)" from the map; unknown K becomes "<unk-marker>".
GenerationResult resolve_markers(const Vocab& vocab, std::span<const int> ids, const MarkerIndexMap& map);

template <typename T>
GenerationResult generate(Decoder<T>& decoder, const Vocab& vocab, const Mat<T>& prompts,
                          std::span<const int> question_ids, const MarkerIndexMap& map, int max_new_tokens = 64);

inline constexpr const char* kUnknownMarker = "<unk-marker>";

extern template class Decoder<float>;
extern template class Decoder<double>;

}  // namespace markvqa
