#include "markvqa/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace markvqa {

void DecoderConfig::validate() const {
    if (vocab_size < 3) throw ValidationError("decoder vocab_size must cover the special tokens");
    if (embed_dim < 1 || depth < 0 || heads < 1 || max_seq_len < 2 || lora_rank < 1 || !(lora_alpha > 0) || mlp_ratio < 1) {
        throw ValidationError("decoder dimensions must be positive");
    }
    if (embed_dim % heads != 0) throw ValidationError("decoder embed_dim must be divisible by heads");
}

template <typename T>
Decoder<T>::Decoder(const DecoderConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const int d = config_.embed_dim;
    const int hidden = d * config_.mlp_ratio;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    tok_embed_ = Parameter<T>("dec.tok_embed", randn<T>(config_.vocab_size, d, 1.0, rng), false);
    pos_embed_ = Parameter<T>("dec.pos_embed", randn<T>(config_.max_seq_len, d, 0.1, rng), false);
    for (int b = 0; b < config_.depth; ++b) {
        const std::string bp = "dec.blocks." + std::to_string(b);
        DecoderBlock<T> blk;
        blk.ln1_gain = Parameter<T>(bp + ".ln1.gain", Mat<T>::Ones(1, d), false);
        blk.ln1_bias = Parameter<T>(bp + ".ln1.bias", Mat<T>::Zero(1, d), false);
        blk.ln2_gain = Parameter<T>(bp + ".ln2.gain", Mat<T>::Ones(1, d), false);
        blk.ln2_bias = Parameter<T>(bp + ".ln2.bias", Mat<T>::Zero(1, d), false);
        blk.q = LoraLinear<T>(bp + ".attn.q", d, d, rng);
        blk.k = LoraLinear<T>(bp + ".attn.k", d, d, rng);
        blk.v = LoraLinear<T>(bp + ".attn.v", d, d, rng);
        blk.o = LoraLinear<T>(bp + ".attn.o", d, d, rng);
        blk.fc1 = LoraLinear<T>(bp + ".mlp.fc1", d, hidden, rng);
        blk.fc2 = LoraLinear<T>(bp + ".mlp.fc2", hidden, d, rng);
        blocks_.push_back(std::move(blk));
    }
    ln_gain_ = Parameter<T>("dec.ln.gain", Mat<T>::Ones(1, d), false);
    ln_bias_ = Parameter<T>("dec.ln.bias", Mat<T>::Zero(1, d), false);
    // logit range wide enough for confident predictions through a frozen head
    head_ = Parameter<T>("dec.head", randn<T>(config_.vocab_size, d, 2.0 * inv_sqrt_d, rng), false);
}

template <typename T>
void Decoder<T>::attach_lora(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const std::string bp = "dec.lora.blocks." + std::to_string(b);
        auto& blk = blocks_[b];
        blk.q.attach_lora(bp + ".attn.q", config_.lora_rank, config_.lora_alpha, rng);
        blk.k.attach_lora(bp + ".attn.k", config_.lora_rank, config_.lora_alpha, rng);
        blk.v.attach_lora(bp + ".attn.v", config_.lora_rank, config_.lora_alpha, rng);
        blk.o.attach_lora(bp + ".attn.o", config_.lora_rank, config_.lora_alpha, rng);
        blk.fc1.attach_lora(bp + ".mlp.fc1", config_.lora_rank, config_.lora_alpha, rng);
        blk.fc2.attach_lora(bp + ".mlp.fc2", config_.lora_rank, config_.lora_alpha, rng);
    }
    has_lora_ = true;
}

template <typename T>
Var Decoder<T>::hidden(Graph<T>& g, Var prompts, std::span<const int> ids) {
    const int prompt_rows = prompts.valid() ? static_cast<int>(g.value(prompts).rows()) : 0;
    std::vector<int> positions(static_cast<std::size_t>(prompt_rows) + ids.size());
    std::iota(positions.begin(), positions.end(), 0);
    return hidden(g, prompts, ids, positions, {});
}

template <typename T>
Var Decoder<T>::hidden(Graph<T>& g, Var prompts, std::span<const int> ids, std::span<const int> positions,
                       std::span<const int> segments) {
    const int prompt_rows = prompts.valid() ? static_cast<int>(g.value(prompts).rows()) : 0;
    const int length = prompt_rows + static_cast<int>(ids.size());
    const int furthest = positions.empty() ? 0 : *std::max_element(positions.begin(), positions.end()) + 1;
    if (furthest > config_.max_seq_len) {
        throw ValidationError("sequence length " + std::to_string(furthest) + " exceeds max_seq_len " +
                              std::to_string(config_.max_seq_len));
    }
    if (prompts.valid() && g.value(prompts).cols() != config_.embed_dim) {
        throw ValidationError("prompt width differs from decoder embed_dim");
    }
    if (length == 0) throw ValidationError("empty decoder input");
    std::vector<Var> parts;
    if (prompts.valid()) parts.push_back(prompts);
    if (!ids.empty()) parts.push_back(g.gather_rows(g.param(tok_embed_), ids));
    Var x = parts.size() == 1 ? parts[0] : g.concat_rows(parts);
    x = g.add(x, g.gather_rows(g.param(pos_embed_), positions));
    for (auto& blk : blocks_) {
        Var h = g.layer_norm(x, g.param(blk.ln1_gain), g.param(blk.ln1_bias));
        Var q = blk.q.forward(g, h), k = blk.k.forward(g, h), v = blk.v.forward(g, h);
        Var a = segments.empty() ? g.attention(q, k, v, config_.heads, true)
                                 : g.attention(q, k, v, config_.heads, segments);
        x = g.add(x, blk.o.forward(g, a));
        h = g.layer_norm(x, g.param(blk.ln2_gain), g.param(blk.ln2_bias));
        x = g.add(x, blk.fc2.forward(g, g.gelu(blk.fc1.forward(g, h))));
    }
    return g.layer_norm(x, g.param(ln_gain_), g.param(ln_bias_));
}

template <typename T>
Var Decoder<T>::forward_all(Graph<T>& g, Var prompts, std::span<const int> ids) {
    return g.matmul_bt(hidden(g, prompts, ids), g.param(head_));
}

namespace {

std::vector<int> text_sequence(std::span<const int> question, std::span<const int> answer) {
    std::vector<int> ids;
    ids.reserve(1 + question.size() + answer.size());
    ids.push_back(Vocab::kBos);
    ids.insert(ids.end(), question.begin(), question.end());
    ids.insert(ids.end(), answer.begin(), answer.end());
    return ids;
}

}  // namespace

template <typename T>
Var Decoder<T>::answer_logits(Graph<T>& g, Var prompts, std::span<const int> question_ids,
                              std::span<const int> answer_ids) {
    const std::vector<int> ids = text_sequence(question_ids, answer_ids);
    Var h = hidden(g, prompts, ids);
    const int prompt_rows = prompts.valid() ? static_cast<int>(g.value(prompts).rows()) : 0;
    const int first = prompt_rows + static_cast<int>(question_ids.size());
    Var rows = g.slice_rows(h, first, static_cast<int>(answer_ids.size()) + 1);
    return g.matmul_bt(rows, g.param(head_));
}

template <typename T>
Var Decoder<T>::packed_answer_logits(Graph<T>& g, Var prompts, std::span<const std::vector<int>> questions,
                                     std::span<const std::vector<int>> answers) {
    if (questions.size() != answers.size()) throw ValidationError("question and answer counts differ");
    if (questions.empty()) throw ValidationError("no samples to pack");
    const int prompt_rows = prompts.valid() ? static_cast<int>(g.value(prompts).rows()) : 0;
    std::vector<int> ids, positions(static_cast<std::size_t>(prompt_rows)), segments(positions.size(), 0);
    std::iota(positions.begin(), positions.end(), 0);
    std::vector<int> starts;
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const std::vector<int> block = text_sequence(questions[i], answers[i]);
        starts.push_back(prompt_rows + static_cast<int>(ids.size()));
        for (std::size_t j = 0; j < block.size(); ++j) {
            ids.push_back(block[j]);
            positions.push_back(prompt_rows + static_cast<int>(j));
            segments.push_back(static_cast<int>(i) + 1);
        }
    }
    Var h = hidden(g, prompts, ids, positions, segments);
    std::vector<Var> rows;
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const int first = starts[i] + static_cast<int>(questions[i].size());
        rows.push_back(g.slice_rows(h, first, static_cast<int>(answers[i].size()) + 1));
    }
    Var picked = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
    return g.matmul_bt(picked, g.param(head_));
}

template <typename T>
Mat<T> Decoder<T>::next_logits(const Mat<T>& prompts, std::span<const int> question_ids, std::span<const int> prefix) {
    Graph<T> g;
    Var p = prompts.rows() > 0 ? g.constant(prompts) : Var{};
    const std::vector<int> ids = text_sequence(question_ids, prefix);
    Var h = hidden(g, p, ids);
    Var last = g.slice_rows(h, static_cast<int>(g.value(h).rows()) - 1, 1);
    return g.value(g.matmul_bt(last, g.param(head_)));
}

template <typename T>
void Decoder<T>::visit(const ParamVisitor<T>& fn) {
    fn(tok_embed_);
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
    fn(head_);
}

std::vector<int> answer_targets(std::span<const int> answer_ids) {
    std::vector<int> t(answer_ids.begin(), answer_ids.end());
    t.push_back(Vocab::kEos);
    return t;
}

template <typename T>
double loss(const Mat<T>& logits, std::span<const int> target_ids) {
    std::vector<int> targets(target_ids.begin(), target_ids.end());
    for (int& t : targets) {
        if (t == Vocab::kPad) t = -1;
    }
    return cross_entropy_loss<T>(logits, targets);
}

GenerationResult resolve_markers(const Vocab& vocab, std::span<const int> ids, const MarkerIndexMap& map) {
    GenerationResult out;
    out.token_ids.assign(ids.begin(), ids.end());
    std::vector<std::string> pieces;
    for (int id : ids) {
        if (id == Vocab::kPad || id == Vocab::kBos || id == Vocab::kEos) continue;
        const int k = vocab.marker_index(id);
        if (k == 0) {
            pieces.push_back(vocab.token(id));
            continue;
        }
        out.referenced_indices.push_back(k);
        if (map.contains(k)) {
            const Point p = index_to_coords(map, k);
            out.resolved_coords.emplace_back(p);
            pieces.push_back(format_coord(p));
        } else {
            out.resolved_coords.emplace_back(std::nullopt);
            out.hallucinated_marker = true;
            pieces.push_back(kUnknownMarker);
        }
    }
    out.text = Vocab::join(pieces);
    return out;
}

template <typename T>
GenerationResult generate(Decoder<T>& decoder, const Vocab& vocab, const Mat<T>& prompts,
                          std::span<const int> question_ids, const MarkerIndexMap& map, int max_new_tokens) {
    std::vector<int> produced;
    bool hit_limit = false;
    const int prompt_rows = static_cast<int>(prompts.rows());
    while (true) {
        if (static_cast<int>(produced.size()) >= max_new_tokens ||
            Decoder<T>::sequence_length(prompt_rows, question_ids.size(), produced.size()) >=
                decoder.config().max_seq_len) {
            hit_limit = true;
            break;
        }
        const Mat<T> logits = decoder.next_logits(prompts, question_ids, produced);
        Eigen::Index best = 0;
        logits.row(0).maxCoeff(&best);
        const int id = static_cast<int>(best);
        produced.push_back(id);
        if (id == Vocab::kEos) break;
    }
    GenerationResult out = resolve_markers(vocab, produced, map);
    out.hit_length_limit = hit_limit;
    return out;
}

template class Decoder<float>;
template class Decoder<double>;
template double loss<float>(const Mat<float>&, std::span<const int>);
template double loss<double>(const Mat<double>&, std::span<const int>);
template GenerationResult generate<float>(Decoder<float>&, const Vocab&, const Mat<float>&, std::span<const int>,
                                          const MarkerIndexMap&, int);
template GenerationResult generate<double>(Decoder<double>&, const Vocab&, const Mat<double>&, std::span<const int>,
                                           const MarkerIndexMap&, int);

}  // namespace markvqa
