#include "markvqa/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>
#include <type_traits>

namespace markvqa {

using nlohmann::json;

// --- config ----------------------------------------------------------------

void TrainConfig::validate() const {
    if (use_mcnet && !use_markers) throw ValidationError("use_mcnet requires use_markers");
    if (!(initial_lr > 0)) throw ValidationError("initial_lr must be positive");
    if (weight_decay < 0) throw ValidationError("weight_decay must be non-negative");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (total_iters < 0) throw ValidationError("total_iters must be >= 0");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ValidationError("val_fraction must lie in [0, 1)");
    if (scene_token_count < 1) throw ValidationError("scene_token_count must be positive");
    if (!(overlay_alpha >= 0 && overlay_alpha <= 1)) throw ValidationError("overlay_alpha must lie in [0, 1]");
    encoder.validate();
    encoder.check_image(image_height, image_width);
    // fails early if the scene token count cannot be reached by integer pooling
    scene_pool_matrix(image_height / encoder.patch_size, image_width / encoder.patch_size, scene_token_count);
}

json TrainConfig::to_json() const {
    return {{"initial_lr", initial_lr},
            {"weight_decay", weight_decay},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"grad_clip", grad_clip},
            {"batch_size", batch_size},
            {"total_iters", total_iters},
            {"seed", seed},
            {"val_fraction", val_fraction},
            {"scene_token_count", scene_token_count},
            {"use_markers", use_markers},
            {"use_instance_prompts", use_instance_prompts},
            {"use_mcnet", use_mcnet},
            {"overlay_alpha", overlay_alpha},
            {"distance_threshold", distance_threshold},
            {"image_height", image_height},
            {"image_width", image_width},
            {"encoder",
             {{"patch_size", encoder.patch_size},
              {"embed_dim", encoder.embed_dim},
              {"depth", encoder.depth},
              {"heads", encoder.heads},
              {"lora_rank", encoder.lora_rank},
              {"lora_alpha", encoder.lora_alpha},
              {"mlp_ratio", encoder.mlp_ratio}}},
            {"decoder_embed_dim", decoder_embed_dim},
            {"decoder_depth", decoder_depth},
            {"decoder_heads", decoder_heads},
            {"decoder_max_seq_len", decoder_max_seq_len},
            {"mlp_hidden", mlp_hidden},
            {"max_new_tokens", max_new_tokens}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("training config must be a JSON object");
    TrainConfig c;
    const json defaults = c.to_json();
    for (const auto& [key, _] : j.items()) {
        if (!defaults.contains(key)) throw ValidationError("unknown training config key: " + key);
    }
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
        };
        get("initial_lr", c.initial_lr);
        get("weight_decay", c.weight_decay);
        get("beta1", c.beta1);
        get("beta2", c.beta2);
        get("adam_eps", c.adam_eps);
        get("grad_clip", c.grad_clip);
        get("batch_size", c.batch_size);
        get("total_iters", c.total_iters);
        get("seed", c.seed);
        get("val_fraction", c.val_fraction);
        get("scene_token_count", c.scene_token_count);
        get("use_markers", c.use_markers);
        get("use_instance_prompts", c.use_instance_prompts);
        get("use_mcnet", c.use_mcnet);
        get("overlay_alpha", c.overlay_alpha);
        get("distance_threshold", c.distance_threshold);
        get("image_height", c.image_height);
        get("image_width", c.image_width);
        get("decoder_embed_dim", c.decoder_embed_dim);
        get("decoder_depth", c.decoder_depth);
        get("decoder_heads", c.decoder_heads);
        get("decoder_max_seq_len", c.decoder_max_seq_len);
        get("mlp_hidden", c.mlp_hidden);
        get("max_new_tokens", c.max_new_tokens);
        if (j.contains("encoder")) {
            const json& e = j.at("encoder");
            for (const auto& [key, _] : e.items()) {
                if (!defaults.at("encoder").contains(key)) throw ValidationError("unknown encoder config key: " + key);
            }
            auto eget = [&](const char* key, auto& field) {
                if (e.contains(key)) field = e.at(key).get<std::remove_reference_t<decltype(field)>>();
            };
            eget("patch_size", c.encoder.patch_size);
            eget("embed_dim", c.encoder.embed_dim);
            eget("depth", c.encoder.depth);
            eget("heads", c.encoder.heads);
            eget("lora_rank", c.encoder.lora_rank);
            eget("lora_alpha", c.encoder.lora_alpha);
            eget("mlp_ratio", c.encoder.mlp_ratio);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad training config value: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read config " + path.string());
    try {
        return from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

double cosine_lr(double initial_lr, long step, long total_iters) {
    if (total_iters <= 0) return initial_lr;
    const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total_iters), 0.0, 1.0);
    return 0.5 * initial_lr * (1.0 + std::cos(M_PI * t));
}

// --- model -----------------------------------------------------------------

template <typename T>
void Model<T>::visit(const ParamVisitor<T>& fn) {
    vision.visit(fn);
    mlp.visit(fn);
    decoder.visit(fn);
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::trainable() {
    std::vector<Parameter<T>*> out;
    visit([&](Parameter<T>& p) {
        if (p.trainable) out.push_back(&p);
    });
    return out;
}

template <typename T>
std::map<std::string, Parameter<T>*> Model<T>::named() {
    std::map<std::string, Parameter<T>*> out;
    visit([&](Parameter<T>& p) {
        if (!out.emplace(p.name, &p).second) throw std::logic_error("duplicate parameter name " + p.name);
    });
    return out;
}

template <typename T>
Model<T> ablation_variant(const TrainConfig& config, Vocab vocab) {
    config.validate();
    Model<T> m;
    m.config = config;
    m.vocab = std::move(vocab);
    m.vision = MarkerControlNet<T>(config.encoder, config.image_height, config.image_width, mix_seed(config.seed, 11));
    m.mlp = ConnectedMlp<T>(config.encoder.embed_dim, config.mlp_hidden, config.decoder_embed_dim,
                            mix_seed(config.seed, 12));
    DecoderConfig dc;
    dc.vocab_size = static_cast<int>(m.vocab.size());
    dc.embed_dim = config.decoder_embed_dim;
    dc.depth = config.decoder_depth;
    dc.heads = config.decoder_heads;
    dc.max_seq_len = config.decoder_max_seq_len;
    dc.lora_rank = config.encoder.lora_rank;
    dc.lora_alpha = config.encoder.lora_alpha;
    dc.mlp_ratio = config.encoder.mlp_ratio;
    m.decoder = Decoder<T>(dc, mix_seed(config.seed, 13));
    m.decoder.attach_lora(mix_seed(config.seed, 14));
    if (!config.use_mcnet) {
        // the control branch is not wired in this variant
        m.vision.control().visit([](Parameter<T>& p) { p.trainable = false; });
        m.vision.zero().visit([](Parameter<T>& p) { p.trainable = false; });
    }
    return m;
}

// --- data preparation ------------------------------------------------------

std::string markerize(const std::string& text, const std::vector<Point>& coords, MarkerIndexMap& map, int height,
                      int width) {
    static const std::regex pattern(R"(\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\))");
    std::string out;
    std::size_t last = 0, k = 0;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), pattern); it != std::sregex_iterator(); ++it, ++k) {
        const auto& m = *it;
        const Point p = k < coords.size() ? coords[k] : Point{std::stod(m[1].str()), std::stod(m[2].str())};
        auto [index, updated] = assign_query_coordinate(map, p, height, width, 0);
        map = std::move(updated);
        out.append(text, last, static_cast<std::size_t>(m.position(0)) - last);
        out += "<m" + std::to_string(index) + ">";
        last = static_cast<std::size_t>(m.position(0) + m.length(0));
    }
    out.append(text, last, std::string::npos);
    return out;
}

template <typename T>
PreparedScene<T> prepare_scene(Model<T>& model, const Scene& scene) {
    const TrainConfig& cfg = model.config;
    if (scene.height() != cfg.image_height || scene.width() != cfg.image_width) {
        throw ValidationError("scene " + scene.scene_id + " size differs from the model's input size");
    }
    PreparedScene<T> prep;
    prep.scene = &scene;
    prep.map = build_index_map(scene.detections, cfg.distance_threshold).map;
    for (const auto& qa : scene.qa) {
        std::string q = qa.question, a = qa.answer;
        if (cfg.use_markers) {
            q = markerize(q, qa.question_coords, prep.map, scene.height(), scene.width());
            a = markerize(a, qa.answer_coords, prep.map, scene.height(), scene.width());
        }
        prep.question_ids.push_back(model.vocab.tokenize(q));
        prep.answer_ids.push_back(model.vocab.tokenize(a));
    }
    if (prep.map.size() > static_cast<std::size_t>(kMaxMarkerToken)) {
        throw ValidationError("scene " + scene.scene_id + " needs more marker tokens than the vocabulary holds");
    }
    for (std::size_t v = 0; v < scene.images.size(); ++v) {
        Image marker = cfg.use_markers ? render_marker_image(scene.images[v], prep.map, scene.detections,
                                                             cfg.overlay_alpha, static_cast<int>(v))
                                             .pixels
                                       : scene.images[v];
        const Image& frozen_input = cfg.use_mcnet ? scene.images[v] : marker;
        prep.frozen_features.push_back(model.vision.frozen().encode(frozen_input).data);
        prep.marker_images.push_back(std::move(marker));
    }
    return prep;
}

template <typename T>
Var prompt_tokens(Graph<T>& g, Model<T>& model, const PreparedScene<T>& prep) {
    const TrainConfig& cfg = model.config;
    const int gh = model.vision.grid_h(), gw = model.vision.grid_w();
    std::vector<Var> features;
    std::vector<Var> parts;
    for (std::size_t v = 0; v < prep.marker_images.size(); ++v) {
        Var f = cfg.use_mcnet ? model.vision.forward(g, prep.marker_images[v], prep.marker_images[v],
                                                     &prep.frozen_features[v])
                              : g.constant(prep.frozen_features[v]);
        features.push_back(f);
        parts.push_back(build_scene_prompts(g, f, gh, gw, model.mlp, cfg.scene_token_count));
    }
    if (cfg.use_instance_prompts) {
        Var inst = build_instance_prompts<T>(g, features, cfg.image_height, cfg.image_width, gh, gw, prep.map,
                                             prep.scene->detections, model.mlp);
        if (inst.valid()) parts.push_back(inst);
    }
    return parts.size() == 1 ? parts[0] : g.concat_rows(parts);
}

template <typename T>
double scene_loss(Model<T>& model, const PreparedScene<T>& prep, bool backward, double weight,
                  std::size_t* token_count) {
    Graph<T> g;
    Var prompts = prompt_tokens(g, model, prep);
    if (prep.question_ids.empty()) return 0.0;
    std::vector<int> targets;
    for (const auto& a : prep.answer_ids) {
        const auto t = answer_targets(a);
        targets.insert(targets.end(), t.begin(), t.end());
    }
    Var logits = model.decoder.packed_answer_logits(g, prompts, prep.question_ids, prep.answer_ids);
    Var ce = g.cross_entropy(logits, targets);
    if (token_count) *token_count = targets.size();
    if (backward) g.backward(g.scale(ce, static_cast<T>(weight)));
    return static_cast<double>(g.value(ce)(0, 0));
}

// --- training --------------------------------------------------------------

namespace {

std::size_t answer_tokens(const std::vector<std::vector<int>>& answers) {
    std::size_t n = 0;
    for (const auto& a : answers) n += a.size() + 1;
    return n;
}

}  // namespace

template <typename T>
TrainResult<T> train(Model<T>& model, const std::vector<Scene>& scenes, const ProgressFn& progress) {
    const TrainConfig& cfg = model.config;
    cfg.validate();
    if (scenes.empty()) throw ValidationError("training needs at least one scene");

    std::vector<PreparedScene<T>> prepared;
    prepared.reserve(scenes.size());
    for (const auto& s : scenes) prepared.push_back(prepare_scene(model, s));

    const auto params = model.trainable();
    TrainResult<T> result;
    for (auto* p : params) {
        result.optimizer.m[p->name] = Mat<T>::Zero(p->value.rows(), p->value.cols());
        result.optimizer.v[p->name] = Mat<T>::Zero(p->value.rows(), p->value.cols());
    }

    Rng order_rng(mix_seed(cfg.seed, 99));
    std::vector<std::size_t> order(prepared.size());
    std::size_t cursor = order.size();
    auto next_scene = [&]() {
        if (cursor == order.size()) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            for (std::size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.next() % i)]);
            }
            cursor = 0;
        }
        return order[cursor++];
    };

    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), prepared.size());
    for (long it = 0; it < cfg.total_iters; ++it) {
        const double lr = cosine_lr(cfg.initial_lr, it, cfg.total_iters);
        for (auto* p : params) p->zero_grad();

        std::vector<std::size_t> members;
        std::size_t total_tokens = 0;
        for (std::size_t b = 0; b < batch; ++b) {
            members.push_back(next_scene());
            total_tokens += answer_tokens(prepared[members.back()].answer_ids);
        }
        double batch_loss = 0.0;
        for (std::size_t idx : members) {
            const auto& prep = prepared[idx];
            const double w = static_cast<double>(answer_tokens(prep.answer_ids)) / static_cast<double>(total_tokens);
            batch_loss += w * scene_loss(model, prep, true, w);
        }
        if (!std::isfinite(batch_loss)) {
            throw NumericalError("non-finite loss at iteration " + std::to_string(it), it);
        }

        if (cfg.grad_clip > 0) {
            double sq = 0.0;
            for (auto* p : params) sq += p->grad.template cast<double>().squaredNorm();
            const double norm = std::sqrt(sq);
            if (!std::isfinite(norm)) throw NumericalError("non-finite gradient at iteration " + std::to_string(it), it);
            if (norm > cfg.grad_clip) {
                const T s = static_cast<T>(cfg.grad_clip / norm);
                for (auto* p : params) p->grad *= s;
            }
        }

        auto& opt = result.optimizer;
        ++opt.step;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
        const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
        const T step_size = static_cast<T>(lr / bc1);
        const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
        const T eps = static_cast<T>(cfg.adam_eps);
        const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
        for (auto* p : params) {
            Mat<T>& m = opt.m[p->name];
            Mat<T>& v = opt.v[p->name];
            m = b1 * m + (T(1) - b1) * p->grad;
            v = b2 * v + (T(1) - b2) * p->grad.cwiseProduct(p->grad);
            p->value *= decay;
            p->value.array() -= step_size * m.array() / ((v.array().sqrt() * inv_sqrt_bc2) + eps);
        }

        const LossPoint point{it, lr, batch_loss};
        result.curve.push_back(point);
        if (progress) progress(point);
    }
    for (auto* p : params) p->zero_grad();
    return result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& curve) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "iteration,lr,loss\n";
    char buf[128];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g\n", p.iteration, p.lr, p.loss);
        out << buf;
    }
}

template <typename T>
std::vector<GenerationRecord> generate_answers(Model<T>& model, const std::vector<Scene>& scenes) {
    std::vector<GenerationRecord> out;
    for (const auto& scene : scenes) {
        const PreparedScene<T> prep = prepare_scene(model, scene);
        Mat<T> prompts;
        {
            Graph<T> g;
            prompts = g.value(prompt_tokens(g, model, prep));
        }
        for (std::size_t i = 0; i < scene.qa.size(); ++i) {
            const GenerationResult r =
                generate(model.decoder, model.vocab, prompts, prep.question_ids[i], prep.map, model.config.max_new_tokens);
            GenerationRecord rec;
            rec.scene_id = scene.scene_id;
            rec.qa_index = static_cast<int>(i);
            rec.question = scene.qa[i].question;
            rec.text = r.text;
            rec.referenced_indices = r.referenced_indices;
            rec.resolved_coords = r.resolved_coords;
            if (r.hallucinated_marker) rec.flags.push_back("hallucinated_marker");
            if (r.hit_length_limit) rec.flags.push_back("length_limit");
            out.push_back(std::move(rec));
        }
    }
    return out;
}

Vocab vocab_for(const std::vector<Scene>& scenes) {
    std::vector<std::string> texts;
    for (const auto& s : scenes) {
        for (const auto& d : s.detections) texts.push_back(d.class_label);
        for (const auto& q : s.qa) {
            texts.push_back(q.question);
            texts.push_back(q.answer);
        }
    }
    return Vocab::standard(collect_extra_words(texts));
}

// --- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'K', 'V', 'Q', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void write_pod(std::ostream& out, U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U read_pod(std::istream& in) {
    U v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw ValidationError("truncated checkpoint");
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Model<float>& model, const OptimizerState<float>& optimizer,
                     long iteration) {
    struct Entry {
        std::string name;
        const Mat<float>* value;
    };
    std::vector<Entry> entries;
    model.visit([&](Parameter<float>& p) { entries.push_back({p.name, &p.value}); });
    for (const auto& [name, m] : optimizer.m) entries.push_back({"opt.m." + name, &m});
    for (const auto& [name, v] : optimizer.v) entries.push_back({"opt.v." + name, &v});

    json index = json::array();
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        index.push_back({{"name", e.name}, {"rows", e.value->rows()}, {"cols", e.value->cols()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(e.value->size()) * sizeof(float);
    }
    const json header = {{"format", "markvqa-checkpoint"},
                         {"config", model.config.to_json()},
                         {"vocab", model.vocab.tokens()},
                         {"iteration", iteration},
                         {"optimizer_step", optimizer.step},
                         {"tensors", index}};
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof kMagic);
    write_pod(out, kVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : entries) {
        out.write(reinterpret_cast<const char*>(e.value->data()),
                  static_cast<std::streamsize>(e.value->size() * static_cast<Eigen::Index>(sizeof(float))));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || !std::equal(magic, magic + 8, kMagic)) throw ValidationError(path.string() + ": not a checkpoint");
    if (read_pod<std::uint32_t>(in) != kVersion) throw ValidationError(path.string() + ": unsupported version");
    const auto header_len = read_pod<std::uint64_t>(in);
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw ValidationError(path.string() + ": truncated header");
    const json header = json::parse(text);
    const auto data_start = in.tellg();

    LoadedCheckpoint ck;
    ck.model = ablation_variant<float>(TrainConfig::from_json(header.at("config")),
                                       Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>()));
    ck.iteration = header.at("iteration").get<long>();
    ck.optimizer.step = header.at("optimizer_step").get<long>();

    auto params = ck.model.named();
    std::set<std::string> seen;
    for (const auto& t : header.at("tensors")) {
        const auto name = t.at("name").get<std::string>();
        const auto rows = t.at("rows").get<Eigen::Index>();
        const auto cols = t.at("cols").get<Eigen::Index>();
        Mat<float> m(rows, cols);
        in.seekg(data_start + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
        in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
        if (!in) throw ValidationError(path.string() + ": truncated tensor " + name);
        if (name.rfind("opt.m.", 0) == 0) {
            ck.optimizer.m[name.substr(6)] = std::move(m);
        } else if (name.rfind("opt.v.", 0) == 0) {
            ck.optimizer.v[name.substr(6)] = std::move(m);
        } else {
            const auto it = params.find(name);
            if (it == params.end()) throw ValidationError(path.string() + ": unexpected tensor " + name);
            if (it->second->value.rows() != rows || it->second->value.cols() != cols) {
                throw ValidationError(path.string() + ": shape mismatch for " + name);
            }
            it->second->value = std::move(m);
            seen.insert(name);
        }
    }
    if (seen.size() != params.size()) throw ValidationError(path.string() + ": checkpoint is missing tensors");
    return ck;
}

template struct Model<float>;
template struct Model<double>;
template Model<float> ablation_variant<float>(const TrainConfig&, Vocab);
template Model<double> ablation_variant<double>(const TrainConfig&, Vocab);
template PreparedScene<float> prepare_scene<float>(Model<float>&, const Scene&);
template PreparedScene<double> prepare_scene<double>(Model<double>&, const Scene&);
template Var prompt_tokens<float>(Graph<float>&, Model<float>&, const PreparedScene<float>&);
template Var prompt_tokens<double>(Graph<double>&, Model<double>&, const PreparedScene<double>&);
template double scene_loss<float>(Model<float>&, const PreparedScene<float>&, bool, double, std::size_t*);
template double scene_loss<double>(Model<double>&, const PreparedScene<double>&, bool, double, std::size_t*);
template TrainResult<float> train<float>(Model<float>&, const std::vector<Scene>&, const ProgressFn&);
template TrainResult<double> train<double>(Model<double>&, const std::vector<Scene>&, const ProgressFn&);
template std::vector<GenerationRecord> generate_answers<float>(Model<float>&, const std::vector<Scene>&);
template std::vector<GenerationRecord> generate_answers<double>(Model<double>&, const std::vector<Scene>&);

}  // namespace markvqa
