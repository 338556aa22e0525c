#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "markvqa/dataset.hpp"
#include "markvqa/image.hpp"
#include "markvqa/marker.hpp"
#include "markvqa/metrics.hpp"
#include "markvqa/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace markvqa;

namespace {

// MARKVQA_LOG: 0 quiet, 1 progress (default), 2 verbose
int log_level() {
    static const int level = [] {
        const char* v = std::getenv("MARKVQA_LOG");
        return v ? std::atoi(v) : 1;
    }();
    return level;
}

void log(int level, const std::string& msg) {
    if (log_level() >= level) std::cerr << msg << '\n';
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string sha1_hex(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha1(), nullptr);
    std::string out;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", digest[i]);
        out += buf;
    }
    return out;
}

std::string blob_hash(const fs::path& p) {
    const std::string content = read_file(p);
    return sha1_hex("blob " + std::to_string(content.size()) + '\0' + content);
}

// hash over the sorted (path, blob hash) listing of every regular file below dir
std::string tree_hash(const fs::path& dir) {
    std::vector<std::string> lines;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) lines.push_back(fs::relative(e.path(), dir).generic_string() + ' ' + blob_hash(e.path()));
    }
    std::sort(lines.begin(), lines.end());
    std::string listing;
    for (const auto& l : lines) listing += l + '\n';
    return sha1_hex("tree " + std::to_string(listing.size()) + '\0' + listing);
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << j.dump(2) << '\n';
}

void write_manifest(const fs::path& dir, const std::string& command, const json& config, const fs::path& dataset,
                    const fs::path& checkpoint, const std::string& started) {
    json m = {{"command", command}, {"config", config}, {"started", started}, {"finished", utc_now()}};
    if (!dataset.empty()) m["dataset_hash"] = tree_hash(dataset);
    if (!checkpoint.empty()) m["checkpoint_hash"] = blob_hash(checkpoint);
    write_json(dir / "run_manifest.json", m);
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw ValidationError("cannot create directory " + p.string() + ": " + ec.message());
}

TrainConfig config_or_default(const std::string& path) {
    return path.empty() ? TrainConfig{} : TrainConfig::load(path);
}

ProgressFn progress_logger(long total) {
    const long every = std::max<long>(1, total / 20);
    return [every, total](const LossPoint& p) {
        if (p.iteration % every == 0 || p.iteration + 1 == total) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "iter %ld/%ld  lr %.3g  loss %.5f", p.iteration + 1, total, p.lr, p.loss);
            log(1, buf);
        }
    };
}

// --- commands ----------------------------------------------------------------

struct GenArgs {
    std::string out;
    std::size_t scenes = 0;
    std::uint64_t seed = 0;
    int views = 1;
    int min_objects = 2;
    int max_objects = 6;
    int size = 448;
};

void cmd_gen(const GenArgs& a) {
    const std::string started = utc_now();
    SceneConfig cfg;
    cfg.seed = a.seed;
    cfg.num_views = a.views;
    cfg.min_objects = a.min_objects;
    cfg.max_objects = a.max_objects;
    cfg.image_height = cfg.image_width = a.size;
    cfg.validate();
    if (a.scenes == 0) throw ValidationError("--scenes must be positive");
    const auto scenes = generate_dataset(cfg, a.scenes);
    ensure_dir(a.out);
    const DatasetManifest m = save_dataset(scenes, a.out);
    write_manifest(a.out, "gen",
                   {{"scenes", a.scenes}, {"seed", a.seed}, {"views", a.views}, {"min_objects", a.min_objects},
                    {"max_objects", a.max_objects}, {"size", a.size}},
                   {}, {}, started);
    std::cout << "scenes " << m.scene_count << "\nqa_records " << m.qa_count << '\n';
}

struct RenderArgs {
    std::string dataset, scene, out;
    double alpha = kDefaultOverlayAlpha;
    int view = 0;
};

void cmd_render(const RenderArgs& a) {
    if (!(a.alpha >= 0 && a.alpha <= 1)) throw ValidationError("--alpha must lie in [0, 1]");
    const auto scenes = load_dataset(a.dataset);
    const auto it = std::find_if(scenes.begin(), scenes.end(), [&](const Scene& s) { return s.scene_id == a.scene; });
    if (it == scenes.end()) throw ValidationError("scene " + a.scene + " not found in " + a.dataset);
    if (a.view < 0 || a.view >= static_cast<int>(it->images.size())) throw ValidationError("--view out of range");
    const IndexMapBuild built = build_index_map(it->detections);
    for (const auto& w : built.warnings) log(1, "warning: " + w);
    const MarkerImage img = render_marker_image(it->images[static_cast<std::size_t>(a.view)], built.map,
                                                it->detections, a.alpha, a.view);
    const fs::path out(a.out);
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    write_png(out, img.pixels);
    fs::path map_path = out;
    map_path.replace_extension(".json");
    write_json(map_path, built.map.to_json());
    std::cout << "image " << out.string() << "\nindex_map " << map_path.string() << '\n';
}

struct TrainArgs {
    std::string dataset, config, out;
};

void cmd_train(const TrainArgs& a) {
    const std::string started = utc_now();
    const TrainConfig cfg = config_or_default(a.config);
    const auto all = load_dataset(a.dataset);
    const auto scenes = split_scenes(all, cfg.val_fraction, "train");
    Model<float> model = ablation_variant<float>(cfg, vocab_for(all));
    log(1, "training on " + std::to_string(scenes.size()) + " scenes");
    const TrainResult<float> result = train(model, scenes, progress_logger(cfg.total_iters));
    ensure_dir(a.out);
    const fs::path ckpt = fs::path(a.out) / "checkpoint.bin";
    save_checkpoint(ckpt, model, result.optimizer, cfg.total_iters);
    write_loss_csv(fs::path(a.out) / "loss.csv", result.curve);
    write_manifest(a.out, "train", cfg.to_json(), a.dataset, ckpt, started);
    const double last = result.curve.empty() ? 0.0 : result.curve.back().loss;
    std::cout << "checkpoint " << ckpt.string() << "\nfinal_loss " << last << '\n';
}

struct EvalArgs {
    std::string dataset, ckpt, out, split = "val";
};

void cmd_eval(const EvalArgs& a) {
    LoadedCheckpoint ck = load_checkpoint(a.ckpt);
    const auto all = load_dataset(a.dataset);
    const auto scenes = split_scenes(all, ck.model.config.val_fraction, a.split);
    const auto records = generate_answers(ck.model, scenes);
    const MetricReport report = evaluate_run(records, scenes);

    const fs::path out(a.out);
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    json j = report.to_json();
    j["split"] = a.split;
    write_json(out, j);
    fs::path gen_path = out;
    gen_path.replace_extension(".generations.jsonl");
    std::ofstream gen(gen_path, std::ios::trunc);
    for (const auto& r : records) gen << r.to_json().dump() << '\n';
    std::cout << format_report_table({{a.split, report}});
}

struct AblateArgs {
    std::string dataset, grid, out;
};

void cmd_ablate(const AblateArgs& a) {
    const std::string started = utc_now();
    json grid = json::object();
    if (!a.grid.empty()) {
        try {
            grid = json::parse(read_file(a.grid));
        } catch (const json::parse_error& e) {
            throw ValidationError(a.grid + ": " + e.what());
        }
    }
    for (const auto& [key, _] : grid.items()) {
        if (key != "base") throw ValidationError("unknown grid key: " + key + " (expected base)");
    }
    const json base = grid.value("base", json::object());
    const TrainConfig base_cfg = TrainConfig::from_json(base);

    struct Variant {
        const char* name;
        bool markers, mcnet, instance;
    };
    const Variant variants[] = {{"none", false, false, false},
                                {"marker", true, false, false},
                                {"marker+mcnet", true, true, false},
                                {"full", true, true, true}};

    const auto all = load_dataset(a.dataset);
    const auto train_set = split_scenes(all, base_cfg.val_fraction, "train");
    const auto val_set = split_scenes(all, base_cfg.val_fraction, "val");
    const Vocab vocab = vocab_for(all);
    ensure_dir(a.out);

    std::vector<std::pair<std::string, MetricReport>> rows;
    json summary = json::array();
    for (const auto& v : variants) {
        TrainConfig cfg = base_cfg;
        cfg.use_markers = v.markers;
        cfg.use_mcnet = v.mcnet;
        cfg.use_instance_prompts = v.instance;
        log(1, std::string("variant ") + v.name);
        Model<float> model = ablation_variant<float>(cfg, vocab);
        const TrainResult<float> result = train(model, train_set, progress_logger(cfg.total_iters));
        const fs::path dir = fs::path(a.out) / v.name;
        ensure_dir(dir);
        write_loss_csv(dir / "loss.csv", result.curve);
        save_checkpoint(dir / "checkpoint.bin", model, result.optimizer, cfg.total_iters);
        const auto records = generate_answers(model, val_set);
        const MetricReport report = evaluate_run(records, val_set);
        write_json(dir / "report.json", report.to_json());
        rows.emplace_back(v.name, report);
        summary.push_back({{"config", v.name},
                           {"use_markers", v.markers},
                           {"use_mcnet", v.mcnet},
                           {"use_instance_prompts", v.instance},
                           {"match", report.match},
                           {"accuracy", report.accuracy},
                           {"bleu4", report.bleu4},
                           {"rouge_l", report.rouge_l},
                           {"final_loss", result.curve.empty() ? 0.0 : result.curve.back().loss}});
    }
    const std::string table = format_report_table(rows);
    write_json(fs::path(a.out) / "ablation.json", {{"rows", summary}});
    std::ofstream(fs::path(a.out) / "ablation.txt", std::ios::trunc) << table;
    write_manifest(a.out, "ablate", base_cfg.to_json(), a.dataset, {}, started);
    std::cout << table;
}

int fail(int code, const std::string& kind, const std::string& message, const json& extra = json::object()) {
    json j = {{"error", kind}, {"message", message}};
    j.update(extra);
    std::cerr << j.dump() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Marker-prompted driving VQA toolkit"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "generate a synthetic dataset");
    g->add_option("--out", gen.out, "output directory")->required();
    g->add_option("--scenes", gen.scenes, "number of scenes")->required();
    g->add_option("--seed", gen.seed, "generator seed");
    g->add_option("--views", gen.views, "camera views per scene");
    g->add_option("--min-objects", gen.min_objects);
    g->add_option("--max-objects", gen.max_objects);
    g->add_option("--size", gen.size, "image side in pixels");

    RenderArgs render;
    auto* r = app.add_subcommand("render", "write the marker image of one scene");
    r->add_option("--dataset", render.dataset)->required();
    r->add_option("--scene", render.scene, "scene id")->required();
    r->add_option("--out", render.out, "output PNG")->required();
    r->add_option("--alpha", render.alpha, "mask overlay opacity");
    r->add_option("--view", render.view, "camera view");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train on the dataset's train split");
    t->add_option("--dataset", tr.dataset)->required();
    t->add_option("--config", tr.config, "JSON training config (defaults when omitted)");
    t->add_option("--out", tr.out, "output directory")->required();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "score a checkpoint");
    e->add_option("--dataset", ev.dataset)->required();
    e->add_option("--ckpt", ev.ckpt)->required();
    e->add_option("--out", ev.out, "report JSON")->required();
    e->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val"}));

    AblateArgs ab;
    auto* a = app.add_subcommand("ablate", "train and score the four ablation variants");
    a->add_option("--dataset", ab.dataset)->required();
    a->add_option("--grid", ab.grid, "JSON with a \"base\" training config");
    a->add_option("--out", ab.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        return fail(2, "usage", err.what());
    }

    try {
        if (*g) cmd_gen(gen);
        if (*r) cmd_render(render);
        if (*t) cmd_train(tr);
        if (*e) cmd_eval(ev);
        if (*a) cmd_ablate(ab);
    } catch (const ValidationError& err) {
        return fail(2, "validation", err.what());
    } catch (const NumericalError& err) {
        return fail(3, "numerical", err.what(), {{"iteration", err.iteration()}});
    } catch (const std::exception& err) {
        return fail(1, "internal", err.what());
    }
    return 0;
}
