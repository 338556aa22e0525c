#include "markvqa/dataset.hpp"

#include <cmath>
#include <fstream>

#include "markvqa/marker.hpp"

namespace markvqa {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string image_name(const Scene& scene, std::size_t view) {
    return "images/" + scene.scene_id + "_" + std::to_string(view) + ".png";
}

json points_to_json(const std::vector<Point>& pts) {
    json out = json::array();
    for (const auto& p : pts) out.push_back({round2(p.x), round2(p.y)});
    return out;
}

std::vector<Point> points_from_json(const json& j) {
    std::vector<Point> out;
    for (const auto& p : j) {
        if (!p.is_array() || p.size() != 2) throw ValidationError("coordinate must be a [x, y] pair");
        out.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    return out;
}

}  // namespace

json scene_to_json(const Scene& scene) {
    json images = json::array();
    for (std::size_t v = 0; v < scene.images.size(); ++v) images.push_back(image_name(scene, v));
    json detections = json::array();
    for (const auto& d : scene.detections) {
        detections.push_back({{"object_id", d.object_id},
                              {"class_label", d.class_label},
                              {"view", d.view},
                              {"rle", rle_encode(d.mask)}});
    }
    json qa = json::array();
    for (const auto& q : scene.qa) {
        json rec = {{"question", q.question},
                    {"answer", q.answer},
                    {"answer_coords", points_to_json(q.answer_coords)},
                    {"question_coords", points_to_json(q.question_coords)},
                    {"qa_kind", qa_kind_name(q.qa_kind)}};
        if (!q.options.empty()) rec["options"] = q.options;
        qa.push_back(std::move(rec));
    }
    return {{"scene_id", scene.scene_id},
            {"height", scene.height()},
            {"width", scene.width()},
            {"images", images},
            {"detections", detections},
            {"qa", qa}};
}

std::string serialize_scene(const Scene& scene) {
    std::string out = scene_to_json(scene).dump();
    out.push_back('\n');
    for (const auto& img : scene.images) out.append(img.pixels.begin(), img.pixels.end());
    return out;
}

DatasetManifest save_dataset(const std::vector<Scene>& scenes, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    if (ec) throw std::runtime_error("cannot create dataset directory " + dir.string() + ": " + ec.message());

    const fs::path manifest = dir / kManifestName;
    std::ofstream out(manifest, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + manifest.string());

    DatasetManifest result{manifest, 0, 0};
    for (const auto& scene : scenes) {
        scene.validate();
        for (std::size_t v = 0; v < scene.images.size(); ++v) write_png(dir / image_name(scene, v), scene.images[v]);
        out << scene_to_json(scene).dump() << '\n';
        ++result.scene_count;
        result.qa_count += scene.qa.size();
    }
    if (!out) throw std::runtime_error("write failed: " + manifest.string());
    return result;
}

std::vector<Scene> load_dataset(const fs::path& dir) {
    const fs::path manifest = dir / kManifestName;
    if (!fs::exists(manifest)) throw ValidationError("no " + std::string(kManifestName) + " in " + dir.string());
    std::ifstream in(manifest, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + manifest.string());

    std::vector<Scene> scenes;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = manifest.string() + " line " + std::to_string(line_no);
        try {
            const json rec = json::parse(line);
            Scene scene;
            scene.scene_id = rec.at("scene_id").get<std::string>();
            const int h = rec.at("height").get<int>();
            const int w = rec.at("width").get<int>();
            for (const auto& name : rec.at("images")) {
                Image img = read_png(dir / name.get<std::string>());
                if (img.height != h || img.width != w) throw ValidationError("image size differs from record");
                scene.images.push_back(std::move(img));
            }
            for (const auto& d : rec.at("detections")) {
                Detection det;
                det.object_id = d.at("object_id").get<int>();
                det.class_label = d.at("class_label").get<std::string>();
                det.view = d.at("view").get<int>();
                const auto runs = d.at("rle").get<std::vector<std::uint32_t>>();
                det.mask = rle_decode(runs, h, w);
                scene.detections.push_back(std::move(det));
            }
            for (const auto& q : rec.at("qa")) {
                QARecord r;
                r.question = q.at("question").get<std::string>();
                r.answer = q.at("answer").get<std::string>();
                r.answer_coords = points_from_json(q.at("answer_coords"));
                r.question_coords = points_from_json(q.at("question_coords"));
                r.qa_kind = parse_qa_kind(q.at("qa_kind").get<std::string>());
                if (q.contains("options")) r.options = q.at("options").get<std::vector<std::string>>();
                scene.qa.push_back(std::move(r));
            }
            scene.validate();
            scenes.push_back(std::move(scene));
        } catch (const json::exception& e) {
            throw ValidationError(where + ": malformed record: " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(where + ": " + e.what());
        }
    }
    if (scenes.empty()) throw ValidationError(manifest.string() + ": manifest has no records");
    return scenes;
}

std::vector<Scene> generate_dataset(const SceneConfig& config, std::size_t count) {
    std::vector<Scene> scenes;
    scenes.reserve(count);
    for (std::size_t i = 0; i < count; ++i) scenes.push_back(generate_scene(config, i));
    return scenes;
}

std::vector<Scene> split_scenes(const std::vector<Scene>& scenes, double val_fraction, const std::string& split) {
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ValidationError("val_fraction must lie in [0, 1)");
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(scenes.size()) * val_fraction));
    const auto n_train = scenes.size() - n_val;
    std::vector<Scene> out;
    if (split == "train") {
        out.assign(scenes.begin(), scenes.begin() + static_cast<std::ptrdiff_t>(n_train));
    } else if (split == "val") {
        out.assign(scenes.begin() + static_cast<std::ptrdiff_t>(n_train), scenes.end());
    } else {
        throw ValidationError("unknown split '" + split + "' (expected train or val)");
    }
    if (out.empty()) throw ValidationError("split '" + split + "' has no scenes");
    return out;
}

}  // namespace markvqa
