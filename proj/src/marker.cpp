#include "markvqa/marker.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <stdexcept>

namespace markvqa {

namespace {

constexpr int kGlyphW = 7;
constexpr int kGlyphH = 9;

// 7x9 digit bitmaps, '#' = ink.
constexpr std::array<std::array<const char*, kGlyphH>, 10> kDigits = {{
    {".#####.", "##...##", "##..###", "##.#.##", "###..##", "##...##", "##...##", "##...##", ".#####."},
    {"...##..", "..###..", ".####..", "...##..", "...##..", "...##..", "...##..", "...##..", ".######"},
    {".#####.", "##...##", ".....##", "....##.", "...##..", "..##...", ".##....", "##.....", "#######"},
    {".#####.", "##...##", ".....##", ".....##", "..####.", ".....##", ".....##", "##...##", ".#####."},
    {"....##.", "...###.", "..####.", ".##.##.", "##..##.", "#######", "....##.", "....##.", "....##."},
    {"#######", "##.....", "##.....", "######.", ".....##", ".....##", ".....##", "##...##", ".#####."},
    {".#####.", "##...##", "##.....", "##.....", "######.", "##...##", "##...##", "##...##", ".#####."},
    {"#######", ".....##", "....##.", "....##.", "...##..", "...##..", "..##...", "..##...", "..##..."},
    {".#####.", "##...##", "##...##", "##...##", ".#####.", "##...##", "##...##", "##...##", ".#####."},
    {".#####.", "##...##", "##...##", "##...##", ".######", ".....##", ".....##", "##...##", ".#####."},
}};

// Ink layout of a label: digits separated by one blank column, 1 px outline margin.
struct Label {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> cells;  // 0 = transparent, 1 = outline, 2 = ink
};

Label make_label(int k) {
    const std::string digits = std::to_string(k);
    const int n = static_cast<int>(digits.size());
    Label label;
    label.width = n * kGlyphW + (n - 1) + 2;
    label.height = kGlyphH + 2;
    label.cells.assign(static_cast<std::size_t>(label.width) * label.height, 0);
    auto cell = [&](int r, int c) -> std::uint8_t& { return label.cells[static_cast<std::size_t>(r) * label.width + c]; };
    for (int d = 0; d < n; ++d) {
        const auto& glyph = kDigits[static_cast<std::size_t>(digits[static_cast<std::size_t>(d)] - '0')];
        const int x0 = 1 + d * (kGlyphW + 1);
        for (int r = 0; r < kGlyphH; ++r) {
            for (int c = 0; c < kGlyphW; ++c) {
                if (glyph[static_cast<std::size_t>(r)][c] == '#') cell(1 + r, x0 + c) = 2;
            }
        }
    }
    for (int r = 0; r < label.height; ++r) {
        for (int c = 0; c < label.width; ++c) {
            if (cell(r, c) != 0) continue;
            bool touches = false;
            for (int dr = -1; dr <= 1 && !touches; ++dr) {
                for (int dc = -1; dc <= 1 && !touches; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    if (rr >= 0 && rr < label.height && cc >= 0 && cc < label.width && cell(rr, cc) == 2) touches = true;
                }
            }
            if (touches) cell(r, c) = 1;
        }
    }
    return label;
}

void stamp(Image& img, int k, Point centre) {
    const Label label = make_label(k);
    const int top = static_cast<int>(std::lround(centre.y)) - label.height / 2;
    const int left = static_cast<int>(std::lround(centre.x)) - label.width / 2;
    for (int r = 0; r < label.height; ++r) {
        for (int c = 0; c < label.width; ++c) {
            const std::uint8_t v = label.cells[static_cast<std::size_t>(r) * label.width + c];
            const int y = top + r, x = left + c;
            if (v == 0 || y < 0 || y >= img.height || x < 0 || x >= img.width) continue;
            std::uint8_t* px = img.at(y, x);
            const std::uint8_t value = v == 2 ? 255 : 0;
            px[0] = px[1] = px[2] = value;
        }
    }
}

}  // namespace

Point compute_centroid(const Mask& mask) {
    double sx = 0.0, sy = 0.0;
    std::size_t n = 0;
    for (int r = 0; r < mask.height; ++r) {
        for (int c = 0; c < mask.width; ++c) {
            if (!mask.get(r, c)) continue;
            sx += c;
            sy += r;
            ++n;
        }
    }
    if (n == 0) throw ValidationError("centroid of an empty mask");
    return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

std::size_t MarkerIndexMap::detection_count() const {
    return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(), [](const MarkerEntry& e) {
        return e.source == MarkerSource::detection;
    }));
}

Point MarkerIndexMap::coords(int k) const {
    if (!contains(k)) throw std::out_of_range("unknown marker index " + std::to_string(k));
    return entries_[static_cast<std::size_t>(k - 1)].centroid;
}

nlohmann::json MarkerIndexMap::to_json() const {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : entries_) {
        entries.push_back({{"index", e.index},
                           {"x", e.centroid.x},
                           {"y", e.centroid.y},
                           {"source", e.source == MarkerSource::detection ? "detection" : "question"},
                           {"view", e.view}});
    }
    return {{"entries", entries}, {"d_th", d_th_}};
}

MarkerIndexMap MarkerIndexMap::from_json(const nlohmann::json& j) {
    MarkerIndexMap map(j.at("d_th").get<double>());
    bool seen_question = false;
    for (const auto& e : j.at("entries")) {
        MarkerEntry entry;
        entry.index = e.at("index").get<int>();
        entry.centroid = {e.at("x").get<double>(), e.at("y").get<double>()};
        const auto source = e.at("source").get<std::string>();
        if (source == "detection") {
            entry.source = MarkerSource::detection;
            if (seen_question) throw ValidationError("detection marker after question marker");
        } else if (source == "question") {
            entry.source = MarkerSource::question;
            seen_question = true;
        } else {
            throw ValidationError("unknown marker source: " + source);
        }
        entry.view = e.value("view", 0);
        if (entry.index != static_cast<int>(map.entries_.size()) + 1) throw ValidationError("marker indices not consecutive");
        map.entries_.push_back(entry);
    }
    return map;
}

IndexMapBuild build_index_map(const std::vector<Detection>& detections, double distance_threshold) {
    if (detections.empty()) throw ValidationError("build_index_map needs at least one detection");
    IndexMapBuild out{MarkerIndexMap(distance_threshold), {}};
    const std::size_t n = std::min(detections.size(), static_cast<std::size_t>(kMaxObjects));
    if (detections.size() > n) {
        out.warnings.push_back("truncated " + std::to_string(detections.size()) + " detections to the first " +
                               std::to_string(kMaxObjects));
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.map.entries_.push_back(
            {static_cast<int>(i) + 1, compute_centroid(detections[i].mask), MarkerSource::detection, detections[i].view});
    }
    return out;
}

std::pair<int, MarkerIndexMap> assign_query_coordinate(const MarkerIndexMap& map, Point coord, int height, int width,
                                                       int view) {
    if (!std::isfinite(coord.x) || !std::isfinite(coord.y) || coord.x < 0 || coord.y < 0 ||
        (width > 0 && coord.x >= width) || (height > 0 && coord.y >= height)) {
        throw ValidationError("query coordinate out of bounds");
    }
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& e : map.entries_) {
        if (e.view != view) continue;
        const double d = distance(coord, e.centroid);
        if (d < best_d) {
            best_d = d;
            best = e.index;
        }
    }
    if (best != 0 && best_d <= map.d_th_) return {best, map};
    MarkerIndexMap updated = map;
    const int k = static_cast<int>(updated.entries_.size()) + 1;
    updated.entries_.push_back({k, coord, MarkerSource::question, view});
    return {k, std::move(updated)};
}

Point index_to_coords(const MarkerIndexMap& map, int k) { return map.coords(k); }

std::array<std::uint8_t, 3> marker_fill_color(int k) {
    // golden-ratio hue walk, fixed saturation/value
    const double hue = std::fmod(k * 0.618033988749895, 1.0) * 6.0;
    const double s = 0.85, v = 0.95;
    const int sector = static_cast<int>(hue) % 6;
    const double f = hue - std::floor(hue);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double r = 0, g = 0, b = 0;
    switch (sector) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
    auto to8 = [](double x) { return static_cast<std::uint8_t>(std::lround(x * 255.0)); };
    return {to8(r), to8(g), to8(b)};
}

MarkerImage render_marker_image(const Image& image, const MarkerIndexMap& map, const std::vector<Detection>& detections,
                                double alpha, int view) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("overlay alpha must lie in [0, 1]");
    if (map.detection_count() > detections.size()) {
        throw ValidationError("marker map has " + std::to_string(map.detection_count()) + " detection entries but only " +
                              std::to_string(detections.size()) + " detections were given");
    }
    MarkerImage out{image, alpha};
    Image& img = out.pixels;
    for (const auto& e : map.entries()) {
        if (e.source != MarkerSource::detection || e.view != view) continue;
        const Detection& d = detections[static_cast<std::size_t>(e.index - 1)];
        if (d.view != e.view) throw ValidationError("marker " + std::to_string(e.index) + " view mismatch");
        if (d.mask.height != img.height || d.mask.width != img.width) {
            throw ValidationError("mask dimensions differ from image");
        }
        const auto fill = marker_fill_color(e.index);
        for (int r = 0; r < img.height; ++r) {
            for (int c = 0; c < img.width; ++c) {
                if (!d.mask.get(r, c)) continue;
                std::uint8_t* px = img.at(r, c);
                for (int ch = 0; ch < 3; ++ch) {
                    const double v = (1.0 - alpha) * px[ch] + alpha * fill[static_cast<std::size_t>(ch)];
                    px[ch] = static_cast<std::uint8_t>(std::lround(v));
                }
            }
        }
    }
    for (const auto& e : map.entries()) {
        if (e.view == view) stamp(img, e.index, e.centroid);
    }
    return out;
}

std::pair<int, int> label_extent(int k) {
    const Label label = make_label(k);
    return {label.width, label.height};
}

}  // namespace markvqa
