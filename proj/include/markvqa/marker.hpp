#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "markvqa/common.hpp"
#include "markvqa/image.hpp"
#include "markvqa/scene.hpp"

namespace markvqa {

inline constexpr double kDefaultDistanceThreshold = 50.0;
inline constexpr double kDefaultOverlayAlpha = 0.5;

/// Mean column (x) and row (y) of the set pixels. Throws ValidationError on an empty mask.
Point compute_centroid(const Mask& mask);

enum class MarkerSource { detection, question };

struct MarkerEntry {
    int index = 0;  // 1-based
    Point centroid;
    MarkerSource source = MarkerSource::detection;
    int view = 0;

    friend bool operator==(const MarkerEntry&, const MarkerEntry&) = default;
};

struct IndexMapBuild;

/// Bidirectional marker index <-> pixel coordinate table for one scene.
/// Indices are 1..size(); detection entries come before question entries.
class MarkerIndexMap {
public:
    explicit MarkerIndexMap(double distance_threshold = kDefaultDistanceThreshold)
        : d_th_(distance_threshold) {}

    const std::vector<MarkerEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    double distance_threshold() const { return d_th_; }
    std::size_t detection_count() const;

    /// Centroid of marker k. Throws std::out_of_range for an unknown index.
    Point coords(int k) const;
    bool contains(int k) const { return k >= 1 && k <= static_cast<int>(entries_.size()); }

    nlohmann::json to_json() const;
    static MarkerIndexMap from_json(const nlohmann::json& j);

    friend bool operator==(const MarkerIndexMap&, const MarkerIndexMap&) = default;

private:
    friend IndexMapBuild build_index_map(const std::vector<Detection>&, double);
    friend std::pair<int, MarkerIndexMap> assign_query_coordinate(const MarkerIndexMap&, Point, int, int, int);
    std::vector<MarkerEntry> entries_;
    double d_th_;
};

struct IndexMapBuild {
    MarkerIndexMap map;
    std::vector<std::string> warnings;  // non-empty when detections were truncated
};

/// One entry per detection, in detector order, capped at 100.
IndexMapBuild build_index_map(const std::vector<Detection>& detections,
                              double distance_threshold = kDefaultDistanceThreshold);

/// Resolve a question coordinate to a marker index. Farther than d_th from every
/// centroid in the same view appends a new question entry; otherwise the nearest
/// centroid wins (ties to the lowest index). Bounds are checked when height/width > 0.
std::pair<int, MarkerIndexMap> assign_query_coordinate(const MarkerIndexMap& map, Point coord, int height = 0,
                                                       int width = 0, int view = 0);

Point index_to_coords(const MarkerIndexMap& map, int k);

struct MarkerImage {
    Image pixels;
    double overlay_alpha = kDefaultOverlayAlpha;
};

/// Fill colour used for marker k's mask overlay.
std::array<std::uint8_t, 3> marker_fill_color(int k);

/// Blend each detection's mask with its marker colour, then stamp index digits at the
/// centroids. Only entries whose view matches `view` are drawn.
MarkerImage render_marker_image(const Image& image, const MarkerIndexMap& map, const std::vector<Detection>& detections,
                                double alpha = kDefaultOverlayAlpha, int view = 0);

/// Width/height in pixels of the stamped label for index k (glyphs plus outline).
std::pair<int, int> label_extent(int k);

}  // namespace markvqa
