#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "markvqa/common.hpp"
#include "markvqa/image.hpp"

namespace markvqa {

inline constexpr int kMaxObjects = 100;

struct SceneConfig {
    int image_height = 448;
    int image_width = 448;
    int num_views = 1;
    int min_objects = 2;
    int max_objects = 6;
    std::vector<std::string> object_classes = {"car", "truck", "bus", "pedestrian", "bicycle", "cone", "barrier"};
    std::uint64_t seed = 0;

    /// Throws ValidationError when an invariant does not hold.
    void validate() const;
};

enum class Shape { rectangle, circle, triangle };
const char* shape_name(Shape s);

struct Detection {
    Mask mask;
    std::string class_label;
    int object_id = 0;
    int view = 0;  // which camera image the mask belongs to

    friend bool operator==(const Detection&, const Detection&) = default;
};

enum class QaKind { multi_choice, yes_no, coordinate, open };
const char* qa_kind_name(QaKind k);
QaKind parse_qa_kind(const std::string& s);

/// Coordinates refer to the primary view (view 0).
struct QARecord {
    std::string question;
    std::string answer;
    std::vector<Point> answer_coords;
    std::vector<Point> question_coords;
    QaKind qa_kind = QaKind::open;
    std::vector<std::string> options;  // multi_choice only; answer is one of these

    friend bool operator==(const QARecord&, const QARecord&) = default;
};

struct Scene {
    std::string scene_id;
    std::vector<Image> images;
    std::vector<Detection> detections;
    std::vector<QARecord> qa;

    int height() const { return images.empty() ? 0 : images.front().height; }
    int width() const { return images.empty() ? 0 : images.front().width; }

    /// Checks the Scene invariants; throws ValidationError naming the scene.
    void validate() const;

    friend bool operator==(const Scene&, const Scene&) = default;
};

/// Geometry of one rendered object before occlusion.
struct ObjectSpec {
    Shape shape = Shape::rectangle;
    int view = 0;
    int class_id = 0;
    int color_id = 0;  // palette slot; see color_name()
    std::array<std::uint8_t, 3> rgb{};
    // Bounding box in pixels, inclusive.
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

const char* color_name(int color_id);

/// Deterministic object layout for (config, scene_seed); occlusion-aware.
std::vector<ObjectSpec> plan_objects(const SceneConfig& config, std::uint64_t scene_seed);

/// Pixels covered by an object drawn alone on an empty canvas.
Mask rasterize(const ObjectSpec& obj, int height, int width);

Scene generate_scene(const SceneConfig& config, std::uint64_t scene_seed);

/// Option lists used by the multiple-choice templates.
const std::vector<std::string>& moving_status_options();
const std::vector<std::string>& behavior_options();

/// Format a coordinate the way answers and generated text spell it: "(x,y)" with one decimal.
std::string format_coord(Point p);

}  // namespace markvqa
