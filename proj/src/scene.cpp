#include "markvqa/scene.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "markvqa/marker.hpp"

namespace markvqa {

namespace {

struct PaletteEntry {
    const char* name;
    std::array<std::uint8_t, 3> rgb;
};

constexpr std::array<PaletteEntry, 12> kPalette = {{
    {"red", {220, 40, 40}},
    {"green", {40, 180, 60}},
    {"blue", {40, 70, 220}},
    {"yellow", {235, 220, 40}},
    {"cyan", {40, 210, 220}},
    {"magenta", {210, 50, 200}},
    {"orange", {245, 140, 30}},
    {"purple", {120, 50, 170}},
    {"white", {245, 245, 245}},
    {"pink", {250, 160, 190}},
    {"brown", {130, 80, 40}},
    {"lime", {170, 240, 60}},
}};

// Object i gets palette slot i for the first 12 objects; later objects cycle
// through slots 1..11 with darker shades, so slot 0 ("red") stays unique.
std::pair<int, std::array<std::uint8_t, 3>> color_for(int i) {
    if (i < static_cast<int>(kPalette.size())) return {i, kPalette[i].rgb};
    const int k = i - static_cast<int>(kPalette.size());
    const int slot = 1 + k % 11;
    const int shade = 1 + k / 11;
    std::array<std::uint8_t, 3> rgb = kPalette[slot].rgb;
    const double f = 1.0 - 0.07 * shade;
    for (auto& c : rgb) c = static_cast<std::uint8_t>(static_cast<double>(c) * f);
    return {slot, rgb};
}

constexpr double kNearThreshold = 50.0;

void paint_background(Image& img, int view) {
    const int horizon = img.height * 35 / 100;
    const auto tint = static_cast<std::uint8_t>(10 * (view % 4));
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            std::uint8_t* px = img.at(r, c);
            if (r < horizon) {
                px[0] = static_cast<std::uint8_t>(130 + tint);
                px[1] = 170;
                px[2] = 210;
            } else {
                px[0] = 90;
                px[1] = 90;
                px[2] = static_cast<std::uint8_t>(95 + tint);
            }
        }
    }
    // dashed lane lines
    const int lane_w = std::max(1, img.width / 150);
    const int dash = std::max(2, img.height / 28);
    for (int lane : {img.width / 3, 2 * img.width / 3}) {
        for (int r = horizon; r < img.height; ++r) {
            if (((r - horizon) / dash) % 2 != 0) continue;
            for (int c = lane - lane_w; c <= lane + lane_w; ++c) {
                if (c < 0 || c >= img.width) continue;
                std::uint8_t* px = img.at(r, c);
                px[0] = px[1] = px[2] = 230;
            }
        }
    }
}

int horizontal_third(double x, int width) {
    return std::clamp(static_cast<int>(3.0 * x / width), 0, 2);
}

std::string letter(std::size_t i) { return std::string(1, static_cast<char>('A' + i)); }

std::string options_text(const std::vector<std::string>& options) {
    std::string out = "options:";
    for (std::size_t i = 0; i < options.size(); ++i) {
        out += (i == 0 ? " " : ", ");
        out += letter(i) + " " + options[i];
    }
    out += ".";
    return out;
}

std::vector<std::string> lettered(const std::vector<std::string>& options) {
    std::vector<std::string> out;
    out.reserve(options.size());
    for (std::size_t i = 0; i < options.size(); ++i) out.push_back(letter(i) + " " + options[i]);
    return out;
}

std::string format_int_coord(int x, int y) {
    return "(" + std::to_string(x) + "," + std::to_string(y) + ")";
}

}  // namespace

void SceneConfig::validate() const {
    if (image_height <= 0 || image_width <= 0) throw ValidationError("image dimensions must be positive");
    if (num_views < 1) throw ValidationError("num_views must be >= 1");
    if (min_objects < 1 || min_objects > max_objects || max_objects > kMaxObjects) {
        throw ValidationError("object bounds must satisfy 1 <= min_objects <= max_objects <= 100");
    }
    if (object_classes.empty()) throw ValidationError("object_classes must not be empty");
    if (std::min(image_height, image_width) < 32) throw ValidationError("images must be at least 32 pixels per side");
}

const char* shape_name(Shape s) {
    switch (s) {
        case Shape::rectangle: return "rectangle";
        case Shape::circle: return "circle";
        case Shape::triangle: return "triangle";
    }
    return "?";
}

const char* qa_kind_name(QaKind k) {
    switch (k) {
        case QaKind::multi_choice: return "multi_choice";
        case QaKind::yes_no: return "yes_no";
        case QaKind::coordinate: return "coordinate";
        case QaKind::open: return "open";
    }
    return "?";
}

QaKind parse_qa_kind(const std::string& s) {
    if (s == "multi_choice") return QaKind::multi_choice;
    if (s == "yes_no") return QaKind::yes_no;
    if (s == "coordinate") return QaKind::coordinate;
    if (s == "open") return QaKind::open;
    throw ValidationError("unknown qa_kind: " + s);
}

const char* color_name(int color_id) { return kPalette.at(static_cast<std::size_t>(color_id)).name; }

const std::vector<std::string>& moving_status_options() {
    static const std::vector<std::string> options = {
        "going ahead", "turning left", "turning right", "stopped", "backing up", "changing lanes left",
        "changing lanes right"};
    return options;
}

const std::vector<std::string>& behavior_options() {
    static const std::vector<std::string> options = [] {
        std::vector<std::string> out;
        for (const char* steer : {"straight", "left", "right"}) {
            for (const char* speed : {"stopped", "crawling", "slow", "normal", "fast", "faster", "fastest"}) {
                out.push_back(std::string(steer) + " " + speed);
            }
        }
        return out;
    }();
    return options;
}

std::string format_coord(Point p) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "(%.1f,%.1f)", p.x, p.y);
    return buf;
}

Mask rasterize(const ObjectSpec& obj, int height, int width) {
    Mask m(height, width);
    const double cx = (obj.x0 + obj.x1 + 1) / 2.0;
    const double cy = (obj.y0 + obj.y1 + 1) / 2.0;
    const double rx = (obj.x1 - obj.x0 + 1) / 2.0;
    const double ry = (obj.y1 - obj.y0 + 1) / 2.0;
    // triangle: apex at top centre, base along the bottom edge
    const double ax = cx, ay = obj.y0;
    const double bx = obj.x0, by = obj.y1 + 1.0;
    const double qx = obj.x1 + 1.0, qy = obj.y1 + 1.0;
    auto edge = [](double x0, double y0, double x1, double y1, double px, double py) {
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
    };
    for (int r = std::max(0, obj.y0); r <= std::min(height - 1, obj.y1); ++r) {
        for (int c = std::max(0, obj.x0); c <= std::min(width - 1, obj.x1); ++c) {
            const double px = c + 0.5, py = r + 0.5;
            bool inside = false;
            switch (obj.shape) {
                case Shape::rectangle: inside = true; break;
                case Shape::circle: {
                    const double dx = (px - cx) / rx, dy = (py - cy) / ry;
                    inside = dx * dx + dy * dy <= 1.0;
                    break;
                }
                case Shape::triangle: {
                    const double e0 = edge(ax, ay, bx, by, px, py);
                    const double e1 = edge(bx, by, qx, qy, px, py);
                    const double e2 = edge(qx, qy, ax, ay, px, py);
                    inside = (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
                    break;
                }
            }
            if (inside) m.set(r, c);
        }
    }
    return m;
}

std::vector<ObjectSpec> plan_objects(const SceneConfig& config, std::uint64_t scene_seed) {
    config.validate();
    Rng rng(mix_seed(config.seed, scene_seed));
    const int count = rng.integer(config.min_objects, config.max_objects);
    const int h = config.image_height, w = config.image_width;
    const int side = std::min(h, w);
    const int min_size = std::max(6, side / 18);
    const int max_size = std::max(min_size, side / 5);

    std::vector<ObjectSpec> objects;
    std::vector<Mask> shapes;
    // owner[view][pixel] = index of topmost object, -1 for background
    std::vector<std::vector<int>> owner(static_cast<std::size_t>(config.num_views),
                                        std::vector<int>(static_cast<std::size_t>(h) * w, -1));
    std::vector<std::size_t> visible;

    for (int i = 0; i < count; ++i) {
        const int view = i == 0 ? 0 : rng.integer(0, config.num_views - 1);
        bool placed = false;
        for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
            // shrink the size range when the canvas is crowded
            const int hi = std::max(min_size, max_size - attempt / 40 * (max_size - min_size) / 10);
            ObjectSpec obj;
            obj.view = view;
            obj.shape = static_cast<Shape>(rng.integer(0, 2));
            obj.class_id = rng.integer(0, static_cast<int>(config.object_classes.size()) - 1);
            const int bw = rng.integer(min_size, hi);
            const int bh = obj.shape == Shape::circle ? bw : rng.integer(min_size, hi);
            obj.x0 = rng.integer(0, w - bw);
            obj.y0 = rng.integer(0, h - bh);
            obj.x1 = obj.x0 + bw - 1;
            obj.y1 = obj.y0 + bh - 1;
            Mask shape = rasterize(obj, h, w);

            // every earlier object in this view must keep at least a quarter of its area
            auto& own = owner[static_cast<std::size_t>(view)];
            std::vector<std::size_t> lost(objects.size(), 0);
            for (std::size_t p = 0; p < shape.bits.size(); ++p) {
                if (shape.bits[p] && own[p] >= 0) ++lost[static_cast<std::size_t>(own[p])];
            }
            bool ok = true;
            for (std::size_t j = 0; j < objects.size() && ok; ++j) {
                if (lost[j] == 0) continue;
                ok = 4 * (visible[j] - lost[j]) >= shapes[j].count();
            }
            if (!ok) continue;

            auto [slot, rgb] = color_for(i);
            obj.color_id = slot;
            obj.rgb = rgb;
            for (std::size_t p = 0; p < shape.bits.size(); ++p) {
                if (!shape.bits[p]) continue;
                if (own[p] >= 0) --visible[static_cast<std::size_t>(own[p])];
                own[p] = i;
            }
            visible.push_back(shape.count());
            objects.push_back(obj);
            shapes.push_back(std::move(shape));
            placed = true;
        }
        if (!placed) throw ValidationError("could not place object " + std::to_string(i) + " without occlusion");
    }
    return objects;
}

Scene generate_scene(const SceneConfig& config, std::uint64_t scene_seed) {
    const std::vector<ObjectSpec> objects = plan_objects(config, scene_seed);
    const int h = config.image_height, w = config.image_width;

    char id[32];
    std::snprintf(id, sizeof id, "scene_%06llu", static_cast<unsigned long long>(scene_seed));
    Scene scene;
    scene.scene_id = id;
    for (int v = 0; v < config.num_views; ++v) {
        Image img(h, w);
        paint_background(img, v);
        scene.images.push_back(std::move(img));
    }
    for (std::size_t i = 0; i < objects.size(); ++i) {
        Detection d;
        d.mask = Mask(h, w);
        d.class_label = config.object_classes[static_cast<std::size_t>(objects[i].class_id)];
        d.object_id = static_cast<int>(i);
        d.view = objects[i].view;
        scene.detections.push_back(std::move(d));
    }
    // draw in order; later objects overwrite earlier ones, masks follow the final owner
    for (std::size_t i = 0; i < objects.size(); ++i) {
        const ObjectSpec& obj = objects[i];
        const Mask shape = rasterize(obj, h, w);
        Image& img = scene.images[static_cast<std::size_t>(obj.view)];
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                if (!shape.get(r, c)) continue;
                std::uint8_t* px = img.at(r, c);
                px[0] = obj.rgb[0];
                px[1] = obj.rgb[1];
                px[2] = obj.rgb[2];
                for (std::size_t j = 0; j < i; ++j) {
                    if (objects[j].view == obj.view) scene.detections[j].mask.set(r, c, false);
                }
                scene.detections[i].mask.set(r, c);
            }
        }
    }

    // QA about the primary view
    Rng rng(mix_seed(config.seed ^ 0x5A5A5A5AULL, scene_seed));
    struct Primary {
        std::size_t det;
        Point centroid;
        std::string description;
    };
    std::vector<Primary> primary;
    std::map<std::string, int> description_count;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        if (objects[i].view != 0) continue;
        std::string desc = std::string(color_name(objects[i].color_id)) + " " + shape_name(objects[i].shape);
        ++description_count[desc];
        primary.push_back({i, compute_centroid(scene.detections[i].mask), desc});
    }
    std::vector<std::size_t> unique;
    for (std::size_t k = 0; k < primary.size(); ++k) {
        if (description_count[primary[k].description] == 1) unique.push_back(k);
    }
    auto pick = [&](const std::vector<std::size_t>& from) { return from[static_cast<std::size_t>(rng.integer(0, static_cast<int>(from.size()) - 1))]; };

    // coordinate
    {
        const Primary& t = primary[pick(unique)];
        QARecord q;
        q.qa_kind = QaKind::coordinate;
        q.question = "where is the " + t.description + "?";
        q.answer = "it is at " + format_coord(t.centroid) + ".";
        q.answer_coords = {{round2(t.centroid.x), round2(t.centroid.y)}};
        scene.qa.push_back(std::move(q));
    }
    // yes_no about a probe point, near an object or in free space
    {
        auto nearest = [&](Point p) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& o : primary) best = std::min(best, distance(p, o.centroid));
            return best;
        };
        const bool want_near = rng.uniform() < 0.5;
        Point probe;
        bool found = false;
        if (!want_near) {
            for (int attempt = 0; attempt < 200 && !found; ++attempt) {
                probe = {static_cast<double>(rng.integer(0, w - 1)), static_cast<double>(rng.integer(0, h - 1))};
                found = nearest(probe) > kNearThreshold;
            }
        }
        if (!found) {
            const Primary& t = primary[static_cast<std::size_t>(rng.integer(0, static_cast<int>(primary.size()) - 1))];
            const int px = std::clamp(static_cast<int>(std::lround(t.centroid.x)) + rng.integer(-20, 20), 0, w - 1);
            const int py = std::clamp(static_cast<int>(std::lround(t.centroid.y)) + rng.integer(-20, 20), 0, h - 1);
            probe = {static_cast<double>(px), static_cast<double>(py)};
        }
        QARecord q;
        q.qa_kind = QaKind::yes_no;
        q.question = "is there an object near " +
                     format_int_coord(static_cast<int>(probe.x), static_cast<int>(probe.y)) + "?";
        q.answer = nearest(probe) <= kNearThreshold ? "yes" : "no";
        q.question_coords = {probe};
        scene.qa.push_back(std::move(q));
    }
    // moving status: 7 options, a function of shape and horizontal position
    {
        const Primary& t = primary[pick(unique)];
        const ObjectSpec& obj = objects[t.det];
        const int status = (static_cast<int>(obj.shape) * 3 + horizontal_third(t.centroid.x, w)) % 7;
        QARecord q;
        q.qa_kind = QaKind::multi_choice;
        q.question = "what is the moving status of the " + t.description + "? " +
                     options_text(moving_status_options());
        q.options = lettered(moving_status_options());
        q.answer = letter(static_cast<std::size_t>(status));
        scene.qa.push_back(std::move(q));
    }
    // ego behaviour: 21 options from object layout and count
    {
        double mean_x = 0.0;
        for (const auto& o : primary) mean_x += o.centroid.x;
        mean_x /= static_cast<double>(primary.size());
        const int steer = horizontal_third(mean_x, w);
        const int speed = std::min(static_cast<int>(primary.size()) - 1, 6);
        QARecord q;
        q.qa_kind = QaKind::multi_choice;
        q.question = "predict the behavior of the ego vehicle. " + options_text(behavior_options());
        q.options = lettered(behavior_options());
        q.answer = letter(static_cast<std::size_t>(steer * 7 + speed));
        scene.qa.push_back(std::move(q));
    }
    // open: identify the object at a coordinate
    {
        const Primary& t = primary[static_cast<std::size_t>(rng.integer(0, static_cast<int>(primary.size()) - 1))];
        QARecord q;
        q.qa_kind = QaKind::open;
        q.question = "what is the object at " + format_coord(t.centroid) + "?";
        q.answer = "it is a " + scene.detections[t.det].class_label + ".";
        q.question_coords = {{round2(t.centroid.x), round2(t.centroid.y)}};
        scene.qa.push_back(std::move(q));
    }
    return scene;
}

void Scene::validate() const {
    auto fail = [&](const std::string& msg) { throw ValidationError("scene " + scene_id + ": " + msg); };
    if (images.empty()) fail("no images");
    const int h = height(), w = width();
    for (const auto& img : images) {
        if (img.height != h || img.width != w) fail("views differ in size");
        if (img.pixels.size() != static_cast<std::size_t>(h) * w * 3) fail("pixel buffer size mismatch");
    }
    if (detections.size() > static_cast<std::size_t>(kMaxObjects)) fail("more than 100 detections");
    std::set<std::vector<std::uint8_t>> seen;
    std::vector<Point> primary_centroids;
    for (const auto& d : detections) {
        if (d.mask.height != h || d.mask.width != w) fail("mask size mismatch");
        if (d.view < 0 || d.view >= static_cast<int>(images.size())) fail("detection view out of range");
        if (d.mask.count() == 0) fail("empty mask for object " + std::to_string(d.object_id));
        if (!seen.insert(d.mask.bits).second) fail("duplicate mask for object " + std::to_string(d.object_id));
        if (d.view == 0) {
            const Point c = compute_centroid(d.mask);
            primary_centroids.push_back({round2(c.x), round2(c.y)});
        }
    }
    auto in_bounds = [&](Point p) { return p.x >= 0 && p.x < w && p.y >= 0 && p.y < h; };
    for (const auto& q : qa) {
        for (const auto& p : q.answer_coords) {
            if (!in_bounds(p)) fail("answer coordinate out of bounds");
            if (q.qa_kind == QaKind::coordinate &&
                std::find(primary_centroids.begin(), primary_centroids.end(), p) == primary_centroids.end()) {
                fail("answer coordinate does not name an object centroid");
            }
        }
        for (const auto& p : q.question_coords) {
            if (!in_bounds(p)) fail("question coordinate out of bounds");
        }
        if (q.qa_kind == QaKind::yes_no && q.answer != "yes" && q.answer != "no") fail("yes_no answer not yes/no");
        if (q.qa_kind == QaKind::multi_choice) {
            const bool listed = std::any_of(q.options.begin(), q.options.end(), [&](const std::string& o) {
                return o == q.answer || o.rfind(q.answer + " ", 0) == 0;
            });
            if (!listed) fail("multi_choice answer is not a listed option");
        }
    }
}

}  // namespace markvqa
