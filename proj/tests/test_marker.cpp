#include <doctest.h>

#include "markvqa/marker.hpp"
#include "support.hpp"

using namespace markvqa;

namespace {

Detection rect_detection(int h, int w, int r0, int r1, int c0, int c1, int view = 0) {
    Detection d;
    d.mask = Mask(h, w);
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) d.mask.set(r, c);
    d.class_label = "car";
    d.view = view;
    return d;
}

// true when (r, c) lies inside the stamped label box of any entry in `view`
bool in_label(const MarkerIndexMap& map, int r, int c, int view = 0) {
    for (const auto& e : map.entries()) {
        if (e.view != view) continue;
        const auto [lw, lh] = label_extent(e.index);
        const int cx = static_cast<int>(std::lround(e.centroid.x));
        const int cy = static_cast<int>(std::lround(e.centroid.y));
        if (std::abs(c - cx) <= lw && std::abs(r - cy) <= lh) return true;
    }
    return false;
}

}  // namespace

TEST_CASE("centroid fixtures") {
    Mask one(20, 20);
    one.set(7, 5);
    CHECK(compute_centroid(one) == Point{5.0, 7.0});

    Mask block(4, 4);
    block.set(0, 0), block.set(0, 1), block.set(1, 0), block.set(1, 1);
    CHECK(compute_centroid(block) == Point{0.5, 0.5});

    const Detection rect = rect_detection(40, 60, 10, 19, 30, 39);
    double sx = 0, sy = 0;
    for (int r = 10; r <= 19; ++r)
        for (int c = 30; c <= 39; ++c) sx += c, sy += r;
    CHECK(compute_centroid(rect.mask) == Point{sx / 100, sy / 100});
    CHECK(compute_centroid(rect.mask) == Point{34.5, 14.5});

    CHECK_THROWS_AS(compute_centroid(Mask(3, 3)), ValidationError);
}

TEST_CASE("build_index_map ordering and truncation") {
    std::vector<Detection> dets = {rect_detection(100, 100, 0, 9, 0, 9)};
    auto built = build_index_map(dets);
    REQUIRE(built.map.size() == 1);
    CHECK(built.map.entries()[0].index == 1);
    CHECK(built.warnings.empty());

    dets.push_back(rect_detection(100, 100, 50, 59, 50, 59));
    dets.push_back(rect_detection(100, 100, 80, 89, 10, 19));
    built = build_index_map(dets);
    REQUIRE(built.map.size() == 3);
    for (int k = 1; k <= 3; ++k) {
        CHECK(built.map.entries()[static_cast<std::size_t>(k - 1)].index == k);
        CHECK(index_to_coords(built.map, k) == compute_centroid(dets[static_cast<std::size_t>(k - 1)].mask));
    }
    CHECK(built.map.detection_count() == 3);

    std::vector<Detection> many;
    for (int i = 0; i < 101; ++i) many.push_back(rect_detection(120, 120, i, i, 0, 2));
    built = build_index_map(many);
    CHECK(built.map.size() == 100);
    CHECK_FALSE(built.warnings.empty());
}

TEST_CASE("build_index_map needs at least one detection") {
    CHECK_THROWS_AS(build_index_map({}), ValidationError);
}

TEST_CASE("index_to_coords bounds") {
    const auto map = build_index_map({rect_detection(40, 40, 20, 20, 10, 10)}).map;
    CHECK(index_to_coords(map, 1) == Point{10, 20});
    CHECK_THROWS_AS(index_to_coords(map, 0), std::out_of_range);
    CHECK_THROWS_AS(index_to_coords(map, 2), std::out_of_range);
}

TEST_CASE("assign_query_coordinate rules") {
    // centroids (5,5), (100,5), (5,100), (100,100)
    std::vector<Detection> dets = {rect_detection(200, 200, 4, 6, 4, 6), rect_detection(200, 200, 4, 6, 99, 101),
                                   rect_detection(200, 200, 99, 101, 4, 6),
                                   rect_detection(200, 200, 99, 101, 99, 101)};
    const auto map = build_index_map(dets).map;

    auto [same, m1] = assign_query_coordinate(map, {100, 5}, 200, 200);
    CHECK(same == 2);
    CHECK(m1 == map);

    // 60 px from every centroid
    auto [fresh, m2] = assign_query_coordinate(map, {160, 100}, 200, 200);
    CHECK(fresh == 5);
    REQUIRE(m2.size() == 5);
    CHECK(m2.entries()[4].source == MarkerSource::question);
    CHECK(m2.coords(5) == Point{160, 100});

    // distance 10 from entry 3, far from the rest
    auto [near3, m3] = assign_query_coordinate(map, {11, 108}, 200, 200);
    CHECK(near3 == 3);
    CHECK(m3 == map);

    // exactly d_th away is not "more than" d_th
    auto [edge, m4] = assign_query_coordinate(map, {35, 45}, 200, 200);
    CHECK(distance({35, 45}, {5, 5}) == 50.0);
    CHECK(edge == 1);
    CHECK(m4.size() == 4);

    CHECK_THROWS_AS(assign_query_coordinate(map, {250, 10}, 200, 200), ValidationError);
    CHECK_THROWS_AS(assign_query_coordinate(map, {-1, 10}, 200, 200), ValidationError);
}

TEST_CASE("query markers only match centroids of the same view") {
    std::vector<Detection> dets = {rect_detection(100, 100, 10, 10, 10, 10, 0),
                                   rect_detection(100, 100, 50, 50, 50, 50, 1)};
    const auto map = build_index_map(dets).map;
    auto [k, updated] = assign_query_coordinate(map, {50, 50}, 100, 100, 0);
    CHECK(k == 3);
    CHECK(updated.entries()[2].view == 0);
}

TEST_CASE("index map json round trip") {
    const Scene s = generate_scene(testing::small_config(), 2);
    auto map = build_index_map(s.detections).map;
    map = assign_query_coordinate(map, {1, 1}, s.height(), s.width()).second;
    const auto j = map.to_json();
    CHECK(j.at("d_th").get<double>() == 50.0);
    CHECK(j.at("entries").size() == map.size());
    CHECK(MarkerIndexMap::from_json(j) == map);
    CHECK(MarkerIndexMap::from_json(nlohmann::json::parse(j.dump())) == map);
}

TEST_CASE("render: question-only map on a blank image only stamps digits") {
    const Image blank(120, 120, 90);
    MarkerIndexMap map;
    map = assign_query_coordinate(map, {60, 60}, 120, 120).second;
    const MarkerImage out = render_marker_image(blank, map, {}, 0.5);
    int changed = 0;
    for (int r = 0; r < 120; ++r) {
        for (int c = 0; c < 120; ++c) {
            const bool same = std::equal(blank.at(r, c), blank.at(r, c) + 3, out.pixels.at(r, c));
            if (!same) {
                ++changed;
                CHECK(in_label(map, r, c));
            }
        }
    }
    CHECK(changed > 0);
}

TEST_CASE("render: alpha 0 leaves pixels outside labels untouched") {
    const Scene s = generate_scene(testing::small_config(), 4);
    const auto map = build_index_map(s.detections).map;
    const MarkerImage out = render_marker_image(s.images[0], map, s.detections, 0.0);
    for (int r = 0; r < s.height(); ++r) {
        for (int c = 0; c < s.width(); ++c) {
            if (in_label(map, r, c)) continue;
            CHECK(std::equal(s.images[0].at(r, c), s.images[0].at(r, c) + 3, out.pixels.at(r, c)));
        }
    }
}

TEST_CASE("render: blend arithmetic at a mask pixel") {
    const Image grey(100, 100, 200);
    const std::vector<Detection> dets = {rect_detection(100, 100, 0, 39, 0, 39)};
    const auto map = build_index_map(dets).map;
    const auto fill = marker_fill_color(1);
    const MarkerImage out = render_marker_image(grey, map, dets, 0.5);
    // corner pixel of the mask, far from the label at (19.5, 19.5)
    const std::uint8_t* px = out.pixels.at(0, 0);
    for (int ch = 0; ch < 3; ++ch) {
        CHECK(px[ch] == static_cast<int>(std::lround(0.5 * 200 + 0.5 * fill[static_cast<std::size_t>(ch)])));
    }
    // outside the mask nothing changes
    CHECK(out.pixels.at(90, 90)[0] == 200);
}

TEST_CASE("render: labels are drawn in white with a dark outline") {
    const Image grey(100, 100, 128);
    MarkerIndexMap map;
    map = assign_query_coordinate(map, {50, 50}, 100, 100).second;
    const MarkerImage out = render_marker_image(grey, map, {}, 0.5);
    int white = 0, black = 0;
    for (const auto v : out.pixels.pixels) {
        white += v == 255;
        black += v == 0;
    }
    CHECK(white > 0);
    CHECK(black > 0);
}

TEST_CASE("render validates inputs") {
    const Scene s = generate_scene(testing::small_config(), 0);
    const auto map = build_index_map(s.detections).map;
    CHECK_THROWS_AS(render_marker_image(s.images[0], map, s.detections, 1.5), ValidationError);
    CHECK_THROWS_AS(render_marker_image(s.images[0], map, {}, 0.5), ValidationError);
}

TEST_CASE("fill colours differ between neighbouring indices") {
    for (int k = 1; k < 100; ++k) CHECK(marker_fill_color(k) != marker_fill_color(k + 1));
}

TEST_CASE("label extent grows with digit count") {
    CHECK(label_extent(7).first < label_extent(42).first);
    CHECK(label_extent(42).first < label_extent(100).first);
}
