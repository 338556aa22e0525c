#pragma once

#include <filesystem>
#include <string>

#include "markvqa/scene.hpp"

namespace testing {

// fresh empty directory under the system temp dir
inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("markvqa_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline markvqa::SceneConfig small_config(int size = 224) {
    markvqa::SceneConfig c;
    c.image_height = size;
    c.image_width = size;
    return c;
}

inline markvqa::Image random_image(int h, int w, markvqa::Rng& rng) {
    markvqa::Image img(h, w);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.integer(0, 255));
    return img;
}

}  // namespace testing
