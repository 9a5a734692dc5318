#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cgssl/datasets.hpp"

namespace cgssl {

// 8-bit PNG; values are rounded to the nearest 1/255.
void write_png(const std::filesystem::path& path, const ImageSample& image);
ImageSample read_png(const std::filesystem::path& path, std::int64_t id = 0);
// Rounds pixels to the values an 8-bit PNG round trip yields.
void quantize_8bit(ImageSample& image);

// Tiles images row-major into a grid with a `gap`-pixel white border.
ImageSample make_grid(std::span<const ImageSample> images, std::size_t columns, std::size_t gap = 1);

// Directory of PNG files plus manifest.json: [{"id", "label", "file"}, ...].
void export_labeled_set(const std::filesystem::path& dir, const LabeledSet& set);
LabeledSet import_labeled_set(const std::filesystem::path& dir);

}  // namespace cgssl
