#include "cgssl/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include <nlohmann/json.hpp>

#include "cgssl/error.hpp"

namespace cgssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

int color_type_for(std::size_t channels) {
    switch (channels) {
        case 1: return PNG_COLOR_TYPE_GRAY;
        case 3: return PNG_COLOR_TYPE_RGB;
        case 4: return PNG_COLOR_TYPE_RGBA;
        default: throw InvalidInput("PNG export supports 1, 3 or 4 channels");
    }
}

}  // namespace

void write_png(const fs::path& path, const ImageSample& image) {
    validate(image);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw Error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng initialization failed");
    }
    const auto& s = image.shape;
    std::vector<png_byte> row(s.width * s.channels);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("failed writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(s.width), static_cast<png_uint_32>(s.height), 8,
                 color_type_for(s.channels), PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < s.height; ++y) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            const float v = image.pixels[y * row.size() + i];
            row[i] = static_cast<png_byte>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageSample read_png(const fs::path& path, std::int64_t id) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw IngestionError("cannot open image " + path.string());
    png_byte header[8];
    if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
        throw IngestionError("not a PNG file: " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IngestionError("libpng initialization failed");
    }
    ImageSample out;
    std::vector<png_byte> row;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IngestionError("corrupt PNG file " + path.string());
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_packing(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const auto width = png_get_image_width(png, info);
    const auto height = png_get_image_height(png, info);
    const auto channels = png_get_channels(png, info);
    out.id = id;
    out.shape = ImageShape{height, width, channels};
    out.pixels.resize(static_cast<std::size_t>(width) * height * channels);
    row.resize(png_get_rowbytes(png, info));
    for (png_uint_32 y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (std::size_t i = 0; i < static_cast<std::size_t>(width) * channels; ++i) {
            out.pixels[y * width * channels + i] = static_cast<float>(row[i]) / 255.0f;
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void quantize_8bit(ImageSample& image) {
    for (auto& v : image.pixels) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
}

ImageSample make_grid(std::span<const ImageSample> images, std::size_t columns, std::size_t gap) {
    if (images.empty() || columns == 0) throw InvalidInput("grid needs at least one image and column");
    const ImageShape cell = images.front().shape;
    const std::size_t cols = std::min(columns, images.size());
    const std::size_t rows = (images.size() + cols - 1) / cols;
    ImageSample grid;
    grid.shape = ImageShape{rows * (cell.height + gap) + gap, cols * (cell.width + gap) + gap, cell.channels};
    grid.pixels.assign(grid.shape.height * grid.shape.width * grid.shape.channels, 1.0f);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (!(images[i].shape == cell)) throw InvalidInput("grid images must share one shape");
        const std::size_t oy = gap + (i / cols) * (cell.height + gap);
        const std::size_t ox = gap + (i % cols) * (cell.width + gap);
        for (std::size_t y = 0; y < cell.height; ++y) {
            for (std::size_t x = 0; x < cell.width; ++x) {
                for (std::size_t c = 0; c < cell.channels; ++c) grid.at(oy + y, ox + x, c) = images[i].at(y, x, c);
            }
        }
    }
    return grid;
}

void export_labeled_set(const fs::path& dir, const LabeledSet& set) {
    validate(set);
    fs::create_directories(dir);
    json manifest = json::array();
    for (std::size_t i = 0; i < set.size(); ++i) {
        const std::string file = std::to_string(set.samples[i].id) + ".png";
        write_png(dir / file, set.samples[i]);
        manifest.push_back({{"id", set.samples[i].id}, {"label", set.labels[i]}, {"file", file}});
    }
    json doc{{"schema_version", 1}, {"num_classes", set.num_classes}, {"samples", manifest}};
    std::ofstream(dir / "manifest.json") << doc.dump(2) << '\n';
}

LabeledSet import_labeled_set(const fs::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw IngestionError("missing manifest " + manifest_path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw IngestionError("corrupt manifest " + manifest_path.string() + ": " + e.what());
    }
    LabeledSet set;
    set.num_classes = doc.at("num_classes").get<std::size_t>();
    for (const auto& entry : doc.at("samples")) {
        set.samples.push_back(read_png(dir / entry.at("file").get<std::string>(), entry.at("id").get<std::int64_t>()));
        set.labels.push_back(entry.at("label").get<int>());
    }
    validate(set);
    return set;
}

}  // namespace cgssl
