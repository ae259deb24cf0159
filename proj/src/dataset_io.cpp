#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "hyret/data.hpp"

namespace hyret {

namespace {

struct PngBuffer {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;
};

png_image begin_read(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("file not found: " + path.string());
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot read PNG " + path.string() + ": " + image.message);
    return image;
}

PngBuffer read_rgb8(const fs::path& path) {
    png_image image = begin_read(path);
    image.format = PNG_FORMAT_RGB;
    PngBuffer buf;
    buf.width = static_cast<int>(image.width);
    buf.height = static_cast<int>(image.height);
    buf.rgb.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.rgb.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot decode PNG " + path.string() + ": " + msg);
    }
    return buf;
}

void write_png(const fs::path& path, int width, int height, png_uint_32 format, const std::uint8_t* data) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = format;
    if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr))
        throw IoError("cannot write PNG " + path.string() + ": " + image.message);
}

std::set<std::string> png_stems(const fs::path& dir) {
    std::set<std::string> out;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png") out.insert(entry.path().stem().string());
    return out;
}

} // namespace

PngSize read_png_size(const fs::path& path) {
    png_image image = begin_read(path);
    PngSize s{static_cast<int>(image.width), static_cast<int>(image.height)};
    png_image_free(&image);
    return s;
}

Tensor<float> read_png_rgb(const fs::path& path) {
    const PngBuffer buf = read_rgb8(path);
    Tensor<float> out({1, 3, buf.height, buf.width});
    for (int y = 0; y < buf.height; ++y)
        for (int x = 0; x < buf.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(0, c, y, x) = buf.rgb[(static_cast<std::size_t>(y) * buf.width + x) * 3 + c] / 255.0f;
    return out;
}

void write_png_rgb(const fs::path& path, const Tensor<float>& image) {
    if (image.c() != 3) throw ShapeError("write_png_rgb: expected 3 channels, got " + std::to_string(image.c()));
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(image.h()) * image.w() * 3);
    for (int y = 0; y < image.h(); ++y)
        for (int x = 0; x < image.w(); ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(image.at(0, c, y, x), 0.0f, 1.0f);
                rgb[(static_cast<std::size_t>(y) * image.w() + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::lround(v * 255.0f));
            }
    write_png(path, image.w(), image.h(), PNG_FORMAT_RGB, rgb.data());
}

ChangeMap read_png_mask(const fs::path& path) {
    const PngBuffer buf = read_rgb8(path);
    ChangeMap m(1, buf.height, buf.width);
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
        const std::uint8_t v = std::max({buf.rgb[3 * i], buf.rgb[3 * i + 1], buf.rgb[3 * i + 2]});
        m.labels[i] = decode_label_value(v);
    }
    return m;
}

void write_png_mask(const fs::path& path, const ChangeMap& mask, int index) {
    if (index < 0 || index >= mask.n) throw ShapeError("write_png_mask: sample index out of range");
    const std::size_t plane = static_cast<std::size_t>(mask.h) * mask.w;
    std::vector<std::uint8_t> gray(plane);
    for (std::size_t i = 0; i < plane; ++i) gray[i] = encode_label_value(mask.labels[index * plane + i]);
    write_png(path, mask.w, mask.h, PNG_FORMAT_GRAY, gray.data());
}

DatasetManifest load_tile_dataset(const fs::path& root, const std::string& split) {
    if (split != "train" && split != "val" && split != "test")
        throw ConfigError("split must be train, val or test, got \"" + split + "\"");
    DatasetManifest m;
    m.root = root;
    m.split = split;
    const fs::path base = root / split;
    const char* names[] = {"A", "B", "label"};
    std::set<std::string> stems[3];
    for (int i = 0; i < 3; ++i) {
        const fs::path dir = base / names[i];
        if (!fs::is_directory(dir)) throw IoError("missing dataset directory: " + dir.string());
        stems[i] = png_stems(dir);
    }

    std::set<std::string> all;
    for (const auto& s : stems) all.insert(s.begin(), s.end());
    std::vector<std::string> orphans;
    for (const auto& id : all) {
        if (stems[0].count(id) && stems[1].count(id) && stems[2].count(id)) {
            SampleFiles f{id, base / "A" / (id + ".png"), base / "B" / (id + ".png"), base / "label" / (id + ".png")};
            const PngSize a = read_png_size(f.pre);
            for (const fs::path* other : {&f.post, &f.label}) {
                const PngSize b = read_png_size(*other);
                if (a.width != b.width || a.height != b.height)
                    throw ShapeError("size mismatch in sample \"" + id + "\": " + other->string() + " is " +
                                     std::to_string(b.width) + "x" + std::to_string(b.height) + ", expected " +
                                     std::to_string(a.width) + "x" + std::to_string(a.height));
            }
            m.samples.push_back(std::move(f));
        } else {
            orphans.push_back(id);
        }
    }
    if (!orphans.empty()) {
        std::string msg = "ignoring " + std::to_string(orphans.size()) + " id(s) missing from A, B or label:";
        for (const auto& o : orphans) msg += " " + o;
        m.warnings.push_back(msg);
    }
    if (m.samples.empty()) m.warnings.push_back("no samples found under " + base.string());
    return m;
}

ImagePair load_sample(const SampleFiles& files) {
    ImagePair p;
    p.pre = read_png_rgb(files.pre);
    p.post = read_png_rgb(files.post);
    p.label = read_png_mask(files.label);
    if (!(p.pre.shape() == p.post.shape()) || p.label->h != p.pre.h() || p.label->w != p.pre.w())
        throw ShapeError("size mismatch in sample \"" + files.id + "\"");
    return p;
}

void write_synthetic_dataset(const fs::path& root, const SyntheticDatasetSpec& spec) {
    const std::pair<const char*, std::size_t> splits[] = {{"train", spec.train}, {"val", spec.val}, {"test", spec.test}};
    for (const auto& [split, count] : splits) {
        const SyntheticSource source(synthetic_split_seed(spec.seed, split), count, spec.image_size, spec.difficulty);
        const fs::path base = root / split;
        for (const char* sub : {"A", "B", "label"}) {
            std::error_code ec;
            fs::create_directories(base / sub, ec);
            if (ec) throw IoError("cannot create directory " + (base / sub).string() + ": " + ec.message());
        }
        for (std::size_t i = 0; i < count; ++i) {
            const ImagePair p = source.get(i);
            const std::string name = source.id(i) + ".png";
            write_png_rgb(base / "A" / name, p.pre);
            write_png_rgb(base / "B" / name, p.post);
            write_png_mask(base / "label" / name, *p.label);
        }
    }
}

} // namespace hyret
