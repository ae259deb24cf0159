#include <algorithm>
#include <cmath>
#include <cstdio>

#include "hyret/data.hpp"
#include "hyret/random.hpp"

namespace hyret {

Difficulty parse_difficulty(const std::string& s) {
    if (s == "easy") return Difficulty::easy;
    if (s == "hard") return Difficulty::hard;
    throw ConfigError("difficulty must be \"easy\" or \"hard\", got \"" + s + "\"");
}

std::string difficulty_name(Difficulty d) { return d == Difficulty::easy ? "easy" : "hard"; }

namespace {

struct Blob {
    bool ellipse;
    double cy, cx, ry, rx;

    bool contains(int y, int x) const {
        const double dy = (y + 0.5 - cy) / ry;
        const double dx = (x + 0.5 - cx) / rx;
        if (ellipse) return dy * dy + dx * dx <= 1.0;
        return std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
    }
};

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Blob random_blob(Rng& rng, int size, double min_radius, double max_radius) {
    Blob b;
    b.ellipse = uniform_int(rng, 0, 1) == 1;
    b.cy = uniform(rng, 0, size);
    b.cx = uniform(rng, 0, size);
    b.ry = uniform(rng, min_radius, max_radius);
    b.rx = uniform(rng, min_radius, max_radius);
    return b;
}

void paint(Tensor<float>& img, const Blob& b, const float color[3]) {
    const int size = img.h();
    const int y0 = std::max(0, static_cast<int>(b.cy - b.ry) - 1), y1 = std::min(size, static_cast<int>(b.cy + b.ry) + 2);
    const int x0 = std::max(0, static_cast<int>(b.cx - b.rx) - 1), x1 = std::min(size, static_cast<int>(b.cx + b.rx) + 2);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            if (b.contains(y, x))
                for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = color[c];
}

Tensor<float> smooth_background(Rng& rng, int size) {
    const int cells = std::max(2, size / 16);
    const int g = cells + 1;
    Tensor<float> img({1, 3, size, size});
    for (int c = 0; c < 3; ++c) {
        const double base = uniform(rng, 0.25, 0.45);
        std::vector<double> grid(static_cast<std::size_t>(g) * g);
        for (auto& v : grid) v = base + uniform(rng, -0.12, 0.12);
        for (int y = 0; y < size; ++y) {
            const double fy = (y + 0.5) * cells / size;
            const int iy = std::min(static_cast<int>(fy), cells - 1);
            const double ty = fy - iy;
            for (int x = 0; x < size; ++x) {
                const double fx = (x + 0.5) * cells / size;
                const int ix = std::min(static_cast<int>(fx), cells - 1);
                const double tx = fx - ix;
                const double v = (1 - ty) * ((1 - tx) * grid[iy * g + ix] + tx * grid[iy * g + ix + 1]) +
                                 ty * ((1 - tx) * grid[(iy + 1) * g + ix] + tx * grid[(iy + 1) * g + ix + 1]);
                img.at(0, c, y, x) = static_cast<float>(v);
            }
        }
    }
    return img;
}

ChangeMap difference_support(const Tensor<float>& a, const Tensor<float>& b) {
    ChangeMap m(1, a.h(), a.w());
    for (int y = 0; y < a.h(); ++y)
        for (int x = 0; x < a.w(); ++x)
            for (int c = 0; c < 3; ++c)
                if (a.at(0, c, y, x) != b.at(0, c, y, x)) m.at(0, y, x) = 1;
    return m;
}

} // namespace

SyntheticSample generate_synthetic_sample(std::uint64_t seed, int size, Difficulty difficulty) {
    if (size < 32 || size % 32 != 0)
        throw ShapeError("synthetic size must be a positive multiple of 32, got " + std::to_string(size));
    Rng rng(seed);
    SyntheticSample s;
    SyntheticInternals& in = s.internals;
    const double min_r = size / 16.0, max_r = size / 6.0;

    Tensor<float> background = smooth_background(rng, size);
    const int statics = uniform_int(rng, 0, 3);
    for (int i = 0; i < statics; ++i) {
        const Blob b = random_blob(rng, size, min_r, max_r);
        float color[3];
        for (float& v : color) v = static_cast<float>(uniform(rng, 0.02, 0.18));
        paint(background, b, color);
    }

    ChangeMap label;
    do {
        in.clean_pre = background;
        in.clean_post = background;
        in.added = in.removed = 0;
        const int shapes = uniform_int(rng, 1, 6);
        for (int i = 0; i < shapes; ++i) {
            const Blob b = random_blob(rng, size, min_r, max_r);
            float color[3];
            for (float& v : color) v = static_cast<float>(uniform(rng, 0.7, 1.0));
            if (uniform_int(rng, 0, 1) == 1) {
                paint(in.clean_post, b, color);
                ++in.added;
            } else {
                paint(in.clean_pre, b, color);
                ++in.removed;
            }
        }
        label = difference_support(in.clean_pre, in.clean_post);
    } while (label.count_changed() == 0);

    Tensor<float> post = in.clean_post;
    if (difficulty == Difficulty::hard) {
        const double magnitude = uniform(rng, 0.04, 0.12);
        const double shift = uniform_int(rng, 0, 1) ? magnitude : -magnitude;
        const int shadows = uniform_int(rng, 1, 3);
        std::vector<Blob> blobs;
        std::vector<double> factors;
        for (int i = 0; i < shadows; ++i) {
            blobs.push_back(random_blob(rng, size, min_r, 1.5 * max_r));
            factors.push_back(uniform(rng, 0.5, 0.75));
        }
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                if (label.at(0, y, x)) continue;
                double scale = 1.0;
                for (std::size_t i = 0; i < blobs.size(); ++i)
                    if (blobs[i].contains(y, x)) scale *= factors[i];
                for (int c = 0; c < 3; ++c) {
                    float& v = post.at(0, c, y, x);
                    v = static_cast<float>(std::clamp((v + shift) * scale, 0.0, 1.0));
                }
            }
    }
    in.distractor = difference_support(in.clean_post, post);

    s.pair.pre = in.clean_pre;
    s.pair.post = std::move(post);
    s.pair.label = std::move(label);
    return s;
}

ImagePair generate_synthetic_pair(std::uint64_t seed, int size, Difficulty difficulty) {
    return generate_synthetic_sample(seed, size, difficulty).pair;
}

SyntheticSource::SyntheticSource(std::uint64_t seed, std::size_t count, int image_size, Difficulty difficulty)
    : seed_(seed), count_(count), image_size_(image_size), difficulty_(difficulty) {
    if (image_size < 32 || image_size % 32 != 0)
        throw ConfigError("synthetic image size must be a positive multiple of 32, got " + std::to_string(image_size));
}

std::uint64_t SyntheticSource::sample_seed(std::size_t index) const { return derive_seed(seed_, index); }

ImagePair SyntheticSource::get(std::size_t index) const {
    if (index >= count_) throw std::out_of_range("synthetic sample index out of range");
    return generate_synthetic_pair(sample_seed(index), image_size_, difficulty_);
}

std::string SyntheticSource::id(std::size_t index) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05zu", index);
    return buf;
}

std::uint64_t synthetic_split_seed(std::uint64_t seed, const std::string& split) {
    if (split == "train") return derive_seed(seed, 0x7261);
    if (split == "val") return derive_seed(seed, 0x7661);
    if (split == "test") return derive_seed(seed, 0x7465);
    throw ConfigError("split must be train, val or test, got \"" + split + "\"");
}

Tensor<float> hflip(const Tensor<float>& x) {
    Tensor<float> out(x.shape());
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c)
            for (int y = 0; y < x.h(); ++y)
                for (int i = 0; i < x.w(); ++i) out.at(n, c, y, i) = x.at(n, c, y, x.w() - 1 - i);
    return out;
}

ChangeMap hflip(const ChangeMap& m) {
    ChangeMap out(m.n, m.h, m.w);
    for (int n = 0; n < m.n; ++n)
        for (int y = 0; y < m.h; ++y)
            for (int i = 0; i < m.w; ++i) out.at(n, y, i) = m.at(n, y, m.w - 1 - i);
    return out;
}

} // namespace hyret
