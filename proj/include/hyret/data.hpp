#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hyret/change_map.hpp"
#include "hyret/tensor.hpp"

namespace hyret {

namespace fs = std::filesystem;

enum class Difficulty { easy, hard };

Difficulty parse_difficulty(const std::string& s);
std::string difficulty_name(Difficulty d);

// Pre/post images [1,3,H,W] in [0,1], optionally with ground truth.
struct ImagePair {
    Tensor<float> pre;
    Tensor<float> post;
    std::optional<ChangeMap> label;
};

// What the generator drew before distractors were applied.
struct SyntheticInternals {
    Tensor<float> clean_pre;
    Tensor<float> clean_post;
    ChangeMap distractor;  // pixels of I_post touched by brightness/shadow edits
    int added = 0;
    int removed = 0;
};

struct SyntheticSample {
    ImagePair pair;
    SyntheticInternals internals;
};

// Shared smooth background; 1-6 shapes added to or removed from the post
// image. The label is the support of clean_post - clean_pre.
SyntheticSample generate_synthetic_sample(std::uint64_t seed, int size, Difficulty difficulty);
ImagePair generate_synthetic_pair(std::uint64_t seed, int size, Difficulty difficulty);

// ---- PNG ----------------------------------------------------------------

inline std::uint8_t decode_label_value(std::uint8_t v) { return v > 127 ? 1 : 0; }
inline std::uint8_t encode_label_value(std::uint8_t v) { return v ? 255 : 0; }

struct PngSize {
    int width = 0;
    int height = 0;
};

PngSize read_png_size(const fs::path& path);
// [1,3,H,W] scaled by 1/255.
Tensor<float> read_png_rgb(const fs::path& path);
// Values clamped to [0,1] and rounded to 8 bits. Takes sample 0 of the tensor.
void write_png_rgb(const fs::path& path, const Tensor<float>& image);
// Any channel > 127 -> 1.
ChangeMap read_png_mask(const fs::path& path);
// Writes sample `index` as a grayscale {0,255} PNG.
void write_png_mask(const fs::path& path, const ChangeMap& mask, int index = 0);

// ---- Tile folders -------------------------------------------------------

struct SampleFiles {
    std::string id;
    fs::path pre;
    fs::path post;
    fs::path label;
};

struct DatasetManifest {
    fs::path root;
    std::string split;
    std::vector<SampleFiles> samples;
    std::vector<std::string> warnings;
};

// <root>/<split>/{A,B,label}/<id>.png. Keeps ids present in all three
// folders, sorted; orphans and empty splits are reported in `warnings`.
DatasetManifest load_tile_dataset(const fs::path& root, const std::string& split);
ImagePair load_sample(const SampleFiles& files);

// ---- Sample sources -----------------------------------------------------

class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual std::size_t size() const = 0;
    virtual ImagePair get(std::size_t index) const = 0;
    virtual std::string id(std::size_t index) const = 0;
};

class SyntheticSource : public SampleSource {
public:
    SyntheticSource(std::uint64_t seed, std::size_t count, int image_size, Difficulty difficulty);
    std::size_t size() const override { return count_; }
    ImagePair get(std::size_t index) const override;
    std::string id(std::size_t index) const override;
    std::uint64_t sample_seed(std::size_t index) const;

private:
    std::uint64_t seed_;
    std::size_t count_;
    int image_size_;
    Difficulty difficulty_;
};

class TileSource : public SampleSource {
public:
    explicit TileSource(DatasetManifest manifest) : manifest_(std::move(manifest)) {}
    std::size_t size() const override { return manifest_.samples.size(); }
    ImagePair get(std::size_t index) const override { return load_sample(manifest_.samples.at(index)); }
    std::string id(std::size_t index) const override { return manifest_.samples.at(index).id; }
    const DatasetManifest& manifest() const { return manifest_; }

private:
    DatasetManifest manifest_;
};

// Seed stream used for each split of a synthetic dataset.
std::uint64_t synthetic_split_seed(std::uint64_t seed, const std::string& split);

struct SyntheticDatasetSpec {
    std::uint64_t seed = 0;
    int image_size = 64;
    Difficulty difficulty = Difficulty::easy;
    std::size_t train = 512;
    std::size_t val = 64;
    std::size_t test = 64;
};

// Writes the same layout load_tile_dataset reads.
void write_synthetic_dataset(const fs::path& root, const SyntheticDatasetSpec& spec);

// Horizontal mirror of every sample/channel.
Tensor<float> hflip(const Tensor<float>& x);
ChangeMap hflip(const ChangeMap& m);

} // namespace hyret
