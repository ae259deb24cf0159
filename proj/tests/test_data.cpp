#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "hyret/data.hpp"
#include "oracles.hpp"

using namespace hyret;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("hyret_data_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ChangeMap support(const Tensor<float>& a, const Tensor<float>& b) {
    ChangeMap m(1, a.h(), a.w());
    for (int y = 0; y < a.h(); ++y)
        for (int x = 0; x < a.w(); ++x) {
            bool diff = false;
            for (int c = 0; c < 3; ++c) diff = diff || a.at(0, c, y, x) != b.at(0, c, y, x);
            m.at(0, y, x) = diff;
        }
    return m;
}

void make_split_dirs(const fs::path& root) {
    for (const char* d : {"A", "B", "label"}) fs::create_directories(root / "train" / d);
}

void write_triplet(const fs::path& root, const std::string& dir, const std::string& id, int w, int h) {
    Tensor<float> img(Shape{1, 3, h, w}, 0.5f);
    if (dir == "label") {
        ChangeMap m(1, h, w);
        write_png_mask(root / "train" / dir / (id + ".png"), m);
    } else {
        write_png_rgb(root / "train" / dir / (id + ".png"), img);
    }
}

} // namespace

TEST(Synthetic, Deterministic) {
    for (auto d : {Difficulty::easy, Difficulty::hard}) {
        auto a = generate_synthetic_pair(42, 64, d);
        auto b = generate_synthetic_pair(42, 64, d);
        EXPECT_EQ(oracle::max_abs_diff(a.pre, b.pre), 0.0);
        EXPECT_EQ(oracle::max_abs_diff(a.post, b.post), 0.0);
        EXPECT_EQ(*a.label, *b.label);
    }
}

TEST(Synthetic, LabelNonEmptyAndEqualsDifferenceSupport) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto s = generate_synthetic_sample(seed, 64, Difficulty::easy);
        const ChangeMap& label = *s.pair.label;
        ASSERT_GT(label.count_changed(), 0u) << seed;
        EXPECT_EQ(label, support(s.pair.pre, s.pair.post)) << seed;
        EXPECT_EQ(label, support(s.internals.clean_pre, s.internals.clean_post)) << seed;
        EXPECT_EQ(s.internals.distractor.count_changed(), 0u);
        EXPECT_GE(s.internals.added + s.internals.removed, 1);
        EXPECT_LE(s.internals.added + s.internals.removed, 6);
        for (float v : s.pair.pre.values()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    }
}

TEST(Synthetic, DistinctSeedsGiveDistinctLabels) {
    int distinct = 0;
    for (std::uint64_t i = 0; i < 100; ++i)
        distinct += *generate_synthetic_pair(2 * i, 64, Difficulty::easy).label !=
                    *generate_synthetic_pair(2 * i + 1, 64, Difficulty::easy).label;
    EXPECT_GE(distinct, 99);
}

TEST(Synthetic, HardDistractorsAvoidChangedPixels) {
    int with_distractor = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto s = generate_synthetic_sample(seed, 64, Difficulty::hard);
        const ChangeMap& label = *s.pair.label;
        const ChangeMap& dist = s.internals.distractor;
        with_distractor += dist.count_changed() > 0;
        for (std::size_t i = 0; i < label.size(); ++i) ASSERT_FALSE(label.labels[i] && dist.labels[i]) << seed;
        EXPECT_EQ(dist, support(s.internals.clean_post, s.pair.post));
        EXPECT_EQ(label, support(s.internals.clean_pre, s.internals.clean_post));
    }
    EXPECT_GT(with_distractor, 90);
}

TEST(Synthetic, RejectsBadSize) {
    EXPECT_THROW(generate_synthetic_pair(0, 48, Difficulty::easy), ShapeError);
    EXPECT_THROW(SyntheticSource(0, 4, 40, Difficulty::easy), ConfigError);
}

TEST(Synthetic, SourceAndSplitSeeds) {
    SyntheticSource src(7, 5, 64, Difficulty::easy);
    EXPECT_EQ(src.size(), 5u);
    EXPECT_EQ(src.id(3), "00003");
    auto a = src.get(3);
    auto b = generate_synthetic_pair(src.sample_seed(3), 64, Difficulty::easy);
    EXPECT_EQ(*a.label, *b.label);
    std::set<std::uint64_t> seeds{synthetic_split_seed(1, "train"), synthetic_split_seed(1, "val"),
                                  synthetic_split_seed(1, "test")};
    EXPECT_EQ(seeds.size(), 3u);
}

TEST(Png, MaskDecodeThresholdAndRoundTrip) {
    for (int v = 0; v < 256; ++v) EXPECT_EQ(decode_label_value(static_cast<std::uint8_t>(v)), v > 127 ? 1 : 0);
    EXPECT_EQ(encode_label_value(1), 255);
    EXPECT_EQ(encode_label_value(0), 0);

    auto dir = temp_dir("png");
    auto pair = generate_synthetic_pair(3, 64, Difficulty::easy);
    write_png_mask(dir / "m.png", *pair.label);
    EXPECT_EQ(read_png_mask(dir / "m.png"), *pair.label);

    write_png_rgb(dir / "a.png", pair.pre);
    auto back = read_png_rgb(dir / "a.png");
    EXPECT_EQ(back.shape(), pair.pre.shape());
    EXPECT_LE(oracle::max_abs_diff(back, pair.pre), 0.5 / 255 + 1e-6);
    auto size = read_png_size(dir / "a.png");
    EXPECT_EQ(size.width, 64);
    EXPECT_EQ(size.height, 64);

    // Grey 128 in an RGB label still counts as changed.
    Tensor<float> rgb(Shape{1, 3, 2, 2}, 0.0f);
    rgb.at(0, 1, 0, 1) = 128.0f / 255;
    rgb.at(0, 2, 1, 0) = 127.0f / 255;
    write_png_rgb(dir / "rgb_label.png", rgb);
    auto m = read_png_mask(dir / "rgb_label.png");
    EXPECT_EQ(m.at(0, 0, 1), 1);
    EXPECT_EQ(m.at(0, 1, 0), 0);
    EXPECT_EQ(m.count_changed(), 1u);

    EXPECT_THROW(read_png_rgb(dir / "nope.png"), IoError);
    std::ofstream(dir / "junk.png") << "not a png";
    EXPECT_THROW(read_png_rgb(dir / "junk.png"), IoError);
    fs::remove_all(dir);
}

TEST(Manifest, EmptyDirectoriesWarn) {
    auto root = temp_dir("empty");
    make_split_dirs(root);
    auto m = load_tile_dataset(root, "train");
    EXPECT_TRUE(m.samples.empty());
    EXPECT_FALSE(m.warnings.empty());
    fs::remove_all(root);
}

TEST(Manifest, OrphanIsListed) {
    auto root = temp_dir("orphan");
    make_split_dirs(root);
    for (const char* d : {"A", "B"})
        for (const char* id : {"t1", "t2", "t3"}) write_triplet(root, d, id, 32, 32);
    for (const char* id : {"t1", "t2", "zz"}) write_triplet(root, "label", id, 32, 32);
    auto m = load_tile_dataset(root, "train");
    ASSERT_EQ(m.samples.size(), 2u);
    EXPECT_EQ(m.samples[0].id, "t1");
    EXPECT_EQ(m.samples[1].id, "t2");
    ASSERT_EQ(m.warnings.size(), 1u);
    EXPECT_NE(m.warnings[0].find("t3"), std::string::npos);
    EXPECT_NE(m.warnings[0].find("zz"), std::string::npos);
    fs::remove_all(root);
}

TEST(Manifest, MissingDirectoryAndSizeMismatch) {
    auto root = temp_dir("bad");
    EXPECT_THROW(load_tile_dataset(root, "train"), IoError);
    make_split_dirs(root);
    write_triplet(root, "A", "s", 32, 32);
    write_triplet(root, "B", "s", 32, 32);
    write_triplet(root, "label", "s", 64, 32);
    try {
        load_tile_dataset(root, "train");
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find((root / "train" / "label" / "s.png").string()), std::string::npos)
            << e.what();
    }
    fs::remove_all(root);
}

TEST(Manifest, WrittenSyntheticDatasetReadsBack) {
    auto root = temp_dir("write");
    SyntheticDatasetSpec spec;
    spec.seed = 5;
    spec.train = 3;
    spec.val = 2;
    spec.test = 1;
    write_synthetic_dataset(root, spec);
    auto m = load_tile_dataset(root, "train");
    ASSERT_EQ(m.samples.size(), 3u);
    EXPECT_TRUE(m.warnings.empty());
    TileSource tiles(m);
    SyntheticSource synth(synthetic_split_seed(5, "train"), 3, 64, Difficulty::easy);
    for (std::size_t i = 0; i < 3; ++i) {
        auto a = tiles.get(i), b = synth.get(i);
        EXPECT_EQ(tiles.id(i), synth.id(i));
        EXPECT_EQ(*a.label, *b.label);
        EXPECT_LE(oracle::max_abs_diff(a.post, b.post), 0.5 / 255 + 1e-6);
    }
    EXPECT_EQ(load_tile_dataset(root, "val").samples.size(), 2u);
    fs::remove_all(root);
}

TEST(Flip, HorizontalMirror) {
    Tensor<float> x(Shape{1, 3, 2, 3});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = float(i);
    auto f = hflip(x);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 2; ++y)
            for (int j = 0; j < 3; ++j) EXPECT_EQ(f.at(0, c, y, j), x.at(0, c, y, 2 - j));
    EXPECT_EQ(oracle::max_abs_diff(hflip(f), x), 0.0);
    ChangeMap m(1, 1, 3);
    m.at(0, 0, 0) = 1;
    EXPECT_EQ(hflip(m).at(0, 0, 2), 1);
    EXPECT_EQ(hflip(m).at(0, 0, 0), 0);
}
