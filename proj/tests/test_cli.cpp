#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "hyret/data.hpp"

#ifndef HYRET_CLI_PATH
#error "HYRET_CLI_PATH must point at the command-line binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
    int code = -1;
    std::string output;
};

class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / ("hyret_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static fs::path write_config(const std::string& name, const json& doc) {
        const fs::path p = dir_ / (name + ".json");
        std::ofstream(p) << doc.dump(2);
        return p;
    }

    static CliResult run(const std::string& args) {
        const fs::path log = dir_ / "last_output.txt";
        const std::string cmd = std::string(HYRET_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
        const int status = std::system(cmd.c_str());
        CliResult r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        std::ifstream in(log);
        std::stringstream ss;
        ss << in.rdbuf();
        r.output = ss.str();
        return r;
    }

    static json read_json(const fs::path& p) {
        std::ifstream in(p);
        return json::parse(in);
    }

    static fs::path dir_;
};

fs::path CliTest::dir_;

json small_data(const fs::path& root) {
    return {{"source", "tiles"}, {"root", root.string()}};
}

} // namespace

TEST_F(CliTest, UnknownKeyExitsOneWithPath) {
    auto cfg = write_config("bad", {{"train", {{"bogus", 3}}}});
    auto r = run("train --config " + cfg.string() + " --out " + (dir_ / "bad_out").string());
    EXPECT_EQ(r.code, 1) << r.output;
    EXPECT_NE(r.output.find("train.bogus"), std::string::npos) << r.output;
}

TEST_F(CliTest, MissingConfigExitsTwo) {
    auto r = run("train --config " + (dir_ / "nowhere.json").string());
    EXPECT_EQ(r.code, 2) << r.output;
    EXPECT_NE(r.output.find("nowhere.json"), std::string::npos) << r.output;
}

TEST_F(CliTest, MissingDatasetExitsTwo) {
    auto cfg = write_config("tiles_missing", {{"data", small_data(dir_ / "no_dataset")}});
    auto r = run("train --config " + cfg.string() + " --out " + (dir_ / "tm").string());
    EXPECT_EQ(r.code, 2) << r.output;
    EXPECT_NE(r.output.find("no_dataset"), std::string::npos) << r.output;
}

TEST_F(CliTest, UsageErrorIsNonZero) {
    EXPECT_NE(run("").code, 0);
    EXPECT_NE(run("frobnicate --config x.json").code, 0);
    EXPECT_NE(run("train").code, 0);
}

TEST_F(CliTest, GradcheckPassesAndWritesEffectiveConfig) {
    auto cfg = write_config("gc", json::object());
    const fs::path out = dir_ / "gc_out";
    auto r = run("gradcheck --config " + cfg.string() + " --out " + out.string());
    EXPECT_EQ(r.code, 0) << r.output;
    ASSERT_TRUE(fs::exists(out / "gradcheck.csv"));
    ASSERT_TRUE(fs::exists(out / "config.json"));
    auto eff = read_json(out / "config.json");
    EXPECT_EQ(eff["train"]["total_steps"], 500);
    EXPECT_EQ(eff["gradcheck"]["block_tolerance"], 1e-4);
    std::ifstream csv(out / "gradcheck.csv");
    std::string line;
    std::getline(csv, line);
    int blocks = 0;
    while (std::getline(csv, line)) {
        ++blocks;
        EXPECT_EQ(line.back(), '1') << line;
    }
    EXPECT_GE(blocks, 8);
}

TEST_F(CliTest, EvalOnGroundTruthFixtureIsPerfect) {
    const fs::path root = dir_ / "fixture";
    auto make = write_config("mk", {{"data", {{"train_count", 2}, {"val_count", 2}, {"test_count", 4}}}});
    ASSERT_EQ(run("make-synthetic --config " + make.string() + " --out " + root.string()).code, 0);
    ASSERT_TRUE(fs::exists(root / "test" / "label" / "00003.png"));

    const fs::path preds = dir_ / "gt_preds";
    fs::create_directories(preds);
    for (const auto& e : fs::directory_iterator(root / "test" / "label"))
        fs::copy_file(e.path(), preds / e.path().filename());
    auto cfg = write_config("ev", {{"data", small_data(root)}, {"eval", {{"predictions", preds.string()}}}});
    const fs::path out = dir_ / "ev_out";
    auto r = run("eval --config " + cfg.string() + " --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.output;
    auto m = read_json(out / "eval_metrics.json");
    EXPECT_EQ(m["f1"], 1.0);
    EXPECT_EQ(m["iou"], 1.0);
    EXPECT_EQ(m["oa"], 1.0);
}

TEST_F(CliTest, TrainThenPredictIdenticalImagesIsMostlyUnchanged) {
    const fs::path out = dir_ / "train_out";
    auto cfg = write_config("tr", {{"train", {{"total_steps", 200}, {"eval_interval", 100}}},
                                   {"data", {{"train_count", 128}, {"val_count", 16}, {"test_count", 8}}}});
    auto r = run("train --config " + cfg.string() + " --out " + out.string() + " --seed 0");
    ASSERT_EQ(r.code, 0) << r.output;
    ASSERT_TRUE(fs::exists(out / "best.ckpt"));
    ASSERT_TRUE(fs::exists(out / "train_log.csv"));
    EXPECT_EQ(read_json(out / "config.json")["train"]["seed"], 0);

    auto pair = hyret::generate_synthetic_pair(12345, 64, hyret::Difficulty::easy);
    const fs::path img = dir_ / "same.png";
    hyret::write_png_rgb(img, pair.pre);
    auto pcfg = write_config("pr", {{"predict", {{"pre", img.string()}, {"post", img.string()}}}});
    const fs::path pout = dir_ / "pred_out";
    auto p = run("predict --config " + pcfg.string() + " --checkpoint " + (out / "best.ckpt").string() + " --out " +
                 pout.string());
    ASSERT_EQ(p.code, 0) << p.output;
    auto mask = hyret::read_png_mask(pout / "mask.png");
    const double zeros = 1.0 - double(mask.count_changed()) / double(mask.size());
    EXPECT_GE(zeros, 0.95);
    ASSERT_TRUE(fs::exists(pout / "panel.png"));
    auto panel = hyret::read_png_size(pout / "panel.png");
    EXPECT_GT(panel.width, 4 * 64);
    EXPECT_EQ(panel.height, 64);

    auto missing = run("predict --config " + pcfg.string() + " --checkpoint " + (dir_ / "none.ckpt").string() +
                       " --out " + pout.string());
    EXPECT_EQ(missing.code, 2) << missing.output;

    const fs::path eout = dir_ / "eval_ckpt";
    auto ecfg = write_config("ev2", {{"data", {{"train_count", 2}, {"val_count", 2}, {"test_count", 8}}}});
    auto e = run("eval --config " + ecfg.string() + " --checkpoint " + (out / "best.ckpt").string() + " --out " +
                 eout.string());
    ASSERT_EQ(e.code, 0) << e.output;
    EXPECT_TRUE(fs::exists(eout / "masks" / "00007.png"));
    EXPECT_GT(read_json(eout / "eval_metrics.json")["f1"].get<double>(), 0.0);
}

TEST_F(CliTest, BenchWritesMedians) {
    auto cfg = write_config("bench", {{"bench", {{"grid_sizes", {4, 8}}, {"trials", 3}}}});
    const fs::path out = dir_ / "bench_out";
    auto r = run("bench --config " + cfg.string() + " --out " + out.string());
    ASSERT_EQ(r.code, 0) << r.output;
    std::ifstream in(out / "bench.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "grid,tokens,variant,trials,median_ms,min_ms,max_ms");
    int rows = 0;
    for (std::string l; std::getline(in, l);) ++rows;
    EXPECT_EQ(rows, 4);
}
