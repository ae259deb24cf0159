#include <gtest/gtest.h>

#include <fstream>

#include "hyret/config.hpp"

using namespace hyret;
using nlohmann::json;

namespace {

std::string config_error(const json& doc) {
    try {
        parse_run_config(doc);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
    auto cfg = parse_run_config(json::object());
    EXPECT_EQ(cfg.train.total_steps, 500);
    EXPECT_EQ(cfg.train.batch_size, 8);
    EXPECT_DOUBLE_EQ(cfg.train.lr0, 3e-4);
    EXPECT_DOUBLE_EQ(cfg.train.weight_decay, 0.01);
    EXPECT_EQ(cfg.data.image_size, 64);
    EXPECT_EQ(cfg.model.fdm_width, 64);
    EXPECT_EQ(cfg.bench.trials, 5);
}

TEST(Config, UnknownKeysNamePath) {
    EXPECT_NE(config_error({{"train", {{"bogus", 1}}}}).find("train.bogus"), std::string::npos);
    EXPECT_NE(config_error({{"nonsense", 1}}).find("nonsense"), std::string::npos);
    EXPECT_NE(config_error({{"model", {{"heads", "four"}}}}).find("model.heads"), std::string::npos);
    EXPECT_NE(config_error({{"train", {{"lr0", -1.0}}}}).find("train.lr0"), std::string::npos);
    EXPECT_NE(config_error({{"model", {{"backbone_widths", {1, 2}}}}}).find("model.backbone_widths"),
              std::string::npos);
    EXPECT_NE(config_error({{"data", {{"image_size", 48}}}}).find("data.image_size"), std::string::npos);
    EXPECT_NE(config_error({{"ablate", {{"rows", {"baseline", "fancy"}}}}}).find("fancy"), std::string::npos);
}

TEST(Config, RoundTripThroughJson) {
    json doc = {{"train", {{"total_steps", 123}, {"seed", 9}, {"hflip", true}}},
                {"model", {{"use_lg", false}, {"heads", 8}, {"head_dim", 8}}},
                {"data", {{"difficulty", "hard"}, {"train_count", 10}}},
                {"ablate", {{"seeds", {1, 2, 3}}}}};
    auto cfg = parse_run_config(doc);
    auto again = parse_run_config(to_json(cfg));
    EXPECT_EQ(to_json(again), to_json(cfg));
    EXPECT_EQ(again.train.total_steps, 123);
    EXPECT_EQ(again.train.seed, 9u);
    EXPECT_TRUE(again.train.hflip);
    EXPECT_FALSE(again.model.use_lg);
    EXPECT_EQ(again.model.heads, 8);
    EXPECT_EQ(again.data.difficulty, Difficulty::hard);
    EXPECT_EQ(again.ablate.seeds.size(), 3u);
    // every section is written out with defaults resolved
    for (const char* k : {"model", "train", "data", "eval", "predict", "ablate", "bench", "gradcheck"})
        EXPECT_TRUE(to_json(cfg).contains(k)) << k;
}

TEST(Config, LoadFromFile) {
    auto path = std::filesystem::temp_directory_path() / ("hyret_cfg_" + std::to_string(::getpid()) + ".json");
    std::ofstream(path) << R"({"train": {"total_steps": 7}})";
    EXPECT_EQ(load_run_config(path).train.total_steps, 7);
    std::ofstream(path) << "{ not json";
    EXPECT_THROW(load_run_config(path), ConfigError);
    std::filesystem::remove(path);
    EXPECT_THROW(load_run_config(path), IoError);
}
