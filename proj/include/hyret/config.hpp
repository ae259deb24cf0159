#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyret/data.hpp"
#include "hyret/model.hpp"
#include "hyret/train_eval.hpp"

namespace hyret {

struct DataConfig {
    std::string source = "synthetic";  // synthetic | tiles
    std::string root;                  // tile root (source = tiles)
    Difficulty difficulty = Difficulty::easy;
    int image_size = 64;
    std::uint64_t seed = 1;
    int train_count = 512;
    int val_count = 64;
    int test_count = 64;
};

struct EvalConfig {
    std::string split = "test";
    std::string predictions;  // folder of {0,255} PNG masks to score instead of running the model
};

struct PredictConfig {
    std::string pre;
    std::string post;
    std::string label;  // optional ground truth for the panel
    bool panel = true;
};

struct AblateConfig {
    std::vector<std::string> rows;  // empty = all six
    std::vector<std::uint64_t> seeds{0};
};

struct BenchConfig {
    std::vector<int> grid_sizes{16, 32, 64};
    int trials = 5;
    int channels = 64;
    int heads = 4;
    int head_dim = 16;
};

struct GradcheckConfig {
    int image_size = 64;
    int samples = 12;
    double block_tolerance = 1e-4;
    double model_tolerance = 1e-3;
    std::uint64_t seed = 0;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    EvalConfig eval;
    PredictConfig predict;
    AblateConfig ablate;
    BenchConfig bench;
    GradcheckConfig gradcheck;

    void validate() const;
};

// Missing keys take defaults; unknown keys and bad types raise ConfigError
// naming the key path (e.g. "train.lr0").
RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

ModelConfig parse_model_config(const nlohmann::json& doc, const std::string& prefix = "model");
nlohmann::json to_json(const ModelConfig& cfg);

} // namespace hyret
