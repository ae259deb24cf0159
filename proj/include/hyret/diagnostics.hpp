#pragma once

// Finite-difference checks of every differentiable block, and the
// retention-vs-attention timing report.

#include <string>
#include <vector>

#include "hyret/config.hpp"

namespace hyret {

struct BlockCheck {
    std::string block;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t checked = 0;
    std::string worst;
    bool passed = false;
};

// Runs in 64-bit. Blocks use small random shapes; the full model uses a
// 1x3xSxS pair, eval-mode batchnorm and a sampled parameter subset.
std::vector<BlockCheck> run_gradcheck_suite(const GradcheckConfig& cfg, const ModelConfig& model_cfg = {});

struct BenchRow {
    int grid = 0;
    std::string variant;  // retention | attention
    int trials = 0;
    double median_ms = 0.0;
    double min_ms = 0.0;
    double max_ms = 0.0;
};

std::vector<BenchRow> run_retention_bench(const BenchConfig& cfg, std::uint64_t seed = 0);
std::string bench_csv(const std::vector<BenchRow>& rows);

} // namespace hyret
