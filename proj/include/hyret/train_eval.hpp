#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hyret/change_map.hpp"
#include "hyret/data.hpp"
#include "hyret/model.hpp"

namespace hyret {

struct TrainConfig {
    double lr0 = 3e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 8;
    int total_steps = 500;
    std::uint64_t seed = 0;
    int eval_interval = 100;
    int eval_batch_size = 8;
    bool hflip = false;

    void validate() const;
};

// ---- Loss ---------------------------------------------------------------

template <typename T>
struct LossResult {
    double loss = 0.0;
    Tensor<T> grad;  // d loss / d logits
};

// Mean pixel-wise negative log-likelihood of a 2-class softmax.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, const ChangeMap& labels);

// ---- Optimizer ----------------------------------------------------------

struct AdamWConfig {
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamMoments {
    Tensor<T> m;
    Tensor<T> v;
};

// One decoupled-decay Adam update of a single tensor at step t >= 1:
//   w *= 1 - lr*wd;  m, v <- moments of g;  w -= lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
void adamw_step(const std::string& name, Tensor<T>& w, const Tensor<T>& g, AdamMoments<T>& state, long t, double lr,
                const AdamWConfig& cfg);

template <typename T>
class AdamW {
public:
    AdamW(ParamList<T> params, const AdamWConfig& cfg);
    void step(double lr);
    long steps() const { return t_; }

private:
    ParamList<T> params_;
    std::vector<AdamMoments<T>> state_;
    AdamWConfig cfg_;
    long t_ = 0;
};

// Linear decay lr0 * (1 - step/total).
double lr_at(long step, long total, double lr0);

// ---- Metrics ------------------------------------------------------------

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(const ChangeMap& prediction, const ChangeMap& truth);

struct Metrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double iou = 0.0;
    double oa = 0.0;
    // Set when any ratio had an empty denominator and was reported as 0.
    bool degenerate = false;
};

Metrics metrics(const ConfusionCounts& c);

// ---- Batching -----------------------------------------------------------

template <typename T>
struct Batch {
    Tensor<T> pre;
    Tensor<T> post;
    ChangeMap label;
};

template <typename T>
Batch<T> make_batch(const SampleSource& source, std::span<const std::size_t> indices,
                    std::span<const bool> flips = {});

// Seeded per-epoch permutation, consumed in order and wrapping across epochs.
class BatchSampler {
public:
    BatchSampler(std::size_t dataset_size, std::uint64_t seed);
    std::vector<std::size_t> next(int batch_size);

private:
    void reshuffle();

    std::size_t size_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> order_;
};

// ---- Evaluation ---------------------------------------------------------

template <typename T>
ConfusionCounts evaluate(ChangeDetector<T>& model, const SampleSource& source, int batch_size,
                         const std::function<void(std::size_t, const ChangeMap&)>& on_prediction = {});

// ---- Training -----------------------------------------------------------

struct LogRow {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::optional<Metrics> eval;
};

std::string log_csv_header();
std::string log_csv_row(const LogRow& row);

struct TrainOutputs {
    std::filesystem::path dir;  // empty: keep everything in memory
    bool save_checkpoints = true;
    bool quiet = false;
};

struct TrainResult {
    std::vector<LogRow> log;
    Metrics best;
    int best_step = 0;
    Metrics final_eval;
    std::filesystem::path best_checkpoint;
};

// Deterministic given cfg.seed. Evaluates on `val` every eval_interval steps
// and at the last step, keeping the parameters with the best change-class F1
// (saved to <dir>/best.ckpt; the model is left holding them on return).
template <typename T>
TrainResult train_loop(ChangeDetector<T>& model, const SampleSource& train, const SampleSource& val,
                       const TrainConfig& cfg, const TrainOutputs& out = {});

// ---- Ablation -----------------------------------------------------------

struct AblationResult {
    AblationRow row;
    std::string name;
    std::uint64_t seed = 0;
    int steps = 0;
    bool failed = false;
    std::string error;
    Metrics test;
};

// Trains each requested row from the same seed and step budget, then
// scores it on `test`. A row that throws is marked failed.
std::vector<AblationResult> ablation_run(const ModelConfig& base, const TrainConfig& cfg, const SampleSource& train,
                                         const SampleSource& val, const SampleSource& test,
                                         std::span<const AblationRow> rows, bool quiet = true);

// Mean F1/OA/IoU per row over all seeds present, rows in table order.
std::string ablation_markdown(const std::vector<AblationResult>& results);
std::string ablation_csv(const std::vector<AblationResult>& results);

AblationRow parse_ablation_row(const std::string& key);
std::string ablation_row_key(AblationRow row);

} // namespace hyret
