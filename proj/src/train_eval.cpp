#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>

#include "hyret/checkpoint.hpp"
#include "hyret/random.hpp"
#include "hyret/train_eval.hpp"

namespace hyret {

void TrainConfig::validate() const {
    if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("train.lr0: must be > 0");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay: must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1: must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2: must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps: must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
    if (total_steps < 1) throw ConfigError("train.total_steps: must be >= 1");
    if (eval_interval < 1) throw ConfigError("train.eval_interval: must be >= 1");
    if (eval_batch_size < 1) throw ConfigError("train.eval_batch_size: must be >= 1");
}

// ---- Loss ---------------------------------------------------------------

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, const ChangeMap& labels) {
    if (logits.c() != 2) throw ShapeError("cross_entropy: expected 2 logit channels, got " + std::to_string(logits.c()));
    if (logits.n() != labels.n || logits.h() != labels.h || logits.w() != labels.w)
        throw ShapeError("cross_entropy: logits " + logits.shape().str() + " do not match labels [" +
                         std::to_string(labels.n) + "," + std::to_string(labels.h) + "," + std::to_string(labels.w) +
                         "]");
    LossResult<T> r;
    r.grad = Tensor<T>(logits.shape());
    const std::size_t plane = logits.shape().plane();
    const double inv_count = 1.0 / static_cast<double>(labels.size());
    double total = 0.0;
    for (int b = 0; b < logits.n(); ++b) {
        const T* l0 = logits.plane(b, 0);
        const T* l1 = logits.plane(b, 1);
        T* g0 = r.grad.plane(b, 0);
        T* g1 = r.grad.plane(b, 1);
        for (std::size_t i = 0; i < plane; ++i) {
            const std::uint8_t y = labels.labels[b * plane + i];
            if (y > 1) throw ValueError("cross_entropy: label value " + std::to_string(int(y)) + " is not binary");
            const double a = l0[i], c = l1[i];
            const double m = std::max(a, c);
            const double lse = m + std::log(std::exp(a - m) + std::exp(c - m));
            total += lse - (y ? c : a);
            const double p1 = 1.0 / (1.0 + std::exp(a - c));
            const double p0 = 1.0 - p1;
            g0[i] = static_cast<T>((p0 - (y == 0)) * inv_count);
            g1[i] = static_cast<T>((p1 - (y == 1)) * inv_count);
        }
    }
    r.loss = total * inv_count;
    return r;
}

// ---- Optimizer ----------------------------------------------------------

template <typename T>
void adamw_step(const std::string& name, Tensor<T>& w, const Tensor<T>& g, AdamMoments<T>& state, long t, double lr,
                const AdamWConfig& cfg) {
    if (t < 1) throw ValueError("adamw_step: step must be >= 1");
    require_same_shape(w.shape(), g.shape(), "adamw gradient of " + name);
    if (!g.all_finite()) throw NumericError("adamw_step: non-finite gradient in parameter " + name);
    if (state.m.empty()) {
        state.m = Tensor<T>(w.shape());
        state.v = Tensor<T>(w.shape());
    }
    const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] *= decay;
        state.m[i] = b1 * state.m[i] + (1 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1 - b2) * g[i] * g[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        w[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
}

template <typename T>
AdamW<T>::AdamW(ParamList<T> params, const AdamWConfig& cfg)
    : params_(std::move(params)), state_(params_.size()), cfg_(cfg) {}

template <typename T>
void AdamW<T>::step(double lr) {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i)
        adamw_step(params_[i]->name, params_[i]->value, params_[i]->grad, state_[i], t_, lr, cfg_);
}

double lr_at(long step, long total, double lr0) {
    if (total < 1) throw ValueError("lr_at: total must be >= 1");
    if (step < 0 || step > total)
        throw ValueError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
    return lr0 * (1.0 - static_cast<double>(step) / static_cast<double>(total));
}

// ---- Metrics ------------------------------------------------------------

ConfusionCounts confusion(const ChangeMap& prediction, const ChangeMap& truth) {
    if (prediction.n != truth.n || prediction.h != truth.h || prediction.w != truth.w)
        throw ShapeError("confusion: prediction and ground truth sizes differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < truth.labels.size(); ++i) {
        const std::uint8_t p = prediction.labels[i], t = truth.labels[i];
        if (p > 1 || t > 1) throw ValueError("confusion: maps must be binary");
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

Metrics metrics(const ConfusionCounts& c) {
    Metrics m;
    auto ratio = [&m](double num, std::uint64_t den) {
        if (den == 0) {
            m.degenerate = true;
            return 0.0;
        }
        return num / static_cast<double>(den);
    };
    m.precision = ratio(double(c.tp), c.tp + c.fp);
    m.recall = ratio(double(c.tp), c.tp + c.fn);
    m.f1 = ratio(2.0 * double(c.tp), 2 * c.tp + c.fp + c.fn);
    m.iou = ratio(double(c.tp), c.tp + c.fp + c.fn);
    m.oa = ratio(double(c.tp + c.tn), c.total());
    return m;
}

// ---- Batching -----------------------------------------------------------

template <typename T>
Batch<T> make_batch(const SampleSource& source, std::span<const std::size_t> indices, std::span<const bool> flips) {
    if (indices.empty()) throw ShapeError("make_batch: empty batch");
    Batch<T> batch;
    for (std::size_t k = 0; k < indices.size(); ++k) {
        ImagePair p = source.get(indices[k]);
        if (!p.label) throw ValueError("sample " + source.id(indices[k]) + " has no label");
        if (!flips.empty() && flips[k]) {
            p.pre = hflip(p.pre);
            p.post = hflip(p.post);
            *p.label = hflip(*p.label);
        }
        if (k == 0) {
            const Shape s{static_cast<int>(indices.size()), 3, p.pre.h(), p.pre.w()};
            batch.pre = Tensor<T>(s);
            batch.post = Tensor<T>(s);
            batch.label = ChangeMap(s.n, s.h, s.w);
        } else if (p.pre.h() != batch.pre.h() || p.pre.w() != batch.pre.w()) {
            throw ShapeError("make_batch: sample " + source.id(indices[k]) + " has a different size");
        }
        const std::size_t n = p.pre.size();
        std::copy_n(p.pre.data(), n, batch.pre.sample(static_cast<int>(k)));
        std::copy_n(p.post.data(), n, batch.post.sample(static_cast<int>(k)));
        std::copy(p.label->labels.begin(), p.label->labels.end(), batch.label.labels.begin() + k * p.label->size());
    }
    return batch;
}

BatchSampler::BatchSampler(std::size_t dataset_size, std::uint64_t seed) : size_(dataset_size), seed_(seed) {
    if (size_ == 0) throw ValueError("BatchSampler: empty dataset");
    reshuffle();
}

void BatchSampler::reshuffle() {
    order_.resize(size_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, epoch_));
    std::shuffle(order_.begin(), order_.end(), rng);
    cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next(int batch_size) {
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    while (static_cast<int>(out.size()) < batch_size) {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        out.push_back(order_[cursor_++]);
    }
    return out;
}

// ---- Evaluation ---------------------------------------------------------

template <typename T>
ConfusionCounts evaluate(ChangeDetector<T>& model, const SampleSource& source, int batch_size,
                         const std::function<void(std::size_t, const ChangeMap&)>& on_prediction) {
    const bool was_training = model.training();
    model.set_training(false);
    ConfusionCounts total;
    for (std::size_t start = 0; start < source.size(); start += batch_size) {
        const std::size_t end = std::min(source.size(), start + batch_size);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Batch<T> batch = make_batch<T>(source, idx);
        const ChangeMap pred = predict_mask(model.infer(batch.pre, batch.post));
        total += confusion(pred, batch.label);
        if (on_prediction) {
            const std::size_t plane = static_cast<std::size_t>(pred.h) * pred.w;
            for (std::size_t k = 0; k < idx.size(); ++k) {
                ChangeMap one(1, pred.h, pred.w);
                std::copy_n(pred.labels.begin() + k * plane, plane, one.labels.begin());
                on_prediction(idx[k], one);
            }
        }
    }
    model.set_training(was_training);
    return total;
}

// ---- Training -----------------------------------------------------------

std::string log_csv_header() { return "step,loss,lr,f1,iou,oa"; }

std::string log_csv_row(const LogRow& row) {
    char buf[256];
    int n = std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g", row.step, row.loss, row.lr);
    if (row.eval)
        std::snprintf(buf + n, sizeof buf - n, ",%.17g,%.17g,%.17g", row.eval->f1, row.eval->iou, row.eval->oa);
    else
        std::snprintf(buf + n, sizeof buf - n, ",,,");
    return buf;
}

namespace {

template <typename T>
std::vector<Tensor<T>> snapshot(ChangeDetector<T>& model) {
    std::vector<Tensor<T>> out;
    for (const auto& nt : model.state()) out.push_back(*nt.tensor);
    return out;
}

template <typename T>
void restore(ChangeDetector<T>& model, const std::vector<Tensor<T>>& saved) {
    auto state = model.state();
    for (std::size_t i = 0; i < state.size(); ++i) *state[i].tensor = saved[i];
}

} // namespace

template <typename T>
TrainResult train_loop(ChangeDetector<T>& model, const SampleSource& train, const SampleSource& val,
                       const TrainConfig& cfg, const TrainOutputs& out) {
    cfg.validate();
    if (train.size() == 0) throw ConfigError("training set is empty");
    if (val.size() == 0) throw ConfigError("validation set is empty");

    Rng init_rng(derive_seed(cfg.seed, 0x696e6974));
    model.init(init_rng);
    BatchSampler sampler(train.size(), derive_seed(cfg.seed, 0x6f726472));
    Rng flip_rng(derive_seed(cfg.seed, 0x666c6970));
    AdamW<T> opt(model.params(), {cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps});

    std::ofstream log_file;
    if (!out.dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(out.dir, ec);
        log_file.open(out.dir / "train_log.csv");
        if (!log_file) throw IoError("cannot write " + (out.dir / "train_log.csv").string());
        log_file << log_csv_header() << '\n';
    }

    TrainResult result;
    std::vector<Tensor<T>> best_state;
    bool have_best = false;
    for (int step = 0; step < cfg.total_steps; ++step) {
        const std::vector<std::size_t> idx = sampler.next(cfg.batch_size);
        std::unique_ptr<bool[]> flips(new bool[idx.size()]());
        if (cfg.hflip)
            for (std::size_t k = 0; k < idx.size(); ++k) flips[k] = std::uniform_int_distribution<int>(0, 1)(flip_rng) == 1;
        const Batch<T> batch = make_batch<T>(train, idx, std::span<const bool>(flips.get(), idx.size()));

        model.set_training(true);
        const Tensor<T> logits = model.forward(batch.pre, batch.post);
        const LossResult<T> loss = cross_entropy(logits, batch.label);
        if (!std::isfinite(loss.loss))
            throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
        model.zero_grad();
        model.backward(loss.grad);
        const double lr = lr_at(step, cfg.total_steps, cfg.lr0);
        opt.step(lr);

        LogRow row{step, loss.loss, lr, std::nullopt};
        const bool last = step + 1 == cfg.total_steps;
        if ((step + 1) % cfg.eval_interval == 0 || last) {
            const Metrics m = metrics(evaluate(model, val, cfg.eval_batch_size));
            row.eval = m;
            result.final_eval = m;
            if (!have_best || m.f1 > result.best.f1) {
                have_best = true;
                result.best = m;
                result.best_step = step;
                best_state = snapshot(model);
                if (!out.dir.empty() && out.save_checkpoints) {
                    result.best_checkpoint = out.dir / "best.ckpt";
                    save_checkpoint(result.best_checkpoint, model);
                }
            }
            if (!out.quiet)
                std::fprintf(stderr, "step %d/%d loss %.4f lr %.3g val f1 %.4f iou %.4f oa %.4f\n", step + 1,
                             cfg.total_steps, loss.loss, lr, m.f1, m.iou, m.oa);
        }
        if (log_file) log_file << log_csv_row(row) << '\n';
        result.log.push_back(row);
    }
    if (!out.dir.empty() && out.save_checkpoints) save_checkpoint(out.dir / "last.ckpt", model);
    restore(model, best_state);
    return result;
}

// ---- Ablation -----------------------------------------------------------

AblationRow parse_ablation_row(const std::string& key) {
    for (AblationRow r : kAblationRows)
        if (ablation_row_key(r) == key) return r;
    throw ConfigError("unknown ablation row \"" + key +
                      "\" (expected baseline, msf, msf_lfb, msf_grb, msf_lfb_grb or full)");
}

std::string ablation_row_key(AblationRow row) {
    switch (row) {
    case AblationRow::baseline: return "baseline";
    case AblationRow::msf: return "msf";
    case AblationRow::msf_lfb: return "msf_lfb";
    case AblationRow::msf_grb: return "msf_grb";
    case AblationRow::msf_lfb_grb: return "msf_lfb_grb";
    case AblationRow::full: return "full";
    }
    return "?";
}

std::vector<AblationResult> ablation_run(const ModelConfig& base, const TrainConfig& cfg, const SampleSource& train,
                                         const SampleSource& val, const SampleSource& test,
                                         std::span<const AblationRow> rows, bool quiet) {
    std::vector<AblationResult> results;
    for (AblationRow row : rows) {
        AblationResult r;
        r.row = row;
        r.name = ablation_row_name(row);
        r.seed = cfg.seed;
        r.steps = cfg.total_steps;
        try {
            ChangeDetector<float> model(ablation_config(base, row));
            TrainOutputs out;
            out.save_checkpoints = false;
            out.quiet = quiet;
            train_loop(model, train, val, cfg, out);
            r.test = metrics(evaluate(model, test, cfg.eval_batch_size));
        } catch (const std::exception& e) {
            r.failed = true;
            r.error = e.what();
        }
        if (!quiet)
            std::fprintf(stderr, "[seed %llu] %-44s %s\n", static_cast<unsigned long long>(r.seed), r.name.c_str(),
                         r.failed ? ("FAILED: " + r.error).c_str()
                                  : ("F1 " + std::to_string(r.test.f1) + " IoU " + std::to_string(r.test.iou)).c_str());
        results.push_back(std::move(r));
    }
    return results;
}

std::string ablation_markdown(const std::vector<AblationResult>& results) {
    std::string md = "| Method | F1 | OA | IoU |\n|---|---|---|---|\n";
    char buf[256];
    for (AblationRow row : kAblationRows) {
        double f1 = 0, oa = 0, iou = 0;
        int n = 0, present = 0;
        for (const auto& r : results) {
            if (r.row != row) continue;
            ++present;
            if (r.failed) continue;
            f1 += r.test.f1;
            oa += r.test.oa;
            iou += r.test.iou;
            ++n;
        }
        if (present == 0) continue;
        if (n == 0) {
            std::snprintf(buf, sizeof buf, "| %s | failed | failed | failed |\n", ablation_row_name(row).c_str());
        } else {
            std::snprintf(buf, sizeof buf, "| %s | %.2f | %.2f | %.2f |\n", ablation_row_name(row).c_str(),
                          100.0 * f1 / n, 100.0 * oa / n, 100.0 * iou / n);
        }
        md += buf;
    }
    return md;
}

std::string ablation_csv(const std::vector<AblationResult>& results) {
    std::string csv = "seed,row,method,steps,f1,oa,iou,failed,error\n";
    char buf[512];
    for (const auto& r : results) {
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        std::snprintf(buf, sizeof buf, "%llu,%s,%s,%d,%.6f,%.6f,%.6f,%d,%s\n", static_cast<unsigned long long>(r.seed),
                      ablation_row_key(r.row).c_str(), r.name.c_str(), r.steps, r.test.f1, r.test.oa, r.test.iou,
                      r.failed ? 1 : 0, err.c_str());
        csv += buf;
    }
    return csv;
}

#define HYRET_INSTANTIATE_TRAIN(T)                                                                                 \
    template LossResult<T> cross_entropy(const Tensor<T>&, const ChangeMap&);                                      \
    template void adamw_step(const std::string&, Tensor<T>&, const Tensor<T>&, AdamMoments<T>&, long, double,      \
                             const AdamWConfig&);                                                                  \
    template class AdamW<T>;                                                                                       \
    template Batch<T> make_batch(const SampleSource&, std::span<const std::size_t>, std::span<const bool>);        \
    template ConfusionCounts evaluate(ChangeDetector<T>&, const SampleSource&, int,                                \
                                      const std::function<void(std::size_t, const ChangeMap&)>&);                  \
    template TrainResult train_loop(ChangeDetector<T>&, const SampleSource&, const SampleSource&, const TrainConfig&, \
                                    const TrainOutputs&);

HYRET_INSTANTIATE_TRAIN(float)
HYRET_INSTANTIATE_TRAIN(double)

} // namespace hyret
