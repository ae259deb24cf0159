// Acceptance checks. Run all, or one with --criterion NAME; prints one
// PASS/FAIL line per criterion and exits non-zero if any failed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hyret/diagnostics.hpp"
#include "hyret/retention.hpp"
#include "hyret/train_eval.hpp"
#include "oracles.hpp"

using namespace hyret;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string name;
    double budget_s;
    std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

template <typename T>
RetentionParams<T> random_retention(int channels, int heads, int head_dim, Rng& rng) {
    RetentionParams<T> p("ret", channels, heads, head_dim);
    for (Conv2d<T>* c : {&p.q, &p.k, &p.v, &p.out}) {
        fill_uniform(c->weight.value, rng, -0.5, 0.5);
        fill_uniform(c->bias.value, rng, -0.1, 0.1);
    }
    return p;
}

Outcome retention_oracle() {
    double worst = 0;
    int cases = 0;
    for (int seed = 0; seed < 50; ++seed) {
        Rng rng(derive_seed(11, seed));
        const int n = 1 + static_cast<int>(rng() % 16);
        const int d = rng() % 2 ? 8 : 4;
        const int heads = 1 + static_cast<int>(rng() % 3);
        auto p = random_retention<float>(heads * d, heads, d, rng);
        std::vector<double> g(heads);
        for (auto& v : g) v = std::uniform_real_distribution<double>(0.25, 1.0)(rng);
        p.set_gamma(g);
        auto x = random_tensor<float>(Shape{1, heads * d, 1, n}, rng);
        auto y = retention_parallel(x, p, RetentionOptions{RetentionMode::decay_only, false});

        auto toks = retention_head_tokens(x, 0, p);
        std::vector<std::vector<double>> att(n, std::vector<double>(heads * d));
        for (int h = 0; h < heads; ++h) {
            auto o = retention_recurrent_1d<float>(toks[h].q, toks[h].k, toks[h].v, p.gamma[h],
                                                   ScanDirection::bidirectional);
            for (int t = 0; t < n; ++t)
                for (int e = 0; e < d; ++e) att[t][h * d + e] = o(t, e);
        }
        for (int t = 0; t < n; ++t) {
            auto ref = oracle::project(p.out, att[t]);
            for (int c = 0; c < heads * d; ++c) worst = std::max(worst, std::abs(double(y.at(0, c, 0, t)) - ref[c]));
        }
        ++cases;
    }
    return {worst < 1e-5, fmt("%d seeds, max abs err %.3e (tol 1e-5, 32-bit)", cases, worst)};
}

Outcome attention_reduction() {
    double worst = 0;
    for (int i = 0; i < 10; ++i) {
        Rng rng(derive_seed(12, i));
        auto p = random_retention<double>(64, 4, 16, rng);
        p.set_uniform_gamma(1.0);
        auto x = random_tensor<double>(Shape{1, 64, 8, 8}, rng);
        auto y = retention_parallel(x, p, RetentionOptions{RetentionMode::softmax_decay, false});
        worst = std::max(worst, oracle::max_abs_diff(y, oracle::mha_oracle(x, p, true)));
    }
    return {worst < 1e-6, fmt("10 inputs on an 8x8 grid, max abs err %.3e (tol 1e-6)", worst)};
}

Outcome decay_mask_exact() {
    double worst = 0;
    int entries = 0;
    for (double g : {0.25, 0.5, 0.9375})
        for (int H = 1; H <= 8; ++H)
            for (int W = 1; W <= 8; ++W) {
                auto mf = decay_mask_2d<float>(H, W, static_cast<float>(g));
                auto md = decay_mask_2d<double>(H, W, g);
                for (int a = 0; a < H * W; ++a)
                    for (int b = 0; b < H * W; ++b) {
                        double ref = 1.0;
                        const int dist = std::abs(a / W - b / W) + std::abs(a % W - b % W);
                        for (int k = 0; k < dist; ++k) ref *= g;
                        worst = std::max({worst, std::abs(double(mf(a, b)) - ref), std::abs(md(a, b) - ref)});
                        ++entries;
                    }
            }
    return {worst < 1e-7, fmt("%d entries, max abs err %.3e (tol 1e-7)", entries, worst)};
}

Outcome gradient_suite() {
    GradcheckConfig cfg;
    cfg.image_size = 64;
    cfg.block_tolerance = 1e-4;
    cfg.model_tolerance = 1e-3;
    auto checks = run_gradcheck_suite(cfg);
    bool ok = true;
    std::string detail;
    const char* required[] = {"conv2d", "depthwise_conv2d", "transpose_conv2d_k2", "local_feature_block",
                              "lg_interaction", "retention_parallel", "fdm", "full_model"};
    for (const char* r : required) {
        auto it = std::find_if(checks.begin(), checks.end(), [&](const BlockCheck& c) { return c.block == r; });
        if (it == checks.end()) {
            ok = false;
            detail += std::string(" missing:") + r;
        }
    }
    for (const auto& c : checks) {
        ok = ok && c.passed;
        std::printf("    %-34s %.3e (tol %.0e)\n", c.block.c_str(), c.max_rel_error, c.tolerance);
    }
    return {ok, fmt("%zu blocks, 64-bit", checks.size()) + detail};
}

Outcome metric_arithmetic() {
    auto m = metrics({3, 1, 2, 10});
    bool ok = std::abs(m.f1 - 0.6667) <= 1e-4 && m.iou == 0.5 && m.oa == 0.8125;
    std::string detail = fmt("F1 %.6f IoU %.17g OA %.17g", m.f1, m.iou, m.oa);

    int exact = 0;
    for (int trial = 0; trial < 10; ++trial) {
        Rng rng(derive_seed(13, trial));
        const int H = 24 + static_cast<int>(rng() % 40), W = 24 + static_cast<int>(rng() % 40);
        ChangeMap pred(1, H, W), truth(1, H, W);
        for (auto& v : pred.labels) v = rng() % 3 == 0;
        for (auto& v : truth.labels) v = rng() % 4 == 0;
        // random grid of tiles
        std::vector<int> ys{0, H}, xs{0, W};
        for (int k = 0; k < 3; ++k) {
            ys.push_back(1 + static_cast<int>(rng() % (H - 1)));
            xs.push_back(1 + static_cast<int>(rng() % (W - 1)));
        }
        std::sort(ys.begin(), ys.end());
        std::sort(xs.begin(), xs.end());
        ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
        xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
        ConfusionCounts sum;
        for (std::size_t i = 0; i + 1 < ys.size(); ++i)
            for (std::size_t j = 0; j + 1 < xs.size(); ++j) {
                const int th = ys[i + 1] - ys[i], tw = xs[j + 1] - xs[j];
                ChangeMap p(1, th, tw), t(1, th, tw);
                for (int y = 0; y < th; ++y)
                    for (int x = 0; x < tw; ++x) {
                        p.at(0, y, x) = pred.at(0, ys[i] + y, xs[j] + x);
                        t.at(0, y, x) = truth.at(0, ys[i] + y, xs[j] + x);
                    }
                sum += confusion(p, t);
            }
        exact += sum == confusion(pred, truth);
    }
    ok = ok && exact == 10;
    return {ok, detail + fmt("; additivity exact in %d/10 partitions", exact)};
}

Outcome shape_contracts() {
    ChangeDetector<float> model(ModelConfig{});
    Rng rng(14);
    model.init(rng);
    model.set_training(false);
    auto pre = random_tensor<float>(Shape{1, 3, 256, 256}, rng, 0, 1);
    auto post = random_tensor<float>(Shape{1, 3, 256, 256}, rng, 0, 1);
    auto [a, b] = model.backbone_forward(pre, post);
    bool ok = true;
    std::string sizes;
    for (int s = 0; s < kScales; ++s) {
        sizes += std::to_string(a.levels[s].h()) + (s + 1 < kScales ? "/" : "");
        ok = ok && a.levels[s].h() == (64 >> s) && a.levels[s].w() == (64 >> s) && b.levels[s].shape() == a.levels[s].shape();
    }
    auto logits = model.infer(pre, post);
    ok = ok && logits.shape() == (Shape{1, 2, 256, 256}) && logits.all_finite();
    Tensor<float> tie(Shape{1, 2, 256, 256}, 0.3f);
    const bool tie_ok = predict_mask(tie).count_changed() == 0;
    return {ok && tie_ok, "logits " + logits.shape().str() + ", pyramid " + sizes + ", tie -> class 0: " +
                              (tie_ok ? "yes" : "no")};
}

struct Splits {
    SyntheticSource train{synthetic_split_seed(1, "train"), 512, 64, Difficulty::easy};
    SyntheticSource val{synthetic_split_seed(1, "val"), 64, 64, Difficulty::easy};
    SyntheticSource test{synthetic_split_seed(1, "test"), 64, 64, Difficulty::easy};
};

TrainConfig smoke_config() {
    TrainConfig t;
    t.total_steps = 500;
    t.batch_size = 8;
    t.seed = 0;
    return t;
}

Outcome training_smoke() {
    Splits d;
    ChangeDetector<float> model(ModelConfig{});
    TrainOutputs out;
    out.quiet = true;
    train_loop(model, d.train, d.val, smoke_config(), out);
    auto m = metrics(evaluate(model, d.test, 8));
    return {m.f1 >= 0.80, fmt("held-out F1 %.4f IoU %.4f OA %.4f on 64 pairs (need F1 >= 0.80)", m.f1, m.iou, m.oa)};
}

Outcome ablation() {
    Splits d;
    TrainConfig cfg = smoke_config();
    cfg.total_steps = 300;
    std::vector<AblationResult> all;
    int wins = 0, seeds = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        cfg.seed = seed;
        std::vector<AblationRow> rows{AblationRow::baseline, AblationRow::full};
        if (seed == 0) rows.assign(kAblationRows.begin(), kAblationRows.end());
        auto res = ablation_run(ModelConfig{}, cfg, d.train, d.val, d.test, rows);
        const AblationResult *base = nullptr, *full = nullptr;
        for (const auto& r : res) {
            if (r.row == AblationRow::baseline && !r.failed) base = &r;
            if (r.row == AblationRow::full && !r.failed) full = &r;
        }
        if (base && full) wins += full->test.f1 > base->test.f1;
        ++seeds;
        std::printf("    seed %llu: baseline F1 %.4f, full F1 %.4f\n", static_cast<unsigned long long>(seed),
                    base ? base->test.f1 : -1.0, full ? full->test.f1 : -1.0);
        std::fflush(stdout);
        all.insert(all.end(), res.begin(), res.end());
    }
    std::vector<AblationResult> seed0;
    for (const auto& r : all)
        if (r.seed == 0) seed0.push_back(r);
    const std::string md = ablation_markdown(seed0);
    std::printf("%s", md.c_str());
    int rows = 0;
    bool three_cols = true;
    for (std::size_t pos = 0, line = 0; pos < md.size(); ++line) {
        const std::size_t end = md.find('\n', pos);
        const std::string l = md.substr(pos, end - pos);
        if (line >= 2 && !l.empty()) {
            ++rows;
            three_cols = three_cols && std::count(l.begin(), l.end(), '|') == 5 && l.find("failed") == std::string::npos;
        }
        pos = end + 1;
    }
    const bool ok = rows == 6 && three_cols && wins >= 7;
    return {ok, fmt("%d-row table, 3 metric columns: %s; full > baseline in %d of %d seeds (need 7), 300 steps each",
                    rows, three_cols ? "yes" : "no", wins, seeds)};
}

Outcome determinism() {
    Splits d;
    std::vector<std::string> logs[2];
    for (auto& log : logs) {
        ChangeDetector<float> model(ModelConfig{});
        TrainOutputs out;
        out.quiet = true;
        auto r = train_loop(model, d.train, d.val, smoke_config(), out);
        for (const auto& row : r.log) log.push_back(log_csv_row(row));
    }
    std::size_t mismatch = 0;
    for (std::size_t i = 0; i < std::min(logs[0].size(), logs[1].size()); ++i) mismatch += logs[0][i] != logs[1][i];
    const bool ok = logs[0].size() == logs[1].size() && mismatch == 0 && !logs[0].empty();
    return {ok, fmt("two 500-step runs, %zu log rows each, %zu differing rows", logs[0].size(), mismatch)};
}

Outcome bench_report() {
    BenchConfig cfg;
    cfg.grid_sizes = {16, 32, 64};
    cfg.trials = 5;
    auto rows = run_retention_bench(cfg);
    std::printf("%s", bench_csv(rows).c_str());
    bool ok = rows.size() == 6;
    for (const auto& r : rows) ok = ok && r.trials >= 5 && r.min_ms <= r.median_ms && r.median_ms <= r.max_ms;
    for (int g : {16, 32, 64})
        for (const char* v : {"retention", "attention"})
            ok = ok && std::any_of(rows.begin(), rows.end(), [&](const BenchRow& r) { return r.grid == g && r.variant == v; });
    return {ok, fmt("%zu rows (grids 16/32/64 x retention/attention), median of 5 trials", rows.size())};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {"retention_oracle", 5, retention_oracle},   {"attention_reduction", 5, attention_reduction},
        {"decay_mask", 1, decay_mask_exact},         {"gradient_suite", 120, gradient_suite},
        {"metric_arithmetic", 5, metric_arithmetic}, {"shape_contracts", 60, shape_contracts},
        {"training_smoke", 600, training_smoke},     {"ablation", 3600, ablation},
        {"determinism", 1200, determinism},          {"bench_report", 120, bench_report},
    };
    std::string only;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) {
            only = argv[++i];
        } else if (std::strcmp(argv[i], "--list") == 0) {
            for (const auto& c : criteria) std::printf("%s\n", c.name.c_str());
            return 0;
        } else {
            std::fprintf(stderr, "usage: %s [--criterion NAME | --list]\n", argv[0]);
            return 2;
        }
    }
    int failed = 0, ran = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && c.name != only) continue;
        ++ran;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs < c.budget_s;
        const bool pass = o.pass && in_time;
        failed += !pass;
        std::printf("%s %s: %s; %.2f s (budget %.0f s%s)\n", pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.c_str(),
                    secs, c.budget_s, in_time ? "" : ", exceeded");
        std::fflush(stdout);
    }
    if (ran == 0) {
        std::fprintf(stderr, "unknown criterion: %s\n", only.c_str());
        return 2;
    }
    return failed ? 1 : 0;
}
