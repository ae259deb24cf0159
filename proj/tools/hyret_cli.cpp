#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "hyret/checkpoint.hpp"
#include "hyret/config.hpp"
#include "hyret/diagnostics.hpp"

using namespace hyret;
namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitIo = 2;

struct Options {
    std::string command;
    std::string config;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::string checkpoint;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("failed writing " + path.string());
}

fs::path prepare_out(const Options& o, const RunConfig& cfg) {
    const fs::path dir = o.out;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
    return dir;
}

void apply_threads() {
    const char* env = std::getenv("HYRET_THREADS");
    if (!env || !*env) return;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1 || n > 1024) throw ConfigError("HYRET_THREADS: expected a positive integer, got \"" + std::string(env) + "\"");
    Eigen::setNbThreads(static_cast<int>(n));
#ifdef _OPENMP
    omp_set_num_threads(static_cast<int>(n));
#endif
}

std::unique_ptr<SampleSource> make_source(const DataConfig& d, const std::string& split) {
    if (d.source == "tiles") {
        DatasetManifest m = load_tile_dataset(d.root, split);
        for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
        return std::make_unique<TileSource>(std::move(m));
    }
    const int count = split == "train" ? d.train_count : split == "val" ? d.val_count : d.test_count;
    return std::make_unique<SyntheticSource>(synthetic_split_seed(d.seed, split), count, d.image_size, d.difficulty);
}

std::string metrics_json(const Metrics& m, const ConfusionCounts& c) {
    nlohmann::json j = {{"f1", m.f1},        {"iou", m.iou},         {"oa", m.oa},      {"precision", m.precision},
                        {"recall", m.recall}, {"degenerate", m.degenerate}, {"tp", c.tp}, {"fp", c.fp},
                        {"fn", c.fn},         {"tn", c.tn}};
    return j.dump(2) + "\n";
}

ChangeDetector<float> load_model(const std::string& checkpoint) {
    if (checkpoint.empty()) throw ConfigError("--checkpoint is required for this command");
    ChangeDetector<float> model(read_checkpoint_config(checkpoint));
    load_checkpoint(checkpoint, model);
    model.set_training(false);
    return model;
}

Tensor<float> gray_to_rgb(const ChangeMap& m) {
    Tensor<float> t({1, 3, m.h, m.w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < m.h; ++y)
            for (int x = 0; x < m.w; ++x) t.at(0, c, y, x) = m.at(0, y, x) ? 1.0f : 0.0f;
    return t;
}

// I_pre | I_post | ground truth | prediction, separated by white gutters.
Tensor<float> render_panel(const ImagePair& pair, const ChangeMap& prediction) {
    constexpr int gap = 4;
    const int h = pair.pre.h(), w = pair.pre.w();
    Tensor<float> panel({1, 3, h, 4 * w + 3 * gap}, 1.0f);
    Tensor<float> gt({1, 3, h, w}, 0.5f);
    if (pair.label) gt = gray_to_rgb(*pair.label);
    const Tensor<float>* tiles[] = {&pair.pre, &pair.post, &gt, nullptr};
    const Tensor<float> pred = gray_to_rgb(prediction);
    tiles[3] = &pred;
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) panel.at(0, c, y, i * (w + gap) + x) = tiles[i]->at(0, c, y, x);
    return panel;
}

int cmd_make_synthetic(const Options& o, const RunConfig& cfg) {
    const fs::path dir = prepare_out(o, cfg);
    SyntheticDatasetSpec spec;
    spec.seed = cfg.data.seed;
    spec.image_size = cfg.data.image_size;
    spec.difficulty = cfg.data.difficulty;
    spec.train = cfg.data.train_count;
    spec.val = cfg.data.val_count;
    spec.test = cfg.data.test_count;
    write_synthetic_dataset(dir, spec);
    std::printf("wrote %d/%d/%d train/val/test pairs to %s\n", cfg.data.train_count, cfg.data.val_count,
                cfg.data.test_count, dir.c_str());
    return 0;
}

int cmd_train(const Options& o, const RunConfig& cfg) {
    const fs::path dir = prepare_out(o, cfg);
    const auto train = make_source(cfg.data, "train");
    const auto val = make_source(cfg.data, "val");
    ChangeDetector<float> model(cfg.model);
    TrainOutputs outputs;
    outputs.dir = dir;
    const TrainResult r = train_loop(model, *train, *val, cfg.train, outputs);
    nlohmann::json summary = {{"best_step", r.best_step},
                              {"best_val", {{"f1", r.best.f1}, {"iou", r.best.iou}, {"oa", r.best.oa}}},
                              {"final_val", {{"f1", r.final_eval.f1}, {"iou", r.final_eval.iou}, {"oa", r.final_eval.oa}}},
                              {"checkpoint", r.best_checkpoint.string()}};
    write_text(dir / "train_summary.json", summary.dump(2) + "\n");
    std::printf("best val F1 %.4f (IoU %.4f, OA %.4f) at step %d; checkpoint %s\n", r.best.f1, r.best.iou, r.best.oa,
                r.best_step, r.best_checkpoint.c_str());
    return 0;
}

int cmd_eval(const Options& o, const RunConfig& cfg) {
    const fs::path dir = prepare_out(o, cfg);
    const auto source = make_source(cfg.data, cfg.eval.split);
    ConfusionCounts counts;
    if (!cfg.eval.predictions.empty()) {
        const fs::path pred_dir = cfg.eval.predictions;
        if (!fs::is_directory(pred_dir)) throw IoError("predictions directory not found: " + pred_dir.string());
        for (std::size_t i = 0; i < source->size(); ++i) {
            const ImagePair p = source->get(i);
            const ChangeMap pred = read_png_mask(pred_dir / (source->id(i) + ".png"));
            counts += confusion(pred, *p.label);
        }
    } else {
        ChangeDetector<float> model = load_model(o.checkpoint);
        const fs::path mask_dir = dir / "masks";
        fs::create_directories(mask_dir);
        counts = evaluate(model, *source, cfg.train.eval_batch_size, [&](std::size_t i, const ChangeMap& m) {
            write_png_mask(mask_dir / (source->id(i) + ".png"), m);
        });
    }
    const Metrics m = metrics(counts);
    write_text(dir / "eval_metrics.json", metrics_json(m, counts));
    std::printf("F1 %.4f IoU %.4f OA %.4f%s\n", m.f1, m.iou, m.oa, m.degenerate ? " (degenerate)" : "");
    return 0;
}

int cmd_predict(const Options& o, const RunConfig& cfg) {
    if (cfg.predict.pre.empty() || cfg.predict.post.empty())
        throw ConfigError("predict.pre: predict needs both predict.pre and predict.post image paths");
    const fs::path dir = prepare_out(o, cfg);
    ChangeDetector<float> model = load_model(o.checkpoint);
    ImagePair pair;
    pair.pre = read_png_rgb(cfg.predict.pre);
    pair.post = read_png_rgb(cfg.predict.post);
    if (!(pair.pre.shape() == pair.post.shape()))
        throw ShapeError("predict: " + cfg.predict.pre + " and " + cfg.predict.post + " differ in size");
    if (!cfg.predict.label.empty()) pair.label = read_png_mask(cfg.predict.label);
    check_input_size(pair.pre.h(), pair.pre.w());
    const ChangeMap mask = predict_mask(model.infer(pair.pre, pair.post));
    write_png_mask(dir / "mask.png", mask);
    if (cfg.predict.panel) write_png_rgb(dir / "panel.png", render_panel(pair, mask));
    const double frac = static_cast<double>(mask.count_changed()) / static_cast<double>(mask.size());
    std::printf("changed pixels: %zu of %zu (%.2f%%); mask written to %s\n", mask.count_changed(), mask.size(),
                100.0 * frac, (dir / "mask.png").c_str());
    return 0;
}

int cmd_gradcheck(const Options& o, const RunConfig& cfg) {
    const fs::path dir = prepare_out(o, cfg);
    const auto checks = run_gradcheck_suite(cfg.gradcheck, cfg.model);
    std::string csv = "block,max_rel_error,tolerance,checked,worst,passed\n";
    bool ok = true;
    for (const auto& c : checks) {
        std::printf("%-34s max rel err %.3e  (tol %.0e, %zu entries)  %s\n", c.block.c_str(), c.max_rel_error,
                    c.tolerance, c.checked, c.passed ? "ok" : "FAIL");
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%.6e,%.1e,%zu,%s,%d\n", c.block.c_str(), c.max_rel_error, c.tolerance,
                      c.checked, c.worst.c_str(), c.passed ? 1 : 0);
        csv += buf;
        ok = ok && c.passed;
    }
    write_text(dir / "gradcheck.csv", csv);
    return ok ? 0 : kExitFailure;
}

int cmd_ablate(const Options& o, const RunConfig& cfg) {
    const fs::path dir = prepare_out(o, cfg);
    const auto train = make_source(cfg.data, "train");
    const auto val = make_source(cfg.data, "val");
    const auto test = make_source(cfg.data, "test");
    std::vector<AblationRow> rows;
    for (const auto& r : cfg.ablate.rows) rows.push_back(parse_ablation_row(r));
    if (rows.empty()) rows.assign(kAblationRows.begin(), kAblationRows.end());

    std::vector<AblationResult> results;
    for (std::uint64_t seed : cfg.ablate.seeds) {
        TrainConfig t = cfg.train;
        t.seed = seed;
        auto r = ablation_run(cfg.model, t, *train, *val, *test, rows, false);
        results.insert(results.end(), r.begin(), r.end());
        write_text(dir / "ablation.csv", ablation_csv(results));
    }
    std::string md = ablation_markdown(results);
    int wins = 0, pairs = 0;
    for (std::uint64_t seed : cfg.ablate.seeds) {
        const AblationResult *base = nullptr, *full = nullptr;
        for (const auto& r : results) {
            if (r.seed != seed || r.failed) continue;
            if (r.row == AblationRow::baseline) base = &r;
            if (r.row == AblationRow::full) full = &r;
        }
        if (base && full) {
            ++pairs;
            wins += full->test.f1 > base->test.f1;
        }
    }
    md += "\nSteps per row: " + std::to_string(cfg.train.total_steps) + ", seeds: " +
          std::to_string(cfg.ablate.seeds.size()) + ".\n";
    if (pairs > 0)
        md += "Full model F1 above baseline in " + std::to_string(wins) + " of " + std::to_string(pairs) + " seeds.\n";
    write_text(dir / "ablation.md", md);
    std::cout << md;
    for (const auto& r : results)
        if (r.failed) std::cerr << "warning: row " << r.name << " (seed " << r.seed << ") failed: " << r.error << "\n";
    return 0;
}

int cmd_bench(const Options& o, const RunConfig& cfg) {
    const fs::path dir = prepare_out(o, cfg);
    const auto rows = run_retention_bench(cfg.bench, o.seed.value_or(0));
    const std::string csv = bench_csv(rows);
    write_text(dir / "bench.csv", csv);
    std::cout << csv;
    return 0;
}

int run(const Options& o) {
    apply_threads();
    RunConfig cfg = load_run_config(o.config);
    if (o.seed) {
        if (o.command == "make-synthetic") cfg.data.seed = *o.seed;
        cfg.train.seed = *o.seed;
        cfg.gradcheck.seed = *o.seed;
        cfg.ablate.seeds = {*o.seed};
    }
    if (o.command == "make-synthetic") return cmd_make_synthetic(o, cfg);
    if (o.command == "train") return cmd_train(o, cfg);
    if (o.command == "eval") return cmd_eval(o, cfg);
    if (o.command == "predict") return cmd_predict(o, cfg);
    if (o.command == "gradcheck") return cmd_gradcheck(o, cfg);
    if (o.command == "ablate") return cmd_ablate(o, cfg);
    if (o.command == "bench") return cmd_bench(o, cfg);
    throw ConfigError("unknown command " + o.command);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bi-temporal change detection: data generation, training, evaluation and diagnostics"};
    app.require_subcommand(1);
    Options o;
    std::uint64_t seed = 0;
    const std::pair<const char*, const char*> commands[] = {
        {"make-synthetic", "Write a synthetic A/B/label tile dataset"},
        {"train", "Train a model and save the best-F1 checkpoint"},
        {"eval", "Score a checkpoint (or a folder of predicted masks) on a split"},
        {"predict", "Predict a change mask for one image pair"},
        {"gradcheck", "Finite-difference check of every differentiable block"},
        {"ablate", "Train and score the six ablation configurations"},
        {"bench", "Time retention against plain attention across grid sizes"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", o.config, "JSON run configuration")->required();
        sub->add_option("--out", o.out, "Output directory")->capture_default_str();
        sub->add_option("--seed", seed, "Override the run seed");
        sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint (eval, predict)");
        sub->callback([&o, &seed, sub, name = std::string(name)] {
            o.command = name;
            if (sub->count("--seed")) o.seed = seed;
        });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitFailure;
    }

    try {
        return run(o);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}
