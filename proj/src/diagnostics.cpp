#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>

#include "hyret/diagnostics.hpp"
#include "hyret/fdm.hpp"
#include "hyret/grad_check.hpp"

namespace hyret {

namespace {

using D = double;

struct Input {
    std::string name;
    Tensor<D>* tensor;
};

BlockCheck check_block(const std::string& block, double tolerance, const ParamList<D>& params,
                       const std::vector<Input>& inputs, const std::function<Tensor<D>()>& forward,
                       const std::function<std::vector<Tensor<D>>(const Tensor<D>&)>& backward, Rng& rng,
                       std::size_t per_slot, double eps = default_grad_eps<D>()) {
    const Tensor<D> y = forward();
    const Tensor<D> r = random_tensor<D>(y.shape(), rng);
    for (Param<D>* p : params) p->zero_grad();
    const std::vector<Tensor<D>> d_inputs = backward(r);

    std::vector<Tensor<D>> analytic;
    analytic.reserve(inputs.size() + params.size());
    std::vector<GradSlot<D>> slots;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        analytic.push_back(d_inputs.at(i));
        slots.push_back({inputs[i].name, inputs[i].tensor->values(), analytic.back().values(),
                         sample_indices(inputs[i].tensor->size(), per_slot, rng)});
    }
    for (Param<D>* p : params) {
        analytic.push_back(p->grad);
        slots.push_back({p->name, p->value.values(), analytic.back().values(),
                         sample_indices(p->value.size(), per_slot, rng)});
    }
    const GradCheckReport rep =
        grad_check<D>(block, [&] { return dot(r, forward()); }, std::span<GradSlot<D>>(slots), eps);

    BlockCheck c;
    c.block = block;
    c.max_rel_error = rep.max_rel_error;
    c.tolerance = tolerance;
    c.checked = rep.checked;
    c.worst = rep.worst_slot + "[" + std::to_string(rep.worst_index) + "]";
    c.passed = rep.max_rel_error < tolerance;
    return c;
}

void randomize(const ParamList<D>& params, Rng& rng, double scale = 0.5) {
    for (Param<D>* p : params) fill_uniform(p->value, rng, -scale, scale);
}

} // namespace

std::vector<BlockCheck> run_gradcheck_suite(const GradcheckConfig& cfg, const ModelConfig& model_cfg) {
    std::vector<BlockCheck> out;
    Rng rng(cfg.seed);
    const double tol = cfg.block_tolerance;
    const std::size_t all = 1u << 20;

    {
        Conv2d<D> conv("conv", 3, 4, 3);
        ParamList<D> ps;
        conv.collect(ps);
        randomize(ps, rng);
        Tensor<D> x = random_tensor<D>({2, 3, 6, 6}, rng);
        out.push_back(check_block(
            "conv2d", tol, ps, {{"x", &x}}, [&] { return conv.forward(x); },
            [&](const Tensor<D>& dy) { return std::vector<Tensor<D>>{conv.backward(x, dy)}; }, rng, all));
    }
    {
        Conv2d<D> conv("conv_s2", 3, 4, 3, 2);
        ParamList<D> ps;
        conv.collect(ps);
        randomize(ps, rng);
        Tensor<D> x = random_tensor<D>({2, 3, 8, 8}, rng);
        out.push_back(check_block(
            "conv2d_stride2", tol, ps, {{"x", &x}}, [&] { return conv.forward(x); },
            [&](const Tensor<D>& dy) { return std::vector<Tensor<D>>{conv.backward(x, dy)}; }, rng, all));
    }
    {
        DepthwiseConv2d<D> conv("depthwise", 4, 3);
        ParamList<D> ps;
        conv.collect(ps);
        randomize(ps, rng);
        Tensor<D> x = random_tensor<D>({2, 4, 6, 6}, rng);
        out.push_back(check_block(
            "depthwise_conv2d", tol, ps, {{"x", &x}}, [&] { return conv.forward(x); },
            [&](const Tensor<D>& dy) { return std::vector<Tensor<D>>{conv.backward(x, dy)}; }, rng, all));
    }
    for (int k : {2, 4}) {
        TransposeConv2d<D> conv("tconv", 3, 4, k);
        ParamList<D> ps;
        conv.collect(ps);
        randomize(ps, rng);
        Tensor<D> x = random_tensor<D>({2, 3, 4, 4}, rng);
        out.push_back(check_block(
            "transpose_conv2d_k" + std::to_string(k), tol, ps, {{"x", &x}}, [&] { return conv.forward(x); },
            [&](const Tensor<D>& dy) { return std::vector<Tensor<D>>{conv.backward(x, dy)}; }, rng, all));
    }
    {
        BatchNorm2d<D> bn("bn", 3);
        ParamList<D> ps;
        bn.collect(ps);
        randomize(ps, rng);
        Tensor<D> x = random_tensor<D>({2, 3, 4, 4}, rng);
        ops::BatchNormCache<D> cache;
        out.push_back(check_block(
            "batchnorm2d_train", tol, ps, {{"x", &x}}, [&] { return bn.forward(x, true, &cache); },
            [&](const Tensor<D>& dy) { return std::vector<Tensor<D>>{bn.backward(cache, dy)}; }, rng, all));
    }
    {
        LfbParams<D> p("lfb", 6);
        ParamList<D> ps;
        p.collect(ps);
        randomize(ps, rng);
        Tensor<D> x = random_tensor<D>({2, 6, 5, 5}, rng);
        LfbCache<D> cache;
        out.push_back(check_block(
            "local_feature_block", tol, ps, {{"x", &x}}, [&] { return lfb_forward(x, p, &cache); },
            [&](const Tensor<D>& dy) { return std::vector<Tensor<D>>{lfb_backward(p, cache, dy)}; }, rng, all));
    }
    {
        Conv2d<D> fuse("lg.fuse", 12, 6, 1);
        ParamList<D> ps;
        fuse.collect(ps);
        randomize(ps, rng);
        Tensor<D> local = random_tensor<D>({2, 6, 4, 4}, rng, -2, 2);
        Tensor<D> global = random_tensor<D>({2, 6, 4, 4}, rng, -2, 2);
        LgCache<D> cache;
        out.push_back(check_block(
            "lg_interaction", tol, ps, {{"local", &local}, {"global", &global}},
            [&] { return lg_interaction(local, global, fuse, &cache); },
            [&](const Tensor<D>& dy) {
                auto [dl, dg] = lg_interaction_backward(fuse, cache, dy);
                return std::vector<Tensor<D>>{dl, dg};
            },
            rng, all));
    }
    for (RetentionMode mode : {RetentionMode::softmax_decay, RetentionMode::decay_only}) {
        RetentionParams<D> p("grb", 8, 2, 4);
        p.init(rng);
        ParamList<D> ps;
        p.collect(ps);
        randomize(ps, rng);
        Tensor<D> x = random_tensor<D>({2, 8, 3, 4}, rng);
        RetentionCache<D> cache;
        RetentionOptions opts;
        opts.mode = mode;
        const std::string name =
            mode == RetentionMode::softmax_decay ? "retention_parallel" : "retention_parallel_decay_only";
        out.push_back(check_block(
            name, tol, ps, {{"x", &x}}, [&] { return retention_parallel(x, p, opts, &cache); },
            [&](const Tensor<D>& dy) { return std::vector<Tensor<D>>{retention_parallel_backward(p, cache, dy)}; },
            rng, all));
    }
    {
        RetentionParams<D> p("grb_norm", 8, 2, 4);
        p.init(rng);
        ParamList<D> ps;
        p.collect(ps);
        randomize(ps, rng);
        Tensor<D> x = random_tensor<D>({1, 8, 3, 3}, rng);
        RetentionCache<D> cache;
        RetentionOptions opts;
        opts.renormalize = true;
        out.push_back(check_block(
            "retention_parallel_renormalized", tol, ps, {{"x", &x}},
            [&] { return retention_parallel(x, p, opts, &cache); },
            [&](const Tensor<D>& dy) { return std::vector<Tensor<D>>{retention_parallel_backward(p, cache, dy)}; },
            rng, all));
    }
    for (bool use_lg : {true, false}) {
        FdmOptions opts;
        opts.use_lg = use_lg;
        opts.use_norm = !use_lg;
        FdmParams<D> p("fdm", 8, 2, 4, opts);
        p.init(rng);
        ParamList<D> ps;
        p.collect(ps);
        randomize(ps, rng);
        if (p.norm)
            for (auto& g : p.norm->gamma.value.values()) g = 1.0 + g;
        Tensor<D> pre = random_tensor<D>({2, 8, 4, 4}, rng);
        Tensor<D> post = random_tensor<D>({2, 8, 4, 4}, rng);
        FdmCache<D> cache;
        out.push_back(check_block(
            use_lg ? "fdm" : "fdm_concat_fusion_bn", tol, ps, {{"pre", &pre}, {"post", &post}},
            [&] { return fdm_forward(pre, post, p, true, &cache); },
            [&](const Tensor<D>& dy) {
                auto [a, b] = fdm_backward(p, cache, dy);
                return std::vector<Tensor<D>>{a, b};
            },
            rng, 24));
    }
    {
        ChangeDetector<D> model(model_cfg);
        model.init(rng);
        model.set_training(false);
        ParamList<D> all_params = model.params();
        // randomize the zero-init pointwise weights
        for (Param<D>* p : all_params)
            if (p->name.find("pointwise") != std::string::npos) fill_uniform(p->value, rng, -0.2, 0.2);
        ParamList<D> subset;
        const std::size_t stride = std::max<std::size_t>(1, all_params.size() / cfg.samples);
        for (std::size_t i = 0; i < all_params.size(); ++i) {
            const std::string& n = all_params[i]->name;
            const bool key = n.find("scale1.fdm.grb.q.weight") != std::string::npos ||
                             n.find("scale2.fdm.lfb.depthwise.weight") != std::string::npos ||
                             n.find("scale4.fdm.fuse_out.weight") != std::string::npos;
            if (i % stride == 0 || key) subset.push_back(all_params[i]);
        }
        const int s = cfg.image_size;
        Tensor<D> pre = random_tensor<D>({1, 3, s, s}, rng, 0, 1);
        Tensor<D> post = random_tensor<D>({1, 3, s, s}, rng, 0, 1);
        model.zero_grad();
        out.push_back(check_block(
            "full_model", cfg.model_tolerance, subset, {{"pre", &pre}, {"post", &post}},
            [&] { return model.forward(pre, post); },
            [&](const Tensor<D>& dy) {
                auto [a, b] = model.backward(dy);
                return std::vector<Tensor<D>>{a, b};
            },
            rng, 3, 1e-6));
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<BenchRow> run_retention_bench(const BenchConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<BenchRow> rows;
    for (int g : cfg.grid_sizes) {
        const Tensor<float> x = random_tensor<float>({1, cfg.channels, g, g}, rng);
        for (const char* variant : {"retention", "attention"}) {
            RetentionParams<float> p("bench", cfg.channels, cfg.heads, cfg.head_dim);
            p.init(rng);
            if (std::string(variant) == "attention") p.set_uniform_gamma(1.0);
            std::vector<double> ms;
            for (int t = 0; t < cfg.trials; ++t) {
                const auto t0 = std::chrono::steady_clock::now();
                const Tensor<float> y = retention_parallel(x, p, RetentionOptions{});
                const auto t1 = std::chrono::steady_clock::now();
                if (!y.all_finite()) throw NumericError("bench: non-finite output");
                ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            }
            std::vector<double> sorted = ms;
            std::sort(sorted.begin(), sorted.end());
            const std::size_t n = sorted.size();
            BenchRow row;
            row.grid = g;
            row.variant = variant;
            row.trials = cfg.trials;
            row.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
            row.min_ms = sorted.front();
            row.max_ms = sorted.back();
            rows.push_back(row);
        }
    }
    return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::string csv = "grid,tokens,variant,trials,median_ms,min_ms,max_ms\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%dx%d,%d,%s,%d,%.3f,%.3f,%.3f\n", r.grid, r.grid, r.grid * r.grid,
                      r.variant.c_str(), r.trials, r.median_ms, r.min_ms, r.max_ms);
        csv += buf;
    }
    return csv;
}

} // namespace hyret
