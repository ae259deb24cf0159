#include <gtest/gtest.h>

#include <cmath>

#include "hyret/fdm.hpp"
#include "hyret/grad_check.hpp"
#include "hyret/local_block.hpp"
#include "oracles.hpp"

using namespace hyret;

namespace {

template <typename T>
void randomize(ParamList<T> params, Rng& rng, double scale = 0.5) {
    for (auto* p : params) fill_uniform(p->value, rng, -scale, scale);
}

template <typename T>
ParamList<T> lfb_params(LfbParams<T>& p) {
    ParamList<T> out;
    p.collect(out);
    return out;
}

std::vector<double> bias_of(const Param<double>& b) { return {b.value.values().begin(), b.value.values().end()}; }

Tensor<double> depthwise_oracle(const Tensor<double>& x, const DepthwiseConv2d<double>& dw) {
    Tensor<double> y(x.shape());
    for (int c = 0; c < x.c(); ++c) {
        Tensor<double> xc(Shape{x.n(), 1, x.h(), x.w()}), wc(Shape{1, 1, 3, 3});
        for (int n = 0; n < x.n(); ++n)
            for (int i = 0; i < x.h(); ++i)
                for (int j = 0; j < x.w(); ++j) xc.at(n, 0, i, j) = x.at(n, c, i, j);
        for (int i = 0; i < 9; ++i) wc[i] = dw.weight.value[c * 9 + i];
        auto yc = oracle::conv2d(xc, wc, {dw.bias.value[c]}, 1, 1);
        for (int n = 0; n < x.n(); ++n)
            for (int i = 0; i < x.h(); ++i)
                for (int j = 0; j < x.w(); ++j) y.at(n, c, i, j) = yc.at(n, 0, i, j);
    }
    return y;
}

Tensor<double> lfb_oracle(const Tensor<double>& x, const LfbParams<double>& p) {
    auto h = depthwise_oracle(x, p.depthwise);
    for (auto& v : h.values()) v = std::max(v, 0.0);
    auto y = oracle::conv2d(h, p.pointwise.weight.value, bias_of(p.pointwise.bias), 1, 0);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
    return y;
}

Tensor<double> lg_oracle(const Tensor<double>& local, const Tensor<double>& global, const Conv2d<double>& fuse) {
    const int N = local.n(), C = local.c(), H = local.h(), W = local.w();
    Tensor<double> cat(Shape{N, 2 * C, H, W});
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const double l = local.at(n, c, i, j), g = global.at(n, c, i, j);
                    cat.at(n, c, i, j) = sig(l) * g;
                    cat.at(n, C + c, i, j) = sig(g) * l;
                }
    return oracle::conv2d(cat, fuse.weight.value, bias_of(fuse.bias), 1, 0);
}

FdmOptions opts(bool lfb, GlobalBranch g, bool lg) {
    FdmOptions o;
    o.use_lfb = lfb;
    o.global = g;
    o.use_lg = lg;
    return o;
}

template <typename T>
FdmParams<T> random_fdm(int C, const FdmOptions& o, Rng& rng) {
    FdmParams<T> p("fdm", C, 2, C / 2, o);
    ParamList<T> params;
    p.collect(params);
    randomize(params, rng);
    return p;
}

} // namespace

TEST(LocalBlock, ZeroWeightsIsIdentity) {
    Rng rng(1);
    LfbParams<double> p("lfb", 4);
    auto x = random_tensor<double>(Shape{2, 4, 5, 5}, rng);
    EXPECT_EQ(oracle::max_abs_diff(lfb_forward(x, p), x), 0.0);
}

TEST(LocalBlock, DefaultInitIsIdentity) {
    Rng rng(2);
    LfbParams<double> p("lfb", 4);
    p.init(rng);
    auto x = random_tensor<double>(Shape{1, 4, 3, 3}, rng);
    EXPECT_EQ(oracle::max_abs_diff(lfb_forward(x, p), x), 0.0);
}

TEST(LocalBlock, ZeroInputGivesPointwiseOfReluBias) {
    Rng rng(3);
    LfbParams<double> p("lfb", 3);
    randomize(lfb_params(p), rng);
    Tensor<double> x(Shape{1, 3, 4, 4});
    auto y = lfb_forward(x, p);
    for (int o = 0; o < 3; ++o) {
        double expect = p.pointwise.bias.value[o];
        for (int c = 0; c < 3; ++c) expect += p.pointwise.weight.value[o * 3 + c] * std::max(0.0, p.depthwise.bias.value[c]);
        for (int i = 0; i < 16; ++i) EXPECT_NEAR(y.plane(0, o)[i], expect, 1e-14);
    }
}

TEST(LocalBlock, MatchesCompositionalOracle) {
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(10 + seed);
        LfbParams<double> p("lfb", 4);
        randomize(lfb_params(p), rng);
        auto x = random_tensor<double>(Shape{2, 4, 5, 6}, rng);
        EXPECT_LT(oracle::max_abs_diff(lfb_forward(x, p), lfb_oracle(x, p)), 1e-12);
    }
}

TEST(LocalBlock, ShapePreservedAndChannelMismatch) {
    Rng rng(4);
    LfbParams<float> p("lfb", 6);
    auto x = random_tensor<float>(Shape{3, 6, 7, 5}, rng);
    EXPECT_EQ(lfb_forward(x, p).shape(), x.shape());
    EXPECT_THROW(lfb_forward(Tensor<float>(Shape{1, 5, 3, 3}), p), ShapeError);
}

TEST(LocalBlock, TranslationEquivariantAwayFromBorder) {
    Rng rng(5);
    LfbParams<double> p("lfb", 3);
    randomize(lfb_params(p), rng);
    auto x = random_tensor<double>(Shape{1, 3, 8, 8}, rng);
    Tensor<double> xs(x.shape());
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 7; ++j) xs.at(0, c, i, j + 1) = x.at(0, c, i, j);
    auto y = lfb_forward(x, p), ys = lfb_forward(xs, p);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 8; ++i)
            for (int j = 1; j < 6; ++j) EXPECT_NEAR(ys.at(0, c, i, j + 1), y.at(0, c, i, j), 1e-12);
}

TEST(LocalBlock, GradCheckDouble) {
    Rng rng(6);
    LfbParams<double> p("lfb", 4);
    randomize(lfb_params(p), rng);
    auto x = random_tensor<double>(Shape{2, 4, 4, 4}, rng);
    auto r = random_tensor<double>(x.shape(), rng);
    LfbCache<double> cache;
    lfb_forward(x, p, &cache);
    auto params = lfb_params(p);
    for (auto* q : params) q->zero_grad();
    auto dx = lfb_backward(p, cache, r);
    std::vector<GradSlot<double>> slots{{"x", x.values(), dx.values(), {}}};
    for (auto* q : params) slots.push_back({q->name, q->value.values(), q->grad.values(), {}});
    EXPECT_LT(grad_check<double>("lfb", [&] { return dot(lfb_forward(x, p), r); }, slots).max_rel_error, 1e-6);
}

TEST(LgInteraction, ZeroLocalGivesHalfGlobal) {
    Rng rng(7);
    Conv2d<double> fuse("fuse", 6, 3, 1);
    Tensor<double> local(Shape{1, 3, 2, 2});
    auto global = random_tensor<double>(local.shape(), rng);
    // Read l2g and g2l back through a fusion conv that selects them.
    for (int c = 0; c < 3; ++c) fuse.weight.value[c * 6 + c] = 1.0;
    auto l2g = lg_interaction(local, global, fuse);
    for (std::size_t i = 0; i < l2g.size(); ++i) EXPECT_DOUBLE_EQ(l2g[i], 0.5 * global[i]);
    fuse.weight.value.fill(0.0);
    for (int c = 0; c < 3; ++c) fuse.weight.value[c * 6 + 3 + c] = 1.0;
    auto g2l = lg_interaction(local, global, fuse);
    for (double v : g2l.values()) EXPECT_EQ(v, 0.0);
}

TEST(LgInteraction, ZeroInputsGiveFusionBias) {
    Rng rng(8);
    Conv2d<double> fuse("fuse", 4, 2, 1);
    fuse.init_he(rng);
    Tensor<double> z(Shape{1, 2, 3, 3});
    auto y = lg_interaction(z, z, fuse);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 9; ++i) EXPECT_EQ(y.plane(0, c)[i], fuse.bias.value[c]);
}

TEST(LgInteraction, MatchesCompositionalOracle) {
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng(20 + seed);
        Conv2d<double> fuse("fuse", 8, 4, 1);
        fuse.init_he(rng);
        auto local = random_tensor<double>(Shape{1, 4, 3, 3}, rng, -3, 3);
        auto global = random_tensor<double>(Shape{1, 4, 3, 3}, rng, -3, 3);
        EXPECT_LT(oracle::max_abs_diff(lg_interaction(local, global, fuse), lg_oracle(local, global, fuse)), 1e-12);
    }
}

TEST(LgInteraction, GradCheckDouble) {
    Rng rng(9);
    Conv2d<double> fuse("fuse", 8, 4, 1);
    fuse.init_he(rng);
    auto local = random_tensor<double>(Shape{2, 4, 3, 3}, rng, -2, 2);
    auto global = random_tensor<double>(Shape{2, 4, 3, 3}, rng, -2, 2);
    auto r = random_tensor<double>(Shape{2, 4, 3, 3}, rng);
    LgCache<double> cache;
    lg_interaction(local, global, fuse, &cache);
    fuse.weight.zero_grad();
    fuse.bias.zero_grad();
    auto [dl, dg] = lg_interaction_backward(fuse, cache, r);
    std::vector<GradSlot<double>> slots{{"local", local.values(), dl.values(), {}},
                                        {"global", global.values(), dg.values(), {}},
                                        {"w", fuse.weight.value.values(), fuse.weight.grad.values(), {}},
                                        {"b", fuse.bias.value.values(), fuse.bias.grad.values(), {}}};
    EXPECT_LT(grad_check<double>("lg", [&] { return dot(lg_interaction(local, global, fuse), r); }, slots).max_rel_error,
              1e-6);
}

TEST(Fdm, MatchesComposition) {
    Rng rng(30);
    auto p = random_fdm<double>(8, opts(true, GlobalBranch::retention, true), rng);
    auto a = random_tensor<double>(Shape{1, 8, 3, 3}, rng);
    auto b = random_tensor<double>(Shape{1, 8, 3, 3}, rng);
    auto y = fdm_forward(a, b, p, false);
    auto z = oracle::conv2d(ops::concat_channels(a, b), p.fuse_in.weight.value, bias_of(p.fuse_in.bias), 1, 0);
    auto local = lfb_oracle(z, p.lfb);
    auto global = retention_parallel(z, p.grb, p.options.retention);
    EXPECT_LT(oracle::max_abs_diff(y, lg_oracle(local, global, p.fuse_out)), 1e-12);
}

TEST(Fdm, AttentionOnlyIsUnitDecayRetention) {
    Rng rng(31);
    auto p = random_fdm<double>(8, opts(false, GlobalBranch::attention, false), rng);
    for (double g : p.grb.gamma) EXPECT_EQ(g, 1.0);
    auto a = random_tensor<double>(Shape{1, 8, 4, 4}, rng);
    auto b = random_tensor<double>(Shape{1, 8, 4, 4}, rng);
    auto z = p.fuse_in.forward(ops::concat_channels(a, b));
    EXPECT_LT(oracle::max_abs_diff(fdm_forward(a, b, p, false), retention_parallel(z, p.grb, RetentionOptions{})), 1e-14);
}

TEST(Fdm, SwapSymmetricWithSymmetricFusion) {
    Rng rng(32);
    auto p = random_fdm<double>(8, opts(true, GlobalBranch::retention, true), rng);
    for (int o = 0; o < 8; ++o)
        for (int c = 0; c < 8; ++c) p.fuse_in.weight.value[o * 16 + 8 + c] = p.fuse_in.weight.value[o * 16 + c];
    auto a = random_tensor<double>(Shape{2, 8, 4, 4}, rng);
    auto b = random_tensor<double>(Shape{2, 8, 4, 4}, rng);
    EXPECT_LT(oracle::max_abs_diff(fdm_forward(a, b, p, false), fdm_forward(b, a, p, false)), 1e-14);
}

TEST(Fdm, IdenticalInputsFiniteAndStable) {
    Rng rng(33);
    FdmParams<float> p("fdm", 8, 2, 4, opts(true, GlobalBranch::retention, true));
    p.init(rng);
    auto x = random_tensor<float>(Shape{1, 8, 4, 4}, rng);
    auto y1 = fdm_forward(x, x, p, false);
    auto y2 = fdm_forward(x, x, p, false);
    EXPECT_TRUE(y1.all_finite());
    EXPECT_EQ(oracle::max_abs_diff(y1, y2), 0.0);
}

TEST(Fdm, FiniteOverSeedsAndShapePreserved) {
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(1000 + seed);
        FdmParams<float> p("fdm", 8, 2, 4, opts(true, GlobalBranch::retention, true));
        p.init(rng);
        const int h = 1 + seed % 5, w = 1 + (seed / 5) % 5;
        auto a = random_tensor<float>(Shape{2, 8, h, w}, rng, -3, 3);
        auto b = random_tensor<float>(Shape{2, 8, h, w}, rng, -3, 3);
        auto y = fdm_forward(a, b, p, seed % 2 == 0);
        ASSERT_EQ(y.shape(), a.shape());
        ASSERT_TRUE(y.all_finite()) << seed;
    }
}

TEST(Fdm, RejectsBadConfigsAndShapes) {
    EXPECT_THROW(validate_fdm_options(opts(false, GlobalBranch::none, false)), ConfigError);
    EXPECT_THROW(validate_fdm_options(opts(true, GlobalBranch::none, true)), ConfigError);
    EXPECT_THROW(validate_fdm_options(opts(false, GlobalBranch::retention, true)), ConfigError);
    EXPECT_NO_THROW(validate_fdm_options(opts(true, GlobalBranch::none, false)));
    Rng rng(34);
    FdmParams<float> p("fdm", 8, 2, 4, opts(true, GlobalBranch::retention, true));
    EXPECT_THROW(fdm_forward(Tensor<float>(Shape{1, 8, 2, 2}), Tensor<float>(Shape{1, 8, 2, 3}), p, false), ShapeError);
    EXPECT_THROW(fdm_forward(Tensor<float>(Shape{1, 4, 2, 2}), Tensor<float>(Shape{1, 4, 2, 2}), p, false), ShapeError);
}

namespace {

template <typename T>
double fdm_grad_error(const FdmOptions& o, int seed, Shape s) {
    Rng rng(seed);
    auto p = random_fdm<T>(s.c, o, rng);
    auto a = random_tensor<T>(s, rng);
    auto b = random_tensor<T>(s, rng);
    auto r = random_tensor<T>(s, rng);
    FdmCache<T> cache;
    fdm_forward(a, b, p, false, &cache);
    ParamList<T> params;
    p.collect(params);
    for (auto* q : params) q->zero_grad();
    auto [da, db] = fdm_backward(p, cache, r);
    std::vector<GradSlot<T>> slots{{"pre", a.values(), da.values(), {}}, {"post", b.values(), db.values(), {}}};
    for (auto* q : params) slots.push_back({q->name, q->value.values(), q->grad.values(), {}});
    return grad_check<T>("fdm", [&] { return dot(fdm_forward(a, b, p, false), r); }, slots).max_rel_error;
}

} // namespace

TEST(Fdm, GradCheckFloatOneByEight) {
    EXPECT_LT(fdm_grad_error<float>(opts(true, GlobalBranch::retention, true), 40, Shape{1, 8, 4, 4}), 1e-2);
}

TEST(Fdm, GradCheckDoubleAllVariants) {
    const FdmOptions variants[] = {opts(true, GlobalBranch::retention, true), opts(true, GlobalBranch::retention, false),
                                   opts(true, GlobalBranch::none, false), opts(false, GlobalBranch::retention, false),
                                   opts(true, GlobalBranch::attention, true)};
    int seed = 50;
    for (const auto& o : variants) EXPECT_LT(fdm_grad_error<double>(o, seed++, Shape{2, 8, 3, 3}), 1e-6);
}
