#pragma once

// Feature Difference Module.
//
//   z      = conv1x1(concat(x_pre, x_post))            2C -> C
//   local  = lfb(z)
//   global = retention(z)
//   out    = lg_interaction(local, global)
//
// Ablation variants drop a branch, swap retention for plain softmax attention
// (all decay rates 1), or fuse the two branches with conv1x1(concat) instead
// of the gated interaction.

#include <optional>
#include <string>
#include <utility>

#include "hyret/layers.hpp"
#include "hyret/local_block.hpp"
#include "hyret/retention.hpp"

namespace hyret {

template <typename T>
struct LgCache {
    Tensor<T> local;
    Tensor<T> global;
    Tensor<T> sig_local;
    Tensor<T> sig_global;
    Tensor<T> fused;  // concat(l2g, g2l)
};

// l2g = sigmoid(local) * global, g2l = sigmoid(global) * local,
// out = fuse(concat(l2g, g2l)).
template <typename T>
Tensor<T> lg_interaction(const Tensor<T>& local, const Tensor<T>& global, const Conv2d<T>& fuse,
                         LgCache<T>* cache = nullptr);

// Returns (d_local, d_global).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> lg_interaction_backward(Conv2d<T>& fuse, const LgCache<T>& cache,
                                                        const Tensor<T>& dy);

enum class GlobalBranch { none, attention, retention };

struct FdmOptions {
    bool use_lfb = true;
    GlobalBranch global = GlobalBranch::retention;
    bool use_lg = true;
    bool use_norm = false;  // batchnorm after the input fusion conv
    RetentionOptions retention;
};

template <typename T>
struct FdmParams {
    FdmOptions options;
    Conv2d<T> fuse_in;
    std::optional<BatchNorm2d<T>> norm;
    LfbParams<T> lfb;
    RetentionParams<T> grb;
    Conv2d<T> fuse_out;

    FdmParams() = default;
    FdmParams(const std::string& name, int channels, int heads, int head_dim, const FdmOptions& options,
              double theta_base = 10000.0);

    int channels() const { return fuse_in.out_channels(); }
    bool has_local() const { return options.use_lfb; }
    bool has_global() const { return options.global != GlobalBranch::none; }
    bool has_fusion() const { return has_local() && has_global(); }

    void init(Rng& rng);
    void collect(ParamList<T>& out);
    void collect_state(StateList<T>& out);
};

template <typename T>
struct FdmCache {
    Tensor<T> stacked;  // concat(x_pre, x_post)
    Tensor<T> fused_pre_norm;
    ops::BatchNormCache<T> norm;
    Tensor<T> z;
    LfbCache<T> lfb;
    RetentionCache<T> grb;
    LgCache<T> lg;
    Tensor<T> merged;  // concat(local, global) when fusing without interaction
};

// Rejects configurations without any branch, or an interaction without both.
void validate_fdm_options(const FdmOptions& options);

template <typename T>
Tensor<T> fdm_forward(const Tensor<T>& x_pre, const Tensor<T>& x_post, FdmParams<T>& p, bool training,
                      FdmCache<T>* cache = nullptr);

// Returns (d_pre, d_post).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> fdm_backward(FdmParams<T>& p, const FdmCache<T>& cache, const Tensor<T>& dy);

} // namespace hyret
