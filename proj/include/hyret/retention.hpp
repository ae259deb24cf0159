#pragma once

// Global Retention Block.
//
// Tokens are the H*W grid cells of a feature map, indexed row-major. Each head
// projects the tokens to (Q, K, V), rotates Q and K axially (half of the head
// channels by the token row, half by the token column), and mixes tokens with
// the Manhattan-distance decay mask gamma^(|dr| + |dc|):
//
//   softmax_decay:  A = Softmax(Q K^T / sqrt(d)) .* D   (optionally row-renormalized)
//   decay_only:     A = (Q K^T) .* D
//
// The output is A V per head, concatenated and passed through an output
// projection. decay_only is the form that also admits the recurrent scan in
// retention_recurrent_1d, which is used as its oracle.

#include <Eigen/Core>
#include <span>
#include <string>
#include <vector>

#include "hyret/layers.hpp"
#include "hyret/tensor.hpp"

namespace hyret {

struct GridPosition {
    int row = 0;
    int col = 0;
};

std::vector<GridPosition> grid_positions(int height, int width);

template <typename T>
struct DecayMask {
    int tokens = 0;
    T gamma = T(1);
    std::vector<T> values;  // tokens x tokens, symmetric

    T operator()(int n, int m) const { return values[static_cast<std::size_t>(n) * tokens + m]; }
};

template <typename T>
DecayMask<T> decay_mask_2d(int height, int width, T gamma);
template <typename T>
DecayMask<T> decay_mask(std::span<const GridPosition> positions, T gamma);

template <typename T>
using TokenMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Rotates channel pairs of each token in place. sign = +1 applies Theta,
// sign = -1 its conjugate. Requires tokens.cols() % 4 == 0.
template <typename T>
void axial_rotation(TokenMatrix<T>& tokens, std::span<const GridPosition> positions, int sign, double theta_base);

// gamma_h = 1 - 2^-(5 + h)
std::vector<double> default_decay_rates(int heads);

enum class RetentionMode { softmax_decay, decay_only };
enum class ScanDirection { causal, bidirectional };

struct RetentionOptions {
    RetentionMode mode = RetentionMode::softmax_decay;
    bool renormalize = false;
};

template <typename T>
struct RetentionParams {
    int heads = 1;
    int head_dim = 4;
    std::vector<T> gamma;
    double theta_base = 10000.0;
    Conv2d<T> q;
    Conv2d<T> k;
    Conv2d<T> v;
    Conv2d<T> out;

    RetentionParams() = default;
    RetentionParams(const std::string& name, int channels, int heads, int head_dim,
                    double theta_base = 10000.0);

    int channels() const { return q.in_channels(); }
    int inner() const { return heads * head_dim; }
    void set_gamma(std::span<const double> rates);
    void set_uniform_gamma(double g);
    void validate() const;
    void init(Rng& rng);
    void collect(ParamList<T>& out_list);
    void collect_state(StateList<T>& out_list);
};

template <typename T>
struct RetentionCache {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

    Tensor<T> x;
    Tensor<T> q;  // rotated, [N, h*d, H, W]
    Tensor<T> k;  // rotated
    Tensor<T> v;
    Tensor<T> attended;  // pre output projection
    std::vector<GridPosition> positions;
    std::vector<DecayMask<T>> masks;
    RetentionOptions options;
    // Indexed [batch * heads + head]; columns hold attention rows.
    std::vector<Mat> attn_t;
    std::vector<Mat> probs_t;
    std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>> row_sums;
};

// Scores are scaled by 1/sqrt(d) in softmax_decay mode and unscaled in
// decay_only mode. `positions` overrides the row-major grid coordinates used
// for rotation and decay (one entry per token).
template <typename T>
Tensor<T> retention_parallel(const Tensor<T>& x, const RetentionParams<T>& p, const RetentionOptions& options,
                             RetentionCache<T>* cache = nullptr, std::span<const GridPosition> positions = {});

// Accumulates parameter gradients into p and returns dL/dx.
template <typename T>
Tensor<T> retention_parallel_backward(RetentionParams<T>& p, const RetentionCache<T>& cache, const Tensor<T>& dy);

template <typename T>
struct HeadTokens {
    TokenMatrix<T> q;
    TokenMatrix<T> k;
    TokenMatrix<T> v;
};

// Projected and rotated per-head tokens of batch element `batch`.
template <typename T>
std::vector<HeadTokens<T>> retention_head_tokens(const Tensor<T>& x, int batch, const RetentionParams<T>& p,
                                                 std::span<const GridPosition> positions = {});

// Token-level parallel form for one head: rows of q/k/v are tokens.
template <typename T>
TokenMatrix<T> retention_attend(const TokenMatrix<T>& q, const TokenMatrix<T>& k, const TokenMatrix<T>& v,
                                const DecayMask<T>& mask, const RetentionOptions& options, T scale);

// o_n = sum_m gamma^|n-m| (q_n . k_m) v_m over m <= n (causal) or all m
// (bidirectional), computed with the d x dv state S_n = gamma S_{n-1} + k_n^T v_n.
template <typename T>
TokenMatrix<T> retention_recurrent_1d(const TokenMatrix<T>& q, const TokenMatrix<T>& k, const TokenMatrix<T>& v,
                                      T gamma, ScanDirection direction);

} // namespace hyret
