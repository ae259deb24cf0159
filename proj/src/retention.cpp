#include "hyret/retention.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace hyret {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

void check_gamma(double gamma, const char* op) {
    if (!(gamma > 0.0 && gamma <= 1.0))
        throw ShapeError(std::string(op) + ": gamma must lie in (0, 1], got " + std::to_string(gamma));
}

// Rotates pairs in a [tokens x d] block addressed through strides.
template <typename T>
void rotate_block(T* data, int tokens, int d, std::ptrdiff_t token_stride, std::ptrdiff_t channel_stride,
                  std::span<const GridPosition> positions, int sign, double theta_base) {
    if (d % 4 != 0) throw ShapeError("axial_rotation: head dim must be divisible by 4, got " + std::to_string(d));
    if (static_cast<int>(positions.size()) != tokens)
        throw ShapeError("axial_rotation: expected " + std::to_string(tokens) + " positions, got " +
                         std::to_string(positions.size()));
    const int half = d / 2;
    const int pairs = half / 2;
    std::vector<double> theta(pairs);
    for (int j = 0; j < pairs; ++j) theta[j] = std::pow(theta_base, -2.0 * j / half);
    for (int n = 0; n < tokens; ++n) {
        T* tok = data + n * token_stride;
        for (int axis = 0; axis < 2; ++axis) {
            const int coord = axis == 0 ? positions[n].row : positions[n].col;
            for (int j = 0; j < pairs; ++j) {
                const double angle = sign * coord * theta[j];
                const T c = static_cast<T>(std::cos(angle));
                const T s = static_cast<T>(std::sin(angle));
                T& a = tok[(axis * half + 2 * j) * channel_stride];
                T& b = tok[(axis * half + 2 * j + 1) * channel_stride];
                const T a0 = a, b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
        }
    }
}

template <typename T>
struct HeadState {
    Mat<T> attn_t;
    Mat<T> probs_t;
    Vec<T> row_sums;
};

// q, k: [L, d]; v: [L, dv]; mask: L x L symmetric. Writes out = A v.
template <typename T>
void attend_head(const Eigen::Ref<const Mat<T>>& q, const Eigen::Ref<const Mat<T>>& k,
                 const Eigen::Ref<const Mat<T>>& v, const DecayMask<T>& mask, const RetentionOptions& options, T scale,
                 Eigen::Ref<Mat<T>> out, HeadState<T>& st, int head) {
    const int L = static_cast<int>(q.rows());
    ConstMatMap<T> D(mask.values.data(), L, L);
    // Column n of the transposed score matrix is attention row n.
    Mat<T> scores_t = scale * (k * q.transpose());
    if (options.mode == RetentionMode::softmax_decay) {
        st.probs_t.resize(L, L);
        for (int n = 0; n < L; ++n) {
            auto col = scores_t.col(n);
            const T mx = col.maxCoeff();
            auto p = st.probs_t.col(n);
            p = (col.array() - mx).exp().matrix();
            p /= p.sum();
        }
        st.attn_t = st.probs_t.cwiseProduct(D);
        if (options.renormalize) {
            st.row_sums = st.attn_t.colwise().sum().transpose();
            for (int n = 0; n < L; ++n) st.attn_t.col(n) /= st.row_sums(n);
        }
    } else {
        st.attn_t = scores_t.cwiseProduct(D);
    }
    if (!st.attn_t.allFinite())
        throw NumericError("retention: non-finite attention weights in head " + std::to_string(head));
    out.noalias() = st.attn_t.transpose() * v;
    if (!out.allFinite()) throw NumericError("retention: non-finite output in head " + std::to_string(head));
}

template <typename T>
void attend_head_backward(const Eigen::Ref<const Mat<T>>& q, const Eigen::Ref<const Mat<T>>& k,
                          const Eigen::Ref<const Mat<T>>& v, const DecayMask<T>& mask,
                          const RetentionOptions& options, T scale, const Mat<T>& attn_t, const Mat<T>& probs_t,
                          const Vec<T>& row_sums, const Eigen::Ref<const Mat<T>>& dout, Eigen::Ref<Mat<T>> dq, Eigen::Ref<Mat<T>> dk,
                          Eigen::Ref<Mat<T>> dv) {
    const int L = static_cast<int>(q.rows());
    ConstMatMap<T> D(mask.values.data(), L, L);
    dv.noalias() = attn_t * dout;
    Mat<T> d_attn_t = v * dout.transpose();
    Mat<T> d_scores_t;
    if (options.mode == RetentionMode::softmax_decay) {
        if (options.renormalize) {
            for (int n = 0; n < L; ++n) {
                const T dot = d_attn_t.col(n).dot(attn_t.col(n));
                d_attn_t.col(n) = (d_attn_t.col(n).array() - dot).matrix() / row_sums(n);
            }
        }
        Mat<T> d_probs_t = d_attn_t.cwiseProduct(D);
        d_scores_t.resize(L, L);
        for (int n = 0; n < L; ++n) {
            const T dot = d_probs_t.col(n).dot(probs_t.col(n));
            d_scores_t.col(n) = probs_t.col(n).cwiseProduct((d_probs_t.col(n).array() - dot).matrix());
        }
    } else {
        d_scores_t = d_attn_t.cwiseProduct(D);
    }
    dq.noalias() = scale * (d_scores_t.transpose() * k);
    dk.noalias() = scale * (d_scores_t * q);
}

template <typename T>
std::vector<GridPosition> resolve_positions(const Shape& xs, std::span<const GridPosition> positions) {
    if (positions.empty()) return grid_positions(xs.h, xs.w);
    if (positions.size() != xs.plane())
        throw ShapeError("retention: expected " + std::to_string(xs.plane()) + " positions, got " +
                         std::to_string(positions.size()));
    return {positions.begin(), positions.end()};
}

// Rotates every head of every batch element of a [N, h*d, H, W] tensor.
template <typename T>
void rotate_heads(Tensor<T>& t, int heads, int d, std::span<const GridPosition> positions, int sign, double base) {
    const int L = t.h() * t.w();
    for (int b = 0; b < t.n(); ++b) {
        for (int h = 0; h < heads; ++h) {
            T* block = t.sample(b) + static_cast<std::size_t>(h) * d * L;
            rotate_block(block, L, d, 1, L, positions, sign, base);
        }
    }
}

} // namespace

std::vector<GridPosition> grid_positions(int height, int width) {
    if (height < 1 || width < 1) throw ShapeError("grid_positions: H and W must be >= 1");
    std::vector<GridPosition> pos;
    pos.reserve(static_cast<std::size_t>(height) * width);
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) pos.push_back({r, c});
    return pos;
}

template <typename T>
DecayMask<T> decay_mask(std::span<const GridPosition> positions, T gamma) {
    check_gamma(static_cast<double>(gamma), "decay_mask");
    DecayMask<T> m;
    m.tokens = static_cast<int>(positions.size());
    m.gamma = gamma;
    int max_dist = 0;
    for (const auto& a : positions)
        for (const auto& b : positions)
            max_dist = std::max(max_dist, std::abs(a.row - b.row) + std::abs(a.col - b.col));
    std::vector<T> power(max_dist + 1);
    for (int k = 0; k <= max_dist; ++k) power[k] = static_cast<T>(std::pow(static_cast<double>(gamma), k));
    m.values.resize(static_cast<std::size_t>(m.tokens) * m.tokens);
    for (int n = 0; n < m.tokens; ++n)
        for (int j = 0; j < m.tokens; ++j)
            m.values[static_cast<std::size_t>(n) * m.tokens + j] =
                power[std::abs(positions[n].row - positions[j].row) + std::abs(positions[n].col - positions[j].col)];
    return m;
}

template <typename T>
DecayMask<T> decay_mask_2d(int height, int width, T gamma) {
    const auto pos = grid_positions(height, width);
    return decay_mask<T>(pos, gamma);
}

template <typename T>
void axial_rotation(TokenMatrix<T>& tokens, std::span<const GridPosition> positions, int sign, double theta_base) {
    if (sign != 1 && sign != -1) throw ShapeError("axial_rotation: sign must be +1 or -1");
    rotate_block(tokens.data(), static_cast<int>(tokens.rows()), static_cast<int>(tokens.cols()), tokens.cols(), 1,
                 positions, sign, theta_base);
}

std::vector<double> default_decay_rates(int heads) {
    std::vector<double> g(heads);
    for (int h = 0; h < heads; ++h) g[h] = 1.0 - std::ldexp(1.0, -(5 + h));
    return g;
}

// ---------------------------------------------------------------------------
// RetentionParams

template <typename T>
RetentionParams<T>::RetentionParams(const std::string& name, int channels, int heads_, int head_dim_,
                                    double theta_base_)
    : heads(heads_),
      head_dim(head_dim_),
      theta_base(theta_base_),
      q(name + ".q", channels, heads_ * head_dim_, 1),
      k(name + ".k", channels, heads_ * head_dim_, 1),
      v(name + ".v", channels, heads_ * head_dim_, 1),
      out(name + ".out", heads_ * head_dim_, channels, 1) {
    set_gamma(default_decay_rates(heads_));
    validate();
}

template <typename T>
void RetentionParams<T>::set_gamma(std::span<const double> rates) {
    if (static_cast<int>(rates.size()) != heads)
        throw ShapeError("retention: need one decay rate per head (" + std::to_string(heads) + ")");
    gamma.assign(rates.size(), T(0));
    for (std::size_t h = 0; h < rates.size(); ++h) {
        check_gamma(rates[h], "retention");
        gamma[h] = static_cast<T>(rates[h]);
    }
}

template <typename T>
void RetentionParams<T>::set_uniform_gamma(double g) {
    std::vector<double> rates(heads, g);
    set_gamma(rates);
}

template <typename T>
void RetentionParams<T>::validate() const {
    if (heads < 1) throw ShapeError("retention: heads must be >= 1");
    if (head_dim % 4 != 0)
        throw ShapeError("retention: head_dim must be divisible by 4, got " + std::to_string(head_dim));
    if (inner() != channels())
        throw ShapeError("retention: heads * head_dim (" + std::to_string(inner()) + ") must equal channels (" +
                         std::to_string(channels()) + ")");
    if (!(theta_base > 1.0)) throw ShapeError("retention: theta_base must be > 1");
    if (static_cast<int>(gamma.size()) != heads) throw ShapeError("retention: gamma count != heads");
    for (T g : gamma) check_gamma(static_cast<double>(g), "retention");
}

template <typename T>
void RetentionParams<T>::init(Rng& rng) {
    // Xavier-uniform projections, zero biases.
    for (Conv2d<T>* c : {&q, &k, &v, &out}) {
        const double bound = std::sqrt(6.0 / (c->in_channels() + c->out_channels()));
        fill_uniform(c->weight.value, rng, -bound, bound);
        c->bias.value.fill(T(0));
    }
}

template <typename T>
void RetentionParams<T>::collect(ParamList<T>& out_list) {
    q.collect(out_list);
    k.collect(out_list);
    v.collect(out_list);
    out.collect(out_list);
}

template <typename T>
void RetentionParams<T>::collect_state(StateList<T>& out_list) {
    q.collect_state(out_list);
    k.collect_state(out_list);
    v.collect_state(out_list);
    out.collect_state(out_list);
}

// ---------------------------------------------------------------------------
// parallel form

template <typename T>
Tensor<T> retention_parallel(const Tensor<T>& x, const RetentionParams<T>& p, const RetentionOptions& options,
                             RetentionCache<T>* cache, std::span<const GridPosition> positions) {
    p.validate();
    const Shape& xs = x.shape();
    if (xs.c != p.channels())
        throw ShapeError("retention: input channels " + std::to_string(xs.c) + " != " + std::to_string(p.channels()));
    const auto pos = resolve_positions<T>(xs, positions);
    const int L = xs.h * xs.w;
    const int d = p.head_dim;
    const T scale = options.mode == RetentionMode::softmax_decay ? static_cast<T>(1.0 / std::sqrt(double(d))) : T(1);

    Tensor<T> q = p.q.forward(x);
    Tensor<T> k = p.k.forward(x);
    Tensor<T> v = p.v.forward(x);
    rotate_heads(q, p.heads, d, pos, +1, p.theta_base);
    // K rotates the same way as Q; the real dot product conjugates it.
    rotate_heads(k, p.heads, d, pos, +1, p.theta_base);

    std::vector<DecayMask<T>> masks;
    masks.reserve(p.heads);
    for (int h = 0; h < p.heads; ++h) masks.push_back(decay_mask<T>(pos, p.gamma[h]));

    Tensor<T> attended(Shape{xs.n, p.inner(), xs.h, xs.w});
    if (cache) {
        cache->attn_t.assign(static_cast<std::size_t>(xs.n) * p.heads, {});
        cache->probs_t.assign(static_cast<std::size_t>(xs.n) * p.heads, {});
        cache->row_sums.assign(static_cast<std::size_t>(xs.n) * p.heads, {});
    }
    HeadState<T> st;
    for (int b = 0; b < xs.n; ++b) {
        for (int h = 0; h < p.heads; ++h) {
            const std::size_t off = static_cast<std::size_t>(h) * d * L;
            ConstMatMap<T> qh(q.sample(b) + off, L, d);
            ConstMatMap<T> kh(k.sample(b) + off, L, d);
            ConstMatMap<T> vh(v.sample(b) + off, L, d);
            MatMap<T> oh(attended.sample(b) + off, L, d);
            attend_head<T>(qh, kh, vh, masks[h], options, scale, oh, st, h);
            if (cache) {
                const std::size_t idx = static_cast<std::size_t>(b) * p.heads + h;
                cache->attn_t[idx] = std::move(st.attn_t);
                cache->probs_t[idx] = std::move(st.probs_t);
                cache->row_sums[idx] = std::move(st.row_sums);
            }
        }
    }
    Tensor<T> y = p.out.forward(attended);
    if (cache) {
        cache->x = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attended = std::move(attended);
        cache->positions = pos;
        cache->masks = std::move(masks);
        cache->options = options;
    }
    return y;
}

template <typename T>
Tensor<T> retention_parallel_backward(RetentionParams<T>& p, const RetentionCache<T>& cache, const Tensor<T>& dy) {
    const Shape& xs = cache.x.shape();
    const int L = xs.h * xs.w;
    const int d = p.head_dim;
    const T scale =
        cache.options.mode == RetentionMode::softmax_decay ? static_cast<T>(1.0 / std::sqrt(double(d))) : T(1);

    Tensor<T> d_attended = p.out.backward(cache.attended, dy);
    Tensor<T> dq(cache.q.shape());
    Tensor<T> dk(cache.k.shape());
    Tensor<T> dv(cache.v.shape());
    for (int b = 0; b < xs.n; ++b) {
        for (int h = 0; h < p.heads; ++h) {
            const std::size_t off = static_cast<std::size_t>(h) * d * L;
            const std::size_t idx = static_cast<std::size_t>(b) * p.heads + h;
            attend_head_backward<T>(ConstMatMap<T>(cache.q.sample(b) + off, L, d),
                                    ConstMatMap<T>(cache.k.sample(b) + off, L, d),
                                    ConstMatMap<T>(cache.v.sample(b) + off, L, d), cache.masks[h], cache.options,
                                    scale, cache.attn_t[idx], cache.probs_t[idx], cache.row_sums[idx],
                                    ConstMatMap<T>(d_attended.sample(b) + off, L, d),
                                    MatMap<T>(dq.sample(b) + off, L, d), MatMap<T>(dk.sample(b) + off, L, d),
                                    MatMap<T>(dv.sample(b) + off, L, d));
        }
    }
    // Rotation is orthogonal: its adjoint is the inverse rotation.
    rotate_heads(dq, p.heads, d, cache.positions, -1, p.theta_base);
    rotate_heads(dk, p.heads, d, cache.positions, -1, p.theta_base);
    Tensor<T> dx = p.q.backward(cache.x, dq);
    dx += p.k.backward(cache.x, dk);
    dx += p.v.backward(cache.x, dv);
    return dx;
}

template <typename T>
std::vector<HeadTokens<T>> retention_head_tokens(const Tensor<T>& x, int batch, const RetentionParams<T>& p,
                                                 std::span<const GridPosition> positions) {
    p.validate();
    const auto pos = resolve_positions<T>(x.shape(), positions);
    const int L = x.h() * x.w();
    const int d = p.head_dim;
    Tensor<T> q = p.q.forward(x);
    Tensor<T> k = p.k.forward(x);
    Tensor<T> v = p.v.forward(x);
    rotate_heads(q, p.heads, d, pos, +1, p.theta_base);
    rotate_heads(k, p.heads, d, pos, +1, p.theta_base);
    std::vector<HeadTokens<T>> out(p.heads);
    for (int h = 0; h < p.heads; ++h) {
        const std::size_t off = static_cast<std::size_t>(h) * d * L;
        out[h].q = ConstMatMap<T>(q.sample(batch) + off, L, d);
        out[h].k = ConstMatMap<T>(k.sample(batch) + off, L, d);
        out[h].v = ConstMatMap<T>(v.sample(batch) + off, L, d);
    }
    return out;
}

template <typename T>
TokenMatrix<T> retention_attend(const TokenMatrix<T>& q, const TokenMatrix<T>& k, const TokenMatrix<T>& v,
                                const DecayMask<T>& mask, const RetentionOptions& options, T scale) {
    if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols())
        throw ShapeError("retention_attend: q/k/v token or dim mismatch");
    if (mask.tokens != q.rows()) throw ShapeError("retention_attend: mask size != token count");
    Mat<T> out(q.rows(), v.cols());
    HeadState<T> st;
    attend_head<T>(Mat<T>(q), Mat<T>(k), Mat<T>(v), mask, options, scale, out, st, 0);
    return out;
}

template <typename T>
TokenMatrix<T> retention_recurrent_1d(const TokenMatrix<T>& q, const TokenMatrix<T>& k, const TokenMatrix<T>& v,
                                      T gamma, ScanDirection direction) {
    check_gamma(static_cast<double>(gamma), "retention_recurrent_1d");
    if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols())
        throw ShapeError("retention_recurrent_1d: q/k/v token or dim mismatch");
    const Eigen::Index n = q.rows();
    TokenMatrix<T> o = TokenMatrix<T>::Zero(n, v.cols());
    Mat<T> state = Mat<T>::Zero(k.cols(), v.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        state = gamma * state + k.row(i).transpose() * v.row(i);
        o.row(i) = q.row(i) * state;
    }
    if (direction == ScanDirection::bidirectional) {
        state.setZero();
        for (Eigen::Index i = n - 1; i >= 0; --i) {
            state = gamma * state + k.row(i).transpose() * v.row(i);
            o.row(i) += q.row(i) * state;
        }
        // The diagonal term is counted by both scans.
        for (Eigen::Index i = 0; i < n; ++i) o.row(i) -= q.row(i).dot(k.row(i)) * v.row(i);
    }
    return o;
}

#define HYRET_INSTANTIATE_RETENTION(T)                                                                            \
    template struct RetentionParams<T>;                                                                           \
    template DecayMask<T> decay_mask(std::span<const GridPosition>, T);                                           \
    template DecayMask<T> decay_mask_2d(int, int, T);                                                             \
    template void axial_rotation(TokenMatrix<T>&, std::span<const GridPosition>, int, double);                    \
    template Tensor<T> retention_parallel(const Tensor<T>&, const RetentionParams<T>&, const RetentionOptions&,   \
                                          RetentionCache<T>*, std::span<const GridPosition>);                     \
    template Tensor<T> retention_parallel_backward(RetentionParams<T>&, const RetentionCache<T>&,                 \
                                                   const Tensor<T>&);                                             \
    template std::vector<HeadTokens<T>> retention_head_tokens(const Tensor<T>&, int, const RetentionParams<T>&,   \
                                                              std::span<const GridPosition>);                     \
    template TokenMatrix<T> retention_attend(const TokenMatrix<T>&, const TokenMatrix<T>&, const TokenMatrix<T>&, \
                                             const DecayMask<T>&, const RetentionOptions&, T);                    \
    template TokenMatrix<T> retention_recurrent_1d(const TokenMatrix<T>&, const TokenMatrix<T>&,                  \
                                                   const TokenMatrix<T>&, T, ScanDirection);

HYRET_INSTANTIATE_RETENTION(float)
HYRET_INSTANTIATE_RETENTION(double)

} // namespace hyret
