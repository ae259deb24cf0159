#include "hyret/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace hyret::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

std::string dim_msg(const char* op, const char* dim, int got, int expected) {
    return std::string(op) + ": " + dim + " mismatch (got " + std::to_string(got) + ", expected " +
           std::to_string(expected) + ")";
}

int conv_out(int size, int k, int stride, int pad) { return (size + 2 * pad - k) / stride + 1; }

// cols[(c*kh + i)*kw + j][oh*Wo + ow] = x[c][oh*stride - pad + i][ow*stride - pad + j] (0 outside)
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo, T* cols) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        const T* xc = x + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                T* row = cols + (static_cast<std::size_t>(c * kh + i) * kw + j) * P;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + i;
                    T* dst = row + oh * Wo;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + Wo, T(0));
                        continue;
                    }
                    const T* src = xc + static_cast<std::size_t>(ih) * W;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + j;
                        dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates cols back into x.
template <typename T>
void col2im(const T* cols, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo, T* x) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        T* xc = x + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const T* row = cols + (static_cast<std::size_t>(c * kh + i) * kw + j) * P;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + i;
                    if (ih < 0 || ih >= H) continue;
                    T* dst = xc + static_cast<std::size_t>(ih) * W;
                    const T* src = row + oh * Wo;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + j;
                        if (iw >= 0 && iw < W) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

void check_conv_args(const char* op, const Shape& xs, const Shape& ws, std::size_t bias_size, int cin_expected,
                     int cout, int stride, int pad) {
    if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
    if (pad < 0) throw ShapeError(std::string(op) + ": pad must be >= 0");
    if (xs.c != cin_expected) throw ShapeError(dim_msg(op, "input channels (Cin)", xs.c, cin_expected));
    if (bias_size != static_cast<std::size_t>(cout))
        throw ShapeError(dim_msg(op, "bias length (Cout)", static_cast<int>(bias_size), cout));
    (void)ws;
}

} // namespace

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    const int cout = ws.n, cin = ws.c, kh = ws.h, kw = ws.w;
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel height/width must be odd");
    check_conv_args("conv2d", xs, ws, b.size(), cin, cout, stride, pad);
    const int Ho = conv_out(xs.h, kh, stride, pad);
    const int Wo = conv_out(xs.w, kw, stride, pad);
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: kernel larger than padded input (H or W)");

    Tensor<T> y(Shape{xs.n, cout, Ho, Wo});
    const int K = cin * kh * kw;
    const int P = Ho * Wo;
    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    ConstMapMat<T> wm(w.data(), cout, K);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(b.data(), cout);
    RowMat<T> cols(pointwise ? 0 : K, pointwise ? 0 : P);
    for (int n = 0; n < xs.n; ++n) {
        MapMat<T> out(y.sample(n), cout, P);
        if (pointwise) {
            out.noalias() = wm * ConstMapMat<T>(x.sample(n), K, P);
        } else {
            im2col(x.sample(n), cin, xs.h, xs.w, kh, kw, stride, pad, Ho, Wo, cols.data());
            out.noalias() = wm * cols;
        }
        out.colwise() += bias;
    }
    return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride, int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    const int cout = ws.n, cin = ws.c, kh = ws.h, kw = ws.w;
    const int Ho = conv_out(xs.h, kh, stride, pad);
    const int Wo = conv_out(xs.w, kw, stride, pad);
    require_same_shape(dy.shape(), Shape{xs.n, cout, Ho, Wo}, "conv2d_backward dy");

    ConvGrads<T> g{Tensor<T>(xs), Tensor<T>(ws), Tensor<T>(Shape{cout, 1, 1, 1})};
    const int K = cin * kh * kw;
    const int P = Ho * Wo;
    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    ConstMapMat<T> wm(w.data(), cout, K);
    MapMat<T> dw(g.dw.data(), cout, K);
    RowMat<T> cols(K, P);
    RowMat<T> dcols(K, P);
    for (int n = 0; n < xs.n; ++n) {
        ConstMapMat<T> dout(dy.sample(n), cout, P);
        // fixed-order sum; Eigen's reduction order depends on the address
        for (int c = 0; c < cout; ++c) {
            const T* row = dy.sample(n) + static_cast<std::size_t>(c) * P;
            T s = T(0);
            for (int i = 0; i < P; ++i) s += row[i];
            g.db[c] += s;
        }
        if (pointwise) {
            ConstMapMat<T> xin(x.sample(n), K, P);
            dw.noalias() += dout * xin.transpose();
            MapMat<T>(g.dx.sample(n), K, P).noalias() = wm.transpose() * dout;
        } else {
            im2col(x.sample(n), cin, xs.h, xs.w, kh, kw, stride, pad, Ho, Wo, cols.data());
            dw.noalias() += dout * cols.transpose();
            dcols.noalias() = wm.transpose() * dout;
            col2im(dcols.data(), cin, xs.h, xs.w, kh, kw, stride, pad, Ho, Wo, g.dx.sample(n));
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// depthwise conv2d (groups = C)

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (ws.c != 1) throw ShapeError(dim_msg("depthwise_conv2d", "kernel dim 1", ws.c, 1));
    if (ws.h % 2 == 0 || ws.w % 2 == 0) throw ShapeError("depthwise_conv2d: kernel height/width must be odd");
    check_conv_args("depthwise_conv2d", xs, ws, b.size(), ws.n, ws.n, stride, pad);
    const int kh = ws.h, kw = ws.w;
    const int Ho = conv_out(xs.h, kh, stride, pad);
    const int Wo = conv_out(xs.w, kw, stride, pad);
    if (Ho < 1 || Wo < 1) throw ShapeError("depthwise_conv2d: kernel larger than padded input (H or W)");

    Tensor<T> y(Shape{xs.n, xs.c, Ho, Wo});
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            const T* xp = x.plane(n, c);
            const T* k = w.data() + static_cast<std::size_t>(c) * kh * kw;
            T* yp = y.plane(n, c);
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                    T acc = b[c];
                    for (int i = 0; i < kh; ++i) {
                        const int ih = oh * stride - pad + i;
                        if (ih < 0 || ih >= xs.h) continue;
                        for (int j = 0; j < kw; ++j) {
                            const int iw = ow * stride - pad + j;
                            if (iw < 0 || iw >= xs.w) continue;
                            acc += k[i * kw + j] * xp[ih * xs.w + iw];
                        }
                    }
                    yp[oh * Wo + ow] = acc;
                }
            }
        }
    }
    return y;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride,
                                       int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    const int kh = ws.h, kw = ws.w;
    const int Ho = conv_out(xs.h, kh, stride, pad);
    const int Wo = conv_out(xs.w, kw, stride, pad);
    require_same_shape(dy.shape(), Shape{xs.n, xs.c, Ho, Wo}, "depthwise_conv2d_backward dy");

    ConvGrads<T> g{Tensor<T>(xs), Tensor<T>(ws), Tensor<T>(Shape{xs.c, 1, 1, 1})};
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            const T* xp = x.plane(n, c);
            const T* k = w.data() + static_cast<std::size_t>(c) * kh * kw;
            T* dk = g.dw.data() + static_cast<std::size_t>(c) * kh * kw;
            T* dxp = g.dx.plane(n, c);
            const T* dyp = dy.plane(n, c);
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow) {
                    const T go = dyp[oh * Wo + ow];
                    g.db[c] += go;
                    for (int i = 0; i < kh; ++i) {
                        const int ih = oh * stride - pad + i;
                        if (ih < 0 || ih >= xs.h) continue;
                        for (int j = 0; j < kw; ++j) {
                            const int iw = ow * stride - pad + j;
                            if (iw < 0 || iw >= xs.w) continue;
                            dk[i * kw + j] += go * xp[ih * xs.w + iw];
                            dxp[ih * xs.w + iw] += go * k[i * kw + j];
                        }
                    }
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// transpose conv2d: the adjoint of a strided conv taking the output grid back
// to the input grid, plus bias.

template <typename T>
Tensor<T> transpose_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    const int cin = ws.n, cout = ws.c, k = ws.h;
    if (ws.h != ws.w) throw ShapeError("transpose_conv2d: kernel must be square");
    check_conv_args("transpose_conv2d", xs, ws, b.size(), cin, cout, stride, pad);
    const int Ho = (xs.h - 1) * stride - 2 * pad + k;
    const int Wo = (xs.w - 1) * stride - 2 * pad + k;
    if (Ho < 1 || Wo < 1) throw ShapeError("transpose_conv2d: non-positive output size");
    if (conv_out(Ho, k, stride, pad) != xs.h || conv_out(Wo, k, stride, pad) != xs.w)
        throw ShapeError("transpose_conv2d: kernel/stride/pad combination is not invertible for this size");

    Tensor<T> y(Shape{xs.n, cout, Ho, Wo});
    const int K = cout * k * k;
    const int P = xs.h * xs.w;
    ConstMapMat<T> wm(w.data(), cin, K);
    RowMat<T> cols(K, P);
    for (int n = 0; n < xs.n; ++n) {
        cols.noalias() = wm.transpose() * ConstMapMat<T>(x.sample(n), cin, P);
        col2im(cols.data(), cout, Ho, Wo, k, k, stride, pad, xs.h, xs.w, y.sample(n));
        for (int c = 0; c < cout; ++c) {
            T* yp = y.plane(n, c);
            for (std::size_t i = 0; i < y.shape().plane(); ++i) yp[i] += b[c];
        }
    }
    return y;
}

template <typename T>
ConvGrads<T> transpose_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride,
                                       int pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    const int cin = ws.n, cout = ws.c, k = ws.h;
    const int Ho = (xs.h - 1) * stride - 2 * pad + k;
    const int Wo = (xs.w - 1) * stride - 2 * pad + k;
    require_same_shape(dy.shape(), Shape{xs.n, cout, Ho, Wo}, "transpose_conv2d_backward dy");

    ConvGrads<T> g{Tensor<T>(xs), Tensor<T>(ws), Tensor<T>(Shape{cout, 1, 1, 1})};
    const int K = cout * k * k;
    const int P = xs.h * xs.w;
    ConstMapMat<T> wm(w.data(), cin, K);
    MapMat<T> dw(g.dw.data(), cin, K);
    RowMat<T> dcols(K, P);
    for (int n = 0; n < xs.n; ++n) {
        im2col(dy.sample(n), cout, Ho, Wo, k, k, stride, pad, xs.h, xs.w, dcols.data());
        ConstMapMat<T> xin(x.sample(n), cin, P);
        dw.noalias() += xin * dcols.transpose();
        MapMat<T>(g.dx.sample(n), cin, P).noalias() = wm * dcols;
        for (int c = 0; c < cout; ++c) {
            const T* dyp = dy.plane(n, c);
            T s = 0;
            for (int i = 0; i < Ho * Wo; ++i) s += dyp[i];
            g.db[c] += s;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// bilinear upsample

namespace {

struct Tap {
    int i0;
    int i1;
    double frac;
};

std::vector<Tap> upsample_taps(int in, int factor) {
    std::vector<Tap> taps(static_cast<std::size_t>(in) * factor);
    for (int d = 0; d < in * factor; ++d) {
        double src = (d + 0.5) / factor - 0.5;
        if (src < 0) src = 0;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = std::min(i0 + 1, in - 1);
        taps[d] = {i0, i1, src - i0};
    }
    return taps;
}

} // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor) {
    if (factor < 1) throw ShapeError("bilinear_upsample: factor must be >= 1, got " + std::to_string(factor));
    if (factor == 1) return x;
    const Shape& xs = x.shape();
    const auto ty = upsample_taps(xs.h, factor);
    const auto tx = upsample_taps(xs.w, factor);
    const int Ho = xs.h * factor, Wo = xs.w * factor;
    Tensor<T> y(Shape{xs.n, xs.c, Ho, Wo});
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            const T* xp = x.plane(n, c);
            T* yp = y.plane(n, c);
            for (int oh = 0; oh < Ho; ++oh) {
                const T ly = static_cast<T>(ty[oh].frac);
                const T* r0 = xp + ty[oh].i0 * xs.w;
                const T* r1 = xp + ty[oh].i1 * xs.w;
                for (int ow = 0; ow < Wo; ++ow) {
                    const T lx = static_cast<T>(tx[ow].frac);
                    const T top = (1 - lx) * r0[tx[ow].i0] + lx * r0[tx[ow].i1];
                    const T bot = (1 - lx) * r1[tx[ow].i0] + lx * r1[tx[ow].i1];
                    yp[oh * Wo + ow] = (1 - ly) * top + ly * bot;
                }
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> bilinear_upsample_backward(const Tensor<T>& dy, const Shape& input_shape, int factor) {
    if (factor < 1) throw ShapeError("bilinear_upsample_backward: factor must be >= 1");
    if (factor == 1) return dy;
    const Shape& xs = input_shape;
    const int Ho = xs.h * factor, Wo = xs.w * factor;
    require_same_shape(dy.shape(), Shape{xs.n, xs.c, Ho, Wo}, "bilinear_upsample_backward dy");
    const auto ty = upsample_taps(xs.h, factor);
    const auto tx = upsample_taps(xs.w, factor);
    Tensor<T> dx(xs);
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            T* dxp = dx.plane(n, c);
            const T* dyp = dy.plane(n, c);
            for (int oh = 0; oh < Ho; ++oh) {
                const T ly = static_cast<T>(ty[oh].frac);
                T* r0 = dxp + ty[oh].i0 * xs.w;
                T* r1 = dxp + ty[oh].i1 * xs.w;
                for (int ow = 0; ow < Wo; ++ow) {
                    const T lx = static_cast<T>(tx[ow].frac);
                    const T g = dyp[oh * Wo + ow];
                    r0[tx[ow].i0] += (1 - ly) * (1 - lx) * g;
                    r0[tx[ow].i1] += (1 - ly) * lx * g;
                    r1[tx[ow].i0] += ly * (1 - lx) * g;
                    r1[tx[ow].i1] += ly * lx * g;
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// pointwise

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : T(0);
    return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    require_same_shape(x.shape(), dy.shape(), "relu_backward");
    Tensor<T> dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0 ? dy[i] : T(0);
    return dx;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        // Split on sign so exp never overflows.
        if (v >= 0) {
            y[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            y[i] = e / (T(1) + e);
        }
    }
    return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy) {
    require_same_shape(y.shape(), dy.shape(), "sigmoid_backward");
    Tensor<T> dx(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (T(1) - y[i]);
    return dx;
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    const int L = x.w();
    const std::size_t rows = x.size() / L;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * L;
        T* yr = y.data() + r * L;
        const T mx = *std::max_element(xr, xr + L);
        T sum = 0;
        for (int i = 0; i < L; ++i) sum += (yr[i] = std::exp(xr[i] - mx));
        for (int i = 0; i < L; ++i) yr[i] /= sum;
    }
    return y;
}

template <typename T>
Tensor<T> softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& dy) {
    require_same_shape(y.shape(), dy.shape(), "softmax_lastdim_backward");
    Tensor<T> dx(y.shape());
    const int L = y.w();
    const std::size_t rows = y.size() / L;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * L;
        const T* gr = dy.data() + r * L;
        T dot = 0;
        for (int i = 0; i < L; ++i) dot += yr[i] * gr[i];
        for (int i = 0; i < L; ++i) dx.data()[r * L + i] = yr[i] * (gr[i] - dot);
    }
    return dx;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> y(a);
    y += b;
    return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
    return y;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const Shape& first = parts[0]->shape();
    int channels = 0;
    for (const Tensor<T>* p : parts) {
        const Shape& s = p->shape();
        if (s.n != first.n) throw ShapeError(dim_msg("concat_channels", "N", s.n, first.n));
        if (s.h != first.h) throw ShapeError(dim_msg("concat_channels", "H", s.h, first.h));
        if (s.w != first.w) throw ShapeError(dim_msg("concat_channels", "W", s.w, first.w));
        channels += s.c;
    }
    Tensor<T> y(Shape{first.n, channels, first.h, first.w});
    for (int n = 0; n < first.n; ++n) {
        T* dst = y.sample(n);
        for (const Tensor<T>* p : parts) {
            dst = std::copy(p->sample(n), p->sample(n) + p->shape().sample(), dst);
        }
    }
    return y;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::span<const int> sizes) {
    const Shape& xs = x.shape();
    int total = 0;
    for (int s : sizes) total += s;
    if (total != xs.c) throw ShapeError(dim_msg("split_channels", "C", xs.c, total));
    std::vector<Tensor<T>> out;
    out.reserve(sizes.size());
    for (int s : sizes) out.emplace_back(Shape{xs.n, s, xs.h, xs.w});
    for (int n = 0; n < xs.n; ++n) {
        const T* src = x.sample(n);
        for (auto& part : out) {
            const std::size_t len = part.shape().sample();
            std::copy(src, src + len, part.sample(n));
            src += len;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      bool training, BatchNormCache<T>* cache) {
    const Shape& xs = x.shape();
    if (gamma.size() != static_cast<std::size_t>(xs.c))
        throw ShapeError(dim_msg("batchnorm2d", "gamma length (C)", static_cast<int>(gamma.size()), xs.c));
    if (beta.size() != static_cast<std::size_t>(xs.c))
        throw ShapeError(dim_msg("batchnorm2d", "beta length (C)", static_cast<int>(beta.size()), xs.c));
    const std::size_t plane = xs.plane();
    const std::size_t m = plane * xs.n;
    Tensor<T> y(xs);
    Tensor<T> xhat(xs);
    std::vector<T> inv_std(xs.c);
    for (int c = 0; c < xs.c; ++c) {
        T mean, var;
        if (training) {
            double s = 0;
            for (int n = 0; n < xs.n; ++n) {
                const T* p = x.plane(n, c);
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
            }
            const double mu = s / m;
            double ss = 0;
            for (int n = 0; n < xs.n; ++n) {
                const T* p = x.plane(n, c);
                for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
            }
            mean = static_cast<T>(mu);
            var = static_cast<T>(ss / m);
            const double unbiased = m > 1 ? ss / (m - 1) : ss;
            state.running_mean[c] =
                static_cast<T>((1 - state.momentum) * state.running_mean[c] + state.momentum * mu);
            state.running_var[c] =
                static_cast<T>((1 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        inv_std[c] = T(1) / std::sqrt(var + static_cast<T>(state.eps));
        for (int n = 0; n < xs.n; ++n) {
            const T* p = x.plane(n, c);
            T* xh = xhat.plane(n, c);
            T* yp = y.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
                xh[i] = (p[i] - mean) * inv_std[c];
                yp[i] = gamma[c] * xh[i] + beta[c];
            }
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
        cache->training = training;
    }
    return y;
}

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma, const Tensor<T>& dy) {
    const Shape& xs = cache.xhat.shape();
    require_same_shape(dy.shape(), xs, "batchnorm2d_backward dy");
    const std::size_t plane = xs.plane();
    const double m = static_cast<double>(plane * xs.n);
    BatchNormGrads<T> g{Tensor<T>(xs), Tensor<T>(Shape{xs.c, 1, 1, 1}), Tensor<T>(Shape{xs.c, 1, 1, 1})};
    for (int c = 0; c < xs.c; ++c) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (int n = 0; n < xs.n; ++n) {
            const T* d = dy.plane(n, c);
            const T* xh = cache.xhat.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
                sum_dy += d[i];
                sum_dy_xhat += d[i] * xh[i];
            }
        }
        g.dgamma[c] = static_cast<T>(sum_dy_xhat);
        g.dbeta[c] = static_cast<T>(sum_dy);
        const T scale = gamma[c] * cache.inv_std[c];
        for (int n = 0; n < xs.n; ++n) {
            const T* d = dy.plane(n, c);
            const T* xh = cache.xhat.plane(n, c);
            T* dx = g.dx.plane(n, c);
            if (cache.training) {
                const T mean_dy = static_cast<T>(sum_dy / m);
                const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / m);
                for (std::size_t i = 0; i < plane; ++i) dx[i] = scale * (d[i] - mean_dy - xh[i] * mean_dy_xhat);
            } else {
                for (std::size_t i = 0; i < plane; ++i) dx[i] = scale * d[i];
            }
        }
    }
    return g;
}

template <typename T>
Tensor<T> stack_batch(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.c != bs.c || as.h != bs.h || as.w != bs.w)
        require_same_shape(Shape{bs.n, as.c, as.h, as.w}, bs, "stack_batch");
    Tensor<T> y(Shape{as.n + bs.n, as.c, as.h, as.w});
    std::copy(a.data(), a.data() + a.size(), y.data());
    std::copy(b.data(), b.data() + b.size(), y.data() + a.size());
    return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> unstack_batch(const Tensor<T>& x, int first) {
    const Shape& xs = x.shape();
    if (first < 1 || first >= xs.n) throw ShapeError("unstack_batch: split point out of range");
    Tensor<T> a(Shape{first, xs.c, xs.h, xs.w});
    Tensor<T> b(Shape{xs.n - first, xs.c, xs.h, xs.w});
    std::copy(x.data(), x.data() + a.size(), a.data());
    std::copy(x.data() + a.size(), x.data() + x.size(), b.data());
    return {std::move(a), std::move(b)};
}

#define HYRET_INSTANTIATE_OPS(T)                                                                                  \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);                   \
    template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);       \
    template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);         \
    template ConvGrads<T> depthwise_conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,   \
                                                    int);                                                        \
    template Tensor<T> transpose_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);         \
    template ConvGrads<T> transpose_conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,   \
                                                    int);                                                        \
    template Tensor<T> bilinear_upsample(const Tensor<T>&, int);                                                 \
    template Tensor<T> bilinear_upsample_backward(const Tensor<T>&, const Shape&, int);                          \
    template Tensor<T> relu(const Tensor<T>&);                                                                   \
    template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                                \
    template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> softmax_lastdim(const Tensor<T>&);                                                        \
    template Tensor<T> softmax_lastdim_backward(const Tensor<T>&, const Tensor<T>&);                             \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                  \
    template Tensor<T> concat_channels(std::span<const Tensor<T>* const>);                                       \
    template std::vector<Tensor<T>> split_channels(const Tensor<T>&, std::span<const int>);                      \
    template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&,     \
                                   bool, BatchNormCache<T>*);                                                    \
    template BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>&, const Tensor<T>&,                  \
                                                    const Tensor<T>&);                                           \
    template Tensor<T> stack_batch(const Tensor<T>&, const Tensor<T>&);                                          \
    template std::pair<Tensor<T>, Tensor<T>> unstack_batch(const Tensor<T>&, int);

HYRET_INSTANTIATE_OPS(float)
HYRET_INSTANTIATE_OPS(double)

} // namespace hyret::ops
