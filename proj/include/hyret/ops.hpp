#pragma once

// Differentiable kernels over NCHW tensors. Every forward is a pure function of
// its arguments; every backward returns gradients instead of accumulating them.
//
// Weight layouts:
//   conv2d            w [Cout, Cin, kh, kw], b [Cout]
//   depthwise_conv2d  w [C, 1, kh, kw],      b [C]
//   transpose_conv2d  w [Cin, Cout, k, k],   b [Cout]

#include <span>
#include <vector>

#include "hyret/tensor.hpp"

namespace hyret::ops {

template <typename T>
struct ConvGrads {
    Tensor<T> dx;
    Tensor<T> dw;
    Tensor<T> db;
};

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad);
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride, int pad);

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad);
template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride,
                                       int pad);

// Output spatial size is (H - 1) * stride - 2 * pad + k.
template <typename T>
Tensor<T> transpose_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad);
template <typename T>
ConvGrads<T> transpose_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride,
                                       int pad);

// Bilinear resize by an integer factor, align_corners = false.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor);
template <typename T>
Tensor<T> bilinear_upsample_backward(const Tensor<T>& dy, const Shape& input_shape, int factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
// Gradient through relu given the forward *input* x.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
// Gradient through sigmoid given the forward *output* y.
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy);

// Softmax over W (the last dimension).
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax_lastdim_backward(const Tensor<T>& y, const Tensor<T>& dy);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts);
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const Tensor<T>* parts[] = {&a, &b};
    return concat_channels<T>(parts);
}
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::span<const int> sizes);

// Running statistics for batchnorm2d, one entry per channel.
template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(int channels = 1)
        : running_mean(Shape{channels, 1, 1, 1}, T(0)), running_var(Shape{channels, 1, 1, 1}, T(1)) {}
};

template <typename T>
struct BatchNormCache {
    Tensor<T> xhat;
    std::vector<T> inv_std;
    bool training = false;
};

// Training mode normalizes with batch statistics and updates `state`;
// eval mode is the fixed affine map given by the running statistics.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      bool training, BatchNormCache<T>* cache = nullptr);

template <typename T>
struct BatchNormGrads {
    Tensor<T> dx;
    Tensor<T> dgamma;
    Tensor<T> dbeta;
};

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma, const Tensor<T>& dy);

// Stack tensors along N (shapes must agree in C, H, W) and the inverse.
template <typename T>
Tensor<T> stack_batch(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> unstack_batch(const Tensor<T>& x, int first);

} // namespace hyret::ops
