#pragma once

// Parameter-owning wrappers around the pure kernels in ops.hpp. Forward is
// const; backward takes the forward input explicitly and accumulates into the
// parameter gradients.

#include <cmath>
#include <string>

#include "hyret/ops.hpp"
#include "hyret/random.hpp"

namespace hyret {

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    // pad < 0 selects "same" padding for stride 1.
    Conv2d(const std::string& name, int in, int out, int kernel, int stride = 1, int pad = -1)
        : weight(name + ".weight", Shape{out, in, kernel, kernel}),
          bias(name + ".bias", Shape{out, 1, 1, 1}),
          stride_(stride),
          pad_(pad < 0 ? kernel / 2 : pad) {}

    Tensor<T> forward(const Tensor<T>& x) const { return ops::conv2d(x, weight.value, bias.value, stride_, pad_); }

    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
        auto g = ops::conv2d_backward(x, weight.value, dy, stride_, pad_);
        weight.grad += g.dw;
        bias.grad += g.db;
        return std::move(g.dx);
    }

    int in_channels() const { return weight.value.c(); }
    int out_channels() const { return weight.value.n(); }
    int fan_in() const { return weight.value.c() * weight.value.h() * weight.value.w(); }

    // He-uniform weights, small uniform bias.
    void init_he(Rng& rng) {
        const double bound = std::sqrt(6.0 / fan_in());
        fill_uniform(weight.value, rng, -bound, bound);
        const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in()));
        fill_uniform(bias.value, rng, -bb, bb);
    }
    void init_zero() {
        weight.value.fill(T(0));
        bias.value.fill(T(0));
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
    void collect_state(StateList<T>& out) {
        out.push_back({weight.name, &weight.value});
        out.push_back({bias.name, &bias.value});
    }

    Param<T> weight;
    Param<T> bias;

private:
    int stride_ = 1;
    int pad_ = 0;
};

template <typename T>
class DepthwiseConv2d {
public:
    DepthwiseConv2d() = default;
    DepthwiseConv2d(const std::string& name, int channels, int kernel)
        : weight(name + ".weight", Shape{channels, 1, kernel, kernel}),
          bias(name + ".bias", Shape{channels, 1, 1, 1}),
          pad_(kernel / 2) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        return ops::depthwise_conv2d(x, weight.value, bias.value, 1, pad_);
    }

    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
        auto g = ops::depthwise_conv2d_backward(x, weight.value, dy, 1, pad_);
        weight.grad += g.dw;
        bias.grad += g.db;
        return std::move(g.dx);
    }

    void init_he(Rng& rng) {
        const int fan = weight.value.h() * weight.value.w();
        const double bound = std::sqrt(6.0 / fan);
        fill_uniform(weight.value, rng, -bound, bound);
        bias.value.fill(T(0));
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
    void collect_state(StateList<T>& out) {
        out.push_back({weight.name, &weight.value});
        out.push_back({bias.name, &bias.value});
    }

    Param<T> weight;
    Param<T> bias;

private:
    int pad_ = 1;
};

// Stride-2 upsampling transpose convolution; kernel 2 (pad 0) or 4 (pad 1).
template <typename T>
class TransposeConv2d {
public:
    TransposeConv2d() = default;
    TransposeConv2d(const std::string& name, int in, int out, int kernel)
        : weight(name + ".weight", Shape{in, out, kernel, kernel}),
          bias(name + ".bias", Shape{out, 1, 1, 1}),
          pad_((kernel - 2) / 2) {
        if (kernel != 2 && kernel != 4)
            throw ShapeError("TransposeConv2d: kernel must be 2 or 4, got " + std::to_string(kernel));
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return ops::transpose_conv2d(x, weight.value, bias.value, 2, pad_);
    }

    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
        auto g = ops::transpose_conv2d_backward(x, weight.value, dy, 2, pad_);
        weight.grad += g.dw;
        bias.grad += g.db;
        return std::move(g.dx);
    }

    void init_he(Rng& rng) {
        // Each output pixel receives in * (k/2)^2 taps.
        const int k = weight.value.h();
        const double fan = weight.value.n() * (k / 2.0) * (k / 2.0);
        const double bound = std::sqrt(6.0 / fan);
        fill_uniform(weight.value, rng, -bound, bound);
        bias.value.fill(T(0));
    }

    void collect(ParamList<T>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
    void collect_state(StateList<T>& out) {
        out.push_back({weight.name, &weight.value});
        out.push_back({bias.name, &bias.value});
    }

    Param<T> weight;
    Param<T> bias;

private:
    int pad_ = 0;
};

template <typename T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    BatchNorm2d(const std::string& name, int channels)
        : gamma(name + ".gamma", Shape{channels, 1, 1, 1}),
          beta(name + ".beta", Shape{channels, 1, 1, 1}),
          state(channels),
          name_(name) {
        gamma.value.fill(T(1));
    }

    Tensor<T> forward(const Tensor<T>& x, bool training, ops::BatchNormCache<T>* cache) {
        return ops::batchnorm2d(x, gamma.value, beta.value, state, training, cache);
    }

    Tensor<T> backward(const ops::BatchNormCache<T>& cache, const Tensor<T>& dy) {
        auto g = ops::batchnorm2d_backward(cache, gamma.value, dy);
        gamma.grad += g.dgamma;
        beta.grad += g.dbeta;
        return std::move(g.dx);
    }

    void collect(ParamList<T>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
    void collect_state(StateList<T>& out) {
        out.push_back({gamma.name, &gamma.value});
        out.push_back({beta.name, &beta.value});
        out.push_back({name_ + ".running_mean", &state.running_mean});
        out.push_back({name_ + ".running_var", &state.running_var});
    }

    Param<T> gamma;
    Param<T> beta;
    ops::BatchNormState<T> state;

private:
    std::string name_;
};

} // namespace hyret
