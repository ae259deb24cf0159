#pragma once

#include <string>

#include "hyret/layers.hpp"

namespace hyret {

// Local Feature Block: y = x + pointwise(relu(depthwise3x3(x))).
template <typename T>
struct LfbParams {
    DepthwiseConv2d<T> depthwise;
    Conv2d<T> pointwise;

    LfbParams() = default;
    LfbParams(const std::string& name, int channels)
        : depthwise(name + ".depthwise", channels, 3), pointwise(name + ".pointwise", channels, channels, 1) {}

    int channels() const { return pointwise.out_channels(); }

    // The pointwise conv starts at zero so the block starts as the identity.
    void init(Rng& rng) {
        depthwise.init_he(rng);
        pointwise.init_zero();
    }
    void collect(ParamList<T>& out) {
        depthwise.collect(out);
        pointwise.collect(out);
    }
    void collect_state(StateList<T>& out) {
        depthwise.collect_state(out);
        pointwise.collect_state(out);
    }
};

template <typename T>
struct LfbCache {
    Tensor<T> x;
    Tensor<T> depthwise_out;
    Tensor<T> activated;
};

template <typename T>
Tensor<T> lfb_forward(const Tensor<T>& x, const LfbParams<T>& p, LfbCache<T>* cache = nullptr);

template <typename T>
Tensor<T> lfb_backward(LfbParams<T>& p, const LfbCache<T>& cache, const Tensor<T>& dy);

} // namespace hyret
