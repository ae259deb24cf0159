#include "hyret/local_block.hpp"

namespace hyret {

template <typename T>
Tensor<T> lfb_forward(const Tensor<T>& x, const LfbParams<T>& p, LfbCache<T>* cache) {
    if (x.c() != p.channels())
        throw ShapeError("lfb: input channels " + std::to_string(x.c()) + " != " + std::to_string(p.channels()));
    Tensor<T> dw = p.depthwise.forward(x);
    Tensor<T> act = ops::relu(dw);
    Tensor<T> y = p.pointwise.forward(act);
    y += x;
    if (cache) {
        cache->x = x;
        cache->depthwise_out = std::move(dw);
        cache->activated = std::move(act);
    }
    return y;
}

template <typename T>
Tensor<T> lfb_backward(LfbParams<T>& p, const LfbCache<T>& cache, const Tensor<T>& dy) {
    Tensor<T> d_act = p.pointwise.backward(cache.activated, dy);
    Tensor<T> d_dw = ops::relu_backward(cache.depthwise_out, d_act);
    Tensor<T> dx = p.depthwise.backward(cache.x, d_dw);
    dx += dy;
    return dx;
}

template Tensor<float> lfb_forward(const Tensor<float>&, const LfbParams<float>&, LfbCache<float>*);
template Tensor<double> lfb_forward(const Tensor<double>&, const LfbParams<double>&, LfbCache<double>*);
template Tensor<float> lfb_backward(LfbParams<float>&, const LfbCache<float>&, const Tensor<float>&);
template Tensor<double> lfb_backward(LfbParams<double>&, const LfbCache<double>&, const Tensor<double>&);

} // namespace hyret
