#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hyret/errors.hpp"

namespace hyret {

struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::size_t numel() const { return static_cast<std::size_t>(n) * c * h * w; }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    std::size_t sample() const { return static_cast<std::size_t>(c) * h * w; }
    bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
    std::string str() const;

    friend bool operator==(const Shape&, const Shape&) = default;
};

// Dense NCHW array. Value semantics; copies are deep.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() : shape_{0, 0, 0, 0} {}
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::vector<T> values);

    const Shape& shape() const { return shape_; }
    int n() const { return shape_.n; }
    int c() const { return shape_.c; }
    int h() const { return shape_.h; }
    int w() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    T* sample(int n) { return data_.data() + n * shape_.sample(); }
    const T* sample(int n) const { return data_.data() + n * shape_.sample(); }
    T* plane(int n, int c) { return sample(n) + c * shape_.plane(); }
    const T* plane(int n, int c) const { return sample(n) + c * shape_.plane(); }

    T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    const T& at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    void fill(T v);
    bool all_finite() const;
    Tensor& operator+=(const Tensor& other);

    // Same data viewed with a new shape of equal element count.
    Tensor reshaped(Shape shape) const;

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::size_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    Shape shape_;
    std::vector<T> data_;
};

// Trainable tensor with its gradient accumulator.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string name, Shape shape) : name(std::move(name)), value(shape), grad(shape) {}

    void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

// Named pointer into model state, used for checkpointing (params + buffers).
template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
using StateList = std::vector<NamedTensor<T>>;

void require_same_shape(const Shape& a, const Shape& b, const std::string& what);

extern template class Tensor<float>;
extern template class Tensor<double>;

} // namespace hyret
