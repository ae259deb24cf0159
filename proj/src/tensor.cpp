#include "hyret/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace hyret {

std::string Shape::str() const {
    std::ostringstream os;
    os << "[" << n << "," << c << "," << h << "," << w << "]";
    return os.str();
}

void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
    if (a == b) return;
    std::string dim = a.n != b.n ? "N" : a.c != b.c ? "C" : a.h != b.h ? "H" : "W";
    throw ShapeError(what + ": shape mismatch in " + dim + " (" + a.str() + " vs " + b.str() + ")");
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
    if (!shape.valid()) throw ShapeError("tensor shape components must be >= 1, got " + shape.str());
    data_.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (!shape.valid()) throw ShapeError("tensor shape components must be >= 1, got " + shape.str());
    if (data_.size() != shape.numel())
        throw ShapeError("tensor value count " + std::to_string(data_.size()) + " does not match shape " +
                         shape.str());
}

template <typename T>
void Tensor<T>::fill(T v) {
    std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
    require_same_shape(shape_, other.shape_, "tensor +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    if (shape.numel() != data_.size())
        throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(shape, data_);
}

template class Tensor<float>;
template class Tensor<double>;

} // namespace hyret
