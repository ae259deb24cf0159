#pragma once

// Central finite-difference gradient checker.
//
// The op under test is reduced to a scalar objective (usually <r, op(x)> for a
// fixed random r) so the analytic gradient is a single backward pass with
// dy = r. Each checked slot is perturbed in place by +/- eps.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "hyret/random.hpp"
#include "hyret/tensor.hpp"

namespace hyret {

template <typename T>
struct GradSlot {
    std::string name;
    std::span<T> values;
    std::span<const T> analytic;
    // Empty means every element is checked.
    std::vector<std::size_t> indices;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_slot;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

template <typename T>
constexpr double default_grad_eps() {
    return std::is_same_v<T, float> ? 1e-3 : 1e-5;
}

// max over checked entries of |analytic - numeric| / max(1, |numeric|).
template <typename T>
GradCheckReport grad_check(std::string_view op, const std::function<double()>& objective,
                           std::span<GradSlot<T>> slots, double eps = default_grad_eps<T>()) {
    GradCheckReport report;
    for (auto& slot : slots) {
        if (slot.values.size() != slot.analytic.size())
            throw ShapeError("grad_check[" + std::string(op) + "]: analytic gradient size mismatch for " + slot.name);
        std::vector<std::size_t> idx = slot.indices;
        if (idx.empty()) {
            idx.resize(slot.values.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
        }
        for (std::size_t i : idx) {
            const T saved = slot.values[i];
            slot.values[i] = static_cast<T>(saved + eps);
            const double up = objective();
            slot.values[i] = static_cast<T>(saved - eps);
            const double down = objective();
            slot.values[i] = saved;
            // Use the step actually representable in T.
            const double step = static_cast<double>(static_cast<T>(saved + eps)) -
                                static_cast<double>(static_cast<T>(saved - eps));
            const double numeric = (up - down) / step;
            const double analytic = static_cast<double>(slot.analytic[i]);
            if (!std::isfinite(numeric) || !std::isfinite(analytic))
                throw NumericError("grad_check[" + std::string(op) + "]: non-finite gradient in " + slot.name +
                                   " at index " + std::to_string(i));
            const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
            ++report.checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_slot = slot.name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "dot");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

// `count` distinct indices in [0, size), sorted; all of them when count >= size.
inline std::vector<std::size_t> sample_indices(std::size_t size, std::size_t count, Rng& rng) {
    std::vector<std::size_t> all(size);
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (count >= size) return all;
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(count);
    std::sort(all.begin(), all.end());
    return all;
}

} // namespace hyret
