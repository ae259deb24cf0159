#pragma once

#include <cstdint>
#include <vector>

#include "hyret/errors.hpp"

namespace hyret {

// Per-pixel binary labels, [N, H, W]; 0 = unchanged, 1 = changed.
struct ChangeMap {
    int n = 0;
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> labels;

    ChangeMap() = default;
    ChangeMap(int n_, int h_, int w_) : n(n_), h(h_), w(w_), labels(static_cast<std::size_t>(n_) * h_ * w_, 0) {}

    std::size_t size() const { return labels.size(); }
    std::uint8_t& at(int b, int y, int x) { return labels[(static_cast<std::size_t>(b) * h + y) * w + x]; }
    std::uint8_t at(int b, int y, int x) const { return labels[(static_cast<std::size_t>(b) * h + y) * w + x]; }
    std::size_t count_changed() const {
        std::size_t c = 0;
        for (auto v : labels) c += v;
        return c;
    }

    friend bool operator==(const ChangeMap&, const ChangeMap&) = default;
};

} // namespace hyret
