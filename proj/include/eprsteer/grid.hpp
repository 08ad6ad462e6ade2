#pragma once

#include <cmath>
#include <cstddef>

#include "eprsteer/errors.hpp"

namespace eprsteer {

// One histogram axis: `count` cells of width `delta` starting at `origin`
// (low edge of cell 0).  Units are µm for position axes, mm^-1 for momentum.
struct GridSpec {
    double origin = 0.0;
    double delta = 1.0;
    std::size_t count = 0;

    void validate() const {
        require(std::isfinite(origin), ErrorCategory::Input, "grid origin not finite");
        require(std::isfinite(delta) && delta > 0.0, ErrorCategory::Input,
                "grid delta must be positive and finite");
        require(count >= 1, ErrorCategory::Input, "grid needs at least one cell");
    }

    double low_edge(std::size_t i) const { return origin + delta * double(i); }
    double center(std::size_t i) const { return origin + delta * (double(i) + 0.5); }
    double high() const { return origin + delta * double(count); }

    // cell index or -1 when outside [origin, high)
    long index(double x) const {
        double f = (x - origin) / delta;
        if (f < 0.0) return -1;
        long i = long(f);
        return i >= long(count) ? -1 : i;
    }

    // symmetric grid: `count` cells of width `delta` centered on zero
    static GridSpec centered(double delta, std::size_t count) {
        return GridSpec{-0.5 * delta * double(count), delta, count};
    }
};

}  // namespace eprsteer
