// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "kvlab/errors.hpp"

namespace kvlab {

/// Dense 64-bit vector. All simulation state (queries, keys, values,
/// outputs) uses this representation; dimensions are validated at the
/// operation boundaries rather than carried in a wrapper type.
using Vec = std::vector<double>;

inline bool all_finite(std::span<const double> x) {
    for (double v : x) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw dimension_error("dot: size mismatch (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline double l2_norm(std::span<const double> a) {
    double acc = 0.0;
    for (double v : a) {
        acc += v * v;
    }
    return std::sqrt(acc);
}

inline double l2_dist(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw dimension_error("l2_dist: size mismatch");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

/// Cosine similarity between two keys. Throws zero_norm_error when either
/// norm vanishes (the similarity gate is undefined there).
inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw zero_norm_error("cosine: zero-norm key");
    }
    return dot(a, b) / (na * nb);
}

inline void axpy(double c, std::span<const double> x, Vec& y) {
    if (x.size() != y.size()) {
        throw dimension_error("axpy: size mismatch");
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] += c * x[i];
    }
}

}  // namespace kvlab
