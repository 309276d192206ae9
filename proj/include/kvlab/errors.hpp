// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kvlab {

/// Base class for every error raised by the library.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Vector dimensions disagree (query vs. cache, key vs. value, ...).
struct dimension_error : error {
    using error::error;
};

/// |q.k / sqrt(d)| exceeded the exponent guard; inputs are ill-scaled.
struct exponent_range_error : error {
    using error::error;
};

/// Attention was requested over a cache with no entries.
struct empty_cache_error : error {
    using error::error;
};

/// The eviction budget cannot fit the mandatory retentions (sinks, recents).
struct infeasible_budget_error : error {
    using error::error;
};

/// Cosine similarity is undefined for a zero-norm key.
struct zero_norm_error : error {
    using error::error;
};

/// Convex merge weights do not sum to 1 within tolerance.
struct weight_sum_error : error {
    using error::error;
};

/// The ZIP-Merging scalar is unsolvable (sum p_i*s_i*ln(s_i) ~ 0);
/// the caller must skip the merge and keep the entries.
struct degenerate_scale_error : error {
    using error::error;
};

/// Evicted attention mass is >= 1; the closed-form division is undefined.
struct attention_mass_error : error {
    using error::error;
};

/// An EMA estimate was requested from a state with no absorbed scores.
struct uninitialized_ema_error : error {
    using error::error;
};

/// A raw score fed to the predictor was not strictly positive.
struct non_positive_score_error : error {
    using error::error;
};

/// Invalid experiment or policy configuration.
struct config_error : error {
    using error::error;
};

/// A trace file failed to parse; carries the 1-based offending line.
struct trace_parse_error : error {
    trace_parse_error(std::size_t line, const std::string& what)
        : error("trace line " + std::to_string(line) + ": " + what), line_number(line) {}
    std::size_t line_number;
};

}  // namespace kvlab
