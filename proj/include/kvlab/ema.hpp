// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "kvlab/errors.hpp"

namespace kvlab {

/// Per-entry attention-score predictor state.
///
/// `smoothed` is the exponentially weighted sum S; the bias-corrected
/// estimate is S / (1 - alpha^count). The correction exponent is the
/// number of raw scores this entry has absorbed, not the global step
/// index, so entries appended mid-decode are corrected by their own
/// (short) history length.
///
/// `window` keeps the most recent raw scores (newest last, capacity
/// window_w + 1). It feeds prefill initialization and the sliding-window
/// baseline predictor; the EMA itself never reads it after init.
struct EmaState {
    double smoothed = 0.0;
    std::uint64_t count = 0;
    std::deque<double> window;

    // running aggregates for the cumulative-attention baseline predictor
    double cum_attention = 0.0;
    std::uint64_t cum_steps = 0;

    bool initialized() const { return count > 0; }
};

/// Seeds an EMA from the raw scores observed over the trailing prefill
/// window, oldest first. smoothed = sum_k (1-alpha) * alpha^age * s_k
/// with age = 0 for the newest score.
inline EmaState ema_init_prefill(std::span<const double> window_scores, double alpha) {
    if (window_scores.empty()) {
        throw uninitialized_ema_error("ema_init_prefill: empty score window");
    }
    EmaState state;
    double weight = 1.0 - alpha;
    for (std::size_t i = window_scores.size(); i-- > 0;) {
        state.smoothed += weight * window_scores[i];
        weight *= alpha;
    }
    state.count = window_scores.size();
    return state;
}

/// One decode-step update: smoothed <- alpha*smoothed + (1-alpha)*s.
inline void ema_update(EmaState& state, double raw_score, double alpha) {
    if (!(raw_score > 0.0)) {
        throw non_positive_score_error("ema_update: raw score must be > 0");
    }
    state.smoothed = alpha * state.smoothed + (1.0 - alpha) * raw_score;
    ++state.count;
}

/// Bias-corrected score estimate: smoothed / (1 - alpha^count).
inline double ema_estimate(const EmaState& state, double alpha) {
    if (!state.initialized()) {
        throw uninitialized_ema_error("ema_estimate: state has absorbed no scores");
    }
    return state.smoothed / (1.0 - std::pow(alpha, static_cast<double>(state.count)));
}

/// Appends a raw score to the bounded recent-score window.
inline void push_window_score(EmaState& state, double raw_score, std::size_t window_w) {
    state.window.push_back(raw_score);
    while (state.window.size() > window_w + 1) {
        state.window.pop_front();
    }
}

/// Cumulative-attention baseline: mean of all observed normalized scores.
inline double baseline_estimate_cumulative(std::span<const double> history) {
    if (history.empty()) {
        throw uninitialized_ema_error("baseline_estimate_cumulative: empty history");
    }
    double acc = 0.0;
    for (double v : history) {
        acc += v;
    }
    return acc / static_cast<double>(history.size());
}

/// Sliding-window baseline: mean of the last w raw scores.
inline double baseline_estimate_window(std::span<const double> history, std::size_t w) {
    if (history.empty()) {
        throw uninitialized_ema_error("baseline_estimate_window: empty history");
    }
    const std::size_t n = history.size() < w ? history.size() : w;
    double acc = 0.0;
    for (std::size_t i = history.size() - n; i < history.size(); ++i) {
        acc += history[i];
    }
    return acc / static_cast<double>(n);
}

/// Predictor state for a ZIP-merged entry. The corrected estimate of the
/// result is the vote-weighted mean of the participants' estimates, so
/// p_r * s_r == sum_i p_i * s_i holds exactly; smoothed is back-solved
/// from that estimate at count = max over participants.
inline EmaState merged_ema(std::span<const EmaState> states, std::span<const std::uint64_t> votes,
                           double alpha) {
    if (states.empty() || states.size() != votes.size()) {
        throw config_error("merged_ema: states/votes size mismatch");
    }
    double mass = 0.0;
    double total_votes = 0.0;
    std::uint64_t count = 0;
    EmaState merged;
    for (std::size_t i = 0; i < states.size(); ++i) {
        mass += static_cast<double>(votes[i]) * ema_estimate(states[i], alpha);
        total_votes += static_cast<double>(votes[i]);
        if (states[i].count > count) {
            count = states[i].count;
        }
        merged.cum_attention += states[i].cum_attention;
        if (states[i].cum_steps > merged.cum_steps) {
            merged.cum_steps = states[i].cum_steps;
        }
    }
    const double estimate = mass / total_votes;
    merged.count = count;
    merged.smoothed = estimate * (1.0 - std::pow(alpha, static_cast<double>(count)));
    return merged;
}

inline EmaState merged_ema(const EmaState& state_e, const EmaState& state_c, std::uint64_t p_e,
                           std::uint64_t p_c, double alpha) {
    const EmaState states[] = {state_e, state_c};
    const std::uint64_t votes[] = {p_e, p_c};
    return merged_ema(states, votes, alpha);
}

}  // namespace kvlab
