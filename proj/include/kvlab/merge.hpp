// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/vec.hpp"

namespace kvlab {

/// One merge participant. A merge set lists the evicted members first and
/// the retained target c last; `score` is the (estimated or true) raw
/// attention score driving the merge weights.
struct MergeParticipant {
    Vec key;
    Vec value;
    std::uint64_t votes = 1;
    double score = 0.0;
};

namespace detail {

inline void validate_participants(std::span<const MergeParticipant> parts,
                                  bool require_positive_scores) {
    if (parts.size() < 2) {
        throw config_error("merge: need at least 2 participants");
    }
    const std::size_t d = parts.front().key.size();
    for (const auto& p : parts) {
        if (p.key.size() != d || p.value.size() != d) {
            throw dimension_error("merge: participant dims disagree");
        }
        if (require_positive_scores && !(p.score > 0.0)) {
            throw non_positive_score_error("merge: participant score must be > 0");
        }
    }
}

}  // namespace detail

/// Convex weights from key cosine similarity to the target (last
/// participant): w_j = exp(cos(k_j, k_c)) / sum_i exp(cos(k_i, k_c)).
inline std::vector<double> convex_weights_cosine(std::span<const MergeParticipant> parts) {
    detail::validate_participants(parts, false);
    const Vec& target_key = parts.back().key;
    std::vector<double> w(parts.size());
    double denom = 0.0;
    for (std::size_t j = 0; j < parts.size(); ++j) {
        w[j] = std::exp(cosine(parts[j].key, target_key));
        denom += w[j];
    }
    for (double& x : w) {
        x /= denom;
    }
    return w;
}

/// Convex weights from a Gaussian kernel on key distance to the target:
/// w_j proportional to exp(-||k_j - k_c||^2 / (2 sigma^2)).
inline std::vector<double> convex_weights_gaussian(std::span<const MergeParticipant> parts,
                                                   double sigma) {
    detail::validate_participants(parts, false);
    if (!(sigma > 0.0)) {
        throw config_error("convex_weights_gaussian: sigma must be > 0");
    }
    const Vec& target_key = parts.back().key;
    std::vector<double> w(parts.size());
    double denom = 0.0;
    for (std::size_t j = 0; j < parts.size(); ++j) {
        const double dist = l2_dist(parts[j].key, target_key);
        w[j] = std::exp(-(dist * dist) / (2.0 * sigma * sigma));
        denom += w[j];
    }
    for (double& x : w) {
        x /= denom;
    }
    return w;
}

struct ConvexMerged {
    Vec key;
    Vec value;
};

/// Plain convex combination of keys and values. The merged entry is
/// vote-oblivious (callers store it with votes = 1); this is the baseline
/// rule whose attention loss the sag audit measures.
inline ConvexMerged convex_merge(std::span<const MergeParticipant> parts,
                                 std::span<const double> weights) {
    detail::validate_participants(parts, false);
    if (weights.size() != parts.size()) {
        throw config_error("convex_merge: weight count mismatch");
    }
    double sum = 0.0;
    for (double w : weights) {
        if (w < 0.0) {
            throw weight_sum_error("convex_merge: negative weight");
        }
        sum += w;
    }
    if (std::fabs(sum - 1.0) > 1e-9) {
        throw weight_sum_error("convex_merge: weights sum to " + std::to_string(sum));
    }
    const std::size_t d = parts.front().key.size();
    ConvexMerged out;
    out.key.assign(d, 0.0);
    out.value.assign(d, 0.0);
    for (std::size_t j = 0; j < parts.size(); ++j) {
        axpy(weights[j], parts[j].key, out.key);
        axpy(weights[j], parts[j].value, out.value);
    }
    return out;
}

/// Value-only merge: the retained target's key is kept verbatim, the value
/// is the convex mix.
inline ConvexMerged cam_merge(std::span<const MergeParticipant> parts,
                              std::span<const double> weights) {
    ConvexMerged out = convex_merge(parts, weights);
    out.key = parts.back().key;
    return out;
}

struct ZipMerged {
    Vec key;
    Vec value;
    std::uint64_t votes = 0;
    double score = 0.0;  // implied merged score: sum_i p_i s_i / sum_i p_i
};

/// Guard below which the ZIP key scalar denominator sum p_i s_i ln(s_i)
/// counts as unsolvable.
inline constexpr double kZipSolvabilityGuard = 1e-12;

/// Many-to-one ZIP merge over the participant set (evictees plus target):
///   v_r = sum p_i s_i v_i / sum p_i s_i
///   k_r = C sum p_i s_i k_i,  C = ln(sum p_i s_i / sum p_i) / sum p_i s_i ln s_i
///   p_r = sum p_i
/// When the scores are the true raw scores under a query q, the merged key
/// reproduces the group's score mass exactly: p_r exp(q.k_r/sqrt(d)) equals
/// sum p_i s_i, which is what makes the same-step output lossless. The
/// pairwise rule is the two-participant case.
inline ZipMerged zip_merge(std::span<const MergeParticipant> parts) {
    detail::validate_participants(parts, true);
    double mass = 0.0;       // sum p_i s_i
    double votes = 0.0;      // sum p_i
    double log_mass = 0.0;   // sum p_i s_i ln s_i
    for (const auto& p : parts) {
        const double ps = static_cast<double>(p.votes) * p.score;
        mass += ps;
        votes += static_cast<double>(p.votes);
        log_mass += ps * std::log(p.score);
    }
    if (std::fabs(log_mass) < kZipSolvabilityGuard) {
        throw degenerate_scale_error("zip_merge: sum p_i s_i ln(s_i) ~ 0, scalar unsolvable");
    }
    const double scale = std::log(mass / votes) / log_mass;
    const std::size_t d = parts.front().key.size();
    ZipMerged out;
    out.key.assign(d, 0.0);
    out.value.assign(d, 0.0);
    for (const auto& p : parts) {
        const double ps = static_cast<double>(p.votes) * p.score;
        axpy(scale * ps, p.key, out.key);
        axpy(ps / mass, p.value, out.value);
    }
    out.votes = 0;
    for (const auto& p : parts) {
        out.votes += p.votes;
    }
    out.score = mass / votes;
    return out;
}

}  // namespace kvlab
