// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kvlab/attention.hpp"
#include "kvlab/errors.hpp"
#include "kvlab/vec.hpp"

namespace kvlab {

enum class PolicyKind {
    full,           // never compress (oracle twin)
    evict_window,   // sinks + recent window only
    evict_heavy,    // sinks + recents + heavy hitters, hard eviction
    merge_cosine,   // eviction set merged convexly with cosine weights
    merge_gaussian, // eviction set merged convexly with Gaussian-kernel weights
    merge_cam,      // value-only merging, keys kept
    keepkv,         // vote-counted, score-preserving merging
};

inline const char* to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::full: return "full";
        case PolicyKind::evict_window: return "evict-window";
        case PolicyKind::evict_heavy: return "evict-heavy";
        case PolicyKind::merge_cosine: return "merge-cosine";
        case PolicyKind::merge_gaussian: return "merge-gaussian";
        case PolicyKind::merge_cam: return "merge-cam";
        case PolicyKind::keepkv: return "keepkv";
    }
    return "?";
}

inline PolicyKind parse_policy_kind(const std::string& name) {
    for (PolicyKind k : {PolicyKind::full, PolicyKind::evict_window, PolicyKind::evict_heavy,
                         PolicyKind::merge_cosine, PolicyKind::merge_gaussian,
                         PolicyKind::merge_cam, PolicyKind::keepkv}) {
        if (name == to_string(k)) {
            return k;
        }
    }
    throw config_error("unknown policy '" + name + "'");
}

inline bool is_merging_policy(PolicyKind k) {
    return k == PolicyKind::merge_cosine || k == PolicyKind::merge_gaussian ||
           k == PolicyKind::merge_cam || k == PolicyKind::keepkv;
}

/// Selects and parameterizes one compression policy.
struct PolicyConfig {
    PolicyKind kind = PolicyKind::keepkv;
    double budget_ratio = 0.2;       // retained entries / prompt length
    std::size_t sink_count = 4;      // leading tokens pinned in cache
    unsigned recent_ratio = 4;       // recent : heavy split of the non-sink budget
    unsigned heavy_ratio = 1;
    double threshold = 0.8;          // merge gate T on key cosine similarity
    double alpha = 0.9;              // EMA smoothing factor
    std::size_t window = 8;          // prefill EMA / window-baseline length
    double sigma = 1.0;              // Gaussian kernel width
    std::uint64_t seed = 0;

    void validate(std::size_t prefill_len) const {
        if (!(budget_ratio > 0.0) || budget_ratio > 1.0) {
            throw config_error("budget_ratio must lie in (0, 1]");
        }
        if (!(alpha > 0.0) || !(alpha < 1.0)) {
            throw config_error("alpha must lie in (0, 1)");
        }
        if (threshold < -1.0 || threshold > 1.0) {
            throw config_error("threshold must lie in [-1, 1]");
        }
        if (window == 0) {
            throw config_error("window must be positive");
        }
        if (!(sigma > 0.0)) {
            throw config_error("sigma must be > 0");
        }
        if (recent_ratio == 0 || heavy_ratio == 0) {
            throw config_error("recent/heavy ratio parts must be positive");
        }
        if (kind != PolicyKind::full &&
            budget_entries(prefill_len) < sink_count + 1) {
            throw infeasible_budget_error("budget " + std::to_string(budget_entries(prefill_len)) +
                                          " cannot fit " + std::to_string(sink_count) +
                                          " sink tokens plus one entry");
        }
    }

    std::size_t budget_entries(std::size_t prefill_len) const {
        return static_cast<std::size_t>(
            std::ceil(budget_ratio * static_cast<double>(prefill_len)));
    }
};

/// Outcome of the selection stage: which indices stay, which go, and where
/// each evicted index merges (absent mapping = hard eviction).
struct CompressionPlan {
    std::vector<std::size_t> retained;
    std::vector<std::size_t> evicted;
    std::map<std::size_t, std::size_t> merge_targets;  // evicted -> retained

    bool partitions(std::size_t n) const {
        if (retained.size() + evicted.size() != n) {
            return false;
        }
        std::vector<char> seen(n, 0);
        for (std::size_t i : retained) {
            if (i >= n || seen[i]) return false;
            seen[i] = 1;
        }
        for (std::size_t i : evicted) {
            if (i >= n || seen[i]) return false;
            seen[i] = 1;
        }
        return true;
    }
};

/// Picks the retained set: the first sink_count entries, the most recent
/// ceil(recent share of the non-sink budget) entries, and the rest by
/// descending importance (ties to the lower index). evict-window policies
/// give the whole non-sink budget to the recent side.
inline CompressionPlan select_eviction(const KvCache& cache, std::span<const double> importance,
                                       const PolicyConfig& cfg, std::size_t target_size) {
    const std::size_t n = cache.size();
    if (target_size > n) {
        throw config_error("select_eviction: target exceeds entry count");
    }
    if (importance.size() != n) {
        throw config_error("select_eviction: importance not aligned with entries");
    }
    const std::size_t sinks = std::min(cfg.sink_count, n);
    if (target_size < sinks) {
        throw infeasible_budget_error("select_eviction: target " + std::to_string(target_size) +
                                      " below sink count " + std::to_string(sinks));
    }
    const std::size_t flexible = target_size - sinks;
    std::size_t recent_count;
    if (cfg.kind == PolicyKind::evict_window) {
        recent_count = flexible;
    } else {
        const double share = static_cast<double>(cfg.recent_ratio) /
                             static_cast<double>(cfg.recent_ratio + cfg.heavy_ratio);
        recent_count = static_cast<std::size_t>(
            std::ceil(static_cast<double>(flexible) * share));
    }

    std::vector<char> keep(n, 0);
    for (std::size_t i = 0; i < sinks; ++i) {
        keep[i] = 1;
    }
    for (std::size_t taken = 0, i = n; taken < recent_count && i-- > 0;) {
        if (!keep[i]) {
            keep[i] = 1;
            ++taken;
        }
    }
    std::size_t kept = 0;
    for (char c : keep) {
        kept += static_cast<std::size_t>(c);
    }

    // fill the remaining budget with the highest-importance candidates
    std::vector<std::size_t> candidates;
    candidates.reserve(n - kept);
    for (std::size_t i = 0; i < n; ++i) {
        if (!keep[i]) {
            candidates.push_back(i);
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
        if (importance[a] != importance[b]) {
            return importance[a] > importance[b];
        }
        return a < b;
    });
    for (std::size_t j = 0; kept < target_size; ++j, ++kept) {
        keep[candidates[j]] = 1;
    }

    CompressionPlan plan;
    for (std::size_t i = 0; i < n; ++i) {
        (keep[i] ? plan.retained : plan.evicted).push_back(i);
    }
    return plan;
}

/// For each evicted index, gates on the best key cosine similarity among
/// retained entries: above threshold the argmax (lowest index on ties)
/// becomes the merge target, otherwise the entry is hard-evicted. Sink
/// entries are valid targets.
inline void select_merge_targets(const KvCache& cache, CompressionPlan& plan,
                                 const PolicyConfig& cfg) {
    if (!plan.partitions(cache.size())) {
        throw config_error("select_merge_targets: plan does not partition the cache");
    }
    plan.merge_targets.clear();
    for (std::size_t e : plan.evicted) {
        double best = -2.0;
        std::size_t best_index = 0;
        for (std::size_t r : plan.retained) {
            const double c = cosine(cache.entry(e).key, cache.entry(r).key);
            if (c > best) {
                best = c;
                best_index = r;
            }
        }
        if (best > cfg.threshold) {
            plan.merge_targets.emplace(e, best_index);
        }
    }
}

}  // namespace kvlab
