// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "kvlab/attention.hpp"
#include "kvlab/ema.hpp"
#include "kvlab/merge.hpp"
#include "kvlab/policy.hpp"

namespace kvlab {

/// One executed merge, with everything an audit needs to replay it against
/// a snapshot: participant data (evictees first, retained target last), the
/// scores the merge consumed, and the entry that replaced the group.
struct MergeEvent {
    std::uint64_t id = 0;
    std::size_t target = 0;
    std::vector<std::size_t> absorbed;            // pre-edit indices, ascending
    std::vector<MergeParticipant> participants;   // evictees..., target last
    CacheEntry merged;
    double merged_estimate = 0.0;                 // sum p_i s_i / sum p_i
    bool zip = false;
};

struct CompressionResult {
    std::vector<MergeEvent> merge_events;
    std::vector<std::size_t> hard_evicted;        // pre-edit indices
    std::size_t degenerate_skips = 0;             // zip merges aborted by the guard

    bool any() const { return !merge_events.empty() || !hard_evicted.empty(); }
};

namespace detail {

inline std::vector<std::uint64_t> merged_origin(const KvCache& cache, std::size_t target,
                                                std::span<const std::size_t> absorbed) {
    std::vector<std::uint64_t> out = cache.entry(target).origin;
    for (std::size_t a : absorbed) {
        const auto& src = cache.entry(a).origin;
        out.insert(out.end(), src.begin(), src.end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<double> importance_estimates(const KvCache& cache, const PolicyConfig& cfg) {
    std::vector<double> imp(cache.size(), 0.0);
    if (cfg.kind == PolicyKind::evict_window) {
        return imp;  // recency-only policy never reads importance
    }
    for (std::size_t i = 0; i < cache.size(); ++i) {
        imp[i] = ema_estimate(cache.entry(i).ema, cfg.alpha);
    }
    return imp;
}

/// Builds one merge event for a (target, evictees) group, or returns false
/// when the ZIP solvability guard fires and the group must stay unmerged.
inline bool build_merge_event(const KvCache& cache, const PolicyConfig& cfg, std::size_t target,
                              std::span<const std::size_t> evictees, std::uint64_t id,
                              MergeEvent& out) {
    out.id = id;
    out.target = target;
    out.absorbed.assign(evictees.begin(), evictees.end());
    out.participants.clear();
    out.zip = cfg.kind == PolicyKind::keepkv;
    for (std::size_t e : evictees) {
        const CacheEntry& src = cache.entry(e);
        const double est =
            src.ema.initialized() ? ema_estimate(src.ema, cfg.alpha) : 0.0;
        out.participants.push_back({src.key, src.value, src.votes, est});
    }
    const CacheEntry& tgt = cache.entry(target);
    out.participants.push_back(
        {tgt.key, tgt.value, tgt.votes,
         tgt.ema.initialized() ? ema_estimate(tgt.ema, cfg.alpha) : 0.0});

    if (out.zip) {
        ZipMerged zm;
        try {
            zm = zip_merge(out.participants);
        } catch (const degenerate_scale_error&) {
            return false;
        }
        out.merged.key = std::move(zm.key);
        out.merged.value = std::move(zm.value);
        out.merged.votes = zm.votes;
        out.merged_estimate = zm.score;
        std::vector<EmaState> states;
        std::vector<std::uint64_t> votes;
        for (std::size_t e : evictees) {
            states.push_back(cache.entry(e).ema);
            votes.push_back(cache.entry(e).votes);
        }
        states.push_back(tgt.ema);
        votes.push_back(tgt.votes);
        out.merged.ema = merged_ema(states, votes, cfg.alpha);
    } else {
        std::vector<double> weights;
        if (cfg.kind == PolicyKind::merge_gaussian) {
            weights = convex_weights_gaussian(out.participants, cfg.sigma);
        } else {
            weights = convex_weights_cosine(out.participants);
        }
        ConvexMerged cm = cfg.kind == PolicyKind::merge_cam
                              ? cam_merge(out.participants, weights)
                              : convex_merge(out.participants, weights);
        out.merged.key = std::move(cm.key);
        out.merged.value = std::move(cm.value);
        out.merged.votes = 1;       // baselines erase merging history
        out.merged.ema = tgt.ema;   // merged entry replaces the target in place
        double mass = 0.0;
        double vote_total = 0.0;
        for (const auto& p : out.participants) {
            mass += static_cast<double>(p.votes) * p.score;
            vote_total += static_cast<double>(p.votes);
        }
        out.merged_estimate = vote_total > 0.0 ? mass / vote_total : 0.0;
    }
    out.merged.origin = merged_origin(cache, target, evictees);
    return true;
}

}  // namespace detail

/// Shrinks the cache to `budget` entries with the configured policy:
/// select_eviction picks the retained set, merging policies map evictees to
/// similar retained targets, evictees that share a target merge in one
/// many-to-one shot, unmapped evictees are hard-evicted. A ZIP group whose
/// scalar is unsolvable is kept whole (the cache may stay one entry over
/// budget for that step).
inline CompressionResult compress_to_budget(KvCache& cache, const PolicyConfig& cfg,
                                            std::size_t budget, std::uint64_t& next_event_id) {
    CompressionResult result;
    if (cfg.kind == PolicyKind::full || cache.size() <= budget) {
        return result;
    }
    const std::vector<double> importance = detail::importance_estimates(cache, cfg);
    CompressionPlan plan = select_eviction(cache, importance, cfg, budget);
    if (is_merging_policy(cfg.kind)) {
        select_merge_targets(cache, plan, cfg);
    }

    std::map<std::size_t, std::vector<std::size_t>> groups;  // target -> evictees
    CacheEdit edit;
    for (std::size_t e : plan.evicted) {
        auto it = plan.merge_targets.find(e);
        if (it == plan.merge_targets.end()) {
            edit.hard_evicted.push_back(e);
            result.hard_evicted.push_back(e);
        } else {
            groups[it->second].push_back(e);
        }
    }
    for (auto& [target, evictees] : groups) {
        MergeEvent event;
        if (!detail::build_merge_event(cache, cfg, target, evictees, next_event_id, event)) {
            ++result.degenerate_skips;
            continue;
        }
        ++next_event_id;
        edit.merges.push_back(
            {target, event.absorbed, event.merged, /*erases_votes=*/!event.zip});
        result.merge_events.push_back(std::move(event));
    }
    cache.apply(edit);
    return result;
}

/// Prefill compression. KeepKV reverses the conventional order: first a
/// greedy similarity pass merges every above-threshold cluster (scanning
/// pair indices in order, each cluster collapsing many-to-one into its
/// lowest index), then the eviction stage runs if the cache is still over
/// budget. Baselines compress in the conventional evict-then-merge order.
/// Sink entries are never absorbed but may absorb later duplicates.
inline CompressionResult compress_prefill(KvCache& cache, const PolicyConfig& cfg,
                                          std::size_t budget, std::uint64_t& next_event_id) {
    CompressionResult result;
    if (cfg.kind == PolicyKind::full) {
        return result;
    }
    if (cfg.kind == PolicyKind::keepkv && cache.size() > budget) {
        const std::size_t n = cache.size();
        std::vector<char> absorbed(n, 0);
        CacheEdit edit;
        for (std::size_t i = 0; i < n; ++i) {
            if (absorbed[i]) {
                continue;
            }
            std::vector<std::size_t> cluster;
            for (std::size_t j = std::max(i + 1, cfg.sink_count); j < n; ++j) {
                if (!absorbed[j] && cosine(cache.entry(i).key, cache.entry(j).key) > cfg.threshold) {
                    cluster.push_back(j);
                }
            }
            if (cluster.empty()) {
                continue;
            }
            MergeEvent event;
            if (!detail::build_merge_event(cache, cfg, i, cluster, next_event_id, event)) {
                ++result.degenerate_skips;
                continue;
            }
            ++next_event_id;
            for (std::size_t j : cluster) {
                absorbed[j] = 1;
            }
            edit.merges.push_back({i, event.absorbed, event.merged, /*erases_votes=*/false});
            result.merge_events.push_back(std::move(event));
        }
        cache.apply(edit);
    }
    if (cache.size() > budget) {
        CompressionResult second = compress_to_budget(cache, cfg, budget, next_event_id);
        for (auto& e : second.merge_events) {
            result.merge_events.push_back(std::move(e));
        }
        result.hard_evicted = std::move(second.hard_evicted);
        result.degenerate_skips += second.degenerate_skips;
    }
    return result;
}

}  // namespace kvlab
