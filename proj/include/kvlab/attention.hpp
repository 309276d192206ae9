// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvlab/ema.hpp"
#include "kvlab/errors.hpp"
#include "kvlab/vec.hpp"

namespace kvlab {

/// Largest |q.k / sqrt(d)| accepted by raw_score. Anything outside signals
/// ill-scaled inputs, not a policy failure; exp() would overflow near 709.
inline constexpr double kMaxScaledLogit = 700.0;

/// One stored key/value pair plus its vote count (how many original
/// entries it represents), its score-predictor state, and the original
/// token indices it descends from (provenance, consumed only by audits).
struct CacheEntry {
    Vec key;
    Vec value;
    std::uint64_t votes = 1;
    EmaState ema;
    std::vector<std::uint64_t> origin;
};

/// Edit applied to a cache in one compression: per-index merge
/// replacements, absorbed indices to drop, and hard evictions.
/// Indices refer to the pre-edit entry order.
struct CacheEdit {
    struct MergeGroup {
        std::size_t target = 0;
        std::vector<std::size_t> absorbed;  // does not include target
        CacheEntry merged;
        bool erases_votes = false;  // convex baselines reset votes to 1
    };
    std::vector<MergeGroup> merges;
    std::vector<std::size_t> hard_evicted;
};

/// Ordered collection of cache entries for a single attention head.
///
/// Entry order is stable: appends go to the tail, a merge replaces the
/// retained entry in place, evictions delete in place. The cache tracks
/// how much vote mass it has ever admitted and lost so the bookkeeping
/// invariant (votes == inserted - hard_evicted - erased_by_baselines)
/// stays checkable from outside.
class KvCache {
public:
    explicit KvCache(std::size_t dim) : m_dim(dim) {
        if (dim == 0) {
            throw dimension_error("KvCache: dim must be positive");
        }
    }

    std::size_t dim() const { return m_dim; }
    std::size_t size() const { return m_entries.size(); }
    bool empty() const { return m_entries.empty(); }

    const std::vector<CacheEntry>& entries() const { return m_entries; }
    const CacheEntry& entry(std::size_t i) const { return m_entries.at(i); }
    CacheEntry& entry(std::size_t i) { return m_entries.at(i); }

    std::uint64_t tokens_inserted() const { return m_tokens_inserted; }
    std::uint64_t votes_hard_evicted() const { return m_votes_hard_evicted; }
    std::uint64_t votes_erased() const { return m_votes_erased; }

    std::uint64_t vote_sum() const {
        std::uint64_t acc = 0;
        for (const auto& e : m_entries) {
            acc += e.votes;
        }
        return acc;
    }

    /// Appends a fresh pair at the tail: votes = 1, empty predictor state,
    /// origin = { next token index }.
    std::size_t append(Vec key, Vec value) {
        if (key.size() != m_dim || value.size() != m_dim) {
            throw dimension_error("append: key/value dim " + std::to_string(key.size()) + "/" +
                                  std::to_string(value.size()) + " vs cache dim " +
                                  std::to_string(m_dim));
        }
        CacheEntry e;
        e.key = std::move(key);
        e.value = std::move(value);
        e.origin = {m_tokens_inserted};
        ++m_tokens_inserted;
        m_entries.push_back(std::move(e));
        return m_entries.size() - 1;
    }

    /// Applies one compression edit in a single ordered pass. Merge targets
    /// are replaced in place, absorbed and hard-evicted indices removed.
    void apply(const CacheEdit& edit) {
        const std::size_t n = m_entries.size();
        std::vector<const CacheEdit::MergeGroup*> replace(n, nullptr);
        std::vector<char> drop(n, 0);
        for (const auto& g : edit.merges) {
            check_index(g.target, n);
            replace[g.target] = &g;
            std::uint64_t group_votes = m_entries[g.target].votes;
            for (std::size_t a : g.absorbed) {
                check_index(a, n);
                drop[a] = 1;
                group_votes += m_entries[a].votes;
            }
            if (g.erases_votes) {
                m_votes_erased += group_votes - g.merged.votes;
            }
        }
        for (std::size_t i : edit.hard_evicted) {
            check_index(i, n);
            drop[i] = 1;
            m_votes_hard_evicted += m_entries[i].votes;
        }
        std::vector<CacheEntry> next;
        next.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (replace[i] != nullptr) {
                next.push_back(replace[i]->merged);
            } else if (!drop[i]) {
                next.push_back(std::move(m_entries[i]));
            }
        }
        m_entries = std::move(next);
    }

private:
    static void check_index(std::size_t i, std::size_t n) {
        if (i >= n) {
            throw config_error("CacheEdit index " + std::to_string(i) + " out of range");
        }
    }

    std::size_t m_dim;
    std::vector<CacheEntry> m_entries;
    std::uint64_t m_tokens_inserted = 0;
    std::uint64_t m_votes_hard_evicted = 0;
    std::uint64_t m_votes_erased = 0;
};

/// Raw attention score exp(q.k / sqrt(d)). Strictly positive and finite;
/// throws exponent_range_error when the scaled logit leaves the guard.
inline double raw_score(const Vec& q, const Vec& k, std::size_t d) {
    if (q.size() != d || k.size() != d) {
        throw dimension_error("raw_score: expected dim " + std::to_string(d));
    }
    const double logit = dot(q, k) / std::sqrt(static_cast<double>(d));
    if (!(std::fabs(logit) <= kMaxScaledLogit)) {
        throw exponent_range_error("raw_score: |q.k/sqrt(d)| = " + std::to_string(logit) +
                                   " exceeds exponent guard");
    }
    return std::exp(logit);
}

struct AttendResult {
    Vec output;
    std::vector<double> scores;     // raw per-entry scores s_i
    std::vector<double> attention;  // vote-weighted normalized weights
};

/// Vote-weighted attention over the cache:
///   output = sum_i p_i s_i v_i / sum_i p_i s_i,
///   attention_i = p_i s_i / sum_j p_j s_j.
/// With all votes equal to 1 this is plain softmax attention over raw
/// exponentials.
inline AttendResult attend(const KvCache& cache, const Vec& q) {
    if (cache.empty()) {
        throw empty_cache_error("attend: empty cache");
    }
    if (q.size() != cache.dim()) {
        throw dimension_error("attend: query dim " + std::to_string(q.size()) + " vs cache dim " +
                              std::to_string(cache.dim()));
    }
    const std::size_t n = cache.size();
    AttendResult r;
    r.scores.resize(n);
    r.attention.resize(n);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        r.scores[i] = raw_score(q, cache.entry(i).key, cache.dim());
        denom += static_cast<double>(cache.entry(i).votes) * r.scores[i];
    }
    r.output.assign(cache.dim(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = static_cast<double>(cache.entry(i).votes) * r.scores[i] / denom;
        r.attention[i] = w;
        axpy(w, cache.entry(i).value, r.output);
    }
    return r;
}

}  // namespace kvlab
