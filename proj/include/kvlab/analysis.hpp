// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvlab/attention.hpp"
#include "kvlab/compress.hpp"
#include "kvlab/errors.hpp"
#include "kvlab/merge.hpp"
#include "kvlab/vec.hpp"

namespace kvlab {

/// Floor used when normalizing perturbations by the oracle output norm.
inline constexpr double kRelativeErrorFloor = 1e-30;

/// Per-decode-step record comparing a compressing policy against the
/// never-compressed oracle under the same query.
struct StepOutcome {
    std::uint64_t step = 0;  // global 1-based step index (prefill steps count)
    Vec oracle_output;
    Vec compressed_output;
    double perturbation_l2 = 0.0;
    double relative_error = 0.0;
    std::size_t cache_size = 0;   // entries after this step's compression
    std::size_t entry_count = 0;  // entries at attend time
    std::uint64_t vote_sum = 0;
    std::vector<std::uint64_t> events;
    std::string event_type = "none";
};

inline double perturbation_l2(const Vec& oracle, const Vec& compressed) {
    return l2_dist(oracle, compressed);
}

inline double relative_error(const Vec& oracle, const Vec& compressed) {
    return l2_dist(oracle, compressed) / std::max(l2_norm(oracle), kRelativeErrorFloor);
}

/// The never-compressed shadow cache. It only ever appends; its attend
/// output is the ground truth every perturbation metric compares against.
class ShadowOracle {
public:
    explicit ShadowOracle(std::size_t dim) : m_cache(dim) {}

    Vec step(Vec key, Vec value, const Vec& q) {
        m_cache.append(std::move(key), std::move(value));
        return attend(m_cache, q).output;
    }

    const KvCache& cache() const { return m_cache; }

private:
    KvCache m_cache;
};

/// Closed-form output after evicting a set of entries with attention
/// weights A_j and values v_j:  o' = (o - sum A_j v_j) / (1 - sum A_j).
/// Must match a direct attend over the remaining cache.
inline Vec eviction_perturbation_closed_form(const Vec& output,
                                             std::span<const double> evicted_attention,
                                             std::span<const Vec> evicted_values) {
    if (evicted_attention.size() != evicted_values.size()) {
        throw config_error("eviction closed form: attention/value count mismatch");
    }
    double mass = 0.0;
    for (double a : evicted_attention) {
        mass += a;
    }
    if (mass >= 1.0 - 1e-12) {
        throw attention_mass_error("eviction closed form: evicted attention mass " +
                                   std::to_string(mass) + " leaves no retained mass");
    }
    Vec adjusted = output;
    for (std::size_t j = 0; j < evicted_values.size(); ++j) {
        axpy(-evicted_attention[j], evicted_values[j], adjusted);
    }
    const double scale = 1.0 / (1.0 - mass);
    for (double& x : adjusted) {
        x *= scale;
    }
    return adjusted;
}

struct SagAuditResult {
    double merged_attention = 0.0;         // A'_r over the post-merge cache
    double participant_attention_sum = 0.0;  // sum of pre-merge attentions
    bool sag = false;                      // merged_attention < participant sum
};

/// Measures the attention lost by a convex merge: builds the post-merge
/// cache (participants replaced by their convex combination at the target
/// position), attends with the same query, and compares the merged entry's
/// attention against the participants' pre-merge total.
///
/// `merged_votes` is 1 for the vote-oblivious baselines the sag audit
/// targets. Passing the participants' combined vote count instead retains
/// merging history, which is exactly what removes the sag when the keys
/// coincide.
inline SagAuditResult attention_sag_audit(const KvCache& cache,
                                          std::span<const std::size_t> participants,
                                          std::span<const double> weights, const Vec& q,
                                          std::uint64_t merged_votes = 1) {
    if (participants.size() < 2) {
        throw config_error("attention_sag_audit: need at least 2 participants");
    }
    std::vector<MergeParticipant> parts;
    for (std::size_t idx : participants) {
        const CacheEntry& e = cache.entry(idx);
        parts.push_back({e.key, e.value, e.votes, 0.0});
    }
    ConvexMerged merged = convex_merge(parts, weights);

    const AttendResult before = attend(cache, q);
    SagAuditResult result;
    for (std::size_t idx : participants) {
        result.participant_attention_sum += before.attention[idx];
    }

    KvCache after = cache;
    CacheEdit edit;
    const std::size_t target = participants.back();
    CacheEntry replacement;
    replacement.key = std::move(merged.key);
    replacement.value = std::move(merged.value);
    replacement.votes = merged_votes;
    edit.merges.push_back({target,
                           {participants.begin(), participants.end() - 1},
                           std::move(replacement),
                           /*erases_votes=*/false});
    after.apply(edit);

    // locate the merged entry's post-edit index
    std::size_t merged_index = target;
    for (std::size_t idx : participants.first(participants.size() - 1)) {
        if (idx < target) {
            --merged_index;
        }
    }
    const AttendResult post = attend(after, q);
    result.merged_attention = post.attention[merged_index];
    result.sag = result.merged_attention < result.participant_attention_sum;
    return result;
}

/// One evaluation of a merge event at a later step.
struct AuditRecord {
    std::uint64_t event_id = 0;
    std::uint64_t step = 0;
    double theta = 0.0;           // || o(snapshot) - o(snapshot+merge) ||_2
    double theta_relative = 0.0;  // theta / max(||o(snapshot)||, floor)
    double epsilon = 0.0;         // max score-prediction relative error
    double gamma = 0.0;           // max value spread vs participants
    double bound = 0.0;           // 2e(1+e)g/(1-e)^2, valid when epsilon < 1
    bool bound_defined = false;
    bool bound_holds = true;
};

/// Snapshot of one merge event, replayable against future queries.
/// The snapshot is the pre-merge cache; the counterfactual differs from it
/// by exactly this one merge, which is the setting the multi-step bound is
/// stated for. Records exist for steps merge_step+1 .. merge_step+horizon.
struct MergeAudit {
    std::uint64_t event_id = 0;
    std::uint64_t merge_step = 0;
    std::uint64_t horizon = 16;
    KvCache snapshot;
    KvCache merged_snapshot;
    std::vector<std::size_t> participant_indices;  // in snapshot, target last
    std::vector<double> estimates;                 // merge-time score estimates
    CacheEntry merged;
    double merged_estimate = 0.0;

    MergeAudit(const KvCache& pre_merge, const MergeEvent& event, std::uint64_t step,
               std::uint64_t audit_horizon)
        : event_id(event.id),
          merge_step(step),
          horizon(audit_horizon),
          snapshot(pre_merge),
          merged_snapshot(pre_merge),
          merged(event.merged),
          merged_estimate(event.merged_estimate) {
        participant_indices = event.absorbed;
        participant_indices.push_back(event.target);
        for (const auto& p : event.participants) {
            estimates.push_back(p.score);
        }
        CacheEdit edit;
        edit.merges.push_back({event.target, event.absorbed, event.merged, false});
        merged_snapshot.apply(edit);
    }

    bool live_at(std::uint64_t step) const {
        return step > merge_step && step <= merge_step + horizon;
    }
};

/// Evaluates one audited merge at a future step with the true query:
/// theta against the one-merge counterfactual, epsilon over the
/// participants plus the merged entry (the index set the proof uses),
/// gamma as the value spread between participants and every snapshot
/// entry, and the bound when epsilon < 1.
inline AuditRecord merge_perturbation_audit(const MergeAudit& audit, std::uint64_t step, const Vec& q) {
    if (!audit.live_at(step)) {
        throw config_error("merge_perturbation_audit: step " + std::to_string(step) +
                           " outside audit horizon");
    }
    AuditRecord rec;
    rec.event_id = audit.event_id;
    rec.step = step;

    const Vec before = attend(audit.snapshot, q).output;
    const Vec after = attend(audit.merged_snapshot, q).output;
    rec.theta = l2_dist(before, after);
    rec.theta_relative = rec.theta / std::max(l2_norm(before), kRelativeErrorFloor);

    const std::size_t d = audit.snapshot.dim();
    for (std::size_t j = 0; j < audit.participant_indices.size(); ++j) {
        const double s_true =
            raw_score(q, audit.snapshot.entry(audit.participant_indices[j]).key, d);
        rec.epsilon = std::max(rec.epsilon, std::fabs(1.0 - audit.estimates[j] / s_true));
    }
    const double merged_true = raw_score(q, audit.merged.key, d);
    rec.epsilon = std::max(rec.epsilon, std::fabs(1.0 - audit.merged_estimate / merged_true));

    for (std::size_t idx : audit.participant_indices) {
        const Vec& vj = audit.snapshot.entry(idx).value;
        for (const CacheEntry& e : audit.snapshot.entries()) {
            rec.gamma = std::max(rec.gamma, l2_dist(vj, e.value));
        }
    }

    rec.bound_defined = rec.epsilon < 1.0;
    if (rec.bound_defined) {
        rec.bound = 2.0 * rec.epsilon * (1.0 + rec.epsilon) * rec.gamma /
                    ((1.0 - rec.epsilon) * (1.0 - rec.epsilon));
        rec.bound_holds = rec.theta < rec.bound;
    }
    return rec;
}

/// Keeps the live audit set for one simulation, evaluates every due audit
/// in (event id, step) order, and drops snapshots past their horizon.
class AuditManager {
public:
    explicit AuditManager(std::uint64_t horizon) : m_horizon(horizon) {}

    void add(const KvCache& pre_merge, const MergeEvent& event, std::uint64_t step) {
        if (m_horizon == 0) {
            return;
        }
        m_audits.emplace_back(pre_merge, event, step, m_horizon);
    }

    /// Runs every live audit against this step's query, appending to the
    /// per-run record log. Returns the records produced at this step.
    std::vector<AuditRecord> evaluate(std::uint64_t step, const Vec& q) {
        std::vector<AuditRecord> produced;
        for (const MergeAudit& audit : m_audits) {
            if (audit.live_at(step)) {
                produced.push_back(merge_perturbation_audit(audit, step, q));
            }
        }
        std::erase_if(m_audits,
                      [step](const MergeAudit& a) { return step >= a.merge_step + a.horizon; });
        for (const AuditRecord& r : produced) {
            ++m_total_records;
            if (r.bound_defined) {
                ++m_bounded_records;
                if (!r.bound_holds) {
                    ++m_violations;
                }
            }
        }
        return produced;
    }

    std::uint64_t total_records() const { return m_total_records; }
    std::uint64_t bounded_records() const { return m_bounded_records; }
    std::uint64_t violations() const { return m_violations; }
    std::size_t live_audits() const { return m_audits.size(); }

private:
    std::uint64_t m_horizon;
    std::vector<MergeAudit> m_audits;
    std::uint64_t m_total_records = 0;
    std::uint64_t m_bounded_records = 0;
    std::uint64_t m_violations = 0;
};

}  // namespace kvlab
