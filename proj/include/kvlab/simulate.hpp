// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <future>
#include <string>
#include <vector>

#include "kvlab/analysis.hpp"
#include "kvlab/attention.hpp"
#include "kvlab/compress.hpp"
#include "kvlab/ema.hpp"
#include "kvlab/policy.hpp"
#include "kvlab/stream.hpp"

namespace kvlab {

/// Ground-truth outputs for the decode phase, shared by every policy run
/// over the same stream.
struct OracleTrace {
    std::vector<Vec> decode_outputs;
};

inline OracleTrace compute_oracle(const Stream& stream) {
    ShadowOracle oracle(stream.dim);
    OracleTrace trace;
    trace.decode_outputs.reserve(stream.decode.size());
    for (const StreamStep& s : stream.prefill) {
        oracle.step(s.k, s.v, s.q);
    }
    for (const StreamStep& s : stream.decode) {
        trace.decode_outputs.push_back(oracle.step(s.k, s.v, s.q));
    }
    return trace;
}

/// Mean next-step prediction error |1 - predicted/actual| per predictor,
/// aggregated over every (decode step, initialized entry) pair.
struct PredictorErrors {
    double ema = 0.0;
    double window_mean = 0.0;
    double cumulative = 0.0;
    std::uint64_t samples = 0;
};

struct RunSummary {
    std::string policy;
    std::size_t budget_entries = 0;
    std::size_t decode_steps = 0;
    double mean_perturbation = 0.0;
    double max_perturbation = 0.0;
    double mean_relative_error = 0.0;
    double max_relative_error = 0.0;
    std::uint64_t merge_events = 0;
    std::uint64_t hard_evictions = 0;
    std::uint64_t degenerate_skips = 0;
    std::uint64_t audit_records = 0;
    std::uint64_t audit_bounded = 0;
    std::uint64_t audit_violations = 0;
    std::uint64_t sag_checks = 0;
    std::uint64_t sag_confirmed = 0;
    PredictorErrors predictor;
    std::size_t final_cache_size = 0;
    std::uint64_t final_vote_sum = 0;
};

struct RunResult {
    PolicyConfig config;
    std::vector<StepOutcome> steps;         // one per decode step
    std::vector<AuditRecord> audit_records; // (event id, step) ordered
    RunSummary summary;
};

namespace detail {

inline void track_scores(KvCache& cache, const AttendResult& ar, std::size_t window_w) {
    for (std::size_t i = 0; i < cache.size(); ++i) {
        EmaState& ema = cache.entry(i).ema;
        push_window_score(ema, ar.scores[i], window_w);
        ema.cum_attention += ar.attention[i];
        ++ema.cum_steps;
    }
}

inline void accumulate_prediction_errors(const KvCache& cache, const AttendResult& ar,
                                         const PolicyConfig& cfg, PredictorErrors& acc) {
    for (std::size_t i = 0; i < cache.size(); ++i) {
        const EmaState& ema = cache.entry(i).ema;
        if (!ema.initialized() || ema.window.empty() || ema.cum_steps == 0) {
            continue;
        }
        const double actual_raw = ar.scores[i];
        const double actual_attn = ar.attention[i];
        const std::vector<double> window(ema.window.begin(), ema.window.end());
        acc.ema += std::fabs(1.0 - ema_estimate(ema, cfg.alpha) / actual_raw);
        acc.window_mean +=
            std::fabs(1.0 - baseline_estimate_window(window, cfg.window) / actual_raw);
        const double cum_pred = ema.cum_attention / static_cast<double>(ema.cum_steps);
        acc.cumulative += std::fabs(1.0 - cum_pred / actual_attn);
        ++acc.samples;
    }
}

inline std::string classify_events(const CompressionResult& result) {
    const bool merged = !result.merge_events.empty();
    const bool evicted = !result.hard_evicted.empty();
    if (merged && evicted) {
        return "merge+evict";
    }
    if (merged) {
        return "merge";
    }
    if (evicted) {
        return "evict";
    }
    return "none";
}

/// Attention-sag spot check at merge time for the convex baselines: replay
/// the event's participants through the sag audit under the current query.
inline void audit_sag_events(const KvCache& pre_compress, const CompressionResult& result,
                             const PolicyConfig& cfg, const Vec& q, RunSummary& summary) {
    for (const MergeEvent& event : result.merge_events) {
        if (event.zip || cfg.kind == PolicyKind::merge_cam) {
            continue;  // sag is a property of full convex combinations
        }
        std::vector<std::size_t> participants = event.absorbed;
        participants.push_back(event.target);
        std::vector<double> weights =
            cfg.kind == PolicyKind::merge_gaussian
                ? convex_weights_gaussian(event.participants, cfg.sigma)
                : convex_weights_cosine(event.participants);
        const SagAuditResult sag = attention_sag_audit(pre_compress, participants, weights, q);
        ++summary.sag_checks;
        if (sag.sag) {
            ++summary.sag_confirmed;
        }
    }
}

}  // namespace detail

/// Runs one policy against a stream: prefill with score tracking, EMA
/// initialization over the trailing window, one prefill compression for
/// budgets below 1, then per decode step append / attend / audit / EMA
/// update / compress-on-overflow, mirroring the asynchronous cache update
/// of autoregressive decoding (compression never alters the step that
/// produced it).
inline RunResult run_policy(const Stream& stream, const PolicyConfig& cfg,
                            const OracleTrace& oracle, std::uint64_t audit_horizon) {
    const std::size_t prefill_len = stream.prefill.size();
    cfg.validate(prefill_len);
    if (oracle.decode_outputs.size() != stream.decode.size()) {
        throw config_error("run_policy: oracle trace does not match stream");
    }
    // budget_ratio == 1 is the uncompressed boundary case: the prompt fits
    // exactly and decode growth is left alone, matching the full policy
    const bool compressing = cfg.kind != PolicyKind::full && cfg.budget_ratio < 1.0;
    const std::size_t budget = compressing ? cfg.budget_entries(prefill_len)
                                           : stream.total_steps() + 1;

    RunResult result;
    result.config = cfg;
    result.summary.policy = to_string(cfg.kind);
    result.summary.budget_entries = compressing ? budget : 0;
    result.summary.decode_steps = stream.decode.size();

    KvCache cache(stream.dim);
    AuditManager audits(audit_horizon);
    std::uint64_t next_event_id = 1;

    // ---- prefill ----
    for (const StreamStep& s : stream.prefill) {
        cache.append(s.k, s.v);
        const AttendResult ar = attend(cache, s.q);
        detail::track_scores(cache, ar, cfg.window);
    }
    for (std::size_t i = 0; i < cache.size(); ++i) {
        EmaState& ema = cache.entry(i).ema;
        const std::vector<double> window(ema.window.begin(), ema.window.end());
        EmaState seeded = ema_init_prefill(window, cfg.alpha);
        seeded.window = ema.window;
        seeded.cum_attention = ema.cum_attention;
        seeded.cum_steps = ema.cum_steps;
        ema = seeded;
    }
    if (compressing && cache.size() > budget) {
        const KvCache snapshot = cache;
        const CompressionResult compressed =
            compress_prefill(cache, cfg, budget, next_event_id);
        result.summary.merge_events += compressed.merge_events.size();
        result.summary.hard_evictions += compressed.hard_evicted.size();
        result.summary.degenerate_skips += compressed.degenerate_skips;
        if (cfg.kind == PolicyKind::keepkv) {
            for (const MergeEvent& event : compressed.merge_events) {
                audits.add(snapshot, event, prefill_len);
            }
        }
        const StreamStep& last = stream.prefill.back();
        detail::audit_sag_events(snapshot, compressed, cfg, last.q, result.summary);
    }

    // ---- decode ----
    for (std::size_t i = 0; i < stream.decode.size(); ++i) {
        const std::uint64_t step = prefill_len + i + 1;
        const StreamStep& s = stream.decode[i];
        cache.append(s.k, s.v);
        const AttendResult ar = attend(cache, s.q);

        for (AuditRecord& rec : audits.evaluate(step, s.q)) {
            result.audit_records.push_back(rec);
        }

        detail::accumulate_prediction_errors(cache, ar, cfg, result.summary.predictor);
        for (std::size_t e = 0; e < cache.size(); ++e) {
            ema_update(cache.entry(e).ema, ar.scores[e], cfg.alpha);
        }
        detail::track_scores(cache, ar, cfg.window);

        StepOutcome outcome;
        outcome.step = step;
        outcome.entry_count = cache.size();
        outcome.oracle_output = oracle.decode_outputs[i];
        outcome.compressed_output = ar.output;
        outcome.perturbation_l2 = perturbation_l2(outcome.oracle_output, ar.output);
        outcome.relative_error = relative_error(outcome.oracle_output, ar.output);

        if (compressing && cache.size() > budget) {
            const KvCache snapshot = cache;
            const CompressionResult compressed =
                compress_to_budget(cache, cfg, budget, next_event_id);
            result.summary.merge_events += compressed.merge_events.size();
            result.summary.hard_evictions += compressed.hard_evicted.size();
            result.summary.degenerate_skips += compressed.degenerate_skips;
            if (cfg.kind == PolicyKind::keepkv) {
                for (const MergeEvent& event : compressed.merge_events) {
                    audits.add(snapshot, event, step);
                }
            }
            detail::audit_sag_events(snapshot, compressed, cfg, s.q, result.summary);
            for (const MergeEvent& event : compressed.merge_events) {
                outcome.events.push_back(event.id);
            }
            outcome.event_type = detail::classify_events(compressed);
        }
        outcome.cache_size = cache.size();
        outcome.vote_sum = cache.vote_sum();
        result.steps.push_back(std::move(outcome));
    }

    // ---- summary ----
    RunSummary& sum = result.summary;
    for (const StepOutcome& o : result.steps) {
        sum.mean_perturbation += o.perturbation_l2;
        sum.max_perturbation = std::max(sum.max_perturbation, o.perturbation_l2);
        sum.mean_relative_error += o.relative_error;
        sum.max_relative_error = std::max(sum.max_relative_error, o.relative_error);
    }
    if (!result.steps.empty()) {
        sum.mean_perturbation /= static_cast<double>(result.steps.size());
        sum.mean_relative_error /= static_cast<double>(result.steps.size());
    }
    if (sum.predictor.samples > 0) {
        sum.predictor.ema /= static_cast<double>(sum.predictor.samples);
        sum.predictor.window_mean /= static_cast<double>(sum.predictor.samples);
        sum.predictor.cumulative /= static_cast<double>(sum.predictor.samples);
    }
    sum.audit_records = audits.total_records();
    sum.audit_bounded = audits.bounded_records();
    sum.audit_violations = audits.violations();
    sum.final_cache_size = cache.size();
    sum.final_vote_sum = cache.vote_sum();
    return result;
}

/// Runs every policy against the same stream and shared oracle. Runs are
/// independent; up to max_threads execute concurrently and results keep
/// the configured policy order either way.
inline std::vector<RunResult> run_comparison(const Stream& stream,
                                             std::span<const PolicyConfig> policies,
                                             std::uint64_t audit_horizon,
                                             std::size_t max_threads = 1) {
    if (policies.empty()) {
        throw config_error("run_comparison: need at least one policy");
    }
    const OracleTrace oracle = compute_oracle(stream);
    std::vector<RunResult> results(policies.size());
    if (max_threads <= 1 || policies.size() == 1) {
        for (std::size_t i = 0; i < policies.size(); ++i) {
            results[i] = run_policy(stream, policies[i], oracle, audit_horizon);
        }
        return results;
    }
    std::size_t next = 0;
    while (next < policies.size()) {
        const std::size_t batch = std::min(max_threads, policies.size() - next);
        std::vector<std::future<RunResult>> futures;
        futures.reserve(batch);
        for (std::size_t j = 0; j < batch; ++j) {
            const std::size_t idx = next + j;
            futures.push_back(std::async(std::launch::async, [&stream, &policies, &oracle,
                                                              audit_horizon, idx] {
                return run_policy(stream, policies[idx], oracle, audit_horizon);
            }));
        }
        for (std::size_t j = 0; j < batch; ++j) {
            results[next + j] = futures[j].get();
        }
        next += batch;
    }
    return results;
}

}  // namespace kvlab
