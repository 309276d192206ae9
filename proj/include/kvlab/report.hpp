// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvlab/num_io.hpp"
#include "kvlab/simulate.hpp"

namespace kvlab {

enum class ReportFormat { csv, json };

inline ReportFormat parse_report_format(const std::string& name) {
    if (name == "csv") {
        return ReportFormat::csv;
    }
    if (name == "json") {
        return ReportFormat::json;
    }
    throw config_error("unknown report format '" + name + "' (expected csv or json)");
}

namespace detail {

inline double checked(double v, const char* field) {
    if (!std::isfinite(v)) {
        throw error(std::string("report: non-finite value in field ") + field);
    }
    return v;
}

/// Audit fields displayed on a step row: the bounded record with the worst
/// margin (largest theta/bound), falling back to the largest-epsilon record
/// when no bound was defined this step. bound_holds is the conjunction over
/// every bounded record of the step.
struct StepAuditView {
    bool any = false;
    bool any_bounded = false;
    double epsilon = 0.0;
    double gamma = 0.0;
    double bound = 0.0;
    bool all_bounds_hold = true;
};

inline StepAuditView summarize_step_audits(std::span<const AuditRecord> records) {
    StepAuditView view;
    double worst_margin = -1.0;
    const AuditRecord* shown = nullptr;
    for (const AuditRecord& r : records) {
        view.any = true;
        if (r.bound_defined) {
            view.any_bounded = true;
            view.all_bounds_hold = view.all_bounds_hold && r.bound_holds;
            const double margin = r.bound > 0.0 ? r.theta / r.bound : 0.0;
            if (margin > worst_margin) {
                worst_margin = margin;
                shown = &r;
            }
        }
    }
    if (shown == nullptr) {
        for (const AuditRecord& r : records) {
            if (shown == nullptr || r.epsilon > shown->epsilon) {
                shown = &r;
            }
        }
    }
    if (shown != nullptr) {
        view.epsilon = shown->epsilon;
        view.gamma = shown->gamma;
        view.bound = shown->bound_defined ? shown->bound : 0.0;
    }
    return view;
}

inline std::map<std::uint64_t, std::vector<AuditRecord>> records_by_step(
    std::span<const AuditRecord> records) {
    std::map<std::uint64_t, std::vector<AuditRecord>> by_step;
    for (const AuditRecord& r : records) {
        by_step[r.step].push_back(r);
    }
    return by_step;
}

inline void write_summary_line(std::ostream& out, const RunSummary& s) {
    out << "# summary policy=" << s.policy << " budget_entries=" << s.budget_entries
        << " decode_steps=" << s.decode_steps
        << " mean_perturbation_l2=" << fmt_double(checked(s.mean_perturbation, "summary"))
        << " max_perturbation_l2=" << fmt_double(checked(s.max_perturbation, "summary"))
        << " mean_relative_error=" << fmt_double(checked(s.mean_relative_error, "summary"))
        << " max_relative_error=" << fmt_double(checked(s.max_relative_error, "summary"))
        << " merge_events=" << s.merge_events << " hard_evictions=" << s.hard_evictions
        << " degenerate_skips=" << s.degenerate_skips << " audit_records=" << s.audit_records
        << " audit_bounded=" << s.audit_bounded << " audit_violations=" << s.audit_violations
        << " sag_checks=" << s.sag_checks << " sag_confirmed=" << s.sag_confirmed
        << " predictor_samples=" << s.predictor.samples
        << " predictor_ema_err=" << fmt_double(checked(s.predictor.ema, "summary"))
        << " predictor_window_err=" << fmt_double(checked(s.predictor.window_mean, "summary"))
        << " predictor_cumulative_err=" << fmt_double(checked(s.predictor.cumulative, "summary"))
        << " final_cache_size=" << s.final_cache_size << " final_vote_sum=" << s.final_vote_sum
        << '\n';
}

}  // namespace detail

/// Per-step CSV rows (fixed column set) followed by one '#'-prefixed
/// summary line per policy. Every float is written as its shortest
/// round-trip decimal, so identical runs produce identical bytes.
inline void write_report_csv(std::ostream& out, std::span<const RunResult> results) {
    out << "step,policy,cache_size,entry_count,vote_sum,perturbation_l2,relative_error,"
           "epsilon,gamma,bound,bound_holds,event_type\n";
    for (const RunResult& run : results) {
        const auto by_step = detail::records_by_step(run.audit_records);
        for (const StepOutcome& o : run.steps) {
            out << o.step << ',' << run.summary.policy << ',' << o.cache_size << ','
                << o.entry_count << ',' << o.vote_sum << ','
                << fmt_double(detail::checked(o.perturbation_l2, "perturbation_l2")) << ','
                << fmt_double(detail::checked(o.relative_error, "relative_error")) << ',';
            const auto it = by_step.find(o.step);
            if (it != by_step.end()) {
                const auto view = detail::summarize_step_audits(it->second);
                out << fmt_double(detail::checked(view.epsilon, "epsilon")) << ','
                    << fmt_double(detail::checked(view.gamma, "gamma")) << ',';
                if (view.any_bounded) {
                    out << fmt_double(detail::checked(view.bound, "bound")) << ','
                        << (view.all_bounds_hold ? "true" : "false") << ',';
                } else {
                    out << ",,";
                }
            } else {
                out << ",,,,";
            }
            out << o.event_type << '\n';
        }
    }
    for (const RunResult& run : results) {
        detail::write_summary_line(out, run.summary);
    }
}

/// JSON mirror of the CSV schema: a steps array with the same fields plus
/// a summary object per policy.
inline void write_report_json(std::ostream& out, std::span<const RunResult> results) {
    nlohmann::ordered_json doc;
    doc["steps"] = nlohmann::ordered_json::array();
    for (const RunResult& run : results) {
        const auto by_step = detail::records_by_step(run.audit_records);
        for (const StepOutcome& o : run.steps) {
            nlohmann::ordered_json row;
            row["step"] = o.step;
            row["policy"] = run.summary.policy;
            row["cache_size"] = o.cache_size;
            row["entry_count"] = o.entry_count;
            row["vote_sum"] = o.vote_sum;
            row["perturbation_l2"] = detail::checked(o.perturbation_l2, "perturbation_l2");
            row["relative_error"] = detail::checked(o.relative_error, "relative_error");
            const auto it = by_step.find(o.step);
            if (it != by_step.end()) {
                const auto view = detail::summarize_step_audits(it->second);
                row["epsilon"] = detail::checked(view.epsilon, "epsilon");
                row["gamma"] = detail::checked(view.gamma, "gamma");
                if (view.any_bounded) {
                    row["bound"] = detail::checked(view.bound, "bound");
                    row["bound_holds"] = view.all_bounds_hold;
                } else {
                    row["bound"] = nullptr;
                    row["bound_holds"] = nullptr;
                }
            } else {
                row["epsilon"] = nullptr;
                row["gamma"] = nullptr;
                row["bound"] = nullptr;
                row["bound_holds"] = nullptr;
            }
            row["event_type"] = o.event_type;
            doc["steps"].push_back(std::move(row));
        }
    }
    doc["summaries"] = nlohmann::ordered_json::array();
    for (const RunResult& run : results) {
        const RunSummary& s = run.summary;
        nlohmann::ordered_json sum;
        sum["policy"] = s.policy;
        sum["budget_entries"] = s.budget_entries;
        sum["decode_steps"] = s.decode_steps;
        sum["mean_perturbation_l2"] = detail::checked(s.mean_perturbation, "summary");
        sum["max_perturbation_l2"] = detail::checked(s.max_perturbation, "summary");
        sum["mean_relative_error"] = detail::checked(s.mean_relative_error, "summary");
        sum["max_relative_error"] = detail::checked(s.max_relative_error, "summary");
        sum["merge_events"] = s.merge_events;
        sum["hard_evictions"] = s.hard_evictions;
        sum["degenerate_skips"] = s.degenerate_skips;
        sum["audit_records"] = s.audit_records;
        sum["audit_bounded"] = s.audit_bounded;
        sum["audit_violations"] = s.audit_violations;
        sum["sag_checks"] = s.sag_checks;
        sum["sag_confirmed"] = s.sag_confirmed;
        sum["predictor_samples"] = s.predictor.samples;
        sum["predictor_ema_err"] = detail::checked(s.predictor.ema, "summary");
        sum["predictor_window_err"] = detail::checked(s.predictor.window_mean, "summary");
        sum["predictor_cumulative_err"] = detail::checked(s.predictor.cumulative, "summary");
        sum["final_cache_size"] = s.final_cache_size;
        sum["final_vote_sum"] = s.final_vote_sum;
        doc["summaries"].push_back(std::move(sum));
    }
    out << doc.dump(2) << '\n';
}

inline void write_report(std::ostream& out, std::span<const RunResult> results,
                         ReportFormat format) {
    if (format == ReportFormat::csv) {
        write_report_csv(out, results);
    } else {
        write_report_json(out, results);
    }
}

}  // namespace kvlab
