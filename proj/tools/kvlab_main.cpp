// SPDX-License-Identifier: Apache-2.0
//
// kvlab: deterministic single-head KV-cache compression experiments.
//
//   kvlab --dim 64 --prefill-len 512 --decode-len 256 --seed 42
//         --policy keepkv --policy merge-cosine --budget-ratio 0.2
//         --report-out report.csv
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kvlab/experiment.hpp"
#include "kvlab/num_io.hpp"

namespace {

std::size_t resolve_threads(std::size_t run_count) {
    std::size_t threads = run_count;
    if (const char* env = std::getenv("KVLAB_THREADS")) {
        try {
            threads = std::min<std::size_t>(threads, kvlab::parse_u64(env));
        } catch (const kvlab::error&) {
            throw kvlab::config_error("KVLAB_THREADS must be a non-negative integer");
        }
    }
    return std::max<std::size_t>(threads, 1);
}

void print_summary(const kvlab::RunSummary& s) {
    std::cout << s.policy << ": decode_steps=" << s.decode_steps
              << " budget_entries=" << s.budget_entries
              << " mean_relative_error=" << kvlab::fmt_double(s.mean_relative_error)
              << " max_relative_error=" << kvlab::fmt_double(s.max_relative_error)
              << " merge_events=" << s.merge_events << " hard_evictions=" << s.hard_evictions
              << " audit_records=" << s.audit_records
              << " audit_violations=" << s.audit_violations
              << " final_cache_size=" << s.final_cache_size << '\n';
    if (s.predictor.samples > 0) {
        std::cout << "  predictor mean |1 - est/actual|: ema="
                  << kvlab::fmt_double(s.predictor.ema)
                  << " window=" << kvlab::fmt_double(s.predictor.window_mean)
                  << " cumulative=" << kvlab::fmt_double(s.predictor.cumulative) << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-head attention simulator with compressible KV cache"};

    kvlab::StreamParams stream;
    std::vector<std::string> policy_names;
    kvlab::PolicyConfig knobs;
    std::uint64_t audit_horizon = 16;
    std::string trace_in, trace_out, report_out;
    std::string format = "csv";

    app.add_option("--dim", stream.dim, "hidden dimension d")->check(CLI::PositiveNumber);
    app.add_option("--prefill-len", stream.prefill_len, "prompt length L")
        ->check(CLI::PositiveNumber);
    app.add_option("--decode-len", stream.decode_len, "decode steps N");
    app.add_option("--seed", stream.seed, "stream seed");
    app.add_option("--scale", stream.scale, "vector magnitude scale");
    app.add_option("--dup-frac", stream.dup_fraction, "near-duplicate key fraction");
    app.add_option("--policy", policy_names,
                   "policy to run (repeatable): full, evict-window, evict-heavy, "
                   "merge-cosine, merge-gaussian, merge-cam, keepkv");
    app.add_option("--budget-ratio", knobs.budget_ratio, "retained entries / L");
    app.add_option("--sink-count", knobs.sink_count, "always-retained leading tokens");
    app.add_option("--threshold", knobs.threshold, "merge gate T on key cosine");
    app.add_option("--alpha", knobs.alpha, "EMA smoothing factor");
    app.add_option("--window", knobs.window, "EMA prefill / window-baseline length");
    app.add_option("--sigma", knobs.sigma, "Gaussian merge kernel width");
    app.add_option("--audit-horizon", audit_horizon, "steps each merge stays audited");
    app.add_option("--trace-in", trace_in, "replay a saved trace instead of generating");
    app.add_option("--trace-out", trace_out, "write the stream as a trace file");
    app.add_option("--report-out", report_out, "report file path");
    app.add_option("--format", format, "report format")
        ->check(CLI::IsMember({"csv", "json"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        kvlab::ExperimentConfig cfg;
        cfg.stream = stream;
        cfg.trace_in = trace_in;
        cfg.trace_out = trace_out;
        cfg.report_path = report_out;
        cfg.format = kvlab::parse_report_format(format);
        cfg.audit_horizon = audit_horizon;
        for (const std::string& name : policy_names) {
            kvlab::PolicyConfig p = knobs;
            p.kind = kvlab::parse_policy_kind(name);
            p.seed = stream.seed;
            cfg.policies.push_back(p);
        }

        if (cfg.policies.empty()) {
            if (!trace_out.empty()) {
                kvlab::resolve_stream(cfg);  // generate or convert, then save
                std::cout << "trace written to " << trace_out << '\n';
                return 0;
            }
            throw kvlab::config_error("nothing to do: pass --policy or --trace-out");
        }

        cfg.max_threads = resolve_threads(cfg.policies.size());
        const auto results = kvlab::run_experiment(cfg);
        for (const auto& run : results) {
            print_summary(run.summary);
        }
        if (!report_out.empty()) {
            std::cout << "report written to " << report_out << '\n';
        }
        return 0;
    } catch (const kvlab::config_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const kvlab::infeasible_budget_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const kvlab::trace_parse_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << '\n';
        return 2;
    }
}
