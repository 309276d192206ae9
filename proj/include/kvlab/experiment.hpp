// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "kvlab/report.hpp"
#include "kvlab/simulate.hpp"
#include "kvlab/stream.hpp"

namespace kvlab {

/// Everything one reproducible experiment needs: a stream source, the
/// policies to compare, the audit horizon and the report sink.
struct ExperimentConfig {
    StreamParams stream;
    std::string trace_in;   // replay this trace instead of generating
    std::string trace_out;  // persist the stream for later replay
    std::vector<PolicyConfig> policies;
    std::uint64_t audit_horizon = 16;
    std::string report_path;  // empty: no file, summaries go to the caller
    ReportFormat format = ReportFormat::csv;
    std::size_t max_threads = 1;
};

inline Stream resolve_stream(const ExperimentConfig& cfg) {
    Stream stream = cfg.trace_in.empty() ? generate_stream(cfg.stream) : load_trace(cfg.trace_in);
    if (!cfg.trace_out.empty()) {
        save_trace(stream, cfg.trace_out);
    }
    return stream;
}

/// Runs the configured comparison and writes the report file when a path
/// is set. On a failure after the stream resolved, a marker file is left
/// in place of the report so partial artifacts are never mistaken for
/// results.
inline std::vector<RunResult> run_experiment(const ExperimentConfig& cfg) {
    if (cfg.policies.empty()) {
        throw config_error("experiment: at least one policy is required");
    }
    const Stream stream = resolve_stream(cfg);
    try {
        std::vector<RunResult> results =
            run_comparison(stream, cfg.policies, cfg.audit_horizon, cfg.max_threads);
        if (!cfg.report_path.empty()) {
            std::ofstream out(cfg.report_path, std::ios::binary);
            if (!out) {
                throw config_error("cannot open report file: " + cfg.report_path);
            }
            write_report(out, results, cfg.format);
            if (!out) {
                throw error("failed writing report file: " + cfg.report_path);
            }
        }
        return results;
    } catch (const std::exception& e) {
        if (!cfg.report_path.empty()) {
            std::ofstream out(cfg.report_path, std::ios::binary);
            if (cfg.format == ReportFormat::csv) {
                out << "# FAILED: " << e.what() << '\n';
            } else {
                out << "{\"failed\": " << nlohmann::json(std::string(e.what())).dump() << "}\n";
            }
        }
        throw;
    }
}

}  // namespace kvlab
