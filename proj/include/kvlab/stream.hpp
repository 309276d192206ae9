// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/num_io.hpp"
#include "kvlab/vec.hpp"

namespace kvlab {

/// One simulation step's pre-projected inputs.
struct StreamStep {
    Vec q;
    Vec k;
    Vec v;

    bool operator==(const StreamStep&) const = default;
};

/// A full synthetic or replayed workload: L prefill triples followed by N
/// decode triples, all of one dimension.
struct Stream {
    std::size_t dim = 0;
    std::uint64_t seed = 0;
    double scale = 1.0;
    std::vector<StreamStep> prefill;
    std::vector<StreamStep> decode;

    std::size_t total_steps() const { return prefill.size() + decode.size(); }

    const StreamStep& step(std::size_t global_index) const {  // 0-based
        return global_index < prefill.size() ? prefill[global_index]
                                             : decode[global_index - prefill.size()];
    }

    bool operator==(const Stream& other) const = default;
};

struct StreamParams {
    std::size_t dim = 64;
    std::size_t prefill_len = 512;
    std::size_t decode_len = 256;
    std::uint64_t seed = 42;
    double scale = 1.0;
    double dup_fraction = 0.2;   // share of keys cloned from an earlier key
    double dup_noise = 1e-3;     // relative perturbation on cloned keys

    void validate() const {
        if (dim == 0 || prefill_len == 0) {
            throw config_error("stream: dim and prefill length must be positive");
        }
        if (!(scale > 0.0)) {
            throw config_error("stream: scale must be > 0");
        }
        if (dup_fraction < 0.0 || dup_fraction > 1.0) {
            throw config_error("stream: duplicate fraction must lie in [0, 1]");
        }
        if (dup_noise < 0.0) {
            throw config_error("stream: duplicate noise must be >= 0");
        }
    }
};

namespace detail {

/// Deterministic Gaussian sampler. mt19937_64 output is pinned by the
/// standard; std::normal_distribution is not, so Box-Muller keeps streams
/// byte-identical across standard libraries.
class GaussianSource {
public:
    explicit GaussianSource(std::uint64_t seed) : m_engine(seed) {}

    double uniform01() {
        // 53-bit mantissa in [0, 1)
        return static_cast<double>(m_engine() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (m_has_spare) {
            m_has_spare = false;
            return m_spare;
        }
        double u1 = uniform01();
        while (u1 == 0.0) {
            u1 = uniform01();
        }
        const double u2 = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.141592653589793238462643383279502884 * u2;
        m_spare = radius * std::sin(angle);
        m_has_spare = true;
        return radius * std::cos(angle);
    }

private:
    std::mt19937_64 m_engine;
    double m_spare = 0.0;
    bool m_has_spare = false;
};

/// Caps every generated vector norm at sqrt(30 sqrt(d)) so that
/// |q.k| / sqrt(d) <= 30 holds for every pair by Cauchy-Schwarz, keeping
/// all scores far inside the exponent guard.
inline void clamp_norm(Vec& x) {
    const double limit = std::sqrt(30.0 * std::sqrt(static_cast<double>(x.size())));
    const double norm = l2_norm(x);
    if (norm > limit) {
        const double s = limit / norm;
        for (double& c : x) {
            c *= s;
        }
    }
}

inline Vec fresh_vector(GaussianSource& rng, std::size_t dim, double scale) {
    Vec x(dim);
    const double sigma = scale / std::sqrt(static_cast<double>(dim));
    for (double& c : x) {
        c = sigma * rng.normal();
    }
    clamp_norm(x);
    return x;
}

}  // namespace detail

/// Deterministic synthetic workload. A configurable fraction of keys is
/// cloned from a uniformly chosen earlier key with small relative noise;
/// without those near-duplicates, random high-dimensional keys almost
/// never clear a 0.8 cosine gate and the merging path would sit idle.
inline Stream generate_stream(const StreamParams& params) {
    params.validate();
    detail::GaussianSource rng(params.seed);
    Stream stream;
    stream.dim = params.dim;
    stream.seed = params.seed;
    stream.scale = params.scale;

    // reserved up front so the key pool can point into the step storage
    stream.prefill.reserve(params.prefill_len);
    stream.decode.reserve(params.decode_len);

    std::vector<const Vec*> key_pool;
    auto make_key = [&]() -> Vec {
        if (!key_pool.empty() && rng.uniform01() < params.dup_fraction) {
            const std::size_t pick =
                static_cast<std::size_t>(rng.uniform01() * static_cast<double>(key_pool.size()));
            Vec key = *key_pool[pick < key_pool.size() ? pick : key_pool.size() - 1];
            for (double& c : key) {
                c *= 1.0 + params.dup_noise * rng.normal();
            }
            detail::clamp_norm(key);
            return key;
        }
        return detail::fresh_vector(rng, params.dim, params.scale);
    };

    const std::size_t total = params.prefill_len + params.decode_len;
    for (std::size_t i = 0; i < total; ++i) {
        StreamStep step;
        step.q = detail::fresh_vector(rng, params.dim, params.scale);
        step.k = make_key();
        step.v = detail::fresh_vector(rng, params.dim, params.scale);
        auto& side = i < params.prefill_len ? stream.prefill : stream.decode;
        side.push_back(std::move(step));
        key_pool.push_back(&side.back().k);
    }
    return stream;
}

namespace detail {

inline std::string fmt_array(const Vec& x) {
    std::string out;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (i != 0) {
            out += ',';
        }
        out += fmt_double(x[i]);
    }
    return out;
}

inline Vec parse_array(const std::string& text, std::size_t line_no) {
    Vec out;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find(',', start);
        if (end == std::string::npos) {
            end = text.size();
        }
        try {
            out.push_back(parse_double(std::string_view(text).substr(start, end - start)));
        } catch (const error& e) {
            throw trace_parse_error(line_no, e.what());
        }
        start = end + 1;
    }
    return out;
}

}  // namespace detail

/// Trace layout: a header line
///   kvlab-trace v1 dim=<d> seed=<seed> scale=<scale> prefill=<L> decode=<N>
/// then one line per step:
///   <1-based step> <prefill|decode> q <c,..> k <c,..> v <c,..>
/// Numbers use shortest round-trip decimals, so save/load is bit-exact.
inline void save_trace(const Stream& stream, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw config_error("cannot open trace file for writing: " + path);
    }
    out << "kvlab-trace v1 dim=" << stream.dim << " seed=" << stream.seed
        << " scale=" << fmt_double(stream.scale) << " prefill=" << stream.prefill.size()
        << " decode=" << stream.decode.size() << '\n';
    std::size_t index = 1;
    for (const auto* side : {&stream.prefill, &stream.decode}) {
        const char* role = side == &stream.prefill ? "prefill" : "decode";
        for (const StreamStep& s : *side) {
            out << index++ << ' ' << role << " q " << detail::fmt_array(s.q) << " k "
                << detail::fmt_array(s.k) << " v " << detail::fmt_array(s.v) << '\n';
        }
    }
    if (!out) {
        throw config_error("failed writing trace file: " + path);
    }
}

inline Stream load_trace(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw config_error("cannot open trace file: " + path);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw trace_parse_error(1, "empty trace file");
    }
    std::istringstream header(line);
    std::string magic, version;
    header >> magic >> version;
    if (magic != "kvlab-trace" || version != "v1") {
        throw trace_parse_error(1, "expected 'kvlab-trace v1' header");
    }
    Stream stream;
    std::size_t prefill_len = 0;
    std::size_t decode_len = 0;
    std::string field;
    while (header >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) {
            throw trace_parse_error(1, "malformed header field '" + field + "'");
        }
        const std::string name = field.substr(0, eq);
        const std::string value = field.substr(eq + 1);
        try {
            if (name == "dim") {
                stream.dim = parse_u64(value);
            } else if (name == "seed") {
                stream.seed = parse_u64(value);
            } else if (name == "scale") {
                stream.scale = parse_double(value);
            } else if (name == "prefill") {
                prefill_len = parse_u64(value);
            } else if (name == "decode") {
                decode_len = parse_u64(value);
            } else {
                throw trace_parse_error(1, "unknown header field '" + name + "'");
            }
        } catch (const trace_parse_error&) {
            throw;
        } catch (const error& e) {
            throw trace_parse_error(1, e.what());
        }
    }
    if (stream.dim == 0) {
        throw trace_parse_error(1, "header is missing a positive dim");
    }

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::istringstream row(line);
        std::size_t index = 0;
        std::string role, tag_q, array_q, tag_k, array_k, tag_v, array_v;
        if (!(row >> index >> role >> tag_q >> array_q >> tag_k >> array_k >> tag_v >> array_v) ||
            tag_q != "q" || tag_k != "k" || tag_v != "v") {
            throw trace_parse_error(line_no, "expected '<step> <role> q <...> k <...> v <...>'");
        }
        if (role != "prefill" && role != "decode") {
            throw trace_parse_error(line_no, "unknown role '" + role + "'");
        }
        StreamStep step;
        step.q = detail::parse_array(array_q, line_no);
        step.k = detail::parse_array(array_k, line_no);
        step.v = detail::parse_array(array_v, line_no);
        for (const Vec* vec : {&step.q, &step.k, &step.v}) {
            if (vec->size() != stream.dim) {
                throw trace_parse_error(line_no, "dimension " + std::to_string(vec->size()) +
                                                     " does not match header dim " +
                                                     std::to_string(stream.dim));
            }
            if (!all_finite(*vec)) {
                throw trace_parse_error(line_no, "non-finite component");
            }
        }
        (role == "prefill" ? stream.prefill : stream.decode).push_back(std::move(step));
    }
    if (stream.prefill.size() != prefill_len || stream.decode.size() != decode_len) {
        throw trace_parse_error(line_no, "step counts do not match header (prefill " +
                                             std::to_string(stream.prefill.size()) + "/" +
                                             std::to_string(prefill_len) + ", decode " +
                                             std::to_string(stream.decode.size()) + "/" +
                                             std::to_string(decode_len) + ")");
    }
    if (stream.prefill.empty()) {
        throw trace_parse_error(line_no, "trace has no prefill steps");
    }
    return stream;
}

}  // namespace kvlab
