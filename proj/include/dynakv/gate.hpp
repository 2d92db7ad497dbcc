// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dynakv/autodiff.hpp"
#include "dynakv/spectral.hpp"

namespace dynakv::gate {

inline constexpr double kDefaultTau = 0.1;
inline constexpr double kDefaultRampSlope = 5.0;

/// Per-layer, per-stream linear map from a spectral state to cutoff logits.
struct GateParams {
    ad::Var W;  // d×d
    ad::Var b;  // d
    int layer = 0;
    Stream stream = Stream::Key;

    std::size_t dim() const { return b.value().size(); }

    /// W = 0, b_i = slope·i: the expected cutoff starts at the last dimension so a
    /// fresh gate retains (nearly) everything.
    static GateParams initial(std::size_t d, int layer, Stream stream, double slope = kDefaultRampSlope);
};

/// softmax(x̃·W + b), rows are distributions over cutoff indices.
ad::Var cutoff_distribution(const GateParams& params, const ad::Var& spectral_state);

/// m[t, i] = Σ_{j ≥ i} p[t, j]. Column 0 is pinned to exactly 1 and values are
/// clamped into [0, 1]; the gradient is the suffix-sum adjoint.
ad::Var soft_mask(const ad::Var& p);

/// Plain-tensor forward of cutoff_distribution + soft_mask.
Tensor soft_mask_values(const GateParams& params, const Tensor& spectral_state);

/// Binary prefix mask: ones on [0, retained), zeros after.
struct HardMask {
    std::size_t retained = 0;
    std::size_t dim = 0;
    std::vector<double> as_vector() const;
};

/// Counts entries with m_i > tau. Throws ContractError if m increases anywhere by
/// more than 1e-9.
HardMask harden(std::span<const double> m, double tau = kDefaultTau);

double retain_rate(std::span<const double> soft_mask);
double retain_rate(const HardMask& mask);

/// One token's retention in one layer/stream of one batch sequence.
struct RateSample {
    std::size_t batch = 0;
    std::size_t layer = 0;
    Stream stream = Stream::Key;
    std::size_t token = 0;
    double soft = 0.0;
    double hard = 0.0;
};

struct RateSum {
    double soft = 0.0;
    double hard = 0.0;
    std::size_t count = 0;
    double mean_soft() const { return count ? soft / static_cast<double>(count) : 0.0; }
    double mean_hard() const { return count ? hard / static_cast<double>(count) : 0.0; }
};

/// Averages over tokens, layers, streams and batches, with breakdowns for reports.
struct RetainStats {
    RateSum overall;
    std::map<std::size_t, RateSum> per_layer;
    std::map<Stream, RateSum> per_stream;
    std::map<std::size_t, RateSum> per_token;
    std::vector<RateSample> trace;  // empty unless requested
};

/// Deterministic ordered reduction. Throws ContractError on empty input.
RetainStats aggregate_stats(std::span<const RateSample> samples, bool keep_trace = false);

/// CSV columns: token_index,token_text,layer,stream,soft_rate,hard_rate
void write_trace_csv(const std::filesystem::path& path, std::span<const RateSample> trace,
                     std::span<const std::string> token_text);

void save_gate(const std::filesystem::path& dir, const std::string& stem, const GateParams& g);
GateParams load_gate(const std::filesystem::path& dir, const std::string& stem, int layer, Stream stream);

}  // namespace dynakv::gate
