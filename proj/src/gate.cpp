// SPDX-License-Identifier: Apache-2.0

#include "dynakv/gate.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "dynakv/error.hpp"
#include "dynakv/linalg.hpp"
#include "dynakv/serialize.hpp"

namespace dynakv::gate {

GateParams GateParams::initial(std::size_t d, int layer, Stream stream, double slope) {
    Tensor b({d});
    for (std::size_t i = 0; i < d; ++i) b[i] = slope * static_cast<double>(i);
    return GateParams{ad::Var::param(Tensor({d, d})), ad::Var::param(std::move(b)), layer, stream};
}

ad::Var cutoff_distribution(const GateParams& params, const ad::Var& spectral_state) {
    if (spectral_state.value().cols() != params.dim()) {
        throw DimensionError("cutoff_distribution: state width " + std::to_string(spectral_state.value().cols()) +
                             " vs gate " + std::to_string(params.dim()));
    }
    return ad::softmax(ad::add_bias(ad::matmul(spectral_state, params.W), params.b));
}

namespace {

void finish_mask(Tensor& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        if (row.empty()) continue;
        row[0] = 1.0;
        for (double& v : row) v = std::clamp(v, 0.0, 1.0);
    }
}

}  // namespace

ad::Var soft_mask(const ad::Var& p) {
    Tensor m = ad::reverse_cumsum_rows(p.value());
    finish_mask(m);
    return ad::make_result(std::move(m), {p}, [](ad::Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < self.grad.rows(); ++r) {
            auto gy = self.grad.row(r);
            auto gx = g.row(r);
            // m[0] is the constant 1, so its gradient does not flow back.
            double acc = 0.0;
            for (std::size_t j = 1; j < gy.size(); ++j) {
                acc += gy[j];
                gx[j] += acc;
            }
        }
    }, "soft_mask");
}

Tensor soft_mask_values(const GateParams& params, const Tensor& spectral_state) {
    Tensor logits = linalg::matmul(spectral_state, params.W.value());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = logits.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += params.b.value()[j];
    }
    Tensor m = ad::reverse_cumsum_rows(ad::softmax_rows(logits));
    finish_mask(m);
    return m;
}

std::vector<double> HardMask::as_vector() const {
    std::vector<double> v(dim, 0.0);
    std::fill_n(v.begin(), std::min(retained, dim), 1.0);
    return v;
}

HardMask harden(std::span<const double> m, double tau) {
    for (std::size_t i = 1; i < m.size(); ++i) {
        if (m[i] > m[i - 1] + 1e-9) {
            throw ContractError("harden: mask increases at index " + std::to_string(i));
        }
    }
    const auto r = static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [tau](double v) { return v > tau; }));
    return HardMask{r, m.size()};
}

double retain_rate(std::span<const double> soft_mask) {
    if (soft_mask.empty()) return 0.0;
    double s = 0.0;
    for (double v : soft_mask) s += v;
    return s / static_cast<double>(soft_mask.size());
}

double retain_rate(const HardMask& mask) {
    return mask.dim ? static_cast<double>(mask.retained) / static_cast<double>(mask.dim) : 0.0;
}

RetainStats aggregate_stats(std::span<const RateSample> samples, bool keep_trace) {
    if (samples.empty()) throw ContractError("aggregate_stats: no samples");
    RetainStats st;
    auto add = [](RateSum& s, const RateSample& x) {
        s.soft += x.soft;
        s.hard += x.hard;
        ++s.count;
    };
    for (const auto& x : samples) {
        add(st.overall, x);
        add(st.per_layer[x.layer], x);
        add(st.per_stream[x.stream], x);
        add(st.per_token[x.token], x);
    }
    if (keep_trace) st.trace.assign(samples.begin(), samples.end());
    return st;
}

namespace {

std::string csv_field(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    return out + "\"";
}

}  // namespace

void write_trace_csv(const std::filesystem::path& path, std::span<const RateSample> trace,
                     std::span<const std::string> token_text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    f << "token_index,token_text,layer,stream,soft_rate,hard_rate\n";
    char buf[64];
    for (const auto& s : trace) {
        const std::string text = s.token < token_text.size() ? token_text[s.token] : std::string();
        f << s.token << ',' << csv_field(text) << ',' << s.layer << ',' << stream_name(s.stream) << ',';
        std::snprintf(buf, sizeof buf, "%.9g,%.9g", s.soft, s.hard);
        f << buf << '\n';
    }
}

void save_gate(const std::filesystem::path& dir, const std::string& stem, const GateParams& g) {
    io::write_dkvt(dir / (stem + ".W.dkvt"), g.W.value());
    io::write_dkvt(dir / (stem + ".b.dkvt"), g.b.value());
}

GateParams load_gate(const std::filesystem::path& dir, const std::string& stem, int layer, Stream stream) {
    GateParams g{ad::Var::param(io::read_dkvt(dir / (stem + ".W.dkvt"))),
                 ad::Var::param(io::read_dkvt(dir / (stem + ".b.dkvt"))), layer, stream};
    const std::size_t d = g.dim();
    if (g.W.shape() != Shape{d, d}) throw IoError("gate " + stem + ": W/b shape mismatch");
    return g;
}

}  // namespace dynakv::gate
