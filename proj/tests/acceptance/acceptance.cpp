// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if
// any criterion fails. Usage: dynakv_acceptance <data_dir> <work_dir> [ids...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../support/fixtures.hpp"
#include "../support/op_cases.hpp"
#include "dynakv/eviction.hpp"
#include "dynakv/harness.hpp"
#include "dynakv/linalg.hpp"
#include "dynakv/serialize.hpp"
#include "dynakv/spectral.hpp"

using namespace dynakv;
namespace fs = std::filesystem;
namespace sp = dynakv::spectral;
using nlohmann::json;

namespace {

struct Outcome {
    enum Kind { Pass, Fail, Warn } kind = Pass;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double limit_s;
    std::function<Outcome()> run;
};

fs::path g_data, g_work;

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
    double worst = 0.0;
    std::string worst_name;
    std::size_t runs = 0, zero = 0;
    for (const auto& op : testing::op_cases()) {
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto r = op.run(seed);
            ++runs;
            if (!(r.analytic_norm > 0.0)) ++zero;
            if (!(r.rel_err <= worst)) {
                worst = r.rel_err;
                worst_name = op.name;
            }
        }
    }
    const bool ok = zero == 0 && worst <= 1e-4;
    return {ok ? Outcome::Pass : Outcome::Fail,
            std::to_string(runs) + " op/seed runs, worst rel err " + fmt("%.2e", worst) + " (" + worst_name + ")" +
                (zero ? ", " + std::to_string(zero) + " with zero gradient" : "")};
}

// ---------------------------------------------------------------- 2

Outcome mask_laws() {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<std::size_t> dim(1, 32);
    std::uniform_real_distribution<double> scale(0.0, 30.0), tau_d(0.01, 0.99);
    std::size_t violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t d = dim(rng);
        auto g = gate::GateParams::initial(d, 0, Stream::Key);
        const double s = scale(rng);
        g.W.mutable_value() = testing::random_tensor({d, d}, rng, -s, s);
        g.b.mutable_value() = testing::random_tensor({d}, rng, -s, s);
        const Tensor m = gate::soft_mask_values(g, testing::random_tensor({1, d}, rng, -3.0, 3.0));
        const auto row = m.row(0);
        if (row[0] != 1.0) ++violations;
        for (std::size_t i = 0; i < d; ++i) {
            if (row[i] < 0.0 || row[i] > 1.0) ++violations;
            if (i && row[i] > row[i - 1]) ++violations;
        }
        const auto h = gate::harden(row, tau_d(rng));
        const auto hv = h.as_vector();
        for (std::size_t i = 0; i < d; ++i)
            if (hv[i] != (i < h.retained ? 1.0 : 0.0)) ++violations;
    }

    // Saturated gates: the cutoff is certain, so the soft mask is already binary.
    double mask_gap = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = dim(rng);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(0, d - 1)(rng);
        auto g = gate::GateParams::initial(d, 0, Stream::Value);
        g.W.mutable_value().fill(0.0);
        g.b.mutable_value().fill(0.0);
        g.b.mutable_value()[k] = 1000.0;
        const Tensor m = gate::soft_mask_values(g, testing::random_tensor({4, d}, rng));
        for (std::size_t r = 0; r < 4; ++r) {
            const auto hv = gate::harden(m.row(r), 0.5).as_vector();
            for (std::size_t i = 0; i < d; ++i) mask_gap = std::max(mask_gap, std::abs(m.at(r, i) - hv[i]));
        }
    }

    double logit_gap = 0.0, truncation = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        std::mt19937_64 r2(seed);
        auto mdl = model::Model::init(testing::small_config(), seed);
        testing::install_random_bases(mdl, r2);
        const std::size_t d = mdl.config().d_kv();
        for (auto& layer : mdl.layers)
            for (Stream st : {Stream::Key, Stream::Value}) {
                auto g = layer.gate(st);
                g.W.mutable_value().fill(0.0);
                g.b.mutable_value().fill(0.0);
                g.b.mutable_value()[std::uniform_int_distribution<std::size_t>(0, d - 1)(r2)] = 1000.0;
            }
        const auto tokens = testing::random_tokens(20, r2);
        const Tensor soft = model::forward(mdl, tokens, {.mode = model::Mode::Soft, .trainable_basis = false});
        const Tensor hard = model::forward(mdl, tokens, {.mode = model::Mode::Hard, .tau = 0.5});
        logit_gap = std::max(logit_gap, max_abs_diff(soft, hard));
        truncation = std::max(truncation, max_abs_diff(hard, model::forward(mdl, tokens, {.mode = model::Mode::Full})));
    }
    // The truncation term guards against a vacuous comparison where nothing was dropped.
    const bool ok = violations == 0 && mask_gap <= 1e-9 && logit_gap <= 1e-9 && truncation > 1e-6;
    return {ok ? Outcome::Pass : Outcome::Fail, "1000 random gates, " + std::to_string(violations) +
                                                    " law violations; saturated mask gap " + fmt("%.1e", mask_gap) +
                                                    ", logit gap " + fmt("%.1e", logit_gap) +
                                                    " (vs full " + fmt("%.1e", truncation) + ")"};
}

// ---------------------------------------------------------------- 3

Tensor gaussian_rows(std::size_t n, const Tensor& L, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Tensor z({n, L.rows()});
    for (double& v : z.span()) v = nd(rng);
    return linalg::matmul(z, L);
}

double round_trip_error(const sp::SpectralBasis& b, const Tensor& x) {
    const Tensor xt = sp::project(b, x);
    double worst = 0.0;
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const auto back = sp::reconstruct(b, xt.row(t));
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < x.cols(); ++i) {
            num += (back[i] - x.at(t, i)) * (back[i] - x.at(t, i));
            den += x.at(t, i) * x.at(t, i);
        }
        worst = std::max(worst, std::sqrt(num / std::max(den, 1e-300)));
    }
    return worst;
}

Outcome spectral_round_trip() {
    double rt_ortho = 0.0, rt_pert = 0.0, offdiag = 0.0;
    bool descending = true;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        std::mt19937_64 rng(seed);
        const std::size_t d = 4 + 2 * (seed % 6);
        const Tensor x = gaussian_rows(3000, testing::random_tensor({d, d}, rng), rng);
        sp::CovarianceAccumulator acc(d);
        acc.accumulate(x);
        auto b = sp::compute_basis(acc);
        rt_ortho = std::max(rt_ortho, round_trip_error(b, x));

        sp::CovarianceAccumulator pc(d);
        pc.accumulate(sp::project(b, x));
        const Tensor c = pc.covariance();
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j)
                if (i != j) offdiag = std::max(offdiag, std::abs(c.at(i, j)));
            if (i && c.at(i, i) > c.at(i - 1, i - 1)) descending = false;
        }

        b.U.add_inplace(testing::random_tensor({d, d}, rng, -0.05, 0.05));
        b = sp::refresh_inverse(b);
        rt_pert = std::max(rt_pert, round_trip_error(b, x));
    }
    const bool ok = rt_ortho <= 1e-8 && rt_pert <= 1e-8 && offdiag <= 1e-6 && descending;
    return {ok ? Outcome::Pass : Outcome::Fail,
            "round trip rel err " + fmt("%.1e", rt_ortho) + " (PCA), " + fmt("%.1e", rt_pert) +
                " (perturbed); max off-diagonal " + fmt("%.1e", offdiag) +
                (descending ? ", diagonal descending" : ", diagonal NOT descending")};
}

// ---------------------------------------------------------------- 4

Outcome full_rank_equivalence() {
    double gap = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        std::mt19937_64 rng(seed);
        auto cfg = testing::small_config();
        cfg.n_layers = 3;
        auto m = model::Model::init(cfg, seed);
        testing::install_random_bases(m, rng);
        testing::randomize_gates(m, rng);
        const auto tokens = testing::random_tokens(48, rng);
        const Tensor full = model::forward(m, tokens, {.mode = model::Mode::Full});
        const Tensor hard = model::forward(m, tokens, {.mode = model::Mode::Hard, .force_full_rank = true});
        gap = std::max(gap, max_abs_diff(full, hard));
    }
    return {gap <= 1e-8 ? Outcome::Pass : Outcome::Fail, "max |Δlogit| " + fmt("%.1e", gap) + " over 5 models"};
}

// ---------------------------------------------------------------- 5 / 8 / 9 pipeline

const char* kModel = R"({"n_layers": 2, "n_heads": 4, "head_dim": 8, "d_model": 64, "max_seq_len": 128})";

json pipeline_config(std::uint64_t seed, const std::string& out) {
    json c = {{"schema_version", 1},
              {"seed", seed},
              {"model", json::parse(kModel)},
              {"data", {{"train", (g_data / "sample_corpus.txt").string()},
                        {"eval", (g_data / "heldout.txt").string()},
                        {"seq_len", 64}}},
              {"eval", {{"modes", {"full", "hard"}}}},
              {"analyze", {{"sentence", "The lamp in the harbor window stayed lit long after the boats came home."}}},
              {"out_dir", (g_work / out).string()}};
    return c;
}

json train_section(const char* mode, double alpha, std::size_t steps) {
    return {{"mode", mode}, {"alpha", alpha}, {"steps", steps}, {"batch", 4}, {"seq_len", 64}, {"lr", 0.003}};
}

harness::RunConfig make(const json& j) { return harness::RunConfig::from_json(j, g_work); }

constexpr std::uint64_t kSeed = 7;
constexpr double kAlphas[] = {0.0, 0.1, 1.0};

std::string alpha_dir(double a) { return "alpha_" + fmt("%g", a); }

/// Pretrain the base model, calibrate bases, then fine-tune gates at one α.
fs::path calibrated_checkpoint() {
    const fs::path ckpt = g_work / "calibrate" / "checkpoint";
    if (fs::exists(ckpt / "manifest.json")) return ckpt;
    json pre = pipeline_config(kSeed, "pretrain");
    pre["train"] = train_section("full", 0.0, 2000);
    harness::cmd_train(make(pre));
    json cal = pipeline_config(kSeed, "calibrate");
    cal["checkpoint"] = (g_work / "pretrain" / "checkpoint").string();
    harness::cmd_calibrate(make(cal));
    return ckpt;
}

fs::path gate_checkpoint(double alpha, std::uint64_t seed) {
    const std::string name = alpha_dir(alpha) + "_seed" + std::to_string(seed);
    const fs::path ckpt = g_work / name / "checkpoint";
    if (fs::exists(ckpt / "manifest.json")) return ckpt;
    json j = pipeline_config(seed, name);
    j["checkpoint"] = calibrated_checkpoint().string();
    j["train"] = train_section("soft", alpha, 2000);
    harness::cmd_train(make(j));
    return ckpt;
}

Outcome penalty_monotonicity() {
    std::vector<double> rate, ppl;
    std::ostringstream detail;
    for (double a : kAlphas) {
        json j = pipeline_config(kSeed, alpha_dir(a) + "_eval");
        j["checkpoint"] = gate_checkpoint(a, kSeed).string();
        const json rep = harness::cmd_eval(make(j));
        const json& hard = rep.at("modes").at("hard");
        rate.push_back(hard.at("hard_retain_rate").get<double>());
        ppl.push_back(hard.at("ppl").get<double>());
        detail << "α=" << a << ": rate " << fmt("%.4f", rate.back()) << " ppl " << fmt("%.3f", ppl.back()) << "; ";
    }
    const bool strict = rate[2] < rate[0];
    const bool nonincreasing = rate[1] <= rate[0] && rate[2] <= rate[1];
    const bool ppl_ok = std::isfinite(ppl[0]) && std::isfinite(ppl[2]) && ppl[2] > ppl[0];
    return {strict && nonincreasing && ppl_ok ? Outcome::Pass : Outcome::Fail, detail.str()};
}

Outcome attention_sink() {
    std::size_t hits = 0;
    std::ostringstream detail;
    for (std::uint64_t seed : {kSeed, kSeed + 1, kSeed + 2}) {
        json j = pipeline_config(seed, "analyze_seed" + std::to_string(seed));
        j["checkpoint"] = gate_checkpoint(1.0, seed).string();
        const json rep = harness::cmd_analyze(make(j));
        const auto rank = rep.at("bos_rank").get<std::size_t>();
        std::size_t tied = 0;
        for (const auto& t : rep.at("top_tokens"))
            if (t.at("mean_hard_rate").get<double>() == rep.at("bos_mean_hard_rate").get<double>()) ++tied;
        if (rank <= 3) ++hits;
        detail << "seed " << seed << ": BOS rank " << rank << " (tied with " << tied << " listed); ";
    }
    detail << hits << "/3 seeds in top 3";
    return {hits >= 2 ? Outcome::Pass : Outcome::Warn, detail.str()};
}

Outcome determinism() {
    // Same config (and therefore the same output directory) both times.
    json j = pipeline_config(kSeed, "determinism");
    j["checkpoint"] = calibrated_checkpoint().string();
    j["train"] = train_section("soft", 0.5, 200);
    std::string logs[2];
    for (auto& log : logs) {
        fs::remove_all(g_work / "determinism");
        harness::cmd_train(make(j));
        std::ifstream f(g_work / "determinism" / "steps.jsonl", std::ios::binary);
        log.assign(std::istreambuf_iterator<char>(f), {});
    }
    const bool ok = !logs[0].empty() && logs[0] == logs[1];
    return {ok ? Outcome::Pass : Outcome::Fail,
            std::to_string(logs[0].size()) + " bytes, digest " + io::fnv1a_hex(logs[0]) + " vs " +
                io::fnv1a_hex(logs[1])};
}

// ---------------------------------------------------------------- 6

Tensor random_attention(std::size_t h, std::size_t w, std::size_t T, std::mt19937_64& rng) {
    Tensor a = testing::random_tensor({h, w, T}, rng, 0.0, 1.0);
    for (std::size_t r = 0; r < h * w; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < T; ++j) s += a[r * T + j];
        for (std::size_t j = 0; j < T; ++j) a[r * T + j] /= s;
    }
    return a;
}

/// Brute force: sum over heads and queries, max-pool, then pick the best L − w prefix tokens.
std::set<std::size_t> oracle_keep(const Tensor& att, std::size_t T, std::size_t w, std::size_t L, std::size_t pool) {
    std::vector<double> mass(T, 0.0);
    for (std::size_t i = 0; i < att.size(); ++i) mass[i % T] += att[i];
    std::vector<double> pooled(T);
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(pool / 2);
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(T); ++j) {
        double best = -1.0;
        for (std::ptrdiff_t k = j - half; k <= j + half; ++k)
            if (k >= 0 && k < static_cast<std::ptrdiff_t>(T)) best = std::max(best, mass[k]);
        pooled[j] = best;
    }
    std::set<std::size_t> keep;
    for (std::size_t j = T - w; j < T; ++j) keep.insert(j);
    // Repeatedly take the highest-scoring remaining prefix token, earliest on ties.
    while (keep.size() < L) {
        std::size_t arg = T;
        for (std::size_t j = 0; j < T - w; ++j)
            if (!keep.count(j) && (arg == T || pooled[j] > pooled[arg])) arg = j;
        keep.insert(arg);
    }
    return keep;
}

Outcome budget_and_uniformity() {
    const double a = evict::combined_budget(0.25, 0.47);
    const double b = evict::combined_budget(0.125, 0.30);
    const bool arith = std::round(a * 1e4) == 1175.0 && std::round(b * 1e4) == 375.0;

    std::mt19937_64 rng(606);
    std::size_t mismatches = 0, trials = 0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t layers = 1 + t % 3, heads = 1 + t % 4, hd = 2 * (1 + t % 3);
        const std::size_t T = 12 + rng() % 40, w = 1 + rng() % 6, pool = 1 + 2 * (rng() % 4);
        const std::size_t L = w + rng() % (T - w);
        kv::RaggedKVCache cache({layers, heads, hd, kv::kDefaultRopeBase});
        const std::size_t d = heads * hd;
        std::uniform_int_distribution<std::size_t> rank(1, d);
        for (std::size_t l = 0; l < layers; ++l)
            for (std::size_t p = 0; p < T; ++p) {
                const auto k = testing::random_tensor({rank(rng)}, rng), v = testing::random_tensor({rank(rng)}, rng);
                cache.append(l, k.span(), v.span(), p);
            }
        std::vector<Tensor> att;
        for (std::size_t l = 0; l < layers; ++l) att.push_back(random_attention(heads, w, T, rng));
        const evict::EvictionConfig cfg{L, w, pool};
        const auto pruned = evict::evict(cache, att, cfg);
        ++trials;
        for (std::size_t l = 0; l < layers; ++l) {
            const auto expect = oracle_keep(att[l], T, w, L, pool);
            std::vector<std::size_t> got(pruned.positions(l).begin(), pruned.positions(l).end());
            if (std::set<std::size_t>(got.begin(), got.end()) != expect || got.size() != L) {
                ++mismatches;
                continue;
            }
            // Every head's slice of every surviving token is carried over bit for bit.
            for (std::size_t i = 0; i < L; ++i)
                for (Stream s : {Stream::Key, Stream::Value}) {
                    const auto src = cache.entry(l, s, got[i]);
                    const auto dst = pruned.entry(l, s, i);
                    if (!std::equal(src.begin(), src.end(), dst.begin(), dst.end())) ++mismatches;
                }
        }
    }
    return {arith && mismatches == 0 ? Outcome::Pass : Outcome::Fail,
            "combined_budget " + fmt("%.4f", a) + ", " + fmt("%.4f", b) + "; " + std::to_string(mismatches) +
                " oracle mismatches in " + std::to_string(trials) + " random caches"};
}

// ---------------------------------------------------------------- 7

Outcome accounting() {
    std::mt19937_64 rng(707);
    std::size_t bad = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t layers = 1 + rng() % 4, heads = 1 + rng() % 4, hd = 2 * (1 + rng() % 4);
        const std::size_t d = heads * hd, T = 1 + rng() % 60;
        kv::RaggedKVCache c({layers, heads, hd, kv::kDefaultRopeBase});
        std::uniform_int_distribution<std::size_t> rank(1, d);
        std::size_t expect = 0;
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t l = 0; l < layers; ++l) {
                const std::size_t rk = rank(rng), rv = rank(rng);
                c.append(l, std::vector<double>(rk, 1.0), std::vector<double>(rv, 1.0), t);
                expect += rk + rv;
            }
        const auto rep = kv::memory_report(c);
        if (rep.total_floats != expect || c.total_floats() != expect) ++bad;
        if (rep.rate_overall != static_cast<double>(expect) / static_cast<double>(2 * layers * T * d)) ++bad;
    }
    return {bad == 0 ? Outcome::Pass : Outcome::Fail, "100 random append sequences, " + std::to_string(bad) + " mismatches"};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 3) {
        std::cerr << "usage: dynakv_acceptance <data_dir> <work_dir> [criterion ids...]\n";
        return 2;
    }
    g_data = fs::absolute(argv[1]);
    g_work = fs::absolute(argv[2]);
    fs::remove_all(g_work);
    fs::create_directories(g_work);
    std::set<int> only;
    for (int i = 3; i < argc; ++i) only.insert(std::stoi(argv[i]));

    const std::vector<Criterion> criteria{
        {1, "gradient suite", 60, gradient_suite},
        {2, "mask laws", 10, mask_laws},
        {3, "spectral round trip", 10, spectral_round_trip},
        {4, "full-rank equivalence", 30, full_rank_equivalence},
        {5, "penalty monotonicity", 1800, penalty_monotonicity},
        {6, "budget arithmetic and head uniformity", 10, budget_and_uniformity},
        {7, "accounting exactness", 5, accounting},
        {8, "attention sink", 300, attention_sink},
        {9, "determinism", 600, determinism},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && !only.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {Outcome::Fail, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (secs > c.limit_s && o.kind == Outcome::Pass) {
            o.kind = Outcome::Fail;
            o.detail += "; over the " + fmt("%g", c.limit_s) + " s budget";
        }
        const char* tag = o.kind == Outcome::Pass ? "PASS" : o.kind == Outcome::Warn ? "WARN" : "FAIL";
        if (o.kind == Outcome::Fail) ++failures;
        std::cout << tag << "  [" << c.id << "] " << c.name << ": " << o.detail << " (" << fmt("%.1f", secs)
                  << " s)" << std::endl;
    }
    return failures ? 1 : 0;
}
