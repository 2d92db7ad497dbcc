// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynakv/eviction.hpp"
#include "dynakv/model.hpp"
#include "dynakv/trainer.hpp"

namespace dynakv::harness {

inline constexpr int kSchemaVersion = 1;

struct DataConfig {
    std::string train;                  // UTF-8 corpus for training and calibration
    std::string eval;                   // held-out UTF-8 text
    std::size_t seq_len = 64;           // evaluation / calibration window length
    std::size_t max_eval_windows = 0;   // 0 = every full window
    std::size_t max_calib_windows = 0;
};

struct EvictionSettings {
    std::size_t keep_budget = 0;  // 0 disables the eviction row
    std::size_t observation_window = 32;
    std::size_t pooling_width = 7;
    std::size_t prefill = 0;      // tokens prefilled before eviction; 0 = 3/4 of each window
};

struct EvalSettings {
    double tau = gate::kDefaultTau;
    std::vector<model::Mode> modes{model::Mode::Full, model::Mode::Soft, model::Mode::Hard};
    EvictionSettings eviction;
    bool dump_cache = false;
};

struct AlphaPoint {
    double alpha = 0.0;
    std::string checkpoint;
};

struct AnalyzeSettings {
    std::string sentence;
    double tau = gate::kDefaultTau;
    std::vector<AlphaPoint> alpha_curve;
};

struct BenchSettings {
    std::size_t prompt_len = 32;
    std::size_t decode_tokens = 64;
    std::size_t repeats = 3;
    double tau = gate::kDefaultTau;
};

/// One JSON document drives every subcommand. Relative paths resolve against the
/// directory of the config file. Unknown keys are rejected at every level.
struct RunConfig {
    int schema_version = kSchemaVersion;
    std::uint64_t seed = 0;
    model::ModelConfig model;
    std::string checkpoint;  // optional starting checkpoint directory
    DataConfig data;
    model::TrainConfig train;
    EvalSettings eval;
    AnalyzeSettings analyze;
    BenchSettings bench;
    std::string out_dir = "runs";
    std::filesystem::path base_dir;  // not serialized

    static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
    static RunConfig load(const std::filesystem::path& path);
    /// Canonical form; its hash identifies the run in every artifact.
    nlohmann::json to_json() const;
    std::string hash() const;

    std::filesystem::path resolve(const std::string& p) const;
    std::filesystem::path out() const { return resolve(out_dir); }
};

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::size_t> evict_budget;
    std::optional<std::size_t> obs_window;
    bool dump_cache = false;
};

/// Applies CLI overrides (which then take part in the config hash).
void apply_overrides(RunConfig& cfg, const Overrides& o);

/// Checkpoint model if configured, otherwise a fresh init from cfg.model and cfg.seed.
model::Model load_or_init(const RunConfig& cfg);

/// Reads a corpus file as raw byte tokens.
std::vector<int> load_corpus(const std::filesystem::path& path);

/// Prefill `prefill` tokens in hard mode, evict, then score the remaining targets
/// token by token. With keep_budget ≥ prefill nothing is evicted and the result is
/// the matching baseline.
struct EvictionEval {
    double ppl = 0.0;
    std::size_t scored_tokens = 0;
    evict::BudgetReport budget;
    std::string warning;
};
EvictionEval evaluate_with_eviction(const model::Model& m, std::span<const model::Example> examples, double tau,
                                    const evict::EvictionConfig& ecfg, std::size_t prefill);

/// Per-token and layer×token hard retention for one token sequence.
struct RetentionAnalysis {
    std::vector<int> tokens;
    std::vector<double> token_hard;             // mean over layers and streams
    std::vector<double> token_soft;
    std::vector<std::vector<double>> layer_token;  // n_layers × n_tokens, mean over streams
    std::size_t bos_rank = 0;                   // 1 = highest mean retention; ties share the best rank
    std::vector<gate::RateSample> trace;
};
RetentionAnalysis analyze_retention(const model::Model& m, std::span<const int> tokens, double tau);

// Subcommands. Each writes its artifacts under cfg.out() and returns the main report.
nlohmann::json cmd_calibrate(const RunConfig& cfg);
nlohmann::json cmd_train(const RunConfig& cfg);
nlohmann::json cmd_eval(const RunConfig& cfg);
nlohmann::json cmd_analyze(const RunConfig& cfg);
nlohmann::json cmd_bench(const RunConfig& cfg);

}  // namespace dynakv::harness
