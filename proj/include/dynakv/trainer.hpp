// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynakv/model.hpp"

namespace dynakv::model {

struct TrainConfig {
    double alpha = 0.0;               // weight of the α·R² compression penalty
    double tau = gate::kDefaultTau;   // hard threshold used by evaluation
    double lr = 3e-4;
    std::size_t steps = 2000;
    std::size_t batch = 4;
    std::size_t seq_len = 64;
    std::uint64_t seed = 0;
    Mode mode = Mode::Soft;           // Soft trains the gate; Full trains the base model alone
    bool trainable_basis = true;
    bool freeze_base = false;
    double grad_clip = 1.0;           // ≤ 0 disables clipping

    /// Throws ConfigError (α < 0, τ outside (0,1), zero steps/batch, hard mode...).
    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct StepLog {
    std::size_t step = 0;
    double ce = 0.0;
    double r_soft = 0.0;
    double total = 0.0;
};

/// Fixed-width JSON line with round-trip precision; no wall-clock fields.
std::string step_log_line(const StepLog& s);

/// L_CE + α·R² as a graph node.
ad::Var composite_loss(const ad::Var& ce, const ad::Var& retain_rate, double alpha);

/// Input/target pair for next-token prediction: input = [BOS] + window[0..n-1),
/// target = window.
struct Example {
    std::vector<int> input;
    std::vector<int> target;
};
Example make_example(std::span<const int> window);

/// Deterministic random windows over a byte stream (no BOS inside the stream).
class BatchSampler {
public:
    BatchSampler(std::span<const int> corpus, std::size_t seq_len, std::uint64_t seed);
    std::vector<Example> next(std::size_t batch);

private:
    std::span<const int> corpus_;
    std::size_t seq_len_;
    std::uint64_t state_;
};

/// Consecutive non-overlapping evaluation windows of `seq_len` bytes.
std::vector<Example> split_examples(std::span<const int> corpus, std::size_t seq_len,
                                    std::size_t max_examples = 0);

class Trainer {
public:
    Trainer(Model& model, TrainConfig cfg);
    /// One optimizer step on `batch`; throws NumericError if the loss is not finite.
    StepLog step(std::span<const Example> batch);
    const TrainConfig& config() const noexcept { return cfg_; }

private:
    Model& model_;
    TrainConfig cfg_;
    ad::Adam opt_;
    std::size_t step_ = 0;
};

/// Runs cfg.steps steps with a BatchSampler seeded from cfg.seed.
std::vector<StepLog> train(Model& model, std::span<const int> corpus, const TrainConfig& cfg,
                           const std::function<void(const StepLog&)>& on_step = {});

struct EvalResult {
    double ppl = 0.0;
    double mean_nll = 0.0;
    std::size_t tokens = 0;
    double hard_retain_rate = 1.0;  // Hard mode: measured from the cache
    double soft_retain_rate = 1.0;  // Soft mode: mean soft-mask rate
    kv::MemoryReport memory;        // Hard mode: summed over all evaluated sequences
};

/// exp(mean token NLL) over `examples` in the requested mode. Sequences are
/// evaluated on up to `threads` workers; reduction order is fixed.
EvalResult evaluate_ppl(const Model& model, std::span<const Example> examples, Mode mode,
                        double tau = gate::kDefaultTau, std::size_t threads = 1);

/// Worker count from DYNAKV_THREADS (default 1).
std::size_t thread_budget();

/// Runs `examples` through the model in Full mode and accumulates pre-RoPE key and
/// value states; installs the resulting PCA bases into every layer.
struct CalibrationStats {
    std::size_t tokens = 0;
    std::vector<std::vector<double>> eigenvalues_k, eigenvalues_v;
};
CalibrationStats calibrate(Model& model, std::span<const Example> examples);

}  // namespace dynakv::model
