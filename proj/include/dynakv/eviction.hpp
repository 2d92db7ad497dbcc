// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dynakv/kv_store.hpp"
#include "dynakv/tensor.hpp"

namespace dynakv::evict {

struct EvictionConfig {
    std::size_t keep_budget = 0;          // tokens kept per layer, observation window included
    std::size_t observation_window = 32;  // trailing queries whose attention scores the prefix
    std::size_t pooling_width = 7;        // odd width of the 1-D max-pool over scores

    void validate() const;
};

/// Per-token importance for one layer from window attention [heads × w × T]:
/// attention summed over heads and window queries, then max-pooled along tokens.
/// Only the first T − w entries (the prefix before the window) are meaningful.
std::vector<double> score_tokens(const Tensor& window_attention, std::size_t pooling_width);

struct EvictionPlan {
    std::vector<std::vector<std::size_t>> keep;  // ascending token indices per layer
    bool noop = false;
    std::string warning;
};

/// Chooses, per layer, the observation window plus the top-scoring prefix tokens so
/// that keep_budget tokens survive. Ties resolve to the earlier token. If the budget
/// covers every token the plan keeps everything and carries a warning.
EvictionPlan plan_eviction(const kv::RaggedKVCache& cache, const std::vector<Tensor>& window_attention,
                           const EvictionConfig& cfg);

/// Applies plan_eviction; the same token set is used for both streams of a layer.
kv::RaggedKVCache evict(const kv::RaggedKVCache& cache, const std::vector<Tensor>& window_attention,
                        const EvictionConfig& cfg, std::string* warning = nullptr);

/// keep_ratio × mean_retain_rate; both must lie in (0, 1].
double combined_budget(double keep_ratio, double mean_retain_rate);

/// Effective fraction of a full cache left after eviction on top of rank compression.
struct BudgetReport {
    double keep_ratio = 1.0;     // surviving tokens / original tokens
    double survivor_rate = 1.0;  // measured retain rate of the surviving entries
    double prior_rate = 1.0;     // measured retain rate of the cache before eviction
    double effective = 1.0;      // keep_ratio × survivor_rate
    double estimated = 1.0;      // keep_ratio × prior_rate
};

BudgetReport budget_report(const kv::MemoryReport& before, const kv::MemoryReport& after);
BudgetReport budget_report(const kv::RaggedKVCache& before, const kv::RaggedKVCache& after);

}  // namespace dynakv::evict
