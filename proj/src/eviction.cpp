// SPDX-License-Identifier: Apache-2.0

#include "dynakv/eviction.hpp"

#include <algorithm>
#include <numeric>

#include "dynakv/error.hpp"

namespace dynakv::evict {

void EvictionConfig::validate() const {
    if (keep_budget == 0) throw ConfigError("eviction: keep_budget must be positive");
    if (observation_window == 0) throw ConfigError("eviction: observation_window must be positive");
    if (keep_budget < observation_window) {
        throw ConfigError("eviction: keep_budget " + std::to_string(keep_budget) + " is smaller than the observation window");
    }
    if (pooling_width == 0 || pooling_width % 2 == 0) throw ConfigError("eviction: pooling_width must be odd");
}

std::vector<double> score_tokens(const Tensor& window_attention, std::size_t pooling_width) {
    if (window_attention.ndim() != 3) throw DimensionError("score_tokens: expected [heads × window × tokens]");
    if (pooling_width == 0 || pooling_width % 2 == 0) throw ConfigError("score_tokens: pooling_width must be odd");
    const auto& s = window_attention.shape();
    const std::size_t H = s[0], W = s[1], T = s[2];
    std::vector<double> raw(T, 0.0);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < W; ++i) {
            const double* row = window_attention.data() + (h * W + i) * T;
            for (std::size_t j = 0; j < T; ++j) raw[j] += row[j];
        }
    const std::size_t half = pooling_width / 2;
    std::vector<double> pooled(T);
    for (std::size_t j = 0; j < T; ++j) {
        const std::size_t lo = j >= half ? j - half : 0;
        const std::size_t hi = std::min(T, j + half + 1);
        pooled[j] = *std::max_element(raw.begin() + static_cast<std::ptrdiff_t>(lo),
                                      raw.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    return pooled;
}

EvictionPlan plan_eviction(const kv::RaggedKVCache& cache, const std::vector<Tensor>& window_attention,
                           const EvictionConfig& cfg) {
    cfg.validate();
    const std::size_t L = cache.geometry().n_layers;
    if (window_attention.size() != L) throw DimensionError("plan_eviction: one attention tensor per layer required");
    EvictionPlan plan;
    plan.keep.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t T = cache.tokens(l);
        auto& keep = plan.keep[l];
        if (cfg.keep_budget >= T) {
            keep.resize(T);
            std::iota(keep.begin(), keep.end(), std::size_t{0});
            plan.noop = true;
            plan.warning = "eviction budget " + std::to_string(cfg.keep_budget) + " >= cached tokens " +
                           std::to_string(T) + "; nothing evicted";
            continue;
        }
        const Tensor& att = window_attention[l];
        if (att.ndim() != 3 || att.shape()[2] != T) {
            throw DimensionError("plan_eviction: attention width does not match cached tokens in layer " +
                                 std::to_string(l));
        }
        const std::size_t w = std::min({cfg.observation_window, att.shape()[1], cfg.keep_budget});
        const std::size_t prefix = T - w;
        const std::size_t take = cfg.keep_budget - w;
        const auto scores = score_tokens(att, cfg.pooling_width);
        std::vector<std::size_t> order(prefix);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
        keep.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
        for (std::size_t j = prefix; j < T; ++j) keep.push_back(j);
        std::sort(keep.begin(), keep.end());
    }
    return plan;
}

kv::RaggedKVCache evict(const kv::RaggedKVCache& cache, const std::vector<Tensor>& window_attention,
                        const EvictionConfig& cfg, std::string* warning) {
    EvictionPlan plan = plan_eviction(cache, window_attention, cfg);
    if (warning) *warning = plan.warning;
    return cache.select(plan.keep);
}

double combined_budget(double keep_ratio, double mean_retain_rate) {
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("combined_budget: keep_ratio outside (0, 1]");
    if (!(mean_retain_rate > 0.0 && mean_retain_rate <= 1.0)) {
        throw ConfigError("combined_budget: retain rate outside (0, 1]");
    }
    return keep_ratio * mean_retain_rate;
}

BudgetReport budget_report(const kv::MemoryReport& rb, const kv::MemoryReport& ra) {
    const std::size_t tb = std::accumulate(rb.tokens_per_layer.begin(), rb.tokens_per_layer.end(), std::size_t{0});
    const std::size_t ta = std::accumulate(ra.tokens_per_layer.begin(), ra.tokens_per_layer.end(), std::size_t{0});
    if (tb == 0 || ta == 0) throw InsufficientDataError("budget_report: empty cache");
    BudgetReport b;
    b.keep_ratio = static_cast<double>(ta) / static_cast<double>(tb);
    b.survivor_rate = ra.rate_overall;
    b.prior_rate = rb.rate_overall;
    b.effective = combined_budget(b.keep_ratio, b.survivor_rate);
    b.estimated = combined_budget(b.keep_ratio, b.prior_rate);
    return b;
}

BudgetReport budget_report(const kv::RaggedKVCache& before, const kv::RaggedKVCache& after) {
    return budget_report(kv::memory_report(before), kv::memory_report(after));
}

}  // namespace dynakv::evict
