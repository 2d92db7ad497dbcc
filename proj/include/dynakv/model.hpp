// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynakv/autodiff.hpp"
#include "dynakv/gate.hpp"
#include "dynakv/kv_store.hpp"
#include "dynakv/spectral.hpp"

namespace dynakv::model {

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t head_dim = 16;
    std::size_t d_model = 128;
    std::size_t vocab_size = 257;
    std::size_t max_seq_len = 512;
    std::size_t mlp_mult = 4;
    double rope_base = kv::kDefaultRopeBase;
    double init_std = 0.02;
    double gate_init_slope = gate::kDefaultRampSlope;  // b_i = slope·i for fresh gates

    std::size_t d_kv() const noexcept { return n_heads * head_dim; }
    /// Throws ConfigError on inconsistent sizes (odd head_dim, zero widths, ...).
    void validate() const;
    kv::CacheGeometry geometry() const { return {n_layers, n_heads, head_dim, rope_base}; }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Full: no compression machinery at all. Soft: differentiable gated path (training).
/// Hard: thresholded masks and a physically ragged cache (inference).
enum class Mode { Full, Soft, Hard };

std::string mode_name(Mode m);
Mode parse_mode(const std::string& s);

struct LayerParams {
    ad::Var ln1_g, ln1_b;
    ad::Var wq, wk, wv, wo;
    ad::Var ln2_g, ln2_b;
    ad::Var w1, b1, w2, b2;
    ad::Var u_k, u_v;  // trainable spectral projections; bases below keep U_inv in sync
    gate::GateParams gate_k, gate_v;
    spectral::SpectralBasis basis_k, basis_v;

    const spectral::SpectralBasis& basis(Stream s) const { return s == Stream::Key ? basis_k : basis_v; }
    const gate::GateParams& gate(Stream s) const { return s == Stream::Key ? gate_k : gate_v; }
    const ad::Var& u(Stream s) const { return s == Stream::Key ? u_k : u_v; }
};

class Model {
public:
    /// Random init (normal, init_std) from a seed; identity bases, near-full-retention gates.
    static Model init(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return cfg_; }

    /// Parameters are shared Var handles, so copying a Model aliases its weights.
    /// clone() makes an independent deep copy.
    Model clone() const;

    ad::Var embed, lnf_g, lnf_b, w_out;
    std::vector<LayerParams> layers;

    /// Every trainable tensor in a fixed order, with stable names.
    std::vector<std::pair<std::string, ad::Var>> named_params() const;
    std::vector<ad::Var> base_params() const;
    std::vector<ad::Var> gate_params() const;
    std::vector<ad::Var> basis_params() const;

    /// Installs a calibrated basis; U is copied into the trainable projection.
    void set_basis(std::size_t layer, Stream stream, spectral::SpectralBasis basis);
    /// Re-derives U_inv from the (possibly updated) trainable U of every layer.
    void refresh_bases();

    void save(const std::filesystem::path& dir) const;
    /// Loads tensors written by save(); the config comes from `config.json` in `dir`.
    static Model load(const std::filesystem::path& dir);

private:
    ModelConfig cfg_;
};

struct ForwardOptions {
    Mode mode = Mode::Full;
    double tau = gate::kDefaultTau;
    /// Soft mode: differentiate through U (inverse via matinv). When false U_inv is
    /// taken from the stored basis as a constant.
    bool trainable_basis = true;
    /// Hard mode: store every token at rank d regardless of the gate.
    bool force_full_rank = false;
};

/// Per-layer, per-stream U⁻¹ nodes for one graph; built once and shared by every
/// sequence of a batch.
struct GraphContext {
    std::vector<ad::Var> u_inv_k, u_inv_v;
};
GraphContext prepare_graph(const Model& model, const ForwardOptions& opts);

struct GraphOutput {
    ad::Var logits;         // T×vocab
    ad::Var soft_rate_sum;  // Σ over tokens, layers and streams of per-token soft retain rates
    std::size_t rate_terms = 0;
};

/// Differentiable forward of one sequence in Full or Soft mode.
GraphOutput forward_graph(const Model& model, const GraphContext& ctx, std::span<const int> tokens,
                          const ForwardOptions& opts);

struct SessionOptions {
    Mode mode = Mode::Hard;  // Full (raw cache) or Hard (ragged spectral cache)
    double tau = gate::kDefaultTau;
    bool force_full_rank = false;
    /// Keep attention probabilities of the last `attention_window` queries of each
    /// forward call, per layer, as [heads × window × keys].
    std::size_t attention_window = 0;
    bool collect_rates = false;
};

/// Incremental inference over a KV cache: prefill then decode token by token. In Hard
/// mode every step reconstructs the whole cached prefix before attention.
class InferenceSession {
public:
    InferenceSession(const Model& model, SessionOptions opts);

    /// Appends `tokens` at the next positions; returns their logits (len × vocab).
    Tensor forward(std::span<const int> tokens);

    std::size_t next_position() const noexcept { return next_pos_; }
    const kv::RaggedKVCache& cache() const noexcept { return cache_; }
    /// Swap in a pruned cache (after eviction). Positions keep advancing.
    void replace_cache(kv::RaggedKVCache cache);

    const std::vector<Tensor>& window_attention() const noexcept { return attn_; }
    const std::vector<gate::RateSample>& rate_samples() const noexcept { return rates_; }

private:
    const Model& model_;
    SessionOptions opts_;
    kv::RaggedKVCache cache_;
    std::size_t next_pos_ = 0;
    std::vector<Tensor> attn_;
    std::vector<gate::RateSample> rates_;
};

/// Logits for a whole sequence in any mode (Hard goes through an InferenceSession).
Tensor forward(const Model& model, std::span<const int> tokens, const ForwardOptions& opts);

}  // namespace dynakv::model
