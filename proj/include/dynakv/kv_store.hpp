// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "dynakv/spectral.hpp"
#include "dynakv/tensor.hpp"

namespace dynakv::kv {

inline constexpr double kDefaultRopeBase = 10000.0;

struct CacheGeometry {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t head_dim = 0;
    double rope_base = kDefaultRopeBase;

    std::size_t d_kv() const noexcept { return n_heads * head_dim; }
};

/// One token's retained spectral prefix; the retained rank is values.size().
struct CompressedEntry {
    std::vector<double> values;
    std::size_t retained() const noexcept { return values.size(); }
};

/// Per-layer cache of variable-length key/value prefixes. Each stream of a layer is a
/// contiguous arena plus offset/length arrays; nothing is padded to the max rank.
class RaggedKVCache {
public:
    explicit RaggedKVCache(CacheGeometry geometry);

    const CacheGeometry& geometry() const noexcept { return geo_; }

    /// Appends one token to `layer`. Throws RankError unless both prefixes have
    /// length in [1, d_kv].
    void append(std::size_t layer, std::span<const double> key_prefix, std::span<const double> value_prefix,
                std::size_t position);
    void append(std::size_t layer, const CompressedEntry& key, const CompressedEntry& value, std::size_t position);

    std::size_t tokens(std::size_t layer) const;
    std::span<const double> entry(std::size_t layer, Stream stream, std::size_t index) const;
    std::size_t retained(std::size_t layer, Stream stream, std::size_t index) const;
    std::span<const std::size_t> positions(std::size_t layer) const;

    /// Σ of stored prefix lengths over layers, tokens and both streams.
    std::size_t total_floats() const noexcept { return total_floats_; }
    std::size_t layer_floats(std::size_t layer, Stream stream) const;

    /// Count of tokens whose hard mask came out empty and was raised to rank 1.
    std::size_t clamped_count() const noexcept { return clamped_; }
    void record_clamp(std::size_t n = 1) noexcept { clamped_ += n; }

    /// New cache holding, per layer, only the listed token indices (ascending).
    RaggedKVCache select(const std::vector<std::vector<std::size_t>>& keep_per_layer) const;

    void clear();

private:
    struct Arena {
        std::vector<double> data;
        std::vector<std::size_t> offset;
        std::vector<std::uint32_t> length;
    };
    struct Layer {
        Arena key;
        Arena value;
        std::vector<std::size_t> positions;
    };

    const Arena& arena(std::size_t layer, Stream stream) const;
    void check_layer(std::size_t layer) const;

    CacheGeometry geo_;
    std::vector<Layer> layers_;
    std::size_t total_floats_ = 0;
    std::size_t clamped_ = 0;
};

/// Reconstructs every cached token of one stream: row t = prefix_t · U_inv[0:r_t, :].
/// With `basis == nullptr` entries must be full width and are copied verbatim.
Tensor reconstruct_stream(const RaggedKVCache& cache, std::size_t layer, Stream stream,
                          const spectral::SpectralBasis* basis);

/// (K, V) for a layer, each T×d_kv in the pre-RoPE space.
std::pair<Tensor, Tensor> reconstruct_all(const RaggedKVCache& cache, std::size_t layer,
                                          const spectral::SpectralBasis& basis_k,
                                          const spectral::SpectralBasis& basis_v);

/// In-place rotary embedding on rows laid out as [n_heads × head_dim]. Adjacent pairs
/// (2i, 2i+1) within each head rotate by position·base^(−2i/head_dim). `inverse`
/// rotates by the negated angle (the adjoint).
void apply_rope(Tensor& x, std::span<const std::size_t> positions, std::size_t n_heads, std::size_t head_dim,
                double base = kDefaultRopeBase, bool inverse = false);

struct MemoryReport {
    std::size_t d_kv = 0;
    std::size_t total_floats = 0;
    std::size_t key_floats = 0;
    std::size_t value_floats = 0;
    std::size_t clamped = 0;
    std::vector<std::size_t> tokens_per_layer;
    std::vector<std::size_t> floats_per_layer;

    double rate_overall = 0.0;
    double rate_key = 0.0;
    double rate_value = 0.0;
    std::vector<double> rate_per_layer;
};

/// Exact accounting from the stored entries: rate = floats / (2·Σ_layers tokens·d_kv).
MemoryReport memory_report(const RaggedKVCache& cache);
/// Sums the integer counts of several reports (e.g. one per evaluated sequence) and
/// recomputes the rates from the totals.
MemoryReport combine_reports(std::span<const MemoryReport> reports);

/// JSON lines {layer, token, position, stream, r, values_digest}.
void dump_jsonl(const RaggedKVCache& cache, const std::filesystem::path& path);

}  // namespace dynakv::kv
