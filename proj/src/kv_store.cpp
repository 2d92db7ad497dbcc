// SPDX-License-Identifier: Apache-2.0

#include "dynakv/kv_store.hpp"

#include <cmath>
#include <fstream>
#include <string_view>

#include <nlohmann/json.hpp>

#include "dynakv/error.hpp"
#include "dynakv/serialize.hpp"

namespace dynakv::kv {

RaggedKVCache::RaggedKVCache(CacheGeometry geometry) : geo_(geometry), layers_(geometry.n_layers) {
    if (geo_.d_kv() == 0) throw DimensionError("RaggedKVCache: zero key/value width");
}

void RaggedKVCache::check_layer(std::size_t layer) const {
    if (layer >= layers_.size()) {
        throw DimensionError("cache layer " + std::to_string(layer) + " out of range " + std::to_string(layers_.size()));
    }
}

void RaggedKVCache::append(std::size_t layer, std::span<const double> key_prefix,
                           std::span<const double> value_prefix, std::size_t position) {
    check_layer(layer);
    const std::size_t d = geo_.d_kv();
    for (auto r : {key_prefix.size(), value_prefix.size()}) {
        if (r == 0 || r > d) {
            throw RankError("append: retained rank " + std::to_string(r) + " outside [1, " + std::to_string(d) + "]");
        }
    }
    Layer& L = layers_[layer];
    auto push = [](Arena& a, std::span<const double> v) {
        a.offset.push_back(a.data.size());
        a.length.push_back(static_cast<std::uint32_t>(v.size()));
        a.data.insert(a.data.end(), v.begin(), v.end());
    };
    push(L.key, key_prefix);
    push(L.value, value_prefix);
    L.positions.push_back(position);
    total_floats_ += key_prefix.size() + value_prefix.size();
}

void RaggedKVCache::append(std::size_t layer, const CompressedEntry& key, const CompressedEntry& value,
                           std::size_t position) {
    append(layer, std::span<const double>(key.values), std::span<const double>(value.values), position);
}

std::size_t RaggedKVCache::tokens(std::size_t layer) const {
    check_layer(layer);
    return layers_[layer].positions.size();
}

const RaggedKVCache::Arena& RaggedKVCache::arena(std::size_t layer, Stream stream) const {
    check_layer(layer);
    return stream == Stream::Key ? layers_[layer].key : layers_[layer].value;
}

std::span<const double> RaggedKVCache::entry(std::size_t layer, Stream stream, std::size_t index) const {
    const Arena& a = arena(layer, stream);
    if (index >= a.offset.size()) throw DimensionError("cache entry index out of range");
    return {a.data.data() + a.offset[index], a.length[index]};
}

std::size_t RaggedKVCache::retained(std::size_t layer, Stream stream, std::size_t index) const {
    const Arena& a = arena(layer, stream);
    if (index >= a.length.size()) throw DimensionError("cache entry index out of range");
    return a.length[index];
}

std::span<const std::size_t> RaggedKVCache::positions(std::size_t layer) const {
    check_layer(layer);
    return layers_[layer].positions;
}

std::size_t RaggedKVCache::layer_floats(std::size_t layer, Stream stream) const {
    return arena(layer, stream).data.size();
}

RaggedKVCache RaggedKVCache::select(const std::vector<std::vector<std::size_t>>& keep_per_layer) const {
    if (keep_per_layer.size() != layers_.size()) throw DimensionError("select: one index list per layer required");
    RaggedKVCache out(geo_);
    out.clamped_ = clamped_;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        std::size_t prev = 0;
        bool first = true;
        for (std::size_t idx : keep_per_layer[l]) {
            if (idx >= tokens(l)) throw DimensionError("select: token index out of range");
            if (!first && idx <= prev) throw ContractError("select: indices must be strictly ascending");
            out.append(l, entry(l, Stream::Key, idx), entry(l, Stream::Value, idx), layers_[l].positions[idx]);
            prev = idx;
            first = false;
        }
    }
    return out;
}

void RaggedKVCache::clear() {
    for (auto& L : layers_) L = Layer{};
    total_floats_ = 0;
    clamped_ = 0;
}

Tensor reconstruct_stream(const RaggedKVCache& cache, std::size_t layer, Stream stream,
                          const spectral::SpectralBasis* basis) {
    const std::size_t d = cache.geometry().d_kv();
    if (basis && basis->dim() != d) {
        throw DimensionError("reconstruct: basis width " + std::to_string(basis->dim()) + " vs cache " +
                             std::to_string(d));
    }
    const std::size_t T = cache.tokens(layer);
    Tensor out({T, d});
    for (std::size_t t = 0; t < T; ++t) {
        const auto prefix = cache.entry(layer, stream, t);
        if (basis) {
            spectral::reconstruct_into(*basis, prefix, out.row(t));
        } else {
            if (prefix.size() != d) throw RankError("reconstruct: raw entries must be full width");
            std::copy(prefix.begin(), prefix.end(), out.row(t).begin());
        }
    }
    return out;
}

std::pair<Tensor, Tensor> reconstruct_all(const RaggedKVCache& cache, std::size_t layer,
                                          const spectral::SpectralBasis& basis_k,
                                          const spectral::SpectralBasis& basis_v) {
    return {reconstruct_stream(cache, layer, Stream::Key, &basis_k),
            reconstruct_stream(cache, layer, Stream::Value, &basis_v)};
}

void apply_rope(Tensor& x, std::span<const std::size_t> positions, std::size_t n_heads, std::size_t head_dim,
                double base, bool inverse) {
    if (head_dim % 2 != 0) throw DimensionError("apply_rope: head_dim must be even, got " + std::to_string(head_dim));
    if (x.cols() != n_heads * head_dim) throw DimensionError("apply_rope: row width does not match heads");
    if (positions.size() != x.rows()) throw DimensionError("apply_rope: one position per row required");
    const std::size_t half = head_dim / 2;
    std::vector<double> inv_freq(half);
    for (std::size_t i = 0; i < half; ++i)
        inv_freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double sign = inverse ? -1.0 : 1.0;
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto row = x.row(t);
        const double pos = static_cast<double>(positions[t]);
        for (std::size_t i = 0; i < half; ++i) {
            const double ang = sign * pos * inv_freq[i];
            const double c = std::cos(ang), s = std::sin(ang);
            for (std::size_t h = 0; h < n_heads; ++h) {
                double& a = row[h * head_dim + 2 * i];
                double& b = row[h * head_dim + 2 * i + 1];
                const double a0 = a, b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
        }
    }
}

namespace {

void finish_rates(MemoryReport& rep) {
    const std::size_t d = rep.d_kv;
    std::size_t token_slots = 0;
    rep.rate_per_layer.clear();
    for (std::size_t l = 0; l < rep.tokens_per_layer.size(); ++l) {
        const std::size_t T = rep.tokens_per_layer[l];
        rep.rate_per_layer.push_back(
            T ? static_cast<double>(rep.floats_per_layer[l]) / static_cast<double>(2 * T * d) : 0.0);
        token_slots += T;
    }
    if (token_slots) {
        const double denom = static_cast<double>(token_slots * d);
        rep.rate_overall = static_cast<double>(rep.total_floats) / (2.0 * denom);
        rep.rate_key = static_cast<double>(rep.key_floats) / denom;
        rep.rate_value = static_cast<double>(rep.value_floats) / denom;
    } else {
        rep.rate_overall = rep.rate_key = rep.rate_value = 0.0;
    }
}

}  // namespace

MemoryReport memory_report(const RaggedKVCache& cache) {
    const auto& g = cache.geometry();
    MemoryReport rep;
    rep.d_kv = g.d_kv();
    rep.total_floats = cache.total_floats();
    rep.clamped = cache.clamped_count();
    for (std::size_t l = 0; l < g.n_layers; ++l) {
        const std::size_t kf = cache.layer_floats(l, Stream::Key);
        const std::size_t vf = cache.layer_floats(l, Stream::Value);
        rep.tokens_per_layer.push_back(cache.tokens(l));
        rep.floats_per_layer.push_back(kf + vf);
        rep.key_floats += kf;
        rep.value_floats += vf;
    }
    finish_rates(rep);
    return rep;
}

MemoryReport combine_reports(std::span<const MemoryReport> reports) {
    MemoryReport out;
    for (const auto& r : reports) {
        if (out.tokens_per_layer.empty()) {
            out.d_kv = r.d_kv;
            out.tokens_per_layer.assign(r.tokens_per_layer.size(), 0);
            out.floats_per_layer.assign(r.floats_per_layer.size(), 0);
        }
        if (r.d_kv != out.d_kv || r.tokens_per_layer.size() != out.tokens_per_layer.size()) {
            throw DimensionError("combine_reports: geometry mismatch");
        }
        out.total_floats += r.total_floats;
        out.key_floats += r.key_floats;
        out.value_floats += r.value_floats;
        out.clamped += r.clamped;
        for (std::size_t l = 0; l < r.tokens_per_layer.size(); ++l) {
            out.tokens_per_layer[l] += r.tokens_per_layer[l];
            out.floats_per_layer[l] += r.floats_per_layer[l];
        }
    }
    finish_rates(out);
    return out;
}

void dump_jsonl(const RaggedKVCache& cache, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    for (std::size_t l = 0; l < cache.geometry().n_layers; ++l) {
        for (std::size_t t = 0; t < cache.tokens(l); ++t) {
            for (Stream s : {Stream::Key, Stream::Value}) {
                const auto v = cache.entry(l, s, t);
                const std::string_view bytes(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
                nlohmann::json j{{"layer", l},
                                 {"token", t},
                                 {"position", cache.positions(l)[t]},
                                 {"stream", std::string(stream_name(s))},
                                 {"r", v.size()},
                                 {"values_digest", io::fnv1a_hex(bytes)}};
                f << j.dump() << '\n';
            }
        }
    }
}

}  // namespace dynakv::kv
