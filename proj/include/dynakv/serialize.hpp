// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynakv/tensor.hpp"

namespace dynakv::io {

/// DKVT layout, all little-endian:
///   "DKVT" | u32 ndim | u64 dims[ndim] | f64 payload (row-major)
std::vector<std::uint8_t> encode_dkvt(const Tensor& t);
Tensor decode_dkvt(std::span<const std::uint8_t> bytes);

void write_dkvt(const std::filesystem::path& path, const Tensor& t);
Tensor read_dkvt(const std::filesystem::path& path);

/// Human-readable mirror: {"shape": [...], "data": [...]}.
nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(std::string_view bytes);
/// Hash of the canonical (key-sorted, compact) dump of a JSON document.
std::string config_hash(const nlohmann::json& j);

}  // namespace dynakv::io
