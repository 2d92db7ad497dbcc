// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dynakv::text {

/// Byte-level vocabulary: ids 0..255 are raw bytes, 256 is BOS.
inline constexpr int kBos = 256;
inline constexpr int kVocabSize = 257;

/// BOS followed by the UTF-8 bytes of `text`.
std::vector<int> tokenize(std::string_view text);
/// Raw bytes without BOS (for corpus streams that get BOS per sampled window).
std::vector<int> bytes_of(std::string_view text);
/// Inverse of tokenize; BOS ids are dropped.
std::string detokenize(std::span<const int> ids);
/// Printable label for reports ("<BOS>", "\n", "\x07", ...).
std::string token_label(int id);

}  // namespace dynakv::text
