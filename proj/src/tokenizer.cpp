// SPDX-License-Identifier: Apache-2.0

#include "dynakv/tokenizer.hpp"

#include <cstdio>

#include "dynakv/error.hpp"

namespace dynakv::text {

std::vector<int> bytes_of(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(c);
    return ids;
}

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids{kBos};
    const auto body = bytes_of(text);
    ids.insert(ids.end(), body.begin(), body.end());
    return ids;
}

std::string detokenize(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id == kBos) continue;
        if (id < 0 || id > 255) throw DimensionError("detokenize: id " + std::to_string(id) + " outside vocabulary");
        out.push_back(static_cast<char>(id));
    }
    return out;
}

std::string token_label(int id) {
    if (id == kBos) return "<BOS>";
    if (id == '\n') return "\\n";
    if (id == '\t') return "\\t";
    if (id >= 32 && id < 127) return std::string(1, static_cast<char>(id));
    char buf[8];
    std::snprintf(buf, sizeof buf, "\\x%02x", id & 0xff);
    return buf;
}

}  // namespace dynakv::text
