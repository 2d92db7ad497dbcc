// SPDX-License-Identifier: Apache-2.0

#include "dynakv/serialize.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "dynakv/error.hpp"

namespace dynakv::io {

namespace {

constexpr std::uint8_t kMagic[4] = {'D', 'K', 'V', 'T'};

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
U get_le(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    if (pos + sizeof(U) > bytes.size()) throw IoError("DKVT: truncated stream");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[pos + i]) << (8 * i);
    pos += sizeof(U);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_dkvt(const Tensor& t) {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    out.reserve(8 + 8 * t.ndim() + 8 * t.size());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    for (double v : t.values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

Tensor decode_dkvt(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
        throw IoError("DKVT: bad magic");
    }
    std::size_t pos = 4;
    const auto ndim = get_le<std::uint32_t>(bytes, pos);
    if (ndim > 16) throw IoError("DKVT: implausible rank " + std::to_string(ndim));
    Shape shape(ndim);
    for (auto& d : shape) d = get_le<std::uint64_t>(bytes, pos);
    const std::size_t n = shape_numel(shape);
    if (bytes.size() - pos != 8 * n) throw IoError("DKVT: payload size does not match shape " + shape_str(shape));
    std::vector<double> data(n);
    for (auto& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
    return Tensor(std::move(shape), std::move(data));
}

void write_dkvt(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode_dkvt(t);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

Tensor read_dkvt(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_dkvt(bytes);
}

nlohmann::json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"data", t.values()}};
}

Tensor tensor_from_json(const nlohmann::json& j) {
    try {
        return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("tensor JSON: ") + e.what());
    }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << j.dump(2) << '\n';
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

nlohmann::json read_json(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string config_hash(const nlohmann::json& j) { return fnv1a_hex(j.dump()); }

}  // namespace dynakv::io
