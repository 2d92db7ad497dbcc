// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <vector>

#include "dynakv/linalg.hpp"
#include "dynakv/model.hpp"
#include "gradcheck.hpp"

namespace dynakv::testing {

inline model::ModelConfig small_config() {
    model::ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.head_dim = 4;
    c.d_model = 16;
    c.max_seq_len = 64;
    c.mlp_mult = 2;
    c.init_std = 0.2;
    return c;
}

inline std::vector<int> random_tokens(std::size_t n, std::mt19937_64& rng, bool bos = true) {
    std::uniform_int_distribution<int> byte(0, 255);
    std::vector<int> t;
    if (bos) t.push_back(256);
    while (t.size() < n) t.push_back(byte(rng));
    return t;
}

/// Orthonormal PCA-like bases (from random SPD matrices) in every layer and stream.
inline void install_random_bases(model::Model& m, std::mt19937_64& rng) {
    const std::size_t d = m.config().d_kv();
    for (std::size_t l = 0; l < m.layers.size(); ++l)
        for (Stream s : {Stream::Key, Stream::Value}) {
            const Tensor a = random_tensor({d, d}, rng);
            const auto eig = linalg::jacobi_eigen(linalg::matmul_tn(a, a));
            auto b = spectral::identity_basis(d);
            b.U = eig.vectors;
            b.U_inv = eig.vectors.transposed();
            b.eigenvalues = eig.values;
            m.set_basis(l, s, b);
        }
}

/// Random gate weights strong enough that hard masks vary per token.
inline void randomize_gates(model::Model& m, std::mt19937_64& rng, double scale = 2.0) {
    const std::size_t d = m.config().d_kv();
    for (auto& p : m.layers)
        for (Stream s : {Stream::Key, Stream::Value}) {
            auto g = p.gate(s);
            g.W.mutable_value() = random_tensor({d, d}, rng, -scale, scale);
            g.b.mutable_value() = random_tensor({d}, rng, -scale, scale);
        }
}

}  // namespace dynakv::testing
