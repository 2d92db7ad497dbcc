// SPDX-License-Identifier: Apache-2.0
//
// Catalogue of differentiable operations for finite-difference checking. Each case
// builds fresh random inputs from a seed and returns the gradcheck result.

#pragma once

#include <string>
#include <vector>

#include "dynakv/gate.hpp"
#include "dynakv/model.hpp"
#include "dynakv/trainer.hpp"
#include "gradcheck.hpp"

namespace dynakv::testing {

struct OpCase {
    std::string name;
    std::function<GradCheckResult(std::uint64_t seed)> run;
};

namespace detail {

/// Unary tensor op probed by a random weighting.
inline OpCase unary(std::string name, Shape shape, std::function<ad::Var(const ad::Var&)> op, double lo = -1.0,
                    double hi = 1.0) {
    return {name, [=](std::uint64_t seed) {
                std::mt19937_64 rng(seed);
                ad::Var x = ad::Var::param(random_tensor(shape, rng, lo, hi));
                const Tensor probe_w = random_tensor(op(x).value().shape(), rng);
                return gradcheck({x}, [&] { return probe(op(x), probe_w); }, seed);
            }};
}

inline OpCase binary(std::string name, Shape sa, Shape sb, std::function<ad::Var(const ad::Var&, const ad::Var&)> op) {
    return {name, [=](std::uint64_t seed) {
                std::mt19937_64 rng(seed);
                ad::Var a = ad::Var::param(random_tensor(sa, rng));
                ad::Var b = ad::Var::param(random_tensor(sb, rng));
                const Tensor probe_w = random_tensor(op(a, b).value().shape(), rng);
                return gradcheck({a, b}, [&] { return probe(op(a, b), probe_w); }, seed);
            }};
}

/// A small model with non-trivial bases and gates so every soft-mode path is live.
inline model::Model composite_model(std::uint64_t seed) {
    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.head_dim = 4;
    cfg.d_model = 8;
    cfg.max_seq_len = 16;
    cfg.mlp_mult = 2;
    cfg.init_std = 0.3;
    model::Model m = model::Model::init(cfg, seed);
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    const std::size_t d = cfg.d_kv();
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (Stream s : {Stream::Key, Stream::Value}) {
            Tensor u = Tensor::identity(d);
            u.add_inplace(random_tensor({d, d}, rng, -0.2, 0.2));
            spectral::SpectralBasis b = spectral::identity_basis(d, static_cast<int>(l), s);
            b.U = u;
            b.orthonormal = false;
            b = spectral::refresh_inverse(b);
            m.set_basis(l, s, b);
            auto& g = m.layers[l].gate(s);
            ad::Var W = g.W, bias = g.b;
            W.mutable_value() = random_tensor({d, d}, rng, -0.5, 0.5);
            bias.mutable_value() = random_tensor({d}, rng, -1.0, 1.0);
        }
    }
    return m;
}

}  // namespace detail

inline std::vector<OpCase> op_cases() {
    using namespace detail;
    std::vector<OpCase> c;
    c.push_back(binary("matmul", {3, 4}, {4, 5}, [](const ad::Var& a, const ad::Var& b) { return ad::matmul(a, b); }));
    c.push_back(unary("transpose", {3, 5}, [](const ad::Var& a) { return ad::transpose(a); }));
    c.push_back({"matinv", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     Tensor a = Tensor::identity(4);
                     a.add_inplace(random_tensor({4, 4}, rng, -0.3, 0.3));
                     ad::Var x = ad::Var::param(a);
                     const Tensor w = random_tensor({4, 4}, rng);
                     return gradcheck({x}, [&] { return probe(ad::matinv(x), w); }, seed);
                 }});
    c.push_back(binary("add", {3, 4}, {3, 4}, [](const ad::Var& a, const ad::Var& b) { return ad::add(a, b); }));
    c.push_back(binary("sub", {3, 4}, {3, 4}, [](const ad::Var& a, const ad::Var& b) { return ad::sub(a, b); }));
    c.push_back(binary("mul", {3, 4}, {3, 4}, [](const ad::Var& a, const ad::Var& b) { return ad::mul(a, b); }));
    c.push_back(unary("scale", {3, 4}, [](const ad::Var& a) { return ad::scale(a, -1.7); }));
    c.push_back(unary("exp", {3, 4}, [](const ad::Var& a) { return ad::exp(a); }));
    c.push_back(unary("log", {3, 4}, [](const ad::Var& a) { return ad::log(a); }, 0.5, 2.0));
    c.push_back(unary("gelu", {3, 4}, [](const ad::Var& a) { return ad::gelu(a); }, -3.0, 3.0));
    c.push_back(binary("add_bias", {3, 4}, {4}, [](const ad::Var& a, const ad::Var& b) { return ad::add_bias(a, b); }));
    c.push_back(unary("reshape", {3, 4}, [](const ad::Var& a) { return ad::reshape(a, {2, 6}); }));
    c.push_back(binary("concat_rows", {2, 3}, {4, 3}, [](const ad::Var& a, const ad::Var& b) {
        const ad::Var parts[] = {a, b};
        return ad::concat(parts, 0);
    }));
    c.push_back(binary("concat_cols", {3, 2}, {3, 4}, [](const ad::Var& a, const ad::Var& b) {
        const ad::Var parts[] = {a, b};
        return ad::concat(parts, 1);
    }));
    c.push_back(unary("slice_rows", {5, 3}, [](const ad::Var& a) { return ad::slice(a, 0, 1, 3); }));
    c.push_back(unary("slice_cols", {3, 5}, [](const ad::Var& a) { return ad::slice(a, 1, 2, 2); }));
    c.push_back(unary("embedding_lookup", {6, 3}, [](const ad::Var& a) {
        static const int ids[] = {4, 1, 4, 0};
        return ad::embedding_lookup(a, ids);
    }));
    c.push_back(unary("softmax", {3, 5}, [](const ad::Var& a) { return ad::softmax(a); }, -2.0, 2.0));
    c.push_back(unary("causal_softmax", {4, 6}, [](const ad::Var& a) {
        static const std::size_t qp[] = {2, 3, 4, 5};
        static const std::size_t kp[] = {0, 1, 2, 3, 4, 5};
        return ad::causal_softmax(a, qp, kp);
    }, -2.0, 2.0));
    c.push_back(unary("reverse_cumsum", {3, 5}, [](const ad::Var& a) { return ad::reverse_cumsum(a); }));
    c.push_back({"layer_norm", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     ad::Var x = ad::Var::param(random_tensor({3, 6}, rng, -2.0, 2.0));
                     ad::Var g = ad::Var::param(random_tensor({6}, rng, 0.5, 1.5));
                     ad::Var b = ad::Var::param(random_tensor({6}, rng));
                     const Tensor w = random_tensor({3, 6}, rng);
                     return gradcheck({x, g, b}, [&] { return probe(ad::layer_norm(x, g, b), w); }, seed);
                 }});
    c.push_back(unary("sum", {3, 4}, [](const ad::Var& a) { return ad::sum(a); }));
    c.push_back(unary("mean", {3, 4}, [](const ad::Var& a) { return ad::mean(a); }));
    c.push_back(unary("cross_entropy", {4, 7}, [](const ad::Var& a) {
        static const int targets[] = {3, 0, 6, 3};
        return ad::cross_entropy(a, targets);
    }, -2.0, 2.0));
    c.push_back({"soft_mask(cutoff_distribution)", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     const std::size_t d = 6;
                     gate::GateParams g = gate::GateParams::initial(d, 0, Stream::Key, 0.5);
                     g.W.mutable_value() = random_tensor({d, d}, rng, -0.5, 0.5);
                     ad::Var x = ad::Var::param(random_tensor({4, d}, rng));
                     const Tensor w = random_tensor({4, d}, rng);
                     return gradcheck({x, g.W, g.b},
                                      [&] { return probe(gate::soft_mask(gate::cutoff_distribution(g, x)), w); }, seed);
                 }});
    c.push_back({"composite_loss(model, soft, trainable basis)", [](std::uint64_t seed) {
                     model::Model m = composite_model(seed);
                     const std::vector<int> input{256, 72, 105, 33, 10, 72, 105};
                     const std::vector<int> target{72, 105, 33, 10, 72, 105, 46};
                     model::ForwardOptions fo{.mode = model::Mode::Soft, .trainable_basis = true};
                     auto loss = [&] {
                         const auto ctx = model::prepare_graph(m, fo);
                         const auto out = model::forward_graph(m, ctx, input, fo);
                         const ad::Var R = ad::scale(out.soft_rate_sum, 1.0 / static_cast<double>(out.rate_terms));
                         return model::composite_loss(ad::cross_entropy(out.logits, target), R, 0.7);
                     };
                     std::vector<ad::Var> ps;
                     for (const auto& [name, v] : m.named_params()) ps.push_back(v);
                     return gradcheck(ps, loss, seed, 6);
                 }});
    return c;
}

}  // namespace dynakv::testing
