// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dynakv/tensor.hpp"

namespace dynakv::ad {

/// One vertex of the computation graph. Parents are owned, so a graph lives exactly as
/// long as the Var handles that reach it.
struct Node {
    Tensor value;
    Tensor grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    Tensor& ensure_grad();
    /// grad += g, materializing a zero gradient first if needed.
    void accumulate(const Tensor& g);
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    /// Trainable leaf.
    static Var param(Tensor value) { return Var(std::move(value), true); }
    static Var constant(Tensor value) { return Var(std::move(value), false); }

    const Tensor& value() const { return node_->value; }
    /// For optimizers and tests; mutating a non-leaf invalidates its graph.
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    /// Gradient, or a zero tensor of the value's shape if nothing flowed here.
    Tensor grad() const;
    void zero_grad();

    /// Seeds d(self)/d(self) = 1 and propagates through the graph in reverse
    /// topological order. Requires a single-element value.
    void backward() const;

    const std::shared_ptr<Node>& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Builds a result node. The backward rule runs only if some parent requires grad
/// (and recording is enabled); it receives the result node, whose `grad` is set.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward, const char* op);

// Linear algebra
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// Differentiable inverse; throws InvertibilityError past linalg::kMaxCondition.
Var matinv(const Var& a);

// Elementwise (exact shape match, no broadcasting)
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var gelu(const Var& a);
/// x[..., d] + bias[d]
Var add_bias(const Var& x, const Var& bias);

// Structural
Var reshape(const Var& a, Shape shape);
/// Concatenate matrices along the last axis (axis = 1) or rows (axis = 0).
Var concat(std::span<const Var> parts, std::size_t axis);
/// Matrix slice [start, start + len) along axis 0 (rows) or 1 (columns).
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t len);
Var embedding_lookup(const Var& table, std::span<const int> ids);

// Reductions and normalizations over the last axis
Var softmax(const Var& x);
/// Row-wise softmax where query row i may attend to key column j only if
/// key_pos[j] <= query_pos[i].
Var causal_softmax(const Var& scores, std::span<const std::size_t> query_pos, std::span<const std::size_t> key_pos);
/// out[..., i] = Σ_{j ≥ i} x[..., j]
Var reverse_cumsum(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var sum(const Var& x);
Var mean(const Var& x);
/// Mean token negative log-likelihood of `targets` under row-wise softmax(logits).
Var cross_entropy(const Var& logits, std::span<const int> targets);

// Plain-tensor forward kernels shared with the inference path.
Tensor softmax_rows(const Tensor& x);
Tensor reverse_cumsum_rows(const Tensor& x);

// Optimizers
struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

void sgd_step(std::span<Var> params, double lr);

class Adam {
public:
    Adam(std::vector<Var> params, AdamConfig cfg);
    void step();
    void zero_grad();
    long steps() const noexcept { return t_; }
    const AdamConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    const std::vector<Var>& params() const noexcept { return params_; }

private:
    std::vector<Var> params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    long t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_grad_norm(std::span<Var> params, double max_norm);

}  // namespace dynakv::ad
