// SPDX-License-Identifier: Apache-2.0

#include "dynakv/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "dynakv/error.hpp"
#include "dynakv/linalg.hpp"

namespace dynakv::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

void require_matrix(const Var& a, const char* op) {
    if (a.shape().size() != 2) {
        throw DimensionError(std::string(op) + ": expected matrix, got " + shape_str(a.shape()));
    }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace

Tensor& Node::ensure_grad() {
    if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
}

void Node::accumulate(const Tensor& g) { ensure_grad().add_inplace(g); }

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
    if (node_->grad.size() == node_->value.size() && node_->grad.shape() == node_->value.shape()) return node_->grad;
    return Tensor(node_->value.shape());
}

void Var::zero_grad() { node_->grad = Tensor(); }

void Var::backward() const {
    if (node_->value.size() != 1) {
        throw DimensionError("backward() requires a scalar root, got " + shape_str(node_->value.shape()));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order without recursion depth limits.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward, const char* op) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    const bool needs = g_grad_enabled &&
                       std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward);
    }
    return Var(std::move(node));
}

// ---------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
    Tensor out = linalg::matmul(a.value(), b.value());
    return make_result(std::move(out), {a, b}, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) linalg::matmul_nt_acc(self.grad, pb.value, pa.ensure_grad());
        if (pb.requires_grad) linalg::matmul_tn_acc(pa.value, self.grad, pb.ensure_grad());
    }, "matmul");
}

Var transpose(const Var& a) {
    require_matrix(a, "transpose");
    return make_result(a.value().transposed(), {a}, [](Node& self) {
        parent(self, 0).accumulate(self.grad.transposed());
    }, "transpose");
}

Var matinv(const Var& a) {
    auto inv = linalg::invert(a.value());
    return make_result(std::move(inv.inverse), {a}, [](Node& self) {
        // d(A⁻¹) = −A⁻¹·dA·A⁻¹  ⇒  ∂L/∂A = −A⁻ᵀ·G·A⁻ᵀ
        const Tensor& inv_a = self.value;
        Tensor tmp = linalg::matmul_tn(inv_a, self.grad);
        Tensor g = linalg::matmul_nt(tmp, inv_a);
        for (double& v : g.span()) v = -v;
        parent(self, 0).accumulate(g);
    }, "matinv");
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    out.add_inplace(b.value());
    return make_result(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t i = 0; i < 2; ++i)
            if (parent(self, i).requires_grad) parent(self, i).accumulate(self.grad);
    }, "add");
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
        if (parent(self, 1).requires_grad) {
            Tensor& g = parent(self, 1).ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    }, "sub");
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) {
            Tensor& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            Tensor& g = pb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
    }, "mul");
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.span()) v *= s;
    return make_result(std::move(out), {a}, [s](Node& self) {
        Tensor& g = parent(self, 0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    }, "scale");
}

Var exp(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.span()) v = std::exp(v);
    return make_result(std::move(out), {a}, [](Node& self) {
        Tensor& g = parent(self, 0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    }, "exp");
}

Var log(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.span()) v = std::log(v);
    return make_result(std::move(out), {a}, [](Node& self) {
        Node& p = parent(self, 0);
        Tensor& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / p.value[i];
    }, "log");
}

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

Var gelu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.span()) {
        const double x = v;
        v = 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x)));
    }
    return make_result(std::move(out), {a}, [](Node& self) {
        Node& p = parent(self, 0);
        Tensor& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = p.value[i];
            const double t = std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x));
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
            g[i] += self.grad[i] * d;
        }
    }, "gelu");
}

Var add_bias(const Var& x, const Var& bias) {
    const std::size_t d = x.value().cols();
    if (bias.shape() != Shape{d}) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " for input " + shape_str(x.shape()));
    }
    Tensor out = x.value();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t j = 0; j < d; ++j) row[j] += bias.value()[j];
    }
    return make_result(std::move(out), {x, bias}, [](Node& self) {
        if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
        Node& pb = parent(self, 1);
        if (pb.requires_grad) {
            Tensor& g = pb.ensure_grad();
            for (std::size_t r = 0; r < self.grad.rows(); ++r) {
                auto row = self.grad.row(r);
                for (std::size_t j = 0; j < row.size(); ++j) g[j] += row[j];
            }
        }
    }, "add_bias");
}

// ---------------------------------------------------------------- structural

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return make_result(std::move(out), {a}, [](Node& self) {
        Node& p = parent(self, 0);
        p.accumulate(self.grad.reshaped(p.value.shape()));
    }, "reshape");
}

Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
    for (const auto& p : parts) require_matrix(p, "concat");
    const std::size_t other = 1 - axis;
    const std::size_t fixed = parts[0].shape()[other];
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.shape()[other] != fixed) throw DimensionError("concat: mismatched shapes");
        total += p.shape()[axis];
    }
    Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
    Tensor out(shape);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const Tensor& v = p.value();
        for (std::size_t r = 0; r < v.shape()[0]; ++r)
            for (std::size_t c = 0; c < v.shape()[1]; ++c) {
                if (axis == 0) out.at(off + r, c) = v.at(r, c);
                else out.at(r, off + c) = v.at(r, c);
            }
        off += p.shape()[axis];
    }
    std::vector<Var> parents(parts.begin(), parts.end());
    return make_result(std::move(out), std::move(parents), [axis, offsets](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            Node& p = parent(self, i);
            if (!p.requires_grad) continue;
            Tensor& g = p.ensure_grad();
            for (std::size_t r = 0; r < g.shape()[0]; ++r)
                for (std::size_t c = 0; c < g.shape()[1]; ++c)
                    g.at(r, c) += axis == 0 ? self.grad.at(offsets[i] + r, c) : self.grad.at(r, offsets[i] + c);
        }
    }, "concat");
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t len) {
    require_matrix(a, "slice");
    if (axis > 1) throw DimensionError("slice: axis must be 0 or 1");
    if (start + len > a.shape()[axis]) {
        throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") out of bounds for " + shape_str(a.shape()));
    }
    const Tensor& v = a.value();
    const std::size_t rows = axis == 0 ? len : v.shape()[0];
    const std::size_t cols = axis == 1 ? len : v.shape()[1];
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out.at(r, c) = axis == 0 ? v.at(start + r, c) : v.at(r, start + c);
    return make_result(std::move(out), {a}, [axis, start](Node& self) {
        Tensor& g = parent(self, 0).ensure_grad();
        for (std::size_t r = 0; r < self.grad.shape()[0]; ++r)
            for (std::size_t c = 0; c < self.grad.shape()[1]; ++c) {
                if (axis == 0) g.at(start + r, c) += self.grad.at(r, c);
                else g.at(r, start + c) += self.grad.at(r, c);
            }
    }, "slice");
}

Var embedding_lookup(const Var& table, std::span<const int> ids) {
    require_matrix(table, "embedding_lookup");
    const std::size_t vocab = table.shape()[0];
    const std::size_t d = table.shape()[1];
    Tensor out({ids.size(), d});
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
            throw DimensionError("embedding_lookup: id " + std::to_string(ids[t]) + " outside vocab " +
                                 std::to_string(vocab));
        }
        auto src = table.value().row(static_cast<std::size_t>(ids[t]));
        std::copy(src.begin(), src.end(), out.row(t).begin());
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return make_result(std::move(out), {table}, [idx = std::move(idx)](Node& self) {
        Tensor& g = parent(self, 0).ensure_grad();
        for (std::size_t t = 0; t < idx.size(); ++t) {
            auto dst = g.row(static_cast<std::size_t>(idx[t]));
            auto src = self.grad.row(t);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
    }, "embedding_lookup");
}

// ---------------------------------------------------------------- row ops

Tensor softmax_rows(const Tensor& x) {
    Tensor out = x;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double& v : row) {
            v = std::exp(v - mx);
            s += v;
        }
        for (double& v : row) v /= s;
    }
    return out;
}

namespace {

void softmax_backward(Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < self.value.rows(); ++r) {
        auto y = self.value.row(r);
        auto gy = self.grad.row(r);
        auto gx = g.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < y.size(); ++j) dot += y[j] * gy[j];
        for (std::size_t j = 0; j < y.size(); ++j) gx[j] += y[j] * (gy[j] - dot);
    }
}

}  // namespace

Var softmax(const Var& x) {
    if (x.value().cols() == 0) throw DimensionError("softmax over empty axis");
    return make_result(softmax_rows(x.value()), {x}, softmax_backward, "softmax");
}

Var causal_softmax(const Var& scores, std::span<const std::size_t> query_pos, std::span<const std::size_t> key_pos) {
    require_matrix(scores, "causal_softmax");
    if (scores.shape()[0] != query_pos.size() || scores.shape()[1] != key_pos.size()) {
        throw DimensionError("causal_softmax: positions do not match scores " + shape_str(scores.shape()));
    }
    Tensor out = scores.value();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        bool visible = false;
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (key_pos[j] > query_pos[r]) continue;
            if (!std::isfinite(row[j])) throw NumericError("causal_softmax: non-finite score");
            mx = std::max(mx, row[j]);
            visible = true;
        }
        if (!visible) throw ContractError("causal_softmax: query has no visible key");
        double s = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] = key_pos[j] <= query_pos[r] ? std::exp(row[j] - mx) : 0.0;
            s += row[j];
        }
        for (double& v : row) v /= s;
    }
    // Masked entries have y = 0, so the dense softmax backward leaves them untouched.
    return make_result(std::move(out), {scores}, softmax_backward, "causal_softmax");
}

Tensor reverse_cumsum_rows(const Tensor& x) {
    Tensor out = x;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        double acc = 0.0;
        for (std::size_t j = row.size(); j-- > 0;) {
            acc += row[j];
            row[j] = acc;
        }
    }
    return out;
}

Var reverse_cumsum(const Var& x) {
    return make_result(reverse_cumsum_rows(x.value()), {x}, [](Node& self) {
        // Adjoint of a suffix sum is a prefix sum of the incoming gradient.
        Tensor& g = parent(self, 0).ensure_grad();
        for (std::size_t r = 0; r < self.grad.rows(); ++r) {
            auto gy = self.grad.row(r);
            auto gx = g.row(r);
            double acc = 0.0;
            for (std::size_t j = 0; j < gy.size(); ++j) {
                acc += gy[j];
                gx[j] += acc;
            }
        }
    }, "reverse_cumsum");
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
    const std::size_t d = x.value().cols();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw DimensionError("layer_norm: parameter shapes do not match width " + std::to_string(d));
    }
    const std::size_t rows = x.value().rows();
    Tensor out = x.value();
    Tensor xhat = x.value();
    std::vector<double> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        auto xr = x.value().row(r);
        double mu = 0.0;
        for (double v : xr) mu += v;
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (double v : xr) var += (v - mu) * (v - mu);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        auto hr = xhat.row(r);
        auto orow = out.row(r);
        for (std::size_t j = 0; j < d; ++j) {
            hr[j] = (xr[j] - mu) * rstd[r];
            orow[j] = hr[j] * gain.value()[j] + bias.value()[j];
        }
    }
    return make_result(std::move(out), {x, gain, bias},
                       [xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        Node& px = parent(self, 0);
        Node& pg = parent(self, 1);
        Node& pb = parent(self, 2);
        const std::size_t d = self.value.cols();
        const auto& gain = pg.value;
        for (std::size_t r = 0; r < self.value.rows(); ++r) {
            auto gy = self.grad.row(r);
            auto hr = xhat.row(r);
            if (pg.requires_grad) {
                Tensor& gg = pg.ensure_grad();
                for (std::size_t j = 0; j < d; ++j) gg[j] += gy[j] * hr[j];
            }
            if (pb.requires_grad) {
                Tensor& gb = pb.ensure_grad();
                for (std::size_t j = 0; j < d; ++j) gb[j] += gy[j];
            }
            if (px.requires_grad) {
                double mean_dh = 0.0, mean_dh_h = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dh = gy[j] * gain[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                }
                mean_dh /= static_cast<double>(d);
                mean_dh_h /= static_cast<double>(d);
                auto gx = px.ensure_grad().row(r);
                for (std::size_t j = 0; j < d; ++j)
                    gx[j] += rstd[r] * (gy[j] * gain[j] - mean_dh - hr[j] * mean_dh_h);
            }
        }
    }, "layer_norm");
}

Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return make_result(Tensor::scalar(s), {x}, [](Node& self) {
        Tensor& g = parent(self, 0).ensure_grad();
        const double gs = self.grad[0];
        for (double& v : g.span()) v += gs;
    }, "sum");
}

Var mean(const Var& x) {
    if (x.value().empty()) throw DimensionError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
    require_matrix(logits, "cross_entropy");
    const std::size_t rows = logits.shape()[0];
    const std::size_t vocab = logits.shape()[1];
    if (targets.size() != rows) throw DimensionError("cross_entropy: targets/logits row mismatch");
    if (rows == 0) throw DimensionError("cross_entropy: empty batch");
    Tensor probs = softmax_rows(logits.value());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw DimensionError("cross_entropy: target outside vocab");
        }
        // log p via logsumexp keeps precision where p underflows.
        auto row = logits.value().row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double v : row) s += std::exp(v - mx);
        total += mx + std::log(s) - row[static_cast<std::size_t>(targets[r])];
    }
    std::vector<int> tgt(targets.begin(), targets.end());
    return make_result(Tensor::scalar(total / static_cast<double>(rows)), {logits},
                       [probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
        Tensor& g = parent(self, 0).ensure_grad();
        const double gs = self.grad[0] / static_cast<double>(tgt.size());
        for (std::size_t r = 0; r < tgt.size(); ++r) {
            auto pr = probs.row(r);
            auto gr = g.row(r);
            for (std::size_t j = 0; j < pr.size(); ++j) gr[j] += gs * pr[j];
            gr[static_cast<std::size_t>(tgt[r])] -= gs;
        }
    }, "cross_entropy");
}

// ---------------------------------------------------------------- optimizers

void sgd_step(std::span<Var> params, double lr) {
    for (auto& p : params) {
        const Tensor g = p.grad();
        Tensor& w = p.mutable_value();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    }
}

Adam::Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
        m_.emplace_back(p.shape());
        v_.emplace_back(p.shape());
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const Node& n = *params_[k].node();
        if (n.grad.size() != n.value.size()) continue;  // no gradient reached this parameter
        Tensor& w = params_[k].mutable_value();
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double g = n.grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

double clip_grad_norm(std::span<Var> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        const Node& n = *p.node();
        for (double g : n.grad.values()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double f = max_norm / norm;
        for (auto& p : params)
            for (double& g : p.node()->grad.span()) g *= f;
    }
    return norm;
}

}  // namespace dynakv::ad
