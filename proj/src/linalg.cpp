// SPDX-License-Identifier: Apache-2.0

#include "dynakv/linalg.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dynakv/error.hpp"

namespace dynakv::linalg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

void require_matrix(const Tensor& t, const char* what) {
    if (t.ndim() != 2) throw DimensionError(std::string(what) + ": expected matrix, got " + shape_str(t.shape()));
}

CMap view(const Tensor& t) {
    return CMap(t.data(), static_cast<Eigen::Index>(t.shape()[0]), static_cast<Eigen::Index>(t.shape()[1]));
}

MMap view(Tensor& t) {
    return MMap(t.data(), static_cast<Eigen::Index>(t.shape()[0]), static_cast<Eigen::Index>(t.shape()[1]));
}

void check_out(const Tensor& out, std::size_t r, std::size_t c, const char* what) {
    if (out.shape() != Shape{r, c}) {
        throw DimensionError(std::string(what) + ": output " + shape_str(out.shape()) + " expected " +
                             shape_str({r, c}));
    }
}

}  // namespace

void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul inner dimensions " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
    }
    check_out(out, a.shape()[0], b.shape()[1], "matmul");
    if (a.empty() || b.empty()) return;
    view(out).noalias() += view(a) * view(b);
}

void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.shape()[1] != b.shape()[1]) {
        throw DimensionError("matmul_nt inner dimensions " + shape_str(a.shape()) + " · " + shape_str(b.shape()) + "ᵀ");
    }
    check_out(out, a.shape()[0], b.shape()[0], "matmul_nt");
    if (a.empty() || b.empty()) return;
    view(out).noalias() += view(a) * view(b).transpose();
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (a.shape()[0] != b.shape()[0]) {
        throw DimensionError("matmul_tn inner dimensions " + shape_str(a.shape()) + "ᵀ · " + shape_str(b.shape()));
    }
    check_out(out, a.shape()[1], b.shape()[1], "matmul_tn");
    if (a.empty() || b.empty()) return;
    view(out).noalias() += view(a).transpose() * view(b);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    Tensor out({a.shape()[0], b.shape()[1]});
    matmul_acc(a, b, out);
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    Tensor out({a.shape()[0], b.shape()[0]});
    matmul_nt_acc(a, b, out);
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    Tensor out({a.shape()[1], b.shape()[1]});
    matmul_tn_acc(a, b, out);
    return out;
}

double norm1(const Tensor& a) {
    require_matrix(a, "norm1");
    double best = 0.0;
    for (std::size_t j = 0; j < a.shape()[1]; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.shape()[0]; ++i) s += std::abs(a.at(i, j));
        best = std::max(best, s);
    }
    return best;
}

Inverse invert(const Tensor& a, double max_condition) {
    require_matrix(a, "invert");
    const std::size_t n = a.shape()[0];
    if (a.shape()[1] != n) throw DimensionError("invert: matrix not square " + shape_str(a.shape()));

    Tensor lu = a;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    const double inf = std::numeric_limits<double>::infinity();

    for (std::size_t k = 0; k < n; ++k) {
        std::size_t pivot = k;
        double best = std::abs(lu.at(k, k));
        for (std::size_t i = k + 1; i < n; ++i) {
            if (std::abs(lu.at(i, k)) > best) {
                best = std::abs(lu.at(i, k));
                pivot = i;
            }
        }
        if (best == 0.0 || !std::isfinite(best)) throw InvertibilityError("invert: matrix is singular", inf);
        if (pivot != k) {
            std::swap_ranges(lu.row(k).begin(), lu.row(k).end(), lu.row(pivot).begin());
            std::swap(perm[k], perm[pivot]);
        }
        const double diag = lu.at(k, k);
        for (std::size_t i = k + 1; i < n; ++i) {
            const double f = lu.at(i, k) / diag;
            lu.at(i, k) = f;
            if (f == 0.0) continue;
            for (std::size_t j = k + 1; j < n; ++j) lu.at(i, j) -= f * lu.at(k, j);
        }
    }

    // Solve L·U·X = P·I column by column.
    Tensor inv({n, n});
    std::vector<double> col(n);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < n; ++i) col[i] = perm[i] == c ? 1.0 : 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < i; ++j) col[i] -= lu.at(i, j) * col[j];
        for (std::size_t i = n; i-- > 0;) {
            for (std::size_t j = i + 1; j < n; ++j) col[i] -= lu.at(i, j) * col[j];
            col[i] /= lu.at(i, i);
        }
        for (std::size_t i = 0; i < n; ++i) inv.at(i, c) = col[i];
    }

    const double cond = norm1(a) * norm1(inv);
    if (!std::isfinite(cond) || cond > max_condition) {
        throw InvertibilityError("invert: matrix is ill-conditioned (cond1 ≈ " + std::to_string(cond) + ")", cond);
    }
    return {std::move(inv), cond};
}

SymmetricEigen jacobi_eigen(const Tensor& sym, double tol, int max_sweeps) {
    require_matrix(sym, "jacobi_eigen");
    const std::size_t n = sym.shape()[0];
    if (sym.shape()[1] != n) throw DimensionError("jacobi_eigen: matrix not square");

    Tensor a = sym;
    Tensor v = Tensor::identity(n);

    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) s += a.at(i, j) * a.at(i, j);
        return std::sqrt(s);
    };

    int sweep = 0;
    for (; sweep < max_sweeps && off_norm() > tol; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (apq == 0.0) continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a.at(x, x) > a.at(y, y); });

    SymmetricEigen out;
    out.sweeps = sweep;
    out.values.resize(n);
    out.vectors = Tensor({n, n});
    for (std::size_t c = 0; c < n; ++c) {
        const std::size_t src = order[c];
        out.values[c] = a.at(src, src);
        std::size_t arg = 0;
        for (std::size_t k = 1; k < n; ++k)
            if (std::abs(v.at(k, src)) > std::abs(v.at(arg, src))) arg = k;
        const double sign = v.at(arg, src) < 0 ? -1.0 : 1.0;
        for (std::size_t k = 0; k < n; ++k) out.vectors.at(k, c) = sign * v.at(k, src);
    }
    return out;
}

}  // namespace dynakv::linalg
