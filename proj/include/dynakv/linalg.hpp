// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "dynakv/tensor.hpp"

namespace dynakv::linalg {

/// C = A·B for row-major matrices.
Tensor matmul(const Tensor& a, const Tensor& b);
/// C = A·Bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// C = Aᵀ·B
Tensor matmul_tn(const Tensor& a, const Tensor& b);

/// out += A·B, out += A·Bᵀ, out += Aᵀ·B. `out` must already have the result shape.
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out);
void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out);
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out);

struct Inverse {
    Tensor inverse;
    double condition;  // ‖A‖₁·‖A⁻¹‖₁
};

inline constexpr double kMaxCondition = 1e8;

/// LU with partial pivoting. Throws InvertibilityError for singular input or when
/// the 1-norm condition number exceeds `max_condition`.
Inverse invert(const Tensor& a, double max_condition = kMaxCondition);

double norm1(const Tensor& a);

struct SymmetricEigen {
    std::vector<double> values;  // descending; ties keep original column order
    Tensor vectors;              // columns are eigenvectors, largest-magnitude entry positive
    int sweeps = 0;
};

/// Cyclic Jacobi for symmetric matrices. Stops once the off-diagonal Frobenius norm is
/// below `tol`.
SymmetricEigen jacobi_eigen(const Tensor& sym, double tol = 1e-12, int max_sweeps = 100);

}  // namespace dynakv::linalg
