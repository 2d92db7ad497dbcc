// SPDX-License-Identifier: Apache-2.0

#include "dynakv/spectral.hpp"

#include <cmath>

#include "dynakv/error.hpp"
#include "dynakv/linalg.hpp"
#include "dynakv/serialize.hpp"

namespace dynakv {

std::string_view stream_name(Stream s) { return s == Stream::Key ? "K" : "V"; }

Stream parse_stream(std::string_view s) {
    if (s == "K") return Stream::Key;
    if (s == "V") return Stream::Value;
    throw ConfigError("unknown stream '" + std::string(s) + "'");
}

}  // namespace dynakv

namespace dynakv::spectral {

CovarianceAccumulator::CovarianceAccumulator(std::size_t dim) : dim_(dim), sum_(dim, 0.0), outer_({dim, dim}) {}

void CovarianceAccumulator::accumulate(const Tensor& batch) {
    if (batch.empty()) return;
    if (batch.cols() != dim_) {
        throw DimensionError("accumulate: batch width " + std::to_string(batch.cols()) + " != " +
                             std::to_string(dim_));
    }
    for (std::size_t r = 0; r < batch.rows(); ++r)
        for (std::size_t j = 0; j < dim_; ++j) sum_[j] += batch.at(r, j);
    linalg::matmul_tn_acc(batch.reshaped({batch.rows(), dim_}), batch.reshaped({batch.rows(), dim_}), outer_);
    count_ += batch.rows();
}

void CovarianceAccumulator::accumulate_row(std::span<const double> row) {
    accumulate(Tensor({1, row.size()}, std::vector<double>(row.begin(), row.end())));
}

void CovarianceAccumulator::merge(const CovarianceAccumulator& other) {
    if (other.dim_ != dim_) throw DimensionError("merge: accumulator dims differ");
    for (std::size_t j = 0; j < dim_; ++j) sum_[j] += other.sum_[j];
    outer_.add_inplace(other.outer_);
    count_ += other.count_;
}

std::vector<double> CovarianceAccumulator::mean() const {
    if (count_ == 0) throw InsufficientDataError("mean of empty accumulator");
    std::vector<double> mu(sum_);
    for (double& v : mu) v /= static_cast<double>(count_);
    return mu;
}

Tensor CovarianceAccumulator::covariance() const {
    const auto mu = mean();
    Tensor cov = outer_;
    const double n = static_cast<double>(count_);
    for (std::size_t i = 0; i < dim_; ++i)
        for (std::size_t j = 0; j < dim_; ++j) cov.at(i, j) = cov.at(i, j) / n - mu[i] * mu[j];
    // Symmetrize away rounding asymmetry before the eigensolver.
    for (std::size_t i = 0; i < dim_; ++i)
        for (std::size_t j = i + 1; j < dim_; ++j) {
            const double s = 0.5 * (cov.at(i, j) + cov.at(j, i));
            cov.at(i, j) = cov.at(j, i) = s;
        }
    return cov;
}

SpectralBasis compute_basis(const CovarianceAccumulator& acc, int layer, Stream stream) {
    if (acc.count() < acc.dim()) {
        throw InsufficientDataError("compute_basis: " + std::to_string(acc.count()) + " samples for dimension " +
                                    std::to_string(acc.dim()));
    }
    auto eig = linalg::jacobi_eigen(acc.covariance());
    SpectralBasis b;
    b.U_inv = eig.vectors.transposed();
    b.U = std::move(eig.vectors);
    b.eigenvalues = std::move(eig.values);
    b.orthonormal = true;
    b.layer = layer;
    b.stream = stream;
    return b;
}

SpectralBasis identity_basis(std::size_t dim, int layer, Stream stream) {
    SpectralBasis b;
    b.U = Tensor::identity(dim);
    b.U_inv = Tensor::identity(dim);
    b.eigenvalues.assign(dim, 1.0);
    b.layer = layer;
    b.stream = stream;
    return b;
}

Tensor project(const SpectralBasis& basis, const Tensor& x) {
    if (x.cols() != basis.dim()) {
        throw DimensionError("project: width " + std::to_string(x.cols()) + " vs basis " +
                             std::to_string(basis.dim()));
    }
    return linalg::matmul(x.reshaped({x.rows(), x.cols()}), basis.U).reshaped(x.shape());
}

void reconstruct_into(const SpectralBasis& basis, std::span<const double> prefix, std::span<double> out) {
    const std::size_t d = basis.dim();
    const std::size_t r = prefix.size();
    if (r == 0 || r > d) {
        throw RankError("reconstruct: rank " + std::to_string(r) + " outside [1, " + std::to_string(d) + "]");
    }
    if (out.size() != d) throw DimensionError("reconstruct: output width mismatch");
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        const double c = prefix[i];
        const double* row = basis.U_inv.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) out[j] += c * row[j];
    }
}

std::vector<double> reconstruct(const SpectralBasis& basis, std::span<const double> prefix) {
    std::vector<double> out(basis.dim());
    reconstruct_into(basis, prefix, out);
    return out;
}

bool is_orthonormal(const Tensor& U, double tol) {
    const Tensor gram = linalg::matmul_tn(U, U);
    return max_abs_diff(gram, Tensor::identity(U.rows())) <= tol;
}

SpectralBasis refresh_inverse(SpectralBasis basis) {
    if (is_orthonormal(basis.U)) {
        basis.U_inv = basis.U.transposed();
        basis.orthonormal = true;
    } else {
        basis.U_inv = linalg::invert(basis.U).inverse;
        basis.orthonormal = false;
    }
    return basis;
}

void save_basis(const std::filesystem::path& dir, const std::string& stem, const SpectralBasis& basis) {
    std::filesystem::create_directories(dir);
    io::write_dkvt(dir / (stem + ".U.dkvt"), basis.U);
    io::write_dkvt(dir / (stem + ".Uinv.dkvt"), basis.U_inv);
    io::write_json(dir / (stem + ".json"), {{"layer", basis.layer},
                                            {"stream", std::string(stream_name(basis.stream))},
                                            {"eigenvalues", basis.eigenvalues},
                                            {"orthonormal_flag", basis.orthonormal}});
}

SpectralBasis load_basis(const std::filesystem::path& dir, const std::string& stem) {
    SpectralBasis b;
    b.U = io::read_dkvt(dir / (stem + ".U.dkvt"));
    b.U_inv = io::read_dkvt(dir / (stem + ".Uinv.dkvt"));
    const auto meta = io::read_json(dir / (stem + ".json"));
    b.layer = meta.at("layer").get<int>();
    b.stream = parse_stream(meta.at("stream").get<std::string>());
    b.eigenvalues = meta.at("eigenvalues").get<std::vector<double>>();
    b.orthonormal = meta.at("orthonormal_flag").get<bool>();
    if (b.U.shape() != b.U_inv.shape() || b.U.rows() != b.U.cols()) {
        throw IoError("basis " + stem + ": inconsistent matrix shapes");
    }
    return b;
}

}  // namespace dynakv::spectral
