// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "dynakv/tensor.hpp"

namespace dynakv {

enum class Stream { Key = 0, Value = 1 };

std::string_view stream_name(Stream s);
Stream parse_stream(std::string_view s);

}  // namespace dynakv

namespace dynakv::spectral {

/// Running first and second moments of row vectors, used to estimate the covariance
/// of pre-RoPE key or value states.
class CovarianceAccumulator {
public:
    explicit CovarianceAccumulator(std::size_t dim);

    /// Adds every row of `batch` (T×dim). An empty batch is a no-op.
    void accumulate(const Tensor& batch);
    void accumulate_row(std::span<const double> row);
    /// Folds another accumulator into this one. Merge shards in a fixed order for
    /// bit-reproducible results.
    void merge(const CovarianceAccumulator& other);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t count() const noexcept { return count_; }
    const std::vector<double>& sum() const noexcept { return sum_; }
    /// Σ x xᵀ
    const Tensor& outer_sum() const noexcept { return outer_; }

    std::vector<double> mean() const;
    /// Mean-centered covariance Σxxᵀ/n − μμᵀ.
    Tensor covariance() const;

private:
    std::size_t dim_;
    std::size_t count_ = 0;
    std::vector<double> sum_;
    Tensor outer_;
};

inline constexpr double kOrthonormalTol = 1e-8;

/// Projection U (columns ordered by captured variance) and its inverse.
struct SpectralBasis {
    Tensor U;
    Tensor U_inv;
    std::vector<double> eigenvalues;  // descending
    bool orthonormal = true;
    int layer = 0;
    Stream stream = Stream::Key;

    std::size_t dim() const noexcept { return U.rows(); }
};

/// PCA of the accumulated covariance. Throws InsufficientDataError when count < dim.
SpectralBasis compute_basis(const CovarianceAccumulator& acc, int layer = 0, Stream stream = Stream::Key);
SpectralBasis identity_basis(std::size_t dim, int layer = 0, Stream stream = Stream::Key);

/// x·U for x of shape T×d.
Tensor project(const SpectralBasis& basis, const Tensor& x);

/// prefix · U_inv[0:r, :] with r = prefix.size(). Throws RankError unless 1 ≤ r ≤ d.
std::vector<double> reconstruct(const SpectralBasis& basis, std::span<const double> prefix);
void reconstruct_into(const SpectralBasis& basis, std::span<const double> prefix, std::span<double> out);

/// Recomputes U_inv from U. Keeps the orthonormal flag (and U_inv = Uᵀ) only if
/// UᵀU = I within kOrthonormalTol. Throws InvertibilityError for singular U.
SpectralBasis refresh_inverse(SpectralBasis basis);

bool is_orthonormal(const Tensor& U, double tol = kOrthonormalTol);

/// Writes `<stem>.U.dkvt`, `<stem>.Uinv.dkvt` and a `<stem>.json` sidecar
/// {layer, stream, eigenvalues, orthonormal_flag}.
void save_basis(const std::filesystem::path& dir, const std::string& stem, const SpectralBasis& basis);
SpectralBasis load_basis(const std::filesystem::path& dir, const std::string& stem);

}  // namespace dynakv::spectral
