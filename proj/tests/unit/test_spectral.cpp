// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <random>

#include "../support/gradcheck.hpp"
#include "dynakv/error.hpp"
#include "dynakv/linalg.hpp"
#include "dynakv/spectral.hpp"

using namespace dynakv;
namespace sp = dynakv::spectral;

namespace {

/// Rows x = z·L with z standard normal, so cov(x) = LᵀL.
Tensor gaussian_rows(std::size_t n, const Tensor& L, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Tensor z({n, L.rows()});
    for (double& v : z.span()) v = nd(rng);
    return linalg::matmul(z, L);
}

Tensor empirical_cov(const Tensor& x) {
    sp::CovarianceAccumulator acc(x.cols());
    acc.accumulate(x);
    return acc.covariance();
}

}  // namespace

TEST_CASE("accumulator algebra") {
    sp::CovarianceAccumulator a(2), b(2), c(2);
    a.accumulate(Tensor({0, 2}));
    CHECK(a.count() == 0);
    a.accumulate(Tensor::matrix({{1, 2}}));
    a.accumulate(Tensor::matrix({{3, -1}}));
    b.accumulate(Tensor::matrix({{1, 2}, {3, -1}}));
    CHECK(max_abs_diff(a.outer_sum(), b.outer_sum()) <= 1e-12);
    CHECK(a.count() == b.count());
    CHECK_THROWS_AS(c.accumulate(Tensor({1, 3})), DimensionError);

    std::mt19937_64 rng(1);
    sp::CovarianceAccumulator x(3), y(3), z(3);
    x.accumulate(testing::random_tensor({5, 3}, rng));
    y.accumulate(testing::random_tensor({4, 3}, rng));
    z.accumulate(testing::random_tensor({6, 3}, rng));
    sp::CovarianceAccumulator left = x, right = z;
    left.merge(y);
    left.merge(z);
    right.merge(y);
    right.merge(x);
    CHECK(max_abs_diff(left.covariance(), right.covariance()) <= 1e-12);
}

TEST_CASE("recovers a known 2-D covariance within 5%") {
    std::mt19937_64 rng(7);
    const Tensor L = Tensor::matrix({{2.0, 0.0}, {0.6, 0.8}});  // LᵀL = [[4.36, .48], [.48, .64]]
    const Tensor truth = linalg::matmul_tn(L, L);
    const Tensor cov = empirical_cov(gaussian_rows(1000, L, rng));
    for (std::size_t i = 0; i < 4; ++i) {
        const double scale = std::sqrt(truth.at(i / 2, i / 2) * truth.at(i % 2, i % 2));
        CHECK(std::abs(cov[i] - truth[i]) <= 0.05 * scale);
    }
}

TEST_CASE("basis for simple covariances") {
    sp::CovarianceAccumulator acc(2);
    acc.accumulate(Tensor::matrix({{2, 0}, {-2, 0}, {0, 1}, {0, -1}}));  // cov diag(2, 0.5)
    const auto b = sp::compute_basis(acc);
    CHECK(b.eigenvalues[0] == doctest::Approx(2.0));
    CHECK(b.eigenvalues[1] == doctest::Approx(0.5));
    CHECK(std::abs(b.U.at(0, 0)) == doctest::Approx(1.0));
    CHECK(b.orthonormal);

    sp::CovarianceAccumulator few(3);
    few.accumulate(Tensor::matrix({{1, 2, 3}}));
    CHECK_THROWS_AS(sp::compute_basis(few), InsufficientDataError);
}

TEST_CASE("PCA decorrelates calibration data") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        std::mt19937_64 rng(seed);
        const Tensor L = testing::random_tensor({8, 8}, rng);
        const Tensor x = gaussian_rows(4000, L, rng);
        sp::CovarianceAccumulator acc(8);
        acc.accumulate(x);
        const auto b = sp::compute_basis(acc);
        CHECK(max_abs_diff(linalg::matmul(b.U, b.U_inv), Tensor::identity(8)) <= 1e-8);
        const Tensor pc = empirical_cov(sp::project(b, x));
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 8; ++j)
                if (i != j) CHECK(std::abs(pc.at(i, j)) <= 1e-6);
        for (std::size_t i = 1; i < 8; ++i) CHECK(pc.at(i, i) <= pc.at(i - 1, i - 1));
    }
}

TEST_CASE("projection and reconstruction") {
    std::mt19937_64 rng(5);
    const std::size_t d = 6;
    sp::CovarianceAccumulator acc(d);
    acc.accumulate(gaussian_rows(500, testing::random_tensor({d, d}, rng), rng));
    const auto b = sp::compute_basis(acc);
    const Tensor x = testing::random_tensor({4, d}, rng);
    const Tensor xt = sp::project(b, x);
    CHECK(frobenius_norm(xt) == doctest::Approx(frobenius_norm(x)).epsilon(1e-10));
    CHECK(frobenius_norm(sp::project(b, Tensor({2, d}))) == 0.0);
    CHECK(sp::project(sp::identity_basis(d), x) == x);

    for (std::size_t t = 0; t < 4; ++t) {
        const auto full = sp::reconstruct(b, xt.row(t));
        double err = 0.0;
        for (std::size_t i = 0; i < d; ++i) err = std::max(err, std::abs(full[i] - x.at(t, i)));
        CHECK(err <= 1e-8 * frobenius_norm(x));

        // Truncated reconstruction loses exactly the trailing spectral energy.
        const std::size_t r = d / 2;
        const auto part = sp::reconstruct(b, xt.row(t).first(r));
        double lost = 0.0, trailing = 0.0;
        for (std::size_t i = 0; i < d; ++i) lost += (part[i] - x.at(t, i)) * (part[i] - x.at(t, i));
        for (std::size_t i = r; i < d; ++i) trailing += xt.at(t, i) * xt.at(t, i);
        CHECK(std::abs(lost - trailing) <= 1e-8);

        // Rank 1 is the top component's contribution.
        const auto one = sp::reconstruct(b, xt.row(t).first(1));
        for (std::size_t i = 0; i < d; ++i) CHECK(one[i] == doctest::Approx(xt.at(t, 0) * b.U.at(i, 0)));
    }
    CHECK_THROWS_AS(sp::reconstruct(b, std::vector<double>{}), RankError);
    CHECK_THROWS_AS(sp::reconstruct(b, std::vector<double>(d + 1)), RankError);
}

TEST_CASE("refresh_inverse after perturbing U") {
    std::mt19937_64 rng(2);
    auto b = sp::identity_basis(5);
    b.U.add_inplace(testing::random_tensor({5, 5}, rng, -0.1, 0.1));
    b = sp::refresh_inverse(b);
    CHECK_FALSE(b.orthonormal);
    CHECK(max_abs_diff(linalg::matmul(b.U, b.U_inv), Tensor::identity(5)) <= 1e-8);
    const Tensor x = testing::random_tensor({3, 5}, rng);
    for (std::size_t t = 0; t < 3; ++t) {
        const auto back = sp::reconstruct(b, sp::project(b, x).row(t));
        for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(back[i] - x.at(t, i)) <= 1e-8);
    }
    b.U = Tensor::matrix({{1, 2}, {2, 4}});
    CHECK_THROWS_AS(sp::refresh_inverse(b), InvertibilityError);
}

TEST_CASE("jacobi handles ties deterministically") {
    const auto e = linalg::jacobi_eigen(Tensor::identity(3));
    CHECK(e.values == std::vector<double>{1.0, 1.0, 1.0});
    CHECK(e.vectors == Tensor::identity(3));
}

TEST_CASE("basis files round trip") {
    std::mt19937_64 rng(4);
    sp::CovarianceAccumulator acc(4);
    acc.accumulate(testing::random_tensor({20, 4}, rng));
    auto b = sp::compute_basis(acc, 2, Stream::Value);
    const auto dir = std::filesystem::temp_directory_path() / "dynakv_basis_test";
    sp::save_basis(dir, "L2_V", b);
    const auto r = sp::load_basis(dir, "L2_V");
    CHECK(r.U == b.U);
    CHECK(r.U_inv == b.U_inv);
    CHECK(r.eigenvalues == b.eigenvalues);
    CHECK(r.layer == 2);
    CHECK(r.stream == Stream::Value);
    std::filesystem::remove_all(dir);
}
