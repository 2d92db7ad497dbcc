// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "../support/op_cases.hpp"
#include "dynakv/error.hpp"

using namespace dynakv;

TEST_CASE("every op matches central differences over 20 seeds") {
    for (const auto& op : testing::op_cases()) {
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto r = op.run(seed);
            INFO(op.name << " seed " << seed << " rel_err " << r.rel_err);
            CHECK(r.analytic_norm > 0.0);
            CHECK(r.rel_err <= 1e-4);
        }
    }
}

TEST_CASE("gradients accumulate across reuse of a node") {
    ad::Var x = ad::Var::param(Tensor::vector({1.0, 2.0}));
    ad::Var y = ad::sum(ad::mul(x, x));  // d/dx = 2x
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward requires a scalar root") {
    ad::Var x = ad::Var::param(Tensor::vector({1.0, 2.0}));
    CHECK_THROWS_AS(ad::scale(x, 2.0).backward(), DimensionError);
}

TEST_CASE("no-grad guard records no graph") {
    ad::Var x = ad::Var::param(Tensor::vector({1.0, 2.0}));
    ad::NoGradGuard guard;
    ad::Var y = ad::sum(x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("matinv rejects singular and ill-conditioned matrices") {
    ad::Var s = ad::Var::param(Tensor::matrix({{1.0, 2.0}, {2.0, 4.0}}));
    CHECK_THROWS_AS(ad::matinv(s), InvertibilityError);
    ad::Var ill = ad::Var::param(Tensor::matrix({{1.0, 0.0}, {0.0, 1e-10}}));
    try {
        ad::matinv(ill);
        FAIL("expected InvertibilityError");
    } catch (const InvertibilityError& e) {
        CHECK(e.condition() > 1e8);
    }
}

TEST_CASE("shape mismatches are rejected") {
    ad::Var a = ad::Var::param(Tensor({2, 3}));
    ad::Var b = ad::Var::param(Tensor({2, 2}));
    CHECK_THROWS_AS(ad::matmul(a, b), DimensionError);
    CHECK_THROWS_AS(ad::add(a, b), DimensionError);
}

TEST_CASE("adam minimises a quadratic") {
    ad::Var x = ad::Var::param(Tensor::vector({3.0, -2.0}));
    ad::Adam opt({x}, ad::AdamConfig{.lr = 0.1});
    for (int i = 0; i < 500; ++i) {
        opt.zero_grad();
        ad::sum(ad::mul(x, x)).backward();
        opt.step();
    }
    CHECK(std::abs(x.value()[0]) < 1e-3);
    CHECK(std::abs(x.value()[1]) < 1e-3);
}

TEST_CASE("clip_grad_norm rescales to the limit") {
    ad::Var x = ad::Var::param(Tensor::vector({3.0, 4.0}));
    ad::sum(ad::mul(x, x)).backward();  // grad (6, 8), norm 10
    std::vector<ad::Var> ps{x};
    CHECK(ad::clip_grad_norm(ps, 1.0) == doctest::Approx(10.0));
    CHECK(x.grad()[0] == doctest::Approx(0.6));
    CHECK(x.grad()[1] == doctest::Approx(0.8));
}
