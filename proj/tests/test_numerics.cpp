/*
 * Copyright 2026 The QuarFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <cmath>
#include <cstdint>
#include <vector>

#include <gtest/gtest.h>

#include "quar/numerics.hpp"

using namespace quar;

namespace {

DenseMatrix mat(std::size_t r, std::size_t c, std::vector<double> v) { return DenseMatrix(r, c, std::move(v)); }

double power_sigma(const DenseMatrix& w, std::uint64_t seed, double noise = 1e-2)
{
    Rng rng(seed, 0);
    auto st = SpectralState::fresh(w.rows, w.cols, rng, noise);
    return spectral_norm_power(w, st, 5000, 1e-13, rng).sigma;
}

} // namespace

// ---------------------------------------------------------------------------
// ELU

TEST(Elu, PositiveBranchIsIdentity)
{
    const auto e = elu(1.0);
    EXPECT_EQ(e.value, 1.0);
    EXPECT_EQ(e.d1, 1.0);
    EXPECT_EQ(e.d2, 0.0);
}

TEST(Elu, BoundaryUsesRightSidedValues)
{
    const auto e = elu(0.0);
    EXPECT_EQ(e.value, 0.0);
    EXPECT_EQ(e.d1, 1.0);
    EXPECT_EQ(e.d2, 0.0);
}

TEST(Elu, NegativeBranchClosedForm)
{
    const auto e = elu(-1.0);
    EXPECT_NEAR(e.value, -0.6321205588285577, 1e-15);
    EXPECT_NEAR(e.d1, 0.36787944117144233, 1e-15);
    EXPECT_NEAR(e.d2, 0.36787944117144233, 1e-15);
}

TEST(Elu, DerivativesMatchFiniteDifferences)
{
    const double h = 1e-6;
    for (double x = -6.0; x <= 6.0; x += 0.013) {
        if (std::abs(x) < 1e-4)
            continue;
        const auto e = elu(x);
        EXPECT_GT(e.d1, 0.0);
        EXPECT_LE(e.d1, 1.0);
        const double fd1 = (elu(x + h).value - elu(x - h).value) / (2 * h);
        const double fd2 = (elu(x + h).d1 - elu(x - h).d1) / (2 * h);
        EXPECT_NEAR(e.d1, fd1, 1e-6) << "x=" << x;
        EXPECT_NEAR(e.d2, fd2, 1e-5) << "x=" << x;
    }
}

// ---------------------------------------------------------------------------
// RNG

TEST(Rng, MatchesReferenceStream)
{
    Rng a(0, 0);
    EXPECT_EQ(a.next_u64(), 0x53175d61490b23dfULL);
    EXPECT_EQ(a.next_u64(), 0x61da6f3dc380d507ULL);
    EXPECT_EQ(a.next_u64(), 0x5c0fdf91ec9a7bfcULL);
    Rng b(42, 0);
    EXPECT_EQ(b.next_u64(), 0xd0764d4f4476689fULL);
    EXPECT_EQ(b.next_u64(), 0x519e4174576f3791ULL);
    Rng c(42, 3);
    EXPECT_EQ(c.next_u64(), 0x6c8183677af6134bULL);
    EXPECT_EQ(c.next_u64(), 0x9d5ed4bea9b34958ULL);
    EXPECT_EQ(c.next_u64(), 0xf904edb04ac1d050ULL);
}

TEST(Rng, SameSeedSameThousandDraws)
{
    Rng a(7, 1), b(7, 1);
    for (int i = 0; i < 1000; ++i) {
        const double x = a.normal(), y = b.normal();
        EXPECT_EQ(std::bit_cast<std::uint64_t>(x), std::bit_cast<std::uint64_t>(y));
    }
}

TEST(Rng, DistinctStreamsDiffer)
{
    Rng a(7, 1), b(7, 2), c(8, 1);
    const auto x = a.next_u64();
    EXPECT_NE(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
}

TEST(Rng, StateNeverAllZero)
{
    for (std::uint64_t s = 0; s < 64; ++s) {
        const auto& st = Rng(s, s).state();
        EXPECT_NE(st[0] | st[1] | st[2] | st[3], 0u);
    }
}

TEST(Rng, UniformAndNormalMoments)
{
    Rng rng(3, 0);
    const int n = 200000;
    double su = 0, sn = 0, sn2 = 0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        const double z = rng.normal();
        sn += z;
        sn2 += z * z;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(sn2 / n, 1.0, 0.01);
}

// ---------------------------------------------------------------------------
// Spectral norm

TEST(SpectralNorm, DiagonalMatrix)
{
    EXPECT_NEAR(power_sigma(mat(2, 2, {2, 0, 0, 1}), 1), 2.0, 1e-10);
    EXPECT_NEAR(spectral_norm_oracle(mat(2, 2, {2, 0, 0, 1})), 2.0, 1e-12);
}

TEST(SpectralNorm, UpperTriangularClosedForm)
{
    const auto w = mat(2, 2, {2, 3, 0, 1});
    const double expected = 3.7024591736438324; // sqrt(7 + sqrt(45))
    EXPECT_NEAR(power_sigma(w, 2), expected, 1e-10);
    EXPECT_NEAR(spectral_norm_oracle(w), expected, 1e-12);
}

TEST(SpectralNorm, OracleIdentity) { EXPECT_NEAR(spectral_norm_oracle(DenseMatrix::identity(3)), 1.0, 1e-15); }

TEST(SpectralNorm, WarmStartEscapesStaleVectorWithNoise)
{
    Rng rng(11, 0);
    auto st = SpectralState::fresh(2, 2, rng, 1e-2);
    spectral_norm_power(mat(2, 2, {2, 0, 0, 1}), st, 1000, 1e-14, rng);
    EXPECT_NEAR(st.sigma_estimate, 2.0, 1e-12);
    const auto r = spectral_norm_power(mat(2, 2, {2, 0, 0, 3}), st, 1000, 1e-14, rng);
    EXPECT_NEAR(r.sigma, 3.0, 1e-9);
}

TEST(SpectralNorm, WarmStartStallsWithoutNoise)
{
    Rng rng(11, 0);
    auto st = SpectralState::fresh(2, 2, rng, 0.0);
    spectral_norm_power(mat(2, 2, {2, 0, 0, 1}), st, 1000, 1e-14, rng);
    // The stale vector is exactly e1 up to rounding; make that exact.
    st.u = {1.0, 0.0};
    st.v = {1.0, 0.0};
    const auto r = spectral_norm_power(mat(2, 2, {2, 0, 0, 3}), st, 1000, 1e-14, rng);
    EXPECT_EQ(r.sigma, 2.0);
}

TEST(SpectralNorm, PowerMatchesOracleOnRandomMatrices)
{
    Rng gen(2024, 0);
    for (int k = 0; k < 100; ++k) {
        const std::size_t r = 1 + gen.index(64), c = 1 + gen.index(64);
        const auto w = random_normal(r, c, gen);
        const double p = power_sigma(w, 100 + k);
        const double o = spectral_norm_oracle(w);
        EXPECT_NEAR(p / o, 1.0, 1e-3) << r << "x" << c;
    }
}

TEST(SpectralNorm, BoundsOperatorGain)
{
    Rng gen(5, 0);
    const auto w = random_normal(8, 8, gen);
    const double sp = power_sigma(w, 9);
    const double so = spectral_norm_oracle(w);
    EXPECT_NEAR(sp, so, 1e-3);
    for (int k = 0; k < 100; ++k) {
        std::vector<double> x(8);
        for (double& v : x)
            v = gen.normal();
        const double gain = norm2(matvec(w, x));
        EXPECT_LE(gain, (sp + 1e-9) * norm2(x));
        EXPECT_LE(gain, (so + 1e-9) * norm2(x));
    }
}

TEST(SpectralNorm, ZeroMatrixGivesZero) { EXPECT_EQ(power_sigma(DenseMatrix(3, 4), 1), 0.0); }

TEST(SpectralNorm, StateVectorsStayUnit)
{
    Rng gen(6, 0);
    const auto w = random_normal(5, 7, gen);
    auto st = SpectralState::fresh(5, 7, gen);
    spectral_norm_power(w, st, 50, 1e-4, gen);
    EXPECT_NEAR(norm2(st.u), 1.0, 1e-12);
    EXPECT_NEAR(norm2(st.v), 1.0, 1e-12);
    EXPECT_GE(st.sigma_estimate, 0.0);
}

TEST(SpectralNorm, RejectsNonFinite)
{
    Rng rng(1, 0);
    auto w = mat(2, 2, {1, NAN, 0, 1});
    auto st = SpectralState::fresh(2, 2, rng);
    EXPECT_THROW(spectral_norm_power(w, st, 10, 1e-4, rng), NumericalError);
    EXPECT_THROW(spectral_norm_oracle(w), NumericalError);
}

// ---------------------------------------------------------------------------
// Linear algebra

TEST(LinearAlgebra, LogDetAndInverse)
{
    const auto a = mat(3, 3, {4, 1, 2, 0, 3, 1, 2, 1, 5});
    // det = 4(15-1) - 1(0-2) + 2(0-6) = 56 - (-2) - 12 = 46
    const auto ld = lu_log_abs_det(a);
    EXPECT_NEAR(ld.log_abs, std::log(46.0), 1e-13);
    EXPECT_EQ(ld.sign, 1);
    const auto prod = matmul(a, inverse(a));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            EXPECT_NEAR(prod(i, j), i == j ? 1.0 : 0.0, 1e-14);
    EXPECT_EQ(lu_log_abs_det(mat(2, 2, {0, 1, 1, 0})).sign, -1);
    EXPECT_THROW(lu_log_abs_det(mat(2, 2, {1, 2, 2, 4})), NumericalError);
}

TEST(LinearAlgebra, StandardNormalLogPdf)
{
    const std::vector<double> z{0.0};
    EXPECT_NEAR(standard_normal_logpdf(z), -0.5 * std::log(2 * M_PI), 1e-15);
}

TEST(Activations, SoftplusAndSigmoid)
{
    EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
    EXPECT_NEAR(softplus(50.0), 50.0, 1e-12);
    EXPECT_NEAR(softplus(-50.0), std::exp(-50.0), 1e-30);
    EXPECT_NEAR(sigmoid(0.0), 0.5, 1e-15);
    EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
}
