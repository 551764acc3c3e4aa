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
#include <numbers>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "quar/chain.hpp"
#include "quar/estimators.hpp"

using namespace quar;

namespace {

const double kHalfLogTwoPi = 0.5 * std::log(2.0 * std::numbers::pi);

std::vector<double> random_vec(std::size_t n, Rng& rng, double scale = 1.0)
{
    std::vector<double> v(n);
    for (double& x : v)
        x = scale * rng.normal();
    return v;
}

ActNorm fixed_actnorm(std::vector<double> log_scale, std::vector<double> shift)
{
    ActNorm a = ActNorm::identity(log_scale.size(), false);
    a.log_scale = std::move(log_scale);
    a.shift = std::move(shift);
    return a;
}

ActNorm random_actnorm(std::size_t dim, Rng& rng)
{
    return fixed_actnorm(random_vec(dim, rng, 0.3), random_vec(dim, rng, 0.5));
}

template <class Block>
void scramble_layers(Block& blk, Rng& rng, double scale)
{
    for (auto& l : blk.layers) {
        if constexpr (requires { l.weight.values; })
            l.weight = random_normal(l.weight.rows, l.weight.cols, rng, scale);
        else
            for (auto& w : l.weight)
                w = random_normal(w.rows, w.cols, rng, scale);
        for (double& b : l.bias)
            b = 0.2 * rng.normal();
    }
    refresh_spectral(blk, rng, 500, 1e-12);
}

/// Mixed chain over D dims using every vector step kind.
FlowChain mixed_chain(std::size_t dim, Rng& rng)
{
    FlowChain c{Shape{dim, 1, 1}, {}};
    c.steps.push_back(random_actnorm(dim, rng));
    auto q = make_quar_block(GroupedLayout{dim, {3, 3}}, 0.97, true, rng);
    scramble_layers(q, rng, 0.8);
    c.steps.push_back(q);
    c.steps.push_back(random_actnorm(dim, rng));
    c.steps.push_back(ReverseStep{});
    auto ar = make_ar_flow(dim, {2}, rng, 0.5);
    c.steps.push_back(ar);
    auto r = make_residual_block(dim, {8}, 0.97, rng);
    scramble_layers(r, rng, 1.0);
    c.steps.push_back(r);
    c.steps.push_back(random_actnorm(dim, rng));
    return c;
}

VectorMap chain_map(const FlowChain& c)
{
    return [&c](std::span<const double> v) {
        DenseMatrix x(1, v.size(), std::vector<double>(v.begin(), v.end()));
        return chain_forward(c, x, false).z.values;
    };
}

} // namespace

TEST(Chain, EmptyChainIsBaseDensity)
{
    const FlowChain c{Shape{1, 1, 1}, {}};
    const std::vector<double> x{0.0};
    EXPECT_NEAR(chain_log_prob(c, x).logp, -kHalfLogTwoPi, 1e-15);
}

TEST(Chain, SingleActnormClosedForm)
{
    FlowChain c{Shape{1, 1, 1}, {}};
    c.steps.push_back(fixed_actnorm({std::log(2.0)}, {0.0}));
    const std::vector<double> x{0.0};
    const auto r = chain_log_prob(c, x);
    EXPECT_NEAR(r.logp, -kHalfLogTwoPi + std::log(2.0), 1e-15);
    ASSERT_EQ(r.per_step.size(), 1u);
    EXPECT_NEAR(r.per_step[0], std::log(2.0), 1e-15);
}

TEST(Chain, MatchesBruteForceOracle)
{
    Rng rng(1, 0);
    for (std::size_t dim : {1, 2, 3, 4}) {
        const auto c = mixed_chain(dim, rng);
        for (int i = 0; i < 10; ++i) {
            const auto x = random_vec(dim, rng);
            const auto z = chain_map(c)(x);
            const double oracle = standard_normal_logpdf(z) + exact_logdet_bruteforce(chain_map(c), x, dim);
            EXPECT_NEAR(chain_log_prob(c, x).logp, oracle, 1e-4) << "dim " << dim;
        }
    }
}

TEST(Chain, LogitChainMatchesBruteForce)
{
    Rng rng(2, 0);
    FlowChain c{Shape{3, 1, 1}, {}};
    c.steps.push_back(LogitTransform{0.05});
    auto q = make_quar_block(GroupedLayout{3, {2}}, 0.97, true, rng);
    scramble_layers(q, rng, 0.8);
    c.steps.push_back(q);
    for (int i = 0; i < 10; ++i) {
        std::vector<double> x(3);
        for (double& v : x)
            v = rng.uniform(0.1, 0.9);
        const auto z = chain_map(c)(x);
        EXPECT_NEAR(chain_log_prob(c, x).logp, standard_normal_logpdf(z) + exact_logdet_bruteforce(chain_map(c), x, 3),
                    1e-4);
    }
}

TEST(Chain, PerStepLogdetsSumToTotal)
{
    Rng rng(3, 0);
    const auto c = mixed_chain(3, rng);
    const DenseMatrix x = random_normal(8, 3, rng);
    const auto pass = chain_forward(c, x, false);
    ASSERT_EQ(pass.per_step.size(), c.steps.size());
    for (std::size_t b = 0; b < 8; ++b) {
        double s = 0.0;
        for (const auto& st : pass.per_step)
            s += st[b];
        EXPECT_NEAR(s, pass.logdet[b], 1e-12);
    }
    const auto batch = chain_log_prob_batch(c, x);
    for (std::size_t b = 0; b < 8; ++b)
        EXPECT_NEAR(batch[b], chain_log_prob(c, x.row(b)).logp, 1e-12);
}

TEST(Chain, EmptyChainSamplesStandardNormal)
{
    const FlowChain c{Shape{2, 1, 1}, {}};
    Rng rng(4, 6);
    const std::size_t n = 100000;
    const auto s = chain_sample(c, rng, n);
    double m0 = 0, m1 = 0, v0 = 0, v1 = 0, c01 = 0;
    for (std::size_t b = 0; b < n; ++b) {
        m0 += s(b, 0);
        m1 += s(b, 1);
    }
    m0 /= n;
    m1 /= n;
    for (std::size_t b = 0; b < n; ++b) {
        v0 += (s(b, 0) - m0) * (s(b, 0) - m0);
        v1 += (s(b, 1) - m1) * (s(b, 1) - m1);
        c01 += (s(b, 0) - m0) * (s(b, 1) - m1);
    }
    const double tol_mean = 4.0 / std::sqrt(static_cast<double>(n));
    const double tol_cov = 4.0 * std::sqrt(2.0 / static_cast<double>(n));
    EXPECT_NEAR(m0, 0.0, tol_mean);
    EXPECT_NEAR(m1, 0.0, tol_mean);
    EXPECT_NEAR(v0 / n, 1.0, tol_cov);
    EXPECT_NEAR(v1 / n, 1.0, tol_cov);
    EXPECT_NEAR(c01 / n, 0.0, tol_cov);
}

TEST(Chain, ShiftedActnormSampleMean)
{
    FlowChain c{Shape{1, 1, 1}, {}};
    // normalizing direction z = x + shift; x = z - shift has mean 3 when shift = -3
    c.steps.push_back(fixed_actnorm({0.0}, {-3.0}));
    Rng rng(5, 6);
    const auto s = chain_sample(c, rng, 20000);
    double m = 0;
    for (double v : s.values)
        m += v;
    EXPECT_NEAR(m / 20000.0, 3.0, 4.0 / std::sqrt(20000.0));
}

TEST(Chain, SampleRoundTripAndFiniteDensity)
{
    Rng rng(6, 0);
    for (std::size_t dim : {1, 2, 4}) {
        const auto c = mixed_chain(dim, rng);
        const DenseMatrix z = random_normal(40, dim, rng);
        const auto x = chain_inverse(c, z, InverseOptions{1e-13, 5000});
        const auto back = chain_forward(c, x, false).z;
        for (std::size_t k = 0; k < z.values.size(); ++k)
            EXPECT_NEAR(back.values[k], z.values[k], 1e-6);
        for (double lp : chain_log_prob_batch(c, x))
            EXPECT_TRUE(std::isfinite(lp));
        // forward then inverse
        const auto fx = chain_inverse(c, chain_forward(c, x, false).z, InverseOptions{1e-13, 5000});
        for (std::size_t k = 0; k < x.values.size(); ++k)
            EXPECT_NEAR(fx.values[k], x.values[k], 1e-6);
    }
}

TEST(Chain, ConvChainWithSqueeze)
{
    Rng rng(7, 0);
    FlowChain c{Shape{1, 4, 4}, {}};
    auto q1 = make_quar_conv_block(Shape{1, 4, 4}, 4, 3, 0.97, true, rng);
    scramble_layers(q1, rng, 0.4);
    c.steps.push_back(q1);
    c.steps.push_back(SqueezeStep{2});
    auto q2 = make_quar_conv_block(Shape{4, 2, 2}, 2, 3, 0.97, true, rng);
    scramble_layers(q2, rng, 0.4);
    c.steps.push_back(q2);
    for (int i = 0; i < 3; ++i) {
        const auto x = random_vec(16, rng);
        const auto z = chain_map(c)(x);
        EXPECT_NEAR(chain_log_prob(c, x).logp, standard_normal_logpdf(z) + exact_logdet_bruteforce(chain_map(c), x, 16),
                    1e-4);
    }
    const DenseMatrix z = random_normal(5, 16, rng);
    const auto back = chain_forward(c, chain_inverse(c, z), false).z;
    for (std::size_t k = 0; k < z.values.size(); ++k)
        EXPECT_NEAR(back.values[k], z.values[k], 1e-6);
}

TEST(Chain, DomainErrorsNameTheStep)
{
    FlowChain c{Shape{2, 1, 1}, {}};
    c.steps.push_back(ActNorm::identity(2, false));
    c.steps.push_back(LogitTransform{0.05});
    const std::vector<double> x{0.5, 1.5};
    try {
        chain_log_prob(c, x);
        FAIL() << "expected a domain error";
    } catch (const std::domain_error& e) {
        EXPECT_EQ(std::string(e.what()).rfind("step 1 (logit)", 0), 0u) << e.what();
    }
}

TEST(Chain, NumericalErrorsNameTheStep)
{
    Rng rng(8, 0);
    FlowChain c{Shape{1, 1, 1}, {}};
    auto q = make_quar_block(GroupedLayout{1, {}}, 0.5, false, rng);
    q.layers[0].weight(0, 0) = -0.5;
    q.layers[0].spectral.u = {-1.0};
    q.layers[0].spectral.v = {1.0};
    q.sigma = 5.0;
    c.steps.push_back(ReverseStep{});
    c.steps.push_back(q);
    const std::vector<double> x{0.1};
    try {
        chain_log_prob(c, x);
        FAIL() << "expected a numerical error";
    } catch (const NumericalError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("step 1 (quar)", 0), 0u) << e.what();
    }
}

TEST(Chain, RejectsWidthMismatch)
{
    const FlowChain c{Shape{3, 1, 1}, {}};
    EXPECT_THROW(chain_forward(c, DenseMatrix(2, 2), false), std::invalid_argument);
}

TEST(Chain, ParameterTraversal)
{
    Rng rng(9, 0);
    const auto c = mixed_chain(2, rng);
    std::vector<std::string> names;
    visit_params(c, [&](const std::string& n, const auto&, std::size_t, std::size_t) { names.push_back(n); });
    ASSERT_FALSE(names.empty());
    EXPECT_EQ(names.front(), "s0.affine.log_scale");
    EXPECT_NE(std::find(names.begin(), names.end(), "s1.quar.layer0.weight"), names.end());
    EXPECT_NE(std::find(names.begin(), names.end(), "s1.quar.rho"), names.end());
    EXPECT_NE(std::find(names.begin(), names.end(), "s4.ar_affine.head_log_scale.bias"), names.end());
    EXPECT_NE(std::find(names.begin(), names.end(), "s5.residual.layer1.weight"), names.end());
    const auto z = zeros_like(c);
    EXPECT_EQ(parameter_count(z), parameter_count(c));
    visit_params(z, [](const std::string&, const auto& v, std::size_t, std::size_t) {
        for (double x : v)
            EXPECT_EQ(x, 0.0);
    });
    std::size_t spectral = 0;
    visit_spectral(c, [&](const std::string&, const SpectralState&) { ++spectral; });
    EXPECT_EQ(spectral, 3u + 2u);
}
