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

#ifndef QUAR_ESTIMATORS_HPP
#define QUAR_ESTIMATORS_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "numerics.hpp"

namespace quar {

using VectorMap = std::function<std::vector<double>(std::span<const double>)>;

struct FixedPointResult {
    std::vector<double> x;
    std::size_t iterations = 0;
    /// ||x_i - x_{i-1}||_2 for every iteration.
    std::vector<double> step_norms;
};

/// Banach iteration x_i = y - g(x_{i-1}) from x_0 = y. Stops once the
/// infinity-norm step falls below `tol`.
inline FixedPointResult fixed_point_inverse(const VectorMap& g, std::span<const double> y, double tol,
                                            std::size_t max_iters)
{
    FixedPointResult r;
    r.x.assign(y.begin(), y.end());
    std::vector<double> next(y.size());
    double last_inf = 0.0;
    for (std::size_t it = 1; it <= max_iters; ++it) {
        const auto gx = g(r.x);
        double inf = 0.0;
        double sq = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            next[i] = y[i] - gx[i];
            const double diff = next[i] - r.x[i];
            inf = std::max(inf, std::abs(diff));
            sq += diff * diff;
        }
        if (!std::isfinite(inf))
            throw NumericalError("fixed_point_inverse: iterate became non-finite at iteration " + std::to_string(it));
        std::swap(r.x, next);
        r.iterations = it;
        r.step_norms.push_back(std::sqrt(sq));
        last_inf = inf;
        if (inf < tol)
            return r;
    }
    throw NumericalError("fixed_point_inverse: no convergence after " + std::to_string(max_iters) +
                         " iterations (last step norm " + std::to_string(last_inf) + ")");
}

/// Batched variant: every row is an independent fixed-point problem sharing
/// one evaluation of `g` per iteration.
inline DenseMatrix fixed_point_inverse_batch(const std::function<DenseMatrix(const DenseMatrix&)>& g,
                                             const DenseMatrix& y, double tol, std::size_t max_iters,
                                             std::size_t* iterations = nullptr)
{
    DenseMatrix x = y;
    double last = 0.0;
    for (std::size_t it = 1; it <= max_iters; ++it) {
        const DenseMatrix gx = g(x);
        double inf = 0.0;
        for (std::size_t i = 0; i < x.values.size(); ++i) {
            const double nx = y.values[i] - gx.values[i];
            inf = std::max(inf, std::abs(nx - x.values[i]));
            x.values[i] = nx;
        }
        if (!std::isfinite(inf))
            throw NumericalError("fixed_point_inverse: iterate became non-finite at iteration " + std::to_string(it));
        last = inf;
        if (inf < tol) {
            if (iterations)
                *iterations = it;
            return x;
        }
    }
    throw NumericalError("fixed_point_inverse: no convergence after " + std::to_string(max_iters) +
                         " iterations (last step norm " + std::to_string(last) + ")");
}

struct TraceEstimate {
    double estimate = 0.0;
    double std_error = 0.0;
};

/// Skilling-Hutchinson estimate of tr(J) from vector-Jacobian products,
/// averaging vᵀ(Jv) = (vᵀJ)v over Rademacher probes.
inline TraceEstimate hutchinson_trace(const VectorMap& vjp, std::size_t dim, Rng& rng, std::size_t n_samples)
{
    if (n_samples < 1)
        throw std::invalid_argument("hutchinson_trace: need at least one sample");
    double sum = 0.0;
    double sum_sq = 0.0;
    std::vector<double> v(dim);
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (double& x : v)
            x = rng.rademacher();
        const double q = dot(vjp(v), v);
        sum += q;
        sum_sq += q * q;
    }
    const double n = static_cast<double>(n_samples);
    TraceEstimate t;
    t.estimate = sum / n;
    if (n_samples > 1) {
        const double var = std::max(0.0, (sum_sq - n * t.estimate * t.estimate) / (n - 1.0));
        t.std_error = std::sqrt(var / n);
    }
    return t;
}

enum class SeriesScheme { Truncated, Roulette };
enum class TraceMode { Hutchinson, Exact };

/// Power-series log-determinant settings. `terms` is n for the truncated
/// scheme and n_min for the roulette scheme.
struct SeriesEstimatorConfig {
    SeriesScheme scheme = SeriesScheme::Truncated;
    std::size_t terms = 20;
    double p_continue = 0.5;
    std::size_t hutchinson_samples = 1;
    TraceMode trace = TraceMode::Hutchinson;

    void validate() const
    {
        if (terms < 1 && scheme == SeriesScheme::Truncated)
            throw std::invalid_argument("SeriesEstimatorConfig: need at least one term");
        if (!(p_continue > 0.0 && p_continue < 1.0))
            throw std::invalid_argument("SeriesEstimatorConfig: p_continue must lie in (0, 1)");
        if (hutchinson_samples < 1)
            throw std::invalid_argument("SeriesEstimatorConfig: need at least one Hutchinson sample");
    }
};

/// Draws the number of series terms and the per-term weights 1/P(N >= k).
inline std::vector<double> series_term_weights(const SeriesEstimatorConfig& cfg, Rng& rng)
{
    std::vector<double> w;
    if (cfg.scheme == SeriesScheme::Truncated) {
        w.assign(cfg.terms, 1.0);
        return w;
    }
    std::size_t n = cfg.terms;
    while (rng.uniform() < cfg.p_continue)
        ++n;
    w.resize(n);
    double survive = 1.0;
    for (std::size_t k = 1; k <= n; ++k) {
        if (k > cfg.terms)
            survive *= cfg.p_continue;
        w[k - 1] = 1.0 / survive;
    }
    return w;
}

/// Σ_k (-1)^{k+1} w_k tr̂(J^k)/k using repeated vector-Jacobian products.
/// Each probe vector costs one VJP per term.
inline double series_logdet(const VectorMap& vjp, std::size_t dim, const SeriesEstimatorConfig& cfg, Rng& rng)
{
    cfg.validate();
    const auto weights = series_term_weights(cfg, rng);
    auto one_probe = [&](const std::vector<double>& v) {
        double acc = 0.0;
        std::vector<double> w = v;
        for (std::size_t k = 1; k <= weights.size(); ++k) {
            w = vjp(w);
            const double sign = (k % 2 == 1) ? 1.0 : -1.0;
            acc += sign * weights[k - 1] * dot(w, v) / static_cast<double>(k);
        }
        return acc;
    };
    double total = 0.0;
    if (cfg.trace == TraceMode::Exact) {
        std::vector<double> e(dim, 0.0);
        for (std::size_t i = 0; i < dim; ++i) {
            e.assign(dim, 0.0);
            e[i] = 1.0;
            total += one_probe(e);
        }
        return total;
    }
    std::vector<double> v(dim);
    for (std::size_t s = 0; s < cfg.hutchinson_samples; ++s) {
        for (double& x : v)
            x = rng.rademacher();
        total += one_probe(v);
    }
    return total / static_cast<double>(cfg.hutchinson_samples);
}

/// Full Jacobian of `map` at x by central differences.
inline DenseMatrix finite_difference_jacobian(const VectorMap& map, std::span<const double> x, double step = 1e-5)
{
    const std::size_t n = x.size();
    std::vector<double> xp(x.begin(), x.end());
    DenseMatrix jac;
    for (std::size_t j = 0; j < n; ++j) {
        const double orig = xp[j];
        xp[j] = orig + step;
        const auto fp = map(xp);
        xp[j] = orig - step;
        const auto fm = map(xp);
        xp[j] = orig;
        if (j == 0)
            jac = DenseMatrix(fp.size(), n);
        for (std::size_t i = 0; i < fp.size(); ++i)
            jac(i, j) = (fp[i] - fm[i]) / (2.0 * step);
    }
    return jac;
}

/// Oracle log|det J_map(x)|: central-difference Jacobian (step 1e-5) and LU.
inline double exact_logdet_bruteforce(const VectorMap& map, std::span<const double> x, std::size_t dim)
{
    if (dim > 16)
        throw std::invalid_argument("exact_logdet_bruteforce: dimension above 16");
    if (x.size() != dim)
        throw std::invalid_argument("exact_logdet_bruteforce: input length does not match dim");
    return lu_log_abs_det(finite_difference_jacobian(map, x, 1e-5)).log_abs;
}

} // namespace quar

#endif // QUAR_ESTIMATORS_HPP
