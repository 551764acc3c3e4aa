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

#ifndef QUAR_NUMERICS_HPP
#define QUAR_NUMERICS_HPP

#include <algorithm>
#include <array>
#include <bit>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "errors.hpp"

namespace quar {

/// Row-major dense matrix of doubles. Also used as a batch container:
/// one sample per row.
struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
    DenseMatrix(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v))
    {
        if (values.size() != rows * cols)
            throw std::invalid_argument("DenseMatrix: value count does not match shape");
    }

    static DenseMatrix identity(std::size_t n)
    {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i)
            m(i, i) = 1.0;
        return m;
    }

    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }

    bool same_shape(const DenseMatrix& o) const { return rows == o.rows && cols == o.cols; }
    void fill(double v) { std::fill(values.begin(), values.end(), v); }

    bool all_finite() const
    {
        return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;
};

inline DenseMatrix transpose(const DenseMatrix& m)
{
    DenseMatrix t(m.cols, m.rows);
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c)
            t(c, r) = m(r, c);
    return t;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b)
{
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dimensions differ");
    DenseMatrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0)
                continue;
            for (std::size_t j = 0; j < b.cols; ++j)
                out(i, j) += aik * b(k, j);
        }
    return out;
}

/// Elementwise product, used for W∘mask.
inline DenseMatrix hadamard(const DenseMatrix& a, const DenseMatrix& b)
{
    if (!a.same_shape(b))
        throw std::invalid_argument("hadamard: shape mismatch");
    DenseMatrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.values.size(); ++i)
        out.values[i] = a.values[i] * b.values[i];
    return out;
}

inline std::vector<double> matvec(const DenseMatrix& m, std::span<const double> x)
{
    if (x.size() != m.cols)
        throw std::invalid_argument("matvec: length mismatch");
    std::vector<double> y(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        double acc = 0.0;
        const auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols; ++c)
            acc += row[c] * x[c];
        y[r] = acc;
    }
    return y;
}

inline std::vector<double> matvec_transposed(const DenseMatrix& m, std::span<const double> x)
{
    if (x.size() != m.rows)
        throw std::invalid_argument("matvec_transposed: length mismatch");
    std::vector<double> y(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double xr = x[r];
        const auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols; ++c)
            y[c] += row[c] * xr;
    }
    return y;
}

inline double dot(std::span<const double> a, std::span<const double> b)
{
    assert(a.size() == b.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += a[i] * b[i];
    return acc;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double norm_inf(std::span<const double> a)
{
    double m = 0.0;
    for (double v : a)
        m = std::max(m, std::abs(v));
    return m;
}

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y)
{
    assert(x.size() == y.size());
    const std::size_t n = x.size();
    const double* xp = x.data();
    double* yp = y.data();
    for (std::size_t i = 0; i < n; ++i)
        yp[i] += alpha * xp[i];
}

inline bool normalize(std::vector<double>& v)
{
    const double n = norm2(v);
    if (n == 0.0 || !std::isfinite(n))
        return false;
    for (double& x : v)
        x /= n;
    return true;
}

// ---------------------------------------------------------------------------
// Random numbers

/// xoshiro256++ seeded through splitmix64. Streams are bit-exact across
/// platforms for the integer and uniform draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
    {
        std::uint64_t sm = seed ^ (stream * 0xd1b54a32d192ed03ULL);
        for (auto& w : state_)
            w = splitmix64(sm);
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0)
            state_[0] = 0x9e3779b97f4a7c15ULL;
    }

    std::uint64_t next_u64()
    {
        const std::uint64_t result = std::rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = std::rotl(state_[3], 45);
        return result;
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n)
    {
        if (n == 0)
            throw std::invalid_argument("Rng::index: empty range");
        // Lemire's multiply-shift; the bias is below 2^-64 * n and irrelevant here.
        const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        return static_cast<std::size_t>(m >> 64);
    }

    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    double rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

    const std::array<std::uint64_t, 4>& state() const { return state_; }

private:
    static std::uint64_t splitmix64(std::uint64_t& x)
    {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::array<std::uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline DenseMatrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0)
{
    DenseMatrix m(rows, cols);
    for (double& v : m.values)
        v = scale * rng.normal();
    return m;
}

// ---------------------------------------------------------------------------
// Activations

struct EluValues {
    double value;
    double d1;
    double d2;
};

/// ELU with its first and second derivatives. The x = 0 boundary takes the
/// right-sided values.
inline EluValues elu(double x, double alpha = 1.0)
{
    if (x >= 0.0)
        return {x, 1.0, 0.0};
    const double e = alpha * std::exp(x);
    return {alpha * std::expm1(x), e, e};
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x)
{
    if (x >= 0.0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline constexpr double kLogTwoPi = 1.8378770664093454836; // log(2π)

inline double standard_normal_logpdf(std::span<const double> z)
{
    return -0.5 * (static_cast<double>(z.size()) * kLogTwoPi + dot(z, z));
}

// ---------------------------------------------------------------------------
// Spectral norm

struct SpectralState {
    std::vector<double> u; // left singular vector estimate, length rows
    std::vector<double> v; // right singular vector estimate, length cols
    double sigma_estimate = 0.0;
    double noise_scale = 1e-2;

    static SpectralState fresh(std::size_t rows, std::size_t cols, Rng& rng, double noise_scale = 1e-2)
    {
        SpectralState s;
        s.u.resize(rows);
        s.v.assign(cols, 0.0);
        for (double& x : s.u)
            x = rng.normal();
        if (!normalize(s.u))
            s.u.assign(rows, 1.0 / std::sqrt(static_cast<double>(rows)));
        s.v[0] = 1.0;
        s.noise_scale = noise_scale;
        return s;
    }
};

struct PowerIterationResult {
    double sigma = 0.0;
    std::size_t iterations = 0;
};

/// Warm-started power iteration for the largest singular value of `w`.
/// `state.u` is perturbed by Gaussian noise of scale `state.noise_scale`
/// before iterating, so a stale u sitting on a non-dominant singular
/// direction can escape.
inline PowerIterationResult spectral_norm_power(const DenseMatrix& w, SpectralState& state, std::size_t max_iters,
                                                double tol, Rng& rng)
{
    if (max_iters < 1)
        throw std::invalid_argument("spectral_norm_power: max_iters must be >= 1");
    if (!w.all_finite())
        throw NumericalError("spectral_norm_power: matrix has non-finite entries");
    if (state.u.size() != w.rows || state.v.size() != w.cols)
        state = SpectralState::fresh(w.rows, w.cols, rng, state.noise_scale);

    if (state.noise_scale > 0.0) {
        for (double& x : state.u)
            x += state.noise_scale * rng.normal();
        if (!normalize(state.u))
            state = SpectralState::fresh(w.rows, w.cols, rng, state.noise_scale);
    }

    PowerIterationResult res;
    double prev = -1.0;
    for (std::size_t it = 1; it <= max_iters; ++it) {
        auto v = matvec_transposed(w, state.u);
        if (!normalize(v)) {
            // u is orthogonal to the range of W (or W is zero).
            if (std::all_of(w.values.begin(), w.values.end(), [](double x) { return x == 0.0; })) {
                state.sigma_estimate = 0.0;
                res.sigma = 0.0;
                res.iterations = it;
                return res;
            }
            state = SpectralState::fresh(w.rows, w.cols, rng, state.noise_scale);
            continue;
        }
        auto u = matvec(w, v);
        const double sigma = norm2(u);
        for (double& x : u)
            x /= sigma;
        state.u = std::move(u);
        state.v = std::move(v);
        res.sigma = sigma;
        res.iterations = it;
        if (prev >= 0.0 && std::abs(sigma - prev) <= tol * sigma)
            break;
        prev = sigma;
    }
    state.sigma_estimate = res.sigma;
    return res;
}

/// sqrt(λ_max(WᵀW)) by cyclic Jacobi rotations. Independent of the power
/// iteration path; used as a test oracle.
inline double spectral_norm_oracle(const DenseMatrix& w, std::size_t max_sweeps = 100)
{
    if (!w.all_finite())
        throw NumericalError("spectral_norm_oracle: matrix has non-finite entries");
    const std::size_t n = w.cols;
    DenseMatrix g(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < w.rows; ++r)
                acc += w(r, i) * w(r, j);
            g(i, j) = acc;
        }

    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j)
                    s += g(i, j) * g(i, j);
        return std::sqrt(s);
    };
    double total = 0.0;
    for (double v : g.values)
        total += v * v;
    const double threshold = 1e-10 * std::max(1.0, std::sqrt(total));

    std::size_t sweep = 0;
    while (off_norm() > threshold) {
        if (++sweep > max_sweeps)
            throw NumericalError("spectral_norm_oracle: Jacobi iteration did not converge");
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = g(p, q);
                if (apq == 0.0)
                    continue;
                const double theta = (g(q, q) - g(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double gkp = g(k, p);
                    const double gkq = g(k, q);
                    g(k, p) = c * gkp - s * gkq;
                    g(k, q) = s * gkp + c * gkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double gpk = g(p, k);
                    const double gqk = g(q, k);
                    g(p, k) = c * gpk - s * gqk;
                    g(q, k) = s * gpk + c * gqk;
                }
            }
    }
    double lambda = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        lambda = std::max(lambda, g(i, i));
    return std::sqrt(std::max(lambda, 0.0));
}

// ---------------------------------------------------------------------------
// Determinants

struct LogDet {
    double log_abs = 0.0;
    int sign = 1;
};

/// log|det A| via LU with partial pivoting.
inline LogDet lu_log_abs_det(DenseMatrix a)
{
    if (a.rows != a.cols)
        throw std::invalid_argument("lu_log_abs_det: matrix is not square");
    const std::size_t n = a.rows;
    LogDet out;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t piv = k;
        for (std::size_t i = k + 1; i < n; ++i)
            if (std::abs(a(i, k)) > std::abs(a(piv, k)))
                piv = i;
        if (a(piv, k) == 0.0 || !std::isfinite(a(piv, k)))
            throw NumericalError("lu_log_abs_det: matrix is singular");
        if (piv != k) {
            for (std::size_t j = 0; j < n; ++j)
                std::swap(a(k, j), a(piv, j));
            out.sign = -out.sign;
        }
        const double pivot = a(k, k);
        if (pivot < 0.0)
            out.sign = -out.sign;
        out.log_abs += std::log(std::abs(pivot));
        for (std::size_t i = k + 1; i < n; ++i) {
            const double f = a(i, k) / pivot;
            if (f == 0.0)
                continue;
            for (std::size_t j = k + 1; j < n; ++j)
                a(i, j) -= f * a(k, j);
        }
    }
    return out;
}

/// Inverse of a small dense matrix by Gauss-Jordan with partial pivoting.
inline DenseMatrix inverse(DenseMatrix a)
{
    if (a.rows != a.cols)
        throw std::invalid_argument("inverse: matrix is not square");
    const std::size_t n = a.rows;
    DenseMatrix inv = DenseMatrix::identity(n);
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t piv = k;
        for (std::size_t i = k + 1; i < n; ++i)
            if (std::abs(a(i, k)) > std::abs(a(piv, k)))
                piv = i;
        if (a(piv, k) == 0.0)
            throw NumericalError("inverse: matrix is singular");
        if (piv != k)
            for (std::size_t j = 0; j < n; ++j) {
                std::swap(a(k, j), a(piv, j));
                std::swap(inv(k, j), inv(piv, j));
            }
        const double p = a(k, k);
        for (std::size_t j = 0; j < n; ++j) {
            a(k, j) /= p;
            inv(k, j) /= p;
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (i == k)
                continue;
            const double f = a(i, k);
            if (f == 0.0)
                continue;
            for (std::size_t j = 0; j < n; ++j) {
                a(i, j) -= f * a(k, j);
                inv(i, j) -= f * inv(k, j);
            }
        }
    }
    return inv;
}

} // namespace quar

#endif // QUAR_NUMERICS_HPP
