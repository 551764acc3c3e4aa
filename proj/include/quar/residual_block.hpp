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

#ifndef QUAR_RESIDUAL_BLOCK_HPP
#define QUAR_RESIDUAL_BLOCK_HPP

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "estimators.hpp"
#include "layers.hpp"
#include "numerics.hpp"
#include "quar_block.hpp"

namespace quar {

/// Baseline residual flow x + F(x) with an unmasked network whose layers are
/// each spectrally normalised to W / max(1, σ/c). The log-determinant is
/// either exact (forward-propagated Jacobian, small D only) or the
/// power-series estimate when `series` is set.
struct ResidualBlock {
    std::vector<MaskedDense> layers; // masks are all ones
    double coeff = 0.97;
    std::optional<SeriesEstimatorConfig> series;

    std::size_t dim() const { return layers.front().in_units(); }
};

struct NormalizedLayer {
    PreparedDense prepared; // normalised weight
    double sigma = 0.0;     // uᵀWv
    double factor = 1.0;    // W̃ = factor * W
};

inline std::vector<NormalizedLayer> normalize_layers(const ResidualBlock& blk)
{
    std::vector<NormalizedLayer> out;
    for (const auto& l : blk.layers) {
        NormalizedLayer n;
        n.sigma = dot(l.spectral.u, matvec(l.weight, l.spectral.v));
        n.factor = n.sigma > blk.coeff ? blk.coeff / n.sigma : 1.0;
        DenseMatrix w = l.weight;
        for (double& v : w.values)
            v *= n.factor;
        n.prepared.wmt = transpose(w);
        n.prepared.wm = std::move(w);
        out.push_back(std::move(n));
    }
    return out;
}

inline void refresh_spectral(ResidualBlock& blk, Rng& rng, std::size_t max_iters, double tol)
{
    for (auto& l : blk.layers)
        spectral_norm_power(l.weight, l.spectral, max_iters, tol, rng);
}

/// Product of normalised layer norms; strictly below one by construction.
inline double lipschitz_bound(const ResidualBlock& blk)
{
    double p = 1.0;
    for (const auto& n : normalize_layers(blk))
        p *= n.sigma * n.factor;
    return p;
}

struct ResidualTrace {
    DenseMatrix x;
    std::vector<NormalizedLayer> norm;
    std::vector<DenseRecord> records;
    // Forward-propagated Jacobian per layer, e-major: row b holds D blocks
    // of n_l entries, block e = ∂h_l/∂x_e. `jt` is the same before act'.
    std::vector<DenseMatrix> jac;
    std::vector<DenseMatrix> jt;
    std::vector<DenseMatrix> m_inv; // (I + J_F)^{-1} per sample
};

namespace detail {

inline DenseRecord plain_forward(const MaskedDense& l, const PreparedDense& p, const DenseMatrix& x)
{
    return dense_forward(l, p, x, nullptr);
}

} // namespace detail

/// Batched F(x) with normalised weights; fills `tr.records`.
inline DenseMatrix residual_branch(const ResidualBlock& blk, const DenseMatrix& x, ResidualTrace& tr)
{
    ++pass_counters().residual_forward;
    tr.norm = normalize_layers(blk);
    tr.records.clear();
    const DenseMatrix* in = &x;
    for (std::size_t i = 0; i < blk.layers.size(); ++i) {
        tr.records.push_back(detail::plain_forward(blk.layers[i], tr.norm[i].prepared, *in));
        in = &tr.records.back().h;
    }
    return tr.records.back().h;
}

/// Batched wᵀ J_F(x) using the records of a previous residual_branch call.
inline DenseMatrix residual_vjp(const ResidualBlock& blk, const ResidualTrace& tr, const DenseMatrix& w)
{
    ++pass_counters().vjp;
    DenseMatrix h_bar = w;
    for (std::size_t i = blk.layers.size(); i-- > 0;) {
        const auto& rec = tr.records[i];
        const auto& wm = tr.norm[i].prepared.wm;
        DenseMatrix z_bar = h_bar;
        if (blk.layers[i].has_activation)
            for (std::size_t k = 0; k < z_bar.values.size(); ++k)
                z_bar.values[k] *= elu(rec.z.values[k]).d1;
        DenseMatrix in_bar(w.rows, wm.cols);
        for (std::size_t b = 0; b < w.rows; ++b)
            for (std::size_t o = 0; o < wm.rows; ++o) {
                const double zv = z_bar(b, o);
                if (zv != 0.0)
                    axpy(zv, wm.row(o), in_bar.row(b));
            }
        h_bar = std::move(in_bar);
    }
    return h_bar;
}

/// Forward-mode propagation of the full D-column Jacobian through F.
inline void residual_jacobian(const ResidualBlock& blk, const DenseMatrix& x, ResidualTrace& tr)
{
    const std::size_t batch = x.rows;
    const std::size_t dim = blk.dim();
    tr.jac.clear();
    tr.jt.clear();
    DenseMatrix g0(batch, dim * dim);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t e = 0; e < dim; ++e)
            g0(b, e * dim + e) = 1.0;
    const DenseMatrix* g = &g0;
    for (std::size_t i = 0; i < blk.layers.size(); ++i) {
        const auto& p = tr.norm[i].prepared;
        const std::size_t n_in = p.wm.cols;
        const std::size_t n_out = p.wm.rows;
        DenseMatrix t(batch, dim * n_out);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto gr = g->row(b);
            auto trow = t.row(b);
            for (std::size_t e = 0; e < dim; ++e)
                for (std::size_t k = 0; k < n_in; ++k) {
                    const double gv = gr[e * n_in + k];
                    if (gv != 0.0)
                        axpy(gv, p.wmt.row(k), trow.subspan(e * n_out, n_out));
                }
        }
        DenseMatrix out = t;
        if (blk.layers[i].has_activation)
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t e = 0; e < dim; ++e)
                    for (std::size_t o = 0; o < n_out; ++o)
                        out(b, e * n_out + o) *= elu(tr.records[i].z(b, o)).d1;
        tr.jt.push_back(std::move(t));
        tr.jac.push_back(std::move(out));
        g = &tr.jac.back();
    }
}

/// Exact per-sample log|det(I + J_F)| from the propagated Jacobian.
inline std::vector<double> residual_exact_logdet(const ResidualBlock& blk, ResidualTrace& tr, std::size_t batch)
{
    const std::size_t dim = blk.dim();
    std::vector<double> ld(batch);
    tr.m_inv.clear();
    const auto& j = tr.jac.back();
    for (std::size_t b = 0; b < batch; ++b) {
        DenseMatrix m = DenseMatrix::identity(dim);
        for (std::size_t e = 0; e < dim; ++e)
            for (std::size_t d = 0; d < dim; ++d)
                m(d, e) += j(b, e * dim + d);
        const auto det = lu_log_abs_det(m);
        if (det.sign <= 0)
            throw NumericalError("residual block: det(I + J_F) <= 0");
        ld[b] = det.log_abs;
        tr.m_inv.push_back(inverse(std::move(m)));
    }
    return ld;
}

/// Log-determinant estimate for one input via the power series.
inline double logdet_series_estimate(const ResidualBlock& blk, std::span<const double> x,
                                     const SeriesEstimatorConfig& cfg, Rng& rng)
{
    if (lipschitz_bound(blk) >= 1.0)
        throw std::invalid_argument("logdet_series_estimate: block Lipschitz bound is not below one");
    ResidualTrace tr;
    DenseMatrix xm(1, x.size(), std::vector<double>(x.begin(), x.end()));
    residual_branch(blk, xm, tr);
    VectorMap vjp = [&](std::span<const double> w) {
        DenseMatrix wm(1, w.size(), std::vector<double>(w.begin(), w.end()));
        return residual_vjp(blk, tr, wm).values;
    };
    return series_logdet(vjp, blk.dim(), cfg, rng);
}

/// Batched series estimate; probes are drawn per sample and all samples
/// share each VJP evaluation.
inline std::vector<double> residual_series_logdet_batch(const ResidualBlock& blk, const ResidualTrace& tr,
                                                        std::size_t batch, const SeriesEstimatorConfig& cfg, Rng& rng)
{
    cfg.validate();
    const std::size_t dim = blk.dim();
    const auto weights = series_term_weights(cfg, rng);
    std::vector<double> ld(batch, 0.0);
    const std::size_t probes = cfg.trace == TraceMode::Exact ? dim : cfg.hutchinson_samples;
    for (std::size_t p = 0; p < probes; ++p) {
        DenseMatrix v(batch, dim);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t d = 0; d < dim; ++d)
                v(b, d) = cfg.trace == TraceMode::Exact ? (d == p ? 1.0 : 0.0) : rng.rademacher();
        DenseMatrix w = v;
        for (std::size_t k = 1; k <= weights.size(); ++k) {
            w = residual_vjp(blk, tr, w);
            const double coef = ((k % 2 == 1) ? 1.0 : -1.0) * weights[k - 1] / static_cast<double>(k);
            for (std::size_t b = 0; b < batch; ++b)
                ld[b] += coef * dot(w.row(b), v.row(b));
        }
    }
    if (cfg.trace == TraceMode::Hutchinson)
        for (double& v : ld)
            v /= static_cast<double>(probes);
    return ld;
}

/// Reverse pass for the exact-logdet forward. Needs `tr` from a forward that
/// ran residual_jacobian and residual_exact_logdet.
inline DenseMatrix residual_backward(const ResidualBlock& blk, const ResidualTrace& tr, const DenseMatrix& y_bar,
                                     double ld_bar, ResidualBlock& grad)
{
    const std::size_t batch = y_bar.rows;
    const std::size_t dim = blk.dim();
    const std::size_t n_layers = blk.layers.size();
    DenseMatrix x_bar = y_bar;
    DenseMatrix h_bar = y_bar;
    DenseMatrix j_bar(batch, dim * dim);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t e = 0; e < dim; ++e)
            for (std::size_t d = 0; d < dim; ++d)
                j_bar(b, e * dim + d) = ld_bar * tr.m_inv[b](e, d); // ∂/∂J[d][e] = M^{-T}[d][e]

    for (std::size_t i = n_layers; i-- > 0;) {
        const auto& layer = blk.layers[i];
        const auto& rec = tr.records[i];
        const auto& p = tr.norm[i].prepared;
        const std::size_t n_in = p.wm.cols;
        const std::size_t n_out = p.wm.rows;
        const DenseMatrix& in = i == 0 ? tr.x : tr.records[i - 1].h;

        DenseMatrix z_bar = h_bar;
        DenseMatrix t_bar = j_bar;
        if (layer.has_activation) {
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t o = 0; o < n_out; ++o) {
                    const auto a = elu(rec.z(b, o));
                    double acc = 0.0;
                    for (std::size_t e = 0; e < dim; ++e) {
                        const double jb = j_bar(b, e * n_out + o);
                        acc += jb * tr.jt[i](b, e * n_out + o);
                        t_bar(b, e * n_out + o) = jb * a.d1;
                    }
                    z_bar(b, o) = h_bar(b, o) * a.d1 + acc * a.d2;
                }
        }

        DenseMatrix wt_bar(n_out, n_in);
        DenseMatrix in_bar(batch, n_in);
        DenseMatrix jin_bar;
        if (i > 0)
            jin_bar = DenseMatrix(batch, dim * n_in);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto inr = in.row(b);
            for (std::size_t o = 0; o < n_out; ++o) {
                const double zv = z_bar(b, o);
                grad.layers[i].bias[o] += zv;
                if (zv != 0.0) {
                    axpy(zv, inr, wt_bar.row(o));
                    axpy(zv, p.wm.row(o), in_bar.row(b));
                }
                for (std::size_t e = 0; e < dim; ++e) {
                    const double tv = t_bar(b, e * n_out + o);
                    if (tv == 0.0)
                        continue;
                    if (i == 0)
                        wt_bar(o, e) += tv; // incoming Jacobian is the identity
                    else {
                        axpy(tv, tr.jac[i - 1].row(b).subspan(e * n_in, n_in), wt_bar.row(o));
                        axpy(tv, p.wm.row(o), jin_bar.row(b).subspan(e * n_in, n_in));
                    }
                }
            }
        }

        // W̃ = f W with f = c/σ when σ > c, σ = uᵀWv.
        const auto& nl = tr.norm[i];
        auto& gw = grad.layers[i].weight;
        if (nl.factor == 1.0) {
            for (std::size_t k = 0; k < gw.values.size(); ++k)
                gw.values[k] += wt_bar.values[k];
        } else {
            double inner = 0.0;
            for (std::size_t k = 0; k < wt_bar.values.size(); ++k)
                inner += wt_bar.values[k] * layer.weight.values[k];
            const double coef = -blk.coeff * inner / (nl.sigma * nl.sigma);
            const auto& u = layer.spectral.u;
            const auto& v = layer.spectral.v;
            for (std::size_t r = 0; r < gw.rows; ++r)
                for (std::size_t c = 0; c < gw.cols; ++c)
                    gw(r, c) += nl.factor * wt_bar(r, c) + coef * u[r] * v[c];
        }

        if (i == 0) {
            for (std::size_t k = 0; k < x_bar.values.size(); ++k)
                x_bar.values[k] += in_bar.values[k];
        } else {
            h_bar = std::move(in_bar);
            j_bar = std::move(jin_bar);
        }
    }
    return x_bar;
}

inline DenseMatrix residual_inverse_batch(const ResidualBlock& blk, const DenseMatrix& y, double tol,
                                          std::size_t max_iters)
{
    auto g = [&](const DenseMatrix& x) {
        ResidualTrace tr;
        return residual_branch(blk, x, tr);
    };
    return fixed_point_inverse_batch(g, y, tol, max_iters);
}

inline ResidualBlock make_residual_block(std::size_t dim, const std::vector<std::size_t>& hidden, double coeff, Rng& rng,
                                         std::size_t power_iters = 200)
{
    ResidualBlock blk;
    blk.coeff = coeff;
    std::vector<std::size_t> widths{dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(dim);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        DenseMatrix ones(widths[i + 1], widths[i], 1.0);
        const bool last = i + 2 == widths.size();
        blk.layers.push_back(make_masked_dense(ones, 1, widths[i], widths[i + 1], !last, rng));
    }
    refresh_spectral(blk, rng, power_iters, 1e-10);
    return blk;
}

} // namespace quar

#endif // QUAR_RESIDUAL_BLOCK_HPP
