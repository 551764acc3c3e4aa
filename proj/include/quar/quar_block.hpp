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

#ifndef QUAR_QUAR_BLOCK_HPP
#define QUAR_QUAR_BLOCK_HPP

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "estimators.hpp"
#include "layers.hpp"
#include "masking.hpp"
#include "numerics.hpp"

namespace quar {

/// Instrumentation for pass-count benchmarks. One count per batched
/// evaluation of a residual branch (forward) or per batched vector-Jacobian
/// product.
struct PassCounters {
    std::atomic<std::uint64_t> residual_forward{0};
    std::atomic<std::uint64_t> vjp{0};

    void reset()
    {
        residual_forward = 0;
        vjp = 0;
    }
};

inline PassCounters& pass_counters()
{
    static PassCounters counters;
    return counters;
}

// Uniform layer interface used by the block templates.

inline std::size_t input_size(const MaskedDense& l) { return l.in_units(); }
inline std::size_t output_size(const MaskedDense& l) { return l.out_units(); }
inline std::size_t input_size(const MaskedConv& l) { return l.in_size(); }
inline std::size_t output_size(const MaskedConv& l) { return l.out_size(); }

inline DenseRecord layer_forward(const MaskedDense& l, const PreparedDense& p, const DenseMatrix& x,
                                 const DenseMatrix* g)
{
    return dense_forward(l, p, x, g);
}
inline DenseRecord layer_forward(const MaskedConv& l, const PreparedConv& p, const DenseMatrix& x,
                                 const DenseMatrix* g)
{
    return conv_forward(l, p, x, g);
}

inline void layer_backward(const MaskedDense& l, const PreparedDense& p, const DenseMatrix& x, const DenseMatrix* g_in,
                           const DenseRecord& rec, const DenseMatrix& h_bar, const DenseMatrix* g_bar,
                           MaskedDense& grad, DenseMatrix* x_bar, DenseMatrix* g_in_bar)
{
    dense_backward(l, p, x, g_in, rec, h_bar, g_bar, grad, x_bar, g_in_bar);
}
inline void layer_backward(const MaskedConv& l, const PreparedConv& p, const DenseMatrix& x, const DenseMatrix* g_in,
                           const DenseRecord& rec, const DenseMatrix& h_bar, const DenseMatrix* g_bar, MaskedConv& grad,
                           DenseMatrix* x_bar, DenseMatrix* g_in_bar)
{
    conv_backward(l, p, x, g_in, rec, h_bar, g_bar, grad, x_bar, g_in_bar);
}

/// Matrix whose spectral norm bounds the layer's Lipschitz constant: the
/// masked weight for dense layers, the masked center-tap channel matrix for
/// convolutions.
inline DenseMatrix lipschitz_matrix(const MaskedDense& l) { return l.masked_weight(); }
inline DenseMatrix lipschitz_matrix(const MaskedConv& l) { return l.masked_center(); }

inline DenseMatrix& lipschitz_weight(MaskedDense& l) { return l.weight; }
inline DenseMatrix& lipschitz_weight(MaskedConv& l) { return l.weight[l.spec().center_tap()]; }
inline const DenseMatrix& lipschitz_mask(const MaskedDense& l) { return l.mask; }
inline const DenseMatrix& lipschitz_mask(const MaskedConv& l) { return l.mask.taps[l.spec().center_tap()]; }

/// Quasi-autoregressive residual block y = x + s ∘ F(x), where F is a
/// QuAR-masked network and s is the Lipschitz-trick scale
/// s_d = sigma / (theta_d + Π_i σ_i), theta = softplus(rho).
template <class Layer>
struct BasicQuarBlock {
    std::vector<Layer> layers;
    double sigma = 0.97;
    std::vector<double> rho;
    bool learn_theta = true;

    std::size_t dim() const { return input_size(layers.front()); }

    std::vector<double> theta() const
    {
        std::vector<double> t(rho.size(), 0.0);
        if (learn_theta)
            for (std::size_t d = 0; d < rho.size(); ++d)
                t[d] = softplus(rho[d]);
        return t;
    }
};

using QuarBlock = BasicQuarBlock<MaskedDense>;
using QuarConvBlock = BasicQuarBlock<MaskedConv>;

inline constexpr double kScaleFloor = 1e-12;

struct LipschitzTerms {
    std::vector<double> scale;       // s_d
    std::vector<double> theta;       // theta_d
    std::vector<double> layer_sigma; // σ_i = uᵀ M_i v
    double product = 1.0;            // Π σ_i
};

template <class Layer>
LipschitzTerms lipschitz_terms(const BasicQuarBlock<Layer>& blk)
{
    LipschitzTerms t;
    for (const auto& l : blk.layers) {
        const DenseMatrix m = lipschitz_matrix(l);
        if (l.spectral.u.size() != m.rows || l.spectral.v.size() != m.cols)
            throw std::logic_error("lipschitz_scale: spectral state does not match layer shape");
        const double s = dot(l.spectral.u, matvec(m, l.spectral.v));
        t.layer_sigma.push_back(s);
        t.product *= s;
    }
    t.theta = blk.theta();
    t.scale.resize(blk.rho.size());
    for (std::size_t d = 0; d < t.scale.size(); ++d)
        t.scale[d] = blk.sigma / std::max(t.theta[d] + t.product, kScaleFloor);
    return t;
}

/// Per-dimension output scale from the Lipschitz trick.
template <class Layer>
std::vector<double> lipschitz_scale(const BasicQuarBlock<Layer>& blk)
{
    return lipschitz_terms(blk).scale;
}

/// Runs power iteration on every layer and stores the warm-start state.
template <class Layer>
void refresh_spectral(BasicQuarBlock<Layer>& blk, Rng& rng, std::size_t max_iters, double tol)
{
    for (auto& l : blk.layers)
        spectral_norm_power(lipschitz_matrix(l), l.spectral, max_iters, tol, rng);
}

template <class Layer>
using PreparedFor = decltype(prepare(std::declval<const Layer&>()));

/// Everything the reverse pass needs from one batched block evaluation.
template <class Layer>
struct QuarTrace {
    DenseMatrix x;
    std::vector<PreparedFor<Layer>> prepared;
    std::vector<DenseRecord> records;
    DenseMatrix ones;
    LipschitzTerms lip;
    DenseMatrix a; // s_d * diag_d per sample

    const DenseMatrix& residual() const { return records.back().h; }
    const DenseMatrix& diag() const { return records.back().g; }
};

struct BlockOutput {
    DenseMatrix y;
    std::vector<double> logdet; // one per sample
};

template <class Layer>
BlockOutput quar_forward_batch(const BasicQuarBlock<Layer>& blk, const DenseMatrix& x, QuarTrace<Layer>* trace_out = nullptr)
{
    const std::size_t batch = x.rows;
    const std::size_t dim = blk.dim();
    if (x.cols != dim)
        throw std::invalid_argument("quar_forward: input width mismatch");
    ++pass_counters().residual_forward;

    QuarTrace<Layer> local;
    QuarTrace<Layer>& tr = trace_out ? *trace_out : local;
    tr.lip = lipschitz_terms(blk);
    tr.ones = DenseMatrix(batch, dim, 1.0);
    tr.prepared.clear();
    tr.records.clear();
    for (const auto& l : blk.layers)
        tr.prepared.push_back(prepare(l));
    const DenseMatrix* in = &x;
    const DenseMatrix* g = &tr.ones;
    tr.records.reserve(blk.layers.size());
    for (std::size_t i = 0; i < blk.layers.size(); ++i) {
        tr.records.push_back(layer_forward(blk.layers[i], tr.prepared[i], *in, g));
        in = &tr.records.back().h;
        g = &tr.records.back().g;
    }

    const auto& f = tr.residual();
    const auto& diag = tr.diag();
    BlockOutput out;
    out.y = x;
    out.logdet.assign(batch, 0.0);
    tr.a = DenseMatrix(batch, dim);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t d = 0; d < dim; ++d) {
            const double s = tr.lip.scale[d];
            out.y(b, d) += s * f(b, d);
            const double a = s * diag(b, d);
            tr.a(b, d) = a;
            if (!(1.0 + a > 0.0))
                throw NumericalError("quar_forward: 1 + a_d = " + std::to_string(1.0 + a) + " <= 0 at dimension " +
                                     std::to_string(d));
            out.logdet[b] += std::log1p(a);
        }
    check_finite(out.y, "quar_forward");
    if (trace_out)
        tr.x = x;
    return out;
}

/// s ∘ F(x) without the diag channel; the map inverted by fixed-point
/// iteration.
template <class Layer>
DenseMatrix quar_residual_batch(const BasicQuarBlock<Layer>& blk, const DenseMatrix& x, const LipschitzTerms& lip)
{
    ++pass_counters().residual_forward;
    DenseMatrix h = x;
    for (const auto& l : blk.layers) {
        auto rec = layer_forward(l, prepare(l), h, nullptr);
        h = std::move(rec.h);
    }
    for (std::size_t b = 0; b < h.rows; ++b)
        for (std::size_t d = 0; d < h.cols; ++d)
            h(b, d) *= lip.scale[d];
    return h;
}

template <class Layer>
DenseMatrix quar_inverse_batch(const BasicQuarBlock<Layer>& blk, const DenseMatrix& y, double tol, std::size_t max_iters)
{
    const auto lip = lipschitz_terms(blk);
    // Pre-masking once is cheaper than re-preparing per iteration.
    std::vector<PreparedFor<Layer>> prepared;
    for (const auto& l : blk.layers)
        prepared.push_back(prepare(l));
    auto g = [&](const DenseMatrix& x) {
        ++pass_counters().residual_forward;
        DenseMatrix h = x;
        for (std::size_t i = 0; i < blk.layers.size(); ++i)
            h = layer_forward(blk.layers[i], prepared[i], h, nullptr).h;
        for (std::size_t b = 0; b < h.rows; ++b)
            for (std::size_t d = 0; d < h.cols; ++d)
                h(b, d) *= lip.scale[d];
        return h;
    };
    return fixed_point_inverse_batch(g, y, tol, max_iters);
}

/// Reverse pass. `y_bar` is ∂L/∂y per sample, `ld_bar` the coefficient of
/// each sample's logdet in L. Gradients accumulate into `grad`, which has
/// the same structure as `blk`. Returns ∂L/∂x.
template <class Layer>
DenseMatrix quar_backward(const BasicQuarBlock<Layer>& blk, const QuarTrace<Layer>& tr, const DenseMatrix& y_bar,
                          double ld_bar, BasicQuarBlock<Layer>& grad)
{
    const std::size_t batch = y_bar.rows;
    const std::size_t dim = blk.dim();
    const auto& f = tr.residual();
    const auto& diag = tr.diag();
    const auto& s = tr.lip.scale;

    DenseMatrix x_bar = y_bar;
    DenseMatrix h_bar(batch, dim);
    DenseMatrix g_bar(batch, dim);
    std::vector<double> s_bar(dim, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t d = 0; d < dim; ++d) {
            const double yb = y_bar(b, d);
            const double a_bar = ld_bar / (1.0 + tr.a(b, d));
            h_bar(b, d) = s[d] * yb;
            g_bar(b, d) = s[d] * a_bar;
            s_bar[d] += yb * f(b, d) + a_bar * diag(b, d);
        }

    for (std::size_t i = blk.layers.size(); i-- > 0;) {
        const DenseMatrix& in = i == 0 ? tr.x : tr.records[i - 1].h;
        const DenseMatrix& g_in = i == 0 ? tr.ones : tr.records[i - 1].g;
        DenseMatrix in_bar(batch, input_size(blk.layers[i]));
        DenseMatrix g_in_bar;
        if (i > 0)
            g_in_bar = DenseMatrix(batch, input_size(blk.layers[i]));
        layer_backward(blk.layers[i], tr.prepared[i], in, &g_in, tr.records[i], h_bar, &g_bar, grad.layers[i], &in_bar,
                       i > 0 ? &g_in_bar : nullptr);
        if (i == 0) {
            for (std::size_t k = 0; k < x_bar.values.size(); ++k)
                x_bar.values[k] += in_bar.values[k];
        } else {
            h_bar = std::move(in_bar);
            g_bar = std::move(g_in_bar);
        }
    }

    // s_d = sigma / (theta_d + P)
    double p_bar = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
        const double denom = tr.lip.theta[d] + tr.lip.product;
        if (denom < kScaleFloor)
            continue;
        const double ds = -s[d] / denom;
        p_bar += s_bar[d] * ds;
        if (blk.learn_theta)
            grad.rho[d] += s_bar[d] * ds * sigmoid(blk.rho[d]);
    }
    const std::size_t n_layers = blk.layers.size();
    for (std::size_t i = 0; i < n_layers; ++i) {
        double others = 1.0;
        for (std::size_t j = 0; j < n_layers; ++j)
            if (j != i)
                others *= tr.lip.layer_sigma[j];
        const double sig_bar = p_bar * others;
        if (sig_bar == 0.0)
            continue;
        const auto& u = blk.layers[i].spectral.u;
        const auto& v = blk.layers[i].spectral.v;
        DenseMatrix& gw = lipschitz_weight(grad.layers[i]);
        const DenseMatrix& mask = lipschitz_mask(blk.layers[i]);
        for (std::size_t r = 0; r < gw.rows; ++r)
            for (std::size_t c = 0; c < gw.cols; ++c)
                gw(r, c) += sig_bar * u[r] * v[c] * mask(r, c);
    }
    return x_bar;
}

struct QuarForwardResult {
    std::vector<double> y;
    double logdet = 0.0;
    QuarTrace<MaskedDense> trace;
};

/// Single-vector evaluation with exact triangular log-determinant.
inline QuarForwardResult quar_forward(const QuarBlock& blk, std::span<const double> x)
{
    QuarForwardResult r;
    DenseMatrix xm(1, x.size(), std::vector<double>(x.begin(), x.end()));
    auto out = quar_forward_batch(blk, xm, &r.trace);
    r.y = out.y.values;
    r.logdet = out.logdet[0];
    return r;
}

/// Dense QuAR block over `layout`; the final layer has no activation.
inline QuarBlock make_quar_block(const GroupedLayout& layout, double sigma, bool learn_theta, Rng& rng,
                                 std::size_t power_iters = 200)
{
    if (!(sigma >= 0.0 && sigma < 1.0))
        throw std::invalid_argument("make_quar_block: sigma must lie in [0, 1)");
    const auto masks = build_dense_masks(layout, MaskMode::QuAR);
    QuarBlock blk;
    blk.sigma = sigma;
    blk.learn_theta = learn_theta;
    blk.rho.assign(layout.dim, 0.0);
    for (std::size_t l = 0; l < masks.masks.size(); ++l) {
        const bool last = l + 1 == masks.masks.size();
        blk.layers.push_back(make_masked_dense(masks.masks[l], layout.dim, layout.group_size(l),
                                               layout.group_size(l + 1), !last, rng));
    }
    refresh_spectral(blk, rng, power_iters, 1e-10);
    return blk;
}

/// Convolutional QuAR block: 3x3 conv, ELU, 1x1 conv, ELU, 3x3 conv with
/// hidden width `channels * hidden_multiplier`. Every input channel is its
/// own group.
inline QuarConvBlock make_quar_conv_block(const Shape& shape, std::size_t hidden_multiplier, std::size_t kernel,
                                          double sigma, bool learn_theta, Rng& rng, std::size_t power_iters = 200)
{
    const std::size_t c = shape.channels;
    const std::size_t hidden = c * hidden_multiplier;
    const std::size_t ks[3] = {kernel, 1, kernel};
    const std::size_t ins[3] = {c, hidden, hidden};
    const std::size_t outs[3] = {hidden, hidden, c};
    QuarConvBlock blk;
    blk.sigma = sigma;
    blk.learn_theta = learn_theta;
    blk.rho.assign(shape.size(), 0.0);
    for (int i = 0; i < 3; ++i) {
        ConvMaskSpec spec{ks[i], ks[i], ins[i], outs[i], c, MaskMode::QuAR, i == 0};
        blk.layers.push_back(make_masked_conv(spec, shape.height, shape.width, i < 2, rng));
    }
    refresh_spectral(blk, rng, power_iters, 1e-10);
    return blk;
}

} // namespace quar

#endif // QUAR_QUAR_BLOCK_HPP
