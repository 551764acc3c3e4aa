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

#ifndef QUAR_LAYERS_HPP
#define QUAR_LAYERS_HPP

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "errors.hpp"
#include "masking.hpp"
#include "numerics.hpp"

namespace quar {

enum class Direction { Forward, Inverse };

/// C x H x W image shape; a plain D-vector is D x 1 x 1.
struct Shape {
    std::size_t channels = 1;
    std::size_t height = 1;
    std::size_t width = 1;

    std::size_t size() const { return channels * height * width; }
    std::size_t pixels() const { return height * width; }
    bool is_vector() const { return height == 1 && width == 1; }

    friend bool operator==(const Shape&, const Shape&) = default;
};

inline void check_finite(const DenseMatrix& m, const char* what)
{
    if (!m.all_finite())
        throw NumericalError(std::string(what) + ": non-finite output (divergence)");
}

// ---------------------------------------------------------------------------
// Masked dense layer

struct MaskedDense {
    DenseMatrix weight; // out x in; only weight ∘ mask is ever applied
    std::vector<double> bias;
    DenseMatrix mask;
    SpectralState spectral;
    bool has_activation = true;
    std::size_t groups = 1;    // D
    std::size_t in_group = 1;  // units per group on the input side
    std::size_t out_group = 1; // units per group on the output side

    std::size_t in_units() const { return weight.cols; }
    std::size_t out_units() const { return weight.rows; }
    DenseMatrix masked_weight() const { return hadamard(weight, mask); }
};

/// Masked weight in both orientations, computed once per batch.
struct PreparedDense {
    DenseMatrix wm;  // out x in
    DenseMatrix wmt; // in x out
};

inline PreparedDense prepare(const MaskedDense& layer)
{
    PreparedDense p;
    p.wm = layer.masked_weight();
    p.wmt = transpose(p.wm);
    return p;
}

/// Per-batch record of one dense layer. `t` is the diagonal-block product
/// before the activation derivative is applied; `g` is the outgoing diag
/// channel.
struct DenseRecord {
    DenseMatrix z;
    DenseMatrix h;
    DenseMatrix t;
    DenseMatrix g;
};

/// Batched y = act((W∘M)x + b). When `g_in` is given, also propagates the
/// diag channel g_out[d,j] = act'(z[d,j]) Σ_k (W∘M)[(d,j),(d,k)] g_in[d,k].
inline DenseRecord dense_forward(const MaskedDense& layer, const PreparedDense& pw, const DenseMatrix& x,
                                 const DenseMatrix* g_in)
{
    const std::size_t batch = x.rows;
    const std::size_t n_in = layer.in_units();
    const std::size_t n_out = layer.out_units();
    if (x.cols != n_in)
        throw std::invalid_argument("dense_forward: input width " + std::to_string(x.cols) + " != " +
                                    std::to_string(n_in));
    if (g_in && !g_in->same_shape(x))
        throw std::invalid_argument("dense_forward: diag channel shape mismatch");

    DenseRecord rec;
    rec.z = DenseMatrix(batch, n_out);
    for (std::size_t b = 0; b < batch; ++b) {
        auto zr = rec.z.row(b);
        std::copy(layer.bias.begin(), layer.bias.end(), zr.begin());
        const auto xr = x.row(b);
        for (std::size_t i = 0; i < n_in; ++i) {
            const double xv = xr[i];
            if (xv != 0.0)
                axpy(xv, pw.wmt.row(i), zr);
        }
    }

    const std::size_t kin = layer.in_group;
    const std::size_t kout = layer.out_group;
    if (g_in) {
        rec.t = DenseMatrix(batch, n_out);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto gr = g_in->row(b);
            auto tr = rec.t.row(b);
            for (std::size_t d = 0; d < layer.groups; ++d)
                for (std::size_t k = 0; k < kin; ++k) {
                    const std::size_t i = d * kin + k;
                    const double gv = gr[i];
                    if (gv == 0.0)
                        continue;
                    axpy(gv, pw.wmt.row(i).subspan(d * kout, kout), tr.subspan(d * kout, kout));
                }
        }
    }

    if (layer.has_activation) {
        rec.h = DenseMatrix(batch, n_out);
        if (g_in)
            rec.g = DenseMatrix(batch, n_out);
        for (std::size_t idx = 0; idx < rec.z.values.size(); ++idx) {
            const auto a = elu(rec.z.values[idx]);
            rec.h.values[idx] = a.value;
            if (g_in)
                rec.g.values[idx] = a.d1 * rec.t.values[idx];
        }
    } else {
        rec.h = rec.z;
        if (g_in)
            rec.g = rec.t;
    }
    return rec;
}

/// Reverse pass through one dense layer. Accumulates parameter gradients
/// into `grad` (masked entries end exactly zero) and input adjoints into
/// `x_bar` / `g_in_bar`.
inline void dense_backward(const MaskedDense& layer, const PreparedDense& pw, const DenseMatrix& x,
                           const DenseMatrix* g_in, const DenseRecord& rec, const DenseMatrix& h_bar,
                           const DenseMatrix* g_bar, MaskedDense& grad, DenseMatrix* x_bar, DenseMatrix* g_in_bar)
{
    const std::size_t batch = x.rows;
    const std::size_t n_in = layer.in_units();
    const std::size_t n_out = layer.out_units();
    const bool diag = g_in != nullptr && g_bar != nullptr;

    DenseMatrix z_bar(batch, n_out);
    DenseMatrix t_bar;
    if (diag)
        t_bar = DenseMatrix(batch, n_out);
    if (layer.has_activation) {
        for (std::size_t idx = 0; idx < z_bar.values.size(); ++idx) {
            const auto a = elu(rec.z.values[idx]);
            double zb = h_bar.values[idx] * a.d1;
            if (diag) {
                const double gb = g_bar->values[idx];
                zb += gb * rec.t.values[idx] * a.d2;
                t_bar.values[idx] = gb * a.d1;
            }
            z_bar.values[idx] = zb;
        }
    } else {
        z_bar = h_bar;
        if (diag)
            t_bar = *g_bar;
    }

    for (std::size_t b = 0; b < batch; ++b) {
        const auto zr = z_bar.row(b);
        const auto xr = x.row(b);
        for (std::size_t o = 0; o < n_out; ++o) {
            const double zv = zr[o];
            if (zv == 0.0)
                continue;
            grad.bias[o] += zv;
            axpy(zv, xr, grad.weight.row(o));
            if (x_bar)
                axpy(zv, pw.wm.row(o), x_bar->row(b));
        }
    }

    if (diag) {
        const std::size_t kin = layer.in_group;
        const std::size_t kout = layer.out_group;
        for (std::size_t b = 0; b < batch; ++b) {
            const auto tr = t_bar.row(b);
            const auto gr = g_in->row(b);
            for (std::size_t d = 0; d < layer.groups; ++d)
                for (std::size_t j = 0; j < kout; ++j) {
                    const std::size_t o = d * kout + j;
                    const double tv = tr[o];
                    if (tv == 0.0)
                        continue;
                    axpy(tv, gr.subspan(d * kin, kin), grad.weight.row(o).subspan(d * kin, kin));
                    if (g_in_bar)
                        axpy(tv, pw.wm.row(o).subspan(d * kin, kin), g_in_bar->row(b).subspan(d * kin, kin));
                }
        }
    }
    (void)n_in;
    for (std::size_t i = 0; i < grad.weight.values.size(); ++i)
        grad.weight.values[i] *= layer.mask.values[i];
}

struct DenseApplyResult {
    std::vector<double> y;
    std::optional<std::vector<double>> diag_out;
    std::vector<double> preact;
};

/// Single-vector application with optional diag channel.
inline DenseApplyResult masked_dense_apply(const MaskedDense& layer, std::span<const double> x,
                                           std::optional<std::span<const double>> diag_in = std::nullopt)
{
    const auto pw = prepare(layer);
    DenseMatrix xm(1, x.size(), std::vector<double>(x.begin(), x.end()));
    DenseMatrix gm;
    if (diag_in)
        gm = DenseMatrix(1, diag_in->size(), std::vector<double>(diag_in->begin(), diag_in->end()));
    auto rec = dense_forward(layer, pw, xm, diag_in ? &gm : nullptr);
    check_finite(rec.h, "masked_dense_apply");
    DenseApplyResult out;
    out.y = rec.h.values;
    out.preact = rec.z.values;
    if (diag_in)
        out.diag_out = rec.g.values;
    return out;
}

/// Uniform fan-in initialisation over the unmasked entries of each row.
inline void init_fan_in(MaskedDense& layer, Rng& rng, double gain = 1.0)
{
    for (std::size_t o = 0; o < layer.out_units(); ++o) {
        double fan_in = 0.0;
        for (std::size_t i = 0; i < layer.in_units(); ++i)
            fan_in += layer.mask(o, i);
        const double bound = fan_in > 0.0 ? gain / std::sqrt(fan_in) : 0.0;
        for (std::size_t i = 0; i < layer.in_units(); ++i)
            layer.weight(o, i) = layer.mask(o, i) != 0.0 ? rng.uniform(-bound, bound) : 0.0;
        layer.bias[o] = rng.uniform(-bound, bound) * 0.1;
    }
}

inline MaskedDense make_masked_dense(const DenseMatrix& mask, std::size_t groups, std::size_t in_group,
                                     std::size_t out_group, bool activation, Rng& rng)
{
    MaskedDense l;
    l.weight = DenseMatrix(mask.rows, mask.cols);
    l.bias.assign(mask.rows, 0.0);
    l.mask = mask;
    l.has_activation = activation;
    l.groups = groups;
    l.in_group = in_group;
    l.out_group = out_group;
    l.spectral = SpectralState::fresh(mask.rows, mask.cols, rng);
    init_fan_in(l, rng);
    return l;
}

// ---------------------------------------------------------------------------
// Masked convolution (stride 1, zero "same" padding)

struct MaskedConv {
    std::vector<DenseMatrix> weight; // one out x in matrix per kernel tap
    std::vector<double> bias;
    ConvMask mask;
    SpectralState spectral; // tracks the masked center-tap channel matrix
    bool has_activation = true;
    std::size_t height = 1;
    std::size_t width = 1;

    const ConvMaskSpec& spec() const { return mask.spec; }
    std::size_t in_channels() const { return mask.spec.in_channels; }
    std::size_t out_channels() const { return mask.spec.out_channels; }
    std::size_t in_size() const { return in_channels() * height * width; }
    std::size_t out_size() const { return out_channels() * height * width; }

    DenseMatrix masked_tap(std::size_t t) const { return hadamard(weight[t], mask.taps[t]); }
    DenseMatrix masked_center() const { return masked_tap(mask.spec.center_tap()); }
};

struct PreparedConv {
    std::vector<DenseMatrix> wm;
};

inline PreparedConv prepare(const MaskedConv& layer)
{
    PreparedConv p;
    for (std::size_t t = 0; t < layer.weight.size(); ++t)
        p.wm.push_back(layer.masked_tap(t));
    return p;
}

namespace detail {

struct TapOffset {
    long dy;
    long dx;
};

inline TapOffset tap_offset(const ConvMaskSpec& s, std::size_t t)
{
    return {static_cast<long>(t / s.kernel_w) - static_cast<long>(s.kernel_h / 2),
            static_cast<long>(t % s.kernel_w) - static_cast<long>(s.kernel_w / 2)};
}

/// Visits all (output pixel, input pixel) pairs for a tap that stay in bounds.
template <typename Fn>
void for_each_tap_pixel(std::size_t height, std::size_t width, TapOffset off, Fn&& fn)
{
    for (std::size_t y = 0; y < height; ++y) {
        const long iy = static_cast<long>(y) + off.dy;
        if (iy < 0 || iy >= static_cast<long>(height))
            continue;
        for (std::size_t x = 0; x < width; ++x) {
            const long ix = static_cast<long>(x) + off.dx;
            if (ix < 0 || ix >= static_cast<long>(width))
                continue;
            fn(y * width + x, static_cast<std::size_t>(iy) * width + static_cast<std::size_t>(ix));
        }
    }
}

} // namespace detail

/// Batched masked convolution; rows of `x` are C x H x W images flattened
/// channel-major. The diag channel only uses center-tap diagonal blocks,
/// since every other tap reads a strictly earlier pixel.
inline DenseRecord conv_forward(const MaskedConv& layer, const PreparedConv& pc, const DenseMatrix& x,
                                const DenseMatrix* g_in)
{
    const auto& spec = layer.spec();
    const std::size_t batch = x.rows;
    const std::size_t hw = layer.height * layer.width;
    const std::size_t cin = spec.in_channels;
    const std::size_t cout = spec.out_channels;
    if (x.cols != layer.in_size())
        throw std::invalid_argument("conv_forward: input size mismatch");
    if (g_in && !g_in->same_shape(x))
        throw std::invalid_argument("conv_forward: diag channel shape mismatch");

    DenseRecord rec;
    rec.z = DenseMatrix(batch, layer.out_size());
    for (std::size_t b = 0; b < batch; ++b) {
        const auto xr = x.row(b);
        auto zr = rec.z.row(b);
        for (std::size_t o = 0; o < cout; ++o)
            std::fill(zr.begin() + o * hw, zr.begin() + (o + 1) * hw, layer.bias[o]);
        for (std::size_t t = 0; t < pc.wm.size(); ++t) {
            const auto off = detail::tap_offset(spec, t);
            const auto& w = pc.wm[t];
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t i = 0; i < cin; ++i) {
                    const double wv = w(o, i);
                    if (wv == 0.0)
                        continue;
                    const double* in = xr.data() + i * hw;
                    double* out = zr.data() + o * hw;
                    detail::for_each_tap_pixel(layer.height, layer.width, off,
                                               [&](std::size_t p, std::size_t q) { out[p] += wv * in[q]; });
                }
        }
    }

    const std::size_t in_pg = cin / spec.channel_groups;
    const std::size_t out_pg = cout / spec.channel_groups;
    if (g_in) {
        rec.t = DenseMatrix(batch, layer.out_size());
        const auto& wc = pc.wm[spec.center_tap()];
        for (std::size_t b = 0; b < batch; ++b) {
            const auto gr = g_in->row(b);
            auto tr = rec.t.row(b);
            for (std::size_t o = 0; o < cout; ++o) {
                const std::size_t d = o / out_pg;
                for (std::size_t i = d * in_pg; i < (d + 1) * in_pg; ++i) {
                    const double wv = wc(o, i);
                    if (wv == 0.0)
                        continue;
                    axpy(wv, gr.subspan(i * hw, hw), tr.subspan(o * hw, hw));
                }
            }
        }
    }

    if (layer.has_activation) {
        rec.h = DenseMatrix(batch, layer.out_size());
        if (g_in)
            rec.g = DenseMatrix(batch, layer.out_size());
        for (std::size_t idx = 0; idx < rec.z.values.size(); ++idx) {
            const auto a = elu(rec.z.values[idx]);
            rec.h.values[idx] = a.value;
            if (g_in)
                rec.g.values[idx] = a.d1 * rec.t.values[idx];
        }
    } else {
        rec.h = rec.z;
        if (g_in)
            rec.g = rec.t;
    }
    return rec;
}

inline void conv_backward(const MaskedConv& layer, const PreparedConv& pc, const DenseMatrix& x,
                          const DenseMatrix* g_in, const DenseRecord& rec, const DenseMatrix& h_bar,
                          const DenseMatrix* g_bar, MaskedConv& grad, DenseMatrix* x_bar, DenseMatrix* g_in_bar)
{
    const auto& spec = layer.spec();
    const std::size_t batch = x.rows;
    const std::size_t hw = layer.height * layer.width;
    const std::size_t cin = spec.in_channels;
    const std::size_t cout = spec.out_channels;
    const bool diag = g_in != nullptr && g_bar != nullptr;

    DenseMatrix z_bar(batch, layer.out_size());
    DenseMatrix t_bar;
    if (diag)
        t_bar = DenseMatrix(batch, layer.out_size());
    if (layer.has_activation) {
        for (std::size_t idx = 0; idx < z_bar.values.size(); ++idx) {
            const auto a = elu(rec.z.values[idx]);
            double zb = h_bar.values[idx] * a.d1;
            if (diag) {
                const double gb = g_bar->values[idx];
                zb += gb * rec.t.values[idx] * a.d2;
                t_bar.values[idx] = gb * a.d1;
            }
            z_bar.values[idx] = zb;
        }
    } else {
        z_bar = h_bar;
        if (diag)
            t_bar = *g_bar;
    }

    for (std::size_t b = 0; b < batch; ++b) {
        const auto zr = z_bar.row(b);
        const auto xr = x.row(b);
        for (std::size_t o = 0; o < cout; ++o) {
            double acc = 0.0;
            for (std::size_t p = 0; p < hw; ++p)
                acc += zr[o * hw + p];
            grad.bias[o] += acc;
        }
        for (std::size_t t = 0; t < pc.wm.size(); ++t) {
            const auto off = detail::tap_offset(spec, t);
            const auto& w = pc.wm[t];
            auto& gw = grad.weight[t];
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t i = 0; i < cin; ++i) {
                    if (layer.mask.taps[t](o, i) == 0.0)
                        continue;
                    const double* in = xr.data() + i * hw;
                    const double* zo = zr.data() + o * hw;
                    double acc = 0.0;
                    detail::for_each_tap_pixel(layer.height, layer.width, off,
                                               [&](std::size_t p, std::size_t q) { acc += zo[p] * in[q]; });
                    gw(o, i) += acc;
                    if (x_bar) {
                        const double wv = w(o, i);
                        double* xb = x_bar->row(b).data() + i * hw;
                        detail::for_each_tap_pixel(layer.height, layer.width, off,
                                                   [&](std::size_t p, std::size_t q) { xb[q] += wv * zo[p]; });
                    }
                }
        }
    }

    if (diag) {
        const std::size_t in_pg = cin / spec.channel_groups;
        const std::size_t out_pg = cout / spec.channel_groups;
        const std::size_t ct = spec.center_tap();
        const auto& wc = pc.wm[ct];
        auto& gwc = grad.weight[ct];
        for (std::size_t b = 0; b < batch; ++b) {
            const auto tr = t_bar.row(b);
            const auto gr = g_in->row(b);
            for (std::size_t o = 0; o < cout; ++o) {
                const std::size_t d = o / out_pg;
                for (std::size_t i = d * in_pg; i < (d + 1) * in_pg; ++i) {
                    gwc(o, i) += dot(tr.subspan(o * hw, hw), gr.subspan(i * hw, hw));
                    if (g_in_bar)
                        axpy(wc(o, i), tr.subspan(o * hw, hw), g_in_bar->row(b).subspan(i * hw, hw));
                }
            }
        }
    }
    for (std::size_t t = 0; t < grad.weight.size(); ++t)
        for (std::size_t i = 0; i < grad.weight[t].values.size(); ++i)
            grad.weight[t].values[i] *= layer.mask.taps[t].values[i];
}

struct ConvApplyResult {
    std::vector<double> out;
    std::optional<std::vector<double>> diag_out;
    std::vector<double> preact;
};

inline ConvApplyResult masked_conv_apply(const MaskedConv& layer, std::span<const double> image,
                                         std::optional<std::span<const double>> diag_in = std::nullopt)
{
    const auto pc = prepare(layer);
    DenseMatrix xm(1, image.size(), std::vector<double>(image.begin(), image.end()));
    DenseMatrix gm;
    if (diag_in)
        gm = DenseMatrix(1, diag_in->size(), std::vector<double>(diag_in->begin(), diag_in->end()));
    auto rec = conv_forward(layer, pc, xm, diag_in ? &gm : nullptr);
    check_finite(rec.h, "masked_conv_apply");
    ConvApplyResult out;
    out.out = rec.h.values;
    out.preact = rec.z.values;
    if (diag_in)
        out.diag_out = rec.g.values;
    return out;
}

inline MaskedConv make_masked_conv(const ConvMaskSpec& spec, std::size_t height, std::size_t width, bool activation,
                                   Rng& rng)
{
    MaskedConv l;
    l.mask = build_conv_masks(spec);
    l.height = height;
    l.width = width;
    l.has_activation = activation;
    l.bias.assign(spec.out_channels, 0.0);
    for (std::size_t t = 0; t < spec.taps(); ++t)
        l.weight.emplace_back(spec.out_channels, spec.in_channels);
    for (std::size_t o = 0; o < spec.out_channels; ++o) {
        double fan_in = 0.0;
        for (const auto& m : l.mask.taps)
            for (std::size_t i = 0; i < spec.in_channels; ++i)
                fan_in += m(o, i);
        const double bound = fan_in > 0.0 ? 1.0 / std::sqrt(fan_in) : 0.0;
        for (std::size_t t = 0; t < spec.taps(); ++t)
            for (std::size_t i = 0; i < spec.in_channels; ++i)
                l.weight[t](o, i) = l.mask.taps[t](o, i) != 0.0 ? rng.uniform(-bound, bound) : 0.0;
    }
    l.spectral = SpectralState::fresh(spec.out_channels, spec.in_channels, rng);
    return l;
}

// ---------------------------------------------------------------------------
// Actnorm / elementwise affine

/// Per-dimension y = exp(log_scale) * x + shift. With `data_init` set, the
/// first training batch initialises it to zero mean / unit variance; without
/// it this is the plain learnable affine step placed between flows.
struct ActNorm {
    std::vector<double> log_scale;
    std::vector<double> shift;
    bool initialized = false;
    bool data_init = true;

    static ActNorm identity(std::size_t dim, bool data_init)
    {
        return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0), !data_init, data_init};
    }
};

struct TransformResult {
    std::vector<double> y;
    double logdet = 0.0;
};

inline TransformResult actnorm_apply(const ActNorm& p, std::span<const double> x, Direction dir)
{
    if (x.size() != p.log_scale.size())
        throw std::invalid_argument("actnorm_apply: dimension mismatch");
    TransformResult r;
    r.y.resize(x.size());
    for (std::size_t d = 0; d < x.size(); ++d) {
        r.logdet += p.log_scale[d];
        r.y[d] = dir == Direction::Forward ? std::exp(p.log_scale[d]) * x[d] + p.shift[d]
                                           : (x[d] - p.shift[d]) * std::exp(-p.log_scale[d]);
    }
    if (dir == Direction::Inverse)
        r.logdet = -r.logdet;
    return r;
}

/// Data-dependent initialisation: the transformed batch gets per-dimension
/// mean 0 and variance 1.
inline ActNorm actnorm_init(ActNorm p, const DenseMatrix& batch)
{
    if (batch.rows < 2)
        throw std::invalid_argument("actnorm_init: need at least two samples");
    const std::size_t dim = batch.cols;
    p.log_scale.assign(dim, 0.0);
    p.shift.assign(dim, 0.0);
    for (std::size_t d = 0; d < dim; ++d) {
        double mean = 0.0;
        for (std::size_t b = 0; b < batch.rows; ++b)
            mean += batch(b, d);
        mean /= static_cast<double>(batch.rows);
        double var = 0.0;
        for (std::size_t b = 0; b < batch.rows; ++b)
            var += (batch(b, d) - mean) * (batch(b, d) - mean);
        var /= static_cast<double>(batch.rows);
        if (!(var > 0.0))
            throw std::invalid_argument("actnorm_init: dimension " + std::to_string(d) + " has zero variance");
        const double sd = std::sqrt(var);
        p.log_scale[d] = -std::log(sd);
        p.shift[d] = -mean / sd;
    }
    p.initialized = true;
    return p;
}

// ---------------------------------------------------------------------------
// Logit transform

struct LogitTransform {
    double alpha = 0.05;
};

inline TransformResult logit_apply(const LogitTransform& p, std::span<const double> x, Direction dir)
{
    const double a = p.alpha;
    const double scale = 1.0 - 2.0 * a;
    TransformResult r;
    r.y.resize(x.size());
    if (dir == Direction::Forward) {
        for (std::size_t d = 0; d < x.size(); ++d) {
            if (!(x[d] >= 0.0 && x[d] <= 1.0))
                throw std::domain_error("logit_apply: input " + std::to_string(x[d]) + " outside [0, 1] at index " +
                                        std::to_string(d));
            const double s = a + scale * x[d];
            r.y[d] = std::log(s) - std::log1p(-s);
            r.logdet += std::log(scale) - std::log(s) - std::log1p(-s);
        }
    } else {
        for (std::size_t d = 0; d < x.size(); ++d) {
            const double s = sigmoid(x[d]);
            r.y[d] = (s - a) / scale;
            r.logdet -= std::log(scale) - std::log(s) - std::log1p(-s);
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Dequantization

struct Dequantized {
    std::vector<double> x;
    double log_q = 0.0;
};

/// x = (x_int + u) / levels with u ~ U(0, 1); log_q is the log-density of
/// the dequantization distribution, d * log(levels).
inline Dequantized dequantize(std::span<const int> x_int, int levels, Rng& rng)
{
    if (levels < 1)
        throw std::invalid_argument("dequantize: levels must be >= 1");
    Dequantized out;
    out.x.resize(x_int.size());
    for (std::size_t i = 0; i < x_int.size(); ++i) {
        if (x_int[i] < 0 || x_int[i] >= levels)
            throw std::out_of_range("dequantize: value " + std::to_string(x_int[i]) + " outside [0, " +
                                    std::to_string(levels) + ")");
        out.x[i] = (static_cast<double>(x_int[i]) + rng.uniform()) / static_cast<double>(levels);
    }
    out.log_q = static_cast<double>(x_int.size()) * std::log(static_cast<double>(levels));
    return out;
}

// ---------------------------------------------------------------------------
// Squeeze

inline Shape squeezed(const Shape& s, std::size_t factor)
{
    if (factor == 0 || s.height % factor != 0 || s.width % factor != 0)
        throw std::invalid_argument("squeeze: spatial dims not divisible by factor");
    return {s.channels * factor * factor, s.height / factor, s.width / factor};
}

/// Space-to-channel rearrangement; output channel = c * f^2 + dy * f + dx.
/// Volume preserving, so the log-determinant is always zero.
inline std::vector<double> squeeze_apply(std::span<const double> x, const Shape& in, std::size_t factor,
                                         Direction dir)
{
    if (x.size() != in.size() && dir == Direction::Forward)
        throw std::invalid_argument("squeeze_apply: size mismatch");
    const Shape out = squeezed(in, factor);
    if (dir == Direction::Inverse && x.size() != out.size())
        throw std::invalid_argument("squeeze_apply: size mismatch");
    std::vector<double> y(x.size());
    for (std::size_t c = 0; c < in.channels; ++c)
        for (std::size_t h = 0; h < in.height; ++h)
            for (std::size_t w = 0; w < in.width; ++w) {
                const std::size_t src = (c * in.height + h) * in.width + w;
                const std::size_t oc = c * factor * factor + (h % factor) * factor + (w % factor);
                const std::size_t dst = (oc * out.height + h / factor) * out.width + w / factor;
                if (dir == Direction::Forward)
                    y[dst] = x[src];
                else
                    y[src] = x[dst];
            }
    return y;
}

} // namespace quar

#endif // QUAR_LAYERS_HPP
