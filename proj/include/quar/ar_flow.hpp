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

#ifndef QUAR_AR_FLOW_HPP
#define QUAR_AR_FLOW_HPP

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "errors.hpp"
#include "layers.hpp"
#include "masking.hpp"
#include "numerics.hpp"
#include "quar_block.hpp"

namespace quar {

/// Masked affine autoregressive flow: a MADE network with two heads emitting
/// shift μ_d(x_<d) and log-scale s_d(x_<d). Normalizing direction is one
/// network pass; the generative direction needs D sequential passes.
struct AffineARFlow {
    std::vector<MaskedDense> hidden;
    MaskedDense head_shift;
    MaskedDense head_log_scale;

    std::size_t dim() const { return head_shift.out_units(); }
};

struct ARTrace {
    DenseMatrix x;
    std::vector<PreparedDense> prepared;
    std::vector<DenseRecord> records;
    PreparedDense p_shift;
    PreparedDense p_log_scale;
    DenseMatrix shift;
    DenseMatrix log_scale;
    DenseMatrix z;
};

inline void ar_conditioner(const AffineARFlow& flow, const DenseMatrix& x, ARTrace& tr)
{
    ++pass_counters().residual_forward;
    tr.prepared.clear();
    tr.records.clear();
    const DenseMatrix* in = &x;
    for (const auto& l : flow.hidden) {
        tr.prepared.push_back(prepare(l));
        tr.records.push_back(dense_forward(l, tr.prepared.back(), *in, nullptr));
        in = &tr.records.back().h;
    }
    tr.p_shift = prepare(flow.head_shift);
    tr.p_log_scale = prepare(flow.head_log_scale);
    tr.shift = dense_forward(flow.head_shift, tr.p_shift, *in, nullptr).h;
    tr.log_scale = dense_forward(flow.head_log_scale, tr.p_log_scale, *in, nullptr).h;
    if (!tr.log_scale.all_finite() || !tr.shift.all_finite())
        throw NumericalError("ar_affine: non-finite conditioner output");
}

/// Normalizing direction z_d = (x_d - μ_d) exp(-s_d); logdet = -Σ s_d.
inline BlockOutput ar_forward_batch(const AffineARFlow& flow, const DenseMatrix& x, ARTrace* trace_out = nullptr)
{
    ARTrace local;
    ARTrace& tr = trace_out ? *trace_out : local;
    ar_conditioner(flow, x, tr);
    BlockOutput out;
    out.y = DenseMatrix(x.rows, x.cols);
    out.logdet.assign(x.rows, 0.0);
    for (std::size_t b = 0; b < x.rows; ++b)
        for (std::size_t d = 0; d < x.cols; ++d) {
            const double s = tr.log_scale(b, d);
            out.y(b, d) = (x(b, d) - tr.shift(b, d)) * std::exp(-s);
            out.logdet[b] -= s;
        }
    if (trace_out) {
        tr.x = x;
        tr.z = out.y;
    }
    return out;
}

/// Generative direction, one conditioner pass per dimension.
inline DenseMatrix ar_inverse_batch(const AffineARFlow& flow, const DenseMatrix& z)
{
    DenseMatrix x(z.rows, z.cols);
    ARTrace tr;
    for (std::size_t d = 0; d < z.cols; ++d) {
        ar_conditioner(flow, x, tr);
        for (std::size_t b = 0; b < z.rows; ++b)
            x(b, d) = z(b, d) * std::exp(tr.log_scale(b, d)) + tr.shift(b, d);
    }
    return x;
}

inline DenseMatrix ar_backward(const AffineARFlow& flow, const ARTrace& tr, const DenseMatrix& z_bar, double ld_bar,
                               AffineARFlow& grad)
{
    const std::size_t batch = z_bar.rows;
    const std::size_t dim = flow.dim();
    DenseMatrix x_bar(batch, dim);
    DenseMatrix shift_bar(batch, dim);
    DenseMatrix ls_bar(batch, dim);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t d = 0; d < dim; ++d) {
            const double e = std::exp(-tr.log_scale(b, d));
            const double zb = z_bar(b, d);
            x_bar(b, d) = zb * e;
            shift_bar(b, d) = -zb * e;
            ls_bar(b, d) = -zb * tr.z(b, d) - ld_bar;
        }
    const DenseMatrix& top = flow.hidden.empty() ? tr.x : tr.records.back().h;
    DenseMatrix h_bar(batch, top.cols);
    dense_backward(flow.head_shift, tr.p_shift, top, nullptr, DenseRecord{}, shift_bar, nullptr, grad.head_shift,
                   &h_bar, nullptr);
    dense_backward(flow.head_log_scale, tr.p_log_scale, top, nullptr, DenseRecord{}, ls_bar, nullptr,
                   grad.head_log_scale, &h_bar, nullptr);
    for (std::size_t i = flow.hidden.size(); i-- > 0;) {
        const DenseMatrix& in = i == 0 ? tr.x : tr.records[i - 1].h;
        DenseMatrix in_bar(batch, in.cols);
        dense_backward(flow.hidden[i], tr.prepared[i], in, nullptr, tr.records[i], h_bar, nullptr, grad.hidden[i],
                       &in_bar, nullptr);
        h_bar = std::move(in_bar);
    }
    for (std::size_t k = 0; k < x_bar.values.size(); ++k)
        x_bar.values[k] += h_bar.values[k];
    return x_bar;
}

struct ARApplyResult {
    std::vector<double> output;
    double logdet = 0.0;
};

inline ARApplyResult ar_affine_apply(const AffineARFlow& flow, std::span<const double> input, Direction dir)
{
    DenseMatrix m(1, input.size(), std::vector<double>(input.begin(), input.end()));
    ARApplyResult r;
    if (dir == Direction::Forward) {
        auto out = ar_forward_batch(flow, m);
        r.output = out.y.values;
        r.logdet = out.logdet[0];
    } else {
        r.output = ar_inverse_batch(flow, m).values;
        DenseMatrix back(1, r.output.size(), r.output);
        r.logdet = -ar_forward_batch(flow, back).logdet[0];
    }
    return r;
}

/// MADE with `multipliers` hidden groups per dimension. Heads start with a
/// small gain so a fresh flow is close to the identity.
inline AffineARFlow make_ar_flow(std::size_t dim, const std::vector<std::size_t>& multipliers, Rng& rng,
                                 double head_gain = 0.1)
{
    GroupedLayout layout{dim, multipliers};
    const auto masks = build_dense_masks(layout, MaskMode::AR);
    AffineARFlow flow;
    for (std::size_t l = 0; l + 1 < masks.masks.size(); ++l)
        flow.hidden.push_back(
            make_masked_dense(masks.masks[l], dim, layout.group_size(l), layout.group_size(l + 1), true, rng));
    const auto& last = masks.masks.back();
    const std::size_t lvl = masks.masks.size() - 1;
    flow.head_shift = make_masked_dense(last, dim, layout.group_size(lvl), 1, false, rng);
    flow.head_log_scale = make_masked_dense(last, dim, layout.group_size(lvl), 1, false, rng);
    for (auto* h : {&flow.head_shift, &flow.head_log_scale}) {
        for (double& w : h->weight.values)
            w *= head_gain;
        for (double& b : h->bias)
            b *= head_gain;
    }
    return flow;
}

} // namespace quar

#endif // QUAR_AR_FLOW_HPP
