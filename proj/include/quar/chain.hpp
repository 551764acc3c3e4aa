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

#ifndef QUAR_CHAIN_HPP
#define QUAR_CHAIN_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "ar_flow.hpp"
#include "errors.hpp"
#include "layers.hpp"
#include "numerics.hpp"
#include "quar_block.hpp"
#include "residual_block.hpp"

namespace quar {

struct SqueezeStep {
    std::size_t factor = 2;
};

/// Reverses the dimension order of a vector-shaped state.
struct ReverseStep {};

using Step = std::variant<LogitTransform, ActNorm, SqueezeStep, ReverseStep, QuarBlock, QuarConvBlock, ResidualBlock,
                          AffineARFlow>;

using StepTrace =
    std::variant<std::monostate, DenseMatrix, QuarTrace<MaskedDense>, QuarTrace<MaskedConv>, ResidualTrace, ARTrace>;

/// Ordered normalizing-direction steps over a standard-normal base.
struct FlowChain {
    Shape input_shape;
    std::vector<Step> steps;

    std::size_t dim() const { return input_shape.size(); }
};

struct InverseOptions {
    double tol = 1e-11;
    std::size_t max_iters = 2000;
};

// ---------------------------------------------------------------------------
// Per-step kind names and shapes

inline const char* step_kind(const LogitTransform&) { return "logit"; }
inline const char* step_kind(const ActNorm& a) { return a.data_init ? "actnorm" : "affine"; }
inline const char* step_kind(const SqueezeStep&) { return "squeeze"; }
inline const char* step_kind(const ReverseStep&) { return "reverse"; }
inline const char* step_kind(const QuarBlock&) { return "quar"; }
inline const char* step_kind(const QuarConvBlock&) { return "quar_conv"; }
inline const char* step_kind(const ResidualBlock&) { return "residual"; }
inline const char* step_kind(const AffineARFlow&) { return "ar_affine"; }

inline const char* step_kind(const Step& s)
{
    return std::visit([](const auto& v) { return step_kind(v); }, s);
}

template <class T>
Shape step_output_shape(const T&, const Shape& in)
{
    return in;
}
inline Shape step_output_shape(const SqueezeStep& s, const Shape& in) { return squeezed(in, s.factor); }

// ---------------------------------------------------------------------------
// Forward (normalizing direction), batched

inline DenseMatrix step_forward(const LogitTransform& p, const DenseMatrix& x, const Shape&, std::vector<double>& logdet,
                                StepTrace* tr, Rng*)
{
    DenseMatrix y(x.rows, x.cols);
    for (std::size_t b = 0; b < x.rows; ++b) {
        auto r = logit_apply(p, x.row(b), Direction::Forward);
        std::copy(r.y.begin(), r.y.end(), y.row(b).begin());
        logdet[b] += r.logdet;
    }
    if (tr)
        *tr = x;
    return y;
}

inline DenseMatrix step_forward(const ActNorm& p, const DenseMatrix& x, const Shape&, std::vector<double>& logdet,
                                StepTrace* tr, Rng*)
{
    if (x.cols != p.log_scale.size())
        throw std::invalid_argument("actnorm: dimension mismatch");
    DenseMatrix y(x.rows, x.cols);
    double ld = 0.0;
    for (double v : p.log_scale)
        ld += v;
    for (std::size_t b = 0; b < x.rows; ++b) {
        for (std::size_t d = 0; d < x.cols; ++d)
            y(b, d) = std::exp(p.log_scale[d]) * x(b, d) + p.shift[d];
        logdet[b] += ld;
    }
    if (tr)
        *tr = x;
    return y;
}

inline DenseMatrix step_forward(const SqueezeStep& s, const DenseMatrix& x, const Shape& in, std::vector<double>&,
                                StepTrace*, Rng*)
{
    DenseMatrix y(x.rows, x.cols);
    for (std::size_t b = 0; b < x.rows; ++b) {
        auto r = squeeze_apply(x.row(b), in, s.factor, Direction::Forward);
        std::copy(r.begin(), r.end(), y.row(b).begin());
    }
    return y;
}

inline DenseMatrix reverse_rows(const DenseMatrix& x)
{
    DenseMatrix y(x.rows, x.cols);
    for (std::size_t b = 0; b < x.rows; ++b)
        for (std::size_t d = 0; d < x.cols; ++d)
            y(b, d) = x(b, x.cols - 1 - d);
    return y;
}

inline DenseMatrix step_forward(const ReverseStep&, const DenseMatrix& x, const Shape&, std::vector<double>&, StepTrace*,
                                Rng*)
{
    return reverse_rows(x);
}

template <class Layer>
DenseMatrix step_forward(const BasicQuarBlock<Layer>& blk, const DenseMatrix& x, const Shape&,
                         std::vector<double>& logdet, StepTrace* tr, Rng*)
{
    BlockOutput out;
    if (tr) {
        auto& t = tr->template emplace<QuarTrace<Layer>>();
        out = quar_forward_batch(blk, x, &t);
    } else {
        out = quar_forward_batch(blk, x);
    }
    for (std::size_t b = 0; b < x.rows; ++b)
        logdet[b] += out.logdet[b];
    return std::move(out.y);
}

inline DenseMatrix step_forward(const ResidualBlock& blk, const DenseMatrix& x, const Shape&,
                                std::vector<double>& logdet, StepTrace* tr, Rng* rng)
{
    ResidualTrace local;
    ResidualTrace& t = tr ? tr->emplace<ResidualTrace>() : local;
    DenseMatrix y = residual_branch(blk, x, t);
    for (std::size_t k = 0; k < y.values.size(); ++k)
        y.values[k] += x.values[k];
    std::vector<double> ld;
    if (blk.series) {
        if (tr)
            throw std::logic_error("residual block: gradients through the series estimator are not supported");
        if (!rng)
            throw std::invalid_argument("residual block: the series estimator needs an rng");
        ld = residual_series_logdet_batch(blk, t, x.rows, *blk.series, *rng);
    } else {
        residual_jacobian(blk, x, t);
        ld = residual_exact_logdet(blk, t, x.rows);
    }
    for (std::size_t b = 0; b < x.rows; ++b)
        logdet[b] += ld[b];
    if (tr)
        t.x = x;
    check_finite(y, "residual block");
    return y;
}

inline DenseMatrix step_forward(const AffineARFlow& flow, const DenseMatrix& x, const Shape&,
                                std::vector<double>& logdet, StepTrace* tr, Rng*)
{
    BlockOutput out = tr ? ar_forward_batch(flow, x, &tr->emplace<ARTrace>()) : ar_forward_batch(flow, x);
    for (std::size_t b = 0; b < x.rows; ++b)
        logdet[b] += out.logdet[b];
    check_finite(out.y, "ar_affine");
    return std::move(out.y);
}

// ---------------------------------------------------------------------------
// Inverse (generative direction), batched

inline DenseMatrix step_inverse(const LogitTransform& p, const DenseMatrix& y, const Shape&, const InverseOptions&)
{
    DenseMatrix x(y.rows, y.cols);
    for (std::size_t b = 0; b < y.rows; ++b) {
        auto r = logit_apply(p, y.row(b), Direction::Inverse);
        std::copy(r.y.begin(), r.y.end(), x.row(b).begin());
    }
    return x;
}

inline DenseMatrix step_inverse(const ActNorm& p, const DenseMatrix& y, const Shape&, const InverseOptions&)
{
    DenseMatrix x(y.rows, y.cols);
    for (std::size_t b = 0; b < y.rows; ++b)
        for (std::size_t d = 0; d < y.cols; ++d)
            x(b, d) = (y(b, d) - p.shift[d]) * std::exp(-p.log_scale[d]);
    return x;
}

inline DenseMatrix step_inverse(const SqueezeStep& s, const DenseMatrix& y, const Shape& in, const InverseOptions&)
{
    DenseMatrix x(y.rows, y.cols);
    for (std::size_t b = 0; b < y.rows; ++b) {
        auto r = squeeze_apply(y.row(b), in, s.factor, Direction::Inverse);
        std::copy(r.begin(), r.end(), x.row(b).begin());
    }
    return x;
}

inline DenseMatrix step_inverse(const ReverseStep&, const DenseMatrix& y, const Shape&, const InverseOptions&)
{
    return reverse_rows(y);
}

template <class Layer>
DenseMatrix step_inverse(const BasicQuarBlock<Layer>& blk, const DenseMatrix& y, const Shape&, const InverseOptions& o)
{
    return quar_inverse_batch(blk, y, o.tol, o.max_iters);
}

inline DenseMatrix step_inverse(const ResidualBlock& blk, const DenseMatrix& y, const Shape&, const InverseOptions& o)
{
    return residual_inverse_batch(blk, y, o.tol, o.max_iters);
}

inline DenseMatrix step_inverse(const AffineARFlow& flow, const DenseMatrix& y, const Shape&, const InverseOptions&)
{
    return ar_inverse_batch(flow, y);
}

// ---------------------------------------------------------------------------
// Reverse-mode pass. Returns ∂L/∂x for the step input; parameter gradients
// accumulate into `grad`, a zero-initialised copy of the step.

inline DenseMatrix step_backward(const LogitTransform& p, const StepTrace& trace, const DenseMatrix& y_bar,
                                 double ld_bar, const Shape&, LogitTransform&)
{
    const auto& x = std::get<DenseMatrix>(trace);
    const double scale = 1.0 - 2.0 * p.alpha;
    DenseMatrix x_bar(x.rows, x.cols);
    for (std::size_t k = 0; k < x.values.size(); ++k) {
        const double s = p.alpha + scale * x.values[k];
        const double dy = scale / (s * (1.0 - s));
        const double dld = scale * (1.0 / (1.0 - s) - 1.0 / s);
        x_bar.values[k] = y_bar.values[k] * dy + ld_bar * dld;
    }
    return x_bar;
}

inline DenseMatrix step_backward(const ActNorm& p, const StepTrace& trace, const DenseMatrix& y_bar, double ld_bar,
                                 const Shape&, ActNorm& grad)
{
    const auto& x = std::get<DenseMatrix>(trace);
    DenseMatrix x_bar(x.rows, x.cols);
    for (std::size_t d = 0; d < x.cols; ++d) {
        const double e = std::exp(p.log_scale[d]);
        double ls = ld_bar * static_cast<double>(x.rows);
        double sh = 0.0;
        for (std::size_t b = 0; b < x.rows; ++b) {
            const double yb = y_bar(b, d);
            x_bar(b, d) = yb * e;
            ls += yb * x(b, d) * e;
            sh += yb;
        }
        grad.log_scale[d] += ls;
        grad.shift[d] += sh;
    }
    return x_bar;
}

inline DenseMatrix step_backward(const SqueezeStep& s, const StepTrace&, const DenseMatrix& y_bar, double,
                                 const Shape& in, SqueezeStep&)
{
    return step_inverse(s, y_bar, in, {});
}

inline DenseMatrix step_backward(const ReverseStep&, const StepTrace&, const DenseMatrix& y_bar, double, const Shape&,
                                 ReverseStep&)
{
    return reverse_rows(y_bar);
}

template <class Layer>
DenseMatrix step_backward(const BasicQuarBlock<Layer>& blk, const StepTrace& trace, const DenseMatrix& y_bar,
                          double ld_bar, const Shape&, BasicQuarBlock<Layer>& grad)
{
    return quar_backward(blk, std::get<QuarTrace<Layer>>(trace), y_bar, ld_bar, grad);
}

inline DenseMatrix step_backward(const ResidualBlock& blk, const StepTrace& trace, const DenseMatrix& y_bar,
                                 double ld_bar, const Shape&, ResidualBlock& grad)
{
    return residual_backward(blk, std::get<ResidualTrace>(trace), y_bar, ld_bar, grad);
}

inline DenseMatrix step_backward(const AffineARFlow& flow, const StepTrace& trace, const DenseMatrix& y_bar,
                                 double ld_bar, const Shape&, AffineARFlow& grad)
{
    return ar_backward(flow, std::get<ARTrace>(trace), y_bar, ld_bar, grad);
}

// ---------------------------------------------------------------------------
// Parameter and spectral-state traversal. `fn(name, values, rows, cols)`
// sees every learnable array in a fixed order.

namespace detail {

template <class Dense, class Fn>
void visit_dense(Dense& l, const std::string& prefix, Fn& fn)
{
    fn(prefix + ".weight", l.weight.values, l.weight.rows, l.weight.cols);
    fn(prefix + ".bias", l.bias, l.bias.size(), std::size_t{1});
}

template <class Conv, class Fn>
void visit_conv(Conv& l, const std::string& prefix, Fn& fn)
{
    for (std::size_t t = 0; t < l.weight.size(); ++t)
        fn(prefix + ".tap" + std::to_string(t), l.weight[t].values, l.weight[t].rows, l.weight[t].cols);
    fn(prefix + ".bias", l.bias, l.bias.size(), std::size_t{1});
}

} // namespace detail

template <class Self, class Fn>
void visit_step_params(Self& step, const std::string& prefix, Fn&& fn)
{
    using T = std::remove_const_t<Self>;
    if constexpr (std::is_same_v<T, ActNorm>) {
        fn(prefix + "log_scale", step.log_scale, step.log_scale.size(), std::size_t{1});
        fn(prefix + "shift", step.shift, step.shift.size(), std::size_t{1});
    } else if constexpr (std::is_same_v<T, QuarBlock> || std::is_same_v<T, ResidualBlock>) {
        for (std::size_t i = 0; i < step.layers.size(); ++i)
            detail::visit_dense(step.layers[i], prefix + "layer" + std::to_string(i), fn);
        if constexpr (std::is_same_v<T, QuarBlock>)
            if (step.learn_theta)
                fn(prefix + "rho", step.rho, step.rho.size(), std::size_t{1});
    } else if constexpr (std::is_same_v<T, QuarConvBlock>) {
        for (std::size_t i = 0; i < step.layers.size(); ++i)
            detail::visit_conv(step.layers[i], prefix + "layer" + std::to_string(i), fn);
        if (step.learn_theta)
            fn(prefix + "rho", step.rho, step.rho.size(), std::size_t{1});
    } else if constexpr (std::is_same_v<T, AffineARFlow>) {
        for (std::size_t i = 0; i < step.hidden.size(); ++i)
            detail::visit_dense(step.hidden[i], prefix + "hidden" + std::to_string(i), fn);
        detail::visit_dense(step.head_shift, prefix + "head_shift", fn);
        detail::visit_dense(step.head_log_scale, prefix + "head_log_scale", fn);
    }
}

inline std::string step_prefix(std::size_t index, const Step& s)
{
    return "s" + std::to_string(index) + "." + step_kind(s) + ".";
}

template <class Chain, class Fn>
void visit_params(Chain& chain, Fn&& fn)
{
    for (std::size_t i = 0; i < chain.steps.size(); ++i) {
        const std::string prefix = step_prefix(i, chain.steps[i]);
        std::visit([&](auto& s) { visit_step_params(s, prefix, fn); }, chain.steps[i]);
    }
}

/// `fn(name, layer_with_spectral_state, lipschitz_matrix)` for every layer
/// carrying a power-iteration state.
template <class Chain, class Fn>
void visit_spectral(Chain& chain, Fn&& fn)
{
    for (std::size_t i = 0; i < chain.steps.size(); ++i) {
        const std::string prefix = step_prefix(i, chain.steps[i]);
        std::visit(
            [&](auto& s) {
                using T = std::remove_cvref_t<decltype(s)>;
                if constexpr (std::is_same_v<T, QuarBlock> || std::is_same_v<T, QuarConvBlock> ||
                              std::is_same_v<T, ResidualBlock>)
                    for (std::size_t l = 0; l < s.layers.size(); ++l)
                        fn(prefix + "layer" + std::to_string(l), s.layers[l].spectral);
            },
            chain.steps[i]);
    }
}

inline std::size_t parameter_count(const FlowChain& chain)
{
    std::size_t n = 0;
    visit_params(chain, [&](const std::string&, const auto& v, std::size_t, std::size_t) { n += v.size(); });
    return n;
}

inline FlowChain zeros_like(const FlowChain& chain)
{
    FlowChain z = chain;
    visit_params(z, [](const std::string&, auto& v, std::size_t, std::size_t) { std::fill(v.begin(), v.end(), 0.0); });
    return z;
}

inline void refresh_spectral(FlowChain& chain, Rng& rng, std::size_t max_iters, double tol)
{
    for (auto& s : chain.steps)
        std::visit(
            [&](auto& v) {
                using T = std::remove_cvref_t<decltype(v)>;
                if constexpr (std::is_same_v<T, QuarBlock> || std::is_same_v<T, QuarConvBlock> ||
                              std::is_same_v<T, ResidualBlock>)
                    refresh_spectral(v, rng, max_iters, tol);
            },
            s);
}

// ---------------------------------------------------------------------------
// Chain evaluation

struct ChainPass {
    DenseMatrix z;
    std::vector<double> logdet;                // per sample, summed over steps
    std::vector<std::vector<double>> per_step; // [step][sample]
    std::vector<StepTrace> traces;             // only when recording
    std::vector<Shape> shapes;                 // input shape of each step
};

namespace detail {

template <class Fn>
auto with_step_context(std::size_t index, const Step& s, Fn&& fn)
{
    try {
        return fn();
    } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(index) + " (" + step_kind(s) + "): " + e.what());
    } catch (const std::domain_error& e) {
        throw std::domain_error("step " + std::to_string(index) + " (" + step_kind(s) + "): " + e.what());
    }
}

} // namespace detail

/// Threads a batch through every step in the normalizing direction. With
/// `states` set, the state after every step (input first) is appended.
inline ChainPass chain_forward(const FlowChain& chain, const DenseMatrix& x, bool record, Rng* rng = nullptr,
                               std::vector<DenseMatrix>* states = nullptr)
{
    if (x.cols != chain.dim())
        throw std::invalid_argument("chain_forward: input width " + std::to_string(x.cols) + " != chain dim " +
                                    std::to_string(chain.dim()));
    ChainPass pass;
    pass.logdet.assign(x.rows, 0.0);
    if (record)
        pass.traces.resize(chain.steps.size());
    DenseMatrix cur = x;
    Shape shape = chain.input_shape;
    if (states)
        states->push_back(cur);
    for (std::size_t i = 0; i < chain.steps.size(); ++i) {
        pass.shapes.push_back(shape);
        std::vector<double> ld(x.rows, 0.0);
        StepTrace* tr = record ? &pass.traces[i] : nullptr;
        cur = detail::with_step_context(i, chain.steps[i], [&] {
            return std::visit([&](const auto& s) { return step_forward(s, cur, shape, ld, tr, rng); }, chain.steps[i]);
        });
        for (std::size_t b = 0; b < x.rows; ++b)
            pass.logdet[b] += ld[b];
        pass.per_step.push_back(std::move(ld));
        shape = std::visit([&](const auto& s) { return step_output_shape(s, shape); }, chain.steps[i]);
        if (states)
            states->push_back(cur);
    }
    pass.z = std::move(cur);
    return pass;
}

/// log p(x) for every row of the batch.
inline std::vector<double> chain_log_prob_batch(const FlowChain& chain, const DenseMatrix& x, Rng* rng = nullptr)
{
    const auto pass = chain_forward(chain, x, false, rng);
    std::vector<double> logp(x.rows);
    for (std::size_t b = 0; b < x.rows; ++b)
        logp[b] = standard_normal_logpdf(pass.z.row(b)) + pass.logdet[b];
    return logp;
}

struct LogProb {
    double logp = 0.0;
    std::vector<double> per_step;
};

inline LogProb chain_log_prob(const FlowChain& chain, std::span<const double> x, Rng* rng = nullptr)
{
    DenseMatrix xm(1, x.size(), std::vector<double>(x.begin(), x.end()));
    const auto pass = chain_forward(chain, xm, false, rng);
    LogProb r;
    r.logp = standard_normal_logpdf(pass.z.row(0)) + pass.logdet[0];
    for (const auto& s : pass.per_step)
        r.per_step.push_back(s[0]);
    return r;
}

/// Generative direction: maps base-space rows back to data space.
inline DenseMatrix chain_inverse(const FlowChain& chain, const DenseMatrix& z, const InverseOptions& opts = {})
{
    std::vector<Shape> shapes;
    Shape shape = chain.input_shape;
    for (const auto& s : chain.steps) {
        shapes.push_back(shape);
        shape = std::visit([&](const auto& v) { return step_output_shape(v, shape); }, s);
    }
    DenseMatrix cur = z;
    for (std::size_t i = chain.steps.size(); i-- > 0;) {
        cur = detail::with_step_context(i, chain.steps[i], [&] {
            return std::visit([&](const auto& s) { return step_inverse(s, cur, shapes[i], opts); }, chain.steps[i]);
        });
    }
    return cur;
}

inline DenseMatrix chain_sample(const FlowChain& chain, Rng& rng, std::size_t n, const InverseOptions& opts = {})
{
    DenseMatrix z(n, chain.dim());
    for (double& v : z.values)
        v = rng.normal();
    return chain_inverse(chain, z, opts);
}

/// Reverse pass over a recorded chain_forward.
inline DenseMatrix chain_backward(const FlowChain& chain, const ChainPass& pass, const DenseMatrix& z_bar, double ld_bar,
                                  FlowChain& grad)
{
    DenseMatrix bar = z_bar;
    for (std::size_t i = chain.steps.size(); i-- > 0;) {
        bar = std::visit(
            [&](const auto& s) {
                using T = std::remove_cvref_t<decltype(s)>;
                return step_backward(s, pass.traces[i], bar, ld_bar, pass.shapes[i], std::get<T>(grad.steps[i]));
            },
            chain.steps[i]);
    }
    return bar;
}

} // namespace quar

#endif // QUAR_CHAIN_HPP
