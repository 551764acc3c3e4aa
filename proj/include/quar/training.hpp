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

#ifndef QUAR_TRAINING_HPP
#define QUAR_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "chain.hpp"
#include "errors.hpp"

namespace quar {

// ---------------------------------------------------------------------------
// Objective

struct NllResult {
    double loss = 0.0;          // mean negative log-likelihood
    FlowChain grad;             // same structure as the model, gradients in place of parameters
    DenseMatrix input_grad;     // ∂loss/∂x for every batch row
    std::vector<double> logp;   // per sample
};

/// Mean NLL of `batch` and its exact gradient with respect to every
/// learnable parameter. Spectral vectors u, v are held fixed.
inline NllResult nll_and_gradients(const FlowChain& chain, const DenseMatrix& batch)
{
    if (batch.rows == 0)
        throw std::invalid_argument("nll_and_gradients: empty batch");
    const auto pass = chain_forward(chain, batch, true);
    const double inv_b = 1.0 / static_cast<double>(batch.rows);

    NllResult r;
    r.logp.resize(batch.rows);
    double total = 0.0;
    for (std::size_t b = 0; b < batch.rows; ++b) {
        r.logp[b] = standard_normal_logpdf(pass.z.row(b)) + pass.logdet[b];
        total += r.logp[b];
    }
    r.loss = -total * inv_b;
    if (!std::isfinite(r.loss))
        throw NumericalError("nll_and_gradients: non-finite loss");

    DenseMatrix z_bar = pass.z;
    for (double& v : z_bar.values)
        v *= inv_b;
    r.grad = zeros_like(chain);
    r.input_grad = chain_backward(chain, pass, z_bar, -inv_b, r.grad);
    visit_params(r.grad, [](const std::string& name, const std::vector<double>& v, std::size_t, std::size_t) {
        for (double g : v)
            if (!std::isfinite(g))
                throw NumericalError("nll_and_gradients: non-finite gradient in " + name);
    });
    return r;
}

/// Loss only; no trace is recorded.
inline double nll(const FlowChain& chain, const DenseMatrix& batch, Rng* rng = nullptr)
{
    const auto logp = chain_log_prob_batch(chain, batch, rng);
    double total = 0.0;
    for (double v : logp)
        total += v;
    return -total / static_cast<double>(batch.rows);
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { Adam, Adamax };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "adamax"; }

struct AdamState {
    OptimizerKind variant = OptimizerKind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v; // squared-gradient average, or the infinity norm for Adamax
};

/// One update over matching lists of parameter and gradient arrays.
inline void optimizer_step(AdamState& st, const std::vector<std::span<double>>& params,
                           const std::vector<std::span<const double>>& grads)
{
    if (params.size() != grads.size())
        throw std::invalid_argument("optimizer_step: parameter/gradient count mismatch");
    if (st.m.empty()) {
        for (const auto& p : params) {
            st.m.emplace_back(p.size(), 0.0);
            st.v.emplace_back(p.size(), 0.0);
        }
    }
    if (st.m.size() != params.size())
        throw std::invalid_argument("optimizer_step: state does not match parameters");
    ++st.step;
    const double t = static_cast<double>(st.step);
    const double c1 = 1.0 - std::pow(st.beta1, t);
    const double c2 = 1.0 - std::pow(st.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = st.m[i];
        auto& v = st.v[i];
        if (params[i].size() != grads[i].size() || m.size() != params[i].size())
            throw std::invalid_argument("optimizer_step: shape mismatch in array " + std::to_string(i));
        for (std::size_t k = 0; k < m.size(); ++k) {
            const double g = grads[i][k];
            m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * g;
            if (st.variant == OptimizerKind::Adam) {
                v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * g * g;
                params[i][k] -= st.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + st.eps);
            } else {
                v[k] = std::max(st.beta2 * v[k], std::abs(g));
                params[i][k] -= st.lr / c1 * m[k] / (v[k] + st.eps);
            }
        }
    }
}

inline std::vector<std::span<double>> param_spans(FlowChain& chain)
{
    std::vector<std::span<double>> out;
    visit_params(chain, [&](const std::string&, std::vector<double>& v, std::size_t, std::size_t) { out.emplace_back(v); });
    return out;
}

inline std::vector<std::span<const double>> param_spans(const FlowChain& chain)
{
    std::vector<std::span<const double>> out;
    visit_params(chain,
                 [&](const std::string&, const std::vector<double>& v, std::size_t, std::size_t) { out.emplace_back(v); });
    return out;
}

inline void optimizer_step(AdamState& st, FlowChain& params, const FlowChain& grads)
{
    optimizer_step(st, param_spans(params), param_spans(grads));
}

/// Exponential moving average of the parameters used for evaluation.
struct PolyakState {
    double decay = 0.999;
    FlowChain shadow;
};

inline void polyak_update(std::span<double> shadow, std::span<const double> params, double decay)
{
    if (shadow.size() != params.size())
        throw std::invalid_argument("polyak_update: shape mismatch");
    for (std::size_t k = 0; k < shadow.size(); ++k)
        shadow[k] = decay * shadow[k] + (1.0 - decay) * params[k];
}

inline void polyak_update(PolyakState& st, const FlowChain& params)
{
    auto s = param_spans(st.shadow);
    auto p = param_spans(params);
    if (s.size() != p.size())
        throw std::invalid_argument("polyak_update: model structure mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
        polyak_update(s[i], p[i], st.decay);
}

/// Copies warm-start spectral states from `from` and runs power iteration
/// to tight tolerance, so an averaged model can be evaluated on its own.
inline void resync_spectral(FlowChain& to, const FlowChain& from, Rng& rng, std::size_t iters = 500, double tol = 1e-10)
{
    std::vector<SpectralState> states;
    visit_spectral(from, [&](const std::string&, const SpectralState& s) { states.push_back(s); });
    std::size_t i = 0;
    visit_spectral(to, [&](const std::string&, SpectralState& s) { s = states.at(i++); });
    refresh_spectral(to, rng, iters, tol);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::uint64_t seed = 0;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    std::size_t updates = 20000;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double polyak_decay = 0.999;
    std::size_t power_iters = 20;
    double power_tol = 1e-4;
};

/// Draws one training batch. Must be deterministic given the rng.
using BatchSampler = std::function<DenseMatrix(Rng&, std::size_t)>;

struct TrainResult {
    FlowChain live;
    FlowChain polyak;
    std::vector<double> loss_history;
};

/// Initialises every data-dependent actnorm step that is not yet initialised,
/// in order, from the activations the batch produces at that step.
inline void actnorm_data_init(FlowChain& chain, const DenseMatrix& batch)
{
    DenseMatrix cur = batch;
    Shape shape = chain.input_shape;
    std::vector<double> ld(batch.rows, 0.0);
    for (auto& step : chain.steps) {
        if (auto* a = std::get_if<ActNorm>(&step); a && a->data_init && !a->initialized)
            *a = actnorm_init(*a, cur);
        cur = std::visit([&](const auto& s) { return step_forward(s, cur, shape, ld, nullptr, nullptr); }, step);
        shape = std::visit([&](const auto& s) { return step_output_shape(s, shape); }, step);
    }
}

/// Runs `cfg.updates` optimizer steps. Batches and spectral noise come from
/// separate streams of `cfg.seed`, so runs are bit-reproducible.
inline TrainResult train_loop(const TrainConfig& cfg, const BatchSampler& sampler, FlowChain model,
                              const std::function<void(std::size_t, double)>& on_update = {})
{
    Rng data_rng(cfg.seed, 1);
    Rng spectral_rng(cfg.seed, 2);

    actnorm_data_init(model, sampler(data_rng, cfg.batch_size));

    AdamState opt;
    opt.variant = cfg.optimizer;
    opt.lr = cfg.learning_rate;
    PolyakState avg{cfg.polyak_decay, model};

    TrainResult r;
    r.loss_history.reserve(cfg.updates);
    for (std::size_t k = 0; k < cfg.updates; ++k) {
        const DenseMatrix batch = sampler(data_rng, cfg.batch_size);
        refresh_spectral(model, spectral_rng, cfg.power_iters, cfg.power_tol);
        NllResult g;
        try {
            g = nll_and_gradients(model, batch);
        } catch (const NumericalError& e) {
            throw DivergenceError(k, e.what());
        }
        optimizer_step(opt, model, g.grad);
        polyak_update(avg, model);
        r.loss_history.push_back(g.loss);
        if (on_update)
            on_update(k, g.loss);
    }
    refresh_spectral(model, spectral_rng, 500, 1e-10);
    resync_spectral(avg.shadow, model, spectral_rng);
    r.live = std::move(model);
    r.polyak = std::move(avg.shadow);
    return r;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckGroup {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t count = 0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double max_rel_error = 0.0;
    double step = 0.0;   // finite-difference step actually used
    double margin = 0.0; // smallest |pre-activation| seen by an ELU
};

/// Smallest |z| over the ELU pre-activations whose derivative enters the
/// loss (diag channel, exact residual Jacobian). ELU'' jumps at 0.
inline double activation_margin(const FlowChain& chain, const DenseMatrix& batch)
{
    const auto pass = chain_forward(chain, batch, true);
    double m = std::numeric_limits<double>::infinity();
    auto scan = [&](const auto& layers, const std::vector<DenseRecord>& records) {
        for (std::size_t i = 0; i < records.size(); ++i)
            if (layers[i].has_activation)
                for (double z : records[i].z.values)
                    m = std::min(m, std::abs(z));
    };
    for (std::size_t i = 0; i < chain.steps.size(); ++i)
        std::visit(
            [&](const auto& s) {
                using T = std::remove_cvref_t<decltype(s)>;
                if constexpr (std::is_same_v<T, QuarBlock>)
                    scan(s.layers, std::get<QuarTrace<MaskedDense>>(pass.traces[i]).records);
                else if constexpr (std::is_same_v<T, QuarConvBlock>)
                    scan(s.layers, std::get<QuarTrace<MaskedConv>>(pass.traces[i]).records);
                else if constexpr (std::is_same_v<T, ResidualBlock>)
                    scan(s.layers, std::get<ResidualTrace>(pass.traces[i]).records);
            },
            chain.steps[i]);
    return m;
}

/// Groups a parameter path such as "s3.quar.layer1.weight" under "quar.weight".
inline std::string grad_group(const std::string& name)
{
    const auto first = name.find('.');
    const auto last = name.rfind('.');
    const std::string kind = name.substr(first + 1, name.find('.', first + 1) - first - 1);
    std::string leaf = name.substr(last + 1);
    if (leaf.rfind("tap", 0) == 0)
        leaf = "weight";
    return kind + "." + leaf;
}

inline double relative_error(double a, double n) { return std::abs(a - n) / (std::abs(a) + std::abs(n) + 1e-8); }

/// Compares analytic gradients against a fourth-order central difference of
/// the loss for every parameter and every input coordinate. The step shrinks
/// below `eps` when a pre-activation sits close enough to the ELU kink for
/// the stencil to straddle it.
inline GradCheckReport grad_check(const FlowChain& chain, const DenseMatrix& batch, double eps = 1e-5)
{
    const auto analytic = nll_and_gradients(chain, batch);
    const double margin = activation_margin(chain, batch);
    eps = std::min(eps, std::max(margin / 8.0, 1e-7));
    auto stencil = [eps](auto&& loss_at) {
        const double d1 = loss_at(eps) - loss_at(-eps);
        const double d2 = loss_at(2 * eps) - loss_at(-2 * eps);
        return (8 * d1 - d2) / (12 * eps);
    };

    std::map<std::string, GradCheckGroup> groups;
    auto record = [&](const std::string& group, double a, double n) {
        auto& g = groups[group];
        g.name = group;
        g.max_rel_error = std::max(g.max_rel_error, relative_error(a, n));
        ++g.count;
    };

    FlowChain probe = chain;
    std::vector<std::vector<double>*> slots;
    std::vector<std::string> names;
    visit_params(probe, [&](const std::string& name, std::vector<double>& v, std::size_t, std::size_t) {
        slots.push_back(&v);
        names.push_back(name);
    });
    const auto grads = param_spans(analytic.grad);
    for (std::size_t i = 0; i < slots.size(); ++i) {
        auto& v = *slots[i];
        for (std::size_t k = 0; k < v.size(); ++k) {
            const double orig = v[k];
            const double n = stencil([&](double h) {
                v[k] = orig + h;
                const double l = nll(probe, batch);
                v[k] = orig;
                return l;
            });
            record(grad_group(names[i]), grads[i][k], n);
        }
    }

    DenseMatrix x = batch;
    for (std::size_t k = 0; k < x.values.size(); ++k) {
        const double orig = x.values[k];
        const double n = stencil([&](double h) {
            x.values[k] = orig + h;
            const double l = nll(chain, x);
            x.values[k] = orig;
            return l;
        });
        record("input", analytic.input_grad.values[k], n);
    }

    GradCheckReport rep;
    rep.step = eps;
    rep.margin = margin;
    for (auto& [_, g] : groups) {
        rep.max_rel_error = std::max(rep.max_rel_error, g.max_rel_error);
        rep.groups.push_back(g);
    }
    return rep;
}

} // namespace quar

#endif // QUAR_TRAINING_HPP
