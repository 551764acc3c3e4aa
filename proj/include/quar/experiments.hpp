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

#ifndef QUAR_EXPERIMENTS_HPP
#define QUAR_EXPERIMENTS_HPP

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "chain.hpp"
#include "config.hpp"
#include "datasets.hpp"
#include "model_io.hpp"
#include "training.hpp"

namespace quar {

inline constexpr const char* kVersion = "1.0.0";

/// Negated bits per dimension relative to the dequantization density.
inline double bits_per_dim(double logp, double log_q, std::size_t d)
{
    if (d == 0)
        throw std::invalid_argument("bits_per_dim: d must be >= 1");
    return -(logp - log_q) / (static_cast<double>(d) * std::numbers::ln2);
}

inline std::string format_double(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Density grid

struct GridBounds {
    double xmin = -6.0, xmax = 6.0, ymin = -6.0, ymax = 6.0;
};

/// Log-density at cell centres, row-major with x varying fastest.
struct DensityGrid {
    GridBounds bounds;
    std::size_t nx = 0, ny = 0;
    std::vector<double> logp;
    std::vector<char> failed;

    double dx() const { return (bounds.xmax - bounds.xmin) / static_cast<double>(nx); }
    double dy() const { return (bounds.ymax - bounds.ymin) / static_cast<double>(ny); }
    double x(std::size_t i) const { return bounds.xmin + (static_cast<double>(i) + 0.5) * dx(); }
    double y(std::size_t j) const { return bounds.ymin + (static_cast<double>(j) + 0.5) * dy(); }

    /// Cell-sum quadrature of exp(logp); failed cells count as zero mass.
    double integral() const
    {
        double s = 0.0;
        for (std::size_t k = 0; k < logp.size(); ++k)
            if (!failed[k])
                s += std::exp(logp[k]);
        return s * dx() * dy();
    }

    std::size_t failed_count() const { return static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1)); }
};

inline DensityGrid density_grid(const FlowChain& chain, const GridBounds& b, std::size_t nx, std::size_t ny)
{
    if (chain.dim() != 2)
        throw std::invalid_argument("density_grid: model must be two-dimensional");
    if (nx == 0 || ny == 0 || !(b.xmax > b.xmin) || !(b.ymax > b.ymin))
        throw std::invalid_argument("density_grid: empty grid");
    DensityGrid g;
    g.bounds = b;
    g.nx = nx;
    g.ny = ny;
    g.logp.assign(nx * ny, std::numeric_limits<double>::quiet_NaN());
    g.failed.assign(nx * ny, 0);
    const std::size_t chunk = 1024;
    for (std::size_t start = 0; start < nx * ny; start += chunk) {
        const std::size_t n = std::min(chunk, nx * ny - start);
        DenseMatrix pts(n, 2);
        for (std::size_t k = 0; k < n; ++k) {
            pts(k, 0) = g.x((start + k) % nx);
            pts(k, 1) = g.y((start + k) / nx);
        }
        try {
            const auto lp = chain_log_prob_batch(chain, pts);
            std::copy(lp.begin(), lp.end(), g.logp.begin() + static_cast<std::ptrdiff_t>(start));
        } catch (const std::exception&) {
            for (std::size_t k = 0; k < n; ++k) {
                try {
                    g.logp[start + k] = chain_log_prob(chain, pts.row(k)).logp;
                } catch (const std::exception&) {
                    g.failed[start + k] = 1;
                }
            }
        }
        for (std::size_t k = start; k < start + n; ++k)
            if (!g.failed[k] && std::isnan(g.logp[k]))
                g.failed[k] = 1;
    }
    return g;
}

/// CSV with header `x,y,logp`; failed cells are written as `nan`.
inline std::string grid_csv(const DensityGrid& g)
{
    std::ostringstream out;
    out << "x,y,logp\n";
    for (std::size_t j = 0; j < g.ny; ++j)
        for (std::size_t i = 0; i < g.nx; ++i) {
            const std::size_t k = j * g.nx + i;
            out << format_double(g.x(i)) << ',' << format_double(g.y(j)) << ','
                << (g.failed[k] ? std::string("nan") : format_double(g.logp[k])) << '\n';
        }
    return out.str();
}

struct ModeCheck {
    std::vector<std::array<double, 2>> centroids;
    std::vector<double> distances;
    bool all_recovered = false;
};

/// For each true mode, takes the grid cells nearest to it, finds the
/// highest-density cell, and computes the density-weighted centroid of the
/// connected region above half that peak value. The mode counts as recovered
/// when the centroid lies within `tol` of it.
inline ModeCheck mode_centroid_check(const DensityGrid& g, const std::vector<std::array<double, 2>>& modes,
                                     double tol = 0.5)
{
    ModeCheck mc;
    mc.all_recovered = true;
    std::vector<std::size_t> owner(g.logp.size());
    for (std::size_t k = 0; k < g.logp.size(); ++k) {
        const double px = g.x(k % g.nx), py = g.y(k / g.nx);
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t m = 0; m < modes.size(); ++m) {
            const double d = std::hypot(px - modes[m][0], py - modes[m][1]);
            if (d < best) {
                best = d;
                owner[k] = m;
            }
        }
    }
    for (std::size_t m = 0; m < modes.size(); ++m) {
        std::size_t peak = g.logp.size();
        for (std::size_t k = 0; k < g.logp.size(); ++k)
            if (owner[k] == m && !g.failed[k] && (peak == g.logp.size() || g.logp[k] > g.logp[peak]))
                peak = k;
        std::array<double, 2> c{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
        if (peak < g.logp.size()) {
            const double cut = g.logp[peak] + std::log(0.5);
            std::vector<char> seen(g.logp.size(), 0);
            std::vector<std::size_t> stack{peak};
            seen[peak] = 1;
            double wsum = 0.0, sx = 0.0, sy = 0.0;
            while (!stack.empty()) {
                const std::size_t k = stack.back();
                stack.pop_back();
                const double w = std::exp(g.logp[k] - g.logp[peak]);
                wsum += w;
                sx += w * g.x(k % g.nx);
                sy += w * g.y(k / g.nx);
                const std::size_t i = k % g.nx, j = k / g.nx;
                const std::size_t nbr[4] = {i > 0 ? k - 1 : k, i + 1 < g.nx ? k + 1 : k, j > 0 ? k - g.nx : k,
                                            j + 1 < g.ny ? k + g.nx : k};
                for (std::size_t q : nbr)
                    if (!seen[q] && owner[q] == m && !g.failed[q] && g.logp[q] >= cut) {
                        seen[q] = 1;
                        stack.push_back(q);
                    }
            }
            c = {sx / wsum, sy / wsum};
        }
        const double dist = std::hypot(c[0] - modes[m][0], c[1] - modes[m][1]);
        mc.centroids.push_back(c);
        mc.distances.push_back(dist);
        if (!(dist <= tol))
            mc.all_recovered = false;
    }
    return mc;
}

// ---------------------------------------------------------------------------
// Latent trajectories

/// Coordinates of labelled points after every step; steps[0] is the input.
struct LatentTrace {
    std::vector<std::size_t> labels;
    std::vector<DenseMatrix> steps;
};

inline LatentTrace latent_trace(const FlowChain& chain, const DatasetSpec& spec, std::size_t points_per_mode, Rng& rng)
{
    if (chain.dim() != 2 || spec.shape().size() != 2)
        throw std::invalid_argument("latent_trace: needs a two-dimensional model and dataset");
    LatentTrace t;
    DenseMatrix x(spec.modes() * points_per_mode, 2);
    for (std::size_t m = 0; m < spec.modes(); ++m)
        for (std::size_t p = 0; p < points_per_mode; ++p) {
            t.labels.push_back(m);
            sample_component(spec, m, rng, x.row(m * points_per_mode + p));
        }
    chain_forward(chain, x, false, nullptr, &t.steps);
    return t;
}

inline std::string trace_csv(const LatentTrace& t)
{
    std::ostringstream out;
    out << "label,step,x,y\n";
    for (std::size_t s = 0; s < t.steps.size(); ++s)
        for (std::size_t p = 0; p < t.labels.size(); ++p)
            out << t.labels[p] << ',' << s << ',' << format_double(t.steps[s](p, 0)) << ','
                << format_double(t.steps[s](p, 1)) << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Training and evaluation drivers

/// Deterministic batch source for `cfg`: fresh generator draws, or
/// minibatches from a fixed training set when train_size is set. Image
/// batches are dequantized.
inline BatchSampler make_sampler(const ExperimentConfig& cfg)
{
    const DatasetSpec spec = cfg.dataset;
    std::shared_ptr<GeneratedData> fixed;
    if (spec.train_size > 0) {
        Rng rng(cfg.seed, 4);
        fixed = std::make_shared<GeneratedData>(gen_dataset(spec, rng, spec.train_size));
    }
    return [spec, fixed](Rng& rng, std::size_t n) {
        DenseMatrix x;
        if (fixed) {
            x = DenseMatrix(n, fixed->x.cols);
            for (std::size_t b = 0; b < n; ++b) {
                const auto src = fixed->x.row(rng.index(fixed->x.rows));
                std::copy(src.begin(), src.end(), x.row(b).begin());
            }
        } else {
            x = gen_dataset(spec, rng, n).x;
        }
        if (spec.kind == DatasetKind::ToyImages)
            x = dequantize_rows(x, spec.levels, rng);
        return x;
    };
}

struct HeldoutData {
    DenseMatrix x;              // model-space inputs (dequantized for images)
    std::vector<double> log_q;  // dequantization log-density per row (images)
    double data_nll = std::numeric_limits<double>::quiet_NaN(); // under the true density
};

inline HeldoutData make_heldout(const ExperimentConfig& cfg)
{
    Rng rng(cfg.seed, 3);
    auto g = gen_dataset(cfg.dataset, rng, cfg.dataset.heldout_size);
    HeldoutData h;
    if (g.discrete) {
        Rng dq(cfg.seed, 5);
        h.x = dequantize_rows(g.x, cfg.dataset.levels, dq, &h.log_q);
    } else {
        h.x = std::move(g.x);
        double s = 0.0;
        for (std::size_t b = 0; b < h.x.rows; ++b)
            s -= g.log_density(h.x.row(b));
        h.data_nll = s / static_cast<double>(h.x.rows);
    }
    return h;
}

struct EvalReport {
    double nll = 0.0;
    double bpd = std::numeric_limits<double>::quiet_NaN();
    double data_nll = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t residual_forward = 0;
    std::uint64_t vjp = 0;
};

inline EvalReport evaluate(const FlowChain& chain, const HeldoutData& h)
{
    EvalReport r;
    r.data_nll = h.data_nll;
    pass_counters().reset();
    const auto logp = chain_log_prob_batch(chain, h.x);
    r.residual_forward = pass_counters().residual_forward;
    r.vjp = pass_counters().vjp;
    double s = 0.0, bits = 0.0;
    for (std::size_t b = 0; b < logp.size(); ++b) {
        s -= logp[b];
        if (!h.log_q.empty())
            bits += bits_per_dim(logp[b], h.log_q[b], h.x.cols);
    }
    r.nll = s / static_cast<double>(logp.size());
    if (!h.log_q.empty())
        r.bpd = bits / static_cast<double>(logp.size());
    return r;
}

struct ExperimentResult {
    TrainResult train;
    EvalReport live;
    EvalReport polyak;
    double train_ms = 0.0;
    double eval_ms = 0.0;
};

inline double elapsed_ms(std::chrono::steady_clock::time_point since)
{
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const std::function<void(std::size_t, double)>& on_update = {})
{
    ExperimentResult r;
    auto t0 = std::chrono::steady_clock::now();
    r.train = train_loop(cfg.train, make_sampler(cfg), build_model(cfg), on_update);
    r.train_ms = elapsed_ms(t0);
    t0 = std::chrono::steady_clock::now();
    const auto h = make_heldout(cfg);
    r.live = evaluate(r.train.live, h);
    r.polyak = evaluate(r.train.polyak, h);
    r.eval_ms = elapsed_ms(t0);
    return r;
}

inline json eval_json(const EvalReport& e)
{
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    return {{"nll", num(e.nll)}, {"bpd", num(e.bpd)}, {"data_nll", num(e.data_nll)}};
}

/// Metrics document; `bpd` and `heldout_nll` refer to the Polyak model.
inline json metrics_json(const ExperimentConfig& cfg, const ExperimentResult& r)
{
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    return {{"config", to_json(cfg)},
            {"seed", cfg.seed},
            {"loss_history", r.train.loss_history},
            {"heldout_nll", {{"live", num(r.live.nll)}, {"polyak", num(r.polyak.nll)}, {"data", num(r.live.data_nll)}}},
            {"bpd", {{"live", num(r.live.bpd)}, {"polyak", num(r.polyak.bpd)}}},
            {"pass_counts",
             {{"residual_forward", r.polyak.residual_forward}, {"vjp", r.polyak.vjp}, {"evaluations", 1}}},
            {"timings_ms", {{"train", r.train_ms}, {"eval", r.eval_ms}}},
            {"version", kVersion}};
}

// ---------------------------------------------------------------------------
// Pass-count benchmark

/// Switches every residual block in the chain to the series estimator.
inline FlowChain with_series(FlowChain chain, const SeriesEstimatorConfig& cfg)
{
    for (auto& s : chain.steps)
        if (auto* r = std::get_if<ResidualBlock>(&s))
            r->series = cfg;
    return chain;
}

inline std::size_t count_blocks(const FlowChain& chain)
{
    std::size_t n = 0;
    for (const auto& s : chain.steps)
        n += std::holds_alternative<QuarBlock>(s) || std::holds_alternative<QuarConvBlock>(s) ||
             std::holds_alternative<ResidualBlock>(s);
    return n;
}

struct BenchReport {
    std::size_t batch = 0;
    std::size_t reps = 0;
    double quar_forward_per_block = 0.0;
    double quar_vjp_per_block = 0.0;
    double residual_forward_per_block = 0.0;
    double residual_vjp_per_block = 0.0;
    double quar_ms = 0.0;     // per likelihood evaluation
    double residual_ms = 0.0; // per likelihood evaluation
    double ratio = 0.0;       // residual_ms / quar_ms
};

/// Counts residual-branch evaluations and times one likelihood evaluation
/// of `batch` under each model. `residual` must carry a series estimator.
inline BenchReport bench_passes(const FlowChain& quar, const FlowChain& residual, const DenseMatrix& batch,
                                std::size_t reps, Rng& rng)
{
    BenchReport b;
    b.batch = batch.rows;
    b.reps = reps;
    const double qb = static_cast<double>(count_blocks(quar));
    const double rb = static_cast<double>(count_blocks(residual));

    pass_counters().reset();
    chain_log_prob_batch(quar, batch);
    b.quar_forward_per_block = static_cast<double>(pass_counters().residual_forward) / qb;
    b.quar_vjp_per_block = static_cast<double>(pass_counters().vjp) / qb;
    pass_counters().reset();
    chain_log_prob_batch(residual, batch, &rng);
    b.residual_forward_per_block = static_cast<double>(pass_counters().residual_forward) / rb;
    b.residual_vjp_per_block = static_cast<double>(pass_counters().vjp) / rb;

    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < reps; ++i)
        chain_log_prob_batch(quar, batch);
    b.quar_ms = elapsed_ms(t0) / static_cast<double>(reps);
    t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < reps; ++i)
        chain_log_prob_batch(residual, batch, &rng);
    b.residual_ms = elapsed_ms(t0) / static_cast<double>(reps);
    b.ratio = b.residual_ms / b.quar_ms;
    return b;
}

inline json bench_json(const BenchReport& b)
{
    return {{"batch", b.batch},
            {"reps", b.reps},
            {"pass_counts",
             {{"quar_forward_per_block", b.quar_forward_per_block},
              {"quar_vjp_per_block", b.quar_vjp_per_block},
              {"residual_forward_per_block", b.residual_forward_per_block},
              {"residual_vjp_per_block", b.residual_vjp_per_block}}},
            {"timings_ms", {{"quar", b.quar_ms}, {"residual", b.residual_ms}}},
            {"ratio", b.ratio},
            {"version", kVersion}};
}

// ---------------------------------------------------------------------------
// Image output

/// Binary PGM (P5) of a single-channel image with values in [0, 1],
/// quantized to `levels` gray levels and stretched to 0..255.
inline std::string pgm_bytes(std::span<const double> img, std::size_t height, std::size_t width, int levels)
{
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (std::size_t i = 0; i < height * width; ++i) {
        const double v = std::clamp(img[i], 0.0, 1.0);
        const int q = std::min(levels - 1, static_cast<int>(v * levels));
        out.push_back(static_cast<char>(static_cast<unsigned char>(q * 255 / (levels - 1))));
    }
    return out;
}

} // namespace quar

#endif // QUAR_EXPERIMENTS_HPP
