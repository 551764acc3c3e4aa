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

#ifndef QUAR_DATASETS_HPP
#define QUAR_DATASETS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "layers.hpp"
#include "numerics.hpp"

namespace quar {

enum class DatasetKind { EightGaussians, TwoUniforms, ToyImages };

inline const char* to_string(DatasetKind k)
{
    switch (k) {
    case DatasetKind::EightGaussians:
        return "eight_gaussians";
    case DatasetKind::TwoUniforms:
        return "two_uniforms";
    case DatasetKind::ToyImages:
        return "toy_images";
    }
    return "?";
}

struct Interval {
    double lo = 0.0;
    double hi = 1.0;
};

struct DatasetSpec {
    DatasetKind kind = DatasetKind::EightGaussians;
    // eight Gaussians
    double radius = 4.0;
    double std = 0.5;
    // two uniforms
    std::vector<Interval> intervals{{-2.0, -1.0}, {1.0, 2.0}};
    std::vector<double> weights{0.5, 0.5};
    // toy images
    std::size_t side = 8;
    int levels = 8;
    std::uint64_t pattern_seed = 0;
    std::size_t patterns = 32;
    // sizes; train_size 0 draws a fresh batch from the generator every update
    std::size_t train_size = 0;
    std::size_t heldout_size = 2000;

    /// Number of mixture components that carry a label.
    std::size_t modes() const
    {
        switch (kind) {
        case DatasetKind::EightGaussians:
            return 8;
        case DatasetKind::TwoUniforms:
            return intervals.size();
        case DatasetKind::ToyImages:
            return patterns;
        }
        return 0;
    }

    Shape shape() const
    {
        switch (kind) {
        case DatasetKind::EightGaussians:
            return {2, 1, 1};
        case DatasetKind::TwoUniforms:
            return {1, 1, 1};
        case DatasetKind::ToyImages:
            return {1, side, side};
        }
        return {};
    }

    void validate() const
    {
        if (kind == DatasetKind::EightGaussians && !(radius >= 0.0 && std > 0.0))
            throw std::invalid_argument("dataset: eight_gaussians needs radius >= 0 and std > 0");
        if (kind == DatasetKind::TwoUniforms) {
            if (intervals.empty() || intervals.size() != weights.size())
                throw std::invalid_argument("dataset: need one weight per interval");
            double total = 0.0;
            for (std::size_t i = 0; i < intervals.size(); ++i) {
                if (!(intervals[i].hi > intervals[i].lo))
                    throw std::invalid_argument("dataset: interval " + std::to_string(i) + " is empty");
                if (!(weights[i] > 0.0))
                    throw std::invalid_argument("dataset: weight " + std::to_string(i) + " must be positive");
                total += weights[i];
                for (std::size_t j = 0; j < i; ++j)
                    if (intervals[i].lo < intervals[j].hi && intervals[j].lo < intervals[i].hi)
                        throw std::invalid_argument("dataset: intervals " + std::to_string(j) + " and " +
                                                    std::to_string(i) + " overlap");
            }
            if (std::abs(total - 1.0) > 1e-12)
                throw std::invalid_argument("dataset: mixture weights must sum to 1");
        }
        if (kind == DatasetKind::ToyImages && (side < 2 || levels < 2 || patterns < 1))
            throw std::invalid_argument("dataset: toy_images needs side >= 2, levels >= 2, patterns >= 1");
    }
};

using LogDensity = std::function<double(std::span<const double>)>;

/// Samples (one per row) with their mixture labels. Image rows hold integer
/// gray levels and must be dequantized before use.
struct GeneratedData {
    DenseMatrix x;
    std::vector<std::size_t> labels;
    LogDensity log_density; // empty when no closed form exists
    bool discrete = false;
};

inline std::array<double, 2> gaussian_mode(const DatasetSpec& s, std::size_t k)
{
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / 8.0;
    return {s.radius * std::cos(a), s.radius * std::sin(a)};
}

namespace detail {

inline std::size_t pick(std::span<const double> weights, Rng& rng)
{
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc)
            return i;
    }
    return weights.size() - 1;
}

/// Prototype bank: rectangles on a flat background and linear ramps.
inline std::vector<std::vector<int>> image_prototypes(const DatasetSpec& s)
{
    Rng rng(s.pattern_seed, 7);
    const std::size_t n = s.side;
    std::vector<std::vector<int>> bank;
    for (std::size_t p = 0; p < s.patterns; ++p) {
        std::vector<int> img(n * n);
        const std::size_t kind = rng.index(3);
        if (kind == 0) {
            const int bg = static_cast<int>(rng.index(static_cast<std::size_t>(s.levels)));
            int fg = static_cast<int>(rng.index(static_cast<std::size_t>(s.levels - 1)));
            if (fg >= bg)
                ++fg;
            const std::size_t r0 = rng.index(n - 1), c0 = rng.index(n - 1);
            const std::size_t r1 = r0 + 1 + rng.index(n - r0 - 1), c1 = c0 + 1 + rng.index(n - c0 - 1);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < n; ++c)
                    img[r * n + c] = (r >= r0 && r <= r1 && c >= c0 && c <= c1) ? fg : bg;
        } else {
            const bool flip = rng.uniform() < 0.5;
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < n; ++c) {
                    std::size_t t = kind == 1 ? c : r;
                    if (flip)
                        t = n - 1 - t;
                    img[r * n + c] = static_cast<int>(std::lround(static_cast<double>((s.levels - 1) * t) /
                                                                  static_cast<double>(n - 1)));
                }
        }
        bank.push_back(std::move(img));
    }
    return bank;
}

} // namespace detail

/// Closed-form data log-density, or an empty function for image data.
inline LogDensity true_log_density(const DatasetSpec& spec)
{
    switch (spec.kind) {
    case DatasetKind::EightGaussians:
        return [spec](std::span<const double> x) {
            const double var = spec.std * spec.std;
            double terms[8];
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < 8; ++k) {
                const auto m = gaussian_mode(spec, k);
                const double dx = x[0] - m[0], dy = x[1] - m[1];
                terms[k] = std::log(1.0 / 8.0) - kLogTwoPi - std::log(var) - 0.5 * (dx * dx + dy * dy) / var;
                mx = std::max(mx, terms[k]);
            }
            double s = 0.0;
            for (double t : terms)
                s += std::exp(t - mx);
            return mx + std::log(s);
        };
    case DatasetKind::TwoUniforms:
        return [spec](std::span<const double> x) {
            double p = 0.0;
            for (std::size_t i = 0; i < spec.intervals.size(); ++i)
                if (x[0] >= spec.intervals[i].lo && x[0] <= spec.intervals[i].hi)
                    p += spec.weights[i] / (spec.intervals[i].hi - spec.intervals[i].lo);
            return std::log(p);
        };
    case DatasetKind::ToyImages:
        return {};
    }
    return {};
}

/// One sample from mixture component `label`.
inline void sample_component(const DatasetSpec& spec, std::size_t label, Rng& rng, std::span<double> out,
                             const std::vector<std::vector<int>>* bank = nullptr)
{
    switch (spec.kind) {
    case DatasetKind::EightGaussians: {
        const auto m = gaussian_mode(spec, label);
        out[0] = m[0] + spec.std * rng.normal();
        out[1] = m[1] + spec.std * rng.normal();
        break;
    }
    case DatasetKind::TwoUniforms:
        out[0] = rng.uniform(spec.intervals[label].lo, spec.intervals[label].hi);
        break;
    case DatasetKind::ToyImages: {
        const auto& img = bank->at(label);
        for (std::size_t i = 0; i < img.size(); ++i)
            out[i] = static_cast<double>(img[i]);
        break;
    }
    }
}

/// n i.i.d. samples together with the closed-form data log-density.
inline GeneratedData gen_dataset(const DatasetSpec& spec, Rng& rng, std::size_t n)
{
    spec.validate();
    GeneratedData g;
    g.x = DenseMatrix(n, spec.shape().size());
    g.labels.resize(n);
    g.discrete = spec.kind == DatasetKind::ToyImages;
    g.log_density = true_log_density(spec);
    std::vector<std::vector<int>> bank;
    if (g.discrete)
        bank = detail::image_prototypes(spec);
    const std::vector<double> uniform_modes(spec.modes(), 1.0 / static_cast<double>(spec.modes()));
    const auto& w = spec.kind == DatasetKind::TwoUniforms ? spec.weights : uniform_modes;
    for (std::size_t i = 0; i < n; ++i) {
        g.labels[i] = detail::pick(w, rng);
        sample_component(spec, g.labels[i], rng, g.x.row(i), &bank);
    }
    return g;
}

/// Uniform dequantization of integer-valued rows into [0, 1]; returns the
/// summed log_q per row through `log_q` when given.
inline DenseMatrix dequantize_rows(const DenseMatrix& x_int, int levels, Rng& rng, std::vector<double>* log_q = nullptr)
{
    DenseMatrix out(x_int.rows, x_int.cols);
    std::vector<int> tmp(x_int.cols);
    if (log_q)
        log_q->assign(x_int.rows, 0.0);
    for (std::size_t b = 0; b < x_int.rows; ++b) {
        for (std::size_t d = 0; d < x_int.cols; ++d)
            tmp[d] = static_cast<int>(x_int(b, d));
        auto dq = dequantize(tmp, levels, rng);
        std::copy(dq.x.begin(), dq.x.end(), out.row(b).begin());
        if (log_q)
            (*log_q)[b] = dq.log_q;
    }
    return out;
}

} // namespace quar

#endif // QUAR_DATASETS_HPP
