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

#ifndef QUAR_MASKING_HPP
#define QUAR_MASKING_HPP

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "numerics.hpp"

namespace quar {

enum class MaskMode { AR, QuAR };

inline const char* to_string(MaskMode m) { return m == MaskMode::AR ? "ar" : "quar"; }

/// Unit layout of a grouped masked network. Level 0 is the input, the last
/// level is the output; both have one unit per dimension. Hidden level i has
/// D * multipliers[i-1] units, stored group-major (unit = d * k + j).
struct GroupedLayout {
    std::size_t dim = 1;
    std::vector<std::size_t> multipliers;

    std::size_t levels() const { return multipliers.size() + 2; }

    std::size_t group_size(std::size_t level) const
    {
        if (level == 0 || level + 1 == levels())
            return 1;
        return multipliers.at(level - 1);
    }

    std::size_t units(std::size_t level) const { return dim * group_size(level); }

    std::size_t group_of(std::size_t level, std::size_t unit) const { return unit / group_size(level); }

    void validate() const
    {
        if (dim < 1)
            throw std::invalid_argument("GroupedLayout: dimension must be >= 1");
        for (std::size_t i = 0; i < multipliers.size(); ++i)
            if (multipliers[i] < 1)
                throw std::invalid_argument("GroupedLayout: multiplier " + std::to_string(i) + " is zero");
    }

    friend bool operator==(const GroupedLayout&, const GroupedLayout&) = default;
};

struct MaskSet {
    MaskMode mode = MaskMode::QuAR;
    GroupedLayout layout;
    /// masks[l] connects level l to level l+1; entry (out_unit, in_unit).
    std::vector<DenseMatrix> masks;
};

/// Connection rule between groups: strictly-earlier groups on the first AR
/// layer, earlier-or-equal everywhere else.
inline bool group_connected(std::size_t d_in, std::size_t d_out, bool first_layer, MaskMode mode)
{
    if (first_layer && mode == MaskMode::AR)
        return d_in < d_out;
    return d_in <= d_out;
}

inline MaskSet build_dense_masks(const GroupedLayout& layout, MaskMode mode)
{
    layout.validate();
    MaskSet set{mode, layout, {}};
    for (std::size_t l = 0; l + 1 < layout.levels(); ++l) {
        const std::size_t n_in = layout.units(l);
        const std::size_t n_out = layout.units(l + 1);
        DenseMatrix m(n_out, n_in);
        for (std::size_t o = 0; o < n_out; ++o)
            for (std::size_t i = 0; i < n_in; ++i)
                m(o, i) = group_connected(layout.group_of(l, i), layout.group_of(l + 1, o), l == 0, mode) ? 1.0 : 0.0;
        set.masks.push_back(std::move(m));
    }
    return set;
}

/// Boolean product of all masks. Entry (d_out, d_in) is 1 iff output d_out
/// can depend on input d_in.
inline DenseMatrix mask_reachability_check(const MaskSet& set)
{
    if (set.masks.empty())
        throw std::invalid_argument("mask_reachability_check: empty mask set");
    DenseMatrix reach = set.masks.front();
    for (std::size_t l = 1; l < set.masks.size(); ++l) {
        if (set.masks[l].cols != reach.rows)
            throw std::invalid_argument("mask_reachability_check: layer " + std::to_string(l) + " shape mismatch");
        reach = matmul(set.masks[l], reach);
        for (double& v : reach.values)
            v = v > 0.0 ? 1.0 : 0.0;
    }
    if (reach.rows != set.layout.dim || reach.cols != set.layout.dim)
        throw std::invalid_argument("mask_reachability_check: composed mask is not D x D");
    return reach;
}

// ---------------------------------------------------------------------------
// Convolutional masks

struct ConvMaskSpec {
    std::size_t kernel_h = 3;
    std::size_t kernel_w = 3;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t channel_groups = 1;
    MaskMode mode = MaskMode::QuAR;
    bool first_layer = true;

    void validate() const
    {
        if (kernel_h % 2 == 0 || kernel_w % 2 == 0)
            throw std::invalid_argument("ConvMaskSpec: kernel sides must be odd");
        if (channel_groups == 0 || in_channels % channel_groups != 0 || out_channels % channel_groups != 0)
            throw std::invalid_argument("ConvMaskSpec: channels are not divisible into the channel groups");
    }

    std::size_t taps() const { return kernel_h * kernel_w; }
    std::size_t center_tap() const { return (kernel_h / 2) * kernel_w + kernel_w / 2; }
};

/// One mask matrix (out_channels x in_channels) per kernel tap, taps in
/// row-major kernel order.
struct ConvMask {
    ConvMaskSpec spec;
    std::vector<DenseMatrix> taps;
};

/// Raster-ordered (PixelCNN style) mask. Taps reading strictly earlier pixels
/// are fully connected, later ones are cut, and the center tap applies the
/// channel-group rule. QuAR mode uses a single mask family for every layer.
inline ConvMask build_conv_masks(const ConvMaskSpec& spec)
{
    spec.validate();
    ConvMask cm{spec, {}};
    const std::size_t in_per_group = spec.in_channels / spec.channel_groups;
    const std::size_t out_per_group = spec.out_channels / spec.channel_groups;
    const long ch = static_cast<long>(spec.kernel_h / 2);
    const long cw = static_cast<long>(spec.kernel_w / 2);
    for (std::size_t ky = 0; ky < spec.kernel_h; ++ky)
        for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
            const long dy = static_cast<long>(ky) - ch;
            const long dx = static_cast<long>(kx) - cw;
            DenseMatrix m(spec.out_channels, spec.in_channels);
            if (dy < 0 || (dy == 0 && dx < 0)) {
                m.fill(1.0);
            } else if (dy == 0 && dx == 0) {
                for (std::size_t o = 0; o < spec.out_channels; ++o)
                    for (std::size_t i = 0; i < spec.in_channels; ++i)
                        m(o, i) = group_connected(i / in_per_group, o / out_per_group, spec.first_layer, spec.mode) ? 1.0 : 0.0;
            }
            cm.taps.push_back(std::move(m));
        }
    return cm;
}

} // namespace quar

#endif // QUAR_MASKING_HPP
