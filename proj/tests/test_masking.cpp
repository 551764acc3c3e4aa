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

#include <vector>

#include <gtest/gtest.h>

#include "quar/layers.hpp"
#include "quar/masking.hpp"

using namespace quar;

namespace {

DenseMatrix lower(std::size_t d, bool strict)
{
    DenseMatrix m(d, d);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c)
            m(r, c) = (strict ? c < r : c <= r) ? 1.0 : 0.0;
    return m;
}

} // namespace

TEST(DenseMasks, ThreeDimLayoutEdgeForEdge)
{
    const GroupedLayout layout{3, {3, 2}};
    const auto set = build_dense_masks(layout, MaskMode::QuAR);
    ASSERT_EQ(set.masks.size(), 3u);
    EXPECT_EQ(layout.units(1), 9u);
    EXPECT_EQ(layout.units(2), 6u);
    EXPECT_EQ(layout.group_size(1), 3u);
    EXPECT_EQ(layout.group_size(2), 2u);

    // input -> 9 hidden units in three groups of three; diagonal block included
    const DenseMatrix m0(9, 3, {1, 0, 0, 1, 0, 0, 1, 0, 0,
                                1, 1, 0, 1, 1, 0, 1, 1, 0,
                                1, 1, 1, 1, 1, 1, 1, 1, 1});
    // 9 -> 6 hidden units, group d2 sees groups d1 <= d2
    const DenseMatrix m1(6, 9, {1, 1, 1, 0, 0, 0, 0, 0, 0,
                                1, 1, 1, 0, 0, 0, 0, 0, 0,
                                1, 1, 1, 1, 1, 1, 0, 0, 0,
                                1, 1, 1, 1, 1, 1, 0, 0, 0,
                                1, 1, 1, 1, 1, 1, 1, 1, 1,
                                1, 1, 1, 1, 1, 1, 1, 1, 1});
    const DenseMatrix m2(3, 6, {1, 1, 0, 0, 0, 0,
                                1, 1, 1, 1, 0, 0,
                                1, 1, 1, 1, 1, 1});
    EXPECT_EQ(set.masks[0], m0);
    EXPECT_EQ(set.masks[1], m1);
    EXPECT_EQ(set.masks[2], m2);
    EXPECT_EQ(mask_reachability_check(set), lower(3, false));
}

TEST(DenseMasks, ThreeDimLayoutAutoregressive)
{
    const auto set = build_dense_masks(GroupedLayout{3, {3, 2}}, MaskMode::AR);
    EXPECT_EQ(mask_reachability_check(set), lower(3, true));
    // only the first layer differs: the diagonal block is cut
    for (std::size_t o = 0; o < 9; ++o)
        EXPECT_EQ(set.masks[0](o, o / 3), 0.0);
}

TEST(DenseMasks, SingleDimensionArIsConstant)
{
    const auto set = build_dense_masks(GroupedLayout{1, {4, 3}}, MaskMode::AR);
    for (double v : set.masks[0].values)
        EXPECT_EQ(v, 0.0);
    Rng rng(1, 0);
    auto layer = make_masked_dense(set.masks[0], 1, 1, 4, true, rng);
    const std::vector<double> a{-3.0}, b{5.0};
    EXPECT_EQ(masked_dense_apply(layer, a).y, masked_dense_apply(layer, b).y);
}

TEST(DenseMasks, FourDimReachabilityBothModes)
{
    const GroupedLayout layout{4, {2, 2}};
    EXPECT_EQ(mask_reachability_check(build_dense_masks(layout, MaskMode::AR)), lower(4, true));
    EXPECT_EQ(mask_reachability_check(build_dense_masks(layout, MaskMode::QuAR)), lower(4, false));
}

TEST(DenseMasks, RandomLayoutsNeverReachAboveDiagonal)
{
    Rng rng(77, 0);
    for (int trial = 0; trial < 200; ++trial) {
        GroupedLayout layout;
        layout.dim = 1 + rng.index(8);
        const std::size_t hidden = rng.index(4);
        for (std::size_t h = 0; h < hidden; ++h)
            layout.multipliers.push_back(1 + rng.index(4));
        for (MaskMode mode : {MaskMode::AR, MaskMode::QuAR}) {
            const auto r = mask_reachability_check(build_dense_masks(layout, mode));
            for (std::size_t a = 0; a < layout.dim; ++a) {
                for (std::size_t b = a + 1; b < layout.dim; ++b)
                    EXPECT_EQ(r(a, b), 0.0);
                EXPECT_EQ(r(a, a), mode == MaskMode::QuAR ? 1.0 : 0.0);
            }
        }
    }
}

TEST(DenseMasks, Deterministic)
{
    const GroupedLayout layout{5, {3, 1, 2}};
    const auto a = build_dense_masks(layout, MaskMode::QuAR);
    const auto b = build_dense_masks(layout, MaskMode::QuAR);
    ASSERT_EQ(a.masks.size(), b.masks.size());
    for (std::size_t i = 0; i < a.masks.size(); ++i)
        EXPECT_EQ(a.masks[i], b.masks[i]);
}

TEST(DenseMasks, RejectsZeroMultiplier)
{
    EXPECT_THROW(build_dense_masks(GroupedLayout{3, {2, 0}}, MaskMode::QuAR), std::invalid_argument);
}

TEST(DenseMasks, ReachabilityRejectsIncompatibleShapes)
{
    auto set = build_dense_masks(GroupedLayout{3, {2}}, MaskMode::QuAR);
    set.masks[1] = DenseMatrix(3, 5, 1.0);
    EXPECT_THROW(mask_reachability_check(set), std::invalid_argument);
}

TEST(ConvMasks, ActiveTapCounts)
{
    auto active = [](const ConvMask& cm) {
        std::size_t n = 0;
        for (const auto& t : cm.taps)
            n += t(0, 0) != 0.0;
        return n;
    };
    EXPECT_EQ(active(build_conv_masks({3, 3, 1, 1, 1, MaskMode::QuAR, true})), 5u);
    EXPECT_EQ(active(build_conv_masks({3, 3, 1, 1, 1, MaskMode::AR, true})), 4u);
}

TEST(ConvMasks, OneByOneMatchesDenseFirstLayer)
{
    const auto cm = build_conv_masks({1, 1, 3, 3, 3, MaskMode::QuAR, true});
    ASSERT_EQ(cm.taps.size(), 1u);
    EXPECT_EQ(cm.taps[0], build_dense_masks(GroupedLayout{3, {1}}, MaskMode::QuAR).masks[0]);
}

TEST(ConvMasks, LaterLayersAllowSameGroup)
{
    const auto ar_later = build_conv_masks({3, 3, 4, 4, 2, MaskMode::AR, false});
    const auto& c = ar_later.taps[ar_later.spec.center_tap()];
    EXPECT_EQ(c(0, 0), 1.0);
    EXPECT_EQ(c(0, 2), 0.0);
    EXPECT_EQ(c(3, 1), 1.0);
}

TEST(ConvMasks, RejectsBadSpecs)
{
    EXPECT_THROW(build_conv_masks({2, 3, 1, 1, 1, MaskMode::QuAR, true}), std::invalid_argument);
    EXPECT_THROW(build_conv_masks({3, 3, 3, 4, 2, MaskMode::QuAR, true}), std::invalid_argument);
}
