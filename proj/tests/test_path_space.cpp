#include "pathfbsde/errors.hpp"
#include "pathfbsde/path_space.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace pathfbsde;

namespace {

GridPath ramp(std::size_t nodes, double dt) {
    std::vector<double> v(nodes);
    for (std::size_t i = 0; i < nodes; ++i) v[i] = static_cast<double>(i) * dt;
    return GridPath(1, dt, v);
}

} // namespace

TEST(PathSpace, ConstructionRejectsBadInput) {
    EXPECT_THROW(GridPath(0, 0.1, {1.0}), InvalidArgument);
    EXPECT_THROW(GridPath(1, 0.0, {1.0}), InvalidArgument);
    EXPECT_THROW(GridPath(2, 0.1, {1.0, 2.0, 3.0}), InvalidArgument);
    EXPECT_THROW(GridPath(1, 0.1, {1.0, NAN}), InvalidArgument);
    EXPECT_THROW(GridPath(1, 0.1, {}), InvalidArgument);
}

TEST(PathSpace, TimeToNodeRequiresGridTimes) {
    EXPECT_EQ(time_to_node(0.5, 0.125), 4u);
    EXPECT_EQ(time_to_node(0.0, 0.125), 0u);
    EXPECT_THROW(time_to_node(0.3, 0.125), InvalidArgument);
    EXPECT_THROW(time_to_node(-1.0, 0.125), InvalidArgument);
}

TEST(PathSpace, ConstantPathHasGridLength) {
    const GridPath p = GridPath::constant(2.0, 0.25, 1.0);
    EXPECT_EQ(p.nodes(), 5u);
    EXPECT_DOUBLE_EQ(p.time(), 1.0);
    for (std::size_t i = 0; i < p.nodes(); ++i) EXPECT_EQ(p.node(i)[0], 2.0);
}

TEST(PathSpace, VerticalBumpChangesOnlyTheEndpoint) {
    const GridPath p = ramp(5, 0.25);
    const std::vector<double> x = {0.5};
    const GridPath b = vertical_bump(p, x);
    for (std::size_t i = 0; i + 1 < p.nodes(); ++i) EXPECT_EQ(b.node(i)[0], p.node(i)[0]);
    EXPECT_EQ(b.last()[0], p.last()[0] + 0.5);
    EXPECT_EQ(b.time(), p.time());
    EXPECT_THROW(vertical_bump(p, std::vector<double>{1.0, 2.0}), InvalidArgument);
}

TEST(PathSpace, ZeroBumpIsIdentity) {
    const GridPath p = ramp(7, 0.1);
    EXPECT_EQ(vertical_bump(p, std::vector<double>{0.0}), p);
}

TEST(PathSpace, HorizontalExtensionFreezesTheEnd) {
    const GridPath p = ramp(3, 0.25);
    const GridPath e = horizontal_extension(p, 1.0);
    EXPECT_EQ(e.nodes(), 5u);
    for (std::size_t i = 2; i < 5; ++i) EXPECT_EQ(e.node(i)[0], p.last()[0]);
    EXPECT_THROW(horizontal_extension(p, 0.25), InvalidArgument);
    EXPECT_EQ(horizontal_extension(p, p.time()), p);
}

TEST(PathSpace, DInfinityOfAPathWithItsExtensionIsTheTimeGap) {
    const GridPath p = ramp(5, 0.125);
    const GridPath e = horizontal_extension(p, 1.0);
    EXPECT_NEAR(d_infinity(PathPair(p, e)), 0.5, 1e-15);
    EXPECT_NEAR(sup_distance(PathPair(p, e)), 0.0, 1e-15);
}

TEST(PathSpace, DInfinityIsAMetricOnSamples) {
    const GridPath a = ramp(5, 0.25);
    const GridPath b = vertical_bump(a, std::vector<double>{0.3});
    const GridPath c = GridPath::constant(0.2, 0.25, 0.5);
    const double ab = d_infinity(PathPair(a, b));
    const double bc = d_infinity(PathPair(b, c));
    const double ac = d_infinity(PathPair(a, c));
    EXPECT_NEAR(ab, 0.3, 1e-15);
    EXPECT_EQ(d_infinity(PathPair(a, a)), 0.0);
    EXPECT_EQ(ab, d_infinity(PathPair(b, a)));
    EXPECT_LE(ac, ab + bc + 1e-15);
}

TEST(PathSpace, PairRejectsMismatchedGrids) {
    EXPECT_THROW(PathPair(ramp(3, 0.25), ramp(3, 0.5)), InvalidArgument);
    EXPECT_THROW(PathPair(ramp(3, 0.25), GridPath(2, 0.25, {0, 0})), InvalidArgument);
}

TEST(PathSpace, SupNormUsesEuclideanNodes) {
    const GridPath p(2, 0.5, {0.0, 0.0, 3.0, 4.0, 1.0, 1.0});
    EXPECT_DOUBLE_EQ(sup_norm(p), 5.0);
}

TEST(PathSpace, ConcatBrownianAppendsCumulativeSums) {
    const GridPath p = GridPath::constant(1.0, 0.25, 0.25);
    const std::vector<double> inc = {0.5, -1.0, 0.25};
    const GridPath w = concat_brownian(p, inc, 1.0);
    ASSERT_EQ(w.nodes(), 5u);
    EXPECT_EQ(w.node(1)[0], 1.0);
    EXPECT_EQ(w.node(2)[0], 1.5);
    EXPECT_EQ(w.node(3)[0], 0.5);
    EXPECT_EQ(w.node(4)[0], 0.75);
    EXPECT_THROW(concat_brownian(p, std::vector<double>{1.0}, 1.0), InvalidArgument);
}

TEST(PathSpace, AtTimeIsRightContinuousStepValue) {
    const GridPath p = ramp(5, 0.25);
    EXPECT_EQ(p.at_time(0.3)[0], 0.25);
    EXPECT_EQ(p.at_time(0.5)[0], 0.5);
    EXPECT_EQ(p.at_time(1.0)[0], 1.0);
    EXPECT_THROW(p.at_time(1.5), InvalidArgument);
}

TEST(PathSpace, TextRoundTripIsBitExact) {
    std::vector<double> v;
    for (int i = 0; i < 18; ++i) v.push_back(std::sin(0.7 * i) / 3.0 + 1e-17 * i);
    const GridPath p(3, 1.0 / 3.0, v);
    const GridPath q = from_text(to_text(p));
    EXPECT_EQ(p, q);
    EXPECT_THROW(from_text("1 0.5 3\n0 1\n"), InvalidArgument);
    EXPECT_THROW(from_text("x"), InvalidArgument);
}

TEST(PathSpace, PrefixKeepsLeadingNodes) {
    const GridPath p = ramp(6, 0.2);
    const GridPath q = p.prefix(2);
    EXPECT_EQ(q.nodes(), 3u);
    EXPECT_NEAR(q.time(), 0.4, 1e-15);
    EXPECT_THROW(p.prefix(6), InvalidArgument);
}
