#include <gtest/gtest.h>

#include <random>

#include "edadet/proposals.hpp"
#include "oracles.hpp"

using namespace edadet;

TEST(Boxes, IouAndGiou) {
  const BoxXYXY a{0, 0, 0.5, 0.5}, b{0.25, 0.25, 0.75, 0.75}, far{0.8, 0.8, 1.0, 1.0};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(giou(a, a), 1.0);
  EXPECT_NEAR(iou(a, b), 0.0625 / 0.4375, 1e-15);
  EXPECT_EQ(iou(a, far), 0.0);
  // Hull 1.0, union 0.29: giou = 0 - (1 - 0.29) / 1.
  EXPECT_NEAR(giou(a, far), -0.71, 1e-12);
}

TEST(Boxes, ConversionsRoundTrip) {
  const BoxXYXY b{0.1, 0.2, 0.4, 0.6};
  const BoxXYXY r = to_xyxy(to_cxcywh(b));
  EXPECT_NEAR(r.x1, b.x1, 1e-15);
  EXPECT_NEAR(r.y2, b.y2, 1e-15);
  const BoxXYXY f = flip_box_horizontal(b);
  EXPECT_NEAR(f.x1, 0.6, 1e-15);
  EXPECT_NEAR(f.x2, 0.9, 1e-15);
  EXPECT_EQ(f.y1, 0.2);
  EXPECT_EQ(f.y2, 0.6);
}

TEST(Matching, MinimalTotalCostAgainstBruteForce) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> dim(0, 6);
  std::uniform_real_distribution<double> u(0, 10);
  for (int t = 0; t < 400; ++t) {
    const int nq = dim(rng), nt = dim(rng);
    ag::Mat c(nq, nt);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = std::round(u(rng));  // ties on purpose
    const MatchResult m = assign_min_cost(c);
    ASSERT_EQ(m.pairs.size(), static_cast<std::size_t>(std::min(nq, nt)));
    ASSERT_EQ(m.pairs.size() + m.unmatched_queries.size(), static_cast<std::size_t>(nq));
    std::vector<char> used(static_cast<std::size_t>(nt), 0);
    for (auto [q, tt] : m.pairs) {
      ASSERT_FALSE(used[static_cast<std::size_t>(tt)]);
      used[static_cast<std::size_t>(tt)] = 1;
    }
    if (nq && nt) ASSERT_NEAR(m.total_cost(c), oracle::min_assignment_cost(c), 1e-9) << nq << "x" << nt;
  }
}

TEST(Matching, NonFiniteCostRejected) {
  ag::Mat c(1, 1);
  c(0, 0) = std::nan("");
  EXPECT_THROW(assign_min_cost(c), InvalidArgument);
}

TEST(Matching, ProposalCostPrefersOverlap) {
  std::vector<Proposal> props{{{0.25, 0.25, 0.5, 0.5}, 0.5}, {{0.75, 0.75, 0.5, 0.5}, 0.5}};
  std::vector<BoxXYXY> tgts{{0.5, 0.5, 1.0, 1.0}, {0.0, 0.0, 0.5, 0.5}};
  const MatchResult m = bipartite_match(props, tgts, {});
  ASSERT_EQ(m.pairs.size(), 2u);
  EXPECT_EQ(m.pairs[0], (std::pair<int, int>{0, 1}));
  EXPECT_EQ(m.pairs[1], (std::pair<int, int>{1, 0}));
}

TEST(BoxLoss, ValueAndGraphAgree) {
  std::vector<Proposal> props{{{0.3, 0.3, 0.2, 0.4}, 0.7}, {{0.6, 0.5, 0.3, 0.2}, 0.2}, {{0.5, 0.5, 0.9, 0.9}, 0.5}};
  std::vector<BoxXYXY> tgts{{0.1, 0.1, 0.4, 0.5}, {0.5, 0.4, 0.8, 0.6}};
  const BoxWeights w{2, 5, 2};
  const MatchResult m = bipartite_match(props, tgts, w);
  const BoxLossTerms v = box_loss(props, tgts, m, w);

  ag::Graph g(false);
  ag::Mat boxes(3, 4), logits(3, 1);
  for (int q = 0; q < 3; ++q) {
    const auto& b = props[static_cast<std::size_t>(q)].box;
    boxes.row(q) << b.cx, b.cy, b.w, b.h;
    logits(q, 0) = std::log(props[static_cast<std::size_t>(q)].objectness / (1 - props[static_cast<std::size_t>(q)].objectness));
  }
  const BoxLossVars gv = box_loss(g.constant(boxes), g.constant(logits), tgts, m, w);
  EXPECT_NEAR(gv.objectness.scalar(), v.objectness, 1e-12);
  EXPECT_NEAR(gv.l1.scalar(), v.l1, 1e-12);
  EXPECT_NEAR(gv.giou.scalar(), v.giou, 1e-12);
  EXPECT_NEAR(gv.total.scalar(), v.total, 1e-12);
}

TEST(BoxLoss, PerfectMatchHasOnlyObjectnessTerm) {
  std::vector<Proposal> props{{{0.5, 0.5, 0.2, 0.2}, 1.0 - 1e-9}};
  std::vector<BoxXYXY> tgts{{0.4, 0.4, 0.6, 0.6}};
  const auto m = bipartite_match(props, tgts, {});
  const auto t = box_loss(props, tgts, m, {});
  EXPECT_NEAR(t.l1, 0.0, 1e-12);
  EXPECT_NEAR(t.giou, 0.0, 1e-12);
  EXPECT_NEAR(t.total, 0.0, 1e-6);
}

TEST(SplitBranches, SelectsLayers) {
  DecoderConfig cfg;
  cfg.num_layers = 6;
  cfg.split_layer = 2;
  const std::vector<int> states{10, 11, 12, 13, 14, 15};
  const auto [box, cls] = split_branches(states, cfg);
  EXPECT_EQ(box, 15);
  EXPECT_EQ(cls, 11);
  cfg.split_layer = 7;
  EXPECT_THROW(split_branches(states, cfg), InvalidArgument);
}

TEST(Proposals, ShapesAndRanges) {
  DecoderConfig cfg;
  cfg.num_layers = 2;
  cfg.split_layer = 1;
  cfg.hidden_dim = 16;
  cfg.ffn_dim = 16;
  cfg.num_queries = 10;
  ParamStore ps;
  init_decoder_params(ps, cfg, 8, 1);
  PatchGrid f{4, 4, 16, normal_init("f", 2, 16, 8, 1.0)};
  const auto props = generate_proposals(f, cfg, ps);
  ASSERT_EQ(props.size(), 10u);
  for (const auto& p : props) {
    EXPECT_NO_THROW(p.validate());
    EXPECT_GT(p.objectness, 0.0);
    EXPECT_LT(p.objectness, 1.0);
  }
  cfg.num_queries = 17;
  EXPECT_THROW(generate_proposals(f, cfg, ps), InvalidArgument);
}
