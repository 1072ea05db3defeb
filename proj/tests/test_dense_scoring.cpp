#include <gtest/gtest.h>

#include <random>

#include "edadet/dense_scoring.hpp"
#include "edadet/encoders.hpp"
#include "oracles.hpp"

using namespace edadet;

namespace {

DenseScoreMap make_map(const Mat& probs, int h, int w, bool fused = false) {
  std::vector<std::string> names;
  for (int c = 0; c < probs.cols(); ++c) names.push_back("c" + std::to_string(c));
  return DenseScoreMap{h, w, 8, names, probs, fused};
}

BoxXYXY random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
  if (std::abs(a - b) < 1e-3) b = std::min(1.0, a + 0.01);
  if (std::abs(c - d) < 1e-3) d = std::min(1.0, c + 0.01);
  return {std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
}

EmbeddingMatrix unit_rows(const Mat& m) {
  EmbeddingMatrix e;
  e.rows = m.rowwise().normalized().cast<float>();
  for (int i = 0; i < m.rows(); ++i) e.category_names.push_back("c" + std::to_string(i));
  return e;
}

}  // namespace

TEST(RoiAlign, MatchesBilinearOracle) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> side(1, 9), out(1, 6), cats(1, 4);
  for (int t = 0; t < 300; ++t) {
    const int h = side(rng), w = side(rng), oh = out(rng), ow = out(rng);
    const Mat p = oracle::random_probs(rng, h * w, cats(rng));
    const BoxXYXY b = random_box(rng);
    const Mat got = roi_align(make_map(p, h, w), b, oh, ow);
    const Mat want = oracle::roi_align(p, h, w, b.x1, b.y1, b.x2, b.y2, oh, ow);
    ASSERT_LE((got - want).cwiseAbs().maxCoeff(), 1e-5) << "trial " << t;
  }
}

TEST(RoiAlign, UniformMapGivesUniformOutput) {
  const Mat p = Mat::Constant(16, 4, 0.25);
  const Mat r = roi_align(make_map(p, 4, 4), {0.1, 0.2, 0.7, 0.9}, 3, 3);
  EXPECT_NEAR((r.array() - 0.25).abs().maxCoeff(), 0.0, 1e-15);
}

TEST(RoiAlign, FullBoxOnMatchingGridReproducesMap) {
  std::mt19937_64 rng(3);
  const Mat p = oracle::random_probs(rng, 14 * 14, 3);
  const Mat r = roi_align(make_map(p, 14, 14), {0, 0, 1, 1}, 14, 14);
  EXPECT_LE((r - p).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RoiAlign, DegenerateBoxRejected) {
  const Mat p = Mat::Constant(4, 2, 0.5);
  EXPECT_THROW(roi_align(make_map(p, 2, 2), {0.5, 0.1, 0.5, 0.9}, 2, 2), InvalidArgument);
}

TEST(TopK, MaskedMeanMatchesSortOracle) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> rows(1, 40), cats(1, 5);
  for (int t = 0; t < 300; ++t) {
    const int n = rows(rng);
    const Mat s = oracle::random_probs(rng, n, cats(rng));
    const int k = std::uniform_int_distribution<int>(1, n)(rng);
    const auto got = topk_masked_mean(s, k);
    const auto want = oracle::topk_mean(s, k);
    for (int c = 0; c < s.cols(); ++c) ASSERT_NEAR(got[c], want[static_cast<std::size_t>(c)], 1e-12);
  }
}

TEST(TopK, KEqualsAreaIsPlainMean) {
  std::mt19937_64 rng(9);
  const Mat s = oracle::random_probs(rng, 196, 3);
  const auto got = topk_masked_mean(s, 196);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(got[c], s.col(c).mean(), 1e-12);
}

TEST(TopK, KOneIsMax) {
  std::mt19937_64 rng(10);
  const Mat s = oracle::random_probs(rng, 50, 4);
  const auto got = topk_masked_mean(s, 1);
  for (int c = 0; c < 4; ++c) EXPECT_EQ(got[c], s.col(c).maxCoeff());
}

TEST(TopK, MaskHasExactlyKPerChannel) {
  std::mt19937_64 rng(12);
  const Mat s = oracle::random_probs(rng, 30, 5);
  for (int k : {1, 7, 30}) {
    const TopKMask m = topk_mask(s, k);
    for (int c = 0; c < 5; ++c) {
      int n = 0;
      for (int r = 0; r < 30; ++r) n += m.at(r, c);
      EXPECT_EQ(n, k);
    }
  }
  EXPECT_THROW(topk_masked_mean(s, 0), InvalidArgument);
  EXPECT_THROW(topk_masked_mean(s, 31), InvalidArgument);
}

TEST(TopK, TiesBreakByLowerIndex) {
  Mat s(4, 1);
  s << 0.5, 0.5, 0.5, 0.1;
  const TopKMask m = topk_mask(s, 2);
  EXPECT_TRUE(m.at(0, 0));
  EXPECT_TRUE(m.at(1, 0));
  EXPECT_FALSE(m.at(2, 0));
}

TEST(DenseProbs, RowsSumToOne) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 50; ++t) {
    PatchGrid f{3, 5, 8, Mat(15, 6)};
    for (Eigen::Index i = 0; i < f.values.size(); ++i) f.values.data()[i] = nd(rng);
    Mat e(4, 6);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = nd(rng);
    for (double tau : {0.01, 0.1, 1.0, 1e3}) {
      const DenseScoreMap m = detector_dense_probs(f, unit_rows(e), tau);
      EXPECT_NO_THROW(m.validate());
      EXPECT_LE((m.probs.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-5);
    }
  }
}

TEST(DenseProbs, FeatureAlignedWithEmbeddingWins) {
  Mat e = Mat::Identity(3, 4);
  PatchGrid f{1, 1, 8, Mat(1, 4)};
  f.values << 0.0, 2.0, 0.1, 0.0;
  const DenseScoreMap m = detector_dense_probs(f, unit_rows(e), 0.01);
  Eigen::Index arg;
  m.probs.row(0).maxCoeff(&arg);
  EXPECT_EQ(arg, 1);
}

TEST(DenseProbs, LargeTemperatureIsNearUniform) {
  // The literal 1e3 divisor flattens cosine logits to within 1e-3 of uniform.
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  PatchGrid f{2, 2, 8, Mat(4, 5)};
  for (Eigen::Index i = 0; i < f.values.size(); ++i) f.values.data()[i] = nd(rng);
  Mat e(6, 5);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = nd(rng);
  const DenseScoreMap m = detector_dense_probs(f, unit_rows(e), 1e3);
  EXPECT_LE((m.probs.array() - 1.0 / 6).abs().maxCoeff(), 1e-3);
}

TEST(DenseProbs, DimensionMismatchRejected) {
  PatchGrid f{1, 1, 8, Mat::Ones(1, 4)};
  EXPECT_THROW(detector_dense_probs(f, unit_rows(Mat::Identity(2, 3)), 0.01), InvalidArgument);
}

TEST(Fusion, IdentitiesAtEndpoints) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const Mat a = oracle::random_probs(rng, 12, 5), b = oracle::random_probs(rng, 12, 5);
    const auto det = make_map(a, 3, 4), clip = make_map(b, 3, 4);
    ASSERT_EQ(fuse_score_maps(det, clip, 0.0).probs, a);
    ASSERT_EQ(fuse_score_maps(det, clip, 1.0).probs, b);
  }
}

TEST(Fusion, GeometricMeanAndFlag) {
  Mat a(1, 2), b(1, 2);
  a << 0.64, 0.36;
  b << 0.25, 0.75;
  const auto f = fuse_score_maps(make_map(a, 1, 1), make_map(b, 1, 1), 0.5);
  EXPECT_TRUE(f.fused);
  EXPECT_NEAR(f.probs(0, 0), 0.4, 1e-12);
  EXPECT_NEAR(f.probs(0, 1), std::sqrt(0.27), 1e-12);
  EXPECT_NO_THROW(f.validate());
}

TEST(Fusion, ArgmaxConsistencyWhenComponentsAgree) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> lam(0.0, 1.0);
  int checked = 0;
  while (checked < 1000) {
    const Mat a = oracle::random_probs(rng, 1, 6), b = oracle::random_probs(rng, 1, 6);
    Eigen::Index ia, ib;
    a.row(0).maxCoeff(&ia);
    b.row(0).maxCoeff(&ib);
    if (ia != ib) continue;
    const auto f = fuse_score_maps(make_map(a, 1, 1), make_map(b, 1, 1), lam(rng));
    Eigen::Index jf;
    f.probs.row(0).maxCoeff(&jf);
    ASSERT_EQ(jf, ia);
    ++checked;
  }
}

TEST(Fusion, CategoryOrderMustMatch) {
  const Mat a = Mat::Constant(1, 2, 0.5);
  auto m1 = make_map(a, 1, 1), m2 = make_map(a, 1, 1);
  std::swap(m2.category_names[0], m2.category_names[1]);
  EXPECT_THROW(fuse_score_maps(m1, m2, 0.5), InvalidArgument);
}

TEST(ClassifyProposals, ExampleFromScoreMap) {
  // Category 1 dominates the right half; a proposal over the right half picks it.
  Mat p(4 * 4, 2);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double r = x >= 2 ? 0.9 : 0.2;
      p(y * 4 + x, 0) = 1 - r;
      p(y * 4 + x, 1) = r;
    }
  EdaConfig cfg;
  cfg.roi_h = cfg.roi_w = 4;
  cfg.k = 4;
  const auto s = classify_proposals(make_map(p, 4, 4), {{{0.75, 0.5, 0.5, 1.0}, 0.8}, {{0.25, 0.5, 0.5, 1.0}, 0.5}}, cfg);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].label, 1);
  EXPECT_NEAR(s[0].confidence, 0.9 * 0.8, 1e-12);
  EXPECT_EQ(s[1].label, 0);
}

TEST(FuseLevels, SingleLevelIsLinearMap) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  PatchGrid g{2, 3, 8, Mat(6, 4)};
  for (Eigen::Index i = 0; i < g.values.size(); ++i) g.values.data()[i] = nd(rng);
  LevelProjection pr{Mat::Identity(4, 4) * 2.0, Eigen::RowVectorXd::Ones(4)};
  const PatchGrid f = fuse_backbone_levels({g}, {pr});
  EXPECT_LE(((g.values * 2.0).rowwise() + Eigen::RowVectorXd::Ones(4) - f.values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FuseLevels, ConstantLevelsUpsampleToFinestGrid) {
  PatchGrid fine{4, 4, 8, Mat::Constant(16, 2, 1.0)};
  PatchGrid coarse{2, 2, 16, Mat::Constant(4, 2, 3.0)};
  LevelProjection id{Mat::Identity(2, 2), Eigen::RowVectorXd::Zero(2)};
  const PatchGrid f = fuse_backbone_levels({coarse, fine}, {id, id});
  EXPECT_EQ(f.h, 4);
  EXPECT_EQ(f.stride, 8);
  EXPECT_LE((f.values.array() - 2.0).abs().maxCoeff(), 1e-12);
  EXPECT_THROW(fuse_backbone_levels({}, {}), InvalidArgument);
}
