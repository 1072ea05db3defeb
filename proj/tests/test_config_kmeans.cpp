#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "edadet/config.hpp"
#include "edadet/kmeans.hpp"
#include "edadet/visualize.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace edadet;

TEST(Config, DefaultsLoadAndValidate) {
  const RunConfig c = load_run_config({});
  EXPECT_EQ(c.model.mode, ClassifierMode::eda);
  EXPECT_EQ(c.model.feature_dim, c.encoder.dim);
  EXPECT_EQ(c.data.source, "synthetic");
  EXPECT_EQ(config_templates(c).size(), 80u);
  const CategoryVocabulary v = make_vocabulary(c);
  EXPECT_EQ(v.names(SplitFilter::base).size(), 9u);
  EXPECT_EQ(v.names(SplitFilter::novel).size(), 3u);
}

TEST(Config, FileThenOverridesApplyInOrder) {
  const auto dir = scratch_dir();
  std::ofstream(dir / "c.json") << R"({"eda": {"lam": 0.1, "k": 50}, "schedule": {"steps": 12}})";
  const RunConfig c = load_run_config(dir / "c.json", {"eda.lam=0.25", "mode=object_align", "output_dir=out/x"});
  EXPECT_DOUBLE_EQ(c.model.eda.lam, 0.25);
  EXPECT_EQ(c.model.eda.k, 50);
  EXPECT_EQ(c.schedule.steps, 12);
  EXPECT_EQ(c.model.mode, ClassifierMode::object_align);
  EXPECT_EQ(c.output_dir, "out/x");
  // Integers are accepted where floats are expected and stay floats.
  const RunConfig d = load_run_config({}, {"eda.lam=1"});
  EXPECT_DOUBLE_EQ(d.model.eda.lam, 1.0);
  EXPECT_TRUE(d.source.at("eda").at("lam").is_number_float());
}

TEST(Config, RejectsUnknownKeysTypesAndBadValues) {
  EXPECT_THROW(load_run_config({}, {"eda.lamda=0.2"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"eda.k=1.5"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"eda=3"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"noequals"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"eda..k=3"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"eda.lam=1.5"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"mode=late"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"feature_dim=32"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"data.image_size=72"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"vocab.file=/nonexistent/vocab.json"}), ConfigError);
  const auto dir = scratch_dir();
  std::ofstream(dir / "bad.json") << "{\"eda\": ";
  EXPECT_THROW(load_run_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_run_config(dir / "missing.json"), ConfigError);
}

TEST(Config, SyntheticEvalSplitUsesItsOwnSeed) {
  const RunConfig c = load_run_config({}, {"data.synthetic.train_images=3", "data.synthetic.eval_images=3"});
  const auto v = make_vocabulary(c);
  const Dataset tr = make_dataset(c, v, false), ev = make_dataset(c, v, true);
  EXPECT_EQ(tr.size(), 3u);
  EXPECT_NE(tr.samples[0].pixels, ev.samples[0].pixels);
  EXPECT_EQ(synth_options(c, true).seed, c.data.synth_seed + 1);
}

namespace {

ag::Mat two_blobs(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 0.1);
  ag::Mat x(2 * n, 3);
  for (int i = 0; i < 2 * n; ++i)
    for (int j = 0; j < 3; ++j) x(i, j) = (i < n ? -2.0 : 2.0) + nd(rng);
  return x;
}

}  // namespace

TEST(KMeans, SeparatesWellSeparatedBlobs) {
  const ag::Mat x = two_blobs(40, 1);
  const KMeansResult r = kmeans(x, {2, 100, 5, 3});
  ASSERT_EQ(r.labels.size(), 80u);
  for (int i = 1; i < 40; ++i) EXPECT_EQ(r.labels[static_cast<std::size_t>(i)], r.labels[0]);
  for (int i = 41; i < 80; ++i) EXPECT_EQ(r.labels[static_cast<std::size_t>(i)], r.labels[40]);
  EXPECT_NE(r.labels[0], r.labels[40]);
  // Inertia is the sum of squared distances to the assigned centers.
  double inertia = 0;
  for (int i = 0; i < 80; ++i) inertia += (x.row(i) - r.centers.row(r.labels[static_cast<std::size_t>(i)])).squaredNorm();
  EXPECT_NEAR(r.inertia, inertia, 1e-9);
}

TEST(KMeans, DeterministicAndValidated) {
  const ag::Mat x = two_blobs(10, 2);
  const KMeansResult a = kmeans(x, {3, 50, 4, 9}), b = kmeans(x, {3, 50, 4, 9});
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.inertia, b.inertia);
  EXPECT_THROW(kmeans(x, {21, 50, 1, 0}), InvalidArgument);
  EXPECT_THROW(kmeans(x, {0, 50, 1, 0}), InvalidArgument);
  ag::Mat bad = x;
  bad(3, 1) = std::nan("");
  EXPECT_THROW(kmeans(bad, {2, 50, 1, 0}), InvalidArgument);
  // k == rows puts every point in its own cluster.
  EXPECT_NEAR(kmeans(x, {20, 50, 1, 0}).inertia, 0.0, 1e-12);
}

TEST(Visualize, HeatmapAndArgmaxBytes) {
  DenseScoreMap m;
  m.h = 1;
  m.w = 3;
  m.category_names = {"a", "b"};
  m.probs.resize(3, 2);
  m.probs << 1.0, 0.0, 0.25, 0.75, 0.5, 0.5;
  EXPECT_EQ(heatmap_bytes(m, 1), (std::vector<std::uint8_t>{0, 191, 128}));
  EXPECT_EQ(argmax_labels(m), (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_THROW(heatmap_bytes(m, 2), InvalidArgument);
}

TEST(ShippedFiles, ConfigsLoad) {
  for (const char* name : {"quick.json", "toy_eda.json", "toy_object_align.json"})
    EXPECT_NO_THROW(load_run_config(fs::path(EDADET_SOURCE_DIR) / "configs" / name)) << name;
  EXPECT_EQ(load_run_config(fs::path(EDADET_SOURCE_DIR) / "configs" / "toy_eda.json").model.eda.k, 196);
}

TEST(ShippedFiles, CocoSplitGives48BaseAnd17Novel) {
  const fs::path data = fs::path(EDADET_SOURCE_DIR) / "data";
  const auto names = read_json_file(data / "coco_80_categories.json").get<std::vector<std::string>>();
  ASSERT_EQ(names.size(), 80u);
  const CategoryVocabulary v = vocabulary_from_split(names, read_json_file(data / "coco_48_17_split.json"));
  EXPECT_EQ(v.names(SplitFilter::base).size(), 48u);
  EXPECT_EQ(v.names(SplitFilter::novel).size(), 17u);
  EXPECT_EQ(80u - v.categories().size(), 15u);
  EXPECT_TRUE(v.is_novel("cat"));
  EXPECT_FALSE(v.find("traffic light"));
  const CategoryVocabulary ex = build_vocabulary(data / "vocab_example.json");
  EXPECT_EQ(ex.names(SplitFilter::base).size(), 2u);
}
