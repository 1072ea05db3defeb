#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "edadet/datasets.hpp"
#include "edadet/image_io.hpp"
#include "test_util.hpp"

using namespace edadet;

namespace {

CategoryVocabulary animal_vocab() {
  return CategoryVocabulary({{"cat", Split::base}, {"dog", Split::base}, {"zebra", Split::novel}}, {"a photo of a {}."});
}

void write_coco(const std::filesystem::path& p) {
  const nlohmann::json j = {
      {"images",
       {{{"id", 1}, {"file_name", "a.png"}, {"width", 200}, {"height", 100}},
        {{"id", 2}, {"file_name", "b.png"}, {"width", 100}, {"height", 100}},
        {{"id", 3}, {"file_name", "c.png"}, {"width", 100}, {"height", 100}}}},
      {"categories", {{{"id", 1}, {"name", "cat"}}, {{"id", 2}, {"name", "zebra"}}, {{"id", 3}, {"name", "lamp"}}}},
      {"annotations",
       {{{"id", 10}, {"image_id", 1}, {"category_id", 1}, {"bbox", {20, 10, 100, 50}}},
        {{"id", 11}, {"image_id", 1}, {"category_id", 2}, {"bbox", {0, 0, 10, 10}}},
        {{"id", 12}, {"image_id", 2}, {"category_id", 2}, {"bbox", {5, 5, 20, 20}}},
        {{"id", 13}, {"image_id", 2}, {"category_id", 1}, {"bbox", {5, 5, 20, 20}}, {"iscrowd", 1}},
        {{"id", 14}, {"image_id", 3}, {"category_id", 3}, {"bbox", {1, 1, 5, 5}}}}}};
  std::ofstream(p) << j.dump();
}

SynthOptions small_synth(bool eval) {
  SynthOptions so;
  so.seed = 11;
  so.n_images = 20;
  so.image_size = 64;
  so.base_cats = default_synth_base();
  so.novel_cats = default_synth_novel();
  so.eval_split = eval;
  return so;
}

}  // namespace

TEST(Coco, TrainSplitDropsNovelCrowdAndEmptyImages) {
  const auto dir = scratch_dir();
  write_coco(dir / "ann.json");
  const Dataset ds = load_coco_annotations(dir / "ann.json", animal_vocab(), SplitMode::train_base_only, dir);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.samples[0].image_id, 1);
  ASSERT_EQ(ds.samples[0].annotations.size(), 1u);
  const auto& a = ds.samples[0].annotations[0];
  EXPECT_EQ(a.category, "cat");
  EXPECT_DOUBLE_EQ(a.box.x1, 0.1);
  EXPECT_DOUBLE_EQ(a.box.y1, 0.1);
  EXPECT_DOUBLE_EQ(a.box.x2, 0.6);
  EXPECT_DOUBLE_EQ(a.box.y2, 0.6);
  EXPECT_EQ(ds.categories, (std::vector<std::string>{"cat", "dog"}));
  EXPECT_EQ(ds.samples[0].file, dir / "a.png");
}

TEST(Coco, EvalSplitKeepsNovelAndEveryImage) {
  const auto dir = scratch_dir();
  write_coco(dir / "ann.json");
  const Dataset ds = load_coco_annotations(dir / "ann.json", animal_vocab(), SplitMode::eval_all, dir);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.samples[0].annotations.size(), 2u);
  EXPECT_EQ(ds.samples[1].annotations.size(), 1u);
  EXPECT_TRUE(ds.samples[2].annotations.empty());
  EXPECT_EQ(ds.categories.size(), 3u);
}

TEST(Coco, StrictRejectsUnknownCategory) {
  const auto dir = scratch_dir();
  write_coco(dir / "ann.json");
  EXPECT_THROW(load_coco_annotations(dir / "ann.json", animal_vocab(), SplitMode::eval_all, dir, true), ConfigError);
  std::ofstream(dir / "broken.json") << "{\"images\": [";
  EXPECT_THROW(load_coco_annotations(dir / "broken.json", animal_vocab(), SplitMode::eval_all), ConfigError);
  EXPECT_THROW(load_coco_annotations(dir / "none.json", animal_vocab(), SplitMode::eval_all), IoError);
}

TEST(Coco, ImagesLoadAndResizeOnDemand) {
  const auto dir = scratch_dir();
  write_coco(dir / "ann.json");
  Image im(100, 200, 0.5f);
  write_png_rgb(dir / "a.png", im);
  const Dataset ds = load_coco_annotations(dir / "ann.json", animal_vocab(), SplitMode::train_base_only, dir);
  const Image loaded = sample_image(ds.samples[0], 64);
  EXPECT_EQ(loaded.height, 64);
  EXPECT_EQ(loaded.width, 64);
  EXPECT_NEAR(loaded.at(10, 10, 1), 0.5f, 1.0f / 255);
}

TEST(Synth, DeterministicPerSeed) {
  const Dataset a = synth_shapes(small_synth(false)), b = synth_shapes(small_synth(false));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.samples[i].pixels, b.samples[i].pixels);
    ASSERT_EQ(a.samples[i].annotations.size(), b.samples[i].annotations.size());
  }
  SynthOptions other = small_synth(false);
  other.seed = 12;
  EXPECT_NE(synth_shapes(other).samples[0].pixels, a.samples[0].pixels);
}

TEST(Synth, TrainHasNoNovelAndEvalCoversAll) {
  const Dataset train = synth_shapes(small_synth(false));
  SynthOptions e = small_synth(true);
  e.n_images = 200;
  const Dataset eval = synth_shapes(e);
  const auto novel_list = default_synth_novel();
  const std::set<std::string> novel(novel_list.begin(), novel_list.end());
  std::set<std::string> seen_eval;
  for (const auto& s : train.samples) {
    EXPECT_NO_THROW(s.validate());
    EXPECT_GE(s.annotations.size(), 1u);
    EXPECT_LE(s.annotations.size(), 4u);
    for (const auto& a : s.annotations) EXPECT_EQ(novel.count(a.category), 0u) << a.category;
  }
  for (const auto& s : eval.samples)
    for (const auto& a : s.annotations) seen_eval.insert(a.category);
  EXPECT_EQ(seen_eval.size(), 12u);
  EXPECT_EQ(eval.categories.size(), 12u);
}

TEST(Synth, BoxesMatchRenderedPixels) {
  // The center of every annotated box is painted.
  const Dataset ds = synth_shapes(small_synth(true));
  for (const auto& s : ds.samples) {
    for (const auto& a : s.annotations) {
      const int cx = static_cast<int>((a.box.x1 + a.box.x2) / 2 * 64), cy = static_cast<int>((a.box.y1 + a.box.y2) / 2 * 64);
      float mx = 0;
      for (int ch = 0; ch < 3; ++ch) mx = std::max(mx, s.pixels.at(cy, cx, ch));
      EXPECT_GT(mx, 0.3f);
    }
  }
}

TEST(Synth, RejectsBadOptions) {
  SynthOptions so = small_synth(false);
  so.novel_cats.push_back("red circle");
  EXPECT_THROW(synth_shapes(so), ConfigError);
  so = small_synth(false);
  so.base_cats.push_back("purple hexagon");
  EXPECT_THROW(synth_shapes(so), ConfigError);
  so = small_synth(false);
  so.max_side = 0.7;
  EXPECT_THROW(synth_shapes(so), InvalidArgument);
}

TEST(Augment, HorizontalFlipMapsBoxes) {
  ImageSample s;
  s.pixels = Image(8, 8);
  s.pixels.at(0, 0, 0) = 1.0f;
  s.annotations.push_back({"cat", {0.1, 0.2, 0.4, 0.6}});
  const ImageSample f = flip_sample(s);
  EXPECT_NEAR(f.annotations[0].box.x1, 0.6, 1e-12);
  EXPECT_NEAR(f.annotations[0].box.y1, 0.2, 1e-12);
  EXPECT_NEAR(f.annotations[0].box.x2, 0.9, 1e-12);
  EXPECT_NEAR(f.annotations[0].box.y2, 0.6, 1e-12);
  EXPECT_EQ(f.pixels.at(0, 7, 0), 1.0f);
  EXPECT_EQ(f.pixels.at(0, 0, 0), 0.0f);
}

TEST(Batching, EpochCoversDatasetWithShortLastBatch) {
  SynthOptions so = small_synth(false);
  so.n_images = 10;
  const Dataset ds = synth_shapes(so);
  BatchIterator it(ds, 3, 5, false);
  const auto epoch = it.epoch_indices(0);
  ASSERT_EQ(epoch.size(), 4u);
  EXPECT_EQ(epoch[0].size(), 3u);
  EXPECT_EQ(epoch[1].size(), 3u);
  EXPECT_EQ(epoch[2].size(), 3u);
  EXPECT_EQ(epoch[3].size(), 1u);
  std::set<std::size_t> seen;
  for (const auto& b : epoch) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 10u);
  std::vector<std::size_t> sizes;
  for (int i = 0; i < 4; ++i) sizes.push_back(it.next().size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 3, 1}));
  EXPECT_EQ(it.next().size(), 3u);
  EXPECT_EQ(it.epoch(), 2);
  EXPECT_NE(it.epoch_indices(0), it.epoch_indices(1));
  EXPECT_THROW(BatchIterator(ds, 0, 1, false), InvalidArgument);
}

TEST(Batching, SameSeedSameStream) {
  const Dataset ds = synth_shapes(small_synth(false));
  BatchIterator a(ds, 4, 9, true), b(ds, 4, 9, true);
  for (int i = 0; i < 8; ++i) {
    const Batch x = a.next(), y = b.next();
    ASSERT_EQ(x.size(), y.size());
    for (std::size_t j = 0; j < x.size(); ++j) EXPECT_EQ(x[j].pixels, y[j].pixels);
  }
}
