#include <gtest/gtest.h>

#include <fstream>

#include "edadet/datasets.hpp"
#include "edadet/encoder_registry.hpp"
#include "edadet/params.hpp"
#include "edadet/vocab.hpp"
#include "test_util.hpp"

using namespace edadet;

namespace {

CategoryVocabulary synth_vocab(std::vector<std::string> templates = imagenet_templates()) {
  std::vector<Category> cats;
  for (const auto& n : default_synth_base()) cats.push_back({n, Split::base});
  for (const auto& n : default_synth_novel()) cats.push_back({n, Split::novel});
  return CategoryVocabulary(cats, std::move(templates));
}

Image solid_patch_image(int side, float r, float g, float b) {
  Image im(side, side, 0.08f);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      im.at(y, x, 0) = r;
      im.at(y, x, 1) = g;
      im.at(y, x, 2) = b;
    }
  return im;
}

}  // namespace

TEST(Vocabulary, SplitsAndOrder) {
  const auto v = synth_vocab();
  EXPECT_EQ(v.size(), 12u);
  EXPECT_EQ(v.count(Split::base), 9u);
  EXPECT_EQ(v.names(SplitFilter::novel), default_synth_novel());
  EXPECT_TRUE(v.is_novel("blue circle"));
  EXPECT_FALSE(v.is_novel("red circle"));
  EXPECT_FALSE(v.is_novel("purple hexagon"));
  EXPECT_EQ(imagenet_templates().size(), 80u);
}

TEST(Vocabulary, RejectsMalformedInput) {
  EXPECT_THROW(CategoryVocabulary({{"cat", Split::base}, {"cat", Split::novel}}, {"a {}."}), ConfigError);
  EXPECT_THROW(CategoryVocabulary({{"cat", Split::base}}, {"no placeholder"}), ConfigError);
  EXPECT_THROW(CategoryVocabulary({{"cat", Split::base}}, {"{} and {}"}), ConfigError);
  EXPECT_THROW(CategoryVocabulary({{"cat", Split::base}}, {}), ConfigError);
  EXPECT_THROW(CategoryVocabulary({{"cat", Split::novel}}, {"a {}."}), ConfigError);
  EXPECT_THROW(parse_split("val"), ConfigError);
}

TEST(Vocabulary, JsonRoundTripAndSplitFile) {
  const auto v = synth_vocab({"a photo of a {}."});
  const auto back = vocabulary_from_json(vocabulary_to_json(v));
  EXPECT_EQ(back.names(), v.names());
  EXPECT_EQ(back.names(SplitFilter::novel), v.names(SplitFilter::novel));

  const nlohmann::json split = {{"base", {"a", "c"}}, {"novel", {"b"}}};
  const auto s = vocabulary_from_split({"a", "b", "c", "d"}, split, {"{}"});
  EXPECT_EQ(s.names(), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_TRUE(s.is_novel("b"));
  EXPECT_THROW(vocabulary_from_split({"a"}, {{"base", {"a"}}, {"novel", {"a"}}}, {"{}"}), ConfigError);
  EXPECT_THROW(vocabulary_from_json({{"categories", 3}}), ConfigError);
}

TEST(Vocabulary, TemplateFilling) {
  EXPECT_EQ(fill_template("a photo of a {}.", "red circle"), "a photo of a red circle.");
  EXPECT_EQ(count_placeholders("{} {}"), 2u);
}

TEST(PromptEnsemble, UnitRowsDeterministicAndOrdered) {
  const auto v = synth_vocab();
  const auto enc = stub_encoder_pair(3, 32);
  const auto a = ensemble_prompt_embeddings(v, *enc.text, SplitFilter::all);
  const auto b = ensemble_prompt_embeddings(v, *stub_encoder_pair(3, 32).text, SplitFilter::all);
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.category_names, v.names());
  EXPECT_EQ(a.rows, b.rows);
  const auto novel = ensemble_prompt_embeddings(v, *enc.text, SplitFilter::novel);
  EXPECT_EQ(novel.rows, a.subset(v.names(SplitFilter::novel)).rows);
}

TEST(PromptEnsemble, SingleTemplateEqualsNormalizedEncoding) {
  const auto v = synth_vocab({"a photo of a {}."});
  const auto enc = stub_encoder_pair(5, 16);
  const auto m = ensemble_prompt_embeddings(v, *enc.text, SplitFilter::base);
  const Vec e = enc.text->encode("a photo of a red circle.");
  EXPECT_LE((m.rows.row(0).cast<double>().transpose() - e / e.norm()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(PromptEnsemble, FileRoundTripAndMalformedHeader) {
  const auto dir = scratch_dir();
  const auto m = ensemble_prompt_embeddings(synth_vocab(), *stub_encoder_pair(1, 8).text, SplitFilter::base);
  save_embeddings(m, dir / "e.edaemb");
  const auto back = load_embeddings(dir / "e.edaemb");
  EXPECT_EQ(back.category_names, m.category_names);
  EXPECT_EQ(back.rows, m.rows);
  {
    std::ifstream is(dir / "e.edaemb");
    std::string header;
    std::getline(is, header);
    EXPECT_EQ(header, "EDAEMB v1 9 8");
  }
  std::ofstream(dir / "bad.edaemb") << "EDAEMB v2 1 1\nx\n";
  EXPECT_THROW(load_embeddings(dir / "bad.edaemb"), IoError);
  std::ofstream(dir / "short.edaemb") << "EDAEMB v1 1 4\nx\nab";
  EXPECT_THROW(load_embeddings(dir / "short.edaemb"), IoError);
  EXPECT_THROW(load_embeddings(dir / "missing.edaemb"), IoError);
}

TEST(StubEncoders, MaskedPassIsLocal) {
  // Changing one patch changes only that patch's masked embedding.
  const auto enc = stub_encoder_pair(2, 32);
  const Image a = solid_patch_image(32, 0.9f, 0.1f, 0.1f);
  const Image b = solid_patch_image(32, 0.1f, 0.1f, 0.9f);
  const PatchGrid ea = masked_dense_embeddings(*enc.image, a), eb = masked_dense_embeddings(*enc.image, b);
  ASSERT_EQ(ea.h, 4);
  ASSERT_EQ(ea.w, 4);
  EXPECT_GT((ea.values.row(0) - eb.values.row(0)).norm(), 1e-3);
  EXPECT_EQ(ea.values.bottomRows(15), eb.values.bottomRows(15));
  // The global class token sees the whole image.
  EXPECT_GT((enc.image->pooled_class_token(a) - enc.image->pooled_class_token(b)).norm(), 1e-6);
}

TEST(StubEncoders, ClsInMaskedPassCouplesPatches) {
  StubEncoderOptions opt;
  opt.seed = 2;
  opt.dim = 32;
  opt.include_cls_in_masked_pass = true;
  const auto enc = stub_encoder_pair(opt);
  const PatchGrid ea = masked_dense_embeddings(*enc.image, solid_patch_image(32, 0.9f, 0.1f, 0.1f));
  const PatchGrid eb = masked_dense_embeddings(*enc.image, solid_patch_image(32, 0.1f, 0.1f, 0.9f));
  EXPECT_GT((ea.values.row(15) - eb.values.row(15)).norm(), 1e-9);
}

TEST(StubEncoders, DenseEmbeddingAtObjectCenterNamesTheObject) {
  SynthOptions so;
  so.seed = 4;
  so.n_images = 24;
  so.image_size = 64;
  so.base_cats = default_synth_base();
  so.novel_cats = default_synth_novel();
  so.eval_split = true;
  so.min_objects = so.max_objects = 1;
  so.min_side = so.max_side = 0.45;
  const Dataset ds = synth_shapes(so);
  const auto enc = stub_encoder_pair(0, 64);
  const auto emb = ensemble_prompt_embeddings(synth_vocab(), *enc.text, SplitFilter::all);
  int correct = 0;
  for (const auto& s : ds.samples) {
    const PatchGrid g = masked_dense_embeddings(*enc.image, s.pixels);
    const auto& b = s.annotations.at(0).box;
    const int cy = static_cast<int>((b.y1 + b.y2) / 2 * g.h), cx = static_cast<int>((b.x1 + b.x2) / 2 * g.w);
    Eigen::Index best = 0;
    (emb.as_double() * g.values.row(cy * g.w + cx).transpose()).maxCoeff(&best);
    correct += emb.category_names[static_cast<std::size_t>(best)] == s.annotations.at(0).category;
  }
  EXPECT_GE(correct, 22) << "of " << ds.size();
}

TEST(ExternalEncoders, ImageMatchesManualComputation) {
  const auto dir = scratch_dir();
  const int p = 4, t = 6, d = 5;
  NamedArrays w;
  w["patch.w"] = normal_init("pw", 1, p * p * 3, t, 0.1);
  w["patch.b"] = normal_init("pb", 1, 1, t, 0.1);
  w["pool.wq"] = normal_init("q", 1, t, 3, 0.3);
  w["pool.wk"] = normal_init("k", 1, t, 3, 0.3);
  w["pool.wv"] = normal_init("v", 1, t, t, 0.3);
  w["pool.wo"] = normal_init("o", 1, t, d, 0.3);
  save_arrays(w, dir / "img.edackpt");

  EmbeddingMatrix table;
  table.rows = Eigen::Matrix<float, -1, -1, Eigen::RowMajor>::Identity(2, d);
  table.category_names = {"a photo of a cat.", "a photo of a dog."};
  save_embeddings(table, dir / "text.edaemb");

  EncoderConfig cfg;
  cfg.kind = "external";
  cfg.image_weights = dir / "img.edackpt";
  cfg.text_table = dir / "text.edaemb";
  const auto pair = make_encoder_pair(cfg);
  EXPECT_EQ(pair.image->dim(), d);
  EXPECT_EQ(pair.image->stride(), p);

  Image im(8, 12);
  for (std::size_t i = 0; i < im.pixels.size(); ++i) im.pixels[i] = static_cast<float>((i * 37 % 101) / 100.0);
  const PatchGrid masked = pair.image->masked_patch_embeddings(im);
  ASSERT_EQ(masked.h, 2);
  ASSERT_EQ(masked.w, 3);
  // Patch (1, 2): flatten, embed, value and output projections.
  Eigen::RowVectorXd x(p * p * 3);
  int c = 0;
  for (int y = 0; y < p; ++y)
    for (int xx = 0; xx < p; ++xx)
      for (int ch = 0; ch < 3; ++ch) x(c++) = im.at(p + y, 2 * p + xx, ch);
  const Eigen::RowVectorXd tok = x * w["patch.w"] + w["patch.b"];
  const Eigen::RowVectorXd want = tok * w["pool.wv"] * w["pool.wo"];
  EXPECT_LE((masked.values.row(5) - want).cwiseAbs().maxCoeff(), 1e-9);

  EXPECT_EQ(pair.text->encode("a photo of a dog.")(1), 1.0);
  EXPECT_THROW(pair.text->encode("a photo of a bird."), ConfigError);
}

TEST(ExternalEncoders, BadWeightsAreConfigErrors) {
  const auto dir = scratch_dir();
  NamedArrays w;
  w["patch.w"] = ag::Mat::Zero(10, 4);
  save_arrays(w, dir / "bad.edackpt");
  EXPECT_THROW(ExternalImageEncoder(load_arrays(dir / "bad.edackpt")), ConfigError);
  w["patch.w"] = ag::Mat::Zero(12, 4);
  w["patch.b"] = ag::Mat::Zero(1, 4);
  EXPECT_THROW(ExternalImageEncoder{w}, ConfigError);  // pooling arrays missing
  EncoderConfig cfg;
  cfg.kind = "clip";
  EXPECT_THROW(make_encoder_pair(cfg), ConfigError);
  cfg.kind = "external";
  EXPECT_THROW(make_encoder_pair(cfg), ConfigError);
}
