#pragma once

// Encoder construction by name. "stub" builds the analytic pair; "external"
// loads a frozen pair exported from a real vision-language model:
//
//   image weights (EDACKPT arrays):
//     patch.w  (p*p*3) x t    linear patch embedding, p = stride
//     patch.b  1 x t
//     pool.wq, pool.wk  t x a
//     pool.wv  t x v,  pool.wo  v x d
//   text table (EDAEMB): one row per exact prompt string.
//
// The text side is a lookup because tokenization belongs to the exporting
// model; prompts missing from the table are a config error.

#include <cmath>
#include <filesystem>
#include <memory>
#include <string>
#include <unordered_map>

#include "edadet/encoders.hpp"
#include "edadet/errors.hpp"
#include "edadet/tensor_io.hpp"
#include "edadet/vocab.hpp"

namespace edadet {

class ExternalTextEncoder final : public TextEncoder {
 public:
  explicit ExternalTextEncoder(EmbeddingMatrix table) : table_(std::move(table)) {
    require(table_.dim() > 0, "external text encoder: empty table");
    for (int i = 0; i < table_.size(); ++i)
      if (!index_.emplace(table_.category_names[static_cast<std::size_t>(i)], i).second)
        throw ConfigError("external text encoder: duplicate prompt '" + table_.category_names[static_cast<std::size_t>(i)] + "'");
  }

  int dim() const override { return table_.dim(); }

  Vec encode(std::string_view text) const override {
    auto it = index_.find(std::string(text));
    if (it == index_.end()) throw ConfigError("external text encoder: prompt not in table: '" + std::string(text) + "'");
    return table_.rows.row(it->second).cast<double>().transpose();
  }

 private:
  EmbeddingMatrix table_;
  std::unordered_map<std::string, int> index_;
};

class ExternalImageEncoder final : public FrozenImageEncoder {
 public:
  explicit ExternalImageEncoder(const NamedArrays& w, bool include_cls_in_masked_pass = false) {
    auto get = [&](const std::string& n) -> const Mat& {
      auto it = w.find(n);
      if (it == w.end()) throw ConfigError("external image encoder: missing array '" + n + "'");
      return it->second;
    };
    patch_w_ = get("patch.w");
    patch_b_ = get("patch.b");
    const auto in = patch_w_.rows();
    stride_ = static_cast<int>(std::lround(std::sqrt(static_cast<double>(in) / 3.0)));
    if (stride_ < 1 || static_cast<Eigen::Index>(stride_) * stride_ * 3 != in)
      throw ConfigError("external image encoder: patch.w rows must be p*p*3");
    if (patch_b_.rows() != 1 || patch_b_.cols() != patch_w_.cols())
      throw ConfigError("external image encoder: patch.b must be 1 x token_dim");
    const Mat& wq = get("pool.wq");
    const Mat& wv = get("pool.wv");
    if (wq.rows() != patch_w_.cols() || wv.rows() != patch_w_.cols())
      throw ConfigError("external image encoder: pooling input dim != token dim");
    try {
      pool_ = AttentionPool(wq, get("pool.wk"), wv, get("pool.wo"), include_cls_in_masked_pass);
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("external image encoder: ") + e.what());
    }
  }

  int dim() const override { return pool_.out_dim(); }
  int stride() const override { return stride_; }

  PatchGrid backbone(const Image& image) const override {
    const int p = stride_;
    require(image.height >= p && image.width >= p, "external image encoder: image smaller than one patch");
    PatchGrid g{image.height / p, image.width / p, p, Mat()};
    Mat x(static_cast<Eigen::Index>(g.h) * g.w, p * p * 3);
    for (int py = 0; py < g.h; ++py)
      for (int px = 0; px < g.w; ++px) {
        int c = 0;
        for (int y = 0; y < p; ++y)
          for (int xx = 0; xx < p; ++xx)
            for (int ch = 0; ch < 3; ++ch) x(py * g.w + px, c++) = image.at(py * p + y, px * p + xx, ch);
      }
    g.values = (x * patch_w_).rowwise() + patch_b_.row(0);
    return g;
  }

  Vec pool_global(const PatchGrid& tokens) const override { return pool_.global(tokens); }
  PatchGrid pool_masked(const PatchGrid& tokens) const override { return pool_.masked(tokens); }

 private:
  int stride_ = 1;
  Mat patch_w_, patch_b_;
  AttentionPool pool_;
};

struct EncoderConfig {
  std::string kind = "stub";
  std::uint64_t seed = 0;
  int dim = 64;
  double noise = 0.05;
  bool include_cls_in_masked_pass = false;
  // external only
  std::filesystem::path image_weights;
  std::filesystem::path text_table;
};

inline EncoderPair make_encoder_pair(const EncoderConfig& cfg) {
  if (cfg.kind == "stub") {
    StubEncoderOptions opt;
    opt.seed = cfg.seed;
    opt.dim = cfg.dim;
    opt.noise = cfg.noise;
    opt.include_cls_in_masked_pass = cfg.include_cls_in_masked_pass;
    if (cfg.dim < 4) throw ConfigError("encoder.dim must be >= 4");
    return stub_encoder_pair(opt);
  }
  if (cfg.kind == "external") {
    if (cfg.image_weights.empty() || cfg.text_table.empty())
      throw ConfigError("external encoder needs encoder.image_weights and encoder.text_table");
    auto image = std::make_shared<ExternalImageEncoder>(load_arrays(cfg.image_weights), cfg.include_cls_in_masked_pass);
    auto text = std::make_shared<ExternalTextEncoder>(load_embeddings(cfg.text_table));
    if (image->dim() != text->dim())
      throw ConfigError("external encoder: image dim " + std::to_string(image->dim()) + " != text dim " +
                        std::to_string(text->dim()));
    return {std::move(text), std::move(image)};
  }
  throw ConfigError("unknown encoder.kind '" + cfg.kind + "' (expected stub or external)");
}

}  // namespace edadet
