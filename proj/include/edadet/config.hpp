#pragma once

// Run configuration. Defaults live in default_config_json(); a user file and
// dotted overrides ("eda.lam=0.25") are merged onto it strictly: unknown keys
// and type changes are rejected.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "edadet/encoder_registry.hpp"
#include "edadet/errors.hpp"
#include "edadet/objectives.hpp"
#include "edadet/pipeline.hpp"
#include "edadet/vocab.hpp"

namespace edadet {

using json = nlohmann::json;

struct DataConfig {
  std::string source = "synthetic";  // synthetic | coco
  int image_size = 64;
  // coco
  std::filesystem::path train_annotations;
  std::filesystem::path eval_annotations;
  std::filesystem::path image_dir;
  std::filesystem::path eval_image_dir;
  bool strict = false;
  // synthetic
  std::uint64_t synth_seed = 7;
  int synth_train_images = 400;
  int synth_eval_images = 300;
  int min_objects = 1;
  int max_objects = 4;
  double min_side = 0.22;
  double max_side = 0.40;
  std::vector<std::string> base_categories = default_synth_base();
  std::vector<std::string> novel_categories = default_synth_novel();
};

struct VocabConfig {
  // Vocabulary file; empty builds one from the data section (synthetic names,
  // or the COCO category list filtered by split_file).
  std::filesystem::path file;
  std::filesystem::path split_file;
  // Empty selects the 80 ImageNet templates.
  std::vector<std::string> templates;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  EncoderConfig encoder;
  VocabConfig vocab;
  DataConfig data;
  ModelConfig model;
  AdamWConfig optimizer;
  Schedule schedule;
  int eval_top_n = 100;
  json source;  // the merged JSON this was built from
};

namespace detail {

inline json box_weights_json(const BoxWeights& w) { return {{"obj", w.obj}, {"l1", w.l1}, {"giou", w.giou}}; }

inline std::string type_name(const json& j) {
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  return j.type_name();
}

inline bool compatible(const json& base, const json& v) {
  if (base.is_number_float()) return v.is_number();
  if (base.is_number_integer()) return v.is_number_integer();
  return base.type() == v.type();
}

inline void merge_into(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config" + where + ": expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_into(slot, it.value(), key);
    } else {
      if (!compatible(slot, it.value()))
        throw ConfigError("config key '" + key + "' expects " + type_name(slot) + ", got " + type_name(it.value()));
      // Keep floats floats so the echoed config round-trips with the same types.
      if (slot.is_number_float()) slot = it.value().get<double>();
      else slot = it.value();
    }
  }
}

template <class T>
T get(const json& j, const char* key) {
  return j.at(key).get<T>();
}

inline BoxWeights box_weights_from(const json& j) {
  return {get<double>(j, "obj"), get<double>(j, "l1"), get<double>(j, "giou")};
}

inline void check_exists(const std::filesystem::path& p, const std::string& key) {
  if (!p.empty() && !std::filesystem::exists(p)) throw ConfigError(key + ": path does not exist: " + p.string());
}

}  // namespace detail

inline json default_config_json() {
  const RunConfig d;
  const ModelConfig& m = d.model;
  return {
      {"seed", d.seed},
      {"output_dir", d.output_dir.string()},
      {"mode", std::string(to_string(m.mode))},
      {"feature_dim", m.feature_dim},
      {"encoder",
       {{"kind", d.encoder.kind},
        {"seed", d.encoder.seed},
        {"dim", d.encoder.dim},
        {"noise", d.encoder.noise},
        {"include_cls_in_masked_pass", d.encoder.include_cls_in_masked_pass},
        {"image_weights", ""},
        {"text_table", ""}}},
      {"vocab", {{"file", ""}, {"split_file", ""}, {"templates", json::array()}}},
      {"data",
       {{"source", d.data.source},
        {"image_size", d.data.image_size},
        {"train_annotations", ""},
        {"eval_annotations", ""},
        {"image_dir", ""},
        {"eval_image_dir", ""},
        {"strict", d.data.strict},
        {"synthetic",
         {{"seed", d.data.synth_seed},
          {"train_images", d.data.synth_train_images},
          {"eval_images", d.data.synth_eval_images},
          {"min_objects", d.data.min_objects},
          {"max_objects", d.data.max_objects},
          {"min_side", d.data.min_side},
          {"max_side", d.data.max_side},
          {"base", d.data.base_categories},
          {"novel", d.data.novel_categories}}}}},
      {"backbone",
       {{"patch", m.backbone.patch},
        {"hidden", m.backbone.hidden},
        {"vlm_tokens", m.backbone.vlm_tokens},
        {"vlm_dim", m.backbone.vlm_dim}}},
      {"decoder",
       {{"num_queries", m.decoder.num_queries},
        {"num_layers", m.decoder.num_layers},
        {"split_layer", m.decoder.split_layer},
        {"hidden_dim", m.decoder.hidden_dim},
        {"num_heads", m.decoder.num_heads},
        {"ffn_dim", m.decoder.ffn_dim},
        {"encoder_layers", m.decoder.encoder_layers},
        {"two_stage", m.decoder.two_stage},
        {"anchor_size", m.decoder.anchor_size},
        {"aux_loss", m.decoder.aux_loss}}},
      {"eda",
       {{"tau", m.eda.tau},
        {"lam", m.eda.lam},
        {"roi_h", m.eda.roi_h},
        {"roi_w", m.eda.roi_w},
        {"k", m.eda.k},
        {"fuse_levels", m.eda.fuse_levels}}},
      {"matching", detail::box_weights_json(m.match_weights)},
      {"box_loss", detail::box_weights_json(m.box_loss_weights)},
      {"loss", {{"box", m.loss.box}, {"cls", m.loss.cls}, {"g", m.loss.g}}},
      {"extended_supervision",
       {{"enabled", m.extended_supervision},
        {"min_objectness", m.extended_min_objectness},
        {"max_iou", m.extended_max_iou}}},
      {"inference", {{"score_threshold", m.score_threshold}, {"max_detections", m.max_detections}}},
      {"optimizer",
       {{"lr", d.optimizer.lr},
        {"weight_decay", d.optimizer.weight_decay},
        {"beta1", d.optimizer.beta1},
        {"beta2", d.optimizer.beta2},
        {"eps", d.optimizer.eps},
        {"grad_clip", d.optimizer.grad_clip}}},
      {"schedule",
       {{"steps", d.schedule.steps},
        {"batch_size", d.schedule.batch_size},
        {"final_lr_ratio", d.schedule.final_lr_ratio},
        {"augment", d.schedule.augment}}},
      {"eval", {{"top_n", d.eval_top_n}}},
  };
}

// "a.b.c=value"; value parses as JSON when it can, otherwise as a string.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json patch = value;
  std::vector<std::string> keys;
  std::size_t start = 0;
  for (std::size_t dot; (dot = path.find('.', start)) != std::string::npos; start = dot + 1)
    keys.push_back(path.substr(start, dot - start));
  keys.push_back(path.substr(start));
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) {
    if (it->empty()) throw ConfigError("empty component in override key '" + path + "'");
    patch = json{{*it, patch}};
  }
  detail::merge_into(cfg, patch, "");
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    using detail::get;
    c.seed = get<std::uint64_t>(j, "seed");
    c.output_dir = get<std::string>(j, "output_dir");
    ModelConfig& m = c.model;
    m.mode = parse_mode(get<std::string>(j, "mode"));
    m.feature_dim = get<int>(j, "feature_dim");

    const json& e = j.at("encoder");
    c.encoder.kind = get<std::string>(e, "kind");
    c.encoder.seed = get<std::uint64_t>(e, "seed");
    c.encoder.dim = get<int>(e, "dim");
    c.encoder.noise = get<double>(e, "noise");
    c.encoder.include_cls_in_masked_pass = get<bool>(e, "include_cls_in_masked_pass");
    c.encoder.image_weights = get<std::string>(e, "image_weights");
    c.encoder.text_table = get<std::string>(e, "text_table");

    const json& v = j.at("vocab");
    c.vocab.file = get<std::string>(v, "file");
    c.vocab.split_file = get<std::string>(v, "split_file");
    c.vocab.templates = get<std::vector<std::string>>(v, "templates");

    const json& d = j.at("data");
    c.data.source = get<std::string>(d, "source");
    c.data.image_size = get<int>(d, "image_size");
    c.data.train_annotations = get<std::string>(d, "train_annotations");
    c.data.eval_annotations = get<std::string>(d, "eval_annotations");
    c.data.image_dir = get<std::string>(d, "image_dir");
    c.data.eval_image_dir = get<std::string>(d, "eval_image_dir");
    c.data.strict = get<bool>(d, "strict");
    const json& s = d.at("synthetic");
    c.data.synth_seed = get<std::uint64_t>(s, "seed");
    c.data.synth_train_images = get<int>(s, "train_images");
    c.data.synth_eval_images = get<int>(s, "eval_images");
    c.data.min_objects = get<int>(s, "min_objects");
    c.data.max_objects = get<int>(s, "max_objects");
    c.data.min_side = get<double>(s, "min_side");
    c.data.max_side = get<double>(s, "max_side");
    c.data.base_categories = get<std::vector<std::string>>(s, "base");
    c.data.novel_categories = get<std::vector<std::string>>(s, "novel");

    m.backbone.patch = get<int>(j.at("backbone"), "patch");
    m.backbone.hidden = get<int>(j.at("backbone"), "hidden");
    m.backbone.vlm_tokens = get<bool>(j.at("backbone"), "vlm_tokens");
    m.backbone.vlm_dim = get<int>(j.at("backbone"), "vlm_dim");

    const json& dec = j.at("decoder");
    m.decoder.num_queries = get<int>(dec, "num_queries");
    m.decoder.num_layers = get<int>(dec, "num_layers");
    m.decoder.split_layer = get<int>(dec, "split_layer");
    m.decoder.hidden_dim = get<int>(dec, "hidden_dim");
    m.decoder.num_heads = get<int>(dec, "num_heads");
    m.decoder.ffn_dim = get<int>(dec, "ffn_dim");
    m.decoder.encoder_layers = get<int>(dec, "encoder_layers");
    m.decoder.two_stage = get<bool>(dec, "two_stage");
    m.decoder.anchor_size = get<double>(dec, "anchor_size");
    m.decoder.aux_loss = get<bool>(dec, "aux_loss");

    const json& eda = j.at("eda");
    m.eda.tau = get<double>(eda, "tau");
    m.eda.lam = get<double>(eda, "lam");
    m.eda.roi_h = get<int>(eda, "roi_h");
    m.eda.roi_w = get<int>(eda, "roi_w");
    m.eda.k = get<int>(eda, "k");
    m.eda.fuse_levels = get<std::vector<int>>(eda, "fuse_levels");

    m.match_weights = detail::box_weights_from(j.at("matching"));
    m.box_loss_weights = detail::box_weights_from(j.at("box_loss"));
    m.loss = {get<double>(j.at("loss"), "box"), get<double>(j.at("loss"), "cls"), get<double>(j.at("loss"), "g")};
    const json& ext = j.at("extended_supervision");
    m.extended_supervision = get<bool>(ext, "enabled");
    m.extended_min_objectness = get<double>(ext, "min_objectness");
    m.extended_max_iou = get<double>(ext, "max_iou");
    m.score_threshold = get<double>(j.at("inference"), "score_threshold");
    m.max_detections = get<int>(j.at("inference"), "max_detections");

    const json& o = j.at("optimizer");
    c.optimizer.lr = get<double>(o, "lr");
    c.optimizer.weight_decay = get<double>(o, "weight_decay");
    c.optimizer.beta1 = get<double>(o, "beta1");
    c.optimizer.beta2 = get<double>(o, "beta2");
    c.optimizer.eps = get<double>(o, "eps");
    c.optimizer.grad_clip = get<double>(o, "grad_clip");

    const json& sc = j.at("schedule");
    c.schedule.steps = get<int>(sc, "steps");
    c.schedule.batch_size = get<int>(sc, "batch_size");
    c.schedule.final_lr_ratio = get<double>(sc, "final_lr_ratio");
    c.schedule.augment = get<bool>(sc, "augment");
    c.schedule.lr = c.optimizer.lr;
    c.schedule.seed = c.seed;
    c.eval_top_n = get<int>(j.at("eval"), "top_n");
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }

  try {
    c.model.validate();
  } catch (const InvalidArgument& ex) {
    throw ConfigError(ex.what());
  }
  if (c.data.source != "synthetic" && c.data.source != "coco")
    throw ConfigError("data.source must be synthetic or coco");
  if (c.data.image_size < 16 || c.data.image_size % 16 != 0) throw ConfigError("data.image_size must be a positive multiple of 16");
  if (c.data.min_objects < 1 || c.data.max_objects < c.data.min_objects) throw ConfigError("data.synthetic: invalid object count range");
  if (c.schedule.steps < 0 || c.schedule.batch_size < 1) throw ConfigError("schedule: steps >= 0 and batch_size >= 1 required");
  if (c.schedule.final_lr_ratio < 0) throw ConfigError("schedule.final_lr_ratio must be >= 0");
  if (c.eval_top_n < 1) throw ConfigError("eval.top_n must be >= 1");
  if (c.model.feature_dim != c.encoder.dim && c.encoder.kind == "stub")
    throw ConfigError("feature_dim must equal encoder.dim");
  detail::check_exists(c.encoder.image_weights, "encoder.image_weights");
  detail::check_exists(c.encoder.text_table, "encoder.text_table");
  detail::check_exists(c.vocab.file, "vocab.file");
  detail::check_exists(c.vocab.split_file, "vocab.split_file");
  detail::check_exists(c.data.train_annotations, "data.train_annotations");
  detail::check_exists(c.data.eval_annotations, "data.eval_annotations");
  detail::check_exists(c.data.image_dir, "data.image_dir");
  detail::check_exists(c.data.eval_image_dir, "data.eval_image_dir");
  c.source = j;
  return c;
}

// Defaults, then the file (if any), then overrides in order.
inline RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {}) {
  json j = default_config_json();
  if (!file.empty()) {
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot open config file " + file.string());
    json user = json::parse(is, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config file is not valid JSON: " + file.string());
    detail::merge_into(j, user, "");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

// ---- assembling the pieces a command needs ---------------------------------------

inline std::vector<std::string> config_templates(const RunConfig& c) {
  return c.vocab.templates.empty() ? imagenet_templates() : c.vocab.templates;
}

inline CategoryVocabulary make_vocabulary(const RunConfig& c) {
  if (!c.vocab.file.empty()) return build_vocabulary(c.vocab.file);
  if (c.data.source == "synthetic") {
    std::vector<Category> cats;
    for (const auto& n : c.data.base_categories) cats.push_back({n, Split::base});
    for (const auto& n : c.data.novel_categories) cats.push_back({n, Split::novel});
    return CategoryVocabulary(std::move(cats), config_templates(c));
  }
  if (c.vocab.split_file.empty() || c.data.train_annotations.empty())
    throw ConfigError("coco data without vocab.file needs vocab.split_file and data.train_annotations");
  const json ann = read_json_file(c.data.train_annotations);
  std::vector<std::string> names;
  try {
    for (const auto& cat : ann.at("categories")) names.push_back(cat.at("name").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("annotation categories: ") + e.what());
  }
  return vocabulary_from_split(names, read_json_file(c.vocab.split_file), config_templates(c));
}

inline SynthOptions synth_options(const RunConfig& c, bool eval_split) {
  SynthOptions so;
  so.seed = c.data.synth_seed + (eval_split ? 1 : 0);
  so.n_images = eval_split ? c.data.synth_eval_images : c.data.synth_train_images;
  so.image_size = c.data.image_size;
  so.base_cats = c.data.base_categories;
  so.novel_cats = c.data.novel_categories;
  so.eval_split = eval_split;
  so.min_objects = c.data.min_objects;
  so.max_objects = c.data.max_objects;
  so.min_side = c.data.min_side;
  so.max_side = c.data.max_side;
  return so;
}

inline Dataset make_dataset(const RunConfig& c, const CategoryVocabulary& vocab, bool eval_split) {
  if (c.data.source == "synthetic") return synth_shapes(synth_options(c, eval_split));
  const auto& ann = eval_split ? c.data.eval_annotations : c.data.train_annotations;
  if (ann.empty()) throw ConfigError(eval_split ? "data.eval_annotations is required" : "data.train_annotations is required");
  const auto& dir = eval_split && !c.data.eval_image_dir.empty() ? c.data.eval_image_dir : c.data.image_dir;
  return load_coco_annotations(ann, vocab, eval_split ? SplitMode::eval_all : SplitMode::train_base_only, dir,
                               c.data.strict, c.data.image_size);
}

}  // namespace edadet
