// edadet command-line tool: embed, train, eval, infer, visualize, cluster.
//
// Every command takes --config FILE plus key overrides, either as
// --set key.path=value or directly as --key.path value.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "edadet/edadet.hpp"

namespace fs = std::filesystem;
using namespace edadet;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string embeddings;  // precomputed target/training embeddings
};

// Leftover "--a.b value" / "--a.b=value" arguments become overrides.
std::vector<std::string> dotted_overrides(const std::vector<std::string>& extras) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() < 3) throw ConfigError("unexpected argument '" + a + "'");
    const std::string body = a.substr(2);
    if (body.find('=') != std::string::npos) {
      out.push_back(body);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for --" + body);
      out.push_back(body + "=" + extras[++i]);
    }
  }
  return out;
}

RunConfig load(const Common& c, const CLI::App& sub) {
  std::vector<std::string> ov = c.sets;
  for (auto& o : dotted_overrides(sub.remaining())) ov.push_back(std::move(o));
  return load_run_config(c.config, ov);
}

fs::path prepare_output(const RunConfig& rc) {
  std::error_code ec;
  fs::create_directories(rc.output_dir, ec);
  if (ec) throw IoError("cannot create output directory " + rc.output_dir.string() + ": " + ec.message());
  std::ofstream os(rc.output_dir / "config.json");
  if (!os) throw IoError("cannot write " + (rc.output_dir / "config.json").string());
  os << rc.source.dump(2) << "\n";
  return rc.output_dir;
}

EmbeddingMatrix embeddings_for(const RunConfig& rc, const CategoryVocabulary& vocab, const TextEncoder& text,
                               SplitFilter filter, const std::string& file) {
  if (file.empty()) return ensemble_prompt_embeddings(vocab, text, filter);
  EmbeddingMatrix m = load_embeddings(file);
  m.validate();
  (void)rc;
  return m.subset(vocab.names(filter));
}

Image load_input_image(const std::string& path, int side, int& orig_w, int& orig_h) {
  Image im = read_image(path);
  orig_w = im.width;
  orig_h = im.height;
  if (im.height != side || im.width != side) im = resize_bilinear(im, side, side);
  return im;
}

nlohmann::json detection_json(std::int64_t image_id, const Detection& d, int w, int h) {
  const double x = d.box.x1 * w, y = d.box.y1 * h;
  return {{"image_id", image_id},
          {"box", {x, y, d.box.x2 * w - x, d.box.y2 * h - y}},
          {"category", d.category},
          {"score", d.score}};
}

std::string slug(const std::string& s) {
  std::string out;
  for (char ch : s) out += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_';
  return out;
}

// ---- commands -------------------------------------------------------------------

int cmd_embed(const RunConfig& rc, const std::string& split, const std::string& out_file) {
  const auto vocab = make_vocabulary(rc);
  const auto enc = make_encoder_pair(rc.encoder);
  const EmbeddingMatrix m = ensemble_prompt_embeddings(vocab, *enc.text, parse_split_filter(split));
  const fs::path dir = prepare_output(rc);
  const fs::path path = out_file.empty() ? dir / ("embeddings_" + split + ".edaemb") : fs::path(out_file);
  save_embeddings(m, path);
  std::cout << m.size() << " x " << m.dim() << " -> " << path.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc, const std::string& emb_file) {
  const auto vocab = make_vocabulary(rc);
  const auto enc = make_encoder_pair(rc.encoder);
  const Dataset train = make_dataset(rc, vocab, false);
  if (train.samples.empty()) throw ConfigError("training set is empty");
  const EmbeddingMatrix base = embeddings_for(rc, vocab, *enc.text, SplitFilter::base, emb_file);
  const fs::path dir = prepare_output(rc);
  std::ofstream log(dir / "train_log.jsonl");
  if (!log) throw IoError("cannot write training log");
  const TrainContext ctx{enc.image.get(), base};
  const auto t0 = std::chrono::steady_clock::now();
  const ModelState st = train_model(train, rc.model, rc.optimizer, rc.schedule, ctx,
                                    [&](std::int64_t step, const LossBundle& b, double lr) {
                                      const double ms = std::chrono::duration<double, std::milli>(
                                                            std::chrono::steady_clock::now() - t0)
                                                            .count();
                                      nlohmann::json j{{"step", step},   {"l_box", b.l_box}, {"l_cls", b.l_cls},
                                                       {"l_g", b.l_g},   {"total", b.total}, {"lr", lr},
                                                       {"wall_ms", ms}};
                                      log << j.dump() << "\n";
                                    });
  save_checkpoint(st, dir / "checkpoint.edackpt");
  std::cout << "trained " << st.step << " steps on " << train.samples.size() << " images -> "
            << (dir / "checkpoint.edackpt").string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& ckpt, const std::string& emb_file) {
  const auto vocab = make_vocabulary(rc);
  const auto enc = make_encoder_pair(rc.encoder);
  const ModelState st = load_checkpoint(ckpt, rc.model, rc.optimizer);
  const Dataset ds = make_dataset(rc, vocab, true);
  const EmbeddingMatrix target = embeddings_for(rc, vocab, *enc.text, SplitFilter::all, emb_file);
  const EvalOutputs ev = evaluate_model(st, rc.model, ds, vocab, target, *enc.image, rc.eval_top_n);
  const fs::path dir = prepare_output(rc);
  std::ofstream os(dir / "eval_report.json");
  if (!os) throw IoError("cannot write eval report");
  os << report_to_json(ev.report).dump(2) << "\n";
  std::cout << report_table(ev.report);
  return 0;
}

int cmd_infer(const RunConfig& rc, const std::string& ckpt, const std::vector<std::string>& images,
              const std::string& emb_file, bool overlay) {
  const auto vocab = make_vocabulary(rc);
  const auto enc = make_encoder_pair(rc.encoder);
  const ModelState st = load_checkpoint(ckpt, rc.model, rc.optimizer);
  const EmbeddingMatrix target = embeddings_for(rc, vocab, *enc.text, SplitFilter::all, emb_file);
  const fs::path dir = prepare_output(rc);
  std::ofstream os(dir / "detections.jsonl");
  if (!os) throw IoError("cannot write detections");
  auto run = [&](std::int64_t id, const Image& im, int w, int h) {
    const auto dets = infer_detections(im, st, target, rc.model, *enc.image);
    for (const auto& d : dets) os << detection_json(id, d, w, h).dump() << "\n";
    if (overlay) write_png_rgb(dir / ("overlay_" + std::to_string(id) + ".png"), draw_detections(im, dets, target.size()));
    return dets.size();
  };
  std::size_t n = 0, count = 0;
  if (images.empty()) {
    const Dataset ds = make_dataset(rc, vocab, true);
    for (const auto& s : ds.samples) {
      const int w = s.orig_width > 0 ? s.orig_width : ds.image_size;
      const int h = s.orig_height > 0 ? s.orig_height : ds.image_size;
      count += run(s.image_id, sample_image(s, ds.image_size), w, h);
      ++n;
    }
  } else {
    for (std::size_t i = 0; i < images.size(); ++i) {
      int w = 0, h = 0;
      const Image im = load_input_image(images[i], rc.data.image_size, w, h);
      count += run(static_cast<std::int64_t>(i), im, w, h);
      ++n;
    }
  }
  std::cout << count << " detections on " << n << " images -> " << (dir / "detections.jsonl").string() << "\n";
  return 0;
}

int cmd_visualize(const RunConfig& rc, const std::string& ckpt, const std::string& image,
                  const std::vector<std::string>& categories, const std::string& emb_file) {
  const auto vocab = make_vocabulary(rc);
  const auto enc = make_encoder_pair(rc.encoder);
  const ModelState st = load_checkpoint(ckpt, rc.model, rc.optimizer);
  const EmbeddingMatrix target = embeddings_for(rc, vocab, *enc.text, SplitFilter::all, emb_file);
  for (const auto& c : categories)
    if (!vocab.find(c)) throw ConfigError("unknown category '" + c + "'");
  int w = 0, h = 0;
  const Image im = load_input_image(image, rc.data.image_size, w, h);
  const ForwardResult fr = forward_model(st, rc.model, im, enc.image.get());
  const DenseScoreMap det = detector_dense_probs(fr.features, target, rc.model.eda.tau);
  const fs::path dir = prepare_output(rc) / "visualize";
  fs::create_directories(dir);
  for (const auto& c : categories) {
    const int ch = label_index(target, c);
    write_png_gray(dir / ("heatmap_" + slug(c) + ".png"), det.w, det.h, heatmap_bytes(det, ch));
  }
  write_png_indexed(dir / "argmax.png", det.w, det.h, argmax_labels(det), label_palette(det.num_categories()));
  const auto dets = detections_from_forward(fr, im, target, rc.model, *enc.image);
  write_png_rgb(dir / "overlay.png", draw_detections(im, dets, target.size()));
  std::cout << categories.size() << " heatmaps, argmax map and overlay -> " << dir.string() << "\n";
  return 0;
}

int cmd_cluster(const RunConfig& rc, const std::string& ckpt, const std::string& image, int k) {
  const auto enc = make_encoder_pair(rc.encoder);
  const ModelState st = load_checkpoint(ckpt, rc.model, rc.optimizer);
  int w = 0, h = 0;
  const Image im = load_input_image(image, rc.data.image_size, w, h);
  const ForwardResult fr = forward_model(st, rc.model, im, enc.image.get());
  if (k < 1 || k > fr.features.cells())
    throw ConfigError("K = " + std::to_string(k) + " must lie in [1, " + std::to_string(fr.features.cells()) + "]");
  if (k > 256) throw ConfigError("K must be <= 256 for an indexed label map");
  KMeansOptions opt;
  opt.k = k;
  opt.seed = rc.seed;
  const KMeansResult r = kmeans(fr.features.values, opt);
  std::vector<std::uint8_t> labels(r.labels.begin(), r.labels.end());
  const fs::path dir = prepare_output(rc);
  write_png_indexed(dir / "clusters.png", fr.features.w, fr.features.h, labels, label_palette(k));
  std::cout << "k-means K=" << k << " inertia " << r.inertia << " -> " << (dir / "clusters.png").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Early dense alignment open-vocabulary detector"};
  app.require_subcommand(1);
  Common common;
  std::string split = "all", out_file, ckpt, image;
  std::vector<std::string> images, categories;
  bool overlay = false;
  int k = 8;

  auto add_common = [&](CLI::App* s) {
    s->add_option("-c,--config", common.config, "JSON config file")->check(CLI::ExistingFile);
    s->add_option("--set", common.sets, "Override, key.path=value (repeatable)");
    s->allow_extras();
  };
  auto* embed = app.add_subcommand("embed", "Write prompt-ensembled text embeddings");
  add_common(embed);
  embed->add_option("--split", split, "base | novel | all")->capture_default_str();
  embed->add_option("-o,--out", out_file, "Output file (default <output_dir>/embeddings_<split>.edaemb)");

  auto* train = app.add_subcommand("train", "Train a detector");
  add_common(train);
  train->add_option("--embeddings", common.embeddings, "Precomputed embedding file");

  auto* eval = app.add_subcommand("eval", "Generalized AP50 and proposal recall on the eval split");
  add_common(eval);
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--embeddings", common.embeddings, "Precomputed embedding file");

  auto* infer = app.add_subcommand("infer", "Detections as JSON lines");
  add_common(infer);
  infer->add_option("--checkpoint", ckpt)->required();
  infer->add_option("--image", images, "Input image(s); default is the eval split");
  infer->add_option("--embeddings", common.embeddings, "Precomputed embedding file");
  infer->add_flag("--overlay", overlay, "Also write annotated images");

  auto* vis = app.add_subcommand("visualize", "Dense score heatmaps, argmax map, detection overlay");
  add_common(vis);
  vis->add_option("--checkpoint", ckpt)->required();
  vis->add_option("--image", image)->required();
  vis->add_option("--categories", categories, "Categories to render")->delimiter(',')->required();
  vis->add_option("--embeddings", common.embeddings, "Precomputed embedding file");

  auto* cluster = app.add_subcommand("cluster", "K-means label map of dense features");
  add_common(cluster);
  cluster->add_option("--checkpoint", ckpt)->required();
  cluster->add_option("--image", image)->required();
  cluster->add_option("-k,--clusters", k, "Number of clusters")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const RunConfig rc = load(common, *sub);
    if (sub == embed) return cmd_embed(rc, split, out_file);
    if (sub == train) return cmd_train(rc, common.embeddings);
    if (sub == eval) return cmd_eval(rc, ckpt, common.embeddings);
    if (sub == infer) return cmd_infer(rc, ckpt, images, common.embeddings, overlay);
    if (sub == vis) return cmd_visualize(rc, ckpt, image, categories, common.embeddings);
    if (sub == cluster) return cmd_cluster(rc, ckpt, image, k);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
