#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <mcnet/mcnet.hpp>

namespace {

std::vector<float> normalized_pixels(const mcnet::PgmImage& img) {
  std::vector<float> v(img.data.size());
  const float scale = 1.0f / static_cast<float>(img.maxval);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(img.data[i]) * scale;
  return v;
}

int run(int argc, char** argv) {
  CLI::App app{"Semi-supervised segmentation workbench: shared-encoder multi-decoder "
               "network with mutual-consistency training on synthetic 2D data"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, data_dir, split_str = "test", image_path, out_path;
  std::string axis, values_csv;
  int patch = 64, stride = 32;
  bool no_detach = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset from a config file");
  gen->add_option("--config", config_path, "key = value config file")->required();

  auto* tr = app.add_subcommand("train", "Train a model and write checkpoint + run log");
  tr->add_option("--config", config_path, "key = value config file")->required();
  tr->add_flag("--no-detach", no_detach, "let gradients flow through sharpened pseudo labels");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  ev->add_option("--checkpoint", checkpoint_path)->required();
  ev->add_option("--data", data_dir)->required();
  ev->add_option("--split", split_str, "labeled|unlabeled|val|test");
  ev->add_option("--out", out_path, "per-sample metrics CSV")->required();

  auto* in = app.add_subcommand("infer", "Segment one image with the single-decoder head");
  in->add_option("--checkpoint", checkpoint_path)->required();
  in->add_option("--image", image_path, "input PGM")->required();
  in->add_option("--out", out_path, "predicted label map PGM")->required();
  in->add_option("--patch", patch, "sliding-window patch size");
  in->add_option("--stride", stride, "sliding-window stride");

  auto* un = app.add_subcommand("uncertainty",
                                "Write a per-pixel disagreement heatmap (all decoders)");
  un->add_option("--checkpoint", checkpoint_path)->required();
  un->add_option("--image", image_path, "input PGM")->required();
  un->add_option("--out", out_path, "heatmap PGM (8-bit, min-max scaled; range sidecar)")
      ->required();

  auto* ab = app.add_subcommand("ablate", "Train and evaluate along one config axis");
  ab->add_option("--config", config_path, "base key = value config file")->required();
  ab->add_option("--axis", axis, "variant|n_decoders|T|lambda|discrepancy")->required();
  ab->add_option("--values", values_csv, "comma-separated axis values")->required();
  ab->add_option("--out", out_path, "summary CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? mcnet::kExitOk : mcnet::kExitConfig;
  }

  if (gen->parsed()) {
    const auto cfg = mcnet::parse_gen_config(mcnet::parse_kv_file(config_path), config_path);
    const auto manifest = mcnet::generate_dataset(cfg);
    int labeled = 0;
    for (const auto& [id, split] : manifest.entries)
      if (split == mcnet::Split::labeled) ++labeled;
    std::printf("wrote %zu samples (%d labeled) to %s\n", manifest.entries.size(), labeled,
                manifest.root.c_str());
  } else if (tr->parsed()) {
    auto cfg = mcnet::parse_train_config(mcnet::parse_kv_file(config_path), config_path);
    cfg.no_detach = no_detach;
    const auto res = mcnet::train<float>(cfg);
    std::printf("checkpoint: %s\nrun log:    %s\neval log:   %s\n", cfg.checkpoint.c_str(),
                res.runlog_path.c_str(), res.evallog_path.c_str());
    std::printf("final total loss %.6g, final val dice %.4f, %.1f s\n",
                static_cast<double>(res.rows.back().total), res.evals.back().val_dice,
                res.wall_seconds);
  } else if (ev->parsed()) {
    auto model = mcnet::load_checkpoint<float>(checkpoint_path);
    const auto ds = mcnet::load_dataset(data_dir);
    const auto summary = mcnet::evaluate(model, ds, mcnet::parse_split(split_str));
    mcnet::write_eval_csv(out_path, summary);
    const auto& m = summary.mean;
    std::printf("%s split: n=%zu mean dice %.4f jaccard %.4f", split_str.c_str(),
                summary.rows.size(), m.dice, m.jaccard);
    if (m.hd95) std::printf(" hd95 %.3f", *m.hd95);
    if (m.asd) std::printf(" asd %.3f", *m.asd);
    std::printf("\nwrote %s\n", out_path.c_str());
  } else if (in->parsed()) {
    auto model = mcnet::load_checkpoint<float>(checkpoint_path);
    auto head = mcnet::select_inference_head(model);
    if (patch % model.size_multiple() != 0)
      throw mcnet::ConfigError("patch must be a multiple of " +
                               std::to_string(model.size_multiple()));
    const auto img = mcnet::read_pgm(image_path);
    const auto pixels = normalized_pixels(img);
    const auto probs =
        mcnet::infer_sliding(head, pixels, img.height, img.width, patch, stride);
    const auto ids = mcnet::binarize_probs(probs.values, probs.c,
                                           static_cast<std::size_t>(probs.h) * probs.w);
    mcnet::PgmImage out;
    out.width = probs.w;
    out.height = probs.h;
    out.maxval = 255;
    out.data.assign(ids.begin(), ids.end());
    mcnet::write_pgm(out_path, out);
    std::printf("wrote %s\n", out_path.c_str());
  } else if (un->parsed()) {
    auto model = mcnet::load_checkpoint<float>(checkpoint_path);
    const auto img = mcnet::read_pgm(image_path);
    const auto pixels = normalized_pixels(img);
    mcnet::Tensor<float> x({1, 1, img.height, img.width});
    for (std::size_t i = 0; i < pixels.size(); ++i) x.values()[i] = pixels[i];
    mcnet::Graph<float> g;
    mcnet::NoGradGuard<float> guard(g);
    const auto outs = model.forward_all(g, x, false);
    const auto map =
        mcnet::uncertainty_map(outs, mcnet::UncertaintyStatistic::variance, 0);
    mcnet::write_heatmap(out_path, map.w, map.h, map.values);
    std::printf("wrote %s (mean uncertainty %.6g)\n", out_path.c_str(),
                mcnet::summarize_uncertainty(map));
  } else if (ab->parsed()) {
    const auto base = mcnet::parse_train_config(mcnet::parse_kv_file(config_path), config_path);
    const auto values = mcnet::detail::split_list(values_csv);
    const auto rows = mcnet::run_ablation<float>(base, axis, values, out_path);
    for (const auto& r : rows)
      std::printf("%s=%s params=%zu dice=%.4f\n", r.axis.c_str(), r.value.c_str(), r.params,
                  r.dice);
    std::printf("wrote %s\n", out_path.c_str());
  }
  return mcnet::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const mcnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return mcnet::kExitConfig;
  } catch (const mcnet::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return mcnet::kExitData;
  } catch (const mcnet::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return mcnet::kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
