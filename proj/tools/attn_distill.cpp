// attn-distill: command line front end for the tiling, labeling, training,
// extraction and evaluation stages.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "attn_distill/attnmap.hpp"
#include "attn_distill/errors.hpp"
#include "attn_distill/evaluator.hpp"
#include "attn_distill/image_io.hpp"
#include "attn_distill/labels.hpp"
#include "attn_distill/llm_labeler.hpp"
#include "attn_distill/pipeline.hpp"
#include "attn_distill/review_api.hpp"
#include "attn_distill/synth.hpp"
#include "attn_distill/tiler.hpp"
#include "attn_distill/trainer.hpp"

namespace fs = std::filesystem;
using namespace attn_distill;

namespace {

ReviewServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

std::vector<int> parse_widths(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw InvalidArgument("bad encoder width: " + item);
    }
  }
  return out;
}

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config, "Pipeline config file supplying defaults");
  cmd->add_option("--seed", c.seed, "Random seed");
  auto* o = cmd->add_option("--out", c.out, "Output location");
  if (out_required) o->required();
}

std::optional<PipelineConfig> config_of(const Common& c) {
  if (c.config.empty()) return std::nullopt;
  return load_pipeline_config(c.config);
}

bool given(CLI::App* cmd, const char* flag) { return cmd->count(flag) > 0; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised map segmentation by attention distillation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  // synth
  Common synth_c;
  int synth_sheets = 4;
  int synth_size = 1920;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic benchmark with ground-truth masks");
  add_common(synth, synth_c, true);
  synth->add_option("--sheets", synth_sheets, "Number of sheets; the last one is the eval sheet")->check(CLI::PositiveNumber);
  synth->add_option("--size", synth_size, "Sheet edge length in pixels")->check(CLI::PositiveNumber);

  // tile
  std::string tile_input, tile_sheet, tile_out;
  int tile_size = kPatchPx;
  auto* tile = app.add_subcommand("tile", "Cut a sheet raster into patches and write its manifest");
  tile->add_option("--input", tile_input, "Sheet raster")->required();
  tile->add_option("--sheet", tile_sheet, "Sheet id (default: file stem)");
  tile->add_option("--size", tile_size, "Patch edge length in pixels")->check(CLI::PositiveNumber);
  tile->add_option("--out", tile_out, "Patch directory")->required();

  // tile-mask
  std::string mask_input, mask_class, mask_sheet, mask_out = ".", mask_manifest;
  auto* tile_mask = app.add_subcommand("tile-mask", "Normalize a ground-truth mask raster (nonzero = foreground)");
  tile_mask->add_option("--input", mask_input, "Mask raster")->required();
  tile_mask->add_option("--class", mask_class, "wood or settlement")->required();
  tile_mask->add_option("--sheet", mask_sheet, "Sheet id (default: file stem)");
  tile_mask->add_option("--manifest", mask_manifest, "Sheet manifest whose dimensions the mask must match");
  tile_mask->add_option("--out", mask_out, "Output directory");

  // label
  Common label_c;
  std::vector<std::string> label_manifests;
  std::string label_patches_dir, label_legend, label_provider = "mock", label_cache, label_masks;
  int label_concurrency = 4;
  int label_retries = 3;
  double label_min_fraction = 0.0, label_flip = 0.0;
  std::string label_model, label_base_url, label_key_env;
  auto* label = app.add_subcommand("label", "Ask a vision-language model for patch-level labels");
  add_common(label, label_c, true);
  label->add_option("--manifest", label_manifests, "Sheet manifest(s)")->required();
  label->add_option("--patches", label_patches_dir, "Patch directory (default: the manifest's directory)");
  label->add_option("--legend", label_legend, "Legend image (default: rendered synthetic legend)");
  label->add_option("--provider", label_provider, "mock, openai or replay")
      ->check(CLI::IsMember({"mock", "openai", "replay"}));
  label->add_option("--cache", label_cache, "Response cache directory")->required();
  label->add_option("--concurrency", label_concurrency, "Parallel requests")->check(CLI::PositiveNumber);
  label->add_option("--max-retries", label_retries, "Retries per patch on provider errors");
  label->add_option("--masks", label_masks, "Mask directory for the mock provider");
  label->add_option("--min-fraction", label_min_fraction, "Mock: foreground share counted as present");
  label->add_option("--flip-rate", label_flip, "Mock: fraction of answers flipped");
  label->add_option("--model", label_model, "Remote model name");
  label->add_option("--base-url", label_base_url, "Remote endpoint base URL");
  label->add_option("--api-key-env", label_key_env, "Environment variable holding the API key");

  // serve-review
  std::string review_labels, review_patches, review_attn, review_ui, review_host = "127.0.0.1", review_cors = "*";
  int review_port = 8080;
  auto* review = app.add_subcommand("serve-review", "Serve the label review HTTP API");
  review->add_option("--labels", review_labels, "Label file (corrections go to <file>.journal)")->required();
  review->add_option("--patches", review_patches, "Patch directory")->required();
  review->add_option("--attn", review_attn, "Attention map directory for overlays");
  review->add_option("--ui", review_ui, "Static front-end directory served under /ui");
  review->add_option("--host", review_host, "Bind address");
  review->add_option("--port", review_port, "Port (0 picks a free one)");
  review->add_option("--cors-origin", review_cors, "Allowed CORS origin");

  // train
  Common train_c;
  std::string train_class, train_labels, train_patches, train_widths;
  std::vector<std::string> train_sheets;
  TrainConfig tc;
  auto* trn = app.add_subcommand("train", "Train the attention classifier for one class");
  add_common(trn, train_c, true);
  trn->add_option("--class", train_class, "wood or settlement")->required();
  trn->add_option("--labels", train_labels, "Label file")->required();
  trn->add_option("--patches", train_patches, "Patch directory")->required();
  trn->add_option("--sheets", train_sheets, "Restrict training to these sheets");
  trn->add_option("--epochs", tc.epochs, "Epochs");
  trn->add_option("--lr", tc.learning_rate, "Peak learning rate");
  trn->add_option("--warmup", tc.warmup_epochs, "Linear warm-up epochs");
  trn->add_option("--batch-size", tc.batch_size, "Batch size");
  trn->add_option("--val-fraction", tc.val_fraction, "Validation share");
  trn->add_option("--checkpoint-every", tc.checkpoint_every, "Per-epoch checkpoint period (0: off)");
  trn->add_option("--drop-p", tc.model.drop_p, "Token drop probability");
  trn->add_option("--gamma", tc.model.focal_gamma, "Focal loss gamma");
  trn->add_option("--alpha", tc.model.focal_alpha, "Focal loss alpha");
  trn->add_option("--widths", train_widths, "Encoder widths, comma separated (last is C)");

  // extract
  Common extract_c;
  std::string extract_ckpt, extract_patches, extract_class;
  std::vector<std::string> extract_sheets;
  auto* extract = app.add_subcommand("extract", "Extract attention maps for every patch of the selected sheets");
  add_common(extract, extract_c, true);
  extract->add_option("--checkpoint", extract_ckpt, "Checkpoint file")->required();
  extract->add_option("--patches", extract_patches, "Patch directory")->required();
  extract->add_option("--class", extract_class, "Class the checkpoint was trained for");
  extract->add_option("--sheet", extract_sheets, "Sheets to extract (default: all manifests)");

  // evaluate
  Common eval_c;
  std::string eval_attn, eval_gt, eval_class, eval_thresholds = "0.1:0.9:0.1", eval_rasters;
  auto* evaluate = app.add_subcommand("evaluate", "Score attention maps against ground-truth masks");
  add_common(evaluate, eval_c, true);
  evaluate->add_option("--attn", eval_attn, "Attention map directory")->required();
  evaluate->add_option("--gt", eval_gt, "Directory of {sheet}_{class}.png masks")->required();
  evaluate->add_option("--class", eval_class, "wood or settlement")->required();
  evaluate->add_option("--thresholds", eval_thresholds, "lo:hi:step or comma list");
  evaluate->add_option("--rasters", eval_rasters, "Directory of {sheet}.png rasters for overlays");

  // pipeline
  Common pipe_c;
  bool print_default = false;
  auto* pipe = app.add_subcommand("pipeline", "Run every stage from a config file, skipping up-to-date stages");
  pipe->add_option("--config", pipe_c.config, "Pipeline config file");
  pipe->add_option("--seed", pipe_c.seed, "Override the config seed");
  pipe->add_option("--out", pipe_c.out, "Work directory")->default_val("work");
  pipe->add_flag("--print-default-config", print_default, "Print the config with every default and exit");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      SynthTextures textures;
      if (auto cfg = config_of(synth_c)) {
        textures = cfg->textures;
        if (!given(synth, "--seed")) synth_c.seed = cfg->seed;
        if (!given(synth, "--sheets")) synth_sheets = cfg->synth_sheets;
        if (!given(synth, "--size")) synth_size = cfg->synth_size_px;
      }
      const auto sheets = generate_benchmark(synth_c.seed, synth_sheets, synth_size, synth_c.out, textures);
      write_png(fs::path(synth_c.out) / "legend.png", render_legend(textures));
      for (const auto& s : sheets) std::cout << s.sheet << (s.eval ? " eval" : " train") << "\n";
    } else if (*tile) {
      const SheetId id = tile_sheet.empty() ? fs::path(tile_input).stem().string() : tile_sheet;
      const auto m = ingest_sheet(tile_input, id, tile_out, tile_size);
      for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << id << ": " << m.entries.size() << " patches -> " << manifest_path(tile_out, id).string() << "\n";
    } else if (*tile_mask) {
      const ClassName c = parse_class_name(mask_class);
      const SheetId id = mask_sheet.empty() ? fs::path(mask_input).stem().string() : mask_sheet;
      int h = -1, w = -1;
      if (!mask_manifest.empty()) {
        const auto m = read_manifest(mask_manifest);
        h = m.sheet_height;
        w = m.sheet_width;
      }
      const auto mask = ingest_mask(mask_input, id, c, h, w);
      fs::create_directories(mask_out);
      const auto path = mask_path(mask_out, id, c);
      write_mask(path, mask.mask);
      std::cout << path.string() << ": " << mask.mask.count() << " foreground pixels\n";
    } else if (*label) {
      LabelerSettings s;
      std::uint64_t seed = label_c.seed;
      SynthTextures textures;
      if (auto cfg = config_of(label_c)) {
        s = cfg->labeler;
        textures = cfg->textures;
        if (!given(label, "--seed")) seed = cfg->seed;
      }
      if (given(label, "--provider")) s.provider = label_provider;
      if (given(label, "--concurrency")) s.concurrency = label_concurrency;
      if (given(label, "--max-retries")) s.max_retries = label_retries;
      if (given(label, "--min-fraction")) s.min_fraction = label_min_fraction;
      if (given(label, "--flip-rate")) s.flip_rate = label_flip;
      if (given(label, "--model")) s.http.model = label_model;
      if (given(label, "--base-url")) s.http.base_url = label_base_url;
      if (given(label, "--api-key-env")) s.http.api_key_env = label_key_env;
      if (given(label, "--legend")) s.legend = label_legend;
      if (s.provider == "mock" && label_masks.empty()) throw InvalidArgument("the mock provider needs --masks");

      std::vector<Manifest> manifests;
      for (const auto& m : label_manifests) manifests.push_back(read_manifest(m));
      const fs::path patches = label_patches_dir.empty() ? fs::path(label_manifests.front()).parent_path() : fs::path(label_patches_dir);
      const Rgb8 legend = s.legend.empty() ? render_legend(textures) : read_rgb(s.legend);
      auto provider = make_provider(s, label_masks, seed, manifests.front().tile_px);
      ResponseCache cache(label_cache);
      LabelingOptions opts;
      opts.concurrency = s.concurrency;
      opts.max_retries = s.max_retries;
      opts.initial_backoff = std::chrono::milliseconds(s.backoff_ms);
      const auto result = label_patches(manifests, patches, legend, *provider, cache, opts);
      if (!fs::path(label_c.out).parent_path().empty()) fs::create_directories(fs::path(label_c.out).parent_path());
      write_labels(label_c.out, result.records);
      std::cout << result.records.size() << " records, " << result.provider_calls << " provider calls, "
                << result.cache_hits << " cache hits, " << result.unlabeled_patches << " unlabeled patches\n";
    } else if (*review) {
      ReviewConfig rc;
      rc.labels_file = review_labels;
      rc.patches_dir = review_patches;
      rc.attn_dir = review_attn;
      rc.ui_dir = review_ui;
      rc.cors_origin = review_cors;
      ReviewServer server(rc);
      const int port = server.bind(review_host, review_port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "review API on http://" << review_host << ":" << port << "\n" << std::flush;
      server.listen();
      g_server = nullptr;
      server.service().store().snapshot();
    } else if (*trn) {
      TrainConfig cfg_tc = tc;
      if (auto cfg = config_of(train_c)) {
        cfg_tc = cfg->train;
        if (!given(trn, "--seed")) train_c.seed = cfg->seed;
        if (given(trn, "--epochs")) cfg_tc.epochs = tc.epochs;
        if (given(trn, "--lr")) cfg_tc.learning_rate = tc.learning_rate;
        if (given(trn, "--warmup")) cfg_tc.warmup_epochs = tc.warmup_epochs;
        if (given(trn, "--batch-size")) cfg_tc.batch_size = tc.batch_size;
        if (given(trn, "--val-fraction")) cfg_tc.val_fraction = tc.val_fraction;
        if (given(trn, "--checkpoint-every")) cfg_tc.checkpoint_every = tc.checkpoint_every;
        if (given(trn, "--drop-p")) cfg_tc.model.drop_p = tc.model.drop_p;
        if (given(trn, "--gamma")) cfg_tc.model.focal_gamma = tc.model.focal_gamma;
        if (given(trn, "--alpha")) cfg_tc.model.focal_alpha = tc.model.focal_alpha;
      }
      if (!train_widths.empty()) cfg_tc.model.encoder_widths = parse_widths(train_widths);
      cfg_tc.seed = train_c.seed;
      const ClassName c = parse_class_name(train_class);
      const auto dataset = load_training_set(LabelStore(train_labels).history(), train_patches, c, train_sheets);
      if (!dataset.empty()) cfg_tc.model.input_height = dataset.front().patch.image.height;
      if (!dataset.empty()) cfg_tc.model.input_width = dataset.front().patch.image.width;
      std::cout << dataset.size() << " labeled patches\n";
      const auto result = train(dataset, c, cfg_tc, train_c.out, [](const EpochMetrics& m) {
        std::cout << to_json_line(m) << "\n" << std::flush;
      });
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "best epoch " << result.best_epoch << " -> " << result.best_checkpoint.string() << "\n";
    } else if (*extract) {
      CheckpointMeta meta;
      const auto params = load_checkpoint(extract_ckpt, &meta);
      const ClassName c = parse_class_name(extract_class.empty() ? meta.class_name : extract_class);
      std::vector<Manifest> manifests;
      if (extract_sheets.empty()) manifests = read_manifests(extract_patches);
      for (const auto& s : extract_sheets) manifests.push_back(read_manifest(manifest_path(extract_patches, s)));
      for (const auto& m : manifests) {
        const auto ex = extract_sheet(m, extract_patches, params, c, extract_c.out);
        std::cout << m.sheet << ": " << ex.maps.size() << " maps, mosaic " << ex.mosaic.string() << "\n";
        for (const auto& miss : ex.missing) std::cerr << "missing patch: " << miss << "\n";
      }
    } else if (*evaluate) {
      if (auto cfg = config_of(eval_c); cfg && !given(evaluate, "--thresholds")) eval_thresholds = cfg->thresholds;
      const ClassName c = parse_class_name(eval_class);
      const auto reports =
          evaluate_to_dir(eval_attn, eval_gt, c, parse_thresholds(eval_thresholds), eval_c.out, eval_rasters);
      for (const auto& r : reports)
        if (std::abs(r.threshold - 0.5) < 1e-9)
          std::cout << to_string(r.mode) << " sigma=0.5 iou=" << r.iou << " precision=" << r.precision
                    << " recall=" << r.recall << "\n";
    } else if (*pipe) {
      if (print_default) {
        std::cout << default_pipeline_json().dump(2) << "\n";
        return 0;
      }
      if (pipe_c.config.empty()) throw InvalidArgument("pipeline needs --config");
      auto cfg = load_pipeline_config(pipe_c.config);
      if (given(pipe, "--seed")) {
        cfg.seed = pipe_c.seed;
        cfg.canonical["seed"] = pipe_c.seed;
      }
      const auto result = run_pipeline(cfg, pipe_c.out, std::cout);
      std::cout << "report: " << result.report_csv.string() << "\nmanifest: " << result.manifest.string() << "\n";
    }
  } catch (const SchemaError& e) {
    std::cerr << "config error:\n";
    for (const auto& p : e.problems) std::cerr << "  " << p << "\n";
    return 2;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
