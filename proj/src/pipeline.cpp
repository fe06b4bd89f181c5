#include "attn_distill/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <openssl/evp.h>
#include <openssl/opensslv.h>
#include <opencv2/core/version.hpp>

#include "attn_distill/attnmap.hpp"
#include "attn_distill/image_io.hpp"
#include "attn_distill/labels.hpp"
#include "attn_distill/review_api.hpp"
#include "attn_distill/tiler.hpp"

namespace attn_distill {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

ordered_json color_json(const std::array<float, 3>& c) { return ordered_json::array({c[0], c[1], c[2]}); }

std::array<float, 3> color_from(const json& j) {
  return {j.at(0).get<float>(), j.at(1).get<float>(), j.at(2).get<float>()};
}

}  // namespace

SchemaError::SchemaError(std::vector<std::string> p)
    : ValidationError("invalid config: " + join(p, "; ")), problems(std::move(p)) {}

StageError::StageError(std::string s, fs::path l, const std::string& cause)
    : std::runtime_error("stage '" + s + "' failed: " + cause + " (log: " + l.string() + ")"),
      stage(std::move(s)),
      log(std::move(l)) {}

ordered_json textures_to_json(const SynthTextures& t) {
  return ordered_json{{"paper", color_json(t.paper)},
                      {"line_count", t.line_count},
                      {"line_intensity", t.line_intensity},
                      {"pixel_noise", t.pixel_noise},
                      {"wood_circle_radius", t.wood_circle_radius},
                      {"wood_circle_density", t.wood_circle_density},
                      {"wood_ink", color_json(t.wood_ink)},
                      {"settlement_dot_spacing", t.settlement_dot_spacing},
                      {"settlement_ink", color_json(t.settlement_ink)}};
}

SynthTextures textures_from_json(const json& j) {
  SynthTextures t;
  if (j.contains("paper")) t.paper = color_from(j["paper"]);
  if (j.contains("line_count")) t.line_count = j["line_count"].get<int>();
  if (j.contains("line_intensity")) t.line_intensity = j["line_intensity"].get<float>();
  if (j.contains("pixel_noise")) t.pixel_noise = j["pixel_noise"].get<float>();
  if (j.contains("wood_circle_radius")) t.wood_circle_radius = j["wood_circle_radius"].get<double>();
  if (j.contains("wood_circle_density")) t.wood_circle_density = j["wood_circle_density"].get<double>();
  if (j.contains("wood_ink")) t.wood_ink = color_from(j["wood_ink"]);
  if (j.contains("settlement_dot_spacing")) t.settlement_dot_spacing = j["settlement_dot_spacing"].get<int>();
  if (j.contains("settlement_ink")) t.settlement_ink = color_from(j["settlement_ink"]);
  return t;
}

ordered_json default_pipeline_json() {
  const TrainConfig train;
  const ModelConfig& model = train.model;
  const HttpProviderConfig http;
  return ordered_json{
      {"seed", 0},
      {"classes", ordered_json::array({"wood"})},
      {"tiling", {{"tile_px", kPatchPx}, {"token_px", kTokenPx}}},
      {"synth", {{"enabled", true}, {"sheets", 4}, {"size_px", 1920}, {"textures", textures_to_json({})}}},
      {"sheets", ordered_json::array()},
      {"labeler",
       {{"provider", "mock"},
        {"min_fraction", 0.0},
        {"flip_rate", 0.0},
        {"concurrency", 4},
        {"max_retries", 3},
        {"backoff_ms", 500},
        {"legend", ""},
        {"http",
         {{"base_url", http.base_url},
          {"path", http.path},
          {"model", http.model},
          {"api_key_env", http.api_key_env},
          {"timeout_seconds", http.timeout_seconds}}}}},
      {"model",
       {{"encoder_widths", model.encoder_widths},
        {"drop_p", model.drop_p},
        {"focal_gamma", model.focal_gamma},
        {"focal_alpha", model.focal_alpha}}},
      {"train",
       {{"epochs", train.epochs},
        {"learning_rate", train.learning_rate},
        {"warmup_epochs", train.warmup_epochs},
        {"batch_size", train.batch_size},
        {"adam_beta1", train.adam_beta1},
        {"adam_beta2", train.adam_beta2},
        {"adam_eps", train.adam_eps},
        {"val_fraction", train.val_fraction},
        {"checkpoint_every", train.checkpoint_every}}},
      {"evaluate", {{"thresholds", "0.1:0.9:0.1"}}}};
}

namespace {

// Structural check of doc against the defaults: every key must exist in the
// template with a compatible JSON type. Arrays are checked by the caller.
void check_shape(const json& doc, const ordered_json& tmpl, const std::string& prefix,
                 std::vector<std::string>& problems) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!tmpl.contains(it.key())) {
      problems.push_back(key + ": unknown key");
      continue;
    }
    const auto& want = tmpl[it.key()];
    const auto& got = it.value();
    bool ok = true;
    if (want.is_object()) {
      ok = got.is_object();
      if (ok) check_shape(got, want, key, problems);
    } else if (want.is_boolean()) {
      ok = got.is_boolean();
    } else if (want.is_number_integer() || want.is_number_unsigned()) {
      ok = got.is_number_integer() || got.is_number_unsigned();
    } else if (want.is_number()) {
      ok = got.is_number();
    } else if (want.is_string()) {
      ok = got.is_string();
    } else if (want.is_array()) {
      ok = got.is_array();
    }
    if (!ok) problems.push_back(key + ": expected " + std::string(want.type_name()));
  }
}

void merge_into(ordered_json& base, const json& over) {
  for (auto it = over.begin(); it != over.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
      merge_into(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

bool is_color(const json& j) {
  return j.is_array() && j.size() == 3 &&
         std::all_of(j.begin(), j.end(), [](const json& v) { return v.is_number() && v >= 0 && v <= 1; });
}

}  // namespace

PipelineConfig parse_pipeline_config(const json& doc, const fs::path& base_dir) {
  std::vector<std::string> problems;
  if (!doc.is_object()) throw SchemaError({"<root>: expected object"});
  const ordered_json defaults = default_pipeline_json();
  check_shape(doc, defaults, "", problems);
  if (!doc.contains("classes")) problems.push_back("classes: required");
  if (!problems.empty()) throw SchemaError(problems);

  ordered_json m = defaults;
  merge_into(m, doc);

  PipelineConfig cfg;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) problems.push_back(msg);
  };

  if (m["seed"].is_number_integer() && m["seed"].get<std::int64_t>() < 0) problems.push_back("seed: must be >= 0");
  else cfg.seed = m["seed"].get<std::uint64_t>();

  std::set<ClassName> seen;
  need(!m["classes"].empty(), "classes: must list at least one class");
  for (const auto& c : m["classes"]) {
    try {
      const ClassName cn = parse_class_name(c.get<std::string>());
      if (seen.insert(cn).second) cfg.classes.push_back(cn);
    } catch (const std::exception&) {
      problems.push_back("classes: unknown class " + c.dump());
    }
  }

  cfg.tile_px = m["tiling"]["tile_px"].get<int>();
  cfg.token_px = m["tiling"]["token_px"].get<int>();
  need(cfg.token_px == kTokenPx, "tiling.token_px: the encoder fixes tokens at 64 px");
  need(cfg.tile_px > 0 && cfg.tile_px % kTokenPx == 0, "tiling.tile_px: must be a positive multiple of 64");

  const auto& synth = m["synth"];
  cfg.synth_enabled = synth["enabled"].get<bool>();
  cfg.synth_sheets = synth["sheets"].get<int>();
  cfg.synth_size_px = synth["size_px"].get<int>();
  need(!cfg.synth_enabled || cfg.synth_sheets >= 2, "synth.sheets: need at least 2 (train + eval)");
  need(cfg.synth_size_px >= cfg.tile_px, "synth.size_px: smaller than one tile");
  for (const char* key : {"paper", "wood_ink", "settlement_ink"})
    need(is_color(synth["textures"][key]), std::string("synth.textures.") + key + ": expected [r,g,b] in [0,1]");
  need(synth["textures"]["line_count"].get<int>() >= 0, "synth.textures.line_count: must be >= 0");
  need(synth["textures"]["pixel_noise"].get<double>() >= 0, "synth.textures.pixel_noise: must be >= 0");
  need(synth["textures"]["wood_circle_radius"].get<double>() > 0, "synth.textures.wood_circle_radius: must be > 0");
  need(synth["textures"]["wood_circle_density"].get<double>() >= 0,
       "synth.textures.wood_circle_density: must be >= 0");
  need(synth["textures"]["settlement_dot_spacing"].get<int>() >= 2,
       "synth.textures.settlement_dot_spacing: must be >= 2");
  if (problems.empty()) cfg.textures = textures_from_json(synth["textures"]);

  for (std::size_t i = 0; i < m["sheets"].size(); ++i) {
    const auto& s = m["sheets"][i];
    const std::string key = "sheets[" + std::to_string(i) + "]";
    if (!s.is_object()) {
      problems.push_back(key + ": expected object");
      continue;
    }
    for (auto it = s.begin(); it != s.end(); ++it)
      if (it.key() != "sheet" && it.key() != "raster" && it.key() != "masks" && it.key() != "eval")
        problems.push_back(key + "." + it.key() + ": unknown key");
    SheetSource src;
    if (!s.contains("sheet") || !s["sheet"].is_string()) problems.push_back(key + ".sheet: required string");
    else src.sheet = s["sheet"].get<std::string>();
    if (!s.contains("raster") || !s["raster"].is_string()) problems.push_back(key + ".raster: required string");
    else src.raster = base_dir / s["raster"].get<std::string>();
    if (s.contains("eval")) {
      if (s["eval"].is_boolean()) src.eval = s["eval"].get<bool>();
      else problems.push_back(key + ".eval: expected boolean");
    }
    if (s.contains("masks")) {
      if (!s["masks"].is_object()) {
        problems.push_back(key + ".masks: expected object");
      } else {
        for (auto it = s["masks"].begin(); it != s["masks"].end(); ++it) {
          try {
            if (!it.value().is_string()) throw InvalidArgument("path");
            src.masks[parse_class_name(it.key())] = base_dir / it.value().get<std::string>();
          } catch (const std::exception&) {
            problems.push_back(key + ".masks." + it.key() + ": expected class name -> path");
          }
        }
      }
    }
    cfg.sheets.push_back(std::move(src));
  }
  if (!cfg.synth_enabled) {
    need(!cfg.sheets.empty(), "sheets: required when synth.enabled is false");
    need(std::any_of(cfg.sheets.begin(), cfg.sheets.end(), [](const SheetSource& s) { return s.eval; }),
         "sheets: mark at least one sheet with \"eval\": true");
    need(std::any_of(cfg.sheets.begin(), cfg.sheets.end(), [](const SheetSource& s) { return !s.eval; }),
         "sheets: need at least one training sheet");
    for (const auto& s : cfg.sheets)
      if (s.eval)
        for (ClassName c : cfg.classes)
          need(s.masks.count(c) > 0, "sheets: eval sheet " + s.sheet + " lacks a " + std::string(to_string(c)) + " mask");
  }

  const auto& lab = m["labeler"];
  cfg.labeler.provider = lab["provider"].get<std::string>();
  need(cfg.labeler.provider == "mock" || cfg.labeler.provider == "openai" || cfg.labeler.provider == "replay",
       "labeler.provider: one of mock, openai, replay");
  cfg.labeler.min_fraction = lab["min_fraction"].get<double>();
  cfg.labeler.flip_rate = lab["flip_rate"].get<double>();
  need(cfg.labeler.min_fraction >= 0 && cfg.labeler.min_fraction < 1, "labeler.min_fraction: must be in [0,1)");
  need(cfg.labeler.flip_rate >= 0 && cfg.labeler.flip_rate <= 1, "labeler.flip_rate: must be in [0,1]");
  cfg.labeler.concurrency = lab["concurrency"].get<int>();
  cfg.labeler.max_retries = lab["max_retries"].get<int>();
  cfg.labeler.backoff_ms = lab["backoff_ms"].get<int>();
  need(cfg.labeler.concurrency >= 1, "labeler.concurrency: must be >= 1");
  need(cfg.labeler.max_retries >= 0, "labeler.max_retries: must be >= 0");
  need(cfg.labeler.backoff_ms >= 0, "labeler.backoff_ms: must be >= 0");
  if (!lab["legend"].get<std::string>().empty()) cfg.labeler.legend = base_dir / lab["legend"].get<std::string>();
  cfg.labeler.http.base_url = lab["http"]["base_url"].get<std::string>();
  cfg.labeler.http.path = lab["http"]["path"].get<std::string>();
  cfg.labeler.http.model = lab["http"]["model"].get<std::string>();
  cfg.labeler.http.api_key_env = lab["http"]["api_key_env"].get<std::string>();
  cfg.labeler.http.timeout_seconds = lab["http"]["timeout_seconds"].get<int>();

  auto& model = cfg.train.model;
  model.encoder_widths.clear();
  for (const auto& w : m["model"]["encoder_widths"]) {
    if (w.is_number_integer() && w.get<int>() > 0) model.encoder_widths.push_back(w.get<int>());
    else problems.push_back("model.encoder_widths: expected positive integers");
  }
  model.input_height = model.input_width = cfg.tile_px;
  model.drop_p = m["model"]["drop_p"].get<double>();
  model.focal_gamma = m["model"]["focal_gamma"].get<double>();
  model.focal_alpha = m["model"]["focal_alpha"].get<double>();
  const auto& tr = m["train"];
  cfg.train.epochs = tr["epochs"].get<int>();
  cfg.train.learning_rate = tr["learning_rate"].get<double>();
  cfg.train.warmup_epochs = tr["warmup_epochs"].get<int>();
  cfg.train.batch_size = tr["batch_size"].get<int>();
  cfg.train.adam_beta1 = tr["adam_beta1"].get<double>();
  cfg.train.adam_beta2 = tr["adam_beta2"].get<double>();
  cfg.train.adam_eps = tr["adam_eps"].get<double>();
  cfg.train.val_fraction = tr["val_fraction"].get<double>();
  cfg.train.checkpoint_every = tr["checkpoint_every"].get<int>();
  try {
    cfg.train.validate();
  } catch (const std::exception& e) {
    problems.push_back(std::string("model/train: ") + e.what());
  }

  cfg.thresholds = m["evaluate"]["thresholds"].get<std::string>();
  try {
    for (double t : parse_thresholds(cfg.thresholds))
      if (!(t > 0 && t < 1)) throw InvalidArgument("threshold outside (0,1)");
  } catch (const std::exception& e) {
    problems.push_back(std::string("evaluate.thresholds: ") + e.what());
  }

  if (!problems.empty()) throw SchemaError(problems);
  // Resolved paths make the canonical form independent of the working directory.
  for (std::size_t i = 0; i < cfg.sheets.size(); ++i) {
    m["sheets"][i]["raster"] = cfg.sheets[i].raster.string();
    for (const auto& [c, p] : cfg.sheets[i].masks) m["sheets"][i]["masks"][std::string(to_string(c))] = p.string();
  }
  if (!cfg.labeler.legend.empty()) m["labeler"]["legend"] = cfg.labeler.legend.string();
  cfg.canonical = std::move(m);
  return cfg;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw SchemaError({std::string("<syntax>: ") + e.what()});
  }
  return parse_pipeline_config(doc, path.parent_path());
}

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  void update(const std::string& s) {
    const std::uint64_t n = s.size();
    update(&n, sizeof n);
    update(s.data(), s.size());
  }
  void update_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    std::vector<char> buf(1 << 16);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

std::string digest_of(const std::vector<fs::path>& paths) {
  Sha256 h;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      h.update(directory_digest(p));
    } else if (fs::exists(p)) {
      h.update(p.filename().string());
      h.update_file(p);
    } else {
      h.update("<missing>" + p.filename().string());
    }
  }
  return h.hex();
}

std::string hash_strings(const std::vector<std::string>& parts) {
  Sha256 h;
  for (const auto& p : parts) h.update(p);
  return h.hex();
}

struct StageSpec {
  std::string name;
  std::string input_hash;
  std::vector<fs::path> outputs;
  std::function<void(std::ostream& log)> run;
};

class Runner {
 public:
  Runner(fs::path work, std::ostream& progress) : work_(std::move(work)), progress_(progress) {
    fs::create_directories(work_ / "logs");
    fs::create_directories(work_ / "stamps");
  }

  // Returns the digest of the stage outputs.
  std::string run(const StageSpec& spec) {
    StageOutcome out;
    out.stage = spec.name;
    out.input_hash = spec.input_hash;
    std::string file_name = spec.name;
    std::replace(file_name.begin(), file_name.end(), ':', '_');
    out.log = work_ / "logs" / (file_name + ".log");
    const fs::path stamp = work_ / "stamps" / (file_name + ".json");
    const auto t0 = std::chrono::steady_clock::now();

    if (fs::exists(stamp)) {
      try {
        std::ifstream in(stamp);
        const auto s = json::parse(in);
        if (s.at("input_hash") == spec.input_hash && s.at("output_digest") == digest_of(spec.outputs)) {
          out.skipped = true;
          out.output_digest = s.at("output_digest").get<std::string>();
          progress_ << "[" << spec.name << "] up to date, skipped\n";
          outcomes_.push_back(out);
          return out.output_digest;
        }
      } catch (const std::exception&) {
        // unreadable stamp: rerun
      }
    }

    progress_ << "[" << spec.name << "] running\n" << std::flush;
    std::ofstream log(out.log);
    try {
      spec.run(log);
    } catch (const std::exception& e) {
      log << "error: " << e.what() << "\n";
      log.flush();
      std::error_code ec;
      fs::remove(stamp, ec);
      throw StageError(spec.name, out.log, e.what());
    }
    out.output_digest = digest_of(spec.outputs);
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << "done in " << out.seconds << " s, outputs " << out.output_digest << "\n";
    std::ofstream(stamp) << ordered_json{{"stage", spec.name},
                                         {"input_hash", spec.input_hash},
                                         {"output_digest", out.output_digest}}
                                .dump(2)
                         << "\n";
    progress_ << "[" << spec.name << "] done in " << out.seconds << " s\n" << std::flush;
    outcomes_.push_back(out);
    return out.output_digest;
  }

  const std::vector<StageOutcome>& outcomes() const { return outcomes_; }

 private:
  fs::path work_;
  std::ostream& progress_;
  std::vector<StageOutcome> outcomes_;
};

std::string library_versions() {
  return ordered_json{{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)},
                      {"opencv", CV_VERSION},
                      {"openssl", OPENSSL_VERSION_TEXT}}
      .dump();
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string directory_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::exists(dir))
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Sha256 h;
  for (const auto& f : files) {
    h.update(fs::relative(f, dir).generic_string());
    h.update_file(f);
  }
  return h.hex();
}

std::unique_ptr<LlmProvider> make_provider(const LabelerSettings& s, const fs::path& masks_dir, std::uint64_t seed,
                                           int tile_px) {
  if (s.provider == "mock")
    return std::make_unique<MaskOracleProvider>(masks_dir, tile_px, s.min_fraction, s.flip_rate, seed);
  if (s.provider == "openai") return std::make_unique<HttpChatProvider>(s.http);
  if (s.provider == "replay") return std::make_unique<ReplayProvider>();
  throw InvalidArgument("unknown provider: " + s.provider);
}

std::vector<EvalReport> evaluate_to_dir(const fs::path& attn_dir, const fs::path& gt_dir, ClassName c,
                                        const std::vector<double>& thresholds, const fs::path& out_dir,
                                        const fs::path& rasters_dir) {
  const auto maps = read_attention_maps(attn_dir, c);
  if (maps.empty()) throw InvalidArgument("no attention maps for " + std::string(to_string(c)) + " in " + attn_dir.string());
  std::map<SheetId, GroundTruthMask> masks;
  for (const auto& m : maps) {
    if (masks.count(m.patch.sheet)) continue;
    masks.emplace(m.patch.sheet, ingest_mask(mask_path(gt_dir, m.patch.sheet, c), m.patch.sheet, c));
  }
  const auto reports = sweep(maps, masks, c, thresholds);
  fs::create_directories(out_dir);
  write_report_csv(out_dir / "report.csv", reports);
  plot_sweep(out_dir / "sweep_down.png", reports, AlignMode::DownSampled);
  plot_sweep(out_dir / "sweep_up.png", reports, AlignMode::UpSampled);
  for (const auto& [sheet, mask] : masks) {
    std::vector<AttentionMap> sheet_maps;
    for (const auto& m : maps)
      if (m.patch.sheet == sheet) sheet_maps.push_back(m);
    Rgb8 base;
    const fs::path raster = rasters_dir / (sheet + ".png");
    if (!rasters_dir.empty() && fs::exists(raster)) {
      base = read_rgb(raster);
    } else {
      base = Rgb8{mask.mask.rows, mask.mask.cols, {}};
      base.pixels.assign(static_cast<std::size_t>(base.height) * base.width * 3, 255);
    }
    write_png(out_dir / ("overlay_" + sheet + ".png"), render_sheet_overlay(base, sheet_maps, &mask.mask));
  }
  return reports;
}

PipelineResult run_pipeline(const PipelineConfig& cfg, const fs::path& work, std::ostream& progress) {
  fs::create_directories(work);
  Runner runner(work, progress);
  const auto& canon = cfg.canonical;
  const std::string version = kToolVersion;

  const fs::path synth_dir = work / "synth";
  const fs::path patches_dir = work / "patches";
  const fs::path gt_dir = work / "gt";
  const fs::path labels_dir = work / "labels";
  const fs::path labels_file = labels_dir / "labels.jsonl";
  const fs::path report_dir = work / "report";

  // Sheet list with rasters and masks resolved for either source.
  std::vector<SheetSource> sheets = cfg.sheets;
  std::string upstream;
  if (cfg.synth_enabled) {
    upstream = runner.run({"synth",
                           hash_strings({version, canon["seed"].dump(), canon["synth"].dump()}),
                           {synth_dir},
                           [&](std::ostream& log) {
                             fs::remove_all(synth_dir);
                             const auto made = generate_benchmark(cfg.seed, cfg.synth_sheets, cfg.synth_size_px,
                                                                  synth_dir, cfg.textures);
                             write_png(synth_dir / "legend.png", render_legend(cfg.textures));
                             log << "generated " << made.size() << " sheets\n";
                           }});
    sheets.clear();
    for (const auto& b : read_benchmark(synth_dir)) {
      SheetSource s{b.sheet, synth_dir / (b.sheet + ".png"), {}, b.eval};
      for (ClassName c : kAllClasses) s.masks[c] = mask_path(synth_dir, b.sheet, c);
      sheets.push_back(std::move(s));
    }
  } else {
    std::vector<fs::path> inputs;
    for (const auto& s : sheets) {
      inputs.push_back(s.raster);
      for (const auto& [c, p] : s.masks) inputs.push_back(p);
    }
    upstream = digest_of(inputs);
  }
  std::vector<SheetId> train_sheets, eval_sheets;
  for (const auto& s : sheets) (s.eval ? eval_sheets : train_sheets).push_back(s.sheet);

  const std::string tile_digest =
      runner.run({"tile",
                  hash_strings({version, canon["tiling"].dump(), canon["sheets"].dump(), upstream}),
                  {patches_dir, gt_dir},
                  [&](std::ostream& log) {
                    fs::remove_all(patches_dir);
                    fs::remove_all(gt_dir);
                    fs::create_directories(gt_dir);
                    for (const auto& s : sheets) {
                      const auto manifest = ingest_sheet(s.raster, s.sheet, patches_dir, cfg.tile_px);
                      log << s.sheet << ": " << manifest.entries.size() << " patches\n";
                      for (const auto& w : manifest.warnings) log << "warning: " << w << "\n";
                      for (const auto& [c, p] : s.masks) {
                        const auto mask = ingest_mask(p, s.sheet, c, manifest.sheet_height, manifest.sheet_width);
                        write_mask(mask_path(gt_dir, s.sheet, c), mask.mask);
                      }
                    }
                  }});

  const fs::path legend_file = cfg.labeler.legend.empty() ? synth_dir / "legend.png" : cfg.labeler.legend;
  const std::string label_digest = runner.run(
      {"label",
       hash_strings({version, canon["labeler"].dump(), canon["seed"].dump(), tile_digest,
                     digest_of({legend_file})}),
       {labels_file},
       [&](std::ostream& log) {
         fs::create_directories(labels_dir);
         const Rgb8 legend = fs::exists(legend_file) ? read_rgb(legend_file) : render_legend(cfg.textures);
         std::vector<Manifest> manifests;
         for (const auto& id : train_sheets) manifests.push_back(read_manifest(manifest_path(patches_dir, id)));
         auto provider = make_provider(cfg.labeler, gt_dir, Rng(cfg.seed).derive(7).seed(), cfg.tile_px);
         ResponseCache cache(labels_dir / "cache");
         LabelingOptions opts;
         opts.concurrency = cfg.labeler.concurrency;
         opts.max_retries = cfg.labeler.max_retries;
         opts.initial_backoff = std::chrono::milliseconds(cfg.labeler.backoff_ms);
         const auto result = label_patches(manifests, patches_dir, legend, *provider, cache, opts);
         write_labels(labels_file, result.records);
         log << "provider " << provider->name() << ": " << result.provider_calls << " calls, " << result.cache_hits
             << " cache hits, " << result.unlabeled_patches << " unlabeled patches\n";
       }});

  const LabelStore store(labels_file);
  const std::string human_digest = digest_of({store.journal_file()});
  std::vector<EvalReport> all_reports;
  for (std::size_t ci = 0; ci < cfg.classes.size(); ++ci) {
    const ClassName c = cfg.classes[ci];
    const std::string cname(to_string(c));
    const fs::path train_dir = work / "train" / cname;
    const fs::path attn_dir = work / "attn" / cname;
    const std::uint64_t class_seed = Rng(cfg.seed).derive(100 + static_cast<std::uint64_t>(c)).seed();

    const std::string ckpt_digest = runner.run(
        {"train:" + cname,
         hash_strings({version, cname, canon["model"].dump(), canon["train"].dump(), canon["seed"].dump(),
                       tile_digest, label_digest, human_digest}),
         {train_dir / "best.ckpt", train_dir / "metrics.jsonl"},
         [&](std::ostream& log) {
           fs::remove_all(train_dir);
           const auto dataset = load_training_set(LabelStore(labels_file).history(), patches_dir, c, train_sheets);
           log << dataset.size() << " labeled patches\n";
           TrainConfig tc = cfg.train;
           tc.seed = class_seed;
           const auto result = train(dataset, c, tc, train_dir, [&](const EpochMetrics& m) {
             log << to_json_line(m) << "\n" << std::flush;
           });
           for (const auto& w : result.warnings) log << "warning: " << w << "\n";
           log << "best epoch " << result.best_epoch << "\n";
         }});

    const std::string attn_digest = runner.run(
        {"extract:" + cname,
         hash_strings({version, cname, ckpt_digest, tile_digest}),
         {attn_dir},
         [&](std::ostream& log) {
           fs::remove_all(attn_dir);
           const auto params = load_checkpoint(train_dir / "best.ckpt");
           for (const auto& id : eval_sheets) {
             const auto ex = extract_sheet(read_manifest(manifest_path(patches_dir, id)), patches_dir, params, c, attn_dir);
             log << id << ": " << ex.maps.size() << " maps\n";
             for (const auto& m : ex.missing) log << "missing: " << m << "\n";
           }
         }});

    runner.run({"evaluate:" + cname,
                hash_strings({version, cname, canon["evaluate"].dump(), attn_digest, tile_digest}),
                {report_dir / cname},
                [&](std::ostream& log) {
                  fs::remove_all(report_dir / cname);
                  std::map<SheetId, fs::path> rasters;
                  const auto reports = evaluate_to_dir(attn_dir, gt_dir, c, parse_thresholds(cfg.thresholds),
                                                       report_dir / cname,
                                                       cfg.synth_enabled ? synth_dir : fs::path{});
                  for (const auto& r : reports)
                    if (std::abs(r.threshold - 0.5) < 1e-9)
                      log << to_string(r.mode) << " sigma=0.5 iou=" << r.iou << " precision=" << r.precision
                          << " recall=" << r.recall << "\n";
                }});
    const auto reports = read_report_csv(report_dir / cname / "report.csv");
    all_reports.insert(all_reports.end(), reports.begin(), reports.end());
  }

  PipelineResult result;
  result.report_csv = report_dir / "report.csv";
  write_report_csv(result.report_csv, all_reports);
  result.stages = runner.outcomes();

  ordered_json stages = ordered_json::array();
  for (const auto& s : result.stages)
    stages.push_back({{"stage", s.stage},
                      {"skipped", s.skipped},
                      {"input_hash", s.input_hash},
                      {"output_digest", s.output_digest},
                      {"seconds", s.seconds},
                      {"log", fs::relative(s.log, work).generic_string()}});
  ordered_json seeds{{"pipeline", cfg.seed}, {"labeler", Rng(cfg.seed).derive(7).seed()}};
  for (ClassName c : cfg.classes)
    seeds["train:" + std::string(to_string(c))] = Rng(cfg.seed).derive(100 + static_cast<std::uint64_t>(c)).seed();
  const ordered_json manifest{{"tool", "attn-distill"},
                              {"version", version},
                              {"created_utc", utc_now()},
                              {"libraries", json::parse(library_versions())},
                              {"seeds", seeds},
                              {"config", canon},
                              {"stages", stages},
                              {"report", fs::relative(result.report_csv, work).generic_string()},
                              {"report_sha256", digest_of({result.report_csv})}};
  result.manifest = work / "run_manifest.json";
  std::ofstream(result.manifest) << manifest.dump(2) << "\n";
  return result;
}

}  // namespace attn_distill
