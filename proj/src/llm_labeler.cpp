#include "attn_distill/llm_labeler.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

#include <httplib.h>
#include <json.hpp>

#include "attn_distill/errors.hpp"

namespace attn_distill {

namespace fs = std::filesystem;

std::string prompt_template() {
  return "On the left side is some examples of the symbols of a historical map including the class Wood and "
         "Settlement. On the right side is an image of historical map patch. For the right image, please answer "
         "the following question with Yes or No and give reasons for the answer:\n"
         "1. Does the image contain Wood?\n"
         "2. Does the image contain Settlement?\n"
         "Formatting the answer with the following structure:\n"
         "1. **Wood?** [Yes/No] : [reason]\n"
         "2. **Settlement?** [Yes/No] : [reason]";
}

PromptBundle build_prompt(const PatchId& patch, const Rgb8& pixels, const Rgb8& legend) {
  if (legend.height <= 0 || legend.width <= 0 || legend.pixels.empty()) {
    throw InvalidArgument("legend image is empty");
  }
  if (pixels.height <= 0 || pixels.width <= 0) throw InvalidArgument("patch image is empty");
  const int height = std::max(legend.height, pixels.height);
  const int width = legend.width + kLegendSeparatorPx + pixels.width;
  Rgb8 out{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width * 3, 255)};
  auto blit = [&](const Rgb8& src, int x0) {
    for (int y = 0; y < src.height; ++y) {
      const auto* row = &src.pixels[static_cast<std::size_t>(y) * src.width * 3];
      std::copy(row, row + static_cast<std::size_t>(src.width) * 3,
                &out.pixels[(static_cast<std::size_t>(y) * width + x0) * 3]);
    }
  };
  blit(legend, 0);
  for (int y = 0; y < height; ++y) {
    auto* sep = &out.pixels[(static_cast<std::size_t>(y) * width + legend.width) * 3];
    std::fill(sep, sep + kLegendSeparatorPx * 3, std::uint8_t{128});
  }
  blit(pixels, legend.width + kLegendSeparatorPx);
  return PromptBundle{std::move(out), prompt_template(), patch};
}

PromptBundle build_prompt(const PatchImage& patch, const Rgb8& legend) {
  return build_prompt(patch.id, to_rgb8(patch.image), legend);
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) throw InvalidState("sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string bundle_hash(const PromptBundle& bundle) {
  std::vector<std::uint8_t> buf;
  const std::string dims = std::to_string(bundle.composite.height) + "x" + std::to_string(bundle.composite.width) + "\n";
  buf.insert(buf.end(), dims.begin(), dims.end());
  buf.insert(buf.end(), bundle.composite.pixels.begin(), bundle.composite.pixels.end());
  buf.insert(buf.end(), bundle.prompt_text.begin(), bundle.prompt_text.end());
  return sha256_hex(buf.data(), buf.size());
}

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

LlmAnswer parse_answer(const std::string& raw_text) {
  static const std::regex kClassLine(R"(^\s*(?:\d+\s*[.)]\s*)?\*\*\s*(wood|settlement)\s*\?\s*\*\*\s*:?\s*(.*)$)",
                                     std::regex::icase);
  static const std::regex kAnswer(R"(^[\[\*\s]*(yes|no)\b[\]\*]*\s*(.*)$)", std::regex::icase);

  LlmAnswer answer{raw_text, {}};
  std::istringstream in(raw_text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::smatch m;
    if (!std::regex_match(line, m, kClassLine)) continue;
    const ClassName cls = parse_class_name(m[1].str());
    const std::string rest = m[2].str();
    std::smatch a;
    if (!std::regex_match(rest, a, kAnswer)) {
      throw ParseError("no Yes/No answer for " + std::string(to_string(cls)), raw_text);
    }
    std::string tail = a[2].str();
    // "[Yes/No]" echoed back from the template is not an answer.
    static const std::regex kSecondChoice(R"(^\s*(?:/|or\b|and\b)\s*\[?\s*(yes|no)\b.*)", std::regex::icase);
    if (std::regex_match(tail, kSecondChoice)) {
      throw ParseError("ambiguous answer for " + std::string(to_string(cls)), raw_text);
    }
    const bool present = lower(a[1].str()) == "yes";
    tail = trim(tail);
    if (!tail.empty() && (tail.front() == ':' || tail.front() == '-')) tail = trim(tail.substr(1));
    ClassAnswer parsed{present, tail};
    const auto it = answer.parsed.find(cls);
    if (it != answer.parsed.end()) {
      if (it->second.present != present) {
        throw ParseError("conflicting answers for " + std::string(to_string(cls)), raw_text);
      }
      continue;
    }
    answer.parsed.emplace(cls, std::move(parsed));
  }
  for (ClassName c : kAllClasses) {
    if (!answer.parsed.count(c)) {
      throw ParseError("answer has no line for " + std::string(to_string(c)), raw_text);
    }
  }
  return answer;
}

std::string format_answer(const std::map<ClassName, ClassAnswer>& answers) {
  std::string out;
  int n = 1;
  for (ClassName c : kAllClasses) {
    const auto it = answers.find(c);
    if (it == answers.end()) continue;
    std::string name(to_string(c));
    name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
    if (!out.empty()) out += "\n";
    out += std::to_string(n++) + ". **" + name + "?** " + (it->second.present ? "Yes" : "No") + ": " + it->second.reason;
  }
  return out;
}

std::string ScriptedProvider::complete(const PromptBundle& bundle) {
  ++calls_;
  return script_(bundle);
}

MaskOracleProvider::MaskOracleProvider(fs::path masks_dir, int tile_px, double min_fraction, double flip_rate,
                                       std::uint64_t seed)
    : masks_dir_(std::move(masks_dir)), tile_px_(tile_px), min_fraction_(min_fraction), flip_rate_(flip_rate),
      seed_(seed) {}

const GroundTruthMask& MaskOracleProvider::mask_for(const SheetId& sheet, ClassName c) {
  std::lock_guard lock(mutex_);
  const auto key = std::make_pair(sheet, c);
  auto it = masks_.find(key);
  if (it == masks_.end()) {
    it = masks_.emplace(key, ingest_mask(mask_path(masks_dir_, sheet, c), sheet, c)).first;
  }
  return it->second;
}

std::string MaskOracleProvider::complete(const PromptBundle& bundle) {
  std::map<ClassName, ClassAnswer> answers;
  for (ClassName c : kAllClasses) {
    const auto& mask = mask_for(bundle.patch.sheet, c).mask;
    const int y0 = bundle.patch.row * tile_px_;
    const int x0 = bundle.patch.col * tile_px_;
    std::size_t fg = 0;
    for (int y = y0; y < std::min(mask.rows, y0 + tile_px_); ++y) {
      for (int x = x0; x < std::min(mask.cols, x0 + tile_px_); ++x) fg += mask.at(y, x) ? 1 : 0;
    }
    const double fraction = static_cast<double>(fg) / (static_cast<double>(tile_px_) * tile_px_);
    bool present = fg > 0 && fraction >= min_fraction_;
    if (flip_rate_ > 0.0) {
      Rng rng(splitmix64(seed_ ^ std::hash<std::string>{}(bundle.patch.str() + std::string(to_string(c)))));
      if (rng.bernoulli(flip_rate_)) present = !present;
    }
    answers[c] = {present, present ? "symbols of this class are visible in the right image"
                                   : "no symbols of this class appear in the right image"};
  }
  return format_answer(answers);
}

std::string ReplayProvider::complete(const PromptBundle& bundle) {
  throw ProviderError("replay provider has no cached response for " + bundle.patch.str());
}

HttpChatProvider::HttpChatProvider(HttpProviderConfig config) : config_(std::move(config)) {
  if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
}

std::string HttpChatProvider::request_body(const PromptBundle& bundle) const {
  const std::string image_url = "data:image/png;base64," + base64_encode(encode_png(bundle.composite));
  nlohmann::json body{
      {"model", config_.model},
      {"messages",
       nlohmann::json::array({{{"role", "user"},
                               {"content", nlohmann::json::array({{{"type", "text"}, {"text", bundle.prompt_text}},
                                                                  {{"type", "image_url"},
                                                                   {"image_url", {{"url", image_url}}}}})}}})},
      {"temperature", 0}};
  return body.dump();
}

std::string HttpChatProvider::complete(const PromptBundle& bundle) {
  if (api_key_.empty()) throw ProviderError("environment variable " + config_.api_key_env + " is not set");
  httplib::Client client(config_.base_url);
  client.set_read_timeout(config_.timeout_seconds, 0);
  client.set_connection_timeout(30, 0);
  const httplib::Headers headers{{"Authorization", "Bearer " + api_key_}};
  auto res = client.Post(config_.path, headers, request_body(bundle), "application/json");
  if (!res) throw ProviderError("request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw ProviderError("provider returned HTTP " + std::to_string(res->status));
  try {
    const auto doc = nlohmann::json::parse(res->body);
    return doc.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ProviderError(std::string("unexpected provider response: ") + e.what());
  }
}

ResponseCache::ResponseCache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

std::optional<std::string> ResponseCache::get(const std::string& key) const {
  std::ifstream in(dir_ / (key + ".json"));
  if (!in) return std::nullopt;
  try {
    return nlohmann::json::parse(in).at("response").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

void ResponseCache::put(const std::string& key, const PatchId& patch, const std::string& provider,
                        const std::string& response) {
  const nlohmann::ordered_json doc{{"key", key}, {"patch_id", patch.str()}, {"provider", provider}, {"response", response}};
  std::lock_guard lock(write_mutex_);
  const auto tmp = dir_ / (key + ".json.tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write cache entry " + tmp.string());
    out << doc.dump(2) << "\n";
  }
  fs::rename(tmp, dir_ / (key + ".json"));
}

LabelingResult label_patches(const std::vector<Manifest>& manifests, const fs::path& patches_dir, const Rgb8& legend,
                             LlmProvider& provider, ResponseCache& cache, const LabelingOptions& options) {
  if (options.concurrency < 1) throw InvalidArgument("concurrency must be at least 1");
  if (options.max_retries < 0) throw InvalidArgument("retry count must be non-negative");

  std::vector<ManifestEntry> entries;
  for (const auto& m : manifests) entries.insert(entries.end(), m.entries.begin(), m.entries.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  struct Outcome {
    std::vector<LabelRecord> records;
    bool provider_called = false;
    bool cache_hit = false;
    bool unlabeled = false;
  };
  std::vector<Outcome> outcomes(entries.size());
  std::atomic<std::size_t> next{0};

  auto unlabeled = [](const PatchId& id, const std::string& error) {
    std::vector<LabelRecord> out;
    for (ClassName c : kAllClasses) {
      LabelRecord r;
      r.patch = id;
      r.class_name = c;
      r.source = LabelSource::Llm;
      r.unlabeled = true;
      r.error = error;
      out.push_back(std::move(r));
    }
    return out;
  };

  auto work = [&]() {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      const auto& entry = entries[i];
      Outcome& outcome = outcomes[i];
      try {
        const auto bundle = build_prompt(entry.id, read_rgb(patches_dir / entry.file), legend);
        const auto key = bundle_hash(bundle);
        std::optional<std::string> raw = cache.get(key);
        if (raw) {
          outcome.cache_hit = true;
        } else {
          auto delay = options.initial_backoff;
          for (int attempt = 0; attempt <= options.max_retries && !raw; ++attempt) {
            try {
              outcome.provider_called = true;
              raw = provider.complete(bundle);
            } catch (const ProviderError& e) {
              if (attempt == options.max_retries) throw;
              std::cerr << "warning: " << entry.id.str() << ": " << e.what() << "; retrying\n";
              std::this_thread::sleep_for(delay);
              delay *= 2;
            }
          }
          cache.put(key, entry.id, provider.name(), *raw);
        }
        const auto answer = parse_answer(*raw);
        for (const auto& [cls, a] : answer.parsed) {
          outcome.records.push_back(LabelRecord{entry.id, cls, a.present, LabelSource::Llm, a.reason, false, ""});
        }
      } catch (const ParseError& e) {
        outcome.records = unlabeled(entry.id, std::string("parse error: ") + e.what());
        outcome.unlabeled = true;
      } catch (const ProviderError& e) {
        outcome.records = unlabeled(entry.id, std::string("provider error: ") + e.what());
        outcome.unlabeled = true;
      } catch (const IoError& e) {
        outcome.records = unlabeled(entry.id, std::string("io error: ") + e.what());
        outcome.unlabeled = true;
      }
    }
  };

  const int workers = std::min<int>(options.concurrency, std::max<std::size_t>(1, entries.size()));
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  LabelingResult result;
  for (auto& o : outcomes) {
    result.provider_calls += o.provider_called ? 1 : 0;
    result.cache_hits += o.cache_hit ? 1 : 0;
    result.unlabeled_patches += o.unlabeled ? 1 : 0;
    for (auto& r : o.records) result.records.push_back(std::move(r));
  }
  return result;
}

}  // namespace attn_distill
