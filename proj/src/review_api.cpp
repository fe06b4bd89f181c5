#include "attn_distill/review_api.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "attn_distill/attnmap.hpp"
#include "attn_distill/colormap.hpp"
#include "attn_distill/errors.hpp"
#include "attn_distill/image_io.hpp"

// httplib pulls in system headers whose macros break Eigen; keep it last.
#include <httplib.h>
#include <json.hpp>

namespace attn_distill {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void write_all_fsync(const fs::path& path, const std::string& data, bool append) {
  const int flags = O_WRONLY | O_CREAT | O_CLOEXEC | (append ? O_APPEND : O_TRUNC);
  const int fd = ::open(path.c_str(), flags, 0644);
  if (fd < 0) throw IoError("cannot open " + path.string() + ": " + std::strerror(errno));
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      const std::string msg = std::strerror(errno);
      ::close(fd);
      throw IoError("write failed on " + path.string() + ": " + msg);
    }
    off += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    const std::string msg = std::strerror(errno);
    ::close(fd);
    throw IoError("fsync failed on " + path.string() + ": " + msg);
  }
  ::close(fd);
}

void fsync_dir(const fs::path& dir) {
  const int fd = ::open(dir.empty() ? "." : dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
  if (fd < 0) return;
  ::fsync(fd);
  ::close(fd);
}

std::optional<CoarseLabel> find_effective(const std::vector<LabelRecord>& history, const PatchId& patch,
                                          ClassName c) {
  std::vector<LabelRecord> subset;
  for (const auto& r : history)
    if (r.patch == patch && r.class_name == c) subset.push_back(r);
  auto eff = effective_labels(subset);
  if (eff.empty()) return std::nullopt;
  return eff.front();
}

}  // namespace

LabelStore::LabelStore(fs::path labels_file) : labels_file_(std::move(labels_file)) {
  if (fs::exists(labels_file_)) history_ = read_labels(labels_file_);
  if (fs::exists(journal_file())) {
    // A torn final line from a crash mid-append is dropped.
    std::ifstream in(journal_file());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        history_.push_back(parse_label_line(line));
      } catch (const std::exception&) {
        if (in.peek() != std::char_traits<char>::eof()) throw;
      }
    }
  }
}

fs::path LabelStore::journal_file() const { return fs::path(labels_file_.string() + ".journal"); }

std::vector<LabelRecord> LabelStore::history() const {
  std::shared_lock lock(mutex_);
  return history_;
}

std::vector<CoarseLabel> LabelStore::effective() const {
  std::shared_lock lock(mutex_);
  return effective_labels(history_);
}

std::optional<CoarseLabel> LabelStore::effective(const PatchId& patch, ClassName c) const {
  std::shared_lock lock(mutex_);
  return find_effective(history_, patch, c);
}

void LabelStore::append_journal(const LabelRecord& record) {
  write_all_fsync(journal_file(), to_json_line(record) + "\n", true);
}

CoarseLabel LabelStore::set_human(const PatchId& patch, ClassName c, bool present) {
  std::unique_lock lock(mutex_);
  const auto current = find_effective(history_, patch, c);
  if (current && current->source == LabelSource::Human && current->present == present) return *current;
  LabelRecord r;
  r.patch = patch;
  r.class_name = c;
  r.present = present;
  r.source = LabelSource::Human;
  r.reason = "human review";
  append_journal(r);
  history_.push_back(r);
  return *find_effective(history_, patch, c);
}

void LabelStore::snapshot() {
  std::unique_lock lock(mutex_);
  std::string data;
  for (const auto& r : history_) data += to_json_line(r) + "\n";
  const fs::path tmp = labels_file_.string() + ".tmp";
  write_all_fsync(tmp, data, false);
  fs::rename(tmp, labels_file_);
  fsync_dir(labels_file_.parent_path());
  std::error_code ec;
  fs::remove(journal_file(), ec);
}

ReviewService::ReviewService(ReviewConfig config)
    : config_(std::move(config)), store_(config_.labels_file) {
  manifests_ = read_manifests(config_.patches_dir);
  for (const auto& m : manifests_)
    for (const auto& e : m.entries) entries_.emplace(e.id, e);
}

bool ReviewService::has_patch(const PatchId& patch) const { return entries_.count(patch) > 0; }

std::vector<SheetStats> ReviewService::sheets() const {
  const auto eff = store_.effective();
  std::vector<SheetStats> out;
  for (const auto& m : manifests_) {
    SheetStats s;
    s.sheet = m.sheet;
    s.patches = m.entries.size();
    for (const auto& l : eff) {
      if (l.patch.sheet != m.sheet || !has_patch(l.patch)) continue;
      ++s.labels;
      if (l.source == LabelSource::Human) ++s.human_overrides;
    }
    const double denom = static_cast<double>(s.patches * kAllClasses.size());
    s.coverage = denom > 0 ? static_cast<double>(s.labels) / denom : 0.0;
    out.push_back(s);
  }
  return out;
}

PatchPage ReviewService::patches(const SheetId& sheet, ClassName c, int page, int page_size) const {
  const auto it = std::find_if(manifests_.begin(), manifests_.end(),
                               [&](const Manifest& m) { return m.sheet == sheet; });
  if (it == manifests_.end()) throw NotFound("unknown sheet: " + sheet);
  if (page < 1) throw InvalidArgument("page must be >= 1");
  if (page_size < 1 || page_size > 500) throw InvalidArgument("page_size must be in [1,500]");
  PatchPage out;
  out.sheet = sheet;
  out.class_name = c;
  out.page = page;
  out.page_size = page_size;
  out.total = it->entries.size();
  const std::size_t begin = static_cast<std::size_t>(page - 1) * page_size;
  const std::size_t end = std::min(out.total, begin + page_size);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& e = it->entries[i];
    PatchRecordView v;
    v.patch = e.id;
    v.image_url = "/patches/" + e.id.str() + "/image";
    if (const auto l = store_.effective(e.id, c)) {
      v.label = l->present;
      v.source = l->source;
      v.reason = l->reason.value_or("");
    }
    v.has_overlay = !config_.attn_dir.empty() && fs::exists(attention_map_path(config_.attn_dir, e.id, c));
    out.items.push_back(std::move(v));
  }
  return out;
}

CoarseLabel ReviewService::set_label(const PatchId& patch, ClassName c, bool present) {
  if (!has_patch(patch)) throw NotFound("unknown patch: " + patch.str());
  return store_.set_human(patch, c, present);
}

std::string ReviewService::export_labels() const {
  std::ostringstream out;
  for (const auto& l : store_.effective()) out << to_json_line(to_record(l)) << '\n';
  return out.str();
}

fs::path ReviewService::image_path(const PatchId& patch) const {
  const auto it = entries_.find(patch);
  if (it == entries_.end()) throw NotFound("unknown patch: " + patch.str());
  return config_.patches_dir / it->second.file;
}

std::optional<std::string> ReviewService::overlay_png(const PatchId& patch, ClassName c) {
  const fs::path img = image_path(patch);
  if (config_.attn_dir.empty()) return std::nullopt;
  const fs::path map_file = attention_map_path(config_.attn_dir, patch, c);
  {
    std::lock_guard lock(overlay_mutex_);
    const auto it = overlay_cache_.find({patch, c});
    if (it != overlay_cache_.end()) return it->second;
  }
  if (!fs::exists(map_file)) return std::nullopt;
  const AttentionMap map = read_attention_map(map_file);
  Rgb8 raster = read_rgb(img);
  for (int y = 0; y < raster.height; ++y) {
    for (int x = 0; x < raster.width; ++x) {
      const int r = std::min(map.rows - 1, y / map.token_pixels);
      const int col = std::min(map.cols - 1, x / map.token_pixels);
      std::uint8_t* px = &raster.pixels[(static_cast<std::size_t>(y) * raster.width + x) * 3];
      const Rgb mixed = blend({px[0], px[1], px[2]}, attention_color(map.at(r, col)), 0.45);
      px[0] = mixed[0];
      px[1] = mixed[1];
      px[2] = mixed[2];
    }
  }
  const auto bytes = encode_png(raster);
  std::string png(bytes.begin(), bytes.end());
  std::lock_guard lock(overlay_mutex_);
  overlay_cache_[{patch, c}] = png;
  return png;
}

std::string to_json(const std::vector<SheetStats>& stats) {
  ordered_json arr = ordered_json::array();
  for (const auto& s : stats)
    arr.push_back({{"sheet", s.sheet},
                   {"patches", s.patches},
                   {"labels", s.labels},
                   {"coverage", s.coverage},
                   {"human_overrides", s.human_overrides}});
  return arr.dump();
}

std::string to_json(const PatchPage& page) {
  ordered_json items = ordered_json::array();
  for (const auto& v : page.items) {
    ordered_json j{{"patch_id", v.patch.str()}, {"row", v.patch.row}, {"col", v.patch.col},
                   {"image_url", v.image_url}};
    j["label"] = v.label ? ordered_json(*v.label) : ordered_json(nullptr);
    j["source"] = v.source ? ordered_json(std::string(to_string(*v.source))) : ordered_json(nullptr);
    j["reason"] = v.reason;
    j["overlay_url"] = v.has_overlay ? ordered_json("/patches/" + v.patch.str() + "/overlay?class=" +
                                                    std::string(to_string(page.class_name)))
                                     : ordered_json(nullptr);
    items.push_back(std::move(j));
  }
  const std::size_t pages = (page.total + page.page_size - 1) / page.page_size;
  return ordered_json{{"sheet", page.sheet},
                      {"class", to_string(page.class_name)},
                      {"page", page.page},
                      {"page_size", page.page_size},
                      {"total", page.total},
                      {"pages", pages},
                      {"items", items}}
      .dump();
}

std::string to_json(const CoarseLabel& l) {
  ordered_json j{{"patch_id", l.patch.str()},
                 {"class", to_string(l.class_name)},
                 {"present", l.present},
                 {"source", to_string(l.source)}};
  j["reason"] = l.reason ? ordered_json(*l.reason) : ordered_json(nullptr);
  return j.dump();
}

struct ReviewServer::Impl {
  explicit Impl(ReviewConfig config) : service(std::move(config)) {}
  ReviewService service;
  httplib::Server server;
};

namespace {

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(ordered_json{{"error", message}}.dump(), "application/json");
}

int query_int(const httplib::Request& req, const char* key, int fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string v = req.get_param_value(key);
  std::size_t pos = 0;
  int out = 0;
  try {
    out = std::stoi(v, &pos);
  } catch (const std::exception&) {
    throw InvalidArgument(std::string("bad integer for ") + key);
  }
  if (pos != v.size()) throw InvalidArgument(std::string("bad integer for ") + key);
  return out;
}

ClassName query_class(const httplib::Request& req) {
  if (!req.has_param("class")) throw InvalidArgument("missing class parameter");
  return parse_class_name(req.get_param_value("class"));
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const NotFound& e) {
      send_error(res, 404, e.what());
    } catch (const std::invalid_argument& e) {
      send_error(res, 400, e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

PatchId path_patch(const std::string& text) {
  try {
    return PatchId::parse(text);
  } catch (const std::exception&) {
    throw NotFound("unknown patch: " + text);
  }
}

}  // namespace

ReviewServer::ReviewServer(ReviewConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {
  auto& srv = impl_->server;
  auto& svc = impl_->service;
  const std::string origin = svc.config().cors_origin;

  srv.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", origin);
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  srv.Get("/sheets", guarded([&svc](const httplib::Request&, httplib::Response& res) {
            res.set_content(to_json(svc.sheets()), "application/json");
          }));

  srv.Get(R"(/sheets/([^/]+)/patches)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const auto page = svc.patches(req.matches[1], query_class(req), query_int(req, "page", 1),
                                          query_int(req, "page_size", 20));
            res.set_content(to_json(page), "application/json");
          }));

  srv.Post(R"(/patches/([^/]+)/labels/([^/]+))",
           guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const PatchId patch = path_patch(req.matches[1]);
             ClassName c;
             try {
               c = parse_class_name(std::string(req.matches[2]));
             } catch (const std::exception&) {
               throw NotFound("unknown class: " + std::string(req.matches[2]));
             }
             if (!svc.has_patch(patch)) throw NotFound("unknown patch: " + patch.str());
             const json body = json::parse(req.body);
             if (!body.is_object() || !body.contains("present") || !body["present"].is_boolean())
               throw InvalidArgument("body must be {\"present\": true|false}");
             res.set_content(to_json(svc.set_label(patch, c, body["present"].get<bool>())), "application/json");
           }));

  srv.Get("/export/labels", guarded([&svc](const httplib::Request&, httplib::Response& res) {
            res.set_header("Content-Disposition", "attachment; filename=\"labels.jsonl\"");
            res.set_content(svc.export_labels(), "application/x-ndjson");
          }));

  srv.Get(R"(/patches/([^/]+)/image)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const fs::path file = svc.image_path(path_patch(req.matches[1]));
            std::ifstream in(file, std::ios::binary);
            if (!in) throw NotFound("missing image file: " + file.string());
            std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            res.set_header("Cache-Control", "public, max-age=86400, immutable");
            res.set_content(std::move(data), "image/png");
          }));

  srv.Get(R"(/patches/([^/]+)/overlay)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const PatchId patch = path_patch(req.matches[1]);
            const auto png = svc.overlay_png(patch, query_class(req));
            if (!png) throw NotFound("no attention map for " + patch.str());
            res.set_header("Cache-Control", "public, max-age=3600");
            res.set_content(*png, "image/png");
          }));

  srv.Get("/colormap", [](const httplib::Request&, httplib::Response& res) {
    ordered_json stops = ordered_json::array();
    for (const double w : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      const Rgb c = attention_color(w);
      stops.push_back({{"weight", w}, {"rgb", {c[0], c[1], c[2]}}});
    }
    res.set_content(ordered_json{{"stops", stops}}.dump(), "application/json");
  });

  if (!svc.config().ui_dir.empty()) srv.set_mount_point("/ui", svc.config().ui_dir.string());
}

ReviewServer::~ReviewServer() { stop(); }

int ReviewServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw IoError("cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void ReviewServer::listen() { impl_->server.listen_after_bind(); }

void ReviewServer::stop() {
  if (impl_) impl_->server.stop();
}

ReviewService& ReviewServer::service() { return impl_->service; }

}  // namespace attn_distill
