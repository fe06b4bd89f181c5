#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "attn_distill/attnmap.hpp"
#include "attn_distill/labels.hpp"
#include "attn_distill/review_api.hpp"
#include "attn_distill/tiler.hpp"
#include "temp_dir.hpp"

// httplib pulls in system headers whose macros break Eigen; keep it last.
#include <httplib.h>

using namespace attn_distill;
using nlohmann::json;
using test_support::TempDir;

namespace {

// One 5x5-tile sheet with llm labels for both classes of every patch.
struct Fixture {
  TempDir dir{"review"};
  ReviewConfig config;

  Fixture() {
    Rgb8 sheet{320, 320, std::vector<std::uint8_t>(320 * 320 * 3, 230)};
    ingest_sheet(sheet, "s", dir / "patches", 64);
    std::vector<LabelRecord> recs;
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 5; ++c)
        for (ClassName cls : kAllClasses)
          recs.push_back({{"s", r, c}, cls, (r + c) % 2 == 0, LabelSource::Llm, "llm says so", false, ""});
    write_labels(dir / "labels.jsonl", recs);
    AttentionMap map{{"s", 0, 0}, ClassName::Wood, 1, 1, {0.9}, 64};
    write_attention_map(attention_map_path(dir / "attn", map.patch, map.class_name), map);
    config.labels_file = dir / "labels.jsonl";
    config.patches_dir = dir / "patches";
    config.attn_dir = dir / "attn";
  }
};

// Server on a free port, torn down with the test.
struct Running {
  ReviewServer server;
  int port;
  std::thread thread;
  httplib::Client client;

  explicit Running(const ReviewConfig& cfg)
      : server(cfg), port(server.bind("127.0.0.1", 0)), thread([this] { server.listen(); }),
        client("127.0.0.1", port) {
    for (int i = 0; i < 200 && !client.Get("/sheets"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ~Running() {
    server.stop();
    thread.join();
  }
};

}  // namespace

TEST_SUITE("review_api") {
  TEST_CASE("sheet stats and override count") {
    Fixture f;
    Running srv(f.config);
    auto res = srv.client.Get("/sheets");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
    auto stats = json::parse(res->body);
    REQUIRE(stats.size() == 1);
    CHECK(stats[0]["sheet"] == "s");
    CHECK(stats[0]["patches"] == 25);
    CHECK(stats[0]["labels"] == 50);
    CHECK(stats[0]["coverage"] == 1.0);
    CHECK(stats[0]["human_overrides"] == 0);

    res = srv.client.Post("/patches/s_0_0/labels/wood", R"({"present":false})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    stats = json::parse(srv.client.Get("/sheets")->body);
    CHECK(stats[0]["labels"] == 50);
    CHECK(stats[0]["human_overrides"] == 1);
  }

  TEST_CASE("empty store lists no sheets") {
    TempDir dir("review");
    std::filesystem::create_directories(dir / "patches");
    ReviewConfig cfg{dir / "labels.jsonl", dir / "patches", {}, {}, "*"};
    ReviewService service(cfg);
    CHECK(service.sheets().empty());
    CHECK(service.export_labels().empty());
  }

  TEST_CASE("pagination is row-major and bounded") {
    Fixture f;
    Running srv(f.config);
    auto res = srv.client.Get("/sheets/s/patches?class=wood&page=2&page_size=20");
    REQUIRE(res);
    CHECK(res->status == 200);
    const auto page = json::parse(res->body);
    CHECK(page["total"] == 25);
    CHECK(page["pages"] == 2);
    REQUIRE(page["items"].size() == 5);
    CHECK(page["items"][0]["patch_id"] == "s_4_0");
    CHECK(page["items"][4]["patch_id"] == "s_4_4");
    CHECK(page["items"][0]["source"] == "llm");
    const auto first = json::parse(srv.client.Get("/sheets/s/patches?class=wood")->body);
    CHECK(first["items"].size() == 20);
    CHECK(first["items"][1]["patch_id"] == "s_0_1");
    CHECK(first["items"][0]["overlay_url"].is_string());
    CHECK(first["items"][1]["overlay_url"].is_null());
    CHECK(srv.client.Get("/sheets/nope/patches?class=wood")->status == 404);
    CHECK(srv.client.Get("/sheets/s/patches?class=wood&page=0")->status == 400);
    CHECK(srv.client.Get("/sheets/s/patches?class=forest")->status == 400);
  }

  TEST_CASE("flips are stored as human labels, keep history and are idempotent") {
    Fixture f;
    {
      Running srv(f.config);
      auto a = srv.client.Post("/patches/s_0_0/labels/wood", R"({"present":false})", "application/json");
      auto b = srv.client.Post("/patches/s_0_0/labels/wood", R"({"present":false})", "application/json");
      REQUIRE(a);
      REQUIRE(b);
      CHECK(a->body == b->body);
      const auto label = json::parse(a->body);
      CHECK(label["present"] == false);
      CHECK(label["source"] == "human");
      const auto hist = srv.server.service().store().history();
      int human = 0, llm = 0;
      for (const auto& r : hist) {
        if (r.patch == PatchId{"s", 0, 0} && r.class_name == ClassName::Wood) {
          (r.source == LabelSource::Human ? human : llm)++;
        }
      }
      CHECK(human == 1);
      CHECK(llm == 1);
      CHECK(srv.client.Post("/patches/s_9_9/labels/wood", R"({"present":true})", "application/json")->status == 404);
      CHECK(srv.client.Post("/patches/s_0_0/labels/forest", R"({"present":true})", "application/json")->status == 404);
      CHECK(srv.client.Post("/patches/s_0_0/labels/wood", R"({"present":"yes"})", "application/json")->status == 400);
      CHECK(srv.client.Post("/patches/s_0_0/labels/wood", "{", "application/json")->status == 400);
    }
    // Acknowledged writes survive a restart without a snapshot.
    CHECK(std::filesystem::exists(f.dir / "labels.jsonl.journal"));
    ReviewService again(f.config);
    const auto eff = again.store().effective({"s", 0, 0}, ClassName::Wood);
    REQUIRE(eff);
    CHECK_FALSE(eff->present);
    CHECK(eff->source == LabelSource::Human);
  }

  TEST_CASE("a torn journal tail is ignored") {
    Fixture f;
    {
      ReviewService service(f.config);
      service.set_label({"s", 1, 1}, ClassName::Settlement, false);
    }
    std::ofstream(f.dir / "labels.jsonl.journal", std::ios::app) << "{\"patch_id\":\"s_2_";
    ReviewService service(f.config);
    CHECK(service.store().effective({"s", 1, 1}, ClassName::Settlement)->source == LabelSource::Human);
  }

  TEST_CASE("export applies overrides and round-trips through the label reader") {
    Fixture f;
    Running srv(f.config);
    srv.client.Post("/patches/s_0_0/labels/wood", R"({"present":false})", "application/json");
    auto res = srv.client.Get("/export/labels");
    REQUIRE(res);
    std::istringstream in(res->body);
    const auto recs = read_labels(in);
    CHECK(recs.size() == 50);
    const auto eff = effective_labels(recs);
    CHECK(eff.size() == 50);
    CHECK(eff.front().patch == PatchId{"s", 0, 0});
    CHECK_FALSE(eff.front().present);
    CHECK(eff.front().source == LabelSource::Human);
  }

  TEST_CASE("snapshot folds the journal into the label file") {
    Fixture f;
    ReviewService service(f.config);
    service.set_label({"s", 0, 1}, ClassName::Wood, true);
    service.store().snapshot();
    CHECK_FALSE(std::filesystem::exists(f.dir / "labels.jsonl.journal"));
    const auto eff = effective_labels(read_labels(f.dir / "labels.jsonl"));
    int human = 0;
    for (const auto& l : eff) human += l.source == LabelSource::Human;
    CHECK(human == 1);
  }

  TEST_CASE("images, overlays and CORS preflight") {
    Fixture f;
    Running srv(f.config);
    auto img = srv.client.Get("/patches/s_0_0/image");
    REQUIRE(img);
    CHECK(img->status == 200);
    CHECK(img->get_header_value("Content-Type") == "image/png");
    CHECK(img->get_header_value("Cache-Control").find("max-age") != std::string::npos);
    CHECK(img->body.substr(1, 3) == "PNG");
    CHECK(srv.client.Get("/patches/s_9_9/image")->status == 404);
    auto ov = srv.client.Get("/patches/s_0_0/overlay?class=wood");
    REQUIRE(ov);
    CHECK(ov->status == 200);
    CHECK(ov->body.substr(1, 3) == "PNG");
    CHECK(srv.client.Get("/patches/s_0_1/overlay?class=wood")->status == 404);
    auto pre = srv.client.Options("/patches/s_0_0/labels/wood");
    REQUIRE(pre);
    CHECK(pre->status == 204);
    CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
    CHECK(srv.client.Get("/colormap")->status == 200);
  }
}
