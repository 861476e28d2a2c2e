#include <gtest/gtest.h>
#include <httplib.h>

#include <filesystem>
#include <nlohmann/json.hpp>
#include <set>

#include "ulcerforge/error.hpp"
#include "ulcerforge/image.hpp"
#include "ulcerforge/service.hpp"

using namespace ulcerforge;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Fixture {
  fs::path dir;
  StudyConfig config;
};

// 50 real + 50 synthetic PNGs whose file names carry the label.
Fixture make_fixture(const std::string& name, int per_class = 50) {
  Fixture f;
  f.dir = fs::temp_directory_path() / ("ulcerforge-service-" + name);
  fs::remove_all(f.dir);
  fs::create_directories(f.dir);
  DatasetManifest m;
  m.base_dir = f.dir;
  for (int i = 0; i < 2 * per_class; ++i) {
    const bool real = i < per_class;
    const std::string file = std::string(real ? "real_" : "synthetic_") + std::to_string(i) + ".png";
    write_image(f.dir / file, ImageBuffer(4, 4, 3, static_cast<std::uint8_t>(i)));
    m.entries.push_back({file, 4, 4, real ? Label::Real : Label::Synthetic, {}, 0, false});
  }
  StudySettings s;
  s.real = per_class;
  s.synthetic = per_class;
  s.shuffle_seed = 17;
  s.admin_token = "secret-admin";
  f.config = build_study(s, m);
  return f;
}

// Every rater-facing body recorded during a session, for the blinding audit.
struct Transcript {
  std::vector<std::string> bodies;
  void audit(const StudyConfig& c) const {
    std::vector<std::string> forbidden{"real", "synthetic", "label", "fake", ".png", "secret-admin"};
    for (const auto& img : c.images) {
      forbidden.push_back(img.image_id);
      forbidden.push_back(img.file.string());
    }
    for (const auto& body : bodies)
      for (const auto& word : forbidden) ASSERT_EQ(body.find(word), std::string::npos) << word << " in " << body;
  }
};

}  // namespace

TEST(Service, FullSessionStoresOneVerdictPerImage) {
  auto f = make_fixture("full");
  StudyService svc(f.config, f.dir / "verdicts.jsonl");
  Transcript tr;
  auto created = svc.create_session(R"({"rater_id":"alice"})");
  ASSERT_EQ(created.status, 200);
  tr.bodies.push_back(created.body);
  const std::string sid = json::parse(created.body)["session_id"];
  EXPECT_EQ(json::parse(created.body)["total"], 100);

  std::vector<std::string> seen;
  for (int i = 1; i <= 100; ++i) {
    auto next = svc.next_image(sid);
    ASSERT_EQ(next.status, 200);
    tr.bodies.push_back(next.body);
    const auto j = json::parse(next.body);
    EXPECT_EQ(j["index"], i);
    EXPECT_EQ(j["total"], 100);
    const std::string token = j["token"];
    EXPECT_EQ(j["image_url"], "/img/" + token);
    seen.push_back(token);
    auto img = svc.image(token);
    EXPECT_EQ(img.content_type, "image/png");
    tr.bodies.push_back(img.body);
    auto ok = svc.submit_verdict(sid, json{{"token", token}, {"verdict", i % 3 ? "real" : "fake"}}.dump());
    ASSERT_EQ(ok.status, 200) << ok.body;
    tr.bodies.push_back(ok.body);
  }
  auto done = svc.next_image(sid);
  tr.bodies.push_back(done.body);
  EXPECT_EQ(json::parse(done.body)["done"], true);
  EXPECT_EQ(svc.store().size(), 100u);
  EXPECT_EQ(std::set<std::string>(seen.begin(), seen.end()).size(), 100u);
  EXPECT_EQ(seen, presentation_order(svc.config(), "alice"));
  tr.audit(svc.config());

  const auto report = svc.report("secret-admin");
  ASSERT_EQ(report.status, 200);
  EXPECT_EQ(json::parse(report.body)["verdicts"], 100);
}

TEST(Service, ErrorStatuses) {
  auto f = make_fixture("errors", 3);
  StudyService svc(f.config, f.dir / "verdicts.jsonl");
  Transcript tr;
  EXPECT_EQ(svc.create_session("{}").status, 400);
  EXPECT_EQ(svc.create_session("nope").status, 400);
  EXPECT_EQ(svc.next_image("deadbeef").status, 404);
  EXPECT_EQ(svc.submit_verdict("deadbeef", R"({"token":"00","verdict":"real"})").status, 404);
  const std::string sid = json::parse(svc.create_session(R"({"rater_id":"bob"})").body)["session_id"];
  const std::string token = json::parse(svc.next_image(sid).body)["token"];
  for (const auto& r : {svc.submit_verdict(sid, R"({"token":"abc123","verdict":"real"})"),
                        svc.submit_verdict(sid, json{{"token", token}, {"verdict", "maybe"}}.dump())}) {
    EXPECT_TRUE(r.status == 404 || r.status == 400);
    tr.bodies.push_back(r.body);
  }
  EXPECT_EQ(svc.submit_verdict(sid, json{{"token", token}, {"verdict", "fake"}}.dump()).status, 200);
  const auto again = svc.submit_verdict(sid, json{{"token", token}, {"verdict", "real"}}.dump());
  EXPECT_EQ(again.status, 409);
  tr.bodies.push_back(again.body);
  EXPECT_EQ(svc.report("wrong").status, 403);
  EXPECT_EQ(svc.image("ffff").status, 404);
  EXPECT_EQ(svc.store().size(), 1u);
  tr.audit(svc.config());
}

TEST(Service, SameRaterNewSessionCannotRateTwice) {
  auto f = make_fixture("twice", 2);
  StudyService svc(f.config, f.dir / "verdicts.jsonl");
  const std::string s1 = json::parse(svc.create_session(R"({"rater_id":"carol"})").body)["session_id"];
  const std::string token = json::parse(svc.next_image(s1).body)["token"];
  ASSERT_EQ(svc.submit_verdict(s1, json{{"token", token}, {"verdict", "real"}}.dump()).status, 200);
  const std::string s2 = json::parse(svc.create_session(R"({"rater_id":"carol"})").body)["session_id"];
  EXPECT_NE(s1, s2);
  EXPECT_NE(json::parse(svc.next_image(s2).body)["token"], token);
  EXPECT_EQ(svc.submit_verdict(s2, json{{"token", token}, {"verdict", "fake"}}.dump()).status, 409);
}

TEST(Service, RequiresAdminToken) {
  auto f = make_fixture("admin", 1);
  f.config.admin_token.clear();
  EXPECT_THROW(StudyService(f.config, f.dir / "v.jsonl"), ConfigError);
}

TEST(Service, ReloadsExistingLog) {
  auto f = make_fixture("reload", 2);
  {
    StudyService svc(f.config, f.dir / "verdicts.jsonl");
    const std::string sid = json::parse(svc.create_session(R"({"rater_id":"dana"})").body)["session_id"];
    const std::string token = json::parse(svc.next_image(sid).body)["token"];
    svc.submit_verdict(sid, json{{"token", token}, {"verdict", "real"}}.dump());
  }
  StudyService svc(f.config, f.dir / "verdicts.jsonl");
  EXPECT_EQ(svc.store().size(), 1u);
  const std::string sid = json::parse(svc.create_session(R"({"rater_id":"dana"})").body)["session_id"];
  EXPECT_EQ(json::parse(svc.next_image(sid).body)["index"], 2);
}

TEST(Server, HttpProtocolEndToEnd) {
  auto f = make_fixture("http", 5);
  StudyService svc(f.config, f.dir / "verdicts.jsonl");
  StudyServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  server.start();
  httplib::Client cli("127.0.0.1", port);
  Transcript tr;

  auto created = cli.Post("/api/session", R"({"rater_id":"erin"})", "application/json");
  ASSERT_TRUE(created);
  ASSERT_EQ(created->status, 200);
  tr.bodies.push_back(created->body);
  const std::string sid = json::parse(created->body)["session_id"];
  for (int i = 0; i < 10; ++i) {
    auto next = cli.Get("/api/session/" + sid + "/next");
    ASSERT_TRUE(next);
    tr.bodies.push_back(next->body);
    const auto j = json::parse(next->body);
    const std::string url = j["image_url"];
    auto img = cli.Get(url);
    ASSERT_EQ(img->status, 200);
    EXPECT_EQ(img->get_header_value("Content-Type"), "image/png");
    EXPECT_EQ(img->get_header_value("Cache-Control"), "no-store");
    EXPECT_EQ(decode_png({img->body.begin(), img->body.end()}).width, 4);
    tr.bodies.push_back(img->body);
    auto post = cli.Post("/api/session/" + sid + "/verdict", json{{"token", j["token"]}, {"verdict", "real"}}.dump(),
                         "application/json");
    ASSERT_EQ(post->status, 200);
    tr.bodies.push_back(post->body);
  }
  auto done = cli.Get("/api/session/" + sid + "/next");
  EXPECT_EQ(json::parse(done->body)["done"], true);
  auto missing = cli.Get("/api/session/00ff/next");
  EXPECT_EQ(missing->status, 404);
  tr.bodies.push_back(missing->body);

  EXPECT_EQ(cli.Get("/api/report")->status, 403);
  auto report = cli.Get("/api/report", {{"X-Admin-Token", "secret-admin"}});
  ASSERT_EQ(report->status, 200);
  const auto rj = json::parse(report->body);
  EXPECT_EQ(rj["verdicts"], 10);
  EXPECT_DOUBLE_EQ(rj["fraction_marked_real"].get<double>(), 1.0);
  server.stop();
  EXPECT_EQ(svc.store().size(), 10u);
  tr.audit(svc.config());
}
