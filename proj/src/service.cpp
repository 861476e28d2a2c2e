#include "ulcerforge/service.hpp"

#include <httplib.h>

#include <random>
#include <thread>

#include "ulcerforge/error.hpp"
#include "ulcerforge/image.hpp"

namespace ulcerforge {

namespace {

HttpReply json_reply(int status, const nlohmann::json& body) { return {status, "application/json", body.dump()}; }

HttpReply error_reply(int status, const std::string& message) { return json_reply(status, {{"error", message}}); }

std::string random_session_id() {
  std::random_device rd;
  char buf[33];
  std::snprintf(buf, sizeof buf, "%08x%08x%08x%08x", rd(), rd(), rd(), rd());
  return buf;
}

}  // namespace

StudyService::StudyService(StudyConfig config, const std::filesystem::path& verdict_log, TTestVariant variant)
    : config_(std::move(config)), store_(verdict_log), variant_(variant) {
  if (config_.admin_token.empty()) throw ConfigError("study: admin_token must be set");
  if (config_.images.empty()) throw ConfigError("study: no images");
  if (config_.images.front().token.empty()) assign_tokens(config_);
  config_.validate();
  for (const auto& img : config_.images) png_by_token_.emplace(img.token, encode_png(read_image(img.file)));
  resolve_verdicts(config_, store_.snapshot());
}

HttpReply StudyService::create_session(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return error_reply(400, "body must be JSON");
  }
  if (!j.is_object() || !j.contains("rater_id") || !j["rater_id"].is_string() ||
      j["rater_id"].get<std::string>().empty()) {
    return error_reply(400, "rater_id (non-empty string) required");
  }
  Session s{j["rater_id"].get<std::string>(), {}};
  s.order = presentation_order(config_, s.rater_id);
  const auto total = s.order.size();
  std::string id;
  {
    std::lock_guard lock(mu_);
    do id = random_session_id();
    while (sessions_.count(id));
    sessions_.emplace(id, std::move(s));
  }
  return json_reply(200, {{"session_id", id}, {"total", total}});
}

HttpReply StudyService::next_image(const std::string& session_id) {
  Session s;
  {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return error_reply(404, "unknown session");
    s = it->second;
  }
  for (std::size_t i = 0; i < s.order.size(); ++i) {
    if (store_.contains(s.rater_id, s.order[i])) continue;
    return json_reply(200, {{"token", s.order[i]},
                            {"image_url", "/img/" + s.order[i]},
                            {"index", i + 1},
                            {"total", s.order.size()}});
  }
  return json_reply(200, {{"done", true}});
}

HttpReply StudyService::submit_verdict(const std::string& session_id, const std::string& body) {
  std::string rater_id;
  {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return error_reply(404, "unknown session");
    rater_id = it->second.rater_id;
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return error_reply(400, "body must be JSON");
  }
  if (!j.is_object() || !j.contains("token") || !j["token"].is_string() || !j.contains("verdict") ||
      !j["verdict"].is_string()) {
    return error_reply(400, "token and verdict required");
  }
  const auto token = j["token"].get<std::string>();
  if (!png_by_token_.count(token)) return error_reply(404, "unknown token");
  Verdict verdict;
  try {
    verdict = parse_verdict(j["verdict"].get<std::string>());
  } catch (const ParseError&) {
    return error_reply(400, "verdict must be one of the two allowed values");
  }
  try {
    store_.append({session_id, rater_id, token, verdict, utc_timestamp()});
  } catch (const ConflictError&) {
    return error_reply(409, "already rated");
  }
  return json_reply(200, {{"accepted", true}});
}

StudyReport StudyService::build_report(bool partial) const {
  const auto records = store_.snapshot();
  const auto verdicts = resolve_verdicts(config_, records);
  ReportOptions opts;
  opts.variant = variant_;
  opts.partial = partial;
  return study_report(config_.truth(), config_.raters_expected, verdicts, opts);
}

HttpReply StudyService::report(const std::string& admin_token) const {
  if (admin_token != config_.admin_token) return error_reply(403, "admin token required");
  return json_reply(200, build_report(true).to_json());
}

HttpReply StudyService::image(const std::string& token) const {
  auto it = png_by_token_.find(token);
  if (it == png_by_token_.end()) return error_reply(404, "unknown token");
  return {200, "image/png", std::string(it->second.begin(), it->second.end())};
}

struct StudyServer::Impl {
  StudyService& service;
  httplib::Server server;
  std::thread thread;
  int port = 0;

  explicit Impl(StudyService& s) : service(s) {
    auto send = [](httplib::Response& res, const HttpReply& r) {
      res.status = r.status;
      res.set_content(r.body, r.content_type);
      res.set_header("Cache-Control", "no-store");
    };
    server.Post("/api/session", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, service.create_session(req.body));
    });
    server.Get(R"(/api/session/([0-9a-f]+)/next)", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, service.next_image(req.matches[1]));
    });
    server.Post(R"(/api/session/([0-9a-f]+)/verdict)",
                [this, send](const httplib::Request& req, httplib::Response& res) {
                  send(res, service.submit_verdict(req.matches[1], req.body));
                });
    server.Get("/api/report", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, service.report(req.get_header_value("X-Admin-Token")));
    });
    server.Get(R"(/img/([0-9a-f]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, service.image(req.matches[1]));
    });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) res.set_content(R"({"error":"not found"})", "application/json");
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const Error& e) {
        msg = std::string(to_string(e.kind()));
      } catch (...) {
      }
      res.status = 500;
      res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    });
  }
};

StudyServer::StudyServer(StudyService& service) : impl_(std::make_unique<Impl>(service)) {}

StudyServer::~StudyServer() { stop(); }

int StudyServer::bind(const std::string& host, int port) {
  if (port == 0) {
    impl_->port = impl_->server.bind_to_any_port(host);
  } else if (impl_->server.bind_to_port(host, port)) {
    impl_->port = port;
  } else {
    impl_->port = -1;
  }
  if (impl_->port < 0) throw IoError("study: cannot bind " + host + ":" + std::to_string(port));
  return impl_->port;
}

void StudyServer::listen() { impl_->server.listen_after_bind(); }

void StudyServer::start() {
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void StudyServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace ulcerforge
