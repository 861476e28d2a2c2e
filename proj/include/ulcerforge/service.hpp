#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "ulcerforge/study.hpp"

namespace ulcerforge {

struct HttpReply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

// Session protocol handlers, independent of the transport. Rater-facing
// replies carry only opaque tokens, positions and counts.
class StudyService {
 public:
  StudyService(StudyConfig config, const std::filesystem::path& verdict_log,
               TTestVariant variant = TTestVariant::Student);

  HttpReply create_session(const std::string& body);
  HttpReply next_image(const std::string& session_id);
  HttpReply submit_verdict(const std::string& session_id, const std::string& body);
  HttpReply report(const std::string& admin_token) const;
  HttpReply image(const std::string& token) const;

  StudyReport build_report(bool partial = true) const;
  const StudyConfig& config() const { return config_; }
  const VerdictStore& store() const { return store_; }

 private:
  struct Session {
    std::string rater_id;
    std::vector<std::string> order;
  };

  StudyConfig config_;
  VerdictStore store_;
  TTestVariant variant_;
  std::map<std::string, std::vector<std::uint8_t>> png_by_token_;
  mutable std::mutex mu_;
  std::map<std::string, Session> sessions_;
};

// HTTP front end on cpp-httplib.
class StudyServer {
 public:
  explicit StudyServer(StudyService& service);
  ~StudyServer();

  // Binds host:port (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  // Serves on the calling thread until stop().
  void listen();
  // Serves on a background thread.
  void start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ulcerforge
