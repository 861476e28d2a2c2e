#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ulcerforge/dataset.hpp"
#include "ulcerforge/stats.hpp"

namespace ulcerforge {

enum class Verdict { Real, Fake };

std::string to_string(Verdict v);
Verdict parse_verdict(const std::string& text);

// A verdict keyed by the study's image id (scoring side).
struct RaterVerdict {
  std::string session_id;
  std::string rater_id;
  std::string image_id;
  Verdict verdict = Verdict::Real;
  std::string timestamp;
};

// A verdict as stored in the log, keyed by the opaque image token.
struct VerdictRecord {
  std::string session_id;
  std::string rater_id;
  std::string token;
  Verdict verdict = Verdict::Real;
  std::string ts;

  nlohmann::json to_json() const;
  static VerdictRecord from_json(const nlohmann::json& j);
};

struct StudyImage {
  std::string image_id;
  Label label = Label::Real;
  std::filesystem::path file;
  std::string token;
};

// Study section of the run configuration.
struct StudySettings {
  std::string manifest;
  int real = 50;
  int synthetic = 50;
  int raters_expected = 3;
  std::uint64_t shuffle_seed = 0;
  std::string admin_token;
  std::string verdict_log = "verdicts.jsonl";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string t_test = "student";

  nlohmann::json to_json() const;
  static StudySettings from_json(const nlohmann::json& j);
};

struct StudyConfig {
  std::vector<StudyImage> images;
  int raters_expected = 3;
  int real_count = 50;
  int synthetic_count = 50;
  std::uint64_t shuffle_seed = 0;
  std::string admin_token;

  int images_total() const { return real_count + synthetic_count; }
  std::map<std::string, Label> truth() const;
  void validate() const;
};

// Picks the first `real` real and first `synthetic` synthetic manifest
// entries and assigns opaque tokens.
StudyConfig build_study(const StudySettings& settings, const DatasetManifest& manifest);

// Deterministic 128-bit hex tokens per (shuffle_seed, image position).
void assign_tokens(StudyConfig& config);

// Token presentation order for one rater, seeded by (shuffle_seed, rater_id).
std::vector<std::string> presentation_order(const StudyConfig& config, const std::string& rater_id);

// Maps stored token verdicts back to image ids; unknown tokens raise NotFoundError.
std::vector<RaterVerdict> resolve_verdicts(const StudyConfig& config, std::span<const VerdictRecord> records);

struct ImageScore {
  std::string image_id;
  Label label = Label::Real;
  int verdicts = 0;
  int correct = 0;
  int marked_real = 0;
};

struct ScoreSummary {
  std::vector<ImageScore> images;    // images with >= 1 verdict, ordered by id
  std::vector<std::string> unrated;  // no verdicts; excluded from aggregates
  std::vector<std::string> incomplete;  // fewer verdicts than raters_expected
  std::size_t verdicts = 0;
  double fraction_marked_real = 0.0;
  double real_accuracy = 0.0;
  double synthetic_accuracy = 0.0;
  double fooling_rate = 0.0;
};

// Per-image count of raters whose verdict matches the ground truth.
ScoreSummary score_ratings(std::span<const RaterVerdict> verdicts, const std::map<std::string, Label>& truth,
                           int raters_expected = 0);

struct ClassSummary {
  std::size_t images = 0;
  double accuracy = 0.0;
  SampleSummary correct;
  SampleSummary marked_real;
  std::vector<std::size_t> correct_histogram;      // images per count 0..raters
  std::vector<std::size_t> marked_real_histogram;  // images per count 0..raters
};

struct StudyReport {
  ScoreSummary scores;
  int raters = 0;
  ClassSummary real;
  ClassSummary synthetic;
  TTestVariant variant = TTestVariant::Student;
  std::optional<TTestResult> t_correct;
  std::optional<TTestResult> t_marked_real;
  std::optional<double> pearson;
  std::size_t pearson_pairs = 0;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  // Tab-separated "class rating images" rows for both histograms.
  std::string histogram_text() const;
};

struct ReportOptions {
  TTestVariant variant = TTestVariant::Student;
  bool partial = false;
  // image_id -> metric value, paired with the per-image correct count.
  const std::map<std::string, double>* metric_series = nullptr;
};

StudyReport study_report(const std::map<std::string, Label>& truth, int raters_expected,
                         std::span<const RaterVerdict> verdicts, const ReportOptions& options = {});

// 50 real + 50 synthetic images rated by 3 raters, constructed so the
// aggregates come out at 77% marked real, 84% / 30% class accuracy and
// marked-real means 2.52 / 2.10.
struct PaperFixture {
  std::map<std::string, Label> truth;
  std::vector<RaterVerdict> verdicts;
  int raters = 3;
};

PaperFixture make_paper_aggregate_fixture();

// Append-only JSON Lines verdict log. Every append is flushed and fsynced
// before returning; at most one verdict per (rater, token).
class VerdictStore {
 public:
  explicit VerdictStore(std::filesystem::path path);
  ~VerdictStore();
  VerdictStore(const VerdictStore&) = delete;
  VerdictStore& operator=(const VerdictStore&) = delete;

  void append(const VerdictRecord& record);
  std::vector<VerdictRecord> snapshot() const;
  bool contains(const std::string& rater_id, const std::string& token) const;
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::FILE* file_ = nullptr;
  mutable std::mutex mu_;
  std::vector<VerdictRecord> records_;
  std::map<std::pair<std::string, std::string>, std::size_t> index_;
};

std::vector<VerdictRecord> read_verdict_log(const std::filesystem::path& path);
void write_verdict_log(const std::filesystem::path& path, std::span<const VerdictRecord> records);

std::string utc_timestamp();

}  // namespace ulcerforge
