#include "ulcerforge/study.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "ulcerforge/error.hpp"
#include "ulcerforge/rng.hpp"

namespace ulcerforge {

std::string to_string(Verdict v) { return v == Verdict::Real ? "real" : "fake"; }

Verdict parse_verdict(const std::string& text) {
  if (text == "real") return Verdict::Real;
  if (text == "fake") return Verdict::Fake;
  throw ParseError("verdict must be \"real\" or \"fake\", got \"" + text + "\"");
}

nlohmann::json VerdictRecord::to_json() const {
  return {{"session_id", session_id}, {"rater_id", rater_id}, {"token", token}, {"verdict", to_string(verdict)},
          {"ts", ts}};
}

VerdictRecord VerdictRecord::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"session_id", "rater_id", "token", "verdict", "ts"};
  if (!j.is_object()) throw ParseError("verdict record must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ParseError("verdict record: unknown key '" + key + "'");
  try {
    VerdictRecord r;
    r.session_id = j.at("session_id").get<std::string>();
    r.rater_id = j.at("rater_id").get<std::string>();
    r.token = j.at("token").get<std::string>();
    r.verdict = parse_verdict(j.at("verdict").get<std::string>());
    r.ts = j.at("ts").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("verdict record: ") + e.what());
  }
}

nlohmann::json StudySettings::to_json() const {
  return {{"manifest", manifest},         {"real", real},
          {"synthetic", synthetic},       {"raters_expected", raters_expected},
          {"shuffle_seed", shuffle_seed}, {"admin_token", admin_token},
          {"verdict_log", verdict_log},   {"host", host},
          {"port", port},                 {"t_test", t_test}};
}

StudySettings StudySettings::from_json(const nlohmann::json& j) {
  StudySettings s;
  if (!j.is_object()) throw ConfigError("study: expected an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "manifest") s.manifest = value.get<std::string>();
      else if (key == "real") s.real = value.get<int>();
      else if (key == "synthetic") s.synthetic = value.get<int>();
      else if (key == "raters_expected") s.raters_expected = value.get<int>();
      else if (key == "shuffle_seed") s.shuffle_seed = value.get<std::uint64_t>();
      else if (key == "admin_token") s.admin_token = value.get<std::string>();
      else if (key == "verdict_log") s.verdict_log = value.get<std::string>();
      else if (key == "host") s.host = value.get<std::string>();
      else if (key == "port") s.port = value.get<int>();
      else if (key == "t_test") s.t_test = value.get<std::string>();
      else throw ConfigError("study: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("study." + key + ": wrong type");
    }
  }
  if (s.real < 0 || s.synthetic < 0) throw ConfigError("study: real/synthetic counts must be >= 0");
  if (s.raters_expected < 1) throw ConfigError("study.raters_expected must be >= 1");
  if (s.port < 0 || s.port > 65535) throw ConfigError("study.port out of range");
  parse_t_variant(s.t_test);
  return s;
}

std::map<std::string, Label> StudyConfig::truth() const {
  std::map<std::string, Label> out;
  for (const auto& img : images) out.emplace(img.image_id, img.label);
  return out;
}

void StudyConfig::validate() const {
  if (static_cast<int>(images.size()) != images_total()) {
    throw ConfigError("study: " + std::to_string(images.size()) + " images but split sums to " +
                      std::to_string(images_total()));
  }
  int real = 0;
  std::set<std::string> ids, tokens;
  for (const auto& img : images) {
    if (!ids.insert(img.image_id).second) throw ConfigError("study: duplicate image id " + img.image_id);
    if (!img.token.empty() && !tokens.insert(img.token).second) throw ConfigError("study: duplicate token");
    if (img.label == Label::Real) ++real;
  }
  if (real != real_count) {
    throw ConfigError("study: " + std::to_string(real) + " real images, split says " + std::to_string(real_count));
  }
  if (raters_expected < 1) throw ConfigError("study: raters_expected must be >= 1");
}

void assign_tokens(StudyConfig& config) {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < config.images.size(); ++i) {
    Rng rng(config.shuffle_seed, "image-token", i);
    char buf[33];
    std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(rng.next_u64()),
                  static_cast<unsigned long long>(rng.next_u64()));
    if (!seen.insert(buf).second) throw ConfigError("study: token collision, choose another shuffle_seed");
    config.images[i].token = buf;
  }
}

StudyConfig build_study(const StudySettings& settings, const DatasetManifest& manifest) {
  StudyConfig config;
  config.raters_expected = settings.raters_expected;
  config.real_count = settings.real;
  config.synthetic_count = settings.synthetic;
  config.shuffle_seed = settings.shuffle_seed;
  config.admin_token = settings.admin_token;
  int real = 0, synthetic = 0;
  for (const auto& e : manifest.entries) {
    int& taken = e.label == Label::Real ? real : synthetic;
    const int wanted = e.label == Label::Real ? settings.real : settings.synthetic;
    if (taken >= wanted) continue;
    if (e.missing) throw IoError("study: image file missing: " + e.path);
    config.images.push_back({e.path, e.label, manifest.resolve(e), {}});
    ++taken;
  }
  if (real < settings.real || synthetic < settings.synthetic) {
    throw ConfigError("study: manifest has " + std::to_string(real) + " real and " + std::to_string(synthetic) +
                      " synthetic images, need " + std::to_string(settings.real) + " and " +
                      std::to_string(settings.synthetic));
  }
  assign_tokens(config);
  config.validate();
  return config;
}

std::vector<std::string> presentation_order(const StudyConfig& config, const std::string& rater_id) {
  std::vector<std::string> order;
  order.reserve(config.images.size());
  for (const auto& img : config.images) order.push_back(img.token);
  std::sort(order.begin(), order.end());
  Rng rng(config.shuffle_seed, "order:" + rater_id);
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<RaterVerdict> resolve_verdicts(const StudyConfig& config, std::span<const VerdictRecord> records) {
  std::map<std::string, std::string> by_token;
  for (const auto& img : config.images) by_token.emplace(img.token, img.image_id);
  std::vector<RaterVerdict> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    auto it = by_token.find(r.token);
    if (it == by_token.end()) throw NotFoundError("verdict log references unknown token " + r.token);
    out.push_back({r.session_id, r.rater_id, it->second, r.verdict, r.ts});
  }
  return out;
}

ScoreSummary score_ratings(std::span<const RaterVerdict> verdicts, const std::map<std::string, Label>& truth,
                           int raters_expected) {
  std::map<std::string, ImageScore> scores;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& v : verdicts) {
    auto it = truth.find(v.image_id);
    if (it == truth.end()) throw NotFoundError("verdict references unknown image " + v.image_id);
    if (!seen.emplace(v.rater_id, v.image_id).second) {
      throw ConflictError("rater " + v.rater_id + " has more than one verdict for image " + v.image_id);
    }
    auto& s = scores[v.image_id];
    s.image_id = v.image_id;
    s.label = it->second;
    ++s.verdicts;
    const bool said_real = v.verdict == Verdict::Real;
    if (said_real) ++s.marked_real;
    if (said_real == (it->second == Label::Real)) ++s.correct;
  }
  ScoreSummary out;
  out.verdicts = verdicts.size();
  std::size_t marked = 0, real_verdicts = 0, real_correct = 0, syn_verdicts = 0, syn_correct = 0;
  for (const auto& [id, label] : truth) {
    auto it = scores.find(id);
    if (it == scores.end()) {
      out.unrated.push_back(id);
      continue;
    }
    const auto& s = it->second;
    if (raters_expected > 0 && s.verdicts < raters_expected) out.incomplete.push_back(id);
    marked += static_cast<std::size_t>(s.marked_real);
    if (label == Label::Real) {
      real_verdicts += static_cast<std::size_t>(s.verdicts);
      real_correct += static_cast<std::size_t>(s.correct);
    } else {
      syn_verdicts += static_cast<std::size_t>(s.verdicts);
      syn_correct += static_cast<std::size_t>(s.correct);
    }
    out.images.push_back(s);
  }
  auto ratio = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  out.fraction_marked_real = ratio(marked, out.verdicts);
  out.real_accuracy = ratio(real_correct, real_verdicts);
  out.synthetic_accuracy = ratio(syn_correct, syn_verdicts);
  out.fooling_rate = ratio(syn_verdicts - syn_correct, syn_verdicts);
  return out;
}

namespace {

nlohmann::json summary_json(const SampleSummary& s) {
  return {{"mean", s.mean}, {"sd", s.sd_population}, {"sd_sample", s.sd}, {"n", s.n}};
}

nlohmann::json class_json(const ClassSummary& c) {
  return {{"images", c.images},
          {"accuracy", c.accuracy},
          {"correct", summary_json(c.correct)},
          {"marked_real", summary_json(c.marked_real)},
          {"correct_histogram", c.correct_histogram},
          {"marked_real_histogram", c.marked_real_histogram}};
}

nlohmann::json t_json(const std::optional<TTestResult>& t) {
  if (!t) return nullptr;
  return {{"t", t->t}, {"df", std::isnan(t->df) ? nlohmann::json(nullptr) : nlohmann::json(t->df)}, {"p", t->p}};
}

}  // namespace

nlohmann::json StudyReport::to_json() const {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : scores.images) {
    images.push_back({{"image_id", s.image_id},
                      {"label", to_string(s.label)},
                      {"verdicts", s.verdicts},
                      {"correct", s.correct},
                      {"marked_real", s.marked_real}});
  }
  return {{"raters", raters},
          {"images_scored", scores.images.size()},
          {"verdicts", scores.verdicts},
          {"unrated", scores.unrated},
          {"incomplete", scores.incomplete},
          {"fraction_marked_real", scores.fraction_marked_real},
          {"real_accuracy", scores.real_accuracy},
          {"synthetic_accuracy", scores.synthetic_accuracy},
          {"fooling_rate", scores.fooling_rate},
          {"classes", {{"real", class_json(real)}, {"synthetic", class_json(synthetic)}}},
          {"t_test",
           {{"variant", to_string(variant)}, {"correct", t_json(t_correct)}, {"marked_real", t_json(t_marked_real)}}},
          {"pearson", pearson ? nlohmann::json{{"r", *pearson}, {"pairs", pearson_pairs}} : nlohmann::json(nullptr)},
          {"warnings", warnings},
          {"images", images}};
}

std::string StudyReport::histogram_text() const {
  std::ostringstream out;
  out << "series\tclass\trating\timages\n";
  auto emit = [&](const char* series, const char* cls, const std::vector<std::size_t>& h) {
    for (std::size_t r = 0; r < h.size(); ++r) out << series << '\t' << cls << '\t' << r << '\t' << h[r] << '\n';
  };
  emit("correct", "real", real.correct_histogram);
  emit("correct", "synthetic", synthetic.correct_histogram);
  emit("marked_real", "real", real.marked_real_histogram);
  emit("marked_real", "synthetic", synthetic.marked_real_histogram);
  return out.str();
}

StudyReport study_report(const std::map<std::string, Label>& truth, int raters_expected,
                         std::span<const RaterVerdict> verdicts, const ReportOptions& options) {
  StudyReport report;
  report.variant = options.variant;
  report.scores = score_ratings(verdicts, truth, raters_expected);
  const auto& sc = report.scores;
  if (!options.partial && (!sc.unrated.empty() || !sc.incomplete.empty())) {
    throw ConfigError("study incomplete: " + std::to_string(sc.unrated.size()) + " images unrated, " +
                      std::to_string(sc.incomplete.size()) + " with fewer than " +
                      std::to_string(raters_expected) + " verdicts; request a partial report");
  }
  int raters = raters_expected;
  for (const auto& s : sc.images) raters = std::max(raters, s.verdicts);
  report.raters = raters;

  auto build = [&](Label label, ClassSummary& c, std::vector<double>& correct, std::vector<double>& marked) {
    c.correct_histogram.assign(static_cast<std::size_t>(raters) + 1, 0);
    c.marked_real_histogram.assign(static_cast<std::size_t>(raters) + 1, 0);
    std::size_t verdict_total = 0, correct_total = 0;
    for (const auto& s : sc.images) {
      if (s.label != label) continue;
      ++c.images;
      correct.push_back(s.correct);
      marked.push_back(s.marked_real);
      ++c.correct_histogram[static_cast<std::size_t>(s.correct)];
      ++c.marked_real_histogram[static_cast<std::size_t>(s.marked_real)];
      verdict_total += static_cast<std::size_t>(s.verdicts);
      correct_total += static_cast<std::size_t>(s.correct);
    }
    c.accuracy = verdict_total ? static_cast<double>(correct_total) / static_cast<double>(verdict_total) : 0.0;
    c.correct = summarize(correct);
    c.marked_real = summarize(marked);
  };
  std::vector<double> real_correct, real_marked, syn_correct, syn_marked;
  build(Label::Real, report.real, real_correct, real_marked);
  build(Label::Synthetic, report.synthetic, syn_correct, syn_marked);

  if (report.real.images < 2 || report.synthetic.images < 2) {
    report.warnings.push_back("fewer than 2 rated images in a class; t-tests omitted");
  } else {
    auto run = [&](const char* name, const std::vector<double>& a, const std::vector<double>& b,
                   std::optional<TTestResult>& slot) {
      try {
        slot = t_test_samples(a, b, options.variant);
      } catch (const Error& e) {
        report.warnings.push_back(std::string("t-test on ") + name + " omitted: " + e.what());
      }
    };
    run("correct counts", real_correct, syn_correct, report.t_correct);
    run("marked-real counts", real_marked, syn_marked, report.t_marked_real);
  }

  if (options.metric_series) {
    std::vector<double> xs, ys;
    for (const auto& s : sc.images) {
      auto it = options.metric_series->find(s.image_id);
      if (it == options.metric_series->end()) continue;
      xs.push_back(it->second);
      ys.push_back(s.correct);
    }
    report.pearson_pairs = xs.size();
    try {
      report.pearson = pearson_r(xs, ys);
    } catch (const Error& e) {
      report.warnings.push_back(std::string("pearson omitted: ") + e.what());
    }
  }
  return report;
}

PaperFixture make_paper_aggregate_fixture() {
  // Images per marked-real count 0..3.
  constexpr int kRealHist[4] = {1, 3, 15, 31};
  constexpr int kSyntheticHist[4] = {2, 11, 17, 20};
  PaperFixture f;
  f.raters = 3;
  int index = 0;
  auto add_class = [&](Label label, const int (&hist)[4]) {
    for (int marked = 0; marked < 4; ++marked) {
      for (int k = 0; k < hist[marked]; ++k, ++index) {
        char id[16];
        std::snprintf(id, sizeof id, "img-%03d", index);
        f.truth.emplace(id, label);
        for (int j = 0; j < f.raters; ++j) {
          const int rater = (index + j) % f.raters;
          const std::string rid = "rater-" + std::to_string(rater + 1);
          f.verdicts.push_back({"session-" + rid, rid, id, j < marked ? Verdict::Real : Verdict::Fake,
                                "2024-01-01T00:00:00.000Z"});
        }
      }
    }
  };
  add_class(Label::Real, kRealHist);
  add_class(Label::Synthetic, kSyntheticHist);
  return f;
}

std::vector<VerdictRecord> read_verdict_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read verdict log " + path.string());
  std::vector<VerdictRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(VerdictRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_verdict_log(const std::filesystem::path& path, std::span<const VerdictRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write verdict log " + path.string());
  for (const auto& r : records) out << r.to_json().dump() << '\n';
}

VerdictStore::VerdictStore(std::filesystem::path path) : path_(std::move(path)) {
  if (std::filesystem::exists(path_)) {
    records_ = read_verdict_log(path_);
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (!index_.emplace(std::make_pair(records_[i].rater_id, records_[i].token), i).second) {
        throw ParseError(path_.string() + ": duplicate verdict for rater " + records_[i].rater_id);
      }
    }
  }
  file_ = std::fopen(path_.c_str(), "a");
  if (!file_) throw IoError("cannot open verdict log " + path_.string() + " for appending");
}

VerdictStore::~VerdictStore() {
  if (file_) std::fclose(file_);
}

void VerdictStore::append(const VerdictRecord& record) {
  std::lock_guard lock(mu_);
  const auto key = std::make_pair(record.rater_id, record.token);
  if (index_.count(key)) throw ConflictError("verdict already recorded for this rater and image");
  const std::string line = record.to_json().dump() + "\n";
  if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0 ||
      ::fsync(::fileno(file_)) != 0) {
    throw IoError("failed to append to verdict log " + path_.string());
  }
  index_.emplace(key, records_.size());
  records_.push_back(record);
}

std::vector<VerdictRecord> VerdictStore::snapshot() const {
  std::lock_guard lock(mu_);
  return records_;
}

bool VerdictStore::contains(const std::string& rater_id, const std::string& token) const {
  std::lock_guard lock(mu_);
  return index_.count({rater_id, token}) > 0;
}

std::size_t VerdictStore::size() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t secs = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

}  // namespace ulcerforge
