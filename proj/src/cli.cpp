#include "ulcerforge/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>

#include "ulcerforge/checkpoint.hpp"
#include "ulcerforge/config.hpp"
#include "ulcerforge/dataset.hpp"
#include "ulcerforge/error.hpp"
#include "ulcerforge/gradcheck.hpp"
#include "ulcerforge/metrics.hpp"
#include "ulcerforge/service.hpp"
#include "ulcerforge/stats.hpp"
#include "ulcerforge/study.hpp"
#include "ulcerforge/train.hpp"

namespace ulcerforge {

namespace fs = std::filesystem;

namespace {

struct Context {
  RunConfig config;
  fs::path out_dir;
  std::vector<std::string> args;
  bool env_seed = false;
  std::ostream* out = nullptr;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

void write_run_json(const Context& ctx) {
  fs::create_directories(ctx.out_dir);
  nlohmann::json seeds{{"train", ctx.config.train.seed},
                       {"sample", ctx.config.sample.seed},
                       {"metrics", ctx.config.metrics.seed},
                       {"study_shuffle", ctx.config.study.shuffle_seed},
                       {"from_env", ctx.env_seed}};
  write_json(ctx.out_dir / "run.json",
             {{"version", std::string(version())}, {"command", ctx.args}, {"config", ctx.config.to_json()}, {"seeds", seeds}});
}

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

struct ImageSet {
  Tensor images;
  std::vector<std::string> ids;
};

// "blobs:N[:SEED]", a manifest (.jsonl) or a directory of images.
ImageSet load_image_set(const std::string& spec, const UNetConfig& model) {
  ImageSet set;
  if (spec.rfind("blobs:", 0) == 0) {
    std::size_t n = 0;
    unsigned long long seed = 0;
    char tail = 0;
    const int got = std::sscanf(spec.c_str() + 6, "%zu:%llu%c", &n, &seed, &tail);
    if (got < 1 || got > 2 || n == 0) throw UsageError("data spec must be blobs:N or blobs:N:SEED, got " + spec);
    if (model.in_channels != 1) throw ConfigError("blob dataset is single-channel; model.in_channels must be 1");
    set.images = make_blob_dataset(n, model.image_size, seed);
    for (std::size_t i = 0; i < n; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "blob-%05zu", i);
      set.ids.push_back(id);
    }
    return set;
  }
  const fs::path path(spec);
  DatasetManifest manifest;
  if (fs::is_directory(path)) {
    manifest.base_dir = path;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path)) {
      const auto ext = lower_ext(e.path());
      if (ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      ManifestEntry entry;
      entry.path = f.filename().string();
      manifest.entries.push_back(entry);
    }
  } else {
    auto loaded = load_manifest(path);
    if (!loaded.report.missing_files.empty()) {
      throw IoError("manifest " + spec + " lists missing files, first: " + loaded.report.missing_files.front());
    }
    manifest = std::move(loaded.manifest);
  }
  set.images = load_dataset_tensor(manifest, model.image_size, model.in_channels);
  for (const auto& e : manifest.entries) set.ids.push_back(e.path);
  return set;
}

int cmd_dataset_validate(Context& ctx, const std::string& manifest_path, bool check_files) {
  auto loaded = load_manifest(manifest_path, check_files);
  const auto j = loaded.report.to_json();
  write_json(ctx.out_dir / "validation.json", j);
  *ctx.out << j.dump(2) << "\n";
  return 0;
}

int cmd_dataset_crop(Context& ctx, const std::string& manifest_path, int size, const std::string& dest_arg) {
  auto loaded = load_manifest(manifest_path);
  const fs::path dest = dest_arg.empty() ? ctx.out_dir / "crops" : fs::path(dest_arg);
  fs::create_directories(dest);
  DatasetManifest cropped;
  cropped.base_dir = dest;
  std::size_t index = 0;
  for (const auto& e : loaded.manifest.entries) {
    if (e.missing) continue;
    const ImageBuffer img = read_image(loaded.manifest.resolve(e));
    int cx = img.width / 2, cy = img.height / 2;
    if (!e.wounds.empty()) {
      cx = static_cast<int>(std::lround(e.wounds.front().cx));
      cy = static_cast<int>(std::lround(e.wounds.front().cy));
    }
    const auto [x0, y0] = crop_origin(img.width, img.height, cx, cy, size);
    char name[64];
    std::snprintf(name, sizeof name, "%05zu_", index++);
    ManifestEntry out;
    out.path = name + fs::path(e.path).stem().string() + ".png";
    out.width = out.height = size;
    out.label = e.label;
    for (const auto& b : e.wounds) {
      const double bx0 = std::clamp(b.cx - b.w / 2 - x0, 0.0, static_cast<double>(size));
      const double bx1 = std::clamp(b.cx + b.w / 2 - x0, 0.0, static_cast<double>(size));
      const double by0 = std::clamp(b.cy - b.h / 2 - y0, 0.0, static_cast<double>(size));
      const double by1 = std::clamp(b.cy + b.h / 2 - y0, 0.0, static_cast<double>(size));
      if (bx1 > bx0 && by1 > by0) out.wounds.push_back({(bx0 + bx1) / 2, (by0 + by1) / 2, bx1 - bx0, by1 - by0});
    }
    write_image(dest / out.path, crop_centered(img, cx, cy, size));
    cropped.entries.push_back(out);
  }
  write_manifest(dest / "manifest.jsonl", cropped);
  *ctx.out << "cropped " << cropped.entries.size() << " images to " << (dest / "manifest.jsonl").string() << "\n";
  return 0;
}

int cmd_dataset_blobs(Context& ctx, std::size_t count, int size, std::uint64_t seed, const std::string& dest_arg) {
  const fs::path dest = dest_arg.empty() ? ctx.out_dir / "blobs" : fs::path(dest_arg);
  fs::create_directories(dest);
  const Tensor blobs = make_blob_dataset(count, size, seed);
  DatasetManifest manifest;
  manifest.base_dir = dest;
  const auto s = static_cast<std::size_t>(size);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<float> v(blobs.data().begin() + static_cast<std::ptrdiff_t>(i * s * s),
                         blobs.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * s * s));
    char name[32];
    std::snprintf(name, sizeof name, "blob_%05zu.png", i);
    write_image(dest / name, from_model_tensor(Tensor({1, s, s}, std::move(v))));
    ManifestEntry e;
    e.path = name;
    e.width = e.height = size;
    manifest.entries.push_back(e);
  }
  write_manifest(dest / "manifest.jsonl", manifest);
  *ctx.out << "wrote " << count << " blob images to " << (dest / "manifest.jsonl").string() << "\n";
  return 0;
}

int cmd_train(Context& ctx, const std::string& data, bool resume, std::int64_t stop_after) {
  const auto& cfg = ctx.config;
  const ImageSet set = load_image_set(data, cfg.model);
  const NoiseSchedule schedule = build_linear_schedule(cfg.schedule);
  FitOptions opts;
  opts.out_dir = ctx.out_dir;
  opts.resume = resume;
  opts.stop_after = stop_after;
  std::ostream& out = *ctx.out;
  opts.on_step = [&out](const StepRecord& r) {
    if (r.step % 100 == 0) out << "step " << r.step << " loss " << r.loss << " lr " << r.lr << "\n";
  };
  FitResult result = fit(set.images, cfg.model, cfg.train, schedule, opts);
  out << "trained " << result.steps_done << "/" << result.total_steps << " steps";
  if (!result.log.empty()) out << ", final loss " << result.log.back().loss;
  out << ", checkpoint " << (ctx.out_dir / "checkpoint.dfud").string() << "\n";
  return 0;
}

int cmd_sample(Context& ctx, const std::string& checkpoint_arg, bool curate, const std::string& data) {
  const auto& cfg = ctx.config;
  const fs::path ckpt_path = checkpoint_arg.empty() ? ctx.out_dir / "checkpoint.dfud" : fs::path(checkpoint_arg);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const NoiseSchedule schedule = build_linear_schedule(ckpt.schedule);
  Rng rng(cfg.sample.seed, "sampler");
  const auto total = static_cast<std::size_t>(cfg.sample.count);
  const auto c = static_cast<std::size_t>(ckpt.params.config.in_channels);
  const auto s = static_cast<std::size_t>(ckpt.params.config.image_size);
  Tensor samples({total, c, s, s});
  for (std::size_t done = 0; done < total;) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.sample.batch), total - done);
    const Tensor batch = sample_batch(ckpt.params, schedule, n, rng, cfg.sample.clamp);
    std::copy(batch.data().begin(), batch.data().end(),
              samples.data().begin() + static_cast<std::ptrdiff_t>(done * c * s * s));
    done += n;
  }
  const fs::path dir = ctx.out_dir / "samples";
  fs::create_directories(dir);
  DatasetManifest manifest;
  manifest.base_dir = dir;
  FeatureTable features;
  features.rows = embed(samples, EmbeddingSpec::flatten());
  for (std::size_t i = 0; i < total; ++i) {
    std::vector<float> v(samples.data().begin() + static_cast<std::ptrdiff_t>(i * c * s * s),
                         samples.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * c * s * s));
    Tensor chw({c, s, s}, std::move(v));
    for (auto& x : chw.data()) x = std::clamp(x, -1.0f, 1.0f);
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu.png", i);
    write_image(dir / name, from_model_tensor(chw));
    ManifestEntry e;
    e.path = name;
    e.width = e.height = static_cast<int>(s);
    e.label = Label::Synthetic;
    manifest.entries.push_back(e);
    features.ids.push_back(name);
  }
  write_manifest(dir / "manifest.jsonl", manifest);
  write_feature_file(dir / "features.tsv", features);
  *ctx.out << "sampled " << total << " images to " << dir.string() << "\n";

  if (curate) {
    if (data.empty()) throw UsageError("--curate needs --data for the training statistics");
    const ImageSet train = load_image_set(data, ckpt.params.config);
    const CurationResult r = curate_samples(samples, compute_curation_stats(train.images), cfg.sample.k_sigma);
    nlohmann::json discarded = nlohmann::json::array();
    for (const auto& d : r.discarded) {
      discarded.push_back({{"index", d.index}, {"file", manifest.entries[d.index].path}, {"reason", d.reason}});
    }
    DatasetManifest kept;
    kept.base_dir = dir;
    for (auto i : r.kept) kept.entries.push_back(manifest.entries[i]);
    write_manifest(dir / "curated.jsonl", kept);
    write_json(ctx.out_dir / "curation.json", {{"k_sigma", cfg.sample.k_sigma},
                                               {"kept", r.kept},
                                               {"discarded", discarded},
                                               {"warnings", r.warnings}});
    *ctx.out << "curation kept " << r.kept.size() << "/" << total << " (k_sigma " << cfg.sample.k_sigma << ")\n";
    for (const auto& w : r.warnings) *ctx.out << "warning: " << w << "\n";
  }
  return 0;
}

Matrix load_features(Context& ctx, const std::string& spec, std::string& description) {
  const auto& m = ctx.config.metrics;
  if (lower_ext(spec) == ".tsv") {
    description = "features(" + spec + ")";
    return read_feature_file(spec).rows;
  }
  const ImageSet set = load_image_set(spec, ctx.config.model);
  EmbeddingSpec e;
  if (m.embedding == "flatten") e = EmbeddingSpec::flatten();
  else if (m.embedding == "random_conv") e = EmbeddingSpec::random_conv(m.seed, m.dim);
  else {
    if (m.features.empty()) throw ConfigError("metrics.features must name a feature file for the external embedding");
    e = EmbeddingSpec::external(m.features, m.dim);
  }
  description = e.describe();
  return embed(set.images, e, set.ids);
}

int cmd_metrics(Context& ctx, const std::string& which, const std::string& a_spec, const std::string& b_spec) {
  std::string desc_a, desc_b;
  const Matrix a = load_features(ctx, a_spec, desc_a);
  const Matrix b = load_features(ctx, b_spec, desc_b);
  MetricReport report;
  report.embedding = desc_a == desc_b ? desc_a : desc_a + " / " + desc_b;
  report.rows_a = static_cast<std::size_t>(a.rows());
  report.rows_b = static_cast<std::size_t>(b.rows());
  if (which == "fid") {
    report.fid = fid(fit_gaussian(a), fit_gaussian(b));
  } else {
    Rng rng(ctx.config.metrics.seed, "kid-subsets");
    const KidResult k = kid(a, b, ctx.config.metrics.subset_size, ctx.config.metrics.subsets, rng);
    report.kid_mean = k.mean;
    report.kid_std = k.stddev;
  }
  const auto j = report.to_json();
  write_json(ctx.out_dir / "metrics.json", j);
  *ctx.out << j.dump(2) << "\n";
  return 0;
}

StudyConfig study_from_settings(const StudySettings& settings) {
  if (settings.manifest.empty()) throw ConfigError("study.manifest must be set");
  auto loaded = load_manifest(settings.manifest);
  return build_study(settings, loaded.manifest);
}

int cmd_study_serve(Context& ctx) {
  const auto& st = ctx.config.study;
  StudyConfig config = study_from_settings(st);
  fs::path log = st.verdict_log;
  if (log.is_relative()) log = ctx.out_dir / log;
  StudyService service(std::move(config), log, parse_t_variant(st.t_test));
  StudyServer server(service);
  const int port = server.bind(st.host, st.port);
  *ctx.out << "serving study on http://" << st.host << ":" << port << " (log " << log.string() << ")" << std::endl;
  server.listen();
  return 0;
}

std::map<std::string, double> read_metric_series(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read metric series " + path.string());
  std::map<std::string, double> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    char* end = nullptr;
    const double v = tab == std::string::npos ? 0.0 : std::strtod(line.c_str() + tab + 1, &end);
    if (tab == std::string::npos || end == line.c_str() + tab + 1) {
      throw ParseError(path.string() + " line " + std::to_string(lineno) + ": expected image_id<TAB>value");
    }
    out[line.substr(0, tab)] = v;
  }
  return out;
}

int cmd_study_report(Context& ctx, const std::string& log_arg, const std::string& truth_arg, bool partial,
                     const std::string& series_arg) {
  const auto& st = ctx.config.study;
  fs::path log = log_arg.empty() ? fs::path(st.verdict_log) : fs::path(log_arg);
  if (log_arg.empty() && log.is_relative()) log = ctx.out_dir / log;
  const auto records = read_verdict_log(log);
  std::map<std::string, Label> truth;
  std::vector<RaterVerdict> verdicts;
  int raters = st.raters_expected;
  if (!truth_arg.empty()) {
    std::ifstream in(truth_arg);
    if (!in) throw IoError("cannot read truth file " + truth_arg);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(truth_arg + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("labels") || !j["labels"].is_object()) {
      throw ParseError(truth_arg + ": expected {\"raters\": n, \"labels\": {image_id: label}}");
    }
    for (const auto& [id, label] : j["labels"].items()) truth.emplace(id, parse_label(label.get<std::string>()));
    if (j.contains("raters")) raters = j["raters"].get<int>();
    for (const auto& r : records) verdicts.push_back({r.session_id, r.rater_id, r.token, r.verdict, r.ts});
  } else {
    const StudyConfig config = study_from_settings(st);
    truth = config.truth();
    verdicts = resolve_verdicts(config, records);
  }
  std::map<std::string, double> series;
  ReportOptions opts;
  opts.variant = parse_t_variant(st.t_test);
  opts.partial = partial;
  if (!series_arg.empty()) {
    series = read_metric_series(series_arg);
    opts.metric_series = &series;
  }
  const StudyReport report = study_report(truth, raters, verdicts, opts);
  write_json(ctx.out_dir / "report.json", report.to_json());
  write_text(ctx.out_dir / "histogram.tsv", report.histogram_text());
  *ctx.out << report.to_json().dump(2) << "\n" << report.histogram_text();
  return 0;
}

int cmd_gradcheck(Context& ctx, int seeds, int coords) {
  double worst_op = 0.0, worst_net = 0.0;
  std::map<std::string, double> per_op;
  for (int s = 0; s < seeds; ++s) {
    const auto seed = derive_seed(ctx.config.train.seed, "gradcheck", static_cast<std::uint64_t>(s));
    for (const auto& e : gradcheck_ops(seed)) {
      per_op[e.name] = std::max(per_op[e.name], e.rel_error);
      worst_op = std::max(worst_op, e.rel_error);
    }
    worst_net = std::max(worst_net, gradcheck_denoiser(ctx.config.model, seed, static_cast<std::size_t>(coords)).rel_error);
  }
  char buf[128];
  for (const auto& [name, err] : per_op) {
    std::snprintf(buf, sizeof buf, "op %-22s max_rel_error %.3e", name.c_str(), err);
    *ctx.out << buf << "\n";
  }
  std::snprintf(buf, sizeof buf, "denoiser max_rel_error %.3e", worst_net);
  *ctx.out << buf << "\n";
  std::snprintf(buf, sizeof buf, "max_rel_error %.3e", std::max(worst_op, worst_net));
  *ctx.out << buf << "\n";
  write_json(ctx.out_dir / "gradcheck.json",
             {{"seeds", seeds}, {"ops", per_op}, {"denoiser", worst_net}, {"max_rel_error", std::max(worst_op, worst_net)}});
  if (worst_op > 1e-3 || worst_net > 1e-2) {
    throw NumericError("gradient check failed: op error " + std::to_string(worst_op) + " (limit 1e-3), denoiser " +
                       std::to_string(worst_net) + " (limit 1e-2)");
  }
  return 0;
}

int cmd_fixture_paper(Context& ctx) {
  const PaperFixture f = make_paper_aggregate_fixture();
  std::vector<VerdictRecord> records;
  for (const auto& v : f.verdicts) records.push_back({v.session_id, v.rater_id, v.image_id, v.verdict, v.timestamp});
  write_verdict_log(ctx.out_dir / "verdicts.jsonl", records);
  nlohmann::json labels = nlohmann::json::object();
  for (const auto& [id, label] : f.truth) labels[id] = to_string(label);
  write_json(ctx.out_dir / "truth.json", {{"raters", f.raters}, {"labels", labels}});
  const StudyReport report = study_report(f.truth, f.raters, f.verdicts);
  write_json(ctx.out_dir / "report.json", report.to_json());
  write_text(ctx.out_dir / "histogram.tsv", report.histogram_text());
  char buf[160];
  auto line = [&](const char* fmt, double v) {
    std::snprintf(buf, sizeof buf, fmt, v);
    *ctx.out << buf << "\n";
  };
  line("marked_real %.2f", report.scores.fraction_marked_real);
  line("real_accuracy %.2f", report.scores.real_accuracy);
  line("synthetic_accuracy %.2f", report.scores.synthetic_accuracy);
  line("fooling_rate %.2f", report.scores.fooling_rate);
  line("real_marked_real_mean %.2f", report.real.marked_real.mean);
  line("real_marked_real_sd %.2f", report.real.marked_real.sd_population);
  line("synthetic_marked_real_mean %.2f", report.synthetic.marked_real.mean);
  line("synthetic_marked_real_sd %.2f", report.synthetic.marked_real.sd_population);
  if (report.t_marked_real) {
    line("t %.4f", report.t_marked_real->t);
    line("p %.4f", report.t_marked_real->p);
  }
  *ctx.out << "wrote " << (ctx.out_dir / "verdicts.jsonl").string() << "\n";
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diffusion workbench for wound images: train, sample, measure and rate.", "ulcerforge"};
  app.allow_extras();
  app.require_subcommand(1);
  std::string config_path, out_dir = "ulcerforge-run";
  app.add_option("--config", config_path, "Run configuration JSON");
  app.add_option("--out", out_dir, "Output directory");
  app.footer("Config overrides: --section.key value (e.g. --train.batch_size 32).\n"
             "ULCERFORGE_SEED overrides the train, sample and metrics seeds.");

  auto* dataset = app.add_subcommand("dataset", "Manifest validation and preprocessing");
  dataset->require_subcommand(1);
  std::string manifest, dest;
  bool no_check = false;
  int crop_size = 100, blob_size = 8;
  std::size_t blob_count = 256;
  std::uint64_t blob_seed = 0;
  auto* validate = dataset->add_subcommand("validate", "Validate a manifest and print statistics");
  validate->add_option("--manifest", manifest, "Manifest (JSON Lines)")->required();
  validate->add_flag("--no-check-files", no_check, "Skip image file existence checks");
  auto* crop = dataset->add_subcommand("crop", "Crop images around their first wound box");
  crop->add_option("--manifest", manifest, "Manifest (JSON Lines)")->required();
  crop->add_option("--size", crop_size, "Crop edge in pixels");
  crop->add_option("--dest", dest, "Destination directory (default OUT/crops)");
  auto* blobs = dataset->add_subcommand("blobs", "Write the toy Gaussian-blob dataset");
  blobs->add_option("--count", blob_count, "Number of images");
  blobs->add_option("--size", blob_size, "Edge length in pixels");
  blobs->add_option("--seed", blob_seed, "Dataset seed");
  blobs->add_option("--dest", dest, "Destination directory (default OUT/blobs)");

  std::string data, checkpoint;
  bool no_resume = false, curate = false;
  std::int64_t stop_after = -1;
  auto* train = app.add_subcommand("train", "Train the denoiser");
  train->add_option("--data", data, "Manifest, image directory or blobs:N[:SEED]")->required();
  train->add_flag("--no-resume", no_resume, "Ignore an existing checkpoint in OUT");
  train->add_option("--stop-after", stop_after, "Stop after this many total steps");

  double k_sigma = -1.0;
  auto* sample = app.add_subcommand("sample", "Generate images from a checkpoint");
  sample->add_option("--checkpoint", checkpoint, "Checkpoint (default OUT/checkpoint.dfud)");
  sample->add_flag("--curate", curate, "Discard samples with outlying channel means");
  sample->add_option("--data", data, "Training data for curation statistics");
  sample->add_option("--k-sigma", k_sigma, "Curation threshold in training standard deviations");

  std::string a_spec, b_spec;
  auto* metrics = app.add_subcommand("metrics", "FID and KID between two sets");
  metrics->require_subcommand(1);
  auto* fid_cmd = metrics->add_subcommand("fid", "Frechet distance of Gaussian fits");
  auto* kid_cmd = metrics->add_subcommand("kid", "Unbiased polynomial-kernel MMD over subsets");
  for (auto* c : {fid_cmd, kid_cmd}) {
    c->add_option("--a", a_spec, "Feature file (.tsv), manifest, image directory or blobs:N[:SEED]")->required();
    c->add_option("--b", b_spec, "Second set, same forms as --a")->required();
  }

  std::string log, truth, series;
  bool partial = false;
  auto* study = app.add_subcommand("study", "Blind rating study");
  study->require_subcommand(1);
  auto* serve = study->add_subcommand("serve", "Run the rating service");
  auto* report = study->add_subcommand("report", "Score a verdict log");
  report->add_option("--log", log, "Verdict log (default study.verdict_log under OUT)");
  report->add_option("--truth", truth, "Labels file {raters, labels}; tokens are then image ids");
  report->add_flag("--partial", partial, "Allow unrated or incomplete images");
  report->add_option("--metric-series", series, "image_id<TAB>value rows for Pearson r");

  int seeds = 20, coords = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--seeds", seeds, "Number of seeds");
  gradcheck->add_option("--coords", coords, "Denoiser coordinates per seed (0: 1% of parameters)");

  auto* fixture = app.add_subcommand("fixture", "Reference fixtures");
  fixture->require_subcommand(1);
  auto* paper = fixture->add_subcommand("paper-aggregates", "Verdict fixture with the reference study aggregates");

  for (auto* c : {static_cast<CLI::App*>(dataset), validate, crop, blobs, train, sample, metrics, fid_cmd, kid_cmd,
                  study, serve, report, gradcheck, fixture, paper}) {
    c->allow_extras();
    c->fallthrough();
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n" << app.help();
    return 2;
  }

  Context ctx;
  ctx.args = args;
  ctx.out = &out;
  ctx.out_dir = out_dir;
  try {
    if (!config_path.empty()) ctx.config = RunConfig::load(config_path);
    if (auto seed = seed_from_env()) {
      apply_root_seed(ctx.config, *seed);
      ctx.env_seed = true;
    }
    const auto extras = app.remaining(true);
    for (std::size_t i = 0; i < extras.size(); ++i) {
      const std::string& a = extras[i];
      if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos) {
        err << "error: usage: unknown argument '" << a << "'\n" << app.help();
        return 2;
      }
      std::string key = a.substr(2), value;
      if (const auto eq = key.find('='); eq != std::string::npos) {
        value = key.substr(eq + 1);
        key = key.substr(0, eq);
      } else if (i + 1 < extras.size()) {
        value = extras[++i];
      } else {
        err << "error: usage: missing value for '" << a << "'\n";
        return 2;
      }
      ctx.config.set(key, value);
    }
    if (k_sigma > 0) ctx.config.sample.k_sigma = k_sigma;
    ctx.config.validate();
  } catch (const UsageError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n" << app.help();
    return 2;
  } catch (const Error& e) {
    err << "error: " << to_string(e.kind()) << ": " << one_line(e.what()) << "\n";
    return 1;
  }

  try {
    write_run_json(ctx);
    if (validate->parsed()) return cmd_dataset_validate(ctx, manifest, !no_check);
    if (crop->parsed()) return cmd_dataset_crop(ctx, manifest, crop_size, dest);
    if (blobs->parsed()) return cmd_dataset_blobs(ctx, blob_count, blob_size, blob_seed, dest);
    if (train->parsed()) return cmd_train(ctx, data, !no_resume, stop_after);
    if (sample->parsed()) return cmd_sample(ctx, checkpoint, curate, data);
    if (fid_cmd->parsed()) return cmd_metrics(ctx, "fid", a_spec, b_spec);
    if (kid_cmd->parsed()) return cmd_metrics(ctx, "kid", a_spec, b_spec);
    if (serve->parsed()) return cmd_study_serve(ctx);
    if (report->parsed()) return cmd_study_report(ctx, log, truth, partial, series);
    if (gradcheck->parsed()) return cmd_gradcheck(ctx, seeds, coords);
    if (paper->parsed()) return cmd_fixture_paper(ctx);
    err << "error: usage: no command\n" << app.help();
    return 2;
  } catch (const UsageError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << to_string(e.kind()) << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error: io: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << "\n";
    return 1;
  }
}

}  // namespace ulcerforge
