#include "ulcerforge/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ulcerforge/error.hpp"
#include "ulcerforge/rng.hpp"

namespace ulcerforge {

std::string to_string(Label label) { return label == Label::Real ? "real" : "synthetic"; }

Label parse_label(const std::string& text) {
  if (text == "real") return Label::Real;
  if (text == "synthetic") return Label::Synthetic;
  throw ParseError("label must be \"real\" or \"synthetic\", got \"" + text + "\"");
}

std::filesystem::path DatasetManifest::resolve(const ManifestEntry& e) const {
  std::filesystem::path p(e.path);
  return p.is_absolute() ? p : base_dir / p;
}

nlohmann::json ValidationReport::to_json() const {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [k, v] : wound_count_histogram) hist[std::to_string(k)] = v;
  nlohmann::json labels = nlohmann::json::object();
  for (const auto& [k, v] : label_counts) labels[ulcerforge::to_string(k)] = v;
  nlohmann::json j{{"entries", entries},
                   {"wound_count_histogram", hist},
                   {"label_counts", labels},
                   {"missing_files", missing_files},
                   {"warnings", warnings}};
  j["wound_area_fraction_min"] = wound_area_fraction_min ? nlohmann::json(*wound_area_fraction_min) : nlohmann::json(nullptr);
  j["wound_area_fraction_max"] = wound_area_fraction_max ? nlohmann::json(*wound_area_fraction_max) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json entry_to_json(const ManifestEntry& e) {
  nlohmann::json wounds = nlohmann::json::array();
  for (const auto& b : e.wounds) wounds.push_back({{"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}});
  return nlohmann::json{{"path", e.path},
                        {"width", e.width},
                        {"height", e.height},
                        {"label", to_string(e.label)},
                        {"wounds", wounds}};
}

namespace {

// Clamps a box to [0,width] x [0,height], keeping the centre/extent form.
// Returns false when the box lies entirely outside the image.
bool clamp_box(WoundBox& b, int width, int height) {
  const double x0 = std::clamp(b.cx - b.w / 2, 0.0, static_cast<double>(width));
  const double x1 = std::clamp(b.cx + b.w / 2, 0.0, static_cast<double>(width));
  const double y0 = std::clamp(b.cy - b.h / 2, 0.0, static_cast<double>(height));
  const double y1 = std::clamp(b.cy + b.h / 2, 0.0, static_cast<double>(height));
  const bool changed = x0 != b.cx - b.w / 2 || x1 != b.cx + b.w / 2 || y0 != b.cy - b.h / 2 ||
                       y1 != b.cy + b.h / 2;
  if (changed) b = {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
  return !changed;
}

ManifestEntry parse_entry(const nlohmann::json& j, std::size_t line) {
  const auto where = "manifest line " + std::to_string(line) + ": ";
  if (!j.is_object()) throw ParseError(where + "expected a JSON object");
  static const std::set<std::string> known{"path", "width", "height", "label", "wounds"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ParseError(where + "unknown key '" + key + "'");
  }
  ManifestEntry e;
  e.line = line;
  try {
    e.path = j.at("path").get<std::string>();
    e.width = j.at("width").get<int>();
    e.height = j.at("height").get<int>();
    e.label = parse_label(j.at("label").get<std::string>());
    if (j.contains("wounds")) {
      for (const auto& b : j.at("wounds")) {
        WoundBox box{b.at("cx").get<double>(), b.at("cy").get<double>(), b.at("w").get<double>(),
                     b.at("h").get<double>()};
        if (box.w < 0 || box.h < 0) throw ParseError("negative wound box extent");
        e.wounds.push_back(box);
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(where + ex.what());
  } catch (const ParseError& ex) {
    throw ParseError(where + ex.what());
  }
  if (e.path.empty()) throw ParseError(where + "empty path");
  if (e.width < 1 || e.height < 1) throw ParseError(where + "width and height must be positive");
  return e;
}

}  // namespace

LoadedManifest load_manifest(const std::filesystem::path& path, bool check_files) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  LoadedManifest out;
  out.manifest.base_dir = path.parent_path();
  auto& report = out.report;
  std::set<std::string> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("manifest line " + std::to_string(line) + ": " + ex.what());
    }
    ManifestEntry e = parse_entry(j, line);
    if (!seen.insert(e.path).second) {
      throw ParseError("manifest line " + std::to_string(line) + ": duplicate path " + e.path);
    }
    for (auto& b : e.wounds) {
      if (!clamp_box(b, e.width, e.height)) {
        report.warnings.push_back("line " + std::to_string(line) + ": wound box clamped to image bounds");
      }
    }
    if (check_files && !std::filesystem::exists(out.manifest.resolve(e))) {
      e.missing = true;
      report.missing_files.push_back(e.path);
    }
    report.wound_count_histogram[e.wounds.size()]++;
    report.label_counts[e.label]++;
    if (!e.wounds.empty()) {
      const double f = wound_area_fraction(e.wounds, e.width, e.height);
      report.wound_area_fraction_min = std::min(report.wound_area_fraction_min.value_or(f), f);
      report.wound_area_fraction_max = std::max(report.wound_area_fraction_max.value_or(f), f);
    }
    out.manifest.entries.push_back(std::move(e));
  }
  report.entries = out.manifest.entries.size();
  return out;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& e : manifest.entries) out << entry_to_json(e).dump() << '\n';
}

double wound_area_fraction(std::span<const WoundBox> wounds, int width, int height) {
  if (width < 1 || height < 1) throw DimensionError("wound_area_fraction: image must be non-empty");
  struct Rect {
    double x0, x1, y0, y1;
  };
  std::vector<Rect> rects;
  std::vector<double> xs, ys;
  for (const auto& b : wounds) {
    Rect r{std::clamp(b.cx - b.w / 2, 0.0, double(width)), std::clamp(b.cx + b.w / 2, 0.0, double(width)),
           std::clamp(b.cy - b.h / 2, 0.0, double(height)), std::clamp(b.cy + b.h / 2, 0.0, double(height))};
    if (r.x1 <= r.x0 || r.y1 <= r.y0) continue;
    rects.push_back(r);
    xs.insert(xs.end(), {r.x0, r.x1});
    ys.insert(ys.end(), {r.y0, r.y1});
  }
  if (rects.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  std::sort(ys.begin(), ys.end());
  ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
    const double mx = (xs[i] + xs[i + 1]) / 2;
    for (std::size_t k = 0; k + 1 < ys.size(); ++k) {
      const double my = (ys[k] + ys[k + 1]) / 2;
      for (const auto& r : rects) {
        if (mx > r.x0 && mx < r.x1 && my > r.y0 && my < r.y1) {
          area += (xs[i + 1] - xs[i]) * (ys[k + 1] - ys[k]);
          break;
        }
      }
    }
  }
  return area / (static_cast<double>(width) * height);
}

std::pair<int, int> crop_origin(int width, int height, int cx, int cy, int size) {
  if (size < 1 || size > std::min(width, height)) {
    throw DimensionError("crop: size " + std::to_string(size) + " exceeds image " + std::to_string(width) + "x" +
                         std::to_string(height));
  }
  return {std::clamp(cx - size / 2, 0, width - size), std::clamp(cy - size / 2, 0, height - size)};
}

ImageBuffer crop_centered(const ImageBuffer& img, int cx, int cy, int size) {
  const auto [x0, y0] = crop_origin(img.width, img.height, cx, cy, size);
  ImageBuffer out(size, size, img.channels);
  const std::size_t row = static_cast<std::size_t>(size) * img.channels;
  for (int y = 0; y < size; ++y) {
    const auto* src = img.pixels.data() + (static_cast<std::size_t>(y0 + y) * img.width + x0) * img.channels;
    std::copy_n(src, row, out.pixels.data() + static_cast<std::size_t>(y) * row);
  }
  return out;
}

Tensor to_model_tensor(const ImageBuffer& img, int target) {
  if (target < 1) throw ConfigError("to_model_tensor: target must be >= 1");
  const auto t = static_cast<std::size_t>(target);
  const auto c = static_cast<std::size_t>(img.channels);
  Tensor out({c, t, t});
  auto o = out.data();
  const double sx = static_cast<double>(img.width) / target;
  const double sy = static_cast<double>(img.height) / target;
  for (std::size_t y = 0; y < t; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < t; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const int k = static_cast<int>(ch);
        const double top = img.at(x0, y0, k) * (1 - wx) + img.at(x1, y0, k) * wx;
        const double bottom = img.at(x0, y1, k) * (1 - wx) + img.at(x1, y1, k) * wx;
        const double p = top * (1 - wy) + bottom * wy;
        o[(ch * t + y) * t + x] = static_cast<float>(std::clamp(p / 127.5 - 1.0, -1.0, 1.0));
      }
    }
  }
  return out;
}

ImageBuffer from_model_tensor(const Tensor& chw) {
  if (!chw.defined() || chw.rank() != 3) throw DimensionError("from_model_tensor: expected [C,H,W]");
  const int c = static_cast<int>(chw.size(0)), h = static_cast<int>(chw.size(1)), w = static_cast<int>(chw.size(2));
  ImageBuffer img(w, h, c);
  auto d = chw.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = std::clamp(static_cast<double>(d[(static_cast<std::size_t>(ch) * h + y) * w + x]), -1.0, 1.0);
        img.at(x, y, ch) = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
      }
  return img;
}

Tensor load_dataset_tensor(const DatasetManifest& manifest, int target, int channels) {
  if (manifest.entries.empty()) throw ConfigError("dataset: manifest has no entries");
  const auto n = manifest.entries.size();
  const auto c = static_cast<std::size_t>(channels), t = static_cast<std::size_t>(target);
  Tensor out({n, c, t, t});
  for (std::size_t i = 0; i < n; ++i) {
    const auto path = manifest.resolve(manifest.entries[i]);
    ImageBuffer img = read_image(path);
    if (img.channels != channels) {
      throw DimensionError("dataset: " + path.string() + " has " + std::to_string(img.channels) +
                           " channels, model expects " + std::to_string(channels));
    }
    Tensor x = to_model_tensor(img, target);
    std::copy(x.data().begin(), x.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * c * t * t));
  }
  return out;
}

Tensor make_blob_dataset(std::size_t n, int size, std::uint64_t seed) {
  if (size < 2) throw ConfigError("blob dataset: size must be >= 2");
  const auto s = static_cast<std::size_t>(size);
  Tensor out({n, 1, s, s});
  Rng rng(seed, "blobs");
  auto d = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = 0.25 * size + rng.uniform() * 0.5 * size - 0.5;
    const double cy = 0.25 * size + rng.uniform() * 0.5 * size - 0.5;
    const double sigma = size * (0.10 + 0.10 * rng.uniform());
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        d[(i * s + y) * s + x] = static_cast<float>(-1.0 + 2.0 * std::exp(-r2 / (2 * sigma * sigma)));
      }
  }
  return out;
}

}  // namespace ulcerforge
