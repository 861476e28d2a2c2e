#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ulcerforge/image.hpp"
#include "ulcerforge/tensor.hpp"

namespace ulcerforge {

enum class Label { Real, Synthetic };

std::string to_string(Label label);
Label parse_label(const std::string& text);

// Axis-aligned wound box in pixels: centre plus extent.
struct WoundBox {
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct ManifestEntry {
  std::string path;
  int width = 0;
  int height = 0;
  Label label = Label::Real;
  std::vector<WoundBox> wounds;  // clamped to the image bounds
  std::size_t line = 0;          // 1-based source line
  bool missing = false;          // image file not found
};

struct DatasetManifest {
  std::filesystem::path base_dir;  // relative entry paths resolve against this
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const;
};

struct ValidationReport {
  std::size_t entries = 0;
  std::map<std::size_t, std::size_t> wound_count_histogram;
  // Over entries with at least one wound.
  std::optional<double> wound_area_fraction_min;
  std::optional<double> wound_area_fraction_max;
  std::map<Label, std::size_t> label_counts;
  std::vector<std::string> missing_files;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

struct LoadedManifest {
  DatasetManifest manifest;
  ValidationReport report;
};

// Reads a JSON Lines manifest. Malformed lines raise ParseError with the line
// number; missing image files are flagged and listed, not fatal.
LoadedManifest load_manifest(const std::filesystem::path& path, bool check_files = true);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
nlohmann::json entry_to_json(const ManifestEntry& e);

// Union area of the boxes (overlaps counted once) over width * height.
double wound_area_fraction(std::span<const WoundBox> wounds, int width, int height);

// Top-left corner of the size x size window centred at (cx, cy), shifted
// inward at the borders.
std::pair<int, int> crop_origin(int width, int height, int cx, int cy, int size);
ImageBuffer crop_centered(const ImageBuffer& img, int cx, int cy, int size);

// Bilinear resize (half-pixel centres) to target x target, then p / 127.5 - 1.
// Result is [C, target, target] in [-1, 1].
Tensor to_model_tensor(const ImageBuffer& img, int target);
// Inverse mapping for export: [C,H,W] in [-1,1] -> 8-bit image.
ImageBuffer from_model_tensor(const Tensor& chw);

// Stacks manifest images into [N,C,target,target].
Tensor load_dataset_tensor(const DatasetManifest& manifest, int target, int channels);

// Toy dataset: single-channel Gaussian blobs on a dark background,
// [n,1,size,size] in [-1,1].
Tensor make_blob_dataset(std::size_t n, int size, std::uint64_t seed);

}  // namespace ulcerforge
