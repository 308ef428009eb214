#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stnyolo/box.hpp"
#include "stnyolo/image_io.hpp"
#include "stnyolo/tensor.hpp"

namespace stnyolo {

// ---------------------------------------------------------------------------
// Multispectral bands

enum class Band { Green, Red, RedEdge, NearInfrared };

/// Nominal centre wavelength of the camera band in nanometres.
int band_wavelength_nm(Band band);
std::string band_name(Band band);
Band band_from_name(std::string_view name);

/// Co-registered single-channel bands of one capture. NIR may be stored but
/// is not used by fuse_bands.
class SpectralImage {
 public:
  SpectralImage(int width, int height, int bit_depth);

  void set_band(Band band, std::vector<std::uint16_t> samples);
  void set_band(Band band, const GrayImage& image);
  bool has_band(Band band) const { return bands_.count(band) != 0; }
  const std::vector<std::uint16_t>& band(Band band) const;

  int width() const { return width_; }
  int height() const { return height_; }
  int bit_depth() const { return bit_depth_; }

  /// Opaque acquisition metadata (capture height, crop species, ...).
  nlohmann::json sidecar = nlohmann::json::object();

 private:
  int width_, height_, bit_depth_;
  std::map<Band, std::vector<std::uint16_t>> bands_;
};

/// Stacks (Red, RedEdge, Green) into a (1, 3, H, W) pseudo-RGB tensor and
/// applies one joint min-max over all three channels. A constant stack maps
/// to zeros. Throws ValueError when a required band is missing.
Tensor fuse_bands(const SpectralImage& image);

/// Joint min-max of a real-valued stack into [0, 1]; constant input -> zeros.
Tensor normalize_joint(const Tensor& stack);

/// fuse_bands with a content-addressed cache: <cache_dir>/<hash>.ppm (16-bit).
Tensor fuse_bands_cached(const SpectralImage& image, const std::filesystem::path& cache_dir);

/// FNV-1a over dims, bit depth and band samples (Red, RedEdge, Green).
std::string spectral_content_hash(const SpectralImage& image);

// ---------------------------------------------------------------------------
// YOLO labels: one "class cx cy w h" line per object, normalized floats.

/// Throws ParseError (with 1-based line) for malformed lines, out-of-range
/// values and class ids >= n_classes.
std::vector<BBox> load_labels(std::string_view text, int n_classes);

/// Canonical form: "%d %.6f %.6f %.6f %.6f\n" per box.
std::string serialize_labels(const std::vector<BBox>& boxes);

std::vector<BBox> read_label_file(const std::filesystem::path& path, int n_classes);
void write_label_file(const std::filesystem::path& path, const std::vector<BBox>& boxes);

// ---------------------------------------------------------------------------
// Datasets: <root>/images/<split>/<stem>.{png,ppm}, <root>/labels/<split>/<stem>.txt,
// optional <root>/classes.txt (one class name per line).

struct DatasetItem {
  std::string stem;
  std::filesystem::path image;
  std::filesystem::path label;  // empty when the image has no label file
};

struct DatasetIndex {
  std::string split;
  std::vector<DatasetItem> items;
  std::vector<std::string> classes;
  std::vector<std::string> warnings;
};

/// Lexicographic by stem. Images without labels are kept as background
/// with a warning; labels without images are reported. Every label file is
/// parsed. Throws IoError for a missing split or an empty one.
DatasetIndex load_dataset(const std::filesystem::path& root, const std::string& split);

struct Sample {
  std::string name;
  Tensor image;  // (1, 3, H, W) in [0, 1]
  std::vector<BBox> boxes;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> classes{"object"};

  int n_classes() const { return static_cast<int>(classes.size()); }
  std::size_t size() const { return samples.size(); }
};

/// Reads every image, bilinearly resized to image_size x image_size (boxes are
/// normalized, so they carry over unchanged).
Dataset materialize_dataset(const DatasetIndex& index, int image_size);

/// Writes PNG images and label files under <root>/images|labels/<split> plus classes.txt.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root, const std::string& split);

struct SynthOptions {
  int n_classes = 1;
  int min_objects = 1;
  int max_objects = 3;
  Real min_size = 0.10;  // object extent as a fraction of the image side
  Real max_size = 0.45;
  Real margin = 0.08;    // keep objects this far from the border
};

/// Filled rectangles and ellipses on a smooth textured background. Object
/// bounds sit on integer pixel edges and labels are exact. Pixel values are
/// 8-bit quantized so a PNG round-trip is lossless. Deterministic in `seed`.
Dataset synth_dataset(std::uint64_t seed, int n_images, int image_size, const SynthOptions& options = {});

}  // namespace stnyolo
