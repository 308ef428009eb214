#include "stnyolo/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "stnyolo/errors.hpp"

namespace stnyolo {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Bands

int band_wavelength_nm(Band band) {
  switch (band) {
    case Band::Green: return 580;
    case Band::Red: return 660;
    case Band::RedEdge: return 730;
    case Band::NearInfrared: return 820;
  }
  throw ValueError("unknown band");
}

std::string band_name(Band band) {
  switch (band) {
    case Band::Green: return "green";
    case Band::Red: return "red";
    case Band::RedEdge: return "rededge";
    case Band::NearInfrared: return "nir";
  }
  throw ValueError("unknown band");
}

Band band_from_name(std::string_view name) {
  for (Band b : {Band::Green, Band::Red, Band::RedEdge, Band::NearInfrared}) {
    if (band_name(b) == name) return b;
  }
  throw ValueError("unknown band name '" + std::string(name) + "'");
}

SpectralImage::SpectralImage(int width, int height, int bit_depth)
    : width_(width), height_(height), bit_depth_(bit_depth) {
  if (width <= 0 || height <= 0) throw ShapeError("spectral image dims must be positive");
  if (bit_depth != 8 && bit_depth != 16) throw ValueError("bit depth must be 8 or 16");
}

void SpectralImage::set_band(Band band, std::vector<std::uint16_t> samples) {
  if (samples.size() != static_cast<std::size_t>(width_) * height_) {
    throw ShapeError(band_name(band) + " band does not match the image dims");
  }
  if (bit_depth_ == 8) {
    for (std::uint16_t v : samples) {
      if (v > 255) throw ValueError(band_name(band) + " band exceeds the 8-bit range");
    }
  }
  bands_[band] = std::move(samples);
}

void SpectralImage::set_band(Band band, const GrayImage& image) {
  if (image.width != width_ || image.height != height_) {
    throw ShapeError(band_name(band) + " band is " + std::to_string(image.width) + "x" +
                     std::to_string(image.height) + ", expected " + std::to_string(width_) + "x" +
                     std::to_string(height_));
  }
  set_band(band, image.pixels);
}

const std::vector<std::uint16_t>& SpectralImage::band(Band b) const {
  auto it = bands_.find(b);
  if (it == bands_.end()) throw ValueError("missing " + band_name(b) + " band");
  return it->second;
}

Tensor normalize_joint(const Tensor& stack) {
  auto d = stack.data();
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  const Real min_v = *lo, range = *hi - *lo;
  std::vector<Real> out(d.size(), 0.0);
  if (range > 0.0) {
    for (std::size_t i = 0; i < d.size(); ++i) out[i] = (d[i] - min_v) / range;
  }
  return Tensor::from(stack.shape(), std::move(out));
}

Tensor fuse_bands(const SpectralImage& image) {
  const std::size_t plane = static_cast<std::size_t>(image.width()) * image.height();
  std::vector<Real> stack;
  stack.reserve(3 * plane);
  for (Band b : {Band::Red, Band::RedEdge, Band::Green}) {
    const auto& samples = image.band(b);
    stack.insert(stack.end(), samples.begin(), samples.end());
  }
  return normalize_joint(Tensor::from({1, 3, image.height(), image.width()}, std::move(stack)));
}

std::string spectral_content_hash(const SpectralImage& image) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) {
      h ^= (v >> (8 * i)) & 0xFFu;
      h *= 1099511628211ULL;
    }
  };
  mix(static_cast<std::uint64_t>(image.width()), 4);
  mix(static_cast<std::uint64_t>(image.height()), 4);
  mix(static_cast<std::uint64_t>(image.bit_depth()), 1);
  for (Band b : {Band::Red, Band::RedEdge, Band::Green}) {
    for (std::uint16_t v : image.band(b)) mix(v, 2);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Tensor fuse_bands_cached(const SpectralImage& image, const fs::path& cache_dir) {
  const fs::path path = cache_dir / (spectral_content_hash(image) + ".ppm");
  if (fs::exists(path)) return read_image(path);
  Tensor fused = fuse_bands(image);
  fs::create_directories(cache_dir);
  write_image(path, fused, true);
  return fused;
}

// ---------------------------------------------------------------------------
// Labels

namespace {

bool parse_real(std::string_view tok, Real& out) {
  const char* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

bool parse_int(std::string_view tok, int& out) {
  const char* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> toks;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) toks.push_back(line.substr(i, j - i));
    i = j;
  }
  return toks;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<BBox> load_labels(std::string_view text, int n_classes) {
  std::vector<BBox> boxes;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != 5) throw ParseError(line_no, "expected 'class cx cy w h', got " + std::to_string(toks.size()) + " fields");
    BBox b;
    Real vals[4];
    if (!parse_int(toks[0], b.class_id)) throw ParseError(line_no, "class id is not an integer");
    for (int k = 0; k < 4; ++k) {
      if (!parse_real(toks[static_cast<std::size_t>(k) + 1], vals[k])) throw ParseError(line_no, "malformed number");
    }
    b.cx = vals[0];
    b.cy = vals[1];
    b.w = vals[2];
    b.h = vals[3];
    if (b.class_id < 0 || b.class_id >= n_classes) {
      throw ParseError(line_no, "class id " + std::to_string(b.class_id) + " outside vocabulary of " +
                                    std::to_string(n_classes));
    }
    try {
      validate_box(b);
    } catch (const ValueError& e) {
      throw ParseError(line_no, std::string("value out of range: ") + e.what());
    }
    boxes.push_back(b);
  }
  return boxes;
}

std::string serialize_labels(const std::vector<BBox>& boxes) {
  std::string out;
  char line[128];
  for (const BBox& b : boxes) {
    std::snprintf(line, sizeof line, "%d %.6f %.6f %.6f %.6f\n", b.class_id, b.cx, b.cy, b.w, b.h);
    out += line;
  }
  return out;
}

std::vector<BBox> read_label_file(const fs::path& path, int n_classes) {
  try {
    return load_labels(read_text(path), n_classes);
  } catch (const ParseError& e) {
    throw ParseError(path.string(), e.line(), e.detail());
  }
}

void write_label_file(const fs::path& path, const std::vector<BBox>& boxes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << serialize_labels(boxes);
}

// ---------------------------------------------------------------------------
// Dataset layout

DatasetIndex load_dataset(const fs::path& root, const std::string& split) {
  const fs::path image_dir = root / "images" / split;
  const fs::path label_dir = root / "labels" / split;
  if (!fs::is_directory(image_dir)) throw IoError("missing split directory " + image_dir.string());

  DatasetIndex idx;
  idx.split = split;
  if (fs::exists(root / "classes.txt")) {
    std::istringstream is(read_text(root / "classes.txt"));
    std::string name;
    while (std::getline(is, name)) {
      while (!name.empty() && std::isspace(static_cast<unsigned char>(name.back()))) name.pop_back();
      if (!name.empty()) idx.classes.push_back(name);
    }
  }
  if (idx.classes.empty()) idx.classes = {"object"};

  std::map<std::string, fs::path> images;
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".png" || ext == ".ppm") images[entry.path().stem().string()] = entry.path();
  }
  std::set<std::string> labels;
  if (fs::is_directory(label_dir)) {
    for (const auto& entry : fs::directory_iterator(label_dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".txt") labels.insert(entry.path().stem().string());
    }
  }
  for (const auto& [stem, path] : images) {
    DatasetItem item{stem, path, {}};
    if (labels.count(stem)) {
      item.label = label_dir / (stem + ".txt");
      read_label_file(item.label, static_cast<int>(idx.classes.size()));
    } else {
      idx.warnings.push_back("image " + stem + " has no label file; treated as background");
    }
    idx.items.push_back(std::move(item));
  }
  for (const std::string& stem : labels) {
    if (!images.count(stem)) idx.warnings.push_back("label " + stem + " has no matching image");
  }
  if (idx.items.empty()) throw IoError("split '" + split + "' under " + root.string() + " has no images");
  return idx;
}

Dataset materialize_dataset(const DatasetIndex& index, int image_size) {
  Dataset ds;
  ds.classes = index.classes;
  for (const DatasetItem& item : index.items) {
    Sample s;
    s.name = item.stem;
    s.image = resize_image(read_image(item.image), image_size, image_size);
    if (!item.label.empty()) s.boxes = read_label_file(item.label, ds.n_classes());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_dataset(const Dataset& dataset, const fs::path& root, const std::string& split) {
  const fs::path image_dir = root / "images" / split;
  const fs::path label_dir = root / "labels" / split;
  fs::create_directories(image_dir);
  fs::create_directories(label_dir);
  {
    std::ofstream os(root / "classes.txt", std::ios::trunc);
    for (const std::string& c : dataset.classes) os << c << '\n';
  }
  for (const Sample& s : dataset.samples) {
    write_image(image_dir / (s.name + ".png"), s.image);
    write_label_file(label_dir / (s.name + ".txt"), s.boxes);
  }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

struct Shape2D {
  int x1, y1, x2, y2;  // pixel edges, exclusive upper
  bool ellipse;
  int class_id;
};

bool covers(const Shape2D& s, int row, int col) {
  const Real px = col + 0.5, py = row + 0.5;
  if (!s.ellipse) return px >= s.x1 && px < s.x2 && py >= s.y1 && py < s.y2;
  const Real cx = 0.5 * (s.x1 + s.x2), cy = 0.5 * (s.y1 + s.y2);
  const Real a = 0.5 * (s.x2 - s.x1), b = 0.5 * (s.y2 - s.y1);
  const Real u = (px - cx) / a, v = (py - cy) / b;
  return u * u + v * v <= 1.0;
}

Real quantize(Real v) { return static_cast<Real>(to_u8(v)) / 255.0; }

}  // namespace

Dataset synth_dataset(std::uint64_t seed, int n_images, int image_size, const SynthOptions& opt) {
  if (image_size <= 0 || image_size % 32 != 0) throw ShapeError("synthetic image size must be a multiple of 32");
  if (n_images < 0) throw ValueError("n_images must be non-negative");
  if (opt.n_classes <= 0 || opt.min_objects < 0 || opt.max_objects < opt.min_objects ||
      !(opt.min_size > 0.0 && opt.min_size <= opt.max_size && opt.max_size + 2 * opt.margin < 1.0)) {
    throw ValueError("inconsistent synthetic dataset options");
  }
  static const std::array<std::array<Real, 3>, 6> palette{{{0.95, 0.85, 0.20},
                                                           {0.25, 0.90, 0.95},
                                                           {0.95, 0.35, 0.75},
                                                           {0.40, 0.95, 0.35},
                                                           {0.95, 0.55, 0.25},
                                                           {0.70, 0.60, 0.98}}};
  Dataset ds;
  ds.classes.clear();
  for (int c = 0; c < opt.n_classes; ++c) ds.classes.push_back(opt.n_classes == 1 ? "object" : "class" + std::to_string(c));

  const int S = image_size;
  const std::size_t plane = static_cast<std::size_t>(S) * S;
  for (int n = 0; n < n_images; ++n) {
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(n) + 1);
    std::uniform_real_distribution<Real> unit(0.0, 1.0);

    // Background: per-channel base plus a few low-frequency waves and fine noise.
    std::vector<Real> img(3 * plane);
    std::array<Real, 3> base;
    for (Real& b : base) b = 0.15 + 0.25 * unit(rng);
    struct Wave { Real fx, fy, phase, amp; };
    std::array<Wave, 3> waves;
    for (Wave& w : waves) {
      const Real angle = 2.0 * std::numbers::pi * unit(rng);
      const Real freq = 2.0 * std::numbers::pi * (1.0 + 4.0 * unit(rng)) / S;
      w = {freq * std::cos(angle), freq * std::sin(angle), 2.0 * std::numbers::pi * unit(rng), 0.03 + 0.04 * unit(rng)};
    }
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
          Real v = base[static_cast<std::size_t>(c)];
          for (const Wave& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase + c);
          v += 0.04 * (unit(rng) - 0.5);
          img[c * plane + static_cast<std::size_t>(y) * S + x] = v;
        }
      }
    }

    // Objects on integer pixel edges, pairwise separated by at least 2 px.
    std::uniform_int_distribution<int> count_dist(opt.min_objects, opt.max_objects);
    const int want = count_dist(rng);
    std::vector<Shape2D> shapes;
    const int lo = static_cast<int>(std::ceil(opt.margin * S));
    const int hi = S - lo;
    for (int attempt = 0; attempt < 100 && static_cast<int>(shapes.size()) < want; ++attempt) {
      // Odd pixel extents put every box centre on a half pixel, never on a
      // grid-cell boundary, so the centre cell is unambiguous.
      const int w = static_cast<int>(std::lround((opt.min_size + (opt.max_size - opt.min_size) * unit(rng)) * S)) | 1;
      const int h = static_cast<int>(std::lround((opt.min_size + (opt.max_size - opt.min_size) * unit(rng)) * S)) | 1;
      if (w < 4 || h < 4 || w > hi - lo || h > hi - lo) continue;
      const int x1 = lo + static_cast<int>(unit(rng) * (hi - lo - w + 1));
      const int y1 = lo + static_cast<int>(unit(rng) * (hi - lo - h + 1));
      const int class_id = static_cast<int>(unit(rng) * opt.n_classes) % opt.n_classes;
      const bool ellipse = opt.n_classes == 1 ? unit(rng) < 0.5 : (class_id % 2 == 1);
      Shape2D s{x1, y1, x1 + w, y1 + h, ellipse, class_id};
      const bool clash = std::any_of(shapes.begin(), shapes.end(), [&](const Shape2D& o) {
        return s.x1 < o.x2 + 2 && o.x1 < s.x2 + 2 && s.y1 < o.y2 + 2 && o.y1 < s.y2 + 2;
      });
      if (!clash) shapes.push_back(s);
    }

    Sample sample;
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05d", n);
    sample.name = name;
    for (const Shape2D& s : shapes) {
      const auto& color = palette[static_cast<std::size_t>(s.class_id) % palette.size()];
      const Real shade = 0.9 + 0.1 * unit(rng);
      for (int y = s.y1; y < s.y2; ++y) {
        for (int x = s.x1; x < s.x2; ++x) {
          if (!covers(s, y, x)) continue;
          for (int c = 0; c < 3; ++c) img[c * plane + static_cast<std::size_t>(y) * S + x] = shade * color[static_cast<std::size_t>(c)];
        }
      }
      sample.boxes.push_back(BBox::from_corners(s.class_id, static_cast<Real>(s.x1) / S, static_cast<Real>(s.y1) / S,
                                                static_cast<Real>(s.x2) / S, static_cast<Real>(s.y2) / S));
    }
    for (Real& v : img) v = quantize(v);
    sample.image = Tensor::from({1, 3, S, S}, std::move(img));
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

}  // namespace stnyolo
