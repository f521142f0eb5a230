#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "polypseg/error.hpp"
#include "polypseg/image_io.hpp"
#include "polypseg/rng.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

/// One image [3, H, W] in [0, 1] with its binary mask [H, W].
struct Sample {
  Tensor<float> image;
  LabelTensor mask;
  std::string patient_id;
  std::string name;

  std::size_t height() const { return mask.dim(0); }
  std::size_t width() const { return mask.dim(1); }
};

inline void check_sample(const Sample& s) {
  require_rank(s.image, 3, "sample image");
  require_rank(s.mask, 2, "sample mask");
  if (s.image.dim(0) != 3 || s.image.dim(1) != s.mask.dim(0) || s.image.dim(2) != s.mask.dim(1)) {
    throw ShapeError("sample '" + s.name + "': image " + shape_str(s.image.shape()) +
                     " and mask " + shape_str(s.mask.shape()) + " disagree");
  }
}

// ------------------------------------------------------------------ splits

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw InvalidArgument("unknown split '" + s + "' (expected train, val or test)");
}

/// Sample names per split. No patient appears in more than one split.
struct SplitManifest {
  std::vector<std::string> train, val, test;
  bool patient_disjoint = true;

  std::vector<std::string>& names(Split s) {
    return s == Split::train ? train : s == Split::val ? val : test;
  }
  const std::vector<std::string>& names(Split s) const {
    return s == Split::train ? train : s == Split::val ? val : test;
  }

  friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

/// Throws ManifestError if any patient spans two splits or a name is listed
/// twice; sets patient_disjoint on success.
inline void validate_manifest(SplitManifest& m, const std::map<std::string, std::string>& patient_of) {
  std::map<std::string, Split> patient_split;
  std::set<std::string> seen;
  for (Split s : {Split::train, Split::val, Split::test}) {
    for (const auto& name : m.names(s)) {
      if (!seen.insert(name).second) {
        throw ManifestError("sample '" + name + "' is listed more than once");
      }
      auto it = patient_of.find(name);
      if (it == patient_of.end()) throw ManifestError("sample '" + name + "' has no patient id");
      auto [pos, inserted] = patient_split.emplace(it->second, s);
      if (!inserted && pos->second != s) {
        m.patient_disjoint = false;
        throw ManifestError("patient '" + it->second + "' appears in both " +
                            to_string(pos->second) + " and " + to_string(s));
      }
    }
  }
  m.patient_disjoint = true;
}

struct Dataset {
  std::vector<Sample> samples;
  SplitManifest manifest;

  const Sample& by_name(const std::string& name) const {
    for (const auto& s : samples)
      if (s.name == name) return s;
    throw DatasetError("no sample named '" + name + "'");
  }

  std::vector<Sample> split(Split s) const {
    std::vector<Sample> out;
    for (const auto& name : manifest.names(s)) out.push_back(by_name(name));
    return out;
  }
};

// ---------------------------------------------------------- conversions

inline Tensor<float> image_from_png8(const Image8& img) {
  if (img.channels != 3) throw InvalidArgument("image_from_png8: expected RGB");
  Tensor<float> t({3, img.height, img.width});
  const std::size_t hw = img.height * img.width;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) t[c * hw + p] = img.pixels[p * 3 + c] / 255.0f;
  return t;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
}

inline Image8 image_to_png8(const Tensor<float>& image) {
  require_rank(image, 3, "image_to_png8");
  Image8 img{image.dim(2), image.dim(1), 3, {}};
  const std::size_t hw = img.height * img.width;
  img.pixels.resize(hw * 3);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) img.pixels[p * 3 + c] = to_byte(image[c * hw + p]);
  return img;
}

/// Gray values of 128 and above are polyp.
inline LabelTensor mask_from_png8(const Image8& img) {
  if (img.channels != 1) throw InvalidArgument("mask_from_png8: expected grayscale");
  LabelTensor m({img.height, img.width});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = img.pixels[i] >= 128 ? 1 : 0;
  return m;
}

/// Labels rendered as 0 (background) and 255 (polyp); accepts [H, W].
inline Image8 mask_to_png8(const LabelTensor& mask) {
  require_rank(mask, 2, "mask_to_png8");
  Image8 img{mask.dim(1), mask.dim(0), 1, std::vector<std::uint8_t>(mask.size())};
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
  return img;
}

// ----------------------------------------------------------------- loading

inline Sample load_sample(const std::filesystem::path& image_path,
                          const std::filesystem::path& mask_path, std::string name,
                          std::string patient) {
  Sample s{image_from_png8(read_png_rgb(image_path)), mask_from_png8(read_png_gray(mask_path)),
           std::move(patient), std::move(name)};
  check_sample(s);
  return s;
}

/// Reads root/images/*.png with matching root/masks/*.png and the optional
/// root/split.txt (name<TAB>patient<TAB>split per line, '#' comments). Without
/// a manifest every sample is its own patient in the train split.
inline Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const fs::path images = root / "images", masks = root / "masks";
  if (!fs::is_directory(images)) throw DatasetError("missing directory '" + images.string() + "'");
  if (!fs::is_directory(masks)) throw DatasetError("missing directory '" + masks.string() + "'");

  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(images)) {
    if (e.is_regular_file() && e.path().extension() == ".png") stems.push_back(e.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw DatasetError("no PNG images under '" + images.string() + "'");

  std::map<std::string, std::string> patient_of;
  Dataset ds;
  const fs::path split_path = root / "split.txt";
  if (fs::exists(split_path)) {
    std::ifstream in(split_path);
    if (!in) throw FileError("cannot read '" + split_path.string() + "'");
    std::string line;
    std::size_t lineno = 0;
    std::set<std::string> known(stems.begin(), stems.end());
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> fields;
      std::stringstream ss(line);
      for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
      if (fields.size() != 3) {
        throw ManifestError(split_path.string() + ":" + std::to_string(lineno) +
                            ": expected name<TAB>patient<TAB>split");
      }
      if (!known.count(fields[0])) {
        throw DatasetError(split_path.string() + ":" + std::to_string(lineno) +
                           ": no image for sample '" + fields[0] + "'");
      }
      Split s;
      try {
        s = parse_split(fields[2]);
      } catch (const InvalidArgument& e) {
        throw ManifestError(split_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
      patient_of[fields[0]] = fields[1];
      ds.manifest.names(s).push_back(fields[0]);
    }
  } else {
    for (const auto& stem : stems) {
      patient_of[stem] = stem;
      ds.manifest.train.push_back(stem);
    }
  }
  validate_manifest(ds.manifest, patient_of);

  for (const auto& stem : stems) {
    const fs::path mask_path = masks / (stem + ".png");
    if (!fs::exists(mask_path)) throw DatasetError("image '" + stem + "' has no mask file");
    auto it = patient_of.find(stem);
    const std::string patient = it == patient_of.end() ? stem : it->second;
    ds.samples.push_back(load_sample(images / (stem + ".png"), mask_path, stem, patient));
  }
  return ds;
}

/// Writes the layout read by load_dataset.
inline void write_dataset(const std::filesystem::path& root, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (!ec) fs::create_directories(root / "masks", ec);
  if (ec) throw FileError("cannot create dataset directory '" + root.string() + "': " + ec.message());
  for (const auto& s : ds.samples) {
    write_png(root / "images" / (s.name + ".png"), image_to_png8(s.image));
    write_png(root / "masks" / (s.name + ".png"), mask_to_png8(s.mask));
  }
  std::map<std::string, std::string> patient_of;
  for (const auto& s : ds.samples) patient_of[s.name] = s.patient_id;
  std::ofstream out(root / "split.txt", std::ios::binary);
  if (!out) throw FileError("cannot write '" + (root / "split.txt").string() + "'");
  for (Split sp : {Split::train, Split::val, Split::test})
    for (const auto& name : ds.manifest.names(sp))
      out << name << '\t' << patient_of.at(name) << '\t' << to_string(sp) << '\n';
  if (!out) throw FileError("cannot write '" + (root / "split.txt").string() + "'");
}

// ------------------------------------------------------------ augmentation

enum class CropAnchor { center, top_left, top_right, bottom_left, bottom_right };

struct AugmentConfig {
  bool enabled = true;
  // Output size; 0 keeps the full input extent along that axis.
  std::size_t crop_h = 0;
  std::size_t crop_w = 0;
  double rotation_min_deg = -90.0;
  double rotation_max_deg = 90.0;
  double zoom_min = 0.8;
  double zoom_max = 1.2;
  double shear_min = 0.0;
  double shear_max = 0.4;

  void validate() const {
    if (rotation_min_deg > rotation_max_deg || zoom_min > zoom_max || shear_min > shear_max) {
      throw InvalidArgument("augment: range minimum exceeds maximum");
    }
    if (zoom_min <= 0.0) throw InvalidArgument("augment: zoom must be positive");
  }
};

/// One set of transform parameters, shared by an image and its mask.
struct AugmentDraw {
  CropAnchor anchor = CropAnchor::center;
  double rotation_deg = 0.0;
  double zoom = 1.0;
  double shear = 0.0;
};

inline AugmentDraw draw_augment(const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  AugmentDraw d;
  d.anchor = static_cast<CropAnchor>(rng.below(5));
  d.rotation_deg = rng.uniform(cfg.rotation_min_deg, cfg.rotation_max_deg);
  d.zoom = rng.uniform(cfg.zoom_min, cfg.zoom_max);
  d.shear = rng.uniform(cfg.shear_min, cfg.shear_max);
  return d;
}

namespace detail {

// Maps output pixel (x, y) to source coordinates in the uncropped input.
// Forward model about the crop centre: rotate (counterclockwise on screen),
// then zoom, then shear (x' = x + s*y).
struct Warp {
  double ox, oy;  // crop origin in the input
  double cx, cy;  // centre of the output frame
  double a, b, c, d;  // inverse of the forward 2x2 matrix

  std::pair<double, double> source(double x, double y) const {
    const double u = x - cx, v = y - cy;
    return {ox + cx + a * u + b * v, oy + cy + c * u + d * v};
  }
};

inline double snap_unit(double v) {
  for (double t : {-1.0, 0.0, 1.0})
    if (std::abs(v - t) < 1e-12) return t;
  return v;
}

inline Warp make_warp(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w,
                      const AugmentDraw& dr) {
  Warp w{};
  const double dy = static_cast<double>(in_h - out_h), dx = static_cast<double>(in_w - out_w);
  switch (dr.anchor) {
    case CropAnchor::center: w.oy = std::floor(dy / 2); w.ox = std::floor(dx / 2); break;
    case CropAnchor::top_left: w.oy = 0; w.ox = 0; break;
    case CropAnchor::top_right: w.oy = 0; w.ox = dx; break;
    case CropAnchor::bottom_left: w.oy = dy; w.ox = 0; break;
    case CropAnchor::bottom_right: w.oy = dy; w.ox = dx; break;
  }
  w.cx = (static_cast<double>(out_w) - 1.0) / 2.0;
  w.cy = (static_cast<double>(out_h) - 1.0) / 2.0;
  const double t = dr.rotation_deg * std::numbers::pi / 180.0;
  const double cs = snap_unit(std::cos(t)), sn = snap_unit(std::sin(t));
  // R = [[cs, sn], [-sn, cs]] acting on (x, y) with y pointing down.
  // Z = zoom * I, S = [[1, shear], [0, 1]]; forward F = S * Z * R.
  const double z = dr.zoom, s = dr.shear;
  const double f00 = z * (cs - s * sn), f01 = z * (sn + s * cs);
  const double f10 = z * (-sn), f11 = z * cs;
  const double det = f00 * f11 - f01 * f10;
  w.a = f11 / det;
  w.b = -f01 / det;
  w.c = -f10 / det;
  w.d = f00 / det;
  return w;
}

}  // namespace detail

inline std::pair<std::size_t, std::size_t> augment_output_size(const AugmentConfig& cfg,
                                                               std::size_t h, std::size_t w) {
  const std::size_t oh = cfg.crop_h ? cfg.crop_h : h, ow = cfg.crop_w ? cfg.crop_w : w;
  if (oh > h || ow > w) {
    throw InvalidArgument("augment: crop " + std::to_string(oh) + "x" + std::to_string(ow) +
                          " exceeds sample " + std::to_string(h) + "x" + std::to_string(w));
  }
  return {oh, ow};
}

/// Nearest-neighbour warp of a mask; out-of-frame pixels become background.
inline LabelTensor warp_mask(const LabelTensor& mask, const AugmentConfig& cfg,
                             const AugmentDraw& draw) {
  require_rank(mask, 2, "warp_mask");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  const auto [oh, ow] = augment_output_size(cfg, h, w);
  const auto warp = detail::make_warp(h, w, oh, ow, draw);
  LabelTensor out({oh, ow}, 0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      const auto [sx, sy] = warp.source(static_cast<double>(x), static_cast<double>(y));
      const double rx = std::floor(sx + 0.5), ry = std::floor(sy + 0.5);
      if (rx < 0 || ry < 0 || rx >= static_cast<double>(w) || ry >= static_cast<double>(h)) continue;
      out[y * ow + x] = mask[static_cast<std::size_t>(ry) * w + static_cast<std::size_t>(rx)];
    }
  return out;
}

/// Bilinear warp of a [C, H, W] image; samples outside the frame read 0.
inline Tensor<float> warp_image(const Tensor<float>& image, const AugmentConfig& cfg,
                                const AugmentDraw& draw) {
  require_rank(image, 3, "warp_image");
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto [oh, ow] = augment_output_size(cfg, h, w);
  const auto warp = detail::make_warp(h, w, oh, ow, draw);
  Tensor<float> out({ch, oh, ow}, 0.0f);
  auto px = [&](std::size_t c, long y, long x) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) return 0.0;
    return image[(c * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
  };
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      const auto [sx, sy] = warp.source(static_cast<double>(x), static_cast<double>(y));
      if (sx <= -1.0 || sy <= -1.0 || sx >= static_cast<double>(w) || sy >= static_cast<double>(h))
        continue;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      for (std::size_t c = 0; c < ch; ++c) {
        const double v = (1 - fy) * ((1 - fx) * px(c, y0, x0) + fx * px(c, y0, x0 + 1)) +
                         fy * ((1 - fx) * px(c, y0 + 1, x0) + fx * px(c, y0 + 1, x0 + 1));
        out[(c * oh + y) * ow + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return out;
}

inline Sample apply_augment(const Sample& s, const AugmentConfig& cfg, const AugmentDraw& draw) {
  check_sample(s);
  return Sample{warp_image(s.image, cfg, draw), warp_mask(s.mask, cfg, draw), s.patient_id, s.name};
}

/// Random crop, rotation, zoom and shear drawn once and applied to both the
/// image (bilinear) and the mask (nearest). Disabled configs still crop.
inline Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled) return apply_augment(s, cfg, AugmentDraw{});
  return apply_augment(s, cfg, draw_augment(cfg, rng));
}

// ---------------------------------------------------------------- batching

struct Batch {
  Tensor<float> images;  // [N, 3, H, W]
  LabelTensor masks;     // [N, H, W]
  std::vector<std::size_t> indices;
};

/// Partition of [0, n) into consecutive batches; the last may be partial.
inline std::vector<std::vector<std::size_t>> batch_order(std::size_t n, std::size_t batch_size,
                                                         bool shuffle, Rng& rng) {
  if (batch_size == 0) throw InvalidArgument("batch_size must be at least 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  }
  return out;
}

inline Batch stack(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw InvalidArgument("stack: empty batch");
  const std::size_t h = samples[0]->height(), w = samples[0]->width(), hw = h * w;
  Batch b{Tensor<float>({samples.size(), 3, h, w}), LabelTensor({samples.size(), h, w}), {}};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = *samples[i];
    check_sample(s);
    if (s.height() != h || s.width() != w) {
      throw ShapeError("batch mixes sample sizes " + std::to_string(h) + "x" + std::to_string(w) +
                       " and " + std::to_string(s.height()) + "x" + std::to_string(s.width()));
    }
    std::copy(s.image.vec().begin(), s.image.vec().end(), b.images.data() + i * 3 * hw);
    std::copy(s.mask.vec().begin(), s.mask.vec().end(), b.masks.data() + i * hw);
  }
  return b;
}

inline std::vector<Batch> make_batches(const std::vector<Sample>& samples, std::size_t batch_size,
                                       bool shuffle, Rng& rng) {
  std::vector<Batch> out;
  for (auto& idx : batch_order(samples.size(), batch_size, shuffle, rng)) {
    std::vector<const Sample*> ptrs;
    for (auto i : idx) ptrs.push_back(&samples[i]);
    out.push_back(stack(ptrs));
    out.back().indices = idx;
  }
  return out;
}

// --------------------------------------------------------------- synthetic

/// Generator ranges, as fractions of min(H, W) where spatial.
struct SyntheticConfig {
  std::size_t samples_per_patient = 5;
  // Probabilities of 0, 1 and 2 blobs.
  std::array<double, 3> blob_count_p{0.15, 0.6, 0.25};
  double radius_min = 0.09;
  double radius_max = 0.2;
  double contrast_min = 0.15;
  double contrast_max = 0.35;
  // Low-frequency background variation and per-pixel noise.
  double background_amplitude = 0.08;
  double pixel_noise = 0.02;
};

namespace detail {

// Smooth field in roughly [-1, 1]: a few random low-frequency cosines.
inline std::vector<double> low_frequency_field(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> f(h * w, 0.0);
  constexpr int kWaves = 4;
  for (int k = 0; k < kWaves; ++k) {
    const double fx = rng.uniform(0.3, 1.5) * 2 * std::numbers::pi / static_cast<double>(w);
    const double fy = rng.uniform(0.3, 1.5) * 2 * std::numbers::pi / static_cast<double>(h);
    const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
    const double sx = rng.uniform() < 0.5 ? -1.0 : 1.0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        f[y * w + x] += std::cos(sx * fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase) / kWaves;
  }
  return f;
}

}  // namespace detail

/// Textured background with 0-2 elliptical blobs per image. Blob pixels are
/// brighter and redder than the surrounding tissue, shaded like a dome whose
/// rim still steps up by at least 0.6 of the drawn contrast, and carry a fine
/// stripe texture. The mask is the exact support of the ellipses at pixel
/// centres. Images are quantized to 8 bits so they survive a PNG round trip
/// unchanged. Consecutive groups of samples_per_patient share a patient id.
inline std::vector<Sample> generate_synthetic(std::size_t n, std::size_t h, std::size_t w, Rng& rng,
                                              const SyntheticConfig& cfg = {}) {
  if (n == 0) throw InvalidArgument("generate_synthetic: n must be positive");
  if (h == 0 || w == 0 || h % 32 || w % 32) {
    throw InvalidArgument("generate_synthetic: size must be a positive multiple of 32");
  }
  if (cfg.samples_per_patient == 0) throw InvalidArgument("generate_synthetic: samples_per_patient must be positive");
  const double scale = static_cast<double>(std::min(h, w));
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.split(i);
    Sample s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%05zu", i);
    s.name = buf;
    std::snprintf(buf, sizeof buf, "p%04zu", i / cfg.samples_per_patient);
    s.patient_id = buf;
    s.image = Tensor<float>({3, h, w});
    s.mask = LabelTensor({h, w}, 0);

    const std::array<double, 3> base{r.uniform(0.45, 0.65), r.uniform(0.25, 0.4), r.uniform(0.2, 0.35)};
    std::array<std::vector<double>, 3> field;
    for (auto& f : field) f = detail::low_frequency_field(h, w, r);
    std::vector<double> img(3 * h * w);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < h * w; ++p)
        img[c * h * w + p] = base[c] + cfg.background_amplitude * field[c][p];

    const double u = r.uniform();
    const int blobs = u < cfg.blob_count_p[0] ? 0 : u < cfg.blob_count_p[0] + cfg.blob_count_p[1] ? 1 : 2;
    for (int b = 0; b < blobs; ++b) {
      const double ra = r.uniform(cfg.radius_min, cfg.radius_max) * scale;
      const double rb = r.uniform(cfg.radius_min, cfg.radius_max) * scale;
      const double margin = std::max(ra, rb);
      const double cx = r.uniform(margin, static_cast<double>(w) - margin);
      const double cy = r.uniform(margin, static_cast<double>(h) - margin);
      const double phi = r.uniform(0.0, std::numbers::pi);
      const double contrast = r.uniform(cfg.contrast_min, cfg.contrast_max);
      const double stripe = r.uniform(0.5, 1.0);
      const double cp = std::cos(phi), sp = std::sin(phi);
      static constexpr std::array<double, 3> kTint{1.0, 0.45, 0.35};
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
          const double eu = (cp * dx + sp * dy) / ra, ev = (-sp * dx + cp * dy) / rb;
          const double rho2 = eu * eu + ev * ev;
          if (rho2 > 1.0) continue;
          s.mask[y * w + x] = 1;
          const double shade = contrast * (0.6 + 0.4 * (1.0 - rho2));
          const double tex = 0.03 * std::cos(stripe * (static_cast<double>(x) + static_cast<double>(y)));
          for (std::size_t c = 0; c < 3; ++c) img[c * h * w + y * w + x] += kTint[c] * shade + tex;
        }
    }
    for (std::size_t k = 0; k < img.size(); ++k) {
      const double v = img[k] + cfg.pixel_noise * r.normal();
      s.image[k] = to_byte(v) / 255.0f;
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Patient-level split: the last max(1, round(P/12)) patients form the test
/// split, the same number before them the validation split, the rest train.
inline SplitManifest split_by_patient(const std::vector<Sample>& samples) {
  std::vector<std::string> patients;
  for (const auto& s : samples)
    if (std::find(patients.begin(), patients.end(), s.patient_id) == patients.end())
      patients.push_back(s.patient_id);
  if (patients.size() < 3) throw InvalidArgument("split_by_patient: need at least 3 patients");
  const std::size_t p = patients.size();
  const std::size_t held = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(p / 12.0)));
  std::map<std::string, Split> split_of;
  for (std::size_t i = 0; i < p; ++i) {
    split_of[patients[i]] = i >= p - held ? Split::test : i >= p - 2 * held ? Split::val : Split::train;
  }
  SplitManifest m;
  std::map<std::string, std::string> patient_of;
  for (const auto& s : samples) {
    m.names(split_of.at(s.patient_id)).push_back(s.name);
    patient_of[s.name] = s.patient_id;
  }
  validate_manifest(m, patient_of);
  return m;
}

}  // namespace polypseg
