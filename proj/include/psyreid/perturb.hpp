#pragma once

// Parameterized stimulus perturbations and sweep materialization.
//
// Every operator maps an RGB image to an image of the same size. Randomized
// kinds (occlude_voc, rain, snow) draw only from PerturbationSpec::seed, so the
// output is a pure function of (pixels, kind, level, seed).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "psyreid/core.hpp"
#include "psyreid/dataset.hpp"
#include "psyreid/image.hpp"

namespace psyreid {

enum class PerturbKind {
  identity,
  gaussian_blur,
  occlude_bottom,
  occlude_left,
  occlude_repeat,
  occlude_voc,
  partial_detection,
  jpeg,
  translate,
  scale,
  rain,
  snow,
};

inline constexpr PerturbKind kAllKinds[] = {
    PerturbKind::identity,       PerturbKind::gaussian_blur,     PerturbKind::occlude_bottom, PerturbKind::occlude_left,
    PerturbKind::occlude_repeat, PerturbKind::occlude_voc,       PerturbKind::partial_detection, PerturbKind::jpeg,
    PerturbKind::translate,      PerturbKind::scale,             PerturbKind::rain,           PerturbKind::snow,
};

inline std::string_view to_string(PerturbKind k) {
  switch (k) {
    case PerturbKind::identity: return "identity";
    case PerturbKind::gaussian_blur: return "gaussian_blur";
    case PerturbKind::occlude_bottom: return "occlude_bottom";
    case PerturbKind::occlude_left: return "occlude_left";
    case PerturbKind::occlude_repeat: return "occlude_repeat";
    case PerturbKind::occlude_voc: return "occlude_voc";
    case PerturbKind::partial_detection: return "partial_detection";
    case PerturbKind::jpeg: return "jpeg";
    case PerturbKind::translate: return "translate";
    case PerturbKind::scale: return "scale";
    case PerturbKind::rain: return "rain";
    case PerturbKind::snow: return "snow";
  }
  return "identity";
}

inline PerturbKind parse_perturb_kind(std::string_view s) {
  for (auto k : kAllKinds)
    if (to_string(k) == s) return k;
  throw ParameterError("unknown perturbation kind '" + std::string(s) + "'");
}

inline bool is_seeded(PerturbKind k) noexcept {
  return k == PerturbKind::occlude_voc || k == PerturbKind::rain || k == PerturbKind::snow;
}

/// Level at which the kind is the identity transform. For jpeg this is the
/// best quality setting, which is close to but not exactly lossless. For rain
/// (inverse density) it is +inf.
inline double anchor_level(PerturbKind k) noexcept {
  switch (k) {
    case PerturbKind::jpeg: return 100.0;
    case PerturbKind::scale: return 1.0;
    case PerturbKind::rain: return std::numeric_limits<double>::infinity();
    default: return 0.0;
  }
}

/// Throws ParameterError when `level` is outside the kind's domain.
inline void check_level(PerturbKind k, double level) {
  const auto fail = [&](std::string_view domain) {
    throw ParameterError(std::string(to_string(k)) + " level " + format_double(level) + " outside domain " +
                         std::string(domain));
  };
  if (std::isnan(level)) fail("(NaN)");
  switch (k) {
    case PerturbKind::identity: return;
    case PerturbKind::gaussian_blur:
      if (!(level >= 0) || std::isinf(level)) fail("sigma >= 0");
      return;
    case PerturbKind::occlude_bottom:
    case PerturbKind::occlude_left:
    case PerturbKind::occlude_repeat:
    case PerturbKind::occlude_voc:
    case PerturbKind::snow:
      if (!(level >= 0 && level <= 1)) fail("[0, 1]");
      return;
    case PerturbKind::partial_detection:
      if (!(level >= 0 && level < 1)) fail("[0, 1)");
      return;
    case PerturbKind::jpeg:
      if (!(level >= 1 && level <= 100) || level != std::floor(level)) fail("integers 1..100");
      return;
    case PerturbKind::translate:
      if (!(level >= -1 && level <= 1)) fail("[-1, 1]");
      return;
    case PerturbKind::scale:
      if (!(level > 0) || std::isinf(level)) fail("s > 0");
      return;
    case PerturbKind::rain:
      if (!(level > 0)) fail("r > 0 (inf for no rain)");
      return;
  }
}

struct PerturbationSpec {
  PerturbKind kind = PerturbKind::identity;
  double level = 0.0;
  std::uint64_t seed = 0;
};

struct StimulusSweep {
  PerturbKind kind = PerturbKind::identity;
  std::vector<double> levels;
  std::uint64_t seed = 0;

  /// Index of the identity anchor within `levels`.
  std::size_t anchor_index() const {
    const double a = anchor_level(kind);
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (levels[i] == a) return i;
    throw ParameterError("sweep for " + std::string(to_string(kind)) + " lacks its identity anchor " + format_double(a));
  }

  void validate() const {
    if (levels.empty()) throw ParameterError("sweep levels must be non-empty");
    for (double l : levels) check_level(kind, l);
    if (levels.size() > 1) {
      const bool up = levels[1] > levels[0];
      for (std::size_t i = 1; i < levels.size(); ++i) {
        if (up ? !(levels[i] > levels[i - 1]) : !(levels[i] < levels[i - 1]))
          throw ParameterError("sweep levels must be strictly monotone");
      }
    }
    (void)anchor_index();
  }
};

// ---------------------------------------------------------------------------
// Occluder assets
// ---------------------------------------------------------------------------

struct OccluderAsset {
  std::string asset_id;
  RgbaImage image;
  double mask_area_px = 0;
};

struct OccluderLibrary {
  std::vector<OccluderAsset> assets;

  bool empty() const noexcept { return assets.empty(); }

  /// Loads `assets.csv` (asset_id,path,mask_area_px) and the RGBA cutouts it names.
  static OccluderLibrary load(const fs::path& dir) {
    const auto table = CsvTable::read(dir / "assets.csv");
    table.require({"asset_id", "path", "mask_area_px"});
    OccluderLibrary lib;
    for (const auto& row : table.rows()) {
      OccluderAsset a;
      a.asset_id = std::string(table.get(row, "asset_id"));
      auto area = parse_double(table.get(row, "mask_area_px"));
      if (!area || !(*area > 0)) throw ParseError(table.where(row) + ": mask_area_px must be positive");
      a.mask_area_px = *area;
      a.image = load_rgba(dir / std::string(table.get(row, "path")));
      lib.assets.push_back(std::move(a));
    }
    std::sort(lib.assets.begin(), lib.assets.end(), [](const auto& x, const auto& y) { return x.asset_id < y.asset_id; });
    return lib;
  }
};

enum class CropSide { bottom, top, left, right };

inline CropSide parse_crop_side(std::string_view s) {
  if (s == "bottom") return CropSide::bottom;
  if (s == "top") return CropSide::top;
  if (s == "left") return CropSide::left;
  if (s == "right") return CropSide::right;
  throw ParameterError("unknown crop side '" + std::string(s) + "'");
}

/// Inputs beyond pixels and spec that some kinds need.
struct PerturbContext {
  const OccluderLibrary* occluders = nullptr;
  std::optional<BBox> pedestrian_box;  // occlude_voc coverage target; whole image when absent
  CropSide partial_side = CropSide::bottom;
};

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

namespace ops {

inline int proportion_px(double p, int extent) {
  return static_cast<int>(std::clamp(std::lround(p * extent), 0L, static_cast<long>(extent)));
}

inline Image gaussian_blur(const Image& src, double sigma) {
  if (sigma == 0.0) return src;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (double& w : kernel) w /= sum;

  const int W = src.width, H = src.height;
  std::vector<double> tmp(src.data.size());
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double acc[3] = {0, 0, 0};
      for (int i = -radius; i <= radius; ++i) {
        const auto* p = src.px(std::clamp(x + i, 0, W - 1), y);
        const double w = kernel[static_cast<std::size_t>(i + radius)];
        for (int c = 0; c < 3; ++c) acc[c] += w * p[c];
      }
      const std::size_t o = (static_cast<std::size_t>(y) * W + x) * 3;
      for (int c = 0; c < 3; ++c) tmp[o + c] = acc[c];
    }
  }
  Image out(W, H);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double acc[3] = {0, 0, 0};
      for (int i = -radius; i <= radius; ++i) {
        const std::size_t o = (static_cast<std::size_t>(std::clamp(y + i, 0, H - 1)) * W + x) * 3;
        const double w = kernel[static_cast<std::size_t>(i + radius)];
        for (int c = 0; c < 3; ++c) acc[c] += w * tmp[o + c];
      }
      auto* p = out.px(x, y);
      for (int c = 0; c < 3; ++c) p[c] = to_u8(acc[c]);
    }
  }
  return out;
}

inline Image occlude_bottom(Image img, double p) {
  const int rows = proportion_px(p, img.height);
  for (int y = img.height - rows; y < img.height; ++y) std::ranges::fill(img.row(y), std::uint8_t{0});
  return img;
}

inline Image occlude_left(Image img, double p) {
  const int cols = proportion_px(p, img.width);
  for (int y = 0; y < img.height; ++y) std::fill_n(img.row(y).begin(), cols * 3, std::uint8_t{0});
  return img;
}

inline Image occlude_repeat(Image img, double p) {
  const int rows = proportion_px(p, img.height);
  const int last_visible = img.height - rows - 1;
  if (rows == 0) return img;
  if (last_visible < 0) {
    std::ranges::fill(img.data, std::uint8_t{0});
    return img;
  }
  const auto src = img.row(last_visible);
  const std::vector<std::uint8_t> copy(src.begin(), src.end());
  for (int y = last_visible + 1; y < img.height; ++y) std::ranges::copy(copy, img.row(y).begin());
  return img;
}

inline Image partial_detection(const Image& src, double p, CropSide side) {
  const bool vertical = side == CropSide::bottom || side == CropSide::top;
  const int removed = proportion_px(p, vertical ? src.height : src.width);
  if (removed == 0) return src;
  const int keep_w = vertical ? src.width : std::max(1, src.width - removed);
  const int keep_h = vertical ? std::max(1, src.height - removed) : src.height;
  const int ox = side == CropSide::left ? src.width - keep_w : 0;
  const int oy = side == CropSide::top ? src.height - keep_h : 0;
  Image crop(keep_w, keep_h);
  for (int y = 0; y < keep_h; ++y)
    std::copy_n(src.px(ox, oy + y), static_cast<std::size_t>(keep_w) * 3, crop.px(0, y));
  return resize_bilinear(crop, src.width, src.height);
}

inline Image jpeg_roundtrip(const Image& src, int quality) {
  const auto bytes = encode_jpeg(src, quality);
  return decode_jpeg(bytes);
}

/// Positive `d` moves content right by round(d * width) pixels.
inline Image translate(const Image& src, double d) {
  const int shift = static_cast<int>(std::lround(d * src.width));
  Image out(src.width, src.height, 0);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      const int sx = x - shift;
      if (sx < 0 || sx >= src.width) continue;
      std::copy_n(src.px(sx, y), 3, out.px(x, y));
    }
  }
  return out;
}

/// Zoom by `s` about the image center; samples outside the source are black.
inline Image scale(const Image& src, double s) {
  if (s == 1.0) return src;
  const double cx = src.width / 2.0, cy = src.height / 2.0;
  Image out(src.width, src.height, 0);
  for (int y = 0; y < src.height; ++y) {
    const double sy = (y + 0.5 - cy) / s + cy - 0.5;
    if (sy < -0.5 || sy > src.height - 0.5) continue;
    for (int x = 0; x < src.width; ++x) {
      const double sx = (x + 0.5 - cx) / s + cx - 0.5;
      if (sx < -0.5 || sx > src.width - 0.5) continue;
      auto* p = out.px(x, y);
      for (int c = 0; c < 3; ++c) p[c] = to_u8(sample_bilinear(src, sx, sy, c));
    }
  }
  return out;
}

inline void blend_mask(Image& img, const std::vector<std::uint8_t>& mask, std::uint8_t value, double alpha) {
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    auto* p = img.data.data() + i * 3;
    for (int c = 0; c < 3; ++c) p[c] = to_u8(alpha * value + (1.0 - alpha) * p[c]);
  }
}

// Rendering constants for the weather overlays.
inline constexpr double kRainAreaPerStreak = 250.0;
inline constexpr double kRainLengthFrac = 0.15;
inline constexpr double kRainAngleDeg = -10.0;
inline constexpr std::uint8_t kRainGray = 200;
inline constexpr double kRainAlpha = 0.7;
inline constexpr double kSnowAreaPerFlake = 50.0;
inline constexpr double kSnowAlpha = 0.9;

inline Image rain(Image img, double inverse_density, std::uint64_t seed) {
  if (std::isinf(inverse_density)) return img;
  const int W = img.width, H = img.height;
  Rng rng(mix64(seed, fnv1a("rain")));
  const double expected = static_cast<double>(W) * H / (inverse_density * kRainAreaPerStreak);
  const auto count = rng.poisson(expected);
  const double len = kRainLengthFrac * H;
  const double rad = kRainAngleDeg * std::numbers::pi / 180.0;
  const double dx = std::sin(rad), dy = std::cos(rad);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(W) * H, 0);
  const int steps = std::max(1, static_cast<int>(std::ceil(len * 2)));
  for (std::uint64_t n = 0; n < count; ++n) {
    const double x0 = rng.uniform(0.0, W);
    const double y0 = rng.uniform(-len, static_cast<double>(H));
    for (int s = 0; s <= steps; ++s) {
      const double t = len * s / steps;
      const int px = static_cast<int>(std::floor(x0 + dx * t));
      const int py = static_cast<int>(std::floor(y0 + dy * t));
      if (py < 0 || py >= H) continue;
      for (int w = 0; w < 2; ++w) {
        const int qx = px + w;
        if (qx >= 0 && qx < W) mask[static_cast<std::size_t>(py) * W + qx] = 1;
      }
    }
  }
  blend_mask(img, mask, kRainGray, kRainAlpha);
  return img;
}

inline Image snow(Image img, double density, std::uint64_t seed) {
  const int W = img.width, H = img.height;
  Rng rng(mix64(seed, fnv1a("snow")));
  const auto count = rng.poisson(density * W * H / kSnowAreaPerFlake);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(W) * H, 0);
  for (std::uint64_t n = 0; n < count; ++n) {
    const int cx = static_cast<int>(rng.below(static_cast<std::uint64_t>(W)));
    const int cy = static_cast<int>(rng.below(static_cast<std::uint64_t>(H)));
    const int r = 1 + static_cast<int>(rng.below(2));
    for (int y = std::max(0, cy - r); y <= std::min(H - 1, cy + r); ++y)
      for (int x = std::max(0, cx - r); x <= std::min(W - 1, cx + r); ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) mask[static_cast<std::size_t>(y) * W + x] = 1;
  }
  blend_mask(img, mask, 255, kSnowAlpha);
  return img;
}

/// Pastes a seeded occluder cutout whose mask covers fraction `p` of the target
/// area, fully inside the image. The occluder is shrunk to fit when the
/// requested coverage would exceed the image extent.
inline Image occlude_voc(Image img, double p, std::uint64_t seed, const PerturbContext& ctx) {
  if (!ctx.occluders || ctx.occluders->empty()) throw ConfigError("occlude_voc needs a non-empty occluder library");
  if (p == 0.0) return img;
  Rng rng(mix64(seed, fnv1a("occlude_voc")));
  const auto& asset = ctx.occluders->assets[rng.below(ctx.occluders->assets.size())];

  double target = static_cast<double>(img.width) * img.height;
  if (ctx.pedestrian_box) {
    BBox b = *ctx.pedestrian_box;
    b.x1 = std::clamp(b.x1, 0.0, static_cast<double>(img.width));
    b.x2 = std::clamp(b.x2, 0.0, static_cast<double>(img.width));
    b.y1 = std::clamp(b.y1, 0.0, static_cast<double>(img.height));
    b.y2 = std::clamp(b.y2, 0.0, static_cast<double>(img.height));
    if (b.area() > 0) target = b.area();
  }
  double factor = std::sqrt(p * target / asset.mask_area_px);
  const double fit = std::min(static_cast<double>(img.width) / asset.image.width,
                              static_cast<double>(img.height) / asset.image.height);
  factor = std::min(factor, fit);
  const int ow = std::clamp(static_cast<int>(std::lround(asset.image.width * factor)), 1, img.width);
  const int oh = std::clamp(static_cast<int>(std::lround(asset.image.height * factor)), 1, img.height);
  const RgbaImage occ = resize_bilinear(asset.image, ow, oh);
  const int ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.width - ow + 1)));
  const int oy = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.height - oh + 1)));
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const auto* s = occ.px(x, y);
      if (s[3] == 0) continue;
      const double a = s[3] / 255.0;
      auto* d = img.px(ox + x, oy + y);
      for (int c = 0; c < 3; ++c) d[c] = to_u8(a * s[c] + (1.0 - a) * d[c]);
    }
  }
  return img;
}

}  // namespace ops

/// Applies one perturbation. Output dimensions always equal input dimensions.
inline Image apply_perturbation(const Image& img, const PerturbationSpec& spec, const PerturbContext& ctx = {}) {
  if (!img.valid()) throw ParameterError("apply_perturbation: invalid image");
  check_level(spec.kind, spec.level);
  switch (spec.kind) {
    case PerturbKind::identity: return img;
    case PerturbKind::gaussian_blur: return ops::gaussian_blur(img, spec.level);
    case PerturbKind::occlude_bottom: return ops::occlude_bottom(img, spec.level);
    case PerturbKind::occlude_left: return ops::occlude_left(img, spec.level);
    case PerturbKind::occlude_repeat: return ops::occlude_repeat(img, spec.level);
    case PerturbKind::occlude_voc: return ops::occlude_voc(img, spec.level, spec.seed, ctx);
    case PerturbKind::partial_detection: return ops::partial_detection(img, spec.level, ctx.partial_side);
    case PerturbKind::jpeg: return ops::jpeg_roundtrip(img, static_cast<int>(spec.level));
    case PerturbKind::translate: return ops::translate(img, spec.level);
    case PerturbKind::scale: return ops::scale(img, spec.level);
    case PerturbKind::rain: return ops::rain(img, spec.level, spec.seed);
    case PerturbKind::snow: return ops::snow(img, spec.level, spec.seed);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Sweep materialization
// ---------------------------------------------------------------------------

struct StimulusRow {
  std::string image_id;
  PerturbKind kind = PerturbKind::identity;
  double level = 0;
  std::size_t level_index = 0;
  std::string path;  // relative to the stimulus manifest's directory
  std::string status = "ok";

  bool ok() const noexcept { return status == "ok"; }
};

struct StimulusManifest {
  std::vector<StimulusRow> rows;
  fs::path base_dir;  // relative paths resolve against this

  fs::path resolve(const StimulusRow& r) const { return fs::path(r.path).is_absolute() ? fs::path(r.path) : base_dir / r.path; }

  std::size_t successes() const {
    return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.ok(); }));
  }

  /// Rows of one level, in manifest order.
  std::vector<const StimulusRow*> level(std::size_t index) const {
    std::vector<const StimulusRow*> out;
    for (const auto& r : rows)
      if (r.level_index == index) out.push_back(&r);
    return out;
  }
};

inline constexpr std::string_view kStimulusColumns = "image_id,kind,level,level_index,path,status";

inline void write_stimulus_manifest(std::ostream& out, const StimulusManifest& m) {
  out << kStimulusColumns << '\n';
  CsvWriter w(out);
  for (const auto& r : m.rows)
    w.row(r.image_id, std::string(to_string(r.kind)), format_double(r.level), r.level_index, r.path, r.status);
}

inline StimulusManifest read_stimulus_manifest(const fs::path& path) {
  const auto t = CsvTable::read(path);
  t.require({"image_id", "kind", "level", "level_index", "path", "status"});
  StimulusManifest m;
  m.base_dir = path.parent_path();
  for (const auto& row : t.rows()) {
    StimulusRow r;
    r.image_id = std::string(t.get(row, "image_id"));
    r.kind = parse_perturb_kind(t.get(row, "kind"));
    auto lvl = parse_double(t.get(row, "level"));
    auto idx = parse_int<std::size_t>(t.get(row, "level_index"));
    if (!lvl || !idx) throw ParseError(t.where(row) + ": bad level or level_index");
    r.level = *lvl;
    r.level_index = *idx;
    r.path = std::string(t.get(row, "path"));
    r.status = std::string(t.get(row, "status"));
    m.rows.push_back(std::move(r));
  }
  return m;
}

/// Per-image seed, independent of iteration order and thread count.
inline std::uint64_t stimulus_seed(std::uint64_t sweep_seed, std::string_view image_id, std::size_t level_index) {
  return mix64(sweep_seed, fnv1a(image_id), static_cast<std::uint64_t>(level_index));
}

inline bool safe_file_component(std::string_view id) {
  return !id.empty() && id != "." && id != ".." && id.find('/') == std::string_view::npos &&
         id.find('\\') == std::string_view::npos;
}

struct SweepOptions {
  unsigned threads = 1;
  fs::path source_root;  // base for relative manifest paths
  PerturbContext context;
};

/// Writes `out_dir/<kind>/<level_index>/<image_id>.png` for every query record
/// and level, plus `out_dir/<kind>/stimuli.csv`. Unreadable sources become
/// failed rows; a sweep with no successful row is an error.
inline StimulusManifest materialize_sweep(const Manifest& manifest, const StimulusSweep& sweep, const fs::path& out_dir,
                                          const SweepOptions& opts = {}) {
  sweep.validate();
  if (sweep.kind == PerturbKind::occlude_voc && (!opts.context.occluders || opts.context.occluders->empty()))
    throw ConfigError("occlude_voc sweep needs a non-empty occluder library");
  for (const auto& r : manifest.records)
    if (!safe_file_component(r.image_id)) throw ParameterError("image_id '" + r.image_id + "' is not usable as a file name");

  const fs::path kind_dir = out_dir / std::string(to_string(sweep.kind));
  const std::size_t n = manifest.records.size();
  const std::size_t levels = sweep.levels.size();
  StimulusManifest sm;
  sm.base_dir = kind_dir;
  sm.rows.resize(n * levels);
  // The anchor stimulus is the decoded source itself, so the jpeg anchor (q=100)
  // is the unperturbed image rather than a lossy re-encode.
  const std::size_t anchor = sweep.anchor_index();

  parallel_for(n, opts.threads, [&](std::size_t i) {
    const auto& rec = manifest.records[i];
    std::optional<Image> src;
    std::string failure;
    try {
      const fs::path p = fs::path(rec.path).is_absolute() ? fs::path(rec.path) : opts.source_root / rec.path;
      src = load_image(p);
    } catch (const std::exception& e) {
      failure = e.what();
    }
    PerturbContext ctx = opts.context;
    if (!ctx.pedestrian_box && rec.bbox) ctx.pedestrian_box = rec.bbox;
    for (std::size_t li = 0; li < levels; ++li) {
      auto& row = sm.rows[li * n + i];
      row.image_id = rec.image_id;
      row.kind = sweep.kind;
      row.level = sweep.levels[li];
      row.level_index = li;
      if (!src) {
        row.status = "failed: " + failure;
        continue;
      }
      const std::string rel = std::to_string(li) + "/" + rec.image_id + ".png";
      try {
        const PerturbationSpec spec{sweep.kind, sweep.levels[li], stimulus_seed(sweep.seed, rec.image_id, li)};
        save_png(li == anchor ? *src : apply_perturbation(*src, spec, ctx), kind_dir / rel);
        row.path = rel;
      } catch (const std::exception& e) {
        row.status = std::string("failed: ") + e.what();
      }
    }
  });

  if (sm.successes() == 0) throw IoError("sweep " + std::string(to_string(sweep.kind)) + " produced no stimuli");
  std::ostringstream csv;
  write_stimulus_manifest(csv, sm);
  write_file_atomic(kind_dir / "stimuli.csv", csv.str());
  return sm;
}

}  // namespace psyreid
