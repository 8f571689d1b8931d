#pragma once

// Pose-cluster analysis: keypoint normalization, k-means with k-means++ seeding
// and restarts, elbow selection, and per-cluster joint heatmaps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "psyreid/core.hpp"
#include "psyreid/dataset.hpp"

namespace psyreid {

inline constexpr std::size_t kJoints = 17;  // COCO order
inline constexpr std::size_t kPoseDim = 2 * kJoints;
inline constexpr double kPoseSentinel = -1.0;
inline constexpr double kMinJointConfidence = 0.3;

struct Keypoint {
  double x = 0, y = 0, confidence = 0;
};

struct PoseRecord {
  std::string image_id;
  std::array<Keypoint, kJoints> keypoints{};
  std::optional<BBox> bbox;
};

using PoseVector = std::array<double, kPoseDim>;

/// Maps keypoints into the unit box frame; low-confidence joints become (-1, -1).
inline PoseVector normalize_pose(const PoseRecord& rec) {
  if (!rec.bbox) throw ParameterError("pose '" + rec.image_id + "' has no bounding box");
  const BBox& b = *rec.bbox;
  if (!(b.width() > 0) || !(b.height() > 0)) throw ParameterError("pose '" + rec.image_id + "' has a degenerate bbox");
  PoseVector v{};
  for (std::size_t j = 0; j < kJoints; ++j) {
    const auto& kp = rec.keypoints[j];
    if (!(kp.confidence >= 0.0 && kp.confidence <= 1.0))
      throw IntegrityError("pose '" + rec.image_id + "' joint " + std::to_string(j) + " confidence outside [0,1]");
    if (kp.confidence < kMinJointConfidence) {
      v[2 * j] = v[2 * j + 1] = kPoseSentinel;
      continue;
    }
    v[2 * j] = std::clamp((kp.x - b.x1) / b.width(), 0.0, 1.0);
    v[2 * j + 1] = std::clamp((kp.y - b.y1) / b.height(), 0.0, 1.0);
  }
  return v;
}

/// Reads `image_id,j0x,j0y,j0c,...,j16x,j16y,j16c` with optional x1,y1,x2,y2.
inline std::vector<PoseRecord> parse_pose_csv(std::istream& in, std::string_view source) {
  const auto t = CsvTable::parse(in, source);
  t.require({"image_id"});
  std::vector<PoseRecord> out;
  for (const auto& row : t.rows()) {
    PoseRecord p;
    p.image_id = std::string(t.get(row, "image_id"));
    for (std::size_t j = 0; j < kJoints; ++j) {
      const std::string base = "j" + std::to_string(j);
      auto x = parse_double(t.get(row, base + "x"));
      auto y = parse_double(t.get(row, base + "y"));
      auto c = parse_double(t.get(row, base + "c"));
      if (!x || !y || !c) throw ParseError(t.where(row) + ": bad or missing keypoint " + base);
      p.keypoints[j] = {*x, *y, *c};
    }
    if (t.has("x1") && !t.get(row, "x1").empty()) {
      auto x1 = parse_double(t.get(row, "x1")), y1 = parse_double(t.get(row, "y1"));
      auto x2 = parse_double(t.get(row, "x2")), y2 = parse_double(t.get(row, "y2"));
      if (!x1 || !y1 || !x2 || !y2) throw ParseError(t.where(row) + ": bad bbox");
      p.bbox = BBox{*x1, *y1, *x2, *y2};
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

/// n points of fixed dimension, stored row-major.
struct PointSet {
  std::size_t dim = 0;
  std::vector<double> data;

  std::size_t size() const noexcept { return dim == 0 ? 0 : data.size() / dim; }
  std::span<const double> operator[](std::size_t i) const noexcept { return {data.data() + i * dim, dim}; }

  void push_back(std::span<const double> p) {
    if (dim == 0) dim = p.size();
    if (p.size() != dim) throw ParameterError("PointSet: dimension mismatch");
    data.insert(data.end(), p.begin(), p.end());
  }
};

struct KMeansOptions {
  int max_iterations = 300;
  double tolerance = 1e-8;  // max centroid shift that ends Lloyd iterations
  int restarts = 10;
  std::optional<double> sentinel;  // coordinates equal to this are treated as missing
};

struct ClusterModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;        // k x dim
  std::vector<std::size_t> assignments;  // per input point, in input order
  double inertia = 0;
  std::vector<double> inertia_trace;  // per Lloyd iteration of the chosen restart
  std::vector<double> inertias;       // over candidate k when produced by elbow selection

  std::span<const double> centroid(std::size_t c) const { return {centroids.data() + c * dim, dim}; }
};

namespace detail {

/// Squared distance; with a sentinel, missing dimensions are skipped and the
/// sum is rescaled by dim / compared.
inline double sq_dist(std::span<const double> a, std::span<const double> b, const std::optional<double>& sentinel) {
  double s = 0;
  if (!sentinel) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      s += d * d;
    }
    return s;
  }
  std::size_t compared = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == *sentinel || b[i] == *sentinel) continue;
    const double d = a[i] - b[i];
    s += d * d;
    ++compared;
  }
  if (compared == 0) return 0.0;
  return s * static_cast<double>(a.size()) / static_cast<double>(compared);
}

struct LloydRun {
  std::vector<double> centroids;
  std::vector<std::size_t> assign;
  double inertia = 0;
  std::vector<double> trace;
};

inline double assign_points(const PointSet& pts, std::size_t k, const std::vector<double>& cents,
                            std::vector<std::size_t>& assign, const KMeansOptions& opt) {
  double inertia = 0;
  const std::size_t dim = pts.dim;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = sq_dist(pts[i], {cents.data() + c * dim, dim}, opt.sentinel);
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    assign[i] = arg;
    inertia += best;
  }
  return inertia;
}

inline LloydRun lloyd(const PointSet& pts, std::size_t k, std::uint64_t seed, const KMeansOptions& opt) {
  const std::size_t n = pts.size(), dim = pts.dim;
  Rng rng(seed);
  LloydRun run;
  run.centroids.resize(k * dim);

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(n);
  std::copy_n(pts[first].begin(), dim, run.centroids.begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(pts[i], {run.centroids.data() + (c - 1) * dim, dim}, opt.sentinel));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double target = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= d2[i];
        if (target < 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    std::copy_n(pts[pick].begin(), dim, run.centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
  }

  run.assign.assign(n, 0);
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k * dim);
  for (int it = 0; it < opt.max_iterations; ++it) {
    run.inertia = assign_points(pts, k, run.centroids, run.assign, opt);
    run.trace.push_back(run.inertia);

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    std::vector<std::size_t> members(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = run.assign[i];
      ++members[c];
      for (std::size_t d = 0; d < dim; ++d) {
        const double v = pts[i][d];
        if (opt.sentinel && v == *opt.sentinel) continue;
        sums[c * dim + d] += v;
        ++counts[c * dim + d];
      }
    }
    double shift = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (members[c] == 0) {
        // Empty cluster: move it onto the point farthest from its centroid.
        std::size_t far = 0;
        double far_d = -1;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = sq_dist(pts[i], {run.centroids.data() + run.assign[i] * dim, dim}, opt.sentinel);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        for (std::size_t d = 0; d < dim; ++d) {
          const double nv = pts[far][d];
          shift = std::max(shift, std::abs(nv - run.centroids[c * dim + d]));
          run.centroids[c * dim + d] = nv;
        }
        continue;
      }
      double moved = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        const std::size_t o = c * dim + d;
        const double nv = counts[o] ? sums[o] / static_cast<double>(counts[o]) : opt.sentinel.value_or(run.centroids[o]);
        const double delta = nv - run.centroids[o];
        moved += delta * delta;
        run.centroids[o] = nv;
      }
      shift = std::max(shift, std::sqrt(moved));
    }
    if (shift < opt.tolerance) break;
  }
  const double final_inertia = assign_points(pts, k, run.centroids, run.assign, opt);
  if (final_inertia < run.trace.back()) run.trace.push_back(final_inertia);
  run.inertia = final_inertia;
  return run;
}

}  // namespace detail

/// k-means with k-means++ seeding and `restarts` seeded restarts, keeping the
/// lowest-inertia run. Points are processed in a canonical (sorted) order, so
/// the clustering does not depend on input order.
inline ClusterModel kmeans(const PointSet& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opt = {}) {
  const std::size_t n = points.size();
  if (k < 1) throw ParameterError("kmeans needs k >= 1");
  if (n < k) throw ParameterError("kmeans needs at least k points (n=" + std::to_string(n) + ", k=" + std::to_string(k) + ")");

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::sort(perm.begin(), perm.end(), [&](auto a, auto b) {
    const auto pa = points[a], pb = points[b];
    return std::lexicographical_compare(pa.begin(), pa.end(), pb.begin(), pb.end());
  });
  PointSet canon;
  canon.dim = points.dim;
  canon.data.reserve(points.data.size());
  for (auto i : perm) canon.data.insert(canon.data.end(), points[i].begin(), points[i].end());

  std::optional<detail::LloydRun> best;
  for (int r = 0; r < std::max(1, opt.restarts); ++r) {
    auto run = detail::lloyd(canon, k, mix64(seed, static_cast<std::uint64_t>(r)), opt);
    if (!best || run.inertia < best->inertia) best = std::move(run);
  }

  ClusterModel m;
  m.k = k;
  m.dim = points.dim;
  m.centroids = std::move(best->centroids);
  m.inertia = best->inertia;
  m.inertia_trace = std::move(best->trace);
  m.assignments.resize(n);
  for (std::size_t j = 0; j < n; ++j) m.assignments[perm[j]] = best->assign[j];
  return m;
}

struct ElbowResult {
  std::size_t k = 1;
  std::vector<double> inertias;  // index i holds the inertia for k = i + 1
};

/// Fits k = 1..k_max and returns the k whose (k, inertia) point lies farthest
/// from the chord joining the first and last candidates.
inline ElbowResult elbow_select(const PointSet& points, std::size_t k_max, std::uint64_t seed, const KMeansOptions& opt = {}) {
  if (k_max < 1 || k_max > 12) throw ParameterError("k_max must be in 1..12");
  if (points.size() < k_max) throw ParameterError("elbow_select needs at least k_max points");
  ElbowResult r;
  for (std::size_t k = 1; k <= k_max; ++k) r.inertias.push_back(kmeans(points, k, seed, opt).inertia);
  if (k_max == 1) return r;
  const double x1 = 1, y1 = r.inertias.front();
  const double x2 = static_cast<double>(k_max), y2 = r.inertias.back();
  const double len = std::hypot(x2 - x1, y2 - y1);
  double best = -1;
  for (std::size_t k = 1; k <= k_max; ++k) {
    const double x = static_cast<double>(k), y = r.inertias[k - 1];
    const double d = std::abs((y2 - y1) * x - (x2 - x1) * y + x2 * y1 - y2 * x1) / len;
    if (d > best + 1e-12 * std::max(1.0, best)) {
      best = d;
      r.k = k;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

struct Heatmap {
  std::size_t grid = 0;
  std::vector<double> cells;  // row-major, row = y bin; max cell is 1 unless empty
  bool empty = true;

  double at(std::size_t row, std::size_t col) const { return cells[row * grid + col]; }
};

/// Density of non-sentinel joint positions of one cluster on a grid x grid
/// lattice over the unit square, scaled to a maximum of 1.
inline Heatmap joint_heatmap(const ClusterModel& model, const PointSet& poses, std::size_t cluster, std::size_t grid) {
  if (cluster >= model.k) throw ParameterError("cluster index out of range");
  if (grid == 0) throw ParameterError("grid must be positive");
  if (poses.dim % 2 != 0 || poses.size() != model.assignments.size())
    throw ParameterError("poses do not match the cluster model");
  Heatmap h;
  h.grid = grid;
  h.cells.assign(grid * grid, 0.0);
  const auto bin = [grid](double v) { return std::min(static_cast<std::size_t>(std::floor(v * grid)), grid - 1); };
  for (std::size_t i = 0; i < poses.size(); ++i) {
    if (model.assignments[i] != cluster) continue;
    const auto p = poses[i];
    for (std::size_t j = 0; j + 1 < p.size(); j += 2) {
      if (p[j] == kPoseSentinel || p[j + 1] == kPoseSentinel) continue;
      if (p[j] < 0 || p[j] > 1 || p[j + 1] < 0 || p[j + 1] > 1) continue;
      h.cells[bin(p[j + 1]) * grid + bin(p[j])] += 1.0;
    }
  }
  const double mx = *std::max_element(h.cells.begin(), h.cells.end());
  if (mx > 0) {
    h.empty = false;
    for (double& c : h.cells) c /= mx;
  }
  return h;
}

/// Plain (ASCII) PGM with 8-bit levels.
inline std::string heatmap_pgm(const Heatmap& h) {
  std::ostringstream o;
  o << "P2\n" << h.grid << ' ' << h.grid << "\n255\n";
  for (std::size_t r = 0; r < h.grid; ++r) {
    for (std::size_t c = 0; c < h.grid; ++c) {
      if (c) o << ' ';
      o << std::lround(255.0 * h.at(r, c));
    }
    o << '\n';
  }
  return o.str();
}

struct PoseClustering {
  std::vector<std::string> image_ids;
  PointSet points;  // normalized poses, aligned with image_ids
  ElbowResult elbow;
  ClusterModel model;
};

/// Normalizes every pose, picks k by the elbow rule and fits the final model.
inline PoseClustering cluster_poses(const std::vector<PoseRecord>& poses, std::size_t k_max, std::uint64_t seed) {
  PoseClustering out;
  out.points.dim = kPoseDim;
  for (const auto& p : poses) {
    const auto v = normalize_pose(p);
    out.image_ids.push_back(p.image_id);
    out.points.push_back(v);
  }
  KMeansOptions opt;
  opt.sentinel = kPoseSentinel;
  out.elbow = elbow_select(out.points, std::min(k_max, out.points.size()), seed, opt);
  out.model = kmeans(out.points, out.elbow.k, seed, opt);
  out.model.inertias = out.elbow.inertias;
  return out;
}

}  // namespace psyreid
