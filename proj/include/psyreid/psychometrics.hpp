#pragma once

// Item-response curves, four-parameter logistic fitting by Levenberg-Marquardt,
// half-performance thresholds, and area under the item-response curve.
//
//   y(x) = c / (1 + exp(-k (x - x0))) + y0

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "psyreid/core.hpp"
#include "psyreid/embed.hpp"
#include "psyreid/metrics.hpp"
#include "psyreid/perturb.hpp"

namespace psyreid {

struct IrcPoint {
  double level = 0;
  double rank1 = 0;
  double map = 0;
  std::size_t n_queries = 0;
};

struct ItemResponseCurve {
  PerturbKind kind = PerturbKind::identity;
  std::vector<IrcPoint> points;  // ascending level
  double unperturbed_rank1 = 0;

  /// Points with finite levels only (drops e.g. the rain anchor at +inf).
  ItemResponseCurve finite_part() const {
    ItemResponseCurve out{kind, {}, unperturbed_rank1};
    for (const auto& p : points)
      if (std::isfinite(p.level)) out.points.push_back(p);
    return out;
  }
};

/// One level's query embeddings, already computed by a provider.
struct LevelEmbeddings {
  double level = 0;
  const EmbeddingMatrix* queries = nullptr;
};

/// Evaluates every level against the unperturbed gallery. Each level must cover
/// the same set of query ids; queries absent from all levels are left out.
inline ItemResponseCurve assemble_irc(PerturbKind kind, std::span<const LevelEmbeddings> levels, const Manifest& queries,
                                      const GalleryView& gallery, const EvalConfig& cfg, unsigned threads = 1) {
  if (levels.empty()) throw ParameterError("assemble_irc needs at least one level");
  const std::set<std::string> reference(levels.front().queries->ids().begin(), levels.front().queries->ids().end());
  for (const auto& l : levels) {
    const std::set<std::string> ids(l.queries->ids().begin(), l.queries->ids().end());
    if (ids != reference)
      throw EvaluationError("query coverage differs at level " + format_double(l.level) + " (" + std::to_string(ids.size()) +
                            " vs " + std::to_string(reference.size()) + " ids)");
  }
  Manifest covered;
  covered.split = Split::query;
  covered.source = queries.source;
  for (const auto& r : queries.records)
    if (reference.count(r.image_id)) covered.records.push_back(r);
  if (covered.records.size() != reference.size())
    throw EvaluationError("embeddings reference query ids missing from the query manifest");

  ItemResponseCurve irc;
  irc.kind = kind;
  const double anchor = anchor_level(kind);
  bool have_anchor = false;
  for (const auto& l : levels) {
    const auto s = evaluate(QuerySet{covered, *l.queries}, gallery, cfg, threads);
    irc.points.push_back({l.level, s.rank1, s.map, s.evaluable});
    if (l.level == anchor || kind == PerturbKind::identity) {
      if (!have_anchor) irc.unperturbed_rank1 = s.rank1;
      have_anchor = true;
    }
  }
  if (!have_anchor) throw EvaluationError("sweep lacks the identity anchor level " + format_double(anchor));
  std::sort(irc.points.begin(), irc.points.end(), [](const auto& a, const auto& b) { return a.level < b.level; });
  for (std::size_t i = 1; i < irc.points.size(); ++i)
    if (irc.points[i].level == irc.points[i - 1].level) throw EvaluationError("duplicate level in item-response curve");
  return irc;
}

// ---------------------------------------------------------------------------
// Logistic model
// ---------------------------------------------------------------------------

struct LogisticFit {
  double c = 0, k = 0, x0 = 0, y0 = 0;
  double rss = 0;
  double initial_rss = 0;
  bool converged = false;
  bool flat = false;  // degenerate constant data; k = 0
  int iterations = 0;
  std::string note;

  double operator()(double x) const noexcept { return c / (1.0 + std::exp(-k * (x - x0))) + y0; }
};

inline double logistic(double x, double c, double k, double x0, double y0) noexcept {
  return c / (1.0 + std::exp(-k * (x - x0))) + y0;
}

struct LmOptions {
  double lambda0 = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 0.1;
  double rel_rss_tol = 1e-10;
  double step_tol = 1e-12;
  int max_iterations = 500;
  double flat_tol = 1e-6;
  double band_lo = -0.1;
  double band_hi = 1.1;
};

namespace detail {

/// Solves the 4x4 system A d = b by Gaussian elimination with partial pivoting.
inline std::optional<std::array<double, 4>> solve4(std::array<std::array<double, 4>, 4> a, std::array<double, 4> b) {
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (a[piv][col] == 0.0 || !std::isfinite(a[piv][col])) return std::nullopt;
    std::swap(a[piv], a[col]);
    std::swap(b[piv], b[col]);
    for (int r = col + 1; r < 4; ++r) {
      const double f = a[r][col] / a[col][col];
      for (int c = col; c < 4; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  std::array<double, 4> x{};
  for (int r = 3; r >= 0; --r) {
    double s = b[r];
    for (int c = r + 1; c < 4; ++c) s -= a[r][c] * x[c];
    x[r] = s / a[r][r];
  }
  return x;
}

inline double rss_of(std::span<const double> xs, std::span<const double> ys, const std::array<double, 4>& p) {
  double s = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - logistic(xs[i], p[0], p[1], p[2], p[3]);
    s += r * r;
  }
  return s;
}

}  // namespace detail

/// Least-squares fit of the four-parameter logistic by damped Gauss-Newton with
/// the analytic Jacobian. The result is canonicalized to c >= 0 (the model is
/// invariant under c -> -c, k -> -k, y0 -> y0 + c). Point order does not matter.
inline LogisticFit fit_logistic(std::span<const double> levels, std::span<const double> values, const LmOptions& opt = {}) {
  if (levels.size() != values.size()) throw ParameterError("fit_logistic: size mismatch");
  if (levels.size() < 5) throw ParameterError("fit_logistic needs at least 5 points");
  for (std::size_t i = 0; i < levels.size(); ++i)
    if (!std::isfinite(levels[i]) || !std::isfinite(values[i])) throw ParameterError("fit_logistic: non-finite point");

  // Canonical order keeps the floating-point reductions independent of input order.
  std::vector<std::size_t> idx(levels.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) {
    return levels[a] != levels[b] ? levels[a] < levels[b] : values[a] < values[b];
  });
  std::vector<double> xs, ys;
  for (auto i : idx) {
    xs.push_back(levels[i]);
    ys.push_back(values[i]);
  }

  const auto [ymin_it, ymax_it] = std::minmax_element(ys.begin(), ys.end());
  const double ymin = *ymin_it, ymax = *ymax_it;
  LogisticFit fit;
  if (ymax - ymin < opt.flat_tol) {
    fit.flat = true;
    fit.c = 0;
    fit.k = 0;
    fit.x0 = 0.5 * (xs.front() + xs.back());
    fit.y0 = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
    fit.rss = fit.initial_rss = detail::rss_of(xs, ys, {fit.c, fit.k, fit.x0, fit.y0});
    fit.converged = true;
    fit.note = "flat data";
    return fit;
  }

  std::array<double, 4> p{};
  p[0] = ymax - ymin;
  const double mid = 0.5 * (ymax + ymin);
  std::size_t nearest = 0;
  for (std::size_t i = 1; i < ys.size(); ++i)
    if (std::abs(ys[i] - mid) < std::abs(ys[nearest] - mid)) nearest = i;
  p[2] = xs[nearest];
  p[1] = ys.back() >= ys.front() ? 1.0 : -1.0;
  p[3] = ymin;

  double rss = detail::rss_of(xs, ys, p);
  fit.initial_rss = rss;
  double lambda = opt.lambda0;
  int it = 0;
  bool converged = rss == 0.0;
  while (!converged && it < opt.max_iterations) {
    ++it;
    std::array<std::array<double, 4>, 4> a{};
    std::array<double, 4> g{};
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double e = std::exp(-p[1] * (xs[i] - p[2]));
      const double s = std::isinf(e) ? 0.0 : 1.0 / (1.0 + e);
      const double ds = s * (1.0 - s);
      const std::array<double, 4> j = {s, p[0] * ds * (xs[i] - p[2]), -p[0] * p[1] * ds, 1.0};
      const double r = ys[i] - (p[0] * s + p[3]);
      for (int u = 0; u < 4; ++u) {
        g[u] += j[u] * r;
        for (int v = 0; v < 4; ++v) a[u][v] += j[u] * j[v];
      }
    }
    auto damped = a;
    for (int u = 0; u < 4; ++u) damped[u][u] += lambda * std::max(a[u][u], 1e-12);
    const auto step = detail::solve4(damped, g);
    if (!step) {
      lambda *= opt.lambda_up;
      continue;
    }
    double step_norm = 0;
    for (double d : *step) step_norm += d * d;
    step_norm = std::sqrt(step_norm);
    std::array<double, 4> cand = p;
    for (int u = 0; u < 4; ++u) cand[u] += (*step)[u];
    const double cand_rss = detail::rss_of(xs, ys, cand);
    if (std::isfinite(cand_rss) && cand_rss < rss) {
      const double rel = (rss - cand_rss) / std::max(rss, 1e-300);
      p = cand;
      rss = cand_rss;
      lambda *= opt.lambda_down;
      if (rel < opt.rel_rss_tol || step_norm < opt.step_tol || rss == 0.0) converged = true;
    } else {
      lambda *= opt.lambda_up;
      if (step_norm < opt.step_tol) converged = true;
    }
  }

  if (p[0] < 0) {
    p[3] += p[0];
    p[0] = -p[0];
    p[1] = -p[1];
  }
  fit.c = p[0];
  fit.k = p[1];
  fit.x0 = p[2];
  fit.y0 = p[3];
  fit.rss = rss;
  fit.iterations = it;
  fit.converged = converged;
  if (!converged) fit.note = "iteration cap reached";

  if (fit.converged) {
    const double lo = xs.front(), hi = xs.back();
    for (int i = 0; i <= 200; ++i) {
      const double y = fit(lo + (hi - lo) * i / 200.0);
      if (!(y >= opt.band_lo && y <= opt.band_hi)) {
        fit.converged = false;
        fit.note = "model leaves the sanity band over the fitted range";
        break;
      }
    }
  }
  return fit;
}

inline LogisticFit fit_logistic(const ItemResponseCurve& irc, const LmOptions& opt = {}) {
  std::vector<double> xs, ys;
  for (const auto& p : irc.points) {
    xs.push_back(p.level);
    ys.push_back(p.rank1);
  }
  return fit_logistic(xs, ys, opt);
}

// ---------------------------------------------------------------------------
// Threshold
// ---------------------------------------------------------------------------

struct ThresholdResult {
  std::optional<double> value;
  std::string reason;  // why the value is undefined

  bool defined() const noexcept { return value.has_value(); }
};

/// Level at which the fitted curve equals half the unperturbed accuracy:
/// x = x0 - ln(c / (u/2 - y0) - 1) / k.
inline ThresholdResult threshold(const LogisticFit& fit, double unperturbed) {
  if (!fit.converged) return {std::nullopt, "fit did not converge"};
  if (fit.k == 0.0 || fit.flat) return {std::nullopt, "flat fit (k = 0)"};
  if (fit.c == 0.0) return {std::nullopt, "flat fit (c = 0)"};
  const double half = unperturbed / 2.0;
  const double lower = std::min(fit.y0, fit.y0 + fit.c);
  const double upper = std::max(fit.y0, fit.y0 + fit.c);
  if (half <= lower) return {std::nullopt, "asymptote above half-performance"};
  if (half >= upper) return {std::nullopt, "curve never reaches half-performance"};
  const double t = (half - fit.y0) / fit.c;  // in (0, 1)
  return {fit.x0 - std::log(1.0 / t - 1.0) / fit.k, {}};
}

// ---------------------------------------------------------------------------
// AUIRC
// ---------------------------------------------------------------------------

struct AuircResult {
  double value = 0;
  double lo = 0;  // integration bounds, echoed because the value depends on them
  double hi = 0;
  bool normalized = false;
};

/// Trapezoidal area under rank-1 versus level; divided by the level range when
/// normalized.
inline AuircResult auirc(const ItemResponseCurve& irc, bool normalize) {
  if (irc.points.size() < 2) throw ParameterError("auirc needs at least 2 points");
  auto pts = irc.points;
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.level < b.level; });
  for (const auto& p : pts)
    if (!std::isfinite(p.level)) throw ParameterError("auirc needs finite levels");
  double area = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += 0.5 * (pts[i].rank1 + pts[i - 1].rank1) * (pts[i].level - pts[i - 1].level);
  AuircResult r;
  r.lo = pts.front().level;
  r.hi = pts.back().level;
  r.normalized = normalize;
  r.value = area;
  if (normalize) {
    if (r.hi == r.lo) throw ParameterError("auirc normalization needs a non-empty level range");
    r.value /= (r.hi - r.lo);
  }
  return r;
}

}  // namespace psyreid
