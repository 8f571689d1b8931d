#pragma once

// Result tables (points.csv, fits.csv) and item-response-curve SVG plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "psyreid/core.hpp"
#include "psyreid/perturb.hpp"
#include "psyreid/psychometrics.hpp"

namespace psyreid {

struct ExperimentRecord {
  std::string model;
  std::string dataset;
  PerturbKind kind = PerturbKind::identity;
  ItemResponseCurve irc;
  std::optional<LogisticFit> fit;  // absent when the curve had too few points to fit
  ThresholdResult threshold;
  std::optional<AuircResult> auirc;
  std::string fingerprint;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Fits, thresholds and summarizes one curve. Non-finite levels are left out of
/// the fit and the area.
inline ExperimentRecord summarize_curve(std::string model, std::string dataset, const ItemResponseCurve& irc,
                                        std::string fingerprint = {}) {
  ExperimentRecord rec;
  rec.model = std::move(model);
  rec.dataset = std::move(dataset);
  rec.kind = irc.kind;
  rec.irc = irc;
  rec.fingerprint = std::move(fingerprint);
  const auto finite = irc.finite_part();
  if (finite.points.size() >= 5) {
    rec.fit = fit_logistic(finite);
    rec.threshold = threshold(*rec.fit, irc.unperturbed_rank1);
  } else {
    rec.threshold = {std::nullopt, "too few points to fit"};
  }
  if (finite.points.size() >= 2 && finite.points.front().level != finite.points.back().level)
    rec.auirc = auirc(finite, true);
  return rec;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline constexpr std::string_view kPointsHeader = "kind,model,level,rank1,map,n_queries";
inline constexpr std::string_view kFitsHeader = "kind,model,c,k,x0,y0,rss,converged,threshold,direction,auirc_norm,unperturbed_rank1";

inline void write_points_csv(std::ostream& out, const std::vector<ExperimentRecord>& recs) {
  out << kPointsHeader << '\n';
  CsvWriter w(out);
  for (const auto& r : recs)
    for (const auto& p : r.irc.points) w.row(std::string(to_string(r.kind)), r.model, p.level, p.rank1, p.map, p.n_queries);
}

inline void write_fits_csv(std::ostream& out, const std::vector<ExperimentRecord>& recs) {
  out << kFitsHeader << '\n';
  CsvWriter w(out);
  for (const auto& r : recs) {
    const std::string kind(to_string(r.kind));
    const std::string thr = r.threshold.value ? format_double(*r.threshold.value) : "";
    const std::string area = r.auirc ? format_double(r.auirc->value) : "";
    if (r.fit) {
      const auto& f = *r.fit;
      // sign of k: accuracy falling or rising as the level grows
      const char* dir = f.k < 0 ? "falling" : f.k > 0 ? "rising" : "flat";
      w.row(kind, r.model, f.c, f.k, f.x0, f.y0, f.rss, f.converged, thr, std::string(dir), area, r.irc.unperturbed_rank1);
    } else {
      w.row(std::vector<std::string>{kind, r.model, "", "", "", "", "", "false", thr, "", area,
                                     format_double(r.irc.unperturbed_rank1)});
    }
  }
}

/// Rebuilds item-response curves from points.csv, grouped by (kind, model) in
/// first-appearance order. The unperturbed accuracy is read at the kind's anchor.
inline std::vector<ItemResponseCurve> read_points_csv(const fs::path& path, std::vector<std::string>* models) {
  const auto t = CsvTable::read(path);
  t.require({"kind", "model", "level", "rank1", "map", "n_queries"});
  std::vector<std::pair<std::string, ItemResponseCurve>> groups;
  for (const auto& row : t.rows()) {
    const auto kind = parse_perturb_kind(t.get(row, "kind"));
    const std::string model(t.get(row, "model"));
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const auto& g) { return g.first == model && g.second.kind == kind; });
    if (it == groups.end()) {
      groups.push_back({model, ItemResponseCurve{kind, {}, 0}});
      it = std::prev(groups.end());
    }
    auto lvl = parse_double(t.get(row, "level"));
    auto r1 = parse_double(t.get(row, "rank1"));
    auto mp = parse_double(t.get(row, "map"));
    auto nq = parse_int<std::size_t>(t.get(row, "n_queries"));
    if (!lvl || !r1 || !mp || !nq) throw ParseError(t.where(row) + ": malformed point");
    it->second.points.push_back({*lvl, *r1, *mp, *nq});
  }
  std::vector<ItemResponseCurve> out;
  for (auto& [model, irc] : groups) {
    std::sort(irc.points.begin(), irc.points.end(), [](const auto& a, const auto& b) { return a.level < b.level; });
    const double anchor = anchor_level(irc.kind);
    bool found = false;
    for (const auto& p : irc.points) {
      if (p.level == anchor || irc.kind == PerturbKind::identity) {
        irc.unperturbed_rank1 = p.rank1;
        found = true;
        break;
      }
    }
    if (!found) throw ParseError(path.string() + ": curve for model '" + model + "' lacks its anchor level");
    if (models) models->push_back(model);
    out.push_back(std::move(irc));
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

namespace detail {

// Okabe-Ito palette.
inline constexpr const char* kPalette[] = {"#0072B2", "#D55E00", "#009E73", "#CC79A7",
                                           "#E69F00", "#56B4E9", "#F0E442", "#000000"};

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

inline std::string axis_label(PerturbKind k) {
  switch (k) {
    case PerturbKind::gaussian_blur: return "Gaussian blur sigma (px)";
    case PerturbKind::occlude_bottom: return "proportion occluded from bottom";
    case PerturbKind::occlude_left: return "proportion occluded from left";
    case PerturbKind::occlude_repeat: return "proportion occluded (repeat padding)";
    case PerturbKind::occlude_voc: return "proportion of pedestrian occluded";
    case PerturbKind::partial_detection: return "proportion excluded before reshaping";
    case PerturbKind::jpeg: return "JPEG quality";
    case PerturbKind::translate: return "translation (fraction of width)";
    case PerturbKind::scale: return "scale factor";
    case PerturbKind::rain: return "rain inverse density";
    case PerturbKind::snow: return "snow density";
    case PerturbKind::identity: return "level";
  }
  return "level";
}

}  // namespace detail

/// One SVG with a marker series and (when a converged fit exists) a 200-sample
/// fitted curve per model. Pure function of the records.
inline std::string emit_plot(const std::vector<ExperimentRecord>& recs) {
  if (recs.empty()) throw ParameterError("emit_plot needs at least one record");
  const PerturbKind kind = recs.front().kind;
  for (const auto& r : recs)
    if (r.kind != kind) throw ParameterError("emit_plot: records mix perturbation kinds");

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : recs)
    for (const auto& p : r.irc.points)
      if (std::isfinite(p.level)) {
        lo = std::min(lo, p.level);
        hi = std::max(hi, p.level);
      }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi == lo) hi = lo + 1;

  constexpr double W = 640, H = 420, ml = 70, mr = 200, mt = 40, mb = 60;
  const double pw = W - ml - mr, ph = H - mt - mb;
  const auto sx = [&](double x) { return ml + (x - lo) / (hi - lo) * pw; };
  const auto sy = [&](double y) { return mt + (1.0 - std::clamp(y, -0.1, 1.1)) * ph; };
  const auto f2 = [](double v) { return format_fixed(v, 2); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' '
    << H << "\" font-family=\"DejaVu Sans, Arial, sans-serif\" font-size=\"12\">\n";
  o << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"#ffffff\"/>\n";
  o << "<text x=\"" << f2(ml + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
    << detail::xml_escape(recs.front().dataset) << ": " << to_string(kind) << "</text>\n";

  // Axes and ticks.
  o << "<g class=\"axes\" stroke=\"#333333\" fill=\"none\">\n";
  o << "<line x1=\"" << f2(ml) << "\" y1=\"" << f2(mt + ph) << "\" x2=\"" << f2(ml + pw) << "\" y2=\"" << f2(mt + ph) << "\"/>\n";
  o << "<line x1=\"" << f2(ml) << "\" y1=\"" << f2(mt) << "\" x2=\"" << f2(ml) << "\" y2=\"" << f2(mt + ph) << "\"/>\n";
  o << "</g>\n<g class=\"ticks\" fill=\"#333333\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = lo + (hi - lo) * i / 5.0;
    const double yv = i / 5.0;
    o << "<text x=\"" << f2(sx(xv)) << "\" y=\"" << f2(mt + ph + 18) << "\" text-anchor=\"middle\">" << format_fixed(xv, 3)
      << "</text>\n";
    o << "<text x=\"" << f2(ml - 8) << "\" y=\"" << f2(sy(yv) + 4) << "\" text-anchor=\"end\">" << format_fixed(yv, 1)
      << "</text>\n";
  }
  o << "</g>\n";
  o << "<text x=\"" << f2(ml + pw / 2) << "\" y=\"" << f2(H - 16) << "\" text-anchor=\"middle\">"
    << detail::xml_escape(detail::axis_label(kind)) << "</text>\n";
  o << "<text x=\"18\" y=\"" << f2(mt + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " << f2(mt + ph / 2)
    << ")\">rank-1 accuracy</text>\n";

  for (std::size_t s = 0; s < recs.size(); ++s) {
    const auto& r = recs[s];
    const char* color = detail::kPalette[s % std::size(detail::kPalette)];
    const std::string label = detail::xml_escape(r.model);
    o << "<g class=\"markers\" data-model=\"" << label << "\" fill=\"" << color << "\">\n";
    for (const auto& p : r.irc.points) {
      if (!std::isfinite(p.level)) continue;
      o << "<circle cx=\"" << f2(sx(p.level)) << "\" cy=\"" << f2(sy(p.rank1)) << "\" r=\"3.5\"/>\n";
    }
    o << "</g>\n";
    const bool drawn = r.fit && r.fit->converged;
    if (drawn) {
      o << "<polyline class=\"fit\" data-model=\"" << label << "\" fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"2\" points=\"";
      for (int i = 0; i < 200; ++i) {
        const double x = lo + (hi - lo) * i / 199.0;
        if (i) o << ' ';
        o << f2(sx(x)) << ',' << f2(sy((*r.fit)(x)));
      }
      o << "\"/>\n";
    }
    std::string legend = label;
    if (!drawn) legend += " (no fit)";
    else if (r.threshold.value) legend += " (threshold " + format_fixed(*r.threshold.value, 3) + ")";
    else legend += " (threshold undefined)";
    const double ly = mt + 14 + 20.0 * static_cast<double>(s);
    o << "<g class=\"legend\"><rect x=\"" << f2(W - mr + 16) << "\" y=\"" << f2(ly - 9) << "\" width=\"10\" height=\"10\" fill=\""
      << color << "\"/><text x=\"" << f2(W - mr + 32) << "\" y=\"" << f2(ly) << "\">" << legend << "</text></g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Writes `<root>/<dataset>/<kind>/{points.csv,fits.csv,curve.svg}`.
inline fs::path emit_results(const fs::path& results_root, const std::vector<ExperimentRecord>& recs) {
  if (recs.empty()) throw ParameterError("emit_results needs at least one record");
  const fs::path dir = results_root / recs.front().dataset / std::string(to_string(recs.front().kind));
  std::ostringstream points, fits;
  write_points_csv(points, recs);
  write_fits_csv(fits, recs);
  write_file_atomic(dir / "points.csv", points.str());
  write_file_atomic(dir / "fits.csv", fits.str());
  write_file_atomic(dir / "curve.svg", emit_plot(recs));
  return dir;
}

}  // namespace psyreid
