#pragma once

// Dataset manifests, Market-1501 style filename parsing, and the track-based
// query/gallery split builder with its validation report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "psyreid/core.hpp"

namespace psyreid {

struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return width() * height(); }
  bool valid() const noexcept { return x1 >= 0 && y1 >= 0 && x1 < x2 && y1 < y2; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct SampleRecord {
  std::string image_id;
  std::string path;
  std::int64_t person_id = 0;
  int camera_id = 0;
  std::optional<std::string> track_id;
  std::optional<double> frame_time;
  std::optional<int> visibility;
  std::optional<BBox> bbox;
  // Original identity token when person_id has been remapped to a dense label.
  std::optional<std::string> person_token;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

enum class Split { train, query, gallery, unsplit };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
    case Split::unsplit: return "unsplit";
  }
  return "unsplit";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  if (s == "unsplit") return Split::unsplit;
  throw ParseError("unknown split '" + std::string(s) + "'");
}

/// Checks the per-record invariants; `where` prefixes the error message.
inline void validate_record(const SampleRecord& r, std::string_view where) {
  const std::string at(where);
  if (r.image_id.empty()) throw IntegrityError(at + ": empty image_id");
  if (r.person_id < 0) throw IntegrityError(at + ": negative person_id for " + r.image_id);
  if (r.camera_id < 0) throw IntegrityError(at + ": negative camera_id for " + r.image_id);
  if (r.visibility && (*r.visibility < 1 || *r.visibility > 4)) {
    throw IntegrityError(at + ": visibility " + std::to_string(*r.visibility) + " outside 1..4 for " + r.image_id);
  }
  if (r.bbox && !r.bbox->valid()) throw IntegrityError(at + ": malformed bbox for " + r.image_id);
  if (r.frame_time && !std::isfinite(*r.frame_time)) throw IntegrityError(at + ": non-finite frame_time for " + r.image_id);
}

struct Manifest {
  Split split = Split::unsplit;
  std::vector<SampleRecord> records;
  std::string source;

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }

  /// Enforces record invariants and image_id uniqueness.
  void validate() const {
    std::unordered_set<std::string_view> seen;
    seen.reserve(records.size());
    for (const auto& r : records) {
      validate_record(r, source.empty() ? "manifest" : source);
      if (!seen.insert(r.image_id).second) throw IntegrityError(source + ": duplicate image_id '" + r.image_id + "'");
    }
  }

  const SampleRecord* find(std::string_view image_id) const {
    for (const auto& r : records)
      if (r.image_id == image_id) return &r;
    return nullptr;
  }
};

struct TrackRecord {
  std::string track_id;
  std::int64_t person_id = 0;
  std::vector<SampleRecord> keyframes;
};

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

enum class ManifestFormat { csv, market_dir };

inline constexpr std::string_view kManifestColumns[] = {"image_id", "path",     "person_id", "camera_id",
                                                        "track_id", "frame_time", "visibility", "x1",
                                                        "y1",       "x2",         "y2"};

namespace detail {

inline SampleRecord record_from_row(const CsvTable& t, const CsvTable::Row& row) {
  const std::string at = t.where(row);
  SampleRecord r;
  r.image_id = std::string(t.get(row, "image_id"));
  r.path = std::string(t.get(row, "path"));
  auto pid = parse_int<std::int64_t>(t.get(row, "person_id"));
  if (!pid) throw ParseError(at + ": bad person_id '" + std::string(t.get(row, "person_id")) + "'");
  r.person_id = *pid;
  auto cam = parse_int<int>(t.get(row, "camera_id"));
  if (!cam) throw ParseError(at + ": bad camera_id '" + std::string(t.get(row, "camera_id")) + "'");
  r.camera_id = *cam;
  if (auto tr = t.get(row, "track_id"); !tr.empty()) r.track_id = std::string(tr);
  if (auto ft = t.get(row, "frame_time"); !ft.empty()) {
    auto v = parse_double(ft);
    if (!v) throw ParseError(at + ": bad frame_time '" + std::string(ft) + "'");
    r.frame_time = *v;
  }
  if (auto vis = t.get(row, "visibility"); !vis.empty()) {
    auto v = parse_int<int>(vis);
    if (!v) throw ParseError(at + ": bad visibility '" + std::string(vis) + "'");
    r.visibility = *v;
  }
  const std::string_view coords[] = {t.get(row, "x1"), t.get(row, "y1"), t.get(row, "x2"), t.get(row, "y2")};
  const int present = static_cast<int>(std::count_if(std::begin(coords), std::end(coords), [](auto c) { return !c.empty(); }));
  if (present == 4) {
    double v[4];
    for (int i = 0; i < 4; ++i) {
      auto d = parse_double(coords[i]);
      if (!d) throw ParseError(at + ": bad bbox coordinate '" + std::string(coords[i]) + "'");
      v[i] = *d;
    }
    r.bbox = BBox{v[0], v[1], v[2], v[3]};
  } else if (present != 0) {
    throw ParseError(at + ": bbox needs all of x1,y1,x2,y2");
  }
  if (auto tok = t.get(row, "person_token"); !tok.empty()) r.person_token = std::string(tok);
  validate_record(r, at);
  return r;
}

}  // namespace detail

/// Parses a Market-1501 style filename `PPPP_cCsS_FFFFFF_NN.ext`.
/// Returns nullopt for the junk label -1, which the benchmark ignores.
inline std::optional<SampleRecord> parse_market_filename(std::string_view filename) {
  const std::string name(filename);
  const auto dot = filename.rfind('.');
  const std::string_view stem = filename.substr(0, dot);
  const auto bad = [&] { return ParseError("malformed Market-1501 filename '" + name + "'"); };

  const auto u1 = stem.find('_');
  if (u1 == std::string_view::npos || u1 == 0) throw bad();
  const std::string_view pid_text = stem.substr(0, u1);
  if (pid_text == "-1") return std::nullopt;
  if (!std::all_of(pid_text.begin(), pid_text.end(), [](char c) { return c >= '0' && c <= '9'; })) throw bad();

  // cCsS: camera digits after 'c', sequence digits after 's'.
  const auto u2 = stem.find('_', u1 + 1);
  if (u2 == std::string_view::npos) throw bad();
  const std::string_view cs = stem.substr(u1 + 1, u2 - u1 - 1);
  if (cs.size() < 2 || cs[0] != 'c') throw bad();
  std::size_t i = 1;
  while (i < cs.size() && cs[i] >= '0' && cs[i] <= '9') ++i;
  if (i == 1) throw bad();
  const std::string_view cam_text = cs.substr(1, i - 1);
  if (i < cs.size()) {
    if (cs[i] != 's' || i + 1 == cs.size()) throw bad();
    const auto seq = cs.substr(i + 1);
    if (!std::all_of(seq.begin(), seq.end(), [](char c) { return c >= '0' && c <= '9'; })) throw bad();
  }
  const std::string_view rest = stem.substr(u2 + 1);
  const auto u3 = rest.find('_');
  const std::string_view frame_text = rest.substr(0, u3);
  if (frame_text.empty() || !std::all_of(frame_text.begin(), frame_text.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw bad();
  if (u3 != std::string_view::npos) {
    const auto det = rest.substr(u3 + 1);
    if (det.empty() || !std::all_of(det.begin(), det.end(), [](char c) { return c >= '0' && c <= '9'; })) throw bad();
  }

  SampleRecord r;
  r.image_id = std::string(stem);
  r.path = name;
  r.person_id = *parse_int<std::int64_t>(pid_text);
  r.camera_id = *parse_int<int>(cam_text);
  return r;
}

inline Manifest parse_manifest_csv(std::istream& in, std::string_view source, Split split = Split::unsplit) {
  const CsvTable t = CsvTable::parse(in, source);
  t.require({"image_id", "path", "person_id", "camera_id"});
  Manifest m;
  m.split = split;
  m.source = std::string(source);
  m.records.reserve(t.rows().size());
  for (const auto& row : t.rows()) m.records.push_back(detail::record_from_row(t, row));
  m.validate();
  return m;
}

/// Reads a manifest. Relative `path` fields are kept relative; resolve them
/// against `manifest_root()` when loading pixels.
inline Manifest parse_manifest(const fs::path& path, ManifestFormat format, Split split = Split::unsplit) {
  if (format == ManifestFormat::csv) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    return parse_manifest_csv(in, path.string(), split);
  }
  if (!fs::is_directory(path)) throw IoError("not a directory: " + path.string());
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext != ".jpg" && ext != ".jpeg" && ext != ".png") continue;
    names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  Manifest m;
  m.split = split;
  m.source = path.string();
  for (const auto& n : names) {
    if (auto r = parse_market_filename(n)) m.records.push_back(std::move(*r));
  }
  m.validate();
  return m;
}

/// Base directory that relative record paths are resolved against.
inline fs::path manifest_root(const fs::path& manifest_path, ManifestFormat format) {
  return format == ManifestFormat::market_dir ? manifest_path : manifest_path.parent_path();
}

inline void write_manifest_csv(std::ostream& out, const Manifest& m) {
  bool with_token = std::any_of(m.records.begin(), m.records.end(), [](const auto& r) { return r.person_token.has_value(); });
  CsvWriter w(out);
  std::vector<std::string> header(std::begin(kManifestColumns), std::end(kManifestColumns));
  if (with_token) header.emplace_back("person_token");
  w.row(header);
  for (const auto& r : m.records) {
    std::vector<std::string> f;
    f.reserve(header.size());
    f.push_back(r.image_id);
    f.push_back(r.path);
    f.push_back(std::to_string(r.person_id));
    f.push_back(std::to_string(r.camera_id));
    f.push_back(r.track_id.value_or(""));
    f.push_back(r.frame_time ? format_double(*r.frame_time) : "");
    f.push_back(r.visibility ? std::to_string(*r.visibility) : "");
    if (r.bbox) {
      for (double v : {r.bbox->x1, r.bbox->y1, r.bbox->x2, r.bbox->y2}) f.push_back(format_double(v));
    } else {
      f.insert(f.end(), 4, "");
    }
    if (with_token) f.push_back(r.person_token.value_or(""));
    w.row(f);
  }
}

// ---------------------------------------------------------------------------
// Track split
// ---------------------------------------------------------------------------

enum class Partition { train, eval };

struct PartitionedTrack {
  Partition partition = Partition::eval;
  TrackRecord track;
};

struct SplitConfig {
  double gallery_frac = 0.6;
  double query_frac = 0.2;
  std::size_t min_keyframes = 5;
  int min_visibility = 3;

  void validate() const {
    if (!(gallery_frac > 0) || !(query_frac > 0) || gallery_frac + query_frac > 1.0 + 1e-12)
      throw ParameterError("split fractions must be positive with gallery_frac + query_frac <= 1");
    if (min_visibility < 1 || min_visibility > 4) throw ParameterError("min_visibility must be in 1..4");
  }
};

/// Number of keyframes each part receives for a track of `n` surviving keyframes.
struct TrackAllocation {
  std::size_t gallery = 0;
  std::size_t query = 0;
  std::size_t omitted = 0;
};

inline TrackAllocation allocate_track(std::size_t n, const SplitConfig& cfg) {
  TrackAllocation a;
  // The small epsilon keeps e.g. 0.6 * 5 from flooring to 2 through representation error.
  a.gallery = static_cast<std::size_t>(std::floor(cfg.gallery_frac * static_cast<double>(n) + 1e-9));
  a.query = static_cast<std::size_t>(std::floor(cfg.query_frac * static_cast<double>(n) + 1e-9));
  a.gallery = std::min(a.gallery, n);
  a.query = std::min(a.query, n - a.gallery);
  a.omitted = n - a.gallery - a.query;
  return a;
}

struct TrackSplitSummary {
  std::string track_id;
  Partition partition = Partition::eval;
  std::size_t input_keyframes = 0;
  std::size_t surviving = 0;
  TrackAllocation allocation;
  bool included = false;
};

struct TrackSplitResult {
  Manifest train;
  Manifest query;
  Manifest gallery;
  std::vector<TrackSplitSummary> tracks;  // sorted by track_id
  std::vector<std::string> warnings;
};

/// Groups track-CSV rows (manifest columns plus `partition`) into tracks.
inline std::vector<PartitionedTrack> parse_track_csv(std::istream& in, std::string_view source) {
  const CsvTable t = CsvTable::parse(in, source);
  t.require({"image_id", "path", "person_id", "camera_id", "track_id", "frame_time", "partition"});
  std::map<std::string, PartitionedTrack> by_id;
  std::unordered_set<std::string> seen;
  for (const auto& row : t.rows()) {
    SampleRecord r = detail::record_from_row(t, row);
    if (!seen.insert(r.image_id).second) throw IntegrityError(t.where(row) + ": duplicate image_id '" + r.image_id + "'");
    if (!r.track_id) throw ParseError(t.where(row) + ": track rows need track_id");
    if (!r.frame_time) throw ParseError(t.where(row) + ": track rows need frame_time");
    const auto part_text = t.get(row, "partition");
    Partition part;
    if (part_text == "train") part = Partition::train;
    else if (part_text == "eval") part = Partition::eval;
    else throw ParseError(t.where(row) + ": partition must be train or eval, got '" + std::string(part_text) + "'");

    auto [it, fresh] = by_id.try_emplace(*r.track_id);
    auto& pt = it->second;
    if (fresh) {
      pt.partition = part;
      pt.track.track_id = *r.track_id;
      pt.track.person_id = r.person_id;
    } else if (pt.partition != part || pt.track.person_id != r.person_id) {
      throw IntegrityError(t.where(row) + ": track '" + *r.track_id + "' mixes partitions or person ids");
    }
    pt.track.keyframes.push_back(std::move(r));
  }
  std::vector<PartitionedTrack> out;
  out.reserve(by_id.size());
  for (auto& [id, pt] : by_id) out.push_back(std::move(pt));
  return out;
}

inline std::vector<PartitionedTrack> parse_track_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open track csv " + path.string());
  return parse_track_csv(in, path.string());
}

namespace detail {

inline bool keyframe_less(const SampleRecord& a, const SampleRecord& b) {
  const double ta = a.frame_time.value_or(0.0), tb = b.frame_time.value_or(0.0);
  if (ta != tb) return ta < tb;
  return a.image_id < b.image_id;
}

/// Replaces person ids by dense labels 0..K-1 over (person_id, track_id) keys,
/// keeping the original id in person_token.
inline void densify_identities(std::vector<Manifest*> manifests) {
  std::map<std::pair<std::int64_t, std::string>, std::int64_t> labels;
  for (auto* m : manifests)
    for (const auto& r : m->records) labels.try_emplace({r.person_id, r.track_id.value_or("")}, 0);
  std::int64_t next = 0;
  for (auto& [key, label] : labels) label = next++;
  for (auto* m : manifests) {
    for (auto& r : m->records) {
      const auto key = std::make_pair(r.person_id, r.track_id.value_or(""));
      if (!r.person_token) r.person_token = std::to_string(r.person_id);
      r.person_id = labels.at(key);
    }
  }
}

}  // namespace detail

/// Splits tracks into train/query/gallery. Visibility filtering runs before the
/// keyframe-count test; eval tracks contribute their first floor(gallery_frac*n)
/// keyframes to the gallery and their last floor(query_frac*n) to the query set.
/// The result is independent of the input track order.
inline TrackSplitResult build_track_split(std::vector<PartitionedTrack> tracks, const SplitConfig& cfg) {
  cfg.validate();
  std::sort(tracks.begin(), tracks.end(),
            [](const auto& a, const auto& b) { return a.track.track_id < b.track.track_id; });
  for (std::size_t i = 1; i < tracks.size(); ++i) {
    if (tracks[i].track.track_id == tracks[i - 1].track.track_id)
      throw IntegrityError("duplicate track_id '" + tracks[i].track.track_id + "'");
  }

  TrackSplitResult out;
  out.train.split = Split::train;
  out.query.split = Split::query;
  out.gallery.split = Split::gallery;
  out.train.source = out.query.source = out.gallery.source = "build_track_split";

  for (auto& pt : tracks) {
    TrackSplitSummary s;
    s.track_id = pt.track.track_id;
    s.partition = pt.partition;
    s.input_keyframes = pt.track.keyframes.size();

    std::vector<SampleRecord> kept;
    kept.reserve(pt.track.keyframes.size());
    for (auto& kf : pt.track.keyframes) {
      if (kf.person_id != pt.track.person_id || kf.track_id.value_or(pt.track.track_id) != pt.track.track_id)
        throw IntegrityError("keyframe '" + kf.image_id + "' does not belong to track '" + pt.track.track_id + "'");
      if (!kf.frame_time) throw IntegrityError("keyframe '" + kf.image_id + "' has no frame_time");
      if (kf.visibility && *kf.visibility < cfg.min_visibility) continue;
      kf.track_id = pt.track.track_id;
      kept.push_back(kf);
    }
    std::stable_sort(kept.begin(), kept.end(), detail::keyframe_less);
    s.surviving = kept.size();

    if (pt.partition == Partition::train) {
      s.included = !kept.empty();
      for (auto& kf : kept) out.train.records.push_back(std::move(kf));
      out.tracks.push_back(std::move(s));
      continue;
    }

    if (kept.size() < cfg.min_keyframes) {
      out.tracks.push_back(std::move(s));
      continue;
    }
    s.allocation = allocate_track(kept.size(), cfg);
    if (s.allocation.gallery == 0) {
      out.warnings.push_back("track '" + s.track_id + "' dropped: no gallery keyframes for its query identity");
      s.allocation = {};
      out.tracks.push_back(std::move(s));
      continue;
    }
    s.included = true;
    const std::size_t n = kept.size();
    for (std::size_t i = 0; i < s.allocation.gallery; ++i) out.gallery.records.push_back(kept[i]);
    for (std::size_t i = n - s.allocation.query; i < n; ++i) out.query.records.push_back(kept[i]);
    out.tracks.push_back(std::move(s));
  }

  detail::densify_identities({&out.train});
  detail::densify_identities({&out.query, &out.gallery});
  out.train.validate();
  out.query.validate();
  out.gallery.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Split validation
// ---------------------------------------------------------------------------

struct IdentityCounts {
  std::size_t query = 0;
  std::size_t gallery = 0;
};

struct SplitReport {
  bool disjoint = true;
  std::vector<std::string> overlapping_ids;
  std::vector<std::int64_t> query_ids_missing_from_gallery;
  std::map<std::int64_t, IdentityCounts> per_identity;
  std::size_t query_images = 0;
  std::size_t gallery_images = 0;

  bool has_temporal_data = false;
  std::map<std::int64_t, double> temporal_gaps;  // seconds, per identity
  double bin_width = 1.0;
  double histogram_origin = 0.0;
  std::vector<std::size_t> histogram;  // bin i covers [origin + i*w, origin + (i+1)*w)

  bool ok() const noexcept { return disjoint && query_ids_missing_from_gallery.empty(); }
};

inline SplitReport validate_split(const Manifest& query, const Manifest& gallery, double bin_width = 1.0) {
  if (query.empty() || gallery.empty()) throw ParameterError("validate_split needs non-empty query and gallery manifests");
  if (!(bin_width > 0)) throw ParameterError("histogram bin width must be positive");
  SplitReport rep;
  rep.bin_width = bin_width;
  rep.query_images = query.size();
  rep.gallery_images = gallery.size();

  std::set<std::string_view> gallery_ids;
  for (const auto& g : gallery.records) {
    gallery_ids.insert(g.image_id);
    ++rep.per_identity[g.person_id].gallery;
  }
  for (const auto& q : query.records) {
    if (gallery_ids.count(q.image_id)) rep.overlapping_ids.push_back(q.image_id);
    ++rep.per_identity[q.person_id].query;
  }
  std::sort(rep.overlapping_ids.begin(), rep.overlapping_ids.end());
  rep.disjoint = rep.overlapping_ids.empty();
  for (const auto& [pid, c] : rep.per_identity)
    if (c.query > 0 && c.gallery == 0) rep.query_ids_missing_from_gallery.push_back(pid);

  std::map<std::int64_t, std::vector<double>> gallery_times;
  for (const auto& g : gallery.records)
    if (g.frame_time) gallery_times[g.person_id].push_back(*g.frame_time);
  for (const auto& q : query.records) {
    if (!q.frame_time) continue;
    auto it = gallery_times.find(q.person_id);
    if (it == gallery_times.end()) continue;
    for (double gt : it->second) {
      const double gap = *q.frame_time - gt;
      auto [slot, fresh] = rep.temporal_gaps.try_emplace(q.person_id, gap);
      if (!fresh) slot->second = std::min(slot->second, gap);
    }
  }
  rep.has_temporal_data = !rep.temporal_gaps.empty();
  if (rep.has_temporal_data) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& [pid, gap] : rep.temporal_gaps) {
      lo = std::min(lo, gap);
      hi = std::max(hi, gap);
    }
    rep.histogram_origin = std::floor(lo / bin_width) * bin_width;
    const auto bins = static_cast<std::size_t>(std::floor((hi - rep.histogram_origin) / bin_width)) + 1;
    rep.histogram.assign(bins, 0);
    for (const auto& [pid, gap] : rep.temporal_gaps) {
      auto b = static_cast<std::size_t>(std::floor((gap - rep.histogram_origin) / bin_width));
      ++rep.histogram[std::min(b, bins - 1)];
    }
  }
  return rep;
}

/// Key/value lines followed by the histogram and per-identity tables.
inline std::string format_split_report(const SplitReport& rep) {
  std::ostringstream o;
  o << "status: " << (rep.ok() ? "ok" : "failed") << '\n';
  o << "disjoint: " << (rep.disjoint ? "true" : "false") << '\n';
  o << "overlapping_image_ids: " << rep.overlapping_ids.size() << '\n';
  for (const auto& id : rep.overlapping_ids) o << "overlap: " << id << '\n';
  o << "query_images: " << rep.query_images << '\n';
  o << "gallery_images: " << rep.gallery_images << '\n';
  std::size_t qids = 0, gids = 0;
  for (const auto& [pid, c] : rep.per_identity) {
    qids += c.query > 0;
    gids += c.gallery > 0;
  }
  o << "query_identities: " << qids << '\n';
  o << "gallery_identities: " << gids << '\n';
  o << "query_ids_missing_from_gallery: " << rep.query_ids_missing_from_gallery.size() << '\n';
  if (rep.has_temporal_data) {
    o << "temporal_data: yes\n";
    o << "bin_width_s: " << format_double(rep.bin_width) << '\n';
    o << "\n[temporal_gap_histogram]\nbin_start_s,bin_end_s,identities\n";
    for (std::size_t i = 0; i < rep.histogram.size(); ++i) {
      const double a = rep.histogram_origin + static_cast<double>(i) * rep.bin_width;
      o << format_double(a) << ',' << format_double(a + rep.bin_width) << ',' << rep.histogram[i] << '\n';
    }
  } else {
    o << "temporal_data: no temporal data\n";
  }
  o << "\n[identities]\nperson_id,query_images,gallery_images,temporal_gap_s\n";
  for (const auto& [pid, c] : rep.per_identity) {
    o << pid << ',' << c.query << ',' << c.gallery << ',';
    if (auto it = rep.temporal_gaps.find(pid); it != rep.temporal_gaps.end()) o << format_double(it->second);
    o << '\n';
  }
  return o.str();
}

}  // namespace psyreid
