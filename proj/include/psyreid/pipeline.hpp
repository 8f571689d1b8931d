#pragma once

// End-to-end experiment runner: sweep -> embed -> eval -> fit -> report, driven
// by one JSON RunConfig. Every stage records a fingerprint of the settings that
// produced it next to its output (`<output>.fp`) and is skipped on rerun when
// the fingerprint matches.

#include <chrono>
#include <ctime>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "psyreid/analysis.hpp"
#include "psyreid/core.hpp"
#include "psyreid/dataset.hpp"
#include "psyreid/embed.hpp"
#include "psyreid/metrics.hpp"
#include "psyreid/perturb.hpp"
#include "psyreid/psychometrics.hpp"
#include "psyreid/report.hpp"

namespace psyreid {

using json = nlohmann::json;

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitProvider = 3;
inline constexpr int kExitEvaluation = 4;
inline constexpr int kExitOther = 1;

/// Exit code for an exception escaping a command.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ProviderError*>(&e)) return kExitProvider;
  if (dynamic_cast<const EvaluationError*>(&e)) return kExitEvaluation;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e) ||
      dynamic_cast<const ParseError*>(&e) || dynamic_cast<const IntegrityError*>(&e) ||
      dynamic_cast<const FormatError*>(&e) || dynamic_cast<const json::exception*>(&e))
    return kExitValidation;
  return kExitOther;
}

/// An error tagged with the pipeline stage it came from.
struct StageError : Error {
  StageError(const std::string& stage, const std::exception& cause)
      : Error("[" + stage + "] " + cause.what()), exit_code(exit_code_for(cause)) {}
  int exit_code;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct SyntheticProviderConfig {
  std::size_t dim = 32;
  std::optional<std::uint64_t> seed;  // derived from the run seed when absent
  std::vector<double> noise;          // per level index; overrides base/step when non-empty
  double noise_base = 0.0;
  double noise_step = 0.1;
  double gallery_noise = 0.0;

  double noise_for(std::size_t level_index) const {
    if (!noise.empty()) {
      if (level_index >= noise.size()) throw ConfigError("synthetic provider has no noise value for level " + std::to_string(level_index));
      return noise[level_index];
    }
    return noise_base + noise_step * static_cast<double>(level_index);
  }
};

struct ModelConfig {
  std::string label;
  bool synthetic = true;
  SyntheticProviderConfig synth;
  ProviderConfig external;
};

struct RunConfig {
  std::string dataset = "dataset";
  fs::path query_manifest;
  fs::path gallery_manifest;
  ManifestFormat format = ManifestFormat::csv;
  fs::path output_root;
  std::uint64_t seed = 0;
  std::vector<StimulusSweep> sweeps;
  std::vector<bool> sweep_seed_explicit;
  std::vector<ModelConfig> models;
  EvalConfig eval;
  std::optional<fs::path> occluder_assets;
  CropSide partial_side = CropSide::bottom;

  std::uint64_t synthetic_seed(const ModelConfig& m) const { return m.synth.seed.value_or(mix64(seed, fnv1a(m.label))); }

  /// Replaces the run seed and every seed derived from it, explicit ones included.
  void override_seed(std::uint64_t s) {
    seed = s;
    for (std::size_t i = 0; i < sweeps.size(); ++i) {
      sweeps[i].seed = mix64(s, fnv1a(to_string(sweeps[i].kind)));
      sweep_seed_explicit[i] = false;
    }
    for (auto& m : models) m.synth.seed.reset();
  }

  static RunConfig from_json(const json& j, const fs::path& base_dir);
  static RunConfig load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    return from_json(j, path.parent_path());
  }

  void validate() const;
};

namespace detail {

inline double json_level(const json& v) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    if (auto d = parse_double(v.get<std::string>())) return *d;
  }
  throw ConfigError("bad sweep level " + v.dump());
}

inline fs::path resolve_against(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

inline bool executable_on_path(const std::string& cmd) {
  if (cmd.find('/') != std::string::npos) return ::access(cmd.c_str(), X_OK) == 0;
  const char* path = std::getenv("PATH");
  if (!path) return false;
  std::string_view rest(path);
  while (!rest.empty()) {
    const auto colon = rest.find(':');
    const std::string dir(rest.substr(0, colon));
    if (!dir.empty() && ::access((fs::path(dir) / cmd).c_str(), X_OK) == 0) return true;
    if (colon == std::string_view::npos) break;
    rest.remove_prefix(colon + 1);
  }
  return false;
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  const auto need = [&](const char* key) -> const json& {
    if (!j.contains(key)) throw ConfigError(std::string("run config missing '") + key + "'");
    return j.at(key);
  };
  c.dataset = j.value("dataset", std::string("dataset"));
  if (!safe_file_component(c.dataset)) throw ConfigError("dataset label must be a plain file name");
  const std::string fmt = j.value("manifest_format", std::string("csv"));
  if (fmt == "csv") c.format = ManifestFormat::csv;
  else if (fmt == "market_dir") c.format = ManifestFormat::market_dir;
  else throw ConfigError("manifest_format must be csv or market_dir");
  c.query_manifest = detail::resolve_against(base_dir, need("query_manifest").get<std::string>());
  c.gallery_manifest = detail::resolve_against(base_dir, need("gallery_manifest").get<std::string>());
  c.output_root = detail::resolve_against(base_dir, j.value("output_root", std::string("out")));
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("occluder_assets")) c.occluder_assets = detail::resolve_against(base_dir, j.at("occluder_assets").get<std::string>());
  c.partial_side = parse_crop_side(j.value("partial_side", std::string("bottom")));

  for (const auto& s : need("sweeps")) {
    StimulusSweep sw;
    sw.kind = parse_perturb_kind(s.at("kind").get<std::string>());
    for (const auto& l : s.at("levels")) sw.levels.push_back(detail::json_level(l));
    const bool explicit_seed = s.contains("seed");
    sw.seed = explicit_seed ? s.at("seed").get<std::uint64_t>() : mix64(c.seed, fnv1a(to_string(sw.kind)));
    c.sweeps.push_back(std::move(sw));
    c.sweep_seed_explicit.push_back(explicit_seed);
  }

  for (const auto& m : need("models")) {
    ModelConfig mc;
    mc.label = m.at("label").get<std::string>();
    if (!safe_file_component(mc.label)) throw ConfigError("model label '" + mc.label + "' must be a plain file name");
    const auto& p = m.at("provider");
    const std::string mode = p.at("mode").get<std::string>();
    if (mode == "synthetic") {
      mc.synthetic = true;
      mc.synth.dim = p.value("dim", std::size_t{32});
      if (p.contains("seed")) mc.synth.seed = p.at("seed").get<std::uint64_t>();
      if (p.contains("noise")) mc.synth.noise = p.at("noise").get<std::vector<double>>();
      mc.synth.noise_base = p.value("noise_base", 0.0);
      mc.synth.noise_step = p.value("noise_step", 0.1);
      mc.synth.gallery_noise = p.value("gallery_noise", 0.0);
    } else if (mode == "file" || mode == "subprocess") {
      mc.synthetic = false;
      mc.external.mode = mode == "file" ? ProviderMode::file : ProviderMode::subprocess;
      mc.external.command = p.at("command").get<std::vector<std::string>>();
      if (!mc.external.command.empty() && mc.external.command[0].find('/') != std::string::npos)
        mc.external.command[0] = detail::resolve_against(base_dir, mc.external.command[0]).string();
      mc.external.batch_size = p.value("batch_size", std::size_t{16});
      mc.external.timeout_s = p.value("timeout_s", 600.0);
    } else {
      throw ConfigError("provider mode must be synthetic, file or subprocess");
    }
    c.models.push_back(std::move(mc));
  }

  const json ev = j.value("eval", json::object());
  c.eval.similarity = parse_similarity(ev.value("similarity", std::string("cosine")));
  // Camera filtering is the standard protocol for camera-labelled benchmarks,
  // not for temporal track splits.
  c.eval.cross_camera_filter = ev.value("cross_camera_filter", c.format == ManifestFormat::market_dir);
  for (auto id : ev.value("junk_ids", std::vector<std::int64_t>{})) c.eval.junk_ids.insert(id);
  c.eval.top_k = ev.value("top_k", std::size_t{1});
  return c;
}

inline void RunConfig::validate() const {
  const auto exists = [](const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
  };
  exists(query_manifest, "query manifest");
  exists(gallery_manifest, "gallery manifest");
  if (sweeps.empty()) throw ConfigError("run config has no sweeps");
  if (models.empty()) throw ConfigError("run config has no models");
  for (const auto& s : sweeps) {
    try {
      s.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(std::string("sweep ") + std::string(to_string(s.kind)) + ": " + e.what());
    }
    if (s.kind == PerturbKind::occlude_voc) {
      if (!occluder_assets) throw ConfigError("occlude_voc sweep needs occluder_assets");
      exists(*occluder_assets / "assets.csv", "occluder index");
    }
  }
  std::set<std::string> labels;
  for (const auto& m : models) {
    if (!labels.insert(m.label).second) throw ConfigError("duplicate model label '" + m.label + "'");
    if (m.synthetic) {
      if (m.synth.dim < 2) throw ConfigError("synthetic provider dim must be >= 2");
      for (const auto& s : sweeps)
        for (std::size_t li = 0; li < s.levels.size(); ++li)
          if (!(m.synth.noise_for(li) >= 0)) throw ConfigError("synthetic noise must be >= 0");
    } else {
      m.external.validate();
      if (!detail::executable_on_path(m.external.command[0]))
        throw ConfigError("provider executable not found: " + m.external.command[0]);
    }
  }
  if (eval.top_k == 0) throw ConfigError("eval.top_k must be positive");
}

// ---------------------------------------------------------------------------
// Fingerprints
// ---------------------------------------------------------------------------

inline std::string fingerprint(const json& j) { return hex64(fnv1a(j.dump())); }

inline std::string file_digest(const fs::path& p) {
  if (fs::is_directory(p)) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(p)) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    std::string all;
    for (const auto& n : names) all += n + '\n';
    return hex64(fnv1a(all));
  }
  return hex64(fnv1a(read_file(p)));
}

inline json levels_json(const std::vector<double>& levels) {
  json a = json::array();
  for (double l : levels) a.push_back(format_double(l));
  return a;
}

inline json model_json(const RunConfig& cfg, const ModelConfig& m) {
  json j;
  j["label"] = m.label;
  if (m.synthetic) {
    j["mode"] = "synthetic";
    j["dim"] = m.synth.dim;
    j["seed"] = cfg.synthetic_seed(m);
    j["noise"] = m.synth.noise;
    j["noise_base"] = format_double(m.synth.noise_base);
    j["noise_step"] = format_double(m.synth.noise_step);
    j["gallery_noise"] = format_double(m.synth.gallery_noise);
  } else {
    j["mode"] = m.external.mode == ProviderMode::file ? "file" : "subprocess";
    j["command"] = m.external.command;
    j["batch_size"] = m.external.batch_size;
  }
  return j;
}

inline json eval_json(const EvalConfig& e) {
  json j;
  j["similarity"] = std::string(to_string(e.similarity));
  j["cross_camera_filter"] = e.cross_camera_filter;
  j["junk_ids"] = std::vector<std::int64_t>(e.junk_ids.begin(), e.junk_ids.end());
  j["top_k"] = e.top_k;
  return j;
}

// ---------------------------------------------------------------------------
// Fits CSV reading (for report regeneration)
// ---------------------------------------------------------------------------

struct FitRow {
  std::optional<LogisticFit> fit;
  ThresholdResult threshold;
  std::optional<AuircResult> auirc;
};

inline std::map<std::pair<std::string, std::string>, FitRow> read_fits_csv(const fs::path& path) {
  const auto t = CsvTable::read(path);
  t.require({"kind", "model", "c", "k", "x0", "y0", "rss", "converged", "threshold", "auirc_norm", "unperturbed_rank1"});
  std::map<std::pair<std::string, std::string>, FitRow> out;
  for (const auto& row : t.rows()) {
    FitRow fr;
    auto c = parse_double(t.get(row, "c"));
    if (c) {
      LogisticFit f;
      f.c = *c;
      f.k = parse_double(t.get(row, "k")).value_or(0);
      f.x0 = parse_double(t.get(row, "x0")).value_or(0);
      f.y0 = parse_double(t.get(row, "y0")).value_or(0);
      f.rss = parse_double(t.get(row, "rss")).value_or(0);
      f.converged = t.get(row, "converged") == "true";
      fr.fit = f;
    }
    if (auto th = parse_double(t.get(row, "threshold"))) fr.threshold.value = *th;
    else fr.threshold.reason = "undefined";
    if (auto a = parse_double(t.get(row, "auirc_norm"))) fr.auirc = AuircResult{*a, 0, 0, true};
    out[{std::string(t.get(row, "kind")), std::string(t.get(row, "model"))}] = fr;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands shared by the CLI and the runner
// ---------------------------------------------------------------------------

/// points.csv -> fits.csv (one row per kind/model curve).
inline std::vector<ExperimentRecord> fit_points_file(const fs::path& points_csv, const fs::path& fits_csv,
                                                     const std::string& dataset) {
  std::vector<std::string> models;
  const auto curves = read_points_csv(points_csv, &models);
  std::vector<ExperimentRecord> recs;
  for (std::size_t i = 0; i < curves.size(); ++i) recs.push_back(summarize_curve(models[i], dataset, curves[i]));
  std::ostringstream o;
  write_fits_csv(o, recs);
  write_file_atomic(fits_csv, o.str());
  return recs;
}

/// Renders curve.svg for a results/<dataset>/<kind> directory from its CSVs.
inline fs::path render_result_dir(const fs::path& dir, const std::string& dataset) {
  std::vector<std::string> models;
  const auto curves = read_points_csv(dir / "points.csv", &models);
  const auto fits = read_fits_csv(dir / "fits.csv");
  std::map<PerturbKind, std::vector<ExperimentRecord>> by_kind;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    ExperimentRecord rec;
    rec.model = models[i];
    rec.dataset = dataset;
    rec.kind = curves[i].kind;
    rec.irc = curves[i];
    if (auto it = fits.find({std::string(to_string(rec.kind)), rec.model}); it != fits.end()) {
      rec.fit = it->second.fit;
      rec.threshold = it->second.threshold;
      rec.auirc = it->second.auirc;
    }
    by_kind[rec.kind].push_back(std::move(rec));
  }
  if (by_kind.size() != 1) throw ParameterError(dir.string() + ": points.csv must hold exactly one perturbation kind");
  const fs::path svg = dir / "curve.svg";
  write_file_atomic(svg, emit_plot(by_kind.begin()->second));
  return svg;
}

/// Regenerates every plot under `<results_root>/<dataset>/<kind>/`.
inline std::vector<fs::path> render_results_tree(const fs::path& results_root) {
  std::vector<fs::path> dirs;
  for (const auto& ds : fs::directory_iterator(results_root)) {
    if (!ds.is_directory()) continue;
    for (const auto& kd : fs::directory_iterator(ds.path()))
      if (kd.is_directory() && fs::exists(kd.path() / "points.csv") && fs::exists(kd.path() / "fits.csv"))
        dirs.push_back(kd.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<fs::path> out;
  for (const auto& d : dirs) out.push_back(render_result_dir(d, d.parent_path().filename().string()));
  return out;
}

struct BuildSplitOutputs {
  TrackSplitResult split;
  SplitReport report;
};

/// Track CSV -> train.csv, query.csv, gallery.csv and split_report.txt in out_dir.
inline BuildSplitOutputs build_split_files(const fs::path& track_csv, const fs::path& out_dir, const SplitConfig& cfg,
                                           double bin_width = 1.0) {
  BuildSplitOutputs out;
  out.split = build_track_split(parse_track_csv(track_csv), cfg);
  const auto emit = [&](const Manifest& m, const char* name) {
    std::ostringstream o;
    write_manifest_csv(o, m);
    write_file_atomic(out_dir / name, o.str());
  };
  emit(out.split.train, "train.csv");
  emit(out.split.query, "query.csv");
  emit(out.split.gallery, "gallery.csv");
  if (!out.split.query.empty() && !out.split.gallery.empty()) {
    out.report = validate_split(out.split.query, out.split.gallery, bin_width);
    write_file_atomic(out_dir / "split_report.txt", format_split_report(out.report));
  }
  return out;
}

/// Pose CSV -> clusters.csv (image_id,cluster), cluster_sizes.csv,
/// inertia.csv and heatmap_<c>.pgm in out_dir.
inline PoseClustering pose_cluster_files(const fs::path& pose_csv, const fs::path& out_dir, std::size_t k_max,
                                         std::uint64_t seed, std::size_t grid, const Manifest* boxes = nullptr) {
  std::ifstream in(pose_csv);
  if (!in) throw IoError("cannot open " + pose_csv.string());
  auto poses = parse_pose_csv(in, pose_csv.string());
  if (boxes) {
    for (auto& p : poses) {
      if (p.bbox) continue;
      const auto* r = boxes->find(p.image_id);
      if (r && r->bbox) p.bbox = r->bbox;
    }
  }
  auto result = cluster_poses(poses, k_max, seed);
  std::ostringstream assign, sizes, inertia;
  assign << "image_id,cluster\n";
  for (std::size_t i = 0; i < result.image_ids.size(); ++i) assign << csv_escape(result.image_ids[i]) << ',' << result.model.assignments[i] << '\n';
  sizes << "cluster,size\n";
  for (std::size_t c = 0; c < result.model.k; ++c) {
    const auto n = std::count(result.model.assignments.begin(), result.model.assignments.end(), c);
    sizes << c << ',' << n << '\n';
    write_file_atomic(out_dir / ("heatmap_" + std::to_string(c) + ".pgm"),
                      heatmap_pgm(joint_heatmap(result.model, result.points, c, grid)));
  }
  inertia << "k,inertia,selected\n";
  for (std::size_t i = 0; i < result.elbow.inertias.size(); ++i)
    inertia << i + 1 << ',' << format_double(result.elbow.inertias[i]) << ',' << (i + 1 == result.elbow.k ? "true" : "false") << '\n';
  write_file_atomic(out_dir / "clusters.csv", assign.str());
  write_file_atomic(out_dir / "cluster_sizes.csv", sizes.str());
  write_file_atomic(out_dir / "inertia.csv", inertia.str());
  return result;
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct RunOptions {
  unsigned threads = 1;
  bool resume = true;
  std::optional<std::uint64_t> seed_override;
  std::ostream* log = nullptr;
};

struct RunSummary {
  std::vector<std::string> ran;
  std::vector<std::string> skipped;
  std::vector<fs::path> plots;
  std::vector<std::string> warnings;
};

namespace detail {

class StageRunner {
 public:
  StageRunner(const RunOptions& opts, RunSummary& summary) : opts_(opts), summary_(summary) {}

  /// Runs `body` unless every output exists and the recorded fingerprint matches.
  template <typename Body>
  void run(const std::string& stage, const std::string& fp, const std::vector<fs::path>& outputs, Body&& body) {
    const fs::path fp_path = fs::path(outputs.front().string() + ".fp");
    if (opts_.resume && std::all_of(outputs.begin(), outputs.end(), [](const auto& p) { return fs::exists(p); }) &&
        fs::exists(fp_path) && read_file(fp_path) == fp) {
      summary_.skipped.push_back(stage);
      log("skip " + stage);
      return;
    }
    log("run  " + stage);
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e);
    }
    write_file_atomic(fp_path, fp);
    summary_.ran.push_back(stage);
  }

  void log(const std::string& line) const {
    if (opts_.log) *opts_.log << line << '\n';
  }

 private:
  const RunOptions& opts_;
  RunSummary& summary_;
};

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Stimulus rows of one level, as a standalone manifest.
inline StimulusManifest level_slice(const StimulusManifest& sm, std::size_t li) {
  StimulusManifest out;
  out.base_dir = sm.base_dir;
  for (const auto& r : sm.rows)
    if (r.level_index == li) out.rows.push_back(r);
  return out;
}

/// Query records whose stimulus at this level was produced.
inline Manifest ok_subset(const Manifest& m, const StimulusManifest& level) {
  std::set<std::string> ok;
  for (const auto& r : level.rows)
    if (r.ok()) ok.insert(r.image_id);
  Manifest out;
  out.split = m.split;
  out.source = m.source;
  for (const auto& r : m.records)
    if (ok.count(r.image_id)) out.records.push_back(r);
  return out;
}

}  // namespace detail

/// Runs every sweep for every model. Outputs do not depend on `threads`.
inline RunSummary run_pipeline(RunConfig cfg, const RunOptions& opts) {
  if (opts.seed_override) cfg.override_seed(*opts.seed_override);
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw StageError("validate", e);
  }
  RunSummary summary;
  detail::StageRunner stages(opts, summary);

  Manifest query, gallery;
  std::string query_digest, gallery_digest;
  std::optional<OccluderLibrary> occluders;
  try {
    query = parse_manifest(cfg.query_manifest, cfg.format, Split::query);
    gallery = parse_manifest(cfg.gallery_manifest, cfg.format, Split::gallery);
    query_digest = file_digest(cfg.query_manifest);
    gallery_digest = file_digest(cfg.gallery_manifest);
    if (cfg.occluder_assets) occluders = OccluderLibrary::load(*cfg.occluder_assets);
    if (query.empty() || gallery.empty()) throw ConfigError("query and gallery manifests must be non-empty");
  } catch (const std::exception& e) {
    throw StageError("load", e);
  }
  const fs::path query_root = manifest_root(cfg.query_manifest, cfg.format);
  const fs::path gallery_root = manifest_root(cfg.gallery_manifest, cfg.format);
  const fs::path out = cfg.output_root;
  const fs::path results_root = out / "results";
  const std::string occluder_digest = cfg.occluder_assets ? file_digest(*cfg.occluder_assets / "assets.csv") : "";

  // Gallery stimuli are only needed by external providers.
  std::string gallery_stim_fp = fingerprint({{"stage", "gallery-stimuli"}, {"manifest", gallery_digest}});
  std::optional<StimulusManifest> gallery_stimuli;
  const bool any_external = std::any_of(cfg.models.begin(), cfg.models.end(), [](const auto& m) { return !m.synthetic; });
  if (any_external) {
    const fs::path csv = out / "gallery_stimuli" / "identity" / "stimuli.csv";
    stages.run("gallery-stimuli", gallery_stim_fp, {csv}, [&] {
      SweepOptions so;
      so.threads = opts.threads;
      so.source_root = gallery_root;
      materialize_sweep(gallery, StimulusSweep{PerturbKind::identity, {0.0}, 0}, out / "gallery_stimuli", so);
    });
    gallery_stimuli = read_stimulus_manifest(csv);
  }

  // Gallery embeddings, once per model.
  std::map<std::string, std::string> gallery_emb_fp;
  std::map<std::string, EmbeddingMatrix> gallery_emb;
  for (const auto& m : cfg.models) {
    const fs::path emb_path = out / "embeddings" / m.label / "gallery.emb";
    const std::string fp =
        fingerprint({{"stage", "embed-gallery"}, {"model", model_json(cfg, m)}, {"gallery", gallery_digest}, {"stimuli", gallery_stim_fp}});
    gallery_emb_fp[m.label] = fp;
    stages.run("embed:" + m.label + ":gallery", fp, {emb_path}, [&] {
      if (m.synthetic) {
        write_embeddings(synthetic_embeddings(gallery, m.synth.gallery_noise, m.synth.dim, cfg.synthetic_seed(m)), emb_path);
      } else {
        ProviderConfig pc = m.external;
        pc.work_dir = out / "embeddings" / m.label / "work";
        auto res = run_provider(pc, *gallery_stimuli);
        for (const auto& id : res.missing) summary.warnings.push_back("provider returned no embedding for gallery image '" + id + "'");
        write_embeddings(res.embeddings, emb_path);
      }
    });
    gallery_emb[m.label] = read_embeddings(emb_path);
  }

  for (std::size_t si = 0; si < cfg.sweeps.size(); ++si) {
    const auto& sweep = cfg.sweeps[si];
    const std::string kind(to_string(sweep.kind));

    // sweep
    const fs::path stim_csv = out / "stimuli" / kind / "stimuli.csv";
    const std::string sweep_fp = fingerprint({{"stage", "sweep"},
                                              {"kind", kind},
                                              {"levels", levels_json(sweep.levels)},
                                              {"seed", sweep.seed},
                                              {"manifest", query_digest},
                                              {"occluders", occluder_digest},
                                              {"partial_side", static_cast<int>(cfg.partial_side)}});
    stages.run("sweep:" + kind, sweep_fp, {stim_csv}, [&] {
      SweepOptions so;
      so.threads = opts.threads;
      so.source_root = query_root;
      so.context.occluders = occluders ? &*occluders : nullptr;
      so.context.partial_side = cfg.partial_side;
      materialize_sweep(query, sweep, out / "stimuli", so);
    });
    const StimulusManifest stimuli = read_stimulus_manifest(stim_csv);

    // embed
    json embed_fps = json::object();
    for (const auto& m : cfg.models) {
      for (std::size_t li = 0; li < sweep.levels.size(); ++li) {
        const fs::path emb_path = out / "embeddings" / m.label / kind / (std::to_string(li) + ".emb");
        const std::string fp = fingerprint({{"stage", "embed"}, {"model", model_json(cfg, m)}, {"sweep", sweep_fp}, {"level_index", li}});
        embed_fps[m.label].push_back(fp);
        stages.run("embed:" + m.label + ":" + kind + ":" + std::to_string(li), fp, {emb_path}, [&] {
          const auto level = detail::level_slice(stimuli, li);
          if (m.synthetic) {
            const Manifest subset = detail::ok_subset(query, level);
            write_embeddings(synthetic_embeddings(subset, m.synth.noise_for(li), m.synth.dim, cfg.synthetic_seed(m)), emb_path);
          } else {
            ProviderConfig pc = m.external;
            pc.work_dir = out / "embeddings" / m.label / "work";
            auto res = run_provider(pc, level);
            for (const auto& id : res.missing)
              summary.warnings.push_back("provider returned no embedding for '" + id + "' at " + kind + " level " + std::to_string(li));
            write_embeddings(res.embeddings, emb_path);
          }
        });
      }
    }

    // eval
    const fs::path result_dir = results_root / cfg.dataset / kind;
    const fs::path points_csv = result_dir / "points.csv";
    json gallery_fps = json::object();
    for (const auto& m : cfg.models) gallery_fps[m.label] = gallery_emb_fp[m.label];
    const std::string eval_fp = fingerprint(
        {{"stage", "eval"}, {"eval", eval_json(cfg.eval)}, {"embed", embed_fps}, {"gallery", gallery_fps}, {"dataset", cfg.dataset}});
    stages.run("eval:" + kind, eval_fp, {points_csv}, [&] {
      std::vector<ExperimentRecord> recs;
      for (const auto& m : cfg.models) {
        const GalleryView gview(gallery, gallery_emb.at(m.label));
        std::vector<EmbeddingMatrix> mats;
        mats.reserve(sweep.levels.size());
        for (std::size_t li = 0; li < sweep.levels.size(); ++li)
          mats.push_back(read_embeddings(out / "embeddings" / m.label / kind / (std::to_string(li) + ".emb")));
        std::vector<LevelEmbeddings> lv;
        for (std::size_t li = 0; li < sweep.levels.size(); ++li) lv.push_back({sweep.levels[li], &mats[li]});
        for (std::size_t li = 0; li < sweep.levels.size(); ++li) {
          Manifest covered;
          for (const auto& r : query.records)
            if (mats[li].find(r.image_id)) covered.records.push_back(r);
          const auto s = evaluate(QuerySet{covered, mats[li]}, gview, cfg.eval, opts.threads);
          std::ostringstream pq;
          write_per_query_csv(pq, s);
          write_file_atomic(result_dir / "per_query" / m.label / (std::to_string(li) + ".csv"), pq.str());
        }
        ExperimentRecord rec;
        rec.model = m.label;
        rec.dataset = cfg.dataset;
        rec.kind = sweep.kind;
        rec.irc = assemble_irc(sweep.kind, lv, query, gview, cfg.eval, opts.threads);
        recs.push_back(std::move(rec));
      }
      std::ostringstream o;
      write_points_csv(o, recs);
      write_file_atomic(points_csv, o.str());
    });

    // fit
    const fs::path fits_csv = result_dir / "fits.csv";
    const std::string fit_fp = fingerprint({{"stage", "fit"}, {"points", eval_fp}});
    stages.run("fit:" + kind, fit_fp, {fits_csv}, [&] { fit_points_file(points_csv, fits_csv, cfg.dataset); });

    // report
    const fs::path svg = result_dir / "curve.svg";
    const std::string report_fp = fingerprint({{"stage", "report"}, {"fits", fit_fp}});
    stages.run("report:" + kind, report_fp, {svg, result_dir / "record.json"}, [&] {
      const std::string started = detail::utc_now();
      render_result_dir(result_dir, cfg.dataset);
      json rec;
      rec["dataset"] = cfg.dataset;
      rec["kind"] = kind;
      rec["fingerprint"] = report_fp;
      rec["models"] = json::array();
      for (const auto& m : cfg.models) rec["models"].push_back(m.label);
      rec["started"] = started;
      rec["finished"] = detail::utc_now();
      write_file_atomic(result_dir / "record.json", rec.dump(2) + "\n");
    });
    summary.plots.push_back(svg);
  }
  return summary;
}

}  // namespace psyreid
