// psyreid: command-line front end for the perturbation psychophysics pipeline.

#include <CLI11.hpp>
#include <iostream>
#include <thread>

#include "psyreid/fixture.hpp"
#include "psyreid/pipeline.hpp"

using namespace psyreid;

namespace {

std::vector<double> parse_levels(const std::string& text) {
  std::vector<double> out;
  std::string_view rest(text);
  while (true) {
    const auto comma = rest.find(',');
    const auto tok = trim(rest.substr(0, comma));
    auto v = parse_double(tok);
    if (!v) throw ConfigError("bad level '" + std::string(tok) + "'");
    out.push_back(*v);
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  return out;
}

ManifestFormat parse_format(const std::string& s) {
  if (s == "csv") return ManifestFormat::csv;
  if (s == "market_dir") return ManifestFormat::market_dir;
  throw ConfigError("format must be csv or market_dir");
}

void print_warnings(const std::vector<std::string>& w) {
  for (const auto& s : w) std::cerr << "warning: " << s << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Psychophysical robustness evaluation for person re-identification"};
  app.require_subcommand(1);
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--threads", threads, "worker threads (outputs do not depend on this)")->check(CLI::PositiveNumber);

  // run
  auto* run = app.add_subcommand("run", "sweep, embed, eval, fit and report from one config");
  std::string config;
  std::optional<std::uint64_t> seed_override;
  bool resume = true;
  run->add_option("--config", config)->required();
  run->add_option("--seed", seed_override, "override every seed in the config");
  run->add_flag("--resume,!--no-resume", resume, "skip stages whose fingerprints match (default on)");
  run->add_option("--threads", threads)->check(CLI::PositiveNumber);

  // make-fixture
  auto* mk = app.add_subcommand("make-fixture", "write the synthetic benchmark fixture");
  std::string fixture_dir;
  FixtureOptions fopt;
  mk->add_option("--out", fixture_dir)->required();
  mk->add_option("--identities", fopt.identities);
  mk->add_option("--seed", fopt.seed);
  mk->add_option("--noise-step", fopt.noise_step);

  // build-split
  auto* bs = app.add_subcommand("build-split", "temporal query/gallery split from a track CSV");
  std::string track_csv, split_out;
  SplitConfig scfg;
  double bin_width = 1.0;
  bs->add_option("--tracks", track_csv)->required();
  bs->add_option("--out", split_out)->required();
  bs->add_option("--gallery-frac", scfg.gallery_frac);
  bs->add_option("--query-frac", scfg.query_frac);
  bs->add_option("--min-keyframes", scfg.min_keyframes);
  bs->add_option("--min-visibility", scfg.min_visibility);
  bs->add_option("--bin-width", bin_width);

  // validate-split
  auto* vs = app.add_subcommand("validate-split", "check disjointness and temporal gaps of a split");
  std::string vq, vg;
  vs->add_option("--query", vq)->required();
  vs->add_option("--gallery", vg)->required();
  vs->add_option("--bin-width", bin_width);

  // sweep
  auto* sw = app.add_subcommand("sweep", "materialize perturbed stimuli for one sweep");
  std::string manifest, format = "csv", kind, levels, sweep_out, occluders, side = "bottom";
  std::uint64_t sweep_seed = 0;
  sw->add_option("--manifest", manifest)->required();
  sw->add_option("--format", format);
  sw->add_option("--kind", kind)->required();
  sw->add_option("--levels", levels, "comma-separated, must include the identity anchor")->required();
  sw->add_option("--seed", sweep_seed);
  sw->add_option("--out", sweep_out)->required();
  sw->add_option("--occluders", occluders);
  sw->add_option("--partial-side", side);

  // embed
  auto* em = app.add_subcommand("embed", "run a provider over a stimulus manifest");
  std::string mode = "subprocess", stimuli, embed_out, embed_manifest;
  std::vector<std::string> command;
  ProviderConfig pcfg;
  double noise = 0;
  std::size_t dim = 32;
  std::uint64_t embed_seed = 0;
  em->add_option("--mode", mode, "file, subprocess or synthetic");
  em->add_option("--stimuli", stimuli, "stimuli.csv (file/subprocess modes)");
  em->add_option("--manifest", embed_manifest, "manifest (synthetic mode)");
  em->add_option("--out", embed_out, "output directory (one .emb per level) or .emb file for synthetic mode")->required();
  em->add_option("--batch-size", pcfg.batch_size);
  em->add_option("--timeout", pcfg.timeout_s);
  em->add_option("--noise", noise);
  em->add_option("--dim", dim);
  em->add_option("--seed", embed_seed);
  em->add_option("command", command, "provider command line (after --)");

  // eval
  auto* ev = app.add_subcommand("eval", "rank-1 and mAP for one query/gallery embedding pair");
  std::string qemb, gemb, qman, gman, similarity = "cosine", per_query;
  EvalConfig ecfg;
  std::vector<std::int64_t> junk;
  ev->add_option("--query-emb", qemb)->required();
  ev->add_option("--gallery-emb", gemb)->required();
  ev->add_option("--query", qman)->required();
  ev->add_option("--gallery", gman)->required();
  ev->add_option("--format", format);
  ev->add_option("--similarity", similarity);
  ev->add_flag("--cross-camera", ecfg.cross_camera_filter);
  ev->add_option("--junk", junk);
  ev->add_option("--top-k", ecfg.top_k);
  ev->add_option("--per-query", per_query);

  // fit
  auto* ft = app.add_subcommand("fit", "fit logistic curves to a points.csv");
  std::string points, fits_out, dataset = "dataset";
  ft->add_option("--points", points)->required();
  ft->add_option("--out", fits_out, "defaults to fits.csv next to the input");
  ft->add_option("--dataset", dataset);

  // report
  auto* rp = app.add_subcommand("report", "render curve.svg for every results directory");
  std::string results_root;
  rp->add_option("--results", results_root)->required();

  // pose-cluster
  auto* pc = app.add_subcommand("pose-cluster", "k-means pose clustering with elbow selection");
  std::string poses, pose_out, pose_manifest;
  std::size_t k_max = 10, grid = 16;
  std::uint64_t pose_seed = 0;
  pc->add_option("--poses", poses)->required();
  pc->add_option("--out", pose_out)->required();
  pc->add_option("--k-max", k_max);
  pc->add_option("--seed", pose_seed);
  pc->add_option("--grid", grid);
  pc->add_option("--manifest", pose_manifest, "manifest supplying bounding boxes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*run) {
      RunOptions opts;
      opts.threads = threads;
      opts.resume = resume;
      opts.seed_override = seed_override;
      opts.log = &std::cerr;
      const auto s = run_pipeline(RunConfig::load(config), opts);
      print_warnings(s.warnings);
      std::cout << "stages run: " << s.ran.size() << ", skipped: " << s.skipped.size() << '\n';
      for (const auto& p : s.plots) std::cout << p.string() << '\n';
    } else if (*mk) {
      const auto paths = make_fixture(fixture_dir, fopt);
      std::cout << paths.config.string() << '\n';
    } else if (*bs) {
      scfg.validate();
      const auto out = build_split_files(track_csv, split_out, scfg, bin_width);
      print_warnings(out.split.warnings);
      std::cout << "train " << out.split.train.size() << ", query " << out.split.query.size() << ", gallery "
                << out.split.gallery.size() << '\n';
      if (!out.report.ok()) return kExitValidation;
    } else if (*vs) {
      const auto rep = validate_split(parse_manifest(vq, ManifestFormat::csv, Split::query),
                                      parse_manifest(vg, ManifestFormat::csv, Split::gallery), bin_width);
      std::cout << format_split_report(rep);
      if (!rep.ok()) return kExitValidation;
    } else if (*sw) {
      const auto fmt = parse_format(format);
      StimulusSweep sweep{parse_perturb_kind(kind), parse_levels(levels), sweep_seed};
      std::optional<OccluderLibrary> lib;
      if (!occluders.empty()) lib = OccluderLibrary::load(occluders);
      SweepOptions so;
      so.threads = threads;
      so.source_root = manifest_root(manifest, fmt);
      so.context.occluders = lib ? &*lib : nullptr;
      so.context.partial_side = parse_crop_side(side);
      const auto sm = materialize_sweep(parse_manifest(manifest, fmt), sweep, sweep_out, so);
      const auto ok = std::count_if(sm.rows.begin(), sm.rows.end(), [](const auto& r) { return r.ok(); });
      std::cout << ok << "/" << sm.rows.size() << " stimuli written under " << (fs::path(sweep_out) / kind).string() << '\n';
    } else if (*em) {
      if (mode == "synthetic") {
        if (embed_manifest.empty()) throw ConfigError("synthetic mode needs --manifest");
        write_embeddings(synthetic_embeddings(parse_manifest(embed_manifest, ManifestFormat::csv), noise, dim, embed_seed),
                         embed_out);
      } else {
        if (stimuli.empty()) throw ConfigError("--stimuli is required");
        pcfg.mode = mode == "file" ? ProviderMode::file : mode == "subprocess" ? ProviderMode::subprocess
                                                                               : throw ConfigError("unknown provider mode " + mode);
        pcfg.command = command;
        pcfg.validate();
        const auto sm = read_stimulus_manifest(stimuli);
        std::set<std::size_t> lis;
        for (const auto& r : sm.rows) lis.insert(r.level_index);
        for (auto li : lis) {
          const auto res = run_provider(pcfg, detail::level_slice(sm, li));
          for (const auto& id : res.missing) std::cerr << "warning: no embedding for '" << id << "'\n";
          write_embeddings(res.embeddings, fs::path(embed_out) / (std::to_string(li) + ".emb"));
        }
      }
    } else if (*ev) {
      const auto fmt = parse_format(format);
      ecfg.similarity = parse_similarity(similarity);
      ecfg.junk_ids.insert(junk.begin(), junk.end());
      const auto q = parse_manifest(qman, fmt, Split::query);
      const auto g = parse_manifest(gman, fmt, Split::gallery);
      const auto qe = read_embeddings(qemb);
      const auto ge = read_embeddings(gemb);
      Manifest covered;
      for (const auto& r : q.records)
        if (qe.find(r.image_id)) covered.records.push_back(r);
      const auto s = evaluate(QuerySet{covered, qe}, GalleryView(g, ge), ecfg, threads);
      print_warnings(s.warnings);
      if (!per_query.empty()) {
        std::ostringstream o;
        write_per_query_csv(o, s);
        write_file_atomic(per_query, o.str());
      }
      std::cout << "rank1 " << format_double(s.rank1) << "\nrank" << ecfg.top_k << ' ' << format_double(s.rank_k) << "\nmap "
                << format_double(s.map) << "\nevaluable " << s.evaluable << '/' << s.total << '\n';
    } else if (*ft) {
      const fs::path out = fits_out.empty() ? fs::path(points).parent_path() / "fits.csv" : fs::path(fits_out);
      for (const auto& r : fit_points_file(points, out, dataset)) {
        std::cout << r.model << ' ' << to_string(r.kind) << ": ";
        if (r.threshold.value) std::cout << "threshold " << format_double(*r.threshold.value) << '\n';
        else std::cout << "threshold undefined (" << r.threshold.reason << ")\n";
      }
    } else if (*rp) {
      for (const auto& p : render_results_tree(results_root)) std::cout << p.string() << '\n';
    } else if (*pc) {
      std::optional<Manifest> boxes;
      if (!pose_manifest.empty()) boxes = parse_manifest(pose_manifest, ManifestFormat::csv);
      const auto r = pose_cluster_files(poses, pose_out, k_max, pose_seed, grid, boxes ? &*boxes : nullptr);
      std::cout << "k " << r.model.k << "\n";
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitOk;
}
