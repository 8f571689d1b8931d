#pragma once

// Synthetic benchmark: a small image corpus with a query/gallery split and a
// ready-to-run config that pairs a gaussian_blur sweep with the synthetic
// provider. Used by the CLI `make-fixture` command and by the tests.

#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "psyreid/core.hpp"
#include "psyreid/dataset.hpp"
#include "psyreid/image.hpp"

namespace psyreid {

struct FixtureOptions {
  std::size_t identities = 100;
  std::size_t images_per_identity = 3;  // first goes to the query split, the rest to the gallery
  int width = 24;
  int height = 48;
  std::uint64_t seed = 7;
  std::vector<double> levels = {0, 0.5, 1, 1.5, 2, 2.5, 3, 3.5};
  double noise_base = 0.0;
  double noise_step = 0.16;
  std::size_t dim = 32;
};

struct FixturePaths {
  fs::path config;
  fs::path query_manifest;
  fs::path gallery_manifest;
};

/// Writes images/, query.csv, gallery.csv and run.json under dir.
inline FixturePaths make_fixture(const fs::path& dir, const FixtureOptions& opt = {}) {
  if (opt.identities == 0 || opt.images_per_identity < 2) throw ParameterError("fixture needs identities and >= 2 images each");
  fs::create_directories(dir / "images");
  Manifest query, gallery;
  query.split = Split::query;
  gallery.split = Split::gallery;
  for (std::size_t p = 0; p < opt.identities; ++p) {
    Rng rng(mix64(opt.seed, p));
    const std::uint8_t base[3] = {static_cast<std::uint8_t>(rng.below(256)), static_cast<std::uint8_t>(rng.below(256)),
                                  static_cast<std::uint8_t>(rng.below(256))};
    for (std::size_t i = 0; i < opt.images_per_identity; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "p%04zu_%zu", p, i);
      Image img(opt.width, opt.height);
      // torso/legs bands with per-image speckle
      for (int y = 0; y < opt.height; ++y)
        for (int x = 0; x < opt.width; ++x) {
          auto* px = img.px(x, y);
          const bool legs = y >= opt.height / 2;
          for (int ch = 0; ch < 3; ++ch) {
            const int v = (legs ? 255 - base[ch] : base[ch]) + static_cast<int>(rng.below(31)) - 15;
            px[ch] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
          }
        }
      const std::string rel = std::string("images/") + id + ".png";
      save_png(img, dir / rel);
      SampleRecord r;
      r.image_id = id;
      r.path = rel;
      r.person_id = static_cast<std::int64_t>(p);
      r.camera_id = static_cast<int>(i);
      (i == 0 ? query : gallery).records.push_back(std::move(r));
    }
  }
  FixturePaths out{dir / "run.json", dir / "query.csv", dir / "gallery.csv"};
  std::ostringstream q, g;
  write_manifest_csv(q, query);
  write_manifest_csv(g, gallery);
  write_file_atomic(out.query_manifest, q.str());
  write_file_atomic(out.gallery_manifest, g.str());

  nlohmann::json cfg;
  cfg["dataset"] = "synthetic";
  cfg["query_manifest"] = "query.csv";
  cfg["gallery_manifest"] = "gallery.csv";
  cfg["manifest_format"] = "csv";
  cfg["output_root"] = "out";
  cfg["seed"] = opt.seed;
  cfg["sweeps"] = nlohmann::json::array({{{"kind", "gaussian_blur"}, {"levels", opt.levels}}});
  cfg["models"] = nlohmann::json::array({{{"label", "synthetic"},
                                          {"provider",
                                           {{"mode", "synthetic"},
                                            {"dim", opt.dim},
                                            {"noise_base", opt.noise_base},
                                            {"noise_step", opt.noise_step},
                                            {"gallery_noise", 0.0}}}}});
  cfg["eval"] = {{"similarity", "cosine"}, {"cross_camera_filter", false}};
  write_file_atomic(out.config, cfg.dump(2) + "\n");
  return out;
}

}  // namespace psyreid
