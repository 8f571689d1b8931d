#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "psyreid/fixture.hpp"
#include "psyreid/perturb.hpp"
#include "support.hpp"

using namespace psyreid;

namespace {

Image noise_image(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  Image img(w, h);
  for (auto& b : img.data) b = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

// Smooth gradient plus mild texture: closer to natural content than pure noise.
Image photo_like(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  const double a = rng.uniform(0, 6.28), b = rng.uniform(0, 6.28);
  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto* p = img.px(x, y);
      p[0] = to_u8(128 + 90 * std::sin(a + x * 0.11) + rng.uniform(-8, 8));
      p[1] = to_u8(128 + 90 * std::cos(b + y * 0.07) + rng.uniform(-8, 8));
      p[2] = to_u8(static_cast<double>(x + y) * 255.0 / (w + h) + rng.uniform(-8, 8));
    }
  return img;
}

OccluderLibrary square_library() {
  OccluderLibrary lib;
  OccluderAsset a;
  a.asset_id = "square";
  a.image = RgbaImage(10, 10);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      auto* p = a.image.px(x, y);
      p[0] = 255;
      p[1] = 0;
      p[2] = 0;
      p[3] = 255;
    }
  a.mask_area_px = 100;
  lib.assets.push_back(a);
  return lib;
}

int max_abs_diff(const Image& a, const Image& b) {
  int m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(int(a.data[i]) - int(b.data[i])));
  return m;
}

}  // namespace

TEST(Perturb, OccludeBottomExtremes) {
  const auto img = noise_image(32, 40, 1);
  EXPECT_EQ(apply_perturbation(img, {PerturbKind::occlude_bottom, 0.0, 0}), img);
  const auto black = apply_perturbation(img, {PerturbKind::occlude_bottom, 1.0, 0});
  for (auto b : black.data) ASSERT_EQ(b, 0);
}

TEST(Perturb, OccludeBottomRowCount) {
  const auto img = solid_image(10, 10, 9, 9, 9);
  const auto out = apply_perturbation(img, {PerturbKind::occlude_bottom, 0.25, 0});
  // round(2.5) = 3 rows
  EXPECT_EQ(out.px(0, 6)[0], 9);
  EXPECT_EQ(out.px(0, 7)[0], 0);
}

TEST(Perturb, OccludeLeftColumns) {
  const auto img = solid_image(10, 4, 50, 60, 70);
  const auto out = apply_perturbation(img, {PerturbKind::occlude_left, 0.3, 0});
  for (int y = 0; y < 4; ++y) {
    EXPECT_EQ(out.px(2, y)[1], 0);
    EXPECT_EQ(out.px(3, y)[1], 60);
  }
}

TEST(Perturb, OccludeRepeatCopiesLastVisibleRow) {
  const auto img = noise_image(8, 10, 2);
  const auto out = apply_perturbation(img, {PerturbKind::occlude_repeat, 0.5, 0});
  for (int y = 5; y < 10; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) ASSERT_EQ(out.px(x, y)[c], img.px(x, 4)[c]);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 8; ++x) ASSERT_EQ(out.px(x, y)[0], img.px(x, y)[0]);
}

TEST(Perturb, BlurOfConstantIsExact) {
  const auto gray = solid_image(40, 30, 128, 128, 128);
  EXPECT_EQ(apply_perturbation(gray, {PerturbKind::gaussian_blur, 4.0, 0}), gray);
}

TEST(Perturb, BlurSigmaZeroIsIdentityAndBlurSmooths) {
  const auto img = noise_image(30, 30, 3);
  EXPECT_EQ(apply_perturbation(img, {PerturbKind::gaussian_blur, 0.0, 0}), img);
  const auto blurred = apply_perturbation(img, {PerturbKind::gaussian_blur, 2.0, 0});
  double var_in = 0, var_out = 0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    var_in += std::pow(img.data[i] - 127.5, 2);
    var_out += std::pow(blurred.data[i] - 127.5, 2);
  }
  EXPECT_LT(var_out, 0.2 * var_in);
}

TEST(Perturb, TranslateMatchesPixelShiftOracle) {
  const auto img = noise_image(128, 64, 4);
  const auto out = apply_perturbation(img, {PerturbKind::translate, 0.5, 0});
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 128; ++x)
      for (int c = 0; c < 3; ++c) {
        const int expect = x < 64 ? 0 : img.px(x - 64, y)[c];
        ASSERT_EQ(out.px(x, y)[c], expect) << x << "," << y;
      }
}

TEST(Perturb, TranslateNegativeShiftsLeft) {
  const auto img = noise_image(20, 5, 5);
  const auto out = apply_perturbation(img, {PerturbKind::translate, -0.25, 0});
  for (int y = 0; y < 5; ++y) {
    EXPECT_EQ(out.px(0, y)[0], img.px(5, y)[0]);
    EXPECT_EQ(out.px(19, y)[0], 0);
  }
}

TEST(Perturb, ScaleIdentityAndShrinkPadsBlack) {
  const auto img = solid_image(40, 40, 200, 200, 200);
  EXPECT_EQ(apply_perturbation(img, {PerturbKind::scale, 1.0, 0}), img);
  const auto small = apply_perturbation(img, {PerturbKind::scale, 0.5, 0});
  EXPECT_EQ(small.px(0, 0)[0], 0);
  EXPECT_EQ(small.px(20, 20)[0], 200);
  const auto big = apply_perturbation(img, {PerturbKind::scale, 2.0, 0});
  EXPECT_EQ(big.px(0, 0)[0], 200);
}

TEST(Perturb, PartialDetectionStretchesRemainingRows) {
  Image img(4, 10);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 4; ++x) img.px(x, y)[0] = y < 5 ? 100 : 250;
  const auto out = apply_perturbation(img, {PerturbKind::partial_detection, 0.5, 0});
  for (int y = 0; y < 10; ++y) EXPECT_EQ(out.px(1, y)[0], 100);
  EXPECT_EQ(apply_perturbation(img, {PerturbKind::partial_detection, 0.0, 0}), img);
}

TEST(Perturb, JpegDoubleEncodeIsNearlyIdempotent) {
  // Bound frozen from a measurement over this 10-image corpus (observed max 5;
  // 4:2:0 chroma resampling keeps drifting a little on the second pass).
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto img = photo_like(64, 128, s);
    const auto once = apply_perturbation(img, {PerturbKind::jpeg, 100, 0});
    const auto twice = apply_perturbation(once, {PerturbKind::jpeg, 100, 0});
    EXPECT_LE(max_abs_diff(once, twice), 5) << s;
  }
}

TEST(Perturb, JpegLowQualityDegrades) {
  const auto img = photo_like(64, 128, 11);
  EXPECT_GT(psnr(img, apply_perturbation(img, {PerturbKind::jpeg, 90, 0})),
            psnr(img, apply_perturbation(img, {PerturbKind::jpeg, 5, 0})));
}

TEST(Perturb, RainAndSnowAreSeededOverlays) {
  const auto img = solid_image(64, 128, 20, 20, 20);
  const PerturbationSpec r1{PerturbKind::rain, 1.0, 5}, r2{PerturbKind::rain, 1.0, 6};
  EXPECT_EQ(apply_perturbation(img, r1), apply_perturbation(img, r1));
  EXPECT_NE(apply_perturbation(img, r1), apply_perturbation(img, r2));
  EXPECT_NE(apply_perturbation(img, r1), img);
  EXPECT_EQ(apply_perturbation(img, {PerturbKind::rain, std::numeric_limits<double>::infinity(), 5}), img);
  EXPECT_EQ(apply_perturbation(img, {PerturbKind::snow, 0.0, 5}), img);
  const auto snowy = apply_perturbation(img, {PerturbKind::snow, 1.0, 5});
  std::size_t bright = 0;
  for (int y = 0; y < snowy.height; ++y)
    for (int x = 0; x < snowy.width; ++x) bright += snowy.px(x, y)[0] > 200;
  EXPECT_GT(bright, 100u);
}

TEST(Perturb, RainDensityFallsWithInverseLevel) {
  const auto img = solid_image(64, 128, 0, 0, 0);
  const auto lit = [](const Image& i) {
    std::size_t n = 0;
    for (std::size_t k = 0; k < i.data.size(); k += 3) n += i.data[k] > 0;
    return n;
  };
  EXPECT_GT(lit(apply_perturbation(img, {PerturbKind::rain, 0.5, 1})), lit(apply_perturbation(img, {PerturbKind::rain, 8, 1})));
}

TEST(Perturb, OccluderCoversRequestedFraction) {
  const auto lib = square_library();
  PerturbContext ctx;
  ctx.occluders = &lib;
  const auto img = solid_image(40, 40, 0, 0, 0);
  const auto out = apply_perturbation(img, {PerturbKind::occlude_voc, 0.25, 3}, ctx);
  std::size_t red = 0;
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) red += out.px(x, y)[0] == 255;
  EXPECT_EQ(red, 400u);
  EXPECT_EQ(apply_perturbation(img, {PerturbKind::occlude_voc, 0.0, 3}, ctx), img);
}

TEST(Perturb, OccluderNeedsLibrary) {
  EXPECT_THROW(apply_perturbation(solid_image(8, 8, 1, 1, 1), {PerturbKind::occlude_voc, 0.5, 0}), ConfigError);
}

TEST(Perturb, DomainViolations) {
  const auto img = solid_image(8, 8, 1, 1, 1);
  EXPECT_THROW(apply_perturbation(img, {PerturbKind::occlude_bottom, 1.5, 0}), ParameterError);
  EXPECT_THROW(apply_perturbation(img, {PerturbKind::partial_detection, 1.0, 0}), ParameterError);
  EXPECT_THROW(apply_perturbation(img, {PerturbKind::jpeg, 50.5, 0}), ParameterError);
  EXPECT_THROW(apply_perturbation(img, {PerturbKind::jpeg, 0, 0}), ParameterError);
  EXPECT_THROW(apply_perturbation(img, {PerturbKind::translate, -1.5, 0}), ParameterError);
  EXPECT_THROW(apply_perturbation(img, {PerturbKind::scale, 0, 0}), ParameterError);
  EXPECT_THROW(apply_perturbation(img, {PerturbKind::gaussian_blur, -1, 0}), ParameterError);
  EXPECT_THROW(apply_perturbation(img, {PerturbKind::rain, 0, 0}), ParameterError);
}

TEST(Perturb, DimensionsPreservedEverywhere) {
  const auto lib = square_library();
  PerturbContext ctx;
  ctx.occluders = &lib;
  const std::map<PerturbKind, std::vector<double>> levels = {
      {PerturbKind::identity, {0}},
      {PerturbKind::gaussian_blur, {0, 0.7, 2, 5, 12}},
      {PerturbKind::occlude_bottom, {0, 0.1, 0.5, 0.9, 1}},
      {PerturbKind::occlude_left, {0, 0.1, 0.5, 0.9, 1}},
      {PerturbKind::occlude_repeat, {0, 0.1, 0.5, 0.9, 1}},
      {PerturbKind::occlude_voc, {0, 0.1, 0.5, 0.9, 1}},
      {PerturbKind::partial_detection, {0, 0.1, 0.5, 0.9, 0.99}},
      {PerturbKind::jpeg, {1, 10, 50, 90, 100}},
      {PerturbKind::translate, {-1, -0.3, 0, 0.3, 1}},
      {PerturbKind::scale, {0.1, 0.5, 1, 1.5, 4}},
      {PerturbKind::rain, {0.1, 0.5, 1, 4, std::numeric_limits<double>::infinity()}},
      {PerturbKind::snow, {0, 0.1, 0.5, 0.9, 1}},
  };
  for (const auto& img : {noise_image(17, 33, 1), noise_image(64, 128, 2), noise_image(1, 1, 3)}) {
    for (const auto& [kind, lv] : levels)
      for (double l : lv) {
        const auto out = apply_perturbation(img, {kind, l, 9}, ctx);
        ASSERT_EQ(out.width, img.width) << to_string(kind) << " " << l;
        ASSERT_EQ(out.height, img.height) << to_string(kind) << " " << l;
        ASSERT_EQ(out.data.size(), img.data.size());
      }
  }
}

TEST(Sweep, ValidationRequiresMonotoneLevelsWithAnchor) {
  EXPECT_NO_THROW((StimulusSweep{PerturbKind::gaussian_blur, {0, 1, 2}, 0}.validate()));
  EXPECT_NO_THROW((StimulusSweep{PerturbKind::jpeg, {100, 50, 10}, 0}.validate()));
  EXPECT_THROW((StimulusSweep{PerturbKind::gaussian_blur, {1, 2}, 0}.validate()), ParameterError);
  EXPECT_THROW((StimulusSweep{PerturbKind::gaussian_blur, {0, 2, 1}, 0}.validate()), ParameterError);
  EXPECT_THROW((StimulusSweep{PerturbKind::gaussian_blur, {}, 0}.validate()), ParameterError);
}

TEST(Sweep, CountsFilesAndIsDeterministic) {
  testing_support::TempDir d;
  FixtureOptions fo;
  fo.identities = 3;
  fo.images_per_identity = 2;
  const auto fx = make_fixture(d / "fx", fo);
  const auto q = parse_manifest(fx.query_manifest, ManifestFormat::csv, Split::query);
  ASSERT_EQ(q.size(), 3u);
  SweepOptions so;
  so.source_root = fx.query_manifest.parent_path();
  const StimulusSweep sw{PerturbKind::snow, {0, 0.2, 0.4, 0.6, 0.8}, 11};
  const auto a = materialize_sweep(q, sw, d / "a", so);
  EXPECT_EQ(a.rows.size(), 15u);
  EXPECT_EQ(a.successes(), 15u);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(d / "a"))
    files += e.path().extension() == ".png";
  EXPECT_EQ(files, 15u);

  so.threads = 4;
  materialize_sweep(q, sw, d / "b", so);
  for (const auto& r : a.rows) EXPECT_EQ(read_file(d / "a/snow" / r.path), read_file(d / "b/snow" / r.path));

  // Non-random kinds ignore the seed.
  const auto c = materialize_sweep(q, {PerturbKind::occlude_bottom, {0, 0.5}, 1}, d / "c", so);
  materialize_sweep(q, {PerturbKind::occlude_bottom, {0, 0.5}, 2}, d / "e", so);
  for (const auto& r : c.rows)
    EXPECT_EQ(read_file(d / "c/occlude_bottom" / r.path), read_file(d / "e/occlude_bottom" / r.path));

  const auto back = read_stimulus_manifest(d / "a/snow/stimuli.csv");
  ASSERT_EQ(back.rows.size(), 15u);
  EXPECT_EQ(back.rows[7].level, a.rows[7].level);
  EXPECT_EQ(back.rows[7].image_id, a.rows[7].image_id);
}

TEST(Sweep, AnchorStimulusIsTheSourcePixels) {
  testing_support::TempDir d;
  FixtureOptions fo;
  fo.identities = 2;
  const auto fx = make_fixture(d / "fx", fo);
  const auto q = parse_manifest(fx.query_manifest, ManifestFormat::csv, Split::query);
  SweepOptions so;
  so.source_root = fx.query_manifest.parent_path();
  const auto sm = materialize_sweep(q, {PerturbKind::jpeg, {100, 60, 20}, 0}, d / "s", so);
  for (const auto* r : sm.level(0)) {
    const auto src = load_image(so.source_root / q.find(r->image_id)->path);
    EXPECT_EQ(load_image(sm.resolve(*r)), src);
  }
}

TEST(Sweep, UnreadableSourceBecomesFailedRow) {
  testing_support::TempDir d;
  FixtureOptions fo;
  fo.identities = 2;
  const auto fx = make_fixture(d / "fx", fo);
  auto q = parse_manifest(fx.query_manifest, ManifestFormat::csv, Split::query);
  q.records[1].path = "missing.png";
  SweepOptions so;
  so.source_root = fx.query_manifest.parent_path();
  const auto sm = materialize_sweep(q, {PerturbKind::gaussian_blur, {0, 1}, 0}, d / "s", so);
  EXPECT_EQ(sm.successes(), 2u);
  EXPECT_EQ(sm.rows[1].status.rfind("failed", 0), 0u);

  for (auto& r : q.records) r.path = "missing.png";
  EXPECT_THROW(materialize_sweep(q, {PerturbKind::gaussian_blur, {0, 1}, 0}, d / "t", so), IoError);
}
