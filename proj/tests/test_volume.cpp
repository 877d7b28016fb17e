#include <doctest.h>

#include <cmath>
#include <random>

#include "lesionseg/volume.hpp"
#include "test_support.hpp"

using namespace lesionseg;
using testsup::TempDir;

TEST_CASE("grid validation rejects bad fields") {
  VolumeGrid g = VolumeGrid::isotropic({4, 4, 4}, 1.0);
  CHECK_NOTHROW(g.validate());

  VolumeGrid zero_dim = g;
  zero_dim.dims[1] = 0;
  CHECK_THROWS(zero_dim.validate());

  VolumeGrid bad_voxel = g;
  bad_voxel.voxel_size[2] = 0.0;
  CHECK_THROWS(bad_voxel.validate());

  VolumeGrid singular = g;
  singular.origin_affine.row(0).setZero();
  CHECK_THROWS(singular.validate());
}

TEST_CASE("flat index is x-fastest") {
  VolumeGrid g = VolumeGrid::isotropic({3, 4, 5}, 1.0);
  CHECK(g.flat_index(0, 0, 0) == 0);
  CHECK(g.flat_index(1, 0, 0) == 1);
  CHECK(g.flat_index(0, 1, 0) == 3);
  CHECK(g.flat_index(0, 0, 1) == 12);
  CHECK(g.flat_index(1, 2, 3) == 1 + 3 * (2 + 4 * 3));
  CHECK(g.voxel_count() == 60);
}

TEST_CASE("voxel volume and centers follow the affine") {
  VolumeGrid g = VolumeGrid::isotropic({2, 2, 2}, 2.0);
  CHECK(g.voxel_volume_mm3() == doctest::Approx(8.0));
  const Eigen::Vector3d c = g.voxel_center_world(1, 0, 1);
  CHECK(c[0] == doctest::Approx(2.0));
  CHECK(c[1] == doctest::Approx(0.0));
  CHECK(c[2] == doctest::Approx(2.0));
}

TEST_CASE("log transform evaluates the clamped logarithm") {
  VolumeGrid g = VolumeGrid::isotropic({3, 1, 1}, 1.0);
  MultiContrastImage raw = MultiContrastImage::zeros(g, {ContrastTag::kT1w});
  raw.at(0, 0) = 1.0;
  raw.at(0, 1) = std::exp(1.0);
  raw.at(0, 2) = 0.0;

  const MultiContrastImage out = log_transform(raw, 1e-4);
  CHECK(out.log_domain);
  CHECK(out.at(0, 0) == doctest::Approx(0.0));
  CHECK(out.at(0, 1) == doctest::Approx(1.0));
  CHECK(out.at(0, 2) == doctest::Approx(std::log(1e-4)));
  CHECK(out.contrasts == raw.contrasts);
  CHECK(same_geometry(out.grid, raw.grid));
}

TEST_CASE("log transform rejects log-domain and non-finite input") {
  VolumeGrid g = VolumeGrid::isotropic({2, 1, 1}, 1.0);
  MultiContrastImage raw = MultiContrastImage::zeros(g, {ContrastTag::kT1w});
  raw.at(0, 0) = 1.0;
  raw.at(0, 1) = 2.0;

  MultiContrastImage already = raw;
  already.log_domain = true;
  CHECK_THROWS(log_transform(already));

  MultiContrastImage bad = raw;
  bad.at(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(log_transform(bad), doctest::Contains("index 1"),
                       std::invalid_argument);
}

TEST_CASE("log transform preserves intensity ordering") {
  VolumeGrid g = VolumeGrid::isotropic({8, 4, 2}, 1.0);
  MultiContrastImage raw = MultiContrastImage::zeros(g, {ContrastTag::kT2w});
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(1e-3, 100.0);
  for (std::size_t i = 0; i < g.voxel_count(); ++i) raw.at(0, i) = dist(rng);

  const MultiContrastImage out = log_transform(raw);
  for (std::size_t i = 1; i < g.voxel_count(); ++i) {
    const bool raw_less = raw.at(0, i - 1) < raw.at(0, i);
    const bool log_less = out.at(0, i - 1) < out.at(0, i);
    CHECK(raw_less == log_less);
  }
}

TEST_CASE("identity resampling reproduces the map bitwise") {
  VolumeGrid g = VolumeGrid::isotropic({4, 3, 2}, 1.5);
  ProbabilityMap src{g, {}};
  src.probs.resize(g.voxel_count());
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (auto& p : src.probs) p = dist(rng);

  const ProbabilityMap out = resample_affine(src, g, Eigen::Matrix4d::Identity());
  REQUIRE(out.probs.size() == src.probs.size());
  for (std::size_t i = 0; i < src.probs.size(); ++i) CHECK(out.probs[i] == src.probs[i]);
}

TEST_CASE("resampling a constant map with full overlap stays constant") {
  VolumeGrid src_grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  ProbabilityMap src{src_grid, std::vector<double>(src_grid.voxel_count(), 0.7)};

  VolumeGrid target = VolumeGrid::isotropic({3, 3, 3}, 1.0);
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  affine(0, 3) = 2.2;  // shift well inside the source
  affine(1, 3) = 1.7;
  affine(2, 3) = 3.1;
  const ProbabilityMap out = resample_affine(src, target, affine);
  for (double p : out.probs) CHECK(p == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("trilinear midpoint of a 2-voxel map is one half") {
  VolumeGrid src_grid = VolumeGrid::isotropic({2, 1, 1}, 1.0);
  ProbabilityMap src{src_grid, {0.0, 1.0}};

  VolumeGrid target = VolumeGrid::isotropic({1, 1, 1}, 1.0);
  target.origin_affine(0, 3) = 0.5;  // voxel center midway between the sources
  const ProbabilityMap out = resample_affine(src, target, Eigen::Matrix4d::Identity());
  REQUIRE(out.probs.size() == 1);
  CHECK(out.probs[0] == doctest::Approx(0.5));
}

TEST_CASE("samples outside the source evaluate to zero") {
  VolumeGrid src_grid = VolumeGrid::isotropic({2, 2, 2}, 1.0);
  ProbabilityMap src{src_grid, std::vector<double>(8, 1.0)};

  VolumeGrid target = VolumeGrid::isotropic({1, 1, 1}, 1.0);
  target.origin_affine(0, 3) = 50.0;
  const ProbabilityMap out = resample_affine(src, target, Eigen::Matrix4d::Identity());
  CHECK(out.probs[0] == 0.0);
}

TEST_CASE("resampling rejects a singular affine and clamps to [0,1]") {
  VolumeGrid g = VolumeGrid::isotropic({2, 2, 2}, 1.0);
  ProbabilityMap src{g, std::vector<double>(8, 0.5)};
  Eigen::Matrix4d singular = Eigen::Matrix4d::Zero();
  CHECK_THROWS(resample_affine(src, g, singular));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  VolumeGrid src_grid = VolumeGrid::isotropic({5, 5, 5}, 1.0);
  ProbabilityMap noisy{src_grid, {}};
  noisy.probs.resize(src_grid.voxel_count());
  for (auto& p : noisy.probs) p = dist(rng);
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  affine(0, 0) = 0.37;
  affine(1, 3) = -0.9;
  const ProbabilityMap out = resample_affine(noisy, src_grid, affine);
  for (double p : out.probs) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
}

TEST_CASE("binarize thresholds inclusively") {
  VolumeGrid g = VolumeGrid::isotropic({3, 1, 1}, 1.0);
  ProbabilityMap map{g, {0.4, 0.5, 0.6}};
  const LesionMask m = binarize(map, 0.5);
  CHECK(m.mask[0] == 0);
  CHECK(m.mask[1] == 1);
  CHECK(m.mask[2] == 1);
}

TEST_CASE("image round-trip through MVOL is bit-exact") {
  TempDir dir;
  VolumeGrid g = VolumeGrid::isotropic({4, 3, 2}, 0.8);
  g.origin_affine(0, 3) = -3.5;
  MultiContrastImage img =
      MultiContrastImage::zeros(g, {ContrastTag::kT1w, ContrastTag::kFlair});
  img.log_domain = true;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(-4.0, 4.0);
  for (auto& v : img.data) v = static_cast<float>(dist(rng));  // f32-representable

  const auto path = dir / "img.mvol";
  save_image(path, img);
  const MultiContrastImage back = load_image(path);
  CHECK(back.n_channels == 2);
  CHECK(back.log_domain);
  CHECK(back.contrasts == img.contrasts);
  CHECK(same_geometry(back.grid, img.grid));
  REQUIRE(back.data.size() == img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == img.data[i]);

  const std::string bytes = testsup::read_file(path);
  REQUIRE(bytes.size() >= 4);
  CHECK(bytes.substr(0, 4) == "MVOL");
}

TEST_CASE("label, mask, and probability round-trips are exact") {
  TempDir dir;
  VolumeGrid g = VolumeGrid::isotropic({3, 3, 3}, 1.0);

  LabelMap labels{g, {}};
  labels.labels.resize(g.voxel_count());
  for (std::size_t i = 0; i < labels.labels.size(); ++i)
    labels.labels[i] = static_cast<std::uint16_t>(1 + (i % 4));
  save_labels(dir / "l.mvol", labels);
  const LabelMap lb = load_labels(dir / "l.mvol");
  CHECK(lb.labels == labels.labels);
  CHECK(same_geometry(lb.grid, g));

  LesionMask mask{g, {}};
  mask.mask.resize(g.voxel_count());
  for (std::size_t i = 0; i < mask.mask.size(); ++i) mask.mask[i] = (i % 3 == 0) ? 1 : 0;
  save_mask(dir / "m.mvol", mask);
  const LesionMask mb = load_mask(dir / "m.mvol");
  CHECK(mb.mask == mask.mask);

  ProbabilityMap pm{g, {}};
  pm.probs.resize(g.voxel_count());
  for (std::size_t i = 0; i < pm.probs.size(); ++i)
    pm.probs[i] = static_cast<float>(static_cast<double>(i) / pm.probs.size());
  save_probability(dir / "p.mvol", pm);
  const ProbabilityMap pb = load_probability(dir / "p.mvol");
  REQUIRE(pb.probs.size() == pm.probs.size());
  for (std::size_t i = 0; i < pm.probs.size(); ++i) CHECK(pb.probs[i] == pm.probs[i]);
}

TEST_CASE("loading a mislabeled payload is rejected") {
  TempDir dir;
  VolumeGrid g = VolumeGrid::isotropic({2, 2, 2}, 1.0);
  MultiContrastImage img = MultiContrastImage::zeros(g, {ContrastTag::kT1w});
  save_image(dir / "img.mvol", img);
  CHECK_THROWS(load_labels(dir / "img.mvol"));

  LabelMap labels{g, std::vector<std::uint16_t>(8, 1)};
  save_labels(dir / "lab.mvol", labels);
  CHECK_THROWS(load_image(dir / "lab.mvol"));
}

TEST_CASE("geometry comparison respects tolerance") {
  VolumeGrid a = VolumeGrid::isotropic({4, 4, 4}, 1.0);
  VolumeGrid b = a;
  CHECK(same_geometry(a, b));
  b.origin_affine(1, 3) += 1e-9;
  CHECK(same_geometry(a, b));
  b.origin_affine(1, 3) += 1.0;
  CHECK_FALSE(same_geometry(a, b));
  VolumeGrid c = a;
  c.dims[0] = 5;
  CHECK_FALSE(same_geometry(a, c));
}
