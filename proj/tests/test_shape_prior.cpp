#include <doctest.h>

#include <cmath>
#include <random>

#include "lesionseg/rng.hpp"
#include "lesionseg/shape_prior.hpp"
#include "test_support.hpp"

using namespace lesionseg;

namespace {

LesionMask blob_mask(const VolumeGrid& grid, std::uint64_t seed, double fill = 0.3) {
  LesionMask m;
  m.grid = grid;
  m.mask.resize(grid.voxel_count());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (auto& v : m.mask) v = dist(rng) < fill ? 1 : 0;
  return m;
}

LesionMask sphere_mask(const VolumeGrid& grid, double cx, double cy, double cz,
                       double radius) {
  LesionMask m;
  m.grid = grid;
  m.mask.assign(grid.voxel_count(), 0);
  for (std::uint32_t z = 0; z < grid.dims[2]; ++z)
    for (std::uint32_t y = 0; y < grid.dims[1]; ++y)
      for (std::uint32_t x = 0; x < grid.dims[0]; ++x) {
        const double dx = x - cx, dy = y - cy, dz = z - cz;
        if (dx * dx + dy * dy + dz * dz <= radius * radius)
          m.mask[grid.flat_index(x, y, z)] = 1;
      }
  return m;
}

ShapePriorModel zero_model(const VolumeGrid& grid, int latent,
                           std::vector<int> channels) {
  ShapePriorModel model = ShapePriorModel::create(grid, latent, std::move(channels), 7);
  std::fill(model.theta.begin(), model.theta.end(), 0.0);
  return model;
}

}  // namespace

TEST_CASE("a zero-parameter decoder outputs one half everywhere") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  const ShapePriorModel model = zero_model(grid, 4, {2, 4, 4});
  const ProbabilityMap p = decode(model, Eigen::VectorXd::Zero(4));
  REQUIRE(p.probs.size() == grid.voxel_count());
  for (double v : p.probs) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("decode is deterministic and strictly inside the unit interval") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  const ShapePriorModel model = ShapePriorModel::create(grid, 6, {4, 4, 8}, 11);
  Eigen::VectorXd h(6);
  h << 0.3, -1.2, 0.7, 2.1, -0.4, 0.0;
  const ProbabilityMap a = decode(model, h);
  const ProbabilityMap b = decode(model, h);
  CHECK(a.probs == b.probs);
  for (double v : a.probs) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  // Different codes decode to different fields.
  const ProbabilityMap c = decode(model, 2.0 * h);
  CHECK(a.probs != c.probs);
}

TEST_CASE("a zero-parameter encoder maps every mask to the prior center") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  const ShapePriorModel model = zero_model(grid, 5, {2, 4, 4});
  const EncodeResult e = encode(model, blob_mask(grid, 3));
  REQUIRE(e.mu.size() == 5);
  REQUIRE(e.sigma.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(e.mu[i] == 0.0);
    CHECK(e.sigma[i] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }
}

TEST_CASE("encode rejects a mask on the wrong grid") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  const ShapePriorModel model = ShapePriorModel::create(grid, 4, {2, 4, 4}, 13);
  const LesionMask wrong = blob_mask(VolumeGrid::isotropic({16, 16, 16}, 1.0), 5);
  CHECK_THROWS(encode(model, wrong));
}

TEST_CASE("encoded deviations are deterministic and positive") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  const ShapePriorModel model = ShapePriorModel::create(grid, 8, {4, 8, 8}, 17);
  const LesionMask mask = blob_mask(grid, 9);
  const EncodeResult a = encode(model, mask);
  const EncodeResult b = encode(model, mask);
  CHECK(a.mu == b.mu);
  CHECK(a.sigma == b.sigma);
  for (int i = 0; i < a.sigma.size(); ++i) CHECK(a.sigma[i] > 0.0);
}

TEST_CASE("the ELBO decomposes into reconstruction minus a closed-form KL") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  const ShapePriorModel model = ShapePriorModel::create(grid, 4, {2, 4, 4}, 19);
  const LesionMask mask = sphere_mask(grid, 3.5, 3.5, 3.5, 2.2);

  Rng rng(21);
  const ElboResult r = elbo_with_gradient(model, mask, 3, rng);
  CHECK(r.elbo == doctest::Approx(r.reconstruction - r.kl).epsilon(1e-12));
  CHECK(r.kl >= 0.0);
  CHECK(r.reconstruction <= 0.0);
  CHECK(r.elbo <= 0.0);

  // KL(q || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 2 ln sigma - 1).
  const EncodeResult e = encode(model, mask);
  double want = 0.0;
  for (int i = 0; i < e.mu.size(); ++i)
    want += 0.5 * (e.mu[i] * e.mu[i] + e.sigma[i] * e.sigma[i] -
                   2.0 * std::log(e.sigma[i]) - 1.0);
  CHECK(r.kl == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("the zero-parameter model has zero KL and log-half reconstruction") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  const ShapePriorModel model = zero_model(grid, 4, {2, 4, 4});
  const LesionMask mask = blob_mask(grid, 23);

  Rng rng(25);
  const ElboResult r = elbo_with_gradient(model, mask, 2, rng);
  // q = N(0, ln(2)^2 I) gives KL = sum(ln(2)^2 - 2 ln ln 2 - 1) / 2; the
  // decoder emits 0.5 everywhere so every Bernoulli term is ln(1/2).
  const double l2 = std::log(2.0);
  const double want_kl = 2.0 * (l2 * l2 - 2.0 * std::log(l2) - 1.0);
  CHECK(r.kl == doctest::Approx(want_kl).epsilon(1e-12));
  CHECK(r.reconstruction ==
        doctest::Approx(-static_cast<double>(grid.voxel_count()) * l2).epsilon(1e-12));
}

TEST_CASE("backpropagated gradients match central finite differences") {
  const VolumeGrid grid = VolumeGrid::isotropic({4, 4, 4}, 1.0);
  const ShapePriorModel base = ShapePriorModel::create(grid, 2, {2}, 29);
  const LesionMask mask = sphere_mask(grid, 1.5, 1.5, 1.5, 1.3);
  const std::uint64_t noise_seed = 31;

  auto value = [&](const ShapePriorModel& m) {
    Rng rng(noise_seed);
    return elbo_with_gradient(m, mask, 2, rng).elbo;
  };

  Rng rng(noise_seed);
  const ElboResult at_base = elbo_with_gradient(base, mask, 2, rng);
  REQUIRE(at_base.grad.size() == base.theta.size());

  std::mt19937_64 pick(33);
  std::uniform_int_distribution<std::size_t> index(0, base.theta.size() - 1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t i = index(pick);
    const double h = 1e-5 * (1.0 + std::abs(base.theta[i]));
    ShapePriorModel plus = base;
    plus.theta[i] += h;
    ShapePriorModel minus = base;
    minus.theta[i] -= h;
    const double fd = (value(plus) - value(minus)) / (2.0 * h);
    const double g = at_base.grad[i];
    const double scale = std::max({1e-3, std::abs(fd), std::abs(g)});
    CHECK(std::abs(fd - g) / scale < 1e-4);
  }
}

TEST_CASE("zero learning rate leaves the initialization untouched") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  std::vector<LesionMask> masks{sphere_mask(grid, 3.5, 3.5, 3.5, 2.0),
                                sphere_mask(grid, 2.5, 4.5, 3.5, 1.5)};
  ShapeTrainConfig config;
  config.epochs = 2;
  config.batch_size = 4;
  config.learning_rate = 0.0;
  config.seed = 37;

  const ShapePriorModel trained = train_shape_prior(masks, config);
  const ShapePriorModel init = ShapePriorModel::create(grid, 32, {8, 16, 32}, 37);
  CHECK(trained.theta == init.theta);
}

TEST_CASE("training is bitwise reproducible for a fixed seed") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  std::vector<LesionMask> masks{sphere_mask(grid, 3.5, 3.5, 3.5, 2.0),
                                sphere_mask(grid, 4.5, 2.5, 3.5, 1.4)};
  ShapeTrainConfig config;
  config.epochs = 3;
  config.batch_size = 4;
  config.learning_rate = 1e-3;
  config.seed = 41;

  std::vector<ShapeTrainLogRow> log_a, log_b;
  const ShapePriorModel a = train_shape_prior(masks, config, &log_a);
  const ShapePriorModel b = train_shape_prior(masks, config, &log_b);
  CHECK(a.theta == b.theta);
  REQUIRE(log_a.size() == log_b.size());
  for (std::size_t i = 0; i < log_a.size(); ++i)
    CHECK(log_a[i].mean_elbo == log_b[i].mean_elbo);

  ShapeTrainConfig other = config;
  other.seed = 43;
  const ShapePriorModel c = train_shape_prior(masks, other);
  CHECK(a.theta != c.theta);
}

TEST_CASE("training improves the mean ELBO on a simple corpus") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  std::vector<LesionMask> masks;
  for (int s = 0; s < 4; ++s)
    masks.push_back(sphere_mask(grid, 3.0 + 0.5 * s, 3.5, 3.5, 1.6 + 0.1 * s));

  ShapeTrainConfig config;
  config.epochs = 60;
  config.batch_size = 8;
  config.learning_rate = 3e-3;
  config.seed = 47;

  std::vector<ShapeTrainLogRow> log;
  train_shape_prior(masks, config, &log);
  REQUIRE(log.size() >= 2);
  CHECK(log.front().epoch == 1);
  CHECK(log.back().epoch == 60);
  CHECK(log.back().mean_elbo > log.front().mean_elbo);
  for (const auto& row : log) CHECK(row.mean_kl >= 0.0);
}

TEST_CASE("a trained model reconstructs its own corpus above chance") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  std::vector<LesionMask> masks;
  for (int s = 0; s < 3; ++s)
    masks.push_back(sphere_mask(grid, 3.5, 3.5, 3.5, 1.6 + 0.2 * s));

  ShapeTrainConfig config;
  config.epochs = 80;
  config.batch_size = 8;
  config.learning_rate = 3e-3;
  config.seed = 53;
  const ShapePriorModel model = train_shape_prior(masks, config);

  // Round-trip the central mask through the posterior mean code.
  const EncodeResult e = encode(model, masks[1]);
  const ProbabilityMap recon = decode(model, e.mu);
  double loglik = 0.0;
  for (std::size_t i = 0; i < recon.probs.size(); ++i)
    loglik += masks[1].mask[i] ? std::log(recon.probs[i])
                               : std::log(1.0 - recon.probs[i]);
  const double chance = -static_cast<double>(grid.voxel_count()) * std::log(2.0);
  CHECK(loglik > chance);
}

TEST_CASE("prior samples are seeded, reproducible, and in range") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  const ShapePriorModel model = ShapePriorModel::create(grid, 6, {4, 4, 8}, 59);

  Rng r1(61), r2(61), r3(67);
  const ProbabilityMap a = sample_prior(model, r1);
  const ProbabilityMap b = sample_prior(model, r2);
  const ProbabilityMap c = sample_prior(model, r3);
  CHECK(a.probs == b.probs);
  CHECK(a.probs != c.probs);
  for (double v : a.probs) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("model files round-trip through single precision") {
  const VolumeGrid grid = VolumeGrid::isotropic({8, 8, 8}, 1.0);
  const ShapePriorModel model = ShapePriorModel::create(grid, 6, {4, 4, 8}, 71);

  testsup::TempDir dir;
  const auto path = dir / "shape.vae1";
  save_shape_prior(path, model);
  const ShapePriorModel back = load_shape_prior(path);

  CHECK(back.latent_dim == model.latent_dim);
  CHECK(back.channels == model.channels);
  CHECK(back.training_grid.dims == model.training_grid.dims);
  REQUIRE(back.theta.size() == model.theta.size());
  for (std::size_t i = 0; i < model.theta.size(); ++i)
    CHECK(back.theta[i] == static_cast<double>(static_cast<float>(model.theta[i])));

  const auto path2 = dir / "again.vae1";
  save_shape_prior(path2, back);
  CHECK(testsup::files_equal(path, path2));

  // Saved and reloaded models decode identically.
  Rng rng(73);
  const ProbabilityMap pa = sample_prior(back, rng);
  Rng rng2(73);
  const ProbabilityMap pb = sample_prior(load_shape_prior(path2), rng2);
  CHECK(pa.probs == pb.probs);
}

TEST_CASE("training rejects masks on mismatched grids") {
  std::vector<LesionMask> masks{
      blob_mask(VolumeGrid::isotropic({8, 8, 8}, 1.0), 1),
      blob_mask(VolumeGrid::isotropic({16, 16, 16}, 1.0), 2)};
  ShapeTrainConfig config;
  config.epochs = 1;
  CHECK_THROWS(train_shape_prior(masks, config));
}

TEST_CASE("training config validation rejects bad settings") {
  ShapeTrainConfig config;
  config.epochs = 0;
  CHECK_THROWS(config.validate());
  config.epochs = 1;
  config.learning_rate = -1.0;
  CHECK_THROWS(config.validate());
  config.learning_rate = 1e-4;
  config.mc_samples = 0;
  CHECK_THROWS(config.validate());
}
