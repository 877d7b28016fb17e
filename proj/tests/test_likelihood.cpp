#include <doctest.h>

#include <cmath>
#include <random>

#include "lesionseg/likelihood.hpp"
#include "test_support.hpp"

using namespace lesionseg;
using testsup::TempDir;

namespace {
constexpr double kPi = 3.14159265358979323846;
}

TEST_CASE("sharing map validation and identity construction") {
  ClassSharingMap s = ClassSharingMap::identity(3);
  CHECK(s.num_labels() == 3);
  CHECK(s.num_classes() == 3);
  CHECK(s.total_components() == 3);
  CHECK_NOTHROW(s.validate());
  CHECK(s.component_offset(0) == 0);
  CHECK(s.component_offset(2) == 2);

  ClassSharingMap bad = s;
  bad.mixture_weights[1] = {0.5, 0.2};  // wrong size and sum
  CHECK_THROWS(bad.validate());

  ClassSharingMap unmapped = s;
  unmapped.label_to_class[2] = 7;
  CHECK_THROWS(unmapped.validate());
}

TEST_CASE("sharing map with mixtures has class-major component offsets") {
  ClassSharingMap s;
  s.label_to_class = {0, 0, 1, 2};
  s.components_per_class = {2, 1, 3};
  s.mixture_weights = {{0.4, 0.6}, {1.0}, {0.2, 0.3, 0.5}};
  s.wm_class = 2;
  s.gm_class = 1;
  CHECK_NOTHROW(s.validate());
  CHECK(s.total_components() == 6);
  CHECK(s.component_offset(1) == 2);
  CHECK(s.component_offset(2) == 3);
}

TEST_CASE("sharing map JSON round-trip") {
  TempDir dir;
  ClassSharingMap s;
  s.label_to_class = {0, 1, 1, 2};
  s.components_per_class = {1, 2, 1};
  s.mixture_weights = {{1.0}, {0.25, 0.75}, {1.0}};
  s.wm_class = 2;
  s.gm_class = 1;
  s.class_names = {"background", "gray", "white"};
  s.save_json(dir / "sharing.json");
  const ClassSharingMap back = ClassSharingMap::from_json_file(dir / "sharing.json");
  CHECK(back.label_to_class == s.label_to_class);
  CHECK(back.components_per_class == s.components_per_class);
  CHECK(back.wm_class == s.wm_class);
  CHECK(back.gm_class == s.gm_class);
  CHECK(back.class_names == s.class_names);
  REQUIRE(back.mixture_weights.size() == 3);
  CHECK(back.mixture_weights[1][0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("bias basis constant column and hand DCT values") {
  VolumeGrid g = VolumeGrid::isotropic({4, 1, 1}, 1.0);

  const BiasBasis dc = eval_bias_basis(g, {1, 1, 1});
  CHECK(dc.n_functions == 1);
  for (std::size_t i = 0; i < g.voxel_count(); ++i) CHECK(dc.row(i)[0] == 1.0);

  const BiasBasis two = eval_bias_basis(g, {2, 1, 1});
  REQUIRE(two.n_functions == 2);
  for (std::uint32_t x = 0; x < 4; ++x) {
    const double expected = std::cos(kPi * (2.0 * x + 1.0) / 8.0);
    CHECK(two.row(x)[1] == doctest::Approx(expected).epsilon(1e-15));
    CHECK(two.row(x)[0] == 1.0);
  }

  // Constant column squared norm equals the voxel count.
  VolumeGrid g3 = VolumeGrid::isotropic({3, 4, 2}, 1.0);
  const BiasBasis b3 = eval_bias_basis(g3, {2, 2, 2});
  double dot = 0.0;
  for (std::size_t i = 0; i < g3.voxel_count(); ++i) dot += b3.row(i)[0] * b3.row(i)[0];
  CHECK(dot == doctest::Approx(static_cast<double>(g3.voxel_count())));
}

TEST_CASE("bias basis columns are mutually orthogonal") {
  VolumeGrid g = VolumeGrid::isotropic({4, 3, 2}, 1.0);
  const BiasBasis b = eval_bias_basis(g, {3, 2, 2});
  const std::size_t p_count = b.n_functions;
  for (std::size_t p = 0; p < p_count; ++p) {
    for (std::size_t q = p + 1; q < p_count; ++q) {
      double dot = 0.0;
      for (std::size_t i = 0; i < g.voxel_count(); ++i) dot += b.row(i)[p] * b.row(i)[q];
      CHECK(std::abs(dot) < 1e-9);
    }
  }
}

TEST_CASE("bias basis order beyond grid dims is rejected") {
  VolumeGrid g = VolumeGrid::isotropic({4, 2, 2}, 1.0);
  CHECK_THROWS(eval_bias_basis(g, {5, 1, 1}));
  CHECK_THROWS(eval_bias_basis(g, {1, 0, 1}));
}

TEST_CASE("component log-likelihood closed forms") {
  GaussianComponent comp;
  comp.mean = Eigen::VectorXd::Zero(1);
  comp.cov = Eigen::MatrixXd::Identity(1, 1);
  Eigen::MatrixXd c0 = Eigen::MatrixXd::Zero(1, 1);
  Eigen::VectorXd phi = Eigen::VectorXd::Ones(1);
  Eigen::VectorXd d = Eigen::VectorXd::Zero(1);
  CHECK(component_log_likelihood(d, comp, c0, phi) ==
        doctest::Approx(-0.5 * std::log(2.0 * kPi)).epsilon(1e-15));

  // Bias shifts the mode: Cphi = 2 at d = 2.
  Eigen::MatrixXd c2 = Eigen::MatrixXd::Constant(1, 1, 2.0);
  Eigen::VectorXd d2 = Eigen::VectorXd::Constant(1, 2.0);
  CHECK(component_log_likelihood(d2, comp, c2, phi) ==
        doctest::Approx(-0.5 * std::log(2.0 * kPi)).epsilon(1e-15));
}

TEST_CASE("full-covariance likelihood matches a brute-force oracle") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    GaussianComponent comp;
    comp.mean = Eigen::VectorXd::NullaryExpr(2, [&](Eigen::Index) { return normal(rng); });
    Eigen::MatrixXd a =
        Eigen::MatrixXd::NullaryExpr(2, 2, [&](Eigen::Index, Eigen::Index) {
          return normal(rng);
        });
    comp.cov = a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd c =
        Eigen::MatrixXd::NullaryExpr(2, 3, [&](Eigen::Index, Eigen::Index) {
          return 0.1 * normal(rng);
        });
    Eigen::VectorXd phi(3);
    phi << 1.0, normal(rng), normal(rng);
    Eigen::VectorXd d =
        Eigen::VectorXd::NullaryExpr(2, [&](Eigen::Index) { return normal(rng); });

    const double got = component_log_likelihood(d, comp, c, phi);
    const double want = testsup::gaussian_log_pdf(d, comp.mean + c * phi, comp.cov);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));

    GaussianEvaluator eval(comp);
    CHECK(eval.log_density(d - c * phi) == doctest::Approx(got).epsilon(1e-13));
  }
}

TEST_CASE("diagonal covariance equals the sum of univariate densities") {
  GaussianComponent comp;
  comp.mean = Eigen::Vector3d(0.5, -1.0, 2.0);
  comp.cov = Eigen::Vector3d(0.4, 1.5, 0.9).asDiagonal();
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(3, 1);
  Eigen::VectorXd phi = Eigen::VectorXd::Ones(1);
  Eigen::Vector3d d(0.1, 0.2, 1.2);

  double want = 0.0;
  for (int n = 0; n < 3; ++n) {
    const double var = comp.cov(n, n);
    const double r = d[n] - comp.mean[n];
    want += -0.5 * (std::log(2.0 * kPi * var) + r * r / var);
  }
  CHECK(component_log_likelihood(d, comp, c, phi) ==
        doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("appearance params validation rejects non-SPD covariances") {
  ClassSharingMap s = ClassSharingMap::identity(2);
  AppearanceParams p;
  p.components.resize(2);
  for (auto& comp : p.components) {
    comp.mean = Eigen::VectorXd::Zero(2);
    comp.cov = Eigen::MatrixXd::Identity(2, 2);
  }
  p.bias_coeffs = Eigen::MatrixXd::Zero(2, 1);
  CHECK_NOTHROW(p.validate(s));

  AppearanceParams bad = p;
  bad.components[1].cov << 1.0, 2.0, 2.0, 1.0;  // indefinite
  CHECK_THROWS(bad.validate(s));
}

TEST_CASE("lesion intensity prior scales inversely with voxel volume") {
  LesionIntensityPrior prior;
  CHECK(prior.nu_base == doctest::Approx(500.0));
  CHECK(prior.kappa == doctest::Approx(50.0));

  VolumeGrid unit = VolumeGrid::isotropic({4, 4, 4}, 1.0);
  CHECK(prior.nu_effective(unit) == doctest::Approx(500.0));

  VolumeGrid half;
  half.dims = {4, 4, 4};
  half.voxel_size = {1.0, 1.0, 0.5};  // half the volume -> double nu
  half.origin_affine = Eigen::Matrix4d::Identity();
  half.origin_affine(2, 2) = 0.5;
  CHECK(prior.nu_effective(half) == doctest::Approx(1000.0));

  LesionIntensityPrior bad;
  bad.kappa = 1.0;
  CHECK_THROWS(bad.validate());
  LesionIntensityPrior neg;
  neg.nu_base = -1.0;
  CHECK_THROWS(neg.validate());
}

TEST_CASE("flat lesion prior regime returns zero log-density") {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Identity(2, 2);
  CHECK(niw_log_density(mu, sigma, mu, sigma, 0.0, 50.0) == 0.0);
}

TEST_CASE("lesion prior density peaks at the white-matter mean") {
  const double sigma_wm = 0.3;
  const double nu = 500.0, kappa = 50.0;
  Eigen::VectorXd mu_wm = Eigen::VectorXd::Constant(1, 1.7);
  Eigen::MatrixXd s_wm = Eigen::MatrixXd::Constant(1, 1, sigma_wm);
  Eigen::MatrixXd s_les = Eigen::MatrixXd::Constant(1, 1, 2.0);

  auto density = [&](double m) {
    Eigen::VectorXd mu_les = Eigen::VectorXd::Constant(1, m);
    return niw_log_density(mu_les, s_les, mu_wm, s_wm, nu, kappa);
  };
  const double argmax = testsup::golden_max(density, 1.7 - 5.0, 1.7 + 5.0, 1e-12);
  CHECK(argmax == doctest::Approx(1.7).epsilon(1e-6));
}

TEST_CASE("inverse-Wishart factor peaks at kappa times the WM variance") {
  // The IW factor alone (the full density divided by the Gaussian factor
  // evaluated at mu_les = mu_wm) must peak at kappa * sigma2_wm.
  const double sigma2_wm = 0.3;
  const double nu = 500.0, kappa = 50.0;
  Eigen::VectorXd mu_wm = Eigen::VectorXd::Constant(1, 0.4);
  Eigen::MatrixXd s_wm = Eigen::MatrixXd::Constant(1, 1, sigma2_wm);

  auto iw_log = [&](double s) {
    Eigen::MatrixXd s_les = Eigen::MatrixXd::Constant(1, 1, s);
    const double full = niw_log_density(mu_wm, s_les, mu_wm, s_wm, nu, kappa);
    const double gauss_at_mode = -0.5 * std::log(2.0 * kPi * s / nu);
    return full - gauss_at_mode;
  };
  const double mode = kappa * sigma2_wm;
  const double argmax = testsup::golden_max(iw_log, 0.05 * mode, 30.0 * mode, 1e-12);
  CHECK(argmax == doctest::Approx(mode).epsilon(1e-5));
}

TEST_CASE("lesion prior rejects non-SPD inputs") {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd good = Eigen::MatrixXd::Identity(2, 2);
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 3.0, 3.0, 1.0;
  CHECK_THROWS(niw_log_density(mu, bad, mu, good, 500.0, 50.0));
  CHECK_THROWS(niw_log_density(mu, good, mu, bad, 500.0, 50.0));
}

TEST_CASE("multivariate gamma satisfies its recurrence") {
  CHECK(log_multivariate_gamma(1, 2.5) == doctest::Approx(std::lgamma(2.5)).epsilon(1e-14));
  for (int n = 2; n <= 4; ++n) {
    for (double a : {3.0, 5.5, 10.0, 40.0}) {
      const double lhs = log_multivariate_gamma(n, a);
      const double rhs = 0.5 * (n - 1) * std::log(kPi) + std::lgamma(a) +
                         log_multivariate_gamma(n - 1, a - 0.5);
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
  }
}

TEST_CASE("parameter dump round-trip is exact") {
  TempDir dir;
  ClassSharingMap s;
  s.label_to_class = {0, 1, 1};
  s.components_per_class = {2, 1};
  s.mixture_weights = {{0.3, 0.7}, {1.0}};
  s.wm_class = 1;
  s.gm_class = 0;

  AppearanceParams p;
  p.components.resize(3);
  std::mt19937_64 rng(53);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& comp : p.components) {
    comp.mean = Eigen::VectorXd::NullaryExpr(2, [&](Eigen::Index) { return normal(rng); });
    Eigen::MatrixXd a =
        Eigen::MatrixXd::NullaryExpr(2, 2, [&](Eigen::Index, Eigen::Index) {
          return normal(rng);
        });
    comp.cov = a * a.transpose() + Eigen::MatrixXd::Identity(2, 2);
  }
  p.bias_coeffs = Eigen::MatrixXd::NullaryExpr(2, 4, [&](Eigen::Index, Eigen::Index) {
    return normal(rng);
  });

  save_params(dir / "p.prms", p, s);
  auto [pb, sb] = load_params(dir / "p.prms");
  CHECK(sb.label_to_class == s.label_to_class);
  CHECK(sb.components_per_class == s.components_per_class);
  CHECK(sb.wm_class == 1);
  REQUIRE(pb.components.size() == 3);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK((pb.components[c].mean - p.components[c].mean).norm() == 0.0);
    CHECK((pb.components[c].cov - p.components[c].cov).norm() == 0.0);
  }
  CHECK((pb.bias_coeffs - p.bias_coeffs).norm() == 0.0);
}
