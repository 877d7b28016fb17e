#include <doctest.h>

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lesionseg/lesion_sampler.hpp"
#include "lesionseg/parallel.hpp"
#include "lesionseg/rng.hpp"
#include "test_support.hpp"

using namespace lesionseg;

namespace {

// Two-voxel single-contrast world with hand-set parameters: background,
// gray matter, white matter, and an appended lesion class.
struct ToyWorld {
  MultiContrastImage image;
  FitResult fit;
};

ToyWorld make_toy(double d0, double d1, double nu = 10.0, double kappa = 5.0) {
  ToyWorld w;
  const VolumeGrid grid = VolumeGrid::isotropic({2, 1, 1}, 1.0);
  w.image = MultiContrastImage::zeros(grid, {ContrastTag::kFlair});
  w.image.log_domain = true;
  w.image.at(0, 0) = d0;
  w.image.at(0, 1) = d1;

  FitResult& f = w.fit;
  f.lesion_augmented = true;
  f.nu_effective = nu;
  f.kappa = kappa;

  f.sharing.label_to_class = {0, 1, 2, 3};
  f.sharing.components_per_class = {1, 1, 1, 1};
  f.sharing.mixture_weights = {{1.0}, {1.0}, {1.0}, {1.0}};
  f.sharing.gm_class = 1;
  f.sharing.wm_class = 2;

  f.params.components.resize(4);
  const double means[4] = {0.0, 1.0, 2.0, 3.0};
  const double vars[4] = {1.0, 0.04, 0.04, 0.09};
  for (int k = 0; k < 4; ++k) {
    f.params.components[k].mean = Eigen::VectorXd::Constant(1, means[k]);
    f.params.components[k].cov = Eigen::MatrixXd::Constant(1, 1, vars[k]);
  }
  f.params.bias_coeffs = Eigen::MatrixXd::Zero(1, 1);
  f.basis = eval_bias_basis(grid, {1, 1, 1});
  f.wm_component = 2;
  f.lesion_component = 3;
  f.lesion_label = 3;

  f.anatomical_prior = {0.1, 0.3, 0.6, 0.05, 0.15, 0.8};  // voxel-major, 3 labels
  f.rho = {0.4, 0.7};
  return w;
}

double normal_log_pdf(double d, double mu, double var) {
  return -0.5 * (std::log(2.0 * 3.14159265358979323846 * var) + (d - mu) * (d - mu) / var);
}

// Analytic lesion indicator probability for the toy world.
double toy_z_probability(const ToyWorld& w, std::size_t i, double mu_les,
                         double var_les, double f_factor) {
  const double d = w.image.at(0, i);
  const double a = std::clamp(f_factor * w.fit.rho[i], 0.0, 1.0);
  const double log_num = normal_log_pdf(d, mu_les, var_les) + std::log(a);
  double anat = 0.0;
  const double means[3] = {0.0, 1.0, 2.0};
  const double vars[3] = {1.0, 0.04, 0.04};
  for (int k = 0; k < 3; ++k)
    anat += w.fit.anatomical_prior[i * 3 + k] * std::exp(normal_log_pdf(d, means[k], vars[k]));
  const double log_other = std::log1p(-a) + std::log(anat);
  return 1.0 / (1.0 + std::exp(log_other - log_num));
}

struct ThreadGuard {
  explicit ThreadGuard(int n) { set_thread_count(n); }
  ~ThreadGuard() { set_thread_count(1); }
};

}  // namespace

TEST_CASE("candidate mask keeps only voxels strictly brighter than gray matter") {
  // gm mean is 1.0; 1.0 itself must be excluded.
  ToyWorld w = make_toy(1.0, 1.0 + 1e-9);
  const LesionMask m = candidate_mask(w.image, w.fit);
  CHECK(m.mask[0] == 0);
  CHECK(m.mask[1] == 1);
}

TEST_CASE("candidate mask compares bias-corrected intensities") {
  ToyWorld w = make_toy(1.5, 1.5);
  w.fit.params.bias_coeffs(0, 0) = 0.6;  // corrected value drops to 0.9
  const LesionMask m = candidate_mask(w.image, w.fit);
  CHECK(m.mask[0] == 0);
  CHECK(m.mask[1] == 0);
}

TEST_CASE("images without FLAIR or T2w channels leave every voxel a candidate") {
  ToyWorld w = make_toy(-3.0, -3.0);
  w.image.contrasts = {ContrastTag::kT1w};
  const LesionMask m = candidate_mask(w.image, w.fit);
  CHECK(m.mask[0] == 1);
  CHECK(m.mask[1] == 1);
}

TEST_CASE("conjunction and disjunction variants differ on mixed channels") {
  const VolumeGrid grid = VolumeGrid::isotropic({1, 1, 1}, 1.0);
  MultiContrastImage img = MultiContrastImage::zeros(grid, {ContrastTag::kT2w,
                                                            ContrastTag::kFlair});
  img.log_domain = true;
  img.at(0, 0) = 2.0;   // above the gray-matter mean
  img.at(1, 0) = 0.5;   // below it

  FitResult f;
  f.sharing.label_to_class = {0};
  f.sharing.components_per_class = {1};
  f.sharing.mixture_weights = {{1.0}};
  f.sharing.gm_class = 0;
  f.params.components.resize(1);
  f.params.components[0].mean = Eigen::Vector2d(1.0, 1.0);
  f.params.components[0].cov = Eigen::Matrix2d::Identity();
  f.params.bias_coeffs = Eigen::MatrixXd::Zero(2, 1);
  f.basis = eval_bias_basis(grid, {1, 1, 1});

  CHECK(candidate_mask(img, f, false).mask[0] == 0);
  CHECK(candidate_mask(img, f, true).mask[0] == 1);
}

TEST_CASE("the sampler rejects fits without lesion augmentation or proper priors") {
  ToyWorld w = make_toy(2.5, 2.5);
  SamplerConfig config;

  FitResult plain = w.fit;
  plain.lesion_augmented = false;
  CHECK_THROWS(LesionSampler(w.image, plain, nullptr, config));

  FitResult weak = w.fit;
  weak.nu_effective = 1.5;  // needs nu > 2 for one contrast
  CHECK_THROWS(LesionSampler(w.image, weak, nullptr, config));
}

TEST_CASE("sampler config validation") {
  SamplerConfig config;
  config.gamma = 0.0;
  CHECK_THROWS(config.validate());
  config.gamma = 1.0;
  CHECK_THROWS(config.validate());
  config.gamma = 0.5;
  config.samples = 0;
  CHECK_THROWS(config.validate());
  config.samples = 1;
  config.burn_in = -1;
  CHECK_THROWS(config.validate());
  config.burn_in = 0;
  config.subject_to_prior_affine.setZero();
  CHECK_THROWS(config.validate());
}

TEST_CASE("pinned indicator probabilities match the analytic Bernoulli") {
  ToyWorld w = make_toy(2.6, 2.9);
  SamplerConfig config;
  config.seed = 5;
  LesionSampler sampler(w.image, w.fit, nullptr, config);
  REQUIRE(sampler.candidate().mask[0] == 1);
  REQUIRE(sampler.candidate().mask[1] == 1);

  const double mu_les = 3.0, var_les = 0.09;
  sampler.set_lesion_params(Eigen::VectorXd::Constant(1, mu_les),
                            Eigen::MatrixXd::Constant(1, 1, var_les));
  sampler.set_shape_factor({0.5, 0.9});
  sampler.freeze_continuous(true);
  sampler.sweep();

  const double p0 = toy_z_probability(w, 0, mu_les, var_les, 0.5);
  const double p1 = toy_z_probability(w, 1, mu_les, var_les, 0.9);
  CHECK(sampler.last_z_probability()[0] == doctest::Approx(p0).epsilon(1e-12));
  CHECK(sampler.last_z_probability()[1] == doctest::Approx(p1).epsilon(1e-12));

  // The draw itself is the counter stream compared against that probability.
  for (std::size_t i = 0; i < 2; ++i) {
    const double u = counter_uniform(config.seed, 1, i, 0);
    CHECK(sampler.z().mask[i] ==
          (u < sampler.last_z_probability()[i] ? 1 : 0));
  }
}

TEST_CASE("frozen sweeps draw the joint indicator state with the right law") {
  ToyWorld w = make_toy(2.35, 2.5);
  SamplerConfig config;
  config.seed = 11;
  LesionSampler sampler(w.image, w.fit, nullptr, config);
  const double mu_les = 3.0, var_les = 0.09;
  sampler.set_lesion_params(Eigen::VectorXd::Constant(1, mu_les),
                            Eigen::MatrixXd::Constant(1, 1, var_les));
  sampler.set_shape_factor({0.5, 0.9});
  sampler.freeze_continuous(true);

  const double p0 = toy_z_probability(w, 0, mu_les, var_les, 0.5);
  const double p1 = toy_z_probability(w, 1, mu_les, var_les, 0.9);
  REQUIRE(p0 > 0.05);
  REQUIRE(p0 < 0.95);
  REQUIRE(p1 > 0.05);
  REQUIRE(p1 < 0.95);

  const int sweeps = 4000;
  std::array<double, 4> counts{};
  for (int s = 0; s < sweeps; ++s) {
    sampler.sweep();
    counts[sampler.z().mask[0] * 2 + sampler.z().mask[1]] += 1.0;
  }
  const std::array<double, 4> exact{(1 - p0) * (1 - p1), (1 - p0) * p1,
                                    p0 * (1 - p1), p0 * p1};
  double tv = 0.0;
  for (int s = 0; s < 4; ++s)
    tv += 0.5 * std::abs(counts[s] / sweeps - exact[s]);
  CHECK(tv < 0.03);
}

TEST_CASE("with no candidates the lesion covariance samples its prior") {
  // Intensities below the gray-matter mean empty the candidate set, so the
  // sufficient statistics stay zero and each sweep draws
  // Sigma ~ IW(nu kappa Sigma_wm, nu - N - 1) independently.
  const double nu = 10.0, kappa = 5.0;
  ToyWorld w = make_toy(0.5, 0.4, nu, kappa);
  SamplerConfig config;
  config.seed = 13;
  LesionSampler sampler(w.image, w.fit, nullptr, config);
  REQUIRE(sampler.candidate().count() == 0);

  const double scale = nu * kappa * 0.04;
  const double dof = nu - 1.0 - 1.0;
  const double want_mean = scale / (dof - 1.0 - 1.0);

  const int sweeps = 4000;
  std::vector<double> draws_sigma, draws_mu;
  draws_sigma.reserve(sweeps);
  for (int s = 0; s < sweeps; ++s) {
    sampler.sweep();
    CHECK(sampler.n_les() == 0.0);
    draws_sigma.push_back(sampler.sigma_les()(0, 0));
    draws_mu.push_back(sampler.mu_les()[0]);
  }

  auto mean_se = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    var /= static_cast<double>(v.size() - 1);
    return std::pair<double, double>(m, std::sqrt(var / static_cast<double>(v.size())));
  };
  const auto [sig_mean, sig_se] = mean_se(draws_sigma);
  CHECK(std::abs(sig_mean - want_mean) < 3.0 * sig_se);

  // mu | Sigma ~ N(mu_wm, Sigma / nu): centered on the white-matter mean.
  const auto [mu_mean, mu_se] = mean_se(draws_mu);
  CHECK(std::abs(mu_mean - 2.0) < 3.0 * mu_se);
}

TEST_CASE("runs are reproducible for a seed and invariant to thread count") {
  ToyWorld w = make_toy(2.6, 2.9);
  SamplerConfig config;
  config.samples = 20;
  config.burn_in = 5;
  config.seed = 17;

  std::vector<ChainRow> chain_a, chain_b;
  const ProbabilityMap a = lesion_posterior(w.image, w.fit, nullptr, config, &chain_a);
  const ProbabilityMap b = lesion_posterior(w.image, w.fit, nullptr, config, &chain_b);
  CHECK(a.probs == b.probs);
  REQUIRE(chain_a.size() == chain_b.size());
  for (std::size_t i = 0; i < chain_a.size(); ++i) {
    CHECK(chain_a[i].n_les == chain_b[i].n_les);
    CHECK(chain_a[i].mu_les == chain_b[i].mu_les);
    CHECK(chain_a[i].trace_sigma == chain_b[i].trace_sigma);
  }

  ProbabilityMap threaded = [&] {
    ThreadGuard guard(3);
    return lesion_posterior(w.image, w.fit, nullptr, config);
  }();
  CHECK(a.probs == threaded.probs);

  SamplerConfig other = config;
  other.seed = 19;
  const ProbabilityMap c = lesion_posterior(w.image, w.fit, nullptr, other);
  CHECK(a.probs != c.probs);
}

TEST_CASE("a single frozen sample returns the analytic probabilities exactly") {
  ToyWorld w = make_toy(2.6, 2.9);
  SamplerConfig config;
  config.samples = 1;
  config.burn_in = 0;
  config.seed = 23;
  LesionSampler sampler(w.image, w.fit, nullptr, config);
  const double mu_les = 3.0, var_les = 0.09;
  sampler.set_lesion_params(Eigen::VectorXd::Constant(1, mu_les),
                            Eigen::MatrixXd::Constant(1, 1, var_les));
  sampler.set_shape_factor({0.5, 0.9});
  sampler.freeze_continuous(true);

  const ProbabilityMap post = sampler.run();
  CHECK(post.probs[0] ==
        doctest::Approx(toy_z_probability(w, 0, mu_les, var_les, 0.5)).epsilon(1e-12));
  CHECK(post.probs[1] ==
        doctest::Approx(toy_z_probability(w, 1, mu_les, var_les, 0.9)).epsilon(1e-12));
}

TEST_CASE("chain rows record every sweep and serialize with full precision") {
  ToyWorld w = make_toy(2.6, 2.9);
  SamplerConfig config;
  config.samples = 3;
  config.burn_in = 2;
  config.seed = 29;

  std::vector<ChainRow> chain;
  lesion_posterior(w.image, w.fit, nullptr, config, &chain);
  REQUIRE(chain.size() == 5);
  for (std::size_t i = 0; i < chain.size(); ++i)
    CHECK(chain[i].sweep == static_cast<int>(i + 1));

  testsup::TempDir dir;
  const auto path = dir / "chain.csv";
  save_chain_csv(path, chain);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "sweep,n_les,mu_0,trace_sigma");
  int rows = 0;
  std::string line;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string field;
    int cols = 0;
    while (std::getline(ss, field, ',')) ++cols;
    CHECK(cols == 4);
    ++rows;
  }
  CHECK(rows == 5);

  // Round-trip the last row's mu through the printed representation.
  std::ifstream is2(path);
  std::vector<std::string> lines;
  while (std::getline(is2, line)) lines.push_back(line);
  std::stringstream ss(lines.back());
  std::string f0, f1, f2;
  std::getline(ss, f0, ',');
  std::getline(ss, f1, ',');
  std::getline(ss, f2, ',');
  CHECK(std::stod(f2) == chain.back().mu_les[0]);
}

TEST_CASE("final segmentation thresholds strictly and nests with gamma") {
  const VolumeGrid grid = VolumeGrid::isotropic({5, 1, 1}, 1.0);
  ProbabilityMap post;
  post.grid = grid;
  post.probs = {0.2, 0.5, 0.6, 0.9, 0.5000000001};

  // Three anatomical labels plus a lesion column at index 3.
  std::vector<double> label_post(5 * 4);
  for (std::size_t i = 0; i < 5; ++i) {
    label_post[i * 4 + 0] = 0.1;
    label_post[i * 4 + 1] = 0.5;
    label_post[i * 4 + 2] = 0.3;
    label_post[i * 4 + 3] = 0.1;
  }

  const auto [mask, labels] = final_segmentation(post, label_post, 4, 3, 0.5);
  CHECK(mask.mask == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
  CHECK(labels.labels == std::vector<std::uint16_t>{2, 2, 4, 4, 4});

  // Nesting: a larger gamma can only shrink the mask.
  const auto [tight, tight_labels] = final_segmentation(post, label_post, 4, 3, 0.7);
  for (std::size_t i = 0; i < 5; ++i)
    if (tight.mask[i]) CHECK(mask.mask[i] == 1);
  CHECK(tight.mask == std::vector<std::uint8_t>{0, 0, 0, 1, 0});
  (void)tight_labels;
}

TEST_CASE("final segmentation ties resolve to the lowest label") {
  const VolumeGrid grid = VolumeGrid::isotropic({1, 1, 1}, 1.0);
  ProbabilityMap post;
  post.grid = grid;
  post.probs = {0.1};
  const std::vector<double> label_post{0.4, 0.4, 0.2};
  const auto [mask, labels] = final_segmentation(post, label_post, 3, -1, 0.5);
  CHECK(mask.mask[0] == 0);
  CHECK(labels.labels[0] == 1);
}

TEST_CASE("final segmentation excludes the lesion column from the argmax") {
  const VolumeGrid grid = VolumeGrid::isotropic({1, 1, 1}, 1.0);
  ProbabilityMap post;
  post.grid = grid;
  post.probs = {0.1};
  // Lesion column dominates but must be ignored below threshold.
  const std::vector<double> label_post{0.2, 0.3, 0.5};
  const auto [mask, labels] = final_segmentation(post, label_post, 3, 2, 0.5);
  CHECK(mask.mask[0] == 0);
  CHECK(labels.labels[0] == 2);

  // Without a lesion column the synthetic lesion value is n_labels + 1.
  ProbabilityMap hot = post;
  hot.probs = {0.9};
  const auto [m2, l2] = final_segmentation(hot, label_post, 3, -1, 0.5);
  CHECK(m2.mask[0] == 1);
  CHECK(l2.labels[0] == 4);
}

TEST_CASE("final segmentation validates its inputs") {
  const VolumeGrid grid = VolumeGrid::isotropic({2, 1, 1}, 1.0);
  ProbabilityMap post;
  post.grid = grid;
  post.probs = {0.1, 0.2};
  const std::vector<double> label_post{0.5, 0.5, 0.5, 0.5};
  CHECK_THROWS(final_segmentation(post, label_post, 2, 5, 0.5));
  CHECK_THROWS(final_segmentation(post, label_post, 2, -1, 0.0));
  CHECK_THROWS(final_segmentation(post, label_post, 3, -1, 0.5));
}
