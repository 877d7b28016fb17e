#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lesionseg/volume.hpp"

namespace lesionseg {

// Maps the K structure labels onto G shared Gaussian classes, each with an
// optional mixture of components.
struct ClassSharingMap {
  std::vector<std::uint32_t> label_to_class;        // K entries, values in [0,G)
  std::vector<std::uint32_t> components_per_class;  // G entries, >= 1
  std::vector<std::vector<double>> mixture_weights; // per class, sums to 1
  std::int32_t wm_class = -1;                       // class index of white matter
  std::int32_t gm_class = -1;                       // class index of gray matter
  std::vector<std::string> class_names;             // optional, size G when present

  std::size_t num_labels() const { return label_to_class.size(); }
  std::size_t num_classes() const { return components_per_class.size(); }
  std::size_t total_components() const;
  // Flat index of component m of class g; components are class-major.
  std::size_t component_offset(std::size_t g) const;
  void validate() const;

  static ClassSharingMap identity(std::size_t k);
  static ClassSharingMap from_json_file(const std::filesystem::path& path);
  void save_json(const std::filesystem::path& path) const;
};

struct BiasBasis {
  std::array<std::uint32_t, 3> order{1, 1, 1};
  std::size_t n_functions = 0;      // P = product of per-axis orders
  std::vector<double> values;       // I x P, voxel-major

  const double* row(std::size_t voxel) const { return values.data() + voxel * n_functions; }
};

// Separable DCT-II products over voxel indices; column 0 is constant 1.
BiasBasis eval_bias_basis(const VolumeGrid& grid, std::array<std::uint32_t, 3> order);

struct GaussianComponent {
  Eigen::VectorXd mean;  // N
  Eigen::MatrixXd cov;   // N x N SPD (diagonal when diagonal_mode)
};

struct AppearanceParams {
  std::vector<GaussianComponent> components;  // class-major flat component list
  Eigen::MatrixXd bias_coeffs;                // N x P
  bool diagonal_mode = false;

  std::size_t n_contrasts() const {
    return components.empty() ? 0 : static_cast<std::size_t>(components[0].mean.size());
  }
  void validate(const ClassSharingMap& sharing) const;
};

// Log-density of d under N(mean + C phi, cov).
double component_log_likelihood(const Eigen::VectorXd& d, const GaussianComponent& comp,
                                const Eigen::MatrixXd& bias_coeffs,
                                const Eigen::VectorXd& phi);

// Precomputed-inverse evaluator for hot loops; matches
// component_log_likelihood exactly.
class GaussianEvaluator {
 public:
  explicit GaussianEvaluator(const GaussianComponent& comp);
  double log_density(const Eigen::VectorXd& corrected) const {
    const Eigen::VectorXd v = corrected - mean_;
    return log_norm_ - 0.5 * v.dot(inv_ * v);
  }
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& inverse() const { return inv_; }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd inv_;
  double log_norm_;
};

struct LesionIntensityPrior {
  double nu_base = 500.0;  // pseudo-voxel count referenced to 1 mm^3 voxels
  double kappa = 50.0;

  double nu_effective(const VolumeGrid& grid) const {
    return nu_base / grid.voxel_volume_mm3();
  }
  void validate() const;
};

// Log of N(mu_les | mu_wm, Sigma_les/nu) * IW(Sigma_les | kappa nu Sigma_wm, nu-N-2).
// The IW parameterization is the one whose mode over Sigma_les is
// kappa nu Sigma_wm / nu, i.e. the prior mode sits exactly at kappa Sigma_wm.
// nu = 0 signals the flat-prior regime: returns 0.
double niw_log_density(const Eigen::VectorXd& mu_les, const Eigen::MatrixXd& sigma_les,
                       const Eigen::VectorXd& mu_wm, const Eigen::MatrixXd& sigma_wm,
                       double nu, double kappa);

double log_multivariate_gamma(int n, double a);

// Parameter dump consumed by test oracles via the CLI.
void save_params(const std::filesystem::path& path, const AppearanceParams& params,
                 const ClassSharingMap& sharing);
std::pair<AppearanceParams, ClassSharingMap> load_params(const std::filesystem::path& path);

}  // namespace lesionseg
