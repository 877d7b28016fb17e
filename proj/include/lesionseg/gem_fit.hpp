#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lesionseg/atlas.hpp"
#include "lesionseg/likelihood.hpp"
#include "lesionseg/volume.hpp"

namespace lesionseg {

struct FitConfig {
  int max_outer_iters = 30;
  int gem_iters_per_outer = 5;
  int deformation_max_steps = 20;
  int deformation_memory = 10;
  double convergence_tol = 1e-5;    // relative objective change per outer iteration
  bool diagonal_mode = false;
  std::array<std::uint32_t, 3> bias_order{3, 3, 3};
  double covariance_ridge_scale = 1e-6;  // lambda = scale * mean data variance
  bool sampler_requested = false;        // enforce proper NIW at configuration time

  void validate() const;
};

// Component-level responsibilities, voxel-major.
struct SoftAssignments {
  std::size_t n_voxels = 0;
  std::size_t n_columns = 0;
  std::vector<double> w;

  double& at(std::size_t i, std::size_t c) { return w[i * n_columns + c]; }
  double at(std::size_t i, std::size_t c) const { return w[i * n_columns + c]; }
  const double* row(std::size_t i) const { return w.data() + i * n_columns; }
};

struct TraceRow {
  int iteration = 0;
  std::string phase;
  double objective = 0.0;
};

void save_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

struct FitResult {
  AtlasMesh mesh;            // deformed; lesion-augmented when applicable
  ClassSharingMap sharing;   // updated mixture weights; +lesion class when augmented
  AppearanceParams params;
  BiasBasis basis;
  std::vector<double> prior;  // I x num_labels at the final deformation
  SoftAssignments assignments;
  std::vector<TraceRow> trace;
  double final_objective = 0.0;

  bool lesion_augmented = false;
  std::uint32_t lesion_label = 0;      // 0-based label index of the lesion class
  std::size_t lesion_component = 0;    // flat component index
  std::size_t wm_component = 0;        // flat component index of white matter
  double nu_effective = 0.0;
  double kappa = 0.0;
  // Anatomical prior (original K labels) and lesion location prior rho at the
  // final deformation; filled only in lesion-augmented fits.
  std::vector<double> anatomical_prior;
  std::vector<double> rho;
};

// Posterior responsibilities per mixture component, expanded over sub-classes.
// prior is the I x K label-level matrix.
SoftAssignments e_step(const MultiContrastImage& image, const std::vector<double>& prior,
                       const ClassSharingMap& sharing, const AppearanceParams& params,
                       const BiasBasis& basis);

// Label-level posteriors p(l_i = k | d_i, theta), I x K.
std::vector<double> label_posteriors(const MultiContrastImage& image,
                                     const std::vector<double>& prior,
                                     const ClassSharingMap& sharing,
                                     const AppearanceParams& params,
                                     const BiasBasis& basis);

// sum_i ln sum_k prior_ik L_k(d_i): the data term of the fit objective.
double data_log_likelihood(const MultiContrastImage& image, const std::vector<double>& prior,
                           const ClassSharingMap& sharing, const AppearanceParams& params,
                           const BiasBasis& basis);

// Weighted-moment updates of means and covariances (bias held fixed).
// Components with vanishing responsibility mass keep their parameters.
void m_step_gaussians(const MultiContrastImage& image, const SoftAssignments& w,
                      const BiasBasis& basis, AppearanceParams& params,
                      double ridge_scale, bool diagonal_mode);

// Solves the NP x NP bias-coefficient block system (decoupled per contrast in
// diagonal mode).
void m_step_bias(const MultiContrastImage& image, const SoftAssignments& w,
                 const BiasBasis& basis, AppearanceParams& params);

void m_step_mixture_weights(const SoftAssignments& w, ClassSharingMap& sharing);

// Weighted moments of one component under current bias: mass, mean, scatter.
struct ComponentMoments {
  double n = 0.0;
  Eigen::VectorXd m;
  Eigen::MatrixXd v;
};
std::vector<ComponentMoments> weighted_moments(const MultiContrastImage& image,
                                               const SoftAssignments& w,
                                               const BiasBasis& basis,
                                               const Eigen::MatrixXd& bias_coeffs);

struct CoupledParams {
  Eigen::VectorXd mu_wm, mu_les;
  Eigen::MatrixXd sigma_wm, sigma_les;
};

// Coordinate-ascent update of the coupled white-matter/lesion block under the
// normal-inverse-Wishart tie (each sub-update is the exact coordinate
// maximizer, so the EM bound never decreases). nu = 0 gives the flat-prior
// regime: independent weighted maximum-likelihood updates.
CoupledParams lesion_coupled_update(const ComponentMoments& wm, const ComponentMoments& les,
                                    const CoupledParams& current, double nu, double kappa,
                                    double ridge);

// Quasi-Newton ascent of the deformation objective
// sum_i ln sum_k prior_ik(vertices) L_k(d_i) + log p(vertices).
// Returns the number of accepted steps; mesh vertices are updated in place.
int optimize_deformation(AtlasMesh& mesh, const MultiContrastImage& image,
                         const ClassSharingMap& sharing, const AppearanceParams& params,
                         const BiasBasis& basis, const FitConfig& config);

FitResult fit(const MultiContrastImage& image, AtlasMesh mesh, ClassSharingMap sharing,
              const FitConfig& config);

FitResult fit_lesion_augmented(const MultiContrastImage& image, AtlasMesh mesh,
                               ClassSharingMap sharing, const LesionIntensityPrior& prior,
                               const FitConfig& config);

}  // namespace lesionseg
