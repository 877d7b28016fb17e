#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "lesionseg/gem_fit.hpp"
#include "lesionseg/rng.hpp"
#include "lesionseg/shape_prior.hpp"
#include "lesionseg/volume.hpp"

namespace lesionseg {

struct SamplerConfig {
  int samples = 50;
  int burn_in = 50;
  double gamma = 0.5;
  std::uint64_t seed = 0;
  bool any_channel = false;  // disjunction variant of the intensity constraint
  Eigen::Matrix4d subject_to_prior_affine = Eigen::Matrix4d::Identity();

  void validate() const;
};

// Voxels whose bias-corrected intensity exceeds the gray-matter mixture mean
// (strictly) in every FLAIR/T2w channel present; any_channel switches the
// rule to at-least-one. All ones when no tagged channel exists.
LesionMask candidate_mask(const MultiContrastImage& image, const FitResult& fit,
                          bool any_channel = false);

struct ChainRow {
  int sweep = 0;
  double n_les = 0.0;
  Eigen::VectorXd mu_les;
  double trace_sigma = 0.0;
};

void save_chain_csv(const std::filesystem::path& path, const std::vector<ChainRow>& chain);

// Blocked Gibbs sampler over (Sigma_les, mu_les, h, z) given the fitted
// parameters. Continuous blocks draw from a sequential seeded stream; the
// per-voxel z draws use counter-based streams keyed by (seed, sweep, voxel),
// so results are independent of the thread count.
class LesionSampler {
 public:
  LesionSampler(const MultiContrastImage& image, const FitResult& fit,
                const ShapePriorModel* shape_prior, const SamplerConfig& config);

  // One full sweep: Sigma_les, mu_les, h, then z (with its analytic
  // probabilities retained).
  void sweep();

  // burn_in discarded sweeps, then `samples` sweeps whose analytic z
  // probabilities are averaged (Rao-Blackwellized estimate).
  ProbabilityMap run(std::vector<ChainRow>* chain = nullptr);

  // Test hooks: pin the continuous state and only resample z.
  void set_lesion_params(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma);
  void set_shape_factor(std::vector<double> f);  // per-voxel f_i override
  void freeze_continuous(bool frozen) { frozen_ = frozen; }

  const LesionMask& z() const { return z_; }
  const std::vector<double>& last_z_probability() const { return z_prob_; }
  const LesionMask& candidate() const { return candidate_; }
  double n_les() const;
  const Eigen::VectorXd& mu_les() const { return mu_les_; }
  const Eigen::MatrixXd& sigma_les() const { return sigma_les_; }
  int sweeps_done() const { return sweep_index_; }

 private:
  void refresh_shape_factor();

  const MultiContrastImage& image_;
  const ShapePriorModel* shape_prior_;
  SamplerConfig config_;
  Rng rng_;

  std::size_t n_ = 0;          // contrasts
  double nu_ = 0.0;
  double kappa_ = 0.0;
  Eigen::VectorXd mu_wm_;
  Eigen::MatrixXd sigma_wm_;

  std::vector<double> corrected_;  // I x N bias-corrected intensities
  std::vector<double> log_anat_;   // ln sum_k pi_ik L_k per voxel
  std::vector<double> rho_;        // lesion location prior per voxel
  std::vector<double> f_;          // shape factor per voxel
  LesionMask candidate_;
  LesionMask z_;
  std::vector<double> z_prob_;

  Eigen::VectorXd mu_les_;
  Eigen::MatrixXd sigma_les_;
  int sweep_index_ = 0;
  bool frozen_ = false;
  bool shape_override_ = false;
};

// lesion_posterior of the two-step segmentation: fits' sampler over the image.
ProbabilityMap lesion_posterior(const MultiContrastImage& image, const FitResult& fit,
                                const ShapePriorModel* shape_prior,
                                const SamplerConfig& config,
                                std::vector<ChainRow>* chain = nullptr);

// Step 1: hard lesion mask posterior > gamma (strict). Step 2: remaining
// voxels take the argmax label over label_post excluding lesion_column
// (ties to the lowest index); lesion voxels get lesion_column + 1 when given,
// n_labels + 1 otherwise. Label values are written 1-based.
std::pair<LesionMask, LabelMap> final_segmentation(const ProbabilityMap& posterior,
                                                   const std::vector<double>& label_post,
                                                   std::size_t n_labels,
                                                   std::int32_t lesion_column,
                                                   double gamma);

}  // namespace lesionseg
