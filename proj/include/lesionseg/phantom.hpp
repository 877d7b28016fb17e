#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "lesionseg/volume.hpp"

namespace lesionseg {

// Synthetic brain-like phantom: nested ellipsoid shells (background, CSF,
// gray matter, white matter), spherical lesions carved into white matter,
// per-class Gaussian intensities in the log domain, and a smooth
// multiplicative bias field (additive in the log domain).
struct PhantomSpec {
  VolumeGrid grid = VolumeGrid::isotropic({32, 32, 32}, 1.0);
  std::uint32_t num_labels = 4;  // 1=background, 2=CSF, 3=GM, 4=WM
  std::vector<ContrastTag> contrasts{ContrastTag::kT1w, ContrastTag::kT2w,
                                     ContrastTag::kFlair};

  // Ellipsoid semi-axis fractions of the half-extent, outermost first.
  std::array<double, 3> csf_fraction{0.90, 0.86, 0.82};
  std::array<double, 3> gm_fraction{0.76, 0.72, 0.68};
  std::array<double, 3> wm_fraction{0.58, 0.54, 0.50};

  Eigen::MatrixXd class_means;            // K x N, log domain
  std::vector<Eigen::MatrixXd> class_covs;  // K of N x N
  Eigen::VectorXd lesion_mean;            // N, log domain
  Eigen::MatrixXd lesion_cov;             // N x N

  int lesion_count = 5;
  double lesion_radius_min_mm = 2.0;
  double lesion_radius_max_mm = 3.2;

  std::array<std::uint32_t, 3> bias_order{2, 2, 2};
  Eigen::MatrixXd bias_coeffs;  // N x prod(bias_order); column 0 is the DC term

  // Optional lesion-intensity lookalikes: isolated white-matter voxels drawn
  // from the lesion Gaussian but absent from the truth mask.
  int outlier_count = 0;

  std::uint64_t seed = 0;

  // Standard three-contrast (T1w/T2w/FLAIR) spec with moderate bias.
  static PhantomSpec default_brain(std::array<std::uint32_t, 3> dims,
                                   double voxel_size_mm, std::uint64_t seed);
  // Restrict to the first n contrasts of the default spec.
  static PhantomSpec default_brain_contrasts(std::array<std::uint32_t, 3> dims,
                                             double voxel_size_mm, std::size_t n_contrasts,
                                             std::uint64_t seed);
  void validate() const;
};

struct PhantomLesion {
  std::array<double, 3> center_voxel;
  double radius_mm;
};

struct PhantomOutput {
  MultiContrastImage image;  // log domain, bias included
  LabelMap labels;           // anatomical truth (lesion voxels keep the WM label)
  LesionMask lesions;
  std::vector<PhantomLesion> placed_lesions;
  std::vector<std::size_t> outlier_voxels;
  PhantomSpec spec;  // carries all true parameters

  void save_truth_json(const std::filesystem::path& path) const;
};

PhantomOutput generate(const PhantomSpec& spec);

}  // namespace lesionseg
