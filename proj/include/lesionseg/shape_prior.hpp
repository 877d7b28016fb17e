#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lesionseg/rng.hpp"
#include "lesionseg/volume.hpp"

namespace lesionseg {

struct ShapeTrainConfig {
  int epochs = 200;
  int batch_size = 10;
  double learning_rate = 1e-4;
  int mc_samples = 1;
  double rotation_degrees = 10.0;  // augmentation rotations around each axis
  std::uint64_t seed = 0;

  void validate() const;
};

// Convolutional variational autoencoder over binary lesion masks on a fixed
// isotropic training grid. Encoder: stride-2 3x3x3 convolutions (bias +
// ReLU), then a dense layer producing (mu, s) with sigma = softplus(s).
// Decoder mirrors it with stride-2 transposed convolutions and a sigmoid
// output head. All parameters live in one flat vector.
struct ShapePriorModel {
  VolumeGrid training_grid;
  int latent_dim = 32;
  std::vector<int> channels{8, 16, 32};  // encoder channel schedule
  std::vector<double> theta;

  std::size_t n_layers() const { return channels.size(); }
  std::size_t n_parameters() const { return theta.size(); }
  void validate() const;

  static ShapePriorModel create(const VolumeGrid& training_grid, int latent_dim,
                                std::vector<int> channels, std::uint64_t seed);
};

struct EncodeResult {
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma;  // strictly positive
};

EncodeResult encode(const ShapePriorModel& model, const LesionMask& mask);

// Deterministic forward pass; outputs strictly in (0,1).
ProbabilityMap decode(const ShapePriorModel& model, const Eigen::VectorXd& h);

struct ElboResult {
  double elbo = 0.0;            // -kl + reconstruction
  double kl = 0.0;              // closed-form KL(q || N(0,I)) >= 0
  double reconstruction = 0.0;  // Monte Carlo Bernoulli log-likelihood <= 0
  std::vector<double> grad;     // d elbo / d theta
};

// Reparameterized single-mask ELBO with exact backpropagation.
ElboResult elbo_with_gradient(const ShapePriorModel& model, const LesionMask& mask,
                              int mc_samples, Rng& rng);

struct ShapeTrainLogRow {
  int epoch = 0;
  double mean_elbo = 0.0;
  double mean_kl = 0.0;
  double mean_reconstruction = 0.0;
};

void save_shape_training_log(const std::filesystem::path& path,
                             const std::vector<ShapeTrainLogRow>& log);

// Adam ascent on the mean mask ELBO; rotation-augmented copies of the masks
// are added up front. Seeded runs are bitwise reproducible.
ShapePriorModel train_shape_prior(const std::vector<LesionMask>& masks,
                                  const ShapeTrainConfig& config,
                                  std::vector<ShapeTrainLogRow>* log = nullptr);

// h ~ N(0, I) decoded.
ProbabilityMap sample_prior(const ShapePriorModel& model, Rng& rng);

void save_shape_prior(const std::filesystem::path& path, const ShapePriorModel& model);
ShapePriorModel load_shape_prior(const std::filesystem::path& path);

}  // namespace lesionseg
