#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace lesionseg {

enum class ContrastTag : std::uint8_t {
  kT1w = 0,
  kT2w = 1,
  kFlair = 2,
  kPd = 3,
  kLabels = 254,
  kOther = 255,
};

std::string contrast_name(ContrastTag tag);
ContrastTag contrast_from_name(const std::string& name);

struct VolumeGrid {
  std::array<std::uint32_t, 3> dims{0, 0, 0};
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  Eigen::Matrix4d origin_affine = Eigen::Matrix4d::Identity();  // voxel index -> world mm

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  double voxel_volume_mm3() const {
    return voxel_size[0] * voxel_size[1] * voxel_size[2];
  }
  std::size_t flat_index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims[0] * (y + static_cast<std::size_t>(dims[1]) * z);
  }
  Eigen::Vector3d voxel_center_world(double x, double y, double z) const {
    const Eigen::Vector4d p = origin_affine * Eigen::Vector4d(x, y, z, 1.0);
    return p.head<3>();
  }
  void validate() const;

  static VolumeGrid isotropic(std::array<std::uint32_t, 3> dims, double voxel_size_mm);
};

bool same_geometry(const VolumeGrid& a, const VolumeGrid& b, double tol = 1e-6);

// Log-transformed (or raw) multi-contrast intensities. Storage is
// channel-major with x-fastest voxel order inside each channel, matching the
// on-disk layout.
struct MultiContrastImage {
  VolumeGrid grid;
  std::size_t n_channels = 0;
  std::vector<ContrastTag> contrasts;
  bool log_domain = false;
  std::vector<double> data;

  double& at(std::size_t channel, std::size_t voxel) {
    return data[channel * grid.voxel_count() + voxel];
  }
  double at(std::size_t channel, std::size_t voxel) const {
    return data[channel * grid.voxel_count() + voxel];
  }
  const double* channel_data(std::size_t channel) const {
    return data.data() + channel * grid.voxel_count();
  }
  double* channel_data(std::size_t channel) {
    return data.data() + channel * grid.voxel_count();
  }
  Eigen::VectorXd voxel(std::size_t i) const {
    Eigen::VectorXd v(n_channels);
    for (std::size_t c = 0; c < n_channels; ++c) v[c] = at(c, i);
    return v;
  }
  void validate() const;

  static MultiContrastImage zeros(const VolumeGrid& grid,
                                  const std::vector<ContrastTag>& contrasts);
};

struct LabelMap {
  VolumeGrid grid;
  std::vector<std::uint16_t> labels;  // values in [1, K]

  std::uint16_t max_label() const;
  void validate() const;
};

struct LesionMask {
  VolumeGrid grid;
  std::vector<std::uint8_t> mask;  // values in {0,1}

  std::size_t count() const;
  void validate() const;
};

struct ProbabilityMap {
  VolumeGrid grid;
  std::vector<double> probs;  // values in [0,1]

  void validate() const;
};

// Elementwise ln(max(value, floor_epsilon)). Input must not already be in the
// log domain and must be finite.
MultiContrastImage log_transform(const MultiContrastImage& raw,
                                 double floor_epsilon = 1e-4);

// Trilinear resampling: each target voxel center is mapped through `affine`
// (target world -> source world) and interpolated in `src`; samples outside
// the source grid evaluate to 0.
ProbabilityMap resample_affine(const ProbabilityMap& src, const VolumeGrid& target,
                               const Eigen::Matrix4d& affine);

LesionMask binarize(const ProbabilityMap& map, double threshold = 0.5);

// MVOL container I/O.
void save_image(const std::filesystem::path& path, const MultiContrastImage& image);
MultiContrastImage load_image(const std::filesystem::path& path);
void save_labels(const std::filesystem::path& path, const LabelMap& labels);
LabelMap load_labels(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const LesionMask& mask);
LesionMask load_mask(const std::filesystem::path& path);
void save_probability(const std::filesystem::path& path, const ProbabilityMap& map);
ProbabilityMap load_probability(const std::filesystem::path& path);

}  // namespace lesionseg
