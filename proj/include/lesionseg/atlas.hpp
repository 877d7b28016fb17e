#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "lesionseg/volume.hpp"

namespace lesionseg {

// Tetrahedral mesh carrying per-vertex label probabilities (alpha) and lesion
// probabilities (beta). Label 1 is the designated background label; alpha
// column 0 corresponds to it.
struct AtlasMesh {
  Eigen::Matrix<double, Eigen::Dynamic, 3> vertices;            // J x 3, mm
  Eigen::Matrix<double, Eigen::Dynamic, 3> reference_vertices;  // J x 3, mm
  std::vector<std::array<std::uint32_t, 4>> tets;
  std::vector<double> alpha;  // J x K row-major
  std::vector<double> beta;   // J
  std::uint32_t num_labels = 0;
  double deformation_stiffness = 0.1;

  std::size_t num_vertices() const { return static_cast<std::size_t>(vertices.rows()); }
  std::size_t num_tets() const { return tets.size(); }
  double alpha_at(std::size_t j, std::size_t k) const { return alpha[j * num_labels + k]; }
  void validate() const;
};

struct Rasterization {
  std::vector<std::int32_t> tet_index;           // -1 for voxels outside the mesh
  std::vector<std::array<double, 4>> weights;    // barycentric, per voxel
};

// Locates the containing tetrahedron of every voxel center (deformed
// configuration) and stores barycentric weights. Shared-face ties go to the
// lowest tetrahedron index.
Rasterization rasterize(const AtlasMesh& mesh, const VolumeGrid& grid);

// Per-voxel label prior rows: row i, column k = sum_j alpha_j^k psi_j^i.
// Outside-mesh voxels get background probability 1.
std::vector<double> interpolate_prior(const AtlasMesh& mesh, const Rasterization& rast);

// Per-voxel lesion location prior rho_i = sum_j beta_j psi_j^i; 0 outside.
ProbabilityMap interpolate_lesion_prior(const AtlasMesh& mesh, const Rasterization& rast,
                                        const VolumeGrid& grid);

struct DeformationPrior {
  double log_prior = 0.0;  // -inf when any tetrahedron is folded
  Eigen::Matrix<double, Eigen::Dynamic, 3> gradient;  // d log_prior / d vertices
};

// -stiffness * sum_tets c(V/V_ref) with c(r) = (r-1)^2 + (r-1) - ln r, a
// strictly convex barrier whose unique zero and mode sit at r = 1; folding
// (signed volume <= 0) yields -inf.
DeformationPrior deformation_log_prior(const AtlasMesh& mesh);

// Regular tetrahedralized grid over the training volume; alpha and beta are
// Laplace-smoothed label/lesion frequencies of the voxels nearest each vertex.
AtlasMesh build_atlas(const std::vector<LabelMap>& label_maps,
                      const std::vector<LesionMask>& lesion_masks,
                      std::array<std::uint32_t, 3> mesh_resolution,
                      double stiffness = 0.1);

// K+1 label columns: new column K gets beta, existing columns scale by 1-beta.
AtlasMesh augment_with_lesion_class(const AtlasMesh& mesh);

void save_atlas(const std::filesystem::path& path, const AtlasMesh& mesh);
AtlasMesh load_atlas(const std::filesystem::path& path);

}  // namespace lesionseg
