#include "lesionseg/atlas.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace lesionseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double tet_signed_volume(const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                         const Eigen::Vector3d& c, const Eigen::Vector3d& d) {
  return (b - a).cross(c - a).dot(d - a) / 6.0;
}

Eigen::Vector3d mesh_vertex(const Eigen::Matrix<double, Eigen::Dynamic, 3>& v,
                            std::uint32_t j) {
  return v.row(j).transpose();
}

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("atlas file truncated");
  return v;
}

// The six permutations of (x,y,z) axis orderings; each yields one tetrahedron
// of the cube via cumulative corner sums, giving a conforming subdivision.
constexpr int kAxisOrders[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                   {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};

}  // namespace

void AtlasMesh::validate() const {
  const std::size_t j_count = num_vertices();
  if (j_count < 4) throw std::invalid_argument("mesh needs >= 4 vertices");
  if (reference_vertices.rows() != vertices.rows())
    throw std::invalid_argument("reference vertex count mismatch");
  if (!vertices.allFinite() || !reference_vertices.allFinite())
    throw std::invalid_argument("non-finite vertex positions");
  if (num_labels == 0) throw std::invalid_argument("mesh has no labels");
  if (alpha.size() != j_count * num_labels)
    throw std::invalid_argument("alpha size mismatch");
  if (beta.size() != j_count) throw std::invalid_argument("beta size mismatch");
  if (!(deformation_stiffness > 0.0))
    throw std::invalid_argument("stiffness must be > 0");
  for (std::size_t j = 0; j < j_count; ++j) {
    double sum = 0.0;
    for (std::uint32_t k = 0; k < num_labels; ++k) {
      const double a = alpha_at(j, k);
      if (a < 0.0) throw std::invalid_argument("negative alpha");
      sum += a;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("alpha row does not sum to 1");
    if (beta[j] < 0.0 || beta[j] > 1.0)
      throw std::invalid_argument("beta outside [0,1]");
  }
  if (tets.empty()) throw std::invalid_argument("mesh has no tetrahedra");
  for (const auto& t : tets) {
    for (std::uint32_t v : t)
      if (v >= j_count) throw std::invalid_argument("tet references invalid vertex");
    const double v_ref = tet_signed_volume(
        mesh_vertex(reference_vertices, t[0]), mesh_vertex(reference_vertices, t[1]),
        mesh_vertex(reference_vertices, t[2]), mesh_vertex(reference_vertices, t[3]));
    if (!(v_ref > 0.0))
      throw std::invalid_argument("degenerate reference tetrahedron");
  }
}

Rasterization rasterize(const AtlasMesh& mesh, const VolumeGrid& grid) {
  mesh.validate();
  grid.validate();

  // Work in voxel-index space; barycentric coordinates are affine-invariant.
  const Eigen::Matrix4d world_to_index = grid.origin_affine.inverse();
  const std::size_t j_count = mesh.num_vertices();
  Eigen::Matrix<double, Eigen::Dynamic, 3> vi(j_count, 3);
  for (std::size_t j = 0; j < j_count; ++j) {
    const Eigen::Vector4d p =
        world_to_index * Eigen::Vector4d(mesh.vertices(j, 0), mesh.vertices(j, 1),
                                         mesh.vertices(j, 2), 1.0);
    vi.row(j) = p.head<3>().transpose();
  }

  const std::size_t voxels = grid.voxel_count();
  Rasterization rast;
  rast.tet_index.assign(voxels, -1);
  rast.weights.assign(voxels, {0.0, 0.0, 0.0, 0.0});

  constexpr double kTol = 1e-9;
  for (std::size_t t = 0; t < mesh.tets.size(); ++t) {
    const auto& tet = mesh.tets[t];
    const Eigen::Vector3d v0 = mesh_vertex(vi, tet[0]);
    const Eigen::Vector3d v1 = mesh_vertex(vi, tet[1]);
    const Eigen::Vector3d v2 = mesh_vertex(vi, tet[2]);
    const Eigen::Vector3d v3 = mesh_vertex(vi, tet[3]);
    const double vol = tet_signed_volume(v0, v1, v2, v3);
    if (!(vol > 0.0))
      throw std::invalid_argument("rasterize: folded mesh (tet " + std::to_string(t) + ")");
    Eigen::Matrix3d e;
    e.col(0) = v1 - v0;
    e.col(1) = v2 - v0;
    e.col(2) = v3 - v0;
    const Eigen::Matrix3d e_inv = e.inverse();

    // Voxel-index bounding box of the tetrahedron.
    Eigen::Vector3d lo = v0.cwiseMin(v1).cwiseMin(v2).cwiseMin(v3);
    Eigen::Vector3d hi = v0.cwiseMax(v1).cwiseMax(v2).cwiseMax(v3);
    std::array<std::int64_t, 3> ilo, ihi;
    for (int a = 0; a < 3; ++a) {
      ilo[a] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(lo[a] - kTol)));
      ihi[a] = std::min<std::int64_t>(static_cast<std::int64_t>(grid.dims[a]) - 1,
                                      static_cast<std::int64_t>(std::floor(hi[a] + kTol)));
    }
    for (std::int64_t z = ilo[2]; z <= ihi[2]; ++z) {
      for (std::int64_t y = ilo[1]; y <= ihi[1]; ++y) {
        for (std::int64_t x = ilo[0]; x <= ihi[0]; ++x) {
          const std::size_t i = grid.flat_index(static_cast<std::size_t>(x),
                                                static_cast<std::size_t>(y),
                                                static_cast<std::size_t>(z));
          if (rast.tet_index[i] >= 0) continue;  // first (lowest) tet wins
          const Eigen::Vector3d p(static_cast<double>(x), static_cast<double>(y),
                                  static_cast<double>(z));
          const Eigen::Vector3d lam = e_inv * (p - v0);
          const double l0 = 1.0 - lam[0] - lam[1] - lam[2];
          if (lam[0] < -kTol || lam[1] < -kTol || lam[2] < -kTol || l0 < -kTol)
            continue;
          std::array<double, 4> w{std::max(0.0, l0), std::max(0.0, lam[0]),
                                  std::max(0.0, lam[1]), std::max(0.0, lam[2])};
          const double sum = w[0] + w[1] + w[2] + w[3];
          for (double& v : w) v /= sum;
          rast.tet_index[i] = static_cast<std::int32_t>(t);
          rast.weights[i] = w;
        }
      }
    }
  }
  return rast;
}

std::vector<double> interpolate_prior(const AtlasMesh& mesh, const Rasterization& rast) {
  const std::size_t voxels = rast.tet_index.size();
  const std::size_t k_count = mesh.num_labels;
  std::vector<double> prior(voxels * k_count, 0.0);
  for (std::size_t i = 0; i < voxels; ++i) {
    double* row = prior.data() + i * k_count;
    const std::int32_t t = rast.tet_index[i];
    if (t < 0) {
      row[0] = 1.0;  // background
      continue;
    }
    const auto& tet = mesh.tets[static_cast<std::size_t>(t)];
    const auto& w = rast.weights[i];
    for (int m = 0; m < 4; ++m) {
      const double* a = mesh.alpha.data() + tet[m] * k_count;
      const double wm = w[m];
      for (std::size_t k = 0; k < k_count; ++k) row[k] += wm * a[k];
    }
  }
  return prior;
}

ProbabilityMap interpolate_lesion_prior(const AtlasMesh& mesh, const Rasterization& rast,
                                        const VolumeGrid& grid) {
  if (rast.tet_index.size() != grid.voxel_count())
    throw std::invalid_argument("rasterization does not match grid");
  ProbabilityMap map;
  map.grid = grid;
  map.probs.assign(grid.voxel_count(), 0.0);
  for (std::size_t i = 0; i < map.probs.size(); ++i) {
    const std::int32_t t = rast.tet_index[i];
    if (t < 0) continue;
    const auto& tet = mesh.tets[static_cast<std::size_t>(t)];
    const auto& w = rast.weights[i];
    double rho = 0.0;
    for (int m = 0; m < 4; ++m) rho += w[m] * mesh.beta[tet[m]];
    map.probs[i] = std::min(1.0, std::max(0.0, rho));
  }
  return map;
}

DeformationPrior deformation_log_prior(const AtlasMesh& mesh) {
  DeformationPrior out;
  out.gradient.setZero(mesh.vertices.rows(), 3);
  double cost = 0.0;
  for (const auto& tet : mesh.tets) {
    const Eigen::Vector3d r0 = mesh_vertex(mesh.reference_vertices, tet[0]);
    const Eigen::Vector3d r1 = mesh_vertex(mesh.reference_vertices, tet[1]);
    const Eigen::Vector3d r2 = mesh_vertex(mesh.reference_vertices, tet[2]);
    const Eigen::Vector3d r3 = mesh_vertex(mesh.reference_vertices, tet[3]);
    const double v_ref = tet_signed_volume(r0, r1, r2, r3);

    const Eigen::Vector3d v0 = mesh_vertex(mesh.vertices, tet[0]);
    const Eigen::Vector3d v1 = mesh_vertex(mesh.vertices, tet[1]);
    const Eigen::Vector3d v2 = mesh_vertex(mesh.vertices, tet[2]);
    const Eigen::Vector3d v3 = mesh_vertex(mesh.vertices, tet[3]);
    const double v_cur = tet_signed_volume(v0, v1, v2, v3);
    if (!(v_cur > 0.0)) {
      out.log_prior = -kInf;
      out.gradient.resize(0, 3);
      return out;
    }
    const double r = v_cur / v_ref;
    cost += mesh.deformation_stiffness *
            ((r - 1.0) * (r - 1.0) + (r - 1.0) - std::log(r));

    // d cost / d V, then distribute via signed-volume gradients.
    const double dc_dv =
        mesh.deformation_stiffness * (2.0 * (r - 1.0) + 1.0 - 1.0 / r) / v_ref;
    const Eigen::Vector3d g1 = (v2 - v0).cross(v3 - v0) / 6.0;
    const Eigen::Vector3d g2 = (v3 - v0).cross(v1 - v0) / 6.0;
    const Eigen::Vector3d g3 = (v1 - v0).cross(v2 - v0) / 6.0;
    const Eigen::Vector3d g0 = -(g1 + g2 + g3);
    out.gradient.row(tet[0]) -= dc_dv * g0.transpose();
    out.gradient.row(tet[1]) -= dc_dv * g1.transpose();
    out.gradient.row(tet[2]) -= dc_dv * g2.transpose();
    out.gradient.row(tet[3]) -= dc_dv * g3.transpose();
  }
  out.log_prior = -cost;
  return out;
}

AtlasMesh build_atlas(const std::vector<LabelMap>& label_maps,
                      const std::vector<LesionMask>& lesion_masks,
                      std::array<std::uint32_t, 3> mesh_resolution, double stiffness) {
  if (label_maps.empty()) throw std::invalid_argument("build_atlas: no training maps");
  if (!lesion_masks.empty() && lesion_masks.size() != label_maps.size())
    throw std::invalid_argument("build_atlas: mask count must match map count (or be empty)");
  const VolumeGrid& grid = label_maps[0].grid;
  std::uint32_t num_labels = 0;
  for (const auto& lm : label_maps) {
    lm.validate();
    if (!same_geometry(lm.grid, grid))
      throw std::invalid_argument("build_atlas: training maps on different grids");
    num_labels = std::max<std::uint32_t>(num_labels, lm.max_label());
  }
  for (const auto& mask : lesion_masks) {
    mask.validate();
    if (!same_geometry(mask.grid, grid))
      throw std::invalid_argument("build_atlas: mask grid mismatch");
  }
  for (int a = 0; a < 3; ++a)
    if (mesh_resolution[a] < 2)
      throw std::invalid_argument("build_atlas: mesh resolution must be >= 2 per axis");

  AtlasMesh mesh;
  mesh.num_labels = num_labels;
  mesh.deformation_stiffness = stiffness;

  // Vertex lattice spanning the physical volume [-0.5, dim-0.5] in index
  // space so every voxel center lies strictly inside.
  const auto& res = mesh_resolution;
  const std::size_t j_count =
      static_cast<std::size_t>(res[0]) * res[1] * res[2];
  mesh.vertices.resize(static_cast<Eigen::Index>(j_count), 3);
  std::array<std::vector<double>, 3> axis_pos;
  for (int a = 0; a < 3; ++a) {
    axis_pos[a].resize(res[a]);
    const double lo = -0.5;
    const double hi = static_cast<double>(grid.dims[a]) - 0.5;
    for (std::uint32_t r = 0; r < res[a]; ++r)
      axis_pos[a][r] = lo + (hi - lo) * static_cast<double>(r) /
                                static_cast<double>(res[a] - 1);
  }
  auto vertex_id = [&](std::uint32_t rx, std::uint32_t ry, std::uint32_t rz) {
    return static_cast<std::size_t>(rx) + res[0] * (ry + static_cast<std::size_t>(res[1]) * rz);
  };
  for (std::uint32_t rz = 0; rz < res[2]; ++rz)
    for (std::uint32_t ry = 0; ry < res[1]; ++ry)
      for (std::uint32_t rx = 0; rx < res[0]; ++rx) {
        const Eigen::Vector4d p =
            grid.origin_affine *
            Eigen::Vector4d(axis_pos[0][rx], axis_pos[1][ry], axis_pos[2][rz], 1.0);
        mesh.vertices.row(static_cast<Eigen::Index>(vertex_id(rx, ry, rz))) =
            p.head<3>().transpose();
      }
  mesh.reference_vertices = mesh.vertices;

  // Six tetrahedra per lattice cell, consistently oriented.
  for (std::uint32_t rz = 0; rz + 1 < res[2]; ++rz) {
    for (std::uint32_t ry = 0; ry + 1 < res[1]; ++ry) {
      for (std::uint32_t rx = 0; rx + 1 < res[0]; ++rx) {
        for (const auto& order : kAxisOrders) {
          std::array<std::uint32_t, 3> c{rx, ry, rz};
          std::array<std::uint32_t, 4> tet;
          tet[0] = static_cast<std::uint32_t>(vertex_id(c[0], c[1], c[2]));
          for (int s = 0; s < 3; ++s) {
            ++c[order[s]];
            tet[s + 1] = static_cast<std::uint32_t>(vertex_id(c[0], c[1], c[2]));
          }
          const double vol = tet_signed_volume(
              mesh_vertex(mesh.vertices, tet[0]), mesh_vertex(mesh.vertices, tet[1]),
              mesh_vertex(mesh.vertices, tet[2]), mesh_vertex(mesh.vertices, tet[3]));
          if (vol < 0.0) std::swap(tet[2], tet[3]);
          mesh.tets.push_back(tet);
        }
      }
    }
  }

  // Laplace-smoothed label/lesion frequencies over the voxels nearest each
  // vertex (per-axis nearest lattice coordinate).
  std::array<std::vector<std::uint32_t>, 3> nearest;
  for (int a = 0; a < 3; ++a) {
    nearest[a].resize(grid.dims[a]);
    const double lo = axis_pos[a].front();
    const double step = axis_pos[a][1] - axis_pos[a][0];
    for (std::uint32_t x = 0; x < grid.dims[a]; ++x) {
      const double t = (static_cast<double>(x) - lo) / step;
      const std::int64_t r = std::llround(t);
      nearest[a][x] = static_cast<std::uint32_t>(
          std::clamp<std::int64_t>(r, 0, static_cast<std::int64_t>(res[a]) - 1));
    }
  }
  std::vector<std::uint64_t> label_counts(j_count * num_labels, 0);
  std::vector<std::uint64_t> vertex_voxels(j_count, 0);
  std::vector<std::uint64_t> lesion_counts(j_count, 0);
  std::vector<std::uint64_t> mask_voxels(j_count, 0);
  for (std::size_t m = 0; m < label_maps.size(); ++m) {
    std::size_t i = 0;
    for (std::uint32_t z = 0; z < grid.dims[2]; ++z) {
      for (std::uint32_t y = 0; y < grid.dims[1]; ++y) {
        for (std::uint32_t x = 0; x < grid.dims[0]; ++x, ++i) {
          const std::size_t j = vertex_id(nearest[0][x], nearest[1][y], nearest[2][z]);
          ++vertex_voxels[j];
          ++label_counts[j * num_labels + (label_maps[m].labels[i] - 1)];
          ++mask_voxels[j];
          if (!lesion_masks.empty() && lesion_masks[m].mask[i])
            ++lesion_counts[j];
        }
      }
    }
  }
  mesh.alpha.resize(j_count * num_labels);
  mesh.beta.resize(j_count);
  for (std::size_t j = 0; j < j_count; ++j) {
    const double denom = static_cast<double>(vertex_voxels[j] + num_labels);
    for (std::uint32_t k = 0; k < num_labels; ++k)
      mesh.alpha[j * num_labels + k] =
          static_cast<double>(label_counts[j * num_labels + k] + 1) / denom;
    mesh.beta[j] = static_cast<double>(lesion_counts[j] + 1) /
                   static_cast<double>(mask_voxels[j] + 2);
  }
  mesh.validate();
  return mesh;
}

AtlasMesh augment_with_lesion_class(const AtlasMesh& mesh) {
  mesh.validate();
  AtlasMesh out = mesh;
  out.num_labels = mesh.num_labels + 1;
  out.alpha.assign(mesh.num_vertices() * out.num_labels, 0.0);
  for (std::size_t j = 0; j < mesh.num_vertices(); ++j) {
    const double b = mesh.beta[j];
    for (std::uint32_t k = 0; k < mesh.num_labels; ++k)
      out.alpha[j * out.num_labels + k] = mesh.alpha_at(j, k) * (1.0 - b);
    out.alpha[j * out.num_labels + mesh.num_labels] = b;
  }
  out.validate();
  return out;
}

void save_atlas(const std::filesystem::path& path, const AtlasMesh& mesh) {
  mesh.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write atlas: " + path.string());
  os.write("AMSH", 4);
  write_pod<std::uint32_t>(os, 1);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(mesh.num_vertices()));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(mesh.num_tets()));
  write_pod<std::uint32_t>(os, mesh.num_labels);
  for (Eigen::Index j = 0; j < mesh.vertices.rows(); ++j)
    for (int a = 0; a < 3; ++a) write_pod<double>(os, mesh.vertices(j, a));
  for (Eigen::Index j = 0; j < mesh.reference_vertices.rows(); ++j)
    for (int a = 0; a < 3; ++a) write_pod<double>(os, mesh.reference_vertices(j, a));
  for (const auto& tet : mesh.tets)
    for (std::uint32_t v : tet) write_pod<double>(os, static_cast<double>(v));
  for (double a : mesh.alpha) write_pod<double>(os, a);
  for (double b : mesh.beta) write_pod<double>(os, b);
  write_pod<double>(os, mesh.deformation_stiffness);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

AtlasMesh load_atlas(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open atlas: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "AMSH", 4) != 0)
    throw std::runtime_error("not an atlas file: " + path.string());
  if (read_pod<std::uint32_t>(is) != 1)
    throw std::runtime_error("unsupported atlas version");
  const auto j_count = read_pod<std::uint32_t>(is);
  const auto t_count = read_pod<std::uint32_t>(is);
  const auto k_count = read_pod<std::uint32_t>(is);
  AtlasMesh mesh;
  mesh.num_labels = k_count;
  mesh.vertices.resize(j_count, 3);
  for (std::uint32_t j = 0; j < j_count; ++j)
    for (int a = 0; a < 3; ++a) mesh.vertices(j, a) = read_pod<double>(is);
  mesh.reference_vertices.resize(j_count, 3);
  for (std::uint32_t j = 0; j < j_count; ++j)
    for (int a = 0; a < 3; ++a) mesh.reference_vertices(j, a) = read_pod<double>(is);
  mesh.tets.resize(t_count);
  for (auto& tet : mesh.tets)
    for (auto& v : tet) {
      const double raw = read_pod<double>(is);
      if (raw < 0.0 || raw >= static_cast<double>(j_count) ||
          raw != std::floor(raw))
        throw std::runtime_error("atlas file has invalid tet index");
      v = static_cast<std::uint32_t>(raw);
    }
  mesh.alpha.resize(static_cast<std::size_t>(j_count) * k_count);
  for (double& a : mesh.alpha) a = read_pod<double>(is);
  mesh.beta.resize(j_count);
  for (double& b : mesh.beta) b = read_pod<double>(is);
  mesh.deformation_stiffness = read_pod<double>(is);
  mesh.validate();
  return mesh;
}

}  // namespace lesionseg
