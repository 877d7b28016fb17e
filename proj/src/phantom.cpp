#include "lesionseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lesionseg/likelihood.hpp"
#include "lesionseg/rng.hpp"

namespace lesionseg {

namespace {

constexpr std::uint16_t kBackground = 1;
constexpr std::uint16_t kCsf = 2;
constexpr std::uint16_t kGm = 3;
constexpr std::uint16_t kWm = 4;

// Native-domain mean intensities per (class, contrast) for T1w/T2w/FLAIR.
constexpr double kNativeMeans[5][3] = {
    {30.0, 30.0, 30.0},    // background
    {40.0, 180.0, 35.0},   // CSF
    {90.0, 110.0, 95.0},   // GM
    {130.0, 80.0, 80.0},   // WM
    {100.0, 160.0, 160.0}, // lesion
};
constexpr double kLogSigma[5] = {0.05, 0.04, 0.035, 0.03, 0.045};

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

PhantomSpec PhantomSpec::default_brain(std::array<std::uint32_t, 3> dims,
                                       double voxel_size_mm, std::uint64_t seed) {
  return default_brain_contrasts(dims, voxel_size_mm, 3, seed);
}

PhantomSpec PhantomSpec::default_brain_contrasts(std::array<std::uint32_t, 3> dims,
                                                 double voxel_size_mm,
                                                 std::size_t n_contrasts,
                                                 std::uint64_t seed) {
  if (n_contrasts < 1 || n_contrasts > 3)
    throw std::invalid_argument("default phantom supports 1..3 contrasts");
  PhantomSpec spec;
  spec.grid = VolumeGrid::isotropic(dims, voxel_size_mm);
  spec.seed = seed;
  spec.contrasts.assign({ContrastTag::kT1w, ContrastTag::kT2w, ContrastTag::kFlair});
  spec.contrasts.resize(n_contrasts);

  const auto n = static_cast<Eigen::Index>(n_contrasts);
  spec.class_means.resize(4, n);
  spec.class_covs.clear();
  for (int k = 0; k < 4; ++k) {
    for (Eigen::Index c = 0; c < n; ++c)
      spec.class_means(k, c) = std::log(kNativeMeans[k][c]);
    spec.class_covs.push_back(kLogSigma[k] * kLogSigma[k] *
                              Eigen::MatrixXd::Identity(n, n));
  }
  spec.lesion_mean.resize(n);
  for (Eigen::Index c = 0; c < n; ++c)
    spec.lesion_mean[c] = std::log(kNativeMeans[4][c]);
  spec.lesion_cov = kLogSigma[4] * kLogSigma[4] * Eigen::MatrixXd::Identity(n, n);

  // Smooth bias peaking near +/-20% in native intensity: low-order DCT
  // coefficients whose absolute sum is about ln(1.2).
  const std::size_t p = static_cast<std::size_t>(spec.bias_order[0]) *
                        spec.bias_order[1] * spec.bias_order[2];
  spec.bias_coeffs.setZero(n, static_cast<Eigen::Index>(p));
  const double a = std::log(1.2);
  for (Eigen::Index c = 0; c < n; ++c) {
    const double sign = (c % 2 == 0) ? 1.0 : -1.0;
    spec.bias_coeffs(c, 1) = sign * 0.55 * a;   // x mode
    spec.bias_coeffs(c, 2) = -sign * 0.30 * a;  // y mode
    spec.bias_coeffs(c, 4) = sign * 0.15 * a;   // z mode
  }
  return spec;
}

void PhantomSpec::validate() const {
  grid.validate();
  if (num_labels != 4)
    throw std::invalid_argument("phantom geometry defines exactly 4 labels");
  const auto n = static_cast<Eigen::Index>(contrasts.size());
  if (n < 1) throw std::invalid_argument("phantom needs >= 1 contrast");
  if (class_means.rows() != 4 || class_means.cols() != n)
    throw std::invalid_argument("class_means must be K x N");
  if (class_covs.size() != 4)
    throw std::invalid_argument("class_covs must have K entries");
  for (const auto& cov : class_covs) {
    if (cov.rows() != n || cov.cols() != n)
      throw std::invalid_argument("class covariance dimension mismatch");
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("class covariance not SPD");
  }
  if (lesion_mean.size() != n || lesion_cov.rows() != n || lesion_cov.cols() != n)
    throw std::invalid_argument("lesion parameter dimension mismatch");
  if (Eigen::LLT<Eigen::MatrixXd>(lesion_cov).info() != Eigen::Success)
    throw std::invalid_argument("lesion covariance not SPD");
  if (lesion_count < 0 || outlier_count < 0)
    throw std::invalid_argument("negative lesion/outlier count");
  if (lesion_count > 0 && !(lesion_radius_min_mm > 0.0 &&
                            lesion_radius_max_mm >= lesion_radius_min_mm))
    throw std::invalid_argument("bad lesion radius range");
  const auto p = static_cast<Eigen::Index>(
      static_cast<std::size_t>(bias_order[0]) * bias_order[1] * bias_order[2]);
  if (bias_coeffs.rows() != n || bias_coeffs.cols() != p)
    throw std::invalid_argument("bias coefficient dimension mismatch");
}

PhantomOutput generate(const PhantomSpec& spec) {
  spec.validate();
  const VolumeGrid& grid = spec.grid;
  const std::size_t voxels = grid.voxel_count();
  const std::size_t n = spec.contrasts.size();

  PhantomOutput out;
  out.spec = spec;
  out.labels.grid = grid;
  out.labels.labels.assign(voxels, kBackground);
  out.lesions.grid = grid;
  out.lesions.mask.assign(voxels, 0);

  // Nested ellipsoid shells around the volume center (index space).
  const Eigen::Vector3d center(0.5 * (grid.dims[0] - 1.0), 0.5 * (grid.dims[1] - 1.0),
                               0.5 * (grid.dims[2] - 1.0));
  auto shell_r2 = [&](const Eigen::Vector3d& p, const std::array<double, 3>& frac) {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double semi = frac[a] * 0.5 * grid.dims[a];
      const double d = (p[a] - center[a]) / semi;
      s += d * d;
    }
    return s;
  };
  std::size_t i = 0;
  for (std::uint32_t z = 0; z < grid.dims[2]; ++z) {
    for (std::uint32_t y = 0; y < grid.dims[1]; ++y) {
      for (std::uint32_t x = 0; x < grid.dims[0]; ++x, ++i) {
        const Eigen::Vector3d p(x, y, z);
        if (shell_r2(p, spec.wm_fraction) <= 1.0)
          out.labels.labels[i] = kWm;
        else if (shell_r2(p, spec.gm_fraction) <= 1.0)
          out.labels.labels[i] = kGm;
        else if (shell_r2(p, spec.csf_fraction) <= 1.0)
          out.labels.labels[i] = kCsf;
      }
    }
  }

  Rng rng(spec.seed);

  // Spherical lesions fully inside white matter, non-overlapping.
  std::vector<std::size_t> wm_voxels;
  for (std::size_t v = 0; v < voxels; ++v)
    if (out.labels.labels[v] == kWm) wm_voxels.push_back(v);
  if (spec.lesion_count > 0 && wm_voxels.empty())
    throw std::invalid_argument("phantom: no white matter to place lesions in");

  const double voxel_mm = std::min({grid.voxel_size[0], grid.voxel_size[1],
                                    grid.voxel_size[2]});
  int placed = 0, attempts = 0;
  const int max_attempts = 1000 * std::max(1, spec.lesion_count);
  while (placed < spec.lesion_count) {
    if (++attempts > max_attempts)
      throw std::invalid_argument("phantom: lesion spec unsatisfiable");
    const std::size_t pick = static_cast<std::size_t>(
        rng.uniform() * static_cast<double>(wm_voxels.size()));
    const std::size_t c_flat = wm_voxels[std::min(pick, wm_voxels.size() - 1)];
    const std::uint32_t cx = static_cast<std::uint32_t>(c_flat % grid.dims[0]);
    const std::uint32_t cy =
        static_cast<std::uint32_t>((c_flat / grid.dims[0]) % grid.dims[1]);
    const std::uint32_t cz =
        static_cast<std::uint32_t>(c_flat / (static_cast<std::size_t>(grid.dims[0]) *
                                             grid.dims[1]));
    const double radius =
        rng.uniform_range(spec.lesion_radius_min_mm, spec.lesion_radius_max_mm);

    const int reach = static_cast<int>(std::ceil(radius / voxel_mm)) + 1;
    std::vector<std::size_t> sphere;
    bool ok = true;
    const Eigen::Vector3d c_world = grid.voxel_center_world(cx, cy, cz);
    for (int dz = -reach; dz <= reach && ok; ++dz) {
      for (int dy = -reach; dy <= reach && ok; ++dy) {
        for (int dx = -reach; dx <= reach && ok; ++dx) {
          const std::int64_t x = static_cast<std::int64_t>(cx) + dx;
          const std::int64_t y = static_cast<std::int64_t>(cy) + dy;
          const std::int64_t z = static_cast<std::int64_t>(cz) + dz;
          if (x < 0 || y < 0 || z < 0 || x >= grid.dims[0] || y >= grid.dims[1] ||
              z >= grid.dims[2]) {
            continue;
          }
          const Eigen::Vector3d w = grid.voxel_center_world(
              static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
          if ((w - c_world).norm() > radius) continue;
          const std::size_t f = grid.flat_index(static_cast<std::size_t>(x),
                                                static_cast<std::size_t>(y),
                                                static_cast<std::size_t>(z));
          if (out.labels.labels[f] != kWm || out.lesions.mask[f]) {
            ok = false;
            break;
          }
          sphere.push_back(f);
        }
      }
    }
    if (!ok || sphere.empty()) continue;
    for (std::size_t f : sphere) out.lesions.mask[f] = 1;
    out.placed_lesions.push_back(
        {{static_cast<double>(cx), static_cast<double>(cy), static_cast<double>(cz)},
         radius});
    ++placed;
  }

  // Lesion-intensity lookalikes on isolated non-lesion WM voxels.
  for (int o = 0; o < spec.outlier_count; ++o) {
    for (int tries = 0; tries < 1000; ++tries) {
      const std::size_t pick = static_cast<std::size_t>(
          rng.uniform() * static_cast<double>(wm_voxels.size()));
      const std::size_t f = wm_voxels[std::min(pick, wm_voxels.size() - 1)];
      if (out.lesions.mask[f]) continue;
      if (std::find(out.outlier_voxels.begin(), out.outlier_voxels.end(), f) !=
          out.outlier_voxels.end())
        continue;
      out.outlier_voxels.push_back(f);
      break;
    }
  }

  // Log-domain intensities: class Gaussian draw plus bias.
  out.image = MultiContrastImage::zeros(grid, spec.contrasts);
  out.image.log_domain = true;
  std::vector<Eigen::MatrixXd> chol;
  for (const auto& cov : spec.class_covs)
    chol.push_back(Eigen::LLT<Eigen::MatrixXd>(cov).matrixL());
  const Eigen::MatrixXd lesion_chol =
      Eigen::LLT<Eigen::MatrixXd>(spec.lesion_cov).matrixL();

  const BiasBasis basis = eval_bias_basis(grid, spec.bias_order);
  std::vector<bool> is_outlier(voxels, false);
  for (std::size_t f : out.outlier_voxels) is_outlier[f] = true;

  Eigen::VectorXd eps(static_cast<Eigen::Index>(n));
  for (std::size_t v = 0; v < voxels; ++v) {
    for (std::size_t c = 0; c < n; ++c) eps[static_cast<Eigen::Index>(c)] = rng.normal();
    Eigen::VectorXd d;
    if (out.lesions.mask[v] || is_outlier[v]) {
      d = out.spec.lesion_mean + lesion_chol * eps;
    } else {
      const int k = out.labels.labels[v] - 1;
      d = out.spec.class_means.row(k).transpose() + chol[k] * eps;
    }
    const double* phi = basis.row(v);
    for (std::size_t c = 0; c < n; ++c) {
      double bias = 0.0;
      for (Eigen::Index p = 0; p < spec.bias_coeffs.cols(); ++p)
        bias += spec.bias_coeffs(static_cast<Eigen::Index>(c), p) * phi[p];
      out.image.at(c, v) = d[static_cast<Eigen::Index>(c)] + bias;
    }
  }
  return out;
}

void PhantomOutput::save_truth_json(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["dims"] = {spec.grid.dims[0], spec.grid.dims[1], spec.grid.dims[2]};
  j["voxel_size"] = {spec.grid.voxel_size[0], spec.grid.voxel_size[1],
                     spec.grid.voxel_size[2]};
  j["num_labels"] = spec.num_labels;
  std::vector<std::string> contrast_names;
  for (ContrastTag t : spec.contrasts) contrast_names.push_back(contrast_name(t));
  j["contrasts"] = contrast_names;
  j["seed"] = spec.seed;
  j["class_means_log"] = matrix_to_json(spec.class_means);
  nlohmann::json covs = nlohmann::json::array();
  for (const auto& cov : spec.class_covs) covs.push_back(matrix_to_json(cov));
  j["class_covs_log"] = covs;
  j["lesion_mean_log"] = matrix_to_json(spec.lesion_mean.transpose());
  j["lesion_cov_log"] = matrix_to_json(spec.lesion_cov);
  j["bias_order"] = {spec.bias_order[0], spec.bias_order[1], spec.bias_order[2]};
  j["bias_coeffs"] = matrix_to_json(spec.bias_coeffs);
  j["wm_label"] = kWm;
  j["gm_label"] = kGm;
  nlohmann::json lesions_json = nlohmann::json::array();
  for (const auto& l : placed_lesions) {
    nlohmann::json lj;
    lj["center_voxel"] = {l.center_voxel[0], l.center_voxel[1], l.center_voxel[2]};
    lj["radius_mm"] = l.radius_mm;
    lesions_json.push_back(lj);
  }
  j["lesions"] = lesions_json;
  j["lesion_voxel_count"] = lesions.count();
  j["outlier_voxels"] = outlier_voxels;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write truth json: " + path.string());
  os << j.dump(2) << "\n";
}

}  // namespace lesionseg
