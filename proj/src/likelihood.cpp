#include "lesionseg/likelihood.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace lesionseg {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_spd(const Eigen::MatrixXd& cov, const std::string& what) {
  if (cov.rows() != cov.cols())
    throw std::invalid_argument(what + ": covariance not square");
  if (!cov.allFinite()) throw std::invalid_argument(what + ": non-finite covariance");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + cov.cwiseAbs().maxCoeff()))
    throw std::invalid_argument(what + ": covariance not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument(what + ": covariance not positive definite");
}

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("parameter file truncated");
  return v;
}

}  // namespace

std::size_t ClassSharingMap::total_components() const {
  return std::accumulate(components_per_class.begin(), components_per_class.end(),
                         std::size_t{0});
}

std::size_t ClassSharingMap::component_offset(std::size_t g) const {
  std::size_t off = 0;
  for (std::size_t j = 0; j < g; ++j) off += components_per_class[j];
  return off;
}

void ClassSharingMap::validate() const {
  const std::size_t g_count = num_classes();
  if (g_count == 0) throw std::invalid_argument("sharing map has no classes");
  if (label_to_class.empty()) throw std::invalid_argument("sharing map has no labels");
  for (std::uint32_t g : label_to_class)
    if (g >= g_count) throw std::invalid_argument("label mapped to invalid class");
  if (mixture_weights.size() != g_count)
    throw std::invalid_argument("mixture weight rows != class count");
  for (std::size_t g = 0; g < g_count; ++g) {
    if (components_per_class[g] == 0)
      throw std::invalid_argument("class with zero components");
    if (mixture_weights[g].size() != components_per_class[g])
      throw std::invalid_argument("mixture weight count mismatch");
    double sum = 0.0;
    for (double w : mixture_weights[g]) {
      if (w < 0.0) throw std::invalid_argument("negative mixture weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw std::invalid_argument("mixture weights must sum to 1");
  }
  // Every class must be reachable from some label.
  std::vector<bool> seen(g_count, false);
  for (std::uint32_t g : label_to_class) seen[g] = true;
  for (std::size_t g = 0; g < g_count; ++g)
    if (!seen[g]) throw std::invalid_argument("class not referenced by any label");
  if (wm_class >= static_cast<std::int32_t>(g_count) ||
      gm_class >= static_cast<std::int32_t>(g_count))
    throw std::invalid_argument("wm/gm class out of range");
  if (!class_names.empty() && class_names.size() != g_count)
    throw std::invalid_argument("class name count mismatch");
}

ClassSharingMap ClassSharingMap::identity(std::size_t k) {
  ClassSharingMap m;
  m.label_to_class.resize(k);
  for (std::size_t i = 0; i < k; ++i) m.label_to_class[i] = static_cast<std::uint32_t>(i);
  m.components_per_class.assign(k, 1);
  m.mixture_weights.assign(k, {1.0});
  return m;
}

ClassSharingMap ClassSharingMap::from_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open sharing map: " + path.string());
  nlohmann::json j;
  is >> j;
  ClassSharingMap m;
  m.label_to_class = j.at("label_to_class").get<std::vector<std::uint32_t>>();
  m.components_per_class = j.at("components_per_class").get<std::vector<std::uint32_t>>();
  if (j.contains("mixture_weights")) {
    m.mixture_weights = j.at("mixture_weights").get<std::vector<std::vector<double>>>();
  } else {
    for (std::uint32_t c : m.components_per_class)
      m.mixture_weights.emplace_back(c, 1.0 / c);
  }
  m.wm_class = j.value("wm_class", -1);
  m.gm_class = j.value("gm_class", -1);
  if (j.contains("class_names"))
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
  m.validate();
  return m;
}

void ClassSharingMap::save_json(const std::filesystem::path& path) const {
  validate();
  nlohmann::json j;
  j["label_to_class"] = label_to_class;
  j["components_per_class"] = components_per_class;
  j["mixture_weights"] = mixture_weights;
  j["wm_class"] = wm_class;
  j["gm_class"] = gm_class;
  if (!class_names.empty()) j["class_names"] = class_names;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write sharing map: " + path.string());
  os << j.dump(2) << "\n";
}

BiasBasis eval_bias_basis(const VolumeGrid& grid, std::array<std::uint32_t, 3> order) {
  grid.validate();
  for (int a = 0; a < 3; ++a) {
    if (order[a] < 1) throw std::invalid_argument("bias basis order must be >= 1");
    if (order[a] > grid.dims[a])
      throw std::invalid_argument("bias basis order exceeds grid dimension");
  }
  BiasBasis basis;
  basis.order = order;
  basis.n_functions =
      static_cast<std::size_t>(order[0]) * order[1] * order[2];

  // Per-axis DCT-II tables: table[axis][p * dim + x].
  std::array<std::vector<double>, 3> tables;
  for (int a = 0; a < 3; ++a) {
    const std::uint32_t dim = grid.dims[a];
    tables[a].resize(static_cast<std::size_t>(order[a]) * dim);
    for (std::uint32_t p = 0; p < order[a]; ++p)
      for (std::uint32_t x = 0; x < dim; ++x)
        tables[a][p * dim + x] =
            std::cos(kPi * p * (2.0 * x + 1.0) / (2.0 * dim));
  }

  const std::size_t voxels = grid.voxel_count();
  basis.values.resize(voxels * basis.n_functions);
  std::size_t i = 0;
  for (std::uint32_t z = 0; z < grid.dims[2]; ++z) {
    for (std::uint32_t y = 0; y < grid.dims[1]; ++y) {
      for (std::uint32_t x = 0; x < grid.dims[0]; ++x, ++i) {
        double* row = basis.values.data() + i * basis.n_functions;
        std::size_t p = 0;
        for (std::uint32_t pz = 0; pz < order[2]; ++pz) {
          const double bz = tables[2][pz * grid.dims[2] + z];
          for (std::uint32_t py = 0; py < order[1]; ++py) {
            const double byz = tables[1][py * grid.dims[1] + y] * bz;
            for (std::uint32_t px = 0; px < order[0]; ++px, ++p)
              row[p] = tables[0][px * grid.dims[0] + x] * byz;
          }
        }
      }
    }
  }
  return basis;
}

void AppearanceParams::validate(const ClassSharingMap& sharing) const {
  sharing.validate();
  if (components.size() != sharing.total_components())
    throw std::invalid_argument("component count mismatch with sharing map");
  const std::size_t n = n_contrasts();
  if (n == 0) throw std::invalid_argument("appearance params empty");
  for (const auto& comp : components) {
    if (static_cast<std::size_t>(comp.mean.size()) != n)
      throw std::invalid_argument("mean dimension mismatch");
    if (!comp.mean.allFinite()) throw std::invalid_argument("non-finite mean");
    check_spd(comp.cov, "appearance component");
    if (diagonal_mode) {
      for (int r = 0; r < comp.cov.rows(); ++r)
        for (int c = 0; c < comp.cov.cols(); ++c)
          if (r != c && comp.cov(r, c) != 0.0)
            throw std::invalid_argument("diagonal mode with off-diagonal covariance");
    }
  }
  if (static_cast<std::size_t>(bias_coeffs.rows()) != n)
    throw std::invalid_argument("bias coefficient row count != contrast count");
}

double component_log_likelihood(const Eigen::VectorXd& d, const GaussianComponent& comp,
                                const Eigen::MatrixXd& bias_coeffs,
                                const Eigen::VectorXd& phi) {
  const int n = static_cast<int>(d.size());
  Eigen::VectorXd mean = comp.mean;
  if (bias_coeffs.size() > 0) mean += bias_coeffs * phi;
  Eigen::LLT<Eigen::MatrixXd> llt(comp.cov);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("component_log_likelihood: covariance not SPD");
  const Eigen::VectorXd v = d - mean;
  const Eigen::VectorXd w = llt.matrixL().solve(v);
  double logdet = 0.0;
  for (int k = 0; k < n; ++k) logdet += 2.0 * std::log(llt.matrixL()(k, k));
  return -0.5 * (n * std::log(2.0 * kPi) + logdet + w.squaredNorm());
}

GaussianEvaluator::GaussianEvaluator(const GaussianComponent& comp) : mean_(comp.mean) {
  Eigen::LLT<Eigen::MatrixXd> llt(comp.cov);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("GaussianEvaluator: covariance not SPD");
  const int n = static_cast<int>(comp.mean.size());
  inv_ = llt.solve(Eigen::MatrixXd::Identity(n, n));
  double logdet = 0.0;
  for (int k = 0; k < n; ++k) logdet += 2.0 * std::log(llt.matrixL()(k, k));
  log_norm_ = -0.5 * (n * std::log(2.0 * kPi) + logdet);
}

void LesionIntensityPrior::validate() const {
  if (!(kappa > 1.0)) throw std::invalid_argument("kappa must be > 1");
  if (!(nu_base >= 0.0)) throw std::invalid_argument("nu must be >= 0");
}

double log_multivariate_gamma(int n, double a) {
  double v = 0.25 * n * (n - 1) * std::log(kPi);
  for (int j = 1; j <= n; ++j) v += std::lgamma(a + 0.5 * (1.0 - j));
  return v;
}

double niw_log_density(const Eigen::VectorXd& mu_les, const Eigen::MatrixXd& sigma_les,
                       const Eigen::VectorXd& mu_wm, const Eigen::MatrixXd& sigma_wm,
                       double nu, double kappa) {
  if (nu == 0.0) return 0.0;  // flat-prior regime
  const int n = static_cast<int>(mu_les.size());
  if (!(nu > n + 1))
    throw std::invalid_argument("niw_log_density: nu must be 0 or > N+1");
  check_spd(sigma_les, "niw lesion");
  check_spd(sigma_wm, "niw white matter");

  // Degrees of freedom in the standard parameterization; the stated dof
  // nu-N-2 corresponds to a density exponent -(nu)/2 on |Sigma_les|, i.e.
  // standard dof nu-N-1.
  const double dof = nu - n - 1;
  const Eigen::MatrixXd psi = kappa * nu * sigma_wm;

  Eigen::LLT<Eigen::MatrixXd> llt_les(sigma_les);
  Eigen::LLT<Eigen::MatrixXd> llt_psi(psi);
  double logdet_les = 0.0, logdet_psi = 0.0;
  for (int k = 0; k < n; ++k) {
    logdet_les += 2.0 * std::log(llt_les.matrixL()(k, k));
    logdet_psi += 2.0 * std::log(llt_psi.matrixL()(k, k));
  }
  const Eigen::MatrixXd les_inv = llt_les.solve(Eigen::MatrixXd::Identity(n, n));

  double log_iw = 0.5 * dof * logdet_psi - 0.5 * dof * n * std::log(2.0) -
                  log_multivariate_gamma(n, 0.5 * dof) -
                  0.5 * (dof + n + 1) * logdet_les -
                  0.5 * (psi * les_inv).trace();

  const Eigen::VectorXd dv = mu_les - mu_wm;
  double log_normal = -0.5 * n * std::log(2.0 * kPi) + 0.5 * n * std::log(nu) -
                      0.5 * logdet_les - 0.5 * nu * dv.dot(les_inv * dv);
  return log_iw + log_normal;
}

void save_params(const std::filesystem::path& path, const AppearanceParams& params,
                 const ClassSharingMap& sharing) {
  params.validate(sharing);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write params: " + path.string());
  os.write("PRMS", 4);
  write_pod<std::uint32_t>(os, 1);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sharing.num_labels()));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sharing.num_classes()));
  for (std::uint32_t m : sharing.components_per_class) write_pod(os, m);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.n_contrasts()));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.bias_coeffs.cols()));
  for (std::uint32_t v : sharing.label_to_class) write_pod(os, v);
  for (const auto& row : sharing.mixture_weights)
    for (double w : row) write_pod(os, w);
  write_pod<std::int32_t>(os, sharing.wm_class);
  write_pod<std::int32_t>(os, sharing.gm_class);
  for (const auto& comp : params.components) {
    for (int i = 0; i < comp.mean.size(); ++i) write_pod(os, comp.mean[i]);
    for (int r = 0; r < comp.cov.rows(); ++r)
      for (int c = 0; c < comp.cov.cols(); ++c) write_pod(os, comp.cov(r, c));
  }
  for (int r = 0; r < params.bias_coeffs.rows(); ++r)
    for (int c = 0; c < params.bias_coeffs.cols(); ++c)
      write_pod(os, params.bias_coeffs(r, c));
  write_pod<std::uint8_t>(os, params.diagonal_mode ? 1 : 0);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::pair<AppearanceParams, ClassSharingMap> load_params(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open params: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PRMS", 4) != 0)
    throw std::runtime_error("not a parameter dump: " + path.string());
  if (read_pod<std::uint32_t>(is) != 1)
    throw std::runtime_error("unsupported parameter dump version");
  ClassSharingMap sharing;
  const auto k = read_pod<std::uint32_t>(is);
  const auto g = read_pod<std::uint32_t>(is);
  sharing.components_per_class.resize(g);
  for (auto& m : sharing.components_per_class) m = read_pod<std::uint32_t>(is);
  const auto n = read_pod<std::uint32_t>(is);
  const auto p = read_pod<std::uint32_t>(is);
  sharing.label_to_class.resize(k);
  for (auto& v : sharing.label_to_class) v = read_pod<std::uint32_t>(is);
  sharing.mixture_weights.resize(g);
  for (std::size_t gi = 0; gi < g; ++gi) {
    sharing.mixture_weights[gi].resize(sharing.components_per_class[gi]);
    for (double& w : sharing.mixture_weights[gi]) w = read_pod<double>(is);
  }
  sharing.wm_class = read_pod<std::int32_t>(is);
  sharing.gm_class = read_pod<std::int32_t>(is);
  AppearanceParams params;
  params.components.resize(sharing.total_components());
  for (auto& comp : params.components) {
    comp.mean.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) comp.mean[i] = read_pod<double>(is);
    comp.cov.resize(n, n);
    for (std::uint32_t r = 0; r < n; ++r)
      for (std::uint32_t c = 0; c < n; ++c) comp.cov(r, c) = read_pod<double>(is);
  }
  params.bias_coeffs.resize(n, p);
  for (std::uint32_t r = 0; r < n; ++r)
    for (std::uint32_t c = 0; c < p; ++c) params.bias_coeffs(r, c) = read_pod<double>(is);
  params.diagonal_mode = read_pod<std::uint8_t>(is) != 0;
  params.validate(sharing);
  return {std::move(params), std::move(sharing)};
}

}  // namespace lesionseg
