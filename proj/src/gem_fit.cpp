#include "lesionseg/gem_fit.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "lesionseg/logging.hpp"
#include "lesionseg/parallel.hpp"

namespace lesionseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double mean_data_variance(const MultiContrastImage& image) {
  const std::size_t voxels = image.grid.voxel_count();
  double total = 0.0;
  for (std::size_t c = 0; c < image.n_channels; ++c) {
    const double* d = image.channel_data(c);
    double mean = 0.0;
    for (std::size_t i = 0; i < voxels; ++i) mean += d[i];
    mean /= static_cast<double>(voxels);
    double var = 0.0;
    for (std::size_t i = 0; i < voxels; ++i) var += (d[i] - mean) * (d[i] - mean);
    total += var / static_cast<double>(voxels);
  }
  return total / static_cast<double>(image.n_channels);
}

// Per-voxel class-aggregated prior mass: pg[g] = sum over labels of class g.
void aggregate_class_prior(const double* prior_row, const ClassSharingMap& sharing,
                           double* pg) {
  const std::size_t g_count = sharing.num_classes();
  for (std::size_t g = 0; g < g_count; ++g) pg[g] = 0.0;
  for (std::size_t k = 0; k < sharing.num_labels(); ++k)
    pg[sharing.label_to_class[k]] += prior_row[k];
}

struct ComponentTable {
  std::vector<GaussianEvaluator> evals;       // per flat component
  std::vector<std::uint32_t> comp_class;      // class index per flat component
  std::vector<double> log_weight;             // ln mixture weight per flat component
};

ComponentTable build_component_table(const ClassSharingMap& sharing,
                                     const AppearanceParams& params) {
  ComponentTable t;
  const std::size_t total = sharing.total_components();
  t.evals.reserve(total);
  t.comp_class.reserve(total);
  t.log_weight.reserve(total);
  for (std::size_t g = 0; g < sharing.num_classes(); ++g) {
    for (std::size_t m = 0; m < sharing.components_per_class[g]; ++m) {
      const std::size_t c = sharing.component_offset(g) + m;
      t.evals.emplace_back(params.components[c]);
      t.comp_class.push_back(static_cast<std::uint32_t>(g));
      const double w = sharing.mixture_weights[g][m];
      t.log_weight.push_back(w > 0.0 ? std::log(w) : -kInf);
    }
  }
  return t;
}

void corrected_intensity(const MultiContrastImage& image, const Eigen::MatrixXd& c,
                         const BiasBasis& basis, std::size_t i, Eigen::VectorXd& out) {
  const std::size_t n = image.n_channels;
  const double* phi = basis.row(i);
  for (std::size_t ch = 0; ch < n; ++ch) {
    double bias = 0.0;
    const Eigen::Index cols = c.cols();
    for (Eigen::Index p = 0; p < cols; ++p)
      bias += c(static_cast<Eigen::Index>(ch), p) * phi[p];
    out[static_cast<Eigen::Index>(ch)] = image.at(ch, i) - bias;
  }
}

void check_fit_inputs(const MultiContrastImage& image, const std::vector<double>& prior,
                      const ClassSharingMap& sharing, const AppearanceParams& params,
                      const BiasBasis& basis) {
  const std::size_t voxels = image.grid.voxel_count();
  if (prior.size() != voxels * sharing.num_labels())
    throw std::invalid_argument("prior matrix size mismatch");
  if (params.n_contrasts() != image.n_channels)
    throw std::invalid_argument("parameter contrast count mismatch");
  if (basis.values.size() != voxels * basis.n_functions)
    throw std::invalid_argument("bias basis size mismatch");
  if (static_cast<std::size_t>(params.bias_coeffs.cols()) != basis.n_functions)
    throw std::invalid_argument("bias coefficient column count mismatch");
}

struct CoupledSpec {
  bool active = false;
  std::size_t wm_component = 0;
  std::size_t lesion_component = 0;
  double nu = 0.0;
  double kappa = 0.0;
};

void update_gaussians(const MultiContrastImage& image, const SoftAssignments& w,
                      const BiasBasis& basis, AppearanceParams& params,
                      double ridge_scale, bool diagonal_mode, const CoupledSpec& coupled) {
  const auto moments = weighted_moments(image, w, basis, params.bias_coeffs);
  const double lambda = ridge_scale * mean_data_variance(image);
  const std::size_t n = image.n_channels;
  const Eigen::MatrixXd ridge =
      lambda * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n),
                                         static_cast<Eigen::Index>(n));
  const double vanish_threshold =
      1e-10 * static_cast<double>(image.grid.voxel_count());

  auto plain_update = [&](std::size_t c) {
    const auto& mom = moments[c];
    if (mom.n < vanish_threshold) {
      log_warn("component ", c, " vanished (mass ", mom.n, "); keeping parameters");
      return;
    }
    params.components[c].mean = mom.m;
    Eigen::MatrixXd cov = mom.v + ridge;
    if (diagonal_mode) {
      const Eigen::VectorXd d = cov.diagonal();
      cov = d.asDiagonal();
    }
    params.components[c].cov = cov;
  };

  const bool couple = coupled.active && coupled.nu > 0.0;
  for (std::size_t c = 0; c < moments.size(); ++c) {
    if (couple && (c == coupled.wm_component || c == coupled.lesion_component)) continue;
    plain_update(c);
  }
  if (couple) {
    CoupledParams cur{params.components[coupled.wm_component].mean,
                      params.components[coupled.lesion_component].mean,
                      params.components[coupled.wm_component].cov,
                      params.components[coupled.lesion_component].cov};
    CoupledParams next =
        lesion_coupled_update(moments[coupled.wm_component], moments[coupled.lesion_component],
                              cur, coupled.nu, coupled.kappa, lambda);
    if (diagonal_mode) {
      const Eigen::VectorXd dw = next.sigma_wm.diagonal();
      const Eigen::VectorXd dl = next.sigma_les.diagonal();
      next.sigma_wm = dw.asDiagonal();
      next.sigma_les = dl.asDiagonal();
    }
    params.components[coupled.wm_component].mean = next.mu_wm;
    params.components[coupled.wm_component].cov = next.sigma_wm;
    params.components[coupled.lesion_component].mean = next.mu_les;
    params.components[coupled.lesion_component].cov = next.sigma_les;
  }
}

// Symmetric matrix square root of an SPD matrix.
Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

void FitConfig::validate() const {
  if (max_outer_iters < 1 || gem_iters_per_outer < 1)
    throw std::invalid_argument("iteration caps must be >= 1");
  if (deformation_max_steps < 0 || deformation_memory < 1)
    throw std::invalid_argument("bad deformation optimizer configuration");
  if (!(convergence_tol > 0.0)) throw std::invalid_argument("tolerance must be > 0");
  if (!(covariance_ridge_scale >= 0.0))
    throw std::invalid_argument("ridge scale must be >= 0");
  for (std::uint32_t o : bias_order)
    if (o < 1) throw std::invalid_argument("bias order must be >= 1 per axis");
}

void save_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write trace: " + path.string());
  os << "iteration,phase,objective\n";
  char buf[64];
  for (const auto& row : trace) {
    std::snprintf(buf, sizeof(buf), "%.17g", row.objective);
    os << row.iteration << "," << row.phase << "," << buf << "\n";
  }
}

SoftAssignments e_step(const MultiContrastImage& image, const std::vector<double>& prior,
                       const ClassSharingMap& sharing, const AppearanceParams& params,
                       const BiasBasis& basis) {
  check_fit_inputs(image, prior, sharing, params, basis);
  const std::size_t voxels = image.grid.voxel_count();
  const std::size_t k_count = sharing.num_labels();
  const std::size_t g_count = sharing.num_classes();
  const std::size_t total = sharing.total_components();
  const ComponentTable table = build_component_table(sharing, params);

  SoftAssignments w;
  w.n_voxels = voxels;
  w.n_columns = total;
  w.w.assign(voxels * total, 0.0);

  std::vector<std::int64_t> bad_voxel(block_count(voxels), -1);
  parallel_blocks(voxels, [&](std::size_t block, std::size_t begin, std::size_t end) {
    Eigen::VectorXd d(static_cast<Eigen::Index>(image.n_channels));
    std::vector<double> pg(g_count);
    std::vector<double> lognum(total);
    for (std::size_t i = begin; i < end; ++i) {
      corrected_intensity(image, params.bias_coeffs, basis, i, d);
      aggregate_class_prior(prior.data() + i * k_count, sharing, pg.data());
      double max_log = -kInf;
      for (std::size_t c = 0; c < total; ++c) {
        const double p = pg[table.comp_class[c]];
        lognum[c] = (p > 0.0 ? std::log(p) : -kInf) + table.log_weight[c] +
                    table.evals[c].log_density(d);
        max_log = std::max(max_log, lognum[c]);
      }
      if (!(max_log > -kInf)) {
        if (bad_voxel[block] < 0) bad_voxel[block] = static_cast<std::int64_t>(i);
        continue;
      }
      double sum = 0.0;
      double* row = w.w.data() + i * total;
      for (std::size_t c = 0; c < total; ++c) {
        row[c] = std::exp(lognum[c] - max_log);
        sum += row[c];
      }
      for (std::size_t c = 0; c < total; ++c) row[c] /= sum;
    }
  });
  for (std::int64_t bad : bad_voxel)
    if (bad >= 0)
      throw std::runtime_error("e_step: zero posterior mass at voxel " +
                               std::to_string(bad));
  return w;
}

std::vector<double> label_posteriors(const MultiContrastImage& image,
                                     const std::vector<double>& prior,
                                     const ClassSharingMap& sharing,
                                     const AppearanceParams& params,
                                     const BiasBasis& basis) {
  check_fit_inputs(image, prior, sharing, params, basis);
  const std::size_t voxels = image.grid.voxel_count();
  const std::size_t k_count = sharing.num_labels();
  const std::size_t g_count = sharing.num_classes();
  const ComponentTable table = build_component_table(sharing, params);

  std::vector<double> post(voxels * k_count, 0.0);
  std::vector<std::int64_t> bad_voxel(block_count(voxels), -1);
  parallel_blocks(voxels, [&](std::size_t block, std::size_t begin, std::size_t end) {
    Eigen::VectorXd d(static_cast<Eigen::Index>(image.n_channels));
    std::vector<double> class_loglik(g_count);
    std::vector<double> comp_log(table.evals.size());
    for (std::size_t i = begin; i < end; ++i) {
      corrected_intensity(image, params.bias_coeffs, basis, i, d);
      // Mixture log-likelihood per class.
      double max_comp = -kInf;
      for (std::size_t c = 0; c < table.evals.size(); ++c) {
        comp_log[c] = table.log_weight[c] + table.evals[c].log_density(d);
        max_comp = std::max(max_comp, comp_log[c]);
      }
      for (std::size_t g = 0; g < g_count; ++g) class_loglik[g] = 0.0;
      for (std::size_t c = 0; c < table.evals.size(); ++c)
        class_loglik[table.comp_class[c]] += std::exp(comp_log[c] - max_comp);
      const double* prow = prior.data() + i * k_count;
      double* orow = post.data() + i * k_count;
      double z = 0.0;
      for (std::size_t k = 0; k < k_count; ++k) {
        orow[k] = prow[k] * class_loglik[sharing.label_to_class[k]];
        z += orow[k];
      }
      if (!(z > 0.0)) {
        if (bad_voxel[block] < 0) bad_voxel[block] = static_cast<std::int64_t>(i);
        continue;
      }
      for (std::size_t k = 0; k < k_count; ++k) orow[k] /= z;
    }
  });
  for (std::int64_t bad : bad_voxel)
    if (bad >= 0)
      throw std::runtime_error("label_posteriors: zero mass at voxel " +
                               std::to_string(bad));
  return post;
}

double data_log_likelihood(const MultiContrastImage& image, const std::vector<double>& prior,
                           const ClassSharingMap& sharing, const AppearanceParams& params,
                           const BiasBasis& basis) {
  check_fit_inputs(image, prior, sharing, params, basis);
  const std::size_t voxels = image.grid.voxel_count();
  const std::size_t k_count = sharing.num_labels();
  const std::size_t g_count = sharing.num_classes();
  const std::size_t total = sharing.total_components();
  const ComponentTable table = build_component_table(sharing, params);

  return parallel_block_sum(voxels, [&](std::size_t begin, std::size_t end) {
    Eigen::VectorXd d(static_cast<Eigen::Index>(image.n_channels));
    std::vector<double> pg(g_count);
    std::vector<double> lognum(total);
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      corrected_intensity(image, params.bias_coeffs, basis, i, d);
      aggregate_class_prior(prior.data() + i * k_count, sharing, pg.data());
      double max_log = -kInf;
      for (std::size_t c = 0; c < total; ++c) {
        const double p = pg[table.comp_class[c]];
        lognum[c] = (p > 0.0 ? std::log(p) : -kInf) + table.log_weight[c] +
                    table.evals[c].log_density(d);
        max_log = std::max(max_log, lognum[c]);
      }
      double sum = 0.0;
      for (std::size_t c = 0; c < total; ++c) sum += std::exp(lognum[c] - max_log);
      acc += max_log + std::log(sum);
    }
    return acc;
  });
}

std::vector<ComponentMoments> weighted_moments(const MultiContrastImage& image,
                                               const SoftAssignments& w,
                                               const BiasBasis& basis,
                                               const Eigen::MatrixXd& bias_coeffs) {
  const std::size_t voxels = image.grid.voxel_count();
  if (w.n_voxels != voxels) throw std::invalid_argument("assignment size mismatch");
  const std::size_t n = image.n_channels;
  const std::size_t comps = w.n_columns;
  const std::size_t stride = 1 + n + n * n;  // mass, first moment, second moment

  const std::size_t blocks = block_count(voxels);
  std::vector<double> partial(blocks * comps * stride, 0.0);
  parallel_blocks(voxels, [&](std::size_t block, std::size_t begin, std::size_t end) {
    double* acc = partial.data() + block * comps * stride;
    Eigen::VectorXd d(static_cast<Eigen::Index>(n));
    for (std::size_t i = begin; i < end; ++i) {
      corrected_intensity(image, bias_coeffs, basis, i, d);
      const double* row = w.row(i);
      for (std::size_t c = 0; c < comps; ++c) {
        const double wi = row[c];
        if (wi == 0.0) continue;
        double* a = acc + c * stride;
        a[0] += wi;
        for (std::size_t u = 0; u < n; ++u) {
          const double wd = wi * d[static_cast<Eigen::Index>(u)];
          a[1 + u] += wd;
          for (std::size_t v = 0; v < n; ++v)
            a[1 + n + u * n + v] += wd * d[static_cast<Eigen::Index>(v)];
        }
      }
    }
  });

  std::vector<ComponentMoments> out(comps);
  for (std::size_t c = 0; c < comps; ++c) {
    double mass = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                               static_cast<Eigen::Index>(n));
    for (std::size_t b = 0; b < blocks; ++b) {
      const double* a = partial.data() + (b * comps + c) * stride;
      mass += a[0];
      for (std::size_t u = 0; u < n; ++u) {
        s1[static_cast<Eigen::Index>(u)] += a[1 + u];
        for (std::size_t v = 0; v < n; ++v)
          s2(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) +=
              a[1 + n + u * n + v];
      }
    }
    out[c].n = mass;
    if (mass > 0.0) {
      out[c].m = s1 / mass;
      out[c].v = s2 / mass - out[c].m * out[c].m.transpose();
      out[c].v = 0.5 * (out[c].v + out[c].v.transpose());
    } else {
      out[c].m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
      out[c].v = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                       static_cast<Eigen::Index>(n));
    }
  }
  return out;
}

void m_step_gaussians(const MultiContrastImage& image, const SoftAssignments& w,
                      const BiasBasis& basis, AppearanceParams& params,
                      double ridge_scale, bool diagonal_mode) {
  update_gaussians(image, w, basis, params, ridge_scale, diagonal_mode, CoupledSpec{});
}

void m_step_bias(const MultiContrastImage& image, const SoftAssignments& w,
                 const BiasBasis& basis, AppearanceParams& params) {
  const std::size_t voxels = image.grid.voxel_count();
  if (w.n_voxels != voxels) throw std::invalid_argument("assignment size mismatch");
  const std::size_t n = image.n_channels;
  const std::size_t p = basis.n_functions;
  const std::size_t comps = w.n_columns;
  if (params.components.size() != comps)
    throw std::invalid_argument("component count mismatch");

  // Per-component sufficient statistics: F_c = sum_i w_ic phi phi^T (packed
  // upper triangle) and T_c^n = sum_i w_ic d_i^n phi_i.
  const std::size_t tri = p * (p + 1) / 2;
  const std::size_t stride = tri + n * p;
  const std::size_t blocks = block_count(voxels);
  std::vector<double> partial(blocks * comps * stride, 0.0);
  parallel_blocks(voxels, [&](std::size_t block, std::size_t begin, std::size_t end) {
    double* acc = partial.data() + block * comps * stride;
    for (std::size_t i = begin; i < end; ++i) {
      const double* phi = basis.row(i);
      const double* row = w.row(i);
      for (std::size_t c = 0; c < comps; ++c) {
        const double wi = row[c];
        if (wi == 0.0) continue;
        double* f = acc + c * stride;
        std::size_t idx = 0;
        for (std::size_t a = 0; a < p; ++a) {
          const double wa = wi * phi[a];
          for (std::size_t b = a; b < p; ++b, ++idx) f[idx] += wa * phi[b];
        }
        double* t = acc + c * stride + tri;
        for (std::size_t ch = 0; ch < n; ++ch) {
          const double wd = wi * image.at(ch, i);
          for (std::size_t a = 0; a < p; ++a) t[ch * p + a] += wd * phi[a];
        }
      }
    }
  });

  std::vector<Eigen::MatrixXd> f_c(comps,
                                   Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p),
                                                         static_cast<Eigen::Index>(p)));
  std::vector<Eigen::MatrixXd> t_c(comps,
                                   Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                                         static_cast<Eigen::Index>(p)));
  for (std::size_t c = 0; c < comps; ++c) {
    for (std::size_t b = 0; b < blocks; ++b) {
      const double* f = partial.data() + (b * comps + c) * stride;
      std::size_t idx = 0;
      for (std::size_t a = 0; a < p; ++a)
        for (std::size_t bb = a; bb < p; ++bb, ++idx)
          f_c[c](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(bb)) += f[idx];
      const double* t = f + tri;
      for (std::size_t ch = 0; ch < n; ++ch)
        for (std::size_t a = 0; a < p; ++a)
          t_c[c](static_cast<Eigen::Index>(ch), static_cast<Eigen::Index>(a)) +=
              t[ch * p + a];
    }
    f_c[c] = f_c[c].selfadjointView<Eigen::Upper>();
  }

  std::vector<Eigen::MatrixXd> precisions;
  precisions.reserve(comps);
  for (const auto& comp : params.components) {
    Eigen::LLT<Eigen::MatrixXd> llt(comp.cov);
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("m_step_bias: covariance not SPD");
    precisions.push_back(llt.solve(
        Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n),
                                  static_cast<Eigen::Index>(n))));
  }

  auto solve_dense = [&](const Eigen::MatrixXd& lhs,
                         const Eigen::VectorXd& rhs) -> Eigen::VectorXd {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(lhs);
    Eigen::VectorXd sol;
    if (ldlt.info() == Eigen::Success) {
      sol = ldlt.solve(rhs);
      if (sol.allFinite() && (lhs * sol - rhs).norm() <= 1e-6 * (1.0 + rhs.norm()))
        return sol;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(lhs);
    const double cond = svd.singularValues()(0) /
                        std::max(svd.singularValues()(svd.singularValues().size() - 1),
                                 std::numeric_limits<double>::min());
    throw std::runtime_error(
        "m_step_bias: singular block system (condition estimate " +
        std::to_string(cond) + ")");
  };

  Eigen::MatrixXd c_new(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  if (params.diagonal_mode) {
    // The block system decouples per contrast when all precisions are diagonal.
    for (std::size_t ch = 0; ch < n; ++ch) {
      Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p),
                                                  static_cast<Eigen::Index>(p));
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
      for (std::size_t c = 0; c < comps; ++c) {
        const double prec = precisions[c](static_cast<Eigen::Index>(ch),
                                          static_cast<Eigen::Index>(ch));
        lhs += prec * f_c[c];
        rhs += prec * (t_c[c].row(static_cast<Eigen::Index>(ch)).transpose() -
                       params.components[c].mean[static_cast<Eigen::Index>(ch)] *
                           f_c[c].col(0));
      }
      c_new.row(static_cast<Eigen::Index>(ch)) = solve_dense(lhs, rhs).transpose();
    }
  } else {
    const std::size_t np = n * p;
    Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(np),
                                                static_cast<Eigen::Index>(np));
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(np));
    for (std::size_t c = 0; c < comps; ++c) {
      const Eigen::MatrixXd& prec = precisions[c];
      const Eigen::VectorXd& mu = params.components[c].mean;
      for (std::size_t m = 0; m < n; ++m) {
        for (std::size_t nn = 0; nn < n; ++nn) {
          const double s = prec(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(nn));
          if (s == 0.0) continue;
          lhs.block(static_cast<Eigen::Index>(m * p), static_cast<Eigen::Index>(nn * p),
                    static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p)) +=
              s * f_c[c];
          rhs.segment(static_cast<Eigen::Index>(m * p), static_cast<Eigen::Index>(p)) +=
              s * (t_c[c].row(static_cast<Eigen::Index>(nn)).transpose() -
                   mu[static_cast<Eigen::Index>(nn)] * f_c[c].col(0));
        }
      }
    }
    const Eigen::VectorXd sol = solve_dense(lhs, rhs);
    for (std::size_t ch = 0; ch < n; ++ch)
      c_new.row(static_cast<Eigen::Index>(ch)) =
          sol.segment(static_cast<Eigen::Index>(ch * p), static_cast<Eigen::Index>(p))
              .transpose();
  }
  params.bias_coeffs = c_new;
}

void m_step_mixture_weights(const SoftAssignments& w, ClassSharingMap& sharing) {
  if (w.n_columns != sharing.total_components())
    throw std::invalid_argument("assignment column count mismatch");
  std::vector<double> mass(w.n_columns, 0.0);
  for (std::size_t i = 0; i < w.n_voxels; ++i) {
    const double* row = w.row(i);
    for (std::size_t c = 0; c < w.n_columns; ++c) mass[c] += row[c];
  }
  for (std::size_t g = 0; g < sharing.num_classes(); ++g) {
    const std::size_t off = sharing.component_offset(g);
    const std::size_t m_g = sharing.components_per_class[g];
    if (m_g == 1) {
      sharing.mixture_weights[g][0] = 1.0;
      continue;
    }
    double total = 0.0;
    for (std::size_t m = 0; m < m_g; ++m) total += mass[off + m];
    if (total <= 0.0) {
      log_warn("class ", g, " has no responsibility mass; keeping mixture weights");
      continue;
    }
    for (std::size_t m = 0; m < m_g; ++m)
      sharing.mixture_weights[g][m] = mass[off + m] / total;
  }
}

CoupledParams lesion_coupled_update(const ComponentMoments& wm, const ComponentMoments& les,
                                    const CoupledParams& current, double nu, double kappa,
                                    double ridge) {
  const Eigen::Index n = wm.m.size();
  const Eigen::MatrixXd ridge_i = ridge * Eigen::MatrixXd::Identity(n, n);
  CoupledParams out = current;
  if (nu == 0.0) {
    // Flat prior: independent weighted maximum likelihood.
    out.mu_wm = wm.m;
    out.sigma_wm = wm.v + ridge_i;
    out.mu_les = les.m;
    out.sigma_les = les.v + ridge_i;
    return out;
  }
  if (!(nu > static_cast<double>(n) + 1.0))
    throw std::invalid_argument("coupled update: nu must be 0 or > N+1");
  const double n_wm = wm.n;
  const double n_les = les.n;

  // Each block below is the exact maximizer of the EM bound in that
  // coordinate, holding the others fixed, so the sweep is monotone.
  out.mu_les = (n_les * les.m + nu * current.mu_wm) / (n_les + nu);

  Eigen::LLT<Eigen::MatrixXd> llt_wm(current.sigma_wm);
  Eigen::LLT<Eigen::MatrixXd> llt_les(current.sigma_les);
  if (llt_wm.info() != Eigen::Success || llt_les.info() != Eigen::Success)
    throw std::invalid_argument("coupled update: covariance not SPD");
  const Eigen::MatrixXd prec_wm = llt_wm.solve(Eigen::MatrixXd::Identity(n, n));
  const Eigen::MatrixXd prec_les = llt_les.solve(Eigen::MatrixXd::Identity(n, n));
  const Eigen::MatrixXd a = n_wm * prec_wm + nu * prec_les;
  out.mu_wm = a.ldlt().solve(n_wm * prec_wm * wm.m + nu * prec_les * out.mu_les);

  const Eigen::VectorXd dl = les.m - out.mu_les;
  const Eigen::VectorXd dw = out.mu_les - out.mu_wm;
  const Eigen::MatrixXd b_les = n_les * (les.v + ridge_i + dl * dl.transpose()) +
                                nu * dw * dw.transpose() + kappa * nu * current.sigma_wm;
  out.sigma_les = b_les / (n_les + nu + 1.0);
  out.sigma_les = 0.5 * (out.sigma_les + out.sigma_les.transpose());

  // Stationarity in Sigma_wm: kappa nu S Sig_les^-1 S + (n_wm - nu_std) S =
  // n_wm Vbar, solved exactly via the matrix quadratic.
  const double nu_std = nu - static_cast<double>(n) - 1.0;
  const Eigen::VectorXd dm = wm.m - out.mu_wm;
  const Eigen::MatrixXd vbar = wm.v + ridge_i + dm * dm.transpose();
  const Eigen::MatrixXd s_half = spd_sqrt(out.sigma_les);
  const Eigen::MatrixXd s_half_inv = s_half.llt().solve(Eigen::MatrixXd::Identity(n, n));
  const Eigen::MatrixXd m_mat =
      s_half_inv * (n_wm / (kappa * nu) * vbar) * s_half_inv.transpose();
  const double shift = (n_wm - nu_std) / (kappa * nu);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m_mat + m_mat.transpose()));
  Eigen::VectorXd x_ev(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m_i = std::max(es.eigenvalues()[i], 0.0);
    x_ev[i] = -0.5 * shift + std::sqrt(0.25 * shift * shift + m_i);
  }
  const Eigen::MatrixXd x =
      es.eigenvectors() * x_ev.asDiagonal() * es.eigenvectors().transpose();
  out.sigma_wm = s_half * x * s_half;
  out.sigma_wm = 0.5 * (out.sigma_wm + out.sigma_wm.transpose());
  return out;
}

namespace {

// Deformation objective/gradient at the current vertices; class likelihoods
// are fixed during deformation and passed in as a cache.
struct DeformationEval {
  double objective = -kInf;
  Eigen::Matrix<double, Eigen::Dynamic, 3> gradient;
};

DeformationEval evaluate_deformation(const AtlasMesh& mesh, const VolumeGrid& grid,
                                     const ClassSharingMap& sharing,
                                     const std::vector<double>& class_lik,
                                     bool want_gradient) {
  DeformationEval out;
  const DeformationPrior def = deformation_log_prior(mesh);
  if (def.log_prior == -kInf) return out;

  const Rasterization rast = rasterize(mesh, grid);
  const std::size_t voxels = grid.voxel_count();
  const std::size_t k_count = sharing.num_labels();
  const std::size_t g_count = sharing.num_classes();

  if (want_gradient) out.gradient = def.gradient;
  double data_term = 0.0;

  // Per-tet inverse-transpose edge matrices (spatial barycentric gradients).
  std::vector<Eigen::Matrix3d> grad_rows(mesh.tets.size());
  std::vector<char> have(mesh.tets.size(), 0);
  auto tet_grads = [&](std::size_t t) -> const Eigen::Matrix3d& {
    if (!have[t]) {
      const auto& tet = mesh.tets[t];
      Eigen::Matrix3d e;
      for (int m = 0; m < 3; ++m)
        e.col(m) = (mesh.vertices.row(tet[m + 1]) - mesh.vertices.row(tet[0])).transpose();
      grad_rows[t] = e.inverse().eval();  // row m = grad lambda_{m+1}
      have[t] = 1;
    }
    return grad_rows[t];
  };

  for (std::size_t i = 0; i < voxels; ++i) {
    const std::int32_t ti = rast.tet_index[i];
    const double* cl = class_lik.data() + i * g_count;
    constexpr double kTiny = std::numeric_limits<double>::min();
    if (ti < 0) {
      const double bg = cl[sharing.label_to_class[0]];
      data_term += std::log(std::max(bg, kTiny));
      continue;
    }
    const auto& tet = mesh.tets[static_cast<std::size_t>(ti)];
    const auto& lam = rast.weights[i];
    double z = 0.0;
    std::array<double, 4> s{0.0, 0.0, 0.0, 0.0};
    for (std::size_t k = 0; k < k_count; ++k) {
      double pik = 0.0;
      for (int m = 0; m < 4; ++m)
        pik += lam[m] * mesh.alpha[tet[m] * k_count + k];
      z += pik * cl[sharing.label_to_class[k]];
    }
    data_term += std::log(std::max(z, kTiny));
    if (!want_gradient) continue;
    if (z < kTiny) continue;
    for (int m = 0; m < 4; ++m) {
      const double* am = mesh.alpha.data() + tet[m] * k_count;
      double sm = 0.0;
      for (std::size_t k = 0; k < k_count; ++k)
        sm += am[k] * cl[sharing.label_to_class[k]];
      s[m] = sm / z;
    }
    const Eigen::Matrix3d& g3 = tet_grads(static_cast<std::size_t>(ti));
    const Eigen::Vector3d q = s[1] * g3.row(0).transpose() +
                              s[2] * g3.row(1).transpose() +
                              s[3] * g3.row(2).transpose() -
                              s[0] * (g3.row(0) + g3.row(1) + g3.row(2)).transpose();
    for (int m = 0; m < 4; ++m)
      out.gradient.row(tet[m]) -= lam[m] * q.transpose();
  }
  out.objective = def.log_prior + data_term;
  return out;
}

std::vector<double> class_likelihood_cache(const MultiContrastImage& image,
                                           const ClassSharingMap& sharing,
                                           const AppearanceParams& params,
                                           const BiasBasis& basis) {
  const std::size_t voxels = image.grid.voxel_count();
  const std::size_t g_count = sharing.num_classes();
  const ComponentTable table = build_component_table(sharing, params);
  std::vector<double> cl(voxels * g_count, 0.0);
  parallel_blocks(voxels, [&](std::size_t, std::size_t begin, std::size_t end) {
    Eigen::VectorXd d(static_cast<Eigen::Index>(image.n_channels));
    for (std::size_t i = begin; i < end; ++i) {
      corrected_intensity(image, params.bias_coeffs, basis, i, d);
      double* row = cl.data() + i * g_count;
      for (std::size_t c = 0; c < table.evals.size(); ++c) {
        const double lw = table.log_weight[c];
        if (lw == -kInf) continue;
        row[table.comp_class[c]] += std::exp(lw + table.evals[c].log_density(d));
      }
    }
  });
  return cl;
}

}  // namespace

int optimize_deformation(AtlasMesh& mesh, const MultiContrastImage& image,
                         const ClassSharingMap& sharing, const AppearanceParams& params,
                         const BiasBasis& basis, const FitConfig& config) {
  if (config.deformation_max_steps == 0) return 0;
  const std::vector<double> class_lik =
      class_likelihood_cache(image, sharing, params, basis);
  const VolumeGrid& grid = image.grid;
  const Eigen::Index j_count = mesh.vertices.rows();
  const Eigen::Index dim = j_count * 3;

  auto pack = [&](const Eigen::Matrix<double, Eigen::Dynamic, 3>& v) {
    Eigen::VectorXd x(dim);
    for (Eigen::Index j = 0; j < j_count; ++j)
      for (int a = 0; a < 3; ++a) x[j * 3 + a] = v(j, a);
    return x;
  };
  auto unpack = [&](const Eigen::VectorXd& x) {
    for (Eigen::Index j = 0; j < j_count; ++j)
      for (int a = 0; a < 3; ++a) mesh.vertices(j, a) = x[j * 3 + a];
  };

  // Minimize f = -objective with L-BFGS + Armijo backtracking.
  auto eval_f = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    unpack(x);
    const DeformationEval e =
        evaluate_deformation(mesh, grid, sharing, class_lik, grad != nullptr);
    if (e.objective == -kInf) return kInf;
    if (grad) {
      for (Eigen::Index j = 0; j < j_count; ++j)
        for (int a = 0; a < 3; ++a) (*grad)[j * 3 + a] = -e.gradient(j, a);
    }
    return -e.objective;
  };

  Eigen::VectorXd x = pack(mesh.vertices);
  Eigen::VectorXd g(dim);
  double f = eval_f(x, &g);
  if (f == kInf)
    throw std::invalid_argument("optimize_deformation: starting mesh is folded");

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  int accepted = 0;
  for (int step = 0; step < config.deformation_max_steps; ++step) {
    // Two-loop recursion.
    Eigen::VectorXd q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t h = s_hist.size(); h-- > 0;) {
      alpha[h] = rho_hist[h] * s_hist[h].dot(q);
      q -= alpha[h] * y_hist[h];
    }
    if (!s_hist.empty()) {
      const double gamma =
          s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      q *= gamma;
    }
    for (std::size_t h = 0; h < s_hist.size(); ++h) {
      const double beta = rho_hist[h] * y_hist[h].dot(q);
      q += (alpha[h] - beta) * s_hist[h];
    }
    Eigen::VectorXd p = -q;
    double slope = p.dot(g);
    if (slope >= 0.0) {  // fall back to steepest descent
      p = -g;
      slope = p.dot(g);
      if (slope >= 0.0) break;
    }

    double t = 1.0;
    if (s_hist.empty()) {
      const double gnorm = g.norm();
      if (gnorm > 1.0) t = 1.0 / gnorm;
    }
    constexpr double c1 = 1e-4;
    double f_new = kInf;
    Eigen::VectorXd x_new;
    bool ok = false;
    for (int bt = 0; bt < 40; ++bt) {
      x_new = x + t * p;
      f_new = eval_f(x_new, nullptr);
      if (f_new <= f + c1 * t * slope) {
        ok = true;
        break;
      }
      t *= 0.5;
    }
    if (!ok) break;

    Eigen::VectorXd g_new(dim);
    eval_f(x_new, &g_new);
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > config.deformation_memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const double improvement = f - f_new;
    x = x_new;
    f = f_new;
    g = g_new;
    ++accepted;
    if (improvement <= 1e-9 * (1.0 + std::abs(f))) break;
  }
  unpack(x);
  return accepted;
}

namespace {

struct FitContext {
  bool augmented = false;
  CoupledSpec coupled;
  double nu = 0.0;
  double kappa = 0.0;
};

AppearanceParams initialize_params(const MultiContrastImage& image,
                                   const std::vector<double>& prior,
                                   const ClassSharingMap& sharing, const BiasBasis& basis,
                                   const FitConfig& config, const FitContext& ctx) {
  const std::size_t voxels = image.grid.voxel_count();
  const std::size_t n = image.n_channels;
  const std::size_t k_count = sharing.num_labels();
  const std::size_t g_count = sharing.num_classes();

  // Atlas-prior-weighted data moments per class at the current deformation.
  std::vector<double> mass(g_count, 0.0);
  std::vector<Eigen::VectorXd> s1(g_count,
                                  Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n)));
  std::vector<Eigen::MatrixXd> s2(g_count,
                                  Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                                        static_cast<Eigen::Index>(n)));
  std::vector<double> pg(g_count);
  Eigen::VectorXd d(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < voxels; ++i) {
    aggregate_class_prior(prior.data() + i * k_count, sharing, pg.data());
    for (std::size_t ch = 0; ch < n; ++ch) d[static_cast<Eigen::Index>(ch)] = image.at(ch, i);
    for (std::size_t g = 0; g < g_count; ++g) {
      if (pg[g] == 0.0) continue;
      mass[g] += pg[g];
      s1[g] += pg[g] * d;
      s2[g] += pg[g] * d * d.transpose();
    }
  }
  const double lambda = config.covariance_ridge_scale * mean_data_variance(image);
  const Eigen::MatrixXd ridge =
      lambda * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n),
                                         static_cast<Eigen::Index>(n));

  AppearanceParams params;
  params.diagonal_mode = config.diagonal_mode;
  params.components.resize(sharing.total_components());
  std::vector<Eigen::VectorXd> class_mean(g_count);
  for (std::size_t g = 0; g < g_count; ++g) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n),
                                                    static_cast<Eigen::Index>(n));
    if (mass[g] > 0.0) {
      mu = s1[g] / mass[g];
      cov = s2[g] / mass[g] - mu * mu.transpose();
      cov = 0.5 * (cov + cov.transpose()) + ridge;
    }
    if (config.diagonal_mode) cov = cov.diagonal().asDiagonal().toDenseMatrix();
    class_mean[g] = mu;
    const std::size_t m_g = sharing.components_per_class[g];
    const Eigen::VectorXd spread = cov.diagonal().cwiseSqrt();
    for (std::size_t m = 0; m < m_g; ++m) {
      const double offset =
          m_g == 1 ? 0.0
                   : -0.5 + static_cast<double>(m) / static_cast<double>(m_g - 1);
      auto& comp = params.components[sharing.component_offset(g) + m];
      comp.mean = mu + offset * spread;
      comp.cov = cov;
    }
  }
  if (ctx.augmented && ctx.nu > 0.0) {
    // Lesion component starts at the prior mode given white matter.
    const std::size_t wm_g = static_cast<std::size_t>(sharing.wm_class);
    auto& les = params.components[ctx.coupled.lesion_component];
    les.mean = class_mean[wm_g];
    les.cov = ctx.kappa * params.components[ctx.coupled.wm_component].cov;
  }

  // Bias coefficients: zero except the constant column, set to the
  // per-contrast prior-weighted mean offset.
  params.bias_coeffs =
      Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                            static_cast<Eigen::Index>(basis.n_functions));
  Eigen::VectorXd offset = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  double total_mass = 0.0;
  for (std::size_t g = 0; g < g_count; ++g) {
    offset += s1[g] - mass[g] * class_mean[g];
    total_mass += mass[g];
  }
  if (total_mass > 0.0) params.bias_coeffs.col(0) = offset / total_mass;
  return params;
}

FitResult run_fit(const MultiContrastImage& image, AtlasMesh mesh, ClassSharingMap sharing,
                  const FitConfig& config, const FitContext& ctx) {
  config.validate();
  image.validate();
  if (!image.log_domain)
    throw std::invalid_argument("fit expects log-domain intensities");
  sharing.validate();
  mesh.validate();
  if (mesh.num_labels != sharing.num_labels())
    throw std::invalid_argument("mesh label count != sharing map label count");

  const VolumeGrid& grid = image.grid;
  const BiasBasis basis = eval_bias_basis(grid, config.bias_order);

  Rasterization rast = rasterize(mesh, grid);
  std::vector<double> prior = interpolate_prior(mesh, rast);
  AppearanceParams params = initialize_params(image, prior, sharing, basis, config, ctx);

  auto objective = [&]() {
    double obj = data_log_likelihood(image, prior, sharing, params, basis) +
                 deformation_log_prior(mesh).log_prior;
    if (ctx.augmented && ctx.nu > 0.0)
      obj += niw_log_density(params.components[ctx.coupled.lesion_component].mean,
                             params.components[ctx.coupled.lesion_component].cov,
                             params.components[ctx.coupled.wm_component].mean,
                             params.components[ctx.coupled.wm_component].cov, ctx.nu,
                             ctx.kappa);
    return obj;
  };

  FitResult result;
  result.trace.push_back({0, "init", objective()});

  for (int outer = 1; outer <= config.max_outer_iters; ++outer) {
    const double obj_start = result.trace.back().objective;
    for (int sweep = 0; sweep < config.gem_iters_per_outer; ++sweep) {
      SoftAssignments w = e_step(image, prior, sharing, params, basis);
      update_gaussians(image, w, basis, params, config.covariance_ridge_scale,
                       config.diagonal_mode, ctx.coupled);
      result.trace.push_back({outer, "means_covs", objective()});

      w = e_step(image, prior, sharing, params, basis);
      m_step_bias(image, w, basis, params);
      result.trace.push_back({outer, "bias", objective()});

      w = e_step(image, prior, sharing, params, basis);
      m_step_mixture_weights(w, sharing);
      result.trace.push_back({outer, "weights", objective()});
    }
    if (config.deformation_max_steps > 0) {
      optimize_deformation(mesh, image, sharing, params, basis, config);
      rast = rasterize(mesh, grid);
      prior = interpolate_prior(mesh, rast);
      result.trace.push_back({outer, "deform", objective()});
    }
    const double obj_end = result.trace.back().objective;
    if (std::abs(obj_end - obj_start) <
        config.convergence_tol * std::max(1.0, std::abs(obj_start)))
      break;
  }

  result.mesh = std::move(mesh);
  result.sharing = std::move(sharing);
  result.params = std::move(params);
  result.basis = basis;
  result.prior = std::move(prior);
  result.assignments =
      e_step(image, result.prior, result.sharing, result.params, result.basis);
  result.final_objective = result.trace.back().objective;
  result.lesion_augmented = ctx.augmented;
  result.nu_effective = ctx.nu;
  result.kappa = ctx.kappa;
  if (ctx.augmented) {
    result.lesion_label = result.mesh.num_labels - 1;
    result.lesion_component = ctx.coupled.lesion_component;
    result.wm_component = ctx.coupled.wm_component;
  }
  return result;
}

}  // namespace

FitResult fit(const MultiContrastImage& image, AtlasMesh mesh, ClassSharingMap sharing,
              const FitConfig& config) {
  return run_fit(image, std::move(mesh), std::move(sharing), config, FitContext{});
}

FitResult fit_lesion_augmented(const MultiContrastImage& image, AtlasMesh mesh,
                               ClassSharingMap sharing, const LesionIntensityPrior& prior,
                               const FitConfig& config) {
  prior.validate();
  sharing.validate();
  if (sharing.wm_class < 0)
    throw std::invalid_argument("lesion-augmented fit needs a white-matter class");
  if (sharing.components_per_class[static_cast<std::size_t>(sharing.wm_class)] != 1)
    throw std::invalid_argument(
        "lesion-augmented fit requires a single-component white-matter class");

  const double nu = prior.nu_effective(image.grid);
  const double n_channels = static_cast<double>(image.n_channels);
  if (nu > 0.0 && !(nu > n_channels + 1.0))
    throw std::invalid_argument("effective nu must be 0 or > N+1");
  if (config.sampler_requested && nu > 0.0 &&
      !(nu - n_channels - 1.0 > n_channels - 1.0))
    throw std::invalid_argument(
        "effective nu too small for a proper lesion covariance sampler");

  AtlasMesh mesh_aug = augment_with_lesion_class(mesh);
  ClassSharingMap sharing_aug = sharing;
  const auto lesion_class = static_cast<std::uint32_t>(sharing.num_classes());
  sharing_aug.label_to_class.push_back(lesion_class);
  sharing_aug.components_per_class.push_back(1);
  sharing_aug.mixture_weights.push_back({1.0});
  if (!sharing_aug.class_names.empty()) sharing_aug.class_names.push_back("lesion");

  FitContext ctx;
  ctx.augmented = true;
  ctx.nu = nu;
  ctx.kappa = prior.kappa;
  ctx.coupled.active = true;
  ctx.coupled.nu = nu;
  ctx.coupled.kappa = prior.kappa;
  ctx.coupled.wm_component =
      sharing_aug.component_offset(static_cast<std::size_t>(sharing.wm_class));
  ctx.coupled.lesion_component = sharing_aug.component_offset(lesion_class);

  FitResult result = run_fit(image, std::move(mesh_aug), std::move(sharing_aug), config, ctx);

  // Anatomical prior and lesion location prior at the final deformation,
  // interpolated from the original (unaugmented) per-vertex probabilities.
  AtlasMesh original = std::move(mesh);
  original.vertices = result.mesh.vertices;
  const Rasterization rast = rasterize(original, image.grid);
  result.anatomical_prior = interpolate_prior(original, rast);
  result.rho = interpolate_lesion_prior(original, rast, image.grid).probs;
  return result;
}

}  // namespace lesionseg
