#include "lesionseg/lesion_sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "lesionseg/logging.hpp"
#include "lesionseg/parallel.hpp"

namespace lesionseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::VectorXd gm_mixture_mean(const FitResult& fit) {
  if (fit.sharing.gm_class < 0)
    throw std::invalid_argument("candidate_mask: no gray-matter class in sharing map");
  const auto g = static_cast<std::size_t>(fit.sharing.gm_class);
  const std::size_t off = fit.sharing.component_offset(g);
  const std::size_t m_g = fit.sharing.components_per_class[g];
  Eigen::VectorXd mean =
      Eigen::VectorXd::Zero(fit.params.components[off].mean.size());
  for (std::size_t m = 0; m < m_g; ++m)
    mean += fit.sharing.mixture_weights[g][m] * fit.params.components[off + m].mean;
  return mean;
}

// Wishart draw via the Bartlett construction; b is any matrix with
// b b^T = scale. Row-major fill order pins the stream.
Eigen::MatrixXd wishart_draw(const Eigen::MatrixXd& b, double dof, Rng& rng) {
  const Eigen::Index n = b.rows();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = rng.normal();
    a(i, i) = std::sqrt(rng.chi_squared(dof - static_cast<double>(i)));
  }
  const Eigen::MatrixXd ba = b * a;
  return ba * ba.transpose();
}

}  // namespace

void SamplerConfig::validate() const {
  if (samples < 1) throw std::invalid_argument("samples must be >= 1");
  if (burn_in < 0) throw std::invalid_argument("burn-in must be >= 0");
  if (!(gamma > 0.0 && gamma < 1.0))
    throw std::invalid_argument("gamma must lie in (0,1)");
  if (!subject_to_prior_affine.allFinite() ||
      std::abs(subject_to_prior_affine.determinant()) < 1e-12)
    throw std::invalid_argument("subject-to-prior affine must be invertible");
}

LesionMask candidate_mask(const MultiContrastImage& image, const FitResult& fit,
                          bool any_channel) {
  const std::size_t voxels = image.grid.voxel_count();
  LesionMask out;
  out.grid = image.grid;
  out.mask.assign(voxels, 1);

  std::vector<std::size_t> tagged;
  for (std::size_t c = 0; c < image.n_channels; ++c)
    if (image.contrasts[c] == ContrastTag::kFlair ||
        image.contrasts[c] == ContrastTag::kT2w)
      tagged.push_back(c);
  if (tagged.empty()) return out;

  const Eigen::VectorXd gm_mean = gm_mixture_mean(fit);
  const Eigen::MatrixXd& bias = fit.params.bias_coeffs;
  parallel_blocks(voxels, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const double* phi = fit.basis.row(i);
      bool all = true, any = false;
      for (std::size_t c : tagged) {
        double b = 0.0;
        for (Eigen::Index p = 0; p < bias.cols(); ++p)
          b += bias(static_cast<Eigen::Index>(c), p) * phi[p];
        const bool above =
            image.at(c, i) - b > gm_mean[static_cast<Eigen::Index>(c)];
        all = all && above;
        any = any || above;
      }
      out.mask[i] = (any_channel ? any : all) ? 1 : 0;
    }
  });
  return out;
}

void save_chain_csv(const std::filesystem::path& path, const std::vector<ChainRow>& chain) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write chain: " + path.string());
  const Eigen::Index n = chain.empty() ? 0 : chain.front().mu_les.size();
  os << "sweep,n_les";
  for (Eigen::Index c = 0; c < n; ++c) os << ",mu_" << c;
  os << ",trace_sigma\n";
  char buf[64];
  for (const auto& row : chain) {
    os << row.sweep << ",";
    std::snprintf(buf, sizeof(buf), "%.17g", row.n_les);
    os << buf;
    for (Eigen::Index c = 0; c < n; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", row.mu_les[c]);
      os << "," << buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g", row.trace_sigma);
    os << "," << buf << "\n";
  }
}

LesionSampler::LesionSampler(const MultiContrastImage& image, const FitResult& fit,
                             const ShapePriorModel* shape_prior,
                             const SamplerConfig& config)
    : image_(image), shape_prior_(shape_prior), config_(config),
      rng_(mix64(config.seed ^ 0x5E510A11CE5ULL)) {
  config_.validate();
  image_.validate();
  if (!fit.lesion_augmented)
    throw std::invalid_argument("sampler needs a lesion-augmented fit");
  n_ = image.n_channels;
  nu_ = fit.nu_effective;
  kappa_ = fit.kappa;
  const double nd = static_cast<double>(n_);
  if (!(nu_ > nd + 1.0))
    throw std::invalid_argument("sampler requires effective nu > N+1");
  if (!(nu_ - nd - 1.0 > nd - 1.0))
    throw std::invalid_argument("IW degrees of freedom too small to sample");

  mu_wm_ = fit.params.components[fit.wm_component].mean;
  sigma_wm_ = fit.params.components[fit.wm_component].cov;
  mu_les_ = fit.params.components[fit.lesion_component].mean;
  sigma_les_ = fit.params.components[fit.lesion_component].cov;

  const std::size_t voxels = image.grid.voxel_count();
  const std::size_t k_anat = fit.anatomical_prior.size() / std::max<std::size_t>(voxels, 1);
  if (fit.anatomical_prior.size() != voxels * k_anat || k_anat == 0)
    throw std::invalid_argument("fit lacks an anatomical prior");
  if (fit.rho.size() != voxels)
    throw std::invalid_argument("fit lacks a lesion location prior");

  // Bias-corrected intensities.
  corrected_.resize(voxels * n_);
  const Eigen::MatrixXd& bias = fit.params.bias_coeffs;
  parallel_blocks(voxels, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const double* phi = fit.basis.row(i);
      for (std::size_t c = 0; c < n_; ++c) {
        double b = 0.0;
        for (Eigen::Index p = 0; p < bias.cols(); ++p)
          b += bias(static_cast<Eigen::Index>(c), p) * phi[p];
        corrected_[i * n_ + c] = image.at(c, i) - b;
      }
    }
  });

  // ln sum_k pi_ik L_k over the anatomical labels, fixed for all sweeps.
  std::vector<GaussianEvaluator> evals;
  std::vector<std::uint32_t> comp_class;
  std::vector<double> comp_logw;
  for (std::size_t g = 0; g + 1 < fit.sharing.num_classes(); ++g)  // skip lesion class
    for (std::size_t m = 0; m < fit.sharing.components_per_class[g]; ++m) {
      evals.emplace_back(fit.params.components[fit.sharing.component_offset(g) + m]);
      comp_class.push_back(static_cast<std::uint32_t>(g));
      const double wgt = fit.sharing.mixture_weights[g][m];
      comp_logw.push_back(wgt > 0.0 ? std::log(wgt) : -kInf);
    }
  const std::size_t g_anat = fit.sharing.num_classes() - 1;
  log_anat_.resize(voxels);
  parallel_blocks(voxels, [&](std::size_t, std::size_t begin, std::size_t end) {
    Eigen::VectorXd d(static_cast<Eigen::Index>(n_));
    std::vector<double> comp_log(evals.size());
    std::vector<double> pg(g_anat);
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t c = 0; c < n_; ++c)
        d[static_cast<Eigen::Index>(c)] = corrected_[i * n_ + c];
      for (std::size_t g = 0; g < g_anat; ++g) pg[g] = 0.0;
      for (std::size_t k = 0; k < k_anat; ++k)
        pg[fit.sharing.label_to_class[k]] += fit.anatomical_prior[i * k_anat + k];
      double max_log = -kInf;
      for (std::size_t c = 0; c < evals.size(); ++c) {
        const double p = pg[comp_class[c]];
        comp_log[c] =
            (p > 0.0 ? std::log(p) : -kInf) + comp_logw[c] + evals[c].log_density(d);
        max_log = std::max(max_log, comp_log[c]);
      }
      if (!(max_log > -kInf)) {
        log_anat_[i] = -kInf;
        continue;
      }
      double sum = 0.0;
      for (double v : comp_log) sum += std::exp(v - max_log);
      log_anat_[i] = max_log + std::log(sum);
    }
  });

  rho_.resize(voxels);
  for (std::size_t i = 0; i < voxels; ++i)
    rho_[i] = std::clamp(fit.rho[i], 0.0, 1.0);

  candidate_ = candidate_mask(image, fit, config.any_channel);
  f_.assign(voxels, 1.0);
  z_.grid = image.grid;
  z_.mask.assign(voxels, 0);
  if (fit.assignments.n_voxels == voxels &&
      fit.lesion_component < fit.assignments.n_columns) {
    for (std::size_t i = 0; i < voxels; ++i)
      z_.mask[i] =
          (fit.assignments.at(i, fit.lesion_component) > 0.5 && candidate_.mask[i])
              ? 1
              : 0;
  }
  z_prob_.assign(voxels, 0.0);
}

double LesionSampler::n_les() const {
  double s = 0.0;
  for (std::uint8_t v : z_.mask) s += v;
  return s;
}

void LesionSampler::set_lesion_params(const Eigen::VectorXd& mu,
                                      const Eigen::MatrixXd& sigma) {
  if (mu.size() != static_cast<Eigen::Index>(n_) ||
      sigma.rows() != static_cast<Eigen::Index>(n_) || sigma.cols() != sigma.rows())
    throw std::invalid_argument("lesion parameter dimensions mismatch");
  mu_les_ = mu;
  sigma_les_ = sigma;
}

void LesionSampler::set_shape_factor(std::vector<double> f) {
  if (f.size() != f_.size()) throw std::invalid_argument("shape factor size mismatch");
  f_ = std::move(f);
  shape_override_ = true;
}

void LesionSampler::refresh_shape_factor() {
  if (shape_override_ || shape_prior_ == nullptr) return;
  // z -> training grid, binarized, encoded; h drawn from the encoder
  // approximation; f = decode(h) resampled back to subject space.
  ProbabilityMap zmap;
  zmap.grid = image_.grid;
  zmap.probs.assign(z_.mask.begin(), z_.mask.end());
  const Eigen::Matrix4d to_subject = config_.subject_to_prior_affine.inverse();
  const LesionMask z_train =
      binarize(resample_affine(zmap, shape_prior_->training_grid, to_subject), 0.5);
  const EncodeResult enc = encode(*shape_prior_, z_train);
  Eigen::VectorXd h(enc.mu.size());
  for (Eigen::Index l = 0; l < h.size(); ++l)
    h[l] = enc.mu[l] + enc.sigma[l] * rng_.normal();
  const ProbabilityMap f_train = decode(*shape_prior_, h);
  const ProbabilityMap f_subject =
      resample_affine(f_train, image_.grid, config_.subject_to_prior_affine);
  f_ = f_subject.probs;
}

void LesionSampler::sweep() {
  const std::size_t voxels = image_.grid.voxel_count();
  const double nd = static_cast<double>(n_);
  ++sweep_index_;

  if (!frozen_) {
    // Sufficient statistics of the current z (w_{i,les} = z_i).
    double n_les = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_));
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_),
                                               static_cast<Eigen::Index>(n_));
    for (std::size_t i = 0; i < voxels; ++i) {
      if (!z_.mask[i]) continue;
      Eigen::Map<const Eigen::VectorXd> d(corrected_.data() + i * n_,
                                          static_cast<Eigen::Index>(n_));
      n_les += 1.0;
      s1 += d;
      s2 += d * d.transpose();
    }
    Eigen::VectorXd m_les = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_));
    Eigen::MatrixXd v_les = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_),
                                                  static_cast<Eigen::Index>(n_));
    if (n_les > 0.0) {
      m_les = s1 / n_les;
      v_les = s2 / n_les - m_les * m_les.transpose();
    }
    const Eigen::VectorXd dm = m_les - mu_wm_;
    const Eigen::MatrixXd psi =
        n_les * v_les + (n_les * nu_ / (n_les + nu_)) * dm * dm.transpose();

    // Sigma_les | z.
    const Eigen::MatrixXd scale = psi + nu_ * kappa_ * sigma_wm_;
    const double dof = n_les + nu_ - nd - 1.0;
    Eigen::LLT<Eigen::MatrixXd> llt(0.5 * (scale + scale.transpose()));
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("sampler: scale matrix not SPD");
    const Eigen::MatrixXd l = llt.matrixL();
    const Eigen::MatrixXd b =
        l.transpose().triangularView<Eigen::Upper>().solve(
            Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n_),
                                      static_cast<Eigen::Index>(n_)));
    // b = L^-T, so b b^T = (L L^T)^-1 = scale^-1.
    const Eigen::MatrixXd precision = wishart_draw(b, dof, rng_);
    sigma_les_ = precision.llt().solve(Eigen::MatrixXd::Identity(
        static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(n_)));
    sigma_les_ = 0.5 * (sigma_les_ + sigma_les_.transpose());

    // mu_les | z, Sigma_les.
    const Eigen::VectorXd center = (n_les * m_les + nu_ * mu_wm_) / (n_les + nu_);
    Eigen::VectorXd eps(static_cast<Eigen::Index>(n_));
    for (Eigen::Index c = 0; c < eps.size(); ++c) eps[c] = rng_.normal();
    const Eigen::MatrixXd l_les =
        Eigen::LLT<Eigen::MatrixXd>(sigma_les_).matrixL();
    mu_les_ = center + (l_les * eps) / std::sqrt(n_les + nu_);

    // h | z.
    refresh_shape_factor();
  }

  // z | everything else: independent Bernoullis from counter-based streams.
  const GaussianEvaluator lesion_eval(GaussianComponent{mu_les_, sigma_les_});
  const std::uint64_t sweep_key = static_cast<std::uint64_t>(sweep_index_);
  parallel_blocks(voxels, [&](std::size_t, std::size_t begin, std::size_t end) {
    Eigen::VectorXd d(static_cast<Eigen::Index>(n_));
    for (std::size_t i = begin; i < end; ++i) {
      if (!candidate_.mask[i]) {
        z_prob_[i] = 0.0;
        z_.mask[i] = 0;
        continue;
      }
      for (std::size_t c = 0; c < n_; ++c)
        d[static_cast<Eigen::Index>(c)] = corrected_[i * n_ + c];
      const double a = std::clamp(f_[i] * rho_[i], 0.0, 1.0);
      double p;
      if (a <= 0.0) {
        p = 0.0;
      } else {
        const double log_num = lesion_eval.log_density(d) + std::log(a);
        const double log_other =
            a >= 1.0 ? -kInf : std::log1p(-a) + log_anat_[i];
        if (log_other == -kInf)
          p = 1.0;
        else
          p = 1.0 / (1.0 + std::exp(log_other - log_num));
      }
      z_prob_[i] = p;
      const double u = counter_uniform(config_.seed, sweep_key,
                                       static_cast<std::uint64_t>(i), 0);
      z_.mask[i] = u < p ? 1 : 0;
    }
  });
}

ProbabilityMap LesionSampler::run(std::vector<ChainRow>* chain) {
  const std::size_t voxels = image_.grid.voxel_count();
  std::vector<double> accum(voxels, 0.0);
  const int total = config_.burn_in + config_.samples;
  for (int s = 0; s < total; ++s) {
    sweep();
    if (s >= config_.burn_in)
      for (std::size_t i = 0; i < voxels; ++i) accum[i] += z_prob_[i];
    if (chain)
      chain->push_back({sweep_index_, n_les(), mu_les_, sigma_les_.trace()});
  }
  ProbabilityMap out;
  out.grid = image_.grid;
  out.probs.resize(voxels);
  const double inv = 1.0 / static_cast<double>(config_.samples);
  for (std::size_t i = 0; i < voxels; ++i)
    out.probs[i] = std::clamp(accum[i] * inv, 0.0, 1.0);
  return out;
}

ProbabilityMap lesion_posterior(const MultiContrastImage& image, const FitResult& fit,
                                const ShapePriorModel* shape_prior,
                                const SamplerConfig& config,
                                std::vector<ChainRow>* chain) {
  LesionSampler sampler(image, fit, shape_prior, config);
  return sampler.run(chain);
}

std::pair<LesionMask, LabelMap> final_segmentation(const ProbabilityMap& posterior,
                                                   const std::vector<double>& label_post,
                                                   std::size_t n_labels,
                                                   std::int32_t lesion_column,
                                                   double gamma) {
  posterior.validate();
  if (!(gamma > 0.0 && gamma < 1.0))
    throw std::invalid_argument("gamma must lie in (0,1)");
  const std::size_t voxels = posterior.grid.voxel_count();
  if (n_labels == 0 || label_post.size() != voxels * n_labels)
    throw std::invalid_argument("label posterior size mismatch");
  if (lesion_column >= static_cast<std::int32_t>(n_labels))
    throw std::invalid_argument("lesion column out of range");

  LesionMask mask;
  mask.grid = posterior.grid;
  mask.mask.assign(voxels, 0);
  LabelMap labels;
  labels.grid = posterior.grid;
  labels.labels.assign(voxels, 1);
  const std::uint16_t lesion_value =
      lesion_column >= 0 ? static_cast<std::uint16_t>(lesion_column + 1)
                         : static_cast<std::uint16_t>(n_labels + 1);
  for (std::size_t i = 0; i < voxels; ++i) {
    if (posterior.probs[i] > gamma) {
      mask.mask[i] = 1;
      labels.labels[i] = lesion_value;
      continue;
    }
    const double* row = label_post.data() + i * n_labels;
    std::size_t best = 0;
    double best_p = -kInf;
    for (std::size_t k = 0; k < n_labels; ++k) {
      if (static_cast<std::int32_t>(k) == lesion_column) continue;
      if (row[k] > best_p) {
        best_p = row[k];
        best = k;
      }
    }
    labels.labels[i] = static_cast<std::uint16_t>(best + 1);
  }
  return {mask, labels};
}

}  // namespace lesionseg
