#include "lesionseg/shape_prior.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "lesionseg/logging.hpp"
#include "lesionseg/parallel.hpp"

namespace lesionseg {

namespace {

constexpr double kProbFloor = 1e-7;
constexpr char kMagic[4] = {'V', 'A', 'E', '1'};

struct Dims3 {
  int x = 0, y = 0, z = 0;
  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) *
           static_cast<std::size_t>(z);
  }
};

struct ConvSpec {
  int in_ch = 0, out_ch = 0;
  Dims3 in, out;
  std::size_t w_off = 0, b_off = 0;
  std::size_t w_count() const {
    return static_cast<std::size_t>(in_ch) * out_ch * 27;
  }
};

struct Layout {
  std::vector<ConvSpec> enc;  // stride-2 convolutions, halving each axis
  std::vector<ConvSpec> dec;  // stride-2 transposed convolutions, doubling
  std::size_t enc_dense_w = 0, enc_dense_b = 0;  // features -> 2L
  std::size_t dec_dense_w = 0, dec_dense_b = 0;  // L -> features
  std::size_t features = 0;
  Dims3 coarse;
  int latent = 0;
  std::size_t total = 0;
};

Layout make_layout(const VolumeGrid& grid, int latent, const std::vector<int>& channels) {
  if (latent < 1) throw std::invalid_argument("latent dimension must be >= 1");
  if (channels.empty()) throw std::invalid_argument("channel schedule is empty");
  for (int c : channels)
    if (c < 1) throw std::invalid_argument("channel counts must be >= 1");
  Dims3 d{static_cast<int>(grid.dims[0]), static_cast<int>(grid.dims[1]),
          static_cast<int>(grid.dims[2])};
  const int factor = 1 << channels.size();
  for (int v : {d.x, d.y, d.z})
    if (v % factor != 0)
      throw std::invalid_argument("training grid dims must be divisible by 2^layers");

  Layout lay;
  lay.latent = latent;
  std::size_t off = 0;
  int in_ch = 1;
  Dims3 cur = d;
  for (int out_ch : channels) {
    ConvSpec s;
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.in = cur;
    s.out = {cur.x / 2, cur.y / 2, cur.z / 2};
    s.w_off = off;
    off += s.w_count();
    s.b_off = off;
    off += static_cast<std::size_t>(out_ch);
    lay.enc.push_back(s);
    in_ch = out_ch;
    cur = s.out;
  }
  lay.coarse = cur;
  lay.features = static_cast<std::size_t>(channels.back()) * cur.count();

  lay.enc_dense_w = off;
  off += lay.features * static_cast<std::size_t>(2 * latent);
  lay.enc_dense_b = off;
  off += static_cast<std::size_t>(2 * latent);
  lay.dec_dense_w = off;
  off += lay.features * static_cast<std::size_t>(latent);
  lay.dec_dense_b = off;
  off += lay.features;

  for (std::size_t l = channels.size(); l-- > 0;) {
    ConvSpec s;
    s.in_ch = channels[l];
    s.out_ch = l == 0 ? 1 : channels[l - 1];
    s.in = cur;
    s.out = {cur.x * 2, cur.y * 2, cur.z * 2};
    s.w_off = off;
    off += s.w_count();
    s.b_off = off;
    off += static_cast<std::size_t>(s.out_ch);
    lay.dec.push_back(s);
    cur = s.out;
  }
  lay.total = off;
  return lay;
}

Layout make_layout(const ShapePriorModel& m) {
  return make_layout(m.training_grid, m.latent_dim, m.channels);
}

inline std::size_t vox(const Dims3& d, int c, int z, int y, int x) {
  return ((static_cast<std::size_t>(c) * d.z + z) * d.y + y) * d.x + x;
}

// Stride-2, kernel-3, pad-1 convolution with bias; pre-activation output.
void conv_forward(const double* theta, const ConvSpec& s, const double* in, double* out) {
  const double* w = theta + s.w_off;
  const double* b = theta + s.b_off;
  for (int oc = 0; oc < s.out_ch; ++oc)
    for (int oz = 0; oz < s.out.z; ++oz)
      for (int oy = 0; oy < s.out.y; ++oy)
        for (int ox = 0; ox < s.out.x; ++ox) {
          double acc = b[oc];
          for (int ic = 0; ic < s.in_ch; ++ic) {
            const double* wk = w + (static_cast<std::size_t>(oc) * s.in_ch + ic) * 27;
            for (int kz = 0; kz < 3; ++kz) {
              const int iz = 2 * oz + kz - 1;
              if (iz < 0 || iz >= s.in.z) continue;
              for (int ky = 0; ky < 3; ++ky) {
                const int iy = 2 * oy + ky - 1;
                if (iy < 0 || iy >= s.in.y) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int ix = 2 * ox + kx - 1;
                  if (ix < 0 || ix >= s.in.x) continue;
                  acc += wk[kz * 9 + ky * 3 + kx] * in[vox(s.in, ic, iz, iy, ix)];
                }
              }
            }
          }
          out[vox(s.out, oc, oz, oy, ox)] = acc;
        }
}

void conv_backward(const double* theta, const ConvSpec& s, const double* in,
                   const double* dout, double* grad, double* din) {
  const double* w = theta + s.w_off;
  double* dw = grad + s.w_off;
  double* db = grad + s.b_off;
  for (int oc = 0; oc < s.out_ch; ++oc)
    for (int oz = 0; oz < s.out.z; ++oz)
      for (int oy = 0; oy < s.out.y; ++oy)
        for (int ox = 0; ox < s.out.x; ++ox) {
          const double g = dout[vox(s.out, oc, oz, oy, ox)];
          if (g == 0.0) continue;
          db[oc] += g;
          for (int ic = 0; ic < s.in_ch; ++ic) {
            const std::size_t wbase =
                (static_cast<std::size_t>(oc) * s.in_ch + ic) * 27;
            for (int kz = 0; kz < 3; ++kz) {
              const int iz = 2 * oz + kz - 1;
              if (iz < 0 || iz >= s.in.z) continue;
              for (int ky = 0; ky < 3; ++ky) {
                const int iy = 2 * oy + ky - 1;
                if (iy < 0 || iy >= s.in.y) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int ix = 2 * ox + kx - 1;
                  if (ix < 0 || ix >= s.in.x) continue;
                  const std::size_t ii = vox(s.in, ic, iz, iy, ix);
                  dw[wbase + kz * 9 + ky * 3 + kx] += g * in[ii];
                  if (din) din[ii] += g * w[wbase + kz * 9 + ky * 3 + kx];
                }
              }
            }
          }
        }
}

// Stride-2, kernel-3, pad-1, output-padding-1 transposed convolution with
// bias; doubles each axis. Weight layout is input-channel major.
void deconv_forward(const double* theta, const ConvSpec& s, const double* in, double* out) {
  const double* w = theta + s.w_off;
  const double* b = theta + s.b_off;
  for (int oc = 0; oc < s.out_ch; ++oc)
    std::fill(out + vox(s.out, oc, 0, 0, 0), out + vox(s.out, oc + 1, 0, 0, 0), b[oc]);
  for (int ic = 0; ic < s.in_ch; ++ic)
    for (int uz = 0; uz < s.in.z; ++uz)
      for (int uy = 0; uy < s.in.y; ++uy)
        for (int ux = 0; ux < s.in.x; ++ux) {
          const double v = in[vox(s.in, ic, uz, uy, ux)];
          if (v == 0.0) continue;
          for (int oc = 0; oc < s.out_ch; ++oc) {
            const double* wk = w + (static_cast<std::size_t>(ic) * s.out_ch + oc) * 27;
            for (int kz = 0; kz < 3; ++kz) {
              const int vz = 2 * uz + kz - 1;
              if (vz < 0 || vz >= s.out.z) continue;
              for (int ky = 0; ky < 3; ++ky) {
                const int vy = 2 * uy + ky - 1;
                if (vy < 0 || vy >= s.out.y) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int vx = 2 * ux + kx - 1;
                  if (vx < 0 || vx >= s.out.x) continue;
                  out[vox(s.out, oc, vz, vy, vx)] += wk[kz * 9 + ky * 3 + kx] * v;
                }
              }
            }
          }
        }
}

void deconv_backward(const double* theta, const ConvSpec& s, const double* in,
                     const double* dout, double* grad, double* din) {
  const double* w = theta + s.w_off;
  double* dw = grad + s.w_off;
  double* db = grad + s.b_off;
  for (int oc = 0; oc < s.out_ch; ++oc) {
    double acc = 0.0;
    const double* base = dout + vox(s.out, oc, 0, 0, 0);
    for (std::size_t i = 0; i < s.out.count(); ++i) acc += base[i];
    db[oc] += acc;
  }
  for (int ic = 0; ic < s.in_ch; ++ic)
    for (int uz = 0; uz < s.in.z; ++uz)
      for (int uy = 0; uy < s.in.y; ++uy)
        for (int ux = 0; ux < s.in.x; ++ux) {
          const std::size_t ii = vox(s.in, ic, uz, uy, ux);
          const double v = in[ii];
          double di = 0.0;
          for (int oc = 0; oc < s.out_ch; ++oc) {
            const std::size_t wbase =
                (static_cast<std::size_t>(ic) * s.out_ch + oc) * 27;
            for (int kz = 0; kz < 3; ++kz) {
              const int vz = 2 * uz + kz - 1;
              if (vz < 0 || vz >= s.out.z) continue;
              for (int ky = 0; ky < 3; ++ky) {
                const int vy = 2 * uy + ky - 1;
                if (vy < 0 || vy >= s.out.y) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int vx = 2 * ux + kx - 1;
                  if (vx < 0 || vx >= s.out.x) continue;
                  const double g = dout[vox(s.out, oc, vz, vy, vx)];
                  dw[wbase + kz * 9 + ky * 3 + kx] += g * v;
                  di += g * w[wbase + kz * 9 + ky * 3 + kx];
                }
              }
            }
          }
          if (din) din[ii] += di;
        }
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct EncoderActs {
  std::vector<std::vector<double>> pre;  // per conv layer
  std::vector<std::vector<double>> act;  // act[0] = input, then post-ReLU
  Eigen::VectorXd mu, s, sigma;
};

void encoder_forward(const ShapePriorModel& model, const Layout& lay,
                     std::vector<double> input, EncoderActs& acts) {
  acts.pre.clear();
  acts.act.clear();
  acts.act.push_back(std::move(input));
  const double* theta = model.theta.data();
  for (const ConvSpec& s : lay.enc) {
    std::vector<double> pre(static_cast<std::size_t>(s.out_ch) * s.out.count());
    conv_forward(theta, s, acts.act.back().data(), pre.data());
    std::vector<double> act(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) act[i] = std::max(pre[i], 0.0);
    acts.pre.push_back(std::move(pre));
    acts.act.push_back(std::move(act));
  }
  const int l2 = 2 * lay.latent;
  const double* w = theta + lay.enc_dense_w;
  const double* b = theta + lay.enc_dense_b;
  const std::vector<double>& feat = acts.act.back();
  acts.mu.resize(lay.latent);
  acts.s.resize(lay.latent);
  acts.sigma.resize(lay.latent);
  for (int r = 0; r < l2; ++r) {
    double acc = b[r];
    const double* wr = w + static_cast<std::size_t>(r) * lay.features;
    for (std::size_t i = 0; i < lay.features; ++i) acc += wr[i] * feat[i];
    if (r < lay.latent)
      acts.mu[r] = acc;
    else
      acts.s[r - lay.latent] = acc;
  }
  for (int l = 0; l < lay.latent; ++l) acts.sigma[l] = softplus(acts.s[l]);
}

// Backpropagates (dmu, ds) through the dense head and convolutions.
void encoder_backward(const ShapePriorModel& model, const Layout& lay,
                      const EncoderActs& acts, const Eigen::VectorXd& dmu,
                      const Eigen::VectorXd& ds, double* grad) {
  const double* theta = model.theta.data();
  const std::vector<double>& feat = acts.act.back();
  double* dw = grad + lay.enc_dense_w;
  double* db = grad + lay.enc_dense_b;
  std::vector<double> dfeat(lay.features, 0.0);
  const int l2 = 2 * lay.latent;
  for (int r = 0; r < l2; ++r) {
    const double g = r < lay.latent ? dmu[r] : ds[r - lay.latent];
    if (g == 0.0) continue;
    db[r] += g;
    const double* wr = model.theta.data() + lay.enc_dense_w +
                       static_cast<std::size_t>(r) * lay.features;
    double* dwr = dw + static_cast<std::size_t>(r) * lay.features;
    for (std::size_t i = 0; i < lay.features; ++i) {
      dwr[i] += g * feat[i];
      dfeat[i] += g * wr[i];
    }
  }
  std::vector<double> dcur = std::move(dfeat);
  for (std::size_t l = lay.enc.size(); l-- > 0;) {
    const std::vector<double>& pre = acts.pre[l];
    for (std::size_t i = 0; i < dcur.size(); ++i)
      if (pre[i] <= 0.0) dcur[i] = 0.0;
    std::vector<double> din;
    const bool need_din = l > 0;
    if (need_din) din.assign(acts.act[l].size(), 0.0);
    conv_backward(theta, lay.enc[l], acts.act[l].data(), dcur.data(), grad,
                  need_din ? din.data() : nullptr);
    dcur = std::move(din);
  }
}

struct DecoderActs {
  Eigen::VectorXd h;
  std::vector<double> dense_pre;
  std::vector<std::vector<double>> pre;  // per deconv layer; last = logits
  std::vector<std::vector<double>> act;  // act[0] = ReLU(dense), then post-ReLU
};

void decoder_forward(const ShapePriorModel& model, const Layout& lay,
                     const Eigen::VectorXd& h, DecoderActs& acts) {
  const double* theta = model.theta.data();
  const double* w = theta + lay.dec_dense_w;
  const double* b = theta + lay.dec_dense_b;
  acts.h = h;
  acts.dense_pre.resize(lay.features);
  for (std::size_t r = 0; r < lay.features; ++r) {
    double acc = b[r];
    const double* wr = w + r * static_cast<std::size_t>(lay.latent);
    for (int l = 0; l < lay.latent; ++l) acc += wr[l] * h[l];
    acts.dense_pre[r] = acc;
  }
  acts.pre.clear();
  acts.act.clear();
  std::vector<double> act0(lay.features);
  for (std::size_t i = 0; i < lay.features; ++i)
    act0[i] = std::max(acts.dense_pre[i], 0.0);
  acts.act.push_back(std::move(act0));
  for (std::size_t l = 0; l < lay.dec.size(); ++l) {
    const ConvSpec& s = lay.dec[l];
    std::vector<double> pre(static_cast<std::size_t>(s.out_ch) * s.out.count());
    deconv_forward(theta, s, acts.act.back().data(), pre.data());
    const bool last = l + 1 == lay.dec.size();
    if (!last) {
      std::vector<double> act(pre.size());
      for (std::size_t i = 0; i < pre.size(); ++i) act[i] = std::max(pre[i], 0.0);
      acts.act.push_back(std::move(act));
    }
    acts.pre.push_back(std::move(pre));
  }
}

// Backpropagates dlogits; returns d objective / d h.
Eigen::VectorXd decoder_backward(const ShapePriorModel& model, const Layout& lay,
                                 const DecoderActs& acts, std::vector<double> dlogits,
                                 double* grad) {
  const double* theta = model.theta.data();
  std::vector<double> dcur = std::move(dlogits);
  for (std::size_t l = lay.dec.size(); l-- > 0;) {
    if (l + 1 != lay.dec.size()) {
      const std::vector<double>& pre = acts.pre[l];
      for (std::size_t i = 0; i < dcur.size(); ++i)
        if (pre[i] <= 0.0) dcur[i] = 0.0;
    }
    std::vector<double> din(acts.act[l].size(), 0.0);
    deconv_backward(theta, lay.dec[l], acts.act[l].data(), dcur.data(), grad,
                    din.data());
    dcur = std::move(din);
  }
  for (std::size_t i = 0; i < lay.features; ++i)
    if (acts.dense_pre[i] <= 0.0) dcur[i] = 0.0;
  double* dw = grad + lay.dec_dense_w;
  double* db = grad + lay.dec_dense_b;
  Eigen::VectorXd dh = Eigen::VectorXd::Zero(lay.latent);
  const double* w = theta + lay.dec_dense_w;
  for (std::size_t r = 0; r < lay.features; ++r) {
    const double g = dcur[r];
    if (g == 0.0) continue;
    db[r] += g;
    const double* wr = w + r * static_cast<std::size_t>(lay.latent);
    double* dwr = dw + r * static_cast<std::size_t>(lay.latent);
    for (int l = 0; l < lay.latent; ++l) {
      dwr[l] += g * acts.h[l];
      dh[l] += g * wr[l];
    }
  }
  return dh;
}

std::vector<double> mask_to_input(const LesionMask& mask) {
  std::vector<double> v(mask.mask.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.mask[i] ? 1.0 : 0.0;
  return v;
}

struct ElboWork {
  EncoderActs enc;
  DecoderActs dec;
};

ElboResult elbo_impl(const ShapePriorModel& model, const Layout& lay,
                     const std::vector<double>& input,
                     const std::vector<Eigen::VectorXd>& eps, ElboWork& work) {
  ElboResult out;
  out.grad.assign(model.theta.size(), 0.0);
  encoder_forward(model, lay, input, work.enc);
  const Eigen::VectorXd& mu = work.enc.mu;
  const Eigen::VectorXd& sigma = work.enc.sigma;

  double kl = 0.0;
  for (int l = 0; l < lay.latent; ++l)
    kl += 0.5 * (mu[l] * mu[l] + sigma[l] * sigma[l] -
                 2.0 * std::log(sigma[l]) - 1.0);
  out.kl = kl;

  const double inv_mc = 1.0 / static_cast<double>(eps.size());
  Eigen::VectorXd dmu = -mu;                     // from -KL
  Eigen::VectorXd dsigma(lay.latent);
  for (int l = 0; l < lay.latent; ++l) dsigma[l] = -(sigma[l] - 1.0 / sigma[l]);

  double rec = 0.0;
  for (const Eigen::VectorXd& e : eps) {
    const Eigen::VectorXd h = mu + sigma.cwiseProduct(e);
    decoder_forward(model, lay, h, work.dec);
    const std::vector<double>& logits = work.dec.pre.back();
    std::vector<double> dlogits(logits.size());
    double rec_s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double t = logits[i];
      const double f = sigmoid(t);
      const double omf = sigmoid(-t);
      const double zi = input[i];
      rec_s += zi * std::log(std::max(f, kProbFloor)) +
               (1.0 - zi) * std::log(std::max(omf, kProbFloor));
      double dt = 0.0;
      if (zi == 1.0 && f > kProbFloor) dt = omf;
      if (zi == 0.0 && omf > kProbFloor) dt = -f;
      dlogits[i] = dt * inv_mc;
    }
    rec += rec_s * inv_mc;
    const Eigen::VectorXd dh =
        decoder_backward(model, lay, work.dec, std::move(dlogits), out.grad.data());
    dmu += dh;
    dsigma += dh.cwiseProduct(e);
  }
  out.reconstruction = rec;
  out.elbo = -kl + rec;

  Eigen::VectorXd ds(lay.latent);
  for (int l = 0; l < lay.latent; ++l) ds[l] = dsigma[l] * sigmoid(work.enc.s[l]);
  encoder_backward(model, lay, work.enc, dmu, ds, out.grad.data());
  return out;
}

ProbabilityMap rotate_mask_map(const LesionMask& mask, double degrees, int axis,
                               double sign) {
  const VolumeGrid& grid = mask.grid;
  const double theta = sign * degrees * M_PI / 180.0;
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  const double c = std::cos(theta), s = std::sin(theta);
  const int a = (axis + 1) % 3, b = (axis + 2) % 3;
  r(a, a) = c;
  r(a, b) = -s;
  r(b, a) = s;
  r(b, b) = c;
  const Eigen::Vector3d center = grid.voxel_center_world(
      0.5 * (grid.dims[0] - 1), 0.5 * (grid.dims[1] - 1), 0.5 * (grid.dims[2] - 1));
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  affine.block<3, 3>(0, 0) = r;
  affine.block<3, 1>(0, 3) = center - r * center;

  ProbabilityMap src;
  src.grid = grid;
  src.probs.assign(mask.mask.begin(), mask.mask.end());
  return resample_affine(src, grid, affine);
}

}  // namespace

void ShapeTrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1 || mc_samples < 1)
    throw std::invalid_argument("epochs, batch size and mc samples must be >= 1");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
  if (!(rotation_degrees >= 0.0))
    throw std::invalid_argument("rotation degrees must be >= 0");
}

void ShapePriorModel::validate() const {
  training_grid.validate();
  const Layout lay = make_layout(*this);
  if (theta.size() != lay.total)
    throw std::invalid_argument("parameter vector size does not match architecture");
}

ShapePriorModel ShapePriorModel::create(const VolumeGrid& training_grid, int latent_dim,
                                        std::vector<int> channels, std::uint64_t seed) {
  ShapePriorModel m;
  m.training_grid = training_grid;
  m.latent_dim = latent_dim;
  m.channels = std::move(channels);
  const Layout lay = make_layout(m);
  m.theta.assign(lay.total, 0.0);
  Rng rng(seed);
  auto init_block = [&](std::size_t w_off, std::size_t w_count, std::size_t fan_in) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < w_count; ++i)
      m.theta[w_off + i] = rng.uniform_range(-bound, bound);
  };
  for (const ConvSpec& s : lay.enc)
    init_block(s.w_off, s.w_count(), static_cast<std::size_t>(s.in_ch) * 27);
  init_block(lay.enc_dense_w, lay.features * static_cast<std::size_t>(2 * lay.latent),
             lay.features);
  init_block(lay.dec_dense_w, lay.features * static_cast<std::size_t>(lay.latent),
             static_cast<std::size_t>(lay.latent));
  for (const ConvSpec& s : lay.dec)
    init_block(s.w_off, s.w_count(), static_cast<std::size_t>(s.in_ch) * 27);
  return m;
}

EncodeResult encode(const ShapePriorModel& model, const LesionMask& mask) {
  model.validate();
  if (!same_geometry(mask.grid, model.training_grid))
    throw std::invalid_argument("encode: mask is not on the training grid");
  const Layout lay = make_layout(model);
  EncoderActs acts;
  encoder_forward(model, lay, mask_to_input(mask), acts);
  return {acts.mu, acts.sigma};
}

ProbabilityMap decode(const ShapePriorModel& model, const Eigen::VectorXd& h) {
  model.validate();
  if (h.size() != model.latent_dim || !h.allFinite())
    throw std::invalid_argument("decode: bad latent vector");
  const Layout lay = make_layout(model);
  DecoderActs acts;
  decoder_forward(model, lay, h, acts);
  ProbabilityMap out;
  out.grid = model.training_grid;
  const std::vector<double>& logits = acts.pre.back();
  out.probs.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out.probs[i] = std::clamp(sigmoid(logits[i]), kProbFloor, 1.0 - kProbFloor);
  return out;
}

ElboResult elbo_with_gradient(const ShapePriorModel& model, const LesionMask& mask,
                              int mc_samples, Rng& rng) {
  model.validate();
  if (!same_geometry(mask.grid, model.training_grid))
    throw std::invalid_argument("elbo: mask is not on the training grid");
  if (mc_samples < 1) throw std::invalid_argument("mc_samples must be >= 1");
  const Layout lay = make_layout(model);
  std::vector<Eigen::VectorXd> eps(mc_samples);
  for (auto& e : eps) {
    e.resize(model.latent_dim);
    for (int l = 0; l < model.latent_dim; ++l) e[l] = rng.normal();
  }
  ElboWork work;
  return elbo_impl(model, lay, mask_to_input(mask), eps, work);
}

void save_shape_training_log(const std::filesystem::path& path,
                             const std::vector<ShapeTrainLogRow>& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write training log: " + path.string());
  os << "epoch,mean_elbo,mean_kl,mean_reconstruction\n";
  char buf[128];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g", row.epoch, row.mean_elbo,
                  row.mean_kl, row.mean_reconstruction);
    os << buf << "\n";
  }
}

ShapePriorModel train_shape_prior(const std::vector<LesionMask>& masks,
                                  const ShapeTrainConfig& config,
                                  std::vector<ShapeTrainLogRow>* log) {
  config.validate();
  if (masks.empty()) throw std::invalid_argument("training needs at least one mask");
  for (const auto& m : masks) {
    m.validate();
    if (!same_geometry(m.grid, masks[0].grid))
      throw std::invalid_argument("training masks must share a grid");
  }
  const VolumeGrid grid = masks[0].grid;

  std::vector<std::vector<double>> data;
  for (const auto& m : masks) data.push_back(mask_to_input(m));
  if (config.rotation_degrees > 0.0) {
    for (const auto& m : masks)
      for (int axis = 0; axis < 3; ++axis)
        for (double sign : {1.0, -1.0}) {
          const LesionMask rot =
              binarize(rotate_mask_map(m, config.rotation_degrees, axis, sign), 0.5);
          data.push_back(mask_to_input(rot));
        }
  }

  ShapePriorModel model = ShapePriorModel::create(grid, 32, {8, 16, 32}, config.seed);
  const Layout lay = make_layout(model);
  Rng rng(mix64(config.seed + 1));

  std::vector<double> adam_m(lay.total, 0.0), adam_v(lay.total, 0.0);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  long adam_t = 0;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.uniform() * i);
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    double ep_elbo = 0.0, ep_kl = 0.0, ep_rec = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t count =
          std::min<std::size_t>(config.batch_size, order.size() - start);
      ++step;
      std::vector<std::vector<Eigen::VectorXd>> eps(count);
      for (std::size_t b = 0; b < count; ++b) {
        eps[b].resize(config.mc_samples);
        for (auto& e : eps[b]) {
          e.resize(model.latent_dim);
          for (int l = 0; l < model.latent_dim; ++l) e[l] = rng.normal();
        }
      }
      std::vector<ElboResult> results(count);
      parallel_blocks(
          count,
          [&](std::size_t, std::size_t begin, std::size_t end) {
            ElboWork work;
            for (std::size_t b = begin; b < end; ++b)
              results[b] = elbo_impl(model, lay, data[order[start + b]], eps[b], work);
          },
          1);

      std::vector<double> grad(lay.total, 0.0);
      double batch_elbo = 0.0;
      for (std::size_t b = 0; b < count; ++b) {
        batch_elbo += results[b].elbo;
        ep_elbo += results[b].elbo;
        ep_kl += results[b].kl;
        ep_rec += results[b].reconstruction;
        for (std::size_t i = 0; i < lay.total; ++i) grad[i] += results[b].grad[i];
      }
      if (!std::isfinite(batch_elbo))
        throw std::runtime_error("shape prior training diverged at step " +
                                 std::to_string(step));
      const double scale = 1.0 / static_cast<double>(count);
      ++adam_t;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam_t));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam_t));
      for (std::size_t i = 0; i < lay.total; ++i) {
        const double g = -grad[i] * scale;  // minimize -ELBO
        adam_m[i] = beta1 * adam_m[i] + (1.0 - beta1) * g;
        adam_v[i] = beta2 * adam_v[i] + (1.0 - beta2) * g * g;
        model.theta[i] -= config.learning_rate * (adam_m[i] / bc1) /
                          (std::sqrt(adam_v[i] / bc2) + adam_eps);
      }
    }
    if (log) {
      const double inv = 1.0 / static_cast<double>(data.size());
      log->push_back({epoch, ep_elbo * inv, ep_kl * inv, ep_rec * inv});
    }
    if (epoch == 1 || epoch % 50 == 0 || epoch == config.epochs)
      log_debug("shape prior epoch ", epoch, " mean elbo ",
                ep_elbo / static_cast<double>(data.size()));
  }
  return model;
}

ProbabilityMap sample_prior(const ShapePriorModel& model, Rng& rng) {
  Eigen::VectorXd h(model.latent_dim);
  for (int l = 0; l < model.latent_dim; ++l) h[l] = rng.normal();
  return decode(model, h);
}

namespace {

template <class T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace

void save_shape_prior(const std::filesystem::path& path, const ShapePriorModel& model) {
  model.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write shape prior: " + path.string());
  os.write(kMagic, 4);
  write_pod(os, std::uint32_t{1});
  for (int a = 0; a < 3; ++a) write_pod(os, model.training_grid.dims[a]);
  for (int a = 0; a < 3; ++a)
    write_pod(os, static_cast<float>(model.training_grid.voxel_size[a]));
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      write_pod(os, static_cast<float>(model.training_grid.origin_affine(r, c)));
  write_pod(os, static_cast<std::uint32_t>(model.latent_dim));
  write_pod(os, static_cast<std::uint32_t>(model.channels.size()));
  for (int c : model.channels) write_pod(os, static_cast<std::uint32_t>(c));
  write_pod(os, static_cast<std::uint64_t>(model.theta.size()));
  for (double t : model.theta) write_pod(os, static_cast<float>(t));
  if (!os) throw std::runtime_error("short write: " + path.string());
}

ShapePriorModel load_shape_prior(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open shape prior: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a shape prior file: " + path.string());
  std::uint32_t version = 0;
  read_pod(is, version);
  if (version != 1) throw std::runtime_error("unsupported shape prior version");
  ShapePriorModel m;
  for (int a = 0; a < 3; ++a) read_pod(is, m.training_grid.dims[a]);
  for (int a = 0; a < 3; ++a) {
    float v = 0;
    read_pod(is, v);
    m.training_grid.voxel_size[a] = v;
  }
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      float v = 0;
      read_pod(is, v);
      m.training_grid.origin_affine(r, c) = v;
    }
  std::uint32_t latent = 0, n_layers = 0;
  read_pod(is, latent);
  read_pod(is, n_layers);
  if (!is || latent == 0 || n_layers == 0 || n_layers > 16)
    throw std::runtime_error("corrupt shape prior architecture");
  m.latent_dim = static_cast<int>(latent);
  m.channels.resize(n_layers);
  for (auto& c : m.channels) {
    std::uint32_t v = 0;
    read_pod(is, v);
    c = static_cast<int>(v);
  }
  std::uint64_t count = 0;
  read_pod(is, count);
  const Layout lay = make_layout(m);
  if (count != lay.total)
    throw std::runtime_error("shape prior weight count mismatch");
  m.theta.resize(count);
  for (auto& t : m.theta) {
    float v = 0;
    read_pod(is, v);
    t = v;
  }
  if (!is) throw std::runtime_error("truncated shape prior file: " + path.string());
  m.validate();
  return m;
}

}  // namespace lesionseg
