#include "lesionseg/volume.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lesionseg {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'O', 'L'};
constexpr std::uint32_t kVersion = 1;

void write_raw(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class T>
void write_pod(std::ostream& os, T v) {
  write_raw(os, &v, sizeof(T));
}

void read_raw(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("volume file truncated");
}

template <class T>
T read_pod(std::istream& is) {
  T v;
  read_raw(is, &v, sizeof(T));
  return v;
}

struct Header {
  VolumeGrid grid;
  std::uint32_t n_channels = 0;
  std::vector<ContrastTag> tags;
  bool log_domain = false;
};

void write_header(std::ostream& os, const VolumeGrid& grid, std::uint32_t n_channels,
                  const std::vector<ContrastTag>& tags, bool log_domain) {
  write_raw(os, kMagic, 4);
  write_pod<std::uint32_t>(os, kVersion);
  for (int a = 0; a < 3; ++a) write_pod<std::uint32_t>(os, grid.dims[a]);
  for (int a = 0; a < 3; ++a)
    write_pod<float>(os, static_cast<float>(grid.voxel_size[a]));
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      write_pod<float>(os, static_cast<float>(grid.origin_affine(r, c)));
  write_pod<std::uint32_t>(os, n_channels);
  for (ContrastTag t : tags) write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t));
  write_pod<std::uint8_t>(os, log_domain ? 1 : 0);
}

Header read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[4];
  read_raw(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not an MVOL file: " + path.string());
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported MVOL version " + std::to_string(version));
  Header h;
  for (int a = 0; a < 3; ++a) h.grid.dims[a] = read_pod<std::uint32_t>(is);
  for (int a = 0; a < 3; ++a) h.grid.voxel_size[a] = read_pod<float>(is);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) h.grid.origin_affine(r, c) = read_pod<float>(is);
  h.n_channels = read_pod<std::uint32_t>(is);
  if (h.n_channels == 0 || h.n_channels > 64)
    throw std::runtime_error("bad MVOL channel count");
  for (std::uint32_t c = 0; c < h.n_channels; ++c)
    h.tags.push_back(static_cast<ContrastTag>(read_pod<std::uint8_t>(is)));
  h.log_domain = read_pod<std::uint8_t>(is) != 0;
  h.grid.validate();
  return h;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  return is;
}

void save_u16_volume(const std::filesystem::path& path, const VolumeGrid& grid,
                     const std::vector<std::uint16_t>& values) {
  auto os = open_out(path);
  write_header(os, grid, 1, {ContrastTag::kLabels}, false);
  write_raw(os, values.data(), values.size() * sizeof(std::uint16_t));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::pair<VolumeGrid, std::vector<std::uint16_t>> load_u16_volume(
    const std::filesystem::path& path) {
  auto is = open_in(path);
  const Header h = read_header(is, path);
  if (h.n_channels != 1 || h.tags[0] != ContrastTag::kLabels)
    throw std::runtime_error("not a label volume: " + path.string());
  std::vector<std::uint16_t> values(h.grid.voxel_count());
  read_raw(is, values.data(), values.size() * sizeof(std::uint16_t));
  return {h.grid, std::move(values)};
}

double lerp(double a, double b, double t) { return a + t * (b - a); }

}  // namespace

std::string contrast_name(ContrastTag tag) {
  switch (tag) {
    case ContrastTag::kT1w: return "T1w";
    case ContrastTag::kT2w: return "T2w";
    case ContrastTag::kFlair: return "FLAIR";
    case ContrastTag::kPd: return "PD";
    case ContrastTag::kLabels: return "labels";
    case ContrastTag::kOther: return "OTHER";
  }
  throw std::invalid_argument("unknown contrast tag");
}

ContrastTag contrast_from_name(const std::string& name) {
  if (name == "T1w" || name == "t1w" || name == "t1") return ContrastTag::kT1w;
  if (name == "T2w" || name == "t2w" || name == "t2") return ContrastTag::kT2w;
  if (name == "FLAIR" || name == "flair") return ContrastTag::kFlair;
  if (name == "PD" || name == "pd") return ContrastTag::kPd;
  if (name == "OTHER" || name == "other") return ContrastTag::kOther;
  throw std::invalid_argument("unknown contrast name: " + name);
}

void VolumeGrid::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] == 0) throw std::invalid_argument("grid dims must be >= 1");
    if (!(voxel_size[a] > 0.0))
      throw std::invalid_argument("voxel size must be > 0");
  }
  if (!origin_affine.allFinite() ||
      std::abs(origin_affine.determinant()) < 1e-12)
    throw std::invalid_argument("origin affine must be finite and invertible");
}

VolumeGrid VolumeGrid::isotropic(std::array<std::uint32_t, 3> dims,
                                 double voxel_size_mm) {
  VolumeGrid g;
  g.dims = dims;
  g.voxel_size = {voxel_size_mm, voxel_size_mm, voxel_size_mm};
  g.origin_affine = Eigen::Matrix4d::Identity();
  for (int a = 0; a < 3; ++a) g.origin_affine(a, a) = voxel_size_mm;
  return g;
}

bool same_geometry(const VolumeGrid& a, const VolumeGrid& b, double tol) {
  if (a.dims != b.dims) return false;
  for (int i = 0; i < 3; ++i)
    if (std::abs(a.voxel_size[i] - b.voxel_size[i]) > tol) return false;
  return (a.origin_affine - b.origin_affine).cwiseAbs().maxCoeff() <= tol;
}

void MultiContrastImage::validate() const {
  grid.validate();
  if (n_channels == 0) throw std::invalid_argument("image needs >= 1 channel");
  if (contrasts.size() != n_channels)
    throw std::invalid_argument("contrast tag count mismatch");
  if (data.size() != n_channels * grid.voxel_count())
    throw std::invalid_argument("image data size mismatch");
  for (double v : data)
    if (!std::isfinite(v)) throw std::invalid_argument("image has non-finite values");
}

MultiContrastImage MultiContrastImage::zeros(
    const VolumeGrid& grid, const std::vector<ContrastTag>& contrasts) {
  MultiContrastImage img;
  img.grid = grid;
  img.n_channels = contrasts.size();
  img.contrasts = contrasts;
  img.data.assign(img.n_channels * grid.voxel_count(), 0.0);
  return img;
}

std::uint16_t LabelMap::max_label() const {
  std::uint16_t m = 0;
  for (std::uint16_t v : labels) m = std::max(m, v);
  return m;
}

void LabelMap::validate() const {
  grid.validate();
  if (labels.size() != grid.voxel_count())
    throw std::invalid_argument("label map size mismatch");
  for (std::uint16_t v : labels)
    if (v == 0) throw std::invalid_argument("labels must be >= 1");
}

std::size_t LesionMask::count() const {
  std::size_t n = 0;
  for (std::uint8_t v : mask) n += v;
  return n;
}

void LesionMask::validate() const {
  grid.validate();
  if (mask.size() != grid.voxel_count())
    throw std::invalid_argument("mask size mismatch");
  for (std::uint8_t v : mask)
    if (v > 1) throw std::invalid_argument("mask values must be 0 or 1");
}

void ProbabilityMap::validate() const {
  grid.validate();
  if (probs.size() != grid.voxel_count())
    throw std::invalid_argument("probability map size mismatch");
  for (double v : probs)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("probabilities must lie in [0,1]");
}

MultiContrastImage log_transform(const MultiContrastImage& raw, double floor_epsilon) {
  if (raw.log_domain)
    throw std::invalid_argument("log_transform: input is already log-domain");
  if (!(floor_epsilon > 0.0))
    throw std::invalid_argument("log_transform: floor must be > 0");
  MultiContrastImage out = raw;
  for (std::size_t idx = 0; idx < out.data.size(); ++idx) {
    const double v = out.data[idx];
    if (!std::isfinite(v))
      throw std::invalid_argument("log_transform: non-finite intensity at flat index " +
                                  std::to_string(idx));
    out.data[idx] = std::log(std::max(v, floor_epsilon));
  }
  out.log_domain = true;
  return out;
}

ProbabilityMap resample_affine(const ProbabilityMap& src, const VolumeGrid& target,
                               const Eigen::Matrix4d& affine) {
  src.validate();
  target.validate();
  if (!affine.allFinite() || std::abs(affine.determinant()) < 1e-12)
    throw std::invalid_argument("resample_affine: singular affine");

  // Composite map: target voxel index -> source voxel index.
  const Eigen::Matrix4d m =
      src.grid.origin_affine.inverse() * affine * target.origin_affine;

  ProbabilityMap out;
  out.grid = target;
  out.probs.assign(target.voxel_count(), 0.0);

  const auto& sd = src.grid.dims;
  const double mx = static_cast<double>(sd[0]) - 1.0;
  const double my = static_cast<double>(sd[1]) - 1.0;
  const double mz = static_cast<double>(sd[2]) - 1.0;

  std::size_t i = 0;
  for (std::uint32_t z = 0; z < target.dims[2]; ++z) {
    for (std::uint32_t y = 0; y < target.dims[1]; ++y) {
      for (std::uint32_t x = 0; x < target.dims[0]; ++x, ++i) {
        const Eigen::Vector4d p = m * Eigen::Vector4d(x, y, z, 1.0);
        const double px = p[0], py = p[1], pz = p[2];
        if (px < 0.0 || px > mx || py < 0.0 || py > my || pz < 0.0 || pz > mz)
          continue;
        const double fx0 = std::floor(px), fy0 = std::floor(py), fz0 = std::floor(pz);
        const std::size_t x0 = static_cast<std::size_t>(fx0);
        const std::size_t y0 = static_cast<std::size_t>(fy0);
        const std::size_t z0 = static_cast<std::size_t>(fz0);
        const std::size_t x1 = std::min<std::size_t>(x0 + 1, sd[0] - 1);
        const std::size_t y1 = std::min<std::size_t>(y0 + 1, sd[1] - 1);
        const std::size_t z1 = std::min<std::size_t>(z0 + 1, sd[2] - 1);
        const double tx = px - fx0, ty = py - fy0, tz = pz - fz0;
        auto at = [&](std::size_t xx, std::size_t yy, std::size_t zz) {
          return src.probs[src.grid.flat_index(xx, yy, zz)];
        };
        const double c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
        const double c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
        const double c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
        const double c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
        const double c0 = lerp(c00, c10, ty);
        const double c1 = lerp(c01, c11, ty);
        const double v = lerp(c0, c1, tz);
        out.probs[i] = std::min(1.0, std::max(0.0, v));
      }
    }
  }
  return out;
}

LesionMask binarize(const ProbabilityMap& map, double threshold) {
  LesionMask m;
  m.grid = map.grid;
  m.mask.resize(map.probs.size());
  for (std::size_t i = 0; i < map.probs.size(); ++i)
    m.mask[i] = map.probs[i] >= threshold ? 1 : 0;
  return m;
}

void save_image(const std::filesystem::path& path, const MultiContrastImage& image) {
  image.validate();
  auto os = open_out(path);
  write_header(os, image.grid, static_cast<std::uint32_t>(image.n_channels),
               image.contrasts, image.log_domain);
  std::vector<float> buf(image.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<float>(image.data[i]);
  write_raw(os, buf.data(), buf.size() * sizeof(float));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

MultiContrastImage load_image(const std::filesystem::path& path) {
  auto is = open_in(path);
  const Header h = read_header(is, path);
  for (ContrastTag t : h.tags)
    if (t == ContrastTag::kLabels)
      throw std::runtime_error("label volume where image expected: " + path.string());
  MultiContrastImage img;
  img.grid = h.grid;
  img.n_channels = h.n_channels;
  img.contrasts = h.tags;
  img.log_domain = h.log_domain;
  std::vector<float> buf(img.n_channels * h.grid.voxel_count());
  read_raw(is, buf.data(), buf.size() * sizeof(float));
  img.data.assign(buf.begin(), buf.end());
  img.validate();
  return img;
}

void save_labels(const std::filesystem::path& path, const LabelMap& labels) {
  labels.validate();
  save_u16_volume(path, labels.grid, labels.labels);
}

LabelMap load_labels(const std::filesystem::path& path) {
  auto [grid, values] = load_u16_volume(path);
  LabelMap l;
  l.grid = grid;
  l.labels = std::move(values);
  l.validate();
  return l;
}

void save_mask(const std::filesystem::path& path, const LesionMask& mask) {
  mask.validate();
  std::vector<std::uint16_t> values(mask.mask.begin(), mask.mask.end());
  save_u16_volume(path, mask.grid, values);
}

LesionMask load_mask(const std::filesystem::path& path) {
  auto [grid, values] = load_u16_volume(path);
  LesionMask m;
  m.grid = grid;
  m.mask.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] > 1)
      throw std::runtime_error("mask file has non-binary values: " + path.string());
    m.mask[i] = static_cast<std::uint8_t>(values[i]);
  }
  return m;
}

void save_probability(const std::filesystem::path& path, const ProbabilityMap& map) {
  map.validate();
  auto os = open_out(path);
  write_header(os, map.grid, 1, {ContrastTag::kOther}, false);
  std::vector<float> buf(map.probs.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<float>(map.probs[i]);
  write_raw(os, buf.data(), buf.size() * sizeof(float));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

ProbabilityMap load_probability(const std::filesystem::path& path) {
  auto is = open_in(path);
  const Header h = read_header(is, path);
  if (h.n_channels != 1)
    throw std::runtime_error("probability map must have one channel: " + path.string());
  ProbabilityMap map;
  map.grid = h.grid;
  std::vector<float> buf(h.grid.voxel_count());
  read_raw(is, buf.data(), buf.size() * sizeof(float));
  map.probs.assign(buf.begin(), buf.end());
  for (double& v : map.probs) v = std::min(1.0, std::max(0.0, v));
  return map;
}

}  // namespace lesionseg
