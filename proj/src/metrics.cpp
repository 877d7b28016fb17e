#include "lesionseg/metrics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace lesionseg {

namespace {

void require_same_grid(const LesionMask& a, const LesionMask& b) {
  if (!same_geometry(a.grid, b.grid))
    throw std::invalid_argument("masks are on different grids");
}

struct Counts {
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

Counts count_overlap(const LesionMask& pred, const LesionMask& truth) {
  require_same_grid(pred, truth);
  Counts c;
  for (std::size_t i = 0; i < pred.mask.size(); ++i) {
    const bool p = pred.mask[i] != 0;
    const bool t = truth.mask[i] != 0;
    c.tp += (p && t) ? 1 : 0;
    c.fp += (p && !t) ? 1 : 0;
    c.fn += (!p && t) ? 1 : 0;
  }
  return c;
}

}  // namespace

double dice(const LesionMask& x, const LesionMask& y) {
  const Counts c = count_overlap(x, y);
  const std::uint64_t size_sum = 2 * c.tp + c.fp + c.fn;
  if (size_sum == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(size_sum);
}

std::pair<std::optional<double>, std::optional<double>> precision_recall(
    const LesionMask& pred, const LesionMask& truth) {
  const Counts c = count_overlap(pred, truth);
  std::optional<double> precision, recall;
  if (c.tp + c.fp > 0)
    precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0)
    recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return {precision, recall};
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw std::invalid_argument("pearson: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("pearson: need >= 2 samples");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

std::map<std::uint16_t, double> volumes(const LabelMap& labels) {
  labels.validate();
  std::map<std::uint16_t, std::uint64_t> counts;
  for (std::uint16_t v : labels.labels) ++counts[v];
  std::map<std::uint16_t, double> out;
  const double vv = labels.grid.voxel_volume_mm3();
  for (const auto& [label, count] : counts)
    out[label] = static_cast<double>(count) * vv;
  return out;
}

OverlapReport overlap_report(const LesionMask& pred, const LesionMask& truth,
                             const LabelMap* label_map) {
  OverlapReport r;
  const Counts c = count_overlap(pred, truth);
  r.tp = c.tp;
  r.fp = c.fp;
  r.fn = c.fn;
  const std::uint64_t size_sum = 2 * c.tp + c.fp + c.fn;
  r.dice = size_sum == 0 ? 1.0
                         : 2.0 * static_cast<double>(c.tp) /
                               static_cast<double>(size_sum);
  if (c.tp + c.fp > 0)
    r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0)
    r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (label_map) r.volumes_mm3 = volumes(*label_map);
  return r;
}

std::string OverlapReport::to_json() const {
  nlohmann::json j;
  j["dice"] = dice;
  if (precision)
    j["precision"] = *precision;
  else
    j["precision"] = nullptr;
  if (recall)
    j["recall"] = *recall;
  else
    j["recall"] = nullptr;
  j["tp"] = tp;
  j["fp"] = fp;
  j["fn"] = fn;
  nlohmann::json vols = nlohmann::json::object();
  for (const auto& [label, mm3] : volumes_mm3)
    vols[std::to_string(label)] = mm3;
  j["volumes_mm3"] = vols;
  return j.dump(2);
}

LesionMask mask_for_label(const LabelMap& labels, std::uint16_t label) {
  LesionMask m;
  m.grid = labels.grid;
  m.mask.resize(labels.labels.size());
  for (std::size_t i = 0; i < labels.labels.size(); ++i)
    m.mask[i] = labels.labels[i] == label ? 1 : 0;
  return m;
}

}  // namespace lesionseg
