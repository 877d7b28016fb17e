#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>

#include "lesionseg/volume.hpp"

namespace lesionseg {

struct OverlapReport {
  double dice = 0.0;
  std::optional<double> precision;
  std::optional<double> recall;
  std::uint64_t tp = 0, fp = 0, fn = 0;
  std::map<std::uint16_t, double> volumes_mm3;

  std::string to_json() const;
};

// 2|X∩Y| / (|X|+|Y|); both masks empty -> 1.0 by convention.
double dice(const LesionMask& x, const LesionMask& y);

// (TP/(TP+FP), TP/(TP+FN)); an empty denominator yields nullopt.
std::pair<std::optional<double>, std::optional<double>> precision_recall(
    const LesionMask& pred, const LesionMask& truth);

// Sample correlation; nullopt when either input has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

// Voxel count per label converted to mm^3.
std::map<std::uint16_t, double> volumes(const LabelMap& labels);

OverlapReport overlap_report(const LesionMask& pred, const LesionMask& truth,
                             const LabelMap* label_map = nullptr);

// Mask of voxels carrying the given label.
LesionMask mask_for_label(const LabelMap& labels, std::uint16_t label);

}  // namespace lesionseg
