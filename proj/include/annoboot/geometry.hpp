#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "annoboot/rng.hpp"

namespace annoboot::geometry {

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Axis-aligned box in normalized coordinates of an enclosing frame.
struct BBox {
  double y_min = 0.0;
  double x_min = 0.0;
  double y_max = 1.0;
  double x_max = 1.0;

  double height() const { return y_max - y_min; }
  double width() const { return x_max - x_min; }
  double area() const { return height() * width(); }
  bool valid() const { return y_min < y_max && x_min < x_max; }
  bool inside_unit() const {
    return y_min >= 0.0 && x_min >= 0.0 && y_max <= 1.0 && x_max <= 1.0;
  }
  bool operator==(const BBox&) const = default;
};

/// Target box expressed in the source box's frame. Coordinates may leave [0, 1]
/// (zoom-out, pan).
struct RelAction {
  double y_min = 0.0;
  double x_min = 0.0;
  double y_max = 1.0;
  double x_max = 1.0;

  bool operator==(const RelAction&) const = default;
};

inline constexpr int kActionBins = 64;
inline constexpr double kActionLow = -3.5;
inline constexpr double kActionHigh = 4.5;
inline constexpr double kActionBinWidth = (kActionHigh - kActionLow) / kActionBins;

/// One bin index per RelAction coordinate, in (y_min, x_min, y_max, x_max) order.
using ActionTokens = std::array<std::int32_t, 4>;

RelAction relative_bbox(const BBox& src, const BBox& dst);

/// Inverse of relative_bbox. Clips to the unit square only when `clip` is set.
BBox apply_action(const BBox& src, const RelAction& a, bool clip = false);

double iou(const BBox& a, const BBox& b);

/// Area of the intersection of two boxes (0 when disjoint).
double intersection_area(const BBox& a, const BBox& b);

std::int32_t discretize_coord(double v);
double continuize_coord(std::int32_t token);
ActionTokens discretize_action(const RelAction& a);
RelAction continuize(const ActionTokens& tokens);

/// Tokens of the identity action (0, 0, 1, 1): {28, 28, 36, 36}.
ActionTokens identity_tokens();

struct CropConfig {
  double scale_min = 0.05;
  double scale_max = 0.5;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  /// Smallest admissible side, normalized. Draws below it count as infeasible.
  double min_side = 0.0;
};

void validate(const CropConfig& cfg);

/// Random-resized-crop of the unit frame: area fraction uniform in the scale
/// range, aspect ratio log-uniform, position uniform over feasible placements.
/// After 10 infeasible draws falls back to a centered square of area scale_min.
BBox sample_crop(Rng& rng, const CropConfig& cfg);

std::string to_string(const BBox& b);

}  // namespace annoboot::geometry
