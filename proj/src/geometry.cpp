#include "annoboot/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace annoboot::geometry {

namespace {

void require_valid(const BBox& b, const char* what) {
  if (!b.valid()) {
    throw GeometryError(std::string(what) + " box is degenerate: " + to_string(b));
  }
}

}  // namespace

RelAction relative_bbox(const BBox& src, const BBox& dst) {
  require_valid(src, "source");
  const double h = src.height();
  const double w = src.width();
  return RelAction{(dst.y_min - src.y_min) / h, (dst.x_min - src.x_min) / w,
                   (dst.y_max - src.y_min) / h, (dst.x_max - src.x_min) / w};
}

BBox apply_action(const BBox& src, const RelAction& a, bool clip) {
  require_valid(src, "source");
  const double h = src.height();
  const double w = src.width();
  BBox out{src.y_min + a.y_min * h, src.x_min + a.x_min * w, src.y_min + a.y_max * h,
           src.x_min + a.x_max * w};
  if (clip) {
    out.y_min = std::clamp(out.y_min, 0.0, 1.0);
    out.x_min = std::clamp(out.x_min, 0.0, 1.0);
    out.y_max = std::clamp(out.y_max, 0.0, 1.0);
    out.x_max = std::clamp(out.x_max, 0.0, 1.0);
  }
  return out;
}

double intersection_area(const BBox& a, const BBox& b) {
  const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  if (h <= 0.0 || w <= 0.0) return 0.0;
  return h * w;
}

double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::int32_t discretize_coord(double v) {
  if (!(v >= kActionLow)) return 0;  // also catches NaN
  if (v >= kActionHigh) return kActionBins - 1;
  const auto bin = static_cast<std::int32_t>(std::floor((v - kActionLow) / kActionBinWidth));
  return std::clamp(bin, 0, kActionBins - 1);
}

double continuize_coord(std::int32_t token) {
  return kActionLow + (static_cast<double>(token) + 0.5) * kActionBinWidth;
}

ActionTokens discretize_action(const RelAction& a) {
  return {discretize_coord(a.y_min), discretize_coord(a.x_min), discretize_coord(a.y_max),
          discretize_coord(a.x_max)};
}

RelAction continuize(const ActionTokens& t) {
  return {continuize_coord(t[0]), continuize_coord(t[1]), continuize_coord(t[2]),
          continuize_coord(t[3])};
}

ActionTokens identity_tokens() { return discretize_action(RelAction{0.0, 0.0, 1.0, 1.0}); }

void validate(const CropConfig& cfg) {
  if (!(cfg.scale_min > 0.0 && cfg.scale_min <= cfg.scale_max && cfg.scale_max <= 1.0)) {
    throw GeometryError("crop scale range must satisfy 0 < min <= max <= 1");
  }
  if (!(cfg.ratio_min > 0.0 && cfg.ratio_min <= cfg.ratio_max)) {
    throw GeometryError("crop ratio range must be positive and ordered");
  }
  if (cfg.min_side < 0.0 || cfg.min_side > 1.0) {
    throw GeometryError("crop min_side must lie in [0, 1]");
  }
}

BBox sample_crop(Rng& rng, const CropConfig& cfg) {
  validate(cfg);
  const double log_lo = std::log(cfg.ratio_min);
  const double log_hi = std::log(cfg.ratio_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = rng.uniform(cfg.scale_min, cfg.scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const double w = std::sqrt(area * ratio);
    const double h = std::sqrt(area / ratio);
    if (w > 1.0 || h > 1.0 || w < cfg.min_side || h < cfg.min_side) continue;
    const double y = rng.uniform() * (1.0 - h);
    const double x = rng.uniform() * (1.0 - w);
    return BBox{y, x, y + h, x + w};
  }
  const double side = std::max(std::sqrt(cfg.scale_min), cfg.min_side);
  const double off = 0.5 * (1.0 - side);
  return BBox{off, off, off + side, off + side};
}

std::string to_string(const BBox& b) {
  std::ostringstream os;
  os << '(' << b.y_min << ", " << b.x_min << ", " << b.y_max << ", " << b.x_max << ')';
  return os.str();
}

}  // namespace annoboot::geometry
