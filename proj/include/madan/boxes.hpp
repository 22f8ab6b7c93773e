#pragma once

#include <algorithm>
#include <string>

#include "madan/errors.hpp"

namespace madan {

/// Axis-aligned box in scene pixel coordinates (x right, y down); the right
/// and bottom edges are exclusive, so a 17x17 window at (x, y) is
/// (x, y, x + 17, y + 17).
struct DetectionBox {
  double x_lt = 0.0;
  double y_lt = 0.0;
  double x_rb = 0.0;
  double y_rb = 0.0;
  double score = 1.0;

  double width() const noexcept { return x_rb - x_lt; }
  double height() const noexcept { return y_rb - y_lt; }
  double area() const noexcept { return width() * height(); }
  bool valid() const noexcept { return x_rb > x_lt && y_rb > y_lt && score >= 0.0 && score <= 1.0; }

  friend bool operator==(const DetectionBox&, const DetectionBox&) = default;
};

inline void require_valid(const DetectionBox& b, const char* what) {
  if (!b.valid()) throw ContractError(std::string(what) + ": degenerate box or score outside [0,1]");
}

/// Intersection over union; 0 for disjoint boxes.
inline double iou(const DetectionBox& a, const DetectionBox& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double iw = std::min(a.x_rb, b.x_rb) - std::max(a.x_lt, b.x_lt);
  const double ih = std::min(a.y_rb, b.y_rb) - std::max(a.y_lt, b.y_lt);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

}  // namespace madan
