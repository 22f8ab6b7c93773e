#pragma once

#include <algorithm>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "madan/boxes.hpp"
#include "madan/data.hpp"
#include "madan/network.hpp"

namespace madan {

struct WindowOffset {
  std::size_t x = 0;
  std::size_t y = 0;
  friend bool operator==(const WindowOffset&, const WindowOffset&) = default;
};

/// Number of window positions along one axis.
inline std::size_t window_count(std::size_t extent, std::size_t win, std::size_t step) {
  if (step == 0) throw ContractError("sliding window step must be positive");
  if (extent < win) {
    throw DimensionError("image extent " + std::to_string(extent) + " is smaller than the " + std::to_string(win) +
                         "-pixel window");
  }
  return (extent - win) / step + 1;
}

/// Row-major window offsets {0, step, ...} with offset + win <= extent.
inline std::vector<WindowOffset> sliding_windows(std::size_t height, std::size_t width, std::size_t win = kPatchSize,
                                                 std::size_t step = 3) {
  const std::size_t ny = window_count(height, win, step), nx = window_count(width, win, step);
  std::vector<WindowOffset> out;
  out.reserve(ny * nx);
  for (std::size_t iy = 0; iy < ny; ++iy) {
    for (std::size_t ix = 0; ix < nx; ++ix) out.push_back({ix * step, iy * step});
  }
  return out;
}

struct DetectOptions {
  std::size_t step = 3;
  double score_threshold = 0.5;
  std::uint8_t palm_class = kPalm;
  std::size_t chunk = 512;
};

/// Classifies every window of the scene with an eval-mode model and emits a
/// box wherever the argmax class is the palm class and its probability
/// reaches the threshold. Boxes are raw (unmerged), in window order.
template <typename T>
std::vector<DetectionBox> detect_scene(const Image& scene, Model<T>& model, const DetectOptions& opt = {}) {
  const ModelConfig& mc = model.config();
  if (scene.channels != mc.in_channels) {
    throw DimensionError("detect_scene: scene has " + std::to_string(scene.channels) + " channels, model expects " +
                         std::to_string(mc.in_channels));
  }
  if (opt.palm_class >= mc.n_classes) throw ContractError("detect_scene: palm class outside the model's classes");
  const std::size_t win = mc.input_size;
  const auto windows = sliding_windows(scene.height, scene.width, win, opt.step);
  const std::size_t per = scene.channels * win * win;
  std::vector<DetectionBox> out;
  std::vector<float> crop(per);
  for (std::size_t start = 0; start < windows.size(); start += opt.chunk) {
    const std::size_t m = std::min(opt.chunk, windows.size() - start);
    Tensor<T> batch(Shape{m, scene.channels, win, win});
    for (std::size_t j = 0; j < m; ++j) {
      const auto& w = windows[start + j];
      scene.crop(w.x, w.y, win, crop.data());
      std::copy(crop.begin(), crop.end(), batch.data() + j * per);
    }
    Tensor<T> probs = predict_proba(model, batch, m);
    const std::size_t k = mc.n_classes;
    for (std::size_t j = 0; j < m; ++j) {
      const T* row = probs.data() + j * k;
      const auto cls = static_cast<std::size_t>(std::max_element(row, row + k) - row);
      const double p = static_cast<double>(row[opt.palm_class]);
      if (cls == opt.palm_class && p >= opt.score_threshold) {
        const auto& w = windows[start + j];
        out.push_back({static_cast<double>(w.x), static_cast<double>(w.y), static_cast<double>(w.x + win),
                       static_cast<double>(w.y + win), std::clamp(p, 0.0, 1.0)});
      }
    }
  }
  return out;
}

namespace detail {

/// Union-find over box indices.
class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace detail

inline void sort_boxes(std::vector<DetectionBox>& boxes) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const DetectionBox& a, const DetectionBox& b) {
    return std::tie(a.y_lt, a.x_lt, a.y_rb, a.x_rb) < std::tie(b.y_lt, b.x_lt, b.y_rb, b.x_rb);
  });
}

/// Single-pass IOU merging. Boxes whose pairwise IOU on the original input
/// reaches the threshold are linked; every connected component becomes one
/// box with the mean coordinates and mean score of its members. Output is
/// ordered by the first member of each component after sorting by
/// (y_lt, x_lt).
inline std::vector<DetectionBox> merge_detections(std::vector<DetectionBox> boxes, double iou_threshold = 0.5) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ContractError("merge_detections: threshold outside (0,1]");
  for (const auto& b : boxes) require_valid(b, "merge_detections");
  sort_boxes(boxes);
  const std::size_t n = boxes.size();
  detail::DisjointSets sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      // sorted by y_lt: once the next box starts below this one's bottom edge no later box can overlap
      if (boxes[j].y_lt >= boxes[i].y_rb) break;
      if (iou(boxes[i], boxes[j]) >= iou_threshold) sets.unite(i, j);
    }
  }
  std::vector<std::size_t> slot(n, n);
  std::vector<DetectionBox> sums;
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t root = sets.find(i);
    if (slot[root] == n) {
      slot[root] = sums.size();
      sums.push_back({0, 0, 0, 0, 0});
      counts.push_back(0);
    }
    DetectionBox& s = sums[slot[root]];
    s.x_lt += boxes[i].x_lt;
    s.y_lt += boxes[i].y_lt;
    s.x_rb += boxes[i].x_rb;
    s.y_rb += boxes[i].y_rb;
    s.score += boxes[i].score;
    ++counts[slot[root]];
  }
  for (std::size_t k = 0; k < sums.size(); ++k) {
    const double c = static_cast<double>(counts[k]);
    sums[k] = {sums[k].x_lt / c, sums[k].y_lt / c, sums[k].x_rb / c, sums[k].y_rb / c, sums[k].score / c};
  }
  return sums;
}

// --- CSV ---

inline std::string format_detections_csv(const std::vector<DetectionBox>& boxes) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "x_lt,y_lt,x_rb,y_rb,score\n";
  for (const auto& b : boxes) os << b.x_lt << ',' << b.y_lt << ',' << b.x_rb << ',' << b.y_rb << ',' << b.score << '\n';
  return os.str();
}

/// Parses a detections CSV (with score column) or a ground-truth CSV
/// (without; score defaults to 1).
inline std::vector<DetectionBox> parse_boxes_csv(const std::string& text, const std::string& context) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) return {};
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::size_t columns;
  if (line == "x_lt,y_lt,x_rb,y_rb,score") {
    columns = 5;
  } else if (line == "x_lt,y_lt,x_rb,y_rb") {
    columns = 4;
  } else {
    throw FormatError(context + ": unexpected CSV header '" + line + "'");
  }
  std::vector<DetectionBox> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> v;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw FormatError(context + ": line " + std::to_string(lineno) + ": not a number: '" + cell + "'");
      }
    }
    if (v.size() != columns) {
      throw FormatError(context + ": line " + std::to_string(lineno) + ": expected " + std::to_string(columns) +
                        " columns");
    }
    DetectionBox b{v[0], v[1], v[2], v[3], columns == 5 ? v[4] : 1.0};
    if (!b.valid()) throw FormatError(context + ": line " + std::to_string(lineno) + ": invalid box");
    out.push_back(b);
  }
  return out;
}

}  // namespace madan
