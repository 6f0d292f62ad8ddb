#pragma once

#include <algorithm>
#include <map>
#include <tuple>
#include <vector>

#include "coopdet/pipeline.hpp"

namespace coopdet {

// A post-NMS detection pooled at split level.
struct Detection {
  int scene_id = 0;
  int cell = 0;
  int class_id = 0;
  double confidence = 0.0;
  Box box;  // world coordinates
};

struct PRPoint {
  double precision = 0.0;
  double recall = 0.0;
  double threshold = 0.0;
};

struct PRCurve {
  std::vector<PRPoint> points;  // thresholds strictly decreasing
  double area = 0.0;
};

namespace detail {

// Split-level ranking: confidence descending, ties by scene id then cell.
inline std::vector<std::size_t> rank_detections(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].confidence != dets[b].confidence)
      return dets[a].confidence > dets[b].confidence;
    if (dets[a].scene_id != dets[b].scene_id)
      return dets[a].scene_id < dets[b].scene_id;
    return dets[a].cell < dets[b].cell;
  });
  return order;
}

// Greedy matching in rank order: each detection takes the highest-IoU
// unmatched same-class ground truth with IoU strictly above the threshold.
inline std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                          const std::vector<std::size_t>& order,
                                          const std::vector<GtRecord>& gts,
                                          double iou_threshold) {
  // Scene-indexed ground truth for fast lookup over large splits.
  std::map<int, std::vector<std::size_t>> by_scene;
  for (std::size_t gi = 0; gi < gts.size(); ++gi)
    by_scene[gts[gi].scene_id].push_back(gi);
  std::vector<bool> is_tp(dets.size(), false);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const Detection& d = dets[order[oi]];
    const auto it = by_scene.find(d.scene_id);
    if (it == by_scene.end()) continue;
    double best = iou_threshold;
    int best_gt = -1;
    for (std::size_t gi : it->second) {
      if (taken[gi] || gts[gi].class_id != d.class_id) continue;
      const double v = iou(d.box, gts[gi].box);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0) {
      taken[static_cast<std::size_t>(best_gt)] = true;
      is_tp[order[oi]] = true;
    }
  }
  return is_tp;
}

// Area under the precision envelope over recall (all-point interpolation).
inline double envelope_area(const std::vector<double>& recall,
                            const std::vector<double>& precision) {
  std::vector<double> env(precision.size());
  double m = 0.0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    m = std::max(m, precision[i]);
    env[i] = m;
  }
  double area = 0.0;
  double prev_r = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    area += (recall[i] - prev_r) * env[i];
    prev_r = recall[i];
  }
  return area;
}

inline double ap_pooled(const std::vector<Detection>& dets,
                        const std::vector<GtRecord>& gts, double iou_threshold,
                        PRCurve* curve) {
  const auto order = rank_detections(dets);
  const auto is_tp = match_detections(dets, order, gts, iou_threshold);
  const double n_gt = static_cast<double>(gts.size());
  std::vector<double> recall, precision;
  recall.reserve(order.size());
  precision.reserve(order.size());
  int tp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (is_tp[order[i]]) ++tp;
    recall.push_back(static_cast<double>(tp) / n_gt);
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  const double area = envelope_area(recall, precision);
  if (curve) {
    curve->points.clear();
    for (std::size_t i = 0; i < order.size(); ++i) {
      const double thr = dets[order[i]].confidence;
      // Merge rank positions that share a confidence value into one point.
      if (i + 1 < order.size() && dets[order[i + 1]].confidence == thr) continue;
      curve->points.push_back(PRPoint{precision[i], recall[i], thr});
    }
    curve->area = area;
  }
  return area;
}

}  // namespace detail

// AP at the given IoU threshold over a split. Detections are pooled across
// scenes and ranked jointly; matching is class-aware. Throws MetricError when
// there is no ground truth (the metric is undefined, not zero).
inline double compute_ap(const std::vector<Detection>& dets,
                         const std::vector<GtRecord>& gts,
                         double iou_threshold = 0.7,
                         bool class_averaged = false) {
  if (gts.empty())
    throw MetricError("compute_ap: undefined with zero ground-truth boxes");
  if (!class_averaged) return detail::ap_pooled(dets, gts, iou_threshold, nullptr);
  // Mean over classes that have ground truth.
  double acc = 0.0;
  int n_cls = 0;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    std::vector<GtRecord> g;
    for (const auto& x : gts)
      if (x.class_id == cls) g.push_back(x);
    if (g.empty()) continue;
    std::vector<Detection> d;
    for (const auto& x : dets)
      if (x.class_id == cls) d.push_back(x);
    acc += detail::ap_pooled(d, g, iou_threshold, nullptr);
    ++n_cls;
  }
  return acc / n_cls;
}

inline PRCurve pr_curve(const std::vector<Detection>& dets,
                        const std::vector<GtRecord>& gts,
                        double iou_threshold = 0.7) {
  if (gts.empty())
    throw MetricError("pr_curve: undefined with zero ground-truth boxes");
  PRCurve curve;
  detail::ap_pooled(dets, gts, iou_threshold, &curve);
  return curve;
}

}  // namespace coopdet
