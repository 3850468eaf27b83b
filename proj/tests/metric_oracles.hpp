#pragma once

// Brute-force references for the instance and boundary metrics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "nucleiforge/metrics.hpp"

namespace nf::testing {

inline Tensor random_instances(std::size_t h, std::size_t w, int max_label, std::mt19937_64& rng) {
  Tensor t({h, w});
  // Blocky regions so that large overlaps actually occur.
  std::uniform_int_distribution<int> lab(0, max_label);
  const std::size_t bh = 1 + rng() % 3, bw = 1 + rng() % 3;
  for (std::size_t by = 0; by < h; by += bh)
    for (std::size_t bx = 0; bx < w; bx += bw) {
      const int l = lab(rng);
      for (std::size_t y = by; y < std::min(h, by + bh); ++y)
        for (std::size_t x = bx; x < std::min(w, bx + bw); ++x) t.mutable_data()[y * w + x] = l;
    }
  // Sprinkle noise.
  for (auto& v : t.mutable_data())
    if (rng() % 6 == 0) v = lab(rng);
  return t;
}

struct PairCounts {
  std::map<int, double> pred_area, gt_area;
  std::map<std::pair<int, int>, double> inter;
};

inline PairCounts count_pairs(const Tensor& pred, const Tensor& gt) {
  PairCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = static_cast<int>(pred[i]), g = static_cast<int>(gt[i]);
    if (p) c.pred_area[p] += 1;
    if (g) c.gt_area[g] += 1;
    if (p && g) c.inter[{g, p}] += 1;
  }
  return c;
}

inline double iou_of(const PairCounts& c, int g, int p) {
  auto it = c.inter.find({g, p});
  const double i = it == c.inter.end() ? 0.0 : it->second;
  return i / (c.gt_area.at(g) + c.pred_area.at(p) - i);
}

inline double aji_reference(const Tensor& pred, const Tensor& gt) {
  const auto c = count_pairs(pred, gt);
  if (c.gt_area.empty() && c.pred_area.empty()) return 1.0;
  double inter = 0.0, uni = 0.0;
  std::vector<int> used;
  for (const auto& [g, ga] : c.gt_area) {
    int best = 0;
    double best_iou = 0.0;
    for (const auto& [p, pa] : c.pred_area) {
      const double v = iou_of(c, g, p);
      if (v > best_iou) {
        best_iou = v;
        best = p;
      }
    }
    if (!best) {
      uni += ga;
      continue;
    }
    const double i = c.inter.at({g, best});
    inter += i;
    uni += ga + c.pred_area.at(best) - i;
    used.push_back(best);
  }
  for (const auto& [p, pa] : c.pred_area)
    if (std::find(used.begin(), used.end(), p) == used.end()) uni += pa;
  return uni == 0.0 ? 0.0 : inter / uni;
}

inline PanopticResult panoptic_reference(const Tensor& pred, const Tensor& gt) {
  const auto c = count_pairs(pred, gt);
  if (c.gt_area.empty() && c.pred_area.empty()) return {1.0, 1.0, 1.0};
  double tp = 0.0, iou_sum = 0.0;
  std::map<int, int> pred_hits, gt_hits;
  for (const auto& [g, ga] : c.gt_area)
    for (const auto& [p, pa] : c.pred_area) {
      const double v = iou_of(c, g, p);
      if (v > 0.5) {
        tp += 1;
        iou_sum += v;
        ++pred_hits[p];
        ++gt_hits[g];
      }
    }
  for (const auto& m : {pred_hits, gt_hits})
    for (const auto& [k, n] : m)
      if (n != 1) throw std::logic_error("panoptic_reference: matching is not one-to-one");
  const double fp = c.pred_area.size() - tp, fn = c.gt_area.size() - tp;
  PanopticResult r;
  r.dq = tp / (tp + 0.5 * fp + 0.5 * fn);
  r.sq = tp > 0 ? iou_sum / tp : 0.0;
  r.pq = r.dq * r.sq;
  return r;
}

inline std::optional<double> hausdorff_reference(const Tensor& a, const Tensor& b) {
  auto boundary = [](const Tensor& m) {
    const std::size_t h = m.dim(0), w = m.dim(1);
    std::vector<std::pair<long, long>> out;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (m[y * w + x] == 0.0) continue;
        const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || m[(y - 1) * w + x] == 0.0 ||
                          m[(y + 1) * w + x] == 0.0 || m[y * w + x - 1] == 0.0 || m[y * w + x + 1] == 0.0;
        if (edge) out.push_back({static_cast<long>(y), static_cast<long>(x)});
      }
    return out;
  };
  const auto pa = boundary(a), pb = boundary(b);
  if (pa.empty() || pb.empty()) return std::nullopt;
  auto directed = [](const auto& from, const auto& to) {
    long worst = 0;
    for (const auto& [y, x] : from) {
      long best = std::numeric_limits<long>::max();
      for (const auto& [v, u] : to) best = std::min(best, (y - v) * (y - v) + (x - u) * (x - u));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(static_cast<double>(std::max(directed(pa, pb), directed(pb, pa))));
}

}  // namespace nf::testing
