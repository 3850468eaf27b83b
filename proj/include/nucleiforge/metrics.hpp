#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nucleiforge/tensor.hpp"

// Masks are H×W or 1×H×W tensors; binary masks hold 0/1 and instance maps
// hold integer labels with 0 as background.
namespace nf {

double dice(const Tensor& pred, const Tensor& gt);
double miou(const Tensor& pred, const Tensor& gt);
/// Greedy one-to-one matching by descending IoU; IoU > thresh counts as TP.
double object_f1(const Tensor& pred_instances, const Tensor& gt_instances, double iou_thresh = 0.5);
/// Exact symmetric Hausdorff distance between boundary pixel sets, or
/// std::nullopt when either mask is empty.
std::optional<double> hausdorff(const Tensor& pred, const Tensor& gt);
double aji(const Tensor& pred_instances, const Tensor& gt_instances);

struct PanopticResult {
  double dq = 0.0;
  double sq = 0.0;
  double pq = 0.0;
};
PanopticResult panoptic(const Tensor& pred_instances, const Tensor& gt_instances);

/// 8-connected component labelling in raster order of first pixel.
/// Components smaller than `min_size` pixels are dropped.
Tensor label_components(const Tensor& binary, std::size_t min_size = 1);

/// Binarizes at prob > threshold and labels 8-connected components of at
/// least 4 pixels.
Tensor extract_instances(const Tensor& prob, double threshold = 0.5, std::size_t min_size = 4);

/// Foreground pixels with a 4-neighbour in the background or on the image edge.
std::vector<std::pair<std::size_t, std::size_t>> boundary_pixels(const Tensor& mask);

struct SemanticReport {
  double dsc = 0.0;
  double miou = 0.0;
  double f1 = 0.0;
  double hd = 0.0;
  bool hd_defined = false;
};

struct InstanceReport {
  double aji = 0.0;
  double dq = 0.0;
  double sq = 0.0;
  double pq = 0.0;
};

struct ImageReport {
  std::string id;
  SemanticReport semantic;
  InstanceReport instance;
};

/// All metrics for one probability map against its ground truth.
ImageReport score_prediction(const std::string& id, const Tensor& prob, const Tensor& gt_mask,
                             const Tensor& gt_instances, double threshold = 0.5);

struct MetricStats {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

struct ReportSummary {
  MetricStats dsc, miou, f1, hd, aji, dq, sq, pq;
};

/// Per-metric mean and population std; HD averages only defined values.
ReportSummary summarize(const std::vector<ImageReport>& reports);

/// One row per image plus a final "mean±std" summary row.
void write_report_csv(std::ostream& os, const std::vector<ImageReport>& reports);
/// One JSON object per image plus a summary object.
void write_report_jsonl(std::ostream& os, const std::vector<ImageReport>& reports);

}  // namespace nf
