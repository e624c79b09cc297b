#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pldet/detector.hpp"
#include "pldet/geometry.hpp"
#include "pldet/scenes.hpp"

namespace pldet {

// one detection tagged with its source image
struct TaggedDetection {
  std::int64_t image_id = 0;
  Box box;
  int cls = 0;
  double score = 0.0;
};

struct TaggedTruth {
  std::int64_t image_id = 0;
  Box box;
  int cls = 0;
};

struct EvalResult {
  double ap = 0.0;    // mean over IoU thresholds 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::map<int, double> per_class_ap;  // at the averaged thresholds
  int num_detections = 0;
  int num_ground_truth = 0;
};

// COCO-style AP at one IoU threshold: score-descending greedy matching
// (each GT used once, highest-IoU eligible GT wins), 101-point interpolated
// precision, averaged over classes present in the ground truth.
double ap_at(const std::vector<TaggedDetection>& detections, const std::vector<TaggedTruth>& truths,
             double iou_thresh);

// per-class variant used to fill EvalResult::per_class_ap
std::map<int, double> ap_per_class(const std::vector<TaggedDetection>& detections,
                                   const std::vector<TaggedTruth>& truths, double iou_thresh);

struct EvalConfig {
  double score_thresh = 0.05;  // low threshold so the PR curve is populated
  double nms_iou = 0.5;
};

EvalResult evaluate(const std::vector<Example>& test_pool, const DetectorParams& params,
                    const DetectorConfig& cfg, const EvalConfig& eval_cfg = {});

// aggregation entry point shared by evaluate() and the pseudo-label audit
EvalResult evaluate_detections(const std::vector<TaggedDetection>& detections,
                               const std::vector<TaggedTruth>& truths);

std::string to_json(const EvalResult& result);
EvalResult eval_result_from_json(const std::string& text);

}  // namespace pldet
