#include "pldet/eval.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "json.hpp"
#include "pldet/errors.hpp"

namespace pldet {

namespace {

// AP for one class at one IoU threshold; 101-point interpolation
double ap_single_class(const std::vector<TaggedDetection>& dets,
                       const std::vector<TaggedTruth>& gts, double iou_thresh) {
  if (gts.empty()) return 0.0;
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int l, int r) { return dets[l].score > dets[r].score; });

  std::vector<char> gt_used(gts.size(), 0);
  std::vector<char> is_tp(dets.size(), 0);
  for (size_t rank = 0; rank < order.size(); ++rank) {
    const auto& det = dets[order[rank]];
    int best_gt = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g] || gts[g].image_id != det.image_id) continue;
      double v = iou(det.box, gts[g].box);
      if (v < iou_thresh || v <= best_iou) continue;
      best_iou = v;
      best_gt = static_cast<int>(g);
    }
    if (best_gt >= 0) {
      gt_used[best_gt] = 1;
      is_tp[rank] = 1;
    }
  }

  // precision/recall along the ranked list
  std::vector<double> precision(order.size()), recall(order.size());
  int tp = 0;
  for (size_t rank = 0; rank < order.size(); ++rank) {
    tp += is_tp[rank];
    precision[rank] = static_cast<double>(tp) / (rank + 1);
    recall[rank] = static_cast<double>(tp) / gts.size();
  }

  double ap = 0.0;
  for (int i = 0; i <= 100; ++i) {
    double r = i / 100.0;
    double best = 0.0;
    for (size_t rank = 0; rank < order.size(); ++rank)
      if (recall[rank] >= r) best = std::max(best, precision[rank]);
    ap += best;
  }
  return ap / 101.0;
}

}  // namespace

std::map<int, double> ap_per_class(const std::vector<TaggedDetection>& detections,
                                   const std::vector<TaggedTruth>& truths, double iou_thresh) {
  std::set<int> classes;
  for (const auto& t : truths) classes.insert(t.cls);
  std::map<int, double> out;
  for (int cls : classes) {
    std::vector<TaggedDetection> dets;
    std::vector<TaggedTruth> gts;
    for (const auto& d : detections)
      if (d.cls == cls) dets.push_back(d);
    for (const auto& t : truths)
      if (t.cls == cls) gts.push_back(t);
    out[cls] = ap_single_class(dets, gts, iou_thresh);
  }
  return out;
}

double ap_at(const std::vector<TaggedDetection>& detections, const std::vector<TaggedTruth>& truths,
             double iou_thresh) {
  auto per_class = ap_per_class(detections, truths, iou_thresh);
  if (per_class.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [cls, ap] : per_class) total += ap;
  return total / per_class.size();
}

EvalResult evaluate_detections(const std::vector<TaggedDetection>& detections,
                               const std::vector<TaggedTruth>& truths) {
  EvalResult result;
  result.num_detections = static_cast<int>(detections.size());
  result.num_ground_truth = static_cast<int>(truths.size());

  std::map<int, double> class_totals;
  double ap_total = 0.0;
  int n_thresh = 0;
  for (int t = 0; t < 10; ++t) {
    double thresh = 0.5 + 0.05 * t;
    auto per_class = ap_per_class(detections, truths, thresh);
    double mean = 0.0;
    for (const auto& [cls, ap] : per_class) {
      mean += ap;
      class_totals[cls] += ap;
    }
    if (!per_class.empty()) mean /= per_class.size();
    ap_total += mean;
    ++n_thresh;
    if (t == 0) result.ap50 = mean;
    if (t == 5) result.ap75 = mean;
  }
  result.ap = ap_total / n_thresh;
  for (auto& [cls, total] : class_totals) result.per_class_ap[cls] = total / n_thresh;
  return result;
}

EvalResult evaluate(const std::vector<Example>& test_pool, const DetectorParams& params,
                    const DetectorConfig& cfg, const EvalConfig& eval_cfg) {
  if (test_pool.empty()) throw ValueError("evaluate: empty test pool");
  std::vector<TaggedDetection> detections;
  std::vector<TaggedTruth> truths;
  for (const auto& ex : test_pool) {
    if (!ex.truth) throw ValueError("evaluate: test pool must be labeled");
    for (size_t g = 0; g < ex.truth->boxes.size(); ++g)
      truths.push_back({ex.id, ex.truth->boxes[g], ex.truth->classes[g]});
    for (const auto& det : detect(ex, params, cfg, eval_cfg.score_thresh, eval_cfg.nms_iou))
      detections.push_back({ex.id, det.box, det.cls, det.score});
  }
  return evaluate_detections(detections, truths);
}

std::string to_json(const EvalResult& result) {
  nlohmann::ordered_json j;
  j["ap"] = result.ap;
  j["ap50"] = result.ap50;
  j["ap75"] = result.ap75;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  for (const auto& [cls, ap] : result.per_class_ap) per_class[std::to_string(cls)] = ap;
  j["per_class_ap"] = per_class;
  j["num_detections"] = result.num_detections;
  j["num_ground_truth"] = result.num_ground_truth;
  return j.dump(2);
}

EvalResult eval_result_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  EvalResult r;
  r.ap = j.at("ap").get<double>();
  r.ap50 = j.at("ap50").get<double>();
  r.ap75 = j.at("ap75").get<double>();
  for (const auto& [key, value] : j.at("per_class_ap").items())
    r.per_class_ap[std::stoi(key)] = value.get<double>();
  r.num_detections = j.at("num_detections").get<int>();
  r.num_ground_truth = j.at("num_ground_truth").get<int>();
  return r;
}

}  // namespace pldet
