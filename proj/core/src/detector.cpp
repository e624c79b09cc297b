#include "pldet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pldet/errors.hpp"
#include "pldet/rng.hpp"

namespace pldet {

namespace {

ag::Tensor init_tensor(std::vector<int> shape, double stddev, Rng& rng) {
  int n = ag::numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.normal(0.0, stddev);
  return ag::Tensor::from_data(std::move(shape), std::move(data), true);
}

double he_std(int fan_in) { return std::sqrt(2.0 / fan_in); }

struct BilinearTap {
  int y0, x0, y1, x1;
  double w00, w01, w10, w11;
};

BilinearTap tap_at(double x, double y, int h, int w) {
  double cx = std::clamp(x, 0.0, static_cast<double>(w - 1));
  double cy = std::clamp(y, 0.0, static_cast<double>(h - 1));
  int x0 = std::min(static_cast<int>(std::floor(cx)), std::max(0, w - 2));
  int y0 = std::min(static_cast<int>(std::floor(cy)), std::max(0, h - 2));
  int x1 = std::min(x0 + 1, w - 1);
  int y1 = std::min(y0 + 1, h - 1);
  double fx = cx - x0, fy = cy - y0;
  return {y0, x0, y1, x1, (1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
}

}  // namespace

// ---- params ---------------------------------------------------------------

DetectorParams DetectorParams::init(const DetectorConfig& cfg, std::uint64_t seed) {
  Rng rng(seed_combine(0x706172616dULL, seed));  // "param" tag
  const int cb = cfg.backbone_channels;
  const int a = cfg.anchors_per_cell();
  const int dp = cfg.proposal_dim;
  const int flat = cfg.roi_flat_dim();
  DetectorParams p;
  p.conv1_w = init_tensor({16, 3, 3, 3}, he_std(3 * 9), rng);
  p.conv1_b = ag::Tensor::zeros({16}, true);
  p.conv2_w = init_tensor({32, 16, 3, 3}, he_std(16 * 9), rng);
  p.conv2_b = ag::Tensor::zeros({32}, true);
  p.conv3_w = init_tensor({cb, 32, 3, 3}, he_std(32 * 9), rng);
  p.conv3_b = ag::Tensor::zeros({cb}, true);
  p.rpn_conv_w = init_tensor({cb, cb, 3, 3}, he_std(cb * 9), rng);
  p.rpn_conv_b = ag::Tensor::zeros({cb}, true);
  p.rpn_obj_w = init_tensor({a, cb, 1, 1}, 0.01, rng);
  p.rpn_obj_b = ag::Tensor::zeros({a}, true);
  p.rpn_delta_w = init_tensor({4 * a, cb, 1, 1}, 0.01, rng);
  p.rpn_delta_b = ag::Tensor::zeros({4 * a}, true);
  p.fc1_w = init_tensor({dp, flat}, he_std(flat), rng);
  p.fc1_b = ag::Tensor::zeros({dp}, true);
  p.fc2_w = init_tensor({dp, dp}, he_std(dp), rng);
  p.fc2_b = ag::Tensor::zeros({dp}, true);
  p.cls_w = init_tensor({cfg.num_classes_with_bg(), dp}, 0.01, rng);
  p.cls_b = ag::Tensor::zeros({cfg.num_classes_with_bg()}, true);
  p.reg_w = init_tensor({4 * cfg.num_fg_classes, dp}, 0.01, rng);
  p.reg_b = ag::Tensor::zeros({4 * cfg.num_fg_classes}, true);
  return p;
}

std::vector<std::pair<std::string, ag::Tensor>> DetectorParams::named_params() const {
  return {
      {"backbone.conv1_w", conv1_w}, {"backbone.conv1_b", conv1_b},
      {"backbone.conv2_w", conv2_w}, {"backbone.conv2_b", conv2_b},
      {"backbone.conv3_w", conv3_w}, {"backbone.conv3_b", conv3_b},
      {"rpn.conv_w", rpn_conv_w},    {"rpn.conv_b", rpn_conv_b},
      {"rpn.obj_w", rpn_obj_w},      {"rpn.obj_b", rpn_obj_b},
      {"rpn.delta_w", rpn_delta_w},  {"rpn.delta_b", rpn_delta_b},
      {"rcnn.fc1_w", fc1_w},         {"rcnn.fc1_b", fc1_b},
      {"rcnn.fc2_w", fc2_w},         {"rcnn.fc2_b", fc2_b},
      {"cls.w", cls_w},              {"cls.b", cls_b},
      {"reg.w", reg_w},              {"reg.b", reg_b},
  };
}

// ---- anchors & box coding ---------------------------------------------------

AnchorGrid make_anchors(const DetectorConfig& cfg) {
  AnchorGrid grid;
  grid.anchors.reserve(cfg.total_anchors());
  // scale-major so anchor index matches the flat layout of the rpn head maps
  for (double scale : cfg.anchor_scales) {
    for (int i = 0; i < cfg.grid_h(); ++i) {
      for (int j = 0; j < cfg.grid_w(); ++j) {
        double cx = (j + 0.5) * cfg.stride;
        double cy = (i + 0.5) * cfg.stride;
        grid.anchors.push_back({cx - scale / 2, cy - scale / 2, scale, scale});
      }
    }
  }
  return grid;
}

std::array<double, 4> encode_box(const Box& target, const Box& anchor) {
  return {(target.cx() - anchor.cx()) / anchor.w, (target.cy() - anchor.cy()) / anchor.h,
          std::log(target.w / anchor.w), std::log(target.h / anchor.h)};
}

Box decode_box(const std::array<double, 4>& d, const Box& anchor, double delta_clamp) {
  double dw = std::clamp(d[2], -delta_clamp, delta_clamp);
  double dh = std::clamp(d[3], -delta_clamp, delta_clamp);
  double cx = anchor.cx() + d[0] * anchor.w;
  double cy = anchor.cy() + d[1] * anchor.h;
  double w = anchor.w * std::exp(dw);
  double h = anchor.h * std::exp(dh);
  return {cx - w / 2, cy - h / 2, w, h};
}

// ---- forward stages ---------------------------------------------------------

ag::Tensor backbone_forward(const ag::Tensor& image, const DetectorParams& params,
                            const DetectorConfig& cfg) {
  if (image.ndim() != 3 || image.shape()[0] != 3)
    throw ShapeError("backbone_forward: image must be [3, H, W]");
  if (image.shape()[1] % cfg.stride != 0 || image.shape()[2] % cfg.stride != 0)
    throw ShapeError("backbone_forward: image size not divisible by stride " +
                     std::to_string(cfg.stride));
  ag::Tensor h1 = ag::relu(ag::conv2d(image, params.conv1_w, params.conv1_b, 2, 1));
  ag::Tensor h2 = ag::relu(ag::conv2d(h1, params.conv2_w, params.conv2_b, 2, 1));
  return ag::relu(ag::conv2d(h2, params.conv3_w, params.conv3_b, 1, 1));
}

RpnOut rpn_forward(const ag::Tensor& feature_map, const DetectorParams& params,
                   const DetectorConfig& cfg) {
  ag::Tensor trunk = ag::relu(ag::conv2d(feature_map, params.rpn_conv_w, params.rpn_conv_b, 1, 1));
  ag::Tensor obj = ag::conv2d(trunk, params.rpn_obj_w, params.rpn_obj_b, 1, 0);
  ag::Tensor deltas = ag::conv2d(trunk, params.rpn_delta_w, params.rpn_delta_b, 1, 0);
  // obj: [A_pc, gh, gw] flat-matches the scale-major anchor order; deltas keep
  // their conv layout [4*A_pc, gh, gw] and are gathered per anchor as needed.
  return {obj, deltas};
}

namespace {

// deltas map [4*A_pc, gh, gw] -> the 4 coords of one anchor
std::array<double, 4> read_anchor_deltas(const ag::Tensor& deltas, int scale_idx, int cell_i,
                                         int cell_j, int gh, int gw) {
  std::array<double, 4> out;
  auto d = deltas.data();
  for (int c = 0; c < 4; ++c)
    out[c] = d[((static_cast<size_t>(4 * scale_idx + c) * gh) + cell_i) * gw + cell_j];
  return out;
}

// differentiable gather of the same 4 coords
ag::Tensor gather_anchor_deltas(const ag::Tensor& deltas, int scale_idx, int cell_i, int cell_j,
                                int gh, int gw) {
  std::array<size_t, 4> idx;
  std::vector<double> vals(4);
  auto d = deltas.data();
  for (int c = 0; c < 4; ++c) {
    idx[c] = ((static_cast<size_t>(4 * scale_idx + c) * gh) + cell_i) * gw + cell_j;
    vals[c] = d[idx[c]];
  }
  return ag::make_op("gather_deltas", {deltas}, {4}, std::move(vals), [idx](ag::Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int c = 0; c < 4; ++c) p->grad[idx[c]] += n.grad[c];
  });
}

}  // namespace

ProposalSet propose(const RpnOut& rpn, const AnchorGrid& anchors, const DetectorConfig& cfg,
                    int top_n) {
  const int a_total = cfg.total_anchors();
  if (static_cast<int>(anchors.anchors.size()) != a_total)
    throw ShapeError("propose: anchor grid does not cover the feature grid");
  if (top_n < 1) throw ValueError("propose: top_n must be >= 1");
  const int gh = cfg.grid_h(), gw = cfg.grid_w();

  auto logits = rpn.obj_logits.data();
  std::vector<int> order(a_total);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int l, int r) { return logits[l] > logits[r]; });

  const double img_w = cfg.image_size, img_h = cfg.image_size;
  ProposalSet out;
  int n = std::min(top_n, a_total);
  out.boxes.reserve(n);
  for (int k = 0; k < n; ++k) {
    int idx = order[k];
    int s = idx / (gh * gw);
    int cell = idx % (gh * gw);
    auto d = read_anchor_deltas(rpn.deltas, s, cell / gw, cell % gw, gh, gw);
    Box box = clip_box(decode_box(d, anchors.anchors[idx], cfg.delta_clamp), img_w, img_h);
    // enforce a 1 px minimum side inside the image
    if (box.w < 1.0) {
      box.x = std::min(box.x, img_w - 1.0);
      box.w = 1.0;
    }
    if (box.h < 1.0) {
      box.y = std::min(box.y, img_h - 1.0);
      box.h = 1.0;
    }
    double logit = logits[idx];
    double score = logit >= 0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
    out.boxes.push_back(box);
    out.objectness.push_back(score);
    out.anchor_index.push_back(idx);
  }
  return out;
}

ag::Tensor rpn_loss(const RpnOut& rpn, const AnchorGrid& anchors, const GroundTruth& truth,
                    const DetectorConfig& cfg) {
  if (truth.boxes.empty()) throw ValueError("rpn_loss: no ground truth");
  const int a_total = cfg.total_anchors();
  const int gh = cfg.grid_h(), gw = cfg.grid_w();
  const int n_gt = static_cast<int>(truth.boxes.size());

  // anchor labels: 1 positive, 0 negative, -1 ignored
  std::vector<int> label(a_total, -1);
  std::vector<int> matched_gt(a_total, -1);
  std::vector<double> max_iou(a_total, 0.0);
  std::vector<int> gt_argmax(n_gt, -1);
  std::vector<double> gt_best(n_gt, -1.0);
  for (int a = 0; a < a_total; ++a) {
    for (int g = 0; g < n_gt; ++g) {
      double v = iou(anchors.anchors[a], truth.boxes[g]);
      if (v > max_iou[a]) {
        max_iou[a] = v;
        matched_gt[a] = g;
      }
      if (v > gt_best[g]) {
        gt_best[g] = v;
        gt_argmax[g] = a;
      }
    }
  }
  for (int a = 0; a < a_total; ++a) {
    if (max_iou[a] >= 0.7) label[a] = 1;
    else if (max_iou[a] <= 0.3) label[a] = 0;
  }
  for (int g = 0; g < n_gt; ++g) {
    int a = gt_argmax[g];
    if (a < 0) continue;
    label[a] = 1;
    if (matched_gt[a] < 0 || iou(anchors.anchors[a], truth.boxes[g]) >= max_iou[a])
      matched_gt[a] = g;
  }

  int sampled = 0, positives = 0;
  for (int a = 0; a < a_total; ++a) {
    if (label[a] >= 0) ++sampled;
    if (label[a] == 1) ++positives;
  }

  // vectorized BCE over the objectness map: -(y log s + (1-y) log(1-s)),
  // masked to sampled anchors; the flat layout matches anchor order
  std::vector<double> y(a_total, 0.0), mask(a_total, 0.0);
  for (int a = 0; a < a_total; ++a) {
    if (label[a] >= 0) mask[a] = 1.0;
    if (label[a] == 1) y[a] = 1.0;
  }
  auto shape = rpn.obj_logits.shape();
  ag::Tensor yt = ag::Tensor::from_data(shape, std::move(y));
  ag::Tensor mt = ag::Tensor::from_data(shape, std::move(mask));
  ag::Tensor s_pos = ag::sigmoid(rpn.obj_logits);
  ag::Tensor s_neg = ag::sigmoid(ag::neg(rpn.obj_logits));  // 1 - sigmoid(x)
  ag::Tensor one = ag::Tensor::full(shape, 1.0);
  ag::Tensor bce = ag::neg(ag::add(ag::mul(yt, ag::log(s_pos)),
                                   ag::mul(ag::sub(one, yt), ag::log(s_neg))));
  ag::Tensor cls_term = ag::sum(ag::mul(mt, bce));

  ag::Tensor total = cls_term;
  for (int a = 0; a < a_total; ++a) {
    if (label[a] != 1) continue;
    int g = matched_gt[a];
    auto target = encode_box(truth.boxes[g], anchors.anchors[a]);
    int s = a / (gh * gw);
    int cell = a % (gh * gw);
    ag::Tensor pred = gather_anchor_deltas(rpn.deltas, s, cell / gw, cell % gw, gh, gw);
    ag::Tensor tgt = ag::Tensor::from_data({4}, {target[0], target[1], target[2], target[3]});
    total = ag::add(total, ag::sum(ag::smooth_l1(ag::sub(pred, tgt))));
  }
  return ag::scale(total, 1.0 / std::max(1, sampled));
}

ag::Tensor roi_align(const ag::Tensor& feature_map, const Box& box_pixels, int out_size,
                     int stride) {
  if (feature_map.ndim() != 3) throw ShapeError("roi_align: feature map must be [C, H, W]");
  if (out_size < 1) throw ValueError("roi_align: out_size must be >= 1");
  const int c = feature_map.shape()[0], fh = feature_map.shape()[1], fw = feature_map.shape()[2];
  Box box = clip_box(box_pixels, fw * static_cast<double>(stride), fh * static_cast<double>(stride));
  if (box.area() < 1.0)
    throw ValueError("roi_align: degenerate box after clipping (area < 1 px^2)");

  // half-pixel alignment: pixel p sits at feature coordinate p/stride - 0.5
  double x0 = box.x / stride - 0.5;
  double y0 = box.y / stride - 0.5;
  double cw = box.w / stride / out_size;
  double ch = box.h / stride / out_size;

  // 4 taps per cell at the quarter points, shared across channels
  struct CellTap {
    BilinearTap t[4];
  };
  std::vector<CellTap> taps(static_cast<size_t>(out_size) * out_size);
  for (int cy = 0; cy < out_size; ++cy) {
    for (int cx = 0; cx < out_size; ++cx) {
      CellTap& ct = taps[static_cast<size_t>(cy) * out_size + cx];
      int k = 0;
      for (double qy : {0.25, 0.75})
        for (double qx : {0.25, 0.75})
          ct.t[k++] = tap_at(x0 + (cx + qx) * cw, y0 + (cy + qy) * ch, fh, fw);
    }
  }

  std::vector<double> out(static_cast<size_t>(c) * out_size * out_size);
  auto d = feature_map.data();
  for (int ch_i = 0; ch_i < c; ++ch_i) {
    const double* plane = d.data() + static_cast<size_t>(ch_i) * fh * fw;
    double* o = out.data() + static_cast<size_t>(ch_i) * out_size * out_size;
    for (size_t cell = 0; cell < taps.size(); ++cell) {
      double acc = 0.0;
      for (const auto& t : taps[cell].t)
        acc += t.w00 * plane[static_cast<size_t>(t.y0) * fw + t.x0] +
               t.w01 * plane[static_cast<size_t>(t.y0) * fw + t.x1] +
               t.w10 * plane[static_cast<size_t>(t.y1) * fw + t.x0] +
               t.w11 * plane[static_cast<size_t>(t.y1) * fw + t.x1];
      o[cell] = acc * 0.25;
    }
  }
  return ag::make_op("roi_align", {feature_map}, {c, out_size, out_size}, std::move(out),
                     [c, fh, fw, out_size, taps](ag::Node& n) {
                       auto& p = n.parents[0];
                       if (!p->requires_grad) return;
                       p->ensure_grad();
                       for (int ch_i = 0; ch_i < c; ++ch_i) {
                         double* plane = p->grad.data() + static_cast<size_t>(ch_i) * fh * fw;
                         const double* g =
                             n.grad.data() + static_cast<size_t>(ch_i) * out_size * out_size;
                         for (size_t cell = 0; cell < taps.size(); ++cell) {
                           double gv = g[cell] * 0.25;
                           if (gv == 0.0) continue;
                           for (const auto& t : taps[cell].t) {
                             plane[static_cast<size_t>(t.y0) * fw + t.x0] += gv * t.w00;
                             plane[static_cast<size_t>(t.y0) * fw + t.x1] += gv * t.w01;
                             plane[static_cast<size_t>(t.y1) * fw + t.x0] += gv * t.w10;
                             plane[static_cast<size_t>(t.y1) * fw + t.x1] += gv * t.w11;
                           }
                         }
                       }
                     });
}

ag::Tensor stack_roi_rows(const std::vector<ag::Tensor>& roi_maps) {
  return ag::stack_rows(roi_maps);
}

HeadOutputs rcnn_forward(const ag::Tensor& stacked_rois, const DetectorParams& params,
                         const DetectorConfig& cfg) {
  if (stacked_rois.ndim() != 2 || stacked_rois.shape()[1] != cfg.roi_flat_dim())
    throw ShapeError("rcnn_forward: expected [M, " + std::to_string(cfg.roi_flat_dim()) + "] input");
  ag::Tensor h1 = ag::relu(ag::linear(stacked_rois, params.fc1_w, params.fc1_b));
  ag::Tensor features = ag::relu(ag::linear(h1, params.fc2_w, params.fc2_b));
  ag::Tensor class_probs = ag::softmax(ag::linear(features, params.cls_w, params.cls_b), 1);
  ag::Tensor reg = ag::linear(features, params.reg_w, params.reg_b);
  return {features, class_probs, reg};
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int l, int r) { return scores[l] > scores[r]; });
  std::vector<int> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int idx : order) {
    if (suppressed[idx]) continue;
    keep.push_back(idx);
    for (int other : order) {
      if (other == idx || suppressed[other]) continue;
      if (iou(boxes[idx], boxes[other]) > iou_thresh) suppressed[other] = 1;
    }
  }
  return keep;
}

std::vector<Detection> detect(const Example& example, const DetectorParams& params,
                              const DetectorConfig& cfg, double score_thresh, double nms_iou) {
  ag::Tensor fb = backbone_forward(example.image, params, cfg);
  RpnOut rpn = rpn_forward(fb, params, cfg);
  AnchorGrid anchors = make_anchors(cfg);
  ProposalSet proposals = propose(rpn, anchors, cfg, cfg.top_n_infer);

  std::vector<ag::Tensor> rois;
  rois.reserve(proposals.size());
  for (const auto& box : proposals.boxes)
    rois.push_back(roi_align(fb, box, cfg.roi_size, cfg.stride));
  HeadOutputs heads = rcnn_forward(stack_roi_rows(rois), params, cfg);

  const double img_w = example.width, img_h = example.height;
  std::vector<Detection> all;
  for (int cls = 0; cls < cfg.num_fg_classes; ++cls) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int n = 0; n < proposals.size(); ++n) {
      std::array<double, 4> d = {heads.reg_deltas.at(n, 4 * cls + 0),
                                 heads.reg_deltas.at(n, 4 * cls + 1),
                                 heads.reg_deltas.at(n, 4 * cls + 2),
                                 heads.reg_deltas.at(n, 4 * cls + 3)};
      Box box = clip_box(decode_box(d, proposals.boxes[n], cfg.delta_clamp), img_w, img_h);
      if (box.w <= 0.0 || box.h <= 0.0) continue;
      boxes.push_back(box);
      scores.push_back(heads.class_probs.at(n, cls + 1));
    }
    for (int idx : nms(boxes, scores, nms_iou)) {
      if (scores[idx] < score_thresh) continue;
      all.push_back({boxes[idx], cls, scores[idx]});
    }
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Detection& l, const Detection& r) { return l.score > r.score; });
  return all;
}

}  // namespace pldet
