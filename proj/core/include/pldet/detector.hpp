#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pldet/autograd.hpp"
#include "pldet/geometry.hpp"
#include "pldet/scenes.hpp"

namespace pldet {

struct DetectorConfig {
  int image_size = 64;
  int num_fg_classes = 3;
  int stride = 4;                 // total backbone stride (two stride-2 convs)
  int backbone_channels = 32;     // C_b, output channels of the backbone
  std::vector<double> anchor_scales = {12.0, 20.0, 32.0};  // square anchors, pixels
  int roi_size = 4;               // RoIAlign output cells per side
  int proposal_dim = 128;         // D_p, trunk output width
  int top_n_train = 12;           // proposals kept per image during training
  int top_n_infer = 32;           // proposals kept per image at inference
  double delta_clamp = 4.0;       // |dw|,|dh| clamp before exp in decode

  int num_classes_with_bg() const { return num_fg_classes + 1; }
  int grid_h() const { return image_size / stride; }
  int grid_w() const { return image_size / stride; }
  int anchors_per_cell() const { return static_cast<int>(anchor_scales.size()); }
  int total_anchors() const { return grid_h() * grid_w() * anchors_per_cell(); }
  int roi_flat_dim() const { return backbone_channels * roi_size * roi_size; }
};

// theta^b, theta^rpn, theta^r-cnn, theta^cls, theta^reg as named tensors.
struct DetectorParams {
  // backbone: 3 -> 16 -> 32 -> C_b, stride 2 at the first two layers
  ag::Tensor conv1_w, conv1_b;
  ag::Tensor conv2_w, conv2_b;
  ag::Tensor conv3_w, conv3_b;
  // rpn: 3x3 trunk conv then 1x1 objectness / delta heads
  ag::Tensor rpn_conv_w, rpn_conv_b;
  ag::Tensor rpn_obj_w, rpn_obj_b;
  ag::Tensor rpn_delta_w, rpn_delta_b;
  // r-cnn trunk (two fc+relu) and prediction heads
  ag::Tensor fc1_w, fc1_b;
  ag::Tensor fc2_w, fc2_b;
  ag::Tensor cls_w, cls_b;
  ag::Tensor reg_w, reg_b;

  static DetectorParams init(const DetectorConfig& cfg, std::uint64_t seed);

  // canonical order; names are prefixed by parameter group
  // (backbone. / rpn. / rcnn. / cls. / reg.)
  std::vector<std::pair<std::string, ag::Tensor>> named_params() const;
};

struct AnchorGrid {
  std::vector<Box> anchors;  // cell-major, scales innermost
};

AnchorGrid make_anchors(const DetectorConfig& cfg);

// standard Faster R-CNN delta parameterization
std::array<double, 4> encode_box(const Box& target, const Box& anchor);
Box decode_box(const std::array<double, 4>& deltas, const Box& anchor, double delta_clamp);

struct ProposalSet {
  std::vector<Box> boxes;          // clipped to the image, w/h >= 1 px
  std::vector<double> objectness;  // sigmoid scores in [0, 1]
  std::vector<int> anchor_index;   // source anchor of each proposal
  std::int64_t image_id = 0;

  int size() const { return static_cast<int>(boxes.size()); }
};

struct RpnOut {
  ag::Tensor obj_logits;  // [A]
  ag::Tensor deltas;      // [A, 4]
};

ag::Tensor backbone_forward(const ag::Tensor& image, const DetectorParams& params,
                            const DetectorConfig& cfg);

RpnOut rpn_forward(const ag::Tensor& feature_map, const DetectorParams& params,
                   const DetectorConfig& cfg);

// Ranks anchors by objectness (stable ties by anchor index), decodes deltas,
// clips, and enforces a 1 px minimum side; always emits min(top_n, A) boxes.
ProposalSet propose(const RpnOut& rpn, const AnchorGrid& anchors, const DetectorConfig& cfg,
                    int top_n);

// Binary cross-entropy on anchor labels (positive: IoU >= 0.7 or per-GT argmax;
// negative: IoU <= 0.3) plus smooth-l1 on positive-anchor deltas, normalized by
// the number of sampled (non-ignored) anchors.
ag::Tensor rpn_loss(const RpnOut& rpn, const AnchorGrid& anchors, const GroundTruth& truth,
                    const DetectorConfig& cfg);

// RoIAlign: out_size^2 cells, each the mean of 4 bilinear samples at its
// quarter points; pixel coords map to feature coords with half-pixel alignment
// so a flipped map + flipped box mirrors the cell grid exactly.
ag::Tensor roi_align(const ag::Tensor& feature_map, const Box& box_pixels, int out_size,
                     int stride);

// Stacks per-proposal [C, r, r] maps into a [M, C*r*r] batch for the trunk.
ag::Tensor stack_roi_rows(const std::vector<ag::Tensor>& roi_maps);

struct HeadOutputs {
  ag::Tensor features;     // F^p, [M, D_p]
  ag::Tensor class_probs;  // C^p, [M, C_fg+1], rows on the simplex
  ag::Tensor reg_deltas;   // R^p, [M, 4*C_fg]
};

// trunk: flatten -> fc+relu -> fc+relu -> F^p; heads: softmax classifier and
// class-specific box regression. Identical weights serve original and noisy rows.
HeadOutputs rcnn_forward(const ag::Tensor& stacked_rois, const DetectorParams& params,
                         const DetectorConfig& cfg);

struct Detection {
  Box box;
  int cls = 0;  // foreground class id in {0 .. C_fg-1}
  double score = 0.0;
};

// Greedy per-class NMS; returns indices kept, score-descending.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh);

std::vector<Detection> detect(const Example& example, const DetectorParams& params,
                              const DetectorConfig& cfg, double score_thresh, double nms_iou);

}  // namespace pldet
