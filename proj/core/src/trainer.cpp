#include "pldet/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "pldet/errors.hpp"

namespace pldet {

void validate(const HyperParams& hp) {
  if (hp.lambda_self_loc < 0 || hp.lambda_self_cont < 0 || hp.lambda_cons_cls < 0 ||
      hp.lambda_cons_reg < 0)
    throw ValueError("hyperparams: loss weights must be >= 0");
  if (hp.tau <= 0) throw ValueError("hyperparams: tau must be > 0");
  if (hp.k_variants < 1) throw ValueError("hyperparams: K must be >= 1");
  if (hp.score_thresh <= 0 || hp.score_thresh >= 1)
    throw ValueError("hyperparams: score threshold must be in (0, 1)");
  if (hp.base_lr <= 0) throw ValueError("hyperparams: base lr must be > 0");
  if (hp.momentum < 0 || hp.momentum >= 1) throw ValueError("hyperparams: bad momentum");
  if (hp.warmup_iters < 0) throw ValueError("hyperparams: negative warmup");
  if (hp.epochs < 1 || hp.steps_per_epoch < 1) throw ValueError("hyperparams: empty schedule");
  if (hp.warm_epochs < 0 || hp.warm_epochs > hp.epochs)
    throw ValueError("hyperparams: warm_epochs out of range");
  if (hp.fswa_last_epochs < 1) throw ValueError("hyperparams: fswa ring must hold >= 1 epoch");
  if (hp.noise_specs.empty()) throw ValueError("hyperparams: no noise specs");
}

std::vector<std::pair<std::string, ag::Tensor>> TrainState::named_params() const {
  auto params = det.named_params();
  auto sspl_params = sspl.named_params();
  params.insert(params.end(), sspl_params.begin(), sspl_params.end());
  return params;
}

TrainState init_state(const DetectorConfig& det_cfg, const SsplConfig& sspl_cfg,
                      const HyperParams& hp, std::uint64_t seed) {
  validate(hp);
  if (sspl_cfg.proposal_dim != det_cfg.proposal_dim)
    throw ValueError("init_state: sspl proposal_dim must match the detector trunk");
  TrainState state;
  state.det_cfg = det_cfg;
  state.sspl_cfg = sspl_cfg;
  state.hp = hp;
  state.det = DetectorParams::init(det_cfg, seed);
  state.sspl = SsplParams::init(sspl_cfg, seed_combine(seed, 1));
  state.seed = seed;
  state.rng = Rng(seed_combine(seed, 0x73616d706c65ULL));  // "sample" tag
  for (const auto& [name, tensor] : state.named_params())
    state.velocity.emplace_back(tensor.size(), 0.0);
  return state;
}

double lr_at(long iter, int epoch, const HyperParams& hp) {
  double warm_scale = 1.0;
  if (hp.warmup_iters > 0 && iter < hp.warmup_iters)
    warm_scale = (1.0 + 2.0 * iter / hp.warmup_iters) / 3.0;
  double decay = 1.0;
  for (int m : hp.milestones)
    if (epoch >= m) decay *= 0.1;
  return hp.base_lr * warm_scale * decay;
}

void sgd_update(TrainState& state, double lr) {
  auto params = state.named_params();
  if (params.size() != state.velocity.size())
    throw ShapeError("sgd_update: velocity buffers out of sync");
  for (auto& [name, tensor] : params)
    for (double g : tensor.grad())
      if (!std::isfinite(g))
        throw NumericError("sgd_update: non-finite gradient in " + name + "; step aborted");
  const double m = state.hp.momentum, wd = state.hp.weight_decay;
  for (size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].second.raw_data();
    auto grad = params[i].second.grad();
    auto& vel = state.velocity[i];
    for (size_t j = 0; j < vel.size(); ++j) {
      vel[j] = m * vel[j] + (grad[j] + wd * data[j]);
      data[j] -= lr * vel[j];
    }
  }
}

ParamSnapshot snapshot_params(const TrainState& state) {
  ParamSnapshot snap;
  for (const auto& [name, tensor] : state.named_params())
    snap.emplace_back(tensor.data().begin(), tensor.data().end());
  return snap;
}

void restore_params(TrainState& state, const ParamSnapshot& snap) {
  auto params = state.named_params();
  if (snap.size() != params.size()) throw ShapeError("restore_params: snapshot size mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].second.raw_data();
    if (snap[i].size() != data.size()) throw ShapeError("restore_params: tensor size mismatch");
    std::copy(snap[i].begin(), snap[i].end(), data.begin());
  }
}

ParamSnapshot fswa_average(const std::vector<ParamSnapshot>& checkpoints) {
  if (checkpoints.empty()) throw ValueError("fswa_average: no checkpoints");
  ParamSnapshot avg = checkpoints[0];
  for (size_t c = 1; c < checkpoints.size(); ++c) {
    if (checkpoints[c].size() != avg.size())
      throw ShapeError("fswa_average: checkpoint layout mismatch");
    for (size_t i = 0; i < avg.size(); ++i) {
      if (checkpoints[c][i].size() != avg[i].size())
        throw ShapeError("fswa_average: tensor shape mismatch across checkpoints");
      for (size_t j = 0; j < avg[i].size(); ++j) avg[i][j] += checkpoints[c][i][j];
    }
  }
  double inv = 1.0 / checkpoints.size();
  for (auto& t : avg)
    for (auto& v : t) v *= inv;
  return avg;
}

// ---- forward & losses -------------------------------------------------------

ImageForward forward_image(const Example& example, const TrainState& state) {
  ImageForward fwd;
  fwd.feature_map = backbone_forward(example.image, state.det, state.det_cfg);
  fwd.rpn = rpn_forward(fwd.feature_map, state.det, state.det_cfg);
  AnchorGrid anchors = make_anchors(state.det_cfg);
  fwd.proposals = propose(fwd.rpn, anchors, state.det_cfg, state.det_cfg.top_n_train);
  fwd.proposals.image_id = example.id;
  fwd.roi_maps.reserve(fwd.proposals.size());
  for (const auto& box : fwd.proposals.boxes)
    fwd.roi_maps.push_back(
        roi_align(fwd.feature_map, box, state.det_cfg.roi_size, state.det_cfg.stride));
  fwd.heads = rcnn_forward(ag::stack_rows(fwd.roi_maps), state.det, state.det_cfg);
  return fwd;
}

std::vector<int> select_proposals(const ProposalSet& proposals, const ag::Tensor& class_probs,
                                  const std::optional<GroundTruth>& truth, double score_thresh,
                                  double positive_iou, int num_fg_classes) {
  std::vector<int> selected;
  if (truth) {
    for (int n = 0; n < proposals.size(); ++n) {
      for (const auto& gt : truth->boxes) {
        if (iou(proposals.boxes[n], gt) >= positive_iou) {
          selected.push_back(n);
          break;
        }
      }
    }
  } else {
    for (int n = 0; n < proposals.size(); ++n) {
      double max_fg = 0.0;
      for (int c = 0; c < num_fg_classes; ++c)
        max_fg = std::max(max_fg, class_probs.at(n, c + 1));
      if (max_fg > score_thresh) selected.push_back(n);
    }
  }
  return selected;
}

ag::Tensor rcnn_supervised_loss(const ProposalSet& proposals, const HeadOutputs& heads,
                                const GroundTruth& truth, const DetectorConfig& cfg,
                                double positive_iou) {
  if (truth.boxes.empty()) throw ValueError("rcnn_supervised_loss: no ground truth");
  const int n = proposals.size();
  const int n_cls = cfg.num_classes_with_bg();

  // match each proposal to its best GT; background below the IoU threshold
  std::vector<int> target_cls(n, 0);
  std::vector<int> matched_gt(n, -1);
  for (int i = 0; i < n; ++i) {
    double best = 0.0;
    int best_g = -1;
    for (size_t g = 0; g < truth.boxes.size(); ++g) {
      double v = iou(proposals.boxes[i], truth.boxes[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best >= positive_iou) {
      matched_gt[i] = best_g;
      target_cls[i] = truth.classes[best_g] + 1;  // background is class 0
    }
  }

  // cross-entropy via a one-hot mask over log C^p
  std::vector<double> onehot(static_cast<size_t>(n) * n_cls, 0.0);
  for (int i = 0; i < n; ++i) onehot[static_cast<size_t>(i) * n_cls + target_cls[i]] = 1.0;
  ag::Tensor mask = ag::Tensor::from_data({n, n_cls}, std::move(onehot));
  ag::Tensor total = ag::neg(ag::sum(ag::mul(mask, ag::log(heads.class_probs))));

  // smooth-l1 on the matched class's deltas, positives only
  for (int i = 0; i < n; ++i) {
    if (matched_gt[i] < 0) continue;
    auto target = encode_box(truth.boxes[matched_gt[i]], proposals.boxes[i]);
    int fg = target_cls[i] - 1;
    ag::Tensor pred = ag::reshape(ag::slice(ag::slice(heads.reg_deltas, 0, i, 1), 1, 4 * fg, 4), {4});
    ag::Tensor tgt = ag::Tensor::from_data({4}, {target[0], target[1], target[2], target[3]});
    total = ag::add(total, ag::sum(ag::smooth_l1(ag::sub(pred, tgt))));
  }
  return ag::scale(total, 1.0 / n);
}

ag::Tensor supervised_loss(const Example& example, const ImageForward& fwd,
                           const TrainState& state) {
  if (!example.truth) throw ValueError("supervised_loss: unlabeled example");
  AnchorGrid anchors = make_anchors(state.det_cfg);
  ag::Tensor rpn = rpn_loss(fwd.rpn, anchors, *example.truth, state.det_cfg);
  ag::Tensor rcnn = rcnn_supervised_loss(fwd.proposals, fwd.heads, *example.truth, state.det_cfg,
                                         state.hp.positive_iou);
  return ag::add(rpn, rcnn);
}

namespace {

// Proposal-learning terms of one image, each already averaged over the
// selected proposals. Tensors are undefined when disabled or nothing selected.
struct PlTerms {
  ag::Tensor self_loc, self_cont, cons_cls, cons_reg;
  int n_selected = 0;
};

void accumulate(ag::Tensor& total, const ag::Tensor& term) {
  if (!term.defined()) return;
  total = total.defined() ? ag::add(total, term) : term;
}

PlTerms proposal_learning_terms(const Example& example, const ImageForward& fwd,
                                const TrainState& state, std::uint64_t noise_seed) {
  const HyperParams& hp = state.hp;
  PlTerms terms;
  std::vector<int> selected =
      select_proposals(fwd.proposals, fwd.heads.class_probs, example.truth, hp.score_thresh,
                       hp.positive_iou, state.det_cfg.num_fg_classes);
  terms.n_selected = static_cast<int>(selected.size());
  if (selected.empty()) return terms;

  const int m = terms.n_selected;
  const int k = hp.k_variants;
  const bool need_loc = hp.lambda_self_loc > 0;
  const bool need_cont = hp.lambda_self_cont > 0;
  const bool need_cons = hp.lambda_cons_cls > 0 || hp.lambda_cons_reg > 0;

  // noisy branch: K perturbed conv maps per selected proposal, one batched
  // pass through the shared R-CNN trunk and heads
  std::vector<ag::Tensor> noisy_maps;
  noisy_maps.reserve(static_cast<size_t>(m) * k);
  for (int mi = 0; mi < m; ++mi) {
    int n = selected[mi];
    auto variants = make_noisy_set(fwd.roi_maps[n], hp.noise_specs, k, noise_seed,
                                   static_cast<std::uint64_t>(n));
    for (auto& v : variants) noisy_maps.push_back(std::move(v));
  }
  HeadOutputs noisy = rcnn_forward(ag::stack_rows(noisy_maps), state.det, state.det_cfg);

  // location pretext: original + noisy predictions against the normalized box
  if (need_loc) {
    std::vector<ag::Tensor> orig_rows;
    orig_rows.reserve(m);
    for (int n : selected) orig_rows.push_back(ag::row(fwd.heads.features, n));
    ag::Tensor loc_orig = location_forward(ag::stack_rows(orig_rows), state.sspl);
    ag::Tensor loc_noisy = location_forward(noisy.features, state.sspl);
    ag::Tensor loc_total;
    for (int mi = 0; mi < m; ++mi) {
      auto norm = normalize_box(fwd.proposals.boxes[selected[mi]], example.width, example.height);
      std::vector<ag::Tensor> noisy_rows;
      noisy_rows.reserve(k);
      for (int ki = 0; ki < k; ++ki) noisy_rows.push_back(ag::row(loc_noisy, mi * k + ki));
      accumulate(loc_total, location_loss(ag::row(loc_orig, mi), noisy_rows, norm));
    }
    terms.self_loc = ag::scale(loc_total, 1.0 / m);
  }

  // instance discrimination over the selected set
  if (need_cont) {
    std::vector<ag::Tensor> orig_embeds;
    orig_embeds.reserve(m);
    for (int n : selected)
      orig_embeds.push_back(embed_forward(ag::row(fwd.heads.features, n), state.sspl));
    ag::Tensor cont_total;
    for (int mi = 0; mi < m; ++mi) {
      std::vector<ag::Tensor> noisy_embeds;
      noisy_embeds.reserve(k);
      for (int ki = 0; ki < k; ++ki)
        noisy_embeds.push_back(embed_forward(ag::row(noisy.features, mi * k + ki), state.sspl));
      accumulate(cont_total, contrastive_loss(orig_embeds, noisy_embeds, mi, hp.tau));
    }
    terms.self_cont = ag::scale(cont_total, 1.0 / m);
  }

  if (need_cons) {
    const int n_fg = state.det_cfg.num_fg_classes;
    ag::Tensor cls_total, reg_total;
    for (int mi = 0; mi < m; ++mi) {
      int n = selected[mi];
      if (hp.lambda_cons_cls > 0) {
        ag::Tensor orig_row = ag::row(fwd.heads.class_probs, n);
        std::vector<ag::Tensor> noisy_rows;
        noisy_rows.reserve(k);
        for (int ki = 0; ki < k; ++ki)
          noisy_rows.push_back(ag::row(noisy.class_probs, mi * k + ki));
        accumulate(cls_total, cls_consistency(orig_row, noisy_rows));
      }
      if (hp.lambda_cons_reg > 0) {
        // regression outputs of the argmax foreground class of the original prediction
        int best_fg = 0;
        double best = -1.0;
        for (int c = 0; c < n_fg; ++c) {
          double v = fwd.heads.class_probs.at(n, c + 1);
          if (v > best) {
            best = v;
            best_fg = c;
          }
        }
        ag::Tensor orig_reg =
            ag::reshape(ag::slice(ag::slice(fwd.heads.reg_deltas, 0, n, 1), 1, 4 * best_fg, 4), {4});
        std::vector<ag::Tensor> noisy_regs;
        noisy_regs.reserve(k);
        for (int ki = 0; ki < k; ++ki)
          noisy_regs.push_back(ag::reshape(
              ag::slice(ag::slice(noisy.reg_deltas, 0, mi * k + ki, 1), 1, 4 * best_fg, 4), {4}));
        accumulate(reg_total, reg_consistency(orig_reg, noisy_regs));
      }
    }
    if (cls_total.defined()) terms.cons_cls = ag::scale(cls_total, 1.0 / m);
    if (reg_total.defined()) terms.cons_reg = ag::scale(reg_total, 1.0 / m);
  }
  return terms;
}

}  // namespace

LossBreakdown training_step(TrainState& state, const Example& labeled, const Example* unlabeled) {
  if (!labeled.truth) throw ValueError("training_step: labeled slot carries no ground truth");
  const HyperParams& hp = state.hp;
  LossBreakdown out;
  out.lr = lr_at(state.iter, state.epoch, hp);

  for (auto& [name, tensor] : state.named_params()) tensor.zero_grad();

  ImageForward labeled_fwd = forward_image(labeled, state);
  AnchorGrid anchors = make_anchors(state.det_cfg);
  ag::Tensor rpn = rpn_loss(labeled_fwd.rpn, anchors, *labeled.truth, state.det_cfg);
  ag::Tensor rcnn = rcnn_supervised_loss(labeled_fwd.proposals, labeled_fwd.heads, *labeled.truth,
                                         state.det_cfg, hp.positive_iou);
  out.rpn = rpn.item();
  out.rcnn = rcnn.item();
  ag::Tensor total = ag::add(rpn, rcnn);

  const bool warm = state.epoch < hp.warm_epochs;
  if (!warm && hp.pl_enabled()) {
    // component sums across the images contributing PL terms
    ag::Tensor self_loc, self_cont, cons_cls, cons_reg;
    auto merge = [&](const PlTerms& terms) {
      accumulate(self_loc, terms.self_loc);
      accumulate(self_cont, terms.self_cont);
      accumulate(cons_cls, terms.cons_cls);
      accumulate(cons_reg, terms.cons_reg);
    };
    if (hp.variant == ObjectiveVariant::kEq3) {
      PlTerms terms = proposal_learning_terms(
          labeled, labeled_fwd, state,
          seed_combine(state.seed, 0x6e6cULL, static_cast<std::uint64_t>(state.iter),
                       static_cast<std::uint64_t>(labeled.id)));
      out.sel_labeled = terms.n_selected;
      merge(terms);
    }
    if (unlabeled != nullptr) {
      ImageForward unlabeled_fwd = forward_image(*unlabeled, state);
      PlTerms terms = proposal_learning_terms(
          *unlabeled, unlabeled_fwd, state,
          seed_combine(state.seed, 0x6e75ULL, static_cast<std::uint64_t>(state.iter),
                       static_cast<std::uint64_t>(unlabeled->id)));
      out.sel_unlabeled = terms.n_selected;
      merge(terms);
    }
    if (self_loc.defined()) {
      out.self_loc = self_loc.item();
      total = ag::add(total, ag::scale(self_loc, hp.lambda_self_loc));
    }
    if (self_cont.defined()) {
      out.self_cont = self_cont.item();
      total = ag::add(total, ag::scale(self_cont, hp.lambda_self_cont));
    }
    if (cons_cls.defined()) {
      out.cons_cls = cons_cls.item();
      total = ag::add(total, ag::scale(cons_cls, hp.lambda_cons_cls));
    }
    if (cons_reg.defined()) {
      out.cons_reg = cons_reg.item();
      total = ag::add(total, ag::scale(cons_reg, hp.lambda_cons_reg));
    }
  }

  out.total = total.item();
  ag::backward(total);
  sgd_update(state, out.lr);
  ++state.iter;
  return out;
}

std::pair<std::vector<Example>, DistillStats> distill_label(
    const DetectorParams& params, const DetectorConfig& cfg, const std::vector<Example>& pool,
    double score_thresh, double nms_iou) {
  DistillStats stats;
  stats.num_input = static_cast<int>(pool.size());
  std::vector<Example> out;
  for (const auto& ex : pool) {
    // transform ensemble: identity + horizontal flip, boxes mapped back
    std::vector<Detection> merged = detect(ex, params, cfg, 0.05, nms_iou);
    Example flipped = flip_example(ex);
    for (const auto& det : detect(flipped, params, cfg, 0.05, nms_iou))
      merged.push_back({flip_box_h(det.box, ex.width), det.cls, det.score});

    GroundTruth truth;
    for (int cls = 0; cls < cfg.num_fg_classes; ++cls) {
      std::vector<Box> boxes;
      std::vector<double> scores;
      for (const auto& det : merged) {
        if (det.cls != cls) continue;
        boxes.push_back(det.box);
        scores.push_back(det.score);
      }
      for (int idx : nms(boxes, scores, nms_iou)) {
        if (scores[idx] < score_thresh) continue;
        truth.boxes.push_back(boxes[idx]);
        truth.classes.push_back(cls);
      }
    }
    if (truth.boxes.empty()) continue;
    Example pseudo;
    pseudo.image = ex.image;
    pseudo.width = ex.width;
    pseudo.height = ex.height;
    pseudo.id = ex.id;
    stats.num_boxes += static_cast<int>(truth.boxes.size());
    pseudo.truth = std::move(truth);
    out.push_back(std::move(pseudo));
  }
  stats.num_pseudo_labeled = static_cast<int>(out.size());
  return {std::move(out), stats};
}

}  // namespace pldet
