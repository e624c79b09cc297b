#include "pldet/sspl.hpp"

#include <cmath>

#include "pldet/errors.hpp"
#include "pldet/rng.hpp"

namespace pldet {

SsplParams SsplParams::init(const SsplConfig& cfg, std::uint64_t seed) {
  if (cfg.hidden_loc < 2 || cfg.embed_dim < 2)
    throw ValueError("sspl config: hidden_loc and embed_dim must be >= 2");
  Rng rng(seed_combine(0x7373706cULL, seed));  // "sspl" tag
  auto init_tensor = [&](std::vector<int> shape, double stddev) {
    std::vector<double> data(ag::numel(shape));
    for (auto& v : data) v = rng.normal(0.0, stddev);
    return ag::Tensor::from_data(std::move(shape), std::move(data), true);
  };
  SsplParams p;
  p.loc_fc1_w = init_tensor({cfg.hidden_loc, cfg.proposal_dim},
                            std::sqrt(2.0 / cfg.proposal_dim));
  p.loc_fc1_b = ag::Tensor::zeros({cfg.hidden_loc}, true);
  p.loc_fc2_w = init_tensor({4, cfg.hidden_loc}, 0.01);
  p.loc_fc2_b = ag::Tensor::zeros({4}, true);
  p.embed_w = init_tensor({cfg.embed_dim, cfg.proposal_dim},
                          std::sqrt(1.0 / cfg.proposal_dim));
  p.embed_b = ag::Tensor::zeros({cfg.embed_dim}, true);
  return p;
}

std::vector<std::pair<std::string, ag::Tensor>> SsplParams::named_params() const {
  return {
      {"self_loc.fc1_w", loc_fc1_w}, {"self_loc.fc1_b", loc_fc1_b},
      {"self_loc.fc2_w", loc_fc2_w}, {"self_loc.fc2_b", loc_fc2_b},
      {"self_cont.w", embed_w},      {"self_cont.b", embed_b},
  };
}

std::array<double, 4> normalize_box(const Box& box, double img_w, double img_h) {
  if (img_w <= 0.0 || img_h <= 0.0) throw ValueError("normalize_box: zero image dims");
  return {box.x / img_w, box.y / img_h, box.w / img_w, box.h / img_h};
}

ag::Tensor location_forward(const ag::Tensor& features, const SsplParams& params) {
  ag::Tensor hidden = ag::relu(ag::linear(features, params.loc_fc1_w, params.loc_fc1_b));
  return ag::sigmoid(ag::linear(hidden, params.loc_fc2_w, params.loc_fc2_b));
}

ag::Tensor location_loss(const ag::Tensor& loc_orig, const std::vector<ag::Tensor>& loc_noisy,
                         const std::array<double, 4>& norm_box) {
  if (loc_orig.size() != 4) throw ShapeError("location_loss: prediction must have 4 components");
  ag::Tensor target = ag::Tensor::from_data(
      loc_orig.shape(), {norm_box[0], norm_box[1], norm_box[2], norm_box[3]});
  ag::Tensor total = ag::sum(ag::square(ag::sub(loc_orig, target)));
  for (const auto& pred : loc_noisy) {
    if (pred.size() != 4) throw ShapeError("location_loss: prediction must have 4 components");
    ag::Tensor t = ag::Tensor::from_data(pred.shape(),
                                         {norm_box[0], norm_box[1], norm_box[2], norm_box[3]});
    total = ag::add(total, ag::sum(ag::square(ag::sub(pred, t))));
  }
  return ag::scale(total, 1.0 / (1.0 + loc_noisy.size()));
}

ag::Tensor embed_forward(const ag::Tensor& features, const SsplParams& params) {
  if (features.ndim() != 1)
    throw ShapeError("embed_forward: expected a single feature vector [D_p]");
  return ag::l2_normalize(ag::linear(features, params.embed_w, params.embed_b));
}

ag::Tensor contrastive_loss(const std::vector<ag::Tensor>& orig_embeds,
                            const std::vector<ag::Tensor>& noisy_embeds, int proposal_idx,
                            double tau) {
  if (tau <= 0.0) throw ValueError("contrastive_loss: tau must be > 0");
  if (orig_embeds.empty()) throw ValueError("contrastive_loss: need at least one proposal");
  if (proposal_idx < 0 || proposal_idx >= static_cast<int>(orig_embeds.size()))
    throw ValueError("contrastive_loss: proposal index out of range");
  if (noisy_embeds.empty()) throw ValueError("contrastive_loss: need at least one noisy embedding");

  ag::Tensor embed_matrix = ag::stack_rows(orig_embeds);  // [N, D_e]
  ag::Tensor total;
  for (const auto& noisy : noisy_embeds) {
    ag::Tensor logits = ag::scale(ag::linear(noisy, embed_matrix), 1.0 / tau);  // [N]
    ag::Tensor log_prob = ag::log(ag::softmax(logits, 0));
    ag::Tensor term = ag::neg(ag::slice(log_prob, 0, proposal_idx, 1));
    total = total.defined() ? ag::add(total, term) : term;
  }
  return ag::scale(total, 1.0 / noisy_embeds.size());
}

ag::Tensor sspl_combine(const ag::Tensor& loc_loss, const ag::Tensor& cont_loss,
                        double lambda_loc, double lambda_cont) {
  return ag::add(ag::scale(loc_loss, lambda_loc), ag::scale(cont_loss, lambda_cont));
}

}  // namespace pldet
