#include "pldet/consistency.hpp"

#include <cmath>

#include "pldet/errors.hpp"

namespace pldet {

namespace {

void require_simplex(const ag::Tensor& t, const char* what) {
  double sum = 0.0;
  for (double v : t.data()) {
    if (v < 0.0) throw ValueError(std::string(what) + ": negative probability component");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw ValueError(std::string(what) + ": probabilities sum to " + std::to_string(sum));
}

}  // namespace

ag::Tensor cls_consistency(const ag::Tensor& orig_probs,
                           const std::vector<ag::Tensor>& noisy_probs) {
  if (noisy_probs.empty()) throw ValueError("cls_consistency: K must be >= 1");
  require_simplex(orig_probs, "cls_consistency");
  ag::Tensor p = ag::detach(orig_probs);
  ag::Tensor log_p = ag::log(p);
  ag::Tensor total;
  for (const auto& q : noisy_probs) {
    if (q.size() != orig_probs.size())
      throw ShapeError("cls_consistency: class-count mismatch");
    require_simplex(q, "cls_consistency");
    ag::Tensor kl = ag::sum(ag::mul(p, ag::sub(log_p, ag::log(q))));
    total = total.defined() ? ag::add(total, kl) : kl;
  }
  return ag::scale(total, 1.0 / noisy_probs.size());
}

ag::Tensor reg_consistency(const ag::Tensor& orig_reg, const std::vector<ag::Tensor>& noisy_reg) {
  if (noisy_reg.empty()) throw ValueError("reg_consistency: K must be >= 1");
  if (orig_reg.size() != 4) throw ShapeError("reg_consistency: expected 4 regression outputs");
  ag::Tensor r = ag::detach(orig_reg);
  ag::Tensor best;
  double best_value = 0.0;
  for (const auto& candidate : noisy_reg) {
    if (candidate.size() != 4) throw ShapeError("reg_consistency: expected 4 regression outputs");
    ag::Tensor loss = ag::sum(ag::smooth_l1(ag::sub(r, candidate)));
    if (!best.defined() || loss.item() < best_value) {
      best = loss;
      best_value = loss.item();
    }
  }
  // only the argmin branch stays connected to the graph
  return best;
}

ag::Tensor consistency_loss(const ag::Tensor& orig_probs,
                            const std::vector<ag::Tensor>& noisy_probs,
                            const ag::Tensor& orig_reg,
                            const std::vector<ag::Tensor>& noisy_reg,
                            const ConsistencyWeights& weights) {
  ag::Tensor cls = cls_consistency(orig_probs, noisy_probs);
  ag::Tensor reg = reg_consistency(orig_reg, noisy_reg);
  return ag::add(ag::scale(cls, weights.lambda_cls), ag::scale(reg, weights.lambda_reg));
}

}  // namespace pldet
