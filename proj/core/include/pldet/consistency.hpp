#pragma once

#include <vector>

#include "pldet/autograd.hpp"

namespace pldet {

struct ConsistencyWeights {
  double lambda_cls = 1.0;
  double lambda_reg = 0.5;
};

// (1/K) sum_k KL(C^p || C^p_k) with the original prediction detached: the
// gradient flows only into the noisy branch. Inputs must lie on the simplex.
ag::Tensor cls_consistency(const ag::Tensor& orig_probs,
                           const std::vector<ag::Tensor>& noisy_probs);

// min_k sum_coords smooth_l1(R - R_k) with R detached; only the argmin variant
// receives gradient, ties broken by the smallest k.
ag::Tensor reg_consistency(const ag::Tensor& orig_reg, const std::vector<ag::Tensor>& noisy_reg);

// lambda_cls * L^cons-cls + lambda_reg * L^cons-reg
ag::Tensor consistency_loss(const ag::Tensor& orig_probs,
                            const std::vector<ag::Tensor>& noisy_probs,
                            const ag::Tensor& orig_reg,
                            const std::vector<ag::Tensor>& noisy_reg,
                            const ConsistencyWeights& weights);

}  // namespace pldet
