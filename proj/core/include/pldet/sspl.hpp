#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pldet/autograd.hpp"
#include "pldet/geometry.hpp"

namespace pldet {

struct SsplConfig {
  int proposal_dim = 128;  // D_p, must match the detector trunk
  int hidden_loc = 64;     // width of the location head's hidden layer
  int embed_dim = 32;      // D_e, embedding width for the contrastive head
};

// theta^self = {theta^self-loc, theta^self-cont}
struct SsplParams {
  ag::Tensor loc_fc1_w, loc_fc1_b;  // D_p -> H_loc
  ag::Tensor loc_fc2_w, loc_fc2_b;  // H_loc -> 4
  ag::Tensor embed_w, embed_b;      // D_p -> D_e

  static SsplParams init(const SsplConfig& cfg, std::uint64_t seed);
  std::vector<std::pair<std::string, ag::Tensor>> named_params() const;
};

// (x/W, y/H, w/W, h/H), all in [0, 1] for a clipped box
std::array<double, 4> normalize_box(const Box& box, double img_w, double img_h);

// sigmoid(fc2(relu(fc1(F)))): four values strictly in (0, 1);
// accepts a single feature vector [D_p] or a batch [M, D_p].
ag::Tensor location_forward(const ag::Tensor& features, const SsplParams& params);

// mean squared-l2 distance over the original and K noisy location predictions:
// (1/(K+1)) (||L - P~||^2 + sum_k ||L_k - P~||^2); gradients reach both branches.
ag::Tensor location_loss(const ag::Tensor& loc_orig, const std::vector<ag::Tensor>& loc_noisy,
                         const std::array<double, 4>& norm_box);

// l2-normalized linear projection of one feature vector [D_p] -> [D_e]
ag::Tensor embed_forward(const ag::Tensor& features, const SsplParams& params);

// Instance discrimination for proposal n: the K noisy embeddings must match
// their own original among the image's N originals,
//   -(1/K) sum_k log softmax(E F_nk / tau)[n].
// All embeddings must be unit vectors; gradients reach originals and noisy.
ag::Tensor contrastive_loss(const std::vector<ag::Tensor>& orig_embeds,
                            const std::vector<ag::Tensor>& noisy_embeds, int proposal_idx,
                            double tau);

// lambda^self-loc * L^self-loc + lambda^self-cont * L^self-cont
ag::Tensor sspl_combine(const ag::Tensor& loc_loss, const ag::Tensor& cont_loss,
                        double lambda_loc, double lambda_cont);

}  // namespace pldet
