#pragma once

#include <cstdint>
#include <vector>

#include "pldet/autograd.hpp"

namespace pldet {

enum class NoiseKind { kDropBlock, kSpatialDropout };

struct NoiseSpec {
  NoiseKind kind = NoiseKind::kDropBlock;
  int block_size = 2;          // dropblock
  double drop_prob = 0.1;      // dropblock target dropped-cell fraction, in [0, 1)
  double channel_ratio = 0.0625;  // spatial dropout per-channel drop probability
  bool rescale = true;         // inverted-dropout compensation on survivors
};

// Bernoulli rate for dropblock centers chosen so the expected dropped-cell
// fraction equals drop_prob exactly (solved against the block-union coverage
// of the map; the classic p*A/(b^2*A_valid) formula under-drops on small maps).
double dropblock_center_rate(int height, int width, int block_size, double drop_prob);

// K noisy variants of one proposal's conv feature map. Masks are constants in
// the gradient graph: d(noisy)/d(original) is the mask times the rescale factor.
ag::Tensor perturb(const ag::Tensor& map, const NoiseSpec& spec, std::uint64_t seed);

// Variant k uses specs[k mod specs.size()] with a seed derived from
// (seed, proposal_id, k).
std::vector<ag::Tensor> make_noisy_set(const ag::Tensor& map, const std::vector<NoiseSpec>& specs,
                                       int k_variants, std::uint64_t seed,
                                       std::uint64_t proposal_id);

std::vector<NoiseSpec> default_noise_specs();

}  // namespace pldet
