#include "pldet/noise.hpp"

#include <cmath>

#include "pldet/errors.hpp"
#include "pldet/rng.hpp"

namespace pldet {

namespace {

void validate(const NoiseSpec& spec, int h, int w) {
  if (spec.kind == NoiseKind::kDropBlock) {
    if (spec.block_size < 1) throw ValueError("noise: block_size must be >= 1");
    if (spec.block_size > h || spec.block_size > w)
      throw ValueError("noise: block_size exceeds feature map");
    if (spec.drop_prob < 0.0 || spec.drop_prob >= 1.0)
      throw ValueError("noise: drop_prob must be in [0, 1)");
  } else {
    if (spec.channel_ratio < 0.0 || spec.channel_ratio > 1.0)
      throw ValueError("noise: channel_ratio must be in [0, 1]");
  }
}

// expected dropped-cell fraction when centers fire i.i.d. at rate gamma
double expected_dropped_fraction(const std::vector<int>& coverage, int cells, double gamma) {
  double total = 0.0;
  for (int c : coverage) total += 1.0 - std::pow(1.0 - gamma, c);
  return total / cells;
}

std::vector<int> coverage_counts(int h, int w, int b) {
  // coverage[y*w+x] = number of valid block centers whose b x b block covers (y, x)
  std::vector<int> cov(static_cast<size_t>(h) * w, 0);
  for (int cy = 0; cy + b <= h; ++cy)
    for (int cx = 0; cx + b <= w; ++cx)
      for (int y = cy; y < cy + b; ++y)
        for (int x = cx; x < cx + b; ++x) cov[static_cast<size_t>(y) * w + x] += 1;
  return cov;
}

}  // namespace

double dropblock_center_rate(int height, int width, int block_size, double drop_prob) {
  if (drop_prob <= 0.0) return 0.0;
  auto cov = coverage_counts(height, width, block_size);
  int cells = height * width;
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    if (expected_dropped_fraction(cov, cells, mid) < drop_prob)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

ag::Tensor perturb(const ag::Tensor& map, const NoiseSpec& spec, std::uint64_t seed) {
  if (map.ndim() != 3) throw ShapeError("perturb: map must be [C, H, W]");
  const int c = map.shape()[0], h = map.shape()[1], w = map.shape()[2];
  validate(spec, h, w);
  Rng rng(seed_combine(0x6e6f697365ULL, seed));  // "noise" tag

  std::vector<double> mask(map.size(), 1.0);
  double dropped_fraction = 0.0;

  if (spec.kind == NoiseKind::kDropBlock) {
    double gamma = dropblock_center_rate(h, w, spec.block_size, spec.drop_prob);
    const int b = spec.block_size;
    std::vector<char> spatial(static_cast<size_t>(h) * w, 0);
    for (int cy = 0; cy + b <= h; ++cy)
      for (int cx = 0; cx + b <= w; ++cx)
        if (rng.bernoulli(gamma))
          for (int y = cy; y < cy + b; ++y)
            for (int x = cx; x < cx + b; ++x) spatial[static_cast<size_t>(y) * w + x] = 1;
    int dropped = 0;
    for (char d : spatial) dropped += d;
    dropped_fraction = static_cast<double>(dropped) / (h * w);
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h * w; ++i)
        if (spatial[i]) mask[static_cast<size_t>(ch) * h * w + i] = 0.0;
  } else {
    int dropped = 0;
    for (int ch = 0; ch < c; ++ch)
      if (rng.bernoulli(spec.channel_ratio)) {
        ++dropped;
        std::fill_n(mask.begin() + static_cast<size_t>(ch) * h * w, h * w, 0.0);
      }
    dropped_fraction = static_cast<double>(dropped) / c;
  }

  double factor = 1.0;
  if (spec.rescale && dropped_fraction > 0.0 && dropped_fraction < 1.0)
    factor = 1.0 / (1.0 - dropped_fraction);
  if (factor != 1.0)
    for (auto& m : mask) m *= factor;

  // identity short-circuit keeps p = 0 bit-exact
  if (dropped_fraction == 0.0) {
    std::vector<double> out(map.data().begin(), map.data().end());
    return ag::make_op("noise_identity", {map}, map.shape(), std::move(out), [](ag::Node& n) {
      auto& p = n.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    });
  }

  return ag::mul(map, ag::Tensor::from_data(map.shape(), std::move(mask)));
}

std::vector<ag::Tensor> make_noisy_set(const ag::Tensor& map, const std::vector<NoiseSpec>& specs,
                                       int k_variants, std::uint64_t seed,
                                       std::uint64_t proposal_id) {
  if (k_variants < 1) throw ValueError("make_noisy_set: K must be >= 1");
  if (specs.empty()) throw ValueError("make_noisy_set: no noise specs");
  std::vector<ag::Tensor> out;
  out.reserve(k_variants);
  for (int k = 0; k < k_variants; ++k) {
    const NoiseSpec& spec = specs[static_cast<size_t>(k) % specs.size()];
    out.push_back(perturb(map, spec, seed_combine(seed, proposal_id, static_cast<std::uint64_t>(k))));
  }
  return out;
}

std::vector<NoiseSpec> default_noise_specs() {
  // dropblock(b=2) alternating with whole-channel dropout; the channel ratio
  // is 1/16 at 32-channel width so at least one channel drops in expectation
  // (1/64 targets 256-channel maps and is still selectable in config).
  NoiseSpec dropblock;
  dropblock.kind = NoiseKind::kDropBlock;
  dropblock.block_size = 2;
  dropblock.drop_prob = 0.15;
  NoiseSpec spatial;
  spatial.kind = NoiseKind::kSpatialDropout;
  spatial.channel_ratio = 1.0 / 16.0;
  return {dropblock, spatial};
}

}  // namespace pldet
