#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "pldet/sspl.hpp"
#include "pldet/errors.hpp"
#include "pldet/rng.hpp"

using namespace pldet;

namespace {

ag::Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                         bool requires_grad = true) {
  std::vector<double> data(ag::numel(shape));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return ag::Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// random unit vector as a leaf tensor
ag::Tensor random_unit(int dim, Rng& rng, bool requires_grad = true) {
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return ag::Tensor::from_data({dim}, std::move(v), requires_grad);
}

SsplConfig small_cfg() {
  SsplConfig cfg;
  cfg.proposal_dim = 12;
  cfg.hidden_loc = 8;
  cfg.embed_dim = 6;
  return cfg;
}

}  // namespace

TEST_CASE("normalize_box arithmetic") {
  auto n = normalize_box({100, 50, 200, 100}, 400, 200);
  CHECK(n[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(n[1] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(n[2] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(n[3] == doctest::Approx(0.5).epsilon(1e-12));

  auto full = normalize_box({0, 0, 64, 64}, 64, 64);
  CHECK(full[0] == 0.0);
  CHECK(full[1] == 0.0);
  CHECK(full[2] == 1.0);
  CHECK(full[3] == 1.0);

  CHECK_THROWS_AS(normalize_box({0, 0, 1, 1}, 0, 64), ValueError);
}

TEST_CASE("location head: zero params give 0.5 everywhere, deterministic") {
  SsplConfig cfg = small_cfg();
  auto params = SsplParams::init(cfg, 1);
  for (auto t : {params.loc_fc1_w, params.loc_fc1_b, params.loc_fc2_w, params.loc_fc2_b})
    for (auto& v : t.raw_data()) v = 0.0;
  Rng rng(2);
  auto f = random_tensor({cfg.proposal_dim}, rng);
  auto loc = location_forward(f, params);
  REQUIRE(loc.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(loc.at(i) == doctest::Approx(0.5).epsilon(1e-12));

  auto params2 = SsplParams::init(cfg, 3);
  auto a = location_forward(f, params2);
  auto b = location_forward(f, params2);
  for (int i = 0; i < 4; ++i) CHECK(a.at(i) == b.at(i));
  for (int i = 0; i < 4; ++i) {
    CHECK(a.at(i) > 0.0);
    CHECK(a.at(i) < 1.0);
  }
}

TEST_CASE("location head gradient passes grad_check") {
  SsplConfig cfg = small_cfg();
  auto params = SsplParams::init(cfg, 4);
  Rng rng(5);
  auto f = random_tensor({cfg.proposal_dim}, rng, -0.5, 0.5, false);
  auto fn = [&] { return ag::sum(ag::square(location_forward(f, params))); };
  CHECK(ag::grad_check(
            fn, {params.loc_fc1_w, params.loc_fc1_b, params.loc_fc2_w, params.loc_fc2_b}, 1e-5,
            1e-4)
            .pass);
}

TEST_CASE("location loss pinned values") {
  std::array<double, 4> target{0.5, 0.5, 0.25, 0.25};
  auto exact = ag::Tensor::from_data({4}, {0.5, 0.5, 0.25, 0.25});

  SUBCASE("all predictions exact: zero") {
    CHECK(location_loss(exact, {exact, exact}, target).item() == doctest::Approx(0.0));
  }
  SUBCASE("K=0 single term") {
    auto off = ag::Tensor::from_data({4}, {0.6, 0.5, 0.25, 0.25});
    CHECK(location_loss(off, {}, target).item() == doctest::Approx(0.01).epsilon(1e-12));
  }
  SUBCASE("K=1 mean of two squared distances") {
    // ||L - P~||^2 = 0.02, ||L1 - P~||^2 = 0.04 -> mean 0.03
    auto l = ag::Tensor::from_data({4}, {0.5 + 0.1, 0.5 + 0.1, 0.25, 0.25});
    auto l1 = ag::Tensor::from_data({4}, {0.5 + 0.2, 0.5, 0.25, 0.25});
    CHECK(location_loss(l, {l1}, target).item() == doctest::Approx(0.03).epsilon(1e-12));
  }
  SUBCASE("non-negative, zero iff all exact") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      auto p = random_tensor({4}, rng, 0.0, 1.0);
      double v = location_loss(p, {exact}, target).item();
      CHECK(v >= 0.0);
    }
  }
}

TEST_CASE("embedding head: unit norm and 3-4-5 example") {
  SsplConfig cfg = small_cfg();
  auto params = SsplParams::init(cfg, 7);
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto f = random_tensor({cfg.proposal_dim}, rng, -2.0, 2.0);
    auto e = embed_forward(f, params);
    double norm = 0.0;
    for (double v : e.data()) norm += v * v;
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-9);
  }
  // a linear layer emitting (3,4) normalizes to (0.6, 0.8)
  auto v = ag::l2_normalize(ag::Tensor::from_data({2}, {3.0, 4.0}));
  CHECK(v.at(0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(v.at(1) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("embedding gradient through normalization passes grad_check") {
  SsplConfig cfg = small_cfg();
  auto params = SsplParams::init(cfg, 9);
  Rng rng(10);
  auto f = random_tensor({cfg.proposal_dim}, rng, -0.5, 0.5, false);
  auto probe = random_tensor({cfg.embed_dim}, rng, -1.0, 1.0, false);
  auto fn = [&] { return ag::sum(ag::mul(embed_forward(f, params), probe)); };
  CHECK(ag::grad_check(fn, {params.embed_w, params.embed_b}, 1e-5, 1e-4).pass);
}

TEST_CASE("contrastive loss: N=1 is exactly zero") {
  Rng rng(11);
  auto e = random_unit(6, rng);
  auto noisy = random_unit(6, rng);
  CHECK(contrastive_loss({e}, {noisy}, 0, 0.1).item() == 0.0);
}

TEST_CASE("contrastive loss closed forms for N=2 orthogonal embeddings") {
  auto f1 = ag::Tensor::from_data({4}, {1, 0, 0, 0}, true);
  auto f2 = ag::Tensor::from_data({4}, {0, 1, 0, 0}, true);

  SUBCASE("noisy matches its own original") {
    auto noisy = ag::Tensor::from_data({4}, {1, 0, 0, 0}, true);
    double got = contrastive_loss({f1, f2}, {noisy}, 0, 0.1).item();
    double want = std::log(1.0 + std::exp(-10.0));  // ~4.5399e-5
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
  }
  SUBCASE("noisy matches the wrong proposal") {
    auto noisy = ag::Tensor::from_data({4}, {0, 1, 0, 0}, true);
    double got = contrastive_loss({f1, f2}, {noisy}, 0, 0.1).item();
    double want = std::log(1.0 + std::exp(10.0));  // ~10.0000454
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
  }
  SUBCASE("tau must be positive") {
    auto noisy = ag::Tensor::from_data({4}, {1, 0, 0, 0}, true);
    CHECK_THROWS_AS(contrastive_loss({f1, f2}, {noisy}, 0, 0.0), ValueError);
  }
}

TEST_CASE("contrastive loss is invariant under a common orthogonal rotation") {
  Rng rng(12);
  const int dim = 5, n = 4;
  // Householder reflection H = I - 2 u u^T as the common orthogonal map
  auto u = random_unit(dim, rng, false);
  auto reflect = [&](const ag::Tensor& x) {
    double dot = 0.0;
    for (int i = 0; i < dim; ++i) dot += x.data()[i] * u.data()[i];
    std::vector<double> out(dim);
    for (int i = 0; i < dim; ++i) out[i] = x.data()[i] - 2.0 * dot * u.data()[i];
    return ag::Tensor::from_data({dim}, std::move(out));
  };
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<ag::Tensor> orig, orig_rot;
    for (int i = 0; i < n; ++i) {
      auto e = random_unit(dim, rng, false);
      orig.push_back(e);
      orig_rot.push_back(reflect(e));
    }
    std::vector<ag::Tensor> noisy, noisy_rot;
    for (int k = 0; k < 2; ++k) {
      auto e = random_unit(dim, rng, false);
      noisy.push_back(e);
      noisy_rot.push_back(reflect(e));
    }
    double a = contrastive_loss(orig, noisy, 1, 0.1).item();
    double b = contrastive_loss(orig_rot, noisy_rot, 1, 0.1).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-9));
  }
}

TEST_CASE("contrastive loss decreases as the noisy embedding approaches its original") {
  Rng rng(13);
  const int dim = 6;
  std::vector<ag::Tensor> orig;
  for (int i = 0; i < 3; ++i) orig.push_back(random_unit(dim, rng, false));
  auto noisy = random_unit(dim, rng, false);
  // geodesic step toward the original on the unit sphere
  auto toward = [&](const ag::Tensor& from, const ag::Tensor& to, double step) {
    std::vector<double> v(dim);
    double norm = 0.0;
    for (int i = 0; i < dim; ++i) {
      v[i] = (1.0 - step) * from.data()[i] + step * to.data()[i];
      norm += v[i] * v[i];
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return ag::Tensor::from_data({dim}, std::move(v));
  };
  double l0 = contrastive_loss(orig, {noisy}, 0, 0.1).item();
  double l1 = contrastive_loss(orig, {toward(noisy, orig[0], 1e-3)}, 0, 0.1).item();
  CHECK(l1 < l0);
}

TEST_CASE("contrastive loss is non-negative and zero-bounded") {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ag::Tensor> orig;
    int n = rng.uniform_int(1, 5);
    for (int i = 0; i < n; ++i) orig.push_back(random_unit(4, rng, false));
    std::vector<ag::Tensor> noisy;
    int k = rng.uniform_int(1, 3);
    for (int i = 0; i < k; ++i) noisy.push_back(random_unit(4, rng, false));
    CHECK(contrastive_loss(orig, noisy, rng.uniform_int(0, n - 1), 0.1).item() >= 0.0);
  }
}

TEST_CASE("sspl combination arithmetic and zero weights") {
  auto loc = ag::Tensor::scalar(0.04, true);
  auto cont = ag::Tensor::scalar(0.2, true);
  CHECK(sspl_combine(loc, cont, 0.25, 1.0).item() == doctest::Approx(0.21).epsilon(1e-12));

  auto zero = sspl_combine(loc, cont, 0.0, 0.0);
  CHECK(zero.item() == 0.0);
  loc.zero_grad();
  cont.zero_grad();
  ag::backward(zero);
  CHECK(loc.grad()[0] == 0.0);
  CHECK(cont.grad()[0] == 0.0);
}

TEST_CASE("eq4-eq6 gradients flow to both branches (no detach)") {
  SsplConfig cfg = small_cfg();
  auto params = SsplParams::init(cfg, 15);
  Rng rng(16);
  auto f_orig = random_tensor({cfg.proposal_dim}, rng, -0.5, 0.5);
  auto f_noisy = random_tensor({cfg.proposal_dim}, rng, -0.5, 0.5);
  std::array<double, 4> target{0.4, 0.4, 0.2, 0.2};
  auto fn = [&] {
    auto loc = location_loss(location_forward(f_orig, params),
                             {location_forward(f_noisy, params)}, target);
    auto cont = contrastive_loss({embed_forward(f_orig, params)},
                                 {embed_forward(f_noisy, params)}, 0, 0.1);
    return sspl_combine(loc, cont, 0.25, 1.0);
  };
  CHECK(ag::grad_check(fn, {f_orig, f_noisy}, 1e-5, 1e-4).pass);
  // both branches receive nonzero gradient
  f_orig.zero_grad();
  f_noisy.zero_grad();
  ag::backward(fn());
  double orig_norm = 0.0, noisy_norm = 0.0;
  for (double g : f_orig.grad()) orig_norm += std::abs(g);
  for (double g : f_noisy.grad()) noisy_norm += std::abs(g);
  CHECK(orig_norm > 1e-8);
  CHECK(noisy_norm > 1e-8);
}
