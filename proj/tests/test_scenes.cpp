#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "pldet/scenes.hpp"
#include "pldet/errors.hpp"
#include "pldet/rng.hpp"

using namespace pldet;

TEST_CASE("generation is a pure function of (spec, seed, labeled)") {
  SceneSpec spec;
  auto a = generate_example(spec, 1234, true);
  auto b = generate_example(spec, 1234, true);
  REQUIRE(a.image.size() == b.image.size());
  for (int i = 0; i < a.image.size(); ++i) CHECK(a.image.data()[i] == b.image.data()[i]);
  REQUIRE(a.truth.has_value());
  REQUIRE(b.truth.has_value());
  CHECK(a.truth->boxes == b.truth->boxes);
  CHECK(a.truth->classes == b.truth->classes);
}

TEST_CASE("labeled flag controls truth presence only") {
  SceneSpec spec;
  auto lab = generate_example(spec, 99, true);
  auto unlab = generate_example(spec, 99, false);
  CHECK(lab.truth.has_value());
  CHECK(!unlab.truth.has_value());
  for (int i = 0; i < lab.image.size(); ++i) CHECK(lab.image.data()[i] == unlab.image.data()[i]);
}

TEST_CASE("count range [1,1] yields exactly one box") {
  SceneSpec spec;
  spec.min_objects = 1;
  spec.max_objects = 1;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto e = generate_example(spec, seed, true);
    CHECK(e.truth->boxes.size() == 1);
  }
}

TEST_CASE("all boxes stay inside the image and all pixels in [0,1]") {
  SceneSpec spec;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto e = generate_example(spec, seed, true);
    for (const auto& b : e.truth->boxes) {
      CHECK(b.x >= 0.0);
      CHECK(b.y >= 0.0);
      CHECK(b.w > 0.0);
      CHECK(b.h > 0.0);
      CHECK(b.x + b.w <= e.width);
      CHECK(b.y + b.h <= e.height);
      CHECK(b.w >= 8.0);
      CHECK(b.h >= 8.0);
    }
    for (double v : e.image.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("pools: sizes, disjoint id ranges, shared distribution") {
  SceneSpec spec;
  auto p = make_pools(spec, 10, 0, 5);
  CHECK(p.labeled.size() == 10);
  CHECK(p.unlabeled.empty());

  auto q = make_pools(spec, 50, 500, 5);
  CHECK(q.labeled.size() == 50);
  CHECK(q.unlabeled.size() == 500);
  std::set<std::int64_t> ids;
  for (const auto& e : q.labeled) ids.insert(e.id);
  for (const auto& e : q.unlabeled) ids.insert(e.id);
  CHECK(ids.size() == 550);
  CHECK(*ids.begin() == 0);
  CHECK(*ids.rbegin() == 549);
  for (const auto& e : q.labeled) CHECK(e.truth.has_value());
  for (const auto& e : q.unlabeled) CHECK(!e.truth.has_value());
}

TEST_CASE("labeled vs unlabeled mean object count differ < 10% over 1000 examples") {
  // Monte Carlo distribution check: both pools draw from the same generator
  SceneSpec spec;
  auto p = make_pools(spec, 500, 500, 77);
  double mean_lab = 0.0, mean_unlab = 0.0;
  for (const auto& e : p.labeled) mean_lab += static_cast<double>(e.truth->boxes.size());
  mean_lab /= p.labeled.size();
  // replay the unlabeled examples with labels on to count their objects
  for (const auto& e : p.unlabeled) {
    auto hidden = generate_example(spec, seed_combine(77, static_cast<std::uint64_t>(e.id)), true);
    mean_unlab += static_cast<double>(hidden.truth->boxes.size());
  }
  mean_unlab /= p.unlabeled.size();
  CHECK(std::abs(mean_lab - mean_unlab) / mean_lab < 0.10);
}

TEST_CASE("flip is an involution and preserves IoU") {
  SceneSpec spec;
  auto e = generate_example(spec, 7, true);
  auto once = flip_example(e);
  auto twice = flip_example(once);
  for (int i = 0; i < e.image.size(); ++i) CHECK(e.image.data()[i] == twice.image.data()[i]);
  CHECK(e.truth->boxes == twice.truth->boxes);

  if (e.truth->boxes.size() >= 2) {
    double before = iou(e.truth->boxes[0], e.truth->boxes[1]);
    double after = iou(once.truth->boxes[0], once.truth->boxes[1]);
    CHECK(before == doctest::Approx(after).epsilon(1e-12));
  }
}

TEST_CASE("flip arithmetic") {
  Box b{0, 0, 10, 10};
  Box f = flip_box_h(b, 64);
  CHECK(f.x == 54.0);
  CHECK(f.y == 0.0);
  CHECK(f.w == 10.0);
  CHECK(f.h == 10.0);

  // centered box maps to itself
  Box c{27, 10, 10, 12};
  Box fc = flip_box_h(c, 64);
  CHECK(fc.x == doctest::Approx(27.0));
}

TEST_CASE("impossible placement errors out after bounded retries") {
  SceneSpec spec;
  spec.image_size = 32;
  spec.min_extent = 16.0;
  spec.max_extent = 16.0;
  spec.min_objects = 12;
  spec.max_objects = 12;
  spec.max_overlap_iou = 0.0;
  spec.placement_retries = 8;
  CHECK_THROWS_AS(generate_example(spec, 3, true), ValueError);
}

TEST_CASE("pool export/import round-trips byte-exactly") {
  namespace fs = std::filesystem;
  SceneSpec spec;
  auto p = make_pools(spec, 3, 2, 11);
  std::vector<Example> all = p.labeled;
  all.insert(all.end(), p.unlabeled.begin(), p.unlabeled.end());

  fs::path dir = fs::temp_directory_path() / "pldet_pool_test";
  fs::remove_all(dir);
  export_pool(all, dir.string());
  auto loaded = import_pool(dir.string());
  REQUIRE(loaded.size() == all.size());
  for (size_t i = 0; i < all.size(); ++i) {
    CHECK(loaded[i].id == all[i].id);
    CHECK(loaded[i].width == all[i].width);
    CHECK(loaded[i].truth.has_value() == all[i].truth.has_value());
    for (int j = 0; j < all[i].image.size(); ++j)
      CHECK(loaded[i].image.data()[j] == all[i].image.data()[j]);
    if (all[i].truth) {
      CHECK(loaded[i].truth->boxes == all[i].truth->boxes);
      CHECK(loaded[i].truth->classes == all[i].truth->classes);
    }
  }
  // byte-exact: re-export and compare the index and one dump
  fs::path dir2 = fs::temp_directory_path() / "pldet_pool_test2";
  fs::remove_all(dir2);
  export_pool(loaded, dir2.string());
  auto read_file = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  CHECK(read_file(dir / "index.json") == read_file(dir2 / "index.json"));
  CHECK(read_file(dir / "img_0.bin") == read_file(dir2 / "img_0.bin"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}
