#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pldet/autograd.hpp"
#include "pldet/geometry.hpp"

namespace pldet {

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> classes;  // in {0 .. C_fg-1}
};

struct Example {
  ag::Tensor image;  // 3 x H x W, values in [0, 1]
  int width = 0;
  int height = 0;
  std::optional<GroundTruth> truth;  // present iff the example is labeled
  std::int64_t id = 0;
};

enum class ShapeClass { kRectangle = 0, kDisk = 1, kTriangle = 2 };

struct SceneSpec {
  int image_size = 64;           // square images
  int min_objects = 1;
  int max_objects = 4;
  int num_classes = 3;           // rectangle / disk / triangle
  double min_extent = 8.0;       // smallest object side, pixels
  double max_extent = 24.0;
  double background_noise = 0.06;
  double max_overlap_iou = 0.3;  // placement rejection threshold
  int placement_retries = 64;
};

void validate(const SceneSpec& spec);

// Deterministic function of (spec, seed, labeled).
Example generate_example(const SceneSpec& spec, std::uint64_t seed, bool labeled);

struct Pools {
  std::vector<Example> labeled;
  std::vector<Example> unlabeled;
};

// Labeled ids [0, n_labeled), unlabeled ids [n_labeled, n_labeled + n_unlabeled);
// both pools draw from the same scene distribution.
Pools make_pools(const SceneSpec& spec, int n_labeled, int n_unlabeled, std::uint64_t seed);

Example flip_example(const Example& e);

// Pool export/import: a directory of raw float64 LE image dumps plus a JSON
// index; round-trips byte-exactly.
void export_pool(const std::vector<Example>& pool, const std::string& dir);
std::vector<Example> import_pool(const std::string& dir);

}  // namespace pldet
