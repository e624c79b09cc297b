#include "pldet/scenes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "pldet/errors.hpp"
#include "pldet/rng.hpp"

namespace pldet {

namespace {

static_assert(std::endian::native == std::endian::little,
              "pool dumps are little-endian; big-endian hosts are unsupported");

struct Rgb {
  double r, g, b;
};

// per-class base colors; shape and hue jointly carry the class signal
constexpr Rgb kClassColors[3] = {
    {0.95, 0.25, 0.20},  // rectangle
    {0.20, 0.85, 0.30},  // disk
    {0.25, 0.35, 0.95},  // triangle
};

bool inside_triangle(double px, double py, double ax, double ay, double bx, double by, double cx,
                     double cy) {
  auto side = [](double x0, double y0, double x1, double y1, double x, double y) {
    return (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
  };
  double d1 = side(ax, ay, bx, by, px, py);
  double d2 = side(bx, by, cx, cy, px, py);
  double d3 = side(cx, cy, ax, ay, px, py);
  bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
  bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
  return !(has_neg && has_pos);
}

}  // namespace

void validate(const SceneSpec& spec) {
  if (spec.image_size < 32) throw ValueError("scene spec: image_size must be >= 32");
  if (spec.min_objects < 0 || spec.max_objects < spec.min_objects || spec.max_objects < 1)
    throw ValueError("scene spec: empty object count range");
  if (spec.num_classes < 2 || spec.num_classes > 3)
    throw ValueError("scene spec: need 2 or 3 shape classes");
  if (spec.min_extent < 8.0) throw ValueError("scene spec: min_extent must be >= 8 px");
  if (spec.max_extent < spec.min_extent || spec.max_extent > spec.image_size)
    throw ValueError("scene spec: bad extent range");
  if (spec.background_noise < 0.0 || spec.background_noise >= 0.5)
    throw ValueError("scene spec: background_noise out of range");
}

Example generate_example(const SceneSpec& spec, std::uint64_t seed, bool labeled) {
  validate(spec);
  Rng rng(seed_combine(0x7363656e65ULL, seed));  // "scene" tag
  const int s = spec.image_size;

  std::vector<double> img(static_cast<size_t>(3) * s * s);
  // textured background: per-channel base + directional gradient + white noise
  double base[3], grad_amp = 0.08;
  for (auto& b : base) b = rng.uniform(0.25, 0.45);
  double ang = rng.uniform(0.0, 6.283185307179586477);
  double gx = std::cos(ang), gy = std::sin(ang);
  for (int c = 0; c < 3; ++c) {
    double* plane = img.data() + static_cast<size_t>(c) * s * s;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        plane[static_cast<size_t>(y) * s + x] =
            base[c] + grad_amp * ((x * gx + y * gy) / s);
  }
  for (auto& v : img) v += rng.uniform(-spec.background_noise, spec.background_noise);

  // place integer-aligned objects; retry on heavy overlap
  int count = rng.uniform_int(spec.min_objects, spec.max_objects);
  GroundTruth truth;
  for (int obj = 0; obj < count; ++obj) {
    int cls = rng.uniform_int(0, spec.num_classes - 1);
    Box box;
    bool placed = false;
    for (int attempt = 0; attempt < spec.placement_retries && !placed; ++attempt) {
      int ext_max = static_cast<int>(std::min(spec.max_extent, static_cast<double>(s)));
      int ext_min = static_cast<int>(spec.min_extent);
      int w = rng.uniform_int(ext_min, ext_max);
      int h = (cls == static_cast<int>(ShapeClass::kDisk)) ? w : rng.uniform_int(ext_min, ext_max);
      int x = rng.uniform_int(0, s - w);
      int y = rng.uniform_int(0, s - h);
      box = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(w),
             static_cast<double>(h)};
      placed = true;
      for (const auto& other : truth.boxes)
        if (iou(box, other) > spec.max_overlap_iou) {
          placed = false;
          break;
        }
    }
    if (!placed)
      throw ValueError("generate_example: could not place object " + std::to_string(obj) +
                       " after bounded retries (spec too crowded)");

    Rgb color = kClassColors[cls];
    double jr = rng.uniform(-0.12, 0.12), jg = rng.uniform(-0.12, 0.12),
           jb = rng.uniform(-0.12, 0.12);
    double col[3] = {std::clamp(color.r + jr, 0.0, 1.0), std::clamp(color.g + jg, 0.0, 1.0),
                     std::clamp(color.b + jb, 0.0, 1.0)};

    int x0 = static_cast<int>(box.x), y0 = static_cast<int>(box.y);
    int bw = static_cast<int>(box.w), bh = static_cast<int>(box.h);
    for (int py = y0; py < y0 + bh; ++py) {
      for (int px = x0; px < x0 + bw; ++px) {
        double ux = px + 0.5, uy = py + 0.5;
        bool hit = false;
        switch (static_cast<ShapeClass>(cls)) {
          case ShapeClass::kRectangle:
            hit = true;
            break;
          case ShapeClass::kDisk: {
            double cx = box.x + 0.5 * bw, cy = box.y + 0.5 * bh, r = 0.5 * bw;
            hit = (ux - cx) * (ux - cx) + (uy - cy) * (uy - cy) <= r * r;
            break;
          }
          case ShapeClass::kTriangle:
            hit = inside_triangle(ux, uy, box.x + 0.5 * bw, box.y, box.x, box.y + bh,
                                  box.x + bw, box.y + bh);
            break;
        }
        if (!hit) continue;
        for (int c = 0; c < 3; ++c)
          img[(static_cast<size_t>(c) * s + py) * s + px] = col[c];
      }
    }
    truth.boxes.push_back(box);
    truth.classes.push_back(cls);
  }

  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);

  Example e;
  e.image = ag::Tensor::from_data({3, s, s}, std::move(img));
  e.width = s;
  e.height = s;
  if (labeled) e.truth = std::move(truth);
  e.id = 0;
  return e;
}

Pools make_pools(const SceneSpec& spec, int n_labeled, int n_unlabeled, std::uint64_t seed) {
  if (n_labeled < 1) throw ValueError("make_pools: need at least one labeled example");
  if (n_unlabeled < 0) throw ValueError("make_pools: negative unlabeled count");
  Pools pools;
  pools.labeled.reserve(n_labeled);
  pools.unlabeled.reserve(n_unlabeled);
  for (int i = 0; i < n_labeled + n_unlabeled; ++i) {
    bool labeled = i < n_labeled;
    Example e = generate_example(spec, seed_combine(seed, static_cast<std::uint64_t>(i)), labeled);
    e.id = i;
    (labeled ? pools.labeled : pools.unlabeled).push_back(std::move(e));
  }
  return pools;
}

Example flip_example(const Example& e) {
  Example out;
  out.width = e.width;
  out.height = e.height;
  out.id = e.id;
  const int w = e.width, h = e.height;
  std::vector<double> img(static_cast<size_t>(3) * h * w);
  auto src = e.image.data();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img[(static_cast<size_t>(c) * h + y) * w + x] =
            src[(static_cast<size_t>(c) * h + y) * w + (w - 1 - x)];
  out.image = ag::Tensor::from_data({3, h, w}, std::move(img));
  if (e.truth) {
    GroundTruth t;
    t.classes = e.truth->classes;
    for (const auto& b : e.truth->boxes) t.boxes.push_back(flip_box_h(b, w));
    out.truth = std::move(t);
  }
  return out;
}

void export_pool(const std::vector<Example>& pool, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json index;
  index["examples"] = nlohmann::ordered_json::array();
  for (const auto& e : pool) {
    std::string fname = "img_" + std::to_string(e.id) + ".bin";
    nlohmann::ordered_json entry;
    entry["id"] = e.id;
    entry["labeled"] = e.truth.has_value();
    entry["width"] = e.width;
    entry["height"] = e.height;
    entry["file"] = fname;
    auto boxes = nlohmann::ordered_json::array();
    auto classes = nlohmann::ordered_json::array();
    if (e.truth) {
      for (const auto& b : e.truth->boxes) boxes.push_back({b.x, b.y, b.w, b.h});
      for (int c : e.truth->classes) classes.push_back(c);
    }
    entry["boxes"] = boxes;
    entry["classes"] = classes;
    index["examples"].push_back(entry);

    std::ofstream f(fs::path(dir) / fname, std::ios::binary);
    if (!f) throw IoError("export_pool: cannot write " + fname);
    auto data = e.image.data();
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  std::ofstream f(fs::path(dir) / "index.json");
  if (!f) throw IoError("export_pool: cannot write index.json");
  f << index.dump(2) << "\n";
}

std::vector<Example> import_pool(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream idx(fs::path(dir) / "index.json");
  if (!idx) throw IoError("import_pool: cannot open index.json in " + dir);
  nlohmann::json index = nlohmann::json::parse(idx);
  std::vector<Example> pool;
  for (const auto& entry : index.at("examples")) {
    Example e;
    e.id = entry.at("id").get<std::int64_t>();
    e.width = entry.at("width").get<int>();
    e.height = entry.at("height").get<int>();
    size_t n = static_cast<size_t>(3) * e.width * e.height;
    std::vector<double> img(n);
    std::ifstream f(fs::path(dir) / entry.at("file").get<std::string>(), std::ios::binary);
    if (!f) throw IoError("import_pool: cannot open image dump for id " + std::to_string(e.id));
    f.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (static_cast<size_t>(f.gcount()) != n * sizeof(double))
      throw IoError("import_pool: truncated image dump for id " + std::to_string(e.id));
    e.image = ag::Tensor::from_data({3, e.height, e.width}, std::move(img));
    if (entry.at("labeled").get<bool>()) {
      GroundTruth t;
      for (const auto& b : entry.at("boxes"))
        t.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                           b.at(3).get<double>()});
      for (const auto& c : entry.at("classes")) t.classes.push_back(c.get<int>());
      e.truth = std::move(t);
    }
    pool.push_back(std::move(e));
  }
  return pool;
}

}  // namespace pldet
