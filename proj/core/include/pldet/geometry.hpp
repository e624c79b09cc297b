#pragma once

#include <algorithm>
#include <cmath>

namespace pldet {

// Axis-aligned box; (x, y) is the top-left corner, extents are [x, x+w) x [y, y+h)
// in continuous pixel coordinates.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }

  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Clip to [0, w] x [0, h]; the result may be degenerate (zero w/h).
inline Box clip_box(const Box& b, double img_w, double img_h) {
  double x0 = std::clamp(b.x, 0.0, img_w);
  double y0 = std::clamp(b.y, 0.0, img_h);
  double x1 = std::clamp(b.x + b.w, 0.0, img_w);
  double y1 = std::clamp(b.y + b.h, 0.0, img_h);
  return {x0, y0, x1 - x0, y1 - y0};
}

inline Box flip_box_h(const Box& b, double img_w) { return {img_w - b.x - b.w, b.y, b.w, b.h}; }

}  // namespace pldet
