#include "pldet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <unordered_set>

namespace pldet::ag {

namespace {

thread_local long g_l2_eps_hits = 0;

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

void check_finite(const std::string& kind, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("non-finite output in op '" + kind + "'");
  }
}

NodePtr new_node(std::string kind, std::vector<int> shape, std::vector<double> data,
                 bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->kind = std::move(kind);
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
  for (const auto& t : ts)
    if (t.defined() && t.requires_grad()) return true;
  return false;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ValueError(std::string(op) + ": undefined tensor argument");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace

int numel(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

void Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  int n = numel(shape);
  return Tensor(new_node("leaf", std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  int n = numel(shape);
  return Tensor(new_node("leaf", std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  if (static_cast<int>(data.size()) != numel(shape))
    throw ShapeError("from_data: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  return Tensor(new_node("leaf", std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_node("leaf", {1}, {value}, requires_grad));
}

const std::vector<int>& Tensor::shape() const { return node_->shape; }
int Tensor::size() const { return node_->size(); }
int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }
bool Tensor::requires_grad() const { return node_->requires_grad; }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::raw_data() { return node_->data; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(int i) const { return node_->data.at(static_cast<size_t>(i)); }

double Tensor::at(int i, int j) const {
  if (ndim() != 2) throw ShapeError("at(i,j): tensor is not 2-d");
  return node_->data.at(static_cast<size_t>(i) * node_->shape[1] + j);
}

bool Tensor::has_grad() const { return node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

std::span<double> Tensor::raw_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

// ---- graph helpers ------------------------------------------------------

Tensor make_op(std::string kind, std::vector<Tensor> inputs, std::vector<int> out_shape,
               std::vector<double> out_data, std::function<void(Node&)> backward_fn) {
  if (static_cast<int>(out_data.size()) != numel(out_shape))
    throw ShapeError("make_op(" + kind + "): output data does not match shape");
  check_finite(kind, out_data);
  bool rg = any_requires_grad(inputs);
  auto n = new_node(std::move(kind), std::move(out_shape), std::move(out_data), rg);
  if (rg) {
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(n);
}

namespace {

// parent grad accumulation guard: only touch parents that require grad
inline bool wants_grad(const NodePtr& p) { return p && p->requires_grad; }

}  // namespace

// ---- elementwise ops ----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  auto da = a.data(), db = b.data();
  for (int i = 0; i < a.size(); ++i) out[i] = da[i] + db[i];
  return make_op("add", {a, b}, a.shape(), std::move(out), [](Node& n) {
    for (int p = 0; p < 2; ++p) {
      auto& par = n.parents[p];
      if (!wants_grad(par)) continue;
      par->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) par->grad[i] += n.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  auto da = a.data(), db = b.data();
  for (int i = 0; i < a.size(); ++i) out[i] = da[i] * db[i];
  return make_op("mul", {a, b}, a.shape(), std::move(out), [](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (wants_grad(pa)) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->data[i];
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->data[i];
    }
  });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<double> out(x.size());
  auto d = x.data();
  for (int i = 0; i < x.size(); ++i) out[i] = d[i] > 0.0 ? d[i] : 0.0;
  return make_op("relu", {x}, x.shape(), std::move(out), [](Node& n) {
    auto& p = n.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (p->data[i] > 0.0) p->grad[i] += n.grad[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  require_defined(x, "sigmoid");
  std::vector<double> out(x.size());
  auto d = x.data();
  for (int i = 0; i < x.size(); ++i) {
    double v = d[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_op("sigmoid", {x}, x.shape(), std::move(out), [](Node& n) {
    auto& p = n.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      double y = n.data[i];
      p->grad[i] += n.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor log(const Tensor& x) {
  require_defined(x, "log");
  constexpr double kClamp = 1e-12;
  std::vector<double> out(x.size());
  auto d = x.data();
  for (int i = 0; i < x.size(); ++i) out[i] = std::log(d[i] < kClamp ? kClamp : d[i]);
  return make_op("log", {x}, x.shape(), std::move(out), [](Node& n) {
    auto& p = n.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (p->data[i] >= kClamp) p->grad[i] += n.grad[i] / p->data[i];
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op("sum", {x}, {1}, {s}, [](Node& n) {
    auto& p = n.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    double g = n.grad[0];
    for (auto& gi : p->grad) gi += g;
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  double s = 0.0;
  for (double v : x.data()) s += v;
  int n_el = x.size();
  return make_op("mean", {x}, {1}, {s / n_el}, [n_el](Node& n) {
    auto& p = n.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    double g = n.grad[0] / n_el;
    for (auto& gi : p->grad) gi += g;
  });
}

Tensor softmax(const Tensor& x, int axis) {
  require_defined(x, "softmax");
  if (axis < 0 || axis >= x.ndim())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(x.shape()));
  const auto& shp = x.shape();
  int len = shp[axis];
  int inner = 1;
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= shp[i];
  int outer = x.size() / (len * inner);
  std::vector<double> out(x.size());
  auto d = x.data();
  for (int o = 0; o < outer; ++o) {
    for (int in = 0; in < inner; ++in) {
      int base = o * len * inner + in;
      double mx = d[base];
      for (int a = 1; a < len; ++a) mx = std::max(mx, d[base + a * inner]);
      double z = 0.0;
      for (int a = 0; a < len; ++a) {
        double e = std::exp(d[base + a * inner] - mx);
        out[base + a * inner] = e;
        z += e;
      }
      for (int a = 0; a < len; ++a) out[base + a * inner] /= z;
    }
  }
  return make_op("softmax", {x}, x.shape(), std::move(out), [len, inner, outer](Node& n) {
    auto& p = n.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (int o = 0; o < outer; ++o) {
      for (int in = 0; in < inner; ++in) {
        int base = o * len * inner + in;
        double dot = 0.0;
        for (int a = 0; a < len; ++a) dot += n.grad[base + a * inner] * n.data[base + a * inner];
        for (int a = 0; a < len; ++a) {
          int i = base + a * inner;
          p->grad[i] += n.data[i] * (n.grad[i] - dot);
        }
      }
    }
  });
}

Tensor l2_normalize(const Tensor& x) {
  require_defined(x, "l2_normalize");
  double nrm2 = 0.0;
  for (double v : x.data()) nrm2 += v * v;
  double nrm = std::sqrt(nrm2);
  double denom = nrm;
  if (nrm < 1e-12) {
    denom = nrm + 1e-12;
    ++g_l2_eps_hits;
  }
  std::vector<double> out(x.size());
  auto d = x.data();
  for (int i = 0; i < x.size(); ++i) out[i] = d[i] / denom;
  return make_op("l2_normalize", {x}, x.shape(), std::move(out), [denom](Node& n) {
    auto& p = n.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    double dot = 0.0;
    for (size_t i = 0; i < n.grad.size(); ++i) dot += n.grad[i] * n.data[i];
    for (size_t i = 0; i < n.grad.size(); ++i)
      p->grad[i] += (n.grad[i] - n.data[i] * dot) / denom;
  });
}

// ---- linear / conv ------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  if (w.ndim() != 2) throw ShapeError("linear: weight must be 2-d [out, in]");
  int out_dim = w.shape()[0];
  int in_dim = w.shape()[1];
  bool batched = x.ndim() == 2;
  if (!batched && x.ndim() != 1) throw ShapeError("linear: input must be 1-d or 2-d");
  int m = batched ? x.shape()[0] : 1;
  int xin = batched ? x.shape()[1] : x.shape()[0];
  if (xin != in_dim)
    throw ShapeError("linear: input dim " + std::to_string(xin) + " vs weight in dim " +
                     std::to_string(in_dim));
  if (b.defined() && (b.ndim() != 1 || b.shape()[0] != out_dim))
    throw ShapeError("linear: bias shape mismatch");

  std::vector<double> out(static_cast<size_t>(m) * out_dim, 0.0);
  auto xd = x.data();
  auto wd = w.data();
  for (int r = 0; r < m; ++r) {
    const double* xr = xd.data() + static_cast<size_t>(r) * in_dim;
    double* yr = out.data() + static_cast<size_t>(r) * out_dim;
    for (int o = 0; o < out_dim; ++o) {
      const double* wo = wd.data() + static_cast<size_t>(o) * in_dim;
      double acc = 0.0;
      for (int i = 0; i < in_dim; ++i) acc += xr[i] * wo[i];
      yr[o] = acc;
    }
    if (b.defined()) {
      auto bd = b.data();
      for (int o = 0; o < out_dim; ++o) yr[o] += bd[o];
    }
  }
  std::vector<int> out_shape = batched ? std::vector<int>{m, out_dim} : std::vector<int>{out_dim};
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  bool has_b = b.defined();
  return make_op("linear", std::move(inputs), std::move(out_shape), std::move(out),
                 [m, in_dim, out_dim, has_b](Node& n) {
                   auto& px = n.parents[0];
                   auto& pw = n.parents[1];
                   if (wants_grad(px)) {
                     px->ensure_grad();
                     for (int r = 0; r < m; ++r) {
                       const double* gr = n.grad.data() + static_cast<size_t>(r) * out_dim;
                       double* xr = px->grad.data() + static_cast<size_t>(r) * in_dim;
                       for (int o = 0; o < out_dim; ++o) {
                         const double* wo = pw->data.data() + static_cast<size_t>(o) * in_dim;
                         double g = gr[o];
                         if (g == 0.0) continue;
                         for (int i = 0; i < in_dim; ++i) xr[i] += g * wo[i];
                       }
                     }
                   }
                   if (wants_grad(pw)) {
                     pw->ensure_grad();
                     for (int r = 0; r < m; ++r) {
                       const double* gr = n.grad.data() + static_cast<size_t>(r) * out_dim;
                       const double* xr = px->data.data() + static_cast<size_t>(r) * in_dim;
                       for (int o = 0; o < out_dim; ++o) {
                         double g = gr[o];
                         if (g == 0.0) continue;
                         double* wo = pw->grad.data() + static_cast<size_t>(o) * in_dim;
                         for (int i = 0; i < in_dim; ++i) wo[i] += g * xr[i];
                       }
                     }
                   }
                   if (has_b && wants_grad(n.parents[2])) {
                     auto& pb = n.parents[2];
                     pb->ensure_grad();
                     for (int r = 0; r < m; ++r)
                       for (int o = 0; o < out_dim; ++o)
                         pb->grad[o] += n.grad[static_cast<size_t>(r) * out_dim + o];
                   }
                 });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require_defined(x, "conv2d");
  require_defined(w, "conv2d");
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  if (pad < 0) throw ValueError("conv2d: pad must be >= 0");
  if (x.ndim() != 3 || w.ndim() != 4) throw ShapeError("conv2d: x must be 3-d, w must be 4-d");
  int cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  int cout = w.shape()[0], wcin = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  if (wcin != cin) throw ShapeError("conv2d: channel mismatch");
  if (b.defined() && (b.ndim() != 1 || b.shape()[0] != cout))
    throw ShapeError("conv2d: bias shape mismatch");
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");

  std::vector<double> out(static_cast<size_t>(cout) * ho * wo, 0.0);
  auto xd = x.data();
  auto wdat = w.data();
  for (int co = 0; co < cout; ++co) {
    double bias = b.defined() ? b.data()[co] : 0.0;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double acc = bias;
        int iy0 = oy * stride - pad;
        int ix0 = ox * stride - pad;
        for (int ci = 0; ci < cin; ++ci) {
          const double* xc = xd.data() + (static_cast<size_t>(ci) * h) * wd;
          const double* wc =
              wdat.data() + ((static_cast<size_t>(co) * cin + ci) * kh) * kw;
          for (int i = 0; i < kh; ++i) {
            int iy = iy0 + i;
            if (iy < 0 || iy >= h) continue;
            const double* xrow = xc + static_cast<size_t>(iy) * wd;
            const double* wrow = wc + static_cast<size_t>(i) * kw;
            for (int j = 0; j < kw; ++j) {
              int ix = ix0 + j;
              if (ix < 0 || ix >= wd) continue;
              acc += xrow[ix] * wrow[j];
            }
          }
        }
        out[(static_cast<size_t>(co) * ho + oy) * wo + ox] = acc;
      }
    }
  }
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  bool has_b = b.defined();
  return make_op(
      "conv2d", std::move(inputs), {cout, ho, wo}, std::move(out),
      [cin, h, wd, cout, kh, kw, ho, wo, stride, pad, has_b](Node& n) {
        auto& px = n.parents[0];
        auto& pw = n.parents[1];
        bool gx = wants_grad(px);
        bool gw = wants_grad(pw);
        if (gx) px->ensure_grad();
        if (gw) pw->ensure_grad();
        if (gx || gw) {
          for (int co = 0; co < cout; ++co) {
            for (int oy = 0; oy < ho; ++oy) {
              for (int ox = 0; ox < wo; ++ox) {
                double g = n.grad[(static_cast<size_t>(co) * ho + oy) * wo + ox];
                if (g == 0.0) continue;
                int iy0 = oy * stride - pad;
                int ix0 = ox * stride - pad;
                for (int ci = 0; ci < cin; ++ci) {
                  size_t xoff = (static_cast<size_t>(ci) * h) * wd;
                  size_t woff = ((static_cast<size_t>(co) * cin + ci) * kh) * kw;
                  for (int i = 0; i < kh; ++i) {
                    int iy = iy0 + i;
                    if (iy < 0 || iy >= h) continue;
                    for (int j = 0; j < kw; ++j) {
                      int ix = ix0 + j;
                      if (ix < 0 || ix >= wd) continue;
                      size_t xi = xoff + static_cast<size_t>(iy) * wd + ix;
                      size_t wi = woff + static_cast<size_t>(i) * kw + j;
                      if (gx) px->grad[xi] += g * pw->data[wi];
                      if (gw) pw->grad[wi] += g * px->data[xi];
                    }
                  }
                }
              }
            }
          }
        }
        if (has_b && wants_grad(n.parents[2])) {
          auto& pb = n.parents[2];
          pb->ensure_grad();
          for (int co = 0; co < cout; ++co) {
            double s = 0.0;
            for (int k = 0; k < ho * wo; ++k) s += n.grad[static_cast<size_t>(co) * ho * wo + k];
            pb->grad[co] += s;
          }
        }
      });
}

// ---- shape ops ----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ValueError("concat: empty input list");
  for (const auto& t : xs) require_defined(t, "concat");
  int nd = xs[0].ndim();
  if (axis < 0 || axis >= nd) throw ShapeError("concat: invalid axis");
  std::vector<int> out_shape = xs[0].shape();
  int total_axis = 0;
  for (const auto& t : xs) {
    if (t.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && t.shape()[i] != out_shape[i])
        throw ShapeError("concat: non-axis dimension mismatch");
    total_axis += t.shape()[axis];
  }
  out_shape[axis] = total_axis;

  int inner = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];
  int outer = numel(out_shape) / (total_axis * inner);

  std::vector<double> out(numel(out_shape));
  std::vector<int> axis_sizes, axis_offsets;
  int off = 0;
  for (const auto& t : xs) {
    axis_sizes.push_back(t.shape()[axis]);
    axis_offsets.push_back(off);
    off += t.shape()[axis];
  }
  for (size_t k = 0; k < xs.size(); ++k) {
    auto src = xs[k].data();
    int len = axis_sizes[k];
    for (int o = 0; o < outer; ++o) {
      const double* s = src.data() + static_cast<size_t>(o) * len * inner;
      double* d =
          out.data() + (static_cast<size_t>(o) * total_axis + axis_offsets[k]) * inner;
      std::copy(s, s + static_cast<size_t>(len) * inner, d);
    }
  }
  return make_op("concat", xs, std::move(out_shape), std::move(out),
                 [axis_sizes, axis_offsets, outer, inner, total_axis](Node& n) {
                   for (size_t k = 0; k < n.parents.size(); ++k) {
                     auto& p = n.parents[k];
                     if (!wants_grad(p)) continue;
                     p->ensure_grad();
                     int len = axis_sizes[k];
                     for (int o = 0; o < outer; ++o) {
                       const double* g =
                           n.grad.data() +
                           (static_cast<size_t>(o) * total_axis + axis_offsets[k]) * inner;
                       double* d = p->grad.data() + static_cast<size_t>(o) * len * inner;
                       for (int i = 0; i < len * inner; ++i) d[i] += g[i];
                     }
                   }
                 });
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  require_defined(x, "slice");
  if (axis < 0 || axis >= x.ndim()) throw ShapeError("slice: invalid axis");
  int dim = x.shape()[axis];
  if (start < 0 || len <= 0 || start + len > dim)
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for dim " +
                     std::to_string(dim));
  std::vector<int> out_shape = x.shape();
  out_shape[axis] = len;
  int inner = 1;
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.shape()[i];
  int outer = x.size() / (dim * inner);
  std::vector<double> out(numel(out_shape));
  auto src = x.data();
  for (int o = 0; o < outer; ++o) {
    const double* s = src.data() + (static_cast<size_t>(o) * dim + start) * inner;
    double* d = out.data() + static_cast<size_t>(o) * len * inner;
    std::copy(s, s + static_cast<size_t>(len) * inner, d);
  }
  return make_op("slice", {x}, std::move(out_shape), std::move(out),
                 [dim, start, len, inner, outer](Node& n) {
                   auto& p = n.parents[0];
                   if (!wants_grad(p)) return;
                   p->ensure_grad();
                   for (int o = 0; o < outer; ++o) {
                     const double* g = n.grad.data() + static_cast<size_t>(o) * len * inner;
                     double* d = p->grad.data() + (static_cast<size_t>(o) * dim + start) * inner;
                     for (int i = 0; i < len * inner; ++i) d[i] += g[i];
                   }
                 });
}

Tensor stack_rows(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ValueError("stack_rows: empty input");
  for (const auto& t : xs) require_defined(t, "stack_rows");
  int flat = xs[0].size();
  for (const auto& t : xs)
    if (t.size() != flat) throw ShapeError("stack_rows: inconsistent input sizes");
  int m = static_cast<int>(xs.size());
  std::vector<double> out(static_cast<size_t>(m) * flat);
  for (int r = 0; r < m; ++r) {
    auto d = xs[r].data();
    std::copy(d.begin(), d.end(), out.begin() + static_cast<size_t>(r) * flat);
  }
  return make_op("stack_rows", xs, {m, flat}, std::move(out), [flat](Node& n) {
    for (size_t r = 0; r < n.parents.size(); ++r) {
      auto& p = n.parents[r];
      if (!wants_grad(p)) continue;
      p->ensure_grad();
      const double* g = n.grad.data() + r * flat;
      for (int i = 0; i < flat; ++i) p->grad[i] += g[i];
    }
  });
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  require_defined(x, "reshape");
  if (numel(new_shape) != x.size())
    throw ShapeError("reshape: size mismatch " + shape_str(x.shape()) + " -> " +
                     shape_str(new_shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op("reshape", {x}, std::move(new_shape), std::move(out), [](Node& n) {
    auto& p = n.parents[0];
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
  });
}

Tensor row(const Tensor& x, int i) {
  if (x.ndim() != 2) throw ShapeError("row: tensor is not 2-d");
  return reshape(slice(x, 0, i, 1), {x.shape()[1]});
}

Tensor detach(const Tensor& x) {
  require_defined(x, "detach");
  std::vector<double> copy(x.data().begin(), x.data().end());
  auto n = new_node("detach", x.shape(), std::move(copy), false);
  return Tensor(n);
}

Tensor bilinear_sample(const Tensor& map, double x, double y) {
  require_defined(map, "bilinear_sample");
  if (map.ndim() != 3) throw ShapeError("bilinear_sample: map must be [C, H, W]");
  int c = map.shape()[0], h = map.shape()[1], w = map.shape()[2];
  if (h < 1 || w < 1) throw ShapeError("bilinear_sample: empty map");
  double cx = std::clamp(x, 0.0, static_cast<double>(w - 1));
  double cy = std::clamp(y, 0.0, static_cast<double>(h - 1));
  int x0 = static_cast<int>(std::floor(cx));
  int y0 = static_cast<int>(std::floor(cy));
  if (x0 > w - 2) x0 = std::max(0, w - 2);
  if (y0 > h - 2) y0 = std::max(0, h - 2);
  int x1 = std::min(x0 + 1, w - 1);
  int y1 = std::min(y0 + 1, h - 1);
  double fx = cx - x0;
  double fy = cy - y0;
  double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
  double w10 = fy * (1 - fx), w11 = fy * fx;

  std::vector<double> out(c);
  auto d = map.data();
  for (int ch = 0; ch < c; ++ch) {
    const double* m = d.data() + static_cast<size_t>(ch) * h * w;
    out[ch] = w00 * m[static_cast<size_t>(y0) * w + x0] + w01 * m[static_cast<size_t>(y0) * w + x1] +
              w10 * m[static_cast<size_t>(y1) * w + x0] + w11 * m[static_cast<size_t>(y1) * w + x1];
  }
  return make_op("bilinear_sample", {map}, {c}, std::move(out),
                 [c, h, w, x0, y0, x1, y1, w00, w01, w10, w11](Node& n) {
                   auto& p = n.parents[0];
                   if (!wants_grad(p)) return;
                   p->ensure_grad();
                   for (int ch = 0; ch < c; ++ch) {
                     double g = n.grad[ch];
                     if (g == 0.0) continue;
                     double* m = p->grad.data() + static_cast<size_t>(ch) * h * w;
                     m[static_cast<size_t>(y0) * w + x0] += g * w00;
                     m[static_cast<size_t>(y0) * w + x1] += g * w01;
                     m[static_cast<size_t>(y1) * w + x0] += g * w10;
                     m[static_cast<size_t>(y1) * w + x1] += g * w11;
                   }
                 });
}

// ---- composites ---------------------------------------------------------

Tensor scale(const Tensor& x, double c) { return mul(x, Tensor::full(x.shape(), c)); }

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor smooth_l1(const Tensor& d) {
  // 0.5 a^2 - 0.5 relu(a - 1)^2 with a = |d| = relu(d) + relu(-d);
  // equals 0.5 d^2 for |d| < 1 and |d| - 0.5 otherwise.
  Tensor a = add(relu(d), relu(neg(d)));
  Tensor excess = relu(sub(a, Tensor::full(d.shape(), 1.0)));
  return sub(scale(square(a), 0.5), scale(square(excess), 0.5));
}

// ---- backward -----------------------------------------------------------

void backward(const Tensor& root) {
  require_defined(root, "backward");
  if (root.size() != 1) throw ShapeError("backward: root must be scalar");
  Node* rn = root.node();
  if (!rn->requires_grad) return;

  // iterative DFS topological order over grad-requiring subgraph
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(rn, 0);
  visited.insert(rn);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  rn->ensure_grad();
  rn->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---- grad check ---------------------------------------------------------

GradReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                      double eps, double tol) {
  if (eps <= 0.0) throw ValueError("grad_check: eps must be > 0");
  double v0 = f().item();
  double v1 = f().item();
  if (v0 != v1) throw ValueError("grad_check: f is not deterministic under fixed inputs");

  for (auto p : params) p.zero_grad();
  Tensor root = f();
  backward(root);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params)
    analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradReport report;
  report.epsilon = eps;
  report.tolerance = tol;
  report.max_rel_err.assign(params.size(), 0.0);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto data = p.raw_data();
    for (int i = 0; i < p.size(); ++i) {
      double saved = data[i];
      data[i] = saved + eps;
      double fp = f().item();
      data[i] = saved - eps;
      double fm = f().item();
      data[i] = saved;
      double fd = (fp - fm) / (2.0 * eps);
      double a = analytic[pi][i];
      double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-2});
      report.max_rel_err[pi] = std::max(report.max_rel_err[pi], rel);
    }
    report.worst = std::max(report.worst, report.max_rel_err[pi]);
  }
  report.pass = report.worst < tol;
  return report;
}

long l2_eps_hits() { return g_l2_eps_hits; }
void reset_l2_eps_hits() { g_l2_eps_hits = 0; }

}  // namespace pldet::ag
