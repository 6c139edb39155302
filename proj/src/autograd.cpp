#include "autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "errors.hpp"

namespace dfr {

namespace {

thread_local bool g_grad_enabled = true;

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kInputShape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                     " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    fail(ErrorCode::kInputShape, std::string(op) + ": expected rank " + std::to_string(rank) +
                                     ", got " + shape_str(a.shape()));
  }
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* src = a.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(pa[i], pb[i]);
  return out;
}

// Per-channel stride helpers for [N,C,...] tensors.
struct ChannelLayout {
  int n, c;
  std::size_t inner;
};

ChannelLayout channel_layout(const Shape& s) {
  if (s.size() < 2) fail(ErrorCode::kInputShape, "channel op needs rank >= 2, got " + shape_str(s));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= static_cast<std::size_t>(s[i]);
  return {s[0], s[1], inner};
}

struct ConvDims {
  int n, c, h, w;     // input
  int o, kh, kw;      // filters
  int ho, wo;         // output
  int stride, pad;
  std::size_t ckk() const { return static_cast<std::size_t>(c) * kh * kw; }
  std::size_t hw_out() const { return static_cast<std::size_t>(ho) * wo; }
  std::size_t hw_in() const { return static_cast<std::size_t>(h) * w; }
};

ConvDims conv_dims(const Shape& x, const Shape& w, ConvGeom g) {
  if (x.size() != 4 || w.size() != 4) {
    fail(ErrorCode::kInputShape, "conv2d expects 4-D input and filter, got " + shape_str(x) +
                                     " and " + shape_str(w));
  }
  if (x[1] != w[1]) {
    fail(ErrorCode::kInputShape, "conv2d channel mismatch: input " + shape_str(x) + ", filter " +
                                     shape_str(w));
  }
  ConvDims d{};
  d.n = x[0]; d.c = x[1]; d.h = x[2]; d.w = x[3];
  d.o = w[0]; d.kh = w[2]; d.kw = w[3];
  d.stride = g.stride; d.pad = g.pad;
  d.ho = (d.h + 2 * g.pad - d.kh) / g.stride + 1;
  d.wo = (d.w + 2 * g.pad - d.kw) / g.stride + 1;
  if (d.ho <= 0 || d.wo <= 0) fail(ErrorCode::kInputShape, "conv2d output would be empty");
  return d;
}

void im2col(const double* x, const ConvDims& d, double* col) {
  const std::size_t hw = d.hw_out();
  for (int c = 0; c < d.c; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * d.hw_in();
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        double* row = col + ((static_cast<std::size_t>(c) * d.kh + ki) * d.kw + kj) * hw;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * d.stride - d.pad + ki;
          double* dst = row + static_cast<std::size_t>(oh) * d.wo;
          if (ih < 0 || ih >= d.h) {
            std::fill(dst, dst + d.wo, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(ih) * d.w;
          if (d.stride == 1) {
            const int shift = kj - d.pad;
            const int lo = std::max(0, -shift);
            const int hi = std::min(d.wo, d.w - shift);
            for (int ow = 0; ow < lo; ++ow) dst[ow] = 0.0;
            for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow + shift];
            for (int ow = std::max(hi, lo); ow < d.wo; ++ow) dst[ow] = 0.0;
          } else {
            for (int ow = 0; ow < d.wo; ++ow) {
              const int iw = ow * d.stride - d.pad + kj;
              dst[ow] = (iw >= 0 && iw < d.w) ? src[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* x) {
  const std::size_t hw = d.hw_out();
  for (int c = 0; c < d.c; ++c) {
    double* xc = x + static_cast<std::size_t>(c) * d.hw_in();
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const double* row = col + ((static_cast<std::size_t>(c) * d.kh + ki) * d.kw + kj) * hw;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * d.stride - d.pad + ki;
          if (ih < 0 || ih >= d.h) continue;
          const double* src = row + static_cast<std::size_t>(oh) * d.wo;
          double* dst = xc + static_cast<std::size_t>(ih) * d.w;
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * d.stride - d.pad + kj;
            if (iw >= 0 && iw < d.w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvDims& d) {
  return d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0;
}

Tensor conv_forward(const Tensor& x, const Tensor& w, ConvGeom g) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), g);
  Tensor out(Shape{d.n, d.o, d.ho, d.wo});
  CMapR wm(w.data(), d.o, static_cast<Eigen::Index>(d.ckk()));
  std::vector<double> col(is_pointwise(d) ? 0 : d.ckk() * d.hw_out());
  for (int n = 0; n < d.n; ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * d.c * d.hw_in();
    const double* cp = xn;
    if (!is_pointwise(d)) {
      im2col(xn, d, col.data());
      cp = col.data();
    }
    CMapR cm(cp, static_cast<Eigen::Index>(d.ckk()), static_cast<Eigen::Index>(d.hw_out()));
    MapR om(out.data() + static_cast<std::size_t>(n) * d.o * d.hw_out(), d.o,
            static_cast<Eigen::Index>(d.hw_out()));
    om.noalias() = wm * cm;
  }
  return out;
}

Tensor conv_input_grad(const Tensor& gout, const Tensor& w, ConvGeom g, const Shape& x_shape) {
  const ConvDims d = conv_dims(x_shape, w.shape(), g);
  if (gout.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    fail(ErrorCode::kInputShape, "conv2d_input_grad: gradient shape " + shape_str(gout.shape()));
  }
  Tensor gx(x_shape);
  CMapR wm(w.data(), d.o, static_cast<Eigen::Index>(d.ckk()));
  MatR col(static_cast<Eigen::Index>(d.ckk()), static_cast<Eigen::Index>(d.hw_out()));
  for (int n = 0; n < d.n; ++n) {
    CMapR gm(gout.data() + static_cast<std::size_t>(n) * d.o * d.hw_out(), d.o,
             static_cast<Eigen::Index>(d.hw_out()));
    double* gxn = gx.data() + static_cast<std::size_t>(n) * d.c * d.hw_in();
    if (is_pointwise(d)) {
      MapR(gxn, static_cast<Eigen::Index>(d.ckk()), static_cast<Eigen::Index>(d.hw_out()))
          .noalias() = wm.transpose() * gm;
    } else {
      col.noalias() = wm.transpose() * gm;
      col2im_add(col.data(), d, gxn);
    }
  }
  return gx;
}

Tensor conv_weight_grad(const Tensor& x, const Tensor& gout, ConvGeom g, const Shape& w_shape) {
  const ConvDims d = conv_dims(x.shape(), w_shape, g);
  if (gout.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    fail(ErrorCode::kInputShape, "conv2d_weight_grad: gradient shape " + shape_str(gout.shape()));
  }
  Tensor gw(w_shape);
  MapR gwm(gw.data(), d.o, static_cast<Eigen::Index>(d.ckk()));
  std::vector<double> col(is_pointwise(d) ? 0 : d.ckk() * d.hw_out());
  for (int n = 0; n < d.n; ++n) {
    const double* xn = x.data() + static_cast<std::size_t>(n) * d.c * d.hw_in();
    const double* cp = xn;
    if (!is_pointwise(d)) {
      im2col(xn, d, col.data());
      cp = col.data();
    }
    CMapR cm(cp, static_cast<Eigen::Index>(d.ckk()), static_cast<Eigen::Index>(d.hw_out()));
    CMapR gm(gout.data() + static_cast<std::size_t>(n) * d.o * d.hw_out(), d.o,
             static_cast<Eigen::Index>(d.hw_out()));
    gwm.noalias() += gm * cm.transpose();
  }
  return gw;
}

}  // namespace

// ---- Var / graph ------------------------------------------------------------

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
  if (!node_) throw std::logic_error("access to undefined Var");
  return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

const Var& Var::parent(std::size_t i) const { return node_->parents.at(i); }

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool enabled) { g_grad_enabled = enabled; }

Var make_op(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Var out(std::move(value));
  if (!GradMode::enabled()) return out;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Var& p) { return p.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents = std::move(parents);
  out.node_->backward = std::move(backward);
  return out;
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var zeros_like(const Var& v) { return constant(Tensor(v.shape())); }

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph) {
  if (output.value().size() != 1) {
    fail(ErrorCode::kInputShape, "grad() needs a scalar output, got " + shape_str(output.shape()));
  }
  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (output.requires_grad()) stack.emplace_back(output.node(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next == 0 && visited[node]) {
      stack.pop_back();
      continue;
    }
    visited[node] = true;
    if (next < node->parents.size()) {
      Node* p = node->parents[next].node();
      ++next;
      if (node->parents[next - 1].requires_grad() && !visited[p]) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  const bool prev_mode = GradMode::enabled();
  GradMode::set(create_graph);
  std::unordered_map<Node*, Var> grads;
  grads[output.node()] = constant(Tensor(output.shape(), 1.0));
  // Keep owning handles for the nodes being processed.
  std::unordered_map<Node*, Var> owners;
  owners[output.node()] = output;
  try {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      auto gi = grads.find(node);
      if (gi == grads.end() || !node->backward) continue;
      const Var self = owners.at(node);
      std::vector<Var> pg = node->backward(self, gi->second);
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        const Var& p = node->parents[i];
        if (!p.requires_grad() || i >= pg.size() || !pg[i].defined()) continue;
        owners.emplace(p.node(), p);
        auto [slot, inserted] = grads.try_emplace(p.node(), pg[i]);
        if (!inserted) slot->second = add(slot->second, pg[i]);
      }
    }
  } catch (...) {
    GradMode::set(prev_mode);
    throw;
  }
  GradMode::set(prev_mode);

  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const Var& in : inputs) {
    auto gi = grads.find(in.node());
    result.push_back(gi == grads.end() ? zeros_like(in) : gi->second);
  }
  return result;
}

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_op(map_binary(a.value(), b.value(), [](double x, double y) { return x + y; }),
                 {a, b}, [](const Var&, const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_op(map_binary(a.value(), b.value(), [](double x, double y) { return x - y; }),
                 {a, b},
                 [](const Var&, const Var& g) { return std::vector<Var>{g, scale(g, -1.0)}; });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make_op(map_binary(a.value(), b.value(), [](double x, double y) { return x * y; }),
                 {a, b}, [](const Var& self, const Var& g) {
                   return std::vector<Var>{mul(g, self.parent(1)), mul(g, self.parent(0))};
                 });
}

Var scale(const Var& a, double s) {
  return make_op(map_unary(a.value(), [s](double x) { return x * s; }), {a},
                 [s](const Var&, const Var& g) { return std::vector<Var>{scale(g, s)}; });
}

Var add_scalar(const Var& a, double s) {
  return make_op(map_unary(a.value(), [s](double x) { return x + s; }), {a},
                 [](const Var&, const Var& g) { return std::vector<Var>{g}; });
}

Var relu(const Var& a) {
  return make_op(map_unary(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                 [](const Var& self, const Var& g) {
                   Var mask = constant(map_unary(self.parent(0).value(),
                                                 [](double x) { return x > 0.0 ? 1.0 : 0.0; }));
                   return std::vector<Var>{mul(g, mask)};
                 });
}

Var leaky_relu(const Var& a, double slope) {
  return make_op(map_unary(a.value(), [slope](double x) { return x > 0.0 ? x : slope * x; }), {a},
                 [slope](const Var& self, const Var& g) {
                   Var mask = constant(map_unary(self.parent(0).value(),
                                                 [slope](double x) { return x > 0.0 ? 1.0 : slope; }));
                   return std::vector<Var>{mul(g, mask)};
                 });
}

Var sigmoid(const Var& a) {
  return make_op(map_unary(a.value(),
                           [](double x) {
                             if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                             const double e = std::exp(x);
                             return e / (1.0 + e);
                           }),
                 {a}, [](const Var& self, const Var& g) {
                   // d sigmoid = s - s^2, expressed on the output so it stays differentiable.
                   return std::vector<Var>{mul(g, sub(self, mul(self, self)))};
                 });
}

Var tanh(const Var& a) {
  return make_op(map_unary(a.value(), [](double x) { return std::tanh(x); }), {a},
                 [](const Var& self, const Var& g) {
                   return std::vector<Var>{sub(g, mul(g, mul(self, self)))};
                 });
}

Var exp(const Var& a) {
  return make_op(map_unary(a.value(), [](double x) { return std::exp(x); }), {a},
                 [](const Var& self, const Var& g) { return std::vector<Var>{mul(g, self)}; });
}

Var square(const Var& a) { return mul(a, a); }

Var rsqrt(const Var& a, double eps) {
  return make_op(map_unary(a.value(), [eps](double x) { return 1.0 / std::sqrt(x + eps); }), {a},
                 [](const Var& self, const Var& g) {
                   return std::vector<Var>{mul(g, scale(mul(self, mul(self, self)), -0.5))};
                 });
}

// ---- reductions ---------------------------------------------------------------

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  Shape in_shape = a.shape();
  return make_op(Tensor::scalar(s), {a}, [in_shape](const Var&, const Var& g) {
    return std::vector<Var>{broadcast_scalar(g, in_shape)};
  });
}

Var broadcast_scalar(const Var& s, const Shape& shape) {
  if (s.value().size() != 1) fail(ErrorCode::kInputShape, "broadcast_scalar needs a scalar");
  return make_op(Tensor(shape, s.value()[0]), {s},
                 [](const Var&, const Var& g) { return std::vector<Var>{sum(g)}; });
}

Var sum_cols(const Var& a) {
  require_rank(a, 2, "sum_cols");
  const int n = a.shape()[0], k = a.shape()[1];
  Tensor out(Shape{n});
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += a.value()[static_cast<std::size_t>(i) * k + j];
    out[static_cast<std::size_t>(i)] = s;
  }
  return make_op(std::move(out), {a}, [k](const Var&, const Var& g) {
    return std::vector<Var>{broadcast_cols(g, k)};
  });
}

Var broadcast_cols(const Var& v, int k) {
  require_rank(v, 1, "broadcast_cols");
  const int n = v.shape()[0];
  Tensor out(Shape{n, k});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = v.value()[static_cast<std::size_t>(i)];
  return make_op(std::move(out), {v},
                 [](const Var&, const Var& g) { return std::vector<Var>{sum_cols(g)}; });
}

Var logsumexp_rows(const Var& a) {
  require_rank(a, 2, "logsumexp_rows");
  const int n = a.shape()[0], k = a.shape()[1];
  Tensor out(Shape{n});
  for (int i = 0; i < n; ++i) {
    const double* row = a.value().data() + static_cast<std::size_t>(i) * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(row[j] - m);
    out[static_cast<std::size_t>(i)] = m + std::log(s);
  }
  return make_op(std::move(out), {a}, [k](const Var& self, const Var& g) {
    const Var& z = self.parent(0);
    Var p = exp(sub(z, broadcast_cols(self, k)));
    return std::vector<Var>{mul(broadcast_cols(g, k), p)};
  });
}

Var pick(const Var& a, std::vector<int> cols) {
  require_rank(a, 2, "pick");
  const int n = a.shape()[0], k = a.shape()[1];
  if (static_cast<int>(cols.size()) != n) fail(ErrorCode::kInputShape, "pick: index count mismatch");
  Tensor out(Shape{n});
  for (int i = 0; i < n; ++i) {
    const int c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= k) fail(ErrorCode::kInvalidArgument, "pick: column out of range");
    out[static_cast<std::size_t>(i)] = a.value()[static_cast<std::size_t>(i) * k + c];
  }
  return make_op(std::move(out), {a}, [cols, k](const Var&, const Var& g) {
    return std::vector<Var>{place(g, cols, k)};
  });
}

Var place(const Var& v, std::vector<int> cols, int k) {
  require_rank(v, 1, "place");
  const int n = v.shape()[0];
  Tensor out(Shape{n, k});
  for (int i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i) * k + cols[static_cast<std::size_t>(i)]] = v.value()[static_cast<std::size_t>(i)];
  return make_op(std::move(out), {v},
                 [cols](const Var&, const Var& g) { return std::vector<Var>{pick(g, cols)}; });
}

Var channel_sum(const Var& a) {
  const auto [n, c, inner] = channel_layout(a.shape());
  Tensor out(Shape{c});
  const double* p = a.value().data();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      const double* q = p + (static_cast<std::size_t>(i) * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) s += q[j];
      out[static_cast<std::size_t>(ch)] += s;
    }
  Shape in_shape = a.shape();
  return make_op(std::move(out), {a}, [in_shape](const Var&, const Var& g) {
    return std::vector<Var>{channel_broadcast(g, in_shape)};
  });
}

Var channel_broadcast(const Var& b, const Shape& shape) {
  const auto [n, c, inner] = channel_layout(shape);
  if (b.shape() != Shape{c}) {
    fail(ErrorCode::kInputShape, "channel_broadcast: bias " + shape_str(b.shape()) + " for " +
                                     shape_str(shape));
  }
  Tensor out(shape);
  double* p = out.data();
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      double* q = p + (static_cast<std::size_t>(i) * c + ch) * inner;
      std::fill(q, q + inner, b.value()[static_cast<std::size_t>(ch)]);
    }
  return make_op(std::move(out), {b},
                 [](const Var&, const Var& g) { return std::vector<Var>{channel_sum(g)}; });
}

Var bias_add(const Var& x, const Var& b) { return add(x, channel_broadcast(b, x.shape())); }

Var spatial_sum(const Var& a) {
  require_rank(a, 4, "spatial_sum");
  const int n = a.shape()[0], c = a.shape()[1], h = a.shape()[2], w = a.shape()[3];
  const std::size_t inner = static_cast<std::size_t>(h) * w;
  Tensor out(Shape{n, c});
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * c; ++i) {
    double s = 0.0;
    const double* q = a.value().data() + i * inner;
    for (std::size_t j = 0; j < inner; ++j) s += q[j];
    out[i] = s;
  }
  return make_op(std::move(out), {a}, [h, w](const Var&, const Var& g) {
    return std::vector<Var>{spatial_broadcast(g, h, w)};
  });
}

Var spatial_broadcast(const Var& a, int h, int w) {
  require_rank(a, 2, "spatial_broadcast");
  const int n = a.shape()[0], c = a.shape()[1];
  const std::size_t inner = static_cast<std::size_t>(h) * w;
  Tensor out(Shape{n, c, h, w});
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * c; ++i)
    std::fill(out.data() + i * inner, out.data() + (i + 1) * inner, a.value()[i]);
  return make_op(std::move(out), {a},
                 [](const Var&, const Var& g) { return std::vector<Var>{spatial_sum(g)}; });
}

// ---- linear algebra -----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    fail(ErrorCode::kInputShape, "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  MapR(out.data(), m, n).noalias() = CMapR(a.value().data(), m, k) * CMapR(b.value().data(), k, n);
  return make_op(std::move(out), {a, b}, [](const Var& self, const Var& g) {
    return std::vector<Var>{matmul(g, transpose(self.parent(1))),
                            matmul(transpose(self.parent(0)), g)};
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const int m = a.shape()[0], n = a.shape()[1];
  Tensor out(Shape{n, m});
  MapR(out.data(), n, m) = CMapR(a.value().data(), m, n).transpose();
  return make_op(std::move(out), {a},
                 [](const Var&, const Var& g) { return std::vector<Var>{transpose(g)}; });
}

Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    fail(ErrorCode::kInputShape, "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Shape in_shape = a.shape();
  return make_op(a.value().reshaped(std::move(shape)), {a}, [in_shape](const Var&, const Var& g) {
    return std::vector<Var>{reshape(g, in_shape)};
  });
}

// ---- convolution --------------------------------------------------------------
//
// With y = B(x, w) bilinear, the three ops below are B, its adjoint in x and its
// adjoint in w. Each one's derivative is again one of the three.

Var conv2d(const Var& x, const Var& w, ConvGeom geom) {
  return make_op(conv_forward(x.value(), w.value(), geom), {x, w},
                 [geom](const Var& self, const Var& g) {
                   const Var& xv = self.parent(0);
                   const Var& wv = self.parent(1);
                   return std::vector<Var>{conv2d_input_grad(g, wv, geom, xv.shape()),
                                           conv2d_weight_grad(xv, g, geom, wv.shape())};
                 });
}

Var conv2d_input_grad(const Var& g, const Var& w, ConvGeom geom, const Shape& x_shape) {
  return make_op(conv_input_grad(g.value(), w.value(), geom, x_shape), {g, w},
                 [geom](const Var& self, const Var& gz) {
                   const Var& gv = self.parent(0);
                   const Var& wv = self.parent(1);
                   return std::vector<Var>{conv2d(gz, wv, geom),
                                           conv2d_weight_grad(gz, gv, geom, wv.shape())};
                 });
}

Var conv2d_weight_grad(const Var& x, const Var& g, ConvGeom geom, const Shape& w_shape) {
  return make_op(conv_weight_grad(x.value(), g.value(), geom, w_shape), {x, g},
                 [geom](const Var& self, const Var& gz) {
                   const Var& xv = self.parent(0);
                   const Var& gv = self.parent(1);
                   return std::vector<Var>{conv2d_input_grad(gv, gz, geom, xv.shape()),
                                           conv2d(xv, gz, geom)};
                 });
}

// ---- pooling / resampling -----------------------------------------------------

Var maxpool2(const Var& x) {
  require_rank(x, 4, "maxpool2");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const int ho = h / 2, wo = w / 2;
  auto index = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(n) * c * ho * wo);
  const double* p = x.value().data();
  std::size_t k = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const std::size_t base = static_cast<std::size_t>(plane) * h * w;
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        std::size_t best = base + static_cast<std::size_t>(2 * i) * w + 2 * j;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            const std::size_t idx = base + static_cast<std::size_t>(2 * i + di) * w + 2 * j + dj;
            if (p[idx] > p[best]) best = idx;
          }
        (*index)[k++] = best;
      }
  }
  return gather(x, std::move(index), Shape{n, c, ho, wo});
}

Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  Tensor out(out_shape);
  const double* p = x.value().data();
  for (std::size_t i = 0; i < index->size(); ++i) out[i] = p[(*index)[i]];
  Shape in_shape = x.shape();
  return make_op(std::move(out), {x}, [index, in_shape](const Var&, const Var& g) {
    return std::vector<Var>{scatter(g, index, in_shape)};
  });
}

Var scatter(const Var& g, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  Tensor out(out_shape);
  for (std::size_t i = 0; i < index->size(); ++i) out[(*index)[i]] += g.value()[i];
  Shape in_shape = g.shape();
  return make_op(std::move(out), {g}, [index, in_shape](const Var&, const Var& gz) {
    return std::vector<Var>{gather(gz, index, in_shape)};
  });
}

Var upsample2(const Var& x) {
  require_rank(x, 4, "upsample2");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  Tensor out(Shape{n, c, 2 * h, 2 * w});
  const double* p = x.value().data();
  double* q = out.data();
  for (int plane = 0; plane < n * c; ++plane) {
    const double* src = p + static_cast<std::size_t>(plane) * h * w;
    double* dst = q + static_cast<std::size_t>(plane) * 4 * h * w;
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j)
        dst[static_cast<std::size_t>(i) * 2 * w + j] = src[static_cast<std::size_t>(i / 2) * w + j / 2];
  }
  return make_op(std::move(out), {x},
                 [](const Var&, const Var& g) { return std::vector<Var>{sumpool2(g)}; });
}

Var sumpool2(const Var& x) {
  require_rank(x, 4, "sumpool2");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h % 2 || w % 2) fail(ErrorCode::kInputShape, "sumpool2 needs even spatial dims");
  Tensor out(Shape{n, c, h / 2, w / 2});
  const double* p = x.value().data();
  double* q = out.data();
  for (int plane = 0; plane < n * c; ++plane) {
    const double* src = p + static_cast<std::size_t>(plane) * h * w;
    double* dst = q + static_cast<std::size_t>(plane) * (h / 2) * (w / 2);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        dst[static_cast<std::size_t>(i / 2) * (w / 2) + j / 2] += src[static_cast<std::size_t>(i) * w + j];
  }
  return make_op(std::move(out), {x},
                 [](const Var&, const Var& g) { return std::vector<Var>{upsample2(g)}; });
}

// ---- channel concat -----------------------------------------------------------

Var concat_channels(const Var& a, const Var& b) {
  const auto la = channel_layout(a.shape());
  const auto lb = channel_layout(b.shape());
  if (la.n != lb.n || la.inner != lb.inner) {
    fail(ErrorCode::kInputShape, "concat_channels: " + shape_str(a.shape()) + " and " +
                                     shape_str(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[1] = la.c + lb.c;
  Tensor out(out_shape);
  const std::size_t sa = static_cast<std::size_t>(la.c) * la.inner;
  const std::size_t sb = static_cast<std::size_t>(lb.c) * lb.inner;
  for (int i = 0; i < la.n; ++i) {
    std::copy_n(a.value().data() + i * sa, sa, out.data() + i * (sa + sb));
    std::copy_n(b.value().data() + i * sb, sb, out.data() + i * (sa + sb) + sa);
  }
  const int ca = la.c, cb = lb.c;
  return make_op(std::move(out), {a, b}, [ca, cb](const Var&, const Var& g) {
    return std::vector<Var>{slice_channels(g, 0, ca), slice_channels(g, ca, cb)};
  });
}

Var slice_channels(const Var& x, int start, int count) {
  const auto l = channel_layout(x.shape());
  if (start < 0 || count < 0 || start + count > l.c) {
    fail(ErrorCode::kInvalidArgument, "slice_channels out of range");
  }
  Shape out_shape = x.shape();
  out_shape[1] = count;
  Tensor out(out_shape);
  const std::size_t block = static_cast<std::size_t>(count) * l.inner;
  for (int i = 0; i < l.n; ++i)
    std::copy_n(x.value().data() + (static_cast<std::size_t>(i) * l.c + start) * l.inner, block,
                out.data() + i * block);
  const int total = l.c;
  return make_op(std::move(out), {x}, [start, total](const Var&, const Var& g) {
    return std::vector<Var>{pad_channels(g, start, total)};
  });
}

Var pad_channels(const Var& x, int start, int total) {
  const auto l = channel_layout(x.shape());
  if (start < 0 || start + l.c > total) fail(ErrorCode::kInvalidArgument, "pad_channels out of range");
  Shape out_shape = x.shape();
  out_shape[1] = total;
  Tensor out(out_shape);
  const std::size_t block = static_cast<std::size_t>(l.c) * l.inner;
  for (int i = 0; i < l.n; ++i)
    std::copy_n(x.value().data() + i * block, block,
                out.data() + (static_cast<std::size_t>(i) * total + start) * l.inner);
  const int count = l.c;
  return make_op(std::move(out), {x}, [start, count](const Var&, const Var& g) {
    return std::vector<Var>{slice_channels(g, start, count)};
  });
}

}  // namespace dfr
