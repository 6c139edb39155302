#pragma once

// Reverse-mode automatic differentiation over Tensors.
//
// Every backward rule is written in terms of the differentiable ops below, so
// running grad() with create_graph=true records the backward pass itself and
// the result can be differentiated again (needed for input-gradient penalties).

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace dfr {

class Var;
struct Node;

using BackwardFn = std::function<std::vector<Var>(const Var& self, const Var& grad)>;

class Var {
 public:
  Var() = default;
  // Leaf variable. Parameters are leaves with requires_grad = true.
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  const Var& parent(std::size_t i) const;
  Node* node() const { return node_.get(); }

  // Drops any graph history, returning a leaf holding the same value.
  Var detached(bool requires_grad = false) const { return Var(value(), requires_grad); }

 private:
  friend Var make_op(Tensor, std::vector<Var>, BackwardFn);
  std::shared_ptr<Node> node_;
};

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> parents;
  BackwardFn backward;
};

// Thread-local switch controlling whether ops record graph history.
class GradMode {
 public:
  static bool enabled();
  static void set(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Builds an op node. When grad mode is off or no parent requires grad the
// result is a plain constant.
Var make_op(Tensor value, std::vector<Var> parents, BackwardFn backward);

// Gradients of a scalar `output` with respect to `inputs`. Inputs that do not
// influence the output receive zero tensors. With create_graph the returned
// gradients are themselves differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false);

Var constant(Tensor value);
Var zeros_like(const Var& v);

// ---- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var square(const Var& a);
Var rsqrt(const Var& a, double eps);  // (a + eps)^(-1/2)

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// ---- reductions and broadcasts ---------------------------------------------
Var sum(const Var& a);                                  // -> shape {}
Var broadcast_scalar(const Var& s, const Shape& shape);  // {} -> shape
Var sum_cols(const Var& a);                             // [N,K] -> [N]
Var broadcast_cols(const Var& v, int k);                // [N] -> [N,K]
Var logsumexp_rows(const Var& a);                       // [N,K] -> [N]
Var pick(const Var& a, std::vector<int> cols);          // [N,K] -> [N], a[n, cols[n]]
Var place(const Var& v, std::vector<int> cols, int k);  // adjoint of pick
Var channel_sum(const Var& a);                          // [N,C,...] -> [C]
Var channel_broadcast(const Var& b, const Shape& shape);
Var bias_add(const Var& x, const Var& b);
Var spatial_sum(const Var& a);                          // [N,C,H,W] -> [N,C]
Var spatial_broadcast(const Var& a, int h, int w);      // [N,C] -> [N,C,H,W]

// ---- linear algebra --------------------------------------------------------
Var matmul(const Var& a, const Var& b);  // [M,K] x [K,N]
Var transpose(const Var& a);             // 2-D
Var reshape(const Var& a, Shape shape);

// ---- convolution and resampling (NCHW) -------------------------------------
struct ConvGeom {
  int stride = 1;
  int pad = 0;
};

Var conv2d(const Var& x, const Var& w, ConvGeom geom);
Var conv2d_input_grad(const Var& g, const Var& w, ConvGeom geom, const Shape& x_shape);
Var conv2d_weight_grad(const Var& x, const Var& g, ConvGeom geom, const Shape& w_shape);

Var maxpool2(const Var& x);
Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape);
Var scatter(const Var& g, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape);
Var upsample2(const Var& x);  // nearest
Var sumpool2(const Var& x);   // adjoint of upsample2

Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& x, int start, int count);
Var pad_channels(const Var& x, int start, int total);

}  // namespace dfr
