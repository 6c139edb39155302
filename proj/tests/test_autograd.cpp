#include <doctest.h>

#include <functional>
#include <random>

#include "autograd.hpp"
#include "errors.hpp"
#include "fd_oracle.hpp"

using namespace dfr;
using dfr::testing::central_difference;
using dfr::testing::rel_error;

namespace {

using ScalarFn = std::function<Var(std::vector<Var>&)>;

Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  const auto n = shape_size(s);
  return Tensor(std::move(s), dfr::testing::random_vector(n, rng, lo, hi));
}

// Compares grad() against central differences for every coordinate of every input.
void check_gradients(const ScalarFn& fn, std::vector<Tensor> inputs, double tol = 1e-6) {
  std::vector<Var> vars;
  for (auto& t : inputs) vars.emplace_back(t, true);
  const Var out = fn(vars);
  const auto g = grad(out, vars);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto eval = [&](const std::vector<double>& x) {
      std::vector<Var> v;
      for (std::size_t j = 0; j < inputs.size(); ++j)
        v.emplace_back(j == k ? Tensor(inputs[j].shape(), x) : inputs[j]);
      return fn(v).value().item();
    };
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double fd = central_difference(eval, inputs[k].vec(), i, 1e-5);
      const double an = g[k].value()[i];
      INFO("input " << k << " coord " << i << " analytic " << an << " fd " << fd);
      CHECK(std::abs(an - fd) <= tol * std::max(1.0, std::abs(fd)));
    }
  }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  std::mt19937_64 rng(1);
  const Shape s{2, 3};
  check_gradients([](auto& v) { return sum(mul(add(v[0], v[1]), sub(v[0], v[1]))); },
                  {random_tensor(s, rng), random_tensor(s, rng)});
  check_gradients([](auto& v) { return sum(mul(sigmoid(v[0]), tanh(v[1]))); },
                  {random_tensor(s, rng), random_tensor(s, rng)});
  check_gradients([](auto& v) { return sum(exp(scale(add_scalar(v[0], 0.3), 0.7))); },
                  {random_tensor(s, rng)});
  // Keep away from the kink at zero.
  check_gradients([](auto& v) { return sum(square(relu(v[0]))); }, {random_tensor(s, rng, 0.1, 1.0)});
  check_gradients([](auto& v) { return sum(square(leaky_relu(v[0], 0.2))); }, {random_tensor(s, rng, -1.0, -0.1)});
  check_gradients([](auto& v) { return sum(mul(rsqrt(v[0], 1e-3), v[1])); },
                  {random_tensor(s, rng, 0.2, 2.0), random_tensor(s, rng)});
  const Tensor t(Shape{3}, std::vector<double>{-2.0, 0.0, 3.0});
  const auto lr = leaky_relu(Var(t, false), 0.2).value();
  CHECK(lr[0] == -0.4);
  CHECK(lr[1] == 0.0);
  CHECK(lr[2] == 3.0);
  CHECK(rsqrt(Var(Tensor(Shape{1}, std::vector<double>{3.99}), false), 0.01).value()[0] == doctest::Approx(0.5));
}

TEST_CASE("row reductions and pick") {
  std::mt19937_64 rng(2);
  check_gradients(
      [](auto& v) { return sum(mul(logsumexp_rows(v[0]), pick(v[0], {1, 0, 1}))); },
      {random_tensor({3, 2}, rng, -3, 3)});
  check_gradients([](auto& v) { return sum(square(broadcast_cols(sum_cols(v[0]), 4))); },
                  {random_tensor({2, 3}, rng)});
}

TEST_CASE("matmul, transpose, reshape") {
  std::mt19937_64 rng(3);
  check_gradients([](auto& v) { return sum(square(matmul(v[0], transpose(v[1])))); },
                  {random_tensor({2, 3}, rng), random_tensor({4, 3}, rng)});
  check_gradients([](auto& v) { return sum(square(reshape(v[0], {3, 2}))); },
                  {random_tensor({2, 3}, rng)});
}

TEST_CASE("convolution family, first order") {
  std::mt19937_64 rng(4);
  for (ConvGeom geom : {ConvGeom{1, 1}, ConvGeom{2, 1}, ConvGeom{1, 0}}) {
    check_gradients([geom](auto& v) { return sum(square(conv2d(v[0], v[1], geom))); },
                    {random_tensor({2, 2, 5, 6}, rng), random_tensor({3, 2, 3, 3}, rng)});
  }
  const ConvGeom geom{2, 1};
  const Shape xs{1, 2, 6, 5};
  const Shape ws{3, 2, 3, 3};
  // conv2d output is [1,3,3,3] for this geometry.
  check_gradients([&](auto& v) { return sum(square(conv2d_input_grad(v[0], v[1], geom, xs))); },
                  {random_tensor({1, 3, 3, 3}, rng), random_tensor(ws, rng)});
  check_gradients([&](auto& v) { return sum(square(conv2d_weight_grad(v[0], v[1], geom, ws))); },
                  {random_tensor(xs, rng), random_tensor({1, 3, 3, 3}, rng)});
}

TEST_CASE("pooling, resampling, channel ops") {
  std::mt19937_64 rng(5);
  check_gradients([](auto& v) { return sum(square(maxpool2(v[0]))); }, {random_tensor({1, 2, 4, 4}, rng)});
  check_gradients([](auto& v) { return sum(square(upsample2(v[0]))); }, {random_tensor({1, 2, 2, 3}, rng)});
  check_gradients([](auto& v) { return sum(square(sumpool2(v[0]))); }, {random_tensor({1, 1, 4, 2}, rng)});
  check_gradients([](auto& v) { return sum(square(spatial_broadcast(spatial_sum(v[0]), 2, 2))); },
                  {random_tensor({2, 2, 3, 3}, rng)});
  check_gradients([](auto& v) { return sum(mul(concat_channels(v[0], v[1]), concat_channels(v[1], v[0]))); },
                  {random_tensor({2, 1, 2, 2}, rng), random_tensor({2, 1, 2, 2}, rng)});
  check_gradients([](auto& v) { return sum(square(bias_add(v[0], v[1]))); },
                  {random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng)});
}

TEST_CASE("second order: gradient of a squared input-gradient norm") {
  // Penalty-style objective: P(w) = sum (d/dx sum(tanh(conv(x, w))^2))^2.
  std::mt19937_64 rng(6);
  const Tensor x0 = random_tensor({1, 2, 5, 5}, rng);
  auto penalty = [&](std::vector<Var>& v) {
    Var x(x0, true);
    Var y = sum(square(tanh(conv2d(x, v[0], {1, 1}))));
    const Var xs[1] = {x};
    Var gx = grad(y, xs, /*create_graph=*/true)[0];
    return sum(square(gx));
  };
  check_gradients(penalty, {random_tensor({2, 2, 3, 3}, rng, -0.5, 0.5)}, 1e-5);
}

TEST_CASE("second order through relu, maxpool and dense layers") {
  std::mt19937_64 rng(7);
  const Tensor x0 = random_tensor({2, 1, 4, 4}, rng);
  auto penalty = [&](std::vector<Var>& v) {
    Var x(x0, true);
    Var h = maxpool2(relu(conv2d(x, v[0], {1, 1})));
    h = reshape(h, {2, 8});
    Var z = matmul(h, v[1]);
    const Var xs[1] = {x};
    Var gx = grad(sum(pick(z, {0, 0})), xs, true)[0];
    return sum(square(gx));
  };
  check_gradients(penalty, {random_tensor({2, 1, 3, 3}, rng), random_tensor({8, 2}, rng)}, 1e-5);
}

TEST_CASE("grad of unrelated input is zero and no-grad mode records nothing") {
  Var a(Tensor({2}, 1.0), true);
  Var b(Tensor({2}, 2.0), true);
  const Var inputs[2] = {a, b};
  auto g = grad(sum(square(a)), inputs);
  CHECK(g[1].value()[0] == 0.0);
  CHECK(g[0].value()[0] == doctest::Approx(2.0));
  NoGradGuard ng;
  CHECK_FALSE(mul(a, b).requires_grad());
}

TEST_CASE("shape errors are reported") {
  Var a(Tensor({2}, 1.0));
  Var b(Tensor({3}, 1.0));
  CHECK_THROWS_AS(add(a, b), Error);
  CHECK_THROWS_AS(matmul(Var(Tensor({2, 3})), Var(Tensor({2, 3}))), Error);
}
