#include "meta_attention/rng.hpp"
#include "meta_attention/tensor.hpp"

#include "grad_check.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

using namespace meta_attention;
using Catch::Approx;
using testing_support::check_gradients;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Weighted sum with fixed pseudo-random weights, so every output element
// receives a distinct upstream gradient.
Tensor probe(const Tensor& y) {
  std::vector<double> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.3 * static_cast<double>(i) + 0.7);
  return sum(y * Tensor::from(y.shape(), std::move(w)));
}

void expect_gradients(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double tol = 1e-5) {
  const auto rep = check_gradients(f, std::move(inputs));
  INFO(rep.worst);
  CHECK(rep.checked > 0);
  CHECK(rep.max_rel_err < tol);
}

}  // namespace

TEST_CASE("construction validates shapes") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), dimension_error);
  const auto t = Tensor::full({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 1.5);
  CHECK_THROWS_AS(t.at({2, 0}), dimension_error);
  CHECK_THROWS_AS(t.item(), contract_error);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
}

TEST_CASE("matmul small cases") {
  const auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const auto col = Tensor::from({2, 1}, {3, 4});
  const auto r = matmul(eye, col);
  CHECK(r.shape() == Shape{2, 1});
  CHECK(r.at({0, 0}) == 3.0);
  CHECK(r.at({1, 0}) == 4.0);
  CHECK(matmul(Tensor::from({1, 2}, {1, 2}), col).item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL("expected dimension_error");
  } catch (const dimension_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(4, 5)") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum equals ones times b transposed") {
  Rng rng(1);
  auto a = random_tensor({4, 5}, rng);
  auto b = random_tensor({5, 6}, rng);
  a.set_requires_grad(true);
  sum(matmul(a, b)).backward();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 5; ++k) {
      double expected = 0.0;
      for (std::size_t j = 0; j < 6; ++j) expected += b.at({k, j});
      CHECK(a.grad()[i * 5 + k] == Approx(expected).epsilon(1e-12));
    }
  const auto rep = check_gradients([&] { return sum(matmul(a, b)); }, {a, b});
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("batched matmul broadcasts leading axes") {
  Rng rng(2);
  auto a = random_tensor({2, 3, 4, 5}, rng);
  auto b = random_tensor({5, 2}, rng);
  const auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 3, 4, 2});
  double expected = 0.0;
  for (std::size_t k = 0; k < 5; ++k) expected += a.at({1, 2, 3, k}) * b.at({k, 1});
  CHECK(c.at({1, 2, 3, 1}) == Approx(expected).epsilon(1e-14));
  expect_gradients([&] { return probe(matmul(a, b)); }, {a, b});
  auto b3 = random_tensor({3, 5, 2}, rng);
  expect_gradients([&] { return probe(matmul(a, b3)); }, {a, b3});
}

TEST_CASE("softmax values and stability") {
  const auto u = softmax(Tensor::from({3}, {0, 0, 0}));
  for (double v : u.data()) CHECK(v == Approx(1.0 / 3.0).epsilon(1e-15));

  const auto s = softmax(Tensor::from({3}, {1, 2, 3}));
  CHECK(s.data()[0] == Approx(0.09003).margin(5e-6));
  CHECK(s.data()[1] == Approx(0.24473).margin(5e-6));
  CHECK(s.data()[2] == Approx(0.66524).margin(5e-6));

  const auto big = softmax(Tensor::from({2}, {1000, 0}));
  CHECK(big.data()[0] == 1.0);
  CHECK(big.data()[1] == 0.0);
  CHECK(all_finite(big));
}

TEST_CASE("softmax rows are non-negative and sum to one") {
  Rng rng(3);
  const auto x = random_tensor({4, 5, 7}, rng, -30.0, 30.0);
  for (long axis : {0L, 1L, 2L}) {
    const auto y = softmax(x, axis);
    const auto total = sum(y, axis);
    for (double v : y.data()) CHECK(v >= 0.0);
    for (double v : total.data()) CHECK(std::abs(v - 1.0) < 1e-12);
  }
}

TEST_CASE("layer_norm examples") {
  const auto gain = Tensor::full({2}, 1.0);
  const auto bias = Tensor::zeros({2});
  const auto y = layer_norm(Tensor::from({1, 2}, {1, 3}), gain, bias);
  // Population variance 1 plus the 1e-5 guard.
  CHECK(y.data()[0] == Approx(-1.0).margin(1e-5));
  CHECK(y.data()[1] == Approx(1.0).margin(1e-5));

  const auto flat = layer_norm(Tensor::full({3, 4}, 7.25), Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : flat.data()) CHECK(v == 0.0);
}

TEST_CASE("layer_norm normalises every position") {
  Rng rng(4);
  const auto x = random_tensor({3, 5, 16}, rng, -4.0, 9.0);
  const auto y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
  const auto m = mean(y, -1);
  const auto v = mean(square(y - mean(y, -1, true)), -1);
  for (double e : m.data()) CHECK(std::abs(e) < 1e-6);
  // Unit variance up to the epsilon inside the square root.
  for (double e : v.data()) CHECK(std::abs(e - 1.0) < 1e-3);
}

TEST_CASE("elementwise analytic values") {
  CHECK(softplus(Tensor::scalar(0.0)).item() == Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(elu_plus_one(Tensor::scalar(0.0)).item() == 1.0);
  const double ninf = -std::numeric_limits<double>::infinity();
  CHECK(elu_plus_one(Tensor::scalar(ninf)).item() == 0.0);
  CHECK(elu_plus_one(Tensor::scalar(-50.0)).item() > 0.0);
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  // Large inputs: no overflow, softplus(x) ~ x.
  CHECK(softplus(Tensor::scalar(800.0)).item() == Approx(800.0));
  // exp(-x) underflows below about -745; positivity holds down to there.
  CHECK(softplus(Tensor::scalar(-700.0)).item() > 0.0);
  for (double x : {-30.0, -3.0, -0.1, 0.0, 0.4, 5.0, 40.0}) {
    CHECK(softplus(Tensor::scalar(x)).item() > 0.0);
    CHECK(elu_plus_one(Tensor::scalar(x)).item() > 0.0);
  }
}

TEST_CASE("backward basics") {
  auto w = Tensor::from({2}, {1, 2}, true);
  sum(w * w).backward();
  CHECK(w.grad()[0] == 2.0);
  CHECK(w.grad()[1] == 4.0);

  auto z = Tensor::zeros({3}, true);
  sum(softplus(z)).backward();
  for (double g : z.grad()) CHECK(g == 0.5);

  auto x = Tensor::from({2}, {0.3, -1.2}, true);
  sum(x + x).backward();
  for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("backward accumulates across calls until zero_grad") {
  auto w = Tensor::from({2}, {1, 2}, true);
  sum(w * w).backward();
  sum(w * w).backward();
  CHECK(w.grad()[0] == 4.0);
  CHECK(w.grad()[1] == 8.0);
  w.zero_grad();
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("backward requires a scalar loss") {
  auto w = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS((w * w).backward(), contract_error);
}

TEST_CASE("shared subexpressions accumulate once per use") {
  auto x = Tensor::from({3}, {0.5, -0.25, 2.0}, true);
  const auto h = exp(x);
  sum(h * h + h).backward();  // d/dx (e^2x + e^x)
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x.data()[i];
    CHECK(x.grad()[i] == Approx(2.0 * std::exp(2.0 * v) + std::exp(v)).epsilon(1e-14));
  }
}

TEST_CASE("no-grad guard records no tape") {
  auto x = Tensor::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    const auto y = sum(x * x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(sum(x * x).requires_grad());
}

TEST_CASE("elementwise gradients match finite differences") {
  Rng rng(5);
  auto x = random_tensor({3, 4}, rng, -2.0, 2.0);
  auto pos = random_tensor({3, 4}, rng, 0.2, 3.0);
  expect_gradients([&] { return probe(exp(x)); }, {x});
  expect_gradients([&] { return probe(log(pos)); }, {pos});
  expect_gradients([&] { return probe(sqrt(pos)); }, {pos});
  expect_gradients([&] { return probe(square(x)); }, {x});
  expect_gradients([&] { return probe(softplus(x)); }, {x});
  expect_gradients([&] { return probe(gelu(x)); }, {x});
  expect_gradients([&] { return probe(elu_plus_one(x)); }, {x});
  expect_gradients([&] { return probe(-x * 3.0 + 1.5 - x / 4.0); }, {x});
  expect_gradients([&] { return probe(2.0 - x); }, {x});
  // Keep inputs away from the kink so the central difference is valid.
  auto away = random_tensor({3, 4}, rng, 0.1, 1.0);
  for (std::size_t i = 0; i < away.numel(); i += 2) away.mutable_data()[i] *= -1.0;
  expect_gradients([&] { return probe(clamp_min(away, 0.0)); }, {away});
}

TEST_CASE("binary op gradients with broadcasting") {
  Rng rng(6);
  auto a = random_tensor({2, 3, 4}, rng);
  auto same = random_tensor({2, 3, 4}, rng, 0.5, 2.0);
  auto row = random_tensor({4}, rng, 0.5, 2.0);
  auto tile = random_tensor({3, 4}, rng, 0.5, 2.0);
  auto col = random_tensor({2, 3, 1}, rng, 0.5, 2.0);
  auto mid = random_tensor({2, 1, 4}, rng, 0.5, 2.0);
  for (auto* b : {&same, &row, &tile, &col, &mid}) {
    auto& other = *b;
    expect_gradients([&] { return probe(a + other); }, {a, other});
    expect_gradients([&] { return probe(a - other); }, {a, other});
    expect_gradients([&] { return probe(a * other); }, {a, other});
    expect_gradients([&] { return probe(a / other); }, {a, other});
    expect_gradients([&] { return probe(other - a); }, {a, other});
  }
}

TEST_CASE("trailing-tile broadcast matches the general path") {
  Rng rng(7);
  const auto a = random_tensor({5, 3, 4}, rng);
  const auto bias = random_tensor({1, 3, 4}, rng);
  const auto y = a + bias;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) CHECK(y.at({i, j, k}) == a.at({i, j, k}) + bias.at({0, j, k}));
  CHECK_THROWS_AS(a + random_tensor({2, 4}, rng), dimension_error);
}

TEST_CASE("reduction gradients") {
  Rng rng(8);
  auto x = random_tensor({2, 3, 4}, rng);
  expect_gradients([&] { return sum(x * x); }, {x});
  expect_gradients([&] { return mean(x * x); }, {x});
  for (long axis : {0L, 1L, 2L, -1L}) {
    expect_gradients([&] { return probe(sum(x, axis)); }, {x});
    expect_gradients([&] { return probe(mean(x, axis, true)); }, {x});
    expect_gradients([&] { return probe(cumsum(x, axis)); }, {x});
    expect_gradients([&] { return probe(softmax(x, axis)); }, {x});
  }
}

TEST_CASE("cumsum values") {
  const auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto c = cumsum(x, 1);
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{1, 3, 6, 4, 9, 15});
  const auto r = cumsum(x, 0);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{1, 2, 3, 5, 7, 9});
}

TEST_CASE("layer_norm gradient") {
  Rng rng(9);
  auto x = random_tensor({2, 3, 6}, rng, -2.0, 2.0);
  auto g = random_tensor({6}, rng, 0.5, 1.5);
  auto b = random_tensor({6}, rng);
  expect_gradients([&] { return probe(layer_norm(x, g, b)); }, {x, g, b});
}

TEST_CASE("structural op values") {
  const auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto t = transpose(x);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at({2, 1}) == 6.0);
  const auto r = reshape(x, {3, 2});
  CHECK(r.at({1, 0}) == 3.0);
  CHECK_THROWS_AS(reshape(x, {4, 2}), dimension_error);
  const auto s = slice(x, 1, 1, 3);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.at({1, 0}) == 5.0);
  const auto c = concat({x, s}, 1);
  CHECK(c.shape() == Shape{2, 5});
  CHECK(c.at({1, 4}) == 6.0);
  const auto p = permute(Tensor::from({1, 2, 3}, {1, 2, 3, 4, 5, 6}), {2, 0, 1});
  CHECK(p.shape() == Shape{3, 1, 2});
  CHECK(p.at({2, 0, 1}) == 6.0);
}

TEST_CASE("structural op gradients") {
  Rng rng(10);
  auto x = random_tensor({2, 3, 4}, rng);
  auto y = random_tensor({2, 3, 2}, rng);
  expect_gradients([&] { return probe(transpose(x)); }, {x});
  expect_gradients([&] { return probe(transpose(x, 0, 2)); }, {x});
  expect_gradients([&] { return probe(reshape(x, {4, 6})); }, {x});
  expect_gradients([&] { return probe(permute(x, {1, 2, 0})); }, {x});
  expect_gradients([&] { return probe(slice(x, 2, 1, 3)); }, {x});
  expect_gradients([&] { return probe(slice(x, 0, 1, 2)); }, {x});
  expect_gradients([&] { return probe(concat({x, y, x}, -1)); }, {x, y});
}

TEST_CASE("causal mask and masked softmax") {
  Rng rng(11);
  auto s = random_tensor({2, 4, 4}, rng);
  const auto p = softmax(causal_mask(s), -1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j) CHECK(p.at({b, i, j}) == 0.0);
  expect_gradients([&] { return probe(softmax(causal_mask(s), -1)); }, {s});
  CHECK_THROWS_AS(causal_mask(Tensor::zeros({2, 3})), dimension_error);
}

TEST_CASE("cross entropy") {
  const std::vector<int> targets{0, 2};
  const auto uniform = cross_entropy(Tensor::zeros({2, 4}), targets);
  CHECK(uniform.item() == Approx(std::log(4.0)).epsilon(1e-15));
  Rng rng(12);
  auto logits = random_tensor({2, 3, 5}, rng, -3.0, 3.0);
  const std::vector<int> t6{0, 4, 2, 1, 3, 3};
  expect_gradients([&] { return cross_entropy(logits, t6); }, {logits});
  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{0, 1}), dimension_error);
  CHECK_THROWS(cross_entropy(logits, std::vector<int>{0, 1, 2, 3, 4, 5}));
}

TEST_CASE("gather rows") {
  auto table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::vector<int> idx{2, 0, 2};
  const auto g = gather_rows(table, idx, {3});
  CHECK(g.shape() == Shape{3, 2});
  CHECK(g.at({0, 1}) == 6.0);
  CHECK(g.at({1, 0}) == 1.0);
  expect_gradients([&] { return probe(gather_rows(table, idx, {1, 3})); }, {table});
  CHECK_THROWS_AS(gather_rows(table, std::vector<int>{3}, {1}), input_error);
}

TEST_CASE("all_finite") {
  CHECK(all_finite(Tensor::from({2}, {1, 2})));
  CHECK_FALSE(all_finite(Tensor::from({2}, {1, std::nan("")})));
  CHECK_FALSE(all_finite(Tensor::from({2}, {1, std::numeric_limits<double>::infinity()})));
}
