// Copyright 2026 The Melformer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <limits>

#include "doctest.h"
#include "melformer/errors.hpp"
#include "melformer/gradsuite.hpp"
#include "test_util.hpp"

using namespace melformer;
using melformer::test::random_tensor;
using melformer::test::values;

namespace {

// Naive triple loop, written without the library kernel.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul matches the hand example and a naive oracle") {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  CHECK(values(matmul(a, b)) == std::vector<double>{19, 22, 43, 50});

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(6);
    const Tensor x = random_tensor({m, k}, rng), y = random_tensor({k, n}, rng);
    const auto want = naive_matmul(values(x), values(y), m, k, n);
    CHECK(test::max_abs_diff(values(matmul(x, y)), want) < 1e-12);
  }
}

TEST_CASE("matmul identity and zero") {
  Rng rng(3);
  const Tensor a = random_tensor({3, 4}, rng);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  CHECK(values(matmul(a, Tensor::from({4, 4}, eye))) == values(a));
  for (double v : values(matmul(a, Tensor::zeros({4, 2})))) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2") != std::string::npos);
    CHECK(msg.find("3") != std::string::npos);
    CHECK(msg.find("4") != std::string::npos);
    CHECK(msg.find("5") != std::string::npos);
  }
}

TEST_CASE("softmax values") {
  CHECK(values(softmax(Tensor::from({1, 2}, {0, 0}))) == std::vector<double>{0.5, 0.5});
  const auto p = values(softmax(Tensor::from({1, 3}, {1, 2, 3})));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(std::exp(i + 1.0) / z).epsilon(1e-12));
  CHECK(p[0] == doctest::Approx(0.0900).epsilon(1e-3));
  CHECK(p[1] == doctest::Approx(0.2447).epsilon(1e-3));
  CHECK(p[2] == doctest::Approx(0.6652).epsilon(1e-3));
}

TEST_CASE("softmax is shift invariant and rejects NaN") {
  Rng rng(5);
  const Tensor x = random_tensor({3, 5}, rng);
  auto shifted = values(x);
  for (double& v : shifted) v += 17.25;
  CHECK(test::max_abs_diff(values(softmax(x)), values(softmax(Tensor::from({3, 5}, shifted)))) < 1e-14);
  CHECK_THROWS_AS(softmax(Tensor::from({1, 2}, {0.0, std::nan("")})), NumericError);
}

TEST_CASE("masked softmax gives masked keys zero weight") {
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const auto p = values(masked_softmax(Tensor::from({1, 3}, {1, 50, 1}), mask));
  CHECK(p[1] == 0.0);
  CHECK(p[0] == doctest::Approx(0.5));
  const std::vector<std::uint8_t> none{0, 0};
  CHECK_THROWS_AS(masked_softmax(Tensor::from({1, 2}, {1, 2}), none), ContractError);
}

TEST_CASE("layer_norm values") {
  const Tensor g = Tensor::full({3}, 1.0), b = Tensor::zeros({3});
  const auto y = values(layer_norm(Tensor::from({1, 3}, {1, 2, 3}), g, b, 1e-5));
  const double sd = std::sqrt(2.0 / 3.0 + 1e-5);
  CHECK(y[0] == doctest::Approx(-1.0 / sd).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(0.0));
  CHECK(y[2] == doctest::Approx(1.0 / sd).epsilon(1e-12));
  CHECK(y[2] == doctest::Approx(1.2247).epsilon(1e-3));
  for (double v : values(layer_norm(Tensor::from({1, 3}, {4, 4, 4}), g, b))) CHECK(v == 0.0);

  const Tensor shift = Tensor::from({3}, {0.5, 1.0, 1.5});
  const auto z = values(layer_norm(Tensor::from({1, 3}, {7, -2, 3}), g, shift));
  CHECK((z[0] + z[1] + z[2]) / 3.0 == doctest::Approx(1.0));
}

TEST_CASE("conv1d cross-correlation") {
  const Tensor x = Tensor::from({4, 1}, {1, 2, 3, 4});
  CHECK(values(conv1d(x, Tensor::from({2, 1, 1}, {1, -1}), Padding::Valid)) == std::vector<double>{-1, -1, -1});
  CHECK(values(conv1d(x, Tensor::from({2, 1, 1}, {1, 1}), Padding::Valid)) == std::vector<double>{3, 5, 7});
  CHECK(conv1d(x, Tensor::from({3, 1, 1}, {1, 1, 1}), Padding::Same).shape() == Shape{4, 1});
  CHECK_THROWS_AS(conv1d(x, Tensor::zeros({5, 1, 1}), Padding::Valid), DimensionError);

  // Width 1 is a per-step channel mix.
  Rng rng(2);
  const Tensor seq = random_tensor({5, 3}, rng), k = random_tensor({1, 3, 4}, rng);
  const Tensor mix = reshape(k, {3, 4});
  CHECK(test::max_abs_diff(values(conv1d(seq, k, Padding::Valid)), values(matmul(seq, mix))) < 1e-12);
}

TEST_CASE("max_pool_time") {
  CHECK(values(max_pool_time(Tensor::from({2, 2}, {1, 3, 2, 0}))) == std::vector<double>{2, 3});
  CHECK(values(max_pool_time(Tensor::from({1, 3}, {4, -1, 2}))) == std::vector<double>{4, -1, 2});

  // Ties route the gradient to the first occurrence only.
  const Tensor x = Tensor::from({3, 1}, {5, 5, 1}, true);
  sum(max_pool_time(x)).backward();
  CHECK(values(Tensor::from({3}, {x.grad().begin(), x.grad().end()})) == std::vector<double>{1, 0, 0});
}

TEST_CASE("pointwise functions") {
  CHECK(values(relu(Tensor::from({2}, {-1, 2}))) == std::vector<double>{0, 2});
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(sigmoid(Tensor::scalar(2.0)).item() == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-14));
  CHECK(sigmoid(Tensor::scalar(2.0)).item() == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(tanh(Tensor::scalar(0.3)).item() == doctest::Approx(std::tanh(0.3)));
}

TEST_CASE("cross entropy") {
  const std::vector<std::size_t> zero{0};
  CHECK(cross_entropy(Tensor::zeros({1, 4}), zero).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const double e2 = std::exp(2.0);
  const double want = -std::log(e2 / (e2 + 3.0));
  CHECK(cross_entropy(Tensor::from({1, 4}, {2, 0, 0, 0}), zero).item() == doctest::Approx(want).epsilon(1e-12));
  CHECK(want == doctest::Approx(0.3408).epsilon(1e-3));
  CHECK(cross_entropy(Tensor::from({1, 4}, {60, 0, 0, 0}), zero).item() < 1e-20);

  // Mean reduction over the batch.
  const std::vector<std::size_t> two{0, 1};
  CHECK(cross_entropy(Tensor::from({2, 4}, {2, 0, 0, 0, 0, 0, 0, 0}), two).item() ==
        doctest::Approx((want + std::log(4.0)) / 2.0));

  const std::vector<std::size_t> bad{4};
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 4}), bad), ValidationError);
}

TEST_CASE("backward basics") {
  const Tensor x = Tensor::from({3}, {1, -2, 5}, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  const Tensor y = Tensor::from({1, 1}, {3.0}, true);
  matmul(y, y).backward();
  CHECK(y.grad()[0] == 6.0);

  CHECK_THROWS_AS(Tensor::from({2}, {1, 2}, true).backward(), ContractError);
}

TEST_CASE("fan-out accumulates both contributions") {
  Rng rng(9);
  Tensor x = random_tensor({3, 3}, rng, 1.0, true);
  const auto f = [](const Tensor& t) { return sum(mul(tanh(t), matmul(t, t))); };
  CHECK(gradcheck(f, x) < 1e-6);

  Tensor z = Tensor::from({2}, {0.5, -1.5}, true);
  sum(add(z, scale(z, 2.0))).backward();
  CHECK(z.grad()[0] == 3.0);
  CHECK(z.grad()[1] == 3.0);
}

TEST_CASE("gradcheck accuracy on simple functions") {
  Rng rng(4);
  const Tensor w = random_tensor({4, 2}, rng);
  const auto linear = [&](const Tensor& t) { return sum(matmul(t, w)); };
  CHECK(gradcheck(linear, random_tensor({3, 4}, rng, 1.0, true)) < 1e-9);

  const std::vector<std::size_t> labels{1, 0, 3};
  const auto composite = [&](const Tensor& t) { return cross_entropy(t, labels); };
  CHECK(gradcheck(composite, random_tensor({3, 4}, rng, 1.0, true)) < 1e-6);
}

TEST_CASE("no-grad guard builds leaf results") {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(scale(x, 2.0).requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(scale(x, 2.0).requires_grad());
}

TEST_CASE("every op passes gradcheck on randomized shapes") {
  GradSuiteOptions opt;
  opt.full_size_models = false;
  const auto report = run_gradient_suite(opt);
  for (const auto& e : report.entries) {
    INFO(e.name << " " << e.worst);
    CHECK(e.max_rel_error < 1e-4);
  }
  CHECK(report.passed());
}

TEST_SUITE("invariants") {
  TEST_CASE("softmax rows sum to one") {
    Rng rng(21);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(9);
      const Tensor p = softmax(random_tensor({r, c}, rng, 1.0 + 10.0 * rng.uniform()));
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          CHECK(p.at(i, j) >= 0.0);
          s += p.at(i, j);
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }

  TEST_CASE("layer_norm rows have zero mean and unit variance") {
    Rng rng(22);
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t d = 4 + rng.below(60);
      const Tensor y = layer_norm(random_tensor({3, d}, rng, 5.0), Tensor::full({d}, 1.0), Tensor::zeros({d}));
      for (std::size_t i = 0; i < 3; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += y.at(i, j);
        mean /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
        var /= static_cast<double>(d);
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-3);
      }
    }
  }
}
