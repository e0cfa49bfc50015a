#include <doctest.h>

#include <cmath>
#include <random>

#include "dnln/nonlocal.hpp"
#include "oracles.hpp"

using namespace dnln;

namespace {

NonLocalWeights random_weights(std::size_t c, std::size_t e, std::mt19937_64& rng) {
  return NonLocalWeights{oracle::random_kernel(e, c, 1, 1, rng), oracle::random_kernel(e, c, 1, 1, rng),
                         oracle::random_kernel(e, c, 1, 1, rng), oracle::random_kernel(c, e, 1, 1, rng)};
}

void zero(ConvKernel& k) {
  for (auto& v : k.weight.mutable_data()) v = 0.0;
  for (auto& v : k.bias.mutable_data()) v = 0.0;
}

}  // namespace

TEST_SUITE("nonlocal") {

TEST_CASE("a single position attends to itself with weight one") {
  std::mt19937_64 rng(1);
  NonLocalWeights w = random_weights(4, 2, rng);
  Tensor x = oracle::random_tensor({4, 1, 1}, rng), y = oracle::random_tensor({4, 1, 1}, rng);
  CHECK(attention_matrix(x, y, w).item() == 1.0);
  Tensor z = nonlocal_forward(x, y, w);
  const auto g = oracle::project(w.g, y, 0);
  for (std::size_t c = 0; c < 4; ++c) {
    double e = x.at(c, 0, 0) + w.z.bias.at(c);
    for (std::size_t k = 0; k < 2; ++k) e += w.z.weight.at(c, k, 0, 0) * g[k];
    CHECK(std::abs(z.at(c, 0, 0) - e) <= 1e-12);
  }
}

TEST_CASE("zero query projection gives uniform attention") {
  std::mt19937_64 rng(2);
  NonLocalWeights w = random_weights(4, 2, rng);
  zero(w.u);
  Tensor x = oracle::random_tensor({4, 3, 2}, rng), y = oracle::random_tensor({4, 3, 2}, rng);
  Tensor a = attention_matrix(x, y, w);
  for (double v : a.data()) CHECK(std::abs(v - 1.0 / 6.0) <= 1e-15);
  std::vector<double> gm(2, 0.0);
  for (std::size_t n = 0; n < 6; ++n) {
    const auto g = oracle::project(w.g, y, n);
    for (std::size_t k = 0; k < 2; ++k) gm[k] += g[k] / 6.0;
  }
  Tensor z = nonlocal_forward(x, y, w);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 6; ++p) {
      double e = x.data()[c * 6 + p] + w.z.bias.at(c);
      for (std::size_t k = 0; k < 2; ++k) e += w.z.weight.at(c, k, 0, 0) * gm[k];
      CHECK(std::abs(z.data()[c * 6 + p] - e) <= 1e-12);
    }
}

TEST_CASE("matches the pairwise oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t h = seed % 2 ? 2 : 3, w = seed % 3 ? 2 : 4;
    NonLocalWeights nw = random_weights(4, 2, rng);
    Tensor x = oracle::random_tensor({4, h, w}, rng), y = oracle::random_tensor({4, h, w}, rng);
    CHECK(oracle::max_abs_diff(nonlocal_forward(x, y, nw), oracle::nonlocal(x, y, nw)) <= 1e-10);
  }
}

TEST_CASE("attention rows sum to one") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    NonLocalWeights w = random_weights(6, 3, rng);
    Tensor x = oracle::random_tensor({6, 4, 5}, rng, -3, 3), y = oracle::random_tensor({6, 4, 5}, rng, -3, 3);
    Tensor a = attention_matrix(x, y, w);
    REQUIRE(a.shape() == Shape{20, 20});
    for (std::size_t p = 0; p < 20; ++p) {
      double s = 0;
      for (std::size_t n = 0; n < 20; ++n) s += a.at(p, n);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("zero output projection makes the block the identity") {
  std::mt19937_64 rng(3);
  NonLocalWeights w = random_weights(4, 2, rng);
  zero(w.z);
  Tensor x = oracle::random_tensor({4, 3, 3}, rng), y = oracle::random_tensor({4, 3, 3}, rng);
  Tensor z = nonlocal_forward(x, y, w);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(z.data()[i] == x.data()[i]);
}

TEST_CASE("attention is invariant to a constant shift of the key embeddings") {
  std::mt19937_64 rng(4);
  NonLocalWeights w = random_weights(4, 2, rng);
  Tensor x = oracle::random_tensor({4, 3, 3}, rng), y = oracle::random_tensor({4, 3, 3}, rng);
  Tensor a = attention_matrix(x, y, w);
  NonLocalWeights shifted = w;
  shifted.v.bias = Tensor({2}, std::vector<double>{w.v.bias.at(0) + 0.8, w.v.bias.at(1) - 1.3});
  CHECK(oracle::max_abs_diff(attention_matrix(x, y, shifted), a) <= 1e-12);
}

TEST_CASE("output shape and gradient reach every input") {
  std::mt19937_64 rng(5);
  NonLocalWeights w = random_weights(4, 2, rng);
  Tensor x = oracle::random_tensor({4, 2, 3}, rng), y = oracle::random_tensor({4, 2, 3}, rng);
  std::vector<Tensor> leaves{x, y, w.u.weight, w.v.weight, w.g.weight, w.z.weight, w.z.bias, w.g.bias, w.u.bias};
  for (auto& l : leaves) l.set_requires_grad();
  Tensor z = nonlocal_forward(x, y, w);
  CHECK(z.shape() == x.shape());
  Tensor r = oracle::random_tensor(z.shape(), rng);
  sum(mul(z, r)).backward();
  for (auto& l : leaves) {
    double m = 0;
    for (double g : l.grad()) m = std::max(m, std::abs(g));
    CHECK(m > 0.0);
  }
}

TEST_CASE("shape mismatch is rejected") {
  std::mt19937_64 rng(6);
  NonLocalWeights w = random_weights(4, 2, rng);
  CHECK_THROWS_AS(nonlocal_forward(Tensor({4, 2, 2}), Tensor({4, 2, 3}), w), std::invalid_argument);
  CHECK_THROWS_AS(nonlocal_forward(Tensor({3, 2, 2}), Tensor({3, 2, 2}), w), std::invalid_argument);
}

}
