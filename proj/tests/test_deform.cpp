#include <doctest.h>

#include <cmath>
#include <random>

#include "dnln/deform.hpp"
#include "dnln/model.hpp"
#include "oracles.hpp"

using namespace dnln;

namespace {

ConvKernel zero_kernel(std::size_t cout, std::size_t cin, std::size_t k, std::size_t d = 1) {
  return ConvKernel{Tensor({cout, cin, k, k}, 0.0), Tensor({cout}, 0.0), d};
}

ConvKernel identity_kernel(std::size_t c) {
  ConvKernel k = zero_kernel(c, c, 3);
  for (std::size_t i = 0; i < c; ++i) k.weight.mutable_data()[k.weight.offset({i, i, 1, 1})] = 1.0;
  return k;
}

HffbParams random_hffb(std::size_t c, std::size_t width, std::mt19937_64& rng) {
  HffbParams p;
  for (std::size_t r = 1; r <= kHffbBranches; ++r) p.branches.push_back(oracle::random_kernel(width, c, 3, r, rng));
  p.fuse = oracle::random_kernel(c, width * kHffbBranches, 1, 1, rng);
  return p;
}

AlignStage make_stage(std::size_t c, std::size_t a, std::size_t b, bool hffb, bool zero_head, std::mt19937_64& rng) {
  AlignStage s;
  s.reduce = oracle::random_kernel(a, 2 * c, 3, 1, rng);
  if (hffb) s.hffb = random_hffb(a, b, rng);
  else s.plain = oracle::random_kernel(a, a, 3, 1, rng);
  s.head = zero_head ? zero_kernel(27, a, 3) : oracle::random_kernel(27, a, 3, 1, rng);
  s.deform = oracle::random_kernel(c, c, 3, 1, rng);
  return s;
}

SamplingField field(std::size_t k, std::size_t h, std::size_t w, double dy, double dx, double m) {
  SamplingField f{Tensor({2 * k, h, w}), Tensor({k, h, w}, m)};
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t i = 0; i < h * w; ++i) {
      f.offsets.mutable_data()[(2 * t) * h * w + i] = dy;
      f.offsets.mutable_data()[(2 * t + 1) * h * w + i] = dx;
    }
  return f;
}

Tensor bilinear_at(const Tensor& feat, double y, double x) {
  return bilinear_sample(feat, Tensor({2}, std::vector<double>{y, x}));
}

}  // namespace

TEST_SUITE("deform") {

TEST_CASE("bilinear: grid points, midpoint, far outside") {
  Tensor m({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(bilinear_at(m, 0.5, 0.5).item() == 2.5);
  CHECK(bilinear_at(m, 1, 0).item() == 3.0);
  CHECK(bilinear_at(m, 0, 1).item() == 2.0);
  CHECK(bilinear_at(m, -1.0, 0.5).item() == 0.0);
  CHECK(bilinear_at(m, 0.5, 2.0).item() == 0.0);
  CHECK(bilinear_at(m, 5.0, -7.0).item() == 0.0);
  CHECK_THROWS_AS(bilinear_at(m, NAN, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(bilinear_at(m, 0.0, INFINITY), std::invalid_argument);
}

TEST_CASE("bilinear matches the tent-kernel oracle including the border band") {
  std::mt19937_64 rng(3);
  Tensor f = oracle::random_tensor({2, 4, 5}, rng);
  std::uniform_real_distribution<double> u(-1.5, 5.5);
  for (int i = 0; i < 200; ++i) {
    const double y = u(rng), x = u(rng);
    Tensor s = bilinear_at(f, y, x);
    for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(s.at(c) - oracle::bilinear(f, c, y, x)) <= 1e-12);
  }
}

TEST_CASE("deform_conv with zero offsets and unit modulation equals conv2d") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = oracle::random_tensor({3, 5, 6}, rng);
    ConvKernel k = oracle::random_kernel(2, 3, 3, 1 + seed % 3, rng);
    CHECK(oracle::max_abs_diff(deform_conv(x, field(9, 5, 6, 0, 0, 1), k), conv2d(x, k)) <= 1e-12);
  }
}

TEST_CASE("deform_conv with a constant integer offset equals conv2d of the shifted input") {
  std::mt19937_64 rng(11);
  const std::size_t H = 7, W = 8;
  Tensor x = oracle::random_tensor({2, H, W}, rng);
  Tensor shifted({2, H, W});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t j = 0; j + 1 < W; ++j) shifted.mutable_data()[(c * H + y) * W + j] = x.at(c, y, j + 1);
  ConvKernel k = oracle::random_kernel(3, 2, 3, 1, rng);
  Tensor a = deform_conv(x, field(9, H, W, 0, 1, 1), k), b = conv2d(shifted, k);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 1; y + 1 < H; ++y)
      for (std::size_t j = 1; j + 2 < W; ++j) CHECK(std::abs(a.at(c, y, j) - b.at(c, y, j)) <= 1e-12);
}

TEST_CASE("deform_conv matches the per-pixel oracle at fractional offsets") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = oracle::random_tensor({2, 4, 5}, rng);
    std::size_t ks = seed % 2 ? 3 : 1;
    ConvKernel k = oracle::random_kernel(3, 2, ks, 1, rng);
    const std::size_t K = ks * ks;
    SamplingField f{oracle::random_tensor({2 * K, 4, 5}, rng, -2.5, 2.5), oracle::random_tensor({K, 4, 5}, rng, 0, 1)};
    CHECK(oracle::max_abs_diff(deform_conv(x, f, k), oracle::deform_conv(x, f, k)) <= 1e-12);
  }
}

TEST_CASE("1x1 unit kernel gives modulated bilinear samples") {
  std::mt19937_64 rng(21);
  Tensor x = oracle::random_tensor({1, 4, 4}, rng);
  ConvKernel k{Tensor({1, 1, 1, 1}, 1.0), Tensor({1}, 0.0)};
  SamplingField f{oracle::random_tensor({2, 4, 4}, rng, -1.7, 1.7), oracle::random_tensor({1, 4, 4}, rng, 0, 1)};
  Tensor out = deform_conv(x, f, k);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t j = 0; j < 4; ++j) {
      const double s = oracle::bilinear(x, 0, y + f.offsets.at(0, y, j), j + f.offsets.at(1, y, j));
      CHECK(std::abs(out.at(0, y, j) - s * f.modulation.at(0, y, j)) <= 1e-12);
    }
}

TEST_CASE("deform_conv rejects tap-count and extent mismatches") {
  Tensor x({2, 4, 4});
  ConvKernel k = zero_kernel(2, 2, 3);
  CHECK_THROWS_AS(deform_conv(x, field(4, 4, 4, 0, 0, 1), k), std::invalid_argument);
  CHECK_THROWS_AS(deform_conv(x, field(9, 4, 5, 0, 0, 1), k), std::invalid_argument);
}

TEST_CASE("hierarchical sums of all-ones branches count up") {
  std::vector<Tensor> d(kHffbBranches, Tensor({2, 3, 3}, 1.0));
  auto s = hierarchical_sums(d);
  REQUIRE(s.size() == kHffbBranches);
  for (std::size_t r = 0; r < s.size(); ++r)
    for (double v : s[r].data()) CHECK(v == double(r + 1));
}

TEST_CASE("hffb with zero fuse weights is the identity") {
  std::mt19937_64 rng(4);
  HffbParams p = random_hffb(3, 2, rng);
  p.fuse = zero_kernel(3, 16, 1);
  Tensor x = oracle::random_tensor({3, 6, 6}, rng);
  CHECK(oracle::max_abs_diff(hffb_forward(x, p), x) == 0.0);
}

TEST_CASE("hffb matches explicit composition") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    HffbParams p = random_hffb(3, 2, rng);
    Tensor x = oracle::random_tensor({3, 9, 10}, rng);
    CHECK(oracle::max_abs_diff(hffb_forward(x, p), oracle::hffb(x, p)) <= 1e-12);
  }
}

TEST_CASE("dilated branch impulse support is 1+2r pixels wide") {
  std::mt19937_64 rng(5);
  for (std::size_t r = 1; r <= kHffbBranches; ++r) {
    ConvKernel k = oracle::random_kernel(1, 1, 3, r, rng);
    k.bias.mutable_data()[0] = 0.0;
    for (auto& w : k.weight.mutable_data()) w = std::abs(w) + 0.1;
    Tensor x({1, 1, 41}, 0.0);
    x.mutable_data()[20] = 1.0;
    // single row: only the middle kernel row contributes
    Tensor y = leaky_relu(conv2d(x, k), kPredictorSlope);
    std::size_t lo = 41, hi = 0;
    for (std::size_t j = 0; j < 41; ++j)
      if (y.at(0, 0, j) != 0.0) {
        lo = std::min(lo, j);
        hi = std::max(hi, j);
      }
    CHECK(hi - lo + 1 == 1 + 2 * r);
  }
}

TEST_CASE("hffb rejects wrong branch count or dilation") {
  std::mt19937_64 rng(6);
  HffbParams p = random_hffb(2, 1, rng);
  Tensor x({2, 4, 4});
  HffbParams fewer = p;
  fewer.branches.pop_back();
  CHECK_THROWS_AS(hffb_forward(x, fewer), std::invalid_argument);
  HffbParams bad = p;
  bad.branches[3].dilation = 1;
  CHECK_THROWS_AS(hffb_forward(x, bad), std::invalid_argument);
}

TEST_CASE("zero head gives zero offsets and modulation one half") {
  std::mt19937_64 rng(7);
  AlignStage s = make_stage(3, 4, 2, true, true, rng);
  Tensor a = oracle::random_tensor({3, 5, 5}, rng), b = oracle::random_tensor({3, 5, 5}, rng);
  SamplingField f = predict_field(a, b, s);
  CHECK(f.offsets.shape() == Shape{18, 5, 5});
  CHECK(f.modulation.shape() == Shape{9, 5, 5});
  for (double v : f.offsets.data()) CHECK(v == 0.0);
  for (double v : f.modulation.data()) CHECK(v == 0.5);
  CHECK_THROWS_AS(predict_field(a, Tensor({3, 5, 4}), s), std::invalid_argument);
}

TEST_CASE("modulation lies strictly inside (0,1)") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    AlignStage s = make_stage(2, 4, 2, seed % 2 == 0, false, rng);
    // head at a trained-network scale; sigmoid rounds to exactly 1 past logit ~37
    for (auto& w : s.head.weight.mutable_data()) w *= 0.05;
    SamplingField f = predict_field(oracle::random_tensor({2, 6, 6}, rng), oracle::random_tensor({2, 6, 6}, rng), s);
    for (double v : f.modulation.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
    for (double v : f.offsets.data()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("predictor reads both features") {
  std::mt19937_64 rng(8);
  AlignStage s = make_stage(2, 4, 2, true, false, rng);
  Tensor a = oracle::random_tensor({2, 5, 5}, rng), b = oracle::random_tensor({2, 5, 5}, rng);
  a.set_requires_grad();
  b.set_requires_grad();
  SamplingField f = predict_field(a, b, s);
  add(sum(f.offsets), sum(f.modulation)).backward();
  auto nonzero = [](std::span<const double> g) {
    for (double v : g)
      if (v != 0.0) return true;
    return false;
  };
  CHECK(nonzero(a.grad()));
  CHECK(nonzero(b.grad()));
}

TEST_CASE("zero head and identity deform kernel halve the neighbour") {
  std::mt19937_64 rng(9);
  AlignStage s = make_stage(3, 4, 2, true, true, rng);
  s.deform = identity_kernel(3);
  Tensor fi = oracle::random_tensor({3, 5, 6}, rng), ft = oracle::random_tensor({3, 5, 6}, rng);
  Tensor out = align_cascade(fi, ft, std::span<const AlignStage>(&s, 1));
  for (std::size_t i = 0; i < fi.numel(); ++i) CHECK(out.data()[i] == 0.5 * fi.data()[i]);
}

TEST_CASE("cascade leaves the reference untouched and keeps shapes") {
  std::mt19937_64 rng(10);
  std::vector<AlignStage> stages;
  for (int d = 0; d < 3; ++d) stages.push_back(make_stage(2, 4, 2, d != 1, false, rng));
  Tensor fi = oracle::random_tensor({2, 5, 6}, rng), ft = oracle::random_tensor({2, 5, 6}, rng);
  const std::vector<double> before(ft.data().begin(), ft.data().end());
  for (std::size_t d = 1; d <= stages.size(); ++d) {
    Tensor out = align_cascade(fi, ft, std::span<const AlignStage>(stages.data(), d));
    CHECK(out.shape() == fi.shape());
  }
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(ft.data()[i] == before[i]);
  CHECK_THROWS_AS(align_cascade(fi, ft, {}), std::invalid_argument);
}

TEST_CASE("cascades of depth 1 to 5 are constructible") {
  for (std::size_t d = 1; d <= 5; ++d) {
    ModelConfig c = ModelConfig::desk();
    c.n_dconv = d;
    c.channels = 4;
    c.align_width = 4;
    c.hffb_width = 2;
    c.embed_width = 2;
    c.n_rrdb = 1;
    c.growth = 2;
    DnlnModel m(c, InitOptions{d, false});
    CHECK(m.align_stages().size() == d);
    for (const auto& s : m.align_stages()) {
      CHECK(s.head.out_channels() == 27);
      CHECK(s.reduce.in_channels() == 8);
      CHECK(s.deform.out_channels() == 4);
      REQUIRE(s.hffb.has_value());
      for (std::size_t r = 0; r < kHffbBranches; ++r) CHECK(s.hffb->branches[r].dilation == r + 1);
    }
    std::mt19937_64 rng(d);
    Tensor fi = oracle::random_tensor({4, 5, 5}, rng), ft = oracle::random_tensor({4, 5, 5}, rng);
    CHECK(align_cascade(fi, ft, m.align_stages()).shape() == fi.shape());
  }
}

}
