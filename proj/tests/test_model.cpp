#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "dnln/model.hpp"
#include "oracles.hpp"

using namespace dnln;

namespace {

ModelConfig tiny() {
  ModelConfig c = ModelConfig::desk();
  c.channels = 4;
  c.n_rrdb = 1;
  c.growth = 2;
  c.align_width = 4;
  c.hffb_width = 2;
  c.embed_width = 2;
  c.scale = 2;
  return c;
}

std::vector<Tensor> frames(std::size_t n, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::vector<Tensor> f;
  for (std::size_t i = 0; i < n; ++i) f.push_back(oracle::random_tensor({3, h, w}, rng, 0, 1));
  return f;
}

void zero_params(DnlnModel& m, std::string_view prefix) {
  for (auto& [name, t] : m.parameters())
    if (name.starts_with(prefix))
      for (auto& v : t.mutable_data()) v = 0.0;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("presets") {
  ModelConfig p = ModelConfig::paper();
  CHECK(p.channels == 64);
  CHECK(p.n_res == 5);
  CHECK(p.n_dconv == 5);
  CHECK(p.n_rrdb == 23);
  CHECK(p.growth == 32);
  CHECK(p.radius == 3);
  CHECK(p.scale == 4);
  CHECK(p.hffb_width == 32);
  CHECK(p.embed_width == 32);
  ModelConfig d = ModelConfig::desk();
  CHECK(d.channels == 8);
  CHECK(d.n_res == 1);
  CHECK(d.n_dconv == 2);
  CHECK(d.n_rrdb == 2);
  CHECK(d.growth == 8);
  CHECK(d.radius == 1);
  CHECK(d.scale == 4);
}

TEST_CASE("config text round trip and validation") {
  ModelConfig c = tiny();
  c.use_nonlocal = false;
  c.trunk = TrunkKind::ResBlock;
  CHECK(ModelConfig::from_text(c.to_text()) == c);
  CHECK_THROWS_AS(c.set("bogus", "1"), std::invalid_argument);
  CHECK_THROWS_AS(c.set("channels", "-3"), std::invalid_argument);
  CHECK_THROWS_AS(c.set("use_hffb", "maybe"), std::invalid_argument);
  ModelConfig bad = tiny();
  bad.scale = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_THROWS_AS(DnlnModel{bad}, std::invalid_argument);
}

TEST_CASE("paper preset parameter names follow the documented scheme") {
  DnlnModel m(ModelConfig::paper());
  std::set<std::string> prefixes;
  for (const auto& [name, t] : m.parameters()) prefixes.insert(name.substr(0, name.find('.')));
  CHECK(prefixes == std::set<std::string>{"extract", "align", "nonlocal", "fusion", "trunk", "up", "head"});
  CHECK(m.parameters().find("align.stage4.hffb.branch8.weight") != nullptr);
  CHECK(m.parameters().find("trunk.rrdb22.db2.conv5.bias") != nullptr);
  CHECK(m.parameters().find("nonlocal.z.weight")->shape() == Shape{64, 32, 1, 1});
  CHECK(m.parameters().find("fusion.weight")->shape() == Shape{64, 7 * 64, 3, 3});
  CHECK(m.parameters().find("up.1.weight") != nullptr);
  CHECK(m.parameters().find("up.2.weight") == nullptr);
  CHECK(m.rrdbs().size() == 23);
}

TEST_CASE("extractor shares weights and keeps spatial size") {
  std::mt19937_64 rng(1);
  DnlnModel m(tiny(), InitOptions{3, false});
  Tensor f = oracle::random_tensor({3, 5, 7}, rng, 0, 1);
  Tensor copy(f.shape(), std::vector<double>(f.data().begin(), f.data().end()));
  Tensor a = m.extract_features(f), b = m.extract_features(copy);
  CHECK(a.shape() == Shape{4, 5, 7});
  CHECK(same_bits(a, b));
  zero_params(m, "extract.");
  Tensor z = m.extract_features(f);
  for (double v : z.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(m.extract_features(Tensor({1, 5, 7})), std::invalid_argument);
}

TEST_CASE("output is scale times the input") {
  std::mt19937_64 rng(2);
  ModelConfig c = tiny();
  c.scale = 4;
  DnlnModel m(c);
  CHECK(m.forward(frames(3, 5, 6, rng)).shape() == Shape{3, 20, 24});
}

TEST_CASE("radius zero is a single-image path") {
  std::mt19937_64 rng(3);
  ModelConfig c = tiny();
  c.radius = 0;
  DnlnModel m(c);
  CHECK(m.parameters().find("fusion.weight")->shape() == Shape{4, 4, 3, 3});
  CHECK(m.forward(frames(1, 4, 4, rng)).shape() == Shape{3, 8, 8});
}

TEST_CASE("sequence and frame-count mismatches are rejected") {
  std::mt19937_64 rng(4);
  DnlnModel m(tiny());
  CHECK_THROWS_AS(m.forward(frames(5, 4, 4, rng)), std::invalid_argument);
  auto f = frames(3, 4, 4, rng);
  f[2] = oracle::random_tensor({3, 4, 5}, rng);
  CHECK_THROWS_AS(m.forward(f), std::invalid_argument);
  FrameSequence s;
  s.radius = 2;
  for (int i = 0; i < 5; ++i) s.lr_frames.push_back(make_frame(Tensor({3, 4, 4})));
  CHECK_THROWS_AS(m.forward(s), std::invalid_argument);
}

TEST_CASE("desk preset on seven 32x32 frames: shape and gradient audit") {
  std::mt19937_64 rng(5);
  ModelConfig c = ModelConfig::desk();
  c.radius = 3;
  DnlnModel m(c, InitOptions{5, true});
  for (auto& [name, t] : m.parameters()) t.set_requires_grad();
  Tensor out = m.forward(frames(7, 32, 32, rng));
  CHECK(out.shape() == Shape{3, 128, 128});
  Tensor r = oracle::random_tensor(out.shape(), rng);
  sum(mul(out, r)).backward();
  std::set<std::string> reached;
  for (const auto& [name, t] : m.parameters()) {
    REQUIRE(t.has_grad());
    bool finite = true, nonzero = false;
    for (double g : t.grad()) {
      finite = finite && std::isfinite(g);
      nonzero = nonzero || g != 0.0;
    }
    CHECK_MESSAGE(finite, name);
    if (nonzero) reached.insert(name.substr(0, name.find('.')));
  }
  CHECK(reached == std::set<std::string>{"extract", "align", "nonlocal", "fusion", "trunk", "up", "head"});
}

TEST_CASE("zero trunk output leaves the reference feature at the upsampler") {
  std::mt19937_64 rng(6);
  DnlnModel m(tiny(), InitOptions{6, false});
  zero_params(m, "trunk.conv.");
  ForwardProbe probe;
  m.forward(frames(3, 5, 5, rng), &probe);
  CHECK(same_bits(probe.upsampler_input, probe.features[1]));
  CHECK(same_bits(probe.branches[1], probe.features[1]));
}

TEST_CASE("neighbour branches are independent") {
  std::mt19937_64 rng(7);
  ModelConfig c = tiny();
  c.radius = 2;
  DnlnModel m(c, InitOptions{7, false});
  auto f = frames(5, 4, 4, rng);
  ForwardProbe a, b;
  m.forward(f, &a);
  f[0] = oracle::random_tensor({3, 4, 4}, rng, 0, 1);
  m.forward(f, &b);
  CHECK_FALSE(same_bits(a.branches[0], b.branches[0]));
  for (std::size_t i = 1; i < 5; ++i) CHECK(same_bits(a.branches[i], b.branches[i]));
}

TEST_CASE("rrdb identities") {
  std::mt19937_64 rng(8);
  DnlnModel m(tiny(), InitOptions{8, false});
  RrdbParams p = m.rrdbs()[0];
  Tensor x = oracle::random_tensor({4, 5, 5}, rng);
  RrdbParams zero_beta = p;
  zero_beta.beta = 0.0;
  CHECK(same_bits(rrdb_forward(x, zero_beta), x));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 5; ++j) {
      const ConvKernel& k = p.dense[b][j];
      CHECK(k.in_channels() == 4 + j * 2);
      CHECK(k.out_channels() == (j == 4 ? 4u : 2u));
    }
  // zero dense weights make every dense block the identity, leaving x + beta x
  zero_params(m, "trunk.rrdb0.");
  Tensor y = rrdb_forward(x, m.rrdbs()[0]);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i] + 0.2 * x.data()[i]);
  for (std::size_t b = 0; b < 3; ++b) CHECK(same_bits(dense_block_forward(x, m.rrdbs()[0].dense[b], 0.2), x));
}

TEST_CASE("dense block matches explicit composition") {
  std::mt19937_64 rng(9);
  std::array<ConvKernel, 5> k;
  for (std::size_t j = 0; j < 5; ++j) k[j] = oracle::random_kernel(j == 4 ? 3 : 2, 3 + 2 * j, 3, 1, rng);
  Tensor u = oracle::random_tensor({3, 4, 4}, rng);
  std::vector<Tensor> parts{u};
  for (std::size_t j = 0; j < 4; ++j) {
    Tensor cat = concat_channels(parts);
    Tensor y = oracle::conv2d(cat, k[j]);
    for (auto& v : y.mutable_data()) v = oracle::lrelu(v, 0.2);
    parts.push_back(y);
  }
  Tensor last = oracle::conv2d(concat_channels(parts), k[4]);
  Tensor got = dense_block_forward(u, k, 0.2);
  for (std::size_t i = 0; i < u.numel(); ++i) CHECK(std::abs(got.data()[i] - (u.data()[i] + 0.2 * last.data()[i])) <= 1e-12);
}

TEST_CASE("ablation switches change the parameter set") {
  ModelConfig c = tiny();
  c.use_nonlocal = false;
  c.use_hffb = false;
  DnlnModel m(c);
  CHECK(m.parameters().find("nonlocal.u.weight") == nullptr);
  CHECK(m.parameters().find("align.stage0.plain.weight") != nullptr);
  CHECK(m.parameters().find("align.stage0.hffb.fuse.weight") == nullptr);
  c.trunk = TrunkKind::ResBlock;
  c.use_align = false;
  DnlnModel r(c);
  CHECK(r.parameters().find("trunk.res0.conv1.weight") != nullptr);
  CHECK(r.align_stages().empty());
  std::mt19937_64 rng(10);
  CHECK(r.forward(frames(3, 3, 3, rng)).shape() == Shape{3, 6, 6});
}

TEST_CASE("initialisation is deterministic per seed") {
  DnlnModel a(tiny(), InitOptions{42, true}), b(tiny(), InitOptions{42, true}), c(tiny(), InitOptions{43, true});
  bool differs = false;
  auto ib = b.parameters().begin(), ic = c.parameters().begin();
  for (const auto& [name, t] : a.parameters()) {
    CHECK(ib->first == name);
    CHECK(same_bits(t, ib->second));
    differs = differs || !same_bits(t, ic->second);
    ++ib;
    ++ic;
  }
  CHECK(differs);
  for (const auto& s : a.align_stages())
    for (double v : s.head.weight.data()) CHECK(v == 0.0);
}

}
