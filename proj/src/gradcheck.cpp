#include "dnln/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "dnln/deform.hpp"
#include "dnln/model.hpp"
#include "dnln/nonlocal.hpp"
#include "dnln/ops.hpp"
#include "dnln/train.hpp"

namespace dnln {

namespace {

double weighted_sum(const Tensor& out, const std::vector<double>& r) {
  auto d = out.data();
  double acc = 0;
  for (std::size_t i = 0; i < d.size(); ++i) acc += r[i] * d[i];
  return acc;
}

std::vector<std::size_t> pick(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= k) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Tensor leaf(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad();
  return t;
}

// values bounded away from zero, for inputs of kinked functions
Tensor leaf_off_zero(Shape shape, std::mt19937_64& rng) {
  Tensor t = leaf(std::move(shape), rng);
  for (auto& x : t.mutable_data()) x = std::copysign(0.1 + std::abs(x), x);
  return t;
}

ConvKernel kernel(std::size_t cout, std::size_t cin, std::size_t k, std::size_t dilation, std::mt19937_64& rng,
                  double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(cin * k * k));
  return ConvKernel{leaf({cout, cin, k, k}, rng, -bound, bound), leaf({cout}, rng, -0.1, 0.1), dilation};
}

void push_kernel(std::vector<NamedInput>& in, const std::string& name, const ConvKernel& k) {
  in.push_back({name + ".weight", k.weight});
  in.push_back({name + ".bias", k.bias});
}

// Redraws an instance until every input of a piecewise operator sits at
// least `margin` from a branch point, so no probe step can straddle one.
template <typename Draw, typename Eval>
void draw_smooth(const char* what, Draw draw, Eval eval, double margin = 1e-4) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    draw();
    NoGradGuard guard;
    KinkMonitor monitor;
    eval();
    if (monitor.margin() > margin) return;
  }
  throw std::runtime_error(std::string("gradcheck ") + what + ": could not draw an instance clear of kinks");
}

using Suite = std::vector<GradcheckResult>;

void primitives(Suite& out, std::mt19937_64& rng) {
  const double tol = kPrimitiveTolerance;
  auto unary = [&](const std::string& name, Shape shape, bool off_zero, auto fn) {
    Tensor a = off_zero ? leaf_off_zero(shape, rng) : leaf(shape, rng);
    out.push_back(check_gradients(name, [&] { return fn(a); }, {{"a", a}}, tol, rng));
  };
  auto binary = [&](const std::string& name, Shape sa, Shape sb, auto fn) {
    Tensor a = leaf(sa, rng), b = leaf(sb, rng);
    out.push_back(check_gradients(name, [&] { return fn(a, b); }, {{"a", a}, {"b", b}}, tol, rng));
  };
  binary("add", {2, 3, 4}, {2, 3, 4}, [](auto& a, auto& b) { return add(a, b); });
  binary("sub", {2, 3, 4}, {2, 3, 4}, [](auto& a, auto& b) { return sub(a, b); });
  binary("mul", {2, 3, 4}, {2, 3, 4}, [](auto& a, auto& b) { return mul(a, b); });
  binary("matmul", {3, 5}, {5, 4}, [](auto& a, auto& b) { return matmul(a, b); });
  binary("concat_channels", {2, 3, 3}, {3, 3, 3}, [](auto& a, auto& b) { return concat_channels({a, b, a}); });
  unary("scale", {2, 3, 4}, false, [](auto& a) { return scale(a, -1.7); });
  unary("leaky_relu", {2, 3, 4}, true, [](auto& a) { return leaky_relu(a, 0.2); });
  unary("relu", {2, 3, 4}, true, [](auto& a) { return relu(a); });
  unary("sigmoid", {2, 3, 4}, false, [](auto& a) { return sigmoid(scale(a, 3.0)); });
  unary("slice_channels", {5, 3, 3}, false, [](auto& a) { return slice_channels(a, 1, 3); });
  unary("reshape", {2, 3, 4}, false, [](auto& a) { return reshape(a, {6, 4}); });
  unary("transpose", {3, 5}, false, [](auto& a) { return transpose(a); });
  unary("sum", {2, 3, 4}, false, [](auto& a) { return sum(a); });
  unary("mean", {2, 3, 4}, false, [](auto& a) { return mean(a); });
  unary("abs_mean", {2, 3, 4}, true, [](auto& a) { return abs_mean(a); });
  unary("sq_mean", {2, 3, 4}, false, [](auto& a) { return sq_mean(a); });
  unary("softmax axis 0", {4, 5}, false, [](auto& a) { return softmax(scale(a, 2.0), 0); });
  unary("softmax axis 1", {4, 5}, false, [](auto& a) { return softmax(scale(a, 2.0), 1); });
  unary("pixel_shuffle", {8, 3, 2}, false, [](auto& a) { return pixel_shuffle(a, 2); });
  unary("pixel_unshuffle", {2, 4, 6}, false, [](auto& a) { return pixel_unshuffle(a, 2); });
}

void conv(Suite& out, std::mt19937_64& rng) {
  struct Case {
    std::size_t cin, cout, k, dil, h, w;
  };
  for (const Case c : {Case{2, 3, 3, 1, 5, 6}, Case{3, 2, 1, 1, 4, 4}, Case{2, 2, 3, 2, 6, 5}, Case{1, 2, 5, 1, 4, 7}}) {
    Tensor x = leaf({c.cin, c.h, c.w}, rng);
    ConvKernel k = kernel(c.cout, c.cin, c.k, c.dil, rng);
    std::vector<NamedInput> in{{"input", x}};
    push_kernel(in, "kernel", k);
    const std::string name = "conv2d k" + std::to_string(c.k) + " d" + std::to_string(c.dil);
    out.push_back(check_gradients(name, [&] { return conv2d(x, k); }, in, kPrimitiveTolerance, rng));
  }
}

void bilinear(Suite& out, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  for (int i = 0; i < 4; ++i) {
    Tensor feat = leaf({3, 5, 6}, rng);
    // interior, and partially outside the top-left corner
    const double base_y = i % 2 == 0 ? 2.0 : -1.0, base_x = i < 2 ? 3.0 : -1.0;
    Tensor coord({2}, std::vector<double>{base_y + frac(rng), base_x + frac(rng)});
    coord.set_requires_grad();
    out.push_back(check_gradients("bilinear_sample #" + std::to_string(i), [&] { return bilinear_sample(feat, coord); },
                                  {{"feat", feat}, {"coord", coord}}, kPrimitiveTolerance, rng));
  }
}

// Offsets are integers plus a fraction in [0.1, 0.9], so every sampling
// coordinate is at least 0.1 from an integer.
Tensor fractional_offsets(std::size_t K, std::size_t H, std::size_t W, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> whole(-2, 1);
  std::uniform_real_distribution<double> frac(0.1, 0.9);
  std::vector<double> v(2 * K * H * W);
  for (auto& x : v) x = whole(rng) + frac(rng);
  Tensor t({2 * K, H, W}, std::move(v));
  t.set_requires_grad();
  return t;
}

void deform(Suite& out, std::mt19937_64& rng) {
  for (std::size_t dil : {1, 2}) {
    const std::size_t C = 3, H = 5, W = 6, k = 3, K = k * k;
    Tensor x = leaf({C, H, W}, rng);
    SamplingField field{fractional_offsets(K, H, W, rng), leaf({K, H, W}, rng, 0.0, 1.0)};
    ConvKernel kk = kernel(2, C, k, dil, rng);
    std::vector<NamedInput> in{{"feat", x}, {"offsets", field.offsets}, {"modulation", field.modulation}};
    push_kernel(in, "kernel", kk);
    out.push_back(check_gradients("deform_conv d" + std::to_string(dil), [&] { return deform_conv(x, field, kk); }, in,
                                  kCompositeTolerance, rng));
  }
}

HffbParams make_hffb(std::size_t width, std::size_t branch, std::mt19937_64& rng) {
  HffbParams h;
  for (std::size_t r = 1; r <= kHffbBranches; ++r) h.branches.push_back(kernel(branch, width, 3, r, rng));
  h.fuse = kernel(width, kHffbBranches * branch, 1, 1, rng);
  return h;
}

void push_hffb(std::vector<NamedInput>& in, const std::string& p, const HffbParams& h) {
  for (std::size_t r = 0; r < h.branches.size(); ++r) push_kernel(in, p + ".branch" + std::to_string(r + 1), h.branches[r]);
  push_kernel(in, p + ".fuse", h.fuse);
}

void hffb(Suite& out, std::mt19937_64& rng) {
  Tensor x;
  HffbParams h;
  draw_smooth("hffb", [&] {
    x = leaf({3, 9, 9}, rng);
    h = make_hffb(3, 2, rng);
  }, [&] { hffb_forward(x, h); });
  std::vector<NamedInput> in{{"input", x}};
  push_hffb(in, "hffb", h);
  out.push_back(check_gradients("hffb", [&] { return hffb_forward(x, h); }, in, kCompositeTolerance, rng));
}

void align(Suite& out, std::mt19937_64& rng) {
  for (bool with_hffb : {true, false}) {
    const std::size_t C = 3, R = 4, H = 6, W = 6, K = 9;
    Tensor fi, ft;
    std::vector<AlignStage> stages(1);
    AlignStage& st = stages[0];
    draw_smooth("align", [&] {
      fi = leaf({C, H, W}, rng);
      ft = leaf({C, H, W}, rng);
      st.reduce = kernel(R, 2 * C, 3, 1, rng);
      if (with_hffb) st.hffb = make_hffb(R, 2, rng);
      else st.plain = kernel(R, R, 3, 1, rng);
      st.head = kernel(3 * K, R, 3, 1, rng, 2.0);
      st.deform = kernel(C, C, 3, 1, rng);
    }, [&] { align_cascade(fi, ft, stages); });
    std::vector<NamedInput> in{{"f_i", fi}, {"f_t", ft}};
    push_kernel(in, "reduce", st.reduce);
    if (with_hffb) push_hffb(in, "hffb", *st.hffb);
    else push_kernel(in, "plain", st.plain);
    push_kernel(in, "head", st.head);
    push_kernel(in, "deform", st.deform);
    out.push_back(check_gradients(with_hffb ? "align stage" : "align stage (no hffb)",
                                  [&] { return align_cascade(fi, ft, stages); }, in, kCompositeTolerance, rng));
  }
}

void nonlocal(Suite& out, std::mt19937_64& rng) {
  const std::size_t C = 4, E = 2;
  Tensor x = leaf({C, 4, 5}, rng), y = leaf({C, 4, 5}, rng);
  NonLocalWeights w{kernel(E, C, 1, 1, rng, 2.0), kernel(E, C, 1, 1, rng, 2.0), kernel(E, C, 1, 1, rng),
                    kernel(C, E, 1, 1, rng)};
  std::vector<NamedInput> in{{"x", x}, {"y", y}};
  push_kernel(in, "u", w.u);
  push_kernel(in, "v", w.v);
  push_kernel(in, "g", w.g);
  push_kernel(in, "z", w.z);
  out.push_back(check_gradients("nonlocal", [&] { return nonlocal_forward(x, y, w); }, in, kCompositeTolerance, rng));
}

void rrdb(Suite& out, std::mt19937_64& rng) {
  const std::size_t C = 3, G = 2;
  Tensor x;
  RrdbParams p;
  draw_smooth("rrdb", [&] {
    x = leaf({C, 5, 5}, rng);
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t j = 0; j < 5; ++j) p.dense[b][j] = kernel(j == 4 ? C : G, C + j * G, 3, 1, rng);
  }, [&] { rrdb_forward(x, p); });
  std::vector<NamedInput> in{{"input", x}};
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 5; ++j)
      push_kernel(in, "db" + std::to_string(b + 1) + ".conv" + std::to_string(j + 1), p.dense[b][j]);
  out.push_back(check_gradients("rrdb", [&] { return rrdb_forward(x, p); }, in, kCompositeTolerance, rng));
}

void losses(Suite& out, std::mt19937_64& rng) {
  Tensor pred = leaf({3, 4, 4}, rng);
  Tensor target({3, 4, 4}, 0.0);
  {
    // keep every residual at least 0.1 from a tie
    auto p = pred.data();
    auto t = target.mutable_data();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = p[i] + (i % 2 ? 0.3 : -0.2);
  }
  out.push_back(check_gradients("l1_loss", [&] { return l1_loss(pred, target); }, {{"pred", pred}},
                                kPrimitiveTolerance, rng));
  out.push_back(check_gradients("l2_loss", [&] { return l2_loss(pred, target); }, {{"pred", pred}},
                                kPrimitiveTolerance, rng));
}

void model(Suite& out, std::mt19937_64& rng, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.channels = 4;
  cfg.n_res = 1;
  cfg.n_dconv = 1;
  cfg.n_rrdb = 1;
  cfg.growth = 2;
  cfg.radius = 1;
  cfg.scale = 2;
  cfg.align_width = 4;
  cfg.hffb_width = 2;
  cfg.embed_width = 2;
  std::optional<DnlnModel> m;
  std::vector<Tensor> frames;
  std::uint64_t init_seed = seed;
  draw_smooth("model", [&] {
    m.emplace(cfg, InitOptions{init_seed++, false});
    frames.clear();
    for (std::size_t i = 0; i < cfg.frames(); ++i) frames.push_back(leaf({3, 4, 4}, rng, 0.0, 1.0));
  }, [&] { m->forward(frames); }, 1e-5);
  std::vector<NamedInput> in;
  for (auto& [name, t] : m->parameters()) in.push_back({name, t});
  in.push_back({"frame0", frames[0]});
  GradcheckOptions opts;
  opts.max_probes = 6;
  out.push_back(check_gradients("model", [&] { return m->forward(frames); }, in, kCompositeTolerance, rng, opts));
}

}  // namespace

GradcheckResult check_gradients(std::string name, const std::function<Tensor()>& f, const std::vector<NamedInput>& inputs,
                                double tolerance, std::mt19937_64& rng, const GradcheckOptions& opts) {
  GradcheckResult res;
  res.name = std::move(name);
  res.tolerance = tolerance;

  std::vector<double> r;
  std::vector<std::vector<double>> analytic;
  {
    for (const auto& in : inputs) {
      if (!in.tensor.requires_grad()) throw std::invalid_argument("gradcheck: input " + in.name + " has no gradient");
      Tensor(in.tensor).zero_grad();
    }
    Tensor out = f();
    std::normal_distribution<double> nd(0.0, 1.0);
    r.resize(out.numel());
    for (auto& x : r) x = nd(rng);
    sum(mul(out, Tensor(out.shape(), r))).backward();
    for (const auto& in : inputs) {
      if (in.tensor.has_grad()) analytic.emplace_back(in.tensor.grad().begin(), in.tensor.grad().end());
      else analytic.emplace_back(in.tensor.numel(), 0.0);
    }
  }

  NoGradGuard guard;
  std::vector<std::vector<std::size_t>> probes;
  std::vector<std::vector<double>> numeric;
  double peak = 0;
  for (const auto& in : inputs) {
    Tensor t = in.tensor;
    auto data = t.mutable_data();
    probes.push_back(pick(t.numel(), opts.max_probes, rng));
    auto& num = numeric.emplace_back();
    for (std::size_t j : probes.back()) {
      const double orig = data[j];
      data[j] = orig + opts.eps;
      const double up = weighted_sum(f(), r);
      data[j] = orig - opts.eps;
      const double down = weighted_sum(f(), r);
      data[j] = orig;
      num.push_back((up - down) / (2 * opts.eps));
      peak = std::max(peak, std::abs(num.back()));
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < probes[i].size(); ++j) {
      const double a = analytic[i][probes[i][j]], n = numeric[i][j];
      const double denom = std::max({std::abs(a), std::abs(n), 1e-2 * peak});
      const double err = denom == 0.0 ? 0.0 : std::abs(a - n) / denom;
      if (err > res.max_error || res.worst.empty()) {
        res.max_error = err;
        res.worst = inputs[i].name + "[" + std::to_string(probes[i][j]) + "]";
      }
      ++res.checked;
    }
  }
  return res;
}

const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names{"primitives", "conv2d", "bilinear", "deform", "hffb",
                                              "align",      "nonlocal", "rrdb",   "losses", "model"};
  return names;
}

std::vector<GradcheckResult> run_gradcheck(std::string_view component, std::uint64_t seed) {
  const auto& names = gradcheck_components();
  if (component != "all" && std::find(names.begin(), names.end(), component) == names.end()) {
    std::string list;
    for (const auto& n : names) list += " " + n;
    throw std::invalid_argument("unknown gradcheck component '" + std::string(component) + "' (expected all," + list + ")");
  }
  Suite out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (component != "all" && component != names[i]) continue;
    std::mt19937_64 rng(derive_seed(seed, i));
    const auto& n = names[i];
    if (n == "primitives") primitives(out, rng);
    else if (n == "conv2d") conv(out, rng);
    else if (n == "bilinear") bilinear(out, rng);
    else if (n == "deform") deform(out, rng);
    else if (n == "hffb") hffb(out, rng);
    else if (n == "align") align(out, rng);
    else if (n == "nonlocal") nonlocal(out, rng);
    else if (n == "rrdb") rrdb(out, rng);
    else if (n == "losses") losses(out, rng);
    else if (n == "model") model(out, rng, seed);
  }
  return out;
}

}  // namespace dnln
