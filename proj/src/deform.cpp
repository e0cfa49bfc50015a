#include "dnln/deform.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kernels.hpp"

namespace dnln {

namespace {

// Four-neighbour stencil of a bilinear read, with the partial derivatives of
// each weight with respect to y and x.
struct Stencil {
  std::size_t index[4] = {};
  double w[4] = {};
  double dwy[4] = {};
  double dwx[4] = {};
  bool valid[4] = {};
};

Stencil make_stencil(std::size_t H, std::size_t W, double y, double x) {
  KinkMonitor::note(std::min(std::abs(y - std::round(y)), std::abs(x - std::round(x))));
  Stencil s;
  const double h = static_cast<double>(H), wd = static_cast<double>(W);
  if (y <= -1.0 || y >= h || x <= -1.0 || x >= wd) return s;
  const double fy = std::floor(y), fx = std::floor(x);
  const auto y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
  const double ly = y - fy, lx = x - fx, hy = 1.0 - ly, hx = 1.0 - lx;
  const std::ptrdiff_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const std::ptrdiff_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const double w[4] = {hy * hx, hy * lx, ly * hx, ly * lx};
  const double dwy[4] = {-hx, -lx, hx, lx};
  const double dwx[4] = {-hy, hy, -ly, ly};
  for (int n = 0; n < 4; ++n) {
    s.valid[n] = ys[n] >= 0 && ys[n] < static_cast<std::ptrdiff_t>(H) && xs[n] >= 0 &&
                 xs[n] < static_cast<std::ptrdiff_t>(W);
    if (!s.valid[n]) continue;
    s.index[n] = static_cast<std::size_t>(ys[n]) * W + static_cast<std::size_t>(xs[n]);
    s.w[n] = w[n];
    s.dwy[n] = dwy[n];
    s.dwx[n] = dwx[n];
  }
  return s;
}

void require_finite(const char* op, double v) {
  if (!std::isfinite(v)) throw std::invalid_argument(std::string(op) + ": non-finite sampling coordinate");
}

}  // namespace

double bilinear_value(std::span<const double> plane, std::size_t H, std::size_t W, double y, double x) {
  require_finite("bilinear_sample", y);
  require_finite("bilinear_sample", x);
  const Stencil s = make_stencil(H, W, y, x);
  double v = 0;
  for (int n = 0; n < 4; ++n)
    if (s.valid[n]) v += s.w[n] * plane[s.index[n]];
  return v;
}

Tensor bilinear_sample(const Tensor& feat, const Tensor& coord) {
  if (feat.rank() != 3) throw std::invalid_argument("bilinear_sample: expected (C,H,W), got " + shape_str(feat.shape()));
  if (coord.numel() != 2) throw std::invalid_argument("bilinear_sample: coordinate must hold [y, x]");
  const std::size_t C = feat.dim(0), H = feat.dim(1), W = feat.dim(2);
  const double y = coord.data()[0], x = coord.data()[1];
  require_finite("bilinear_sample", y);
  require_finite("bilinear_sample", x);
  const Stencil st = make_stencil(H, W, y, x);
  auto f = feat.data();
  std::vector<double> out(C, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (int n = 0; n < 4; ++n)
      if (st.valid[n]) out[c] += st.w[n] * f[c * H * W + st.index[n]];
  return Tensor::record({C}, std::move(out), "bilinear_sample", {feat, coord},
                        [feat, st, C, H, W](std::span<const double> g, GradSinks& s) {
                          auto f = feat.data();
                          for (std::size_t c = 0; c < C; ++c) {
                            for (int n = 0; n < 4; ++n) {
                              if (!st.valid[n]) continue;
                              const double v = f[c * H * W + st.index[n]];
                              if (!s[0].empty()) s[0][c * H * W + st.index[n]] += g[c] * st.w[n];
                              if (!s[1].empty()) {
                                s[1][0] += g[c] * st.dwy[n] * v;
                                s[1][1] += g[c] * st.dwx[n] * v;
                              }
                            }
                          }
                        });
}

Tensor deform_conv(const Tensor& feat, const SamplingField& field, const ConvKernel& kernel) {
  kernel.validate();
  if (feat.rank() != 3 || feat.dim(0) != kernel.in_channels()) {
    throw std::invalid_argument("deform_conv: input " + shape_str(feat.shape()) + " does not match kernel " +
                                shape_str(kernel.weight.shape()));
  }
  const std::size_t C = feat.dim(0), H = feat.dim(1), W = feat.dim(2), hw = H * W;
  const std::size_t k = kernel.size(), K = kernel.taps(), cout = kernel.out_channels();
  const Shape want_off{2 * K, H, W}, want_mod{K, H, W};
  if (field.offsets.shape() != want_off || field.modulation.shape() != want_mod) {
    throw std::invalid_argument("deform_conv: sampling field " + shape_str(field.offsets.shape()) + "/" +
                                shape_str(field.modulation.shape()) + " does not match " + std::to_string(K) +
                                " taps over " + shape_str(feat.shape()));
  }
  const auto pad = static_cast<double>(kernel.padding());
  const auto dil = static_cast<double>(kernel.dilation);
  auto f = feat.data();
  auto off = field.offsets.data();
  auto mod = field.modulation.data();

  // vals: unmodulated samples, cols: modulated, both (C*K, HW)
  std::vector<double> vals(C * K * hw), cols(C * K * hw);
  for (std::size_t t = 0; t < K; ++t) {
    const double ty = static_cast<double>(t / k) * dil - pad, tx = static_cast<double>(t % k) * dil - pad;
    for (std::size_t p = 0; p < hw; ++p) {
      const double y = static_cast<double>(p / W) + ty + off[(2 * t) * hw + p];
      const double x = static_cast<double>(p % W) + tx + off[(2 * t + 1) * hw + p];
      require_finite("deform_conv", y);
      require_finite("deform_conv", x);
      const Stencil st = make_stencil(H, W, y, x);
      const double m = mod[t * hw + p];
      for (std::size_t c = 0; c < C; ++c) {
        const double* plane = f.data() + c * hw;
        double v = 0;
        for (int n = 0; n < 4; ++n)
          if (st.valid[n]) v += st.w[n] * plane[st.index[n]];
        vals[(c * K + t) * hw + p] = v;
        cols[(c * K + t) * hw + p] = v * m;
      }
    }
  }
  std::vector<double> out(cout * hw);
  auto b = kernel.bias.data();
  for (std::size_t co = 0; co < cout; ++co) std::fill_n(out.begin() + co * hw, hw, b[co]);
  kernels::gemm_nn(cout, hw, C * K, kernel.weight.data().data(), cols.data(), out.data());

  return Tensor::record(
      {cout, H, W}, std::move(out), "deform_conv",
      {feat, field.offsets, field.modulation, kernel.weight, kernel.bias},
      [feat, offsets = field.offsets, modulation = field.modulation, w = kernel.weight, vals = std::move(vals),
       cols = std::move(cols), C, H, W, hw, k, K, cout, pad, dil](std::span<const double> g, GradSinks& s) {
        const std::size_t rows = C * K;
        if (!s[3].empty()) kernels::gemm_nt(cout, hw, rows, g.data(), cols.data(), s[3].data());
        if (!s[4].empty())
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += g[co * hw + i];
            s[4][co] += acc;
          }
        if (s[0].empty() && s[1].empty() && s[2].empty()) return;

        std::vector<double> gcol(rows * hw, 0.0);
        kernels::gemm_tn(cout, hw, rows, w.data().data(), g.data(), gcol.data());
        auto f = feat.data();
        auto off = offsets.data();
        auto mod = modulation.data();
        for (std::size_t t = 0; t < K; ++t) {
          const double ty = static_cast<double>(t / k) * dil - pad, tx = static_cast<double>(t % k) * dil - pad;
          for (std::size_t p = 0; p < hw; ++p) {
            const double y = static_cast<double>(p / W) + ty + off[(2 * t) * hw + p];
            const double x = static_cast<double>(p % W) + tx + off[(2 * t + 1) * hw + p];
            const Stencil st = make_stencil(H, W, y, x);
            const double m = mod[t * hw + p];
            double gm = 0, gy = 0, gx = 0;
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t r = (c * K + t) * hw + p;
              const double gc = gcol[r];
              if (gc == 0.0) continue;
              gm += gc * vals[r];
              const double gv = gc * m;
              const double* plane = f.data() + c * hw;
              for (int n = 0; n < 4; ++n) {
                if (!st.valid[n]) continue;
                const double v = plane[st.index[n]];
                gy += gv * st.dwy[n] * v;
                gx += gv * st.dwx[n] * v;
                if (!s[0].empty()) s[0][c * hw + st.index[n]] += gv * st.w[n];
              }
            }
            if (!s[1].empty()) {
              s[1][(2 * t) * hw + p] += gy;
              s[1][(2 * t + 1) * hw + p] += gx;
            }
            if (!s[2].empty()) s[2][t * hw + p] += gm;
          }
        }
      });
}

std::vector<Tensor> hierarchical_sums(const std::vector<Tensor>& branch_outputs) {
  std::vector<Tensor> sums;
  sums.reserve(branch_outputs.size());
  for (const auto& d : branch_outputs) sums.push_back(sums.empty() ? d : add(sums.back(), d));
  return sums;
}

Tensor hffb_forward(const Tensor& x, const HffbParams& params) {
  if (params.branches.size() != kHffbBranches) {
    throw std::invalid_argument("hffb: expected 8 branches, got " + std::to_string(params.branches.size()));
  }
  std::vector<Tensor> branch_out;
  branch_out.reserve(kHffbBranches);
  for (std::size_t r = 0; r < kHffbBranches; ++r) {
    if (params.branches[r].dilation != r + 1) throw std::invalid_argument("hffb: branch dilation must equal its rate");
    branch_out.push_back(leaky_relu(conv2d(x, params.branches[r]), kPredictorSlope));
  }
  return add(x, conv2d(concat_channels(hierarchical_sums(branch_out)), params.fuse));
}

SamplingField predict_field(const Tensor& f_i, const Tensor& f_t, const AlignStage& stage) {
  if (f_i.shape() != f_t.shape()) {
    throw std::invalid_argument("predict_field: neighbour " + shape_str(f_i.shape()) + " vs reference " +
                                shape_str(f_t.shape()));
  }
  if (stage.head.out_channels() % 3 != 0) throw std::invalid_argument("predict_field: head must emit 3K channels");
  const std::size_t K = stage.head.out_channels() / 3;
  Tensor h = leaky_relu(conv2d(concat_channels({f_i, f_t}), stage.reduce), kPredictorSlope);
  h = stage.hffb ? hffb_forward(h, *stage.hffb) : leaky_relu(conv2d(h, stage.plain), kPredictorSlope);
  Tensor params = conv2d(h, stage.head);
  return SamplingField{slice_channels(params, 0, 2 * K), sigmoid(slice_channels(params, 2 * K, K))};
}

Tensor align_cascade(const Tensor& f_i, const Tensor& f_t, std::span<const AlignStage> stages) {
  if (stages.empty()) throw std::invalid_argument("align_cascade: no stages");
  Tensor f = f_i;
  for (const auto& stage : stages) {
    if (stage.head.out_channels() != 3 * stage.deform.taps()) {
      throw std::invalid_argument("align_cascade: head emits " + std::to_string(stage.head.out_channels()) +
                                  " channels for a " + std::to_string(stage.deform.taps()) + "-tap kernel");
    }
    f = deform_conv(f, predict_field(f, f_t, stage), stage.deform);
  }
  return f;
}

}  // namespace dnln
