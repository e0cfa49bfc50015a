#include "dnln/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kernels.hpp"

namespace dnln {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

template <typename Fn>
Tensor pointwise(const char* rule, const Tensor& a, Fn&& value, std::function<double(double, double)> deriv) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = value(x[i]);
  // deriv(x, y) receives the input and the output value
  return Tensor::record(a.shape(), out, rule, {a},
                        [x = std::vector<double>(x.begin(), x.end()), y = out,
                         deriv = std::move(deriv)](std::span<const double> g, GradSinks& sinks) {
                          for (std::size_t i = 0; i < g.size(); ++i) sinks[0][i] += g[i] * deriv(x[i], y[i]);
                        });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::record(a.shape(), std::move(out), "add", {a, b}, [](std::span<const double> g, GradSinks& s) {
    for (auto& sink : s)
      if (!sink.empty())
        for (std::size_t i = 0; i < g.size(); ++i) sink[i] += g[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::record(a.shape(), std::move(out), "sub", {a, b}, [](std::span<const double> g, GradSinks& s) {
    if (!s[0].empty())
      for (std::size_t i = 0; i < g.size(); ++i) s[0][i] += g[i];
    if (!s[1].empty())
      for (std::size_t i = 0; i < g.size(); ++i) s[1][i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::record(a.shape(), std::move(out), "mul", {a, b},
                        [a, b](std::span<const double> g, GradSinks& s) {
                          auto x = a.data(), y = b.data();
                          if (!s[0].empty())
                            for (std::size_t i = 0; i < g.size(); ++i) s[0][i] += g[i] * y[i];
                          if (!s[1].empty())
                            for (std::size_t i = 0; i < g.size(); ++i) s[1][i] += g[i] * x[i];
                        });
}

Tensor scale(const Tensor& a, double factor) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
  return Tensor::record(a.shape(), std::move(out), "scale", {a},
                        [factor](std::span<const double> g, GradSinks& s) {
                          for (std::size_t i = 0; i < g.size(); ++i) s[0][i] += factor * g[i];
                        });
}

namespace {
thread_local KinkMonitor* t_monitor = nullptr;
}

KinkMonitor::KinkMonitor() : prev_(t_monitor) { t_monitor = this; }

KinkMonitor::~KinkMonitor() {
  t_monitor = prev_;
  if (prev_) prev_->margin_ = std::min(prev_->margin_, margin_);
}

void KinkMonitor::note(double distance) {
  if (t_monitor) t_monitor->margin_ = std::min(t_monitor->margin_, distance);
}

Tensor leaky_relu(const Tensor& a, double slope) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] > 0 ? x[i] : slope * x[i];
    KinkMonitor::note(std::abs(x[i]));
  }
  return Tensor::record(a.shape(), std::move(out), "leaky_relu", {a},
                        [a, slope](std::span<const double> g, GradSinks& s) {
                          auto x = a.data();
                          for (std::size_t i = 0; i < g.size(); ++i) s[0][i] += x[i] > 0 ? g[i] : slope * g[i];
                        });
}

Tensor relu(const Tensor& a) { return leaky_relu(a, 0.0); }

Tensor sigmoid(const Tensor& a) {
  return pointwise(
      "sigmoid", a, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  Shape tail(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  if (parts[0].rank() == 0) throw std::invalid_argument("concat_channels: scalar input");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.rank() != tail.size() + 1 || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1)) {
      throw std::invalid_argument("concat_channels: trailing shape mismatch " + shape_str(p.shape()) + " vs " +
                                  shape_str(parts[0].shape()));
    }
    channels += p.dim(0);
  }
  Shape shape{channels};
  shape.insert(shape.end(), tail.begin(), tail.end());
  std::vector<double> out;
  out.reserve(shape_numel(shape));
  std::vector<std::size_t> bounds{0};
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    bounds.push_back(out.size());
  }
  return Tensor::record(shape, std::move(out), "concat_channels", parts,
                        [bounds](std::span<const double> g, GradSinks& s) {
                          for (std::size_t k = 0; k < s.size(); ++k) {
                            if (s[k].empty()) continue;
                            for (std::size_t i = bounds[k]; i < bounds[k + 1]; ++i) s[k][i - bounds[k]] += g[i];
                          }
                        });
}

Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t count) {
  if (a.rank() == 0 || begin + count > a.dim(0)) {
    throw std::invalid_argument("slice_channels: range [" + std::to_string(begin) + "," +
                                std::to_string(begin + count) + ") outside " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[0] = count;
  const std::size_t inner = a.numel() / a.dim(0);
  auto x = a.data();
  std::vector<double> out(x.begin() + begin * inner, x.begin() + (begin + count) * inner);
  return Tensor::record(shape, std::move(out), "slice_channels", {a},
                        [off = begin * inner](std::span<const double> g, GradSinks& s) {
                          for (std::size_t i = 0; i < g.size(); ++i) s[0][off + i] += g[i];
                        });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto x = a.data();
  return Tensor::record(std::move(shape), std::vector<double>(x.begin(), x.end()), "reshape", {a},
                        [](std::span<const double> g, GradSinks& s) {
                          for (std::size_t i = 0; i < g.size(); ++i) s[0][i] += g[i];
                        });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: expected a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto x = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return Tensor::record({n, m}, std::move(out), "transpose", {a},
                        [m, n](std::span<const double> g, GradSinks& s) {
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) s[0][i * n + j] += g[j * m + i];
                        });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return Tensor::record({m, n}, std::move(out), "matmul", {a, b},
                        [a, b, m, k, n](std::span<const double> g, GradSinks& s) {
                          // dA = G B^T, dB = A^T G
                          if (!s[0].empty()) kernels::gemm_nt(m, n, k, g.data(), b.data().data(), s[0].data());
                          if (!s[1].empty()) kernels::gemm_tn(m, n, k, a.data().data(), g.data(), s[1].data());
                        });
}

Tensor sum(const Tensor& a) {
  double total = 0;
  for (double v : a.data()) total += v;
  return Tensor::record({}, {total}, "sum", {a}, [](std::span<const double> g, GradSinks& s) {
    for (auto& v : s[0]) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  double total = 0;
  for (double v : a.data()) total += v;
  const double n = static_cast<double>(a.numel());
  return Tensor::record({}, {total / n}, "mean", {a}, [n](std::span<const double> g, GradSinks& s) {
    for (auto& v : s[0]) v += g[0] / n;
  });
}

Tensor abs_mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("abs_mean: empty tensor");
  double total = 0;
  for (double v : a.data()) {
    total += std::abs(v);
    KinkMonitor::note(std::abs(v));
  }
  const double n = static_cast<double>(a.numel());
  return Tensor::record({}, {total / n}, "abs_mean", {a}, [a, n](std::span<const double> g, GradSinks& s) {
    auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double sign = x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0);
      s[0][i] += g[0] * sign / n;
    }
  });
}

Tensor sq_mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("sq_mean: empty tensor");
  double total = 0;
  for (double v : a.data()) total += v * v;
  const double n = static_cast<double>(a.numel());
  return Tensor::record({}, {total / n}, "sq_mean", {a}, [a, n](std::span<const double> g, GradSinks& s) {
    auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) s[0][i] += g[0] * 2.0 * x[i] / n;
  });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw std::invalid_argument("softmax: axis out of range for " + shape_str(a.shape()));
  auto x = a.data();
  for (double v : x)
    if (!std::isfinite(v)) throw std::invalid_argument("softmax: non-finite input");
  const std::size_t len = a.dim(axis);
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t outer = a.numel() / (len * inner);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = x[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      double z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  return Tensor::record(a.shape(), out, "softmax", {a},
                        [y = out, len, inner, outer](std::span<const double> g, GradSinks& s) {
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t i = 0; i < inner; ++i) {
                              const std::size_t base = o * len * inner + i;
                              double dotp = 0;
                              for (std::size_t j = 0; j < len; ++j) dotp += g[base + j * inner] * y[base + j * inner];
                              for (std::size_t j = 0; j < len; ++j) {
                                const std::size_t q = base + j * inner;
                                s[0][q] += y[q] * (g[q] - dotp);
                              }
                            }
                          }
                        });
}

namespace {

// Flat index maps shared by shuffle and its inverse: dense (C, H*r, W*r) index
// for each input element of the (C*r*r, H, W) layout.
std::vector<std::size_t> shuffle_map(std::size_t C, std::size_t H, std::size_t W, std::size_t r) {
  std::vector<std::size_t> map(C * r * r * H * W);
  const std::size_t oh = H * r, ow = W * r;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t dy = 0; dy < r; ++dy)
      for (std::size_t dx = 0; dx < r; ++dx)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w) {
            const std::size_t src = (((c * r + dy) * r + dx) * H + h) * W + w;
            map[src] = (c * oh + h * r + dy) * ow + w * r + dx;
          }
  return map;
}

}  // namespace

Tensor pixel_shuffle(const Tensor& a, std::size_t r) {
  if (r == 0 || a.rank() != 3 || a.dim(0) % (r * r) != 0) {
    throw std::invalid_argument("pixel_shuffle: channels of " + shape_str(a.shape()) + " not divisible by r^2=" +
                                std::to_string(r * r));
  }
  const std::size_t C = a.dim(0) / (r * r), H = a.dim(1), W = a.dim(2);
  auto map = shuffle_map(C, H, W, r);
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[map[i]] = x[i];
  return Tensor::record({C, H * r, W * r}, std::move(out), "pixel_shuffle", {a},
                        [map = std::move(map)](std::span<const double> g, GradSinks& s) {
                          for (std::size_t i = 0; i < map.size(); ++i) s[0][i] += g[map[i]];
                        });
}

Tensor pixel_unshuffle(const Tensor& a, std::size_t r) {
  if (r == 0 || a.rank() != 3 || a.dim(1) % r != 0 || a.dim(2) % r != 0) {
    throw std::invalid_argument("pixel_unshuffle: extents of " + shape_str(a.shape()) + " not divisible by " +
                                std::to_string(r));
  }
  const std::size_t C = a.dim(0), H = a.dim(1) / r, W = a.dim(2) / r;
  auto map = shuffle_map(C, H, W, r);
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[map[i]];
  return Tensor::record({C * r * r, H, W}, std::move(out), "pixel_unshuffle", {a},
                        [map = std::move(map)](std::span<const double> g, GradSinks& s) {
                          for (std::size_t i = 0; i < map.size(); ++i) s[0][map[i]] += g[i];
                        });
}

void ConvKernel::validate() const {
  if (!weight.defined() || weight.rank() != 4) throw std::invalid_argument("conv2d: weight must be rank 4");
  if (weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel must be square and odd, got " + shape_str(weight.shape()));
  }
  if (dilation < 1) throw std::invalid_argument("conv2d: dilation must be positive");
  if (!bias.defined() || bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw std::invalid_argument("conv2d: bias must have shape (" + std::to_string(weight.dim(0)) + ")");
  }
}

Tensor conv2d(const Tensor& input, const ConvKernel& kernel) {
  kernel.validate();
  if (input.rank() != 3 || input.dim(0) != kernel.in_channels()) {
    throw std::invalid_argument("conv2d: input " + shape_str(input.shape()) + " does not match kernel " +
                                shape_str(kernel.weight.shape()));
  }
  const std::size_t cin = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t cout = kernel.out_channels(), k = kernel.size(), dil = kernel.dilation,
                    pad = kernel.padding();
  const std::size_t hw = H * W, rows = cin * k * k;

  std::vector<double> col;
  const double* cols = input.data().data();
  if (k != 1) {
    col.resize(rows * hw);
    kernels::im2col(input.data().data(), cin, H, W, k, dil, pad, col.data());
    cols = col.data();
  }
  std::vector<double> out(cout * hw);
  auto b = kernel.bias.data();
  for (std::size_t co = 0; co < cout; ++co) std::fill_n(out.begin() + co * hw, hw, b[co]);
  kernels::gemm_nn(cout, hw, rows, kernel.weight.data().data(), cols, out.data());

  return Tensor::record(
      {cout, H, W}, std::move(out), "conv2d", {input, kernel.weight, kernel.bias},
      [input, w = kernel.weight, col = std::move(col), cin, H, W, cout, k, dil, pad, hw,
       rows](std::span<const double> g, GradSinks& s) {
        const double* cols = k == 1 ? input.data().data() : col.data();
        if (!s[1].empty()) kernels::gemm_nt(cout, hw, rows, g.data(), cols, s[1].data());
        if (!s[2].empty())
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = 0;
            for (std::size_t i = 0; i < hw; ++i) acc += g[co * hw + i];
            s[2][co] += acc;
          }
        if (!s[0].empty()) {
          if (k == 1) {
            kernels::gemm_tn(cout, hw, rows, w.data().data(), g.data(), s[0].data());
          } else {
            std::vector<double> gcol(rows * hw, 0.0);
            kernels::gemm_tn(cout, hw, rows, w.data().data(), g.data(), gcol.data());
            kernels::col2im(gcol.data(), cin, H, W, k, dil, pad, s[0].data());
          }
        }
      });
}

}  // namespace dnln
