#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "dnln/tensor.hpp"

namespace dnln {

// Pointwise and structural primitives. Every operator validates shapes and
// throws std::invalid_argument on mismatch; all are differentiable.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

/// While alive, records the smallest distance of any input seen by a piecewise
/// operator to one of its branch points: zero for relu, leaky_relu and
/// abs_mean, integer coordinates for bilinear sampling. Monitors nest.
class KinkMonitor {
 public:
  KinkMonitor();
  ~KinkMonitor();
  KinkMonitor(const KinkMonitor&) = delete;
  KinkMonitor& operator=(const KinkMonitor&) = delete;

  double margin() const { return margin_; }
  /// No-op unless a monitor is active on this thread.
  static void note(double distance);

 private:
  double margin_ = std::numeric_limits<double>::infinity();
  KinkMonitor* prev_;
};

/// Concatenation along axis 0; trailing extents must agree.
Tensor concat_channels(const std::vector<Tensor>& parts);
/// Rows [begin, begin + count) along axis 0.
Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t count);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor abs_mean(const Tensor& a);
Tensor sq_mean(const Tensor& a);

/// Numerically stable softmax along one axis (max-subtracted).
Tensor softmax(const Tensor& a, std::size_t axis);

/// (C*r*r, H, W) -> (C, H*r, W*r) with out(c, h*r+dy, w*r+dx) = in(c*r*r + dy*r + dx, h, w).
Tensor pixel_shuffle(const Tensor& a, std::size_t r);
/// Exact inverse of pixel_shuffle.
Tensor pixel_unshuffle(const Tensor& a, std::size_t r);

/// Square, odd-sized kernel with "same" zero padding at stride 1.
struct ConvKernel {
  Tensor weight;  // (out_channels, in_channels, k, k)
  Tensor bias;    // (out_channels)
  std::size_t dilation = 1;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t size() const { return weight.dim(2); }
  std::size_t taps() const { return weight.dim(2) * weight.dim(3); }
  std::size_t padding() const { return dilation * (size() - 1) / 2; }
  void validate() const;
};

/// Y(p) = bias + sum_k w_k X(p + p_k * dilation); out-of-range samples read zero.
Tensor conv2d(const Tensor& input, const ConvKernel& kernel);

}  // namespace dnln
