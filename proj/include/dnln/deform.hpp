#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "dnln/ops.hpp"
#include "dnln/tensor.hpp"

namespace dnln {

/// Per-pixel sampling parameters of a K-tap deformable kernel.
struct SamplingField {
  Tensor offsets;     // (2K, H, W); channel 2k is dy of tap k, 2k+1 is dx
  Tensor modulation;  // (K, H, W), in [0,1]
};

/// Bilinear read of one plane at (y, x). Neighbours outside the plane read
/// zero, so positions at or beyond one pixel past the border return zero.
double bilinear_value(std::span<const double> plane, std::size_t H, std::size_t W, double y, double x);

/// Samples every channel of `feat` (C,H,W) at `coord` = [y, x]; returns (C).
/// Differentiable with respect to both the features and the coordinate.
Tensor bilinear_sample(const Tensor& feat, const Tensor& coord);

/// Modulated deformable convolution with one deformable group:
/// out(p) = bias + sum_k w_k * feat(p + p_k + dp_k(p)) * m_k(p).
Tensor deform_conv(const Tensor& feat, const SamplingField& field, const ConvKernel& kernel);

/// Hierarchical feature fusion: eight dilated branches (rates 1..8) whose
/// outputs are cumulatively summed, concatenated, fused by a 1x1 conv and
/// added back to the input.
struct HffbParams {
  std::vector<ConvKernel> branches;  // branch r-1 has dilation r
  ConvKernel fuse;
};

inline constexpr std::size_t kHffbBranches = 8;
inline constexpr double kPredictorSlope = 0.2;

/// s_r = d_1 + ... + d_r
std::vector<Tensor> hierarchical_sums(const std::vector<Tensor>& branch_outputs);
Tensor hffb_forward(const Tensor& x, const HffbParams& params);

/// One alignment step: a sampling-parameter predictor plus the deformable conv
/// it drives. `plain` replaces the HFFB when `hffb` is empty.
struct AlignStage {
  ConvKernel reduce;
  std::optional<HffbParams> hffb;
  ConvKernel plain;
  ConvKernel head;  // emits 3K channels: 2K offsets then K modulation logits
  ConvKernel deform;
};

SamplingField predict_field(const Tensor& f_i, const Tensor& f_t, const AlignStage& stage);

/// Aligns the neighbour feature `f_i` to the reference `f_t` through the
/// cascade. The reference is read unchanged by every stage.
Tensor align_cascade(const Tensor& f_i, const Tensor& f_t, std::span<const AlignStage> stages);

}  // namespace dnln
