#pragma once

#include "dnln/ops.hpp"
#include "dnln/tensor.hpp"

namespace dnln {

/// 1x1 projections of the embedded-Gaussian block. u, v, g map the feature
/// width C to an embedding width E (C/2 by default); z maps E back to C.
struct NonLocalWeights {
  ConvKernel u;
  ConvKernel v;
  ConvKernel g;
  ConvKernel z;
};

/// Row-normalised attention between positions of x (rows) and y (columns):
/// A(p, n) = softmax_n <W_u x_p, W_v y_n>. Shape (HW, HW).
Tensor attention_matrix(const Tensor& x, const Tensor& y, const NonLocalWeights& w);

/// z_p = x_p + W_z sum_n A(p, n) W_g y_n.
///
/// The full HW x HW attention matrix is materialised, so memory grows as
/// (H*W)^2 doubles: 8 MB at 32x32, 512 MB at 90x90. Callers tile large frames.
Tensor nonlocal_forward(const Tensor& x, const Tensor& y, const NonLocalWeights& w);

}  // namespace dnln
