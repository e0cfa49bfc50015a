#include "dnln/nonlocal.hpp"

#include <stdexcept>

namespace dnln {

namespace {

void check_inputs(const Tensor& x, const Tensor& y, const NonLocalWeights& w) {
  if (x.rank() != 3 || x.shape() != y.shape()) {
    throw std::invalid_argument("nonlocal: x " + shape_str(x.shape()) + " and y " + shape_str(y.shape()) +
                                " must be equal (C,H,W)");
  }
  for (const ConvKernel* k : {&w.u, &w.v, &w.g, &w.z}) {
    k->validate();
    if (k->size() != 1) throw std::invalid_argument("nonlocal: projections must be 1x1");
  }
  if (w.u.in_channels() != x.dim(0) || w.v.in_channels() != x.dim(0) || w.g.in_channels() != x.dim(0) ||
      w.z.out_channels() != x.dim(0) || w.z.in_channels() != w.g.out_channels() ||
      w.u.out_channels() != w.v.out_channels()) {
    throw std::invalid_argument("nonlocal: projection widths do not match features " + shape_str(x.shape()));
  }
}

Tensor flatten(const Tensor& t) { return reshape(t, {t.dim(0), t.dim(1) * t.dim(2)}); }

}  // namespace

Tensor attention_matrix(const Tensor& x, const Tensor& y, const NonLocalWeights& w) {
  check_inputs(x, y, w);
  Tensor u = flatten(conv2d(x, w.u));  // (E, P)
  Tensor v = flatten(conv2d(y, w.v));  // (E, P)
  return softmax(matmul(transpose(u), v), 1);
}

Tensor nonlocal_forward(const Tensor& x, const Tensor& y, const NonLocalWeights& w) {
  Tensor attn = attention_matrix(x, y, w);  // (P, P)
  Tensor g = flatten(conv2d(y, w.g));       // (E, P)
  Tensor agg = matmul(g, transpose(attn));  // agg(e, p) = sum_n g(e, n) A(p, n)
  agg = reshape(agg, {agg.dim(0), x.dim(1), x.dim(2)});
  return add(x, conv2d(agg, w.z));
}

}  // namespace dnln
