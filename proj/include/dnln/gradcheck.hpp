#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dnln/tensor.hpp"

namespace dnln {

inline constexpr double kPrimitiveTolerance = 1e-6;
inline constexpr double kCompositeTolerance = 1e-5;

struct GradcheckOptions {
  double eps = 1e-6;             // central-difference step
  std::size_t max_probes = 256;  // sampled elements per input tensor
};

/// Outcome of comparing analytic and central-difference gradients of
/// sum(r * f(inputs)) for a fixed random r. The error of one element is
/// |a - n| / max(|a|, |n|, 1e-2 * max|n| over all probes).
struct GradcheckResult {
  std::string name;
  double tolerance = 0;
  double max_error = 0;
  std::size_t checked = 0;
  std::string worst;  // input and flat index of the largest error
  bool pass() const { return checked > 0 && max_error <= tolerance; }
};

struct NamedInput {
  std::string name;
  Tensor tensor;  // leaf with requires_grad set
};

GradcheckResult check_gradients(std::string name, const std::function<Tensor()>& f, const std::vector<NamedInput>& inputs,
                                double tolerance, std::mt19937_64& rng, const GradcheckOptions& opts = {});

/// Names accepted by run_gradcheck, "all" excluded.
const std::vector<std::string>& gradcheck_components();

/// Runs the suite for one component (or "all"). Unknown names throw
/// std::invalid_argument.
std::vector<GradcheckResult> run_gradcheck(std::string_view component, std::uint64_t seed);

}  // namespace dnln
