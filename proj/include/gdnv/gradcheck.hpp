#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gdnv/rng.hpp"

namespace gdnv {

struct GradcheckOptions {
  double eps = 1e-4;
  std::size_t max_entries = 48;  // probed entries per tensor
  double floor = 1e-5;           // denominator floor of the relative error
};

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // probes straddling a kink
};

struct GradTarget {
  std::string name;
  std::span<double> values;
  std::vector<double> analytic;
};

/// Central differences on a scalar loss against analytic gradients. A probe whose eps and eps/2
/// estimates disagree sits on a non-differentiable point and is skipped.
GradcheckResult check_gradients(const std::string& name, const std::function<double()>& loss,
                                std::vector<GradTarget>& targets, Rng& rng, const GradcheckOptions& opts = {});

/// conv2d, batchnorm, SE block, Ghost module, Ghost bottleneck, VLAD layer, triplet loss.
std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, const GradcheckOptions& opts = {});

}  // namespace gdnv
