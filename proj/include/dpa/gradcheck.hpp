#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dpa/tape.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

/// Builds a scalar loss on `tape` from leaves bound to the current inputs.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradcheckResult {
  std::string name;
  double worst = 0.0;  // worst per-coordinate relative error
  double tolerance = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Central differences with step h = relative_step * max(|x|, 1) per
/// coordinate. Per-coordinate error is |a - n| / max(|a|, |n|, floor).
struct GradcheckOptions {
  double relative_step = 1e-6;
  double floor = 1e-8;
};

GradcheckResult check_gradient(const std::string& name, const LossBuilder& build, std::vector<Tensor> inputs,
                               double tolerance, const GradcheckOptions& options = {});

struct GradcheckSuite {
  std::vector<GradcheckResult> primitives;  // tolerance 1e-5
  std::vector<GradcheckResult> composed;    // tolerance 1e-4
  bool passed() const;
};

/// Every tape primitive, the margin loss with respect to input, backbone and
/// head, and the aggregated attack loss with respect to input and hook nodes.
GradcheckSuite run_gradcheck_suite(std::uint64_t seed = 7);

/// A custom op whose backward rule drops a factor of two; must fail.
GradcheckResult corrupted_rule_control(std::uint64_t seed = 7);

}  // namespace dpa
