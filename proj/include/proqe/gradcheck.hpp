#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "proqe/model.hpp"
#include "proqe/tensor.hpp"

namespace proqe {

struct GradCheckResult {
  std::string name;
  double rel_error = 0.0;  // ||g_analytic - g_numeric|| / (||g_analytic|| + ||g_numeric||)
  std::size_t scalars = 0;
  bool passed = false;
};

inline constexpr double kGradStep = 1e-5;
inline constexpr double kGradTolerance = 1e-4;

// Builds a scalar from leaf variables holding `inputs`.
using GradFn = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

// Central differences over every scalar of every input against one backward
// pass. Norm-wise relative error; when both gradients vanish the error is 0.
GradCheckResult check_gradient(std::string name, const GradFn& f, std::vector<ad::Tensor> inputs,
                               double h = kGradStep, double tol = kGradTolerance);

// One check per primitive (and per axis variant) on random small shapes.
std::vector<GradCheckResult> check_primitives(std::uint64_t seed);

// Full training loss of one 2i query at d = 8 with two neighbors per entity,
// differentiated with respect to every model parameter.
GradCheckResult check_composite(std::uint64_t seed, Backbone backbone);

}  // namespace proqe
