#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "cmfd/autodiff.hpp"

namespace cmfd::oracle {

struct GradCheckOptions {
  double step = 1e-5;
  // Entries checked per parameter tensor; 0 checks every entry. When limited,
  // the entry with the largest analytic gradient is always included.
  std::size_t max_entries = 0;
  std::uint64_t seed = 1;
  // Denominator floor of the relative error.
  double floor = 1e-6;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "param[index]: analytic vs numeric"
  std::size_t checked = 0;
};

using LossFn = std::function<Var<double>(Graph<double>&)>;

// Compares reverse-mode gradients of `loss` against central finite
// differences. `loss` must rebuild its graph from the current parameter
// values on every call.
GradCheckReport check_gradients(const LossFn& loss, std::span<Parameter<double>* const> params,
                                const GradCheckOptions& opts = {});

}  // namespace cmfd::oracle
