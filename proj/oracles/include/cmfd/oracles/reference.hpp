#pragma once

#include <vector>

#include "cmfd/scan.hpp"
#include "cmfd/tensor.hpp"

// Straight-line reference implementations, written independently of the
// library's kernels, used as test oracles.
namespace cmfd::oracle {

// Scan order defined by sorting pixels on a per-variant key instead of
// walking diagonals.
std::vector<int> reference_scan_order(int height, int width, ScanVariant variant);

// Per-(batch, channel) recurrence with explicit discretisation.
Tensor<double> reference_selective_scan(const Tensor<double>& u, const Tensor<double>& delta,
                                        const Tensor<double>& a_log, const Tensor<double>& b,
                                        const Tensor<double>& c, const Tensor<double>& d);

// One SS2D path evaluated pixel by pixel along `order`: per-pixel projections
// as explicit matrix-vector products, then the recurrence.
Tensor<double> reference_ss2d_path(const Tensor<double>& x, const SsmParams<double>& p, const std::vector<int>& order);

// Direct per-pixel evaluations of the structural measures on H x W maps.
// The weighted F-measure searches all foreground pixels for the nearest one
// (ties: largest error) and smooths with a full 2-D kernel.
double reference_weighted_fbeta(const Tensor<double>& pred, const Tensor<double>& gt);
double reference_s_measure(const Tensor<double>& pred, const Tensor<double>& gt);
double reference_e_measure(const Tensor<double>& pred, const Tensor<double>& gt);

}  // namespace cmfd::oracle
