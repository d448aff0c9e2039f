#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cmfd::oracle {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

// Every variant on every H, W in 1..max_hw is a permutation with a matching
// inverse, and the reversal pairs hold. `corrupt` duplicates one entry of the
// anti_diag_tl table before checking.
CheckResult check_scan_bijectivity(int max_hw, bool corrupt = false);

// SS2D paths against the per-pixel recurrence on random shapes with
// L = H*W <= max_len, channels <= max_channels, batch <= max_batch.
CheckResult check_scan_oracle(int cases, int max_len, int max_channels, int max_batch, double tol,
                              std::uint64_t seed = 7);

// Finite-difference checks of every block, the loss and optionally the full
// model (64 x 64 input, tiny widths); one result per component.
std::vector<CheckResult> check_gradient_suite(double step, double tol, bool include_model, std::size_t max_entries,
                                              std::uint64_t seed = 11);

// Structural metrics against their direct-formula oracles on random pairs.
CheckResult check_metric_oracles(int cases, int size, double tol, std::uint64_t seed = 13);

// Closed-form block identities: uniform attention weights with lambda 0.5
// double the input; zero deeper features pass the shallow map through FD.
CheckResult check_block_algebra(std::uint64_t seed = 19);

// Row/column exchange involution and fixed point on random tensors.
CheckResult check_exchange_involution(std::uint64_t seed = 17);

std::vector<CheckResult> run_selfcheck(bool corrupt_scan_table = false);

std::string format_results(const std::vector<CheckResult>& results);

}  // namespace cmfd::oracle
