#pragma once

#include <array>
#include <string_view>
#include <vector>

#include "cmfd/layers.hpp"

namespace cmfd {

enum class ScanVariant { anti_diag_tl, anti_diag_br, main_diag_tr, main_diag_bl };

inline constexpr std::array<ScanVariant, 4> kScanVariants = {
    ScanVariant::anti_diag_tl, ScanVariant::anti_diag_br, ScanVariant::main_diag_tr, ScanVariant::main_diag_bl};

std::string_view variant_name(ScanVariant v);

// Bijective flattening of an H x W grid. forward[t] is the row-major pixel
// visited at sequence position t; inverse[forward[t]] == t.
struct ScanOrder {
  ScanVariant variant = ScanVariant::anti_diag_tl;
  int height = 0;
  int width = 0;
  std::vector<int> forward;
  std::vector<int> inverse;
};

// anti_diag_tl walks anti-diagonals r+c = 0,1,... with increasing r inside a
// diagonal; main_diag_tr walks diagonals c-r from W-1 down to -(H-1) with
// increasing r inside a diagonal. The *_br / *_bl variants are the exact
// reversals of those two.
ScanOrder build_scan_order(int height, int width, ScanVariant variant);

// Selective state-space recurrence over sequences, per batch item and channel:
//   h_t = exp(-exp(a_log) * delta_t) * h_{t-1} + delta_t * b_t * u_t,  h_0 = 0
//   y_t = <c_t, h_t> + d * u_t
// Shapes: u, delta (N, C, L); a_log (C, S); b, c (N, S, L); d (C).
template <class T>
Var<T> selective_scan(Var<T> u, Var<T> delta, Var<T> a_log, Var<T> b, Var<T> c, Var<T> d);

// Parameters of one selective-scan path. Delta, B and C are produced per
// token by linear maps of the token, applied in image layout before flattening.
template <class T>
struct SsmParams {
  ConvLayer<T> dt_in;    // E -> R, low-rank step input
  ConvLayer<T> dt_out;   // R -> E, with bias; softplus gives delta
  ConvLayer<T> b_proj;   // E -> S
  ConvLayer<T> c_proj;   // E -> S
  Parameter<T>* a_log = nullptr;  // (E, S)
  Parameter<T>* d = nullptr;      // (E)
};

struct VssConfig {
  int expand = 2;      // inner width = expand * channels
  int state_size = 8;
  int dt_rank = 0;     // 0: ceil(inner / 16)
};

template <class T>
struct VssScanParams {
  int channels = 0;
  int inner = 0;
  NormLayer<T> norm_in;
  ConvLayer<T> in_proj;    // C -> E content branch
  ConvLayer<T> gate_proj;  // C -> E gate branch
  ConvLayer<T> dw;         // depthwise 3x3 on E
  std::array<SsmParams<T>, 4> paths;  // one per ScanVariant, no weight sharing
  NormLayer<T> norm_out;
  ConvLayer<T> out_proj;   // E -> C
};

template <class T>
SsmParams<T> make_ssm_params(ParamStore<T>& store, Rng& rng, const std::string& name, int inner, int state_size,
                             int dt_rank);

template <class T>
VssScanParams<T> make_vss_scan_params(ParamStore<T>& store, Rng& rng, const std::string& name, int channels,
                                      const VssConfig& cfg);

// One scan path: project, flatten by `order`, scan, restore the grid.
template <class T>
Var<T> ss2d_path(Graph<T>& g, Var<T> x, const SsmParams<T>& p, const ScanOrder& order);

// Sum of the four diagonal scan paths; output shape equals input shape.
template <class T>
Var<T> ss2d_diagonal(Graph<T>& g, Var<T> x, const std::array<SsmParams<T>, 4>& paths);

// Residual block: norm -> content/gate projections -> dwconv3x3 + silu ->
// diagonal SS2D -> norm -> * silu(gate) -> projection -> + x.
template <class T>
Var<T> vss_scan_block(Graph<T>& g, Var<T> x, const VssScanParams<T>& p);

}  // namespace cmfd
