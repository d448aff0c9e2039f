#pragma once

#include <algorithm>

namespace cmfd::detail {

// Geometry of a regular cross-correlation from `in` (N, cin, hin, win) to
// `out` (N, cout, hout, wout). Transposed convolution reuses the same three
// kernels with the roles of `in` and `out` swapped.
struct ConvGeom {
  int batch, cin, hin, win, cout, hout, wout, kh, kw, stride, pad, groups;

  // 1x1 / stride 1 / no padding: treat each plane as a single row so the
  // inner loops run over H*W contiguous values.
  ConvGeom flattened() const {
    ConvGeom g = *this;
    if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
      g.win = hin * win;
      g.hin = 1;
      g.wout = hout * wout;
      g.hout = 1;
    }
    return g;
  }
};

// Output positions o in [lo, hi) whose source index o*stride - pad + k lies in
// [0, extent).
inline void valid_range(int k, int stride, int pad, int extent, int out_extent, int& lo, int& hi) {
  int a = pad - k;
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  int b = extent - 1 + pad - k;
  hi = b < 0 ? 0 : b / stride + 1;
  lo = std::min(lo, out_extent);
  hi = std::clamp(hi, lo, out_extent);
}

template <class T, class RowFn>
void conv_iterate(const ConvGeom& geom, RowFn&& row) {
  const ConvGeom g = geom.flattened();
  const int cin_g = g.cin / g.groups;
  const int cout_g = g.cout / g.groups;
  for (int n = 0; n < g.batch; ++n) {
    for (int oc = 0; oc < g.cout; ++oc) {
      const int grp = oc / cout_g;
      for (int icg = 0; icg < cin_g; ++icg) {
        const int ic = grp * cin_g + icg;
        const std::size_t in_plane = (static_cast<std::size_t>(n) * g.cin + ic) * g.hin * g.win;
        const std::size_t out_plane = (static_cast<std::size_t>(n) * g.cout + oc) * g.hout * g.wout;
        const std::size_t w_base = (static_cast<std::size_t>(oc) * cin_g + icg) * g.kh * g.kw;
        for (int ky = 0; ky < g.kh; ++ky) {
          int oy_lo, oy_hi;
          valid_range(ky, g.stride, g.pad, g.hin, g.hout, oy_lo, oy_hi);
          for (int kx = 0; kx < g.kw; ++kx) {
            int ox_lo, ox_hi;
            valid_range(kx, g.stride, g.pad, g.win, g.wout, ox_lo, ox_hi);
            if (ox_lo >= ox_hi) continue;
            const std::size_t widx = w_base + static_cast<std::size_t>(ky) * g.kw + kx;
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const int iy = oy * g.stride - g.pad + ky;
              const std::size_t out_row = out_plane + static_cast<std::size_t>(oy) * g.wout;
              const std::size_t in_row = in_plane + static_cast<std::size_t>(iy) * g.win;
              const int ix0 = ox_lo * g.stride - g.pad + kx;
              row(widx, out_row + ox_lo, in_row + ix0, ox_hi - ox_lo, g.stride);
            }
          }
        }
      }
    }
  }
}

// out += conv(in, w)
template <class T>
void conv_forward(const T* in, const T* w, T* out, const ConvGeom& geom) {
  conv_iterate<T>(geom, [&](std::size_t widx, std::size_t o, std::size_t i, int count, int stride) {
    const T wv = w[widx];
    T* op = out + o;
    const T* ip = in + i;
    if (stride == 1) {
      for (int k = 0; k < count; ++k) op[k] += wv * ip[k];
    } else {
      for (int k = 0; k < count; ++k) op[k] += wv * ip[static_cast<std::size_t>(k) * stride];
    }
  });
}

// din += conv^T(dout, w)
template <class T>
void conv_backward_input(const T* dout, const T* w, T* din, const ConvGeom& geom) {
  conv_iterate<T>(geom, [&](std::size_t widx, std::size_t o, std::size_t i, int count, int stride) {
    const T wv = w[widx];
    const T* op = dout + o;
    T* ip = din + i;
    if (stride == 1) {
      for (int k = 0; k < count; ++k) ip[k] += wv * op[k];
    } else {
      for (int k = 0; k < count; ++k) ip[static_cast<std::size_t>(k) * stride] += wv * op[k];
    }
  });
}

// dw += correlation of in with dout
template <class T>
void conv_backward_weight(const T* in, const T* dout, T* dw, const ConvGeom& geom) {
  conv_iterate<T>(geom, [&](std::size_t widx, std::size_t o, std::size_t i, int count, int stride) {
    const T* op = dout + o;
    const T* ip = in + i;
    T acc = 0;
    if (stride == 1) {
      for (int k = 0; k < count; ++k) acc += op[k] * ip[k];
    } else {
      for (int k = 0; k < count; ++k) acc += op[k] * ip[static_cast<std::size_t>(k) * stride];
    }
    dw[widx] += acc;
  });
}

}  // namespace cmfd::detail
