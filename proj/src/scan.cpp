#include "cmfd/scan.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace cmfd {

std::string_view variant_name(ScanVariant v) {
  switch (v) {
    case ScanVariant::anti_diag_tl: return "anti_diag_tl";
    case ScanVariant::anti_diag_br: return "anti_diag_br";
    case ScanVariant::main_diag_tr: return "main_diag_tr";
    case ScanVariant::main_diag_bl: return "main_diag_bl";
  }
  return "?";
}

ScanOrder build_scan_order(int height, int width, ScanVariant variant) {
  if (height < 1 || width < 1) {
    throw ShapeError("scan order needs positive dimensions, got " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  ScanOrder order;
  order.variant = variant;
  order.height = height;
  order.width = width;
  auto& fwd = order.forward;
  fwd.reserve(static_cast<std::size_t>(height) * width);
  const bool anti = variant == ScanVariant::anti_diag_tl || variant == ScanVariant::anti_diag_br;
  if (anti) {
    for (int d = 0; d <= height + width - 2; ++d) {
      for (int r = std::max(0, d - (width - 1)); r <= std::min(height - 1, d); ++r) {
        fwd.push_back(r * width + (d - r));
      }
    }
  } else {
    for (int k = width - 1; k >= -(height - 1); --k) {
      for (int r = std::max(0, -k); r < height && r + k < width; ++r) {
        fwd.push_back(r * width + (r + k));
      }
    }
  }
  if (variant == ScanVariant::anti_diag_br || variant == ScanVariant::main_diag_bl) {
    std::reverse(fwd.begin(), fwd.end());
  }
  order.inverse.assign(fwd.size(), 0);
  for (std::size_t t = 0; t < fwd.size(); ++t) order.inverse[static_cast<std::size_t>(fwd[t])] = static_cast<int>(t);
  return order;
}

template <class T>
Var<T> selective_scan(Var<T> u, Var<T> delta, Var<T> a_log, Var<T> b, Var<T> c, Var<T> d) {
  Graph<T>& g = *u.graph;
  const Tensor<T>& uv = u.value();
  const Tensor<T>& dv = delta.value();
  const Tensor<T>& av = a_log.value();
  const Tensor<T>& bv = b.value();
  const Tensor<T>& cv = c.value();
  const Tensor<T>& Dv = d.value();
  if (uv.rank() != 3 || dv.shape() != uv.shape()) {
    throw ShapeError("selective_scan: u " + to_string(uv.shape()) + " and delta " + to_string(dv.shape()) +
                     " must both be N x C x L");
  }
  const int n = uv.dim(0), ch = uv.dim(1), len = uv.dim(2);
  if (av.rank() != 2 || av.dim(0) != ch) {
    throw ShapeError("selective_scan: a_log " + to_string(av.shape()) + " must be C x S with C=" + std::to_string(ch));
  }
  const int st = av.dim(1);
  const Shape bc_shape{n, st, len};
  if (bv.shape() != bc_shape || cv.shape() != bc_shape) {
    throw ShapeError("selective_scan: B " + to_string(bv.shape()) + " / C " + to_string(cv.shape()) + " must be " +
                     to_string(bc_shape));
  }
  if (Dv.rank() != 1 || Dv.dim(0) != ch) {
    throw ShapeError("selective_scan: D " + to_string(Dv.shape()) + " must have " + std::to_string(ch) + " entries");
  }

  const auto L = static_cast<std::size_t>(len);
  const auto S = static_cast<std::size_t>(st);
  // Hidden states for every step, laid out (N, C, L, S), kept for backward.
  auto hs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * ch * L * S);
  Tensor<T> out(uv.shape());
  std::vector<T> decay_rate(S), h(S);
  for (int bi = 0; bi < n; ++bi) {
    const T* bb = bv.ptr() + static_cast<std::size_t>(bi) * S * L;
    const T* cc = cv.ptr() + static_cast<std::size_t>(bi) * S * L;
    for (int ci = 0; ci < ch; ++ci) {
      const std::size_t row = (static_cast<std::size_t>(bi) * ch + ci) * L;
      const T* uu = uv.ptr() + row;
      const T* dt = dv.ptr() + row;
      T* y = out.ptr() + row;
      T* hrow = hs->data() + row * S;
      for (std::size_t s = 0; s < S; ++s) {
        decay_rate[s] = std::exp(av[static_cast<std::size_t>(ci) * S + s]);
        h[s] = 0;
      }
      const T dskip = Dv[static_cast<std::size_t>(ci)];
      for (std::size_t t = 0; t < L; ++t) {
        const T du = dt[t] * uu[t];
        T acc = dskip * uu[t];
        for (std::size_t s = 0; s < S; ++s) {
          h[s] = std::exp(-decay_rate[s] * dt[t]) * h[s] + du * bb[s * L + t];
          acc += cc[s * L + t] * h[s];
          hrow[t * S + s] = h[s];
        }
        y[t] = acc;
      }
    }
  }

  const int iu = u.id, idl = delta.id, ia = a_log.id, ib = b.id, ic = c.id, id = d.id;
  return g.record(
      "selective_scan", std::move(out), {iu, idl, ia, ib, ic, id},
      [=](Graph<T>& gr, const Tensor<T>& dy) {
        const Tensor<T>& uv = gr.value(iu);
        const Tensor<T>& dv = gr.value(idl);
        const Tensor<T>& av = gr.value(ia);
        const Tensor<T>& bv = gr.value(ib);
        const Tensor<T>& cv = gr.value(ic);
        const Tensor<T>& Dv = gr.value(id);
        T* gu = gr.requires_grad(iu) ? gr.grad(iu).ptr() : nullptr;
        T* gdl = gr.requires_grad(idl) ? gr.grad(idl).ptr() : nullptr;
        T* ga = gr.requires_grad(ia) ? gr.grad(ia).ptr() : nullptr;
        T* gb = gr.requires_grad(ib) ? gr.grad(ib).ptr() : nullptr;
        T* gc = gr.requires_grad(ic) ? gr.grad(ic).ptr() : nullptr;
        T* gD = gr.requires_grad(id) ? gr.grad(id).ptr() : nullptr;
        std::vector<T> rate(S), carry(S);
        for (int bi = 0; bi < n; ++bi) {
          const std::size_t bc_off = static_cast<std::size_t>(bi) * S * L;
          const T* bb = bv.ptr() + bc_off;
          const T* cc = cv.ptr() + bc_off;
          for (int ci = 0; ci < ch; ++ci) {
            const std::size_t row = (static_cast<std::size_t>(bi) * ch + ci) * L;
            const T* uu = uv.ptr() + row;
            const T* dt = dv.ptr() + row;
            const T* gy = dy.ptr() + row;
            const T* hrow = hs->data() + row * S;
            for (std::size_t s = 0; s < S; ++s) {
              rate[s] = std::exp(av[static_cast<std::size_t>(ci) * S + s]);
              carry[s] = 0;  // dLoss/dh_t flowing back from later steps
            }
            const T dskip = Dv[static_cast<std::size_t>(ci)];
            for (std::size_t t = L; t-- > 0;) {
              T g_u = dskip * gy[t];
              T g_dt = 0;
              if (gD) gD[ci] += uu[t] * gy[t];
              for (std::size_t s = 0; s < S; ++s) {
                const T ht = hrow[t * S + s];
                const T hprev = t > 0 ? hrow[(t - 1) * S + s] : T(0);
                if (gc) gc[bc_off + s * L + t] += ht * gy[t];
                const T gh = carry[s] + cc[s * L + t] * gy[t];
                const T decay = std::exp(-rate[s] * dt[t]);
                const T bst = bb[s * L + t];
                // d decay / d dt = -rate * decay ; d decay / d a_log = -dt * rate * decay
                const T g_decay = gh * hprev;
                g_dt += g_decay * (-rate[s] * decay) + gh * bst * uu[t];
                if (ga) ga[static_cast<std::size_t>(ci) * S + s] += g_decay * (-dt[t] * rate[s] * decay);
                if (gb) gb[bc_off + s * L + t] += gh * dt[t] * uu[t];
                g_u += gh * dt[t] * bst;
                carry[s] = gh * decay;
              }
              if (gu) gu[row + t] += g_u;
              if (gdl) gdl[row + t] += g_dt;
            }
          }
        }
      });
}

template <class T>
SsmParams<T> make_ssm_params(ParamStore<T>& store, Rng& rng, const std::string& name, int inner, int state_size,
                             int dt_rank) {
  SsmParams<T> p;
  p.dt_in = make_pointwise(store, rng, name + ".dt_in", inner, dt_rank, false);
  p.dt_out = make_pointwise(store, rng, name + ".dt_out", dt_rank, inner, true);
  // Step sizes start log-uniform in [1e-3, 1e-1] through an inverse-softplus bias.
  for (T& v : p.dt_out.bias->value.data()) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  p.b_proj = make_pointwise(store, rng, name + ".b_proj", inner, state_size, false);
  p.c_proj = make_pointwise(store, rng, name + ".c_proj", inner, state_size, false);
  Tensor<T> a_log({inner, state_size});
  for (int e = 0; e < inner; ++e) {
    for (int s = 0; s < state_size; ++s) {
      a_log[static_cast<std::size_t>(e) * state_size + s] = static_cast<T>(std::log(s + 1.0));
    }
  }
  p.a_log = store.add(name + ".a_log", std::move(a_log));
  p.d = store.add(name + ".d", Tensor<T>({inner}, T(1)));
  return p;
}

template <class T>
VssScanParams<T> make_vss_scan_params(ParamStore<T>& store, Rng& rng, const std::string& name, int channels,
                                      const VssConfig& cfg) {
  VssScanParams<T> p;
  p.channels = channels;
  p.inner = cfg.expand * channels;
  const int dt_rank = cfg.dt_rank > 0 ? cfg.dt_rank : (p.inner + 15) / 16;
  p.norm_in = make_norm(store, name + ".norm_in", channels);
  p.in_proj = make_pointwise(store, rng, name + ".in_proj", channels, p.inner);
  p.gate_proj = make_pointwise(store, rng, name + ".gate_proj", channels, p.inner);
  p.dw = make_depthwise(store, rng, name + ".dw", p.inner, 3);
  for (std::size_t k = 0; k < kScanVariants.size(); ++k) {
    p.paths[k] = make_ssm_params(store, rng, name + ".ssm." + std::string(variant_name(kScanVariants[k])), p.inner,
                                 cfg.state_size, dt_rank);
  }
  p.norm_out = make_norm(store, name + ".norm_out", p.inner);
  p.out_proj = make_pointwise(store, rng, name + ".out_proj", p.inner, channels);
  return p;
}

template <class T>
Var<T> ss2d_path(Graph<T>& g, Var<T> x, const SsmParams<T>& p, const ScanOrder& order) {
  const int h = x.dim(2), w = x.dim(3);
  if (order.height != h || order.width != w) {
    throw ShapeError("scan order " + std::to_string(order.height) + "x" + std::to_string(order.width) +
                     " does not match feature map " + to_string(x.shape()));
  }
  Var<T> delta = softplus(p.dt_out(g, p.dt_in(g, x)));
  Var<T> bm = p.b_proj(g, x);
  Var<T> cm = p.c_proj(g, x);
  const std::span<const int> fwd(order.forward);
  Var<T> y = selective_scan(flatten_by_order(x, fwd), flatten_by_order(delta, fwd), g.param(*p.a_log),
                            flatten_by_order(bm, fwd), flatten_by_order(cm, fwd), g.param(*p.d));
  return unflatten_by_order(y, fwd, h, w);
}

template <class T>
Var<T> ss2d_diagonal(Graph<T>& g, Var<T> x, const std::array<SsmParams<T>, 4>& paths) {
  const int h = x.dim(2), w = x.dim(3);
  Var<T> total;
  for (std::size_t k = 0; k < kScanVariants.size(); ++k) {
    const ScanOrder order = build_scan_order(h, w, kScanVariants[k]);
    Var<T> y = ss2d_path(g, x, paths[k], order);
    total = k == 0 ? y : add(total, y);
  }
  return total;
}

template <class T>
Var<T> vss_scan_block(Graph<T>& g, Var<T> x, const VssScanParams<T>& p) {
  if (x.shape().size() != 4 || x.dim(1) != p.channels) {
    throw ShapeError("vss_scan_block expects " + std::to_string(p.channels) + " channels, got " + to_string(x.shape()));
  }
  Var<T> h = p.norm_in(g, x);
  Var<T> content = silu(p.dw(g, p.in_proj(g, h)));
  Var<T> gate = silu(p.gate_proj(g, h));
  Var<T> y = p.norm_out(g, ss2d_diagonal(g, content, p.paths));
  return add(x, p.out_proj(g, mul(y, gate)));
}

#define CMFD_INSTANTIATE_SCAN(T)                                                                              \
  template Var<T> selective_scan(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>);                             \
  template SsmParams<T> make_ssm_params(ParamStore<T>&, Rng&, const std::string&, int, int, int);            \
  template VssScanParams<T> make_vss_scan_params(ParamStore<T>&, Rng&, const std::string&, int,              \
                                                 const VssConfig&);                                           \
  template Var<T> ss2d_path(Graph<T>&, Var<T>, const SsmParams<T>&, const ScanOrder&);                        \
  template Var<T> ss2d_diagonal(Graph<T>&, Var<T>, const std::array<SsmParams<T>, 4>&);                       \
  template Var<T> vss_scan_block(Graph<T>&, Var<T>, const VssScanParams<T>&);

CMFD_INSTANTIATE_SCAN(float)
CMFD_INSTANTIATE_SCAN(double)

}  // namespace cmfd
