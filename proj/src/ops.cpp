#include "cmfd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "conv_kernels.hpp"

namespace cmfd {

namespace {

template <class T>
Graph<T>& graph_of(const Var<T>& v) {
  if (!v.valid()) throw std::invalid_argument("operation on an unrecorded variable");
  return *v.graph;
}

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) {
    throw ShapeError(std::string(op) + " expects an N x C x H x W tensor, got " + to_string(s));
  }
}

void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  bool ok = b.size() <= a.size();
  for (std::size_t i = 0; ok && i < b.size(); ++i) {
    const int bd = b[b.size() - 1 - i];
    const int ad = a[a.size() - 1 - i];
    ok = bd == 1 || bd == ad;
  }
  if (!ok) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

// Calls f(index_in_a, index_in_b) for every element of `a`, with `b`
// broadcast into `a`.
template <class F>
void broadcast_for_each(const Shape& a, const Shape& b, F&& f) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  std::vector<std::size_t> bstride(static_cast<std::size_t>(ra), 0);
  std::size_t s = 1;
  for (int i = rb - 1; i >= 0; --i) {
    const int ai = ra - rb + i;
    if (b[static_cast<std::size_t>(i)] != 1) bstride[static_cast<std::size_t>(ai)] = s;
    s *= static_cast<std::size_t>(b[static_cast<std::size_t>(i)]);
  }
  const std::size_t total = numel(a);
  const int inner = a.back();
  const std::size_t inner_stride = bstride.back();
  std::vector<int> idx(static_cast<std::size_t>(ra), 0);
  std::size_t ib = 0;
  for (std::size_t ia = 0; ia < total; ia += static_cast<std::size_t>(inner)) {
    for (int k = 0; k < inner; ++k) f(ia + static_cast<std::size_t>(k), ib + static_cast<std::size_t>(k) * inner_stride);
    for (int d = ra - 2; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      ib += bstride[du];
      if (idx[du] < a[du]) break;
      ib -= bstride[du] * static_cast<std::size_t>(a[du]);
      idx[du] = 0;
    }
  }
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T stable_softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> elementwise(Elementwise kind, Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of(a);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  check_broadcast(av.shape(), bv.shape(), "elementwise");
  Tensor<T> out(av.shape());
  const T* pa = av.ptr();
  const T* pb = bv.ptr();
  T* po = out.ptr();
  auto apply = [&](auto op) {
    if (av.shape() == bv.shape()) {
      for (std::size_t i = 0; i < av.size(); ++i) po[i] = op(pa[i], pb[i]);
    } else if (bv.size() == 1) {
      const T s = pb[0];
      for (std::size_t i = 0; i < av.size(); ++i) po[i] = op(pa[i], s);
    } else {
      broadcast_for_each(av.shape(), bv.shape(), [&](std::size_t i, std::size_t j) { po[i] = op(pa[i], pb[j]); });
    }
  };
  switch (kind) {
    case Elementwise::add: apply([](T x, T y) { return x + y; }); break;
    case Elementwise::sub: apply([](T x, T y) { return x - y; }); break;
    case Elementwise::mul: apply([](T x, T y) { return x * y; }); break;
    case Elementwise::div: apply([](T x, T y) { return x / y; }); break;
  }
  const int ia = a.id, ib = b.id;
  return g.record("elementwise", std::move(out), {ia, ib}, [kind, ia, ib](Graph<T>& gr, const Tensor<T>& dy) {
    const Tensor<T>& av = gr.value(ia);
    const Tensor<T>& bv = gr.value(ib);
    const T* pa = av.ptr();
    const T* pb = bv.ptr();
    const T* pd = dy.ptr();
    const bool need_a = gr.requires_grad(ia);
    const bool need_b = gr.requires_grad(ib);
    T* ga = need_a ? gr.grad(ia).ptr() : nullptr;
    T* gb = need_b ? gr.grad(ib).ptr() : nullptr;
    broadcast_for_each(av.shape(), bv.shape(), [&](std::size_t i, std::size_t j) {
      switch (kind) {
        case Elementwise::add:
          if (ga) ga[i] += pd[i];
          if (gb) gb[j] += pd[i];
          break;
        case Elementwise::sub:
          if (ga) ga[i] += pd[i];
          if (gb) gb[j] -= pd[i];
          break;
        case Elementwise::mul:
          if (ga) ga[i] += pd[i] * pb[j];
          if (gb) gb[j] += pd[i] * pa[i];
          break;
        case Elementwise::div:
          if (ga) ga[i] += pd[i] / pb[j];
          if (gb) gb[j] -= pd[i] * pa[i] / (pb[j] * pb[j]);
          break;
      }
    });
  });
}

template <class T>
Var<T> affine(Var<T> x, double scale, double shift) {
  Graph<T>& g = graph_of(x);
  Tensor<T> out = x.value();
  const T s = static_cast<T>(scale), t = static_cast<T>(shift);
  for (T& v : out.data()) v = s * v + t;
  const int ix = x.id;
  return g.record("affine", std::move(out), {ix}, [ix, s](Graph<T>& gr, const Tensor<T>& dy) {
    T* gx = gr.grad(ix).ptr();
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += s * dy[i];
  });
}

template <class T>
Var<T> expand(Var<T> x, const Shape& shape) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  check_broadcast(shape, xv.shape(), "expand");
  Tensor<T> out(shape);
  const T* px = xv.ptr();
  T* po = out.ptr();
  broadcast_for_each(shape, xv.shape(), [&](std::size_t i, std::size_t j) { po[i] = px[j]; });
  const int ix = x.id;
  return g.record("expand", std::move(out), {ix}, [ix](Graph<T>& gr, const Tensor<T>& dy) {
    Tensor<T>& gx = gr.grad(ix);
    T* pg = gx.ptr();
    const T* pd = dy.ptr();
    broadcast_for_each(dy.shape(), gx.shape(), [&](std::size_t i, std::size_t j) { pg[j] += pd[i]; });
  });
}

template <class T>
Var<T> sum_to(Var<T> x, const Shape& shape) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  check_broadcast(xv.shape(), shape, "sum_to");
  Tensor<T> out(shape);
  const T* px = xv.ptr();
  T* po = out.ptr();
  broadcast_for_each(xv.shape(), shape, [&](std::size_t i, std::size_t j) { po[j] += px[i]; });
  const int ix = x.id;
  return g.record("sum_to", std::move(out), {ix}, [ix](Graph<T>& gr, const Tensor<T>& dy) {
    Tensor<T>& gx = gr.grad(ix);
    T* pg = gx.ptr();
    const T* pd = dy.ptr();
    broadcast_for_each(gx.shape(), dy.shape(), [&](std::size_t i, std::size_t j) { pg[i] += pd[j]; });
  });
}

template <class T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = graph_of(x);
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  const int ix = x.id;
  return g.record("sum", Tensor<T>({1}, acc), {ix}, [ix](Graph<T>& gr, const Tensor<T>& dy) {
    const T d = dy[0];
    for (T& v : gr.grad(ix).data()) v += d;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  return affine(sum(x), 1.0 / static_cast<double>(x.value().size()), 0.0);
}

// ---------------------------------------------------------------- convolution

int conv_output_size(int in, int kernel, const ConvOptions& opts) {
  if (opts.stride < 1) throw ShapeError("convolution stride must be >= 1");
  if (opts.padding < 0) throw ShapeError("convolution padding must be >= 0");
  if (opts.transposed) {
    const int out = (in - 1) * opts.stride - 2 * opts.padding + kernel;
    if (out < 1) throw ShapeError("transposed convolution yields a non-positive output size");
    return out;
  }
  if (in + 2 * opts.padding < kernel) {
    throw ShapeError("negative output dimension: kernel " + std::to_string(kernel) +
                     " exceeds padded input " + std::to_string(in + 2 * opts.padding));
  }
  return (in + 2 * opts.padding - kernel) / opts.stride + 1;
}

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> bias, ConvOptions opts) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require_rank4(xv.shape(), "conv2d");
  if (wv.rank() != 4) throw ShapeError("conv2d weight must be rank 4, got " + to_string(wv.shape()));
  if (opts.groups < 1) throw ShapeError("conv2d groups must be >= 1");
  const int n = xv.dim(0), cx = xv.dim(1), hx = xv.dim(2), wx = xv.dim(3);
  const int kh = wv.dim(2), kw = wv.dim(3);
  int cout;
  if (!opts.transposed) {
    cout = wv.dim(0);
    if (cx % opts.groups || cout % opts.groups) {
      throw ShapeError("conv2d channels " + std::to_string(cx) + "->" + std::to_string(cout) +
                       " not divisible by groups " + std::to_string(opts.groups));
    }
    if (wv.dim(1) != cx / opts.groups) {
      throw ShapeError("conv2d weight " + to_string(wv.shape()) + " incompatible with input " + to_string(xv.shape()));
    }
  } else {
    if (wv.dim(0) != cx || cx % opts.groups) {
      throw ShapeError("transposed conv2d weight " + to_string(wv.shape()) + " incompatible with input " +
                       to_string(xv.shape()) + " and groups " + std::to_string(opts.groups));
    }
    cout = wv.dim(1) * opts.groups;
  }
  const int ho = conv_output_size(hx, kh, opts);
  const int wo = conv_output_size(wx, kw, opts);
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != cout)) {
    throw ShapeError("conv2d bias shape " + to_string(bias->value().shape()) + " does not match " +
                     std::to_string(cout) + " output channels");
  }

  // Geometry of the underlying regular convolution (large side = "in").
  detail::ConvGeom geom{};
  if (!opts.transposed) {
    geom = {n, cx, hx, wx, cout, ho, wo, kh, kw, opts.stride, opts.padding, opts.groups};
  } else {
    geom = {n, cout, ho, wo, cx, hx, wx, kh, kw, opts.stride, opts.padding, opts.groups};
  }

  Tensor<T> out({n, cout, ho, wo});
  if (!opts.transposed) {
    detail::conv_forward(xv.ptr(), wv.ptr(), out.ptr(), geom);
  } else {
    detail::conv_backward_input(xv.ptr(), wv.ptr(), out.ptr(), geom);
  }
  if (bias) {
    const T* pb = bias->value().ptr();
    const std::size_t plane = static_cast<std::size_t>(ho) * wo;
    T* po = out.ptr();
    for (int b = 0; b < n; ++b) {
      for (int c = 0; c < cout; ++c) {
        T* row = po + (static_cast<std::size_t>(b) * cout + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) row[k] += pb[c];
      }
    }
  }

  const int ix = x.id, iw = w.id, ib = bias ? bias->id : -1;
  const bool transposed = opts.transposed;
  std::vector<int> inputs{ix, iw};
  if (ib >= 0) inputs.push_back(ib);
  return g.record("conv2d", std::move(out), std::move(inputs),
                  [ix, iw, ib, geom, transposed](Graph<T>& gr, const Tensor<T>& dy) {
                    const Tensor<T>& xv = gr.value(ix);
                    const Tensor<T>& wv = gr.value(iw);
                    if (gr.requires_grad(ix)) {
                      T* gx = gr.grad(ix).ptr();
                      if (!transposed) {
                        detail::conv_backward_input(dy.ptr(), wv.ptr(), gx, geom);
                      } else {
                        detail::conv_forward(dy.ptr(), wv.ptr(), gx, geom);
                      }
                    }
                    if (gr.requires_grad(iw)) {
                      T* gw = gr.grad(iw).ptr();
                      if (!transposed) {
                        detail::conv_backward_weight(xv.ptr(), dy.ptr(), gw, geom);
                      } else {
                        detail::conv_backward_weight(dy.ptr(), xv.ptr(), gw, geom);
                      }
                    }
                    if (ib >= 0 && gr.requires_grad(ib)) {
                      T* gb = gr.grad(ib).ptr();
                      const int nb = dy.dim(0), c = dy.dim(1);
                      const std::size_t plane = static_cast<std::size_t>(dy.dim(2)) * dy.dim(3);
                      const T* pd = dy.ptr();
                      for (int b = 0; b < nb; ++b) {
                        for (int k = 0; k < c; ++k) {
                          const T* row = pd + (static_cast<std::size_t>(b) * c + k) * plane;
                          T acc = 0;
                          for (std::size_t j = 0; j < plane; ++j) acc += row[j];
                          gb[k] += acc;
                        }
                      }
                    }
                  });
}

// ---------------------------------------------------------------- resampling

namespace {

struct AxisTaps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

AxisTaps half_pixel_taps(int in, int out) {
  AxisTaps taps;
  taps.lo.resize(static_cast<std::size_t>(out));
  taps.hi.resize(static_cast<std::size_t>(out));
  taps.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const auto ou = static_cast<std::size_t>(o);
    taps.lo[ou] = i0;
    taps.hi[ou] = i1;
    taps.frac[ou] = src - i0;
  }
  return taps;
}

}  // namespace

template <class T>
Var<T> resize_bilinear(Var<T> x, int out_h, int out_w) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  require_rank4(xv.shape(), "resize_bilinear");
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear target must be positive");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  auto ty = std::make_shared<AxisTaps>(half_pixel_taps(h, out_h));
  auto tx = std::make_shared<AxisTaps>(half_pixel_taps(w, out_w));
  Tensor<T> out({n, c, out_h, out_w});
  const T* px = xv.ptr();
  T* po = out.ptr();
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = px + p * h * w;
    T* dst = po + p * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty->frac[oy]);
      const T* r0 = src + static_cast<std::size_t>(ty->lo[oy]) * w;
      const T* r1 = src + static_cast<std::size_t>(ty->hi[oy]) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx->frac[ox]);
        const int x0 = tx->lo[ox], x1 = tx->hi[ox];
        const T top = r0[x0] + fx * (r0[x1] - r0[x0]);
        const T bot = r1[x0] + fx * (r1[x1] - r1[x0]);
        dst[static_cast<std::size_t>(oy) * out_w + ox] = top + fy * (bot - top);
      }
    }
  }
  const int ix = x.id;
  return g.record("resize_bilinear", std::move(out), {ix}, [ix, ty, tx, h, w](Graph<T>& gr, const Tensor<T>& dy) {
    T* gx = gr.grad(ix).ptr();
    const int oh = dy.dim(2), ow = dy.dim(3);
    const std::size_t planes = static_cast<std::size_t>(dy.dim(0)) * dy.dim(1);
    const T* pd = dy.ptr();
    for (std::size_t p = 0; p < planes; ++p) {
      T* dst = gx + p * h * w;
      const T* src = pd + p * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const T fy = static_cast<T>(ty->frac[oy]);
        T* r0 = dst + static_cast<std::size_t>(ty->lo[oy]) * w;
        T* r1 = dst + static_cast<std::size_t>(ty->hi[oy]) * w;
        for (int ox = 0; ox < ow; ++ox) {
          const T fx = static_cast<T>(tx->frac[ox]);
          const int x0 = tx->lo[ox], x1 = tx->hi[ox];
          const T d = src[static_cast<std::size_t>(oy) * ow + ox];
          r0[x0] += d * (1 - fy) * (1 - fx);
          r0[x1] += d * (1 - fy) * fx;
          r1[x0] += d * fy * (1 - fx);
          r1[x1] += d * fy * fx;
        }
      }
    }
  });
}

template <class T>
Var<T> upsample_bilinear(Var<T> x, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample factor must be >= 1, got " + std::to_string(factor));
  require_rank4(x.shape(), "upsample_bilinear");
  return resize_bilinear(x, x.dim(2) * factor, x.dim(3) * factor);
}

// ---------------------------------------------------------------- permutations

template <class T>
Var<T> channel_shuffle(Var<T> x, int groups) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  require_rank4(xv.shape(), "channel_shuffle");
  const int n = xv.dim(0), c = xv.dim(1);
  if (groups < 1 || c % groups) {
    throw ShapeError("channel_shuffle: " + std::to_string(c) + " channels not divisible by " +
                     std::to_string(groups) + " groups");
  }
  const int per = c / groups;
  const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor<T> out(xv.shape());
  // src channel of output channel j*groups + grp is grp*per + j
  auto src_of = [groups, per](int oc) { return (oc % groups) * per + oc / groups; };
  for (int b = 0; b < n; ++b) {
    for (int oc = 0; oc < c; ++oc) {
      const T* s = xv.ptr() + (static_cast<std::size_t>(b) * c + src_of(oc)) * plane;
      std::copy(s, s + plane, out.ptr() + (static_cast<std::size_t>(b) * c + oc) * plane);
    }
  }
  const int ix = x.id;
  return g.record("channel_shuffle", std::move(out), {ix}, [ix, n, c, plane, src_of](Graph<T>& gr, const Tensor<T>& dy) {
    T* gx = gr.grad(ix).ptr();
    for (int b = 0; b < n; ++b) {
      for (int oc = 0; oc < c; ++oc) {
        const T* s = dy.ptr() + (static_cast<std::size_t>(b) * c + oc) * plane;
        T* d = gx + (static_cast<std::size_t>(b) * c + src_of(oc)) * plane;
        for (std::size_t k = 0; k < plane; ++k) d[k] += s[k];
      }
    }
  });
}

template <class T>
Var<T> interleave(Var<T> even, Var<T> odd, InterleaveAxis axis) {
  Graph<T>& g = graph_of(even);
  const Tensor<T>& ev = even.value();
  const Tensor<T>& ov = odd.value();
  require_rank4(ev.shape(), "interleave");
  if (ev.shape() != ov.shape()) {
    throw ShapeError("pixel exchange: shape mismatch " + to_string(ev.shape()) + " vs " + to_string(ov.shape()));
  }
  const int h = ev.dim(2), w = ev.dim(3);
  const bool rows = axis == InterleaveAxis::rows;
  Tensor<T> out(ev.shape());
  const std::size_t total = ev.size();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto pick_even = [rows, w, plane](std::size_t i) {
    const std::size_t within = i % plane;
    const std::size_t idx = rows ? within / static_cast<std::size_t>(w) : within % static_cast<std::size_t>(w);
    return idx % 2 == 0;
  };
  for (std::size_t i = 0; i < total; ++i) out[i] = pick_even(i) ? ev[i] : ov[i];
  const int ie = even.id, io = odd.id;
  return g.record("interleave", std::move(out), {ie, io}, [ie, io, pick_even](Graph<T>& gr, const Tensor<T>& dy) {
    T* ge = gr.requires_grad(ie) ? gr.grad(ie).ptr() : nullptr;
    T* go = gr.requires_grad(io) ? gr.grad(io).ptr() : nullptr;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (pick_even(i)) {
        if (ge) ge[i] += dy[i];
      } else if (go) {
        go[i] += dy[i];
      }
    }
  });
}

template <class T>
Var<T> flatten_by_order(Var<T> x, std::span<const int> order) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  require_rank4(xv.shape(), "flatten_by_order");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  if (order.size() != plane) {
    throw ShapeError("scan order length " + std::to_string(order.size()) + " does not match spatial size " +
                     to_string(xv.shape()));
  }
  auto idx = std::make_shared<std::vector<int>>(order.begin(), order.end());
  Tensor<T> out({n, c, static_cast<int>(plane)});
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* s = xv.ptr() + p * plane;
    T* d = out.ptr() + p * plane;
    for (std::size_t t = 0; t < plane; ++t) d[t] = s[(*idx)[t]];
  }
  const int ix = x.id;
  return g.record("flatten_by_order", std::move(out), {ix}, [ix, idx, planes, plane](Graph<T>& gr, const Tensor<T>& dy) {
    T* gx = gr.grad(ix).ptr();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* s = dy.ptr() + p * plane;
      T* d = gx + p * plane;
      for (std::size_t t = 0; t < plane; ++t) d[(*idx)[t]] += s[t];
    }
  });
}

template <class T>
Var<T> unflatten_by_order(Var<T> seq, std::span<const int> order, int height, int width) {
  Graph<T>& g = graph_of(seq);
  const Tensor<T>& sv = seq.value();
  if (sv.rank() != 3) throw ShapeError("unflatten_by_order expects N x C x L, got " + to_string(sv.shape()));
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (static_cast<std::size_t>(sv.dim(2)) != plane || order.size() != plane) {
    throw ShapeError("unflatten_by_order: sequence " + to_string(sv.shape()) + " does not match " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  auto idx = std::make_shared<std::vector<int>>(order.begin(), order.end());
  const int n = sv.dim(0), c = sv.dim(1);
  Tensor<T> out({n, c, height, width});
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* s = sv.ptr() + p * plane;
    T* d = out.ptr() + p * plane;
    for (std::size_t t = 0; t < plane; ++t) d[(*idx)[t]] = s[t];
  }
  const int is = seq.id;
  return g.record("unflatten_by_order", std::move(out), {is}, [is, idx, planes, plane](Graph<T>& gr, const Tensor<T>& dy) {
    T* gs = gr.grad(is).ptr();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* s = dy.ptr() + p * plane;
      T* d = gs + p * plane;
      for (std::size_t t = 0; t < plane; ++t) d[t] += s[(*idx)[t]];
    }
  });
}

template <class T>
Var<T> concat_channels(std::type_identity_t<std::span<const Var<T>>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels needs at least one input");
  Graph<T>& g = graph_of(parts[0]);
  const Shape& s0 = parts[0].shape();
  require_rank4(s0, "concat_channels");
  int total_c = 0;
  for (const Var<T>& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_channels: shape mismatch " + to_string(s0) + " vs " + to_string(s));
    }
    total_c += s[1];
  }
  const int n = s0[0];
  const std::size_t plane = static_cast<std::size_t>(s0[2]) * s0[3];
  Tensor<T> out({n, total_c, s0[2], s0[3]});
  std::vector<int> ids, chans;
  int offset = 0;
  for (const Var<T>& p : parts) {
    const int c = p.dim(1);
    for (int b = 0; b < n; ++b) {
      const T* s = p.value().ptr() + static_cast<std::size_t>(b) * c * plane;
      std::copy(s, s + c * plane, out.ptr() + (static_cast<std::size_t>(b) * total_c + offset) * plane);
    }
    ids.push_back(p.id);
    chans.push_back(c);
    offset += c;
  }
  return g.record("concat_channels", std::move(out), ids, [ids, chans, n, total_c, plane](Graph<T>& gr, const Tensor<T>& dy) {
    int off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const int c = chans[k];
      if (gr.requires_grad(ids[k])) {
        T* gp = gr.grad(ids[k]).ptr();
        for (int b = 0; b < n; ++b) {
          const T* s = dy.ptr() + (static_cast<std::size_t>(b) * total_c + off) * plane;
          T* d = gp + static_cast<std::size_t>(b) * c * plane;
          for (std::size_t j = 0; j < c * plane; ++j) d[j] += s[j];
        }
      }
      off += c;
    }
  });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> reduce(Var<T> x, Reduction kind, ReduceAxes over) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  require_rank4(xv.shape(), "reduce");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const bool spatial = over == ReduceAxes::spatial;
  Tensor<T> out(spatial ? Shape{n, c, 1, 1} : Shape{n, 1, h, w});
  // For max: flat index of the winning element for every output.
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (kind == Reduction::max) argmax->resize(out.size());
  const T* px = xv.ptr();
  if (spatial) {
    for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
      const T* s = px + p * plane;
      if (kind == Reduction::mean) {
        T acc = 0;
        for (std::size_t k = 0; k < plane; ++k) acc += s[k];
        out[p] = acc / static_cast<T>(plane);
      } else {
        std::size_t best = 0;
        for (std::size_t k = 1; k < plane; ++k) {
          if (s[k] > s[best]) best = k;
        }
        out[p] = s[best];
        (*argmax)[p] = p * plane + best;
      }
    }
  } else {
    for (int b = 0; b < n; ++b) {
      for (std::size_t k = 0; k < plane; ++k) {
        const std::size_t o = static_cast<std::size_t>(b) * plane + k;
        const std::size_t base = static_cast<std::size_t>(b) * c * plane + k;
        if (kind == Reduction::mean) {
          T acc = 0;
          for (int ch = 0; ch < c; ++ch) acc += px[base + ch * plane];
          out[o] = acc / static_cast<T>(c);
        } else {
          std::size_t best = base;
          for (int ch = 1; ch < c; ++ch) {
            if (px[base + ch * plane] > px[best]) best = base + ch * plane;
          }
          out[o] = px[best];
          (*argmax)[o] = best;
        }
      }
    }
  }
  const int ix = x.id;
  return g.record("reduce", std::move(out), {ix},
                  [ix, kind, spatial, n, c, plane, argmax](Graph<T>& gr, const Tensor<T>& dy) {
                    T* gx = gr.grad(ix).ptr();
                    if (kind == Reduction::max) {
                      for (std::size_t o = 0; o < dy.size(); ++o) gx[(*argmax)[o]] += dy[o];
                      return;
                    }
                    if (spatial) {
                      const T inv = T(1) / static_cast<T>(plane);
                      for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
                        const T d = dy[p] * inv;
                        T* s = gx + p * plane;
                        for (std::size_t k = 0; k < plane; ++k) s[k] += d;
                      }
                    } else {
                      const T inv = T(1) / static_cast<T>(c);
                      for (int b = 0; b < n; ++b) {
                        for (std::size_t k = 0; k < plane; ++k) {
                          const T d = dy[static_cast<std::size_t>(b) * plane + k] * inv;
                          const std::size_t base = static_cast<std::size_t>(b) * c * plane + k;
                          for (int ch = 0; ch < c; ++ch) gx[base + ch * plane] += d;
                        }
                      }
                    }
                  });
}

// ---------------------------------------------------------------- activations

template <class T>
Var<T> activation(Var<T> x, Activation kind) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  const T* px = xv.ptr();
  T* po = out.ptr();
  const std::size_t total = xv.size();
  switch (kind) {
    case Activation::sigmoid:
      for (std::size_t i = 0; i < total; ++i) po[i] = stable_sigmoid(px[i]);
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < total; ++i) po[i] = px[i] > 0 ? px[i] : T(0);
      break;
    case Activation::silu:
      for (std::size_t i = 0; i < total; ++i) po[i] = px[i] * stable_sigmoid(px[i]);
      break;
    case Activation::softplus:
      for (std::size_t i = 0; i < total; ++i) po[i] = stable_softplus(px[i]);
      break;
  }
  const int ix = x.id;
  return g.record("activation", std::move(out), {ix}, [ix, kind](Graph<T>& gr, const Tensor<T>& dy) {
    const T* px = gr.value(ix).ptr();
    T* gx = gr.grad(ix).ptr();
    const std::size_t total = dy.size();
    switch (kind) {
      case Activation::sigmoid:
        for (std::size_t i = 0; i < total; ++i) {
          const T s = stable_sigmoid(px[i]);
          gx[i] += dy[i] * s * (1 - s);
        }
        break;
      case Activation::relu:
        for (std::size_t i = 0; i < total; ++i) gx[i] += px[i] > 0 ? dy[i] : T(0);
        break;
      case Activation::silu:
        for (std::size_t i = 0; i < total; ++i) {
          const T s = stable_sigmoid(px[i]);
          gx[i] += dy[i] * s * (1 + px[i] * (1 - s));
        }
        break;
      case Activation::softplus:
        for (std::size_t i = 0; i < total; ++i) gx[i] += dy[i] * stable_sigmoid(px[i]);
        break;
    }
  });
}

// ---------------------------------------------------------------- normalisation

template <class T>
Var<T> layer_norm_channels(Var<T> x, Var<T> gamma, Var<T> beta, double eps) {
  Graph<T>& g = graph_of(x);
  const Tensor<T>& xv = x.value();
  require_rank4(xv.shape(), "layer_norm_channels");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c)) {
    throw ShapeError("layer_norm_channels: affine parameters do not match " + std::to_string(c) + " channels");
  }
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * plane);
  Tensor<T> out(xv.shape());
  const T* px = xv.ptr();
  const T* pg = gamma.value().ptr();
  const T* pb = beta.value().ptr();
  for (int b = 0; b < n; ++b) {
    for (std::size_t k = 0; k < plane; ++k) {
      const std::size_t base = static_cast<std::size_t>(b) * c * plane + k;
      T mu = 0;
      for (int ch = 0; ch < c; ++ch) mu += px[base + ch * plane];
      mu /= static_cast<T>(c);
      T var = 0;
      for (int ch = 0; ch < c; ++ch) {
        const T d = px[base + ch * plane] - mu;
        var += d * d;
      }
      var /= static_cast<T>(c);
      const T r = T(1) / std::sqrt(var + static_cast<T>(eps));
      (*rstd)[static_cast<std::size_t>(b) * plane + k] = r;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t i = base + ch * plane;
        const T xh = (px[i] - mu) * r;
        (*xhat)[i] = xh;
        out[i] = pg[ch] * xh + pb[ch];
      }
    }
  }
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return g.record("layer_norm", std::move(out), {ix, ig, ib},
                  [ix, ig, ib, n, c, plane, xhat, rstd](Graph<T>& gr, const Tensor<T>& dy) {
                    const T* pg = gr.value(ig).ptr();
                    T* gx = gr.requires_grad(ix) ? gr.grad(ix).ptr() : nullptr;
                    T* gg = gr.requires_grad(ig) ? gr.grad(ig).ptr() : nullptr;
                    T* gb = gr.requires_grad(ib) ? gr.grad(ib).ptr() : nullptr;
                    const T inv_c = T(1) / static_cast<T>(c);
                    for (int b = 0; b < n; ++b) {
                      for (std::size_t k = 0; k < plane; ++k) {
                        const std::size_t base = static_cast<std::size_t>(b) * c * plane + k;
                        T sum_d = 0, sum_dx = 0;
                        for (int ch = 0; ch < c; ++ch) {
                          const std::size_t i = base + ch * plane;
                          const T d = dy[i] * pg[ch];
                          sum_d += d;
                          sum_dx += d * (*xhat)[i];
                          if (gg) gg[ch] += dy[i] * (*xhat)[i];
                          if (gb) gb[ch] += dy[i];
                        }
                        if (!gx) continue;
                        const T r = (*rstd)[static_cast<std::size_t>(b) * plane + k];
                        for (int ch = 0; ch < c; ++ch) {
                          const std::size_t i = base + ch * plane;
                          const T d = dy[i] * pg[ch];
                          gx[i] += r * (d - inv_c * sum_d - (*xhat)[i] * inv_c * sum_dx);
                        }
                      }
                    }
                  });
}

// ---------------------------------------------------------------- losses

template <class T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& target) {
  Graph<T>& g = graph_of(logits);
  const Tensor<T>& zv = logits.value();
  if (zv.shape() != target.shape()) {
    throw ShapeError("bce_with_logits: shape mismatch " + to_string(zv.shape()) + " vs " + to_string(target.shape()));
  }
  T acc = 0;
  for (std::size_t i = 0; i < zv.size(); ++i) {
    const T z = zv[i];
    acc += std::max(z, T(0)) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const T inv = T(1) / static_cast<T>(zv.size());
  auto tgt = std::make_shared<Tensor<T>>(target);
  const int iz = logits.id;
  return g.record("bce_with_logits", Tensor<T>({1}, acc * inv), {iz}, [iz, tgt, inv](Graph<T>& gr, const Tensor<T>& dy) {
    const T* pz = gr.value(iz).ptr();
    T* gz = gr.grad(iz).ptr();
    const T d = dy[0] * inv;
    for (std::size_t i = 0; i < tgt->size(); ++i) gz[i] += d * (stable_sigmoid(pz[i]) - (*tgt)[i]);
  });
}

#define CMFD_INSTANTIATE_OPS(T)                                                             \
  template Var<T> elementwise(Elementwise, Var<T>, Var<T>);                                 \
  template Var<T> affine(Var<T>, double, double);                                           \
  template Var<T> expand(Var<T>, const Shape&);                                             \
  template Var<T> sum_to(Var<T>, const Shape&);                                             \
  template Var<T> sum(Var<T>);                                                              \
  template Var<T> mean(Var<T>);                                                             \
  template Var<T> conv2d(Var<T>, Var<T>, std::optional<Var<T>>, ConvOptions);               \
  template Var<T> resize_bilinear(Var<T>, int, int);                                        \
  template Var<T> upsample_bilinear(Var<T>, int);                                           \
  template Var<T> channel_shuffle(Var<T>, int);                                             \
  template Var<T> reduce(Var<T>, Reduction, ReduceAxes);                                    \
  template Var<T> activation(Var<T>, Activation);                                           \
  template Var<T> concat_channels(std::span<const Var<T>>);                                 \
  template Var<T> layer_norm_channels(Var<T>, Var<T>, Var<T>, double);                      \
  template Var<T> interleave(Var<T>, Var<T>, InterleaveAxis);                               \
  template Var<T> flatten_by_order(Var<T>, std::span<const int>);                           \
  template Var<T> unflatten_by_order(Var<T>, std::span<const int>, int, int);               \
  template Var<T> bce_with_logits(Var<T>, const Tensor<T>&);

CMFD_INSTANTIATE_OPS(float)
CMFD_INSTANTIATE_OPS(double)

}  // namespace cmfd
