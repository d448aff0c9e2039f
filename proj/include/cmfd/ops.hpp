#pragma once

#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "cmfd/autodiff.hpp"

namespace cmfd {

// Differentiable operators. Every op records itself on the graph owning its
// first input. Binary ops broadcast `b` into `a` (right-aligned, each dim of
// `b` is 1 or equal); `a` is never broadcast.

enum class Elementwise { add, sub, mul, div };

template <class T>
Var<T> elementwise(Elementwise kind, Var<T> a, Var<T> b);

template <class T>
Var<T> add(Var<T> a, Var<T> b) { return elementwise(Elementwise::add, a, b); }
template <class T>
Var<T> sub(Var<T> a, Var<T> b) { return elementwise(Elementwise::sub, a, b); }
template <class T>
Var<T> mul(Var<T> a, Var<T> b) { return elementwise(Elementwise::mul, a, b); }
template <class T>
Var<T> div(Var<T> a, Var<T> b) { return elementwise(Elementwise::div, a, b); }

// scale * x + shift with constant scalars.
template <class T>
Var<T> affine(Var<T> x, double scale, double shift);

// Broadcast x to `shape`; the backward pass sums over broadcast axes.
template <class T>
Var<T> expand(Var<T> x, const Shape& shape);

// Sum-reduce x down to a broadcast-compatible `shape` (adjoint of expand).
template <class T>
Var<T> sum_to(Var<T> x, const Shape& shape);

template <class T>
Var<T> sum(Var<T> x);
template <class T>
Var<T> mean(Var<T> x);

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
  bool transposed = false;
};

// Cross-correlation over N x C x H x W. Weight layout is (C_out, C_in/groups,
// kH, kW) for regular convolution and (C_in, C_out/groups, kH, kW) when
// transposed. Bias, when given, has shape (C_out).
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> bias, ConvOptions opts);

// Output spatial extent of a convolution along one axis; throws ShapeError
// when the kernel does not fit the padded input.
int conv_output_size(int in, int kernel, const ConvOptions& opts);

// Half-pixel-centre bilinear resampling (corner-unaligned), edge-clamped.
template <class T>
Var<T> resize_bilinear(Var<T> x, int out_h, int out_w);
template <class T>
Var<T> upsample_bilinear(Var<T> x, int factor);

// Output channel j*groups+g takes input channel g*(C/groups)+j.
template <class T>
Var<T> channel_shuffle(Var<T> x, int groups);

enum class Reduction { mean, max };
enum class ReduceAxes { spatial, channel };

// spatial: N x C x 1 x 1; channel: N x 1 x H x W. Max routes its gradient to
// the first maximum in row-major order.
template <class T>
Var<T> reduce(Var<T> x, Reduction kind, ReduceAxes over);

enum class Activation { sigmoid, relu, silu, softplus };

template <class T>
Var<T> activation(Var<T> x, Activation kind);

template <class T>
Var<T> sigmoid(Var<T> x) { return activation(x, Activation::sigmoid); }
template <class T>
Var<T> relu(Var<T> x) { return activation(x, Activation::relu); }
template <class T>
Var<T> silu(Var<T> x) { return activation(x, Activation::silu); }
template <class T>
Var<T> softplus(Var<T> x) { return activation(x, Activation::softplus); }

template <class T>
Var<T> concat_channels(std::type_identity_t<std::span<const Var<T>>> parts);

// Per-pixel normalisation across channels with affine gamma/beta of shape (C).
template <class T>
Var<T> layer_norm_channels(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5);

enum class InterleaveAxis { rows, cols };

// Even rows (cols) from `even`, odd rows (cols) from `odd`.
template <class T>
Var<T> interleave(Var<T> even, Var<T> odd, InterleaveAxis axis);

// N x C x H x W -> N x C x L with out[..., t] = x[..., order[t]] (flat H*W index).
template <class T>
Var<T> flatten_by_order(Var<T> x, std::span<const int> order);

// Inverse of flatten_by_order: N x C x L -> N x C x H x W.
template <class T>
Var<T> unflatten_by_order(Var<T> seq, std::span<const int> order, int height, int width);

// Mean binary cross-entropy of logits against a constant target in [0,1].
template <class T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& target);

}  // namespace cmfd
