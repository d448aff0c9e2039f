#pragma once

#include <algorithm>
#include <string>

#include "cmfd/ops.hpp"
#include "cmfd/rng.hpp"

namespace cmfd {

// A convolution with its parameters. Pointwise, depthwise and transposed
// variants differ only in how they are constructed.
template <class T>
struct ConvLayer {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  ConvOptions opts;

  Var<T> operator()(Graph<T>& g, Var<T> x) const {
    std::optional<Var<T>> b;
    if (bias) b = g.param(*bias);
    return conv2d(x, g.param(*weight), b, opts);
  }
};

template <class T>
ConvLayer<T> make_conv(ParamStore<T>& store, Rng& rng, const std::string& name, int cin, int cout, int kernel,
                       ConvOptions opts = {}, bool with_bias = true) {
  ConvLayer<T> layer;
  layer.opts = opts;
  if (!opts.transposed) {
    const int fan_in = cin / opts.groups * kernel * kernel;
    layer.weight = store.add(name + ".weight", conv_init<T>(rng, {cout, cin / opts.groups, kernel, kernel}, fan_in));
  } else {
    const int taps = std::max(1, kernel / opts.stride);
    const int fan_in = cin / opts.groups * taps * taps;
    layer.weight = store.add(name + ".weight", conv_init<T>(rng, {cin, cout / opts.groups, kernel, kernel}, fan_in));
  }
  if (with_bias) layer.bias = store.add(name + ".bias", Tensor<T>({cout}));
  return layer;
}

template <class T>
ConvLayer<T> make_pointwise(ParamStore<T>& store, Rng& rng, const std::string& name, int cin, int cout,
                            bool with_bias = true) {
  return make_conv(store, rng, name, cin, cout, 1, {}, with_bias);
}

template <class T>
ConvLayer<T> make_depthwise(ParamStore<T>& store, Rng& rng, const std::string& name, int channels, int kernel) {
  ConvOptions opts;
  opts.padding = kernel / 2;
  opts.groups = channels;
  return make_conv(store, rng, name, channels, channels, kernel, opts, true);
}

// Channel-wise layer norm applied per pixel.
template <class T>
struct NormLayer {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  Var<T> operator()(Graph<T>& g, Var<T> x) const {
    return layer_norm_channels(x, g.param(*gamma), g.param(*beta));
  }
};

template <class T>
NormLayer<T> make_norm(ParamStore<T>& store, const std::string& name, int channels) {
  return {store.add(name + ".gamma", Tensor<T>({channels}, T(1))), store.add(name + ".beta", Tensor<T>({channels}))};
}

}  // namespace cmfd
