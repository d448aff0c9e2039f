#include "cmfd/blocks.hpp"

#include <algorithm>
#include <vector>

namespace cmfd {

namespace {

template <class T>
void require_same(const char* op, Var<T> x, Var<T> y) {
  if (x.shape() != y.shape()) {
    throw ShapeError(std::string(op) + ": operands " + to_string(x.shape()) + " and " + to_string(y.shape()) +
                     " differ");
  }
}

template <class T>
void require_channels(const char* op, Var<T> x, int channels) {
  if (x.shape().size() != 4 || x.dim(1) != channels) {
    throw ShapeError(std::string(op) + " expects N x " + std::to_string(channels) + " x H x W, got " +
                     to_string(x.shape()));
  }
}

// deeper must be exactly half of shallow in both spatial dims.
template <class T>
void require_half(const char* op, Var<T> shallow, Var<T> deeper) {
  if (deeper.shape().size() != 4 || shallow.shape().size() != 4 || deeper.dim(0) != shallow.dim(0) ||
      deeper.dim(2) * 2 != shallow.dim(2) || deeper.dim(3) * 2 != shallow.dim(3)) {
    throw ShapeError(std::string(op) + ": " + to_string(deeper.shape()) + " is not half the spatial size of " +
                     to_string(shallow.shape()));
  }
}

}  // namespace

template <class T>
Exchanged<T> row_exchange(Var<T> x, Var<T> y) {
  require_same("row_exchange", x, y);
  return {interleave(x, y, InterleaveAxis::rows), interleave(y, x, InterleaveAxis::rows)};
}

template <class T>
Exchanged<T> column_exchange(Var<T> x, Var<T> y) {
  require_same("column_exchange", x, y);
  return {interleave(x, y, InterleaveAxis::cols), interleave(y, x, InterleaveAxis::cols)};
}

template <class T>
AttentionParams<T> make_attention(ParamStore<T>& store, Rng& rng, const std::string& name, int channels,
                                  int reduction, AttentionKind kind, int spatial_kernel) {
  AttentionParams<T> p;
  p.kind = kind;
  p.channels = channels;
  const int hidden = std::max(1, channels / std::max(1, reduction));
  p.mlp_down = make_pointwise(store, rng, name + ".mlp_down", channels, hidden);
  p.mlp_up = make_pointwise(store, rng, name + ".mlp_up", hidden, channels);
  ConvOptions sp;
  sp.padding = spatial_kernel / 2;
  p.spatial = make_conv(store, rng, name + ".spatial", 2, 1, spatial_kernel, sp);
  if (kind == AttentionKind::gab) p.raw_lambda = store.add(name + ".raw_lambda", Tensor<T>({1}));
  return p;
}

template <class T>
Var<T> channel_weights(Graph<T>& g, Var<T> m, const AttentionParams<T>& p) {
  require_channels("attention", m, p.channels);
  auto mlp = [&](Var<T> v) { return p.mlp_up(g, relu(p.mlp_down(g, v))); };
  return sigmoid(add(mlp(reduce(m, Reduction::mean, ReduceAxes::spatial)),
                     mlp(reduce(m, Reduction::max, ReduceAxes::spatial))));
}

template <class T>
Var<T> spatial_weights(Graph<T>& g, Var<T> m, const AttentionParams<T>& p) {
  require_channels("attention", m, p.channels);
  const std::vector<Var<T>> pooled{reduce(m, Reduction::mean, ReduceAxes::channel),
                                   reduce(m, Reduction::max, ReduceAxes::channel)};
  return sigmoid(p.spatial(g, concat_channels<T>(pooled)));
}

template <class T>
Var<T> gab_combine(Var<T> m, Var<T> wc, Var<T> ws, Var<T> lambda) {
  const Shape& shape = m.shape();
  Var<T> w = add(mul(expand(wc, shape), affine(lambda, -1.0, 1.0)), mul(expand(ws, shape), lambda));
  return add(mul(w, m), m);
}

template <class T>
Var<T> gab(Graph<T>& g, Var<T> m, const AttentionParams<T>& p) {
  if (!p.raw_lambda) throw std::invalid_argument("gab: attention block has no lambda parameter");
  return gab_combine(m, channel_weights(g, m, p), spatial_weights(g, m, p), sigmoid(g.param(*p.raw_lambda)));
}

template <class T>
Var<T> cbam(Graph<T>& g, Var<T> m, const AttentionParams<T>& p) {
  Var<T> refined = mul(m, channel_weights(g, m, p));
  return mul(refined, spatial_weights(g, refined, p));
}

template <class T>
Var<T> attend(Graph<T>& g, Var<T> m, const AttentionParams<T>& p) {
  return p.kind == AttentionKind::gab ? gab(g, m, p) : cbam(g, m, p);
}

template <class T>
MsaParams<T> make_msa(ParamStore<T>& store, Rng& rng, const std::string& name, int channels, int shuffle_groups,
                      int reduction, AttentionKind kind) {
  if (shuffle_groups < 1 || (2 * channels) % shuffle_groups != 0) {
    throw std::invalid_argument("msa: shuffle groups " + std::to_string(shuffle_groups) + " do not divide " +
                                std::to_string(2 * channels) + " channels");
  }
  MsaParams<T> p;
  p.channels = channels;
  p.shuffle_groups = shuffle_groups;
  p.attention = make_attention(store, rng, name + ".att", channels, reduction, kind);
  p.expand = make_pointwise(store, rng, name + ".expand", channels, 2 * channels);
  p.dw3 = make_depthwise(store, rng, name + ".dw3", 2 * channels, 3);
  p.dw5 = make_depthwise(store, rng, name + ".dw5", 2 * channels, 5);
  p.dw7 = make_depthwise(store, rng, name + ".dw7", 2 * channels, 7);
  p.reduce = make_pointwise(store, rng, name + ".reduce", 2 * channels, channels);
  return p;
}

template <class T>
Var<T> msa(Graph<T>& g, Var<T> s, const MsaParams<T>& p) {
  require_channels("msa", s, p.channels);
  Var<T> o = p.expand(g, attend(g, s, p.attention));
  Var<T> mixed = add(add(p.dw3(g, o), p.dw5(g, o)), p.dw7(g, o));
  return p.reduce(g, channel_shuffle(mixed, p.shuffle_groups));
}

template <class T>
CmdParams<T> make_cmd(ParamStore<T>& store, Rng& rng, const std::string& name, int channels, int deeper_channels,
                      const VssConfig& vss, int reduction, AttentionKind kind, bool full) {
  CmdParams<T> p;
  p.channels = channels;
  p.full = full;
  p.align = make_pointwise(store, rng, name + ".align", deeper_channels, channels);
  if (!full) return p;
  const char* tags[4] = {"row_s", "row_d", "col_s", "col_d"};
  for (std::size_t k = 0; k < 4; ++k) p.vss[k] = make_vss_scan_params(store, rng, name + ".vss_" + tags[k], channels, vss);
  p.fuse_rows = make_pointwise(store, rng, name + ".fuse_rows", channels, channels);
  p.fuse_cols = make_pointwise(store, rng, name + ".fuse_cols", channels, channels);
  p.att_rows = make_attention(store, rng, name + ".att_rows", channels, reduction, kind);
  p.att_cols = make_attention(store, rng, name + ".att_cols", channels, reduction, kind);
  p.out_pw1 = make_pointwise(store, rng, name + ".out_pw1", channels, channels);
  p.out_dw = make_depthwise(store, rng, name + ".out_dw", channels, 3);
  p.out_pw2 = make_pointwise(store, rng, name + ".out_pw2", channels, channels);
  return p;
}

template <class T>
Var<T> cmd_upsample(Graph<T>& g, Var<T> shallow, Var<T> deeper, const CmdParams<T>& p) {
  require_half("cmd", shallow, deeper);
  Var<T> up = p.align(g, upsample_bilinear(deeper, 2));
  require_channels("cmd", shallow, up.dim(1));
  return up;
}

template <class T>
Var<T> cmd(Graph<T>& g, Var<T> shallow, Var<T> deeper, const CmdParams<T>& p) {
  require_channels("cmd", shallow, p.channels);
  Var<T> up = cmd_upsample(g, shallow, deeper, p);
  if (!p.full) return add(up, shallow);
  auto rows = row_exchange(shallow, up);
  auto cols = column_exchange(shallow, up);
  Var<T> r = add(vss_scan_block(g, rows.s, p.vss[0]), vss_scan_block(g, rows.d, p.vss[1]));
  Var<T> c = add(vss_scan_block(g, cols.s, p.vss[2]), vss_scan_block(g, cols.d, p.vss[3]));
  Var<T> b1 = attend(g, p.fuse_rows(g, r), p.att_rows);
  Var<T> b2 = attend(g, p.fuse_cols(g, c), p.att_cols);
  return p.out_pw2(g, p.out_dw(g, p.out_pw1(g, add(b1, b2))));
}

template <class T>
FdParams<T> make_fd(ParamStore<T>& store, Rng& rng, const std::string& name, int c1, int c2, int c3) {
  ConvOptions dec;
  dec.stride = 2;
  dec.padding = 1;
  dec.transposed = true;
  FdParams<T> p;
  p.dec32 = make_conv(store, rng, name + ".dec32", c3, c2, 4, dec, false);
  p.dec21 = make_conv(store, rng, name + ".dec21", c2, c1, 4, dec, false);
  return p;
}

template <class T>
Var<T> fd(Graph<T>& g, Var<T> cmd1, Var<T> cmd2, Var<T> cmd3, const FdParams<T>& p) {
  require_half("fd", cmd2, cmd3);
  require_half("fd", cmd1, cmd2);
  Var<T> up3 = p.dec32(g, cmd3);
  require_same("fd", up3, cmd2);
  Var<T> g23 = add(mul(up3, cmd2), cmd2);
  Var<T> up2 = p.dec21(g, g23);
  require_same("fd", up2, cmd1);
  return add(mul(up2, cmd1), cmd1);
}

template <class T>
EncoderParams<T> make_encoder(ParamStore<T>& store, Rng& rng, const std::string& name, int in_channels,
                              const std::array<int, 4>& channels) {
  EncoderParams<T> p;
  ConvOptions patch;
  patch.stride = 4;
  p.patch = make_conv(store, rng, name + ".patch", in_channels, channels[0], 4, patch);
  p.patch_norm = make_norm(store, name + ".patch_norm", channels[0]);
  ConvOptions down;
  down.stride = 2;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string sn = name + ".stage" + std::to_string(s + 2);
    auto& st = p.stages[s];
    st.down = make_conv(store, rng, sn + ".down", channels[s], channels[s + 1], 2, down);
    st.norm = make_norm(store, sn + ".norm", channels[s + 1]);
    for (std::size_t b = 0; b < 2; ++b) {
      const std::string bn = sn + ".block" + std::to_string(b);
      st.blocks[b].dw = make_depthwise(store, rng, bn + ".dw", channels[s + 1], 3);
      st.blocks[b].norm = make_norm(store, bn + ".norm", channels[s + 1]);
      st.blocks[b].pw = make_pointwise(store, rng, bn + ".pw", channels[s + 1], channels[s + 1]);
    }
  }
  return p;
}

template <class T>
std::array<Var<T>, 4> encoder(Graph<T>& g, Var<T> image, const EncoderParams<T>& p) {
  const int cin = p.patch.weight->value.dim(1);
  if (image.shape().size() != 4 || image.dim(1) != cin) {
    throw ShapeError("encoder expects N x " + std::to_string(cin) + " x H x W, got " + to_string(image.shape()));
  }
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0) {
    throw ShapeError("encoder input " + to_string(image.shape()) + " must have spatial size divisible by 32");
  }
  std::array<Var<T>, 4> out;
  out[0] = p.patch_norm(g, p.patch(g, image));
  for (std::size_t s = 0; s < 3; ++s) {
    const auto& st = p.stages[s];
    Var<T> x = st.norm(g, st.down(g, out[s]));
    for (const auto& b : st.blocks) x = add(x, b.pw(g, silu(b.norm(g, b.dw(g, x)))));
    out[s + 1] = x;
  }
  return out;
}

#define CMFD_INSTANTIATE_BLOCKS(T)                                                                             \
  template Exchanged<T> row_exchange(Var<T>, Var<T>);                                                        \
  template Exchanged<T> column_exchange(Var<T>, Var<T>);                                                     \
  template AttentionParams<T> make_attention(ParamStore<T>&, Rng&, const std::string&, int, int,             \
                                             AttentionKind, int);                                            \
  template Var<T> channel_weights(Graph<T>&, Var<T>, const AttentionParams<T>&);                             \
  template Var<T> spatial_weights(Graph<T>&, Var<T>, const AttentionParams<T>&);                             \
  template Var<T> gab_combine(Var<T>, Var<T>, Var<T>, Var<T>);                                               \
  template Var<T> gab(Graph<T>&, Var<T>, const AttentionParams<T>&);                                         \
  template Var<T> cbam(Graph<T>&, Var<T>, const AttentionParams<T>&);                                        \
  template Var<T> attend(Graph<T>&, Var<T>, const AttentionParams<T>&);                                      \
  template MsaParams<T> make_msa(ParamStore<T>&, Rng&, const std::string&, int, int, int, AttentionKind);    \
  template Var<T> msa(Graph<T>&, Var<T>, const MsaParams<T>&);                                               \
  template CmdParams<T> make_cmd(ParamStore<T>&, Rng&, const std::string&, int, int, const VssConfig&, int,  \
                                 AttentionKind, bool);                                                       \
  template Var<T> cmd_upsample(Graph<T>&, Var<T>, Var<T>, const CmdParams<T>&);                              \
  template Var<T> cmd(Graph<T>&, Var<T>, Var<T>, const CmdParams<T>&);                                       \
  template FdParams<T> make_fd(ParamStore<T>&, Rng&, const std::string&, int, int, int);                     \
  template Var<T> fd(Graph<T>&, Var<T>, Var<T>, Var<T>, const FdParams<T>&);                                 \
  template EncoderParams<T> make_encoder(ParamStore<T>&, Rng&, const std::string&, int,                      \
                                         const std::array<int, 4>&);                                         \
  template std::array<Var<T>, 4> encoder(Graph<T>&, Var<T>, const EncoderParams<T>&);

CMFD_INSTANTIATE_BLOCKS(float)
CMFD_INSTANTIATE_BLOCKS(double)

}  // namespace cmfd
