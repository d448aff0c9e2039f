#pragma once

#include <array>
#include <string>

#include "cmfd/scan.hpp"

namespace cmfd {

template <class T>
struct Exchanged {
  Var<T> s;
  Var<T> d;
};

// s: even rows of x, odd rows of y. d: even rows of y, odd rows of x.
template <class T>
Exchanged<T> row_exchange(Var<T> x, Var<T> y);
template <class T>
Exchanged<T> column_exchange(Var<T> x, Var<T> y);

enum class AttentionKind { gab, cbam };

// Channel weights from a shared bottleneck over mean/max pooled features and
// spatial weights from a kxk conv over channel mean/max. GAB mixes the two in
// parallel through lambda = sigmoid(raw_lambda); CBAM applies them in series.
template <class T>
struct AttentionParams {
  AttentionKind kind = AttentionKind::gab;
  int channels = 0;
  ConvLayer<T> mlp_down;
  ConvLayer<T> mlp_up;
  ConvLayer<T> spatial;
  Parameter<T>* raw_lambda = nullptr;  // gab only
};

template <class T>
AttentionParams<T> make_attention(ParamStore<T>& store, Rng& rng, const std::string& name, int channels,
                                  int reduction, AttentionKind kind, int spatial_kernel = 7);

template <class T>
Var<T> channel_weights(Graph<T>& g, Var<T> m, const AttentionParams<T>& p);  // N x C x 1 x 1
template <class T>
Var<T> spatial_weights(Graph<T>& g, Var<T> m, const AttentionParams<T>& p);  // N x 1 x H x W

// (1 - lambda) * wc + lambda * ws broadcast to m, then w * m + m.
template <class T>
Var<T> gab_combine(Var<T> m, Var<T> wc, Var<T> ws, Var<T> lambda);

template <class T>
Var<T> gab(Graph<T>& g, Var<T> m, const AttentionParams<T>& p);
template <class T>
Var<T> cbam(Graph<T>& g, Var<T> m, const AttentionParams<T>& p);
// Dispatches on p.kind.
template <class T>
Var<T> attend(Graph<T>& g, Var<T> m, const AttentionParams<T>& p);

template <class T>
struct MsaParams {
  int channels = 0;
  int shuffle_groups = 4;
  AttentionParams<T> attention;
  ConvLayer<T> expand;  // C -> 2C
  ConvLayer<T> dw3;
  ConvLayer<T> dw5;
  ConvLayer<T> dw7;
  ConvLayer<T> reduce;  // 2C -> C
};

template <class T>
MsaParams<T> make_msa(ParamStore<T>& store, Rng& rng, const std::string& name, int channels, int shuffle_groups,
                      int reduction, AttentionKind kind);

template <class T>
Var<T> msa(Graph<T>& g, Var<T> s, const MsaParams<T>& p);

template <class T>
struct CmdParams {
  int channels = 0;
  bool full = true;  // false: aligned deeper map + shallow map only
  ConvLayer<T> align;  // C' -> C after the x2 upsample
  std::array<VssScanParams<T>, 4> vss;  // row s, row d, col s, col d
  ConvLayer<T> fuse_rows;
  ConvLayer<T> fuse_cols;
  AttentionParams<T> att_rows;
  AttentionParams<T> att_cols;
  ConvLayer<T> out_pw1;
  ConvLayer<T> out_dw;
  ConvLayer<T> out_pw2;
};

template <class T>
CmdParams<T> make_cmd(ParamStore<T>& store, Rng& rng, const std::string& name, int channels, int deeper_channels,
                      const VssConfig& vss, int reduction, AttentionKind kind, bool full = true);

// Upsample the deeper map x2 and align its channels to `shallow`.
template <class T>
Var<T> cmd_upsample(Graph<T>& g, Var<T> shallow, Var<T> deeper, const CmdParams<T>& p);

template <class T>
Var<T> cmd(Graph<T>& g, Var<T> shallow, Var<T> deeper, const CmdParams<T>& p);

template <class T>
struct FdParams {
  ConvLayer<T> dec32;  // stage 3 -> stage 2, transposed 4x4 stride 2
  ConvLayer<T> dec21;  // stage 2 -> stage 1
};

template <class T>
FdParams<T> make_fd(ParamStore<T>& store, Rng& rng, const std::string& name, int c1, int c2, int c3);

template <class T>
Var<T> fd(Graph<T>& g, Var<T> cmd1, Var<T> cmd2, Var<T> cmd3, const FdParams<T>& p);

template <class T>
struct ResidualDw {
  ConvLayer<T> dw;
  NormLayer<T> norm;
  ConvLayer<T> pw;
};

template <class T>
struct EncoderStage {
  ConvLayer<T> down;
  NormLayer<T> norm;
  std::array<ResidualDw<T>, 2> blocks;
};

template <class T>
struct EncoderParams {
  ConvLayer<T> patch;
  NormLayer<T> patch_norm;
  std::array<EncoderStage<T>, 3> stages;
};

template <class T>
EncoderParams<T> make_encoder(ParamStore<T>& store, Rng& rng, const std::string& name, int in_channels,
                              const std::array<int, 4>& channels);

// Feature pyramid at strides 4, 8, 16, 32.
template <class T>
std::array<Var<T>, 4> encoder(Graph<T>& g, Var<T> image, const EncoderParams<T>& p);

}  // namespace cmfd
