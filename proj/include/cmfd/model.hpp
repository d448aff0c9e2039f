#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cmfd/blocks.hpp"

namespace cmfd {

struct ModelConfig {
  int input_size = 224;
  int in_channels = 3;
  std::array<int, 4> channels{16, 32, 64, 128};
  int state_size = 8;
  int vss_expand = 2;
  int shuffle_groups = 4;
  int gab_reduction = 4;
  bool use_cmd = true;
  bool use_msa = true;
  bool use_fd = true;
  AttentionKind attention = AttentionKind::gab;
  bool deep_supervision = true;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class Mode { train, infer };

template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  // Logit maps at input resolution: the final map first, then (train mode
  // with deep supervision) the auxiliary maps from decoder stages 1, 2, 3.
  std::vector<Var<T>> forward(Graph<T>& g, Var<T> image, Mode mode) const;

  // Sigmoid probabilities of the final map, evaluated without a tape.
  Tensor<T> predict(const Tensor<T>& image) const;

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  EncoderParams<T> encoder_;
  std::array<MsaParams<T>, 3> msa_;
  ConvLayer<T> seed_;
  std::array<CmdParams<T>, 3> cmd_;
  FdParams<T> fd_;
  ConvLayer<T> head_;
  std::array<ConvLayer<T>, 3> aux_heads_;
};

}  // namespace cmfd
