#include "cmfd/model.hpp"

#include <stdexcept>
#include <string>

namespace cmfd {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (input_size < 32 || input_size % 32 != 0) fail("input_size must be a positive multiple of 32");
  if (in_channels < 1) fail("in_channels must be positive");
  if (shuffle_groups < 1) fail("shuffle_groups must be positive");
  for (int c : channels) {
    if (c < 1) fail("channels must be positive");
    if ((2 * c) % shuffle_groups != 0) fail("shuffle_groups must divide twice every stage width");
  }
  if (state_size < 1) fail("state_size must be positive");
  if (vss_expand < 1) fail("vss_expand must be positive");
  if (gab_reduction < 1) fail("gab_reduction must be positive");
}

template <class T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng root(seed);
  // One stream per component so ablations keep the shared parts identical.
  Rng enc_rng = root.split(1), msa_rng = root.split(2), seed_rng = root.split(3), cmd_rng = root.split(4),
      fd_rng = root.split(5), head_rng = root.split(6);
  const auto& c = cfg_.channels;
  encoder_ = make_encoder(store_, enc_rng, "encoder", cfg_.in_channels, c);
  VssConfig vss;
  vss.expand = cfg_.vss_expand;
  vss.state_size = cfg_.state_size;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string tag = std::to_string(i + 1);
    Rng r = msa_rng.split(i);
    if (cfg_.use_msa) {
      msa_[i] = make_msa(store_, r, "msa" + tag, c[i], cfg_.shuffle_groups, cfg_.gab_reduction, cfg_.attention);
    }
  }
  seed_ = make_pointwise(store_, seed_rng, "cmd4_seed", c[3], c[3]);
  for (std::size_t i = 3; i-- > 0;) {
    Rng r = cmd_rng.split(i);
    cmd_[i] = make_cmd(store_, r, "cmd" + std::to_string(i + 1), c[i], c[i + 1], vss, cfg_.gab_reduction,
                       cfg_.attention, cfg_.use_cmd);
  }
  if (cfg_.use_fd) fd_ = make_fd(store_, fd_rng, "fd", c[0], c[1], c[2]);
  head_ = make_pointwise(store_, head_rng, "head", c[0], 1);
  if (cfg_.deep_supervision) {
    for (std::size_t i = 0; i < 3; ++i) {
      aux_heads_[i] = make_pointwise(store_, head_rng, "aux_head" + std::to_string(i + 1), c[i], 1);
    }
  }
}

template <class T>
std::vector<Var<T>> Model<T>::forward(Graph<T>& g, Var<T> image, Mode mode) const {
  const int s = cfg_.input_size;
  if (image.shape().size() != 4 || image.dim(1) != cfg_.in_channels || image.dim(2) != s || image.dim(3) != s) {
    throw ShapeError("model expects N x " + std::to_string(cfg_.in_channels) + " x " + std::to_string(s) + " x " +
                     std::to_string(s) + " input, got " + to_string(image.shape()));
  }
  const auto feats = encoder(g, image, encoder_);
  std::array<Var<T>, 3> shallow;
  for (std::size_t i = 0; i < 3; ++i) shallow[i] = cfg_.use_msa ? msa(g, feats[i], msa_[i]) : feats[i];
  std::array<Var<T>, 4> dec;
  dec[3] = seed_(g, feats[3]);
  for (std::size_t i = 3; i-- > 0;) dec[i] = cmd(g, shallow[i], dec[i + 1], cmd_[i]);
  Var<T> fused = cfg_.use_fd ? fd(g, dec[0], dec[1], dec[2], fd_) : dec[0];

  std::vector<Var<T>> out{upsample_bilinear(head_(g, fused), 4)};
  if (mode == Mode::train && cfg_.deep_supervision) {
    for (std::size_t i = 0; i < 3; ++i) out.push_back(upsample_bilinear(aux_heads_[i](g, dec[i]), 4 << i));
  }
  return out;
}

template <class T>
Tensor<T> Model<T>::predict(const Tensor<T>& image) const {
  Graph<T> g(false);
  Var<T> logits = forward(g, g.constant(image), Mode::infer).front();
  return sigmoid(logits).value();
}

template class Model<float>;
template class Model<double>;

}  // namespace cmfd
