#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "cmfd/augment.hpp"
#include "cmfd/model.hpp"
#include "cmfd/synth.hpp"

namespace cmfd {

struct TrainConfig {
  int epochs = 150;
  int batch_size = 8;
  double lr = 1e-4;
  int lr_period = 50;  // epochs between halvings
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 5.0;  // global norm; 0 disables
  std::vector<double> head_weights{1.0, 1.0, 1.0, 1.0};  // final map, then auxiliary maps 1..3
  int max_steps = 0;  // 0: run all epochs
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// lr0 * 0.5^floor(epoch / period)
double lr_at(double lr0, int period, int epoch);
inline double lr_at(const TrainConfig& cfg, int epoch) { return lr_at(cfg.lr, cfg.lr_period, epoch); }

// Per-image soft dice loss 1 - (2<p,g> + 1) / (<p,1> + <g,1> + 1), p = sigmoid(z),
// averaged over the batch. gt is N x 1 x H x W.
template <class T>
Var<T> soft_dice_loss(Var<T> logits, const Tensor<T>& gt);

// Sum over maps of weight_i * (BCE + soft dice). Empty weights mean all ones.
template <class T>
Var<T> seg_loss(std::span<const Var<T>> maps, const Tensor<T>& gt, std::span<const double> weights = {});

template <class T>
struct OptimState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  long step = 0;
};

// Decoupled weight decay followed by a bias-corrected Adam update.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 1e-2);
  void step(double lr);
  const OptimState<T>& state() const { return state_; }

 private:
  std::vector<Parameter<T>*> params_;
  double beta1_, beta2_, eps_, wd_;
  OptimState<T> state_;
};

// Rescales all gradients so their joint L2 norm is at most max_norm; returns
// the norm before clipping.
template <class T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm);

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double train_mdice = 0;
  double val_mdice = 0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int steps = 0;
  int best_epoch = -1;
  double best_val_mdice = -1;
};

struct TrainOutputs {
  std::filesystem::path best_checkpoint;  // empty: not written
  std::filesystem::path last_checkpoint;
  std::filesystem::path log;              // JSON lines, one record per epoch
  std::function<void(const EpochLog&)> on_epoch;
};

// Stacks samples into N x 3 x H x W images and N x 1 x H x W masks.
Tensor<float> stack_images(std::span<const Sample> samples);
Tensor<float> stack_masks(std::span<const Sample> samples);

// Mean Dice of sigmoid(model) at threshold 0.5 over `samples`.
double mean_dice(const Model<float>& model, std::span<const Sample> samples, int batch_size);

// Throws NumericalError naming the first non-finite tensor when the loss or
// gradients stop being finite.
TrainResult train_loop(Model<float>& model, std::span<const Sample> train, std::span<const Sample> val,
                       const TrainConfig& cfg, const AugmentConfig& aug, const TrainOutputs& out = {});

}  // namespace cmfd
