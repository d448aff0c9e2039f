#include "cmfd/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "cmfd/checkpoint.hpp"
#include "cmfd/config.hpp"
#include "cmfd/metrics.hpp"

namespace cmfd {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(lr > 0)) fail("lr must be positive");
  if (lr_period < 1) fail("lr_period must be at least 1");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (!(grad_clip >= 0)) fail("grad_clip must be non-negative");
  if (head_weights.size() != 4) fail("head_weights needs 4 entries (final, aux1, aux2, aux3)");
  for (double w : head_weights)
    if (!(w >= 0)) fail("head_weights must be non-negative");
  if (max_steps < 0) fail("max_steps must be non-negative");
}

double lr_at(double lr0, int period, int epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  return lr0 * std::pow(0.5, epoch / period);
}

template <class T>
Var<T> soft_dice_loss(Var<T> logits, const Tensor<T>& gt) {
  if (logits.shape() != gt.shape() || gt.rank() != 4) {
    throw ShapeError("soft_dice_loss: logits " + to_string(logits.shape()) + " vs target " + to_string(gt.shape()));
  }
  Graph<T>& g = *logits.graph;
  const double hw = static_cast<double>(gt.dim(2)) * gt.dim(3);
  Var<T> p = sigmoid(logits);
  Var<T> target = g.constant(gt);
  Var<T> inter = affine(reduce(mul(p, target), Reduction::mean, ReduceAxes::spatial), 2 * hw, 1.0);
  Var<T> denom = add(affine(reduce(p, Reduction::mean, ReduceAxes::spatial), hw, 1.0),
                     affine(reduce(target, Reduction::mean, ReduceAxes::spatial), hw, 0.0));
  return mean(affine(div(inter, denom), -1.0, 1.0));
}

template <class T>
Var<T> seg_loss(std::span<const Var<T>> maps, const Tensor<T>& gt, std::span<const double> weights) {
  if (maps.empty()) throw std::invalid_argument("seg_loss: no logit maps");
  if (!weights.empty() && weights.size() < maps.size()) {
    throw std::invalid_argument("seg_loss: " + std::to_string(maps.size()) + " maps but " +
                                std::to_string(weights.size()) + " weights");
  }
  Var<T> total;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].shape() != gt.shape()) {
      throw ShapeError("seg_loss: map " + to_string(maps[i].shape()) + " does not match ground truth " +
                       to_string(gt.shape()));
    }
    Var<T> term = add(bce_with_logits(maps[i], gt), soft_dice_loss(maps[i], gt));
    if (!weights.empty()) term = affine(term, weights[i], 0.0);
    total = i == 0 ? term : add(total, term);
  }
  return total;
}

template <class T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (auto* p : params_) {
    state_.m.push_back(Tensor<T>::zeros_like(p->value));
    state_.v.push_back(Tensor<T>::zeros_like(p->value));
  }
}

template <class T>
void AdamW<T>::step(double lr) {
  ++state_.step;
  const double c1 = 1 - std::pow(beta1_, static_cast<double>(state_.step));
  const double c2 = 1 - std::pow(beta2_, static_cast<double>(state_.step));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter<T>& p = *params_[k];
    if (p.grad.shape() != p.value.shape()) {
      if (!p.grad.empty()) {
        throw ShapeError("adamw: gradient " + to_string(p.grad.shape()) + " for parameter " + p.name + " " +
                         to_string(p.value.shape()));
      }
      p.zero_grad();
    }
    auto& m = state_.m[k];
    auto& v = state_.v[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      double w = p.value[i];
      w -= lr * wd_ * w;
      const double mi = beta1_ * m[i] + (1 - beta1_) * g;
      const double vi = beta2_ * v[i] + (1 - beta2_) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w -= lr * (mi / c1) / (std::sqrt(vi / c2) + eps_);
      p.value[i] = static_cast<T>(w);
    }
  }
}

template <class T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm) {
  double sq = 0;
  for (const auto* p : params)
    for (T g : p->grad.data()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (auto* p : params)
      for (T& g : p->grad.data()) g = static_cast<T>(g * scale);
  }
  return norm;
}

Tensor<float> stack_images(std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Shape& s = samples.front().image.shape();
  Tensor<float> out({static_cast<int>(samples.size()), s[0], s[1], s[2]});
  const std::size_t per = samples.front().image.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].image.shape() != s) throw ShapeError("stack_images: sample " + samples[i].id + " differs in size");
    std::copy(samples[i].image.data().begin(), samples[i].image.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

Tensor<float> stack_masks(std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("stack_masks: empty batch");
  const Shape& s = samples.front().mask.shape();
  Tensor<float> out({static_cast<int>(samples.size()), 1, s[0], s[1]});
  const std::size_t per = samples.front().mask.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].mask.shape() != s) throw ShapeError("stack_masks: sample " + samples[i].id + " differs in size");
    std::copy(samples[i].mask.data().begin(), samples[i].mask.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

namespace {

// Dice at 0.5 of each image in a batch of probabilities (N x 1 x H x W).
double batch_dice_sum(const Tensor<float>& probs, const Tensor<float>& masks) {
  const int n = probs.dim(0), h = probs.dim(2), w = probs.dim(3);
  const std::size_t per = static_cast<std::size_t>(h) * w;
  double total = 0;
  for (int i = 0; i < n; ++i) {
    Tensor<double> p({h, w}), g({h, w});
    for (std::size_t k = 0; k < per; ++k) {
      p[k] = probs[static_cast<std::size_t>(i) * per + k];
      g[k] = masks[static_cast<std::size_t>(i) * per + k];
    }
    total += dice_iou(p, g).dice;
  }
  return total;
}

}  // namespace

double mean_dice(const Model<float>& model, std::span<const Sample> samples, int batch_size) {
  if (samples.empty()) return 0.0;
  double total = 0;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    auto batch = samples.subspan(start, std::min<std::size_t>(static_cast<std::size_t>(batch_size), samples.size() - start));
    total += batch_dice_sum(model.predict(stack_images(batch)), stack_masks(batch));
  }
  return total / static_cast<double>(samples.size());
}

TrainResult train_loop(Model<float>& model, std::span<const Sample> train, std::span<const Sample> val,
                       const TrainConfig& cfg, const AugmentConfig& aug, const TrainOutputs& out) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_loop: empty training set");
  const int size = model.config().input_size;
  for (const auto* split : {&train, &val})
    for (const auto& s : *split)
      if (s.image.dim(1) != size || s.image.dim(2) != size) {
        throw ShapeError("train_loop: sample " + s.id + " is " + to_string(s.image.shape()) + " but the model expects " +
                         std::to_string(size) + " x " + std::to_string(size));
      }

  auto params = model.params().all();
  AdamW<float> opt(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  Rng rng(cfg.seed);
  Rng order_rng = rng.split(1), aug_rng = rng.split(2);
  std::ofstream log;
  if (!out.log.empty()) {
    log.open(out.log, std::ios::trunc);
    if (!log) throw IoError("cannot write " + out.log.string());
  }

  TrainResult result;
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) break;
    const double lr = lr_at(cfg, epoch);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }
    double loss_sum = 0, dice_sum = 0;
    int batches = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) break;
      std::vector<Sample> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++k) {
        const Sample& s = train[order[k]];
        batch.push_back(cfg.augment ? augment(s, aug, aug_rng) : s);
      }
      const Tensor<float> masks = stack_masks(batch);
      Graph<float> g;
      auto maps = model.forward(g, g.constant(stack_images(batch)), Mode::train);
      Var<float> loss = seg_loss<float>(maps, masks, cfg.head_weights);
      const float loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(result.steps) + "; first non-finite tensor: " + g.first_non_finite());
      }
      model.params().zero_grad();
      g.backward(loss);
      for (auto* p : params) {
        if (!p->grad.all_finite()) {
          throw NumericalError("non-finite gradient for " + p->name + " at epoch " + std::to_string(epoch) + " step " +
                               std::to_string(result.steps));
        }
      }
      if (cfg.grad_clip > 0) clip_grad_norm<float>(params, cfg.grad_clip);
      opt.step(lr);
      ++result.steps;
      loss_sum += loss_value;
      dice_sum += batch_dice_sum(sigmoid(maps.front()).value(), masks);
      seen += batch.size();
      ++batches;
    }
    if (batches == 0) break;

    EpochLog rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.mean_loss = loss_sum / batches;
    rec.train_mdice = dice_sum / static_cast<double>(seen);
    rec.val_mdice = val.empty() ? rec.train_mdice : mean_dice(model, val, cfg.batch_size);
    result.log.push_back(rec);
    if (rec.val_mdice > result.best_val_mdice) {
      result.best_val_mdice = rec.val_mdice;
      result.best_epoch = epoch;
      if (!out.best_checkpoint.empty()) save_checkpoint(out.best_checkpoint, model);
    }
    if (log) {
      log << Json{{"epoch", rec.epoch}, {"lr", rec.lr}, {"mean_loss", rec.mean_loss}, {"train_mdice", rec.train_mdice},
                  {"val_mdice", rec.val_mdice}}
                 .dump()
          << '\n';
      log.flush();
    }
    if (out.on_epoch) out.on_epoch(rec);
  }
  if (!out.last_checkpoint.empty()) save_checkpoint(out.last_checkpoint, model);
  return result;
}

#define CMFD_INSTANTIATE_TRAIN(T)                                                             \
  template Var<T> soft_dice_loss(Var<T>, const Tensor<T>&);                                  \
  template Var<T> seg_loss(std::span<const Var<T>>, const Tensor<T>&, std::span<const double>); \
  template class AdamW<T>;                                                                   \
  template double clip_grad_norm(std::span<Parameter<T>* const>, double);

CMFD_INSTANTIATE_TRAIN(float)
CMFD_INSTANTIATE_TRAIN(double)

}  // namespace cmfd
