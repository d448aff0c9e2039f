#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "cmfd/checkpoint.hpp"
#include "cmfd/oracles/gradcheck.hpp"
#include "cmfd/synth.hpp"
#include "cmfd/train.hpp"
#include "doctest.h"

using namespace cmfd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.input_size = 32;
  cfg.channels = {4, 4, 8, 8};
  cfg.state_size = 2;
  return cfg;
}

std::vector<Sample> tiny_samples(int n, std::uint64_t seed) {
  DatasetSpec spec;
  spec.image_size = 32;
  spec.seed = seed;
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) out.push_back(synth_sample(spec, i));
  return out;
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 3;
  cfg.lr = 2e-3;
  cfg.lr_period = 2;
  return cfg;
}

}  // namespace

TEST_CASE("learning-rate schedule halves every period") {
  CHECK(lr_at(1e-4, 50, 0) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(lr_at(1e-4, 50, 49) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(lr_at(1e-4, 50, 50) == doctest::Approx(5e-5).epsilon(1e-15));
  CHECK(lr_at(1e-4, 50, 100) == doctest::Approx(2.5e-5).epsilon(1e-15));
  TrainConfig cfg;
  CHECK(lr_at(cfg, 149) == doctest::Approx(2.5e-5).epsilon(1e-15));
  CHECK_THROWS(lr_at(1e-4, 50, -1));
}

TEST_CASE("segmentation loss limits and values") {
  Graph<double> g(false);
  Tensor<double> gt({1, 1, 8, 8});
  for (int i = 0; i < 32; ++i) gt[static_cast<std::size_t>(i)] = 1.0;

  SUBCASE("saturated correct logits give zero loss") {
    Tensor<double> logits(gt.shape());
    for (std::size_t i = 0; i < gt.size(); ++i) logits[i] = gt[i] > 0 ? 60.0 : -60.0;
    std::vector<Var<double>> maps{g.constant(logits)};
    CHECK(seg_loss<double>(maps, gt).value()[0] == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("zero logits give ln 2 plus the soft dice term") {
    std::vector<Var<double>> maps{g.constant(Tensor<double>(gt.shape()))};
    CHECK(bce_with_logits(maps[0], gt).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    const double dice = 1.0 - 33.0 / 65.0;
    CHECK(seg_loss<double>(maps, gt).value()[0] == doctest::Approx(std::log(2.0) + dice).epsilon(1e-14));
  }
  SUBCASE("head weights scale each term") {
    std::vector<Var<double>> maps(4, g.constant(Tensor<double>(gt.shape())));
    const double one = seg_loss<double>(std::span(maps).first(1), gt).value()[0];
    const std::vector<double> w{1.0, 0.5, 0.0, 2.0};
    CHECK(seg_loss<double>(maps, gt, w).value()[0] == doctest::Approx(3.5 * one).epsilon(1e-14));
  }
  SUBCASE("resolution mismatch") {
    std::vector<Var<double>> maps{g.constant(Tensor<double>({1, 1, 4, 4}))};
    CHECK_THROWS_AS(seg_loss<double>(maps, gt), ShapeError);
  }
}

TEST_CASE("segmentation loss gradient matches finite differences") {
  Rng rng(21);
  Parameter<double> logits{"logits", rng.uniform_tensor<double>({2, 1, 8, 8}, -2, 2), {}};
  Tensor<double> gt({2, 1, 8, 8});
  for (double& v : gt.data()) v = rng.bernoulli(0.35) ? 1.0 : 0.0;
  oracle::LossFn loss = [&](Graph<double>& g) {
    std::vector<Var<double>> maps{g.param(logits)};
    return seg_loss<double>(maps, gt);
  };
  std::vector<Parameter<double>*> ps{&logits};
  oracle::GradCheckOptions opts;
  opts.step = 1e-5;
  CHECK(oracle::check_gradients(loss, ps, opts).max_rel_error < 1e-4);
}

TEST_CASE("adamw update against a hand-evaluated step") {
  const double lr = 1e-2, wd = 0.1;
  SUBCASE("zero gradient, decay only") {
    Parameter<double> p{"p", Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}), {}};
    p.zero_grad();
    AdamW<double> opt({&p}, 0.9, 0.999, 1e-8, wd);
    opt.step(lr);
    CHECK(p.value[0] == doctest::Approx(1.0 * (1 - lr * wd)).epsilon(1e-15));
    CHECK(p.value[1] == doctest::Approx(-2.0 * (1 - lr * wd)).epsilon(1e-15));
  }
  SUBCASE("zero gradient, no decay") {
    Parameter<double> p{"p", Tensor<double>({2}, std::vector<double>{1.0, -2.0}), {}};
    p.zero_grad();
    AdamW<double> opt({&p}, 0.9, 0.999, 1e-8, 0.0);
    opt.step(lr);
    CHECK(p.value == Tensor<double>({2}, std::vector<double>{1.0, -2.0}));
  }
  SUBCASE("constant gradient, two steps") {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, g0 = 0.3;
    Parameter<double> p{"p", Tensor<double>({1}, std::vector<double>{0.7}), {}};
    AdamW<double> opt({&p}, b1, b2, eps, wd);
    double w = 0.7, m = 0, v = 0;
    for (int t = 1; t <= 2; ++t) {
      p.grad = Tensor<double>({1}, std::vector<double>{g0});
      opt.step(lr);
      w *= 1 - lr * wd;
      m = b1 * m + (1 - b1) * g0;
      v = b2 * v + (1 - b2) * g0 * g0;
      const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
      w -= lr * mh / (std::sqrt(vh) + eps);
      CHECK(p.value[0] == doctest::Approx(w).epsilon(1e-14));
      CHECK(opt.state().step == t);
    }
    CHECK(opt.state().m[0].shape() == p.value.shape());
  }
  SUBCASE("gradient shape mismatch") {
    Parameter<double> p{"p", Tensor<double>({2}), Tensor<double>({3})};
    AdamW<double> opt({&p});
    CHECK_THROWS_AS(opt.step(lr), ShapeError);
  }
}

TEST_CASE("gradient clipping") {
  Parameter<double> a{"a", Tensor<double>({1}), Tensor<double>({1}, std::vector<double>{3.0})};
  Parameter<double> b{"b", Tensor<double>({1}), Tensor<double>({1}, std::vector<double>{4.0})};
  std::vector<Parameter<double>*> ps{&a, &b};
  CHECK(clip_grad_norm<double>(ps, 10.0) == doctest::Approx(5.0));
  CHECK(a.grad[0] == 3.0);
  CHECK(clip_grad_norm<double>(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad[0] == doctest::Approx(3.0 / (5.0 + 1e-6)).epsilon(1e-14));
  CHECK(b.grad[0] == doctest::Approx(4.0 / (5.0 + 1e-6)).epsilon(1e-14));
}

TEST_CASE("training is deterministic and follows the schedule") {
  const auto dir = fs::temp_directory_path() / ("cmfd_train_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto train = tiny_samples(6, 1);
  const auto val = tiny_samples(3, 2);
  const auto cfg = tiny_train();

  auto run = [&](const std::string& tag) {
    Model<float> model(tiny_model(), 4);
    TrainOutputs out;
    out.best_checkpoint = dir / (tag + "_best.ckpt");
    out.last_checkpoint = dir / (tag + "_last.ckpt");
    out.log = dir / (tag + ".jsonl");
    return train_loop(model, train, val, cfg, AugmentConfig{}, out);
  };
  const auto r1 = run("a");
  const auto r2 = run("b");
  REQUIRE(r1.log.size() == 3);
  CHECK(r1.steps == 6);
  for (std::size_t e = 0; e < r1.log.size(); ++e) {
    CHECK(r1.log[e].mean_loss == r2.log[e].mean_loss);
    CHECK(r1.log[e].lr == lr_at(cfg, static_cast<int>(e)));
    CHECK(std::isfinite(r1.log[e].mean_loss));
  }
  CHECK(slurp(dir / "a_last.ckpt") == slurp(dir / "b_last.ckpt"));
  CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));
  CHECK(fs::exists(dir / "a_best.ckpt"));

  auto loaded = load_model(dir / "a_last.ckpt");
  for (auto* p : loaded->params().all())
    if (p->name.ends_with("raw_lambda")) {
      const double lambda = 1.0 / (1.0 + std::exp(-static_cast<double>(p->value[0])));
      CHECK((lambda > 0.0 && lambda < 1.0));
    }
  fs::remove_all(dir);
}

TEST_CASE("training honours the step budget and aborts on NaN") {
  const auto train = tiny_samples(6, 1);
  auto cfg = tiny_train();
  cfg.max_steps = 4;
  Model<float> model(tiny_model(), 4);
  const auto r = train_loop(model, train, {}, cfg, AugmentConfig{}, {});
  CHECK(r.steps == 4);
  CHECK(r.log.size() == 2);

  Model<float> broken(tiny_model(), 4);
  broken.params().all().front()->value[0] = std::nanf("");
  CHECK_THROWS_AS(train_loop(broken, train, {}, cfg, AugmentConfig{}, {}), NumericalError);

  Model<float> small(tiny_model(), 4);
  DatasetSpec spec;
  spec.image_size = 16;
  std::vector<Sample> wrong{synth_sample(spec, 0)};
  CHECK_THROWS_AS(train_loop(small, wrong, {}, cfg, AugmentConfig{}, {}), ShapeError);
}
