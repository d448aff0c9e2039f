#include <algorithm>
#include <cmath>

#include "cmfd/model.hpp"
#include "cmfd/oracles/gradcheck.hpp"
#include "doctest.h"

using namespace cmfd;

namespace {

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double sigmoid_d(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Weighted-sum loss over a block output plus a gradient check on every
// parameter of `store` and the block input.
oracle::GradCheckReport check_block(ParamStore<double>& store, std::vector<Parameter<double>*> inputs,
                                    const std::function<Var<double>(Graph<double>&)>& block, Rng& rng,
                                    std::size_t max_entries = 5) {
  Graph<double> probe(false);
  const Shape out_shape = block(probe).shape();
  auto weights = rng.uniform_tensor<double>(out_shape, -1, 1);
  oracle::LossFn loss = [&](Graph<double>& g) { return sum(mul(block(g), g.constant(weights))); };
  auto params = store.all();
  params.insert(params.end(), inputs.begin(), inputs.end());
  oracle::GradCheckOptions opts;
  opts.max_entries = max_entries;
  return oracle::check_gradients(loss, params, opts);
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.input_size = 64;
  cfg.channels = {4, 4, 8, 8};
  cfg.state_size = 2;
  return cfg;
}

}  // namespace

TEST_CASE("row and column exchange") {
  Graph<double> g(false);
  auto x = g.constant(Tensor<double>({1, 1, 2, 2}, {1, 1, 2, 2}));
  auto y = g.constant(Tensor<double>({1, 1, 2, 2}, {3, 3, 4, 4}));
  auto r = row_exchange(x, y);
  CHECK(r.s.value() == Tensor<double>({1, 1, 2, 2}, {1, 1, 4, 4}));
  CHECK(r.d.value() == Tensor<double>({1, 1, 2, 2}, {3, 3, 2, 2}));

  auto xc = g.constant(Tensor<double>({1, 1, 1, 2}, {1, 2}));
  auto yc = g.constant(Tensor<double>({1, 1, 1, 2}, {3, 4}));
  auto c = column_exchange(xc, yc);
  CHECK(c.s.value() == Tensor<double>({1, 1, 1, 2}, {1, 4}));
  CHECK(c.d.value() == Tensor<double>({1, 1, 1, 2}, {3, 2}));

  auto one_x = g.constant(Tensor<double>({1, 2, 1, 1}, {5, 6}));
  auto one_y = g.constant(Tensor<double>({1, 2, 1, 1}, {7, 8}));
  auto single = column_exchange(one_x, one_y);
  CHECK(single.s.value() == one_x.value());
  CHECK(single.d.value() == one_y.value());

  Rng rng(4);
  for (auto shape : {Shape{2, 3, 5, 4}, Shape{1, 2, 6, 7}, Shape{1, 1, 1, 3}}) {
    auto a = g.constant(rng.uniform_tensor<double>(shape, -1, 1));
    auto b = g.constant(rng.uniform_tensor<double>(shape, -1, 1));
    auto rr = row_exchange(a, b);
    auto back = row_exchange(rr.s, rr.d);
    CHECK(back.s.value() == a.value());
    CHECK(back.d.value() == b.value());
    auto cc = column_exchange(a, b);
    auto back_c = column_exchange(cc.s, cc.d);
    CHECK(back_c.s.value() == a.value());
    CHECK(back_c.d.value() == b.value());
    auto same = row_exchange(a, a);
    CHECK(same.s.value() == a.value());
    CHECK(same.d.value() == a.value());
  }
  CHECK_THROWS_AS(row_exchange(x, xc), ShapeError);
  CHECK_THROWS_AS(column_exchange(x, xc), ShapeError);
}

TEST_CASE("gab algebra") {
  Graph<double> g(false);
  Rng rng(5);
  auto m = g.constant(rng.uniform_tensor<double>({2, 3, 4, 5}, -2, 2));
  auto out = gab_combine(m, g.constant(Tensor<double>({2, 3, 1, 1}, 1.0)), g.constant(Tensor<double>({2, 1, 4, 5}, 1.0)),
                         g.constant(Tensor<double>({1}, 0.5)));
  for (std::size_t i = 0; i < out.value().size(); ++i) CHECK(out.value()[i] == 2.0 * m.value()[i]);

  ParamStore<double> store;
  auto p = make_attention(store, rng, "gab", 6, 4, AttentionKind::gab);
  CHECK(store.find("gab.raw_lambda") != nullptr);
  CHECK(p.spatial.weight->value.shape() == Shape{1, 2, 7, 7});
  CHECK(p.mlp_down.weight->value.shape() == Shape{1, 6, 1, 1});
  auto zero = gab(g, g.constant(Tensor<double>({1, 6, 5, 5})), p).value();
  for (double v : zero.data()) CHECK(v == 0.0);

  for (double raw : {-8.0, 0.0, 3.0}) {
    p.raw_lambda->value[0] = raw;
    auto x = rng.uniform_tensor<double>({1, 6, 5, 5}, -2, 2);
    auto y = gab(g, g.constant(x), p).value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::abs(x[i]) < 1e-3) continue;
      const double w = y[i] / x[i] - 1.0;
      CHECK(w > 0.0);
      CHECK(w < 1.0);
    }
  }
}

TEST_CASE("attention weights match direct evaluation") {
  Rng rng(6);
  ParamStore<double> store;
  auto p = make_attention(store, rng, "att", 4, 2, AttentionKind::gab, 3);
  for (auto* prm : store.all()) prm->value = rng.uniform_tensor<double>(prm->value.shape(), -0.5, 0.5);
  auto x = rng.uniform_tensor<double>({1, 4, 3, 3}, -1, 1);
  Graph<double> g(false);
  auto wc = channel_weights(g, g.constant(x), p).value();
  auto ws = spatial_weights(g, g.constant(x), p).value();

  const auto& w1 = p.mlp_down.weight->value;
  const auto& b1 = p.mlp_down.bias->value;
  const auto& w2 = p.mlp_up.weight->value;
  const auto& b2 = p.mlp_up.bias->value;
  auto mlp = [&](const std::vector<double>& v) {
    std::vector<double> hidden(2), out(4);
    for (int j = 0; j < 2; ++j) {
      double a = b1[static_cast<std::size_t>(j)];
      for (int c = 0; c < 4; ++c) a += w1[static_cast<std::size_t>(j * 4 + c)] * v[static_cast<std::size_t>(c)];
      hidden[static_cast<std::size_t>(j)] = std::max(0.0, a);
    }
    for (int c = 0; c < 4; ++c) {
      double a = b2[static_cast<std::size_t>(c)];
      for (int j = 0; j < 2; ++j) a += w2[static_cast<std::size_t>(c * 2 + j)] * hidden[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(c)] = a;
    }
    return out;
  };
  std::vector<double> avg(4, 0.0), mx(4, -1e300);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 9; ++i) {
      const double v = x.at(0, c, i / 3, i % 3);
      avg[static_cast<std::size_t>(c)] += v / 9.0;
      mx[static_cast<std::size_t>(c)] = std::max(mx[static_cast<std::size_t>(c)], v);
    }
  auto ma = mlp(avg), mm = mlp(mx);
  for (int c = 0; c < 4; ++c) CHECK(wc[static_cast<std::size_t>(c)] == doctest::Approx(sigmoid_d(ma[static_cast<std::size_t>(c)] + mm[static_cast<std::size_t>(c)])).epsilon(1e-12));

  const auto& ks = p.spatial.weight->value;
  for (int r = 0; r < 3; ++r)
    for (int q = 0; q < 3; ++q) {
      double acc = p.spatial.bias->value[0];
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int rr = r + dy, qq = q + dx;
          if (rr < 0 || rr >= 3 || qq < 0 || qq >= 3) continue;
          double mean_c = 0, max_c = -1e300;
          for (int c = 0; c < 4; ++c) {
            mean_c += x.at(0, c, rr, qq) / 4.0;
            max_c = std::max(max_c, x.at(0, c, rr, qq));
          }
          acc += ks.at(0, 0, dy + 1, dx + 1) * mean_c + ks.at(0, 1, dy + 1, dx + 1) * max_c;
        }
      CHECK(ws.at(0, 0, r, q) == doctest::Approx(sigmoid_d(acc)).epsilon(1e-12));
    }

  auto lam = sigmoid_d(p.raw_lambda->value[0]);
  auto y = gab(g, g.constant(x), p).value();
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 9; ++i) {
      const double w = (1 - lam) * wc[static_cast<std::size_t>(c)] + lam * ws[static_cast<std::size_t>(i)];
      CHECK(y.at(0, c, i / 3, i % 3) == doctest::Approx(w * x.at(0, c, i / 3, i % 3) + x.at(0, c, i / 3, i % 3)).epsilon(1e-12));
    }
}

TEST_CASE("cbam composition") {
  Rng rng(7);
  ParamStore<double> store;
  auto p = make_attention(store, rng, "cbam", 8, 4, AttentionKind::cbam);
  CHECK(p.raw_lambda == nullptr);
  CHECK(store.find("cbam.raw_lambda") == nullptr);
  Graph<double> g(false);
  auto x = g.constant(rng.uniform_tensor<double>({1, 8, 7, 7}, -1, 1));
  auto y = cbam(g, x, p);
  CHECK(y.shape() == Shape{1, 8, 7, 7});
  auto refined = mul(x, channel_weights(g, x, p));
  auto manual = mul(refined, spatial_weights(g, refined, p));
  CHECK(max_abs_diff(y.value(), manual.value()) == 0.0);
  auto zero = cbam(g, g.constant(Tensor<double>({1, 8, 7, 7})), p).value();
  for (double v : zero.data()) CHECK(v == 0.0);
  CHECK(max_abs_diff(attend(g, x, p).value(), y.value()) == 0.0);
  CHECK_THROWS(gab(g, x, p));
  CHECK_THROWS_AS(cbam(g, g.constant(Tensor<double>({1, 4, 7, 7})), p), ShapeError);
}

TEST_CASE("msa block") {
  Rng rng(8);
  ParamStore<double> store;
  auto p = make_msa(store, rng, "msa", 4, 4, 4, AttentionKind::gab);
  CHECK(p.dw3.weight->value.shape() == Shape{8, 1, 3, 3});
  CHECK(p.dw5.weight->value.shape() == Shape{8, 1, 5, 5});
  CHECK(p.dw7.weight->value.shape() == Shape{8, 1, 7, 7});
  CHECK(p.expand.weight->value.shape() == Shape{8, 4, 1, 1});
  CHECK(p.reduce.weight->value.shape() == Shape{4, 8, 1, 1});
  Graph<double> g(false);
  auto x = g.constant(rng.uniform_tensor<double>({2, 4, 9, 6}, -1, 1));
  CHECK(msa(g, x, p).shape() == Shape{2, 4, 9, 6});
  for (auto* layer : {&p.dw3, &p.dw5, &p.dw7, &p.reduce}) {
    layer->weight->value.fill(0.0);
    layer->bias->value.fill(0.0);
  }
  for (double v : msa(g, x, p).value().data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(make_msa(store, rng, "bad", 3, 4, 4, AttentionKind::gab), std::invalid_argument);
}

TEST_CASE("cmd block") {
  Rng rng(9);
  SUBCASE("shapes and zero output stack") {
    ParamStore<float> store;
    VssConfig vss;
    vss.state_size = 4;
    auto p = make_cmd(store, rng, "cmd", 16, 32, vss, 4, AttentionKind::gab);
    Graph<float> g(false);
    auto shallow = g.constant(rng.uniform_tensor<float>({1, 16, 28, 28}, -1, 1));
    auto deeper = g.constant(rng.uniform_tensor<float>({1, 32, 14, 14}, -1, 1));
    auto y = cmd(g, shallow, deeper, p);
    CHECK(y.shape() == Shape{1, 16, 28, 28});
    CHECK(y.value().all_finite());
    p.out_pw2.weight->value.fill(0.0f);
    p.out_pw2.bias->value.fill(0.0f);
    for (float v : cmd(g, shallow, deeper, p).value().data()) CHECK(v == 0.0f);
    CHECK_THROWS_AS(cmd(g, shallow, g.constant(Tensor<float>({1, 32, 13, 14})), p), ShapeError);
    CHECK_THROWS_AS(cmd(g, shallow, g.constant(Tensor<float>({1, 16, 14, 14})), p), ShapeError);
    CHECK_THROWS_AS(cmd(g, g.constant(Tensor<float>({1, 8, 28, 28})), deeper, p), ShapeError);
  }
  SUBCASE("additive variant") {
    ParamStore<double> store;
    auto p = make_cmd(store, rng, "cmd", 4, 8, VssConfig{}, 4, AttentionKind::gab, false);
    CHECK(store.all().size() == 2);
    Graph<double> g(false);
    auto shallow = g.constant(rng.uniform_tensor<double>({1, 4, 6, 6}, -1, 1));
    auto deeper = g.constant(rng.uniform_tensor<double>({1, 8, 3, 3}, -1, 1));
    auto expected = add(p.align(g, upsample_bilinear(deeper, 2)), shallow);
    CHECK(max_abs_diff(cmd(g, shallow, deeper, p).value(), expected.value()) == 0.0);
  }
  SUBCASE("gradients") {
    ParamStore<double> store;
    VssConfig vss;
    vss.state_size = 2;
    auto p = make_cmd(store, rng, "cmd", 4, 8, vss, 2, AttentionKind::gab);
    Parameter<double> s{"shallow", rng.uniform_tensor<double>({1, 4, 4, 4}, -1, 1), {}};
    Parameter<double> d{"deeper", rng.uniform_tensor<double>({1, 8, 2, 2}, -1, 1), {}};
    auto report = check_block(store, {&s, &d}, [&](Graph<double>& g) { return cmd(g, g.param(s), g.param(d), p); }, rng, 3);
    INFO(report.worst);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("fd block") {
  Rng rng(10);
  ParamStore<double> store;
  auto p = make_fd(store, rng, "fd", 8, 8, 8);
  CHECK(p.dec32.bias == nullptr);
  CHECK(p.dec32.weight->value.shape() == Shape{8, 8, 4, 4});
  Graph<double> g(false);
  auto c1 = g.constant(rng.uniform_tensor<double>({1, 8, 56, 56}, -1, 1));
  auto c2 = g.constant(rng.uniform_tensor<double>({1, 8, 28, 28}, -1, 1));
  auto c3 = g.constant(rng.uniform_tensor<double>({1, 8, 14, 14}, -1, 1));
  CHECK(fd(g, c1, c2, c3, p).shape() == Shape{1, 8, 56, 56});

  auto z2 = g.constant(Tensor<double>({1, 8, 28, 28}));
  auto z3 = g.constant(Tensor<double>({1, 8, 14, 14}));
  CHECK(fd(g, c1, z2, z3, p).value() == c1.value());
  auto passthrough = add(mul(p.dec21(g, c2), c1), c1);
  CHECK(max_abs_diff(fd(g, c1, c2, z3, p).value(), passthrough.value()) == 0.0);
  CHECK_THROWS_AS(fd(g, c1, c2, g.constant(Tensor<double>({1, 8, 13, 14})), p), ShapeError);
  CHECK_THROWS_AS(fd(g, c2, c2, c3, p), ShapeError);

  ParamStore<double> small;
  auto q = make_fd(small, rng, "fd", 2, 3, 4);
  Parameter<double> a{"c1", rng.uniform_tensor<double>({1, 2, 8, 8}, -1, 1), {}};
  Parameter<double> b{"c2", rng.uniform_tensor<double>({1, 3, 4, 4}, -1, 1), {}};
  Parameter<double> c{"c3", rng.uniform_tensor<double>({1, 4, 2, 2}, -1, 1), {}};
  auto report = check_block(small, {&a, &b, &c},
                            [&](Graph<double>& gr) { return fd(gr, gr.param(a), gr.param(b), gr.param(c), q); }, rng, 0);
  INFO(report.worst);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("encoder stub") {
  Rng rng(11);
  {
    ParamStore<float> store;
    auto p = make_encoder(store, rng, "enc", 3, {16, 32, 64, 128});
    Graph<float> g(false);
    auto feats = encoder(g, g.constant(Tensor<float>({1, 3, 224, 224}, 0.5f)), p);
    CHECK(feats[0].shape() == Shape{1, 16, 56, 56});
    CHECK(feats[1].shape() == Shape{1, 32, 28, 28});
    CHECK(feats[2].shape() == Shape{1, 64, 14, 14});
    CHECK(feats[3].shape() == Shape{1, 128, 7, 7});
    auto small = encoder(g, g.constant(Tensor<float>({2, 3, 64, 64}, 0.5f)), p);
    for (int s = 0; s < 4; ++s) CHECK(small[static_cast<std::size_t>(s)].dim(2) == 16 >> s);
    CHECK_THROWS_AS(encoder(g, g.constant(Tensor<float>({1, 3, 100, 100})), p), ShapeError);
    CHECK_THROWS_AS(encoder(g, g.constant(Tensor<float>({1, 1, 64, 64})), p), ShapeError);
  }
  ParamStore<double> store;
  auto p = make_encoder(store, rng, "enc", 3, {2, 2, 4, 4});
  Parameter<double> img{"image", rng.uniform_tensor<double>({1, 3, 32, 32}, 0, 1), {}};
  auto report = check_block(store, {&img}, [&](Graph<double>& g) {
    auto f = encoder(g, g.param(img), p);
    return add(sum(f[0]), add(sum(mul(f[1], f[1])), add(sum(f[2]), sum(mul(f[3], f[3])))));
  }, rng, 4);
  INFO(report.worst);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("attention and msa gradients") {
  Rng rng(12);
  for (auto kind : {AttentionKind::gab, AttentionKind::cbam}) {
    ParamStore<double> store;
    auto p = make_attention(store, rng, "att", 4, 2, kind);
    p.spatial.weight->value = rng.uniform_tensor<double>(p.spatial.weight->value.shape(), -0.3, 0.3);
    Parameter<double> x{"x", rng.uniform_tensor<double>({2, 4, 5, 5}, -1, 1), {}};
    auto report = check_block(store, {&x}, [&](Graph<double>& g) { return attend(g, g.param(x), p); }, rng, 0);
    INFO(report.worst);
    CHECK(report.max_rel_error < 1e-4);
  }
  ParamStore<double> store;
  auto p = make_msa(store, rng, "msa", 4, 4, 2, AttentionKind::gab);
  Parameter<double> x{"x", rng.uniform_tensor<double>({1, 4, 6, 6}, -1, 1), {}};
  auto report = check_block(store, {&x}, [&](Graph<double>& g) { return msa(g, g.param(x), p); }, rng, 6);
  INFO(report.worst);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("model forward modes and ablations") {
  auto cfg = tiny_config();
  Model<float> model(cfg, 3);
  Rng rng(13);
  auto image = rng.uniform_tensor<float>({2, 3, 64, 64}, 0, 1);
  {
    Graph<float> g(false);
    auto outs = model.forward(g, g.constant(image), Mode::infer);
    REQUIRE(outs.size() == 1);
    CHECK(outs[0].shape() == Shape{2, 1, 64, 64});
  }
  {
    Graph<float> g;
    auto outs = model.forward(g, g.constant(image), Mode::train);
    REQUIRE(outs.size() == 4);
    for (auto& o : outs) {
      CHECK(o.shape() == Shape{2, 1, 64, 64});
      CHECK(o.value().all_finite());
    }
  }
  auto a = model.predict(image), b = model.predict(image);
  CHECK(a == b);
  for (float v : a.data()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  {
    Graph<float> g(false);
    CHECK_THROWS_AS(model.forward(g, g.constant(Tensor<float>({1, 3, 32, 32})), Mode::infer), ShapeError);
  }

  struct Variant {
    const char* name;
    void (*apply)(ModelConfig&);
    const char* absent;
  };
  const Variant variants[] = {
      {"no cmd", [](ModelConfig& c) { c.use_cmd = false; }, "cmd1.vss_row_s.norm_in.gamma"},
      {"no msa", [](ModelConfig& c) { c.use_msa = false; }, "msa1.expand.weight"},
      {"no fd", [](ModelConfig& c) { c.use_fd = false; }, "fd.dec21.weight"},
      {"cbam", [](ModelConfig& c) { c.attention = AttentionKind::cbam; }, "msa1.att.raw_lambda"},
  };
  for (const auto& v : variants) {
    INFO(v.name);
    auto vc = tiny_config();
    v.apply(vc);
    Model<float> m(vc, 3);
    CHECK(m.params().find(v.absent) == nullptr);
    CHECK(model.params().find(v.absent) != nullptr);
    CHECK(m.params().scalar_count() < model.params().scalar_count());
    Graph<float> g;
    auto outs = m.forward(g, g.constant(image), Mode::train);
    CHECK(outs.size() == 4);
    for (auto& o : outs) {
      CHECK(o.shape() == Shape{2, 1, 64, 64});
      CHECK(o.value().all_finite());
    }
  }
  auto no_ds = tiny_config();
  no_ds.deep_supervision = false;
  Model<float> single(no_ds, 3);
  Graph<float> g;
  CHECK(single.forward(g, g.constant(image), Mode::train).size() == 1);
  CHECK(single.params().find("aux_head1.weight") == nullptr);
  // shared components start from identical weights regardless of ablation
  CHECK(single.params().find("encoder.patch.weight")->value == model.params().find("encoder.patch.weight")->value);
}

TEST_CASE("model config validation") {
  auto cfg = tiny_config();
  cfg.input_size = 100;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.shuffle_groups = 3;
  CHECK_THROWS_AS(Model<float>{cfg}, std::invalid_argument);
  cfg = tiny_config();
  cfg.channels[2] = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_NOTHROW(tiny_config().validate());
}
