#include "cmfd/oracles/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>

#include "cmfd/metrics.hpp"
#include "cmfd/model.hpp"
#include "cmfd/oracles/gradcheck.hpp"
#include "cmfd/oracles/reference.hpp"
#include "cmfd/train.hpp"

namespace cmfd::oracle {

namespace {

template <class F>
CheckResult timed(std::string name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = std::move(name);
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

}  // namespace

CheckResult check_scan_bijectivity(int max_hw, bool corrupt) {
  return timed("scan bijectivity", [&](CheckResult& r) {
    int tables = 0;
    for (int h = 1; h <= max_hw; ++h)
      for (int w = 1; w <= max_hw; ++w) {
        std::array<ScanOrder, 4> orders;
        for (std::size_t k = 0; k < 4; ++k) orders[k] = build_scan_order(h, w, kScanVariants[k]);
        if (corrupt && h * w > 1) orders[0].forward[1] = orders[0].forward[0];
        for (const auto& o : orders) {
          const auto n = static_cast<std::size_t>(h * w);
          std::vector<int> seen(n, 0);
          bool ok = o.forward.size() == n && o.inverse.size() == n;
          for (std::size_t t = 0; ok && t < n; ++t) {
            const int p = o.forward[t];
            ok = p >= 0 && p < h * w && ++seen[static_cast<std::size_t>(p)] == 1 &&
                 o.inverse[static_cast<std::size_t>(p)] == static_cast<int>(t);
          }
          if (!ok) {
            r.detail = std::string(variant_name(o.variant)) + " " + std::to_string(h) + "x" + std::to_string(w) +
                       " is not a permutation with matching inverse";
            return;
          }
          ++tables;
        }
        auto rev = [](std::vector<int> v) {
          std::reverse(v.begin(), v.end());
          return v;
        };
        if (orders[0].forward != rev(orders[1].forward) || orders[2].forward != rev(orders[3].forward)) {
          r.detail = "reversal pairing fails at " + std::to_string(h) + "x" + std::to_string(w);
          return;
        }
      }
    r.passed = true;
    r.detail = std::to_string(tables) + " tables";
  });
}

CheckResult check_scan_oracle(int cases, int max_len, int max_channels, int max_batch, double tol,
                              std::uint64_t seed) {
  return timed("selective-scan oracle", [&](CheckResult& r) {
    Rng rng(seed);
    double worst = 0;
    for (int i = 0; i < cases; ++i) {
      const int h = rng.uniform_int(1, std::min(max_len, 16));
      const int w = rng.uniform_int(1, std::max(1, max_len / h));
      const int ch = rng.uniform_int(1, max_channels);
      const int n = rng.uniform_int(1, max_batch);
      const int st = rng.uniform_int(1, 6);
      const auto variant = kScanVariants[static_cast<std::size_t>(rng.uniform_int(0, 3))];
      ParamStore<double> store;
      auto p = make_ssm_params(store, rng, "p", ch, st, rng.uniform_int(1, 3));
      for (auto* prm : store.all()) {
        if (prm == p.a_log) continue;
        prm->value = rng.uniform_tensor<double>(prm->value.shape(), -1, 1);
      }
      auto x = rng.uniform_tensor<double>({n, ch, h, w}, -1, 1);
      const auto order = build_scan_order(h, w, variant);
      Graph<double> g(false);
      const auto got = ss2d_path(g, g.constant(x), p, order).value();
      const auto ref = reference_ss2d_path(x, p, order.forward);
      for (std::size_t k = 0; k < ref.size(); ++k) worst = std::max(worst, std::abs(got[k] - ref[k]));
    }
    r.passed = worst <= tol;
    r.detail = std::to_string(cases) + " cases, max abs diff " + fmt(worst);
  });
}

std::vector<CheckResult> check_gradient_suite(double step, double tol, bool include_model, std::size_t max_entries,
                                              std::uint64_t seed) {
  std::vector<CheckResult> results;
  Rng rng(seed);
  GradCheckOptions opts;
  opts.step = step;
  opts.max_entries = max_entries;
  opts.seed = seed;

  // Loss = <block output, fixed random weights>; checks every store
  // parameter plus the block inputs.
  auto run = [&](std::string name, ParamStore<double>& store, std::vector<Parameter<double>*> inputs,
                 std::function<Var<double>(Graph<double>&)> block) {
    results.push_back(timed(name, [&](CheckResult& r) {
      Graph<double> probe(false);
      auto weights = rng.uniform_tensor<double>(block(probe).shape(), -1, 1);
      LossFn loss = [&](Graph<double>& g) { return sum(mul(block(g), g.constant(weights))); };
      auto params = store.all();
      params.insert(params.end(), inputs.begin(), inputs.end());
      auto rep = check_gradients(loss, params, opts);
      r.passed = rep.max_rel_error < tol;
      r.detail = "max rel " + fmt(rep.max_rel_error) + " over " + std::to_string(rep.checked) + " entries";
      if (!r.passed) r.detail += "; worst " + rep.worst;
    }));
  };
  auto input = [&](const char* name, Shape shape) {
    return Parameter<double>{name, rng.uniform_tensor<double>(std::move(shape), -1, 1), {}};
  };

  for (auto kind : {AttentionKind::gab, AttentionKind::cbam}) {
    ParamStore<double> store;
    auto p = make_attention(store, rng, "att", 4, 2, kind);
    auto x = input("x", {2, 4, 5, 5});
    run(kind == AttentionKind::gab ? "gradient: gab" : "gradient: cbam", store, {&x},
        [&](Graph<double>& g) { return attend(g, g.param(x), p); });
  }
  {
    ParamStore<double> store;
    auto p = make_msa(store, rng, "msa", 4, 4, 2, AttentionKind::gab);
    auto x = input("x", {1, 4, 6, 6});
    run("gradient: msa", store, {&x}, [&](Graph<double>& g) { return msa(g, g.param(x), p); });
  }
  {
    ParamStore<double> store;
    VssConfig vss;
    vss.state_size = 2;
    auto p = make_cmd(store, rng, "cmd", 4, 8, vss, 2, AttentionKind::gab);
    auto s = input("shallow", {1, 4, 4, 4});
    auto d = input("deeper", {1, 8, 2, 2});
    run("gradient: cmd", store, {&s, &d}, [&](Graph<double>& g) { return cmd(g, g.param(s), g.param(d), p); });
  }
  {
    ParamStore<double> store;
    auto p = make_fd(store, rng, "fd", 2, 3, 4);
    auto a = input("cmd1", {1, 2, 8, 8});
    auto b = input("cmd2", {1, 3, 4, 4});
    auto c = input("cmd3", {1, 4, 2, 2});
    run("gradient: fd", store, {&a, &b, &c},
        [&](Graph<double>& g) { return fd(g, g.param(a), g.param(b), g.param(c), p); });
  }
  {
    ParamStore<double> store;
    VssConfig vss;
    vss.state_size = 3;
    auto p = make_vss_scan_params(store, rng, "vss", 4, vss);
    auto x = input("x", {1, 4, 3, 4});
    run("gradient: vss_scan_block", store, {&x}, [&](Graph<double>& g) { return vss_scan_block(g, g.param(x), p); });
  }
  {
    ParamStore<double> store;
    auto p = make_encoder(store, rng, "enc", 3, {2, 2, 4, 4});
    auto x = input("image", {1, 3, 32, 32});
    run("gradient: encoder", store, {&x}, [&](Graph<double>& g) {
      auto f = encoder(g, g.param(x), p);
      auto up = [](Var<double> v, int k) { return upsample_bilinear(reduce(v, Reduction::mean, ReduceAxes::channel), k); };
      return add(add(up(f[0], 1), up(f[1], 2)), add(up(f[2], 4), up(f[3], 8)));
    });
  }
  {
    ParamStore<double> store;
    std::vector<Parameter<double>*> maps;
    for (int i = 0; i < 4; ++i) maps.push_back(store.add("map" + std::to_string(i), rng.uniform_tensor<double>({2, 1, 8, 8}, -3, 3)));
    Tensor<double> gt({2, 1, 8, 8});
    for (double& v : gt.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    const std::vector<double> weights{1.0, 0.5, 0.75, 1.25};
    results.push_back(timed("gradient: seg_loss", [&](CheckResult& r) {
      LossFn loss = [&](Graph<double>& g) {
        std::vector<Var<double>> vs;
        for (auto* m : maps) vs.push_back(g.param(*m));
        return seg_loss<double>(vs, gt, weights);
      };
      auto rep = check_gradients(loss, maps, opts);
      r.passed = rep.max_rel_error < tol;
      r.detail = "max rel " + fmt(rep.max_rel_error) + " over " + std::to_string(rep.checked) + " entries";
      if (!r.passed) r.detail += "; worst " + rep.worst;
    }));
  }
  if (include_model) {
    results.push_back(timed("gradient: full model 64x64", [&](CheckResult& r) {
      ModelConfig cfg;
      cfg.input_size = 64;
      cfg.channels = {4, 4, 8, 8};
      cfg.state_size = 2;
      Model<double> model(cfg, seed);
      const auto image = rng.uniform_tensor<double>({1, 3, 64, 64}, 0, 1);
      Tensor<double> gt({1, 1, 64, 64});
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) gt[static_cast<std::size_t>(y) * 64 + x] = std::hypot(y - 30.0, x - 36.0) < 14 ? 1.0 : 0.0;
      LossFn loss = [&](Graph<double>& g) {
        auto maps = model.forward(g, g.constant(image), Mode::train);
        return seg_loss<double>(maps, gt);
      };
      auto params = model.params().all();
      auto rep = check_gradients(loss, params, opts);
      r.passed = rep.max_rel_error < tol;
      r.detail = "max rel " + fmt(rep.max_rel_error) + " over " + std::to_string(rep.checked) + " entries in " +
                 std::to_string(params.size()) + " parameters";
      if (!r.passed) r.detail += "; worst " + rep.worst;
    }));
  }
  return results;
}

CheckResult check_metric_oracles(int cases, int size, double tol, std::uint64_t seed) {
  return timed("metric oracles", [&](CheckResult& r) {
    Rng rng(seed);
    double worst = 0;
    for (int i = 0; i < cases; ++i) {
      Tensor<double> pred({size, size}), gt({size, size});
      const double cy = rng.uniform(0, size), cx = rng.uniform(0, size), rad = rng.uniform(1, size / 2.0);
      const int kind = i % 4;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const std::size_t k = static_cast<std::size_t>(y) * size + x;
          gt[k] = kind == 3 ? (rng.bernoulli(0.3) ? 1.0 : 0.0) : (std::hypot(y - cy, x - cx) <= rad ? 1.0 : 0.0);
        }
      for (std::size_t k = 0; k < pred.size(); ++k) {
        pred[k] = kind == 1 ? std::clamp(gt[k] + rng.uniform(-0.5, 0.5), 0.0, 1.0) : rng.uniform();
        if (kind == 2) pred[k] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      }
      worst = std::max({worst, std::abs(weighted_fbeta(pred, gt) - reference_weighted_fbeta(pred, gt)),
                        std::abs(s_measure(pred, gt) - reference_s_measure(pred, gt)),
                        std::abs(e_measure(pred, gt) - reference_e_measure(pred, gt))});
    }
    r.passed = worst <= tol;
    r.detail = std::to_string(cases) + " pairs " + std::to_string(size) + "x" + std::to_string(size) +
               ", max abs diff " + fmt(worst);
  });
}

CheckResult check_block_algebra(std::uint64_t seed) {
  return timed("block algebra", [&](CheckResult& r) {
    Rng rng(seed);
    Graph<double> g(false);
    auto m = g.constant(rng.uniform_tensor<double>({2, 3, 4, 5}, -2, 2));
    auto out = gab_combine(m, g.constant(Tensor<double>({2, 3, 1, 1}, 1.0)), g.constant(Tensor<double>({2, 1, 4, 5}, 1.0)),
                           g.constant(Tensor<double>({1}, 0.5)));
    for (std::size_t i = 0; i < m.value().size(); ++i)
      if (out.value()[i] != 2.0 * m.value()[i]) {
        r.detail = "uniform attention weights do not double the input";
        return;
      }

    ParamStore<double> store;
    auto p = make_fd(store, rng, "fd", 4, 6, 8);
    auto c1 = g.constant(rng.uniform_tensor<double>({1, 4, 16, 16}, -1, 1));
    auto c2 = g.constant(rng.uniform_tensor<double>({1, 6, 8, 8}, -1, 1));
    auto z2 = g.constant(Tensor<double>({1, 6, 8, 8}));
    auto z3 = g.constant(Tensor<double>({1, 8, 4, 4}));
    if (!(fd(g, c1, z2, z3, p).value() == c1.value())) {
      r.detail = "zero deeper features do not pass the shallow map through";
      return;
    }
    if (!(fd(g, c1, c2, z3, p).value() == add(mul(p.dec21(g, c2), c1), c1).value())) {
      r.detail = "zero deepest features do not reduce the fusion to one stage";
      return;
    }
    r.passed = true;
    r.detail = "gab lambda 0.5 doubling, fd passthrough, exact";
  });
}

CheckResult check_exchange_involution(std::uint64_t seed) {
  return timed("exchange involution", [&](CheckResult& r) {
    Rng rng(seed);
    Graph<double> g(false);
    for (int i = 0; i < 20; ++i) {
      const Shape shape{rng.uniform_int(1, 3), rng.uniform_int(1, 4), rng.uniform_int(1, 9), rng.uniform_int(1, 9)};
      auto a = g.constant(rng.uniform_tensor<double>(shape, -1, 1));
      auto b = g.constant(rng.uniform_tensor<double>(shape, -1, 1));
      for (auto ex : {&row_exchange<double>, &column_exchange<double>}) {
        auto once = ex(a, b);
        auto twice = ex(once.s, once.d);
        auto same = ex(a, a);
        if (!(twice.s.value() == a.value()) || !(twice.d.value() == b.value()) || !(same.s.value() == a.value()) ||
            !(same.d.value() == a.value())) {
          r.detail = "involution fails for shape " + to_string(shape);
          return;
        }
      }
    }
    r.passed = true;
    r.detail = "20 random shapes, row and column";
  });
}

std::vector<CheckResult> run_selfcheck(bool corrupt_scan_table) {
  std::vector<CheckResult> out;
  out.push_back(check_scan_bijectivity(16, corrupt_scan_table));
  out.push_back(check_scan_oracle(100, 64, 8, 8, 1e-10));
  for (auto& r : check_gradient_suite(1e-4, 1e-3, true, 3)) out.push_back(std::move(r));
  out.push_back(check_metric_oracles(100, 16, 1e-8));
  out.push_back(check_block_algebra());
  out.push_back(check_exchange_involution());
  return out;
}

std::string format_results(const std::vector<CheckResult>& results) {
  std::size_t width = 5;
  for (const auto& r : results) width = std::max(width, r.name.size());
  std::ostringstream os;
  for (const auto& r : results) {
    os << (r.passed ? "PASS  " : "FAIL  ") << std::left << std::setw(static_cast<int>(width)) << r.name << "  "
       << std::right << std::fixed << std::setprecision(2) << std::setw(7) << r.seconds << "s  " << r.detail << '\n';
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

}  // namespace cmfd::oracle
