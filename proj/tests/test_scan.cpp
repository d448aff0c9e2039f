#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmfd/oracles/gradcheck.hpp"
#include "cmfd/oracles/reference.hpp"
#include "cmfd/scan.hpp"
#include "doctest.h"

using namespace cmfd;

namespace {

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct ScanInputs {
  Tensor<double> u, delta, a_log, b, c, d;
};

ScanInputs random_scan_inputs(Rng& rng, int n, int ch, int len, int st) {
  return {rng.uniform_tensor<double>({n, ch, len}, -1, 1),   rng.uniform_tensor<double>({n, ch, len}, 0.01, 0.5),
          rng.uniform_tensor<double>({ch, st}, -1, 1.5),     rng.uniform_tensor<double>({n, st, len}, -1, 1),
          rng.uniform_tensor<double>({n, st, len}, -1, 1),   rng.uniform_tensor<double>({ch}, -1, 1)};
}

Tensor<double> run_scan(const ScanInputs& in) {
  Graph<double> g(false);
  return selective_scan(g.constant(in.u), g.constant(in.delta), g.constant(in.a_log), g.constant(in.b),
                        g.constant(in.c), g.constant(in.d))
      .value();
}

}  // namespace

TEST_CASE("scan order small example") {
  auto o = build_scan_order(2, 3, ScanVariant::anti_diag_tl);
  CHECK(o.forward == std::vector<int>{0, 1, 3, 2, 4, 5});
  auto br = build_scan_order(2, 3, ScanVariant::anti_diag_br);
  CHECK(br.forward == std::vector<int>{5, 4, 2, 3, 1, 0});
  auto tr = build_scan_order(2, 3, ScanVariant::main_diag_tr);
  CHECK(tr.forward == std::vector<int>{2, 1, 5, 0, 4, 3});
  for (auto v : kScanVariants) {
    auto row = build_scan_order(1, 5, v);
    std::vector<int> sorted = row.forward;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4});
  }
  CHECK(build_scan_order(1, 4, ScanVariant::anti_diag_tl).forward == std::vector<int>{0, 1, 2, 3});
  CHECK(build_scan_order(1, 1, ScanVariant::main_diag_bl).forward == std::vector<int>{0});
  CHECK_THROWS_AS(build_scan_order(0, 3, ScanVariant::anti_diag_tl), ShapeError);
}

TEST_CASE("scan orders are bijections, pair as reversals and match sort-key oracle") {
  for (int h = 1; h <= 16; ++h) {
    for (int w = 1; w <= 16; ++w) {
      for (auto v : kScanVariants) {
        auto o = build_scan_order(h, w, v);
        REQUIRE(o.forward.size() == static_cast<std::size_t>(h * w));
        std::vector<char> seen(o.forward.size(), 0);
        for (int p : o.forward) {
          REQUIRE(p >= 0);
          REQUIRE(p < h * w);
          seen[static_cast<std::size_t>(p)]++;
        }
        CHECK(std::all_of(seen.begin(), seen.end(), [](char s) { return s == 1; }));
        for (std::size_t t = 0; t < o.forward.size(); ++t) {
          CHECK(o.inverse[static_cast<std::size_t>(o.forward[t])] == static_cast<int>(t));
        }
        CHECK(o.forward == oracle::reference_scan_order(h, w, v));
      }
      auto tl = build_scan_order(h, w, ScanVariant::anti_diag_tl).forward;
      auto br = build_scan_order(h, w, ScanVariant::anti_diag_br).forward;
      auto tr = build_scan_order(h, w, ScanVariant::main_diag_tr).forward;
      auto bl = build_scan_order(h, w, ScanVariant::main_diag_bl).forward;
      std::reverse(br.begin(), br.end());
      std::reverse(bl.begin(), bl.end());
      CHECK(tl == br);
      CHECK(tr == bl);
    }
  }
}

TEST_CASE("selective scan examples") {
  Graph<double> g(false);
  SUBCASE("zero input gives zero output") {
    Rng rng(1);
    auto in = random_scan_inputs(rng, 2, 3, 5, 4);
    in.u.fill(0.0);
    const auto y = run_scan(in);
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SUBCASE("decay one half") {
    // exp(a_log) = ln 2 and delta = 1 give a_bar = 0.5, b_bar = 1.
    auto y = selective_scan(g.constant(Tensor<double>({1, 1, 3}, {1, 0, 2})), g.constant(Tensor<double>({1, 1, 3}, 1.0)),
                            g.constant(Tensor<double>({1, 1}, std::log(std::log(2.0)))),
                            g.constant(Tensor<double>({1, 1, 3}, 1.0)), g.constant(Tensor<double>({1, 1, 3}, 1.0)),
                            g.constant(Tensor<double>({1}, 0.0)))
                 .value();
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y[2] == doctest::Approx(2.25).epsilon(1e-12));
  }
  SUBCASE("no decay gives prefix sums") {
    Rng rng(2);
    auto u = rng.uniform_tensor<double>({1, 1, 9}, -1, 1);
    auto y = selective_scan(g.constant(u), g.constant(Tensor<double>({1, 1, 9}, 1.0)),
                            g.constant(Tensor<double>({1, 1}, -60.0)), g.constant(Tensor<double>({1, 1, 9}, 1.0)),
                            g.constant(Tensor<double>({1, 1, 9}, 1.0)), g.constant(Tensor<double>({1}, 0.0)))
                 .value();
    double acc = 0;
    for (int t = 0; t < 9; ++t) {
      acc += u[static_cast<std::size_t>(t)];
      CHECK(y[static_cast<std::size_t>(t)] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("selective scan matches straight-line recurrence") {
  Rng rng(11);
  for (int trial = 0; trial < 8; ++trial) {
    const int n = 1 + trial % 2, ch = 1 + trial % 3, len = 1 + 7 * trial, st = 1 + trial % 4;
    auto in = random_scan_inputs(rng, n, ch, len, st);
    auto ref = oracle::reference_selective_scan(in.u, in.delta, in.a_log, in.b, in.c, in.d);
    CHECK(max_abs_diff(run_scan(in), ref) < 1e-10);
  }
}

TEST_CASE("selective scan is linear in u") {
  Rng rng(12);
  auto in = random_scan_inputs(rng, 2, 3, 17, 5);
  auto in2 = in;
  in2.u = rng.uniform_tensor<double>({2, 3, 17}, -1, 1);
  auto sum_in = in;
  for (std::size_t i = 0; i < sum_in.u.size(); ++i) sum_in.u[i] = 2.5 * in.u[i] - 0.75 * in2.u[i];
  auto y1 = run_scan(in), y2 = run_scan(in2), ys = run_scan(sum_in);
  for (std::size_t i = 0; i < ys.size(); ++i) CHECK(ys[i] == doctest::Approx(2.5 * y1[i] - 0.75 * y2[i]).epsilon(1e-10));
}

TEST_CASE("selective scan gradients") {
  Rng rng(13);
  auto in = random_scan_inputs(rng, 2, 2, 6, 3);
  Parameter<double> u{"u", in.u, {}}, delta{"delta", in.delta, {}}, a_log{"a_log", in.a_log, {}}, b{"b", in.b, {}},
      c{"c", in.c, {}}, d{"d", in.d, {}};
  auto weights = rng.uniform_tensor<double>({2, 2, 6}, -1, 1);
  oracle::LossFn loss = [&](Graph<double>& g) {
    auto y = selective_scan(g.param(u), g.param(delta), g.param(a_log), g.param(b), g.param(c), g.param(d));
    return sum(mul(y, g.constant(weights)));
  };
  std::vector<Parameter<double>*> params{&u, &delta, &a_log, &b, &c, &d};
  auto report = oracle::check_gradients(loss, params);
  INFO(report.worst);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("ss2d path matches per-pixel recurrence") {
  Rng rng(21);
  ParamStore<double> store;
  std::array<SsmParams<double>, 4> paths;
  for (std::size_t k = 0; k < 4; ++k) paths[k] = make_ssm_params(store, rng, "p" + std::to_string(k), 6, 4, 2);
  auto x = rng.uniform_tensor<double>({2, 6, 5, 7}, -1, 1);
  Tensor<double> expected({2, 6, 5, 7});
  for (std::size_t k = 0; k < 4; ++k) {
    auto order = build_scan_order(5, 7, kScanVariants[k]);
    Graph<double> g(false);
    auto got = ss2d_path(g, g.constant(x), paths[k], order).value();
    auto ref = oracle::reference_ss2d_path(x, paths[k], order.forward);
    CHECK(max_abs_diff(got, ref) < 1e-10);
    for (std::size_t i = 0; i < ref.size(); ++i) expected[i] += ref[i];
  }
  Graph<double> g(false);
  auto total = ss2d_diagonal(g, g.constant(x), paths).value();
  CHECK(max_abs_diff(total, expected) < 1e-10);

  Graph<double> gz(false);
  auto zero = ss2d_diagonal(gz, gz.constant(Tensor<double>({1, 6, 5, 7})), paths).value();
  CHECK(zero.shape() == Shape{1, 6, 5, 7});
  for (double v : zero.data()) CHECK(v == 0.0);

  Graph<double> gm(false);
  CHECK_THROWS_AS(ss2d_path(gm, gm.constant(x), paths[0], build_scan_order(5, 6, ScanVariant::anti_diag_tl)), ShapeError);
}

TEST_CASE("ssm initialisation") {
  Rng rng(22);
  ParamStore<double> store;
  auto p = make_ssm_params(store, rng, "s", 8, 4, 1);
  CHECK(p.a_log->value.shape() == Shape{8, 4});
  CHECK(p.a_log->value[3] == doctest::Approx(std::log(4.0)));
  for (double v : p.d->value.data()) CHECK(v == 1.0);
  for (double b : p.dt_out.bias->value.data()) {
    const double dt = b > 0 ? b + std::log1p(std::exp(-b)) : std::log1p(std::exp(b));
    CHECK(dt >= 1e-3 * (1 - 1e-9));
    CHECK(dt <= 1e-1 * (1 + 1e-9));
  }
  CHECK(store.find("s.dt_in.bias") == nullptr);
}

TEST_CASE("vss block shape, identity and gradients") {
  Rng rng(31);
  ParamStore<double> store;
  VssConfig cfg;
  cfg.state_size = 3;
  auto p = make_vss_scan_params(store, rng, "vss", 4, cfg);
  CHECK(p.inner == 8);
  CHECK(store.find("vss.ssm.main_diag_bl.a_log") != nullptr);
  auto x = rng.uniform_tensor<double>({1, 4, 5, 7}, -1, 1);
  {
    Graph<double> g(false);
    auto y = vss_scan_block(g, g.constant(x), p).value();
    CHECK(y.shape() == x.shape());
    CHECK(y.all_finite());
    CHECK(max_abs_diff(y, x) > 1e-6);
  }
  {
    ParamStore<double> s2;
    Rng r2(31);
    auto q = make_vss_scan_params(s2, r2, "vss", 4, cfg);
    q.out_proj.weight->value.fill(0.0);
    q.out_proj.bias->value.fill(0.0);
    Graph<double> g(false);
    CHECK(max_abs_diff(vss_scan_block(g, g.constant(x), q).value(), x) == 0.0);
  }
  {
    Graph<double> g(false);
    CHECK_THROWS_AS(vss_scan_block(g, g.constant(Tensor<double>({1, 3, 4, 4})), p), ShapeError);
  }

  auto small = rng.uniform_tensor<double>({1, 4, 3, 4}, -1, 1);
  auto weights = rng.uniform_tensor<double>({1, 4, 3, 4}, -1, 1);
  Parameter<double> input{"x", small, {}};
  oracle::LossFn loss = [&](Graph<double>& g) {
    return sum(mul(vss_scan_block(g, g.param(input), p), g.constant(weights)));
  };
  auto params = store.all();
  params.push_back(&input);
  oracle::GradCheckOptions opts;
  opts.max_entries = 6;
  auto report = oracle::check_gradients(loss, params, opts);
  INFO(report.worst);
  CHECK(report.checked > 100);
  CHECK(report.max_rel_error < 1e-4);
}
