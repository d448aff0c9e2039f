#include "cmfd/oracles/reference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace cmfd::oracle {

std::vector<int> reference_scan_order(int height, int width, ScanVariant variant) {
  std::vector<int> pixels(static_cast<std::size_t>(height) * width);
  std::iota(pixels.begin(), pixels.end(), 0);
  auto key = [&](int p) {
    const int r = p / width, c = p % width;
    switch (variant) {
      case ScanVariant::anti_diag_tl: return std::make_tuple(r + c, r);
      case ScanVariant::anti_diag_br: return std::make_tuple(-(r + c), -r);
      case ScanVariant::main_diag_tr: return std::make_tuple(r - c, r);
      case ScanVariant::main_diag_bl: return std::make_tuple(c - r, -r);
    }
    return std::make_tuple(0, 0);
  };
  std::sort(pixels.begin(), pixels.end(), [&](int a, int b) { return key(a) < key(b); });
  return pixels;
}

Tensor<double> reference_selective_scan(const Tensor<double>& u, const Tensor<double>& delta,
                                        const Tensor<double>& a_log, const Tensor<double>& b,
                                        const Tensor<double>& c, const Tensor<double>& d) {
  const int n = u.dim(0), ch = u.dim(1), len = u.dim(2), st = a_log.dim(1);
  Tensor<double> y(u.shape());
  auto U = [&](int i, int k, int t) { return u[(static_cast<std::size_t>(i) * ch + k) * len + t]; };
  auto DT = [&](int i, int k, int t) { return delta[(static_cast<std::size_t>(i) * ch + k) * len + t]; };
  auto Bv = [&](int i, int s, int t) { return b[(static_cast<std::size_t>(i) * st + s) * len + t]; };
  auto Cv = [&](int i, int s, int t) { return c[(static_cast<std::size_t>(i) * st + s) * len + t]; };
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < ch; ++k) {
      std::vector<double> h(static_cast<std::size_t>(st), 0.0);
      for (int t = 0; t < len; ++t) {
        double out = d[static_cast<std::size_t>(k)] * U(i, k, t);
        for (int s = 0; s < st; ++s) {
          const double A = -std::exp(a_log[static_cast<std::size_t>(k) * st + s]);
          const double a_bar = std::exp(A * DT(i, k, t));
          const double b_bar = DT(i, k, t) * Bv(i, s, t);
          h[static_cast<std::size_t>(s)] = a_bar * h[static_cast<std::size_t>(s)] + b_bar * U(i, k, t);
          out += Cv(i, s, t) * h[static_cast<std::size_t>(s)];
        }
        y[(static_cast<std::size_t>(i) * ch + k) * len + t] = out;
      }
    }
  }
  return y;
}

namespace {

// out = W * v (+ bias) for a 1x1 convolution weight (out, in, 1, 1).
std::vector<double> matvec(const Tensor<double>& w, const Tensor<double>* bias, const std::vector<double>& v) {
  const int rows = w.dim(0), cols = w.dim(1);
  std::vector<double> out(static_cast<std::size_t>(rows), 0.0);
  for (int r = 0; r < rows; ++r) {
    double acc = bias ? (*bias)[static_cast<std::size_t>(r)] : 0.0;
    for (int k = 0; k < cols; ++k) acc += w[static_cast<std::size_t>(r) * cols + k] * v[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

}  // namespace

Tensor<double> reference_ss2d_path(const Tensor<double>& x, const SsmParams<double>& p, const std::vector<int>& order) {
  const int n = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int st = p.a_log->value.dim(1);
  Tensor<double> y(x.shape());
  for (int i = 0; i < n; ++i) {
    std::vector<std::vector<double>> state(static_cast<std::size_t>(ch), std::vector<double>(static_cast<std::size_t>(st), 0.0));
    for (int pix : order) {
      const int r = pix / w, col = pix % w;
      std::vector<double> token(static_cast<std::size_t>(ch));
      for (int k = 0; k < ch; ++k) token[static_cast<std::size_t>(k)] = x.at(i, k, r, col);
      const auto low = matvec(p.dt_in.weight->value, nullptr, token);
      auto step = matvec(p.dt_out.weight->value, &p.dt_out.bias->value, low);
      for (double& v : step) v = v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      const auto bvec = matvec(p.b_proj.weight->value, nullptr, token);
      const auto cvec = matvec(p.c_proj.weight->value, nullptr, token);
      for (int k = 0; k < ch; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        double out = p.d->value[ku] * token[ku];
        for (int s = 0; s < st; ++s) {
          const auto su = static_cast<std::size_t>(s);
          const double A = -std::exp(p.a_log->value[ku * static_cast<std::size_t>(st) + su]);
          state[ku][su] = std::exp(A * step[ku]) * state[ku][su] + step[ku] * bvec[su] * token[ku];
          out += cvec[su] * state[ku][su];
        }
        y.at(i, k, r, col) = out;
      }
    }
  }
  (void)h;
  return y;
}

}  // namespace cmfd::oracle

namespace cmfd::oracle {

namespace {

constexpr double kEps = 2.220446049250313e-16;

using Grid = std::vector<std::vector<double>>;

Grid to_grid(const Tensor<double>& t) {
  Grid g(static_cast<std::size_t>(t.dim(0)), std::vector<double>(static_cast<std::size_t>(t.dim(1))));
  for (int r = 0; r < t.dim(0); ++r)
    for (int c = 0; c < t.dim(1); ++c) g[r][c] = t[static_cast<std::size_t>(r) * t.dim(1) + c];
  return g;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double numpy_round(double v) {
  const double f = std::floor(v);
  const double diff = v - f;
  if (diff > 0.5) return f + 1;
  if (diff < 0.5) return f;
  return std::fmod(f, 2.0) == 0 ? f : f + 1;
}

}  // namespace

double reference_weighted_fbeta(const Tensor<double>& pred, const Tensor<double>& gt) {
  const Grid p = to_grid(pred), g = to_grid(gt);
  const int h = gt.dim(0), w = gt.dim(1);
  bool any = false;
  for (const auto& row : g)
    for (double v : row) any = any || v == 1.0;
  if (!any) return 0.0;

  Grid e(h, std::vector<double>(w)), et = e, dst = e;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) e[r][c] = std::abs(p[r][c] - g[r][c]);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (g[r][c] == 1.0) {
        et[r][c] = e[r][c];
        continue;
      }
      double best = 1e300, val = -1;
      for (int rr = 0; rr < h; ++rr)
        for (int cc = 0; cc < w; ++cc) {
          if (g[rr][cc] != 1.0) continue;
          const double d = std::hypot(static_cast<double>(rr - r), static_cast<double>(cc - c));
          if (d < best - 1e-12) {
            best = d;
            val = e[rr][cc];
          } else if (std::abs(d - best) <= 1e-12 && e[rr][cc] > val) {
            val = e[rr][cc];
          }
        }
      et[r][c] = val;
      dst[r][c] = best;
    }

  double kernel[7][7], kmax = 0, ksum = 0;
  for (int y = -3; y <= 3; ++y)
    for (int x = -3; x <= 3; ++x) {
      kernel[y + 3][x + 3] = std::exp(-(x * x + y * y) / (2.0 * 5.0 * 5.0));
      kmax = std::max(kmax, kernel[y + 3][x + 3]);
    }
  for (auto& row : kernel)
    for (double& v : row) {
      if (v < kEps * kmax) v = 0;
      ksum += v;
    }
  for (auto& row : kernel)
    for (double& v : row) v /= ksum;

  double tpw_loss = 0, fpw = 0, fg = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double ea = 0;
      for (int y = -3; y <= 3; ++y)
        for (int x = -3; x <= 3; ++x) {
          const int rr = r + y, cc = c + x;
          if (rr >= 0 && rr < h && cc >= 0 && cc < w) ea += kernel[y + 3][x + 3] * et[rr][cc];
        }
      if (g[r][c] == 1.0) {
        const double m = ea < e[r][c] ? ea : e[r][c];
        tpw_loss += m;
        fg += 1;
      } else {
        const double importance = 2 - std::exp(std::log(0.5) / 5 * dst[r][c]);
        fpw += e[r][c] * importance;
      }
    }
  const double tpw = fg - tpw_loss;
  const double rec = 1 - tpw_loss / fg;
  const double prec = tpw / (tpw + fpw + kEps);
  return (1 + 1.0) * rec * prec / (rec + 1.0 * prec + kEps);
}

double reference_s_measure(const Tensor<double>& pred, const Tensor<double>& gt) {
  const Grid p = to_grid(pred), g = to_grid(gt);
  const int h = gt.dim(0), w = gt.dim(1);
  std::vector<double> all_p, all_g;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      all_p.push_back(p[r][c]);
      all_g.push_back(g[r][c]);
    }
  const double y = mean_of(all_g);
  if (y == 0) return std::clamp(1 - mean_of(all_p), 0.0, 1.0);
  if (y == 1) return std::clamp(mean_of(all_p), 0.0, 1.0);

  auto s_object = [](const std::vector<double>& vals) {
    const double x = mean_of(vals);
    double ss = 0;
    for (double v : vals) ss += (v - x) * (v - x);
    const double sd = vals.size() > 1 ? std::sqrt(ss / static_cast<double>(vals.size() - 1)) : 0.0;
    return 2 * x / (x * x + 1 + sd + kEps);
  };
  std::vector<double> fg_vals, bg_vals;
  for (std::size_t i = 0; i < all_g.size(); ++i) {
    if (all_g[i] == 1) fg_vals.push_back(all_p[i] * all_g[i]);
    else bg_vals.push_back((1 - all_p[i]) * (1 - all_g[i]));
  }
  const double object = y * s_object(fg_vals) + (1 - y) * s_object(bg_vals);

  double mr = 0, mc = 0, n = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (g[r][c] == 1) {
        mr += r;
        mc += c;
        n += 1;
      }
  const int cx = static_cast<int>(numpy_round(mc / n)) + 1;
  const int cy = static_cast<int>(numpy_round(mr / n)) + 1;

  auto ssim = [](const std::vector<double>& a, const std::vector<double>& b) {
    const double N = static_cast<double>(a.size());
    if (a.empty()) return 0.0;
    const double x = mean_of(a), yy = mean_of(b);
    double vx = 0, vy = 0, cxy = 0;
    if (a.size() > 1) {
      for (std::size_t i = 0; i < a.size(); ++i) {
        vx += (a[i] - x) * (a[i] - x);
        vy += (b[i] - yy) * (b[i] - yy);
        cxy += (a[i] - x) * (b[i] - yy);
      }
      vx /= N - 1;
      vy /= N - 1;
      cxy /= N - 1;
    }
    const double alpha = 4 * x * yy * cxy;
    const double beta = (x * x + yy * yy) * (vx + vy);
    if (alpha != 0) return alpha / (beta + kEps);
    if (beta == 0) return 1.0;
    return 0.0;
  };
  auto quad = [&](int r0, int r1, int c0, int c1) {
    std::vector<double> a, b;
    for (int r = r0; r < r1; ++r)
      for (int c = c0; c < c1; ++c) {
        a.push_back(p[r][c]);
        b.push_back(g[r][c]);
      }
    return ssim(a, b);
  };
  const double area = static_cast<double>(h) * w;
  const double w1 = cx * cy / area, w2 = cy * (w - cx) / area, w3 = (h - cy) * cx / area;
  const double w4 = 1 - w1 - w2 - w3;
  const double region = w1 * quad(0, cy, 0, cx) + w2 * quad(0, cy, cx, w) + w3 * quad(cy, h, 0, cx) + w4 * quad(cy, h, cx, w);
  return std::clamp(0.5 * object + 0.5 * region, 0.0, 1.0);
}

double reference_e_measure(const Tensor<double>& pred, const Tensor<double>& gt) {
  const Grid p = to_grid(pred), g = to_grid(gt);
  const int h = gt.dim(0), w = gt.dim(1);
  const double n = static_cast<double>(h) * w;
  double mean_p = 0;
  for (const auto& row : p)
    for (double v : row) mean_p += v / n;
  const double thr = std::min(2 * mean_p, 1.0);
  Grid fm(h, std::vector<double>(w));
  double mean_fm = 0, mean_gt = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      fm[r][c] = (p[r][c] > 0 && p[r][c] >= thr) ? 1.0 : 0.0;
      mean_fm += fm[r][c];
      mean_gt += g[r][c];
    }
  const double gt_fg = mean_gt;
  mean_fm /= n;
  mean_gt /= n;
  double sum = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double enhanced;
      if (gt_fg == 0) {
        enhanced = 1 - fm[r][c];
      } else if (gt_fg == n) {
        enhanced = fm[r][c];
      } else {
        const double a = fm[r][c] - mean_fm, b = g[r][c] - mean_gt;
        const double align = 2 * a * b / (a * a + b * b + kEps);
        enhanced = (align + 1) * (align + 1) / 4;
      }
      sum += enhanced;
    }
  return sum / n;
}

}  // namespace cmfd::oracle
