#include "cmfd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace cmfd {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

void check_pair(const char* op, const Tensor<double>& pred, const Tensor<double>& gt) {
  if (pred.rank() != 2 || pred.shape() != gt.shape()) {
    throw std::invalid_argument(std::string(op) + ": prediction " + to_string(pred.shape()) + " and ground truth " +
                                to_string(gt.shape()) + " must be matching H x W maps");
  }
  for (double v : gt.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument(std::string(op) + ": ground truth is not binary");
  }
  for (double v : pred.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(op) + ": prediction outside [0,1]");
  }
}

// Mean and unbiased variance/covariance helpers over selected pixels.
struct Moments {
  double n = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  void add(double x, double y) {
    n += 1;
    sx += x;
    sy += y;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
  }
};

double ssim(const Moments& m) {
  if (m.n == 0) return 0.0;
  const double x = m.sx / m.n, y = m.sy / m.n;
  double vx = 0, vy = 0, cxy = 0;
  if (m.n > 1) {
    vx = std::max(0.0, m.sxx - m.n * x * x) / (m.n - 1);
    vy = std::max(0.0, m.syy - m.n * y * y) / (m.n - 1);
    cxy = (m.sxy - m.n * x * y) / (m.n - 1);
  }
  const double alpha = 4 * x * y * cxy;
  const double beta = (x * x + y * y) * (vx + vy);
  if (alpha != 0) return alpha / (beta + kEps);
  return beta == 0 ? 1.0 : 0.0;
}

double object_similarity(double sum, double sum_sq, double n) {
  const double x = sum / n;
  const double sd = n > 1 ? std::sqrt(std::max(0.0, sum_sq - n * x * x) / (n - 1)) : 0.0;
  return 2 * x / (x * x + 1 + sd + kEps);
}

// Round half to even, as numpy does.
double round_even(double v) { return std::nearbyint(v); }

}  // namespace

DiceIou dice_iou(const Tensor<double>& pred, const Tensor<double>& gt, double threshold) {
  check_pair("dice_iou", pred, gt);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold, g = gt[i] == 1.0;
    inter += p && g;
    uni += p || g;
  }
  if (uni == 0) return {1.0, 1.0};
  const double iou = static_cast<double>(inter) / static_cast<double>(uni);
  return {2 * iou / (1 + iou), iou};
}

double mae(const Tensor<double>& pred, const Tensor<double>& gt) {
  check_pair("mae", pred, gt);
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / static_cast<double>(pred.size());
}

double weighted_fbeta(const Tensor<double>& pred, const Tensor<double>& gt) {
  check_pair("weighted_fbeta", pred, gt);
  const int h = gt.dim(0), w = gt.dim(1);
  auto at = [w](const Tensor<double>& t, int r, int c) { return t[static_cast<std::size_t>(r) * w + c]; };
  auto fg = [&](int r, int c) { return at(gt, r, c) == 1.0; };

  std::vector<std::pair<int, int>> boundary;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!fg(r, c)) continue;
      const bool edge = (r > 0 && !fg(r - 1, c)) || (r + 1 < h && !fg(r + 1, c)) || (c > 0 && !fg(r, c - 1)) ||
                        (c + 1 < w && !fg(r, c + 1));
      if (edge) boundary.emplace_back(r, c);
    }
  if (boundary.empty()) {
    // Either no foreground at all, or foreground everywhere.
    if (std::none_of(gt.data().begin(), gt.data().end(), [](double v) { return v == 1.0; })) return 0.0;
  }

  Tensor<double> err(gt.shape()), err_t(gt.shape()), dist(gt.shape());
  for (std::size_t i = 0; i < err.size(); ++i) err[i] = std::abs(pred[i] - gt[i]);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      if (fg(r, c)) {
        err_t[i] = err[i];
        continue;
      }
      // Nearest foreground lies on the boundary; ties take the largest error.
      long best = std::numeric_limits<long>::max();
      double e = 0;
      for (auto [br, bc] : boundary) {
        const long d2 = static_cast<long>(br - r) * (br - r) + static_cast<long>(bc - c) * (bc - c);
        const double eb = err[static_cast<std::size_t>(br) * w + bc];
        if (d2 < best || (d2 == best && eb > e)) {
          best = d2;
          e = eb;
        }
      }
      err_t[i] = e;
      dist[i] = std::sqrt(static_cast<double>(best));
    }

  // Separable 7x7 Gaussian, sigma 5, zero padding.
  std::array<double, 7> k{};
  double ksum = 0;
  for (int j = 0; j < 7; ++j) ksum += k[static_cast<std::size_t>(j)] = std::exp(-(j - 3) * (j - 3) / 50.0);
  for (double& v : k) v /= ksum;
  Tensor<double> tmp(gt.shape()), ea(gt.shape());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double acc = 0;
      for (int j = -3; j <= 3; ++j)
        if (c + j >= 0 && c + j < w) acc += k[static_cast<std::size_t>(j + 3)] * at(err_t, r, c + j);
      tmp[static_cast<std::size_t>(r) * w + c] = acc;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double acc = 0;
      for (int j = -3; j <= 3; ++j)
        if (r + j >= 0 && r + j < h) acc += k[static_cast<std::size_t>(j + 3)] * at(tmp, r + j, c);
      ea[static_cast<std::size_t>(r) * w + c] = acc;
    }

  double n_fg = 0, ew_fg = 0, ew_bg = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == 1.0) {
      n_fg += 1;
      ew_fg += ea[i] < err[i] ? ea[i] : err[i];
    } else {
      ew_bg += err[i] * (2 - std::exp(std::log(0.5) / 5 * dist[i]));
    }
  }
  const double tpw = n_fg - ew_fg;
  const double recall = 1 - ew_fg / n_fg;
  const double precision = tpw / (tpw + ew_bg + kEps);
  return 2 * recall * precision / (recall + precision + kEps);
}

double s_measure(const Tensor<double>& pred, const Tensor<double>& gt) {
  check_pair("s_measure", pred, gt);
  const int h = gt.dim(0), w = gt.dim(1);
  const double total = static_cast<double>(gt.size());
  double fg_count = 0, pred_sum = 0;
  double row_sum = 0, col_sum = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      pred_sum += pred[i];
      if (gt[i] == 1.0) {
        fg_count += 1;
        row_sum += r;
        col_sum += c;
      }
    }
  const double y_mean = fg_count / total;
  if (fg_count == 0) return std::clamp(1 - pred_sum / total, 0.0, 1.0);
  if (fg_count == total) return std::clamp(pred_sum / total, 0.0, 1.0);

  // object term
  double f_sum = 0, f_sq = 0, b_sum = 0, b_sq = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == 1.0) {
      f_sum += pred[i];
      f_sq += pred[i] * pred[i];
    } else {
      const double v = 1 - pred[i];
      b_sum += v;
      b_sq += v * v;
    }
  }
  const double object = y_mean * object_similarity(f_sum, f_sq, fg_count) +
                        (1 - y_mean) * object_similarity(b_sum, b_sq, total - fg_count);

  // region term, split at the foreground centroid
  const int cx = static_cast<int>(round_even(col_sum / fg_count)) + 1;
  const int cy = static_cast<int>(round_even(row_sum / fg_count)) + 1;
  std::array<Moments, 4> parts;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      parts[static_cast<std::size_t>((r >= cy ? 2 : 0) + (c >= cx ? 1 : 0))].add(pred[i], gt[i]);
    }
  const double area = total;
  const double w1 = static_cast<double>(cx) * cy / area;
  const double w2 = static_cast<double>(cy) * (w - cx) / area;
  const double w3 = static_cast<double>(h - cy) * cx / area;
  const double w4 = 1 - w1 - w2 - w3;
  const double region = w1 * ssim(parts[0]) + w2 * ssim(parts[1]) + w3 * ssim(parts[2]) + w4 * ssim(parts[3]);
  return std::clamp(0.5 * object + 0.5 * region, 0.0, 1.0);
}

double e_measure(const Tensor<double>& pred, const Tensor<double>& gt) {
  check_pair("e_measure", pred, gt);
  const double total = static_cast<double>(gt.size());
  double pred_sum = 0;
  for (double v : pred.data()) pred_sum += v;
  const double threshold = std::min(2 * pred_sum / total, 1.0);
  double fg_fg = 0, fg_bg = 0, gt_fg = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred[i] > 0 && pred[i] >= threshold, g = gt[i] == 1.0;
    gt_fg += g;
    fg_fg += p && g;
    fg_bg += p && !g;
  }
  const double pred_fg = fg_fg + fg_bg, pred_bg = total - pred_fg;
  double enhanced = 0;
  if (gt_fg == 0) {
    enhanced = pred_bg;
  } else if (gt_fg == total) {
    enhanced = pred_fg;
  } else {
    const double bg_fg = gt_fg - fg_fg, bg_bg = pred_bg - bg_fg;
    const double mp = pred_fg / total, mg = gt_fg / total;
    auto term = [](double a, double b) {
      const double align = 2 * a * b / (a * a + b * b + kEps);
      return (align + 1) * (align + 1) / 4;
    };
    enhanced = fg_fg * term(1 - mp, 1 - mg) + fg_bg * term(1 - mp, -mg) + bg_fg * term(-mp, 1 - mg) +
               bg_bg * term(-mp, -mg);
  }
  return enhanced / total;
}

ImageMetrics evaluate_pair(const Tensor<double>& pred, const Tensor<double>& gt, std::string id) {
  ImageMetrics m;
  m.id = std::move(id);
  const auto di = dice_iou(pred, gt);
  m.dice = di.dice;
  m.iou = di.iou;
  m.fbw = weighted_fbeta(pred, gt);
  m.s_alpha = s_measure(pred, gt);
  m.e_xi = e_measure(pred, gt);
  m.mae = mae(pred, gt);
  return m;
}

double percent(double value) { return std::round(value * 10000.0) / 100.0; }

MetricsReport evaluate_dataset(std::span<const Tensor<double>> preds, std::span<const Tensor<double>> gts,
                               std::span<const std::string> ids) {
  if (preds.size() != gts.size()) {
    throw std::invalid_argument("evaluate_dataset: " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(gts.size()) + " ground truths");
  }
  if (preds.empty()) throw std::invalid_argument("evaluate_dataset: no images");
  if (!ids.empty() && ids.size() != preds.size()) throw std::invalid_argument("evaluate_dataset: id count mismatch");
  MetricsReport report;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    report.per_image.push_back(evaluate_pair(preds[i], gts[i], ids.empty() ? std::to_string(i) : ids[i]));
  }
  auto& m = report.means;
  m.id = "mean";
  for (const auto& r : report.per_image) {
    m.dice += r.dice;
    m.iou += r.iou;
    m.fbw += r.fbw;
    m.s_alpha += r.s_alpha;
    m.e_xi += r.e_xi;
    m.mae += r.mae;
  }
  const double n = static_cast<double>(report.per_image.size());
  for (double* v : {&m.dice, &m.iou, &m.fbw, &m.s_alpha, &m.e_xi, &m.mae}) *v /= n;
  return report;
}

namespace {

nlohmann::ordered_json metrics_json(const ImageMetrics& m, bool as_percent) {
  auto f = [as_percent](double v) { return as_percent ? percent(v) : v; };
  return {{"mdice", f(m.dice)}, {"miou", f(m.iou)}, {"fbw", f(m.fbw)},
          {"s_alpha", f(m.s_alpha)}, {"e_xi", f(m.e_xi)}, {"mae", f(m.mae)}};
}

}  // namespace

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["n_images"] = per_image.size();
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : per_image) {
    nlohmann::ordered_json row{{"id", r.id}};
    row.update(metrics_json(r, false));
    rows.push_back(std::move(row));
  }
  j["per_image"] = std::move(rows);
  j["means"] = metrics_json(means, false);
  j["percent"] = metrics_json(means, true);
  return j.dump(2);
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  const char* names[] = {"mDice", "mIoU", "Fbw", "S_alpha", "E_xi", "MAE"};
  const double values[] = {means.dice, means.iou, means.fbw, means.s_alpha, means.e_xi, means.mae};
  for (const char* n : names) os << std::setw(9) << n;
  os << '\n';
  os << std::fixed << std::setprecision(2);
  for (double v : values) os << std::setw(9) << percent(v);
  os << '\n';
  return os.str();
}

}  // namespace cmfd
