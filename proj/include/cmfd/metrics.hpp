#pragma once

#include <span>
#include <string>
#include <vector>

#include "cmfd/tensor.hpp"

namespace cmfd {

// All measures take an H x W probability map in [0,1] and an H x W binary
// ground truth, and throw std::invalid_argument on shape or range violations.

struct DiceIou {
  double dice = 0;
  double iou = 0;
};

// Binarises pred at `threshold` (pred >= threshold is foreground). Two empty
// masks score 1. Dice is derived from IoU so dice == 2 iou / (1 + iou) holds
// bit for bit.
DiceIou dice_iou(const Tensor<double>& pred, const Tensor<double>& gt, double threshold = 0.5);

double mae(const Tensor<double>& pred, const Tensor<double>& gt);

// Weighted F-measure, beta^2 = 1, 7x7 Gaussian (sigma 5) dependency term and
// distance-decayed false-positive importance. Empty gt scores 0.
double weighted_fbeta(const Tensor<double>& pred, const Tensor<double>& gt);

// Structure measure, alpha = 0.5, clipped to [0,1].
double s_measure(const Tensor<double>& pred, const Tensor<double>& gt);

// Enhanced-alignment measure with the adaptive threshold min(2 mean(pred), 1).
double e_measure(const Tensor<double>& pred, const Tensor<double>& gt);

struct ImageMetrics {
  std::string id;
  double dice = 0;
  double iou = 0;
  double fbw = 0;
  double s_alpha = 0;
  double e_xi = 0;
  double mae = 0;
};

ImageMetrics evaluate_pair(const Tensor<double>& pred, const Tensor<double>& gt, std::string id = {});

struct MetricsReport {
  std::vector<ImageMetrics> per_image;
  ImageMetrics means;

  std::size_t n_images() const { return per_image.size(); }
  // {n_images, per_image:[...], means:{...}, percent:{...}}
  std::string to_json() const;
  // Aligned table of the means in percent: mDice, mIoU, Fbw, S_alpha, E_xi, MAE.
  std::string to_table() const;
};

// value * 100 rounded to two decimals.
double percent(double value);

MetricsReport evaluate_dataset(std::span<const Tensor<double>> preds, std::span<const Tensor<double>> gts,
                               std::span<const std::string> ids = {});

}  // namespace cmfd
