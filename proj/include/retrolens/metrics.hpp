#pragma once

#include <cstdint>
#include <vector>

#include "retrolens/image.hpp"

namespace retrolens {

// 10·log10(peak²/MSE); +inf sentinel on identical inputs.
double psnr(const Image& a, const Image& b, double peak = 1.0);

// Mean local SSIM over all window positions (uniform window), standard
// constants c1=(0.01·peak)², c2=(0.03·peak)²; channels averaged.
double ssim(const Image& a, const Image& b, int window = 8, double peak = 1.0);

// Mean over random unit projections of the 1-D optimal-transport distance
// between the two point sets; deterministic per seed.
double sliced_wasserstein(const std::vector<std::vector<double>>& set_a,
                          const std::vector<std::vector<double>>& set_b, int projections,
                          std::uint64_t seed);

struct RocCurve {
    std::vector<double> thresholds;
    std::vector<double> tpr;
    std::vector<double> fpr;
    double auc = 0.0;
};

// Threshold sweep over sorted unique scores; AUC by trapezoid (ties averaged).
RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace retrolens
