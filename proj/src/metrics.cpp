#include "retrolens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "retrolens/rng.hpp"

namespace retrolens {

namespace {

void check_same_dims(const Image& a, const Image& b, const char* op) {
    if (a.c != b.c || a.h != b.h || a.w != b.w)
        throw ShapeError(std::string(op) + ": image dimensions differ");
}

}  // namespace

double psnr(const Image& a, const Image& b, double peak) {
    check_same_dims(a, b, "psnr");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const Image& a, const Image& b, int window, double peak) {
    check_same_dims(a, b, "ssim");
    if (a.h < window || a.w < window)
        throw ValueError("ssim: image smaller than the window");
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    const double n = static_cast<double>(window) * window;
    double total = 0.0;
    std::size_t count = 0;
    for (int ch = 0; ch < a.c; ++ch)
        for (int y = 0; y + window <= a.h; ++y)
            for (int x = 0; x + window <= a.w; ++x) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int dy = 0; dy < window; ++dy)
                    for (int dx = 0; dx < window; ++dx) {
                        const double va = a.at(ch, y + dy, x + dx);
                        const double vb = b.at(ch, y + dy, x + dx);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                const double mua = sa / n, mub = sb / n;
                const double vara = saa / n - mua * mua;
                const double varb = sbb / n - mub * mub;
                const double cov = sab / n - mua * mub;
                total += ((2 * mua * mub + c1) * (2 * cov + c2)) /
                         ((mua * mua + mub * mub + c1) * (vara + varb + c2));
                ++count;
            }
    return total / static_cast<double>(count);
}

double sliced_wasserstein(const std::vector<std::vector<double>>& set_a,
                          const std::vector<std::vector<double>>& set_b, int projections,
                          std::uint64_t seed) {
    if (set_a.empty() || set_b.empty())
        throw ValueError("sliced_wasserstein: sets must be nonempty");
    const std::size_t dim = set_a[0].size();
    for (const auto& v : set_a)
        if (v.size() != dim) throw ShapeError("sliced_wasserstein: inconsistent dimension");
    for (const auto& v : set_b)
        if (v.size() != dim) throw ShapeError("sliced_wasserstein: dimension mismatch");
    if (projections < 1) throw ValueError("sliced_wasserstein: need at least one projection");

    Rng rng(seed);
    std::vector<double> u(dim), pa(set_a.size()), pb(set_b.size());
    double total = 0.0;
    for (int p = 0; p < projections; ++p) {
        double norm = 0.0;
        for (auto& c : u) {
            c = rng.normal();
            norm += c * c;
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            u[0] = 1.0;
            norm = 1.0;
        }
        for (auto& c : u) c /= norm;
        for (std::size_t i = 0; i < set_a.size(); ++i) {
            double s = 0.0;
            for (std::size_t d = 0; d < dim; ++d) s += u[d] * set_a[i][d];
            pa[i] = s;
        }
        for (std::size_t i = 0; i < set_b.size(); ++i) {
            double s = 0.0;
            for (std::size_t d = 0; d < dim; ++d) s += u[d] * set_b[i][d];
            pb[i] = s;
        }
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());
        double dist = 0.0;
        if (pa.size() == pb.size()) {
            for (std::size_t i = 0; i < pa.size(); ++i) dist += std::fabs(pa[i] - pb[i]);
            dist /= static_cast<double>(pa.size());
        } else {
            // quantile-matched transport for unequal sizes
            const std::size_t k = std::max(pa.size(), pb.size());
            for (std::size_t i = 0; i < k; ++i) {
                const double q = (static_cast<double>(i) + 0.5) / static_cast<double>(k);
                const auto qa = pa[std::min(pa.size() - 1,
                                            static_cast<std::size_t>(q * static_cast<double>(pa.size())))];
                const auto qb = pb[std::min(pb.size() - 1,
                                            static_cast<std::size_t>(q * static_cast<double>(pb.size())))];
                dist += std::fabs(qa - qb);
            }
            dist /= static_cast<double>(k);
        }
        total += dist;
    }
    return total / static_cast<double>(projections);
}

RocCurve roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ShapeError("roc_auc: scores and labels differ in length");
    std::size_t pos = 0, neg = 0;
    for (int l : labels) {
        if (l == 1)
            ++pos;
        else if (l == 0)
            ++neg;
        else
            throw ValueError("roc_auc: labels must be 0 or 1");
    }
    if (pos == 0 || neg == 0) throw ValueError("roc_auc: both classes must be present");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });

    RocCurve curve;
    curve.thresholds.push_back(std::numeric_limits<double>::infinity());
    curve.tpr.push_back(0.0);
    curve.fpr.push_back(0.0);
    std::size_t tp = 0, fp = 0;
    double auc = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double threshold = scores[order[i]];
        // consume the whole tie group at once (ties averaged by the trapezoid)
        while (i < order.size() && scores[order[i]] == threshold) {
            if (labels[order[i]] == 1)
                ++tp;
            else
                ++fp;
            ++i;
        }
        const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
        const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
        auc += (fpr - curve.fpr.back()) * 0.5 * (tpr + curve.tpr.back());
        curve.thresholds.push_back(threshold);
        curve.tpr.push_back(tpr);
        curve.fpr.push_back(fpr);
    }
    curve.auc = auc;
    return curve;
}

}  // namespace retrolens
