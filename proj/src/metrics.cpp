#include "afedcl/metrics.hpp"

#include <string>

namespace afedcl {

Evaluation evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> truth,
                    std::size_t num_classes) {
    if (truth.empty()) throw std::invalid_argument("empty test set");
    if (predictions.size() != truth.size()) {
        throw std::invalid_argument("prediction count " + std::to_string(predictions.size()) +
                                    " != label count " + std::to_string(truth.size()));
    }
    std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const std::size_t t = truth[i];
        const std::size_t p = predictions[i];
        if (t >= num_classes || p >= num_classes) throw std::invalid_argument("class index out of range");
        if (p == t) {
            ++correct;
            ++tp[t];
        } else {
            ++fp[p];
            ++fn[t];
        }
    }
    double f1_sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (tp[c] + fn[c] == 0) continue;
        ++present;
        const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
        f1_sum += 2.0 * static_cast<double>(tp[c]) / denom;
    }
    return {static_cast<double>(correct) / static_cast<double>(truth.size()),
            f1_sum / static_cast<double>(present)};
}

LinearFit least_squares(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw std::invalid_argument("x and y lengths differ");
    if (x.size() < 2) throw std::invalid_argument("need at least 2 points");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (!(sxx > 1e-300)) throw std::invalid_argument("degenerate variance");
    const double slope = sxy / sxx;
    return {slope, my - slope * mx};
}

}  // namespace afedcl
