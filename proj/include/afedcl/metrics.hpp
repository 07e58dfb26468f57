// Classification metrics.
#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace afedcl {

struct Evaluation {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
};

/// Accuracy and macro-F1. Classes that never occur in `truth` are excluded
/// from the F1 mean. Throws std::invalid_argument on empty or mismatched input.
Evaluation evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> truth,
                    std::size_t num_classes);

/// Evaluates `predict_fn(features)` against `labels`.
template <typename PredictFn, typename DatasetT>
Evaluation evaluate(PredictFn&& predict_fn, const DatasetT& test_set) {
    if (test_set.size() == 0) throw std::invalid_argument("empty test set");
    const std::vector<std::size_t> pred = predict_fn(test_set.features);
    return evaluate(pred, test_set.labels, test_set.num_classes);
}

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
};

/// Ordinary least squares of y on x. Throws std::invalid_argument with
/// "degenerate variance" when x is constant, or for fewer than 2 points.
LinearFit least_squares(std::span<const double> x, std::span<const double> y);

}  // namespace afedcl
