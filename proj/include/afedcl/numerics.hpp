// Dense tensors, affine layers, activations, losses and optimizers.
//
// Everything here is 64-bit and deterministic: no threading, no
// implementation-defined distributions. Shapes are checked on every call and
// a non-finite result raises NumericError.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace afedcl {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Row-major array of doubles. Most tensors in this project are rank 2
/// (batch x width); rank 1 is used for biases.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor({rows, cols}, fill);
    }
    /// Builds a rank-2 tensor from nested rows; all rows must have equal width.
    static Tensor from_rows(const std::vector<std::vector<double>>& rows);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::span<const double> row(std::size_t r) const;

    /// Rows `indices` stacked into a new tensor, in the given order.
    Tensor gather_rows(std::span<const std::size_t> indices) const;

    bool all_finite() const noexcept;
    /// Throws NumericError naming `where` if any element is NaN or infinite.
    void require_finite(const char* where) const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Stacks two rank-2 tensors of equal width vertically.
Tensor vstack(const Tensor& top, const Tensor& bottom);

/// y = x * W + b with W stored [in_dim x out_dim].
struct AffineLayer {
    Tensor weights;
    Tensor bias;

    AffineLayer() = default;
    AffineLayer(std::size_t in_dim, std::size_t out_dim);
    AffineLayer(Tensor w, Tensor b);

    std::size_t in_dim() const { return weights.rows(); }
    std::size_t out_dim() const { return weights.cols(); }
    std::size_t parameter_count() const { return weights.size() + bias.size(); }

    friend bool operator==(const AffineLayer&, const AffineLayer&) = default;
};

struct AffineGrads {
    Tensor weights;
    Tensor bias;
    Tensor input;
};

Tensor affine_forward(const AffineLayer& layer, const Tensor& input);
AffineGrads affine_backward(const AffineLayer& layer, const Tensor& input,
                            const Tensor& upstream);

Tensor relu(const Tensor& input);
/// Passes `upstream` where input > 0; the subgradient at exactly 0 is 0.
Tensor relu_backward(const Tensor& input, const Tensor& upstream);

/// Row-wise softmax with max subtraction.
Tensor softmax(const Tensor& logits);

struct CrossEntropy {
    double loss = 0.0;
    Tensor grad_logits;
};

/// Mean over the batch of -log softmax(logits)[label]; gradient is
/// (softmax - one_hot) / batch.
CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Row-wise argmax; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

enum class OptimizerKind : std::uint8_t { Sgd, Adam };

struct OptimizerSettings {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimizerState {
    OptimizerSettings settings;
    std::vector<double> first_moment;   // empty unless Adam
    std::vector<double> second_moment;  // empty unless Adam
    std::uint64_t step_count = 0;

    OptimizerState() = default;
    OptimizerState(const OptimizerSettings& s, std::size_t parameter_count);

    friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// In-place update of `params` and `state`.
void apply_optimizer_step(OptimizerState& state, std::span<double> params,
                          std::span<const double> grads);

struct OptimizerStepResult {
    std::vector<double> params;
    OptimizerState state;
};

/// Value-returning form of apply_optimizer_step.
OptimizerStepResult optimizer_step(const OptimizerState& state, std::span<const double> params,
                                   std::span<const double> grads);

}  // namespace afedcl
