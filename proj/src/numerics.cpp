#include "afedcl/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace afedcl {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string dims(const Tensor& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.rank(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.shape()[i]);
    }
    return s + "]";
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + dims(*this));
    }
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return Tensor({0, 0});
    const std::size_t width = rows.front().size();
    std::vector<double> flat;
    flat.reserve(rows.size() * width);
    for (const auto& r : rows) {
        if (r.size() != width) throw ShapeError("ragged rows in Tensor::from_rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), width}, std::move(flat));
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw ShapeError("rows() on tensor of shape " + dims(*this));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw ShapeError("cols() on tensor of shape " + dims(*this));
    return shape_[1];
}

std::span<const double> Tensor::row(std::size_t r) const {
    const std::size_t w = cols();
    return std::span<const double>(data_).subspan(r * w, w);
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
    const std::size_t w = cols();
    Tensor out = Tensor::matrix(indices.size(), w);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows()) throw ShapeError("gather_rows index out of range");
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * w), w,
                    out.data_.begin() + static_cast<std::ptrdiff_t>(i * w));
    }
    return out;
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::require_finite(const char* where) const {
    if (!all_finite()) throw NumericError(std::string("non-finite value in ") + where);
}

Tensor vstack(const Tensor& top, const Tensor& bottom) {
    if (top.cols() != bottom.cols()) {
        throw ShapeError("vstack width mismatch " + dims(top) + " vs " + dims(bottom));
    }
    std::vector<double> data(top.values().begin(), top.values().end());
    data.insert(data.end(), bottom.values().begin(), bottom.values().end());
    return Tensor({top.rows() + bottom.rows(), top.cols()}, std::move(data));
}

AffineLayer::AffineLayer(std::size_t in_dim, std::size_t out_dim)
    : weights(Tensor::matrix(in_dim, out_dim)), bias(Tensor({out_dim})) {}

AffineLayer::AffineLayer(Tensor w, Tensor b) : weights(std::move(w)), bias(std::move(b)) {
    if (weights.rank() != 2 || bias.rank() != 1 || bias.size() != weights.cols()) {
        throw ShapeError("affine layer weights " + dims(weights) + " inconsistent with bias " +
                         dims(bias));
    }
}

Tensor affine_forward(const AffineLayer& layer, const Tensor& input) {
    const std::size_t in = layer.in_dim();
    const std::size_t out = layer.out_dim();
    if (input.rank() != 2 || input.cols() != in) {
        throw ShapeError("affine_forward: input " + dims(input) + " vs layer in_dim " +
                         std::to_string(in));
    }
    const std::size_t batch = input.rows();
    Tensor y = Tensor::matrix(batch, out);
    const double* w = layer.weights.values().data();
    for (std::size_t b = 0; b < batch; ++b) {
        double* yr = &y(b, 0);
        std::copy_n(layer.bias.values().data(), out, yr);
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = input(b, i);
            const double* wr = w + i * out;
            for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
        }
    }
    y.require_finite("affine_forward");
    return y;
}

AffineGrads affine_backward(const AffineLayer& layer, const Tensor& input,
                            const Tensor& upstream) {
    const std::size_t in = layer.in_dim();
    const std::size_t out = layer.out_dim();
    if (input.rank() != 2 || input.cols() != in || upstream.rank() != 2 ||
        upstream.cols() != out || upstream.rows() != input.rows()) {
        throw ShapeError("affine_backward: input " + dims(input) + ", upstream " +
                         dims(upstream) + " for layer " + std::to_string(in) + "->" +
                         std::to_string(out));
    }
    const std::size_t batch = input.rows();
    AffineGrads g{Tensor::matrix(in, out), Tensor({out}), Tensor::matrix(batch, in)};
    const double* w = layer.weights.values().data();
    double* gw = g.weights.values().data();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* ur = upstream.values().data() + b * out;
        for (std::size_t o = 0; o < out; ++o) g.bias[o] += ur[o];
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = input(b, i);
            double* gwr = gw + i * out;
            const double* wr = w + i * out;
            double acc = 0.0;
            for (std::size_t o = 0; o < out; ++o) {
                gwr[o] += xi * ur[o];
                acc += ur[o] * wr[o];
            }
            g.input(b, i) = acc;
        }
    }
    g.weights.require_finite("affine_backward");
    g.input.require_finite("affine_backward");
    return g;
}

Tensor relu(const Tensor& input) {
    Tensor y = input;
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    y.require_finite("relu");
    return y;
}

Tensor relu_backward(const Tensor& input, const Tensor& upstream) {
    if (input.shape() != upstream.shape()) throw ShapeError("relu_backward shape mismatch");
    Tensor g = upstream;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(input[i] > 0.0)) g[i] = 0.0;
    }
    return g;
}

Tensor softmax(const Tensor& logits) {
    const std::size_t n = logits.rows();
    const std::size_t k = logits.cols();
    Tensor p = Tensor::matrix(n, k);
    for (std::size_t r = 0; r < n; ++r) {
        double mx = logits(r, 0);
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += (p(r, c) = std::exp(logits(r, c) - mx));
        for (std::size_t c = 0; c < k; ++c) p(r, c) /= z;
    }
    p.require_finite("softmax");
    return p;
}

CrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    const std::size_t n = logits.rows();
    const std::size_t k = logits.cols();
    if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count mismatch");
    if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
    CrossEntropy ce{0.0, Tensor::matrix(n, k)};
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] >= k) {
            throw std::out_of_range("label " + std::to_string(labels[r]) + " out of range [0," +
                                    std::to_string(k) + ")");
        }
        double mx = logits(r, 0);
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(logits(r, c) - mx);
        const double log_z = std::log(z);
        ce.loss += -(logits(r, labels[r]) - mx - log_z);
        for (std::size_t c = 0; c < k; ++c) {
            const double p = std::exp(logits(r, c) - mx - log_z);
            ce.grad_logits(r, c) = (p - (c == labels[r] ? 1.0 : 0.0)) * inv_n;
        }
    }
    ce.loss *= inv_n;
    if (!std::isfinite(ce.loss)) throw NumericError("non-finite cross-entropy");
    ce.grad_logits.require_finite("softmax_cross_entropy");
    return ce;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
    std::vector<std::size_t> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits(r, c) > logits(r, best)) best = c;
        }
        out[r] = best;
    }
    return out;
}

OptimizerState::OptimizerState(const OptimizerSettings& s, std::size_t parameter_count)
    : settings(s) {
    if (!(s.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (s.kind == OptimizerKind::Adam) {
        first_moment.assign(parameter_count, 0.0);
        second_moment.assign(parameter_count, 0.0);
    }
}

void apply_optimizer_step(OptimizerState& state, std::span<double> params,
                          std::span<const double> grads) {
    if (params.size() != grads.size()) {
        throw ShapeError("optimizer_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
    }
    const OptimizerSettings& s = state.settings;
    if (s.kind == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= s.learning_rate * grads[i];
        ++state.step_count;
        return;
    }
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
        throw ShapeError("optimizer_step: Adam state sized for " +
                         std::to_string(state.first_moment.size()) + " params, got " +
                         std::to_string(params.size()));
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(s.beta1, t);
    const double c2 = 1.0 - std::pow(s.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = s.beta1 * m + (1.0 - s.beta1) * grads[i];
        v = s.beta2 * v + (1.0 - s.beta2) * grads[i] * grads[i];
        const double m_hat = m / c1;
        const double v_hat = v / c2;
        params[i] -= s.learning_rate * m_hat / (std::sqrt(v_hat) + s.epsilon);
    }
    for (double p : params) {
        if (!std::isfinite(p)) throw NumericError("non-finite parameter after optimizer step");
    }
}

OptimizerStepResult optimizer_step(const OptimizerState& state, std::span<const double> params,
                                   std::span<const double> grads) {
    OptimizerStepResult r{std::vector<double>(params.begin(), params.end()), state};
    apply_optimizer_step(r.state, r.params, grads);
    return r;
}

}  // namespace afedcl
