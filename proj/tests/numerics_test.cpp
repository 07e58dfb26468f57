#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "afedcl/bytes.hpp"
#include "afedcl/numerics.hpp"
#include "afedcl/random.hpp"

using namespace afedcl;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.values()) v = rng.normal();
    return t;
}

}  // namespace

TEST(Tensor, ShapeAndData) {
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_DOUBLE_EQ(t(1, 2), 1.5);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_THROW(Tensor({3}).rows(), ShapeError);
}

TEST(Tensor, FromRowsRejectsRagged) {
    EXPECT_THROW(Tensor::from_rows({{1, 2}, {3}}), ShapeError);
    const Tensor t = Tensor::from_rows({{1, 2}, {3, 4}});
    EXPECT_DOUBLE_EQ(t(1, 0), 3.0);
}

TEST(Tensor, GatherAndStack) {
    const Tensor t = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}});
    const std::size_t idx[] = {2, 0};
    const Tensor g = t.gather_rows(idx);
    EXPECT_EQ(g, Tensor::from_rows({{5, 6}, {1, 2}}));
    const std::size_t bad[] = {3};
    EXPECT_THROW(t.gather_rows(bad), ShapeError);
    EXPECT_EQ(vstack(g, g).rows(), 4u);
    EXPECT_THROW(vstack(t, Tensor::matrix(1, 3)), ShapeError);
}

TEST(Affine, ClosedForm) {
    AffineLayer l(Tensor::from_rows({{1, 2}, {3, 4}}), Tensor({2}, std::vector<double>{0.5, -1}));
    const Tensor y = affine_forward(l, Tensor::from_rows({{1, 1}, {2, 0}}));
    EXPECT_EQ(y, Tensor::from_rows({{4.5, 5}, {2.5, 3}}));
}

TEST(Affine, ZeroLayerGivesZeros) {
    AffineLayer l(4, 3);
    Rng rng(1);
    const Tensor y = affine_forward(l, random_matrix(rng, 5, 4));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Affine, ShapeMismatch) {
    AffineLayer l(4, 3);
    EXPECT_THROW(affine_forward(l, Tensor::matrix(2, 3)), ShapeError);
    EXPECT_THROW(AffineLayer(Tensor::matrix(2, 2), Tensor({3})), ShapeError);
}

TEST(Affine, NonFiniteInputRaises) {
    AffineLayer l(Tensor::from_rows({{1.0}}), Tensor({1}));
    EXPECT_THROW(affine_forward(l, Tensor::from_rows({{NAN}})), NumericError);
}

TEST(Affine, BackwardMatchesFiniteDifferences) {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        AffineLayer l(random_matrix(rng, 3, 4), Tensor({4}));
        for (double& b : l.bias.values()) b = rng.normal();
        const Tensor x = random_matrix(rng, 5, 3);
        const Tensor up = random_matrix(rng, 5, 4);
        // f = sum(up * (xW + b))
        auto f = [&](const AffineLayer& layer, const Tensor& in) {
            const Tensor y = affine_forward(layer, in);
            double s = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * up[i];
            return s;
        };
        const AffineGrads g = affine_backward(l, x, up);
        const double h = 1e-6;
        for (std::size_t i = 0; i < l.weights.size(); ++i) {
            AffineLayer p = l, m = l;
            p.weights[i] += h;
            m.weights[i] -= h;
            EXPECT_NEAR(g.weights[i], (f(p, x) - f(m, x)) / (2 * h), 1e-6);
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            Tensor p = x, m = x;
            p[i] += h;
            m[i] -= h;
            EXPECT_NEAR(g.input[i], (f(l, p) - f(l, m)) / (2 * h), 1e-6);
        }
        for (std::size_t o = 0; o < 4; ++o) {
            double col = 0.0;
            for (std::size_t b = 0; b < 5; ++b) col += up(b, o);
            EXPECT_NEAR(g.bias[o], col, 1e-12);
        }
    }
}

TEST(Relu, ForwardAndSubgradientAtZero) {
    const Tensor x = Tensor::from_rows({{-1, 0, 2}});
    EXPECT_EQ(relu(x), Tensor::from_rows({{0, 0, 2}}));
    const Tensor g = relu_backward(x, Tensor::from_rows({{5, 5, 5}}));
    EXPECT_EQ(g, Tensor::from_rows({{0, 0, 5}}));
}

TEST(Softmax, RowsSumToOneAndStable) {
    const Tensor p = softmax(Tensor::from_rows({{1000, 1000}, {0, std::log(3.0)}}));
    EXPECT_NEAR(p(0, 0), 0.5, 1e-15);
    EXPECT_NEAR(p(1, 1), 0.75, 1e-15);
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(p(r, 0) + p(r, 1), 1.0, 1e-15);
}

TEST(CrossEntropy, UniformLogitsGiveLogN) {
    const std::size_t labels[] = {0, 2, 3};
    const CrossEntropy ce = softmax_cross_entropy(Tensor::matrix(3, 4), labels);
    EXPECT_NEAR(ce.loss, std::log(4.0), 1e-15);
    // gradient rows sum to zero
    for (std::size_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) s += ce.grad_logits(r, c);
        EXPECT_NEAR(s, 0.0, 1e-16);
    }
}

TEST(CrossEntropy, LabelOutOfRange) {
    const std::size_t labels[] = {2};
    EXPECT_THROW(softmax_cross_entropy(Tensor::matrix(1, 2), labels), std::out_of_range);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
    Rng rng(3);
    const Tensor z = random_matrix(rng, 4, 3);
    const std::size_t y[] = {0, 2, 1, 1};
    const CrossEntropy ce = softmax_cross_entropy(z, y);
    for (std::size_t i = 0; i < z.size(); ++i) {
        Tensor p = z, m = z;
        p[i] += 1e-6;
        m[i] -= 1e-6;
        const double num = (softmax_cross_entropy(p, y).loss - softmax_cross_entropy(m, y).loss) / 2e-6;
        EXPECT_NEAR(ce.grad_logits[i], num, 1e-8);
    }
}

TEST(Argmax, TiesPickLowestIndex) {
    const auto a = argmax_rows(Tensor::from_rows({{1, 3, 3}, {2, 2, 2}, {0, -1, 5}}));
    EXPECT_EQ(a, (std::vector<std::size_t>{1, 0, 2}));
}

TEST(Optimizer, SgdStep) {
    OptimizerSettings s;
    s.kind = OptimizerKind::Sgd;
    s.learning_rate = 0.5;
    OptimizerState st(s, 2);
    std::vector<double> p{1.0, -1.0};
    const std::vector<double> g{2.0, 4.0};
    apply_optimizer_step(st, p, g);
    EXPECT_EQ(p, (std::vector<double>{0.0, -3.0}));
    EXPECT_EQ(st.step_count, 1u);
}

TEST(Optimizer, AdamMatchesScriptedOracle) {
    OptimizerSettings s;  // Adam defaults
    OptimizerState st(s, 1);
    std::vector<double> p{0.3};
    const double grads[] = {0.5, -0.2, 1.5, 0.0, -3.0};
    double m = 0, v = 0, w = 0.3;
    for (int t = 1; t <= 5; ++t) {
        const double g = grads[t - 1];
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, t));
        const double vh = v / (1 - std::pow(0.999, t));
        w -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
        const double gs[] = {g};
        apply_optimizer_step(st, p, gs);
        EXPECT_NEAR(p[0], w, 1e-15) << "step " << t;
    }
}

TEST(Optimizer, FirstAdamStepIsLearningRateTimesSign) {
    OptimizerState st(OptimizerSettings{}, 3);
    std::vector<double> p{0, 0, 0};
    const std::vector<double> g{10.0, -0.01, 1e-3};
    apply_optimizer_step(st, p, g);
    EXPECT_NEAR(p[0], -1e-3, 1e-9);
    EXPECT_NEAR(p[1], 1e-3, 1e-9);
    EXPECT_NEAR(p[2], -1e-3, 1e-8);
}

TEST(Optimizer, ValueStepLeavesInputsAlone) {
    OptimizerState st(OptimizerSettings{}, 1);
    const std::vector<double> p{1.0};
    const std::vector<double> g{1.0};
    const auto r = optimizer_step(st, p, g);
    EXPECT_EQ(st.step_count, 0u);
    EXPECT_EQ(r.state.step_count, 1u);
    EXPECT_LT(r.params[0], 1.0);
}

TEST(Optimizer, RejectsBadInput) {
    OptimizerSettings s;
    s.learning_rate = 0.0;
    EXPECT_THROW(OptimizerState(s, 1), std::invalid_argument);
    OptimizerState st(OptimizerSettings{}, 2);
    std::vector<double> p{1.0};
    const std::vector<double> g{1.0, 2.0};
    EXPECT_THROW(apply_optimizer_step(st, p, g), ShapeError);
}

TEST(Rng, DeterministicPerSeed) {
    Rng a(5), b(5), c(6);
    for (int i = 0; i < 10; ++i) {
        const double x = a.uniform();
        EXPECT_EQ(x, b.uniform());
        EXPECT_GE(x, 0.0);
        EXPECT_LT(x, 1.0);
    }
    EXPECT_NE(Rng(5).normal(), c.normal());
    EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
    EXPECT_NE(derive_seed(1, 1), derive_seed(2, 1));
}

TEST(Rng, IndexStaysInRangeAndCoversIt) {
    Rng r(9);
    std::set<std::size_t> seen;
    for (int i = 0; i < 2000; ++i) {
        const std::size_t k = r.index(7);
        ASSERT_LT(k, 7u);
        seen.insert(k);
    }
    EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, NormalMoments) {
    Rng r(11);
    const int n = 200000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, GammaMean) {
    for (double shape : {0.1, 0.5, 1.0, 3.0}) {
        Rng r(13);
        const int n = 100000;
        double s = 0;
        for (int i = 0; i < n; ++i) {
            const double g = r.gamma(shape);
            ASSERT_GE(g, 0.0);
            s += g;
        }
        EXPECT_NEAR(s / n, shape, 0.03 * std::max(1.0, shape)) << "shape " << shape;
    }
}

TEST(Rng, ShuffleIsPermutation) {
    Rng r(2);
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;
    r.shuffle(std::span(w));
    EXPECT_NE(v, w);
    std::sort(w.begin(), w.end());
    EXPECT_EQ(v, w);
}

TEST(Bytes, RoundTripAndTruncation) {
    ByteWriter w;
    w.u8(7);
    w.u16(0xBEEF);
    w.u32(0xDEADBEEF);
    w.u64(0x0123456789ABCDEFULL);
    w.f64(-0.0);
    w.u32_be(0x01020304);
    Bytes b = w.take();
    EXPECT_EQ(b[1], 0xEF);  // little-endian
    EXPECT_EQ(b[b.size() - 4], 0x01);  // big-endian
    ByteReader r(b);
    EXPECT_EQ(r.u8(), 7);
    EXPECT_EQ(r.u16(), 0xBEEF);
    EXPECT_EQ(r.u32(), 0xDEADBEEFu);
    EXPECT_EQ(r.u64(), 0x0123456789ABCDEFULL);
    EXPECT_TRUE(std::signbit(r.f64()));
    EXPECT_EQ(r.u32_be(), 0x01020304u);
    EXPECT_EQ(r.remaining(), 0u);
    EXPECT_THROW(r.u8(), TruncatedInput);
}
