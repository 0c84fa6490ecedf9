#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mpdiff/grad_check.hpp"
#include "mpdiff/rng.hpp"
#include "mpdiff/tensor.hpp"

using namespace mpdiff;

namespace {

Tensor t1(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
}

void expect_values(const Tensor& t, const std::vector<double>& want, double tol = 0.0) {
    ASSERT_EQ(t.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.at(i), want[i], tol) << "index " << i;
}

}  // namespace

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
    Rng c(43);
    EXPECT_NE(Rng(42).next_u64(), c.next_u64());
}

TEST(Rng, SplitIsIndependentOfParentProgress) {
    Rng a(7);
    Rng early = a.split(3);
    for (int i = 0; i < 10; ++i) a.normal();
    Rng late = a.split(3);
    EXPECT_EQ(early.next_u64(), late.next_u64());
}

TEST(Rng, NormalMoments) {
    Rng r(1);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Tensor, ShapeMustHoldData) {
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    Tensor t(Shape{2, 3});
    EXPECT_EQ(t.size(), numel(t.shape()));
}

TEST(Tensor, AddExample) { expect_values(add(t1({1, 2}), t1({3, 4})), {4, 6}); }

TEST(Tensor, MatmulIdentity) {
    Rng r(3);
    Tensor x = Tensor::randn({3, 4}, r);
    Tensor eye(Shape{3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
    expect_values(matmul(eye, x), x.values());
}

TEST(Tensor, SumOfSquaresGradient) {
    Tensor x = t1({1, 2});
    x.set_requires_grad();
    sum(square(x)).backward();
    // Central-difference oracle with h = 1e-6, computed independently of the tape.
    auto f = [](double a, double b) { return a * a + b * b; };
    const double h = 1e-6;
    const double g0 = (f(1 + h, 2) - f(1 - h, 2)) / (2 * h);
    const double g1 = (f(1, 2 + h) - f(1, 2 - h)) / (2 * h);
    EXPECT_NEAR(x.grad()[0], g0, 1e-8);
    EXPECT_NEAR(x.grad()[1], g1, 1e-8);
    EXPECT_NEAR(x.grad()[0], 2.0, 1e-12);
    EXPECT_NEAR(x.grad()[1], 4.0, 1e-12);
}

TEST(Tensor, ShapeMismatchNamesBothShapes) {
    try {
        add(Tensor(Shape{2, 3}), Tensor(Shape{3, 2}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[3,2]"), std::string::npos);
    }
    EXPECT_THROW(matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3})), ShapeError);
    EXPECT_THROW(concat({Tensor(Shape{2, 3}), Tensor(Shape{3, 3})}, 1), ShapeError);
}

TEST(Tensor, UntracedTensorsHaveNoGradAfterBackward) {
    Rng r(5);
    Tensor a = Tensor::randn({4}, r).set_requires_grad();
    Tensor b = Tensor::randn({4}, r);
    Tensor mid = a * b;
    sum(exp(mid)).backward();
    EXPECT_TRUE(a.has_grad());
    EXPECT_FALSE(b.has_grad());
    EXPECT_FALSE(mid.has_grad());
}

TEST(Tensor, NoGradGuardSkipsTape) {
    Tensor a = t1({1, 2}).set_requires_grad();
    NoGradGuard g;
    Tensor y = square(a);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, ClampGradientMask) {
    Tensor x = t1({-300, -256.5, -10, 0, 10, 255.9, 300}).set_requires_grad();
    sum(clamp(x, -256, 256)).backward();
    expect_values(x, x.values());
    std::vector<double> want{0, 0, 1, 1, 1, 1, 0};
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(x.grad()[i], want[i]);
}

TEST(Tensor, BroadcastForward) {
    Tensor a(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    Tensor b(Shape{2, 1}, std::vector<double>{10, 20});
    expect_values(a + b, {11, 12, 13, 24, 25, 26});
    Tensor c(Shape{1, 3}, std::vector<double>{1, 2, 3});
    expect_values(a * c, {1, 4, 9, 4, 10, 18});
}

TEST(Tensor, ConcatSlicePermute) {
    Tensor a(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor b(Shape{2, 1}, std::vector<double>{5, 6});
    Tensor c = concat({a, b}, 1);
    EXPECT_EQ(c.shape(), (Shape{2, 3}));
    expect_values(c, {1, 2, 5, 3, 4, 6});
    expect_values(slice(c, 1, 1, 3), {2, 5, 4, 6});
    Tensor p = permute(c, {1, 0});
    EXPECT_EQ(p.shape(), (Shape{3, 2}));
    expect_values(p, {1, 3, 2, 4, 5, 6});
}

TEST(Tensor, SoftmaxRowsSumToOne) {
    Rng r(9);
    Tensor s = softmax(Tensor::randn({5, 7}, r, 3.0));
    for (std::size_t i = 0; i < 5; ++i) {
        double acc = 0;
        for (std::size_t j = 0; j < 7; ++j) acc += s.at(i * 7 + j);
        EXPECT_NEAR(acc, 1.0, 1e-14);
    }
}

TEST(Tensor, ConvIdentityKernel) {
    Rng r(11);
    Tensor x = Tensor::randn({2, 3, 5, 5}, r);
    Tensor w(Shape{3, 3, 3, 3}, 0.0);
    for (std::size_t c = 0; c < 3; ++c) w.mutable_data()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    expect_values(conv2d(x, w), x.values(), 1e-15);
}

TEST(Tensor, ConvMatchesDirectLoop) {
    Rng r(12);
    Tensor x = Tensor::randn({1, 2, 4, 3}, r);
    Tensor w = Tensor::randn({3, 2, 3, 3}, r);
    Tensor y = conv2d(x, w);
    for (int o = 0; o < 3; ++o)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 3; ++j) {
                double acc = 0;
                for (int c = 0; c < 2; ++c)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            int yy = i + dy, xx = j + dx;
                            if (yy < 0 || yy >= 4 || xx < 0 || xx >= 3) continue;
                            acc += w.at(((o * 2 + c) * 3 + dy + 1) * 3 + dx + 1) * x.at((c * 4 + yy) * 3 + xx);
                        }
                EXPECT_NEAR(y.at((o * 4 + i) * 3 + j), acc, 1e-12);
            }
}

TEST(GradCheck, SumHasZeroError) {
    Rng r(2);
    auto rep = grad_check([](const Tensor& x) { return sum(x); }, Tensor::randn({6}, r), 1e-6, 1e-9);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
    EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(GradCheck, NonFiniteIsReportedNotPassed) {
    auto rep = grad_check([](const Tensor& x) { return sum(log(x)); }, t1({-1.0, 1.0}));
    EXPECT_FALSE(rep.passed);
    EXPECT_FALSE(rep.failure.empty());
}

// Every differentiable op against central differences over 100 seeds.
struct OpCase {
    const char* name;
    Shape shape;
    std::function<Tensor(const Tensor&, Rng&)> f;
    bool positive = false;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
    const OpCase& c = GetParam();
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng r(seed, 17);
        Tensor x = Tensor::randn(c.shape, r);
        if (c.positive)
            for (auto& v : x.mutable_data()) v = 0.5 + std::abs(v);
        // Aux tensors are drawn from a stream fixed per seed so f is deterministic in x.
        // A random linear readout makes every output element matter to the scalar.
        auto fn = [&](const Tensor& in) {
            Rng aux(seed, 99);
            Tensor out = c.f(in, aux);
            Rng readout(seed, 5);
            Tensor w = Tensor::randn({out.size()}, readout);
            return sum(reshape(out, {out.size()}) * w);
        };
        auto rep = grad_check(fn, x, 1e-6, 1e-5);
        ASSERT_TRUE(rep.passed) << c.name << " seed " << seed << " err " << rep.max_rel_error << " " << rep.failure;
    }
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"add_bcast", {3, 4}, [](const Tensor& x, Rng& r) { return x + Tensor::randn({1, 4}, r); }},
        OpCase{"mul_bcast_rhs", {3, 1}, [](const Tensor& x, Rng& r) { return Tensor::randn({3, 4}, r) * x; }},
        OpCase{"sub", {5}, [](const Tensor& x, Rng& r) { return Tensor::randn({5}, r) - x; }},
        OpCase{"div", {5}, [](const Tensor& x, Rng&) { return div(Tensor(Shape{5}, 1.0), x); }, true},
        OpCase{"sqrt", {5}, [](const Tensor& x, Rng&) { return sqrt(x); }, true},
        OpCase{"exp", {5}, [](const Tensor& x, Rng&) { return exp(x); }},
        OpCase{"log", {5}, [](const Tensor& x, Rng&) { return log(x); }, true},
        OpCase{"cos", {5}, [](const Tensor& x, Rng&) { return cos(x); }},
        OpCase{"silu", {6}, [](const Tensor& x, Rng&) { return silu(x); }},
        OpCase{"clamp", {6}, [](const Tensor& x, Rng&) { return clamp(x * 3.0, -2.5, 2.5); }},
        OpCase{"mean", {6}, [](const Tensor& x, Rng&) { return mean(square(x)); }},
        OpCase{"sum_axis", {2, 3, 4}, [](const Tensor& x, Rng&) { return sum_axis(x, 1); }},
        OpCase{"mean_axis", {2, 3, 4}, [](const Tensor& x, Rng&) { return mean_axis(square(x), 2, false); }},
        OpCase{"reshape", {2, 6}, [](const Tensor& x, Rng&) { return reshape(square(x), {3, 4}); }},
        OpCase{"permute", {2, 3, 4}, [](const Tensor& x, Rng&) { return permute(square(x), {2, 0, 1}); }},
        OpCase{"concat", {2, 3}, [](const Tensor& x, Rng&) { return concat({x, square(x)}, 1); }},
        OpCase{"slice", {4, 3}, [](const Tensor& x, Rng&) { return slice(square(x), 0, 1, 3); }},
        OpCase{"matmul", {3, 4}, [](const Tensor& x, Rng& r) { return matmul(x, Tensor::randn({4, 2}, r)); }},
        OpCase{"bmm", {2, 3, 4}, [](const Tensor& x, Rng&) { return matmul(x, permute(x, {0, 2, 1})); }},
        OpCase{"softmax", {3, 5}, [](const Tensor& x, Rng&) { return softmax(x); }},
        OpCase{"conv3", {2, 2, 4, 4}, [](const Tensor& x, Rng& r) { return conv2d(x, Tensor::randn({3, 2, 3, 3}, r)); }},
        OpCase{"conv3_w", {3, 2, 3, 3}, [](const Tensor& w, Rng& r) { return conv2d(Tensor::randn({2, 2, 4, 4}, r), w); }},
        OpCase{"conv1", {2, 3, 2, 2}, [](const Tensor& x, Rng& r) { return conv2d(x, Tensor::randn({2, 3, 1, 1}, r)); }},
        OpCase{"avg_pool2", {1, 2, 4, 4}, [](const Tensor& x, Rng&) { return avg_pool2(square(x)); }},
        OpCase{"upsample2", {1, 2, 2, 2}, [](const Tensor& x, Rng&) { return upsample2(square(x)); }},
        OpCase{"scale_by", {1}, [](const Tensor& g, Rng& r) { return scale_by(Tensor::randn({4}, r), g); }}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });
