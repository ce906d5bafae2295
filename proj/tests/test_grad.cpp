#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "nodnet/losses.hpp"
#include "nodnet/ops.hpp"
#include "nodnet/rng.hpp"
#include "nodnet/tape.hpp"
#include "nodnet/training.hpp"

using namespace nodnet;

namespace {

constexpr double kTol = 1e-4;

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// pool inputs with well-separated values: perturbations cannot flip an argmax
Tensor<double> separated_tensor(Shape shape, Rng& rng) {
    Tensor<double> t(std::move(shape));
    std::vector<int> order(static_cast<std::size_t>(t.numel()));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t.data()[i] = 0.01 * order[static_cast<std::size_t>(i)] + rng.uniform(-0.001, 0.001);
    return t;
}

// random fixed cotangent so the whole Jacobian is exercised, not just sums
Tensor<double> cotangent(const Shape& shape, Rng& rng) {
    Tensor<double> r(shape);
    for (auto& v : r.data()) v = rng.uniform(0.5, 1.5) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    return r;
}

}  // namespace

TEST_CASE("elementwise gradient checks") {
    Rng rng(101);
    for (int rep = 0; rep < 5; ++rep) {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({3, 4}, rng);
        auto w = cotangent({3, 4}, rng);
        CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(add(x, b), w)); }, a) < kTol);
        CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(sub(b, x), w)); }, a) < kTol);
        CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(mul(x, b), w)); }, a) < kTol);
        CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(scale(x, 2.75), w)); }, a) < kTol);
        CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(neg(x), w)); }, a) < kTol);
        CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(sigmoid(x), w)); }, a) < kTol);

        auto pos = random_tensor({3, 4}, rng, 0.3, 2.0);
        CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(log(x), w)); }, pos) < kTol);

        auto off_kink = random_tensor({3, 4}, rng, 0.05, 1.0);
        for (std::int64_t i = 0; i < off_kink.numel(); ++i)
            if (rng.bernoulli(0.5)) off_kink.data()[i] = -off_kink.data()[i];
        CHECK(grad_check([&](const Tensor<double>& x) { return sum(mul(relu(x), w)); }, off_kink) < kTol);

        CHECK(grad_check([&](const Tensor<double>& x) { return mean(mul(x, x)); }, a) < kTol);
    }
}

TEST_CASE("conv2d gradient checks: input, weight, bias") {
    Rng rng(102);
    struct Case {
        Shape x;
        int out_ch, k, stride, pad;
    };
    const Case cases[] = {
        {{2, 2, 5, 5}, 3, 3, 1, 1},
        {{1, 3, 6, 6}, 2, 2, 2, 0},
        {{2, 1, 7, 7}, 2, 3, 2, 1},
        {{1, 2, 4, 4}, 1, 1, 1, 0},
    };
    for (const auto& c : cases) {
        auto x = random_tensor(c.x, rng);
        auto w = random_tensor({c.out_ch, c.x[1], c.k, c.k}, rng);
        auto b = random_tensor({c.out_ch}, rng);
        Shape out_shape;
        {
            NoRecordScope<double> quiet;
            out_shape = conv2d(x, w, b, c.stride, c.pad).shape();
        }
        auto r = cotangent(out_shape, rng);
        CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(conv2d(t, w, b, c.stride, c.pad), r)); }, x) <
              kTol);
        CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(conv2d(x, t, b, c.stride, c.pad), r)); }, w) <
              kTol);
        CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(conv2d(x, w, t, c.stride, c.pad), r)); }, b) <
              kTol);
    }
}

TEST_CASE("pool/unpool gradient checks through the index link") {
    Rng rng(103);
    for (int rep = 0; rep < 4; ++rep) {
        auto x = separated_tensor({2, 2, 6, 6}, rng);
        auto r_half = cotangent({2, 2, 3, 3}, rng);
        auto r_full = cotangent({2, 2, 6, 6}, rng);
        CHECK(grad_check(
                  [&](const Tensor<double>& t) { return sum(mul(maxpool2x2_with_indices(t).values, r_half)); }, x) <
              kTol);
        CHECK(grad_check(
                  [&](const Tensor<double>& t) {
                      auto pooled = maxpool2x2_with_indices(t);
                      return sum(mul(max_unpool2x2(pooled.values, pooled.indices, t.shape()), r_full));
                  },
                  x) < kTol);
    }
}

TEST_CASE("batchnorm gradient checks (train and eval)") {
    Rng rng(104);
    for (int rep = 0; rep < 3; ++rep) {
        auto x = random_tensor({3, 2, 4, 4}, rng);
        auto gamma = random_tensor({2}, rng, 0.5, 1.5);
        auto beta = random_tensor({2}, rng);
        auto r = cotangent({3, 2, 4, 4}, rng);
        for (Phase phase : {Phase::Frozen, Phase::Eval}) {
            // Frozen shares the Train math without mutating the running
            // stats, which keeps the finite-difference passes comparable.
            auto run = [&](const Tensor<double>& xx, const Tensor<double>& g, const Tensor<double>& bt) {
                Tensor<double> rm(Shape{2}, 0.3);
                Tensor<double> rv(Shape{2}, 0.8);
                Tensor<double> g2 = g, bt2 = bt;
                return sum(mul(batchnorm2d(xx, g2, bt2, rm, rv, phase, 0.1, 1e-5), r));
            };
            CHECK(grad_check([&](const Tensor<double>& t) { return run(t, gamma, beta); }, x) < kTol);
            CHECK(grad_check([&](const Tensor<double>& t) { return run(x, t, beta); }, gamma) < kTol);
            CHECK(grad_check([&](const Tensor<double>& t) { return run(x, gamma, t); }, beta) < kTol);
        }
    }
}

TEST_CASE("linear gradient checks") {
    Rng rng(105);
    for (int rep = 0; rep < 4; ++rep) {
        auto x = random_tensor({3, 5}, rng);
        auto w = random_tensor({5, 4}, rng);
        auto b = random_tensor({4}, rng);
        auto r = cotangent({3, 4}, rng);
        CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(linear(t, w, b), r)); }, x) < kTol);
        CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(linear(x, t, b), r)); }, w) < kTol);
        CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(linear(x, w, t), r)); }, b) < kTol);
    }
}

TEST_CASE("concat, repeat, reshape gradient checks") {
    Rng rng(106);
    auto a = random_tensor({2, 3, 4, 4}, rng);
    auto b = random_tensor({2, 2, 4, 4}, rng);
    auto r = cotangent({2, 5, 4, 4}, rng);
    CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(concat_channels(t, b), r)); }, a) < kTol);
    CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(concat_channels(a, t), r)); }, b) < kTol);

    auto r3 = cotangent({2, 9, 4, 4}, rng);
    CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(repeat_channels(t, 3), r3)); }, a) < kTol);

    auto rf = cotangent({2, 48}, rng);
    CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(flatten(t), rf)); }, a) < kTol);
}

TEST_CASE("softmax gradient checks on rows and channel fibers") {
    Rng rng(107);
    auto z = random_tensor({3, 4}, rng, -2.0, 2.0);
    auto r = cotangent({3, 4}, rng);
    CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(softmax_channels(t), r)); }, z) < kTol);

    auto z4 = random_tensor({2, 3, 2, 2}, rng, -2.0, 2.0);
    auto r4 = cotangent({2, 3, 2, 2}, rng);
    CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(softmax_channels(t), r4)); }, z4) < kTol);
}

TEST_CASE("loss gradient checks through sigmoid/softmax heads") {
    Rng rng(108);
    for (int rep = 0; rep < 4; ++rep) {
        auto logits = random_tensor({2, 1, 5, 5}, rng, -2.0, 2.0);
        Tensor<double> target(Shape{2, 1, 5, 5});
        for (auto& v : target.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        CHECK(grad_check([&](const Tensor<double>& t) { return seg_loss(sigmoid(t), target); }, logits) < kTol);

        auto z = random_tensor({3, 2}, rng, -2.0, 2.0);
        Tensor<double> onehot(Shape{3, 2});
        for (int i = 0; i < 3; ++i) onehot.data()[2 * i + (rng.bernoulli(0.5) ? 0 : 1)] = 1.0;
        CHECK(grad_check([&](const Tensor<double>& t) { return adv_loss(softmax_channels(t), onehot); }, z) < kTol);

        std::vector<int> labels{1, 0, 1};
        CHECK(grad_check([&](const Tensor<double>& t) { return cross_entropy(softmax_channels(t), labels); }, z) <
              kTol);
    }
}

TEST_CASE("shuffled_stack routes gradients to the prediction channel") {
    Rng rng(109);
    auto pred = random_tensor({3, 1, 4, 4}, rng, 0.1, 0.9);
    auto gt = random_tensor({3, 1, 4, 4}, rng, 0.0, 1.0);
    const std::vector<std::uint8_t> order{1, 0, 1};
    auto r = cotangent({3, 2, 4, 4}, rng);
    CHECK(grad_check([&](const Tensor<double>& t) { return sum(mul(shuffled_stack(gt, t, order), r)); }, pred) < kTol);
}

TEST_CASE("two-layer conv net end-to-end gradient check") {
    Rng rng(110);
    auto x = random_tensor({1, 1, 8, 8}, rng);
    auto w1 = random_tensor({2, 1, 3, 3}, rng);
    auto b1 = random_tensor({2}, rng);
    auto w2 = random_tensor({1, 2, 3, 3}, rng);
    auto b2 = random_tensor({1}, rng);
    auto f = [&](const Tensor<double>& t) {
        auto h = sigmoid(conv2d(t, w1, b1, 1, 1));
        return mean(conv2d(h, w2, b2, 1, 1));
    };
    CHECK(grad_check(f, x) < kTol);
    auto fw = [&](const Tensor<double>& t) {
        auto h = sigmoid(conv2d(x, t, b1, 1, 1));
        return mean(conv2d(h, w2, b2, 1, 1));
    };
    CHECK(grad_check(fw, w1) < kTol);
}

TEST_CASE("per-op grad_check across 100 random points stays under 1e-4") {
    Rng rng(111);
    int checked = 0;
    for (int rep = 0; rep < 100; ++rep) {
        auto x = random_tensor({2, 6}, rng, 0.05, 1.0);
        for (std::int64_t i = 0; i < x.numel(); ++i)
            if (rng.bernoulli(0.5)) x.data()[i] = -x.data()[i];  // keeps |x| >= 0.05, clear of the relu kink
        auto w = cotangent({2, 6}, rng);
        const double err = grad_check(
            [&](const Tensor<double>& t) { return sum(mul(relu(sigmoid(mul(t, t))), w)); }, x);
        CHECK(err < kTol);
        ++checked;
    }
    CHECK(checked == 100);
}
