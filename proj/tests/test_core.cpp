#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nodnet/losses.hpp"
#include "nodnet/ops.hpp"
#include "nodnet/rng.hpp"
#include "nodnet/serialize.hpp"
#include "nodnet/tape.hpp"

using namespace nodnet;

namespace {

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("nodnet_core_" + name);
}

}  // namespace

TEST_CASE("tensor shape and data invariants") {
    Tensor<float> t(Shape{2, 3}, 1.5f);
    CHECK(t.numel() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.at(1, 2) == 1.5f);
    CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1.f, 2.f, 3.f}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor<float>(Shape{-1, 2}), std::invalid_argument);
    CHECK(Tensor<float>::scalar(3.f).item() == 3.f);
    CHECK_THROWS_AS(t.item(), std::invalid_argument);
}

TEST_CASE("elementwise examples") {
    auto r = relu(Tensor<float>::from_data({3}, {-1.f, 0.f, 2.f}));
    CHECK(r.data()[0] == 0.f);
    CHECK(r.data()[1] == 0.f);
    CHECK(r.data()[2] == 2.f);

    CHECK(sigmoid(Tensor<float>::scalar(0.f)).item() == doctest::Approx(0.5).epsilon(1e-7));

    auto s = add(Tensor<float>::from_data({2}, {1.f, 2.f}), Tensor<float>::from_data({2}, {3.f, 4.f}));
    CHECK(s.data()[0] == 4.f);
    CHECK(s.data()[1] == 6.f);
}

TEST_CASE("binary ops reject shape mismatch naming both shapes") {
    Tensor<float> a(Shape{2, 3});
    Tensor<float> b(Shape{3, 2});
    try {
        add(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[3, 2]") != std::string::npos);
    }
}

TEST_CASE("log rejects non-positive input") {
    CHECK_THROWS_AS(log(Tensor<float>::from_data({2}, {1.f, 0.f})), std::invalid_argument);
    CHECK_THROWS_AS(log(Tensor<float>::from_data({1}, {-2.f})), std::invalid_argument);
}

TEST_CASE("identities hold bitwise") {
    Rng rng(11);
    auto x = random_tensor<float>({4, 5}, rng);
    auto scaled = scale(x, 1.0f);
    auto added = add(x, Tensor<float>(Shape{4, 5}, 0.0f));
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        CHECK(std::memcmp(&scaled.data()[i], &x.data()[i], sizeof(float)) == 0);
        CHECK(std::memcmp(&added.data()[i], &x.data()[i], sizeof(float)) == 0);
    }
}

TEST_CASE("add and mul are commutative") {
    Rng rng(12);
    for (int i = 0; i < 20; ++i) {
        auto a = random_tensor<double>({3, 3}, rng);
        auto b = random_tensor<double>({3, 3}, rng);
        auto ab = add(a, b), ba = add(b, a);
        auto m1 = mul(a, b), m2 = mul(b, a);
        for (std::int64_t j = 0; j < ab.numel(); ++j) {
            CHECK(ab.data()[j] == ba.data()[j]);
            CHECK(m1.data()[j] == m2.data()[j]);
        }
    }
}

TEST_CASE("reductions") {
    CHECK(sum(Tensor<float>::from_data({3}, {1.f, 2.f, 3.f})).item() == 6.f);
    CHECK(mean(Tensor<float>::from_data({2}, {2.f, 4.f})).item() == 3.f);
    CHECK(mean(Tensor<float>(Shape{64, 64}, 0.5f)).item() == doctest::Approx(0.5).epsilon(1e-7));
    CHECK_THROWS_AS(sum(Tensor<float>(Shape{0})), std::invalid_argument);
    CHECK_THROWS_AS(mean(Tensor<float>(Shape{0, 3})), std::invalid_argument);
}

TEST_CASE("backward: sum gives all-ones gradient") {
    Tensor<double> x(Shape{2, 3}, 0.7, true);
    Tape<double> tape;
    auto loss = sum(x);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward: mean of squares") {
    auto x = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
    Tape<double> tape;
    auto loss = mean(mul(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("backward: sigmoid(0) * c") {
    auto c = Tensor<double>::scalar(2.0, true);
    Tape<double> tape;
    auto loss = mul(sigmoid(Tensor<double>::scalar(0.0)), c);
    tape.backward(loss);
    CHECK(c.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar and detached losses") {
    Tensor<double> x(Shape{3}, 1.0, true);
    Tape<double> tape;
    auto y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);  // non-scalar
    auto detached = Tensor<double>::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(detached), std::invalid_argument);
    auto no_grad_scalar = sum(Tensor<double>(Shape{2}, 1.0));  // not recorded: input has no grad
    CHECK_THROWS_AS(tape.backward(no_grad_scalar), std::invalid_argument);
}

TEST_CASE("repeated backward without reset accumulates") {
    Tensor<double> x(Shape{4}, 2.0, true);
    Tape<double> tape;
    auto loss = sum(x);
    tape.backward(loss);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 2.0);  // two accumulated passes
    tape.reset();
    CHECK(tape.size() == 0);
}

TEST_CASE("backward is linear over summed losses (exact in f64)") {
    Rng rng(21);
    for (int rep = 0; rep < 10; ++rep) {
        auto point = random_tensor<double>({5}, rng, 0.2, 1.5);

        auto xa = point.clone().set_requires_grad(true);
        {
            Tape<double> tape;
            tape.backward(add(sum(mul(xa, xa)), mean(log(xa))));
        }
        auto xb = point.clone().set_requires_grad(true);
        auto xc = point.clone().set_requires_grad(true);
        {
            Tape<double> tape;
            tape.backward(sum(mul(xb, xb)));
        }
        {
            Tape<double> tape;
            tape.backward(mean(log(xc)));
        }
        for (std::int64_t i = 0; i < point.numel(); ++i)
            CHECK(xa.grad()[i] == xb.grad()[i] + xc.grad()[i]);
    }
}

TEST_CASE("ops keep finite data finite over random chains") {
    Rng rng(31);
    for (int rep = 0; rep < 50; ++rep) {
        auto x = random_tensor<float>({2, 3, 4, 4}, rng);
        auto a = sigmoid(scale(mul(x, x), -2.5f));
        auto b = relu(sub(a, Tensor<float>(a.shape(), 0.25f)));
        auto y = softmax_channels(add(b, neg(a)));
        CHECK(a.all_finite());
        CHECK(b.all_finite());
        CHECK(y.all_finite());
    }
}

TEST_CASE("grad_check basics") {
    Rng rng(41);
    // exact linear function: error well below 1e-10
    auto point = random_tensor<double>({7}, rng);
    CHECK(grad_check([](const Tensor<double>& x) { return sum(x); }, point) < 1e-10);

    // mean(relu(x)^2) away from the relu kink
    auto p2 = random_tensor<double>({6}, rng, 0.1, 1.0);
    for (std::int64_t i = 0; i < p2.numel(); ++i)
        if (i % 2 == 0) p2.data()[i] = -p2.data()[i];  // mixed signs, all |x| >= 0.1
    const double err = grad_check(
        [](const Tensor<double>& x) {
            auto r = relu(x);
            return mean(mul(r, r));
        },
        p2);
    CHECK(err < 1e-6);

    CHECK_THROWS_AS(grad_check([](const Tensor<double>& x) { return sum(x); }, point, 1e-2), std::invalid_argument);
}

TEST_CASE("grad_check rejects non-finite function values") {
    auto f = [](const Tensor<double>& x) {
        if (Tape<double>::current()) return sum(x);
        const double v = x.data()[0] > 1.0 ? std::numeric_limits<double>::infinity() : x.data()[0];
        return Tensor<double>::scalar(v);
    };
    CHECK_THROWS_AS(grad_check(f, Tensor<double>::from_data({1}, {1.0})), NumericError);
}

TEST_CASE("ten file round-trip is bit-exact") {
    Rng rng(51);
    auto t = random_tensor<float>({3, 4, 5}, rng);
    const auto path = temp_path("roundtrip.ten");
    save_tensor(t, path.string());
    auto back = load_tensor<float>(path.string());
    REQUIRE(back.shape() == t.shape());
    CHECK(std::memcmp(back.data().data(), t.data().data(), sizeof(float) * t.numel()) == 0);

    // double tensors carry dtype code 1
    auto d = random_tensor<double>({2, 2}, rng);
    save_tensor(d, path.string());
    auto dback = load_tensor<double>(path.string());
    CHECK(std::memcmp(dback.data().data(), d.data().data(), sizeof(double) * d.numel()) == 0);
    CHECK_THROWS_AS(load_tensor<float>(path.string()), DataError);  // dtype mismatch

    std::filesystem::remove(path);
}

TEST_CASE("ten file corruption is rejected") {
    Rng rng(52);
    auto t = random_tensor<float>({4, 4}, rng);
    std::ostringstream ss(std::ios::binary);
    write_ten(ss, t);
    const std::string bytes = ss.str();

    const auto path = temp_path("corrupt.ten");

    atomic_write_file(path.string(), "XEN1" + bytes.substr(4));
    CHECK_THROWS_AS(load_tensor<float>(path.string()), DataError);

    atomic_write_file(path.string(), bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_tensor<float>(path.string()), DataError);

    atomic_write_file(path.string(), bytes + "zz");
    CHECK_THROWS_AS(load_tensor<float>(path.string()), DataError);

    std::filesystem::remove(path);
}
