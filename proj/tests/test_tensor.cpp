#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oattn/grad_check.hpp"
#include "op_gradient_sweep.hpp"
#include "oattn/rng.hpp"
#include "oattn/tape.hpp"

using namespace oattn;

namespace {

Parameter<double> make_param(Rng& rng, const std::string& name, Shape shape, double scale = 1.0,
                             double offset = 0.0) {
    Tensor<double> t(shape);
    for (auto& v : t.data) v = rng.normal() * scale + offset;
    return Parameter<double>(name, std::move(t));
}

}  // namespace

TEST_CASE("softmax rows: analytic values") {
    Tape<double> t;
    Var x = t.constant({2, 2}, {0.0, 0.0, std::log(2.0), 0.0});
    Var y = t.softmax_rows(x);
    const auto& v = t.val(y);
    CHECK(v[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(v[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(v[2] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(v[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows: stability and stochasticity for large logits") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Tape<double> t;
        Tensor<double> x({5, 8});
        for (auto& v : x.data) v = rng.uniform(-1e4, 1e4);
        Var y = t.softmax_rows(t.input(x, false));
        const auto& v = t.val(y);
        for (int r = 0; r < 5; ++r) {
            double s = 0.0;
            for (int c = 0; c < 8; ++c) {
                const double e = v[static_cast<std::size_t>(r * 8 + c)];
                CHECK(e >= 0.0);
                s += e;
            }
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("conv2d output side arithmetic") {
    Tape<float> t;
    Tensor<float> x({1, 3, 64, 64});
    Tensor<float> w({8, 3, 4, 4});
    Var y = t.conv2d(t.input(x, false), t.input(w, false), 2, 1);
    CHECK(t.shape(y) == Shape{1, 8, 32, 32});
}

TEST_CASE("scatter-rows into zero target") {
    Tape<double> t;
    Var x = t.constant({2, 3}, {1, 2, 3, 4, 5, 6});
    Var y = t.scatter_rows(x, make_index_list({0, 4}), 6);
    const auto& v = t.val(y);
    CHECK(t.shape(y) == Shape{6, 3});
    CHECK(v[0] == 1);
    CHECK(v[1] == 2);
    CHECK(v[2] == 3);
    for (int i = 3; i < 12; ++i) CHECK(v[static_cast<std::size_t>(i)] == 0);
    CHECK(v[12] == 4);
    CHECK(v[13] == 5);
    CHECK(v[14] == 6);
    CHECK(v[15] == 0);
}

TEST_CASE("scatter then gather is identity on the gathered rows") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int rows = 3 + static_cast<int>(rng.uniform_int(0, 5));
        const int total = rows + static_cast<int>(rng.uniform_int(0, 7));
        std::vector<int> idx;
        for (int i = 0; i < total; ++i) idx.push_back(i);
        // deterministic shuffle
        for (int i = total - 1; i > 0; --i)
            std::swap(idx[static_cast<std::size_t>(i)],
                      idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);
        idx.resize(static_cast<std::size_t>(rows));
        Tensor<double> x({rows, 4});
        for (auto& v : x.data) v = rng.normal();
        Tape<double> t;
        Var xv = t.input(x, false);
        auto il = make_index_list(idx);
        Var back = t.gather_rows(t.scatter_rows(xv, il, total), il);
        CHECK(t.val(back) == x.data);
    }
}

TEST_CASE("backward: sum of squares") {
    Tape<double> t;
    Tensor<double> x({3}, {1, 2, 3});
    Var xv = t.leaf(x);
    t.backward(t.sum(t.square(xv)));
    CHECK(x.grad == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward: mean of leaky-relu") {
    Tape<double> t;
    Tensor<double> x({2}, {-1, 1});
    Var xv = t.leaf(x);
    t.backward(t.mean(t.leaky_relu(xv, 0.2)));
    CHECK(x.grad[0] == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(x.grad[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("backward accumulates until grads are cleared") {
    Tape<double> t;
    Tensor<double> x({2}, {1, 2});
    Var xv = t.leaf(x);
    Var loss = t.sum(t.square(xv));
    t.backward(loss);
    t.backward(loss);
    CHECK(x.grad == std::vector<double>{4, 8});
    x.zero_grad();
    t.backward(loss);
    CHECK(x.grad == std::vector<double>{2, 4});
}

TEST_CASE("detached leaves never receive gradient") {
    Tape<double> t;
    Tensor<double> x({2}, {1, 2});
    Tensor<double> c({2}, {3, 4});
    Var xv = t.leaf(x);
    Var cv = t.leaf(c, false);
    t.backward(t.sum(t.mul(xv, cv)));
    CHECK(x.grad == std::vector<double>{3, 4});
    CHECK(c.grad.empty());
}

TEST_CASE("double backward through a gradient norm") {
    // f(w) = || d(w.x)/dx ||_2 = ||w||; df/dw = w/||w||
    Tape<double> t;
    Tensor<double> w({2}, {3, 4});
    Tensor<double> x({2}, {0.5, -1.25});
    Var wv = t.leaf(w);
    Var xv = t.input(x, true);
    Var dot = t.sum(t.mul(wv, xv));
    Var g = t.grad(dot, xv);
    Var norm = t.sqrt(t.sum(t.square(g)));
    CHECK(t.scalar_value(norm) == doctest::Approx(5.0).epsilon(1e-12));
    t.backward(norm);
    CHECK(w.grad[0] == doctest::Approx(0.6).epsilon(1e-10));
    CHECK(w.grad[1] == doctest::Approx(0.8).epsilon(1e-10));
}

TEST_CASE("grad_check: exact for quadratics") {
    Rng rng(11);
    std::vector<Parameter<double>> params;
    params.push_back(make_param(rng, "theta", {5}));
    std::vector<Parameter<double>*> ptrs{&params[0]};
    auto eval = [&](bool with_grad) {
        Tape<double> t;
        Var v = t.leaf(params[0].value);
        Var loss = t.sum(t.square(v));
        if (with_grad) t.backward(loss);
        return t.scalar_value(loss);
    };
    CHECK(grad_check(eval, ptrs, 1e-4) <= 1e-9);
}

TEST_CASE("grad_check rejects eps outside range") {
    std::vector<Parameter<double>*> none;
    CHECK_THROWS_AS(grad_check([](bool) { return 0.0; }, none, 1e-2), TapeError);
}

TEST_CASE("gradient property: every primitive matches central differences") {
    testutil::op_gradient_sweep([](const std::string& name, double err) {
        INFO(name);
        CHECK(err <= 1e-5);
    });
}

TEST_CASE("double backward: penalty gradient through conv and leaky-relu") {
    // d/dw of (||d scalar(conv path)/dx|| - 1)^2, verified by central differences
    Rng rng(31);
    std::vector<Parameter<double>> params;
    params.push_back(make_param(rng, "w1", {3, 2, 4, 4}, 0.4));
    params.push_back(make_param(rng, "w2", {1, 3, 4, 4}, 0.4));
    Tensor<double> x({1, 2, 8, 8});
    for (auto& v : x.data) v = rng.normal();
    std::vector<Parameter<double>*> ptrs{&params[0], &params[1]};
    auto eval = [&](bool with_grad) {
        Tape<double> t;
        Var w1 = t.leaf(params[0].value);
        Var w2 = t.leaf(params[1].value);
        Var xv = t.input(x, true);
        Var h = t.leaky_relu(t.conv2d(xv, w1, 2, 1), 0.2);
        Var score = t.mean(t.conv2d(h, w2, 1, 1));
        Var g = t.grad(score, xv);
        Var norm = t.sqrt(t.scalar_add(t.sum(t.square(g)), 1e-12));
        Var pen = t.square(t.scalar_add(norm, -1.0));
        if (with_grad) t.backward(pen);
        return t.scalar_value(pen);
    };
    CHECK(grad_check(eval, ptrs, 1e-5) <= 1e-3);
}

TEST_CASE("second order through softmax is rejected by name") {
    Tape<double> t;
    Tensor<double> x({1, 3}, {0.3, -0.2, 0.8});
    Var xv = t.input(x, true);
    Var y = t.sum(t.square(t.softmax_rows(xv)));
    Var g = t.grad(y, xv);
    Var loss = t.sum(t.square(g));
    CHECK_THROWS_WITH_AS(t.backward(loss),
                         doctest::Contains("softmax-over-rows"), TapeError);
}

TEST_CASE("shape mismatch is rejected with op name and shapes") {
    Tape<double> t;
    Var a = t.zeros({2, 3});
    Var b = t.zeros({3, 2});
    CHECK_THROWS_WITH_AS(t.add(a, b), doctest::Contains("add"), TapeError);
    CHECK_THROWS_WITH_AS(t.add(a, b), doctest::Contains("[2x3]"), TapeError);
    Var x = t.zeros({1, 3, 8, 8});
    Var w = t.zeros({4, 2, 3, 3});
    CHECK_THROWS_WITH_AS(t.conv2d(x, w, 1, 1), doctest::Contains("conv2d"), TapeError);
}

TEST_CASE("non-scalar backward root is rejected") {
    Tape<double> t;
    Tensor<double> x({2}, {1, 2});
    Var xv = t.leaf(x);
    CHECK_THROWS_WITH_AS(t.backward(t.square(xv)), doctest::Contains("scalar"), TapeError);
}

TEST_CASE("gather index out of range is rejected") {
    Tape<double> t;
    Var a = t.zeros({3, 2});
    CHECK_THROWS_WITH_AS(t.gather_rows(a, make_index_list({0, 3})),
                         doctest::Contains("out of range"), TapeError);
    CHECK_THROWS_WITH_AS(t.scatter_rows(a, make_index_list({0, 1, 5}), 4),
                         doctest::Contains("out of range"), TapeError);
}

TEST_CASE("forward replay is bit-identical") {
    Rng rng(99);
    Tape<float> t;
    Tensor<float> x({2, 3, 8, 8});
    Tensor<float> w({4, 3, 3, 3});
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    for (auto& v : w.data) v = static_cast<float>(rng.normal() * 0.2);
    Var xv = t.input(x, true);
    Var wv = t.input(w, true);
    Var h = t.leaky_relu(t.conv2d(xv, wv, 2, 1), 0.2);
    Var loss = t.mean(t.square(h));
    t.grad(loss, xv);
    CHECK_NOTHROW(t.replay_and_check());
}

TEST_CASE("forward determinism across two identical runs") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tape<float> t;
        Tensor<float> x({1, 2, 8, 8});
        Tensor<float> w({2, 2, 3, 3});
        for (auto& v : x.data) v = static_cast<float>(rng.normal());
        for (auto& v : w.data) v = static_cast<float>(rng.normal());
        Var y = t.softmax_rows(t.reshape(t.conv2d(t.input(x, false), t.input(w, false), 1, 1), {16, 8}));
        return t.val(y);
    };
    CHECK(run(5) == run(5));
}
