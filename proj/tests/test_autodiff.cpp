// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "grass/autodiff.hpp"
#include "grass/error.hpp"
#include "grass/gradcheck.hpp"
#include "test_support.hpp"

using namespace grass;
using grass::testing::max_rel_error;
using grass::testing::random_tensor;

namespace {

// Builds a scalar loss from a single differentiable input; used to compare
// autodiff against central differences.
using LossBuilder = std::function<Var<double>(Graph<double>&, const Var<double>&)>;

double eval_loss(const LossBuilder& build, const Tensor<double>& theta) {
    Graph<double> g;
    return build(g, g.input(theta, false)).value().item();
}

double gradcheck(const LossBuilder& build, const Tensor<double>& theta) {
    Graph<double> g;
    const Var<double> x = g.input(theta, true);
    const Gradients<double> grads = g.backward(build(g, x));
    const Tensor<double> fd = finite_difference_gradient<double>(
        [&](const Tensor<double>& t) { return eval_loss(build, t); }, theta, 1e-5);
    return max_rel_error<double>(grads.of(x).data(), fd.data());
}

// Random linear readout so every output coordinate carries a distinct weight.
Var<double> readout(Graph<double>& g, const Var<double>& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return ops::sum(ops::mul(y, g.input(random_tensor(y.shape(), rng))));
}

} // namespace

TEST_CASE("softmax of equal logits is uniform") {
    Graph<double> g;
    const auto y = ops::softmax(g.input(Tensor<double>({2}, {0.0, 0.0})));
    CHECK(y.value()[0] == 0.5);
    CHECK(y.value()[1] == 0.5);
}

TEST_CASE("layernorm of a constant row is zero before the affine") {
    Graph<double> g;
    const auto x = g.input(Tensor<double>::full({1, 6}, 3.25));
    const auto y = ops::layernorm(x, g.input(Tensor<double>::full({6}, 1.0)), g.input(Tensor<double>::zeros({6})));
    for (double v : y.value().data()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("cross entropy matches closed form") {
    Graph<double> g;
    const std::vector<std::int32_t> target{1};
    const auto loss = ops::cross_entropy(g.input(Tensor<double>({1, 2}, {std::log(1.0), std::log(3.0)})), target);
    // -ln(3/4), 30-digit reference.
    CHECK(loss.value().item() == doctest::Approx(0.287682072451780927).epsilon(1e-14));
}

TEST_CASE("cross entropy skips ignored targets and rejects all-ignored") {
    Graph<double> g;
    const auto logits = g.input(Tensor<double>({2, 2}, {0.0, std::log(3.0), 5.0, -5.0}));
    const std::vector<std::int32_t> t1{1, ops::kIgnoreIndex};
    CHECK(ops::cross_entropy(logits, t1).value().item() == doctest::Approx(0.287682072451780927).epsilon(1e-14));
    const std::vector<std::int32_t> none{ops::kIgnoreIndex, ops::kIgnoreIndex};
    CHECK_THROWS_AS(ops::cross_entropy(logits, none), InputError);
    const std::vector<std::int32_t> bad{2, 0};
    CHECK_THROWS_AS(ops::cross_entropy(logits, bad), InputError);
}

TEST_CASE("gradient of sum is all ones") {
    Graph<double> g;
    const auto x = g.input(Tensor<double>::full({2, 3}, 0.7), true);
    const auto grads = g.backward(ops::sum(x));
    for (double v : grads.of(x).data()) {
        CHECK(v == 1.0);
    }
}

TEST_CASE("gradient of <w,w> is 2w") {
    Graph<double> g;
    const auto w = g.input(Tensor<double>({2}, {1.0, 2.0}), true);
    const auto grads = g.backward(ops::sum(ops::mul(w, w)));
    CHECK(grads.of(w)[0] == 4.0 / 2.0);
    CHECK(grads.of(w)[1] == 4.0);
}

TEST_CASE("fan-out gradients accumulate additively") {
    std::mt19937_64 rng(11);
    const Tensor<double> x0 = random_tensor({3, 4}, rng);
    Graph<double> g;
    const auto x = g.input(x0, true);
    // Two branches through the same node: grad = 1 + 2*x.
    const auto loss = ops::add(ops::sum(x), ops::sum(ops::mul(x, x)));
    const auto grads = g.backward(loss);
    for (std::size_t i = 0; i < x0.size(); ++i) {
        CHECK(grads.of(x)[i] == doctest::Approx(1.0 + 2.0 * x0[i]).epsilon(1e-15));
    }

    Graph<double> g2;
    const auto y = g2.input(x0, true);
    const auto grads2 = g2.backward(ops::sum(ops::add(y, y)));
    for (double v : grads2.of(y).data()) {
        CHECK(v == 2.0);
    }
}

TEST_CASE("backward visits nodes in reverse creation order") {
    Graph<double> g;
    const auto a = g.input(Tensor<double>::full({2, 2}, 0.5), true);
    const auto b = g.input(Tensor<double>::full({2, 2}, -0.25), true);
    const auto c = ops::matmul(a, b);
    const auto d = ops::gelu(c);
    const auto loss = ops::sum(ops::add(d, c));
    g.backward(loss);
    const auto& order = g.last_backward_order();
    REQUIRE(order.size() == g.size());
    for (std::size_t i = 1; i < order.size(); ++i) {
        CHECK(order[i] < order[i - 1]);
    }
}

TEST_CASE("frozen leaves get no gradient storage") {
    Graph<double> g;
    const auto w = g.input(Tensor<double>::full({2, 2}, 0.5), false);
    const auto x = g.input(Tensor<double>::full({2, 2}, 0.1), true);
    const auto grads = g.backward(ops::sum(ops::matmul(x, w)));
    CHECK(grads.has(x));
    CHECK_FALSE(grads.has(w));
    CHECK(grads.stored_count() == 1);
}

TEST_CASE("no backward record when nothing requires grad") {
    Graph<double> g;
    const auto a = g.input(Tensor<double>::full({2, 2}, 1.0));
    ops::sum(ops::matmul(a, a));
    CHECK(g.recorded_ops() == 0);
    const auto b = g.input(Tensor<double>::full({2, 2}, 1.0), true);
    ops::sum(ops::matmul(a, b));
    CHECK(g.recorded_ops() == 2);
}

TEST_CASE("error paths") {
    Graph<double> g;
    const auto a = g.input(Tensor<double>::zeros({2, 3}), true);
    const auto b = g.input(Tensor<double>::zeros({2, 3}), true);
    SUBCASE("matmul shape mismatch names the dims") {
        try {
            ops::matmul(a, b);
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("matmul") != std::string::npos);
            CHECK(msg.find("[2,3]") != std::string::npos);
        }
    }
    SUBCASE("non-finite output is a numerical fault") {
        const auto big = g.input(Tensor<double>::full({1, 1}, 1e200));
        CHECK_THROWS_AS(ops::matmul(big, big), NumericalFault);
    }
    SUBCASE("backward on a non-scalar") {
        CHECK_THROWS_AS(g.backward(ops::add(a, b)), UsageError);
    }
    SUBCASE("embedding id out of range") {
        const std::vector<std::int32_t> ids{0, 2};
        CHECK_THROWS_AS(ops::embedding(a, ids), InputError);
    }
    SUBCASE("tensor data length mismatch") {
        CHECK_THROWS_AS(Tensor<double>({2, 2}, {1.0, 2.0}), ShapeError);
    }
}

TEST_CASE("finite differences on analytic functions") {
    const Tensor<double> three({1}, {3.0});
    const auto sq = finite_difference_gradient<double>([](const Tensor<double>& t) { return t[0] * t[0]; }, three, 1e-5);
    CHECK(std::abs(sq[0] - 6.0) < 1e-8);

    const auto flat = finite_difference_gradient<double>([](const Tensor<double>&) { return 4.0; },
                                                         Tensor<double>({3}, {1.0, 2.0, 3.0}), 1e-5);
    for (double v : flat.data()) {
        CHECK(v == 0.0);
    }

    const auto ex = finite_difference_gradient<double>([](const Tensor<double>& t) { return std::exp(t[0]); },
                                                       Tensor<double>({1}, {0.0}), 1e-5);
    CHECK(std::abs(ex[0] - 1.0) < 1e-9);

    CHECK_THROWS_AS(finite_difference_gradient<double>([](const Tensor<double>& t) { return std::log(t[0]); },
                                                       Tensor<double>({1}, {0.0}), 1e-5),
                    NumericalFault);
}

TEST_CASE("two-layer MLP gradients match finite differences") {
    std::mt19937_64 rng(2024);
    const Tensor<double> x0 = random_tensor({5, 4}, rng);
    const Tensor<double> w1 = random_tensor({4, 6}, rng, 0.5);
    const Tensor<double> b1 = random_tensor({6}, rng, 0.1);
    const Tensor<double> w2 = random_tensor({6, 3}, rng, 0.5);
    const std::vector<std::int32_t> targets{0, 2, 1, 1, 0};

    // Perturb each parameter tensor in turn, holding the others fixed.
    for (int which = 0; which < 3; ++which) {
        const Tensor<double>& theta = which == 0 ? w1 : (which == 1 ? b1 : w2);
        const LossBuilder build = [&](Graph<double>& g, const Var<double>& p) {
            const auto W1 = which == 0 ? p : g.input(w1);
            const auto B1 = which == 1 ? p : g.input(b1);
            const auto W2 = which == 2 ? p : g.input(w2);
            const auto h = ops::gelu(ops::add_bias(ops::matmul(g.input(x0), W1), B1));
            return ops::cross_entropy(ops::matmul(h, W2), targets);
        };
        CHECK(gradcheck(build, theta) < 1e-6);
    }
}

TEST_CASE("every differentiable op matches finite differences on 100 random instances") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> extent(1, 4);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = static_cast<std::size_t>(extent(rng));
        // Two-feature layernorm has an eps-sized input gradient; start at three.
        const std::size_t n = static_cast<std::size_t>(extent(rng)) + 2;
        const std::size_t k = static_cast<std::size_t>(extent(rng));
        const std::uint64_t seed = rng();
        const Tensor<double> x0 = random_tensor({m, n}, rng);
        const Tensor<double> other = random_tensor({m, n}, rng);
        const Tensor<double> rhs = random_tensor({n, k}, rng);
        const Tensor<double> lhs = random_tensor({k, m}, rng);
        const Tensor<double> gamma = random_tensor({n}, rng);
        const Tensor<double> beta = random_tensor({n}, rng);
        std::vector<std::int32_t> ids(m + 1);
        std::vector<std::int32_t> targets(m);
        for (auto& id : ids) {
            id = static_cast<std::int32_t>(rng() % m);
        }
        for (auto& t : targets) {
            t = static_cast<std::int32_t>(rng() % n);
        }

        const std::vector<LossBuilder> builders{
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::matmul(x, g.input(rhs)), seed); },
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::matmul(g.input(lhs), x), seed); },
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::add_bias(x, g.input(beta)), seed); },
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::add_bias(g.input(other), x), seed); },
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::add(x, g.input(other)), seed); },
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::mul(x, g.input(other)), seed); },
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::scale(x, -1.7), seed); },
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::gelu(x), seed); },
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::softmax(x), seed); },
            [&](Graph<double>& g, const Var<double>& x) {
                return readout(g, ops::layernorm(x, g.input(gamma), g.input(beta)), seed);
            },
            [&](Graph<double>& g, const Var<double>& x) {
                return readout(g, ops::layernorm(g.input(other), x, g.input(beta)), seed);
            },
            [&](Graph<double>& g, const Var<double>& x) { return readout(g, ops::embedding(x, ids), seed); },
            [&](Graph<double>&, const Var<double>& x) { return ops::cross_entropy(x, targets); },
        };
        for (std::size_t b = 0; b < builders.size(); ++b) {
            // Builders 3 and 10 differentiate a feature-axis vector.
            const bool vector_case = b == 3 || b == 10;
            worst = std::max(worst, gradcheck(builders[b], vector_case ? gamma : x0));
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("causal attention gradients match finite differences") {
    std::mt19937_64 rng(99);
    for (std::size_t window : {std::size_t{0}, std::size_t{1}, std::size_t{2}}) {
        const ops::AttentionShape shape{.batch = 2, .seq = 4, .heads = 2, .window = window};
        const Tensor<double> q0 = random_tensor({8, 6}, rng);
        const Tensor<double> k0 = random_tensor({8, 6}, rng);
        const Tensor<double> v0 = random_tensor({8, 6}, rng);
        for (int which = 0; which < 3; ++which) {
            const LossBuilder build = [&](Graph<double>& g, const Var<double>& p) {
                const auto q = which == 0 ? p : g.input(q0);
                const auto k = which == 1 ? p : g.input(k0);
                const auto v = which == 2 ? p : g.input(v0);
                return readout(g, ops::causal_attention(q, k, v, shape), 5);
            };
            CHECK(gradcheck(build, which == 0 ? q0 : (which == 1 ? k0 : v0)) < 1e-6);
        }
    }
}

TEST_CASE("causal attention masks the future") {
    // Changing the last position's key/value must not move earlier outputs.
    std::mt19937_64 rng(3);
    const ops::AttentionShape shape{.batch = 1, .seq = 3, .heads = 1, .window = 0};
    Tensor<double> q = random_tensor({3, 2}, rng);
    Tensor<double> k = random_tensor({3, 2}, rng);
    Tensor<double> v = random_tensor({3, 2}, rng);
    Graph<double> g1;
    const auto out1 = ops::causal_attention(g1.input(q), g1.input(k), g1.input(v), shape).value();
    k[4] += 5.0;
    v[5] -= 3.0;
    Graph<double> g2;
    const auto out2 = ops::causal_attention(g2.input(q), g2.input(k), g2.input(v), shape).value();
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(out1[i] == out2[i]);
    }
    // First position attends only to itself.
    CHECK(out1[0] == v[0]);
}

TEST_CASE("forward results are bit-identical across runs") {
    std::mt19937_64 rng(5);
    const Tensor<double> x = random_tensor({6, 4}, rng);
    const Tensor<double> w = random_tensor({4, 4}, rng);
    auto run = [&] {
        Graph<double> g;
        const auto h = ops::gelu(ops::matmul(g.input(x), g.input(w)));
        return ops::softmax(ops::layernorm(h, g.input(Tensor<double>::full({4}, 1.0)),
                                           g.input(Tensor<double>::zeros({4}))))
            .value();
    };
    CHECK(run() == run());
}
