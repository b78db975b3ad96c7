#include <doctest.h>

#include <cmath>
#include <limits>
#include <memory>
#include <random>

#include "chat/errors.hpp"
#include "chat/numerics.hpp"
#include "support.hpp"

using namespace chat;
using testing::gradcheck_error;
using testing::random_tensor;

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kGradTol = 1e-4;
} // namespace

TEST_CASE("tensor shape and grad bookkeeping") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.numel() == shape_numel(t.shape()));
    CHECK(t.numel() == 6);
    CHECK_FALSE(t.has_grad());
    CHECK(t.ensure_grad().size() == t.numel());
    CHECK(t.has_grad());
    CHECK(Tensor().numel() == 0);
    CHECK(Tensor::scalar(2.0).item() == 2.0);
    CHECK_THROWS_AS(Tensor({2, 2}, std::initializer_list<double>{1.0, 2.0}), DimensionError);
}

TEST_CASE("matmul examples") {
    Graph g;
    const Var eye = g.constant(Tensor::from_rows({{1, 0}, {0, 1}}));
    const Var m = g.constant(Tensor::from_rows({{3, 4}, {5, 6}}));
    CHECK(matmul(eye, m).value().bitwise_equal(m.value()));

    const Var a = g.constant(Tensor::from_rows({{1, 2}}));
    const Var b = g.constant(Tensor::from_rows({{3}, {4}}));
    CHECK(matmul(a, b).item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Graph g;
    const Var a = g.constant(Tensor({2, 3}));
    const Var b = g.constant(Tensor({2, 3}));
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[2x3]", msg.find("[2x3]") + 1) != std::string::npos);
    }
}

TEST_CASE("matmul gradient of sum matches central differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        const Tensor a = random_tensor({3, 4}, rng);
        const Tensor b = random_tensor({4, 2}, rng);
        Graph g;
        const Var va = g.variable(a);
        const Var vb = g.variable(b);
        g.backward(sum(matmul(va, vb)));
        const auto ga = g.grad(va);
        for (std::size_t k = 0; k < a.numel(); ++k) {
            Tensor up = a, down = a;
            up[k] += 1e-5;
            down[k] -= 1e-5;
            Graph g2(GradMode::kInference);
            const double fu = sum(matmul(g2.constant(up), g2.constant(b))).item();
            const double fd = sum(matmul(g2.constant(down), g2.constant(b))).item();
            const double numeric = (fu - fd) / 2e-5;
            CHECK(std::abs(numeric - ga[k]) <= 1e-6 * std::max(1.0, std::abs(numeric)));
        }
    }
}

TEST_CASE("softmax examples") {
    Graph g;
    const Tensor u = softmax(g.constant(Tensor({3}, {0.0, 0.0, 0.0}))).value();
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    // e^2, e^-1, e^0 over their sum.
    const double z = std::exp(2.0) + std::exp(-1.0) + 1.0;
    const Tensor s = softmax(g.constant(Tensor({3}, {2.0, -1.0, 0.0}))).value();
    CHECK(std::abs(s[0] - std::exp(2.0) / z) < 1e-15);
    CHECK(std::abs(s[0] - 0.84379) < 1e-5);
    CHECK(std::abs(s[1] - 0.04201) < 1e-5);
    CHECK(std::abs(s[2] - 0.11420) < 1e-5);
}

TEST_CASE("softmax shift invariance and normalisation") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = random_tensor({4, 7}, rng, -5, 5);
        Tensor shifted = x;
        const double c = std::uniform_real_distribution<double>(-50, 50)(rng);
        for (double& v : shifted.data()) v += c;
        Graph g;
        const Tensor a = softmax(g.constant(x)).value();
        const Tensor b = softmax(g.constant(shifted)).value();
        CHECK(testing::max_abs_diff(a, b) < 1e-12);
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0.0;
            for (double v : a.row(r)) total += v;
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
        // Along the other axis too.
        const Tensor cols = softmax(g.constant(x), 0).value();
        for (std::size_t c2 = 0; c2 < 7; ++c2) {
            double total = 0.0;
            for (std::size_t r = 0; r < 4; ++r) total += cols(r, c2);
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("softmax over an empty dimension is rejected") {
    Graph g;
    CHECK_THROWS_AS(softmax(g.constant(Tensor({2, 0}))), EmptyInputError);
    CHECK_THROWS_AS(log_softmax(g.constant(Tensor({0}))), EmptyInputError);
}

TEST_CASE("log_sum_exp examples") {
    const std::vector<double> a{std::log(0.4), std::log(0.6)};
    CHECK(std::abs(log_sum_exp(a)) < 1e-15);
    const std::vector<double> b{kNegInf, 0.0};
    CHECK(log_sum_exp(b) == 0.0);
    const std::vector<double> c{1000.0, 1000.0};
    CHECK(log_sum_exp(c) == doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
    const std::vector<double> all_neg_inf{kNegInf, kNegInf};
    CHECK(log_sum_exp(all_neg_inf) == kNegInf);

    Graph g;
    CHECK(std::abs(log_sum_exp(g.constant(Tensor({2}, {std::log(0.4), std::log(0.6)}))).item()) < 1e-15);
    CHECK(log_sum_exp(g.constant(Tensor({2}, {kNegInf, 0.0}))).item() == 0.0);
    CHECK(log_sum_exp(g.constant(Tensor({2}, {1000.0, 1000.0}))).item() ==
          doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
    CHECK(log_add_exp(g.constant(Tensor::scalar(kNegInf)), g.constant(Tensor::scalar(0.0))).item() == 0.0);
}

TEST_CASE("gradient of -inf entries is zero") {
    Graph g;
    const Var x = g.variable(Tensor({3}, {kNegInf, 0.0, 1.0}));
    g.backward(log_sum_exp(x));
    CHECK(g.grad(x)[0] == 0.0);
    CHECK(g.grad(x)[1] + g.grad(x)[2] == doctest::Approx(1.0));
}

TEST_CASE("every differentiable op matches central differences") {
    using V = std::span<const Var>;
    struct Case {
        const char* name;
        std::vector<Shape> shapes;
        testing::GraphFn fn;
    };
    auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 1, 1, 0, 0, 1, 1});
    auto attn_mask = std::make_shared<std::vector<std::uint8_t>>(
        std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 1});
    const std::vector<Case> cases = {
        {"matmul", {{3, 4}, {4, 2}}, [](Graph&, V v) { return matmul(v[0], v[1]); }},
        {"linear", {{3, 4}, {5, 4}}, [](Graph&, V v) { return linear(v[0], v[1]); }},
        {"transpose", {{3, 4}}, [](Graph&, V v) { return transpose(v[0]); }},
        {"add", {{2, 3}, {2, 3}}, [](Graph&, V v) { return add(v[0], v[1]); }},
        {"sub", {{2, 3}, {2, 3}}, [](Graph&, V v) { return sub(v[0], v[1]); }},
        {"scale", {{2, 3}}, [](Graph&, V v) { return scale(v[0], -1.7); }},
        {"relu", {{4, 5}}, [](Graph&, V v) { return relu(v[0]); }},
        {"pairwise_add", {{3, 4}, {2, 4}}, [](Graph&, V v) { return pairwise_add(v[0], v[1]); }},
        {"softmax rows", {{3, 5}}, [](Graph&, V v) { return softmax(v[0], -1); }},
        {"softmax cols", {{3, 5}}, [](Graph&, V v) { return softmax(v[0], 0); }},
        {"log_softmax", {{3, 5}}, [](Graph&, V v) { return log_softmax(v[0], 1); }},
        {"masked_softmax", {{3, 3}}, [mask](Graph&, V v) { return masked_softmax(v[0], mask); }},
        {"log_sum_exp", {{2, 4}}, [](Graph&, V v) { return log_sum_exp(v[0]); }},
        {"log_add_exp", {{}, {}}, [](Graph&, V v) { return log_add_exp(v[0], v[1]); }},
        {"pick", {{3, 3}}, [](Graph&, V v) { return pick(v[0], 5); }},
        {"sum", {{3, 3}}, [](Graph&, V v) { return sum(v[0]); }},
        {"reshape", {{2, 6}}, [](Graph&, V v) { return reshape(v[0], {3, 4}); }},
        {"concat rows", {{2, 3}, {1, 3}}, [](Graph&, V v) { return concat(v, 0); }},
        {"concat cols", {{2, 3}, {2, 2}}, [](Graph&, V v) { return concat(v, 1); }},
        {"slice", {{4, 3}}, [](Graph&, V v) { return slice(v[0], 0, 1, 3); }},
        {"slice cols", {{4, 3}}, [](Graph&, V v) { return slice(v[0], 1, 1, 3); }},
        {"gather_rows", {{4, 3}}, [](Graph&, V v) { return gather_rows(v[0], {2, -1, 0, 2}); }},
        {"embedding_bag_mean",
         {{5, 3}},
         [](Graph&, V v) { return embedding_bag_mean(v[0], {{1}, {0, 4}, {2, 2, 3}}); }},
        {"attention_weights",
         {{3, 4}, {4, 4}},
         [](Graph&, V v) { return attention_weights(v[0], v[1], 2); }},
        {"attention_weights masked",
         {{3, 4}, {4, 4}},
         [attn_mask](Graph&, V v) { return attention_weights(v[0], v[1], 2, attn_mask); }},
        {"attention_context",
         {{2, 3, 4}, {4, 6}},
         [](Graph&, V v) { return attention_context(softmax(v[0], -1), v[1]); }},
        {"attention chain",
         {{2, 4}, {5, 4}, {5, 4}},
         [](Graph&, V v) { return attention_context(attention_weights(v[0], v[1], 4), v[2]); }},
    };
    for (const auto& c : cases) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            std::mt19937_64 rng(seed);
            std::vector<Tensor> inputs;
            for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng));
            INFO(c.name << " seed " << seed);
            CHECK(gradcheck_error(c.fn, inputs, seed) < kGradTol);
        }
    }
}

TEST_CASE("masked softmax gives exact zeros") {
    auto mask = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 0, 1, 0});
    Graph g;
    const Tensor y = masked_softmax(g.constant(Tensor({2, 3}, {5, 100, 1, -3, 2, 7})), mask).value();
    CHECK(y(0, 1) == 0.0);
    CHECK(y(1, 0) == 0.0);
    CHECK(y(1, 2) == 0.0);
    CHECK(y(1, 1) == 1.0);
    CHECK(y(0, 0) + y(0, 2) == doctest::Approx(1.0).epsilon(1e-15));
    auto empty_row = std::make_shared<std::vector<std::uint8_t>>(std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1});
    CHECK_THROWS_AS(masked_softmax(g.constant(Tensor({2, 3})), empty_row), ContractError);
}

TEST_CASE("attention ops agree with a naive evaluation") {
    std::mt19937_64 rng(11);
    const Tensor q = random_tensor({1, 8}, rng);
    const Tensor k = random_tensor({5, 8}, rng);
    const Tensor v = random_tensor({5, 8}, rng);
    Graph g;
    const Var w = attention_weights(g.constant(q), g.constant(k), 4);
    const Tensor c = attention_context(w, g.constant(v)).value();
    std::vector<std::vector<double>> keys, values;
    for (std::size_t j = 0; j < 5; ++j) {
        keys.emplace_back(k.row(j).begin(), k.row(j).end());
        values.emplace_back(v.row(j).begin(), v.row(j).end());
    }
    const auto ref = testing::naive_attention(q.row(0), keys, values, 4);
    CHECK(w.shape() == Shape{4, 1, 5});
    for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(w.value()[h * 5 + j] - ref.alpha[h][j]) < 1e-14);
    CHECK(testing::max_abs_diff(c.row(0), ref.context) < 1e-13);
}

TEST_CASE("graph supports exactly one backward pass") {
    Graph g;
    const Var x = g.variable(Tensor({2}, {1.0, 2.0}));
    const Var y = sum(x);
    g.backward(y);
    CHECK_THROWS_AS(g.backward(y), GraphError);

    Graph inf(GradMode::kInference);
    const Var z = sum(inf.constant(Tensor({2}, {1.0, 2.0})));
    CHECK_THROWS_AS(inf.backward(z), GraphError);

    Graph g2;
    const Var m = g2.variable(Tensor({2, 2}));
    CHECK_THROWS_AS(g2.backward(m), DimensionError);
}

TEST_CASE("backward visits ops in reverse order and accumulates into parameters") {
    Tensor p({1, 2}, {0.5, -1.0});
    Graph g;
    const Var w = g.parameter(p);
    // Reuse w twice so its accumulator receives two contributions.
    const Var y = sum(add(scale(w, 2.0), w));
    g.backward(y);
    CHECK(p.grad()[0] == 3.0);
    CHECK(p.grad()[1] == 3.0);
}

TEST_CASE("non-finite forward values are a contract violation") {
    Graph g;
    const Var x = g.constant(Tensor({2}, {1.0, 2.0}));
    CHECK_THROWS_AS(scale(x, std::numeric_limits<double>::quiet_NaN()), NumericError);
}

TEST_CASE("forward passes are bitwise deterministic") {
    std::mt19937_64 rng(5);
    const Tensor a = random_tensor({6, 8}, rng), b = random_tensor({7, 8}, rng);
    auto run = [&] {
        Graph g(GradMode::kInference);
        return log_softmax(relu(linear(g.constant(a), g.constant(b)))).value();
    };
    CHECK(run().bitwise_equal(run()));
}

TEST_CASE("memory accounting tracks tensor buffers") {
    const auto before = memory_stats().live_bytes;
    reset_peak_memory();
    {
        Tensor big({1000});
        CHECK(memory_stats().live_bytes >= before + 1000 * sizeof(double));
        CHECK(memory_stats().peak_bytes >= before + 1000 * sizeof(double));
    }
    CHECK(memory_stats().live_bytes == before);
}
