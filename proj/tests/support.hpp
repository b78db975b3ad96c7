#pragma once

// Test-side helpers and reference implementations. Nothing here calls into
// the library's own recursions, so they can serve as independent oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "chat/lattice.hpp"
#include "chat/model.hpp"
#include "chat/numerics.hpp"

namespace testing {

using chat::Graph;
using chat::Shape;
using chat::Tensor;
using chat::Var;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) { return max_abs_diff(a.data(), b.data()); }

// Builds f over fresh variables and reduces a non-scalar output with a fixed
// random projection, so the check covers the full Jacobian.
using GraphFn = std::function<Var(Graph&, std::span<const Var>)>;

inline double scalar_objective(const GraphFn& f, const std::vector<Tensor>& inputs, const Tensor& weights,
                               std::vector<Tensor>* grads) {
    Graph g;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(g.variable(t));
    Var out = f(g, vars);
    const std::size_t n = out.value().numel();
    Var flat = chat::reshape(out, {1, n});
    Var loss = chat::reshape(chat::linear(flat, g.constant(weights)), {});
    const double value = loss.item();
    if (grads) {
        g.backward(loss);
        grads->clear();
        for (std::size_t i = 0; i < vars.size(); ++i) {
            Tensor gt(inputs[i].shape());
            const auto gs = g.grad(vars[i]);
            if (!gs.empty()) std::copy(gs.begin(), gs.end(), gt.data().begin());
            grads->push_back(std::move(gt));
        }
    }
    return value;
}

// Largest per-input relative error ||a - n||_inf / max(||a||_inf, ||n||_inf, floor)
// between tape gradients and central differences.
inline double gradcheck_error(const GraphFn& f, std::vector<Tensor> inputs, std::uint64_t seed, double h = 1e-5) {
    std::mt19937_64 rng(seed * 7919 + 17);
    std::size_t out_numel = 0;
    {
        Graph g;
        std::vector<Var> vars;
        for (const auto& t : inputs) vars.push_back(g.variable(t));
        out_numel = f(g, vars).value().numel();
    }
    const Tensor weights = random_tensor({1, out_numel}, rng, -1.0, 1.0);
    std::vector<Tensor> analytic;
    scalar_objective(f, inputs, weights, &analytic);

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t k = 0; k < inputs[i].numel(); ++k) {
            const double saved = inputs[i][k];
            inputs[i][k] = saved + h;
            const double up = scalar_objective(f, inputs, weights, nullptr);
            inputs[i][k] = saved - h;
            const double down = scalar_objective(f, inputs, weights, nullptr);
            inputs[i][k] = saved;
            const double numeric = (up - down) / (2 * h);
            diff = std::max(diff, std::abs(numeric - analytic[i][k]));
            na = std::max(na, std::abs(analytic[i][k]));
            nn = std::max(nn, std::abs(numeric));
        }
        worst = std::max(worst, diff / std::max({na, nn, 1e-8}));
    }
    return worst;
}

// Random normalised lattice: every (s, u) row is a log-distribution.
inline chat::JointLattice random_lattice(std::size_t steps, std::size_t labels, std::size_t vocab,
                                         std::mt19937_64& rng) {
    chat::JointLattice lat;
    lat.shape = {steps, labels + 1, vocab + 1};
    lat.logp = Tensor({lat.shape.rows(), lat.shape.symbols});
    std::uniform_real_distribution<double> dist(-3.0, 3.0);
    for (std::size_t r = 0; r < lat.shape.rows(); ++r) {
        auto row = lat.logp.row(r);
        double z = 0.0;
        for (double& v : row) {
            v = dist(rng);
            z += std::exp(v);
        }
        for (double& v : row) v -= std::log(z);
    }
    return lat;
}

inline std::vector<chat::Token> random_target(std::size_t length, std::size_t vocab, std::mt19937_64& rng) {
    std::uniform_int_distribution<chat::Token> dist(0, static_cast<chat::Token>(vocab) - 1);
    std::vector<chat::Token> t(length);
    for (auto& v : t) v = dist(rng);
    return t;
}

// Textbook forward variable in probability space (no logs, no library code):
// a[s][u] = a[s-1][u] * P(blank | s-1, u) + a[s][u-1] * P(y_u | s, u-1).
inline double reference_transducer_loss(const chat::JointLattice& lat, std::span<const chat::Token> y) {
    const std::size_t S = lat.shape.steps, U = y.size(), blank = lat.shape.symbols - 1;
    auto p = [&](std::size_t s, std::size_t u, std::size_t k) {
        return std::exp(lat.logp[(s * (U + 1) + u) * lat.shape.symbols + k]);
    };
    std::vector<std::vector<double>> a(S, std::vector<double>(U + 1, 0.0));
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t u = 0; u <= U; ++u) {
            if (s == 0 && u == 0) {
                a[s][u] = 1.0;
                continue;
            }
            double v = 0.0;
            if (s > 0) v += a[s - 1][u] * p(s - 1, u, blank);
            if (u > 0) v += a[s][u - 1] * p(s, u - 1, static_cast<std::size_t>(y[u - 1]));
            a[s][u] = v;
        }
    }
    return -std::log(a[S - 1][U] * p(S - 1, U, blank));
}

// Naive multi-head attention for one query: q[d], keys/values [n x d].
struct NaiveAttention {
    std::vector<std::vector<double>> alpha; // [head][position]
    std::vector<double> context;            // [d]
};

inline NaiveAttention naive_attention(std::span<const double> q, const std::vector<std::vector<double>>& keys,
                                      const std::vector<std::vector<double>>& values, std::size_t heads) {
    const std::size_t d = q.size(), n = keys.size(), hd = d / heads;
    NaiveAttention out;
    out.context.assign(d, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        std::vector<double> scores(n);
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) dot += q[c] * keys[j][c];
            scores[j] = dot / std::sqrt(static_cast<double>(hd));
        }
        double z = 0.0;
        for (double s : scores) z += std::exp(s);
        std::vector<double> alpha(n);
        for (std::size_t j = 0; j < n; ++j) alpha[j] = std::exp(scores[j]) / z;
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) out.context[c] += alpha[j] * values[j][c];
        out.alpha.push_back(std::move(alpha));
    }
    return out;
}

// y = W x for W stored [out x in].
inline std::vector<double> matvec(const Tensor& w, std::span<const double> x) {
    std::vector<double> y(w.rows(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) y[r] += w(r, c) * x[c];
    return y;
}

inline std::vector<double> naive_log_softmax(std::vector<double> x) {
    double z = 0.0;
    for (double v : x) z += std::exp(v);
    for (double& v : x) v -= std::log(z);
    return x;
}

} // namespace testing
