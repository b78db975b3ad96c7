#include "chat/lattice.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "chat/errors.hpp"

namespace chat {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_target(const LatticeShape& shape, std::span<const Token> target) {
    if (shape.steps == 0) throw DimensionError("lattice has no decision steps");
    if (shape.symbols < 2) throw DimensionError("lattice needs at least one token plus blank");
    if (target.size() + 1 != shape.labels) {
        throw DimensionError("target of length " + std::to_string(target.size()) +
                             " does not match lattice with " + std::to_string(shape.labels) +
                             " label positions");
    }
    for (Token t : target) {
        if (t < 0 || static_cast<std::size_t>(t) >= shape.blank()) {
            throw VocabularyError("target id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(shape.blank()));
        }
    }
}

void check_layout(const JointLattice& lattice) {
    const Shape expected{lattice.shape.rows(), lattice.shape.symbols};
    if (lattice.logp.shape() != expected) {
        throw DimensionError("lattice tensor " + shape_to_string(lattice.logp.shape()) +
                             " does not match " + shape_to_string(expected));
    }
}

} // namespace

void JointLattice::validate(double tol) const {
    if (shape.steps == 0) throw DimensionError("lattice has no decision steps");
    check_layout(*this);
    for (std::size_t r = 0; r < shape.rows(); ++r) {
        double total = 0.0;
        for (double v : logp.row(r)) total += std::exp(v);
        if (std::abs(total - 1.0) > tol) {
            throw NumericError("lattice row " + std::to_string(r) + " sums to " +
                               std::to_string(total) + " instead of 1");
        }
    }
}

std::size_t AlignmentPath::blanks(std::size_t blank_id) const {
    std::size_t n = 0;
    for (const auto& m : moves) n += m.symbol == blank_id;
    return n;
}

std::size_t AlignmentPath::emissions(std::size_t blank_id) const {
    return moves.size() - blanks(blank_id);
}

Var transducer_loss(const LatticeVar& lattice, std::span<const Token> target) {
    const LatticeShape& sh = lattice.shape;
    check_target(sh, target);
    const Shape expected{sh.rows(), sh.symbols};
    if (lattice.logp.shape() != expected) {
        throw DimensionError("lattice tensor " + shape_to_string(lattice.logp.shape()) +
                             " does not match " + shape_to_string(expected));
    }

    Graph& g = lattice.logp.graph();
    const Var logp = lattice.logp;
    const std::size_t blank = sh.blank();
    std::vector<Var> alpha(sh.rows());
    alpha[0] = g.constant(Tensor::scalar(0.0));
    for (std::size_t s = 0; s < sh.steps; ++s) {
        for (std::size_t u = 0; u < sh.labels; ++u) {
            if (s == 0 && u == 0) continue;
            Var from_blank;
            Var from_label;
            if (s > 0) {
                from_blank = add(alpha[sh.row(s - 1, u)], pick(logp, sh.index(s - 1, u, blank)));
            }
            if (u > 0) {
                const auto y = static_cast<std::size_t>(target[u - 1]);
                from_label = add(alpha[sh.row(s, u - 1)], pick(logp, sh.index(s, u - 1, y)));
            }
            if (from_blank.valid() && from_label.valid()) {
                alpha[sh.row(s, u)] = log_add_exp(from_blank, from_label);
            } else {
                alpha[sh.row(s, u)] = from_blank.valid() ? from_blank : from_label;
            }
        }
    }
    const std::size_t last = sh.steps - 1;
    const std::size_t final_u = sh.labels - 1;
    const Var total = add(alpha[sh.row(last, final_u)], pick(logp, sh.index(last, final_u, blank)));
    return scale(total, -1.0);
}

double transducer_loss(const JointLattice& lattice, std::span<const Token> target) {
    check_layout(lattice);
    Graph g(GradMode::kInference);
    return transducer_loss(LatticeVar{lattice.shape, g.constant_ref(lattice.logp)}, target).item();
}

LossWithGrad transducer_loss_with_grad(const JointLattice& lattice, std::span<const Token> target) {
    check_layout(lattice);
    Graph g;
    const Var logp = g.variable(lattice.logp);
    const Var loss = transducer_loss(LatticeVar{lattice.shape, logp}, target);
    g.backward(loss);
    LossWithGrad out{loss.item(), Tensor(lattice.logp.shape())};
    const auto grad = g.grad(logp);
    std::copy(grad.begin(), grad.end(), out.grad.data().begin());
    return out;
}

double oracle_loss(const JointLattice& lattice, std::span<const Token> target) {
    check_layout(lattice);
    const LatticeShape& sh = lattice.shape;
    check_target(sh, target);
    const std::size_t U = sh.labels - 1;
    if (sh.steps + U > kOracleMaxSize) {
        throw SizeError("oracle enumeration limited to S + U <= " + std::to_string(kOracleMaxSize) +
                        ", got " + std::to_string(sh.steps + U));
    }
    const std::size_t blank = sh.blank();
    std::vector<double> path_scores;
    // Depth-first walk over every monotone path to (S-1, U).
    auto walk = [&](auto&& self, std::size_t s, std::size_t u, double score) -> void {
        if (s == sh.steps - 1 && u == U) {
            path_scores.push_back(score + lattice.at(s, u, blank));
            return;
        }
        if (s + 1 < sh.steps) self(self, s + 1, u, score + lattice.at(s, u, blank));
        if (u < U) self(self, s, u + 1, score + lattice.at(s, u, static_cast<std::size_t>(target[u])));
    };
    walk(walk, 0, 0, 0.0);
    return -log_sum_exp(path_scores);
}

AlignmentPath best_path(const JointLattice& lattice, std::span<const Token> target) {
    check_layout(lattice);
    const LatticeShape& sh = lattice.shape;
    check_target(sh, target);
    const std::size_t blank = sh.blank();

    // score(s,u) = best log-prob of reaching (s,u); came_by_blank records the
    // winning predecessor.
    std::vector<double> score(sh.rows(), kNegInf);
    std::vector<std::uint8_t> came_by_blank(sh.rows(), 0);
    score[0] = 0.0;
    for (std::size_t s = 0; s < sh.steps; ++s) {
        for (std::size_t u = 0; u < sh.labels; ++u) {
            if (s == 0 && u == 0) continue;
            double via_blank = kNegInf;
            double via_label = kNegInf;
            if (s > 0) via_blank = score[sh.row(s - 1, u)] + lattice.at(s - 1, u, blank);
            if (u > 0) {
                via_label = score[sh.row(s, u - 1)] +
                            lattice.at(s, u - 1, static_cast<std::size_t>(target[u - 1]));
            }
            const bool blank_wins = s > 0 && (u == 0 || via_blank >= via_label);
            score[sh.row(s, u)] = blank_wins ? via_blank : via_label;
            came_by_blank[sh.row(s, u)] = blank_wins ? 1 : 0;
        }
    }

    AlignmentPath path;
    const std::size_t last = sh.steps - 1;
    const std::size_t final_u = sh.labels - 1;
    path.log_prob = score[sh.row(last, final_u)] + lattice.at(last, final_u, blank);
    path.moves.push_back({last, final_u, blank});
    std::size_t s = last;
    std::size_t u = final_u;
    while (s > 0 || u > 0) {
        if (came_by_blank[sh.row(s, u)]) {
            --s;
            path.moves.push_back({s, u, blank});
        } else {
            --u;
            path.moves.push_back({s, u, static_cast<std::size_t>(target[u])});
        }
    }
    std::reverse(path.moves.begin(), path.moves.end());
    return path;
}

} // namespace chat
