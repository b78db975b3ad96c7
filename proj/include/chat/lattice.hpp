#pragma once

// Transducer negative log-likelihood over a decision-step lattice. Decision
// steps are frames for RNN-T and chunks for CHAT; the recursion is the same.

#include <cstddef>
#include <span>
#include <vector>

#include "chat/model.hpp"
#include "chat/numerics.hpp"

namespace chat {

struct LatticeShape {
    std::size_t steps = 0;   // S
    std::size_t labels = 0;  // U + 1
    std::size_t symbols = 0; // |V| + 1, blank is the last symbol

    std::size_t blank() const { return symbols - 1; }
    std::size_t rows() const { return steps * labels; }
    std::size_t elements() const { return steps * labels * symbols; }
    std::size_t row(std::size_t s, std::size_t u) const { return s * labels + u; }
    std::size_t index(std::size_t s, std::size_t u, std::size_t k) const {
        return row(s, u) * symbols + k;
    }
};

// Log-probabilities laid out as [S * (U+1) x (|V|+1)], row s*(U+1) + u.
struct JointLattice {
    LatticeShape shape;
    Tensor logp;

    double at(std::size_t s, std::size_t u, std::size_t k) const { return logp[shape.index(s, u, k)]; }
    // Checks layout and that every (s, u) distribution sums to 1 within `tol`.
    void validate(double tol = 1e-9) const;
};

// Graph-resident lattice, as produced by the joiner during training.
struct LatticeVar {
    LatticeShape shape;
    Var logp;
};

struct AlignmentMove {
    std::size_t step;
    std::size_t label;
    std::size_t symbol;
};

// Moves from (0, 0) up to and including the final blank at (S-1, U).
struct AlignmentPath {
    std::vector<AlignmentMove> moves;
    double log_prob = 0.0;

    std::size_t blanks(std::size_t blank_id) const;
    std::size_t emissions(std::size_t blank_id) const;
};

// -log P(target | lattice), recorded on the lattice's graph.
//   alpha(0,0) = 0
//   alpha(s,u) = logaddexp(alpha(s-1,u) + logp[s-1][u][blank],
//                          alpha(s,u-1) + logp[s][u-1][y_u])
//   loss = -(alpha(S-1,U) + logp[S-1][U][blank])
// Throws VocabularyError for target ids >= |V| and DimensionError when the
// target length does not match the lattice.
Var transducer_loss(const LatticeVar& lattice, std::span<const Token> target);
double transducer_loss(const JointLattice& lattice, std::span<const Token> target);

struct LossWithGrad {
    double loss = 0.0;
    Tensor grad; // d loss / d logp, same shape as logp
};
LossWithGrad transducer_loss_with_grad(const JointLattice& lattice, std::span<const Token> target);

// Brute force: enumerates every alignment path. Throws SizeError if S + U > 14.
inline constexpr std::size_t kOracleMaxSize = 14;
double oracle_loss(const JointLattice& lattice, std::span<const Token> target);

// Max-probability alignment; ties go to the blank (step-advancing) move.
AlignmentPath best_path(const JointLattice& lattice, std::span<const Token> target);

} // namespace chat
