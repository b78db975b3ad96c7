#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "chat/joiner.hpp"
#include "chat/model.hpp"

namespace chat {

struct DecodeConfig {
    // Non-blank emissions allowed at one decision step before a blank is forced.
    std::size_t max_symbols_per_step = 10;

    void validate() const;
};

struct DecodePath {
    Variant variant = Variant::kChat;
    std::vector<Token> tokens;
    // Decision step (frame for rnnt, chunk for chat) of every token.
    std::vector<std::size_t> emit_steps;
    // chat only: attention of the joiner call that emitted each token.
    std::vector<AttentionRecord> attn;
    // Blanks emitted, forced ones included. Always equals num_steps.
    std::size_t blank_count = 0;
    std::size_t num_steps = 0;
    // Joiner evaluations actually performed (forced blanks cost none).
    std::size_t joiner_evaluations = 0;

    bool operator==(const DecodePath& other) const;
};

// Greedy search over encoder output enc[T x d_enc]. At every step the argmax
// over |V|+1 outputs (ties -> lowest id) either emits a token and stays, or
// emits blank and moves to the next frame (rnnt) or chunk (chat).
DecodePath greedy_decode(const Model& model, const Tensor& enc, const DecodeConfig& config);

// encode() followed by greedy_decode().
DecodePath decode_features(const Model& model, const Tensor& features, const DecodeConfig& config);

// Label-looping batched greedy search. All unfinished utterances share one
// predictor projection and one output projection per round; utterances that
// emit blank advance their own step pointer and finished ones drop out.
// Output is identical to greedy_decode() run per utterance.
std::vector<DecodePath> batched_decode(const Model& model, std::span<const Tensor> encs,
                                       const DecodeConfig& config);

// blank_count + tokens: one joiner call per decision (blank or token).
std::size_t count_joiner_calls(const DecodePath& path);

} // namespace chat
