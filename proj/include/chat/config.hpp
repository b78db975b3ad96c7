#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "chat/chunking.hpp"

namespace chat {

// rnnt: frame-level decisions with the additive joiner.
// chat: chunk-level decisions with the chunk-attention joiner.
enum class Variant { kRnnt, kChat };

std::string_view to_string(Variant v);
// Accepts "rnnt" / "chat"; throws ConfigError otherwise.
Variant parse_variant(std::string_view text);

struct EncoderConfig {
    std::size_t input_dim = 16;
    std::size_t model_dim = 32;
    std::size_t num_sa_layers = 1;
    std::size_t num_heads = 4;
    // Frame stacking factor (subsampling).
    std::size_t stack_factor = 1;
    // Taps of the causal convolution after the input projection; 1 disables it.
    std::size_t conv_kernel = 2;

    void validate() const;
};

struct PredictorConfig {
    std::size_t vocab_size = 16;
    std::size_t embed_dim = 32;
    // Number of trailing non-blank tokens averaged into the predictor state.
    std::size_t context_size = 1;

    void validate() const;
};

struct JoinerConfig {
    std::size_t d_enc = 32;
    std::size_t d_pred = 32;
    std::size_t d_joint = 32;
    std::size_t num_heads = 4;
    std::size_t vocab_size = 16;

    std::size_t blank_id() const { return vocab_size; }
    std::size_t num_outputs() const { return vocab_size + 1; }
    std::size_t head_dim() const { return d_joint / num_heads; }

    void validate(Variant variant) const;
};

struct ModelConfig {
    Variant variant = Variant::kChat;
    ChunkSpec chunk;
    EncoderConfig encoder;
    PredictorConfig predictor;
    JoinerConfig joiner;

    // Validates every part plus cross-part consistency (dimensions and
    // vocabulary must agree between encoder, predictor and joiner).
    void validate() const;
};

} // namespace chat
