#pragma once

// Plain-text run configuration: one key=value per line, '#' starts a comment.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "chat/config.hpp"
#include "chat/decode.hpp"

namespace chat {

struct RunConfig {
    Variant variant = Variant::kChat;
    std::size_t chunk_size = 12;
    std::size_t left_context = 6;
    std::size_t num_heads = 4;
    std::size_t enc_heads = 4;
    std::size_t d_enc = 32;
    std::size_t d_pred = 32;
    std::size_t d_joint = 32;
    std::size_t vocab_size = 16;
    std::size_t stack_factor = 1;
    std::size_t input_dim = 16;
    std::size_t num_sa_layers = 1;
    std::size_t context_size = 1;
    std::size_t conv_kernel = 2;
    double frame_ms = 10.0;

    double lr = 0.02;
    std::size_t steps = 5000;
    std::size_t batch = 8;
    std::size_t eval_every = 100;
    std::uint64_t seed = 0;
    std::size_t max_symbols_per_step = 10;

    std::string data = "data.txt";
    std::string output = "out";

    // Synthetic data generation.
    std::size_t n_utts = 64;
    std::size_t repeat = 4;
    double noise = 0.0;
    std::size_t min_tokens = 3;
    std::size_t max_tokens = 8;

    // Every accepted key, in file order.
    static const std::vector<std::string_view>& keys();

    // Typed assignment. Throws ConfigError for unknown keys or values that do
    // not parse as the key's type.
    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;

    // Semantic checks (dimension agreement, positive sizes, ...).
    void validate() const;

    ModelConfig model_config() const;
    DecodeConfig decode_config() const;

    // key=value lines for every key; parse_run_config(to_text()) round-trips.
    std::string to_text() const;
};

// Applies config text on top of `config` without the semantic checks, so
// that later overrides can still complete it.
void apply_config_text(RunConfig& config, std::string_view text);
std::string read_config_file(const std::filesystem::path& path);

// Defaults + text, validated.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

} // namespace chat
