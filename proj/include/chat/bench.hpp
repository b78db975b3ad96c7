#pragma once

// Chunk-size sweep: training-step time, decode time, joiner calls, lattice
// size and peak tensor memory for both variants.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "chat/config.hpp"
#include "chat/decode.hpp"

namespace chat {

struct BenchOptions {
    std::vector<std::size_t> chunk_sizes{4, 8, 12, 16};
    std::size_t frames = 96;  // encoder frames per utterance (s = 1)
    std::size_t tokens = 10;  // target length U
    std::size_t batch = 32;
    std::size_t train_steps = 3; // measured steps, after one warm-up step
    std::size_t decode_utts = 20;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    DecodeConfig decode;
};

struct BenchRow {
    std::size_t chunk_size = 0;
    Variant variant = Variant::kChat;
    double train_ms_per_step = 0.0;
    double decode_ms = 0.0; // greedy search per utterance given encoder output, batch = 1
    // Joiner calls of a decode emitting `tokens` labels: S + U.
    std::size_t joiner_calls = 0;
    // B * S * (U + 1) * (|V| + 1); S = T (rnnt) or ceil(T / C) (chat).
    std::uint64_t lattice_elems = 0;
    std::size_t peak_bytes = 0; // largest measured training-step peak
    std::vector<std::size_t> step_peak_bytes;
};

// `base` provides every model dimension; variant and chunk size are swept.
// Models are freshly initialised from options.seed.
std::vector<BenchRow> run_bench(const ModelConfig& base, const BenchOptions& options);

// Columns: chunk_size,variant,train_ms_per_step,decode_ms,joiner_calls,lattice_elems
void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows);
// Columns: chunk_size,variant,step,peak_bytes
void write_memory_csv(std::ostream& out, std::span<const BenchRow> rows);
// Line chart of measured peak tensor memory against training step, one line
// per (variant, chunk size).
void write_memory_svg(std::ostream& out, std::span<const BenchRow> rows);

} // namespace chat
