#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

#include "chat/numerics.hpp"

namespace chat {

// Chunk geometry of the streaming encoder. Defaults: 12 frames per chunk,
// 6 chunks of left context, 10 ms per encoder frame before subsampling.
struct ChunkSpec {
    std::size_t chunk_size = 12;
    std::size_t left_context = 6;
    double frame_duration_ms = 10.0;

    // Throws ConfigError on C == 0 or a non-positive frame duration.
    void validate() const;

    std::size_t num_chunks(std::size_t frames) const {
        return (frames + chunk_size - 1) / chunk_size;
    }
    std::size_t chunk_of(std::size_t frame) const { return frame / chunk_size; }
    // True iff a frame in chunk `query` may attend to a frame in chunk `key`.
    bool visible(std::size_t query, std::size_t key) const {
        return key <= query && query - key <= left_context;
    }
};

// Encoder output split into consecutive chunks. Every chunk stores its real
// frames followed by one all-zero row.
struct ChunkedEncoding {
    std::vector<Tensor> chunks;
    std::vector<std::size_t> real_lens;
    std::size_t total_frames = 0;

    std::size_t num_chunks() const { return chunks.size(); }
    // Concatenation of the real frames (drops the zero rows).
    Tensor real_frames() const;
};

// enc[T x d] -> ceil(T / C) chunks; the final chunk keeps its natural length.
// Throws EmptyInputError when T == 0.
ChunkedEncoding partition(const Tensor& enc, const ChunkSpec& spec);

// Differentiable variant: one Var per chunk, each [(real_len + 1) x d].
std::vector<Var> partition(Var enc, const ChunkSpec& spec);

// Row-major T x T visibility: mask[i*T + j] != 0 iff frame i may attend to j.
using FrameMask = std::vector<std::uint8_t>;
FrameMask encoder_mask(std::size_t frames, const ChunkSpec& spec);

} // namespace chat
