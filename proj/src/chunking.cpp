#include "chat/chunking.hpp"

#include <algorithm>
#include <string>

#include "chat/errors.hpp"

namespace chat {

void ChunkSpec::validate() const {
    if (chunk_size < 1) throw ConfigError("chunk_size must be >= 1");
    if (!(frame_duration_ms > 0.0)) throw ConfigError("frame_duration_ms must be > 0");
}

Tensor ChunkedEncoding::real_frames() const {
    if (chunks.empty()) return Tensor();
    const std::size_t d = chunks.front().cols();
    Tensor out({total_frames, d});
    std::size_t row = 0;
    for (std::size_t n = 0; n < chunks.size(); ++n) {
        const auto src = chunks[n].data();
        std::copy_n(src.begin(), real_lens[n] * d, out.data().begin() + row * d);
        row += real_lens[n];
    }
    return out;
}

ChunkedEncoding partition(const Tensor& enc, const ChunkSpec& spec) {
    spec.validate();
    if (enc.rank() != 2) {
        throw DimensionError("partition expects [T x d], got " + shape_to_string(enc.shape()));
    }
    const std::size_t frames = enc.rows();
    const std::size_t d = enc.cols();
    if (frames == 0) throw EmptyInputError("partition of an empty encoder output");

    ChunkedEncoding out;
    out.total_frames = frames;
    for (std::size_t begin = 0; begin < frames; begin += spec.chunk_size) {
        const std::size_t len = std::min(spec.chunk_size, frames - begin);
        Tensor chunk({len + 1, d});
        std::copy_n(enc.data().begin() + begin * d, len * d, chunk.data().begin());
        out.chunks.push_back(std::move(chunk));
        out.real_lens.push_back(len);
    }
    return out;
}

std::vector<Var> partition(Var enc, const ChunkSpec& spec) {
    spec.validate();
    const Tensor& e = enc.value();
    if (e.rank() != 2) {
        throw DimensionError("partition expects [T x d], got " + shape_to_string(e.shape()));
    }
    const std::size_t frames = e.rows();
    if (frames == 0) throw EmptyInputError("partition of an empty encoder output");

    std::vector<Var> chunks;
    for (std::size_t begin = 0; begin < frames; begin += spec.chunk_size) {
        const std::size_t end = std::min(begin + spec.chunk_size, frames);
        // Index -1 gathers the zero row.
        std::vector<std::ptrdiff_t> rows;
        for (std::size_t t = begin; t < end; ++t) rows.push_back(static_cast<std::ptrdiff_t>(t));
        rows.push_back(-1);
        chunks.push_back(gather_rows(enc, std::move(rows)));
    }
    return chunks;
}

FrameMask encoder_mask(std::size_t frames, const ChunkSpec& spec) {
    spec.validate();
    FrameMask mask(frames * frames, 0);
    for (std::size_t i = 0; i < frames; ++i)
        for (std::size_t j = 0; j < frames; ++j)
            mask[i * frames + j] = spec.visible(spec.chunk_of(i), spec.chunk_of(j)) ? 1 : 0;
    return mask;
}

} // namespace chat
