#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chat/chunking.hpp"
#include "chat/decode.hpp"

namespace chat {

// ---- Word error rate --------------------------------------------------------

// Levenshtein distance with unit substitution/deletion/insertion costs.
std::size_t edit_distance(std::span<const std::string> ref, std::span<const std::string> hyp);
std::size_t edit_distance(std::span<const Token> ref, std::span<const Token> hyp);

// edit_distance / |ref|. Throws EmptyInputError for an empty reference.
double wer(std::span<const std::string> ref, std::span<const std::string> hyp);
double wer(std::span<const Token> ref, std::span<const Token> hyp);
// Whitespace-tokenised convenience overload.
double wer(const std::string& ref, const std::string& hyp);

// ---- Latency -----------------------------------------------------------------

struct LatencyReport {
    std::vector<double> timestamps_ms;
    // Absent when the path emitted nothing.
    std::optional<double> mean_ms;
};

// Milliseconds covered by one chunk: C * s * frame_duration_ms.
double chunk_duration_ms(const ChunkSpec& spec, std::size_t subsample);

// Every token is released at the end of the chunk that emitted it:
// (n + 1) * C * s * frame_ms. For rnnt paths the emitting frame is mapped to
// its chunk first, since the chunked encoder only exposes a frame once its
// chunk is complete.
LatencyReport emission_timestamps(const DecodePath& path, const ChunkSpec& spec, std::size_t subsample);

// ---- Joint-lattice memory ----------------------------------------------------

struct LatticeMemory {
    std::uint64_t rnnt_bytes = 0;
    std::uint64_t chat_bytes = 0;
    double ratio = 0.0; // chat / rnnt
};

// rnnt = B*T*(U+1)*(V+1)*bytes, chat = B*ceil(T/C)*(U+1)*(V+1)*bytes.
// Throws ConfigError if any argument is zero.
LatticeMemory lattice_memory(std::uint64_t batch, std::uint64_t frames, std::uint64_t labels,
                             std::uint64_t vocab, std::uint64_t chunk, std::uint64_t bytes_per_element);

// ---- Alignment export ----------------------------------------------------------

struct ChunkPathEntry {
    Token token;
    std::size_t step;
};

// One utterance of alignment output. frame_heat rows hold, per emission, the
// head-summed attention over the positions of the emitting chunk (real frames
// then the zero frame) divided by the head count, so each row sums to 1.
struct AlignmentDump {
    static constexpr int kFormatVersion = 1;

    std::string utterance_id;
    Variant variant = Variant::kChat;
    std::size_t num_steps = 0;
    std::vector<ChunkPathEntry> chunk_path;
    std::vector<std::vector<double>> frame_heat;
    // Head sums before normalisation (rows sum to H). Written only on request.
    std::vector<std::vector<double>> raw_heat;
};

AlignmentDump make_alignment_dump(const std::string& utterance_id, const DecodePath& path);

// Line-oriented export: one JSON object per utterance and line, keys in a
// fixed order, with a "version" field.
void export_alignment(std::ostream& out, const AlignmentDump& dump, bool include_raw_heat = false);
std::string alignment_line(const AlignmentDump& dump, bool include_raw_heat = false);
// Throws DataError on malformed lines or an unknown version.
AlignmentDump parse_alignment_line(const std::string& line);

// ---- CSV reports ---------------------------------------------------------------

struct LatencyRow {
    std::string utterance_id;
    std::size_t n_tokens = 0;
    std::optional<double> mean_ts_ms;
};

// Header: utterance_id,n_tokens,mean_ts_ms. Utterances without tokens have an
// empty mean column.
void write_latency_csv(std::ostream& out, std::span<const LatencyRow> rows);

} // namespace chat
