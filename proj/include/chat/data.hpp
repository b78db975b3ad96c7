#pragma once

// Utterance records and the synthetic toy task.
//
// Data file: one record per line,
//   <id> <T_in> <input_dim> | <T_in*input_dim features, row-major> | <token ids>
// Features are written with 17 significant digits so a file round-trips
// bitwise.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "chat/model.hpp"
#include "chat/numerics.hpp"

namespace chat {

struct DataRecord {
    std::string id;
    Tensor features; // [T_in x input_dim]
    std::vector<Token> target;
};

void write_records(std::ostream& out, std::span<const DataRecord> records);
// Throws DataError naming the line on malformed input.
std::vector<DataRecord> read_records(std::istream& in);
void save_records(const std::filesystem::path& path, std::span<const DataRecord> records);
std::vector<DataRecord> load_records(const std::filesystem::path& path);

// Throws DataError when a record does not fit the model: wrong feature
// width, T_in < stack factor, or token ids outside [0, |V|).
void check_records(std::span<const DataRecord> records, const ModelConfig& config);

struct SyntheticSpec {
    std::size_t n_utts = 64;
    std::size_t vocab_size = 16;
    std::size_t input_dim = 16;
    std::size_t repeat = 4;
    double noise = 0.0;
    std::size_t min_tokens = 3;
    std::size_t max_tokens = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

// Token embeddings are drawn first (standard normal, [|V| x input_dim]), then
// each utterance draws its length uniformly in [min_tokens, max_tokens] and
// that many distinct token ids. Token y becomes `repeat` consecutive frames
// of embedding(y) plus N(0, noise^2) noise. The embedding table only depends
// on the seed, vocab_size and input_dim.
std::vector<DataRecord> gen_synthetic(const SyntheticSpec& spec);
Tensor synthetic_embeddings(const SyntheticSpec& spec);

} // namespace chat
