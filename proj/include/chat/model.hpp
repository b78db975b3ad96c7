#pragma once

// Toy chunk-aware encoder, stateless predictor, parameter registry and the
// binary checkpoint format.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "chat/config.hpp"
#include "chat/numerics.hpp"

namespace chat {

using Token = std::int32_t;

// Ordered name -> Tensor map. Shapes are fixed once a tensor is added, so
// references returned by at() stay valid for the lifetime of the registry
// as long as no further entries are added.
class ModelParams {
  public:
    struct Entry {
        std::string name;
        Tensor value;
    };

    // Throws ConfigError on a duplicate name.
    Tensor& add(std::string name, Tensor value);
    Tensor& at(std::string_view name);
    const Tensor& at(std::string_view name) const;
    bool contains(std::string_view name) const;

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grad();
    void drop_grads();
    // Same names, order, shapes and bit patterns.
    bool bitwise_equal(const ModelParams& other) const;

  private:
    std::vector<Entry> entries_;
};

// Parameter names.
namespace param {
inline constexpr std::string_view kEncInput = "enc.input";
std::string enc_conv(std::size_t tap);
std::string enc_attn(std::size_t layer, char which); // which in {q, k, v, o}
inline constexpr std::string_view kPredEmbed = "pred.embed";
inline constexpr std::string_view kJoinEnc = "join.enc";
inline constexpr std::string_view kJoinPred = "join.pred";
inline constexpr std::string_view kJoinQuery = "join.query";
inline constexpr std::string_view kJoinKey = "join.key";
inline constexpr std::string_view kJoinValue = "join.value";
inline constexpr std::string_view kJoinOut = "join.out";
} // namespace param

struct Model {
    ModelConfig config;
    ModelParams params;
};

// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in = last dim.
// Deterministic given the seed.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);
Model make_model(const ModelConfig& config, std::uint64_t seed);

// Every parameter of a registry bound into one graph.
class ParamVars {
  public:
    // Trainable: backward accumulates into the registry's grads.
    ParamVars(Graph& g, ModelParams& params);
    // Read-only binding.
    ParamVars(Graph& g, const ModelParams& params);

    Var operator[](std::string_view name) const;
    Graph& graph() const { return *graph_; }

  private:
    Graph* graph_;
    std::vector<std::pair<std::string, Var>> vars_;
};

// x[T_in x input_dim] -> [floor(T_in / s) x d_enc]: frame stacking, a
// pointwise ReLU projection, then (per chunk) an optional causal convolution
// and masked self-attention layers with residual connections. The output of
// chunk c is a function of the input frames of chunks [c - L, c] only.
// Throws EmptyInputError when T_in < s.
Var encode(Var x, const ParamVars& params, const ModelConfig& config);
Tensor encode(const Model& model, const Tensor& x);

// Predictor state for every prefix of `target`: row u summarises target[0, u).
// Row 0 is the start embedding. Throws VocabularyError on ids outside [0, V).
Var predictor_states(const ParamVars& params, const PredictorConfig& config,
                     std::span<const Token> target);
// Single state [1 x d_pred] for an arbitrary history.
Var predict(const ParamVars& params, const PredictorConfig& config, std::span<const Token> history);
// Same as above as a rank-1 tensor [d_pred].
Tensor predict(const Model& model, std::span<const Token> history);

// Embedding rows averaged for `history`. The start embedding is the row at
// index vocab_size.
std::vector<std::size_t> predictor_bag(const PredictorConfig& config, std::span<const Token> history);

// Checkpoint layout (little-endian):
//   "CHATCKPT" | u32 version=1 | u32 count |
//   count x { u16 name_len | name | u8 ndim | ndim x u32 dim | numel x f64 }
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::string serialize_checkpoint(const ModelParams& params);
// Throws BadMagicError, UnsupportedVersionError or TruncatedCheckpointError.
ModelParams parse_checkpoint(std::string_view bytes);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

} // namespace chat
