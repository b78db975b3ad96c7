#pragma once

// Joint networks. The additive joiner combines one encoder frame with one
// predictor state:
//     log_softmax(W_out relu(W_enc h_enc + W_pred h_pred))
// The chunk-attention joiner lets the predictor state attend over a chunk of
// encoder frames (plus one appended zero frame that serves as the attend-to-
// nothing target for blank):
//     q = W_Q h_pred, k_t = W_K h_t, v_t = W_V h_t
//     alpha = softmax(q.k / sqrt(d_joint / H)) per head, c = sum alpha v
//     log_softmax(W_out relu(c + h_pred))

#include <cstddef>
#include <span>
#include <vector>

#include "chat/chunking.hpp"
#include "chat/config.hpp"
#include "chat/lattice.hpp"
#include "chat/model.hpp"

namespace chat {

// Attention of one query over the positions of one chunk (real frames then
// the zero frame).
struct AttentionRecord {
    std::vector<std::vector<double>> weights; // [head][position]
    std::vector<double> summed;               // per position, summed over heads

    std::size_t num_heads() const { return weights.size(); }
    std::size_t positions() const { return summed.size(); }
};

// Extracts query `row` from attention weights shaped [heads x k x positions].
AttentionRecord attention_record(const Tensor& weights, std::size_t row);

// Joiner weights bound into one graph.
class Joiner {
  public:
    Joiner(const ParamVars& params, const ModelConfig& config);

    Variant variant() const { return variant_; }
    const JoinerConfig& config() const { return config_; }

    // rnnt: W_pred h_pred; chat: the query W_Q h_pred. Rows are independent.
    Var project_predictor(Var pred_rows) const;
    // rnnt only: W_enc h_enc for every frame.
    Var project_frames(Var enc) const;
    // chat only: keys and values of one chunk (zero frame included).
    Var project_keys(Var chunk) const;
    Var project_values(Var chunk) const;
    // log_softmax(W_out hidden), row-wise.
    Var output(Var hidden) const;

  private:
    Variant variant_;
    JoinerConfig config_;
    Var w_enc_, w_pred_, w_query_, w_key_, w_value_, w_out_;
};

// Encoder-side projections for every decision step of one utterance.
struct EncoderSide {
    Variant variant = Variant::kChat;
    std::size_t num_steps = 0;
    Var frame_proj;              // rnnt: [T x d_joint]
    std::vector<Var> keys;       // chat: per chunk [(m+1) x d_joint]
    std::vector<Var> values;     // chat: per chunk [(m+1) x d_joint]
    std::vector<std::size_t> real_lens;
};

// enc[T x d_enc]. For chat, keys and values are projected over all frames and
// then partitioned with `spec`; every chunk ends with the (zero) projection of
// its zero frame.
EncoderSide prepare_encoder_side(const Joiner& joiner, Var enc, const ChunkSpec& spec);
// chat only: chunks that already carry their zero frame. Throws
// ContractError when a chunk's last row is not zero.
EncoderSide prepare_encoder_side(const Joiner& joiner, std::span<const Var> chunks);

struct StepHidden {
    Var hidden;    // [k x d_joint], input of Joiner::output
    Var context;   // chat: attended representation c, [k x d_joint]
    Var attention; // chat: [heads x k x positions]
};

// Joint hidden state at one decision step for k predictor rows. `pred_proj`
// must be project_predictor(pred_rows).
StepHidden join_step(const Joiner& joiner, const EncoderSide& side, std::size_t step, Var pred_rows,
                     Var pred_proj);

// Single-frame additive join: h_enc[1 x d_enc], h_pred[1 x d_pred] -> [1 x (|V|+1)].
Var additive_join(const Joiner& joiner, Var h_enc, Var h_pred);

struct AttentionJoin {
    Var log_probs; // [1 x (|V|+1)]
    Var context;   // [1 x d_joint]
    AttentionRecord record;
};
// chunk[(m+1) x d_enc] including the zero frame, h_pred[1 x d_pred].
AttentionJoin attention_join(const Joiner& joiner, Var chunk, Var h_pred);

// Full joint lattice over (decision step, label position, symbol).
// pred_states row u is the predictor state after u labels (row 0 = start).
LatticeVar build_joint_lattice(const Joiner& joiner, const EncoderSide& side, Var pred_states);

// Convenience: inference-mode lattice of a model for encoder output `enc`.
JointLattice build_joint_lattice(const Model& model, const Tensor& enc, std::span<const Token> target);

} // namespace chat
