#include "chat/joiner.hpp"

#include <string>

#include "chat/errors.hpp"

namespace chat {

AttentionRecord attention_record(const Tensor& weights, std::size_t row) {
    if (weights.rank() != 3 || row >= weights.dim(1)) {
        throw DimensionError("attention_record: row " + std::to_string(row) + " outside " +
                             shape_to_string(weights.shape()));
    }
    const std::size_t heads = weights.dim(0), k = weights.dim(1), n = weights.dim(2);
    AttentionRecord rec;
    rec.weights.assign(heads, std::vector<double>(n));
    rec.summed.assign(n, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < n; ++j) {
            const double w = weights[(h * k + row) * n + j];
            rec.weights[h][j] = w;
            rec.summed[j] += w;
        }
    return rec;
}

Joiner::Joiner(const ParamVars& params, const ModelConfig& config)
    : variant_(config.variant), config_(config.joiner) {
    config_.validate(variant_);
    if (variant_ == Variant::kRnnt) {
        w_enc_ = params[param::kJoinEnc];
        w_pred_ = params[param::kJoinPred];
    } else {
        w_query_ = params[param::kJoinQuery];
        w_key_ = params[param::kJoinKey];
        w_value_ = params[param::kJoinValue];
    }
    w_out_ = params[param::kJoinOut];
}

Var Joiner::project_predictor(Var pred_rows) const {
    return linear(pred_rows, variant_ == Variant::kRnnt ? w_pred_ : w_query_);
}

Var Joiner::project_frames(Var enc) const {
    if (variant_ != Variant::kRnnt) throw ContractError("project_frames is an rnnt joiner op");
    return linear(enc, w_enc_);
}

Var Joiner::project_keys(Var chunk) const {
    if (variant_ != Variant::kChat) throw ContractError("project_keys is a chat joiner op");
    return linear(chunk, w_key_);
}

Var Joiner::project_values(Var chunk) const {
    if (variant_ != Variant::kChat) throw ContractError("project_values is a chat joiner op");
    return linear(chunk, w_value_);
}

Var Joiner::output(Var hidden) const { return log_softmax(linear(hidden, w_out_), -1); }

namespace {

void require_zero_frame(Var chunk, std::size_t index) {
    const Tensor& c = chunk.value();
    if (c.rank() != 2 || c.rows() < 2) {
        throw ContractError("chunk " + std::to_string(index) +
                            " needs at least one real frame plus the zero frame, got " +
                            shape_to_string(c.shape()));
    }
    for (double v : c.row(c.rows() - 1)) {
        if (v != 0.0) throw ContractError("chunk " + std::to_string(index) + " is missing its zero frame");
    }
}

} // namespace

EncoderSide prepare_encoder_side(const Joiner& joiner, Var enc, const ChunkSpec& spec) {
    const Tensor& e = enc.value();
    if (e.rank() != 2 || e.cols() != joiner.config().d_enc) {
        throw DimensionError("encoder output " + shape_to_string(e.shape()) +
                             " does not match joiner d_enc " + std::to_string(joiner.config().d_enc));
    }
    if (e.rows() == 0) throw EmptyInputError("encoder output has no frames");
    if (joiner.variant() == Variant::kChat) {
        // The zero frame projects to an exact zero row, so projecting every
        // frame once and partitioning afterwards gives the same keys and values.
        EncoderSide side;
        side.variant = Variant::kChat;
        side.keys = partition(joiner.project_keys(enc), spec);
        side.values = partition(joiner.project_values(enc), spec);
        side.num_steps = side.keys.size();
        for (const Var& k : side.keys) side.real_lens.push_back(k.shape()[0] - 1);
        return side;
    }
    EncoderSide side;
    side.variant = Variant::kRnnt;
    side.num_steps = e.rows();
    side.frame_proj = joiner.project_frames(enc);
    return side;
}

EncoderSide prepare_encoder_side(const Joiner& joiner, std::span<const Var> chunks) {
    if (joiner.variant() != Variant::kChat) throw ContractError("chunk inputs need the chat joiner");
    if (chunks.empty()) throw EmptyInputError("no chunks");
    EncoderSide side;
    side.variant = Variant::kChat;
    side.num_steps = chunks.size();
    for (std::size_t n = 0; n < chunks.size(); ++n) {
        require_zero_frame(chunks[n], n);
        if (chunks[n].shape()[1] != joiner.config().d_enc) {
            throw DimensionError("chunk " + shape_to_string(chunks[n].shape()) +
                                 " does not match joiner d_enc " +
                                 std::to_string(joiner.config().d_enc));
        }
        side.keys.push_back(joiner.project_keys(chunks[n]));
        side.values.push_back(joiner.project_values(chunks[n]));
        side.real_lens.push_back(chunks[n].shape()[0] - 1);
    }
    return side;
}

StepHidden join_step(const Joiner& joiner, const EncoderSide& side, std::size_t step, Var pred_rows,
                     Var pred_proj) {
    if (step >= side.num_steps) {
        throw DimensionError("decision step " + std::to_string(step) + " outside " +
                             std::to_string(side.num_steps) + " steps");
    }
    StepHidden out;
    if (side.variant == Variant::kRnnt) {
        out.hidden = relu(pairwise_add(slice(side.frame_proj, 0, step, step + 1), pred_proj));
        return out;
    }
    out.attention = attention_weights(pred_proj, side.keys[step], joiner.config().num_heads);
    out.context = attention_context(out.attention, side.values[step]);
    out.hidden = relu(add(out.context, pred_rows));
    return out;
}

Var additive_join(const Joiner& joiner, Var h_enc, Var h_pred) {
    if (joiner.variant() != Variant::kRnnt) throw ContractError("additive_join needs the rnnt joiner");
    const Var hidden = relu(add(joiner.project_frames(h_enc), joiner.project_predictor(h_pred)));
    return joiner.output(hidden);
}

AttentionJoin attention_join(const Joiner& joiner, Var chunk, Var h_pred) {
    const Var chunks[1] = {chunk};
    const EncoderSide side = prepare_encoder_side(joiner, chunks);
    const StepHidden step = join_step(joiner, side, 0, h_pred, joiner.project_predictor(h_pred));
    AttentionJoin out;
    out.log_probs = joiner.output(step.hidden);
    out.context = step.context;
    out.record = attention_record(step.attention.value(), 0);
    return out;
}

LatticeVar build_joint_lattice(const Joiner& joiner, const EncoderSide& side, Var pred_states) {
    const std::size_t labels = pred_states.shape()[0];
    const Var pred_proj = joiner.project_predictor(pred_states);
    Var hidden;
    if (side.variant == Variant::kRnnt) {
        hidden = relu(pairwise_add(side.frame_proj, pred_proj));
    } else {
        std::vector<Var> per_chunk;
        per_chunk.reserve(side.num_steps);
        for (std::size_t n = 0; n < side.num_steps; ++n) {
            per_chunk.push_back(join_step(joiner, side, n, pred_states, pred_proj).hidden);
        }
        hidden = per_chunk.size() == 1 ? per_chunk.front() : concat(per_chunk, 0);
    }
    LatticeShape shape{side.num_steps, labels, joiner.config().num_outputs()};
    return LatticeVar{shape, joiner.output(hidden)};
}

JointLattice build_joint_lattice(const Model& model, const Tensor& enc, std::span<const Token> target) {
    Graph g(GradMode::kInference);
    const ParamVars params(g, model.params);
    const Joiner joiner(params, model.config);
    const EncoderSide side = prepare_encoder_side(joiner, g.constant_ref(enc), model.config.chunk);
    const Var states = predictor_states(params, model.config.predictor, target);
    const LatticeVar lattice = build_joint_lattice(joiner, side, states);
    return JointLattice{lattice.shape, lattice.logp.value()};
}

} // namespace chat
