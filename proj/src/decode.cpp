#include "chat/decode.hpp"

#include <optional>

#include "chat/errors.hpp"

namespace chat {

void DecodeConfig::validate() const {
    if (max_symbols_per_step < 1) throw ConfigError("max_symbols_per_step must be >= 1");
}

bool DecodePath::operator==(const DecodePath& other) const {
    if (variant != other.variant || tokens != other.tokens || emit_steps != other.emit_steps ||
        blank_count != other.blank_count || num_steps != other.num_steps ||
        joiner_evaluations != other.joiner_evaluations || attn.size() != other.attn.size()) {
        return false;
    }
    for (std::size_t i = 0; i < attn.size(); ++i) {
        if (attn[i].weights != other.attn[i].weights || attn[i].summed != other.attn[i].summed) return false;
    }
    return true;
}

std::size_t count_joiner_calls(const DecodePath& path) { return path.blank_count + path.tokens.size(); }

namespace {

std::size_t argmax_row(const Tensor& logp, std::size_t row) {
    const auto r = logp.row(row);
    std::size_t best = 0;
    for (std::size_t k = 1; k < r.size(); ++k)
        if (r[k] > r[best]) best = k;
    return best;
}

// Search state of one utterance.
struct Hypothesis {
    EncoderSide side;
    DecodePath path;
    std::size_t step = 0;
    std::size_t emitted_here = 0;
    // Predictor state and its projection for the current history; reset on
    // every emission.
    std::optional<Var> pred;
    std::optional<Var> pred_proj;

    bool finished() const { return step >= side.num_steps; }

    void advance() {
        ++path.blank_count;
        ++step;
        emitted_here = 0;
    }

    // Applies the argmax of one joiner evaluation.
    void apply(std::size_t symbol, std::size_t blank, const StepHidden& hidden, std::size_t row) {
        ++path.joiner_evaluations;
        if (symbol == blank) {
            advance();
            return;
        }
        path.tokens.push_back(static_cast<Token>(symbol));
        path.emit_steps.push_back(step);
        if (path.variant == Variant::kChat) path.attn.push_back(attention_record(hidden.attention.value(), row));
        ++emitted_here;
        pred.reset();
        pred_proj.reset();
    }

    // Applies forced blanks; returns true while the utterance still needs a
    // joiner evaluation.
    bool settle(std::size_t cap) {
        while (!finished() && emitted_here >= cap) advance();
        return !finished();
    }
};

Hypothesis start(const Model& model, const Joiner& joiner, Graph& g, const Tensor& enc) {
    Hypothesis h;
    h.side = prepare_encoder_side(joiner, g.constant_ref(enc), model.config.chunk);
    h.path.variant = model.config.variant;
    h.path.num_steps = h.side.num_steps;
    return h;
}

} // namespace

DecodePath greedy_decode(const Model& model, const Tensor& enc, const DecodeConfig& config) {
    config.validate();
    Graph g(GradMode::kInference);
    const ParamVars params(g, model.params);
    const Joiner joiner(params, model.config);
    const std::size_t blank = model.config.joiner.blank_id();

    Hypothesis h = start(model, joiner, g, enc);
    while (h.settle(config.max_symbols_per_step)) {
        if (!h.pred) {
            h.pred = predict(params, model.config.predictor, h.path.tokens);
            h.pred_proj = joiner.project_predictor(*h.pred);
        }
        const StepHidden hidden = join_step(joiner, h.side, h.step, *h.pred, *h.pred_proj);
        const Var logp = joiner.output(hidden.hidden);
        h.apply(argmax_row(logp.value(), 0), blank, hidden, 0);
    }
    return std::move(h.path);
}

DecodePath decode_features(const Model& model, const Tensor& features, const DecodeConfig& config) {
    return greedy_decode(model, encode(model, features), config);
}

std::vector<DecodePath> batched_decode(const Model& model, std::span<const Tensor> encs,
                                       const DecodeConfig& config) {
    config.validate();
    Graph g(GradMode::kInference);
    const ParamVars params(g, model.params);
    const Joiner joiner(params, model.config);
    const std::size_t blank = model.config.joiner.blank_id();

    std::vector<Hypothesis> hyps;
    hyps.reserve(encs.size());
    for (const Tensor& enc : encs) hyps.push_back(start(model, joiner, g, enc));

    std::vector<std::size_t> active;
    std::vector<std::size_t> stale;
    std::vector<Var> rows;
    while (true) {
        active.clear();
        for (std::size_t i = 0; i < hyps.size(); ++i)
            if (hyps[i].settle(config.max_symbols_per_step)) active.push_back(i);
        if (active.empty()) break;

        // One predictor lookup and projection for every hypothesis whose
        // history changed since its last evaluation.
        stale.clear();
        std::vector<std::vector<std::size_t>> bags;
        for (std::size_t i : active) {
            if (hyps[i].pred) continue;
            stale.push_back(i);
            bags.push_back(predictor_bag(model.config.predictor, hyps[i].path.tokens));
        }
        if (!stale.empty()) {
            const Var pred = embedding_bag_mean(params[param::kPredEmbed], std::move(bags));
            const Var proj = joiner.project_predictor(pred);
            for (std::size_t r = 0; r < stale.size(); ++r) {
                Hypothesis& h = hyps[stale[r]];
                h.pred = stale.size() == 1 ? pred : slice(pred, 0, r, r + 1);
                h.pred_proj = stale.size() == 1 ? proj : slice(proj, 0, r, r + 1);
            }
        }

        std::vector<StepHidden> hidden;
        hidden.reserve(active.size());
        rows.clear();
        for (std::size_t i : active) {
            Hypothesis& h = hyps[i];
            hidden.push_back(join_step(joiner, h.side, h.step, *h.pred, *h.pred_proj));
            rows.push_back(hidden.back().hidden);
        }
        const Var logp = joiner.output(rows.size() == 1 ? rows.front() : concat(rows, 0));
        for (std::size_t r = 0; r < active.size(); ++r) {
            hyps[active[r]].apply(argmax_row(logp.value(), r), blank, hidden[r], 0);
        }
    }

    std::vector<DecodePath> out;
    out.reserve(hyps.size());
    for (auto& h : hyps) out.push_back(std::move(h.path));
    return out;
}

} // namespace chat
