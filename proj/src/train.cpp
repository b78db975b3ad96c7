#include "chat/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>

#include "chat/errors.hpp"
#include "chat/joiner.hpp"
#include "chat/metrics.hpp"

namespace chat {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string ids_of(std::span<const DataRecord* const> batch) {
    std::string out;
    for (const auto* r : batch) out += (out.empty() ? "" : ",") + r->id;
    return out;
}

} // namespace

UtteranceLoss utterance_loss(const ParamVars& params, const ModelConfig& config, const DataRecord& record) {
    Graph& g = params.graph();
    const Var x = g.constant_ref(record.features);
    const Var enc = encode(x, params, config);
    const Joiner joiner(params, config);
    const EncoderSide side = prepare_encoder_side(joiner, enc, config.chunk);
    const Var preds = predictor_states(params, config.predictor, record.target);
    const LatticeVar lattice = build_joint_lattice(joiner, side, preds);
    return {transducer_loss(lattice, record.target), lattice.shape};
}

double utterance_loss_value(const Model& model, const DataRecord& record) {
    Graph g(GradMode::kInference);
    const ParamVars params(g, model.params);
    return utterance_loss(params, model.config, record).loss.item();
}

EvalResult evaluate(const Model& model, std::span<const DataRecord> records, const DecodeConfig& config) {
    if (records.empty()) throw EmptyInputError("evaluation needs at least one record");
    EvalResult result;
    std::size_t edits = 0;
    std::size_t ref_tokens = 0;
    double loss = 0.0;
    for (const auto& r : records) {
        DecodePath path;
        double value = 0.0;
        try {
            path = decode_features(model, r.features, config);
            value = utterance_loss_value(model, r);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (evaluating utterance " + r.id + ")");
        }
        if (!std::isfinite(value)) {
            throw NumericError("non-finite loss " + std::to_string(value) + " evaluating utterance " + r.id);
        }
        edits += edit_distance(std::span<const Token>(r.target), std::span<const Token>(path.tokens));
        ref_tokens += r.target.size();
        loss += value;
        result.paths.push_back(std::move(path));
    }
    if (ref_tokens == 0) throw EmptyInputError("evaluation references contain no tokens");
    result.wer = static_cast<double>(edits) / static_cast<double>(ref_tokens);
    result.mean_loss = loss / static_cast<double>(records.size());
    return result;
}

TrainLogRow train_step(Model& model, std::span<const DataRecord* const> batch, double lr) {
    if (batch.empty()) throw EmptyInputError("training batch is empty");
    const auto start = Clock::now();
    reset_peak_memory();

    TrainLogRow row;
    model.params.zero_grad();
    {
        std::vector<std::unique_ptr<Graph>> graphs;
        std::vector<Var> losses;
        for (const DataRecord* r : batch) {
            auto& g = *graphs.emplace_back(std::make_unique<Graph>());
            const ParamVars params(g, model.params);
            UtteranceLoss ul;
            try {
                ul = utterance_loss(params, model.config, *r);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (utterance " + r->id + ")");
            }
            const double value = ul.loss.item();
            if (!std::isfinite(value)) {
                throw NumericError("non-finite loss " + std::to_string(value) + " for utterance " + r->id);
            }
            row.loss += value;
            row.lattice_elems = std::max(row.lattice_elems, ul.lattice.elements());
            losses.push_back(scale(ul.loss, 1.0 / static_cast<double>(batch.size())));
        }
        row.loss /= static_cast<double>(batch.size());
        for (std::size_t i = 0; i < graphs.size(); ++i) graphs[i]->backward(losses[i]);
        row.peak_bytes = memory_stats().peak_bytes;
    }

    for (auto& e : model.params.entries()) {
        if (!e.value.has_grad()) continue;
        const auto grad = e.value.grad();
        auto data = e.value.data();
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * grad[i];
    }
    model.params.drop_grads();
    row.wall_ms = ms_since(start);
    return row;
}

TrainResult train(Model& model, std::span<const DataRecord> records, const TrainOptions& options,
                  const std::function<void(const TrainLogRow&)>& on_step,
                  const std::function<void(const EvalPoint&)>& on_eval) {
    if (records.empty()) throw EmptyInputError("training data is empty");
    if (!(options.lr > 0.0)) throw ConfigError("lr must be positive");
    if (options.batch == 0 || options.eval_every == 0) throw ConfigError("batch and eval_every must be >= 1");
    options.decode.validate();
    check_records(records, model.config);

    TrainResult result;
    auto run_eval = [&](std::size_t step) {
        EvalResult ev;
        try {
            ev = evaluate(model, records, options.decode);
        } catch (const NumericError& e) {
            throw NumericError("evaluation after step " + std::to_string(step) + ": " + e.what());
        }
        const EvalPoint point{step, ev.wer, ev.mean_loss};
        result.evals.push_back(point);
        if (on_eval) on_eval(point);
        const bool better = result.evals.size() == 1 || point.wer < result.best_eval.wer ||
                            (point.wer == result.best_eval.wer && point.loss < result.best_eval.loss);
        if (better) {
            result.best_eval = point;
            result.best = model.params;
            result.best.drop_grads();
        }
        return point;
    };

    EvalPoint last = run_eval(0);
    if (options.stop_at_zero_wer && last.wer == 0.0) return result;

    std::mt19937_64 rng(options.seed);
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    std::vector<const DataRecord*> batch;

    for (std::size_t step = 1; step <= options.steps; ++step) {
        batch.clear();
        while (batch.size() < std::min(options.batch, records.size())) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(&records[order[cursor++]]);
        }
        TrainLogRow row;
        try {
            row = train_step(model, batch, options.lr);
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(step) + ", batch [" + ids_of(batch) + "]: " + e.what());
        }
        row.step = step;
        result.log.push_back(row);
        result.steps_run = step;
        if (on_step) on_step(row);

        if (step % options.eval_every == 0 || step == options.steps) {
            last = run_eval(step);
            if (options.stop_at_zero_wer && last.wer == 0.0) break;
        }
    }
    return result;
}

void write_train_log_header(std::ostream& out) { out << "step,loss,wall_ms,lattice_elems,peak_bytes\n"; }

void write_train_log_row(std::ostream& out, const TrainLogRow& row) {
    out << row.step << ',' << std::setprecision(17) << row.loss << ',' << std::setprecision(6) << row.wall_ms
        << ',' << row.lattice_elems << ',' << row.peak_bytes << '\n';
}

// ---------------------------------------------------------------------------
// Gradient check

GradcheckReport gradcheck(const Model& model, const DataRecord& record, const GradcheckOptions& options) {
    if (!(options.eps > 0.0)) throw ConfigError("gradcheck eps must be positive");
    Model work = model;
    work.params.drop_grads();
    {
        Graph g;
        const ParamVars params(g, work.params);
        g.backward(utterance_loss(params, work.config, record).loss);
    }
    if (options.corrupt_param) {
        auto grad = work.params.at(*options.corrupt_param).ensure_grad();
        for (double& v : grad) v += options.corrupt_delta;
    }

    GradcheckReport report;
    report.passed = true;
    for (auto& e : work.params.entries()) {
        Tensor analytic(e.value.shape());
        if (e.value.has_grad()) std::copy(e.value.grad().begin(), e.value.grad().end(), analytic.data().begin());
        Tensor numeric(e.value.shape());
        auto data = e.value.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + options.eps;
            const double up = utterance_loss_value(work, record);
            data[i] = saved - options.eps;
            const double down = utterance_loss_value(work, record);
            data[i] = saved;
            numeric[i] = (up - down) / (2.0 * options.eps);
        }
        double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
            norm_a = std::max(norm_a, std::abs(analytic[i]));
            norm_n = std::max(norm_n, std::abs(numeric[i]));
        }
        // Floor keeps an all-zero gradient from dividing finite-difference
        // round-off by zero.
        const double rel = diff / std::max({norm_a, norm_n, 1e-8});
        GradcheckEntry entry{e.name, data.size(), rel, rel < options.tolerance};
        if (!entry.passed) {
            report.passed = false;
            report.failing.push_back(e.name);
        }
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

GradcheckProblem make_gradcheck_problem(Variant variant, std::uint64_t seed) {
    ModelConfig config;
    config.variant = variant;
    config.chunk.chunk_size = 4;
    config.chunk.left_context = 1;
    config.encoder.input_dim = 4;
    config.encoder.model_dim = 8;
    config.encoder.num_heads = 2;
    config.encoder.num_sa_layers = 1;
    config.encoder.conv_kernel = 2;
    config.predictor.vocab_size = 5;
    config.predictor.embed_dim = 8;
    config.predictor.context_size = 2;
    config.joiner.d_enc = 8;
    config.joiner.d_pred = 8;
    config.joiner.d_joint = 8;
    config.joiner.num_heads = 2;
    config.joiner.vocab_size = 5;

    GradcheckProblem problem{make_model(config, seed), {}};
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    problem.record.id = "gradcheck";
    problem.record.features = Tensor({12, config.encoder.input_dim});
    for (double& v : problem.record.features.data()) v = normal(rng);
    std::uniform_int_distribution<Token> tok(0, static_cast<Token>(config.predictor.vocab_size) - 1);
    for (int i = 0; i < 3; ++i) problem.record.target.push_back(tok(rng));
    return problem;
}

void write_gradcheck_report(std::ostream& out, const GradcheckReport& report) {
    out << std::scientific << std::setprecision(3);
    for (const auto& e : report.entries) {
        out << (e.passed ? "ok   " : "FAIL ") << e.name << " elements=" << e.elements
            << " max_rel_error=" << e.max_rel_error << '\n';
    }
    out << (report.passed ? "PASS" : "FAIL") << " max_rel_error=" << report.max_rel_error;
    if (!report.failing.empty()) {
        out << " failing:";
        for (const auto& name : report.failing) out << ' ' << name;
    }
    out << '\n' << std::defaultfloat;
}

} // namespace chat
