#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chat/data.hpp"
#include "chat/decode.hpp"
#include "chat/lattice.hpp"
#include "chat/model.hpp"

namespace chat {

struct UtteranceLoss {
    Var loss;
    LatticeShape lattice;
};

// features -> encoder -> joint lattice -> transducer loss, all on `params`'s
// graph.
UtteranceLoss utterance_loss(const ParamVars& params, const ModelConfig& config, const DataRecord& record);
// Inference-mode value of the above.
double utterance_loss_value(const Model& model, const DataRecord& record);

struct EvalResult {
    double wer = 0.0;       // corpus level: total edits / total reference tokens
    double mean_loss = 0.0; // per utterance
    std::vector<DecodePath> paths;
};
EvalResult evaluate(const Model& model, std::span<const DataRecord> records, const DecodeConfig& config);

struct TrainOptions {
    double lr = 0.02;
    std::size_t steps = 5000;
    std::size_t batch = 8;
    // Training-set WER/loss are measured at step 0, every eval_every steps
    // and after the last step.
    std::size_t eval_every = 100;
    std::uint64_t seed = 0;
    // Stop as soon as an evaluation reaches WER 0.
    bool stop_at_zero_wer = true;
    DecodeConfig decode;
};

struct TrainLogRow {
    std::size_t step = 0; // 1-based update index
    double loss = 0.0;    // batch mean before the update
    double wall_ms = 0.0;
    std::size_t lattice_elems = 0; // largest joint lattice in the batch
    std::size_t peak_bytes = 0;    // peak tensor memory during the step
};

struct EvalPoint {
    std::size_t step = 0; // updates applied before the evaluation
    double wer = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    ModelParams best;
    EvalPoint best_eval;
    std::vector<EvalPoint> evals;
    std::vector<TrainLogRow> log;
    std::size_t steps_run = 0;
};

// Plain SGD on the batch-mean transducer loss. Batches walk through a
// per-epoch shuffle of the data. The best parameters by (WER, loss) are kept.
// `model` holds the final parameters afterwards. Throws NumericError naming
// the step and utterances when a loss is not finite.
TrainResult train(Model& model, std::span<const DataRecord> records, const TrainOptions& options,
                  const std::function<void(const TrainLogRow&)>& on_step = {},
                  const std::function<void(const EvalPoint&)>& on_eval = {});

// One SGD update on `batch`. All graphs of the batch are alive together, so
// peak memory reflects the batch size.
TrainLogRow train_step(Model& model, std::span<const DataRecord* const> batch, double lr);

void write_train_log_header(std::ostream& out);
void write_train_log_row(std::ostream& out, const TrainLogRow& row);

// ---- Gradient check ------------------------------------------------------------

struct GradcheckOptions {
    double eps = 1e-6;
    double tolerance = 1e-4;
    // Test hook: added to every analytic gradient entry of this parameter.
    std::optional<std::string> corrupt_param;
    double corrupt_delta = 1e-2;
};

struct GradcheckEntry {
    std::string name;
    std::size_t elements = 0;
    // ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf).
    double max_rel_error = 0.0;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double max_rel_error = 0.0;
    bool passed = false;
    std::vector<std::string> failing;
};

// Central finite differences of the end-to-end loss with respect to every
// parameter element.
GradcheckReport gradcheck(const Model& model, const DataRecord& record, const GradcheckOptions& options = {});

// Small-dimension model plus one random utterance: d = 8, T = 12, U = 3.
struct GradcheckProblem {
    Model model;
    DataRecord record;
};
GradcheckProblem make_gradcheck_problem(Variant variant, std::uint64_t seed);

void write_gradcheck_report(std::ostream& out, const GradcheckReport& report);

} // namespace chat
