// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>
#include <string>

#include "chat/bench.hpp"
#include "chat/decode.hpp"
#include "chat/joiner.hpp"
#include "chat/lattice.hpp"
#include "chat/metrics.hpp"
#include "chat/run_config.hpp"
#include "chat/train.hpp"
#include "support.hpp"

using namespace chat;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void report(const char* id, bool ok, const std::string& detail) {
    std::printf("%s %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

template <class... Args>
std::string fmt(const char* f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

const char* name(Variant v) { return v == Variant::kChat ? "chat" : "rnnt"; }

ModelConfig toy_config(Variant v) {
    RunConfig c;
    c.variant = v;
    return c.model_config();
}

SyntheticSpec toy_spec(std::size_t n) {
    SyntheticSpec s;
    s.n_utts = n;
    return s;
}

std::size_t steps_of(const Model& m, std::size_t frames) {
    return m.config.variant == Variant::kChat ? m.config.chunk.num_chunks(frames) : frames;
}

// ---------------------------------------------------------------------------

void ac1() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(1);
    double worst = 0.0;
    std::size_t n = 0;
    auto check = [&](const JointLattice& lat, const std::vector<Token>& y) {
        const double loss = transducer_loss(lat, y);
        worst = std::max({worst, std::abs(loss - oracle_loss(lat, y)),
                          std::abs(loss - testing::reference_transducer_loss(lat, y))});
        ++n;
    };
    std::uniform_int_distribution<std::size_t> size(1, 5), vocab(1, 4), ulen(0, 5);
    for (int i = 0; i < 200; ++i) {
        const std::size_t s = size(rng), u = ulen(rng), v = vocab(rng);
        check(testing::random_lattice(s, u, v, rng), testing::random_target(u, v, rng));
    }
    // Lattices produced by the two joiners: frame steps (rnnt), chunk steps (chat).
    for (Variant var : {Variant::kRnnt, Variant::kChat}) {
        for (int i = 0; i < 50; ++i) {
            ModelConfig c;
            c.variant = var;
            c.chunk.chunk_size = 3;
            c.chunk.left_context = 1;
            c.encoder.input_dim = c.encoder.model_dim = 8;
            c.encoder.num_heads = 2;
            c.predictor.vocab_size = c.joiner.vocab_size = vocab(rng);
            c.predictor.embed_dim = c.joiner.d_pred = c.joiner.d_enc = c.joiner.d_joint = 8;
            c.joiner.num_heads = 2;
            const Model m = make_model(c, static_cast<std::uint64_t>(i));
            const std::size_t frames = var == Variant::kRnnt ? size(rng) : 3 * size(rng) - rng() % 3;
            const auto y = testing::random_target(ulen(rng), c.joiner.vocab_size, rng);
            const JointLattice lat = build_joint_lattice(m, testing::random_tensor({frames, 8}, rng), y);
            if (lat.shape.steps > 5) throw std::logic_error("lattice too large");
            check(lat, y);
        }
    }
    const double secs = seconds_since(t0);
    report("AC1", worst < 1e-9 && n >= 200 && secs < 10.0,
           fmt("oracle equivalence: %zu lattices, max |diff| %.3g (< 1e-9), %.2f s (< 10 s)", n, worst, secs));
}

void ac2() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    bool ok = true;
    std::size_t params = 0;
    for (Variant v : {Variant::kRnnt, Variant::kChat}) {
        const GradcheckProblem p = make_gradcheck_problem(v, 0);
        const GradcheckReport r = gradcheck(p.model, p.record);
        ok = ok && r.passed && r.entries.size() == p.model.params.size();
        worst = std::max(worst, r.max_rel_error);
        params += r.entries.size();
    }
    const double secs = seconds_since(t0);
    report("AC2", ok && worst < 1e-4 && secs < 60.0,
           fmt("gradcheck: %zu parameter tensors over both variants, max rel error %.3g (< 1e-4), %.2f s (< 60 s)",
               params, worst, secs));
}

struct Trained {
    Model model;
    bool ok = false;
};

Trained ac3(Variant v, const std::vector<DataRecord>& data) {
    const auto t0 = Clock::now();
    Model model = make_model(toy_config(v), 0);
    TrainOptions opts; // lr 0.02, batch 8, eval every 100, at most 5000 steps
    opts.steps = 5000;
    const TrainResult r = train(model, data, opts);
    model.params = r.best;
    // WER 0 means decoding reproduces every training target exactly.
    std::size_t exact = 0;
    for (const auto& rec : data)
        exact += decode_features(model, rec.features, opts.decode).tokens == rec.target;
    const double secs = seconds_since(t0);
    const bool ok = r.best_eval.wer == 0.0 && r.best_eval.step <= 5000 && exact == data.size() && secs < 900.0;
    report("AC3", ok,
           fmt("%s learns the toy task: WER %.4f at step %zu (<= 5000), %zu/%zu exact, %.1f s (< 900 s)", name(v),
               r.best_eval.wer, r.best_eval.step, exact, data.size(), secs));
    return {std::move(model), ok};
}

void ac4() {
    // Utterances of exactly 96 frames: 12 tokens x 8 frames.
    SyntheticSpec spec;
    spec.n_utts = 4;
    spec.repeat = 8;
    spec.min_tokens = spec.max_tokens = 12;
    const auto data = gen_synthetic(spec);
    std::size_t elems[2] = {};
    for (Variant v : {Variant::kRnnt, Variant::kChat}) {
        const Model m = make_model(toy_config(v), 0);
        Graph g(GradMode::kInference);
        const ParamVars pv(g, m.params);
        elems[v == Variant::kChat] = utterance_loss(pv, m.config, data[0]).lattice.elements();
    }
    const LatticeMemory mem = lattice_memory(32, 96, 12, 16, 12, 8);
    const bool ratio_ok = elems[1] * 12 == elems[0] && mem.ratio == 1.0 / 12.0 && mem.chat_bytes * 12 == mem.rnnt_bytes;
    report("AC4", ratio_ok,
           fmt("lattice reduction T=96 C=12: %zu / %zu elements = 1/%g, formula ratio 1/%g (exactly 1/12)", elems[1],
               elems[0], static_cast<double>(elems[0]) / static_cast<double>(elems[1]), 1.0 / mem.ratio));

    BenchOptions opts;
    opts.chunk_sizes = {12};
    opts.frames = 96;
    opts.batch = 32;
    opts.train_steps = 2;
    opts.decode_utts = 2;
    const auto rows = run_bench(toy_config(Variant::kChat), opts);
    std::size_t peak[2] = {};
    for (const auto& r : rows) peak[r.variant == Variant::kChat] = r.peak_bytes;
    report("AC4", peak[1] > 0 && peak[1] < peak[0],
           fmt("bench peak allocation B=32 C=12 T=96: chat %zu bytes < rnnt %zu bytes (%.1f%% lower)", peak[1], peak[0],
               100.0 * (1.0 - static_cast<double>(peak[1]) / static_cast<double>(peak[0]))));
}

void ac5(const Model& rnnt, const Model& chat, const std::vector<DataRecord>& data,
         const std::vector<DataRecord>& in_domain) {
    const DecodeConfig dc;
    std::size_t equal = 0, mismatched = 0;
    for (const auto& r : data) {
        const DecodePath a = decode_features(rnnt, r.features, dc);
        const DecodePath b = decode_features(chat, r.features, dc);
        const std::size_t t = r.features.rows();
        const std::size_t saved = t - chat.config.chunk.num_chunks(t);
        const auto calls_a = static_cast<std::ptrdiff_t>(count_joiner_calls(a));
        const auto calls_b = static_cast<std::ptrdiff_t>(count_joiner_calls(b));
        const auto emit_diff = static_cast<std::ptrdiff_t>(a.tokens.size()) - static_cast<std::ptrdiff_t>(b.tokens.size());
        if (calls_a - calls_b != static_cast<std::ptrdiff_t>(saved) + emit_diff) ++mismatched;
        if (emit_diff == 0) {
            if (calls_a - calls_b == static_cast<std::ptrdiff_t>(saved)) ++equal;
            else ++mismatched;
        }
    }
    report("AC5", mismatched == 0 && equal > 0,
           fmt("joiner calls: rnnt - chat == T - ceil(T/C) on all %zu equal-emission utterances, %zu violations", equal,
               mismatched));

    // Batch = 1 wall time of the decode op (greedy search over encoder output),
    // best of seven interleaved rounds.
    auto time_decode = [&](const std::vector<DataRecord>& set, double best[2]) {
        std::vector<Tensor> encs[2];
        std::size_t tokens[2] = {};
        for (const Model* m : {&rnnt, &chat}) {
            const int i = m->config.variant == Variant::kChat;
            for (const auto& r : set) encs[i].push_back(encode(*m, r.features));
        }
        best[0] = best[1] = 1e300;
        for (int round = 0; round < 7; ++round) {
            for (const Model* m : {&rnnt, &chat}) {
                const int i = m->config.variant == Variant::kChat;
                tokens[i] = 0;
                const auto t0 = Clock::now();
                for (const Tensor& e : encs[i]) tokens[i] += greedy_decode(*m, e, dc).tokens.size();
                best[i] = std::min(best[i], seconds_since(t0));
            }
        }
        return std::pair{tokens[0], tokens[1]};
    };
    double fresh[2], same[2];
    const auto fresh_tokens = time_decode(data, fresh);
    const auto same_tokens = time_decode(in_domain, same);
    report("AC5", same[1] < same[0],
           fmt("batch=1 greedy decode of %zu in-domain utterances (%zu vs %zu tokens): chat %.4f s < rnnt %.4f s "
               "(%.2fx); unseen utterances (%zu vs %zu tokens): %.4f s vs %.4f s (%.2fx)",
               in_domain.size(), same_tokens.second, same_tokens.first, same[1], same[0], same[0] / same[1],
               fresh_tokens.second, fresh_tokens.first, fresh[1], fresh[0], fresh[0] / fresh[1]));
}

// Largest change of encoder rows in `probe` when the input frames of chunk
// `perturb` move.
double perturbation_effect(const Model& m, const Tensor& x0, std::size_t perturb, std::size_t probe) {
    const std::size_t c = m.config.chunk.chunk_size, s = m.config.encoder.stack_factor;
    const std::size_t frames = x0.rows() / s;
    Tensor x = x0;
    for (std::size_t t = perturb * c * s; t < std::min(frames, (perturb + 1) * c) * s; ++t)
        for (double& v : x.row(t)) v += 3.0;
    const Tensor a = encode(m, x0), b = encode(m, x);
    double diff = 0.0;
    for (std::size_t t = probe * c; t < std::min(frames, (probe + 1) * c); ++t)
        diff = std::max(diff, testing::max_abs_diff(a.row(t), b.row(t)));
    return diff;
}

void ac6(const Model& rnnt, const Model& chat, const std::vector<DataRecord>& data) {
    std::mt19937_64 rng(6);
    double causal = 0.0, left = 0.0, visible = 1e300;
    std::size_t probes = 0;
    for (const Model* m : {&rnnt, &chat}) {
        const std::size_t lc = m->config.chunk.left_context;
        // 10 chunks of 12 frames so that chunks beyond the left context exist.
        const Tensor x = testing::random_tensor({120, m->config.encoder.input_dim}, rng);
        for (std::size_t perturb = 0; perturb < 10; ++perturb) {
            for (std::size_t probe = 0; probe < 10; ++probe) {
                const double d = perturbation_effect(*m, x, perturb, probe);
                ++probes;
                if (perturb > probe) causal = std::max(causal, d);
                else if (probe - perturb > lc) left = std::max(left, d);
                else visible = std::min(visible, d);
            }
        }
    }
    report("AC6", causal < 1e-12 && left < 1e-12 && visible > 1e-9,
           fmt("encoder probes (%zu): future-chunk effect %.3g, beyond-left-context effect %.3g (< 1e-12); smallest "
               "visible effect %.3g",
               probes, causal, left, visible));

    std::size_t violations = 0, checked = 0, nonempty = 0;
    for (int probe = 0; probe < 50; ++probe) {
        const auto& r = data[rng() % data.size()];
        for (const Model* m : {&rnnt, &chat}) {
            const DecodePath full = decode_features(*m, r.features, {});
            const std::size_t c = m->config.chunk.chunk_size;
            const std::size_t chunks = m->config.chunk.num_chunks(r.features.rows());
            if (chunks < 2) continue;
            const std::size_t keep_chunks = 1 + rng() % (chunks - 1);
            const std::size_t keep = keep_chunks * c;
            Tensor prefix({keep, r.features.cols()});
            std::copy_n(r.features.data().begin(), keep * r.features.cols(), prefix.data().begin());
            const DecodePath part = decode_features(*m, prefix, {});
            const std::size_t steps = m->config.variant == Variant::kChat ? keep_chunks : keep;
            std::vector<Token> early;
            for (std::size_t i = 0; i < full.tokens.size(); ++i)
                if (full.emit_steps[i] < steps) early.push_back(full.tokens[i]);
            violations += part.tokens != early;
            nonempty += !early.empty();
            ++checked;
        }
    }
    report("AC6", violations == 0 && checked >= 50,
           fmt("truncation probes: %zu (%zu with earlier emissions), %zu changed earlier tokens", checked, nonempty,
               violations));
}

void ac7(const Model& rnnt, const Model& chat, const std::vector<DataRecord>& data) {
    std::mt19937_64 rng(7);
    std::size_t batches = 0, mismatched = 0, tokens = 0;
    for (const Model* m : {&rnnt, &chat}) {
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t b = std::uniform_int_distribution<std::size_t>(2, 16)(rng);
            std::vector<Tensor> encs;
            for (std::size_t i = 0; i < b; ++i) {
                const auto& r = data[rng() % data.size()];
                Tensor x = r.features;
                // Random extra noise keeps the batch from being just training data.
                if (trial % 2) for (double& v : x.data()) v += std::normal_distribution<double>(0.0, 0.5)(rng);
                encs.push_back(encode(*m, x));
            }
            const auto batched = batched_decode(*m, encs, {});
            for (std::size_t i = 0; i < b; ++i) {
                const DecodePath seq = greedy_decode(*m, encs[i], {});
                mismatched += !(batched[i] == seq);
                tokens += seq.tokens.size();
            }
            ++batches;
        }
    }
    report("AC7", mismatched == 0 && batches >= 50,
           fmt("batched decode: %zu batches of size 2-16, %zu tokens, %zu utterances differ from sequential", batches,
               tokens, mismatched));
}

void ac8(const Model& rnnt, const Model& chat, const std::vector<DataRecord>& data) {
    std::size_t decodes = 0, bad_blank = 0, bad_order = 0, rows = 0;
    double worst = 0.0;
    for (const Model* m : {&rnnt, &chat}) {
        for (const auto& r : data) {
            const DecodePath p = decode_features(*m, r.features, {});
            ++decodes;
            bad_blank += p.blank_count != steps_of(*m, r.features.rows()) || p.blank_count != p.num_steps;
            bad_order += !std::is_sorted(p.emit_steps.begin(), p.emit_steps.end());
            if (m->config.variant != Variant::kChat) continue;
            std::ostringstream os;
            export_alignment(os, make_alignment_dump(r.id, p));
            const AlignmentDump back = parse_alignment_line(os.str().substr(0, os.str().size() - 1));
            for (const auto& row : back.frame_heat) {
                double total = 0.0;
                for (double h : row) total += h;
                worst = std::max(worst, std::abs(total - 1.0));
                ++rows;
            }
        }
    }
    report("AC8", bad_blank == 0 && bad_order == 0 && worst <= 1e-9 && rows > 0,
           fmt("alignment: %zu decodes, %zu with blank_count != S, %zu with decreasing steps; %zu heat rows, max "
               "|sum-1| %.3g",
               decodes, bad_blank, bad_order, rows, worst));
}

void ac9() {
    std::mt19937_64 rng(9);
    std::size_t tokens = 0, wrong = 0;
    double chunk_ms = 0.0;
    for (Variant v : {Variant::kRnnt, Variant::kChat}) {
        RunConfig rc;
        rc.variant = v;
        rc.stack_factor = 8;
        const ModelConfig c = rc.model_config();
        chunk_ms = chunk_duration_ms(c.chunk, c.encoder.stack_factor);
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Model m = make_model(c, seed);
            for (double& w : m.params.at(param::kJoinOut).data()) w *= 4.0;
            const Tensor x = testing::random_tensor({8 * (12 * 5 + 7), c.encoder.input_dim}, rng);
            const DecodePath p = decode_features(m, x, {});
            const LatencyReport rep = emission_timestamps(p, c.chunk, c.encoder.stack_factor);
            for (std::size_t i = 0; i < p.tokens.size(); ++i) {
                const std::size_t chunk = v == Variant::kChat ? p.emit_steps[i] : c.chunk.chunk_of(p.emit_steps[i]);
                wrong += rep.timestamps_ms[i] != static_cast<double>(chunk + 1) * 960.0;
                ++tokens;
            }
        }
    }
    report("AC9", chunk_ms == 960.0 && tokens > 0 && wrong == 0,
           fmt("latency C=12 s=8 10 ms: chunk %.0f ms; %zu timestamps, %zu differ from (step+1)*960 ms", chunk_ms,
               tokens, wrong));
}

} // namespace

int main() {
    try {
        ac1();
        ac2();
        const auto train_data = gen_synthetic(toy_spec(64));
        Trained rnnt = ac3(Variant::kRnnt, train_data);
        Trained chat = ac3(Variant::kChat, train_data);
        ac4();
        // 1000 utterances from the same task; the first 64 are the training set.
        const auto eval_data = gen_synthetic(toy_spec(1000));
        // 1000 noisy renditions of the training utterances, which both models
        // transcribe correctly.
        std::vector<DataRecord> in_domain;
        std::mt19937_64 rng(5);
        std::normal_distribution<double> noise(0.0, 0.1);
        for (std::size_t i = 0; i < 1000; ++i) {
            DataRecord r = train_data[i % train_data.size()];
            for (double& v : r.features.data()) v += noise(rng);
            in_domain.push_back(std::move(r));
        }
        ac5(rnnt.model, chat.model, eval_data, in_domain);
        ac6(rnnt.model, chat.model, eval_data);
        ac7(rnnt.model, chat.model, eval_data);
        ac8(rnnt.model, chat.model, eval_data);
        ac9();
    } catch (const std::exception& e) {
        std::printf("acceptance aborted: %s\n", e.what());
        return 2;
    }
    std::printf("%s: %d failing line(s)\n", failures ? "FAILED" : "ALL PASSED", failures);
    return failures ? 1 : 0;
}
