// Command-line driver: synthetic data, training, decoding, alignment export,
// benchmarks and gradient checks. Every subcommand reads one config file and
// accepts --<key> overrides for any config key.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chat/bench.hpp"
#include "chat/data.hpp"
#include "chat/errors.hpp"
#include "chat/metrics.hpp"
#include "chat/run_config.hpp"
#include "chat/train.hpp"

namespace fs = std::filesystem;
using namespace chat;

namespace {

// Exit codes by error category.
enum Exit : int {
    kOk = 0,
    kUnexpected = 1,
    kConfig = 2,
    kData = 3,
    kCheckpoint = 4,
    kNumeric = 5,
    kCheckFailed = 6,
    kOther = 7,
};

struct Common {
    std::string config_path;
    std::map<std::string, std::string> overrides;
};

void add_common(CLI::App* cmd, Common& common) {
    cmd->add_option("-c,--config", common.config_path, "key=value config file");
    for (std::string_view key : RunConfig::keys()) {
        const std::string name(key);
        cmd->add_option_function<std::string>(
            "--" + name, [&common, name](const std::string& v) { common.overrides[name] = v; },
            "override config key " + name);
    }
}

RunConfig resolve(const Common& common) {
    RunConfig config;
    if (!common.config_path.empty()) apply_config_text(config, read_config_file(common.config_path));
    for (const auto& [key, value] : common.overrides) config.set(key, value);
    config.validate();
    return config;
}

fs::path output_dir(const RunConfig& config) {
    fs::path dir(config.output);
    fs::create_directories(dir);
    return dir;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

fs::path default_checkpoint(const RunConfig& config) { return fs::path(config.output) / "model.ckpt"; }

// Loads a checkpoint and checks it against the parameter layout of `config`.
Model load_model(const RunConfig& config, const fs::path& path) {
    const ModelConfig mc = config.model_config();
    const ModelParams expected = init_params(mc, 0);
    ModelParams loaded = load_checkpoint(path);
    if (loaded.size() != expected.size()) {
        throw CheckpointError(path.string() + " has " + std::to_string(loaded.size()) + " tensors, config expects " +
                              std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& want = expected.entries()[i];
        if (!loaded.contains(want.name) || loaded.at(want.name).shape() != want.value.shape()) {
            throw CheckpointError(path.string() + ": tensor " + want.name + " missing or shaped differently than " +
                                  shape_to_string(want.value.shape()));
        }
    }
    return Model{mc, std::move(loaded)};
}

SyntheticSpec synthetic_spec(const RunConfig& c) {
    SyntheticSpec s;
    s.n_utts = c.n_utts;
    s.vocab_size = c.vocab_size;
    s.input_dim = c.input_dim;
    s.repeat = c.repeat;
    s.noise = c.noise;
    s.min_tokens = c.min_tokens;
    s.max_tokens = c.max_tokens;
    s.seed = c.seed;
    return s;
}

std::vector<DataRecord> load_data(const RunConfig& config) {
    auto records = load_records(config.data);
    if (records.empty()) throw DataError("data file " + config.data + " has no records");
    check_records(records, config.model_config());
    return records;
}

int cmd_gen_data(const RunConfig& config) {
    const auto records = gen_synthetic(synthetic_spec(config));
    if (const auto parent = fs::path(config.data).parent_path(); !parent.empty()) fs::create_directories(parent);
    save_records(config.data, records);
    std::printf("wrote %zu utterances to %s\n", records.size(), config.data.c_str());
    return kOk;
}

int cmd_train(const RunConfig& config) {
    const auto records = load_data(config);
    const fs::path dir = output_dir(config);
    Model model = make_model(config.model_config(), config.seed);

    TrainOptions opts;
    opts.lr = config.lr;
    opts.steps = config.steps;
    opts.batch = config.batch;
    opts.eval_every = config.eval_every;
    opts.seed = config.seed;
    opts.decode = config.decode_config();

    auto log = open_out(dir / "train_log.csv");
    write_train_log_header(log);
    auto evals = open_out(dir / "eval_log.csv");
    evals << "step,wer,loss\n";
    const TrainResult result = train(
        model, records, opts, [&](const TrainLogRow& row) { write_train_log_row(log, row); },
        [&](const EvalPoint& p) {
            evals << p.step << ',' << p.wer << ',' << p.loss << '\n';
            std::printf("step %zu  wer %.4f  loss %.6f\n", p.step, p.wer, p.loss);
            std::fflush(stdout);
        });
    save_checkpoint(result.best, default_checkpoint(config));
    auto cfg_out = open_out(dir / "run.cfg");
    cfg_out << config.to_text();
    std::printf("best: step %zu  wer %.4f  loss %.6f  -> %s\n", result.best_eval.step, result.best_eval.wer,
                result.best_eval.loss, default_checkpoint(config).c_str());
    return kOk;
}

int cmd_decode(const RunConfig& config, const std::string& ckpt) {
    const auto records = load_data(config);
    const Model model = load_model(config, ckpt.empty() ? default_checkpoint(config) : fs::path(ckpt));
    const fs::path dir = output_dir(config);
    const EvalResult ev = evaluate(model, records, config.decode_config());

    auto hyp = open_out(dir / "decode.txt");
    std::vector<LatencyRow> latency;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& path = ev.paths[i];
        hyp << records[i].id;
        for (Token t : path.tokens) hyp << ' ' << t;
        hyp << '\n';
        const LatencyReport rep = emission_timestamps(path, model.config.chunk, model.config.encoder.stack_factor);
        latency.push_back({records[i].id, path.tokens.size(), rep.mean_ms});
    }
    auto lat = open_out(dir / "latency.csv");
    write_latency_csv(lat, latency);
    std::printf("utterances %zu  wer %.6f  mean loss %.6f\n", records.size(), ev.wer, ev.mean_loss);
    return kOk;
}

int cmd_align(const RunConfig& config, const std::string& ckpt, bool raw_heat) {
    const auto records = load_data(config);
    const Model model = load_model(config, ckpt.empty() ? default_checkpoint(config) : fs::path(ckpt));
    const fs::path dir = output_dir(config);
    auto out = open_out(dir / "alignment.jsonl");
    for (const auto& r : records) {
        const DecodePath path = decode_features(model, r.features, config.decode_config());
        export_alignment(out, make_alignment_dump(r.id, path), raw_heat);
    }
    std::printf("wrote %zu alignment records to %s\n", records.size(), (dir / "alignment.jsonl").c_str());
    return kOk;
}

int cmd_bench(const RunConfig& config, const std::vector<std::size_t>& chunk_sizes, BenchOptions opts) {
    if (!chunk_sizes.empty()) opts.chunk_sizes = chunk_sizes;
    opts.seed = config.seed;
    opts.decode = config.decode_config();
    const fs::path dir = output_dir(config);
    const auto rows = run_bench(config.model_config(), opts);
    auto csv = open_out(dir / "bench.csv");
    write_bench_csv(csv, rows);
    auto mem = open_out(dir / "memory.csv");
    write_memory_csv(mem, rows);
    auto svg = open_out(dir / "memory.svg");
    write_memory_svg(svg, rows);
    write_bench_csv(std::cout, rows);
    for (const auto& r : rows) {
        std::printf("C=%zu %s peak_bytes=%zu\n", r.chunk_size, std::string(to_string(r.variant)).c_str(),
                    r.peak_bytes);
    }
    return kOk;
}

int cmd_gradcheck(const RunConfig& config, const std::optional<std::string>& corrupt) {
    const GradcheckProblem problem = make_gradcheck_problem(config.variant, config.seed);
    GradcheckOptions opts;
    opts.corrupt_param = corrupt;
    const GradcheckReport report = gradcheck(problem.model, problem.record, opts);
    std::cout << "variant " << to_string(config.variant) << '\n';
    write_gradcheck_report(std::cout, report);
    return report.passed ? kOk : kCheckFailed;
}

int report(const char* category, const std::exception& e, int code) {
    std::fprintf(stderr, "error [%s]: %s\n", category, e.what());
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Chunked attention transducer toolkit"};
    app.require_subcommand(1);

    Common common;
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic toy task");
    auto* trn = app.add_subcommand("train", "train with SGD and save the best checkpoint");
    auto* dec = app.add_subcommand("decode", "greedy decode, WER and latency report");
    auto* aln = app.add_subcommand("align", "export alignments as JSON lines");
    auto* bch = app.add_subcommand("bench", "chunk-size sweep of time, joiner calls and memory");
    auto* grc = app.add_subcommand("gradcheck", "finite-difference check of every parameter gradient");
    for (auto* cmd : {gen, trn, dec, aln, bch, grc}) add_common(cmd, common);

    std::string ckpt;
    dec->add_option("--checkpoint", ckpt, "checkpoint (default <output>/model.ckpt)");
    aln->add_option("--checkpoint", ckpt, "checkpoint (default <output>/model.ckpt)");
    bool raw_heat = false;
    aln->add_flag("--raw-heat", raw_heat, "also write head-summed heat before normalisation");

    std::vector<std::size_t> chunk_sizes;
    BenchOptions bench_opts;
    bch->add_option("--chunk-sizes", chunk_sizes, "chunk sizes to sweep")->delimiter(',');
    bch->add_option("--frames", bench_opts.frames, "encoder frames per utterance");
    bch->add_option("--tokens", bench_opts.tokens, "target length");
    bch->add_option("--bench-batch", bench_opts.batch, "training batch size");
    bch->add_option("--train-steps", bench_opts.train_steps, "measured training steps");
    bch->add_option("--decode-utts", bench_opts.decode_utts, "utterances decoded per row");

    std::optional<std::string> corrupt;
    grc->add_option("--corrupt", corrupt, "test hook: perturb the analytic gradient of this parameter");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        const RunConfig config = resolve(common);
        if (gen->parsed()) return cmd_gen_data(config);
        if (trn->parsed()) return cmd_train(config);
        if (dec->parsed()) return cmd_decode(config, ckpt);
        if (aln->parsed()) return cmd_align(config, ckpt, raw_heat);
        if (bch->parsed()) return cmd_bench(config, chunk_sizes, bench_opts);
        if (grc->parsed()) return cmd_gradcheck(config, corrupt);
    } catch (const ConfigError& e) {
        return report("config", e, kConfig);
    } catch (const DataError& e) {
        return report("data", e, kData);
    } catch (const CheckpointError& e) {
        return report("checkpoint", e, kCheckpoint);
    } catch (const NumericError& e) {
        return report("numeric", e, kNumeric);
    } catch (const Error& e) {
        return report("error", e, kOther);
    } catch (const std::exception& e) {
        return report("unexpected", e, kUnexpected);
    }
    return kUnexpected;
}
