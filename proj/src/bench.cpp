#include "chat/bench.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <ostream>
#include <random>

#include "chat/data.hpp"
#include "chat/errors.hpp"
#include "chat/metrics.hpp"
#include "chat/train.hpp"

namespace chat {

namespace {

using Clock = std::chrono::steady_clock;

std::vector<DataRecord> random_records(const ModelConfig& config, const BenchOptions& options, std::size_t count,
                                       std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<Token> tok(0, static_cast<Token>(config.predictor.vocab_size) - 1);
    std::vector<DataRecord> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i].id = "bench" + std::to_string(i);
        out[i].features = Tensor({options.frames * config.encoder.stack_factor, config.encoder.input_dim});
        for (double& v : out[i].features.data()) v = normal(rng);
        for (std::size_t u = 0; u < options.tokens; ++u) out[i].target.push_back(tok(rng));
    }
    return out;
}

} // namespace

std::vector<BenchRow> run_bench(const ModelConfig& base, const BenchOptions& options) {
    if (options.chunk_sizes.empty()) throw ConfigError("bench needs at least one chunk size");
    if (options.frames == 0 || options.batch == 0 || options.train_steps == 0 || options.decode_utts == 0) {
        throw ConfigError("bench frames, batch, train_steps and decode_utts must be positive");
    }
    options.decode.validate();

    const auto train_data = random_records(base, options, options.batch, options.seed);
    const auto decode_data = random_records(base, options, options.decode_utts, options.seed + 1);
    std::vector<const DataRecord*> batch;
    for (const auto& r : train_data) batch.push_back(&r);

    std::vector<BenchRow> rows;
    for (std::size_t chunk : options.chunk_sizes) {
        for (Variant variant : {Variant::kRnnt, Variant::kChat}) {
            ModelConfig config = base;
            config.variant = variant;
            config.chunk.chunk_size = chunk;
            Model model = make_model(config, options.seed);

            BenchRow row;
            row.chunk_size = chunk;
            row.variant = variant;
            const std::size_t steps =
                variant == Variant::kChat ? config.chunk.num_chunks(options.frames) : options.frames;
            row.joiner_calls = steps + options.tokens;
            const LatticeMemory elems =
                lattice_memory(options.batch, options.frames, options.tokens, config.joiner.vocab_size, chunk, 1);
            row.lattice_elems = variant == Variant::kChat ? elems.chat_bytes : elems.rnnt_bytes;

            train_step(model, batch, options.lr); // warm-up
            double train_ms = 0.0;
            for (std::size_t s = 0; s < options.train_steps; ++s) {
                const TrainLogRow log = train_step(model, batch, options.lr);
                train_ms += log.wall_ms;
                row.step_peak_bytes.push_back(log.peak_bytes);
                row.peak_bytes = std::max(row.peak_bytes, log.peak_bytes);
            }
            row.train_ms_per_step = train_ms / static_cast<double>(options.train_steps);

            // Greedy search only; the encoder is shared by both variants.
            std::vector<Tensor> encs;
            for (const auto& r : decode_data) encs.push_back(encode(model, r.features));
            greedy_decode(model, encs.front(), options.decode); // warm-up
            const auto start = Clock::now();
            for (const auto& e : encs) greedy_decode(model, e, options.decode);
            row.decode_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count() /
                            static_cast<double>(decode_data.size());
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows) {
    out << "chunk_size,variant,train_ms_per_step,decode_ms,joiner_calls,lattice_elems\n";
    out << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
        out << r.chunk_size << ',' << to_string(r.variant) << ',' << r.train_ms_per_step << ',' << r.decode_ms
            << ',' << r.joiner_calls << ',' << r.lattice_elems << '\n';
    }
    out << std::defaultfloat;
}

void write_memory_csv(std::ostream& out, std::span<const BenchRow> rows) {
    out << "chunk_size,variant,step,peak_bytes\n";
    for (const auto& r : rows) {
        for (std::size_t s = 0; s < r.step_peak_bytes.size(); ++s) {
            out << r.chunk_size << ',' << to_string(r.variant) << ',' << s + 1 << ',' << r.step_peak_bytes[s]
                << '\n';
        }
    }
}

void write_memory_svg(std::ostream& out, std::span<const BenchRow> rows) {
    constexpr double kWidth = 640, kHeight = 400, kLeft = 80, kRight = 160, kTop = 30, kBottom = 50;
    static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                              "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

    std::size_t max_steps = 1;
    double max_mb = 0.0;
    for (const auto& r : rows) {
        max_steps = std::max(max_steps, r.step_peak_bytes.size());
        for (auto b : r.step_peak_bytes) max_mb = std::max(max_mb, static_cast<double>(b) / 1048576.0);
    }
    if (max_mb <= 0.0) max_mb = 1.0;
    const double plot_w = kWidth - kLeft - kRight;
    const double plot_h = kHeight - kTop - kBottom;
    auto x_of = [&](std::size_t step) {
        return kLeft + (max_steps == 1 ? plot_w / 2 : plot_w * static_cast<double>(step) /
                                                        static_cast<double>(max_steps - 1));
    };
    auto y_of = [&](double mb) { return kTop + plot_h * (1.0 - mb / (max_mb * 1.1)); };

    out << std::fixed << std::setprecision(2);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << kLeft << "\" y=\"18\">peak tensor memory per training step</text>\n";
    out << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + plot_h << "\" x2=\"" << kLeft + plot_w << "\" y2=\""
        << kTop + plot_h << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + plot_h
        << "\" stroke=\"black\"/>\n";
    for (int tick = 0; tick <= 4; ++tick) {
        const double mb = max_mb * 1.1 * tick / 4.0;
        out << "<text x=\"" << kLeft - 8 << "\" y=\"" << y_of(mb) + 4 << "\" text-anchor=\"end\">" << mb
            << "</text>\n";
    }
    out << "<text x=\"20\" y=\"" << kTop + plot_h / 2 << "\" transform=\"rotate(-90 20 " << kTop + plot_h / 2
        << ")\" text-anchor=\"middle\">MiB</text>\n";
    out << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 12
        << "\" text-anchor=\"middle\">training step</text>\n";
    for (std::size_t s = 0; s < max_steps; ++s) {
        out << "<text x=\"" << x_of(s) << "\" y=\"" << kTop + plot_h + 18 << "\" text-anchor=\"middle\">" << s + 1
            << "</text>\n";
    }

    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        const char* color = kColors[i % std::size(kColors)];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\""
            << (r.variant == Variant::kRnnt ? " stroke-dasharray=\"6 3\"" : "") << " points=\"";
        for (std::size_t s = 0; s < r.step_peak_bytes.size(); ++s) {
            out << (s ? " " : "") << x_of(s) << ',' << y_of(static_cast<double>(r.step_peak_bytes[s]) / 1048576.0);
        }
        out << "\"/>\n";
        const double ly = kTop + 14.0 * static_cast<double>(i) + 10;
        out << "<line x1=\"" << kWidth - kRight + 10 << "\" y1=\"" << ly << "\" x2=\"" << kWidth - kRight + 30
            << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        out << "<text x=\"" << kWidth - kRight + 36 << "\" y=\"" << ly + 4 << "\">" << to_string(r.variant)
            << " C=" << r.chunk_size << "</text>\n";
    }
    out << "</svg>\n" << std::defaultfloat;
}

} // namespace chat
