#include "chat/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "chat/errors.hpp"

namespace chat {

namespace {

template <class T>
std::size_t levenshtein(std::span<const T> ref, std::span<const T> hyp) {
    std::vector<std::size_t> prev(hyp.size() + 1);
    std::vector<std::size_t> cur(hyp.size() + 1);
    for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= ref.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= hyp.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[hyp.size()];
}

template <class T>
double word_error_rate(std::span<const T> ref, std::span<const T> hyp) {
    if (ref.empty()) throw EmptyInputError("WER is undefined for an empty reference");
    return static_cast<double>(levenshtein(ref, hyp)) / static_cast<double>(ref.size());
}

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    return words;
}

} // namespace

std::size_t edit_distance(std::span<const std::string> ref, std::span<const std::string> hyp) {
    return levenshtein(ref, hyp);
}

std::size_t edit_distance(std::span<const Token> ref, std::span<const Token> hyp) {
    return levenshtein(ref, hyp);
}

double wer(std::span<const std::string> ref, std::span<const std::string> hyp) {
    return word_error_rate(ref, hyp);
}

double wer(std::span<const Token> ref, std::span<const Token> hyp) { return word_error_rate(ref, hyp); }

double wer(const std::string& ref, const std::string& hyp) {
    const auto r = split_words(ref);
    const auto h = split_words(hyp);
    return word_error_rate<std::string>(r, h);
}

double chunk_duration_ms(const ChunkSpec& spec, std::size_t subsample) {
    return static_cast<double>(spec.chunk_size * subsample) * spec.frame_duration_ms;
}

LatencyReport emission_timestamps(const DecodePath& path, const ChunkSpec& spec, std::size_t subsample) {
    spec.validate();
    if (subsample < 1) throw ConfigError("subsample factor must be >= 1");
    LatencyReport report;
    const double chunk_ms = chunk_duration_ms(spec, subsample);
    double total = 0.0;
    for (std::size_t step : path.emit_steps) {
        const std::size_t chunk = path.variant == Variant::kChat ? step : spec.chunk_of(step);
        const double ts = static_cast<double>(chunk + 1) * chunk_ms;
        report.timestamps_ms.push_back(ts);
        total += ts;
    }
    if (!report.timestamps_ms.empty()) {
        report.mean_ms = total / static_cast<double>(report.timestamps_ms.size());
    }
    return report;
}

LatticeMemory lattice_memory(std::uint64_t batch, std::uint64_t frames, std::uint64_t labels,
                             std::uint64_t vocab, std::uint64_t chunk, std::uint64_t bytes_per_element) {
    if (!batch || !frames || !labels || !vocab || !chunk || !bytes_per_element) {
        throw ConfigError("lattice_memory arguments must all be positive");
    }
    const std::uint64_t per_step = (labels + 1) * (vocab + 1) * bytes_per_element;
    const std::uint64_t chunks = (frames + chunk - 1) / chunk;
    LatticeMemory m;
    m.rnnt_bytes = batch * frames * per_step;
    m.chat_bytes = batch * chunks * per_step;
    m.ratio = static_cast<double>(m.chat_bytes) / static_cast<double>(m.rnnt_bytes);
    return m;
}

AlignmentDump make_alignment_dump(const std::string& utterance_id, const DecodePath& path) {
    AlignmentDump dump;
    dump.utterance_id = utterance_id;
    dump.variant = path.variant;
    dump.num_steps = path.num_steps;
    for (std::size_t i = 0; i < path.tokens.size(); ++i) {
        dump.chunk_path.push_back({path.tokens[i], path.emit_steps[i]});
    }
    for (const AttentionRecord& rec : path.attn) {
        const double heads = static_cast<double>(rec.num_heads());
        std::vector<double> norm(rec.summed.size());
        std::transform(rec.summed.begin(), rec.summed.end(), norm.begin(),
                       [heads](double v) { return v / heads; });
        dump.frame_heat.push_back(std::move(norm));
        dump.raw_heat.push_back(rec.summed);
    }
    return dump;
}

std::string alignment_line(const AlignmentDump& dump, bool include_raw_heat) {
    using nlohmann::ordered_json;
    ordered_json j;
    j["version"] = AlignmentDump::kFormatVersion;
    j["utterance"] = dump.utterance_id;
    j["variant"] = std::string(to_string(dump.variant));
    j["steps"] = dump.num_steps;
    ordered_json path = ordered_json::array();
    for (const auto& e : dump.chunk_path) path.push_back({e.token, e.step});
    j["chunk_path"] = std::move(path);
    if (dump.variant == Variant::kChat) {
        j["frame_heat"] = dump.frame_heat;
        if (include_raw_heat) j["raw_heat"] = dump.raw_heat;
    }
    return j.dump();
}

void export_alignment(std::ostream& out, const AlignmentDump& dump, bool include_raw_heat) {
    out << alignment_line(dump, include_raw_heat) << '\n';
}

AlignmentDump parse_alignment_line(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed alignment record: ") + e.what());
    }
    try {
        if (j.at("version").get<int>() != AlignmentDump::kFormatVersion) {
            throw DataError("unsupported alignment format version " + j.at("version").dump());
        }
        AlignmentDump dump;
        dump.utterance_id = j.at("utterance").get<std::string>();
        dump.variant = parse_variant(j.at("variant").get<std::string>());
        dump.num_steps = j.at("steps").get<std::size_t>();
        for (const auto& e : j.at("chunk_path")) {
            dump.chunk_path.push_back({e.at(0).get<Token>(), e.at(1).get<std::size_t>()});
        }
        if (j.contains("frame_heat")) dump.frame_heat = j["frame_heat"].get<std::vector<std::vector<double>>>();
        if (j.contains("raw_heat")) dump.raw_heat = j["raw_heat"].get<std::vector<std::vector<double>>>();
        return dump;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed alignment record: ") + e.what());
    }
}

void write_latency_csv(std::ostream& out, std::span<const LatencyRow> rows) {
    out << "utterance_id,n_tokens,mean_ts_ms\n";
    for (const auto& r : rows) {
        out << r.utterance_id << ',' << r.n_tokens << ',';
        if (r.mean_ts_ms) out << std::setprecision(17) << *r.mean_ts_ms << std::setprecision(6);
        out << '\n';
    }
}

} // namespace chat
