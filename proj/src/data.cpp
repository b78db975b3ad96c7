#include "chat/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "chat/errors.hpp"

namespace chat {

namespace {

std::string format_g17(double v) {
    char buf[40];
    const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf, static_cast<std::size_t>(n));
}

[[noreturn]] void malformed(std::size_t line_no, const std::string& what) {
    throw DataError("data line " + std::to_string(line_no) + ": " + what);
}

template <class T>
T parse_number(std::string_view text, std::size_t line_no) {
    T out{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        malformed(line_no, "cannot parse '" + std::string(text) + "'");
    }
    return out;
}

std::vector<std::string> words(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

} // namespace

void write_records(std::ostream& out, std::span<const DataRecord> records) {
    for (const auto& r : records) {
        out << r.id << ' ' << r.features.rows() << ' ' << r.features.cols() << " |";
        for (double v : r.features.data()) out << ' ' << format_g17(v);
        out << " |";
        for (Token t : r.target) out << ' ' << t;
        out << '\n';
    }
}

std::vector<DataRecord> read_records(std::istream& in) {
    std::vector<DataRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto bar1 = line.find('|');
        const auto bar2 = bar1 == std::string::npos ? bar1 : line.find('|', bar1 + 1);
        if (bar2 == std::string::npos) malformed(line_no, "expected 'id T dim | features | tokens'");

        const auto head = words(line.substr(0, bar1));
        if (head.size() != 3) malformed(line_no, "header needs id, T_in and input_dim");
        const auto rows = parse_number<std::size_t>(head[1], line_no);
        const auto cols = parse_number<std::size_t>(head[2], line_no);

        const auto feats = words(line.substr(bar1 + 1, bar2 - bar1 - 1));
        if (feats.size() != rows * cols) {
            malformed(line_no, "expected " + std::to_string(rows * cols) + " feature values, got " +
                                   std::to_string(feats.size()));
        }
        DataRecord r;
        r.id = head[0];
        r.features = Tensor({rows, cols});
        for (std::size_t i = 0; i < feats.size(); ++i) r.features[i] = parse_number<double>(feats[i], line_no);
        for (const auto& t : words(line.substr(bar2 + 1))) r.target.push_back(parse_number<Token>(t, line_no));
        records.push_back(std::move(r));
    }
    return records;
}

void save_records(const std::filesystem::path& path, std::span<const DataRecord> records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write data file " + path.string());
    write_records(out, records);
    if (!out) throw DataError("failed writing data file " + path.string());
}

std::vector<DataRecord> load_records(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read data file " + path.string());
    return read_records(in);
}

void check_records(std::span<const DataRecord> records, const ModelConfig& config) {
    const auto& enc = config.encoder;
    for (const auto& r : records) {
        if (r.features.rank() != 2 || r.features.cols() != enc.input_dim) {
            throw DataError("record " + r.id + ": features " + shape_to_string(r.features.shape()) +
                            " do not have input_dim " + std::to_string(enc.input_dim));
        }
        if (r.features.rows() < enc.stack_factor) {
            throw DataError("record " + r.id + ": " + std::to_string(r.features.rows()) +
                            " frames is fewer than the stack factor " + std::to_string(enc.stack_factor));
        }
        for (Token t : r.target) {
            if (t < 0 || static_cast<std::size_t>(t) >= config.predictor.vocab_size) {
                throw DataError("record " + r.id + ": token " + std::to_string(t) + " outside vocabulary of " +
                                std::to_string(config.predictor.vocab_size));
            }
        }
    }
}

void SyntheticSpec::validate() const {
    if (repeat < 1) throw ConfigError("repeat must be >= 1");
    if (vocab_size < 1 || input_dim < 1) throw ConfigError("vocab_size and input_dim must be positive");
    if (min_tokens < 1 || min_tokens > max_tokens) throw ConfigError("need 1 <= min_tokens <= max_tokens");
    if (max_tokens > vocab_size) throw ConfigError("max_tokens exceeds vocab_size");
    if (!(noise >= 0.0)) throw ConfigError("noise must be >= 0");
}

namespace {

Tensor draw_table(const SyntheticSpec& spec, std::mt19937_64& rng, std::normal_distribution<double>& normal) {
    Tensor table({spec.vocab_size, spec.input_dim});
    for (double& v : table.data()) v = normal(rng);
    return table;
}

} // namespace

Tensor synthetic_embeddings(const SyntheticSpec& spec) {
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    return draw_table(spec, rng, normal);
}

std::vector<DataRecord> gen_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Tensor table = draw_table(spec, rng, normal);

    std::vector<Token> ids(spec.vocab_size);
    std::vector<DataRecord> records;
    records.reserve(spec.n_utts);
    for (std::size_t n = 0; n < spec.n_utts; ++n) {
        std::uniform_int_distribution<std::size_t> len_dist(spec.min_tokens, spec.max_tokens);
        const std::size_t len = len_dist(rng);
        // Partial Fisher-Yates: the first `len` entries are a uniform draw
        // without replacement.
        std::iota(ids.begin(), ids.end(), Token{0});
        for (std::size_t i = 0; i < len; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
            std::swap(ids[i], ids[pick(rng)]);
        }

        DataRecord r;
        char name[32];
        std::snprintf(name, sizeof name, "utt%05zu", n);
        r.id = name;
        r.target.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(len));
        r.features = Tensor({len * spec.repeat, spec.input_dim});
        for (std::size_t i = 0; i < len; ++i) {
            const auto emb = table.row(static_cast<std::size_t>(r.target[i]));
            for (std::size_t k = 0; k < spec.repeat; ++k) {
                auto row = r.features.row(i * spec.repeat + k);
                for (std::size_t c = 0; c < spec.input_dim; ++c) {
                    row[c] = emb[c];
                    if (spec.noise > 0.0) row[c] += spec.noise * normal(rng);
                }
            }
        }
        records.push_back(std::move(r));
    }
    return records;
}

} // namespace chat
