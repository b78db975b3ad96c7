#include "chat/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "chat/errors.hpp"

namespace chat {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
    throw ConfigError("config key '" + std::string(key) + "': '" + std::string(value) + "' is not " +
                      std::string(expected));
}

std::uint64_t parse_unsigned(std::string_view key, std::string_view value) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size() || value.empty()) {
        bad_value(key, value, "a non-negative integer");
    }
    return out;
}

double parse_double(std::string_view key, std::string_view value) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size() || value.empty()) {
        bad_value(key, value, "a number");
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

struct Field {
    std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field size_field(T RunConfig::*member) {
    return {[member](RunConfig& c, std::string_view k, std::string_view v) {
                c.*member = static_cast<T>(parse_unsigned(k, v));
            },
            [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(double RunConfig::*member) {
    return {[member](RunConfig& c, std::string_view k, std::string_view v) { c.*member = parse_double(k, v); },
            [member](const RunConfig& c) { return format_double(c.*member); }};
}

Field string_field(std::string RunConfig::*member) {
    return {[member](RunConfig& c, std::string_view k, std::string_view v) {
                if (v.empty()) bad_value(k, v, "a non-empty path");
                c.*member = std::string(v);
            },
            [member](const RunConfig& c) { return c.*member; }};
}

const std::vector<std::pair<std::string_view, Field>>& fields() {
    static const std::vector<std::pair<std::string_view, Field>> table = {
        {"variant",
         {[](RunConfig& c, std::string_view k, std::string_view v) {
              try {
                  c.variant = parse_variant(v);
              } catch (const ConfigError&) {
                  bad_value(k, v, "one of rnnt|chat");
              }
          },
          [](const RunConfig& c) { return std::string(to_string(c.variant)); }}},
        {"chunk_size", size_field(&RunConfig::chunk_size)},
        {"left_context", size_field(&RunConfig::left_context)},
        {"num_heads", size_field(&RunConfig::num_heads)},
        {"enc_heads", size_field(&RunConfig::enc_heads)},
        {"d_enc", size_field(&RunConfig::d_enc)},
        {"d_pred", size_field(&RunConfig::d_pred)},
        {"d_joint", size_field(&RunConfig::d_joint)},
        {"vocab_size", size_field(&RunConfig::vocab_size)},
        {"stack_factor", size_field(&RunConfig::stack_factor)},
        {"input_dim", size_field(&RunConfig::input_dim)},
        {"num_sa_layers", size_field(&RunConfig::num_sa_layers)},
        {"context_size", size_field(&RunConfig::context_size)},
        {"conv_kernel", size_field(&RunConfig::conv_kernel)},
        {"frame_ms", double_field(&RunConfig::frame_ms)},
        {"lr", double_field(&RunConfig::lr)},
        {"steps", size_field(&RunConfig::steps)},
        {"batch", size_field(&RunConfig::batch)},
        {"eval_every", size_field(&RunConfig::eval_every)},
        {"seed", size_field(&RunConfig::seed)},
        {"max_symbols_per_step", size_field(&RunConfig::max_symbols_per_step)},
        {"data", string_field(&RunConfig::data)},
        {"output", string_field(&RunConfig::output)},
        {"n_utts", size_field(&RunConfig::n_utts)},
        {"repeat", size_field(&RunConfig::repeat)},
        {"noise", double_field(&RunConfig::noise)},
        {"min_tokens", size_field(&RunConfig::min_tokens)},
        {"max_tokens", size_field(&RunConfig::max_tokens)},
    };
    return table;
}

const Field& field(std::string_view key) {
    for (const auto& [name, f] : fields())
        if (name == key) return f;
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

} // namespace

const std::vector<std::string_view>& RunConfig::keys() {
    static const std::vector<std::string_view> names = [] {
        std::vector<std::string_view> out;
        for (const auto& [name, f] : fields()) out.push_back(name);
        return out;
    }();
    return names;
}

void RunConfig::set(std::string_view key, std::string_view value) { field(key).set(*this, key, trim(value)); }

std::string RunConfig::get(std::string_view key) const { return field(key).get(*this); }

void RunConfig::validate() const {
    model_config().validate();
    decode_config().validate();
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch == 0) throw ConfigError("batch must be >= 1");
    if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
    if (repeat == 0) throw ConfigError("repeat must be >= 1");
    if (!(noise >= 0.0)) throw ConfigError("noise must be >= 0");
    if (min_tokens == 0 || min_tokens > max_tokens) {
        throw ConfigError("need 1 <= min_tokens <= max_tokens");
    }
    if (max_tokens > vocab_size) {
        throw ConfigError("max_tokens (" + std::to_string(max_tokens) +
                          ") exceeds vocab_size: utterance tokens are drawn without repetition");
    }
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.variant = variant;
    m.chunk.chunk_size = chunk_size;
    m.chunk.left_context = left_context;
    m.chunk.frame_duration_ms = frame_ms;
    m.encoder.input_dim = input_dim;
    m.encoder.model_dim = d_enc;
    m.encoder.num_sa_layers = num_sa_layers;
    m.encoder.num_heads = enc_heads;
    m.encoder.stack_factor = stack_factor;
    m.encoder.conv_kernel = conv_kernel;
    m.predictor.vocab_size = vocab_size;
    m.predictor.embed_dim = d_pred;
    m.predictor.context_size = context_size;
    m.joiner.d_enc = d_enc;
    m.joiner.d_pred = d_pred;
    m.joiner.d_joint = d_joint;
    m.joiner.num_heads = num_heads;
    m.joiner.vocab_size = vocab_size;
    return m;
}

DecodeConfig RunConfig::decode_config() const {
    DecodeConfig d;
    d.max_symbols_per_step = max_symbols_per_step;
    return d;
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& [name, f] : fields()) {
        out += std::string(name) + "=" + f.get(*this) + "\n";
    }
    return out;
}

void apply_config_text(RunConfig& config, std::string_view text) {
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
        }
        config.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
}

std::string read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

RunConfig parse_run_config(std::string_view text) {
    RunConfig config;
    apply_config_text(config, text);
    config.validate();
    return config;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_config_file(path)); }

} // namespace chat
