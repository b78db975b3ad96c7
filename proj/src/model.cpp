#include "chat/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <memory>
#include <random>
#include <sstream>

#include "chat/chunking.hpp"
#include "chat/errors.hpp"

namespace chat {

// ---------------------------------------------------------------------------
// ModelParams

Tensor& ModelParams::add(std::string name, Tensor value) {
    if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.back().value;
}

Tensor& ModelParams::at(std::string_view name) {
    for (auto& e : entries_)
        if (e.name == name) return e.value;
    throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

const Tensor& ModelParams::at(std::string_view name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.value;
    throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

bool ModelParams::contains(std::string_view name) const {
    for (const auto& e : entries_)
        if (e.name == name) return true;
    return false;
}

void ModelParams::zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
}

void ModelParams::drop_grads() {
    for (auto& e : entries_) e.value.drop_grad();
}

bool ModelParams::bitwise_equal(const ModelParams& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name != other.entries_[i].name) return false;
        if (!entries_[i].value.bitwise_equal(other.entries_[i].value)) return false;
    }
    return true;
}

namespace param {
std::string enc_conv(std::size_t tap) { return "enc.conv" + std::to_string(tap); }
std::string enc_attn(std::size_t layer, char which) {
    return "enc.sa" + std::to_string(layer) + ".w" + which;
}
} // namespace param

// ---------------------------------------------------------------------------
// Initialisation

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    ModelParams params;
    auto add = [&](std::string name, std::size_t out, std::size_t in) {
        Tensor t({out, in});
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& v : t.data()) v = dist(rng);
        params.add(std::move(name), std::move(t));
    };

    const auto& enc = config.encoder;
    const auto& join = config.joiner;
    const std::size_t d = enc.model_dim;
    add(std::string(param::kEncInput), d, enc.stack_factor * enc.input_dim);
    if (enc.conv_kernel > 1) {
        for (std::size_t k = 0; k < enc.conv_kernel; ++k) add(param::enc_conv(k), d, d);
    }
    for (std::size_t l = 0; l < enc.num_sa_layers; ++l) {
        for (char w : {'q', 'k', 'v', 'o'}) add(param::enc_attn(l, w), d, d);
    }
    add(std::string(param::kPredEmbed), config.predictor.vocab_size + 1, config.predictor.embed_dim);
    if (config.variant == Variant::kRnnt) {
        add(std::string(param::kJoinEnc), join.d_joint, join.d_enc);
        add(std::string(param::kJoinPred), join.d_joint, join.d_pred);
    } else {
        add(std::string(param::kJoinQuery), join.d_joint, join.d_pred);
        add(std::string(param::kJoinKey), join.d_joint, join.d_enc);
        add(std::string(param::kJoinValue), join.d_joint, join.d_enc);
    }
    add(std::string(param::kJoinOut), join.num_outputs(), join.d_joint);
    return params;
}

Model make_model(const ModelConfig& config, std::uint64_t seed) {
    return Model{config, init_params(config, seed)};
}

// ---------------------------------------------------------------------------
// ParamVars

ParamVars::ParamVars(Graph& g, ModelParams& params) : graph_(&g) {
    vars_.reserve(params.size());
    for (auto& e : params.entries()) vars_.emplace_back(e.name, g.parameter(e.value));
}

ParamVars::ParamVars(Graph& g, const ModelParams& params) : graph_(&g) {
    vars_.reserve(params.size());
    for (const auto& e : params.entries()) vars_.emplace_back(e.name, g.constant_ref(e.value));
}

Var ParamVars::operator[](std::string_view name) const {
    for (const auto& [n, v] : vars_)
        if (n == name) return v;
    throw ConfigError("parameter '" + std::string(name) + "' is not part of this model");
}

// ---------------------------------------------------------------------------
// Encoder

namespace {

Var self_attention(Var h, const ParamVars& params, std::size_t layer, std::size_t heads,
                   const std::shared_ptr<const std::vector<std::uint8_t>>& mask) {
    const Var q = linear(h, params[param::enc_attn(layer, 'q')]);
    const Var k = linear(h, params[param::enc_attn(layer, 'k')]);
    const Var v = linear(h, params[param::enc_attn(layer, 'v')]);
    const Var context = attention_context(attention_weights(q, k, heads, mask), v);
    return linear(context, params[param::enc_attn(layer, 'o')]);
}

// Conv and self-attention layers over frames [offset, offset + rows) of
// one left-context window.
Var encode_window(Var h, std::size_t offset, const ParamVars& params, const ModelConfig& config) {
    const auto& cfg = config.encoder;
    const ChunkSpec& spec = config.chunk;
    const std::size_t rows = h.value().rows();
    if (cfg.conv_kernel > 1) {
        Var acc = linear(h, params[param::enc_conv(0)]);
        for (std::size_t k = 1; k < cfg.conv_kernel; ++k) {
            std::vector<std::ptrdiff_t> src(rows, -1);
            for (std::size_t t = k; t < rows; ++t) {
                if (spec.visible(spec.chunk_of(offset + t), spec.chunk_of(offset + t - k))) {
                    src[t] = static_cast<std::ptrdiff_t>(t - k);
                }
            }
            acc = add(acc, linear(gather_rows(h, std::move(src)), params[param::enc_conv(k)]));
        }
        h = add(h, relu(acc));
    }
    if (cfg.num_sa_layers > 0) {
        auto mask = std::make_shared<FrameMask>(rows * rows);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < rows; ++j) {
                (*mask)[i * rows + j] = spec.visible(spec.chunk_of(offset + i), spec.chunk_of(offset + j));
            }
        }
        const std::shared_ptr<const FrameMask> shared = std::move(mask);
        for (std::size_t l = 0; l < cfg.num_sa_layers; ++l) {
            h = add(h, self_attention(h, params, l, cfg.num_heads, shared));
        }
    }
    return h;
}

} // namespace

Var encode(Var x, const ParamVars& params, const ModelConfig& config) {
    const auto& cfg = config.encoder;
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || xv.cols() != cfg.input_dim) {
        throw DimensionError("encode expects [T_in x " + std::to_string(cfg.input_dim) + "], got " +
                             shape_to_string(xv.shape()));
    }
    const std::size_t frames = xv.rows() / cfg.stack_factor;
    if (frames == 0) {
        throw EmptyInputError("encoder input of " + std::to_string(xv.rows()) +
                              " frames is shorter than stack_factor " +
                              std::to_string(cfg.stack_factor));
    }

    Var stacked = x;
    if (cfg.stack_factor > 1 || frames != xv.rows()) {
        stacked = reshape(slice(x, 0, 0, frames * cfg.stack_factor),
                          {frames, cfg.stack_factor * cfg.input_dim});
    }
    const Var h = relu(linear(stacked, params[param::kEncInput]));

    // Chunk c is computed from the frames of chunks [c - L, c] only, so no
    // stack of conv and attention layers can reach further back than L chunks.
    const ChunkSpec& spec = config.chunk;
    const std::size_t chunks = spec.num_chunks(frames);
    std::vector<Var> outputs;
    outputs.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t first_chunk = c > spec.left_context ? c - spec.left_context : 0;
        const std::size_t begin = first_chunk * spec.chunk_size;
        const std::size_t end = std::min(frames, (c + 1) * spec.chunk_size);
        const Var window = encode_window(slice(h, 0, begin, end), begin, params, config);
        outputs.push_back(slice(window, 0, c * spec.chunk_size - begin, end - begin));
    }
    return chunks == 1 ? outputs.front() : concat(outputs, 0);
}

Tensor encode(const Model& model, const Tensor& x) {
    Graph g(GradMode::kInference);
    const ParamVars params(g, model.params);
    return encode(g.constant_ref(x), params, model.config).value();
}

// ---------------------------------------------------------------------------
// Predictor

std::vector<std::size_t> predictor_bag(const PredictorConfig& config, std::span<const Token> history) {
    if (history.empty()) return {config.vocab_size};
    const std::size_t k = std::min(config.context_size, history.size());
    std::vector<std::size_t> bag;
    bag.reserve(k);
    for (std::size_t i = history.size() - k; i < history.size(); ++i) {
        const Token t = history[i];
        if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
            throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(config.vocab_size));
        }
        bag.push_back(static_cast<std::size_t>(t));
    }
    return bag;
}

Var predictor_states(const ParamVars& params, const PredictorConfig& config,
                     std::span<const Token> target) {
    for (Token t : target) {
        if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
            throw VocabularyError("target id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(config.vocab_size));
        }
    }
    std::vector<std::vector<std::size_t>> bags;
    bags.reserve(target.size() + 1);
    for (std::size_t u = 0; u <= target.size(); ++u) bags.push_back(predictor_bag(config, target.first(u)));
    return embedding_bag_mean(params[param::kPredEmbed], std::move(bags));
}

Var predict(const ParamVars& params, const PredictorConfig& config, std::span<const Token> history) {
    return embedding_bag_mean(params[param::kPredEmbed], {predictor_bag(config, history)});
}

Tensor predict(const Model& model, std::span<const Token> history) {
    Graph g(GradMode::kInference);
    const ParamVars params(g, model.params);
    const Tensor& row = predict(params, model.config.predictor, history).value();
    return Tensor({row.cols()}, row.data());
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'C', 'H', 'A', 'T', 'C', 'K', 'P', 'T'};

template <class T>
void put_le(std::string& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<char>(static_cast<std::uint64_t>(value) >> (8 * i) & 0xff));
    }
}

class Reader {
  public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <class T>
    T get_le(const char* what) {
        need(sizeof(T), what);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }

    std::string_view take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

  private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw TruncatedCheckpointError(std::string("checkpoint truncated while reading ") + what +
                                           " at byte " + std::to_string(pos_));
        }
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::string serialize_checkpoint(const ModelParams& params) {
    std::string out(kMagic, sizeof kMagic);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& e : params.entries()) {
        if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw CheckpointError("parameter name too long: " + e.name.substr(0, 32) + "...");
        }
        if (e.value.rank() > std::numeric_limits<std::uint8_t>::max()) {
            throw CheckpointError("parameter rank too large: " + e.name);
        }
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
        out += e.name;
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.value.rank()));
        for (std::size_t dim : e.value.shape()) {
            if (dim > std::numeric_limits<std::uint32_t>::max()) {
                throw CheckpointError("dimension too large in " + e.name);
            }
            put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
        }
        for (double v : e.value.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

ModelParams parse_checkpoint(std::string_view bytes) {
    Reader in(bytes);
    if (bytes.size() < sizeof kMagic) {
        if (bytes != std::string_view(kMagic, bytes.size())) throw BadMagicError("not a CHATCKPT file");
        throw TruncatedCheckpointError("checkpoint truncated inside the magic");
    }
    if (in.take(sizeof kMagic, "magic") != std::string_view(kMagic, sizeof kMagic)) {
        throw BadMagicError("not a CHATCKPT file");
    }
    const auto version = in.get_le<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw UnsupportedVersionError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = in.get_le<std::uint32_t>("entry count");
    ModelParams params;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = in.get_le<std::uint16_t>("name length");
        std::string name(in.take(name_len, "name"));
        const auto ndim = in.get_le<std::uint8_t>("rank");
        Shape shape(ndim);
        for (auto& d : shape) d = in.get_le<std::uint32_t>("dimension");
        const std::size_t numel = shape_numel(shape);
        if (numel > bytes.size() / sizeof(double)) {
            throw TruncatedCheckpointError("checkpoint truncated in values of " + name);
        }
        Tensor t(shape);
        for (double& v : t.data()) v = std::bit_cast<double>(in.get_le<std::uint64_t>("values"));
        if (params.contains(name)) throw CheckpointError("duplicate entry '" + name + "' in checkpoint");
        params.add(std::move(name), std::move(t));
    }
    if (!in.done()) throw CheckpointError("trailing bytes after the last checkpoint entry");
    return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(params);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write to " + path.string() + " failed");
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

} // namespace chat
