#include "chat/config.hpp"

#include <string>

#include "chat/errors.hpp"

namespace chat {

std::string_view to_string(Variant v) { return v == Variant::kRnnt ? "rnnt" : "chat"; }

Variant parse_variant(std::string_view text) {
    if (text == "rnnt") return Variant::kRnnt;
    if (text == "chat") return Variant::kChat;
    throw ConfigError("unknown variant '" + std::string(text) + "' (expected rnnt or chat)");
}

void EncoderConfig::validate() const {
    if (input_dim == 0) throw ConfigError("encoder input_dim must be >= 1");
    if (model_dim == 0) throw ConfigError("encoder model_dim must be >= 1");
    if (stack_factor < 1) throw ConfigError("stack_factor must be >= 1");
    if (conv_kernel < 1) throw ConfigError("conv_kernel must be >= 1");
    if (num_sa_layers > 0 && (num_heads == 0 || model_dim % num_heads != 0)) {
        throw ConfigError("encoder model_dim " + std::to_string(model_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
    }
}

void PredictorConfig::validate() const {
    if (vocab_size == 0) throw ConfigError("vocab_size must be >= 1");
    if (embed_dim == 0) throw ConfigError("predictor embed_dim must be >= 1");
    if (context_size < 1) throw ConfigError("context_size must be >= 1");
}

void JoinerConfig::validate(Variant variant) const {
    if (d_enc == 0 || d_pred == 0 || d_joint == 0) throw ConfigError("joiner dims must be >= 1");
    if (vocab_size == 0) throw ConfigError("vocab_size must be >= 1");
    if (variant == Variant::kChat) {
        if (num_heads == 0 || d_joint % num_heads != 0) {
            throw ConfigError("d_joint " + std::to_string(d_joint) +
                              " not divisible by num_heads " + std::to_string(num_heads));
        }
        if (d_pred != d_joint) {
            throw ConfigError("chat joiner adds the predictor state to the attention output: d_pred (" +
                              std::to_string(d_pred) + ") must equal d_joint (" +
                              std::to_string(d_joint) + ")");
        }
    }
}

void ModelConfig::validate() const {
    chunk.validate();
    encoder.validate();
    predictor.validate();
    joiner.validate(variant);
    if (joiner.d_enc != encoder.model_dim) {
        throw ConfigError("joiner d_enc must equal encoder model_dim");
    }
    if (joiner.d_pred != predictor.embed_dim) {
        throw ConfigError("joiner d_pred must equal predictor embed_dim");
    }
    if (joiner.vocab_size != predictor.vocab_size) {
        throw ConfigError("joiner and predictor vocab_size differ");
    }
}

} // namespace chat
