#include "moelab/config.hpp"

namespace moelab {

RoutingMode routing_mode_from_string(const std::string& s) {
    if (s == "causal_segment") return RoutingMode::CausalSegment;
    if (s == "prefix") return RoutingMode::Prefix;
    if (s == "prompt_only") return RoutingMode::PromptOnly;
    if (s == "ec_segment") return RoutingMode::ECSegment;
    if (s == "ec_token") return RoutingMode::ECToken;
    if (s == "dense") return RoutingMode::Dense;
    throw ConfigError("unknown routing_mode: " + s);
}

std::string to_string(RoutingMode m) {
    switch (m) {
        case RoutingMode::CausalSegment: return "causal_segment";
        case RoutingMode::Prefix: return "prefix";
        case RoutingMode::PromptOnly: return "prompt_only";
        case RoutingMode::ECSegment: return "ec_segment";
        case RoutingMode::ECToken: return "ec_token";
        case RoutingMode::Dense: return "dense";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (context_length == 0) throw ConfigError("context_length must be positive");
    if (segment_length == 0) throw ConfigError("segment_length must be positive");
    if (segment_length > context_length)
        throw ConfigError("segment_length must not exceed context_length");
    if (num_experts < 1) throw ConfigError("num_experts must be >= 1");
    if (num_layers == 0) throw ConfigError("num_layers must be positive");
    if (num_heads == 0) throw ConfigError("num_heads must be positive");
    if (model_dim % num_heads != 0)
        throw ConfigError("model_dim must be divisible by num_heads");
    if (ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (ec_capacity_factor <= 0.0) throw ConfigError("ec_capacity_factor must be positive");
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"context_length", context_length},
                          {"segment_length", segment_length},
                          {"num_experts", num_experts},
                          {"num_layers", num_layers},
                          {"model_dim", model_dim},
                          {"ffn_dim", ffn_dim},
                          {"num_heads", num_heads},
                          {"vocab_size", vocab_size},
                          {"routing_mode", to_string(routing_mode)},
                          {"ec_capacity_factor", ec_capacity_factor}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        if (j.contains("context_length")) c.context_length = j.at("context_length").get<std::size_t>();
        if (j.contains("segment_length")) c.segment_length = j.at("segment_length").get<std::size_t>();
        if (j.contains("num_experts")) c.num_experts = j.at("num_experts").get<std::size_t>();
        if (j.contains("num_layers")) c.num_layers = j.at("num_layers").get<std::size_t>();
        if (j.contains("model_dim")) c.model_dim = j.at("model_dim").get<std::size_t>();
        if (j.contains("ffn_dim")) c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
        if (j.contains("num_heads")) c.num_heads = j.at("num_heads").get<std::size_t>();
        if (j.contains("vocab_size")) c.vocab_size = j.at("vocab_size").get<std::size_t>();
        if (j.contains("routing_mode"))
            c.routing_mode = routing_mode_from_string(j.at("routing_mode").get<std::string>());
        if (j.contains("ec_capacity_factor"))
            c.ec_capacity_factor = j.at("ec_capacity_factor").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid model config: ") + e.what());
    }
    c.validate();
    return c;
}

}  // namespace moelab
