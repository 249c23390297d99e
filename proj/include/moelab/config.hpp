#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "moelab/errors.hpp"

namespace moelab {

enum class RoutingMode { CausalSegment, Prefix, PromptOnly, ECSegment, ECToken, Dense };

RoutingMode routing_mode_from_string(const std::string& s);
std::string to_string(RoutingMode m);

struct ModelConfig {
    std::size_t context_length = 512;   // L
    std::size_t segment_length = 64;    // T
    std::size_t num_experts = 4;        // E
    std::size_t num_layers = 4;
    std::size_t model_dim = 128;        // d
    std::size_t ffn_dim = 256;          // d'
    std::size_t num_heads = 4;
    std::size_t vocab_size = 258;       // byte tokenizer default
    RoutingMode routing_mode = RoutingMode::CausalSegment;
    double ec_capacity_factor = 1.0;

    std::size_t num_segments() const {
        return (context_length + segment_length - 1) / segment_length;
    }
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);

    bool operator==(const ModelConfig&) const = default;
};

}  // namespace moelab
