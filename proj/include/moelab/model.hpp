#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/routing.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

struct ExpertFFN {
    Tensor w_gate;  // d x d'
    Tensor w_up;    // d x d'
    Tensor w_down;  // d' x d
};

struct ExpertBank {
    std::vector<ExpertFFN> experts;
    Tensor router;  // d x E, no bias
};

struct LayerParams {
    Tensor attn_norm;  // 1 x d
    Tensor wq, wk, wv, wo;  // d x d
    Tensor ffn_norm;   // 1 x d
    ExpertBank bank;
};

struct ModelParams {
    Tensor tok_embed;  // V x d
    Tensor pos_embed;  // L x d
    std::vector<LayerParams> layers;
    Tensor final_norm;  // 1 x d
    Tensor w_out;       // d x V

    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    std::vector<std::pair<std::string, Tensor>> named_params();
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// output = (silu(h W_gate) ⊙ (h W_up)) W_down, rows are tokens
Tensor swiglu_ffn(const Tensor& h, const ExpertFFN& ffn);

// Convex combination of the bank's expert parameter sets; gradients flow to
// both the weights and every expert.
ExpertFFN merge_experts(const Tensor& weights, const ExpertBank& bank);

struct ForwardTrace {
    std::size_t merge_count = 0;
    // per layer, per segment: weight vector values (empty in dense/EC modes)
    std::vector<std::vector<std::vector<double>>> layer_plans;
};

// Applies the plan's k-th merged FFN to segment k's rows. Plan entries that
// share a tensor node share one merge.
Tensor moe_layer_forward(const Tensor& hidden, const RoutingPlan& plan, const ExpertBank& bank,
                         const SegmentLayout& layout, ForwardTrace* trace = nullptr);

// Full decoder forward; logits (len x V). `frozen_weights`, when given,
// supplies one per-layer routing vector (prompt-only continuation).
Tensor model_forward(const std::vector<std::int32_t>& tokens, ModelParams& params,
                     const ModelConfig& cfg, ForwardTrace* trace = nullptr,
                     const std::vector<Tensor>* frozen_weights = nullptr,
                     bool inference = false);

// Mean next-token cross-entropy (nats); targets are tokens shifted by one.
Tensor lm_loss(const Tensor& logits, const std::vector<std::int32_t>& tokens);

enum class InferenceRouting { Prompt, Segment };

std::vector<std::int32_t> generate(const std::vector<std::int32_t>& prompt, ModelParams& params,
                                   const ModelConfig& cfg, std::size_t max_new,
                                   InferenceRouting routing = InferenceRouting::Prompt);

}  // namespace moelab
