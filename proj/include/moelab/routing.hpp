#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

// Contiguous token spans [begin, end) partitioning [0, L); all spans have
// length T except possibly the last.
struct SegmentLayout {
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    std::size_t size() const { return spans.size(); }
};

SegmentLayout split_segments(std::size_t context_length, std::size_t segment_length);

// Mean hidden representation over a span of H's rows (1 x d).
Tensor segment_mean(const Tensor& hidden, std::pair<std::size_t, std::size_t> span);

// Per-segment merging weights. Entries on the simplex; `detached` marks
// weights that carry no gradient (segment 1 in causal mode).
struct RoutingPlan {
    std::vector<Tensor> weights;  // each 1 x E
    std::vector<bool> detached;
};

// Segment k>=2 routes on the previous segment's mean; segment 1 routes on its
// own mean with detached weights. plan[0] and plan[1] agree in value.
RoutingPlan causal_segment_weights(const Tensor& hidden, const SegmentLayout& layout,
                                   const Tensor& router);

// One decision from the whole prompt's mean hidden state.
Tensor prompt_routing(const Tensor& hidden_prompt, const Tensor& router);

// One decision from segment 1, applied to every segment.
RoutingPlan prefix_routing(const Tensor& hidden, const SegmentLayout& layout,
                           const Tensor& router);

// Expert Choice selection: each expert takes its top floor(cf*units/E) units
// by its own score column. Ties break by unit index ascending.
struct ECAssignment {
    std::size_t num_experts = 0;
    std::size_t slots_per_expert = 0;
    double capacity_factor = 1.0;
    // per expert: (unit index, routing weight) in selection order
    std::vector<std::vector<std::pair<std::size_t, double>>> selected;
};

// scores: one row per unit, softmax-normalized over experts.
ECAssignment ec_assign(const std::vector<std::vector<double>>& scores, double capacity_factor);

ECAssignment ec_segment_assign(const Tensor& segment_means, const Tensor& router,
                               double capacity_factor);
ECAssignment ec_token_assign(const Tensor& token_states, const Tensor& router,
                             double capacity_factor);

// Inference-side token routing: each unit picks its own top-k experts; no
// batch-global information is used.
std::vector<std::vector<std::pair<std::size_t, double>>> ec_topk_per_unit(
    const std::vector<std::vector<double>>& scores, std::size_t k);

}  // namespace moelab
