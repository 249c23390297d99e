#include "moelab/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moelab {

SegmentLayout split_segments(std::size_t context_length, std::size_t segment_length) {
    if (context_length == 0 || segment_length == 0)
        throw ContractError("split_segments: lengths must be positive");
    SegmentLayout layout;
    for (std::size_t begin = 0; begin < context_length; begin += segment_length) {
        layout.spans.emplace_back(begin, std::min(begin + segment_length, context_length));
    }
    return layout;
}

Tensor segment_mean(const Tensor& hidden, std::pair<std::size_t, std::size_t> span) {
    if (span.first >= span.second)
        throw ContractError("segment_mean: empty span");
    return mean_axis(slice_rows(hidden, span.first, span.second), 0);
}

namespace {

Tensor segment_logits_softmax(const Tensor& hidden, std::pair<std::size_t, std::size_t> span,
                              const Tensor& router) {
    return softmax_rows(matmul(segment_mean(hidden, span), router));
}

}  // namespace

RoutingPlan causal_segment_weights(const Tensor& hidden, const SegmentLayout& layout,
                                   const Tensor& router) {
    if (layout.spans.empty()) throw ContractError("causal_segment_weights: empty layout");
    if (layout.spans.back().second != hidden.rows())
        throw ShapeError("causal_segment_weights: layout covers " +
                         std::to_string(layout.spans.back().second) + " rows, hidden has " +
                         std::to_string(hidden.rows()));
    RoutingPlan plan;
    // Segment 1 uses its own representation; detaching the weights prevents
    // information leakage through the router.
    Tensor first = segment_logits_softmax(hidden, layout.spans[0], router);
    plan.weights.push_back(stop_gradient(first));
    plan.detached.push_back(true);
    for (std::size_t k = 1; k < layout.spans.size(); ++k) {
        plan.weights.push_back(segment_logits_softmax(hidden, layout.spans[k - 1], router));
        plan.detached.push_back(false);
    }
    return plan;
}

Tensor prompt_routing(const Tensor& hidden_prompt, const Tensor& router) {
    if (hidden_prompt.rows() == 0) throw ContractError("prompt_routing: empty prompt");
    return softmax_rows(matmul(mean_axis(hidden_prompt, 0), router));
}

RoutingPlan prefix_routing(const Tensor& hidden, const SegmentLayout& layout,
                           const Tensor& router) {
    if (layout.spans.empty()) throw ContractError("prefix_routing: empty layout");
    Tensor first = segment_logits_softmax(hidden, layout.spans[0], router);
    RoutingPlan plan;
    for (std::size_t k = 0; k < layout.spans.size(); ++k) {
        plan.weights.push_back(first);  // shared node: a single merge downstream
        plan.detached.push_back(false);
    }
    return plan;
}

ECAssignment ec_assign(const std::vector<std::vector<double>>& scores, double capacity_factor) {
    if (scores.empty()) throw ContractError("ec_assign: no units");
    const std::size_t units = scores.size();
    const std::size_t experts = scores[0].size();
    if (capacity_factor <= 0.0) throw ConfigError("ec_assign: capacity_factor must be positive");
    const auto slots = static_cast<std::size_t>(
        std::floor(capacity_factor * static_cast<double>(units) / static_cast<double>(experts)));
    if (slots == 0)
        throw ConfigError("ec_assign: capacity factor " + std::to_string(capacity_factor) +
                          " yields zero slots for " + std::to_string(units) + " units / " +
                          std::to_string(experts) + " experts");
    ECAssignment out;
    out.num_experts = experts;
    out.slots_per_expert = slots;
    out.capacity_factor = capacity_factor;
    out.selected.resize(experts);
    std::vector<std::size_t> idx(units);
    for (std::size_t e = 0; e < experts; ++e) {
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (scores[a][e] != scores[b][e]) return scores[a][e] > scores[b][e];
            return a < b;
        });
        for (std::size_t s = 0; s < slots; ++s)
            out.selected[e].emplace_back(idx[s], scores[idx[s]][e]);
    }
    return out;
}

namespace {

std::vector<std::vector<double>> softmax_scores(const Tensor& states, const Tensor& router) {
    Tensor probs = softmax_rows(matmul(states, router));
    const std::size_t units = probs.rows(), experts = probs.cols();
    std::vector<std::vector<double>> scores(units, std::vector<double>(experts));
    for (std::size_t u = 0; u < units; ++u)
        for (std::size_t e = 0; e < experts; ++e)
            scores[u][e] = static_cast<double>(probs.values()[u * experts + e]);
    return scores;
}

}  // namespace

ECAssignment ec_segment_assign(const Tensor& segment_means, const Tensor& router,
                               double capacity_factor) {
    return ec_assign(softmax_scores(segment_means, router), capacity_factor);
}

ECAssignment ec_token_assign(const Tensor& token_states, const Tensor& router,
                             double capacity_factor) {
    return ec_assign(softmax_scores(token_states, router), capacity_factor);
}

std::vector<std::vector<std::pair<std::size_t, double>>> ec_topk_per_unit(
    const std::vector<std::vector<double>>& scores, std::size_t k) {
    std::vector<std::vector<std::pair<std::size_t, double>>> out(scores.size());
    for (std::size_t u = 0; u < scores.size(); ++u) {
        const auto& row = scores[u];
        std::vector<std::size_t> idx(row.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return a < b;
        });
        for (std::size_t i = 0; i < std::min(k, idx.size()); ++i)
            out[u].emplace_back(idx[i], row[idx[i]]);
    }
    return out;
}

}  // namespace moelab
