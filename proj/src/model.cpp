#include "moelab/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace moelab {

void ModelParams::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("tok_embed", tok_embed);
    fn("pos_embed", pos_embed);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        auto& l = layers[i];
        fn(p + "attn_norm", l.attn_norm);
        fn(p + "wq", l.wq);
        fn(p + "wk", l.wk);
        fn(p + "wv", l.wv);
        fn(p + "wo", l.wo);
        fn(p + "ffn_norm", l.ffn_norm);
        for (std::size_t e = 0; e < l.bank.experts.size(); ++e) {
            const std::string ep = p + "experts." + std::to_string(e) + ".";
            fn(ep + "w_gate", l.bank.experts[e].w_gate);
            fn(ep + "w_up", l.bank.experts[e].w_up);
            fn(ep + "w_down", l.bank.experts[e].w_down);
        }
        fn(p + "router", l.bank.router);
    }
    fn("final_norm", final_norm);
    fn("w_out", w_out);
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    for_each_param([&](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
    return out;
}

namespace {

Tensor normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std);
    std::vector<real> vals(shape_numel(shape));
    for (auto& v : vals) v = static_cast<real>(dist(rng));
    return Tensor::from(std::move(shape), std::move(vals), true);
}

Tensor ones_tensor(Shape shape) {
    std::vector<real> vals(shape_numel(shape), real(1));
    return Tensor::from(std::move(shape), std::move(vals), true);
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const double std = 0.02;
    const std::size_t d = cfg.model_dim, dff = cfg.ffn_dim;
    ModelParams p;
    p.tok_embed = normal_tensor({cfg.vocab_size, d}, std, rng);
    p.pos_embed = normal_tensor({cfg.context_length, d}, std, rng);
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
        LayerParams l;
        l.attn_norm = ones_tensor({1, d});
        l.wq = normal_tensor({d, d}, std, rng);
        l.wk = normal_tensor({d, d}, std, rng);
        l.wv = normal_tensor({d, d}, std, rng);
        l.wo = normal_tensor({d, d}, std, rng);
        l.ffn_norm = ones_tensor({1, d});
        for (std::size_t e = 0; e < cfg.num_experts; ++e) {
            ExpertFFN f;
            f.w_gate = normal_tensor({d, dff}, std, rng);
            f.w_up = normal_tensor({d, dff}, std, rng);
            f.w_down = normal_tensor({dff, d}, std, rng);
            l.bank.experts.push_back(std::move(f));
        }
        l.bank.router = normal_tensor({d, cfg.num_experts}, std, rng);
        p.layers.push_back(std::move(l));
    }
    p.final_norm = ones_tensor({1, d});
    p.w_out = normal_tensor({d, cfg.vocab_size}, std, rng);
    return p;
}

Tensor swiglu_ffn(const Tensor& h, const ExpertFFN& ffn) {
    Tensor gate = silu(matmul(h, ffn.w_gate));
    Tensor up = matmul(h, ffn.w_up);
    return matmul(mul(gate, up), ffn.w_down);
}

ExpertFFN merge_experts(const Tensor& weights, const ExpertBank& bank) {
    if (weights.numel() != bank.experts.size()) {
        throw ShapeError("merge_experts: " + std::to_string(weights.numel()) + " weights vs " +
                         std::to_string(bank.experts.size()) + " experts");
    }
    std::vector<Tensor> gates, ups, downs;
    for (const auto& e : bank.experts) {
        gates.push_back(e.w_gate);
        ups.push_back(e.w_up);
        downs.push_back(e.w_down);
    }
    ExpertFFN merged;
    merged.w_gate = linear_combination(weights, gates);
    merged.w_up = linear_combination(weights, ups);
    merged.w_down = linear_combination(weights, downs);
    return merged;
}

Tensor moe_layer_forward(const Tensor& hidden, const RoutingPlan& plan, const ExpertBank& bank,
                         const SegmentLayout& layout, ForwardTrace* trace) {
    if (plan.weights.size() != layout.size()) {
        throw ContractError("moe_layer_forward: plan has " + std::to_string(plan.weights.size()) +
                            " weight vectors for " + std::to_string(layout.size()) + " segments");
    }
    // Merge once per distinct weight tensor (prefix mode shares one node).
    std::map<std::uint64_t, ExpertFFN> merged;
    std::vector<Tensor> outputs;
    for (std::size_t k = 0; k < layout.size(); ++k) {
        const auto id = plan.weights[k].node_id();
        auto it = merged.find(id);
        if (it == merged.end()) {
            it = merged.emplace(id, merge_experts(plan.weights[k], bank)).first;
            if (trace) ++trace->merge_count;
        }
        outputs.push_back(
            swiglu_ffn(slice_rows(hidden, layout.spans[k].first, layout.spans[k].second),
                       it->second));
    }
    return outputs.size() == 1 ? outputs[0] : concat_rows(outputs);
}

namespace {

Tensor attention(const Tensor& x, const LayerParams& l, std::size_t num_heads) {
    const std::size_t d = x.cols();
    const std::size_t dh = d / num_heads;
    Tensor q = matmul(x, l.wq);
    Tensor k = matmul(x, l.wk);
    Tensor v = matmul(x, l.wv);
    const real inv_scale = real(1) / std::sqrt(static_cast<real>(dh));
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < num_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor att = causal_softmax_rows(scale(matmul(qh, transpose(kh)), inv_scale));
        heads.push_back(matmul(att, vh));
    }
    return matmul(num_heads == 1 ? heads[0] : concat_cols(heads), l.wo);
}

void record_plan(ForwardTrace* trace, const RoutingPlan& plan) {
    if (!trace) return;
    std::vector<std::vector<double>> rows;
    for (const auto& w : plan.weights) {
        std::vector<double> row(w.values().begin(), w.values().end());
        rows.push_back(std::move(row));
    }
    trace->layer_plans.push_back(std::move(rows));
}

// Expert Choice forward over generic units (segments or tokens). Selected
// units get weight-scaled expert outputs; unselected units pass through with
// zero FFN contribution.
Tensor ec_forward(const Tensor& hidden, const ExpertBank& bank,
                  const std::vector<std::pair<std::size_t, std::size_t>>& unit_spans,
                  double capacity_factor, bool inference, ForwardTrace* trace) {
    const std::size_t units = unit_spans.size();
    std::vector<Tensor> means;
    for (const auto& s : unit_spans) means.push_back(segment_mean(hidden, s));
    Tensor probs =
        softmax_rows(matmul(means.size() == 1 ? means[0] : concat_rows(means), bank.router));
    const std::size_t experts = bank.experts.size();
    std::vector<std::vector<double>> scores(units, std::vector<double>(experts));
    for (std::size_t u = 0; u < units; ++u)
        for (std::size_t e = 0; e < experts; ++e)
            scores[u][e] = static_cast<double>(probs.values()[u * experts + e]);

    // unit -> list of (expert, weight-tensor)
    std::vector<std::vector<std::pair<std::size_t, Tensor>>> picks(units);
    auto pick = [&](std::size_t u, std::size_t e) {
        picks[u].emplace_back(e, slice_cols(slice_rows(probs, u, u + 1), e, e + 1));
    };
    if (inference) {
        for (std::size_t u = 0; u < units; ++u) {
            auto chosen = ec_topk_per_unit({scores[u]}, 1);
            for (const auto& [e, w] : chosen[0]) pick(u, e);
        }
    } else {
        ECAssignment assign = ec_assign(scores, capacity_factor);
        for (std::size_t e = 0; e < experts; ++e)
            for (const auto& [u, w] : assign.selected[e]) pick(u, e);
    }
    std::vector<Tensor> outputs;
    for (std::size_t u = 0; u < units; ++u) {
        const auto& span = unit_spans[u];
        Tensor rows = slice_rows(hidden, span.first, span.second);
        Tensor acc;
        for (const auto& [e, w] : picks[u]) {
            Tensor contrib = scale_by(swiglu_ffn(rows, bank.experts[e]), w);
            acc = acc.defined() ? add(acc, contrib) : contrib;
        }
        if (!acc.defined()) acc = Tensor::zeros({span.second - span.first, hidden.cols()});
        outputs.push_back(acc);
    }
    (void)trace;
    return outputs.size() == 1 ? outputs[0] : concat_rows(outputs);
}

}  // namespace

Tensor model_forward(const std::vector<std::int32_t>& tokens, ModelParams& params,
                     const ModelConfig& cfg, ForwardTrace* trace,
                     const std::vector<Tensor>* frozen_weights, bool inference) {
    if (tokens.empty()) throw ContractError("model_forward: empty token sequence");
    if (tokens.size() > cfg.context_length) {
        throw DataError("model_forward: sequence of " + std::to_string(tokens.size()) +
                        " tokens exceeds context length " + std::to_string(cfg.context_length));
    }
    const std::size_t len = tokens.size();
    SegmentLayout layout = split_segments(len, cfg.segment_length);
    Tensor x = add(embedding(params.tok_embed, tokens), slice_rows(params.pos_embed, 0, len));
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        auto& l = params.layers[i];
        x = add(x, attention(rmsnorm_rows(x, l.attn_norm), l, cfg.num_heads));
        Tensor hn = rmsnorm_rows(x, l.ffn_norm);
        Tensor ffn_out;
        switch (cfg.routing_mode) {
            case RoutingMode::Dense:
                ffn_out = swiglu_ffn(hn, l.bank.experts[0]);
                break;
            case RoutingMode::CausalSegment: {
                RoutingPlan plan = causal_segment_weights(hn, layout, l.bank.router);
                record_plan(trace, plan);
                ffn_out = moe_layer_forward(hn, plan, l.bank, layout, trace);
                break;
            }
            case RoutingMode::Prefix: {
                RoutingPlan plan = prefix_routing(hn, layout, l.bank.router);
                record_plan(trace, plan);
                ffn_out = moe_layer_forward(hn, plan, l.bank, layout, trace);
                break;
            }
            case RoutingMode::PromptOnly: {
                RoutingPlan plan;
                Tensor w = (frozen_weights != nullptr) ? (*frozen_weights)[i]
                                                       : prompt_routing(hn, l.bank.router);
                for (std::size_t k = 0; k < layout.size(); ++k) {
                    plan.weights.push_back(w);
                    plan.detached.push_back(false);
                }
                record_plan(trace, plan);
                ffn_out = moe_layer_forward(hn, plan, l.bank, layout, trace);
                break;
            }
            case RoutingMode::ECSegment:
                ffn_out = ec_forward(hn, l.bank, layout.spans, cfg.ec_capacity_factor,
                                     inference, trace);
                break;
            case RoutingMode::ECToken: {
                std::vector<std::pair<std::size_t, std::size_t>> token_spans;
                for (std::size_t t = 0; t < len; ++t) token_spans.emplace_back(t, t + 1);
                ffn_out = ec_forward(hn, l.bank, token_spans, cfg.ec_capacity_factor,
                                     inference, trace);
                break;
            }
        }
        x = add(x, ffn_out);
    }
    return matmul(rmsnorm_rows(x, params.final_norm), params.w_out);
}

Tensor lm_loss(const Tensor& logits, const std::vector<std::int32_t>& tokens) {
    if (logits.rows() != tokens.size()) {
        throw ShapeError("lm_loss: " + std::to_string(logits.rows()) + " logit rows vs " +
                         std::to_string(tokens.size()) + " tokens");
    }
    if (tokens.size() < 2) throw ContractError("lm_loss: need at least 2 tokens");
    std::vector<std::int32_t> targets(tokens.begin() + 1, tokens.end());
    return cross_entropy_mean(slice_rows(logits, 0, logits.rows() - 1), targets);
}

namespace {

std::int32_t argmax_last_row(const Tensor& logits) {
    const std::size_t v = logits.cols();
    const real* row = logits.values().data() + (logits.rows() - 1) * v;
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;
    return static_cast<std::int32_t>(best);
}

}  // namespace

std::vector<std::int32_t> generate(const std::vector<std::int32_t>& prompt, ModelParams& params,
                                   const ModelConfig& cfg, std::size_t max_new,
                                   InferenceRouting routing) {
    if (prompt.empty()) throw ContractError("generate: empty prompt");
    if (prompt.size() >= cfg.context_length)
        throw DataError("generate: prompt exceeds context length");
    std::vector<std::int32_t> seq = prompt;

    std::vector<Tensor> frozen;
    ModelConfig cfg_step = cfg;
    if (routing == InferenceRouting::Prompt && cfg.routing_mode != RoutingMode::Dense) {
        // One routing decision per layer from the prompt mean; the merged
        // FFNs are reused for the whole continuation.
        cfg_step.routing_mode = RoutingMode::PromptOnly;
        ForwardTrace trace;
        (void)model_forward(prompt, params, cfg_step, &trace, nullptr, true);
        for (const auto& plan : trace.layer_plans) {
            std::vector<real> vals(plan[0].begin(), plan[0].end());
            const std::size_t n = vals.size();
            frozen.push_back(Tensor::from({1, n}, std::move(vals)));
        }
    } else if (routing == InferenceRouting::Segment &&
               cfg.routing_mode != RoutingMode::Dense) {
        cfg_step.routing_mode = RoutingMode::CausalSegment;
    }

    for (std::size_t i = 0; i < max_new && seq.size() < cfg.context_length; ++i) {
        Tensor logits = model_forward(seq, params, cfg_step, nullptr,
                                      frozen.empty() ? nullptr : &frozen, true);
        seq.push_back(argmax_last_row(logits));
    }
    return seq;
}

}  // namespace moelab
