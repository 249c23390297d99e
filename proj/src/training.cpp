#include "moelab/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

namespace moelab {

void TrainPlan::validate(const ModelConfig& cfg) const {
    if (total_steps == 0) throw ConfigError("total_steps must be positive");
    if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
        throw ConfigError("warmup_fraction must lie in [0,1]");
    if (dense_warmup_fraction < 0.0 || dense_warmup_fraction > 1.0)
        throw ConfigError("dense_warmup_fraction must lie in [0,1]");
    if (batch_size_tokens == 0 || batch_size_tokens % cfg.context_length != 0)
        throw ConfigError("batch_size_tokens must be a positive multiple of context_length");
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
}

nlohmann::json TrainPlan::to_json() const {
    return nlohmann::json{{"total_steps", total_steps},
                          {"warmup_fraction", warmup_fraction},
                          {"dense_warmup_fraction", dense_warmup_fraction},
                          {"batch_size_tokens", batch_size_tokens},
                          {"seed", seed},
                          {"eval_interval", eval_interval},
                          {"log_interval", log_interval},
                          {"base_lr", base_lr},
                          {"min_lr_fraction", min_lr_fraction},
                          {"beta1", beta1},
                          {"beta2", beta2},
                          {"adam_eps", adam_eps},
                          {"weight_decay", weight_decay},
                          {"grad_clip", grad_clip}};
}

TrainPlan TrainPlan::from_json(const nlohmann::json& j) {
    TrainPlan p;
    try {
        auto get = [&](const char* k, auto& field) {
            if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
        };
        get("total_steps", p.total_steps);
        get("warmup_fraction", p.warmup_fraction);
        get("dense_warmup_fraction", p.dense_warmup_fraction);
        get("batch_size_tokens", p.batch_size_tokens);
        get("seed", p.seed);
        get("eval_interval", p.eval_interval);
        get("log_interval", p.log_interval);
        get("base_lr", p.base_lr);
        get("min_lr_fraction", p.min_lr_fraction);
        get("beta1", p.beta1);
        get("beta2", p.beta2);
        get("adam_eps", p.adam_eps);
        get("weight_decay", p.weight_decay);
        get("grad_clip", p.grad_clip);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid train plan: ") + e.what());
    }
    return p;
}

double lr_at(std::size_t step, const TrainPlan& plan) {
    if (step > plan.total_steps)
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond total_steps");
    const double warmup_steps = plan.warmup_fraction * static_cast<double>(plan.total_steps);
    const double min_lr = plan.min_lr_fraction * plan.base_lr;
    if (warmup_steps > 0.0 && static_cast<double>(step) < warmup_steps)
        return plan.base_lr * static_cast<double>(step) / warmup_steps;
    const double span = static_cast<double>(plan.total_steps) - warmup_steps;
    if (span <= 0.0) return min_lr;
    const double progress = (static_cast<double>(step) - warmup_steps) / span;
    return min_lr + 0.5 * (plan.base_lr - min_lr) * (1.0 + std::cos(M_PI * progress));
}

void AdamW::step(std::vector<std::pair<std::string, Tensor>>& params, double lr) {
    for (auto& [name, t] : params) {
        if (!t.requires_grad()) continue;
        auto& st = moments_[name];
        if (st.m.size() != t.numel()) {
            st.m.assign(t.numel(), 0.0);
            st.v.assign(t.numel(), 0.0);
            st.t = 0;
        }
        ++st.t;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
        auto& vals = t.values();
        auto& grads = t.grad();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double g = static_cast<double>(grads[i]);
            if (!std::isfinite(g))
                throw NumericError("adamw_step: non-finite gradient in parameter " + name);
            st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
            st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
            const double m_hat = st.m[i] / bc1;
            const double v_hat = st.v[i] / bc2;
            const double p = static_cast<double>(vals[i]);
            vals[i] = static_cast<real>(
                p - lr * (m_hat / (std::sqrt(v_hat) + eps_) + weight_decay_ * p));
        }
    }
}

void AdamW::drop_moments_matching(const std::string& substring) {
    for (auto it = moments_.begin(); it != moments_.end();) {
        if (it->first.find(substring) != std::string::npos) it = moments_.erase(it);
        else ++it;
    }
}

double clip_global_norm(std::vector<std::pair<std::string, Tensor>>& params, double max_norm) {
    double sq = 0.0;
    for (auto& [name, t] : params) {
        if (!t.requires_grad() || !t.has_grad()) continue;
        for (real g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const real s = static_cast<real>(max_norm / norm);
        for (auto& [name, t] : params) {
            if (!t.requires_grad() || !t.has_grad()) continue;
            for (real& g : t.grad()) g *= s;
        }
    }
    return norm;
}

namespace {

Tensor copy_tensor(const Tensor& t) {
    return Tensor::from(t.shape(), t.values(), t.requires_grad());
}

ModelConfig dense_config(const ModelConfig& cfg) {
    ModelConfig d = cfg;
    d.num_experts = 1;
    d.routing_mode = RoutingMode::Dense;
    return d;
}

// Deterministic instance order: each epoch is an independent seeded shuffle,
// so resume needs no RNG state.
class InstanceSchedule {
public:
    InstanceSchedule(std::size_t count, std::uint64_t seed) : count_(count), seed_(seed) {}

    std::size_t at(std::size_t global_slot) {
        const std::size_t epoch = global_slot / count_;
        if (epoch != cached_epoch_ || perm_.empty()) {
            perm_.resize(count_);
            std::iota(perm_.begin(), perm_.end(), std::size_t(0));
            std::mt19937_64 rng(seed_ ^ (0x9e3779b97f4a7c15ull * (epoch + 1)));
            std::shuffle(perm_.begin(), perm_.end(), rng);
            cached_epoch_ = epoch;
        }
        return perm_[global_slot % count_];
    }

private:
    std::size_t count_;
    std::uint64_t seed_;
    std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
    std::vector<std::size_t> perm_;
};

std::string dominant_domain(const TrainingInstance& inst, std::size_t begin, std::size_t end) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : inst.provenance) {
        const std::size_t lo = std::max(begin, s.begin);
        const std::size_t hi = std::min(end, s.end);
        if (hi > lo) counts[s.domain] += hi - lo;
    }
    std::string best;
    std::size_t best_n = 0;
    for (const auto& [dom, n] : counts) {
        if (n > best_n) {
            best = dom;
            best_n = n;
        }
    }
    return best;
}

}  // namespace

ModelParams duplicate_to_moe(ModelParams& dense, const ModelConfig& target_cfg,
                             std::uint64_t seed) {
    ModelParams out;
    out.tok_embed = copy_tensor(dense.tok_embed);
    out.pos_embed = copy_tensor(dense.pos_embed);
    out.final_norm = copy_tensor(dense.final_norm);
    out.w_out = copy_tensor(dense.w_out);
    std::mt19937_64 rng(seed ^ 0xd1b54a32d192ed03ull);
    std::normal_distribution<double> dist(0.0, 0.02);
    for (const auto& dl : dense.layers) {
        LayerParams l;
        l.attn_norm = copy_tensor(dl.attn_norm);
        l.wq = copy_tensor(dl.wq);
        l.wk = copy_tensor(dl.wk);
        l.wv = copy_tensor(dl.wv);
        l.wo = copy_tensor(dl.wo);
        l.ffn_norm = copy_tensor(dl.ffn_norm);
        for (std::size_t e = 0; e < target_cfg.num_experts; ++e) {
            ExpertFFN f;
            f.w_gate = copy_tensor(dl.bank.experts[0].w_gate);
            f.w_up = copy_tensor(dl.bank.experts[0].w_up);
            f.w_down = copy_tensor(dl.bank.experts[0].w_down);
            l.bank.experts.push_back(std::move(f));
        }
        std::vector<real> rv(target_cfg.model_dim * target_cfg.num_experts);
        for (auto& v : rv) v = static_cast<real>(dist(rng));
        l.bank.router =
            Tensor::from({target_cfg.model_dim, target_cfg.num_experts}, std::move(rv), true);
        out.layers.push_back(std::move(l));
    }
    return out;
}

// --- checkpointing ---------------------------------------------------------

namespace {

const char* dtype_name() {
#ifdef MOELAB_REAL_FLOAT32
    return "float32";
#else
    return "float64";
#endif
}

void write_real_block(std::ofstream& out, const std::vector<real>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(real)));
}

void write_double_block(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const std::string& phase,
                     std::uint64_t seed, std::size_t step, ModelParams& params,
                     const TrainPlan* plan, const AdamW* optimizer) {
    nlohmann::json manifest;
    manifest["config"] = cfg.to_json();
    manifest["phase"] = phase;
    manifest["seed"] = seed;
    manifest["step"] = step;
    manifest["dtype"] = dtype_name();
    if (plan) manifest["plan"] = plan->to_json();
    nlohmann::json tensors = nlohmann::json::array();
    auto named = params.named_params();
    for (auto& [name, t] : named)
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"role", "param"}});
    if (optimizer) {
        for (auto& [name, t] : named) {
            auto it = const_cast<AdamW*>(optimizer)->moments().find(name);
            if (it == const_cast<AdamW*>(optimizer)->moments().end()) continue;
            tensors.push_back({{"name", name},
                               {"shape", t.shape()},
                               {"role", "adam"},
                               {"t", it->second.t}});
        }
    }
    manifest["tensors"] = tensors;
    const std::string ms = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("save_checkpoint: cannot open " + path);
    out.write("MOEC", 4);
    const std::uint32_t version = 1, mlen = static_cast<std::uint32_t>(ms.size());
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&mlen), 4);
    out.write(ms.data(), static_cast<std::streamsize>(ms.size()));
    for (auto& [name, t] : named) write_real_block(out, t.values());
    if (optimizer) {
        for (auto& [name, t] : named) {
            auto it = const_cast<AdamW*>(optimizer)->moments().find(name);
            if (it == const_cast<AdamW*>(optimizer)->moments().end()) continue;
            write_double_block(out, it->second.m);
            write_double_block(out, it->second.v);
        }
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MOEC", 4) != 0)
        throw DataError("load_checkpoint: bad magic in " + path);
    std::uint32_t version = 0, mlen = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&mlen), 4);
    if (!in || version != 1) throw DataError("load_checkpoint: unsupported version");
    std::string ms(mlen, '\0');
    in.read(ms.data(), mlen);
    if (!in) throw DataError("load_checkpoint: truncated manifest");

    Checkpoint ck;
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(ms);
        ck.config = ModelConfig::from_json(manifest.at("config"));
        ck.phase = manifest.at("phase").get<std::string>();
        ck.seed = manifest.at("seed").get<std::uint64_t>();
        ck.step = manifest.at("step").get<std::size_t>();
        if (manifest.contains("plan")) ck.plan = TrainPlan::from_json(manifest.at("plan"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("load_checkpoint: bad manifest: ") + e.what());
    }
    if (manifest.at("dtype").get<std::string>() != dtype_name())
        throw DataError("load_checkpoint: dtype mismatch, checkpoint has " +
                        manifest.at("dtype").get<std::string>() + ", build uses " + dtype_name());

    const ModelConfig phase_cfg =
        ck.phase == "dense" ? dense_config(ck.config) : ck.config;
    ck.params = init_params(phase_cfg, 0);
    std::map<std::string, Tensor> by_name;
    ck.params.for_each_param([&](const std::string& n, Tensor& t) { by_name.emplace(n, t); });

    for (const auto& tj : manifest.at("tensors")) {
        const std::string name = tj.at("name").get<std::string>();
        const Shape shape = tj.at("shape").get<Shape>();
        const std::string role = tj.at("role").get<std::string>();
        const std::size_t n = shape_numel(shape);
        if (role == "param") {
            auto it = by_name.find(name);
            if (it == by_name.end())
                throw DataError("load_checkpoint: unexpected tensor " + name);
            if (it->second.shape() != shape)
                throw DataError("load_checkpoint: shape mismatch for " + name + ": file has " +
                                shape_str(shape) + ", config implies " +
                                shape_str(it->second.shape()));
            in.read(reinterpret_cast<char*>(it->second.values().data()),
                    static_cast<std::streamsize>(n * sizeof(real)));
            if (!in) throw DataError("load_checkpoint: truncated tensor " + name);
        } else {
            AdamW::Moments mo;
            mo.t = tj.at("t").get<std::size_t>();
            mo.m.resize(n);
            mo.v.resize(n);
            in.read(reinterpret_cast<char*>(mo.m.data()),
                    static_cast<std::streamsize>(n * sizeof(double)));
            in.read(reinterpret_cast<char*>(mo.v.data()),
                    static_cast<std::streamsize>(n * sizeof(double)));
            if (!in) throw DataError("load_checkpoint: truncated optimizer state for " + name);
            ck.moments.emplace(name, std::move(mo));
        }
    }
    return ck;
}

void require_same_config(const ModelConfig& expected, const ModelConfig& actual) {
    auto fail = [](const std::string& field) {
        throw ConfigError("checkpoint config mismatch in field: " + field);
    };
    if (expected.context_length != actual.context_length) fail("context_length");
    if (expected.segment_length != actual.segment_length) fail("segment_length");
    if (expected.num_experts != actual.num_experts) fail("num_experts");
    if (expected.num_layers != actual.num_layers) fail("num_layers");
    if (expected.model_dim != actual.model_dim) fail("model_dim");
    if (expected.ffn_dim != actual.ffn_dim) fail("ffn_dim");
    if (expected.num_heads != actual.num_heads) fail("num_heads");
    if (expected.vocab_size != actual.vocab_size) fail("vocab_size");
    if (expected.routing_mode != actual.routing_mode) fail("routing_mode");
}

// --- training loop ---------------------------------------------------------

namespace {

struct StepOutcome {
    double loss = 0.0;
};

StepOutcome run_step(ModelParams& params, const ModelConfig& run_cfg, AdamW& opt,
                     const TrainPlan& plan, const std::vector<TrainingInstance>& instances,
                     InstanceSchedule& schedule, std::size_t step, std::size_t batch_instances,
                     bool record_trace, std::vector<TraceRow>* trace) {
    auto named = params.named_params();
    for (auto& [name, t] : named) t.zero_grad();
    double loss_acc = 0.0;
    const real inv_b = real(1) / static_cast<real>(batch_instances);
    for (std::size_t slot = 0; slot < batch_instances; ++slot) {
        const auto& inst = instances[schedule.at(step * batch_instances + slot)];
        ForwardTrace ftrace;
        Tensor logits = model_forward(inst.tokens, params, run_cfg,
                                      record_trace ? &ftrace : nullptr);
        Tensor loss = lm_loss(logits, inst.tokens);
        loss_acc += static_cast<double>(loss.scalar());
        backward(scale(loss, inv_b));
        if (record_trace && trace) {
            SegmentLayout layout = split_segments(inst.tokens.size(), run_cfg.segment_length);
            for (std::size_t li = 0; li < ftrace.layer_plans.size(); ++li) {
                for (std::size_t s = 0; s < ftrace.layer_plans[li].size(); ++s) {
                    TraceRow row;
                    row.step = step;
                    row.layer = li;
                    row.segment = s;
                    row.domain = dominant_domain(inst, layout.spans[s].first,
                                                 layout.spans[s].second);
                    row.weights = ftrace.layer_plans[li][s];
                    trace->push_back(std::move(row));
                }
            }
        }
    }
    const double loss_mean = loss_acc / static_cast<double>(batch_instances);
    if (!std::isfinite(loss_mean))
        throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                           "; last checkpoint retained");
    clip_global_norm(named, plan.grad_clip);
    opt.step(named, lr_at(step, plan));
    return {loss_mean};
}

}  // namespace

TrainResult train(const TrainPlan& plan, const ModelConfig& cfg,
                  const std::vector<TrainingInstance>& instances, const TrainOptions& options) {
    cfg.validate();
    plan.validate(cfg);
    if (instances.empty()) throw DataError("train: no instances");
    const std::size_t batch_instances = plan.batch_size_tokens / cfg.context_length;
    const bool is_moe = cfg.num_experts > 1 && cfg.routing_mode != RoutingMode::Dense;
    const std::size_t dense_steps =
        is_moe ? static_cast<std::size_t>(plan.dense_warmup_fraction *
                                          static_cast<double>(plan.total_steps))
               : 0;

    std::size_t step = 0;
    std::string phase;
    ModelParams params;
    AdamW opt(plan);
    if (!options.resume_from.empty()) {
        Checkpoint ck = load_checkpoint(options.resume_from);
        require_same_config(cfg, ck.config);
        step = ck.step;
        phase = ck.phase;
        params = std::move(ck.params);
        opt.moments() = std::move(ck.moments);
    } else {
        phase = dense_steps > 0 ? "dense" : "moe";
        const ModelConfig init_cfg = phase == "dense" ? dense_config(cfg) : cfg;
        params = init_params(init_cfg, plan.seed);
    }

    std::ofstream metrics_out;
    std::ofstream trace_out;
    if (!options.out_dir.empty()) {
        std::filesystem::create_directories(options.out_dir);
        metrics_out.open(options.out_dir + "/metrics.jsonl", std::ios::app);
        if (options.record_trace)
            trace_out.open(options.out_dir + "/trace.jsonl", std::ios::app);
    }
    auto checkpoint_path = [&](const std::string& tag) {
        return options.out_dir + "/checkpoint_" + tag + ".bin";
    };

    TrainResult result;
    InstanceSchedule schedule(instances.size(), plan.seed);
    for (; step < plan.total_steps; ++step) {
        if (phase == "dense" && step >= dense_steps) {
            params = duplicate_to_moe(params, cfg, plan.seed);
            opt.drop_moments_matching(".experts.");
            opt.drop_moments_matching(".router");
            phase = "moe";
        }
        const ModelConfig run_cfg = phase == "dense" ? dense_config(cfg) : cfg;
        const bool want_trace = options.record_trace && phase == "moe" &&
                                run_cfg.routing_mode != RoutingMode::Dense;
        const std::size_t trace_start = result.trace.size();
        StepOutcome outcome = run_step(params, run_cfg, opt, plan, instances, schedule, step,
                                       batch_instances, want_trace, &result.trace);
        if (plan.log_interval > 0 && (step % plan.log_interval == 0 || step + 1 == plan.total_steps)) {
            MetricsRow row{step, outcome.loss, lr_at(step, plan),
                           static_cast<std::uint64_t>((step + 1) * plan.batch_size_tokens),
                           to_string(run_cfg.routing_mode)};
            if (metrics_out) {
                metrics_out << nlohmann::json{{"step", row.step},
                                              {"loss", row.loss},
                                              {"lr", row.lr},
                                              {"tokens", row.tokens},
                                              {"mode", row.mode}}
                                   .dump()
                            << "\n";
                metrics_out.flush();
            }
            result.metrics.push_back(std::move(row));
        }
        if (trace_out && want_trace) {
            for (std::size_t i = trace_start; i < result.trace.size(); ++i) {
                const auto& r = result.trace[i];
                trace_out << nlohmann::json{{"step", r.step},
                                            {"layer", r.layer},
                                            {"segment", r.segment},
                                            {"domain", r.domain},
                                            {"weights", r.weights}}
                                 .dump()
                          << "\n";
            }
        }
        if (!options.out_dir.empty() && plan.eval_interval > 0 &&
            (step + 1) % plan.eval_interval == 0 && step + 1 < plan.total_steps) {
            save_checkpoint(checkpoint_path("step" + std::to_string(step + 1)), cfg, phase,
                            plan.seed, step + 1, params, &plan, &opt);
        }
        if (options.stop_after_step > 0 && step + 1 >= options.stop_after_step) {
            ++step;
            break;
        }
    }
    if (!options.out_dir.empty()) {
        result.final_checkpoint = checkpoint_path(step >= plan.total_steps ? "final"
                                                                           : "step" +
                                                                                 std::to_string(step));
        save_checkpoint(result.final_checkpoint, cfg, phase, plan.seed, step, params, &plan,
                        &opt);
    }
    return result;
}

ModelParams warmup_dense_then_duplicate(const TrainPlan& plan, const ModelConfig& cfg,
                                        const std::vector<TrainingInstance>& instances) {
    cfg.validate();
    plan.validate(cfg);
    const std::size_t dense_steps = static_cast<std::size_t>(
        plan.dense_warmup_fraction * static_cast<double>(plan.total_steps));
    const ModelConfig dcfg = dense_config(cfg);
    ModelParams dense = init_params(dcfg, plan.seed);
    if (dense_steps > 0) {
        if (instances.empty()) throw DataError("warmup_dense_then_duplicate: no instances");
        AdamW opt(plan);
        InstanceSchedule schedule(instances.size(), plan.seed);
        const std::size_t batch_instances = plan.batch_size_tokens / cfg.context_length;
        for (std::size_t step = 0; step < dense_steps; ++step)
            run_step(dense, dcfg, opt, plan, instances, schedule, step, batch_instances, false,
                     nullptr);
    }
    return duplicate_to_moe(dense, cfg, plan.seed);
}

}  // namespace moelab
