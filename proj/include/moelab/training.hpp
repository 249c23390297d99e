#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "moelab/batching.hpp"
#include "moelab/config.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct TrainPlan {
    std::size_t total_steps = 1000;
    double warmup_fraction = 0.05;        // linear LR ramp
    double dense_warmup_fraction = 0.05;  // dense phase before duplication
    std::size_t batch_size_tokens = 4096; // multiple of L
    std::uint64_t seed = 0;
    std::size_t eval_interval = 200;      // checkpoint cadence
    std::size_t log_interval = 1;
    double base_lr = 2e-4;
    double min_lr_fraction = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.1;
    double grad_clip = 1.0;

    void validate(const ModelConfig& cfg) const;
    nlohmann::json to_json() const;
    static TrainPlan from_json(const nlohmann::json& j);
};

// Linear ramp 0 -> base_lr over the warmup fraction, then cosine decay to
// min_lr_fraction * base_lr at total_steps.
double lr_at(std::size_t step, const TrainPlan& plan);

// Decoupled weight decay Adam with bias correction. Moments are keyed by
// parameter name with a per-parameter step count, so freshly created tensors
// (post-duplication experts) start from clean state.
class AdamW {
public:
    struct Moments {
        std::vector<double> m, v;
        std::size_t t = 0;
    };

    explicit AdamW(const TrainPlan& plan)
        : beta1_(plan.beta1), beta2_(plan.beta2), eps_(plan.adam_eps),
          weight_decay_(plan.weight_decay) {}
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(std::vector<std::pair<std::string, Tensor>>& params, double lr);
    void drop_moments_matching(const std::string& substring);

    std::unordered_map<std::string, Moments>& moments() { return moments_; }
    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }
    double eps() const { return eps_; }
    double weight_decay() const { return weight_decay_; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    std::unordered_map<std::string, Moments> moments_;
};

double clip_global_norm(std::vector<std::pair<std::string, Tensor>>& params, double max_norm);

// Builds MoE parameters from a trained dense model: expert FFNs are copies of
// the dense FFN, the router is re-initialized from seed, everything else is
// carried over by value.
ModelParams duplicate_to_moe(ModelParams& dense, const ModelConfig& target_cfg,
                             std::uint64_t seed);

struct MetricsRow {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::uint64_t tokens = 0;
    std::string mode;
};

struct TraceRow {
    std::size_t step = 0;
    std::size_t layer = 0;
    std::size_t segment = 0;
    std::string domain;
    std::vector<double> weights;
};

struct Checkpoint {
    ModelConfig config;      // target run config
    std::string phase;       // "dense" or "moe"
    std::uint64_t seed = 0;
    std::size_t step = 0;
    ModelParams params;
    std::optional<TrainPlan> plan;
    std::unordered_map<std::string, AdamW::Moments> moments;
};

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const std::string& phase,
                     std::uint64_t seed, std::size_t step, ModelParams& params,
                     const TrainPlan* plan = nullptr, const AdamW* optimizer = nullptr);
Checkpoint load_checkpoint(const std::string& path);

// Throws ConfigError naming the first mismatched field.
void require_same_config(const ModelConfig& expected, const ModelConfig& actual);

struct TrainResult {
    std::vector<MetricsRow> metrics;
    std::vector<TraceRow> trace;
    std::string final_checkpoint;
};

struct TrainOptions {
    std::string out_dir;          // metrics/checkpoint destination; empty = in-memory only
    bool record_trace = false;
    std::string resume_from;      // checkpoint path
    std::size_t stop_after_step = 0;  // 0 = run to total_steps (used by resume tests)
};

TrainResult train(const TrainPlan& plan, const ModelConfig& cfg,
                  const std::vector<TrainingInstance>& instances,
                  const TrainOptions& options = {});

// Convenience for tests and the dense-then-duplicate contract: runs the dense
// warmup portion only and returns the duplicated MoE parameters.
ModelParams warmup_dense_then_duplicate(const TrainPlan& plan, const ModelConfig& cfg,
                                        const std::vector<TrainingInstance>& instances);

}  // namespace moelab
