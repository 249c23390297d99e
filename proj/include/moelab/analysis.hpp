#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moelab/batching.hpp"
#include "moelab/model.hpp"
#include "moelab/training.hpp"

namespace moelab {

// Instance groups keyed by dominant provenance domain.
std::map<std::string, std::vector<const TrainingInstance*>> group_by_domain(
    const std::vector<TrainingInstance>& instances);

// exp(mean token cross-entropy) per domain group.
std::map<std::string, double> perplexity(ModelParams& params, const ModelConfig& cfg,
                                         const std::vector<TrainingInstance>& instances);

struct UtilizationWindow {
    std::size_t window = 0;       // window index (window_steps steps each)
    std::size_t active_count = 0; // layer-local experts with any weight > threshold
};

// An expert (layer-local) is active in a window when any recorded weight for
// it exceeds threshold_num/E (default 2/E) at least once.
std::vector<UtilizationWindow> utilization_report(const std::vector<TraceRow>& trace,
                                                  std::size_t window_steps, std::size_t num_experts,
                                                  double threshold_num = 2.0);

struct SpecializationLayer {
    std::size_t layer = 0;
    // domain -> mean routing weight vector
    std::map<std::string, std::vector<double>> domain_means;
    double max_tv_distance = 0.0;  // max pairwise total variation across domains
    std::map<std::string, std::size_t> argmax_expert;
};

struct SpecializationReport {
    std::vector<SpecializationLayer> layers;
};

// Mean per-domain routing vectors from a routing trace (per segment).
SpecializationReport specialization_from_trace(const std::vector<TraceRow>& trace,
                                               std::size_t num_layers, std::size_t num_experts);

// Runs the model over per-domain eval instances and summarizes routing.
SpecializationReport specialization_report(ModelParams& params, const ModelConfig& cfg,
                                           const std::vector<TrainingInstance>& instances);

// Appendix-style FLOPs accounting, exact integer/rational arithmetic.
std::uint64_t ffn_flops(std::uint64_t L, std::uint64_t d, std::uint64_t d_ff);
std::uint64_t merge_overhead_flops(std::uint64_t L, std::uint64_t T, std::uint64_t E,
                                   std::uint64_t d, std::uint64_t d_ff);

struct Ratio {
    std::uint64_t num = 0;
    std::uint64_t den = 1;
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    double percent() const { return 100.0 * value(); }
};

// Merging overhead relative to the dense FFN: exactly E/T.
Ratio flops_overhead(std::uint64_t E, std::uint64_t T);

struct GapPoint {
    std::size_t step = 0;
    double gap = 0.0;  // dense_loss - moe_loss
};

// Pointwise dense-minus-MoE loss series; interpolates the MoE log onto the
// dense log's steps when the grids differ.
std::vector<GapPoint> loss_gap_curve(const std::vector<MetricsRow>& dense,
                                     const std::vector<MetricsRow>& moe);

// CSV emitters (schema documented per table).
void write_specialization_csv(const std::string& path, const SpecializationReport& report);
void write_utilization_csv(const std::string& path, const std::vector<UtilizationWindow>& rows);
void write_flops_csv(const std::string& path, const ModelConfig& cfg);
void write_lossgap_csv(const std::string& path, const std::vector<GapPoint>& rows);

// Text heatmap of per-domain mean weights, one block per layer.
std::string specialization_heatmap(const SpecializationReport& report);

std::vector<MetricsRow> read_metrics(const std::string& path);

}  // namespace moelab
