#include "moelab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace moelab {

namespace {

std::string instance_domain(const TrainingInstance& inst) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : inst.provenance) counts[s.domain] += s.end - s.begin;
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

std::map<std::string, std::vector<const TrainingInstance*>> group_by_domain(
    const std::vector<TrainingInstance>& instances) {
    std::map<std::string, std::vector<const TrainingInstance*>> groups;
    for (const auto& inst : instances) groups[instance_domain(inst)].push_back(&inst);
    return groups;
}

std::map<std::string, double> perplexity(ModelParams& params, const ModelConfig& cfg,
                                         const std::vector<TrainingInstance>& instances) {
    auto groups = group_by_domain(instances);
    std::map<std::string, double> out;
    for (const auto& [domain, insts] : groups) {
        if (insts.empty()) throw DataError("perplexity: empty group " + domain);
        double loss_sum = 0.0;
        std::size_t token_count = 0;
        for (const auto* inst : insts) {
            Tensor logits = model_forward(inst->tokens, params, cfg, nullptr, nullptr, true);
            Tensor loss = lm_loss(logits, inst->tokens);
            const std::size_t n = inst->tokens.size() - 1;
            loss_sum += static_cast<double>(loss.scalar()) * static_cast<double>(n);
            token_count += n;
        }
        out[domain] = std::exp(loss_sum / static_cast<double>(token_count));
    }
    return out;
}

std::vector<UtilizationWindow> utilization_report(const std::vector<TraceRow>& trace,
                                                  std::size_t window_steps,
                                                  std::size_t num_experts,
                                                  double threshold_num) {
    if (window_steps == 0) throw ContractError("utilization_report: window_steps must be >= 1");
    const double threshold = threshold_num / static_cast<double>(num_experts);
    // (window, layer, expert) triples with any weight above threshold
    std::map<std::size_t, std::set<std::pair<std::size_t, std::size_t>>> active;
    std::size_t max_window = 0;
    for (const auto& row : trace) {
        const std::size_t w = row.step / window_steps;
        max_window = std::max(max_window, w);
        for (std::size_t e = 0; e < row.weights.size(); ++e) {
            if (row.weights[e] > threshold) active[w].insert({row.layer, e});
        }
    }
    std::vector<UtilizationWindow> out;
    if (trace.empty()) return out;
    for (std::size_t w = 0; w <= max_window; ++w)
        out.push_back({w, active.count(w) ? active[w].size() : 0});
    return out;
}

namespace {

double tv_distance(const std::vector<double>& p, const std::vector<double>& q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
    return 0.5 * acc;
}

SpecializationReport summarize(const std::map<std::size_t,
                                              std::map<std::string, std::vector<double>>>& sums,
                               const std::map<std::size_t, std::map<std::string, std::size_t>>&
                                   counts) {
    SpecializationReport report;
    for (const auto& [layer, by_domain] : sums) {
        SpecializationLayer sl;
        sl.layer = layer;
        for (const auto& [domain, sum] : by_domain) {
            const double n = static_cast<double>(counts.at(layer).at(domain));
            std::vector<double> mean(sum.size());
            for (std::size_t i = 0; i < sum.size(); ++i) mean[i] = sum[i] / n;
            const std::size_t arg = static_cast<std::size_t>(
                std::max_element(mean.begin(), mean.end()) - mean.begin());
            sl.argmax_expert[domain] = arg;
            sl.domain_means[domain] = std::move(mean);
        }
        for (auto a = sl.domain_means.begin(); a != sl.domain_means.end(); ++a) {
            for (auto b = std::next(a); b != sl.domain_means.end(); ++b)
                sl.max_tv_distance =
                    std::max(sl.max_tv_distance, tv_distance(a->second, b->second));
        }
        report.layers.push_back(std::move(sl));
    }
    return report;
}

}  // namespace

SpecializationReport specialization_from_trace(const std::vector<TraceRow>& trace,
                                               std::size_t num_layers,
                                               std::size_t num_experts) {
    std::map<std::size_t, std::map<std::string, std::vector<double>>> sums;
    std::map<std::size_t, std::map<std::string, std::size_t>> counts;
    for (const auto& row : trace) {
        auto& sum = sums[row.layer][row.domain];
        if (sum.empty()) sum.assign(num_experts, 0.0);
        for (std::size_t i = 0; i < row.weights.size(); ++i) sum[i] += row.weights[i];
        counts[row.layer][row.domain]++;
    }
    for (std::size_t l = 0; l < num_layers; ++l) {
        if (!sums.count(l)) throw DataError("specialization: no trace rows for layer " +
                                            std::to_string(l));
    }
    return summarize(sums, counts);
}

SpecializationReport specialization_report(ModelParams& params, const ModelConfig& cfg,
                                           const std::vector<TrainingInstance>& instances) {
    auto groups = group_by_domain(instances);
    if (groups.size() < 2)
        throw DataError("specialization_report: need >= 2 domains, got " +
                        std::to_string(groups.size()));
    std::vector<TraceRow> trace;
    for (const auto& [domain, insts] : groups) {
        if (insts.empty()) throw DataError("specialization_report: empty domain " + domain);
        for (const auto* inst : insts) {
            ForwardTrace ftrace;
            (void)model_forward(inst->tokens, params, cfg, &ftrace, nullptr, true);
            for (std::size_t li = 0; li < ftrace.layer_plans.size(); ++li) {
                for (std::size_t s = 0; s < ftrace.layer_plans[li].size(); ++s) {
                    TraceRow row;
                    row.layer = li;
                    row.domain = domain;
                    row.segment = s;
                    row.weights = ftrace.layer_plans[li][s];
                    trace.push_back(std::move(row));
                }
            }
        }
    }
    return specialization_from_trace(trace, cfg.num_layers, cfg.num_experts);
}

std::uint64_t ffn_flops(std::uint64_t L, std::uint64_t d, std::uint64_t d_ff) {
    return 6ull * L * d * d_ff;
}

std::uint64_t merge_overhead_flops(std::uint64_t L, std::uint64_t T, std::uint64_t E,
                                   std::uint64_t d, std::uint64_t d_ff) {
    const std::uint64_t decisions = (L + T - 1) / T;
    return decisions * 6ull * E * d * d_ff;
}

Ratio flops_overhead(std::uint64_t E, std::uint64_t T) {
    const std::uint64_t g = std::gcd(E, T);
    return Ratio{E / g, T / g};
}

std::vector<GapPoint> loss_gap_curve(const std::vector<MetricsRow>& dense,
                                     const std::vector<MetricsRow>& moe) {
    if (dense.empty() || moe.empty()) throw DataError("loss_gap_curve: empty metrics log");
    const std::size_t moe_lo = moe.front().step, moe_hi = moe.back().step;
    std::vector<GapPoint> out;
    for (const auto& drow : dense) {
        if (drow.step < moe_lo || drow.step > moe_hi) continue;
        // linear interpolation of the moe log at drow.step
        auto it = std::lower_bound(moe.begin(), moe.end(), drow.step,
                                   [](const MetricsRow& r, std::size_t s) { return r.step < s; });
        double moe_loss;
        if (it->step == drow.step || it == moe.begin()) {
            moe_loss = it->loss;
        } else {
            const auto& hi = *it;
            const auto& lo = *std::prev(it);
            const double f = static_cast<double>(drow.step - lo.step) /
                             static_cast<double>(hi.step - lo.step);
            moe_loss = lo.loss + f * (hi.loss - lo.loss);
        }
        out.push_back({drow.step, drow.loss - moe_loss});
    }
    if (out.empty()) throw DataError("loss_gap_curve: disjoint step ranges");
    return out;
}

void write_specialization_csv(const std::string& path, const SpecializationReport& report) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path);
    out << "layer,domain,expert,mean_weight\n";
    for (const auto& sl : report.layers) {
        for (const auto& [domain, mean] : sl.domain_means) {
            for (std::size_t e = 0; e < mean.size(); ++e)
                out << sl.layer << "," << domain << "," << e << "," << mean[e] << "\n";
        }
    }
}

void write_utilization_csv(const std::string& path, const std::vector<UtilizationWindow>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path);
    out << "window,active_count\n";
    for (const auto& r : rows) out << r.window << "," << r.active_count << "\n";
}

void write_flops_csv(const std::string& path, const ModelConfig& cfg) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path);
    const auto ratio = flops_overhead(cfg.num_experts, cfg.segment_length);
    out << "component,count\n";
    out << "ffn_flops," << ffn_flops(cfg.context_length, cfg.model_dim, cfg.ffn_dim) << "\n";
    out << "merge_overhead_flops,"
        << merge_overhead_flops(cfg.context_length, cfg.segment_length, cfg.num_experts,
                                cfg.model_dim, cfg.ffn_dim)
        << "\n";
    out << "overhead_ratio," << ratio.num << "/" << ratio.den << "\n";
    out << "overhead_percent," << ratio.percent() << "\n";
}

void write_lossgap_csv(const std::string& path, const std::vector<GapPoint>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path);
    out << "step,gap\n";
    for (const auto& r : rows) out << r.step << "," << r.gap << "\n";
}

std::string specialization_heatmap(const SpecializationReport& report) {
    std::ostringstream os;
    const char* shades = " .:-=+*#%@";
    for (const auto& sl : report.layers) {
        os << "layer " << sl.layer << " (max TV " << sl.max_tv_distance << ")\n";
        for (const auto& [domain, mean] : sl.domain_means) {
            os << "  " << domain << " ";
            for (double w : mean) {
                const int idx = std::min(9, static_cast<int>(w * 10.0));
                os << shades[std::max(0, idx)];
            }
            os << "  argmax=e" << sl.argmax_expert.at(domain) << "\n";
        }
    }
    return os.str();
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("read_metrics: cannot open " + path);
    std::vector<MetricsRow> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            MetricsRow r;
            r.step = j.at("step").get<std::size_t>();
            r.loss = j.at("loss").get<double>();
            r.lr = j.at("lr").get<double>();
            r.tokens = j.at("tokens").get<std::uint64_t>();
            r.mode = j.at("mode").get<std::string>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("read_metrics: bad record: ") + e.what());
        }
    }
    return out;
}

}  // namespace moelab
