// moelab: train and analyze expert-merging MoE language models at desk scale.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include "moelab/analysis.hpp"
#include "moelab/batching.hpp"
#include "moelab/training.hpp"

namespace {

using namespace moelab;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid JSON in " + path + ": " + e.what());
    }
}

// Applies flat dotted-key overrides like model.num_experts=8.
void apply_overrides(nlohmann::json& cfg, const std::vector<std::string>& overrides) {
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must look like key=value, got: " + kv);
        const std::string key = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);
        nlohmann::json* node = &cfg;
        std::size_t pos = 0;
        while (true) {
            const auto dot = key.find('.', pos);
            const std::string part = key.substr(pos, dot - pos);
            if (dot == std::string::npos) {
                nlohmann::json parsed;
                try {
                    parsed = nlohmann::json::parse(value);
                } catch (const nlohmann::json::exception&) {
                    parsed = value;  // bare string
                }
                (*node)[part] = parsed;
                break;
            }
            node = &(*node)[part];
            pos = dot + 1;
        }
    }
}

void persist_effective_config(const std::string& out_dir, const nlohmann::json& effective) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/effective_config.json");
    out << effective.dump(2) << "\n";
}

struct RunConfig {
    ModelConfig model;
    TrainPlan plan;

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig rc;
        if (j.contains("model")) rc.model = ModelConfig::from_json(j.at("model"));
        if (j.contains("train")) rc.plan = TrainPlan::from_json(j.at("train"));
        rc.model.validate();
        rc.plan.validate(rc.model);
        return rc;
    }
};

int cmd_batch(const std::string& corpus, const std::string& out, const std::string& mode,
              std::size_t seq_len, const std::string& embedder,
              const std::string& embeddings_path, std::uint64_t seed, std::size_t knn) {
    auto docs = ingest_corpus(corpus);
    std::vector<TrainingInstance> instances;
    double adjacent_cosine = 0.0;
    if (mode == "sim") {
        auto embeds = embed_documents(docs,
                                      embedder == "file" ? EmbedderKind::File
                                                         : EmbedderKind::HashedBow,
                                      embeddings_path);
        const std::size_t k = std::min(knn, docs.size() - 1);
        auto neighbors = top_k_neighbors(embeds, k);
        auto order = greedy_chain(embeds, neighbors);
        adjacent_cosine = mean_adjacent_cosine(embeds, order);
        instances = pack_instances(docs, order, seq_len, "sim");
    } else if (mode == "rand") {
        instances = random_batching(docs, seq_len, seed);
        auto embeds = embed_documents(docs);
        std::vector<std::size_t> order(docs.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(seed);
        std::shuffle(order.begin(), order.end(), rng);
        adjacent_cosine = mean_adjacent_cosine(embeds, order);
    } else {
        throw ConfigError("invalid --mode: " + mode + " (expected sim or rand)");
    }
    InstancesHeader header{seq_len, kByteVocabSize, mode, seed, instances.size()};
    write_instances(out, instances, header);
    std::cout << "documents: " << docs.size() << "\n"
              << "instances: " << instances.size() << "\n"
              << "mean_adjacent_cosine: " << adjacent_cosine << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& data, const std::string& out_dir, const std::string& resume,
              bool trace) {
    nlohmann::json j = config_path.empty() ? nlohmann::json::object() : load_json_file(config_path);
    apply_overrides(j, overrides);
    RunConfig rc = RunConfig::from_json(j);
    auto instances = read_instances(data);
    persist_effective_config(out_dir,
                             {{"model", rc.model.to_json()}, {"train", rc.plan.to_json()}});
    TrainOptions options;
    options.out_dir = out_dir;
    options.record_trace = trace;
    options.resume_from = resume;
    TrainResult result = train(rc.plan, rc.model, instances, options);
    std::cout << "final_loss: " << (result.metrics.empty() ? 0.0 : result.metrics.back().loss)
              << "\n"
              << "checkpoint: " << result.final_checkpoint << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& group_by) {
    Checkpoint ck = load_checkpoint(ckpt);
    auto instances = read_instances(data);
    if (group_by != "domain" && !group_by.empty())
        throw ConfigError("unsupported --group-by: " + group_by);
    auto ppl = perplexity(ck.params, ck.config, instances);
    std::cout << "domain,perplexity\n";
    for (const auto& [domain, p] : ppl)
        std::cout << (domain.empty() ? "(all)" : domain) << "," << p << "\n";
    return kExitOk;
}

int cmd_analyze(const std::string& ckpt, const std::string& data, const std::string& report,
                const std::string& out_dir, const std::string& trace_path,
                const std::string& dense_metrics, const std::string& moe_metrics,
                std::size_t window) {
    std::filesystem::create_directories(out_dir);
    if (report == "flops") {
        Checkpoint ck = load_checkpoint(ckpt);
        write_flops_csv(out_dir + "/flops.csv", ck.config);
        const auto ratio = flops_overhead(ck.config.num_experts, ck.config.segment_length);
        std::cout << "overhead_ratio: " << ratio.num << "/" << ratio.den << " = "
                  << ratio.percent() << "%\n";
        return kExitOk;
    }
    if (report == "lossgap") {
        auto gap = loss_gap_curve(read_metrics(dense_metrics), read_metrics(moe_metrics));
        write_lossgap_csv(out_dir + "/lossgap.csv", gap);
        std::cout << "points: " << gap.size() << "\n";
        return kExitOk;
    }
    if (report == "utilization") {
        Checkpoint ck = load_checkpoint(ckpt);
        std::vector<TraceRow> trace;
        if (!trace_path.empty()) {
            std::ifstream in(trace_path);
            if (!in) throw DataError("cannot open trace file " + trace_path);
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                auto tj = nlohmann::json::parse(line);
                TraceRow r;
                r.step = tj.at("step").get<std::size_t>();
                r.layer = tj.at("layer").get<std::size_t>();
                r.segment = tj.at("segment").get<std::size_t>();
                r.domain = tj.at("domain").get<std::string>();
                r.weights = tj.at("weights").get<std::vector<double>>();
                trace.push_back(std::move(r));
            }
        }
        auto rows = utilization_report(trace, window, ck.config.num_experts);
        write_utilization_csv(out_dir + "/utilization.csv", rows);
        std::cout << "windows: " << rows.size() << "\n";
        if (!rows.empty()) std::cout << "final_active: " << rows.back().active_count << "\n";
        return kExitOk;
    }
    if (report == "specialization") {
        Checkpoint ck = load_checkpoint(ckpt);
        auto instances = read_instances(data);
        auto rep = specialization_report(ck.params, ck.config, instances);
        write_specialization_csv(out_dir + "/specialization.csv", rep);
        std::cout << specialization_heatmap(rep);
        return kExitOk;
    }
    throw ConfigError("unknown --report: " + report);
}

int cmd_generate(const std::string& ckpt, const std::string& prompt, std::size_t max_tokens,
                 const std::string& routing) {
    Checkpoint ck = load_checkpoint(ckpt);
    InferenceRouting r;
    if (routing == "prompt") r = InferenceRouting::Prompt;
    else if (routing == "segment") r = InferenceRouting::Segment;
    else throw ConfigError("invalid --routing: " + routing + " (expected prompt or segment)");
    auto ids = tokenize(prompt);
    auto out = generate(ids, ck.params, ck.config, max_tokens, r);
    std::cout << detokenize(out) << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale training laboratory for expert-merging MoE language models"};
    app.require_subcommand(1);

    // batch
    auto* batch = app.add_subcommand("batch", "Build training instances from a corpus");
    std::string corpus, batch_out, batch_mode = "sim", embedder = "hashed", embeddings_path;
    std::size_t seq_len = 512, knn = 20;
    std::uint64_t batch_seed = 0;
    batch->add_option("--corpus", corpus, "Corpus JSONL path")->required();
    batch->add_option("--out", batch_out, "Output instances file")->required();
    batch->add_option("--mode", batch_mode, "sim or rand");
    batch->add_option("--seq-len", seq_len, "Instance length L");
    batch->add_option("--embedder", embedder, "hashed or file");
    batch->add_option("--embeddings", embeddings_path, "Embeddings file (embedder=file)");
    batch->add_option("--seed", batch_seed, "Shuffle seed (rand mode)");
    batch->add_option("--knn", knn, "Neighbor list size (sim mode)");

    // train
    auto* trainc = app.add_subcommand("train", "Train a model");
    std::string config_path, data_path, train_out, resume;
    std::vector<std::string> overrides;
    bool record_trace = false;
    trainc->add_option("--config", config_path, "JSON config file");
    trainc->add_option("--data", data_path, "Instances file")->required();
    trainc->add_option("--out", train_out, "Output directory")->required();
    trainc->add_option("--set", overrides, "Dotted-key config overrides (key=value)");
    trainc->add_option("--resume", resume, "Checkpoint to resume from");
    trainc->add_flag("--trace", record_trace, "Record routing traces");
    std::size_t workers = 1;
    trainc->add_option("--workers", workers, "Worker processes (instances are always "
                                             "reduced in a fixed order)");

    // eval
    auto* evalc = app.add_subcommand("eval", "Perplexity on held-out instances");
    std::string eval_ckpt, eval_data, group_by = "domain";
    evalc->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
    evalc->add_option("--data", eval_data, "Instances file")->required();
    evalc->add_option("--group-by", group_by, "Grouping key (domain)");

    // analyze
    auto* analyzec = app.add_subcommand("analyze", "Diagnostics reports (CSV)");
    std::string an_ckpt, an_data, an_report, an_out = ".", an_trace, dense_metrics, moe_metrics;
    std::size_t window = 10;
    analyzec->add_option("--ckpt", an_ckpt, "Checkpoint path");
    analyzec->add_option("--data", an_data, "Instances file");
    analyzec
        ->add_option("--report", an_report, "utilization|specialization|flops|lossgap")
        ->required();
    analyzec->add_option("--out", an_out, "Output directory");
    analyzec->add_option("--trace", an_trace, "Routing trace file (utilization)");
    analyzec->add_option("--dense-metrics", dense_metrics, "Dense metrics log (lossgap)");
    analyzec->add_option("--moe-metrics", moe_metrics, "MoE metrics log (lossgap)");
    analyzec->add_option("--window", window, "Utilization window in steps");

    // generate
    auto* genc = app.add_subcommand("generate", "Greedy decoding from a prompt");
    std::string gen_ckpt, gen_prompt, gen_routing = "prompt";
    std::size_t max_tokens = 64;
    genc->add_option("--ckpt", gen_ckpt, "Checkpoint path")->required();
    genc->add_option("--prompt", gen_prompt, "Prompt text")->required();
    genc->add_option("--max-tokens", max_tokens, "Tokens to generate");
    genc->add_option("--routing", gen_routing, "prompt or segment");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (batch->parsed())
            return cmd_batch(corpus, batch_out, batch_mode, seq_len, embedder, embeddings_path,
                             batch_seed, knn);
        if (trainc->parsed())
            return cmd_train(config_path, overrides, data_path, train_out, resume, record_trace);
        if (evalc->parsed()) return cmd_eval(eval_ckpt, eval_data, group_by);
        if (analyzec->parsed())
            return cmd_analyze(an_ckpt, an_data, an_report, an_out, an_trace, dense_metrics,
                               moe_metrics, window);
        if (genc->parsed()) return cmd_generate(gen_ckpt, gen_prompt, max_tokens, gen_routing);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitUsage;
}
