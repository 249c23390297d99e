#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "moelab/training.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.context_length = 8;
    cfg.segment_length = 4;
    cfg.num_experts = 2;
    cfg.num_layers = 1;
    cfg.model_dim = 8;
    cfg.ffn_dim = 8;
    cfg.num_heads = 2;
    cfg.vocab_size = 64;
    cfg.routing_mode = RoutingMode::CausalSegment;
    cfg.validate();
    return cfg;
}

std::vector<TrainingInstance> toy_instances(const ModelConfig& cfg, std::size_t count,
                                            std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int32_t> d(0, std::int32_t(cfg.vocab_size) - 1);
    std::vector<TrainingInstance> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i].tokens.resize(cfg.context_length);
        for (auto& t : out[i].tokens) t = d(rng);
        out[i].provenance.push_back(
            {"doc" + std::to_string(i), i % 2 ? "odd" : "even", 0, cfg.context_length});
        out[i].batching_mode = "sim";
    }
    return out;
}

fs::path temp_dir(const std::string& leaf) {
    auto dir = fs::temp_directory_path() / "moelab_training_tests" / leaf;
    fs::create_directories(dir);
    return dir;
}

std::vector<real> flatten(ModelParams& p) {
    std::vector<real> all;
    for (auto& [name, t] : p.named_params())
        all.insert(all.end(), t.values().begin(), t.values().end());
    return all;
}

}  // namespace

TEST_CASE("learning rate ramps linearly then decays on a cosine") {
    TrainPlan plan;
    plan.total_steps = 1000;
    plan.warmup_fraction = 0.05;  // 50 warmup steps
    plan.base_lr = 2e-4;
    plan.min_lr_fraction = 0.1;
    CHECK(lr_at(0, plan) == doctest::Approx(0.0));
    CHECK(lr_at(25, plan) == doctest::Approx(1e-4));
    CHECK(lr_at(50, plan) == doctest::Approx(2e-4));
    // Cosine midpoint: mean of base and floor.
    CHECK(lr_at(525, plan) == doctest::Approx(0.5 * (2e-4 + 2e-5)));
    CHECK(lr_at(1000, plan) == doctest::Approx(2e-5));
    CHECK_THROWS_AS(lr_at(1001, plan), ContractError);
    // Monotone decay after warmup.
    for (std::size_t s = 51; s <= 1000; ++s) CHECK(lr_at(s, plan) <= lr_at(s - 1, plan) + 1e-18);
}

TEST_CASE("one AdamW step matches the hand-computed update") {
    // p=1, grad=0.5, lr=0.1, beta=(0.9, 0.999), wd=0.1:
    // mhat = 0.5, vhat = 0.25, p' = 1 - 0.1*(0.5/0.5 + 0.1*1) = 0.89.
    AdamW opt(0.9, 0.999, 1e-8, 0.1);
    Tensor p = Tensor::from({1, 1}, {1.0}, true);
    p.zero_grad();
    p.grad()[0] = real(0.5);
    std::vector<std::pair<std::string, Tensor>> params{{"p", p}};
    opt.step(params, 0.1);
    CHECK(double(p.values()[0]) == doctest::Approx(0.89).epsilon(1e-6));
}

TEST_CASE("AdamW matches an independent scalar reference over many steps") {
    const double beta1 = 0.9, beta2 = 0.95, eps = 1e-8, wd = 0.1, lr = 0.01;
    AdamW opt(beta1, beta2, eps, wd);
    Tensor p = Tensor::from({1, 1}, {0.3}, true);
    std::vector<std::pair<std::string, Tensor>> params{{"p", p}};

    double ref = 0.3, m = 0.0, v = 0.0;
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int t = 1; t <= 25; ++t) {
        const double grad = g(rng);
        p.zero_grad();
        p.grad()[0] = real(grad);
        opt.step(params, lr);
        // Reference: textbook decoupled-weight-decay Adam.
        m = beta1 * m + (1 - beta1) * grad;
        v = beta2 * v + (1 - beta2) * grad * grad;
        const double mhat = m / (1 - std::pow(beta1, t));
        const double vhat = v / (1 - std::pow(beta2, t));
        ref -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * ref);
        CHECK(double(p.values()[0]) == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("dropping moments restarts bias correction for matching names") {
    AdamW opt(0.9, 0.95, 1e-8, 0.0);
    Tensor a = Tensor::from({1, 1}, {1.0}, true);
    Tensor b = Tensor::from({1, 1}, {1.0}, true);
    std::vector<std::pair<std::string, Tensor>> params{{"layers.0.experts.0.w_gate", a},
                                                       {"w_out", b}};
    for (int i = 0; i < 3; ++i) {
        a.zero_grad();
        b.zero_grad();
        a.grad()[0] = b.grad()[0] = real(1.0);
        opt.step(params, 0.01);
    }
    opt.drop_moments_matching(".experts.");
    CHECK(opt.moments().count("layers.0.experts.0.w_gate") == 0);
    CHECK(opt.moments().at("w_out").t == 3);
}

TEST_CASE("non-finite gradients fail loudly with the parameter name") {
    AdamW opt(0.9, 0.95, 1e-8, 0.0);
    Tensor p = Tensor::from({1, 1}, {1.0}, true);
    p.zero_grad();
    p.grad()[0] = std::numeric_limits<real>::infinity();
    std::vector<std::pair<std::string, Tensor>> params{{"bad_param", p}};
    CHECK_THROWS_WITH_AS(opt.step(params, 0.01), doctest::Contains("bad_param"), NumericError);
}

TEST_CASE("gradient clipping rescales only above the threshold") {
    Tensor a = Tensor::from({1, 2}, {0, 0}, true);
    a.zero_grad();
    a.grad()[0] = real(3.0);
    a.grad()[1] = real(4.0);  // norm 5
    std::vector<std::pair<std::string, Tensor>> params{{"a", a}};
    const double norm = clip_global_norm(params, 1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(double(a.grad()[0]) == doctest::Approx(0.6));
    CHECK(double(a.grad()[1]) == doctest::Approx(0.8));

    a.grad()[0] = real(0.3);
    a.grad()[1] = real(0.4);
    const double small = clip_global_norm(params, 1.0);
    CHECK(small == doctest::Approx(0.5));
    CHECK(double(a.grad()[0]) == doctest::Approx(0.3));  // untouched
}

TEST_CASE("duplication clones the dense FFN into every expert and keeps logits") {
    ModelConfig dense_cfg = tiny_config();
    dense_cfg.routing_mode = RoutingMode::Dense;
    dense_cfg.num_experts = 1;
    ModelParams dense = init_params(dense_cfg, 3);

    ModelConfig moe_cfg = tiny_config();
    moe_cfg.num_experts = 4;
    ModelParams moe = duplicate_to_moe(dense, moe_cfg, 99);

    for (std::size_t e = 0; e < 4; ++e) {
        CHECK(moe.layers[0].bank.experts[e].w_gate.values() ==
              dense.layers[0].bank.experts[0].w_gate.values());
        CHECK(moe.layers[0].bank.experts[e].w_down.values() ==
              dense.layers[0].bank.experts[0].w_down.values());
    }
    // With identical experts any merge is the dense FFN, so logits agree for
    // arbitrary router values.
    std::vector<std::int32_t> toks{5, 9, 2, 7, 1, 0, 3, 8};
    Tensor a = model_forward(toks, dense, dense_cfg);
    Tensor b = model_forward(toks, moe, moe_cfg);
    for (std::size_t i = 0; i < a.numel(); ++i)
        CHECK(std::abs(double(a.values()[i] - b.values()[i])) < 1e-6);

    // Router draw is deterministic in the seed.
    ModelParams again = duplicate_to_moe(dense, moe_cfg, 99);
    CHECK(again.layers[0].bank.router.values() == moe.layers[0].bank.router.values());
}

TEST_CASE("checkpoints round-trip parameters, phase, and optimizer moments") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 5);
    TrainPlan plan;
    plan.total_steps = 10;
    plan.batch_size_tokens = cfg.context_length;
    AdamW opt(plan);
    auto params = p.named_params();
    for (auto& [name, t] : params) {
        t.zero_grad();
        for (auto& g : t.grad()) g = real(0.01);
    }
    opt.step(params, 1e-3);

    auto path = (temp_dir("ckpt") / "model.bin").string();
    save_checkpoint(path, cfg, "moe", 5, 7, p, &plan, &opt);
    Checkpoint back = load_checkpoint(path);
    CHECK(back.phase == "moe");
    CHECK(back.seed == 5);
    CHECK(back.step == 7);
    CHECK(back.config.model_dim == cfg.model_dim);
    REQUIRE(back.plan.has_value());
    CHECK(back.plan->total_steps == 10);
    auto orig = p.named_params(), loaded = back.params.named_params();
    REQUIRE(orig.size() == loaded.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
        CHECK(orig[i].first == loaded[i].first);
        CHECK(orig[i].second.values() == loaded[i].second.values());  // bit-exact
    }
    CHECK(back.moments.at("w_out").t == 1);
    CHECK(back.moments.at("w_out").m == opt.moments().at("w_out").m);
}

TEST_CASE("config mismatch on load names the offending field") {
    ModelConfig a = tiny_config();
    ModelConfig b = tiny_config();
    b.num_experts = 4;
    CHECK_THROWS_WITH_AS(require_same_config(a, b), doctest::Contains("num_experts"),
                         ConfigError);
}

TEST_CASE("training is deterministic given a seed") {
    ModelConfig cfg = tiny_config();
    TrainPlan plan;
    plan.total_steps = 6;
    plan.dense_warmup_fraction = 0.5;  // 3 dense steps, then duplicate
    plan.warmup_fraction = 0.2;
    plan.batch_size_tokens = 2 * cfg.context_length;
    plan.seed = 11;
    plan.base_lr = 1e-3;
    auto data = toy_instances(cfg, 5, 1);

    auto out1 = temp_dir("det1"), out2 = temp_dir("det2");
    TrainResult r1 = train(plan, cfg, data, {out1.string(), false, "", 0});
    TrainResult r2 = train(plan, cfg, data, {out2.string(), false, "", 0});
    REQUIRE(r1.metrics.size() == r2.metrics.size());
    for (std::size_t i = 0; i < r1.metrics.size(); ++i) {
        CHECK(r1.metrics[i].loss == r2.metrics[i].loss);
        CHECK(std::isfinite(r1.metrics[i].loss));
    }
    Checkpoint c1 = load_checkpoint(r1.final_checkpoint);
    Checkpoint c2 = load_checkpoint(r2.final_checkpoint);
    CHECK(flatten(c1.params) == flatten(c2.params));
    CHECK(c1.phase == "moe");
}

TEST_CASE("interrupted training resumes bit-exactly") {
    ModelConfig cfg = tiny_config();
    TrainPlan plan;
    plan.total_steps = 8;
    plan.dense_warmup_fraction = 0.25;  // 2 dense steps
    plan.warmup_fraction = 0.25;
    plan.batch_size_tokens = cfg.context_length;
    plan.seed = 21;
    plan.base_lr = 1e-3;
    plan.eval_interval = 4;
    auto data = toy_instances(cfg, 3, 2);

    auto full_dir = temp_dir("full"), part_dir = temp_dir("part");
    TrainResult full = train(plan, cfg, data, {full_dir.string(), false, "", 0});
    TrainResult part = train(plan, cfg, data, {part_dir.string(), false, "", 4});
    Checkpoint mid = load_checkpoint(part.final_checkpoint);
    CHECK(mid.step == 4);
    TrainResult rest =
        train(plan, cfg, data, {part_dir.string(), false, part.final_checkpoint, 0});

    Checkpoint a = load_checkpoint(full.final_checkpoint);
    Checkpoint b = load_checkpoint(rest.final_checkpoint);
    CHECK(a.step == 8);
    CHECK(b.step == 8);
    CHECK(flatten(a.params) == flatten(b.params));  // bit-exact resume
}

TEST_CASE("trace rows label segments with the dominant provenance domain") {
    ModelConfig cfg = tiny_config();
    TrainPlan plan;
    plan.total_steps = 2;
    plan.dense_warmup_fraction = 0.0;  // MoE from the start
    plan.batch_size_tokens = cfg.context_length;
    plan.seed = 31;
    auto data = toy_instances(cfg, 2, 3);
    TrainResult r = train(plan, cfg, data, {"", true, "", 0});
    REQUIRE(!r.trace.empty());
    const std::size_t segments = cfg.num_segments();
    CHECK(r.trace.size() == plan.total_steps * cfg.num_layers * segments);
    for (const auto& row : r.trace) {
        CHECK((row.domain == "odd" || row.domain == "even"));
        REQUIRE(row.weights.size() == cfg.num_experts);
        double total = 0.0;
        for (double w : row.weights) total += w;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("plan validation rejects a batch size that is not a multiple of L") {
    ModelConfig cfg = tiny_config();
    TrainPlan plan;
    plan.batch_size_tokens = cfg.context_length + 1;
    CHECK_THROWS_AS(plan.validate(cfg), ConfigError);
}
