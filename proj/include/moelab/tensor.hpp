#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

#ifdef MOELAB_REAL_FLOAT32
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// One record in the reverse-mode graph. Nodes are owned by the tensors that
// reference them; a graph is whatever is reachable from a loss node through
// `parents`. Graphs are rebuilt per forward pass, parameters are long-lived
// leaf nodes whose grads accumulate across backward calls until reset.
struct Node {
    Shape shape;
    std::vector<real> values;
    std::vector<real> grad;  // sized on demand, same extent as values
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // adds into parents' grads
    std::uint64_t id = 0;
    const char* op = "leaf";

    Node();
    void ensure_grad();
};

// Value-semantics handle onto a graph node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false);
    static Tensor scalar_value(real v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }
    std::size_t numel() const { return node_->values.size(); }

    std::vector<real>& values() { return node_->values; }
    const std::vector<real>& values() const { return node_->values; }
    std::vector<real>& grad() { node_->ensure_grad(); return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void zero_grad() { node_->grad.assign(node_->values.size(), real(0)); }

    real scalar() const;

    std::shared_ptr<Node> node() const { return node_; }
    std::uint64_t node_id() const { return node_->id; }

private:
    std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from a scalar loss. Visits nodes in reverse
// topological order exactly once; repeated calls without zeroing accumulate.
void backward(const Tensor& loss);

// --- primitive ops -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, real c);
Tensor scale_by(const Tensor& a, const Tensor& s);  // s is 1x1, result a*s
Tensor silu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor causal_softmax_rows(const Tensor& a);  // square; row i normalizes cols 0..i
Tensor mean_axis(const Tensor& a, int axis);  // 0 -> 1xn, 1 -> mx1
Tensor sum(const Tensor& a);                  // scalar
Tensor embedding(const Tensor& table, const std::vector<std::int32_t>& ids);
Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, real eps = real(1e-5));
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<std::int32_t>& targets);
Tensor stop_gradient(const Tensor& a);

// Freezing detached branches: while recording, stop_gradient stores each
// output's values; while replaying, it reuses them (in call order) instead of
// the freshly computed input. Finite-difference oracles use this so the
// detached function stays fixed at its baseline values during perturbation.
void detach_record_begin();
void detach_replay_begin();
void detach_capture_end();
// sum_i weights[0,i] * parts[i]; gradients flow to both weights and parts
Tensor linear_combination(const Tensor& weights, const std::vector<Tensor>& parts);

}  // namespace moelab
