#include "moelab/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace moelab {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

ConstMatMap as_mat(const Node& n) {
    return ConstMatMap(n.values.data(), static_cast<Eigen::Index>(n.shape[0]),
                       static_cast<Eigen::Index>(n.shape.size() > 1 ? n.shape[1] : 1));
}

MatMap grad_mat(Node& n) {
    n.ensure_grad();
    return MatMap(n.grad.data(), static_cast<Eigen::Index>(n.shape[0]),
                  static_cast<Eigen::Index>(n.shape.size() > 1 ? n.shape[1] : 1));
}

ConstMatMap grad_cmat(const Node& n) {
    return ConstMatMap(n.grad.data(), static_cast<Eigen::Index>(n.shape[0]),
                       static_cast<Eigen::Index>(n.shape.size() > 1 ? n.shape[1] : 1));
}

void require_2d(const char* op, const Tensor& t) {
    if (t.shape().size() > 2) {
        throw ShapeError(std::string(op) + ": expected rank<=2 tensor, got shape " +
                         shape_str(t.shape()));
    }
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Tensor make_result(Shape shape, const char* op, std::vector<Tensor> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values.assign(shape_numel(n->shape), real(0));
    n->op = op;
    bool rg = false;
    for (auto& p : parents) {
        rg = rg || p.requires_grad();
        n->parents.push_back(p.node());
    }
    n->requires_grad = rg;
    return Tensor(std::move(n));
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

Node::Node() : id(g_next_node_id.fetch_add(1, std::memory_order_relaxed)) {}

void Node::ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), real(0));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->values.assign(shape_numel(shape), real(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<real> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("Tensor::from: shape " + shape_str(shape) + " expects " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar_value(real v, bool requires_grad) {
    return from({1, 1}, {v}, requires_grad);
}

real Tensor::scalar() const {
    if (numel() != 1) {
        throw ContractError("Tensor::scalar: tensor has " + std::to_string(numel()) +
                            " elements, expected 1");
    }
    return node_->values[0];
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    // Topological order by iterative DFS; reverse visit gives the fixed
    // deterministic accumulation order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->requires_grad) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

// --- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    if (a.cols() != b.rows()) shape_fail("matmul", a.shape(), b.shape());
    Tensor out = make_result({a.rows(), b.cols()}, "matmul", {a, b});
    MatMap(out.values().data(), a.rows(), b.cols()) = as_mat(*a.node()) * as_mat(*b.node());
    auto an = a.node();
    auto bn = b.node();
    out.node()->backward_fn = [an, bn](Node& self) {
        auto g = grad_cmat(self);
        if (an->requires_grad) grad_mat(*an) += g * as_mat(*bn).transpose();
        if (bn->requires_grad) grad_mat(*bn) += as_mat(*an).transpose() * g;
    };
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d("transpose", a);
    Tensor out = make_result({a.cols(), a.rows()}, "transpose", {a});
    MatMap(out.values().data(), a.cols(), a.rows()) = as_mat(*a.node()).transpose();
    auto an = a.node();
    out.node()->backward_fn = [an](Node& self) {
        if (an->requires_grad) grad_mat(*an) += grad_cmat(self).transpose();
    };
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
    Tensor out = make_result(a.shape(), "add", {a, b});
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.values()[i] = a.values()[i] + b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    out.node()->backward_fn = [an, bn](Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    };
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
    Tensor out = make_result(a.shape(), "sub", {a, b});
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.values()[i] = a.values()[i] - b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    out.node()->backward_fn = [an, bn](Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    };
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
    Tensor out = make_result(a.shape(), "mul", {a, b});
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.values()[i] = a.values()[i] * b.values()[i];
    auto an = a.node();
    auto bn = b.node();
    out.node()->backward_fn = [an, bn](Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->values[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->values[i];
        }
    };
    return out;
}

Tensor scale(const Tensor& a, real c) {
    Tensor out = make_result(a.shape(), "scale", {a});
    for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] * c;
    auto an = a.node();
    out.node()->backward_fn = [an, c](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    };
    return out;
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) {
        throw ShapeError("scale_by: scale tensor must be 1x1, got " + shape_str(s.shape()));
    }
    Tensor out = make_result(a.shape(), "scale_by", {a, s});
    const real c = s.values()[0];
    for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] * c;
    auto an = a.node();
    auto sn = s.node();
    out.node()->backward_fn = [an, sn](Node& self) {
        const real c = sn->values[0];
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
        }
        if (sn->requires_grad) {
            sn->ensure_grad();
            real acc = 0;
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                acc += self.grad[i] * an->values[i];
            sn->grad[0] += acc;
        }
    };
    return out;
}

Tensor silu(const Tensor& a) {
    Tensor out = make_result(a.shape(), "silu", {a});
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const real x = a.values()[i];
        out.values()[i] = x / (real(1) + std::exp(-x));
    }
    auto an = a.node();
    out.node()->backward_fn = [an](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const real x = an->values[i];
            const real sig = real(1) / (real(1) + std::exp(-x));
            an->grad[i] += self.grad[i] * (sig * (real(1) + x * (real(1) - sig)));
        }
    };
    return out;
}

namespace {

void softmax_row(const real* in, real* out, std::size_t n) {
    real mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    real denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - mx);
        denom += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= denom;
}

void softmax_row_backward(const real* y, const real* g, real* gin, std::size_t n) {
    real dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
    for (std::size_t j = 0; j < n; ++j) gin[j] += y[j] * (g[j] - dot);
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
    require_2d("softmax", a);
    Tensor out = make_result(a.shape(), "softmax", {a});
    const std::size_t r = a.rows(), c = a.cols();
    for (std::size_t i = 0; i < r; ++i)
        softmax_row(a.values().data() + i * c, out.values().data() + i * c, c);
    auto an = a.node();
    out.node()->backward_fn = [an, r, c](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            softmax_row_backward(self.values.data() + i * c, self.grad.data() + i * c,
                                 an->grad.data() + i * c, c);
    };
    return out;
}

Tensor causal_softmax_rows(const Tensor& a) {
    require_2d("causal_softmax", a);
    if (a.rows() != a.cols()) {
        throw ShapeError("causal_softmax: square matrix required, got " + shape_str(a.shape()));
    }
    const std::size_t n = a.rows();
    Tensor out = make_result(a.shape(), "causal_softmax", {a});
    for (std::size_t i = 0; i < n; ++i) {
        softmax_row(a.values().data() + i * n, out.values().data() + i * n, i + 1);
        // entries above the diagonal are exactly zero
        for (std::size_t j = i + 1; j < n; ++j) out.values()[i * n + j] = real(0);
    }
    auto an = a.node();
    out.node()->backward_fn = [an, n](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
            softmax_row_backward(self.values.data() + i * n, self.grad.data() + i * n,
                                 an->grad.data() + i * n, i + 1);
    };
    return out;
}

Tensor mean_axis(const Tensor& a, int axis) {
    require_2d("mean_axis", a);
    const std::size_t r = a.rows(), c = a.cols();
    if (axis != 0 && axis != 1) throw ContractError("mean_axis: axis must be 0 or 1");
    Shape out_shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
    Tensor out = make_result(out_shape, "mean_axis", {a});
    if (axis == 0) {
        for (std::size_t j = 0; j < c; ++j) {
            real acc = 0;
            for (std::size_t i = 0; i < r; ++i) acc += a.values()[i * c + j];
            out.values()[j] = acc / real(r);
        }
    } else {
        for (std::size_t i = 0; i < r; ++i) {
            real acc = 0;
            for (std::size_t j = 0; j < c; ++j) acc += a.values()[i * c + j];
            out.values()[i] = acc / real(c);
        }
    }
    auto an = a.node();
    out.node()->backward_fn = [an, r, c, axis](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        if (axis == 0) {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    an->grad[i * c + j] += self.grad[j] / real(r);
        } else {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    an->grad[i * c + j] += self.grad[i] / real(c);
        }
    };
    return out;
}

Tensor sum(const Tensor& a) {
    Tensor out = make_result({1, 1}, "sum", {a});
    real acc = 0;
    for (real v : a.values()) acc += v;
    out.values()[0] = acc;
    auto an = a.node();
    out.node()->backward_fn = [an](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (auto& g : an->grad) g += self.grad[0];
    };
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<std::int32_t>& ids) {
    require_2d("embedding", table);
    const std::size_t v = table.rows(), d = table.cols();
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw DataError("embedding: token id " + std::to_string(id) +
                            " out of vocab range [0," + std::to_string(v) + ")");
        }
    }
    Tensor out = make_result({ids.size(), d}, "embedding", {table});
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.values().data() + i * d);
    auto tn = table.node();
    out.node()->backward_fn = [tn, ids, d](Node& self) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            real* dst = tn->grad.data() + static_cast<std::size_t>(ids[i]) * d;
            const real* src = self.grad.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    };
    return out;
}

Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, real eps) {
    require_2d("rmsnorm", x);
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.numel() != c) shape_fail("rmsnorm", x.shape(), gain.shape());
    Tensor out = make_result(x.shape(), "rmsnorm", {x, gain});
    std::vector<real> inv_rms(r);
    for (std::size_t i = 0; i < r; ++i) {
        real ms = 0;
        for (std::size_t j = 0; j < c; ++j) {
            const real v = x.values()[i * c + j];
            ms += v * v;
        }
        inv_rms[i] = real(1) / std::sqrt(ms / real(c) + eps);
        for (std::size_t j = 0; j < c; ++j)
            out.values()[i * c + j] = x.values()[i * c + j] * inv_rms[i] * gain.values()[j];
    }
    auto xn = x.node();
    auto gn = gain.node();
    out.node()->backward_fn = [xn, gn, r, c, inv_rms](Node& self) {
        for (std::size_t i = 0; i < r; ++i) {
            const real* xv = xn->values.data() + i * c;
            const real* g = self.grad.data() + i * c;
            const real ir = inv_rms[i];
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t j = 0; j < c; ++j) gn->grad[j] += g[j] * xv[j] * ir;
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                // y_j = x_j * ir * w_j with ir = (mean(x^2)+eps)^{-1/2}
                real dot = 0;
                for (std::size_t j = 0; j < c; ++j) dot += g[j] * gn->values[j] * xv[j];
                const real k = dot * ir * ir * ir / real(c);
                real* gx = xn->grad.data() + i * c;
                for (std::size_t j = 0; j < c; ++j)
                    gx[j] += g[j] * gn->values[j] * ir - k * xv[j];
            }
        }
    };
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    }
    Tensor out = make_result(shape, "reshape", {a});
    out.values() = a.values();
    auto an = a.node();
    out.node()->backward_fn = [an](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    };
    return out;
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    require_2d("slice_rows", a);
    if (r0 >= r1 || r1 > a.rows()) {
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") invalid for shape " + shape_str(a.shape()));
    }
    const std::size_t c = a.cols();
    Tensor out = make_result({r1 - r0, c}, "slice_rows", {a});
    std::copy_n(a.values().data() + r0 * c, (r1 - r0) * c, out.values().data());
    auto an = a.node();
    out.node()->backward_fn = [an, r0, c](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[r0 * c + i] += self.grad[i];
    };
    return out;
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    require_2d("slice_cols", a);
    if (c0 >= c1 || c1 > a.cols()) {
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") invalid for shape " + shape_str(a.shape()));
    }
    const std::size_t r = a.rows(), c = a.cols(), w = c1 - c0;
    Tensor out = make_result({r, w}, "slice_cols", {a});
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(a.values().data() + i * c + c0, w, out.values().data() + i * w);
    auto an = a.node();
    out.node()->backward_fn = [an, r, c, c0, w](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j)
                an->grad[i * c + c0 + j] += self.grad[i * w + j];
    };
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const std::size_t c = parts[0].cols();
    std::size_t r = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) shape_fail("concat_rows", parts[0].shape(), p.shape());
        r += p.rows();
    }
    Tensor out = make_result({r, c}, "concat_rows", parts);
    std::size_t off = 0;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> offsets;
    for (const auto& p : parts) {
        std::copy_n(p.values().data(), p.numel(), out.values().data() + off);
        offsets.emplace_back(p.node(), off);
        off += p.numel();
    }
    out.node()->backward_fn = [offsets](Node& self) {
        for (const auto& [pn, o] : offsets) {
            if (!pn->requires_grad) continue;
            pn->ensure_grad();
            for (std::size_t i = 0; i < pn->values.size(); ++i) pn->grad[i] += self.grad[o + i];
        }
    };
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t r = parts[0].rows();
    std::size_t c = 0;
    for (const auto& p : parts) {
        if (p.rows() != r) shape_fail("concat_cols", parts[0].shape(), p.shape());
        c += p.cols();
    }
    Tensor out = make_result({r, c}, "concat_cols", parts);
    std::size_t coff = 0;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> offsets;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(p.values().data() + i * w, w, out.values().data() + i * c + coff);
        offsets.emplace_back(p.node(), coff);
        coff += w;
    }
    out.node()->backward_fn = [offsets, r, c](Node& self) {
        for (const auto& [pn, o] : offsets) {
            if (!pn->requires_grad) continue;
            pn->ensure_grad();
            const std::size_t w = pn->shape[1];
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    pn->grad[i * w + j] += self.grad[i * c + o + j];
        }
    };
    return out;
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<std::int32_t>& targets) {
    require_2d("cross_entropy", logits);
    const std::size_t r = logits.rows(), v = logits.cols();
    if (targets.size() != r) {
        throw ShapeError("cross_entropy: " + std::to_string(r) + " logit rows vs " +
                         std::to_string(targets.size()) + " targets");
    }
    for (auto t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= v)
            throw DataError("cross_entropy: target " + std::to_string(t) + " out of range");
    }
    Tensor out = make_result({1, 1}, "cross_entropy", {logits});
    // saved softmax rows for backward
    auto probs = std::make_shared<std::vector<real>>(r * v);
    real loss = 0;
    for (std::size_t i = 0; i < r; ++i) {
        const real* row = logits.values().data() + i * v;
        real* prow = probs->data() + i * v;
        softmax_row(row, prow, v);
        loss -= std::log(prow[static_cast<std::size_t>(targets[i])]);
    }
    out.values()[0] = loss / real(r);
    auto ln = logits.node();
    out.node()->backward_fn = [ln, probs, targets, r, v](Node& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const real g = self.grad[0] / real(r);
        for (std::size_t i = 0; i < r; ++i) {
            const real* prow = probs->data() + i * v;
            real* grow = ln->grad.data() + i * v;
            for (std::size_t j = 0; j < v; ++j) grow[j] += g * prow[j];
            grow[static_cast<std::size_t>(targets[i])] -= g;
        }
    };
    return out;
}

namespace {
enum class DetachCapture { Off, Record, Replay };
thread_local DetachCapture g_detach_capture = DetachCapture::Off;
thread_local std::vector<std::vector<real>> g_detach_values;
thread_local std::size_t g_detach_cursor = 0;
}  // namespace

void detach_record_begin() {
    g_detach_capture = DetachCapture::Record;
    g_detach_values.clear();
    g_detach_cursor = 0;
}

void detach_replay_begin() {
    g_detach_capture = DetachCapture::Replay;
    g_detach_cursor = 0;
}

void detach_capture_end() { g_detach_capture = DetachCapture::Off; }

Tensor stop_gradient(const Tensor& a) {
    // Copies values and severs the graph; nothing upstream of `a` receives
    // gradient through this node.
    auto n = std::make_shared<Node>();
    n->shape = a.shape();
    n->values = a.values();
    switch (g_detach_capture) {
        case DetachCapture::Record:
            g_detach_values.push_back(n->values);
            break;
        case DetachCapture::Replay:
            if (g_detach_cursor < g_detach_values.size() &&
                g_detach_values[g_detach_cursor].size() == n->values.size()) {
                n->values = g_detach_values[g_detach_cursor];
            }
            ++g_detach_cursor;
            break;
        case DetachCapture::Off:
            break;
    }
    n->requires_grad = false;
    n->op = "stop_gradient";
    return Tensor(std::move(n));
}

Tensor linear_combination(const Tensor& weights, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("linear_combination: no parts");
    if (weights.numel() != parts.size()) {
        throw ShapeError("linear_combination: " + std::to_string(weights.numel()) +
                         " weights vs " + std::to_string(parts.size()) + " parts");
    }
    for (real w : weights.values()) {
        if (!std::isfinite(w))
            throw NumericError("linear_combination: non-finite weight");
    }
    for (const auto& p : parts) {
        if (p.shape() != parts[0].shape())
            shape_fail("linear_combination", parts[0].shape(), p.shape());
    }
    std::vector<Tensor> all = parts;
    all.push_back(weights);
    Tensor out = make_result(parts[0].shape(), "linear_combination", all);
    const std::size_t n = out.numel();
    // Accumulate each element's contributions in value-sorted order so the
    // result is bit-identical under any permutation of (weights, parts).
    std::vector<real> terms(parts.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < parts.size(); ++k)
            terms[k] = weights.values()[k] * parts[k].values()[i];
        std::sort(terms.begin(), terms.end());
        real acc = 0;
        for (real t : terms) acc += t;
        out.values()[i] = acc;
    }
    auto wn = weights.node();
    std::vector<std::shared_ptr<Node>> pns;
    for (const auto& p : parts) pns.push_back(p.node());
    out.node()->backward_fn = [wn, pns, n](Node& self) {
        for (std::size_t k = 0; k < pns.size(); ++k) {
            if (pns[k]->requires_grad) {
                pns[k]->ensure_grad();
                const real w = wn->values[k];
                for (std::size_t i = 0; i < n; ++i) pns[k]->grad[i] += w * self.grad[i];
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                real acc = 0;
                const real* pv = pns[k]->values.data();
                for (std::size_t i = 0; i < n; ++i) acc += self.grad[i] * pv[i];
                wn->grad[k] += acc;
            }
        }
    };
    return out;
}

}  // namespace moelab
