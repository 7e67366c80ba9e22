#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dba/tensor.hpp"

namespace dba {

struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class OpKind : std::uint8_t {
    leaf,
    matmul,
    transpose,
    add,
    scale,
    softmax_rows,
    relu,
    square,
    rms_norm,
    row_mean,
    cross_entropy_logits,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::transpose: return "transpose";
        case OpKind::add: return "add";
        case OpKind::scale: return "scale";
        case OpKind::softmax_rows: return "softmax_rows";
        case OpKind::relu: return "relu";
        case OpKind::square: return "square";
        case OpKind::rms_norm: return "rms_norm";
        case OpKind::row_mean: return "row_mean";
        case OpKind::cross_entropy_logits: return "cross_entropy_logits";
    }
    return "?";
}

/// Handle to a node on a Tape.
struct Var {
    int id = -1;
};

struct Node {
    OpKind op = OpKind::leaf;
    std::array<int, 2> parents{-1, -1};
    double scalar = 0.0;                 // factor for scale
    std::vector<std::size_t> targets;    // class indices for cross_entropy_logits
    Tensor value;
    bool requires_grad = false;
};

using GradMap = std::unordered_map<int, Tensor>;

/// Reverse-mode tape: eager forward evaluation, one backward pass.
/// Nodes are appended in topological order by construction.
class Tape {
public:
    /// Leaf whose gradient is retained by backward().
    Var parameter(Tensor value) {
        Var v = leaf(std::move(value), true);
        params_.push_back(v.id);
        return v;
    }

    /// Leaf that participates in the graph but whose gradient is discarded.
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var matmul(Var a, Var b) { return record(OpKind::matmul, a, b); }
    Var transpose(Var a) { return record(OpKind::transpose, a); }
    Var add(Var a, Var b) { return record(OpKind::add, a, b); }
    Var scale(Var a, double c) {
        Var v = record(OpKind::scale, a, Var{-1}, c);
        return v;
    }
    Var softmax_rows(Var a) { return record(OpKind::softmax_rows, a); }
    Var relu(Var a) { return record(OpKind::relu, a); }
    Var square(Var a) { return record(OpKind::square, a); }
    Var rms_norm(Var x, Var gain) { return record(OpKind::rms_norm, x, gain); }
    Var row_mean(Var a) { return record(OpKind::row_mean, a); }
    Var cross_entropy_logits(Var logits, std::vector<std::size_t> targets) {
        Var v = record(OpKind::cross_entropy_logits, logits);
        nodes_[v.id].targets = std::move(targets);
        // Re-run the forward now that targets are attached.
        nodes_[v.id].value = dba::cross_entropy_logits(value(logits), nodes_[v.id].targets);
        return v;
    }

    /// Record one op. Forward value is computed immediately.
    Var record(OpKind op, Var a, Var b = Var{-1}, double scalar = 0.0) {
        check_var(a, op);
        const Tensor& av = nodes_[a.id].value;
        Node node;
        node.op = op;
        node.parents = {a.id, b.id};
        node.scalar = scalar;
        node.requires_grad = nodes_[a.id].requires_grad;
        switch (op) {
            case OpKind::matmul:
                check_var(b, op);
                node.requires_grad = node.requires_grad || nodes_[b.id].requires_grad;
                node.value = dba::matmul(av, nodes_[b.id].value);
                break;
            case OpKind::transpose:
                node.value = dba::transpose(av);
                break;
            case OpKind::add:
                check_var(b, op);
                node.requires_grad = node.requires_grad || nodes_[b.id].requires_grad;
                node.value = dba::add(av, nodes_[b.id].value);
                break;
            case OpKind::scale:
                node.value = dba::scale(av, scalar);
                break;
            case OpKind::softmax_rows:
                node.value = dba::softmax_rows(av);
                break;
            case OpKind::relu:
                node.value = dba::relu(av);
                break;
            case OpKind::square:
                node.value = dba::square(av);
                break;
            case OpKind::rms_norm:
                check_var(b, op);
                node.requires_grad = node.requires_grad || nodes_[b.id].requires_grad;
                node.value = dba::rms_norm(av, nodes_[b.id].value);
                break;
            case OpKind::row_mean:
                node.value = dba::row_mean(av);
                break;
            case OpKind::cross_entropy_logits:
                node.value = Tensor(1, 1);  // patched once targets are known
                break;
            case OpKind::leaf:
                throw GraphError("record: leaf is not a recordable op");
        }
        nodes_.push_back(std::move(node));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(Var v) const {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw GraphError("value: invalid node handle");
        return nodes_[v.id].value;
    }

    std::size_t size() const { return nodes_.size(); }
    const std::vector<int>& parameters() const { return params_; }

    /// Reverse pass from a scalar loss. Returns gradients for every parameter
    /// node; intermediate gradients are freed as soon as they are consumed.
    /// A tape can be differentiated once.
    GradMap backward(Var loss) {
        if (backward_done_) throw GraphError("backward: tape already differentiated");
        backward_done_ = true;
        const Tensor& lv = value(loss);
        if (lv.rank() != 2 || lv.rows() != 1 || lv.cols() != 1)
            throw ContractError("backward: loss must be 1x1, got " + lv.shape_string());

        std::vector<Tensor> grads(nodes_.size());
        std::vector<bool> has_grad(nodes_.size(), false);
        grads[loss.id] = Tensor::full(1, 1, 1.0);
        has_grad[loss.id] = true;

        std::vector<bool> retained(nodes_.size(), false);
        for (int id : params_) retained[id] = true;

        for (int i = loss.id; i >= 0; --i) {
            if (!has_grad[i] || !nodes_[i].requires_grad) continue;
            propagate(i, grads[i], grads, has_grad);
            if (!retained[i]) {
                grads[i] = Tensor();
                has_grad[i] = false;
            }
        }

        GradMap out;
        for (int id : params_) {
            if (has_grad[id] && id <= loss.id) {
                out.emplace(id, std::move(grads[id]));
            } else {
                // Parameter not reached by this loss: gradient is zero.
                out.emplace(id, Tensor(nodes_[id].value.shape()));
            }
        }
        return out;
    }

private:
    Var leaf(Tensor value, bool requires_grad) {
        Node node;
        node.op = OpKind::leaf;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void check_var(Var v, OpKind op) const {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw GraphError(std::string("record(") + op_name(op) + "): invalid input handle");
    }

    void accumulate(int id, Tensor g, std::vector<Tensor>& grads, std::vector<bool>& has_grad) {
        if (!nodes_[id].requires_grad) return;
        if (has_grad[id]) {
            add_inplace(grads[id], g);
        } else {
            grads[id] = std::move(g);
            has_grad[id] = true;
        }
    }

    void propagate(int i, const Tensor& g, std::vector<Tensor>& grads, std::vector<bool>& has_grad) {
        const Node& node = nodes_[i];
        const int pa = node.parents[0];
        const int pb = node.parents[1];
        switch (node.op) {
            case OpKind::leaf:
                break;
            case OpKind::matmul: {
                const Tensor& a = nodes_[pa].value;
                const Tensor& b = nodes_[pb].value;
                if (nodes_[pa].requires_grad) accumulate(pa, dba::matmul(g, dba::transpose(b)), grads, has_grad);
                if (nodes_[pb].requires_grad) accumulate(pb, dba::matmul(dba::transpose(a), g), grads, has_grad);
                break;
            }
            case OpKind::transpose:
                accumulate(pa, dba::transpose(g), grads, has_grad);
                break;
            case OpKind::add:
                if (nodes_[pa].requires_grad) accumulate(pa, g, grads, has_grad);
                if (nodes_[pb].requires_grad) accumulate(pb, g, grads, has_grad);
                break;
            case OpKind::scale:
                accumulate(pa, dba::scale(g, node.scalar), grads, has_grad);
                break;
            case OpKind::softmax_rows: {
                // dx = y * (g - rowdot(g, y))
                const Tensor& y = node.value;
                Tensor dx = g;
                for (std::size_t r = 0; r < y.rows(); ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                    for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) = y(r, c) * (g(r, c) - dot);
                }
                accumulate(pa, std::move(dx), grads, has_grad);
                break;
            }
            case OpKind::relu: {
                const Tensor& x = nodes_[pa].value;
                Tensor dx = g;
                for (std::size_t k = 0; k < dx.numel(); ++k)
                    if (x.data()[k] <= 0.0) dx.data()[k] = 0.0;
                accumulate(pa, std::move(dx), grads, has_grad);
                break;
            }
            case OpKind::square: {
                const Tensor& x = nodes_[pa].value;
                Tensor dx = g;
                for (std::size_t k = 0; k < dx.numel(); ++k) dx.data()[k] *= 2.0 * x.data()[k];
                accumulate(pa, std::move(dx), grads, has_grad);
                break;
            }
            case OpKind::rms_norm: {
                const Tensor& x = nodes_[pa].value;
                const Tensor& gain = nodes_[pb].value;
                const std::size_t m = x.rows(), k = x.cols();
                Tensor dx(m, k);
                Tensor dgain(1, k);
                for (std::size_t r = 0; r < m; ++r) {
                    double ss = 0.0;
                    for (std::size_t c = 0; c < k; ++c) ss += x(r, c) * x(r, c);
                    const double rms2 = ss / static_cast<double>(k) + kRmsNormEps;
                    const double inv_rms = 1.0 / std::sqrt(rms2);
                    double ghx = 0.0;  // sum_c g_c * gain_c * x_c
                    for (std::size_t c = 0; c < k; ++c) ghx += g(r, c) * gain(0, c) * x(r, c);
                    for (std::size_t c = 0; c < k; ++c) {
                        dx(r, c) = inv_rms * (g(r, c) * gain(0, c) -
                                              x(r, c) * ghx / (static_cast<double>(k) * rms2));
                        dgain(0, c) += g(r, c) * x(r, c) * inv_rms;
                    }
                }
                if (nodes_[pa].requires_grad) accumulate(pa, std::move(dx), grads, has_grad);
                if (nodes_[pb].requires_grad) accumulate(pb, std::move(dgain), grads, has_grad);
                break;
            }
            case OpKind::row_mean: {
                const Tensor& x = nodes_[pa].value;
                const double inv = 1.0 / static_cast<double>(x.rows());
                Tensor dx(x.rows(), x.cols());
                for (std::size_t r = 0; r < x.rows(); ++r)
                    for (std::size_t c = 0; c < x.cols(); ++c) dx(r, c) = g(0, c) * inv;
                accumulate(pa, std::move(dx), grads, has_grad);
                break;
            }
            case OpKind::cross_entropy_logits: {
                // d logits = (softmax(logits) - onehot(target)) * g / batch
                const Tensor& logits = nodes_[pa].value;
                Tensor dx = dba::softmax_rows(logits);
                const double gs = g(0, 0) / static_cast<double>(logits.rows());
                for (std::size_t r = 0; r < logits.rows(); ++r) {
                    dx(r, node.targets[r]) -= 1.0;
                    for (std::size_t c = 0; c < logits.cols(); ++c) dx(r, c) *= gs;
                }
                accumulate(pa, std::move(dx), grads, has_grad);
                break;
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<int> params_;
    bool backward_done_ = false;
};

/// Central finite differences of a scalar-valued function, entry by entry:
/// (f(x + h e) - f(x - h e)) / 2h.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw ParameterError("finite_diff_grad: step must be > 0");
    Tensor g(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe.data()[i];
        probe.data()[i] = orig + h;
        const double fp = f(probe);
        probe.data()[i] = orig - h;
        const double fm = f(probe);
        probe.data()[i] = orig;
        g.data()[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// sum of all entries as a 1x1 node, composed from matmuls:
/// ones(1 x m) * x * ones(k x 1).
inline Var sum_all(Tape& tape, Var x) {
    const Tensor& v = tape.value(x);
    Var left = tape.constant(Tensor::full(1, v.rows(), 1.0));
    Var right = tape.constant(Tensor::full(v.cols(), 1, 1.0));
    return tape.matmul(tape.matmul(left, x), right);
}

}  // namespace dba
