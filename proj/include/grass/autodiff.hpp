// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode autodiff. A Graph owns every value produced while
// building a loss; node ids are assigned in creation order, which is a valid
// topological order, so backward simply walks the tape in reverse.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "grass/tensor.hpp"

namespace grass {

template <typename T>
class Graph;

using NodeId = std::size_t;

// Handle to a node in a Graph. Cheap to copy; only valid while its graph lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* graph, NodeId id) : graph_(graph), id_(id) {}

    NodeId id() const noexcept { return id_; }
    Graph<T>& graph() const { return *graph_; }
    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

private:
    Graph<T>* graph_ = nullptr;
    NodeId id_ = 0;
};

// Gradient w.r.t. every leaf that requires grad. Leaves that do not require
// grad have no storage at all.
template <typename T>
class Gradients {
public:
    explicit Gradients(std::size_t n_nodes) : grads_(n_nodes) {}

    bool has(const Var<T>& v) const { return v.id() < grads_.size() && grads_[v.id()].has_value(); }
    const Tensor<T>& of(const Var<T>& v) const;
    std::size_t stored_count() const;

    void set(NodeId id, Tensor<T> g) { grads_[id] = std::move(g); }

private:
    std::vector<std::optional<Tensor<T>>> grads_;
};

template <typename T>
class Graph {
public:
    // grad_in[i] is null when input i does not require grad; rules accumulate (+=).
    using BackwardFn = std::function<void(const Graph&, const Tensor<T>& grad_out, std::span<Tensor<T>* const> grad_in)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaf node. Parameters that are frozen enter as requires_grad=false.
    Var<T> input(Tensor<T> value, bool requires_grad = false);

    // Appends an op result. The backward rule is retained only when some
    // input requires grad; otherwise the node is a plain constant.
    Var<T> record(const char* op, Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward);

    const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
    bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Number of nodes carrying a backward rule.
    std::size_t recorded_ops() const noexcept;

    // Bytes held by non-leaf node values; the activation-memory proxy.
    std::size_t activation_bytes() const noexcept;

    // Reverse traversal from a scalar loss.
    Gradients<T> backward(const Var<T>& loss) const;

    // Node ids in the order backward() visited them during the last call.
    const std::vector<NodeId>& last_backward_order() const noexcept { return visit_order_; }

private:
    struct Node {
        Tensor<T> value;
        std::vector<NodeId> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        bool leaf = false;
    };

    std::vector<Node> nodes_;
    mutable std::vector<NodeId> visit_order_;
};

extern template class Var<float>;
extern template class Var<double>;
extern template class Gradients<float>;
extern template class Gradients<double>;
extern template class Graph<float>;
extern template class Graph<double>;

namespace ops {

// Target value meaning "ignore this position" in cross_entropy.
inline constexpr std::int32_t kIgnoreIndex = -1;

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
// a[m,n] + bias[n] broadcast over the leading axis.
template <typename T> Var<T> add_bias(const Var<T>& a, const Var<T>& bias);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> gelu(const Var<T>& a);
// Row-wise over the last axis; eps sits inside the square root.
template <typename T> Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
// Row-wise over the last axis.
template <typename T> Var<T> softmax(const Var<T>& x);
template <typename T> Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids);
// Mean over positions whose target is not kIgnoreIndex.
template <typename T> Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets);

struct AttentionShape {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::size_t heads = 0;
    // Positions visible to each query, counting itself. 0 = full causal span.
    std::size_t window = 0;
};

// Multi-head causal self-attention over rows laid out as [batch*seq, d].
// q, k, v are already projected; heads split the feature axis evenly.
template <typename T> Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, AttentionShape shape);

} // namespace ops

} // namespace grass
