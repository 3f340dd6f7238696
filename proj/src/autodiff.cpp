// SPDX-License-Identifier: Apache-2.0

#include "grass/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "grass/error.hpp"

namespace grass {

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return graph_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return graph_->requires_grad(id_);
}

template <typename T>
const Tensor<T>& Gradients<T>::of(const Var<T>& v) const {
    if (!has(v)) {
        throw UsageError("gradients: node " + std::to_string(v.id()) + " has no gradient storage");
    }
    return *grads_[v.id()];
}

template <typename T>
std::size_t Gradients<T>::stored_count() const {
    std::size_t n = 0;
    for (const auto& g : grads_) {
        n += g.has_value() ? 1 : 0;
    }
    return n;
}

template <typename T>
Var<T> Graph<T>::input(Tensor<T> value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.leaf = true;
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::record(const char* op, Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward) {
    if (!value.all_finite()) {
        throw NumericalFault(std::string(op) + ": non-finite output");
    }
    Node node;
    node.value = std::move(value);
    for (NodeId in : inputs) {
        node.requires_grad = node.requires_grad || nodes_.at(in).requires_grad;
    }
    if (node.requires_grad) {
        node.inputs = std::move(inputs);
        node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
std::size_t Graph<T>::recorded_ops() const noexcept {
    std::size_t n = 0;
    for (const auto& node : nodes_) {
        n += node.backward ? 1 : 0;
    }
    return n;
}

template <typename T>
std::size_t Graph<T>::activation_bytes() const noexcept {
    std::size_t n = 0;
    for (const auto& node : nodes_) {
        if (!node.leaf) {
            n += node.value.bytes();
        }
    }
    return n;
}

template <typename T>
Gradients<T> Graph<T>::backward(const Var<T>& loss) const {
    if (&loss.graph() != this) {
        throw UsageError("backward: loss belongs to a different graph");
    }
    if (value(loss.id()).size() != 1) {
        throw UsageError("backward: loss must be scalar, got shape " + shape_str(value(loss.id()).shape()));
    }
    Gradients<T> out(nodes_.size());
    visit_order_.clear();
    if (!nodes_[loss.id()].requires_grad) {
        return out;
    }

    std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
    grads[loss.id()] = Tensor<T>::full(value(loss.id()).shape(), T{1});

    std::vector<Tensor<T>*> grad_in;
    for (NodeId id = loss.id() + 1; id-- > 0;) {
        const Node& node = nodes_[id];
        if (!grads[id].has_value()) {
            continue;
        }
        visit_order_.push_back(id);
        if (node.leaf) {
            out.set(id, std::move(*grads[id]));
            grads[id].reset();
            continue;
        }
        grad_in.assign(node.inputs.size(), nullptr);
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            const NodeId in = node.inputs[i];
            if (!nodes_[in].requires_grad) {
                continue;
            }
            if (!grads[in].has_value()) {
                grads[in] = Tensor<T>::zeros(nodes_[in].value.shape());
            }
            grad_in[i] = &*grads[in];
        }
        node.backward(*this, *grads[id], grad_in);
        grads[id].reset();
    }
    return out;
}

template class Var<float>;
template class Var<double>;
template class Gradients<float>;
template class Gradients<double>;
template class Graph<float>;
template class Graph<double>;

namespace ops {

namespace {

template <typename T>
void require_rank(const char* op, const Var<T>& v, std::size_t rank, const char* operand) {
    if (v.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": operand " + operand + " must be rank " + std::to_string(rank) +
                         ", got " + shape_str(v.shape()));
    }
}

template <typename T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

template <typename T>
Graph<T>& same_graph(const char* op, const Var<T>& a, const Var<T>& b) {
    if (&a.graph() != &b.graph()) {
        throw UsageError(std::string(op) + ": operands belong to different graphs");
    }
    return a.graph();
}

} // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require_rank("matmul", a, 2, "a");
    require_rank("matmul", b, 2, "b");
    const std::size_t m = a.shape()[0];
    const std::size_t k = a.shape()[1];
    const std::size_t n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ShapeError("matmul: inner dims differ, a=" + shape_str(a.shape()) + " b=" + shape_str(b.shape()));
    }
    Graph<T>& g = same_graph("matmul", a, b);
    const auto A = a.value().data();
    const auto B = b.value().data();
    std::vector<T> c(m * n, T{0});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) {
                c[i * n + j] += aip * B[p * n + j];
            }
        }
    }
    const NodeId ia = a.id();
    const NodeId ib = b.id();
    return g.record("matmul", Tensor<T>({m, n}, std::move(c)), {ia, ib},
                    [=](const Graph<T>& gr, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
                        const auto G = gout.data();
                        const auto Av = gr.value(ia).data();
                        const auto Bv = gr.value(ib).data();
                        if (gin[0] != nullptr) {
                            auto dA = gin[0]->mutable_data();
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                    T acc{0};
                                    for (std::size_t j = 0; j < n; ++j) {
                                        acc += G[i * n + j] * Bv[p * n + j];
                                    }
                                    dA[i * k + p] += acc;
                                }
                            }
                        }
                        if (gin[1] != nullptr) {
                            auto dB = gin[1]->mutable_data();
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                    const T aip = Av[i * k + p];
                                    for (std::size_t j = 0; j < n; ++j) {
                                        dB[p * n + j] += aip * G[i * n + j];
                                    }
                                }
                            }
                        }
                    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same("add", a, b);
    Graph<T>& g = same_graph("add", a, b);
    const auto A = a.value().data();
    const auto B = b.value().data();
    std::vector<T> c(A.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = A[i] + B[i];
    }
    return g.record("add", Tensor<T>(a.shape(), std::move(c)), {a.id(), b.id()},
                    [](const Graph<T>&, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
                        const auto G = gout.data();
                        for (Tensor<T>* d : gin) {
                            if (d == nullptr) {
                                continue;
                            }
                            auto D = d->mutable_data();
                            for (std::size_t i = 0; i < G.size(); ++i) {
                                D[i] += G[i];
                            }
                        }
                    });
}

template <typename T>
Var<T> add_bias(const Var<T>& a, const Var<T>& bias) {
    require_rank("add_bias", a, 2, "a");
    require_rank("add_bias", bias, 1, "bias");
    const std::size_t m = a.shape()[0];
    const std::size_t n = a.shape()[1];
    if (bias.shape()[0] != n) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match columns of " +
                         shape_str(a.shape()));
    }
    Graph<T>& g = same_graph("add_bias", a, bias);
    const auto A = a.value().data();
    const auto Bv = bias.value().data();
    std::vector<T> c(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            c[i * n + j] = A[i * n + j] + Bv[j];
        }
    }
    return g.record("add_bias", Tensor<T>({m, n}, std::move(c)), {a.id(), bias.id()},
                    [=](const Graph<T>&, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
                        const auto G = gout.data();
                        if (gin[0] != nullptr) {
                            auto D = gin[0]->mutable_data();
                            for (std::size_t i = 0; i < G.size(); ++i) {
                                D[i] += G[i];
                            }
                        }
                        if (gin[1] != nullptr) {
                            auto D = gin[1]->mutable_data();
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t j = 0; j < n; ++j) {
                                    D[j] += G[i * n + j];
                                }
                            }
                        }
                    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same("mul", a, b);
    Graph<T>& g = same_graph("mul", a, b);
    const auto A = a.value().data();
    const auto B = b.value().data();
    std::vector<T> c(A.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = A[i] * B[i];
    }
    const NodeId ia = a.id();
    const NodeId ib = b.id();
    return g.record("mul", Tensor<T>(a.shape(), std::move(c)), {ia, ib},
                    [=](const Graph<T>& gr, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
                        const auto G = gout.data();
                        const auto Av = gr.value(ia).data();
                        const auto Bv = gr.value(ib).data();
                        if (gin[0] != nullptr) {
                            auto D = gin[0]->mutable_data();
                            for (std::size_t i = 0; i < G.size(); ++i) {
                                D[i] += G[i] * Bv[i];
                            }
                        }
                        if (gin[1] != nullptr) {
                            auto D = gin[1]->mutable_data();
                            for (std::size_t i = 0; i < G.size(); ++i) {
                                D[i] += G[i] * Av[i];
                            }
                        }
                    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    const auto A = a.value().data();
    std::vector<T> c(A.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = A[i] * factor;
    }
    return a.graph().record("scale", Tensor<T>(a.shape(), std::move(c)), {a.id()},
                            [=](const Graph<T>&, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
                                const auto G = gout.data();
                                auto D = gin[0]->mutable_data();
                                for (std::size_t i = 0; i < G.size(); ++i) {
                                    D[i] += G[i] * factor;
                                }
                            });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    T acc{0};
    for (T x : a.value().data()) {
        acc += x;
    }
    return a.graph().record("sum", Tensor<T>::scalar(acc), {a.id()},
                            [](const Graph<T>&, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
                                const T go = gout[0];
                                for (T& d : gin[0]->mutable_data()) {
                                    d += go;
                                }
                            });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    const auto A = a.value().data();
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    std::vector<T> c(A.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        c[i] = T(0.5) * A[i] * (T(1) + std::erf(A[i] * inv_sqrt2));
    }
    const NodeId ia = a.id();
    return a.graph().record(
        "gelu", Tensor<T>(a.shape(), std::move(c)), {ia},
        [=](const Graph<T>& gr, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
            const auto G = gout.data();
            const auto X = gr.value(ia).data();
            const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
            auto D = gin[0]->mutable_data();
            for (std::size_t i = 0; i < G.size(); ++i) {
                const T x = X[i];
                const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
                D[i] += G[i] * (cdf + x * pdf);
            }
        });
}

template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    require_rank("layernorm", x, 2, "x");
    require_rank("layernorm", gamma, 1, "gamma");
    require_rank("layernorm", beta, 1, "beta");
    const std::size_t m = x.shape()[0];
    const std::size_t n = x.shape()[1];
    if (gamma.shape()[0] != n || beta.shape()[0] != n) {
        throw ShapeError("layernorm: affine " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " does not match features of " + shape_str(x.shape()));
    }
    Graph<T>& g = same_graph("layernorm", x, gamma);
    same_graph("layernorm", x, beta);
    const auto X = x.value().data();
    const auto Gm = gamma.value().data();
    const auto Bt = beta.value().data();
    std::vector<T> xhat(m * n);
    std::vector<T> inv_std(m);
    std::vector<T> y(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        T mean{0};
        for (std::size_t j = 0; j < n; ++j) {
            mean += X[i * n + j];
        }
        mean /= T(n);
        T var{0};
        for (std::size_t j = 0; j < n; ++j) {
            const T d = X[i * n + j] - mean;
            var += d * d;
        }
        var /= T(n);
        inv_std[i] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (X[i * n + j] - mean) * inv_std[i];
            y[i * n + j] = Gm[j] * xhat[i * n + j] + Bt[j];
        }
    }
    const NodeId ig = gamma.id();
    return g.record("layernorm", Tensor<T>({m, n}, std::move(y)), {x.id(), ig, beta.id()},
                    [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                        const Graph<T>& gr, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
                        const auto G = gout.data();
                        const auto Gm = gr.value(ig).data();
                        if (gin[1] != nullptr) {
                            auto D = gin[1]->mutable_data();
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t j = 0; j < n; ++j) {
                                    D[j] += G[i * n + j] * xhat[i * n + j];
                                }
                            }
                        }
                        if (gin[2] != nullptr) {
                            auto D = gin[2]->mutable_data();
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t j = 0; j < n; ++j) {
                                    D[j] += G[i * n + j];
                                }
                            }
                        }
                        if (gin[0] != nullptr) {
                            auto D = gin[0]->mutable_data();
                            for (std::size_t i = 0; i < m; ++i) {
                                T mean_dxhat{0};
                                T mean_dxhat_xhat{0};
                                for (std::size_t j = 0; j < n; ++j) {
                                    const T dxh = G[i * n + j] * Gm[j];
                                    mean_dxhat += dxh;
                                    mean_dxhat_xhat += dxh * xhat[i * n + j];
                                }
                                mean_dxhat /= T(n);
                                mean_dxhat_xhat /= T(n);
                                for (std::size_t j = 0; j < n; ++j) {
                                    const T dxh = G[i * n + j] * Gm[j];
                                    D[i * n + j] +=
                                        inv_std[i] * (dxh - mean_dxhat - xhat[i * n + j] * mean_dxhat_xhat);
                                }
                            }
                        }
                    });
}

namespace {

// Softmax over each contiguous row of length n, max-subtracted.
template <typename T>
void softmax_rows(std::span<const T> in, std::span<T> out, std::size_t n) {
    const std::size_t rows = in.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = in.data() + r * n;
        T* y = out.data() + r * n;
        T mx = x[0];
        for (std::size_t j = 1; j < n; ++j) {
            mx = std::max(mx, x[j]);
        }
        T z{0};
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            y[j] /= z;
        }
    }
}

} // namespace

template <typename T>
Var<T> softmax(const Var<T>& x) {
    if (x.shape().empty()) {
        throw ShapeError("softmax: operand must have rank >= 1, got " + shape_str(x.shape()));
    }
    const std::size_t n = x.shape().back();
    std::vector<T> y(x.value().size());
    softmax_rows<T>(x.value().data(), y, n);
    Tensor<T> out(x.shape(), std::move(y));
    const NodeId self = x.graph().size();
    return x.graph().record("softmax", std::move(out), {x.id()},
                            [=](const Graph<T>& gr, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
                                const auto G = gout.data();
                                const auto Y = gr.value(self).data();
                                auto D = gin[0]->mutable_data();
                                const std::size_t rows = G.size() / n;
                                for (std::size_t r = 0; r < rows; ++r) {
                                    T dot{0};
                                    for (std::size_t j = 0; j < n; ++j) {
                                        dot += G[r * n + j] * Y[r * n + j];
                                    }
                                    for (std::size_t j = 0; j < n; ++j) {
                                        D[r * n + j] += Y[r * n + j] * (G[r * n + j] - dot);
                                    }
                                }
                            });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
    require_rank("embedding", table, 2, "table");
    const std::size_t vocab = table.shape()[0];
    const std::size_t d = table.shape()[1];
    if (ids.empty()) {
        throw ShapeError("embedding: empty id list");
    }
    const auto W = table.value().data();
    std::vector<T> out(ids.size() * d);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
            throw InputError("embedding: id " + std::to_string(ids[r]) + " out of range [0," + std::to_string(vocab) +
                             ")");
        }
        const std::size_t row = static_cast<std::size_t>(ids[r]);
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] = W[row * d + j];
        }
    }
    std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
    return table.graph().record("embedding", Tensor<T>({ids.size(), d}, std::move(out)), {table.id()},
                                [=, id_copy = std::move(id_copy)](const Graph<T>&, const Tensor<T>& gout,
                                                                   std::span<Tensor<T>* const> gin) {
                                    const auto G = gout.data();
                                    auto D = gin[0]->mutable_data();
                                    for (std::size_t r = 0; r < id_copy.size(); ++r) {
                                        const std::size_t row = static_cast<std::size_t>(id_copy[r]);
                                        for (std::size_t j = 0; j < d; ++j) {
                                            D[row * d + j] += G[r * d + j];
                                        }
                                    }
                                });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets) {
    require_rank("cross_entropy", logits, 2, "logits");
    const std::size_t n = logits.shape()[0];
    const std::size_t v = logits.shape()[1];
    if (targets.size() != n) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
    }
    const auto Z = logits.value().data();
    std::vector<T> probs(n * v);
    softmax_rows<T>(Z, probs, v);
    std::size_t count = 0;
    T total{0};
    for (std::size_t r = 0; r < n; ++r) {
        const std::int32_t t = targets[r];
        if (t == kIgnoreIndex) {
            continue;
        }
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw InputError("cross_entropy: target " + std::to_string(t) + " out of range [0," + std::to_string(v) +
                             ")");
        }
        T mx = Z[r * v];
        for (std::size_t j = 1; j < v; ++j) {
            mx = std::max(mx, Z[r * v + j]);
        }
        T s{0};
        for (std::size_t j = 0; j < v; ++j) {
            s += std::exp(Z[r * v + j] - mx);
        }
        total += (mx + std::log(s)) - Z[r * v + static_cast<std::size_t>(t)];
        ++count;
    }
    if (count == 0) {
        throw InputError("cross_entropy: every target is ignored");
    }
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    const T inv_count = T(1) / T(count);
    return logits.graph().record(
        "cross_entropy", Tensor<T>::scalar(total * inv_count), {logits.id()},
        [=, probs = std::move(probs), tgt = std::move(tgt)](const Graph<T>&, const Tensor<T>& gout,
                                                            std::span<Tensor<T>* const> gin) {
            const T go = gout[0] * inv_count;
            auto D = gin[0]->mutable_data();
            for (std::size_t r = 0; r < n; ++r) {
                if (tgt[r] == kIgnoreIndex) {
                    continue;
                }
                for (std::size_t j = 0; j < v; ++j) {
                    D[r * v + j] += go * probs[r * v + j];
                }
                D[r * v + static_cast<std::size_t>(tgt[r])] -= go;
            }
        });
}

template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, AttentionShape s) {
    require_rank("causal_attention", q, 2, "q");
    require_same("causal_attention", q, k);
    require_same("causal_attention", q, v);
    same_graph("causal_attention", q, k);
    same_graph("causal_attention", q, v);
    const std::size_t rows = q.shape()[0];
    const std::size_t d = q.shape()[1];
    if (s.heads == 0 || d % s.heads != 0) {
        throw ShapeError("causal_attention: " + std::to_string(s.heads) + " heads do not divide width " +
                         std::to_string(d));
    }
    if (s.batch * s.seq != rows) {
        throw ShapeError("causal_attention: batch*seq = " + std::to_string(s.batch * s.seq) + " but q has " +
                         std::to_string(rows) + " rows");
    }
    const std::size_t S = s.seq;
    const std::size_t dh = d / s.heads;
    const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));
    const auto first_visible = [w = s.window](std::size_t i) -> std::size_t {
        return (w == 0 || i + 1 <= w) ? 0 : i + 1 - w;
    };

    const auto Q = q.value().data();
    const auto K = k.value().data();
    const auto V = v.value().data();
    // probs[((b*heads + h)*S + i)*S + j], zero outside the visible span.
    std::vector<T> probs(s.batch * s.heads * S * S, T{0});
    std::vector<T> out(rows * d, T{0});
    std::vector<T> scores(S);
    for (std::size_t b = 0; b < s.batch; ++b) {
        for (std::size_t h = 0; h < s.heads; ++h) {
            const std::size_t col = h * dh;
            for (std::size_t i = 0; i < S; ++i) {
                const std::size_t qi = (b * S + i) * d + col;
                const std::size_t lo = first_visible(i);
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = lo; j <= i; ++j) {
                    const std::size_t kj = (b * S + j) * d + col;
                    T dot{0};
                    for (std::size_t c = 0; c < dh; ++c) {
                        dot += Q[qi + c] * K[kj + c];
                    }
                    scores[j] = dot * inv_sqrt_dh;
                    mx = std::max(mx, scores[j]);
                }
                T z{0};
                T* p = &probs[((b * s.heads + h) * S + i) * S];
                for (std::size_t j = lo; j <= i; ++j) {
                    p[j] = std::exp(scores[j] - mx);
                    z += p[j];
                }
                for (std::size_t j = lo; j <= i; ++j) {
                    p[j] /= z;
                    const std::size_t vj = (b * S + j) * d + col;
                    for (std::size_t c = 0; c < dh; ++c) {
                        out[qi + c] += p[j] * V[vj + c];
                    }
                }
            }
        }
    }

    const NodeId iq = q.id();
    const NodeId ik = k.id();
    const NodeId iv = v.id();
    return q.graph().record(
        "causal_attention", Tensor<T>({rows, d}, std::move(out)), {iq, ik, iv},
        [=, probs = std::move(probs)](const Graph<T>& gr, const Tensor<T>& gout, std::span<Tensor<T>* const> gin) {
            const auto G = gout.data();
            const auto Qv = gr.value(iq).data();
            const auto Kv = gr.value(ik).data();
            const auto Vv = gr.value(iv).data();
            std::vector<T> dp(S);
            for (std::size_t b = 0; b < s.batch; ++b) {
                for (std::size_t h = 0; h < s.heads; ++h) {
                    const std::size_t col = h * dh;
                    for (std::size_t i = 0; i < S; ++i) {
                        const std::size_t qi = (b * S + i) * d + col;
                        const std::size_t lo = first_visible(i);
                        const T* p = &probs[((b * s.heads + h) * S + i) * S];
                        T dot{0};
                        for (std::size_t j = lo; j <= i; ++j) {
                            const std::size_t vj = (b * S + j) * d + col;
                            T acc{0};
                            for (std::size_t c = 0; c < dh; ++c) {
                                acc += G[qi + c] * Vv[vj + c];
                            }
                            dp[j] = acc;
                            dot += p[j] * acc;
                            if (gin[2] != nullptr) {
                                auto dV = gin[2]->mutable_data();
                                for (std::size_t c = 0; c < dh; ++c) {
                                    dV[vj + c] += p[j] * G[qi + c];
                                }
                            }
                        }
                        for (std::size_t j = lo; j <= i; ++j) {
                            const T ds = p[j] * (dp[j] - dot) * inv_sqrt_dh;
                            const std::size_t kj = (b * S + j) * d + col;
                            if (gin[0] != nullptr) {
                                auto dQ = gin[0]->mutable_data();
                                for (std::size_t c = 0; c < dh; ++c) {
                                    dQ[qi + c] += ds * Kv[kj + c];
                                }
                            }
                            if (gin[1] != nullptr) {
                                auto dK = gin[1]->mutable_data();
                                for (std::size_t c = 0; c < dh; ++c) {
                                    dK[kj + c] += ds * Qv[qi + c];
                                }
                            }
                        }
                    }
                }
            }
        });
}

#define GRASS_INSTANTIATE_OPS(T)                                                                   \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                       \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                          \
    template Var<T> add_bias<T>(const Var<T>&, const Var<T>&);                                     \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                          \
    template Var<T> scale<T>(const Var<T>&, T);                                                    \
    template Var<T> sum<T>(const Var<T>&);                                                         \
    template Var<T> gelu<T>(const Var<T>&);                                                        \
    template Var<T> layernorm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                  \
    template Var<T> softmax<T>(const Var<T>&);                                                     \
    template Var<T> embedding<T>(const Var<T>&, std::span<const std::int32_t>);                    \
    template Var<T> cross_entropy<T>(const Var<T>&, std::span<const std::int32_t>);                \
    template Var<T> causal_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, AttentionShape);

GRASS_INSTANTIATE_OPS(float)
GRASS_INSTANTIATE_OPS(double)

#undef GRASS_INSTANTIATE_OPS

} // namespace ops

} // namespace grass
