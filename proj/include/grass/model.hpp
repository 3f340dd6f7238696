// SPDX-License-Identifier: Apache-2.0
//
// Tiny pre-norm decoder-only transformer. Parameters are grouped into units:
// the embedding group, one unit per transformer block, and the head group
// (final norm + output projection). Blocks are the units layer sampling acts on.

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "grass/autodiff.hpp"
#include "grass/tensor.hpp"

namespace grass {

struct LayerId {
    std::size_t index = 0;
    auto operator<=>(const LayerId&) const = default;
};

enum class UnitKind { embedding, block, head };

// A parameter group that owns gradients and an optimizer shard.
struct UnitId {
    UnitKind kind = UnitKind::block;
    std::size_t block = 0; // meaningful for UnitKind::block only

    static UnitId embedding() { return {UnitKind::embedding, 0}; }
    static UnitId head() { return {UnitKind::head, 0}; }
    static UnitId of(LayerId layer) { return {UnitKind::block, layer.index}; }

    bool is_block() const { return kind == UnitKind::block; }
    std::string name() const;

    auto operator<=>(const UnitId&) const = default;
};

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 16;
    std::size_t n_heads = 2;
    std::size_t d_ff = 32;
    std::size_t vocab_size = 16;
    std::size_t max_seq_len = 16;
    // Per-block attention span (positions visible to a query, counting itself).
    // Empty or 0 means the full causal span.
    std::vector<std::size_t> attention_windows;
    double init_std = 0.02;
    // Token and position embeddings. Large relative to init_std keeps Adam's
    // early steps from swamping the first block's input.
    double embed_init_std = 0.02;
    // Embedding and head are updated every step and never sampled.
    bool groups_always_trainable = true;

    void validate() const;
    std::size_t window_of(LayerId layer) const;
};

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
};

template <typename T>
struct ParamUnit {
    UnitId id;
    std::vector<Parameter<T>> params;

    std::size_t param_count() const;
};

// Flattened gradient of one unit for one step.
template <typename T>
struct LayerGrads {
    UnitId unit;
    std::vector<T> flat_grad;
    std::size_t n_params = 0;
};

struct FreezeMask {
    std::vector<bool> trainable; // one flag per block
    bool groups_trainable = true;

    static FreezeMask all(std::size_t n_layers);
    static FreezeMask only(std::size_t n_layers, const std::vector<LayerId>& layers, bool groups_trainable = true);
    std::size_t active_count() const;
};

struct Batch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> tokens;  // [batch*seq]
    std::vector<std::int32_t> targets; // [batch*seq], ops::kIgnoreIndex for padding
};

template <typename T>
class Model {
public:
    Model(ModelConfig config, std::uint64_t seed);
    ~Model();

    // Copies parameters and the freeze mask; an in-progress pass is not copied.
    Model(const Model& other);
    Model& operator=(const Model& other);
    Model(Model&&) noexcept;
    Model& operator=(Model&&) noexcept;

    const ModelConfig& config() const noexcept { return config_; }
    std::size_t n_layers() const noexcept { return config_.n_layers; }

    // Units in fixed order: embedding, blocks 0..N-1, head.
    const std::vector<ParamUnit<T>>& units() const noexcept { return units_; }
    ParamUnit<T>& unit(UnitId id);
    const ParamUnit<T>& unit(UnitId id) const;

    std::size_t param_count(LayerId layer) const;
    std::size_t total_param_count() const;

    void set_freeze_mask(FreezeMask mask);
    const FreezeMask& freeze_mask() const noexcept { return mask_; }
    bool is_trainable(UnitId id) const;

    // Mean cross-entropy over non-ignored targets. Retains the graph for
    // backward_collect().
    T forward_loss(const Batch& batch);

    // One LayerGrads per trainable unit, in unit order. Frozen blocks pass
    // activation gradients through but have no parameter gradients.
    std::vector<LayerGrads<T>> backward_collect();

    // Loss without retaining a graph.
    T evaluate(const Batch& batch) const;
    std::vector<T> sequence_losses(const Batch& batch) const;

    std::size_t last_activation_bytes() const noexcept { return last_activation_bytes_; }
    // Graph nodes visited by the most recent backward_collect().
    std::size_t last_backward_visits() const noexcept { return last_backward_visits_; }

private:
    struct Pass;
    // Logits [batch*seq, vocab]. Leaves are created per unit when requested.
    Var<T> build_logits(Graph<T>& graph, const Batch& batch, bool with_grad,
                        std::vector<std::vector<Var<T>>>* leaves) const;
    void check_batch(const Batch& batch) const;
    std::size_t unit_index(UnitId id) const;

    ModelConfig config_;
    std::vector<ParamUnit<T>> units_;
    FreezeMask mask_;
    std::unique_ptr<Pass> pass_;
    std::size_t last_activation_bytes_ = 0;
    std::size_t last_backward_visits_ = 0;
};

extern template class Model<float>;
extern template class Model<double>;

} // namespace grass
