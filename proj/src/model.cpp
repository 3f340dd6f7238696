// SPDX-License-Identifier: Apache-2.0

#include "grass/model.hpp"

#include <cmath>
#include <string>

#include "grass/error.hpp"
#include "grass/rng.hpp"

namespace grass {

std::string UnitId::name() const {
    switch (kind) {
    case UnitKind::embedding:
        return "embedding";
    case UnitKind::head:
        return "head";
    case UnitKind::block:
        break;
    }
    return "block." + std::to_string(block);
}

void ModelConfig::validate() const {
    const auto positive = [](std::size_t v, const char* field) {
        if (v == 0) {
            throw ConfigError(std::string("model.") + field + " must be positive");
        }
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0) {
        throw ConfigError("model.n_heads must divide model.d_model");
    }
    if (!attention_windows.empty() && attention_windows.size() != n_layers) {
        throw ConfigError("model.attention_windows must be empty or have one entry per layer");
    }
    if (!(init_std > 0.0)) {
        throw ConfigError("model.init_std must be positive");
    }
    if (!(embed_init_std > 0.0)) {
        throw ConfigError("model.embed_init_std must be positive");
    }
}

std::size_t ModelConfig::window_of(LayerId layer) const {
    return attention_windows.empty() ? 0 : attention_windows.at(layer.index);
}

template <typename T>
std::size_t ParamUnit<T>::param_count() const {
    std::size_t n = 0;
    for (const auto& p : params) {
        n += p.value.size();
    }
    return n;
}

FreezeMask FreezeMask::all(std::size_t n_layers) {
    return FreezeMask{std::vector<bool>(n_layers, true), true};
}

FreezeMask FreezeMask::only(std::size_t n_layers, const std::vector<LayerId>& layers, bool groups_trainable) {
    FreezeMask mask{std::vector<bool>(n_layers, false), groups_trainable};
    for (LayerId l : layers) {
        if (l.index >= n_layers) {
            throw UsageError("freeze mask: layer " + std::to_string(l.index) + " out of range");
        }
        mask.trainable[l.index] = true;
    }
    return mask;
}

std::size_t FreezeMask::active_count() const {
    std::size_t n = 0;
    for (bool t : trainable) {
        n += t ? 1 : 0;
    }
    return n;
}

template <typename T>
struct Model<T>::Pass {
    Graph<T> graph;
    std::vector<std::vector<Var<T>>> leaves;
    Var<T> loss;
};

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double std, Rng& rng) {
    std::vector<T> data(shape_numel(shape));
    for (T& x : data) {
        x = static_cast<T>(rng.normal() * std);
    }
    return Tensor<T>(std::move(shape), std::move(data));
}

} // namespace

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const std::size_t d = config_.d_model;
    const double sd = config_.init_std;
    const auto ones = [](std::size_t n) { return Tensor<T>::full({n}, T{1}); };
    const auto zeros = [](std::size_t n) { return Tensor<T>::zeros({n}); };

    units_.push_back({UnitId::embedding(),
                      {{"tok_emb", normal_tensor<T>({config_.vocab_size, d}, config_.embed_init_std, rng)},
                       {"pos_emb", normal_tensor<T>({config_.max_seq_len, d}, config_.embed_init_std, rng)}}});
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        units_.push_back({UnitId::of(LayerId{l}),
                          {{"ln1.gamma", ones(d)},
                           {"ln1.beta", zeros(d)},
                           {"attn.wq", normal_tensor<T>({d, d}, sd, rng)},
                           {"attn.wk", normal_tensor<T>({d, d}, sd, rng)},
                           {"attn.wv", normal_tensor<T>({d, d}, sd, rng)},
                           {"attn.wo", normal_tensor<T>({d, d}, sd, rng)},
                           {"ln2.gamma", ones(d)},
                           {"ln2.beta", zeros(d)},
                           {"mlp.w1", normal_tensor<T>({d, config_.d_ff}, sd, rng)},
                           {"mlp.w2", normal_tensor<T>({config_.d_ff, d}, sd, rng)}}});
    }
    units_.push_back({UnitId::head(),
                      {{"lnf.gamma", ones(d)},
                       {"lnf.beta", zeros(d)},
                       {"lm_head", normal_tensor<T>({d, config_.vocab_size}, sd, rng)}}});
    mask_ = FreezeMask::all(config_.n_layers);
    mask_.groups_trainable = config_.groups_always_trainable;
}

template <typename T>
Model<T>::~Model() = default;

template <typename T>
Model<T>::Model(const Model& other)
    : config_(other.config_), units_(other.units_), mask_(other.mask_),
      last_activation_bytes_(other.last_activation_bytes_), last_backward_visits_(other.last_backward_visits_) {}

template <typename T>
Model<T>& Model<T>::operator=(const Model& other) {
    if (this != &other) {
        config_ = other.config_;
        units_ = other.units_;
        mask_ = other.mask_;
        pass_.reset();
        last_activation_bytes_ = other.last_activation_bytes_;
        last_backward_visits_ = other.last_backward_visits_;
    }
    return *this;
}

template <typename T>
Model<T>::Model(Model&&) noexcept = default;

template <typename T>
Model<T>& Model<T>::operator=(Model&&) noexcept = default;

template <typename T>
std::size_t Model<T>::unit_index(UnitId id) const {
    switch (id.kind) {
    case UnitKind::embedding:
        return 0;
    case UnitKind::head:
        return units_.size() - 1;
    case UnitKind::block:
        break;
    }
    if (id.block >= config_.n_layers) {
        throw UsageError("model: layer " + std::to_string(id.block) + " out of range [0," +
                         std::to_string(config_.n_layers) + ")");
    }
    return 1 + id.block;
}

template <typename T>
ParamUnit<T>& Model<T>::unit(UnitId id) {
    return units_[unit_index(id)];
}

template <typename T>
const ParamUnit<T>& Model<T>::unit(UnitId id) const {
    return units_[unit_index(id)];
}

template <typename T>
std::size_t Model<T>::param_count(LayerId layer) const {
    return unit(UnitId::of(layer)).param_count();
}

template <typename T>
std::size_t Model<T>::total_param_count() const {
    std::size_t n = 0;
    for (const auto& u : units_) {
        n += u.param_count();
    }
    return n;
}

template <typename T>
void Model<T>::set_freeze_mask(FreezeMask mask) {
    if (mask.trainable.size() != config_.n_layers) {
        throw UsageError("freeze mask has " + std::to_string(mask.trainable.size()) + " entries for " +
                         std::to_string(config_.n_layers) + " layers");
    }
    mask_ = std::move(mask);
}

template <typename T>
bool Model<T>::is_trainable(UnitId id) const {
    return id.is_block() ? mask_.trainable.at(id.block) : mask_.groups_trainable;
}

template <typename T>
void Model<T>::check_batch(const Batch& batch) const {
    if (batch.batch == 0 || batch.seq == 0) {
        throw InputError("batch: empty batch");
    }
    if (batch.seq > config_.max_seq_len) {
        throw InputError("batch: sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                         std::to_string(config_.max_seq_len));
    }
    const std::size_t n = batch.batch * batch.seq;
    if (batch.tokens.size() != n || batch.targets.size() != n) {
        throw InputError("batch: token/target count does not match batch*seq");
    }
    for (std::int32_t t : batch.tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
            throw InputError("batch: token id " + std::to_string(t) + " out of range [0," +
                             std::to_string(config_.vocab_size) + ")");
        }
    }
}

template <typename T>
Var<T> Model<T>::build_logits(Graph<T>& g, const Batch& batch, bool with_grad,
                              std::vector<std::vector<Var<T>>>* leaves) const {
    std::vector<std::vector<Var<T>>> vars(units_.size());
    for (std::size_t u = 0; u < units_.size(); ++u) {
        const bool grad = with_grad && is_trainable(units_[u].id);
        for (const auto& p : units_[u].params) {
            vars[u].push_back(g.input(p.value, grad));
        }
    }

    std::vector<std::int32_t> positions(batch.batch * batch.seq);
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] = static_cast<std::int32_t>(i % batch.seq);
    }
    const auto& emb = vars.front();
    Var<T> x = ops::add(ops::embedding(emb[0], batch.tokens), ops::embedding(emb[1], positions));

    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const auto& p = vars[1 + l];
        const ops::AttentionShape shape{batch.batch, batch.seq, config_.n_heads, config_.window_of(LayerId{l})};
        const Var<T> h = ops::layernorm(x, p[0], p[1]);
        const Var<T> att = ops::causal_attention(ops::matmul(h, p[2]), ops::matmul(h, p[3]), ops::matmul(h, p[4]), shape);
        x = ops::add(x, ops::matmul(att, p[5]));
        const Var<T> h2 = ops::layernorm(x, p[6], p[7]);
        x = ops::add(x, ops::matmul(ops::gelu(ops::matmul(h2, p[8])), p[9]));
    }

    const auto& head = vars.back();
    const Var<T> logits = ops::matmul(ops::layernorm(x, head[0], head[1]), head[2]);
    if (leaves != nullptr) {
        *leaves = std::move(vars);
    }
    return logits;
}

template <typename T>
T Model<T>::forward_loss(const Batch& batch) {
    check_batch(batch);
    auto pass = std::make_unique<Pass>();
    const Var<T> logits = build_logits(pass->graph, batch, true, &pass->leaves);
    pass->loss = ops::cross_entropy(logits, batch.targets);
    last_activation_bytes_ = pass->graph.activation_bytes();
    const T loss = pass->loss.value().item();
    pass_ = std::move(pass);
    return loss;
}

template <typename T>
std::vector<LayerGrads<T>> Model<T>::backward_collect() {
    if (!pass_) {
        throw UsageError("backward_collect: no forward pass this step");
    }
    const Gradients<T> grads = pass_->graph.backward(pass_->loss);
    last_backward_visits_ = pass_->graph.last_backward_order().size();
    std::vector<LayerGrads<T>> out;
    for (std::size_t u = 0; u < units_.size(); ++u) {
        if (!is_trainable(units_[u].id)) {
            continue;
        }
        LayerGrads<T> lg{units_[u].id, {}, units_[u].param_count()};
        lg.flat_grad.reserve(lg.n_params);
        for (const Var<T>& leaf : pass_->leaves[u]) {
            const auto g = grads.of(leaf).data();
            lg.flat_grad.insert(lg.flat_grad.end(), g.begin(), g.end());
        }
        out.push_back(std::move(lg));
    }
    pass_.reset();
    return out;
}

template <typename T>
T Model<T>::evaluate(const Batch& batch) const {
    check_batch(batch);
    Graph<T> g;
    return ops::cross_entropy(build_logits(g, batch, false, nullptr), batch.targets).value().item();
}

template <typename T>
std::vector<T> Model<T>::sequence_losses(const Batch& batch) const {
    check_batch(batch);
    Graph<T> g;
    const Var<T> logits = build_logits(g, batch, false, nullptr);
    const std::size_t V = config_.vocab_size;
    const auto Z = logits.value().data();
    std::vector<T> out(batch.batch, T{0});
    for (std::size_t b = 0; b < batch.batch; ++b) {
        std::size_t count = 0;
        for (std::size_t s = 0; s < batch.seq; ++s) {
            const std::size_t r = b * batch.seq + s;
            const std::int32_t t = batch.targets[r];
            if (t == ops::kIgnoreIndex) {
                continue;
            }
            T mx = Z[r * V];
            for (std::size_t j = 1; j < V; ++j) {
                mx = std::max(mx, Z[r * V + j]);
            }
            T z{0};
            for (std::size_t j = 0; j < V; ++j) {
                z += std::exp(Z[r * V + j] - mx);
            }
            out[b] += mx + std::log(z) - Z[r * V + static_cast<std::size_t>(t)];
            ++count;
        }
        if (count > 0) {
            out[b] /= T(count);
        }
    }
    return out;
}

template struct ParamUnit<float>;
template struct ParamUnit<double>;
template class Model<float>;
template class Model<double>;

} // namespace grass
