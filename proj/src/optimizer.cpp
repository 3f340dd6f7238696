// SPDX-License-Identifier: Apache-2.0

#include "grass/optimizer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <string>

#include <zlib.h>

#include "grass/error.hpp"

namespace grass {

static_assert(std::endian::native == std::endian::little, "shard blobs are written in host order");

void OptimizerConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("optimizer.learning_rate must be positive");
    }
    if (!(beta1 > 0.0 && beta1 < 1.0)) {
        throw ConfigError("optimizer.beta1 must be in (0,1)");
    }
    if (!(beta2 > 0.0 && beta2 < 1.0)) {
        throw ConfigError("optimizer.beta2 must be in (0,1)");
    }
    if (!(epsilon > 0.0)) {
        throw ConfigError("optimizer.epsilon must be positive");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("optimizer.weight_decay must be non-negative");
    }
    if (!(clip_global_norm >= 0.0)) {
        throw ConfigError("optimizer.clip_global_norm must be non-negative");
    }
}

const char* residency_name(Residency r) {
    switch (r) {
    case Residency::device:
        return "device";
    case Residency::host:
        return "host";
    case Residency::in_flight:
        return "in_flight";
    }
    return "?";
}

template <typename T>
std::size_t OptimizerShard<T>::bytes() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        n += m[i].bytes() + v[i].bytes();
    }
    return n;
}

template <typename T>
bool OptimizerShard<T>::same_state(const OptimizerShard& other) const {
    return unit == other.unit && step_count == other.step_count && m == other.m && v == other.v;
}

template <typename T>
OptimizerShard<T> make_shard(const ParamUnit<T>& unit, Residency residency) {
    OptimizerShard<T> shard;
    shard.unit = unit.id;
    shard.residency = residency;
    for (const auto& p : unit.params) {
        shard.m.push_back(Tensor<T>::zeros(p.value.shape()));
        shard.v.push_back(Tensor<T>::zeros(p.value.shape()));
    }
    return shard;
}

template <typename T>
std::vector<OptimizerShard<T>> init_shards(const Model<T>& model) {
    std::vector<OptimizerShard<T>> shards;
    for (const auto& unit : model.units()) {
        shards.push_back(make_shard(unit, unit.id.is_block() ? Residency::host : Residency::device));
    }
    return shards;
}

template <typename T>
void apply_update(OptimizerShard<T>& shard, ParamUnit<T>& params, const LayerGrads<T>& grads,
                  const OptimizerConfig& cfg) {
    if (shard.residency != Residency::device) {
        throw SchedulingError("apply_update: shard " + shard.unit.name() + " is " +
                              residency_name(shard.residency) + ", not device-resident");
    }
    if (shard.unit != params.id || grads.unit != params.id) {
        throw UsageError("apply_update: unit mismatch between shard " + shard.unit.name() + ", params " +
                         params.id.name() + " and grads " + grads.unit.name());
    }
    if (grads.flat_grad.size() != params.param_count() || shard.m.size() != params.params.size()) {
        throw UsageError("apply_update: gradient of " + std::to_string(grads.flat_grad.size()) +
                         " scalars for a unit of " + std::to_string(params.param_count()));
    }
    for (T g : grads.flat_grad) {
        if (!std::isfinite(g)) {
            throw NumericalFault("apply_update: non-finite gradient for " + grads.unit.name());
        }
    }

    shard.step_count += 1;
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T lr = static_cast<T>(cfg.learning_rate);
    const T eps = static_cast<T>(cfg.epsilon);
    const T wd = static_cast<T>(cfg.weight_decay);
    const T t = static_cast<T>(shard.step_count);
    const T bc1 = T(1) - std::pow(b1, t);
    const T bc2 = T(1) - std::pow(b2, t);

    std::size_t offset = 0;
    for (std::size_t p = 0; p < params.params.size(); ++p) {
        auto theta = params.params[p].value.mutable_data();
        auto m = shard.m[p].mutable_data();
        auto v = shard.v[p].mutable_data();
        if (m.size() != theta.size()) {
            throw UsageError("apply_update: moment shape mismatch for " + params.params[p].name);
        }
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const T g = grads.flat_grad[offset + i];
            m[i] = b1 * m[i] + (T(1) - b1) * g;
            v[i] = b2 * v[i] + (T(1) - b2) * g * g;
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            theta[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta[i]);
        }
        offset += theta.size();
    }
}

template <typename T>
double clip_global_norm(std::vector<LayerGrads<T>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (T x : g.flat_grad) {
            sq += static_cast<double>(x) * static_cast<double>(x);
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T factor = static_cast<T>(max_norm / norm);
        for (auto& g : grads) {
            for (T& x : g.flat_grad) {
                x *= factor;
            }
        }
    }
    return norm;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes a uInt length; feed large buffers in chunks.
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
        crc = ::crc32(crc, bytes.data() + pos, static_cast<uInt>(n));
        pos += n;
    }
    return static_cast<std::uint32_t>(crc);
}

namespace {

constexpr char kShardMagic[4] = {'G', 'S', 'H', 'D'};
constexpr std::uint32_t kShardVersion = 1;

class Writer {
public:
    template <typename V>
    void put(V value) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
        out_.insert(out_.end(), p, p + sizeof(V));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        out_.insert(out_.end(), p, p + n);
    }
    std::vector<std::uint8_t>& buffer() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    template <typename V>
    V get() {
        V value;
        get_bytes(&value, sizeof(V));
        return value;
    }
    void get_bytes(void* dst, std::size_t n) {
        if (n > in_.size() - pos_) {
            throw IntegrityError("shard: payload truncated");
        }
        std::memcpy(dst, in_.data() + pos_, n);
        pos_ += n;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

} // namespace

template <typename T>
std::vector<std::uint8_t> serialize_shard(const OptimizerShard<T>& shard) {
    Writer payload;
    payload.put<std::uint32_t>(kShardVersion);
    payload.put<std::uint32_t>(sizeof(T));
    payload.put<std::uint32_t>(static_cast<std::uint32_t>(shard.unit.kind));
    payload.put<std::uint64_t>(shard.unit.block);
    payload.put<std::uint64_t>(shard.step_count);
    payload.put<std::uint32_t>(static_cast<std::uint32_t>(shard.m.size()));
    for (const auto& t : shard.m) {
        payload.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) {
            payload.put<std::uint64_t>(d);
        }
    }
    for (const auto* set : {&shard.m, &shard.v}) {
        for (const auto& t : *set) {
            payload.put_bytes(t.data().data(), t.bytes());
        }
    }

    Writer out;
    out.put_bytes(kShardMagic, sizeof(kShardMagic));
    out.put<std::uint64_t>(payload.buffer().size());
    out.put_bytes(payload.buffer().data(), payload.buffer().size());
    out.put<std::uint32_t>(crc32_of(payload.buffer()));
    return std::move(out.buffer());
}

template <typename T>
OptimizerShard<T> deserialize_shard(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t kFrame = sizeof(kShardMagic) + sizeof(std::uint64_t) + sizeof(std::uint32_t);
    if (bytes.size() < kFrame) {
        throw IntegrityError("shard: blob of " + std::to_string(bytes.size()) + " bytes is shorter than its frame");
    }
    if (std::memcmp(bytes.data(), kShardMagic, sizeof(kShardMagic)) != 0) {
        throw IntegrityError("shard: bad magic");
    }
    std::uint64_t length = 0;
    std::memcpy(&length, bytes.data() + sizeof(kShardMagic), sizeof(length));
    if (length != bytes.size() - kFrame) {
        throw IntegrityError("shard: declared payload length " + std::to_string(length) + " but blob carries " +
                             std::to_string(bytes.size() - kFrame));
    }
    const auto payload = bytes.subspan(sizeof(kShardMagic) + sizeof(std::uint64_t), length);
    std::uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - sizeof(stored_crc), sizeof(stored_crc));
    if (crc32_of(payload) != stored_crc) {
        throw IntegrityError("shard: checksum mismatch");
    }

    Reader r(payload);
    if (r.get<std::uint32_t>() != kShardVersion) {
        throw IntegrityError("shard: unsupported version");
    }
    if (r.get<std::uint32_t>() != sizeof(T)) {
        throw IntegrityError("shard: precision differs from the reader's");
    }
    OptimizerShard<T> shard;
    const auto kind = r.get<std::uint32_t>();
    if (kind > static_cast<std::uint32_t>(UnitKind::head)) {
        throw IntegrityError("shard: unknown unit kind");
    }
    shard.unit.kind = static_cast<UnitKind>(kind);
    shard.unit.block = r.get<std::uint64_t>();
    shard.step_count = r.get<std::uint64_t>();
    shard.residency = Residency::in_flight;
    const auto n_tensors = r.get<std::uint32_t>();
    std::vector<Shape> shapes(n_tensors);
    for (auto& shape : shapes) {
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) {
            throw IntegrityError("shard: implausible tensor rank");
        }
        shape.resize(rank);
        for (auto& d : shape) {
            d = r.get<std::uint64_t>();
            if (d == 0 || d > length) {
                throw IntegrityError("shard: implausible tensor extent");
            }
        }
    }
    for (auto* set : {&shard.m, &shard.v}) {
        for (const auto& shape : shapes) {
            std::vector<T> data(shape_numel(shape));
            r.get_bytes(data.data(), data.size() * sizeof(T));
            set->emplace_back(shape, std::move(data));
        }
    }
    if (!r.done()) {
        throw IntegrityError("shard: trailing bytes in payload");
    }
    return shard;
}

#define GRASS_INSTANTIATE_OPTIMIZER(T)                                                                            \
    template struct OptimizerShard<T>;                                                                            \
    template OptimizerShard<T> make_shard<T>(const ParamUnit<T>&, Residency);                                     \
    template std::vector<OptimizerShard<T>> init_shards<T>(const Model<T>&);                                      \
    template void apply_update<T>(OptimizerShard<T>&, ParamUnit<T>&, const LayerGrads<T>&, const OptimizerConfig&); \
    template double clip_global_norm<T>(std::vector<LayerGrads<T>>&, double);                                     \
    template std::vector<std::uint8_t> serialize_shard<T>(const OptimizerShard<T>&);                              \
    template OptimizerShard<T> deserialize_shard<T>(std::span<const std::uint8_t>);

GRASS_INSTANTIATE_OPTIMIZER(float)
GRASS_INSTANTIATE_OPTIMIZER(double)

#undef GRASS_INSTANTIATE_OPTIMIZER

} // namespace grass
