// SPDX-License-Identifier: Apache-2.0
//
// Adam with decoupled weight decay, with state sharded per parameter unit so
// each shard can live on either memory tier and be updated on its own.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "grass/model.hpp"

namespace grass {

struct OptimizerConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    // Global-norm gradient clipping threshold; 0 disables it.
    double clip_global_norm = 0.0;

    void validate() const;
};

enum class Residency { device, host, in_flight };

const char* residency_name(Residency r);

template <typename T>
struct OptimizerShard {
    UnitId unit;
    std::vector<Tensor<T>> m; // first moments, one per parameter tensor
    std::vector<Tensor<T>> v; // second moments
    std::uint64_t step_count = 0;
    Residency residency = Residency::host;

    // Bytes of moment storage (the payload that migrates between tiers).
    std::size_t bytes() const;

    // Moments and step count; residency is a location, not state.
    bool same_state(const OptimizerShard& other) const;
};

template <typename T>
OptimizerShard<T> make_shard(const ParamUnit<T>& unit, Residency residency);

// One shard per unit in model order. Block shards start on the host tier,
// embedding/head shards on the device.
template <typename T>
std::vector<OptimizerShard<T>> init_shards(const Model<T>& model);

// Bias-corrected Adam step on one unit. The shard must be device-resident.
template <typename T>
void apply_update(OptimizerShard<T>& shard, ParamUnit<T>& params, const LayerGrads<T>& grads,
                  const OptimizerConfig& cfg);

// Scales all gradients in place so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::vector<LayerGrads<T>>& grads, double max_norm);

// Wire format: "GSHD" | u64 payload length | payload | u32 CRC-32 of payload.
// All integers and scalars little-endian.
template <typename T>
std::vector<std::uint8_t> serialize_shard(const OptimizerShard<T>& shard);

// Throws IntegrityError on any length, magic, precision or checksum mismatch.
// The returned shard is tagged in_flight; the receiver decides where it lives.
template <typename T>
OptimizerShard<T> deserialize_shard(std::span<const std::uint8_t> bytes);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

extern template struct OptimizerShard<float>;
extern template struct OptimizerShard<double>;

} // namespace grass
