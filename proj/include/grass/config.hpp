// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document, every field optional with a default.
// Unknown fields are rejected so typos do not silently fall back to defaults.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "grass/data.hpp"
#include "grass/model.hpp"
#include "grass/offload.hpp"
#include "grass/optimizer.hpp"
#include "grass/scheduler.hpp"

namespace grass {

enum class Method { FFT, UNIFORM_STATIC, GRASS_STATIC, GRASS };

const char* method_name(Method m);
Method parse_method(const std::string& name);

enum class Precision { float32, float64 };

struct OffloadConfig {
    // Block shards live on the host tier and move per update. Off keeps the
    // active shards device-resident (FFT always keeps every shard there).
    bool enabled = true;
    OffloadMode mode = OffloadMode::overlapped;
    TierModel tier;
    // Simulated forward+backward time per step.
    double compute_ms = 0.0;
    unsigned jitter_us = 0;
    std::uint64_t jitter_seed = 0;
};

struct RunConfig {
    ModelConfig model;
    OptimizerConfig optimizer;
    GrassConfig grass;
    Method method = Method::GRASS;
    DatasetSpec dataset;
    std::size_t total_steps = 200;
    std::size_t batch_size = 8;
    std::size_t seq_len = 16;
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    Precision precision = Precision::float64;
    // Validation loss every eval_every steps and at the last step; 0 = last only.
    std::size_t eval_every = 10;
    std::size_t log_every = 1;
    // Wall-clock fields make metrics non-reproducible, so they are opt-in.
    bool record_wall_time = false;
    bool write_checkpoint = true;
    OffloadConfig offload;

    void validate() const;
    // Applies derived settings (planted-task attention windows, method presets).
    RunConfig resolved() const;
};

RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);
RunConfig load_config(const std::string& path);

} // namespace grass
