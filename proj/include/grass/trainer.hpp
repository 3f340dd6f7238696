// SPDX-License-Identifier: Apache-2.0
//
// The training loop for every method, with per-step metrics and artifacts.

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "grass/config.hpp"
#include "grass/scheduler.hpp"

namespace grass {

struct MetricsRecord {
    std::size_t step = 0;
    bool probe = false;
    double train_loss = 0.0;
    std::optional<double> val_loss;
    std::vector<std::size_t> sampled_layers;
    std::vector<double> probs;
    // Simulated milliseconds: the configured mode, and both offload modes
    // planned for the same step.
    double step_time_ms = 0.0;
    double step_time_vanilla_ms = 0.0;
    double step_time_overlapped_ms = 0.0;
    std::optional<double> wall_ms;
    std::map<std::string, std::size_t> device_peak_bytes; // running peaks
};

void to_json(nlohmann::json& j, const MetricsRecord& r);

struct RunResult {
    RunConfig config; // resolved
    std::vector<MetricsRecord> metrics;
    std::vector<TraceRecord> trace;
    double final_train_loss = 0.0;
    double final_val_loss = 0.0;
    std::map<std::string, std::size_t> peak_bytes;
    // All parameters in unit order, widened to double (exact for float32).
    std::vector<double> final_params;
    // step_count of each block shard, by layer.
    std::vector<std::uint64_t> block_update_counts;
    // Per step, the RMS gradient of each block (empty when the block was frozen).
    std::vector<std::vector<std::optional<double>>> block_grad_rms;
};

// Runs a full training job. With write_artifacts the output directory receives
// config.json, metrics.jsonl, prob_trace.jsonl (sampling methods),
// timeline.csv (offloaded runs), memory_trace.csv, summary.json and
// checkpoint.bin. A numerical fault writes the checkpoint before rethrowing.
RunResult run_training(const RunConfig& config, bool write_artifacts = true);

// Applies the GRASS_OUTPUT_ROOT environment variable to relative output dirs.
std::string effective_output_dir(const RunConfig& config);

} // namespace grass
