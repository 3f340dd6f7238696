// SPDX-License-Identifier: Apache-2.0
//
// Grid sweeps over scheduler settings and seeds, and post-hoc run reports.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "grass/config.hpp"

namespace grass {

// Empty axes keep the base config's value.
struct SweepGrid {
    std::vector<std::size_t> probe_steps;
    std::vector<std::size_t> sample_period;
    std::vector<std::size_t> active_layers;
    std::vector<std::uint64_t> seeds;

    std::size_t size() const;
};

SweepGrid grid_from_json(const nlohmann::json& j);

struct SweepRow {
    std::size_t probe_steps = 0;
    std::size_t sample_period = 0;
    std::size_t active_layers = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double final_val_loss = 0.0;
    double final_train_loss = 0.0;
    double mean_step_ms = 0.0;
    double mean_vanilla_ms = 0.0;
    double mean_overlapped_ms = 0.0;
    std::string output_dir;
};

// One run per grid point under <base.output_dir>/<point name>. A failing point
// is recorded in its row and the sweep moves on. Rows stream to csv if given.
std::vector<SweepRow> run_sweep(const RunConfig& base, const SweepGrid& grid, bool write_artifacts,
                                std::ostream* csv = nullptr);

void write_sweep_header(std::ostream& out);
void write_sweep_row(std::ostream& out, const SweepRow& row);

struct RunReport {
    std::string method;
    double final_train_loss = 0.0;
    double final_val_loss = 0.0;
    std::map<std::string, std::size_t> peak_device_bytes;
    // Simulated vanilla / overlapped optimizer-phase time (1 when nothing moves).
    double overlap_speedup = 1.0;
    std::vector<std::pair<std::size_t, double>> entropy; // (step, H(p)) per trace record
    std::size_t metrics_records = 0;
};

// Reads summary.json, metrics.jsonl and, when present, prob_trace.jsonl.
// Missing or malformed artifacts raise IoError naming the file.
RunReport build_report(const std::string& artifacts_dir);
std::string format_report(const RunReport& r);
// Writes report.csv (key,value) and entropy.csv into the artifacts directory.
void write_report_files(const std::string& artifacts_dir, const RunReport& r);

} // namespace grass
