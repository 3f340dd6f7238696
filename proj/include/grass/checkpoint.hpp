// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//   "GRASSCKP" | u32 version | u64 header length | JSON header | blobs
// The header carries the run config, precision, step, and a table of every
// parameter tensor and optimizer shard with its byte offset into the blob
// area. Parameter blobs are raw little-endian scalars; shard blobs use the
// shard wire format (which carries its own length and CRC).

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "grass/model.hpp"
#include "grass/optimizer.hpp"

namespace grass {

template <typename T>
struct Checkpoint {
    nlohmann::json config;
    std::size_t step = 0;
    Model<T> model;
    std::map<UnitId, OptimizerShard<T>> shards;
};

template <typename T>
void save_checkpoint(const std::string& path, const nlohmann::json& config, std::size_t step, const Model<T>& model,
                     const std::vector<OptimizerShard<T>>& shards);

// Throws IoError when unreadable, IntegrityError when malformed.
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path);

// Header only, for inspection without knowing the precision.
nlohmann::json read_checkpoint_header(const std::string& path);

} // namespace grass
