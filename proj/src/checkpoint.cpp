// SPDX-License-Identifier: Apache-2.0

#include "grass/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "grass/config.hpp"
#include "grass/error.hpp"

namespace grass {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'G', 'R', 'A', 'S', 'S', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
const char* precision_tag() {
    return sizeof(T) == 8 ? "float64" : "float32";
}

json unit_json(UnitId id) {
    return json{{"kind", static_cast<int>(id.kind)}, {"block", id.block}, {"name", id.name()}};
}

UnitId unit_from(const json& j) {
    return UnitId{static_cast<UnitKind>(j.at("kind").get<int>()), j.at("block").get<std::size_t>()};
}

struct Raw {
    json header;
    std::vector<std::uint8_t> blobs;
};

Raw read_raw(const std::string& path, bool with_blobs) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("checkpoint: cannot read '" + path + "'");
    }
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t header_len = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IntegrityError("checkpoint: '" + path + "' is not a checkpoint");
    }
    if (version != kVersion) {
        throw IntegrityError("checkpoint: unsupported version " + std::to_string(version));
    }
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw IntegrityError("checkpoint: truncated header");
    }
    Raw raw;
    try {
        raw.header = json::parse(header);
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("checkpoint: malformed header: ") + e.what());
    }
    if (with_blobs) {
        raw.blobs.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    return raw;
}

} // namespace

template <typename T>
void save_checkpoint(const std::string& path, const json& config, std::size_t step, const Model<T>& model,
                     const std::vector<OptimizerShard<T>>& shards) {
    std::vector<std::uint8_t> blobs;
    json params = json::array();
    for (const auto& unit : model.units()) {
        for (const auto& p : unit.params) {
            params.push_back(json{{"unit", unit_json(unit.id)},
                                  {"name", p.name},
                                  {"shape", p.value.shape()},
                                  {"offset", blobs.size()},
                                  {"bytes", p.value.bytes()}});
            const auto* b = reinterpret_cast<const std::uint8_t*>(p.value.data().data());
            blobs.insert(blobs.end(), b, b + p.value.bytes());
        }
    }
    json shard_table = json::array();
    for (const auto& s : shards) {
        const auto blob = serialize_shard(s);
        shard_table.push_back(json{{"unit", unit_json(s.unit)}, {"offset", blobs.size()}, {"bytes", blob.size()}});
        blobs.insert(blobs.end(), blob.begin(), blob.end());
    }
    const json header{{"config", config},
                      {"precision", precision_tag<T>()},
                      {"step", step},
                      {"parameters", params},
                      {"shards", shard_table},
                      {"blob_bytes", blobs.size()}};
    const std::string text = header.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("checkpoint: cannot write '" + tmp + "'");
        }
        const std::uint64_t len = text.size();
        out.write(kMagic, sizeof(kMagic));
        out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        out.write(reinterpret_cast<const char*>(blobs.data()), static_cast<std::streamsize>(blobs.size()));
        if (!out) {
            throw IoError("checkpoint: write to '" + tmp + "' failed");
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw IoError("checkpoint: cannot move '" + tmp + "' to '" + path + "'");
    }
}

json read_checkpoint_header(const std::string& path) {
    return read_raw(path, false).header;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    Raw raw = read_raw(path, true);
    const json& h = raw.header;
    try {
        if (h.at("precision").get<std::string>() != precision_tag<T>()) {
            throw IntegrityError("checkpoint: stored as " + h.at("precision").get<std::string>() + ", requested " +
                                 precision_tag<T>());
        }
        if (h.at("blob_bytes").get<std::size_t>() != raw.blobs.size()) {
            throw IntegrityError("checkpoint: blob area is " + std::to_string(raw.blobs.size()) +
                                 " bytes, header says " + std::to_string(h.at("blob_bytes").get<std::size_t>()));
        }
        const RunConfig cfg = config_from_json(h.at("config"));
        Checkpoint<T> ck{h.at("config"), h.at("step").get<std::size_t>(), Model<T>(cfg.model, 0), {}};

        auto slice = [&](const json& entry) {
            const auto off = entry.at("offset").get<std::size_t>();
            const auto n = entry.at("bytes").get<std::size_t>();
            if (off > raw.blobs.size() || n > raw.blobs.size() - off) {
                throw IntegrityError("checkpoint: entry outside the blob area");
            }
            return std::span<const std::uint8_t>(raw.blobs.data() + off, n);
        };
        for (const auto& e : h.at("parameters")) {
            auto& unit = ck.model.unit(unit_from(e.at("unit")));
            const auto name = e.at("name").get<std::string>();
            auto it = std::find_if(unit.params.begin(), unit.params.end(),
                                   [&](const Parameter<T>& p) { return p.name == name; });
            if (it == unit.params.end() || it->value.shape() != e.at("shape").get<Shape>()) {
                throw IntegrityError("checkpoint: parameter " + name + " does not match the model layout");
            }
            const auto bytes = slice(e);
            if (bytes.size() != it->value.bytes()) {
                throw IntegrityError("checkpoint: parameter " + name + " has the wrong byte length");
            }
            std::memcpy(it->value.mutable_data().data(), bytes.data(), bytes.size());
        }
        for (const auto& e : h.at("shards")) {
            auto shard = deserialize_shard<T>(slice(e));
            shard.residency = Residency::host;
            ck.shards.emplace(shard.unit, std::move(shard));
        }
        return ck;
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("checkpoint: malformed header: ") + e.what());
    } catch (const ConfigError& e) {
        throw IntegrityError(std::string("checkpoint: stored config is invalid: ") + e.what());
    } catch (const UsageError& e) {
        throw IntegrityError(std::string("checkpoint: ") + e.what());
    }
}

template void save_checkpoint<float>(const std::string&, const json&, std::size_t, const Model<float>&,
                                     const std::vector<OptimizerShard<float>>&);
template void save_checkpoint<double>(const std::string&, const json&, std::size_t, const Model<double>&,
                                      const std::vector<OptimizerShard<double>>&);
template Checkpoint<float> load_checkpoint<float>(const std::string&);
template Checkpoint<double> load_checkpoint<double>(const std::string&);

} // namespace grass
