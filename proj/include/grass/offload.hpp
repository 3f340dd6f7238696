// SPDX-License-Identifier: Apache-2.0
//
// Optimizer-state residency over a simulated device/host pair. Planning runs
// on a virtual millisecond clock; execution moves real serialized shards
// through a background transfer worker so ordering bugs surface as errors.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <vector>

#include "grass/model.hpp"
#include "grass/optimizer.hpp"

namespace grass {

struct TierModel {
    // Bytes available for optimizer shard buffers on the device.
    std::size_t device_capacity = std::numeric_limits<std::size_t>::max();
    std::size_t host_capacity = std::numeric_limits<std::size_t>::max();
    double bandwidth_bytes_per_ms = 1e6;
    double latency_ms = 0.0;
    double update_fixed_ms = 0.0;
    double update_ms_per_byte = 0.0;

    double transfer_ms(std::size_t bytes) const { return latency_ms + static_cast<double>(bytes) / bandwidth_bytes_per_ms; }
    double update_ms(std::size_t bytes) const { return update_fixed_ms + update_ms_per_byte * static_cast<double>(bytes); }
    void validate() const;
};

enum class OffloadMode { vanilla, overlapped };

const char* mode_name(OffloadMode mode);

enum class EventKind { htod, dtoh, update };

const char* event_name(EventKind kind);

struct TimelineEvent {
    EventKind kind = EventKind::update;
    LayerId layer;
    std::size_t bytes = 0;
    double issue_ms = 0.0;
    double start_ms = 0.0;
    double end_ms = 0.0;
};

struct ShardJob {
    LayerId layer;
    std::size_t bytes = 0;
};

struct OverlapTimeline {
    OffloadMode mode = OffloadMode::vanilla;
    std::vector<TimelineEvent> transfers; // channel order
    std::vector<TimelineEvent> updates;   // update-lane order (ascending layer)
    double makespan_ms = 0.0;

    // Largest number of shards whose buffer is held at once (a buffer is held
    // from HtoD start to DtoH end).
    std::size_t peak_buffers() const;
    // Largest simultaneous shard bytes held on device.
    std::size_t peak_buffer_bytes() const;
};

// Layers are processed in ascending LayerId whatever order they are passed in.
OverlapTimeline plan_schedule(std::vector<ShardJob> jobs, OffloadMode mode, const TierModel& tier);

// CSV with columns lane,kind,layer,start_ms,end_ms. Times are shifted by offset_ms.
void write_timeline_csv(std::ostream& out, const OverlapTimeline& timeline, double offset_ms = 0.0,
                        bool header = true);

enum class MemCategory { params, grads, activations, optimizer, optimizer_groups };
constexpr std::size_t kMemCategories = 5;

const char* category_name(MemCategory c);

struct MemorySample {
    double time_ms = 0.0;
    MemCategory category = MemCategory::params;
    std::size_t device_bytes = 0; // category total after the change
};

// Device-resident byte totals per category, with peaks and an optional trace.
class MemoryAccountant {
public:
    explicit MemoryAccountant(bool keep_trace = false) : keep_trace_(keep_trace) {}

    void alloc(MemCategory c, std::size_t bytes, double time_ms = 0.0);
    // Throws AccountingError when freeing more than is allocated.
    void free(MemCategory c, std::size_t bytes, double time_ms = 0.0);

    std::size_t current(MemCategory c) const { return current_[idx(c)]; }
    std::size_t current_total() const { return total_; }
    std::size_t peak(MemCategory c) const { return peak_[idx(c)]; }
    std::size_t peak_total() const { return peak_total_; }
    std::map<std::string, std::size_t> peak_report() const;

    const std::vector<MemorySample>& trace() const { return trace_; }
    void write_trace_csv(std::ostream& out) const;

private:
    static std::size_t idx(MemCategory c) { return static_cast<std::size_t>(c); }
    void note(MemCategory c, double time_ms);

    std::array<std::size_t, kMemCategories> current_{};
    std::array<std::size_t, kMemCategories> peak_{};
    std::size_t total_ = 0;
    std::size_t peak_total_ = 0;
    bool keep_trace_;
    std::vector<MemorySample> trace_;
};

// Replays a planned timeline's buffer holds into the optimizer category,
// starting at offset_ms on the accountant's clock.
void account_timeline(MemoryAccountant& memory, const OverlapTimeline& timeline, double offset_ms);

// Host tier: serialized shards keyed by unit. Thread-safe.
class HostStore {
public:
    void put(UnitId unit, std::vector<std::uint8_t> blob);
    std::vector<std::uint8_t> get(UnitId unit) const;
    bool contains(UnitId unit) const;
    std::size_t total_bytes() const;

private:
    mutable std::mutex mu_;
    std::map<UnitId, std::vector<std::uint8_t>> blobs_;
};

struct ExecOptions {
    // Each transfer is delayed by base_delay_us plus a uniform random
    // [0, jitter_max_us] on the worker.
    unsigned base_delay_us = 0;
    unsigned jitter_max_us = 0;
    std::uint64_t jitter_seed = 0;
    // Flip one byte of this layer's in-flight HtoD blob.
    std::optional<LayerId> corrupt_layer;
    // Testing aid: run updates without waiting for arrival. An update then
    // sees an in-flight shard and must fail.
    bool skip_arrival_wait = false;
};

struct ExecReport {
    std::vector<LayerId> update_order;
    std::size_t transfers = 0;
    // Shards simultaneously held on the device as observed by the worker.
    std::size_t max_resident = 0;
};

template <typename T>
using ShardUpdate = std::function<void(OptimizerShard<T>&)>;

// Executes the timeline's transfers and updates against real shard blobs in
// `host`. Each update runs only after its shard has arrived and verified.
// Shards are written back before returning. IntegrityError aborts the step.
template <typename T>
ExecReport execute_schedule(const OverlapTimeline& timeline, HostStore& host, const ShardUpdate<T>& update,
                            const ExecOptions& options = {});

} // namespace grass
