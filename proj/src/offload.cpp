// SPDX-License-Identifier: Apache-2.0

#include "grass/offload.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <exception>
#include <ostream>
#include <string>
#include <thread>

#include "grass/error.hpp"
#include "grass/rng.hpp"

namespace grass {

void TierModel::validate() const {
    if (!(bandwidth_bytes_per_ms > 0.0)) {
        throw ConfigError("tier.bandwidth_bytes_per_ms must be positive");
    }
    if (!(latency_ms >= 0.0) || !(update_fixed_ms >= 0.0) || !(update_ms_per_byte >= 0.0)) {
        throw ConfigError("tier costs must be non-negative");
    }
}

const char* mode_name(OffloadMode mode) {
    return mode == OffloadMode::vanilla ? "vanilla" : "overlapped";
}

const char* event_name(EventKind kind) {
    switch (kind) {
    case EventKind::htod:
        return "HtoD";
    case EventKind::dtoh:
        return "DtoH";
    case EventKind::update:
        return "update";
    }
    return "?";
}

namespace {

struct Hold {
    double start;
    double end;
    std::size_t bytes;
};

std::vector<Hold> buffer_holds(const OverlapTimeline& tl) {
    std::map<std::size_t, Hold> holds;
    for (const auto& e : tl.transfers) {
        auto& h = holds[e.layer.index];
        if (e.kind == EventKind::htod) {
            h.start = e.start_ms;
            h.bytes = e.bytes;
        } else {
            h.end = e.end_ms;
        }
    }
    std::vector<Hold> out;
    for (const auto& [layer, h] : holds) {
        out.push_back(h);
    }
    return out;
}

// Sweep with releases ordered before acquisitions at equal times.
template <typename Weight>
std::size_t peak_overlap(const std::vector<Hold>& holds, Weight weight) {
    std::vector<std::pair<double, long long>> edges;
    for (const auto& h : holds) {
        const auto w = static_cast<long long>(weight(h));
        edges.emplace_back(h.start, w);
        edges.emplace_back(h.end, -w);
    }
    std::sort(edges.begin(), edges.end());
    long long cur = 0, best = 0;
    for (const auto& [t, w] : edges) {
        cur += w;
        best = std::max(best, cur);
    }
    return static_cast<std::size_t>(best);
}

} // namespace

std::size_t OverlapTimeline::peak_buffers() const {
    return peak_overlap(buffer_holds(*this), [](const Hold&) { return 1; });
}

std::size_t OverlapTimeline::peak_buffer_bytes() const {
    return peak_overlap(buffer_holds(*this), [](const Hold& h) { return h.bytes; });
}

OverlapTimeline plan_schedule(std::vector<ShardJob> jobs, OffloadMode mode, const TierModel& tier) {
    tier.validate();
    std::sort(jobs.begin(), jobs.end(), [](const ShardJob& a, const ShardJob& b) { return a.layer < b.layer; });
    for (std::size_t i = 1; i < jobs.size(); ++i) {
        if (jobs[i].layer == jobs[i - 1].layer) {
            throw UsageError("plan_schedule: block." + std::to_string(jobs[i].layer.index) + " listed twice");
        }
    }
    std::size_t host_bytes = 0;
    for (const auto& j : jobs) {
        host_bytes += j.bytes;
    }
    if (host_bytes > tier.host_capacity) {
        throw CapacityError("plan_schedule: " + std::to_string(host_bytes) + " shard bytes exceed host capacity " +
                            std::to_string(tier.host_capacity));
    }

    OverlapTimeline tl;
    tl.mode = mode;
    double channel_free = 0.0;
    auto transfer = [&](EventKind kind, const ShardJob& job, double issue) {
        TimelineEvent e{kind, job.layer, job.bytes, issue, std::max(issue, channel_free), 0.0};
        e.end_ms = e.start_ms + tier.transfer_ms(job.bytes);
        channel_free = e.end_ms;
        tl.transfers.push_back(e);
        return e;
    };
    auto update = [&](const ShardJob& job, double start) {
        TimelineEvent e{EventKind::update, job.layer, job.bytes, start, start, start + tier.update_ms(job.bytes)};
        tl.updates.push_back(e);
        return e;
    };

    if (mode == OffloadMode::vanilla) {
        double t = 0.0;
        for (const auto& job : jobs) {
            const auto in = transfer(EventKind::htod, job, t);
            const auto up = update(job, in.end_ms);
            t = transfer(EventKind::dtoh, job, up.end_ms).end_ms;
        }
    } else if (!jobs.empty()) {
        // HtoD(i+1) is issued when update(i) starts; DtoH(i) when it ends.
        // The channel is FIFO, so the channel order is H0 H1 D0 H2 D1 ...
        double in_end = transfer(EventKind::htod, jobs[0], 0.0).end_ms;
        double lane_free = 0.0;
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            const double start = std::max(in_end, lane_free);
            if (i + 1 < jobs.size()) {
                in_end = transfer(EventKind::htod, jobs[i + 1], start).end_ms;
            }
            lane_free = update(jobs[i], start).end_ms;
            transfer(EventKind::dtoh, jobs[i], lane_free);
        }
    }
    for (const auto& e : tl.transfers) {
        tl.makespan_ms = std::max(tl.makespan_ms, e.end_ms);
    }

    if (tl.peak_buffer_bytes() > tier.device_capacity) {
        throw CapacityError("plan_schedule: " + std::string(mode_name(mode)) + " schedule holds " +
                            std::to_string(tl.peak_buffer_bytes()) + " shard bytes on a device budget of " +
                            std::to_string(tier.device_capacity));
    }
    return tl;
}

void write_timeline_csv(std::ostream& out, const OverlapTimeline& tl, double offset_ms, bool header) {
    if (header) {
        out << "lane,kind,layer,start_ms,end_ms\n";
    }
    std::vector<TimelineEvent> all = tl.transfers;
    all.insert(all.end(), tl.updates.begin(), tl.updates.end());
    std::stable_sort(all.begin(), all.end(),
                     [](const TimelineEvent& a, const TimelineEvent& b) { return a.start_ms < b.start_ms; });
    for (const auto& e : all) {
        out << (e.kind == EventKind::update ? "compute" : "transfer") << ',' << event_name(e.kind) << ','
            << e.layer.index << ',' << (e.start_ms + offset_ms) << ',' << (e.end_ms + offset_ms) << '\n';
    }
}

const char* category_name(MemCategory c) {
    switch (c) {
    case MemCategory::params:
        return "params";
    case MemCategory::grads:
        return "grads";
    case MemCategory::activations:
        return "activations";
    case MemCategory::optimizer:
        return "optimizer";
    case MemCategory::optimizer_groups:
        return "optimizer_groups";
    }
    return "?";
}

void MemoryAccountant::alloc(MemCategory c, std::size_t bytes, double time_ms) {
    current_[idx(c)] += bytes;
    total_ += bytes;
    peak_[idx(c)] = std::max(peak_[idx(c)], current_[idx(c)]);
    peak_total_ = std::max(peak_total_, total_);
    note(c, time_ms);
}

void MemoryAccountant::free(MemCategory c, std::size_t bytes, double time_ms) {
    if (bytes > current_[idx(c)]) {
        throw AccountingError(std::string("memory: freeing ") + std::to_string(bytes) + " bytes of " +
                              category_name(c) + " with only " + std::to_string(current_[idx(c)]) + " allocated");
    }
    current_[idx(c)] -= bytes;
    total_ -= bytes;
    note(c, time_ms);
}

void MemoryAccountant::note(MemCategory c, double time_ms) {
    if (keep_trace_) {
        trace_.push_back(MemorySample{time_ms, c, current_[idx(c)]});
    }
}

std::map<std::string, std::size_t> MemoryAccountant::peak_report() const {
    std::map<std::string, std::size_t> out;
    for (std::size_t i = 0; i < kMemCategories; ++i) {
        out[category_name(static_cast<MemCategory>(i))] = peak_[i];
    }
    out["total"] = peak_total_;
    return out;
}

void MemoryAccountant::write_trace_csv(std::ostream& out) const {
    out << "time_ms,category,device_bytes\n";
    for (const auto& s : trace_) {
        out << s.time_ms << ',' << category_name(s.category) << ',' << s.device_bytes << '\n';
    }
}

void account_timeline(MemoryAccountant& memory, const OverlapTimeline& tl, double offset_ms) {
    struct Edge {
        double t;
        bool acquire;
        std::size_t bytes;
    };
    std::vector<Edge> edges;
    for (const auto& h : buffer_holds(tl)) {
        edges.push_back({h.start, true, h.bytes});
        edges.push_back({h.end, false, h.bytes});
    }
    std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
        return a.t < b.t || (a.t == b.t && !a.acquire && b.acquire);
    });
    for (const auto& e : edges) {
        if (e.acquire) {
            memory.alloc(MemCategory::optimizer, e.bytes, offset_ms + e.t);
        } else {
            memory.free(MemCategory::optimizer, e.bytes, offset_ms + e.t);
        }
    }
}

void HostStore::put(UnitId unit, std::vector<std::uint8_t> blob) {
    std::lock_guard lock(mu_);
    blobs_[unit] = std::move(blob);
}

std::vector<std::uint8_t> HostStore::get(UnitId unit) const {
    std::lock_guard lock(mu_);
    auto it = blobs_.find(unit);
    if (it == blobs_.end()) {
        throw UsageError("host store: no shard for " + unit.name());
    }
    return it->second;
}

bool HostStore::contains(UnitId unit) const {
    std::lock_guard lock(mu_);
    return blobs_.count(unit) > 0;
}

std::size_t HostStore::total_bytes() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const auto& [unit, blob] : blobs_) {
        n += blob.size();
    }
    return n;
}

namespace {

template <typename V>
class Channel {
public:
    void push(V v) {
        {
            std::lock_guard lock(mu_);
            q_.push_back(std::move(v));
        }
        cv_.notify_one();
    }
    V pop() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return !q_.empty(); });
        V v = std::move(q_.front());
        q_.pop_front();
        return v;
    }
    std::optional<V> try_pop() {
        std::lock_guard lock(mu_);
        if (q_.empty()) {
            return std::nullopt;
        }
        V v = std::move(q_.front());
        q_.pop_front();
        return v;
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<V> q_;
};

struct Request {
    enum Kind { htod, dtoh, stop } kind = stop;
    LayerId layer;
    std::vector<std::uint8_t> blob;
};

struct Completion {
    EventKind kind = EventKind::htod;
    LayerId layer;
    std::vector<std::uint8_t> blob;
    std::exception_ptr error;
};

class TransferWorker {
public:
    TransferWorker(HostStore& host, const ExecOptions& opt)
        : host_(host), opt_(opt), rng_(opt.jitter_seed), thread_([this] { loop(); }) {}

    ~TransferWorker() {
        requests.push(Request{});
        thread_.join();
    }

    Channel<Request> requests;
    Channel<Completion> completions;
    std::size_t max_resident() const { return max_resident_; } // read after the final completion

private:
    void loop() {
        for (;;) {
            Request r = requests.pop();
            if (r.kind == Request::stop) {
                return;
            }
            Completion c{r.kind == Request::htod ? EventKind::htod : EventKind::dtoh, r.layer, {}, nullptr};
            try {
                if (r.kind == Request::htod) {
                    c.blob = host_.get(UnitId::of(r.layer));
                    max_resident_ = std::max(max_resident_, ++resident_);
                    delay();
                    if (opt_.corrupt_layer == r.layer && !c.blob.empty()) {
                        c.blob[c.blob.size() / 2] ^= 0x5A;
                    }
                } else {
                    delay();
                    host_.put(UnitId::of(r.layer), std::move(r.blob));
                    --resident_;
                }
            } catch (...) {
                c.error = std::current_exception();
            }
            completions.push(std::move(c));
        }
    }

    void delay() {
        std::uint64_t us = opt_.base_delay_us;
        if (opt_.jitter_max_us > 0) {
            us += rng_.below(opt_.jitter_max_us + 1);
        }
        if (us > 0) {
            std::this_thread::sleep_for(std::chrono::microseconds(us));
        }
    }

    HostStore& host_;
    ExecOptions opt_;
    Rng rng_;
    std::size_t resident_ = 0;
    std::size_t max_resident_ = 0;
    std::thread thread_; // last: starts after the members it reads
};

} // namespace

template <typename T>
ExecReport execute_schedule(const OverlapTimeline& timeline, HostStore& host, const ShardUpdate<T>& update,
                            const ExecOptions& options) {
    ExecReport report;
    TransferWorker worker(host, options);
    std::map<LayerId, std::vector<std::uint8_t>> arrived;
    std::size_t pending_writebacks = 0;

    auto absorb = [&](Completion c) {
        if (c.error) {
            std::rethrow_exception(c.error);
        }
        if (c.kind == EventKind::htod) {
            arrived[c.layer] = std::move(c.blob);
        } else {
            --pending_writebacks;
        }
    };
    auto issue = [&](Request::Kind kind, LayerId layer, std::vector<std::uint8_t> blob = {}) {
        worker.requests.push(Request{kind, layer, std::move(blob)});
        ++report.transfers;
        if (kind == Request::dtoh) {
            ++pending_writebacks;
        }
    };
    auto run_update = [&](LayerId layer) {
        if (options.skip_arrival_wait) {
            while (auto c = worker.completions.try_pop()) {
                absorb(std::move(*c));
            }
        } else {
            while (!arrived.count(layer)) {
                absorb(worker.completions.pop());
            }
        }
        auto it = arrived.find(layer);
        if (it == arrived.end()) {
            throw SchedulingError("execute_schedule: update of block." + std::to_string(layer.index) +
                                  " attempted before its shard arrived");
        }
        OptimizerShard<T> shard = deserialize_shard<T>(it->second);
        arrived.erase(it);
        if (shard.unit != UnitId::of(layer)) {
            throw IntegrityError("execute_schedule: shard for " + shard.unit.name() + " arrived as block." +
                                 std::to_string(layer.index));
        }
        shard.residency = Residency::device;
        update(shard);
        report.update_order.push_back(layer);
        shard.residency = Residency::in_flight;
        issue(Request::dtoh, layer, serialize_shard(shard));
    };

    const auto& ups = timeline.updates;
    if (timeline.mode == OffloadMode::vanilla) {
        for (const auto& u : ups) {
            issue(Request::htod, u.layer);
            run_update(u.layer);
            while (pending_writebacks > 0) {
                absorb(worker.completions.pop());
            }
        }
    } else if (!ups.empty()) {
        issue(Request::htod, ups[0].layer);
        for (std::size_t i = 0; i < ups.size(); ++i) {
            if (i + 1 < ups.size()) {
                issue(Request::htod, ups[i + 1].layer);
            }
            run_update(ups[i].layer);
        }
    }
    while (pending_writebacks > 0) {
        absorb(worker.completions.pop());
    }
    report.max_resident = worker.max_resident();
    return report;
}

template ExecReport execute_schedule<float>(const OverlapTimeline&, HostStore&, const ShardUpdate<float>&,
                                            const ExecOptions&);
template ExecReport execute_schedule<double>(const OverlapTimeline&, HostStore&, const ShardUpdate<double>&,
                                             const ExecOptions&);

} // namespace grass
