// SPDX-License-Identifier: Apache-2.0

#include "grass/trainer.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>

#include "grass/checkpoint.hpp"
#include "grass/data.hpp"
#include "grass/error.hpp"
#include "grass/offload.hpp"

namespace grass {

using nlohmann::json;
namespace fs = std::filesystem;

void to_json(json& j, const MetricsRecord& r) {
    j = json{{"step", r.step},
             {"phase", r.probe ? "probe" : "train"},
             {"train_loss", r.train_loss},
             {"val_loss", r.val_loss ? json(*r.val_loss) : json(nullptr)},
             {"sampled_layers", r.sampled_layers},
             {"probs", r.probs},
             {"step_time_ms", r.step_time_ms},
             {"step_time_vanilla_ms", r.step_time_vanilla_ms},
             {"step_time_overlapped_ms", r.step_time_overlapped_ms},
             {"device_peak_bytes", r.device_peak_bytes}};
    if (r.wall_ms) {
        j["wall_ms"] = *r.wall_ms;
    }
}

std::string effective_output_dir(const RunConfig& config) {
    const fs::path dir(config.output_dir);
    const char* root = std::getenv("GRASS_OUTPUT_ROOT");
    if (root != nullptr && *root != '\0' && dir.is_relative()) {
        return (fs::path(root) / dir).string();
    }
    return dir.string();
}

namespace {

// Line-at-a-time artifact writer; each line goes out in one write and is flushed.
class LineFile {
public:
    LineFile() = default;
    explicit LineFile(const fs::path& path) : out_(std::make_unique<std::ofstream>(path, std::ios::trunc)) {
        if (!*out_) {
            throw IoError("cannot write '" + path.string() + "'");
        }
    }
    void line(const std::string& s) {
        if (out_) {
            const std::string buf = s + "\n";
            out_->write(buf.data(), static_cast<std::streamsize>(buf.size()));
            out_->flush();
            if (!*out_) {
                throw IoError("artifact write failed");
            }
        }
    }
    std::ostream* stream() { return out_.get(); }

private:
    std::unique_ptr<std::ofstream> out_;
};

RunConfig validated(const RunConfig& config) {
    RunConfig r = config.resolved();
    r.validate();
    return r;
}

template <typename T>
class Trainer {
public:
    Trainer(const RunConfig& config, bool write_artifacts)
        : cfg_(validated(config)),
          write_(write_artifacts),
          data_(cfg_.dataset, cfg_.model, cfg_.seq_len),
          model_(cfg_.model, Rng::mix(cfg_.seed, 0)),
          memory_(write_artifacts) {
        if (cfg_.method != Method::FFT) {
            GrassConfig g = cfg_.grass;
            g.rng_seed = Rng::mix(cfg_.seed, 1 + cfg_.grass.rng_seed);
            scheduler_.emplace(g, model_.n_layers());
        }
        shards_ = init_shards(model_);
        offloaded_ = cfg_.method != Method::FFT && cfg_.offload.enabled;
        for (auto& s : shards_) {
            if (s.unit.is_block()) {
                if (offloaded_) {
                    host_.put(s.unit, serialize_shard(s));
                } else {
                    s.residency = Residency::device;
                }
            }
        }
        exec_.jitter_max_us = cfg_.offload.jitter_us;
        exec_.jitter_seed = cfg_.offload.jitter_seed;
    }

    RunResult run() {
        open_artifacts();
        std::size_t param_bytes = 0;
        for (const auto& u : model_.units()) {
            for (const auto& p : u.params) {
                param_bytes += p.value.bytes();
            }
        }
        memory_.alloc(MemCategory::params, param_bytes, 0.0);

        RunResult result;
        std::size_t step = 0;
        try {
            for (; step < cfg_.total_steps; ++step) {
                one_step(step, result);
            }
        } catch (const NumericalFault&) {
            if (write_) {
                sync_host_shards();
                save_checkpoint((dir_ / "checkpoint.bin").string(), config_to_json(cfg_), step, model_, shards_);
            }
            throw;
        }
        sync_host_shards();

        result.config = cfg_;
        if (scheduler_) {
            result.trace = scheduler_->trace();
        }
        result.peak_bytes = memory_.peak_report();
        for (const auto& u : model_.units()) {
            for (const auto& p : u.params) {
                for (T x : p.value.data()) {
                    result.final_params.push_back(static_cast<double>(x));
                }
            }
        }
        for (const auto& s : shards_) {
            if (s.unit.is_block()) {
                result.block_update_counts.push_back(s.step_count);
            }
        }
        if (write_) {
            finish_artifacts(result);
        }
        return result;
    }

private:
    void one_step(std::size_t step, RunResult& result) {
        const auto wall_start = std::chrono::steady_clock::now();
        const double t0 = clock_;
        const std::size_t n = model_.n_layers();

        ScheduleDecision decision;
        if (scheduler_) {
            decision = scheduler_->step(step);
        } else {
            decision.kind = DecisionKind::keep;
            for (std::size_t l = 0; l < n; ++l) {
                decision.active.push_back(LayerId{l});
            }
        }
        const bool probe = decision.kind == DecisionKind::probe;
        if (probe) {
            // Statistics only: block gradients, no updates, no optimizer state.
            model_.set_freeze_mask(FreezeMask::only(n, decision.active, false));
        } else if (!scheduler_) {
            model_.set_freeze_mask(FreezeMask::all(n));
        } else {
            model_.set_freeze_mask(FreezeMask::only(n, decision.active, cfg_.model.groups_always_trainable));
        }

        const Batch batch = data_.train_batch(step, cfg_.batch_size);
        const double loss = static_cast<double>(model_.forward_loss(batch));
        const std::size_t act = model_.last_activation_bytes();
        memory_.alloc(MemCategory::activations, act, t0);
        auto grads = model_.backward_collect();
        const double t_bwd = t0 + cfg_.offload.compute_ms;
        memory_.free(MemCategory::activations, act, t_bwd);
        std::size_t grad_bytes = 0;
        for (const auto& g : grads) {
            grad_bytes += g.flat_grad.size() * sizeof(T);
        }
        memory_.alloc(MemCategory::grads, grad_bytes, t_bwd);
        if (scheduler_) {
            scheduler_->template record<T>(grads);
        }
        auto& rms = result.block_grad_rms.emplace_back(n);
        for (const auto& g : grads) {
            if (g.unit.is_block()) {
                rms[g.unit.block] = rms_norm<T>(g.flat_grad);
            }
        }

        double opt_vanilla = 0.0, opt_overlapped = 0.0, opt_actual = 0.0;
        if (!probe) {
            if (cfg_.optimizer.clip_global_norm > 0.0) {
                clip_global_norm(grads, cfg_.optimizer.clip_global_norm);
            }
            if (decision.kind == DecisionKind::resample || !state_allocated_) {
                resident_shards(decision.active, t0);
            }
            // Group updates run first on the update lane; their state never moves.
            double group_ms = 0.0;
            std::vector<const LayerGrads<T>*> block_grads(n, nullptr);
            for (const auto& g : grads) {
                if (g.unit.is_block()) {
                    block_grads[g.unit.block] = &g;
                    continue;
                }
                auto& shard = shard_of(g.unit);
                apply_update(shard, model_.unit(g.unit), g, cfg_.optimizer);
                group_ms += cfg_.offload.tier.update_ms(shard.bytes());
            }
            std::vector<ShardJob> jobs;
            for (std::size_t l = 0; l < n; ++l) {
                if (block_grads[l] != nullptr) {
                    jobs.push_back({LayerId{l}, shard_of(UnitId::of(LayerId{l})).bytes()});
                }
            }
            const double t_blocks = t_bwd + group_ms;
            if (offloaded_) {
                const auto vanilla = plan_schedule(jobs, OffloadMode::vanilla, cfg_.offload.tier);
                const auto overlapped = plan_schedule(jobs, OffloadMode::overlapped, cfg_.offload.tier);
                const auto& tl = cfg_.offload.mode == OffloadMode::vanilla ? vanilla : overlapped;
                account_timeline(memory_, tl, t_blocks);
                execute_schedule<T>(
                    tl, host_,
                    [&](OptimizerShard<T>& shard) {
                        const auto& g = *block_grads[shard.unit.block];
                        apply_update(shard, model_.unit(shard.unit), g, cfg_.optimizer);
                    },
                    exec_);
                if (timeline_.stream() != nullptr) {
                    write_timeline_csv(*timeline_.stream(), tl, t_blocks, false);
                }
                opt_vanilla = group_ms + vanilla.makespan_ms;
                opt_overlapped = group_ms + overlapped.makespan_ms;
                opt_actual = group_ms + tl.makespan_ms;
            } else {
                double block_ms = 0.0;
                for (const auto& job : jobs) {
                    auto& shard = shard_of(UnitId::of(job.layer));
                    apply_update(shard, model_.unit(shard.unit), *block_grads[job.layer.index], cfg_.optimizer);
                    block_ms += cfg_.offload.tier.update_ms(job.bytes);
                }
                opt_vanilla = opt_overlapped = opt_actual = group_ms + block_ms;
            }
        }

        const double step_ms = cfg_.offload.compute_ms + opt_actual;
        memory_.free(MemCategory::grads, grad_bytes, t0 + step_ms);
        clock_ = t0 + step_ms;

        MetricsRecord rec;
        rec.step = step;
        rec.probe = probe;
        rec.train_loss = loss;
        const bool last = step + 1 == cfg_.total_steps;
        if (last || (cfg_.eval_every > 0 && (step + 1) % cfg_.eval_every == 0)) {
            rec.val_loss = static_cast<double>(model_.evaluate(data_.validation()));
            result.final_val_loss = *rec.val_loss;
        }
        if (!probe) {
            for (LayerId l : decision.active) {
                rec.sampled_layers.push_back(l.index);
            }
        }
        if (scheduler_) {
            rec.probs = scheduler_->policy().probs;
        }
        rec.step_time_ms = step_ms;
        rec.step_time_vanilla_ms = cfg_.offload.compute_ms + opt_vanilla;
        rec.step_time_overlapped_ms = cfg_.offload.compute_ms + opt_overlapped;
        rec.device_peak_bytes = memory_.peak_report();
        if (cfg_.record_wall_time) {
            rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - wall_start)
                              .count();
        }
        result.final_train_loss = loss;

        if (last || step % cfg_.log_every == 0) {
            metrics_file_.line(json(rec).dump());
            result.metrics.push_back(std::move(rec));
        }
        if (scheduler_ && scheduler_->trace().size() > traced_) {
            for (; traced_ < scheduler_->trace().size(); ++traced_) {
                trace_file_.line(json(scheduler_->trace()[traced_]).dump());
            }
        }
    }

    // Device-resident optimizer state outside the offload path.
    void resident_shards(const std::vector<LayerId>& active, double t) {
        if (!state_allocated_) {
            for (const auto& s : shards_) {
                if (!s.unit.is_block()) {
                    memory_.alloc(MemCategory::optimizer_groups, s.bytes(), t);
                } else if (cfg_.method == Method::FFT) {
                    memory_.alloc(MemCategory::optimizer, s.bytes(), t);
                }
            }
            state_allocated_ = true;
        }
        if (offloaded_ || cfg_.method == Method::FFT) {
            return;
        }
        // Without offload the working set is the active blocks' shards.
        if (resident_bytes_ > 0) {
            memory_.free(MemCategory::optimizer, resident_bytes_, t);
        }
        resident_bytes_ = 0;
        for (LayerId l : active) {
            resident_bytes_ += shard_of(UnitId::of(l)).bytes();
        }
        memory_.alloc(MemCategory::optimizer, resident_bytes_, t);
    }

    OptimizerShard<T>& shard_of(UnitId id) {
        for (auto& s : shards_) {
            if (s.unit == id) {
                return s;
            }
        }
        throw UsageError("no optimizer shard for " + id.name());
    }

    // Pulls host-tier shards back into shards_ for checkpointing and reporting.
    void sync_host_shards() {
        if (!offloaded_) {
            return;
        }
        for (auto& s : shards_) {
            if (s.unit.is_block()) {
                s = deserialize_shard<T>(host_.get(s.unit));
                s.residency = Residency::host;
            }
        }
    }

    void open_artifacts() {
        if (!write_) {
            return;
        }
        dir_ = effective_output_dir(cfg_);
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) {
            throw IoError("cannot create output directory '" + dir_.string() + "': " + ec.message());
        }
        LineFile(dir_ / "config.json").line(config_to_json(cfg_).dump(2));
        metrics_file_ = LineFile(dir_ / "metrics.jsonl");
        if (scheduler_) {
            trace_file_ = LineFile(dir_ / "prob_trace.jsonl");
        } else {
            fs::remove(dir_ / "prob_trace.jsonl", ec);
        }
        if (offloaded_) {
            timeline_ = LineFile(dir_ / "timeline.csv");
            *timeline_.stream() << "lane,kind,layer,start_ms,end_ms\n";
        } else {
            fs::remove(dir_ / "timeline.csv", ec);
        }
    }

    void finish_artifacts(const RunResult& result) {
        {
            std::ofstream mem(dir_ / "memory_trace.csv", std::ios::trunc);
            memory_.write_trace_csv(mem);
            if (!mem) {
                throw IoError("cannot write memory_trace.csv");
            }
        }
        double steps_ms = 0.0, vanilla_ms = 0.0, overlapped_ms = 0.0;
        for (const auto& m : result.metrics) {
            steps_ms += m.step_time_ms;
            vanilla_ms += m.step_time_vanilla_ms;
            overlapped_ms += m.step_time_overlapped_ms;
        }
        const json summary{{"method", method_name(cfg_.method)},
                           {"seed", cfg_.seed},
                           {"total_steps", cfg_.total_steps},
                           {"final_train_loss", result.final_train_loss},
                           {"final_val_loss", result.final_val_loss},
                           {"simulated_ms", steps_ms},
                           {"simulated_vanilla_ms", vanilla_ms},
                           {"simulated_overlapped_ms", overlapped_ms},
                           {"peak_device_bytes", result.peak_bytes},
                           {"block_update_counts", result.block_update_counts}};
        LineFile(dir_ / "summary.json").line(summary.dump(2));
        if (cfg_.write_checkpoint) {
            save_checkpoint((dir_ / "checkpoint.bin").string(), config_to_json(cfg_), cfg_.total_steps, model_,
                            shards_);
        }
    }

    RunConfig cfg_;
    bool write_;
    Dataset data_;
    Model<T> model_;
    std::optional<GrassScheduler> scheduler_;
    std::vector<OptimizerShard<T>> shards_;
    HostStore host_;
    bool offloaded_ = false;
    ExecOptions exec_;
    MemoryAccountant memory_;
    double clock_ = 0.0;
    bool state_allocated_ = false;
    std::size_t resident_bytes_ = 0;
    std::size_t traced_ = 0;
    fs::path dir_;
    LineFile metrics_file_;
    LineFile trace_file_;
    LineFile timeline_;
};

} // namespace

RunResult run_training(const RunConfig& config, bool write_artifacts) {
    if (config.precision == Precision::float32) {
        return Trainer<float>(config, write_artifacts).run();
    }
    return Trainer<double>(config, write_artifacts).run();
}

} // namespace grass
