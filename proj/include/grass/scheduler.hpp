// SPDX-License-Identifier: Apache-2.0
//
// Layer importance from mean gradient norms, the softmax policy over blocks,
// and the probe / sample / refresh state machine that drives layer freezing.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "grass/error.hpp"
#include "grass/model.hpp"
#include "grass/rng.hpp"

namespace grass {

struct GrassConfig {
    std::size_t probe_steps = 150;
    std::size_t sample_period = 25;
    // 0 means "same as sample_period".
    std::size_t prob_update_period = 0;
    std::size_t active_layers = 2;
    double temperature = 1.0;
    double ema_alpha = 0.5;
    bool normalize_mgn = true;
    // false freezes the policy after probing (the static ablation).
    bool adaptive = true;
    std::uint64_t rng_seed = 0;

    std::size_t update_period() const { return prob_update_period == 0 ? sample_period : prob_update_period; }
    void validate(std::size_t n_layers) const;
};

// sqrt(|g|^2 / N_p), accumulated in double in index order.
template <typename T>
double rms_norm(std::span<const T> g) {
    double sq = 0.0;
    for (T x : g) {
        sq += static_cast<double>(x) * static_cast<double>(x);
    }
    return std::sqrt(sq / static_cast<double>(g.size()));
}

class MgnTracker {
public:
    explicit MgnTracker(std::size_t n_layers);

    std::size_t n_layers() const { return sums_.size(); }

    // Adds one step's RMS norm for each reported block; group units are ignored.
    template <typename T>
    void record_step(std::span<const LayerGrads<T>> grads) {
        for (const auto& g : grads) {
            if (!g.unit.is_block()) {
                continue;
            }
            for (T x : g.flat_grad) {
                if (!std::isfinite(x)) {
                    throw NumericalFault("mgn: non-finite gradient in " + g.unit.name());
                }
            }
            add(LayerId{g.unit.block}, rms_norm<T>(g.flat_grad));
        }
        ++window_steps_;
    }

    void add(LayerId layer, double rms);

    // Per-layer mean RMS over the window; nullopt for layers with no
    // observations. Resets the window.
    std::vector<std::optional<double>> commit_window();

    // Observed layers: m <- alpha*window + (1-alpha)*m, or m <- window when
    // the layer has no committed value yet. Unobserved layers keep m.
    void ema_refresh(const std::vector<std::optional<double>>& window, double alpha);

    const std::vector<double>& committed() const { return committed_; }
    bool has_committed(LayerId layer) const { return has_value_.at(layer.index); }
    std::size_t window_steps() const { return window_steps_; }
    std::size_t window_count(LayerId layer) const { return counts_.at(layer.index); }

private:
    std::vector<double> sums_;
    std::vector<std::size_t> counts_;
    std::vector<double> committed_;
    std::vector<bool> has_value_;
    std::size_t window_steps_ = 0;
};

struct SamplingPolicy {
    std::vector<double> probs;
    std::size_t last_update_step = 0;
};

// Softmax of m / tau, where m is first divided by its max when normalize is
// set (all-zero m gives the uniform policy).
SamplingPolicy compute_probs(std::span<const double> mgn, double temperature, bool normalize);

// gamma distinct layers by sequential draws with renormalization over the
// layers not yet drawn. Returned in ascending order.
std::vector<LayerId> sample_layers(const SamplingPolicy& policy, std::size_t gamma, Rng& rng);

enum class DecisionKind { probe, resample, keep };

struct ScheduleDecision {
    DecisionKind kind = DecisionKind::keep;
    std::vector<LayerId> active; // block layers trainable this step
    bool probs_updated = false;
};

struct TraceRecord {
    std::size_t step = 0;
    std::vector<double> mgn;
    std::vector<double> probs;
    std::vector<std::size_t> sampled;
    bool probs_updated = false;
};

void to_json(nlohmann::json& j, const TraceRecord& r);

class GrassScheduler {
public:
    GrassScheduler(GrassConfig config, std::size_t n_layers);

    // Must be called once per step with consecutive indices from 0, before
    // that step's forward pass.
    ScheduleDecision step(std::size_t step_index);

    // Gradients of the step just run.
    template <typename T>
    void record(std::span<const LayerGrads<T>> grads) {
        tracker_.record_step<T>(grads);
    }

    const GrassConfig& config() const { return config_; }
    const MgnTracker& tracker() const { return tracker_; }
    const SamplingPolicy& policy() const { return policy_; }
    const std::vector<LayerId>& active() const { return active_; }
    // One record per resample, in order.
    const std::vector<TraceRecord>& trace() const { return trace_; }

private:
    void resample(std::size_t step_index, bool probs_updated);

    GrassConfig config_;
    std::size_t n_layers_;
    MgnTracker tracker_;
    SamplingPolicy policy_;
    Rng rng_;
    std::vector<LayerId> active_;
    std::vector<TraceRecord> trace_;
    std::size_t next_step_ = 0;
};

} // namespace grass
