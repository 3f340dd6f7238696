// SPDX-License-Identifier: Apache-2.0

#include "grass/scheduler.hpp"

#include <algorithm>
#include <numeric>

namespace grass {

void GrassConfig::validate(std::size_t n_layers) const {
    if (sample_period == 0) {
        throw ConfigError("grass.sample_period must be positive");
    }
    if (update_period() % sample_period != 0) {
        throw ConfigError("grass.prob_update_period (" + std::to_string(update_period()) +
                          ") must be a multiple of grass.sample_period (" + std::to_string(sample_period) + ")");
    }
    if (active_layers == 0 || active_layers > n_layers) {
        throw ConfigError("grass.active_layers must be in [1, " + std::to_string(n_layers) + "], got " +
                          std::to_string(active_layers));
    }
    if (!(temperature > 0.0)) {
        throw ConfigError("grass.temperature must be positive");
    }
    if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0)) {
        throw ConfigError("grass.ema_alpha must be in [0,1]");
    }
}

MgnTracker::MgnTracker(std::size_t n_layers)
    : sums_(n_layers, 0.0), counts_(n_layers, 0), committed_(n_layers, 0.0), has_value_(n_layers, false) {}

void MgnTracker::add(LayerId layer, double rms) {
    if (layer.index >= sums_.size()) {
        throw UsageError("mgn: layer " + std::to_string(layer.index) + " out of range");
    }
    if (!std::isfinite(rms)) {
        throw NumericalFault("mgn: non-finite norm for block." + std::to_string(layer.index));
    }
    sums_[layer.index] += rms;
    counts_[layer.index] += 1;
}

std::vector<std::optional<double>> MgnTracker::commit_window() {
    const bool any = std::any_of(counts_.begin(), counts_.end(), [](std::size_t c) { return c > 0; });
    if (!any) {
        throw UsageError("mgn: commit of an empty window");
    }
    std::vector<std::optional<double>> out(sums_.size());
    for (std::size_t l = 0; l < sums_.size(); ++l) {
        if (counts_[l] > 0) {
            out[l] = sums_[l] / static_cast<double>(counts_[l]);
        }
        sums_[l] = 0.0;
        counts_[l] = 0;
    }
    window_steps_ = 0;
    return out;
}

void MgnTracker::ema_refresh(const std::vector<std::optional<double>>& window, double alpha) {
    if (window.size() != committed_.size()) {
        throw UsageError("mgn: window has " + std::to_string(window.size()) + " layers, tracker " +
                         std::to_string(committed_.size()));
    }
    for (std::size_t l = 0; l < window.size(); ++l) {
        if (!window[l]) {
            continue;
        }
        if (has_value_[l]) {
            committed_[l] = alpha * *window[l] + (1.0 - alpha) * committed_[l];
        } else {
            committed_[l] = *window[l];
            has_value_[l] = true;
        }
    }
}

SamplingPolicy compute_probs(std::span<const double> mgn, double temperature, bool normalize) {
    if (!(temperature > 0.0)) {
        throw ConfigError("temperature must be positive");
    }
    if (mgn.empty()) {
        throw UsageError("compute_probs: no layers");
    }
    double top = 0.0;
    for (double m : mgn) {
        if (!(m >= 0.0) || !std::isfinite(m)) {
            throw UsageError("compute_probs: MGN values must be finite and non-negative");
        }
        top = std::max(top, m);
    }
    std::vector<double> z(mgn.begin(), mgn.end());
    if (normalize && top > 0.0) {
        for (double& x : z) {
            x /= top;
        }
    }
    const double zmax = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double& x : z) {
        x = std::exp((x - zmax) / temperature);
        total += x;
    }
    for (double& x : z) {
        x /= total;
    }
    return SamplingPolicy{std::move(z), 0};
}

std::vector<LayerId> sample_layers(const SamplingPolicy& policy, std::size_t gamma, Rng& rng) {
    const std::size_t n = policy.probs.size();
    if (gamma == 0 || gamma > n) {
        throw ConfigError("cannot sample " + std::to_string(gamma) + " of " + std::to_string(n) + " layers");
    }
    std::vector<bool> taken(n, false);
    std::vector<LayerId> out;
    for (std::size_t draw = 0; draw < gamma; ++draw) {
        double remaining = 0.0;
        std::size_t last = n;
        for (std::size_t l = 0; l < n; ++l) {
            if (!taken[l]) {
                remaining += policy.probs[l];
                last = l;
            }
        }
        const double u = rng.uniform() * remaining;
        double acc = 0.0;
        std::size_t pick = last; // guards the u ~ remaining rounding edge
        for (std::size_t l = 0; l < n; ++l) {
            if (taken[l]) {
                continue;
            }
            acc += policy.probs[l];
            if (u < acc) {
                pick = l;
                break;
            }
        }
        taken[pick] = true;
        out.push_back(LayerId{pick});
    }
    std::sort(out.begin(), out.end());
    return out;
}

void to_json(nlohmann::json& j, const TraceRecord& r) {
    j = nlohmann::json{{"step", r.step},
                       {"m", r.mgn},
                       {"p", r.probs},
                       {"sampled", r.sampled},
                       {"probs_updated", r.probs_updated}};
}

GrassScheduler::GrassScheduler(GrassConfig config, std::size_t n_layers)
    : config_(config), n_layers_(n_layers), tracker_(n_layers), rng_(config.rng_seed) {
    config_.validate(n_layers);
    policy_.probs.assign(n_layers, 1.0 / static_cast<double>(n_layers));
}

ScheduleDecision GrassScheduler::step(std::size_t step_index) {
    if (step_index != next_step_) {
        throw UsageError("scheduler: expected step " + std::to_string(next_step_) + ", got " +
                         std::to_string(step_index));
    }
    ++next_step_;

    const std::size_t tp = config_.probe_steps;
    if (step_index < tp) {
        ScheduleDecision d{DecisionKind::probe, {}, false};
        for (std::size_t l = 0; l < n_layers_; ++l) {
            d.active.push_back(LayerId{l});
        }
        return d;
    }

    const std::size_t rel = step_index - tp;
    bool updated = false;
    if (rel == 0) {
        // Probe statistics become the committed MGN as-is.
        if (tracker_.window_steps() > 0) {
            tracker_.ema_refresh(tracker_.commit_window(), 1.0);
        }
        policy_ = compute_probs(tracker_.committed(), config_.temperature, config_.normalize_mgn);
        updated = true;
    } else if (config_.adaptive && rel % config_.update_period() == 0 && tracker_.window_steps() > 0) {
        tracker_.ema_refresh(tracker_.commit_window(), config_.ema_alpha);
        policy_ = compute_probs(tracker_.committed(), config_.temperature, config_.normalize_mgn);
        updated = true;
    }
    if (updated) {
        policy_.last_update_step = step_index;
    }

    if (rel % config_.sample_period == 0) {
        resample(step_index, updated);
        return ScheduleDecision{DecisionKind::resample, active_, updated};
    }
    return ScheduleDecision{DecisionKind::keep, active_, false};
}

void GrassScheduler::resample(std::size_t step_index, bool probs_updated) {
    active_ = sample_layers(policy_, config_.active_layers, rng_);
    TraceRecord r;
    r.step = step_index;
    r.mgn = tracker_.committed();
    r.probs = policy_.probs;
    for (LayerId l : active_) {
        r.sampled.push_back(l.index);
    }
    r.probs_updated = probs_updated;
    trace_.push_back(std::move(r));
}

} // namespace grass
