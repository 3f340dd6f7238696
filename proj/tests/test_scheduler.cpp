// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "grass/scheduler.hpp"
#include "test_support.hpp"

using namespace grass;

namespace {

LayerGrads<double> block_grads(std::size_t layer, std::vector<double> g) {
    const std::size_t n = g.size();
    return LayerGrads<double>{UnitId::of(LayerId{layer}), std::move(g), n};
}

void record(MgnTracker& t, std::vector<LayerGrads<double>> gs) {
    t.record_step<double>(gs);
}

// Exact inclusion probabilities of the sequential draw, by enumerating every
// ordered sequence of gamma distinct layers.
std::vector<double> enumerate_inclusion(const std::vector<double>& p, std::size_t gamma) {
    std::vector<double> incl(p.size(), 0.0);
    std::vector<std::size_t> seq;
    auto rec = [&](auto&& self, double prob) -> void {
        if (seq.size() == gamma) {
            for (std::size_t l : seq) {
                incl[l] += prob;
            }
            return;
        }
        double rest = 0.0;
        for (std::size_t l = 0; l < p.size(); ++l) {
            if (std::find(seq.begin(), seq.end(), l) == seq.end()) {
                rest += p[l];
            }
        }
        for (std::size_t l = 0; l < p.size(); ++l) {
            if (std::find(seq.begin(), seq.end(), l) != seq.end()) {
                continue;
            }
            seq.push_back(l);
            self(self, prob * p[l] / rest);
            seq.pop_back();
        }
    };
    rec(rec, 1.0);
    return incl;
}

std::vector<double> random_mgn(Rng& rng, std::size_t n) {
    std::vector<double> m(n);
    for (double& x : m) {
        x = 5.0 * rng.uniform();
    }
    return m;
}

} // namespace

TEST_CASE("per-step RMS norm") {
    const std::vector<double> zeros(5, 0.0), ones(4, 1.0), g{3.0, 4.0};
    CHECK(rms_norm<double>(zeros) == 0.0);
    CHECK(rms_norm<double>(ones) == 1.0);
    CHECK(rms_norm<double>(g) == doctest::Approx(3.5355339059327376).epsilon(1e-15));
}

TEST_CASE("window commit") {
    MgnTracker t(3);
    SUBCASE("mean of two steps") {
        record(t, {block_grads(0, {1.0, 1.0})});
        record(t, {block_grads(0, {3.0, 3.0})});
        const auto w = t.commit_window();
        CHECK(*w[0] == 2.0);
        CHECK(!w[1].has_value());
        CHECK(t.window_steps() == 0);
        CHECK(t.window_count(LayerId{0}) == 0);
    }
    SUBCASE("single step") {
        record(t, {block_grads(1, {3.0, 4.0})});
        CHECK(*t.commit_window()[1] == rms_norm<double>(std::vector<double>{3.0, 4.0}));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(t.commit_window(), UsageError);
        try {
            record(t, {block_grads(2, {1.0, NAN})});
            FAIL("expected a numerical fault");
        } catch (const NumericalFault& e) {
            CHECK(std::string(e.what()).find("block.2") != std::string::npos);
        }
    }
    SUBCASE("group units are not tracked") {
        std::vector<LayerGrads<double>> gs{{UnitId::embedding(), {9.0}, 1}, block_grads(0, {1.0})};
        t.record_step<double>(gs);
        CHECK(t.commit_window().size() == 3);
    }
}

TEST_CASE("streaming MGN equals brute-force recomputation") {
    const std::size_t n_layers = 4;
    MgnTracker t(n_layers);
    Rng rng(11);
    // Retain every raw gradient, then evaluate the windowed mean directly.
    std::vector<std::vector<std::vector<double>>> raw(n_layers);
    for (int step = 0; step < 50; ++step) {
        std::vector<LayerGrads<double>> gs;
        for (std::size_t l = 0; l < n_layers; ++l) {
            if (step % 7 != 0 && rng.below(3) == 0) {
                continue; // frozen this step
            }
            std::vector<double> g(10 + 3 * l);
            for (double& x : g) {
                x = rng.normal() * (1.0 + static_cast<double>(l));
            }
            raw[l].push_back(g);
            gs.push_back(block_grads(l, g));
        }
        t.record_step<double>(gs);
    }
    const auto w = t.commit_window();
    for (std::size_t l = 0; l < n_layers; ++l) {
        double sum = 0.0;
        for (const auto& g : raw[l]) {
            double sq = 0.0;
            for (double x : g) {
                sq += x * x;
            }
            sum += std::sqrt(sq / static_cast<double>(g.size()));
        }
        const double brute = sum / static_cast<double>(raw[l].size());
        CHECK(std::abs(*w[l] - brute) <= 1e-12 * std::max(1.0, brute));
    }
}

TEST_CASE("EMA refresh") {
    MgnTracker t(3);
    record(t, {block_grads(0, {4.0}), block_grads(1, {4.0}), block_grads(2, {7.0})});
    t.ema_refresh(t.commit_window(), 0.5); // first observation is taken as-is
    CHECK(t.committed() == std::vector<double>{4.0, 4.0, 7.0});

    const std::vector<std::optional<double>> window{2.0, std::nullopt, 1.0};
    SUBCASE("alpha 0.5") {
        t.ema_refresh(window, 0.5);
        CHECK(t.committed()[0] == 3.0);
    }
    SUBCASE("alpha 1 takes the window") {
        t.ema_refresh(window, 1.0);
        CHECK(t.committed()[0] == 2.0);
        CHECK(t.committed()[2] == 1.0);
    }
    SUBCASE("alpha 0 keeps the committed value") {
        t.ema_refresh(window, 0.0);
        CHECK(t.committed() == std::vector<double>{4.0, 4.0, 7.0});
    }
    SUBCASE("unobserved layers retain their value bit-exactly") {
        for (double a : {0.0, 0.3, 0.5, 1.0}) {
            const double before = t.committed()[1];
            t.ema_refresh(window, a);
            CHECK(t.committed()[1] == before);
        }
    }
    SUBCASE("fixed point") {
        const auto m = t.committed();
        t.ema_refresh({m[0], m[1], m[2]}, 0.37);
        CHECK(t.committed() == m);
    }
}

TEST_CASE("softmax policy examples") {
    const std::vector<double> equal(5, 2.5);
    for (double p : compute_probs(equal, 1.0, true).probs) {
        CHECK(p == doctest::Approx(0.2).epsilon(1e-15));
    }
    const std::vector<double> m{0.0, std::log(3.0)};
    const auto p = compute_probs(m, 1.0, false).probs;
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-14));
    const std::vector<double> m2{0.0, 2.0 * std::log(3.0)};
    CHECK(compute_probs(m2, 2.0, false).probs[1] == doctest::Approx(0.75).epsilon(1e-14));

    const std::vector<double> distinct{0.1, 4.0, 2.0, 9.0};
    for (bool norm : {true, false}) {
        for (double q : compute_probs(distinct, 1e9, norm).probs) {
            CHECK(std::abs(q - 0.25) < 1e-6);
        }
    }
    const std::vector<double> zeros(3, 0.0);
    CHECK(compute_probs(zeros, 1.0, true).probs[2] == doctest::Approx(1.0 / 3.0));

    CHECK_THROWS_AS(compute_probs(m, 0.0, true), ConfigError);
    CHECK_THROWS_AS(compute_probs(m, -1.0, true), ConfigError);
    const std::vector<double> negative{1.0, -0.5};
    CHECK_THROWS_AS(compute_probs(negative, 1.0, true), UsageError);
}

TEST_CASE("softmax policy properties") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.below(10);
        const auto m = random_mgn(rng, n);
        const double tau = 0.05 + 3.0 * rng.uniform();
        const bool norm = trial % 2 == 0;
        const auto p = compute_probs(m, tau, norm).probs;
        CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-12);
        CHECK(*std::min_element(p.begin(), p.end()) > 0.0);
        CHECK(std::max_element(p.begin(), p.end()) - p.begin() == std::max_element(m.begin(), m.end()) - m.begin());

        if (norm) {
            auto scaled = m;
            const double c = std::exp(6.0 * rng.uniform() - 3.0);
            for (double& x : scaled) {
                x *= c;
            }
            const auto q = compute_probs(scaled, tau, true).probs;
            CHECK(testing::max_rel_error<double>(p, q, 1.0) < 1e-12);
        }
    }
}

TEST_CASE("layer sampling") {
    Rng rng(9);
    SUBCASE("gamma = N_L returns every layer") {
        const SamplingPolicy pol{{0.7, 0.1, 0.1, 0.1}, 0};
        const auto s = sample_layers(pol, 4, rng);
        CHECK(s == std::vector<LayerId>{{0}, {1}, {2}, {3}});
    }
    SUBCASE("near one-hot picks the argmax") {
        const SamplingPolicy pol{{1e-12, 1.0 - 3e-12, 1e-12, 1e-12}, 0};
        int hits = 0;
        for (int i = 0; i < 10000; ++i) {
            hits += sample_layers(pol, 1, rng)[0].index == 1;
        }
        CHECK(hits == 10000);
    }
    SUBCASE("draws are distinct") {
        const SamplingPolicy pol{{0.4, 0.3, 0.2, 0.05, 0.05}, 0};
        for (int i = 0; i < 1000; ++i) {
            const auto s = sample_layers(pol, 3, rng);
            CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
        }
    }
    SUBCASE("invalid gamma") {
        const SamplingPolicy pol{{0.5, 0.5}, 0};
        CHECK_THROWS_AS(sample_layers(pol, 3, rng), ConfigError);
        CHECK_THROWS_AS(sample_layers(pol, 0, rng), ConfigError);
    }
    SUBCASE("deterministic given the generator state") {
        const SamplingPolicy pol{{0.4, 0.3, 0.2, 0.1}, 0};
        Rng a(77), b(77);
        for (int i = 0; i < 100; ++i) {
            CHECK(sample_layers(pol, 2, a) == sample_layers(pol, 2, b));
        }
    }
}

TEST_CASE("inclusion frequencies match exact enumeration") {
    const std::vector<double> p{0.4, 0.3, 0.2, 0.1};
    const auto exact = enumerate_inclusion(p, 2);
    CHECK(std::accumulate(exact.begin(), exact.end(), 0.0) == doctest::Approx(2.0));
    // First-layer inclusion by hand: 0.4 + 0.3*0.4/0.7 + 0.2*0.4/0.8 + 0.1*0.4/0.9.
    CHECK(exact[0] == doctest::Approx(0.4 + 0.12 / 0.7 + 0.08 / 0.8 + 0.04 / 0.9).epsilon(1e-14));

    Rng rng(2024);
    const SamplingPolicy pol{p, 0};
    std::vector<double> freq(4, 0.0);
    const int draws = 200000;
    for (int i = 0; i < draws; ++i) {
        for (LayerId l : sample_layers(pol, 2, rng)) {
            freq[l.index] += 1.0;
        }
    }
    for (std::size_t l = 0; l < 4; ++l) {
        CHECK(std::abs(freq[l] / draws - exact[l]) < 0.01);
    }
}

TEST_CASE("config validation") {
    GrassConfig c;
    c.validate(4);
    c.active_layers = 5;
    CHECK_THROWS_AS(c.validate(4), ConfigError);
    c = GrassConfig{};
    c.prob_update_period = 30;
    CHECK_THROWS_AS(c.validate(4), ConfigError);
    c = GrassConfig{};
    c.ema_alpha = 1.5;
    CHECK_THROWS_AS(c.validate(4), ConfigError);
    c = GrassConfig{};
    c.sample_period = 0;
    CHECK_THROWS_AS(c.validate(4), ConfigError);
}

namespace {

// Feeds layer-dependent gradient magnitudes for whichever layers are active.
void feed(GrassScheduler& s, const ScheduleDecision& d, const std::vector<double>& scale) {
    std::vector<LayerGrads<double>> gs;
    for (LayerId l : d.active) {
        gs.push_back(block_grads(l.index, std::vector<double>(6, scale[l.index])));
    }
    s.record<double>(gs);
}

} // namespace

TEST_CASE("schedule: probe then periodic resampling") {
    GrassConfig c;
    c.probe_steps = 150;
    c.sample_period = 25;
    c.active_layers = 2;
    GrassScheduler s(c, 4);
    std::vector<std::size_t> resamples;
    for (std::size_t i = 0; i < 260; ++i) {
        const auto d = s.step(i);
        if (i < 150) {
            CHECK(d.kind == DecisionKind::probe);
            CHECK(d.active.size() == 4);
        } else {
            CHECK(d.kind != DecisionKind::probe);
            CHECK(d.active.size() == 2);
        }
        if (d.kind == DecisionKind::resample) {
            resamples.push_back(i);
        }
        feed(s, d, {1.0, 2.0, 3.0, 4.0});
    }
    CHECK(resamples == std::vector<std::size_t>{150, 175, 200, 225, 250});
    REQUIRE(s.trace().size() == 5);
    CHECK(s.trace()[0].step == 150);
    // Probe MGN is the per-layer gradient magnitude.
    CHECK(s.trace()[0].mgn == std::vector<double>{1.0, 2.0, 3.0, 4.0});
    CHECK_THROWS_AS(s.step(300), UsageError);
}

TEST_CASE("schedule: refresh cadence and trace records") {
    GrassConfig c;
    c.probe_steps = 6;
    c.sample_period = 2;
    c.active_layers = 1;
    GrassScheduler s(c, 3);
    for (std::size_t i = 0; i < 20; ++i) {
        feed(s, s.step(i), {1.0, 1.0, 1.0});
    }
    std::vector<std::size_t> steps;
    for (const auto& r : s.trace()) {
        steps.push_back(r.step);
        CHECK(r.probs_updated);
        CHECK(r.sampled.size() == 1);
    }
    CHECK(steps == std::vector<std::size_t>{6, 8, 10, 12, 14, 16, 18});

    SUBCASE("update period a multiple of the sample period") {
        GrassConfig c2 = c;
        c2.prob_update_period = 4;
        GrassScheduler s2(c2, 3);
        std::vector<std::size_t> updates;
        for (std::size_t i = 0; i < 20; ++i) {
            const auto d = s2.step(i);
            if (d.probs_updated) {
                updates.push_back(i);
            }
            feed(s2, d, {1.0, 2.0, 3.0});
        }
        CHECK(updates == std::vector<std::size_t>{6, 10, 14, 18});
        CHECK(s2.trace().size() == 7);
    }

    const nlohmann::json j = s.trace()[0];
    CHECK(j["step"] == 6);
    CHECK(j["p"].size() == 3);
    CHECK(j["sampled"].size() == 1);
}

TEST_CASE("schedule: static mode freezes the policy after probing") {
    GrassConfig c;
    c.probe_steps = 10;
    c.sample_period = 5;
    c.active_layers = 2;
    c.adaptive = false;
    GrassScheduler s(c, 4);
    std::vector<double> scale{1.0, 2.0, 3.0, 4.0};
    for (std::size_t i = 0; i < 100; ++i) {
        const auto d = s.step(i);
        if (i == 50) {
            scale = {9.0, 0.1, 0.1, 0.1}; // would flip an adaptive policy
        }
        feed(s, d, scale);
    }
    REQUIRE(s.trace().size() == 18);
    for (const auto& r : s.trace()) {
        CHECK(r.probs == s.trace()[0].probs);
    }

    c.adaptive = true;
    GrassScheduler a(c, 4);
    scale = {1.0, 2.0, 3.0, 4.0};
    for (std::size_t i = 0; i < 100; ++i) {
        const auto d = a.step(i);
        if (i == 50) {
            scale = {9.0, 0.1, 0.1, 0.1};
        }
        feed(a, d, scale);
    }
    CHECK(a.trace().back().probs[0] > a.trace()[0].probs[0]);
}

TEST_CASE("schedule: no probe starts uniform at step 0") {
    GrassConfig c;
    c.probe_steps = 0;
    c.sample_period = 3;
    c.active_layers = 2;
    GrassScheduler s(c, 4);
    const auto d = s.step(0);
    CHECK(d.kind == DecisionKind::resample);
    CHECK(d.active.size() == 2);
    for (double p : s.policy().probs) {
        CHECK(p == 0.25);
    }
}

TEST_CASE("schedule: adaptivity follows gradient magnitude") {
    GrassConfig c;
    c.probe_steps = 4;
    c.sample_period = 2;
    c.active_layers = 2;
    GrassScheduler s(c, 4);
    for (std::size_t i = 0; i < 40; ++i) {
        const auto d = s.step(i);
        feed(s, d, i < 4 ? std::vector<double>{1, 1, 1, 1} : std::vector<double>{1, 1, 5, 1});
    }
    CHECK(s.trace()[0].probs[2] == doctest::Approx(0.25));
    CHECK(s.policy().probs[2] > 0.3);
    CHECK(std::max_element(s.policy().probs.begin(), s.policy().probs.end()) - s.policy().probs.begin() == 2);
}

TEST_CASE("schedule: determinism") {
    GrassConfig c;
    c.probe_steps = 3;
    c.sample_period = 2;
    c.active_layers = 2;
    c.rng_seed = 99;
    GrassScheduler a(c, 6), b(c, 6);
    for (std::size_t i = 0; i < 60; ++i) {
        const auto da = a.step(i);
        const auto db = b.step(i);
        CHECK(da.active == db.active);
        feed(a, da, {1, 2, 3, 4, 5, 6});
        feed(b, db, {1, 2, 3, 4, 5, 6});
    }
}
