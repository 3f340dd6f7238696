// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "grass/error.hpp"
#include "grass/optimizer.hpp"
#include "grass/rng.hpp"
#include "test_support.hpp"

using namespace grass;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 3;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.vocab_size = 12;
    c.max_seq_len = 8;
    return c;
}

ParamUnit<double> vector_unit(std::vector<double> values) {
    const std::size_t n = values.size();
    return ParamUnit<double>{UnitId::of(LayerId{0}), {{"w", Tensor<double>({n}, std::move(values))}}};
}

LayerGrads<double> grads_for(const ParamUnit<double>& unit, std::vector<double> g) {
    const std::size_t n = g.size();
    return LayerGrads<double>{unit.id, std::move(g), n};
}

// Scalar Adam written out longhand, used as the reference trajectory.
struct ScalarAdam {
    double m = 0, v = 0;
    int t = 0;
    double step(double theta, double g, const OptimizerConfig& c) {
        ++t;
        m = c.beta1 * m + (1 - c.beta1) * g;
        v = c.beta2 * v + (1 - c.beta2) * g * g;
        const double mh = m / (1 - std::pow(c.beta1, t));
        const double vh = v / (1 - std::pow(c.beta2, t));
        return theta - c.learning_rate * (mh / (std::sqrt(vh) + c.epsilon) + c.weight_decay * theta);
    }
};

} // namespace

TEST_CASE("shards mirror the parameter layout") {
    const Model<double> model(small_config(), 1);
    const auto shards = init_shards(model);
    REQUIRE(shards.size() == model.units().size());
    std::size_t moment_bytes = 0, param_bytes = 0;
    for (std::size_t i = 0; i < shards.size(); ++i) {
        const auto& unit = model.units()[i];
        CHECK(shards[i].unit == unit.id);
        CHECK(shards[i].residency == (unit.id.is_block() ? Residency::host : Residency::device));
        CHECK(shards[i].step_count == 0);
        for (std::size_t p = 0; p < unit.params.size(); ++p) {
            CHECK(shards[i].m[p].shape() == unit.params[p].value.shape());
            for (double x : shards[i].v[p].data()) {
                CHECK(x == 0.0);
            }
            param_bytes += unit.params[p].value.bytes();
        }
        moment_bytes += shards[i].bytes();
    }
    CHECK(moment_bytes == 2 * param_bytes);
}

TEST_CASE("first step moves each coordinate by the learning rate") {
    OptimizerConfig cfg;
    cfg.learning_rate = 0.1;
    auto unit = vector_unit({0.0, 2.0, -1.0});
    auto shard = make_shard(unit, Residency::device);
    apply_update(shard, unit, grads_for(unit, {1.0, -3.0, 0.0}), cfg);
    const auto w = unit.params[0].value.data();
    CHECK(w[0] == doctest::Approx(-0.1).epsilon(1e-7));
    CHECK(w[1] == doctest::Approx(2.1).epsilon(1e-7));
    CHECK(w[2] == -1.0); // zero gradient, zero decay: untouched
    CHECK(shard.step_count == 1);
}

TEST_CASE("trajectory matches a scalar reference and descends a quadratic bowl") {
    OptimizerConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.weight_decay = 0.01;
    const std::vector<double> curvature{1.0, 4.0, 0.25};
    auto unit = vector_unit({1.5, -0.7, 2.0});
    auto shard = make_shard(unit, Residency::device);
    std::vector<ScalarAdam> ref(3);
    std::vector<double> ref_theta{1.5, -0.7, 2.0};

    auto loss = [&](std::span<const double> w) {
        double f = 0;
        for (std::size_t i = 0; i < 3; ++i) {
            f += 0.5 * curvature[i] * w[i] * w[i];
        }
        return f;
    };
    double prev = loss(unit.params[0].value.data());
    for (int step = 0; step < 10; ++step) {
        std::vector<double> g(3);
        for (std::size_t i = 0; i < 3; ++i) {
            g[i] = curvature[i] * unit.params[0].value.data()[i];
            ref_theta[i] = ref[i].step(ref_theta[i], curvature[i] * ref_theta[i], cfg);
        }
        apply_update(shard, unit, grads_for(unit, g), cfg);
        const double now = loss(unit.params[0].value.data());
        CHECK(now < prev);
        prev = now;
    }
    CHECK(testing::max_rel_error<double>(unit.params[0].value.data(), ref_theta) < 1e-12);
}

TEST_CASE("updates need a device-resident shard with matching shapes") {
    OptimizerConfig cfg;
    auto unit = vector_unit({1.0, 2.0});
    auto shard = make_shard(unit, Residency::host);
    CHECK_THROWS_AS(apply_update(shard, unit, grads_for(unit, {1, 1}), cfg), SchedulingError);
    shard.residency = Residency::in_flight;
    CHECK_THROWS_AS(apply_update(shard, unit, grads_for(unit, {1, 1}), cfg), SchedulingError);
    shard.residency = Residency::device;
    CHECK_THROWS_AS(apply_update(shard, unit, grads_for(unit, {1, 1, 1}), cfg), UsageError);
    CHECK_THROWS_AS(apply_update(shard, unit, grads_for(unit, {1, NAN}), cfg), NumericalFault);
    CHECK(shard.step_count == 0);
}

TEST_CASE("updating one unit leaves other shards alone") {
    Model<double> model(small_config(), 2);
    auto shards = init_shards(model);
    for (auto& s : shards) {
        s.residency = Residency::device;
    }
    const auto before = shards;
    const auto params_before = model.units();
    const UnitId target = UnitId::of(LayerId{1});
    auto& unit = model.unit(target);
    std::vector<double> g(unit.param_count(), 0.5);
    apply_update(shards[2], unit, LayerGrads<double>{target, g, g.size()}, OptimizerConfig{});
    for (std::size_t i = 0; i < shards.size(); ++i) {
        const bool touched = shards[i].unit == target;
        CHECK(shards[i].same_state(before[i]) != touched);
        for (std::size_t p = 0; p < model.units()[i].params.size(); ++p) {
            CHECK((model.units()[i].params[p].value == params_before[i].params[p].value) != touched);
        }
    }
}

TEST_CASE("global norm clipping") {
    std::vector<LayerGrads<double>> gs{{UnitId::embedding(), {3.0}, 1}, {UnitId::head(), {4.0}, 1}};
    CHECK(clip_global_norm(gs, 10.0) == doctest::Approx(5.0));
    CHECK(gs[0].flat_grad[0] == 3.0);
    CHECK(clip_global_norm(gs, 1.0) == doctest::Approx(5.0));
    CHECK(gs[0].flat_grad[0] == doctest::Approx(0.6));
    CHECK(gs[1].flat_grad[0] == doctest::Approx(0.8));
}

TEST_CASE("config validation") {
    OptimizerConfig c;
    c.validate();
    c.beta2 = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = OptimizerConfig{};
    c.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("serialization round trip after many updates") {
    Model<double> model(small_config(), 3);
    auto shards = init_shards(model);
    Rng rng(4);
    const UnitId id = UnitId::of(LayerId{2});
    auto& shard = shards[3];
    shard.residency = Residency::device;
    for (int step = 0; step < 100; ++step) {
        std::vector<double> g(model.unit(id).param_count());
        for (double& x : g) {
            x = rng.normal();
        }
        apply_update(shard, model.unit(id), LayerGrads<double>{id, g, g.size()}, OptimizerConfig{});
    }
    const auto blob = serialize_shard(shard);
    const auto back = deserialize_shard<double>(blob);
    CHECK(back.same_state(shard));
    CHECK(back.residency == Residency::in_flight);
    CHECK(back.step_count == 100);
    CHECK(serialize_shard(back) == blob);

    SUBCASE("float precision round trip") {
        Model<float> fm(small_config(), 3);
        auto fs = init_shards(fm);
        fs[0].step_count = 7;
        CHECK(deserialize_shard<float>(serialize_shard(fs[0])).same_state(fs[0]));
        CHECK_THROWS_AS(deserialize_shard<double>(serialize_shard(fs[0])), IntegrityError);
    }
}

TEST_CASE("corrupted or truncated blobs are rejected") {
    const Model<double> model(small_config(), 5);
    auto shard = init_shards(model)[1];
    shard.step_count = 3;
    const auto blob = serialize_shard(shard);

    for (std::size_t cut : {std::size_t{0}, std::size_t{5}, blob.size() / 2, blob.size() - 1}) {
        std::vector<std::uint8_t> truncated(blob.begin(), blob.begin() + static_cast<std::ptrdiff_t>(cut));
        CHECK_THROWS_AS(deserialize_shard<double>(truncated), IntegrityError);
    }
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        auto bad = blob;
        bad[rng.below(bad.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
        CHECK_THROWS_AS(deserialize_shard<double>(bad), IntegrityError);
    }
}

TEST_CASE("crc32 check value") {
    const std::string s = "123456789";
    CHECK(crc32_of({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}) == 0xCBF43926u);
}
