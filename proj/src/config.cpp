// SPDX-License-Identifier: Apache-2.0

#include "grass/config.hpp"

#include <fstream>
#include <set>

#include "grass/error.hpp"

namespace grass {

using nlohmann::json;

const char* method_name(Method m) {
    switch (m) {
    case Method::FFT:
        return "FFT";
    case Method::UNIFORM_STATIC:
        return "UNIFORM_STATIC";
    case Method::GRASS_STATIC:
        return "GRASS_STATIC";
    case Method::GRASS:
        return "GRASS";
    }
    return "?";
}

Method parse_method(const std::string& name) {
    for (auto m : {Method::FFT, Method::UNIFORM_STATIC, Method::GRASS_STATIC, Method::GRASS}) {
        if (name == method_name(m)) {
            return m;
        }
    }
    throw ConfigError("method: unknown method '" + name + "' (FFT, UNIFORM_STATIC, GRASS_STATIC, GRASS)");
}

namespace {

// Reads optional fields of one JSON object and rejects unknown keys.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(where("") + ": expected an object");
        }
    }

    template <typename V>
    void read(const char* key, V& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        const json& v = j_.at(key);
        if constexpr (std::is_same_v<V, bool>) {
            require(v.is_boolean(), key, "a boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_integral_v<V>) {
            require(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0), key, "a non-negative integer");
            out = v.get<V>();
        } else if constexpr (std::is_floating_point_v<V>) {
            require(v.is_number(), key, "a number");
            out = v.get<V>();
        } else if constexpr (std::is_same_v<V, std::string>) {
            require(v.is_string(), key, "a string");
            out = v.get<std::string>();
        } else {
            require(v.is_array(), key, "an array");
            out.clear();
            for (const auto& e : v) {
                require(e.is_number_unsigned() || (e.is_number_integer() && e.get<std::int64_t>() >= 0), key, "an array of non-negative integers");
                out.push_back(e.get<typename V::value_type>());
            }
        }
    }

    const json* object(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string where(const std::string& key) const {
        if (path_.empty()) {
            return key;
        }
        return key.empty() ? path_ : path_ + "." + key;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) {
                throw ConfigError(where(k) + ": unknown field");
            }
        }
    }

private:
    void require(bool ok, const char* key, const char* what) const {
        if (!ok) {
            throw ConfigError(where(key) + ": expected " + what);
        }
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_model(const json& j, ModelConfig& m) {
    Fields f(j, "model");
    f.read("n_layers", m.n_layers);
    f.read("d_model", m.d_model);
    f.read("n_heads", m.n_heads);
    f.read("d_ff", m.d_ff);
    f.read("vocab_size", m.vocab_size);
    f.read("max_seq_len", m.max_seq_len);
    f.read("attention_windows", m.attention_windows);
    f.read("init_std", m.init_std);
    f.read("embed_init_std", m.embed_init_std);
    f.read("groups_always_trainable", m.groups_always_trainable);
    f.finish();
}

void read_optimizer(const json& j, OptimizerConfig& o) {
    Fields f(j, "optimizer");
    f.read("learning_rate", o.learning_rate);
    f.read("beta1", o.beta1);
    f.read("beta2", o.beta2);
    f.read("epsilon", o.epsilon);
    f.read("weight_decay", o.weight_decay);
    f.read("clip_global_norm", o.clip_global_norm);
    f.finish();
}

void read_grass(const json& j, GrassConfig& g) {
    Fields f(j, "grass");
    f.read("probe_steps", g.probe_steps);
    f.read("sample_period", g.sample_period);
    f.read("prob_update_period", g.prob_update_period);
    f.read("active_layers", g.active_layers);
    f.read("temperature", g.temperature);
    f.read("ema_alpha", g.ema_alpha);
    f.read("normalize_mgn", g.normalize_mgn);
    f.read("rng_seed", g.rng_seed);
    f.finish();
}

void read_dataset(const json& j, DatasetSpec& d) {
    Fields f(j, "dataset");
    std::string kind = dataset_kind_name(d.kind);
    f.read("kind", kind);
    d.kind = parse_dataset_kind(kind);
    f.read("vocab", d.vocab);
    f.read("period", d.period);
    f.read("planted_layer", d.planted_layer);
    f.read("lag", d.lag);
    f.read("strength", d.strength);
    f.read("source", d.source);
    f.read("seed", d.seed);
    f.read("val_sequences", d.val_sequences);
    f.finish();
}

void read_offload(const json& j, OffloadConfig& o) {
    Fields f(j, "offload");
    f.read("enabled", o.enabled);
    std::string mode = mode_name(o.mode);
    f.read("mode", mode);
    if (mode == "vanilla") {
        o.mode = OffloadMode::vanilla;
    } else if (mode == "overlapped") {
        o.mode = OffloadMode::overlapped;
    } else {
        throw ConfigError("offload.mode: expected 'vanilla' or 'overlapped'");
    }
    f.read("device_capacity", o.tier.device_capacity);
    f.read("host_capacity", o.tier.host_capacity);
    f.read("bandwidth_bytes_per_ms", o.tier.bandwidth_bytes_per_ms);
    f.read("latency_ms", o.tier.latency_ms);
    f.read("update_fixed_ms", o.tier.update_fixed_ms);
    f.read("update_ms_per_byte", o.tier.update_ms_per_byte);
    f.read("compute_ms", o.compute_ms);
    f.read("jitter_us", o.jitter_us);
    f.read("jitter_seed", o.jitter_seed);
    f.finish();
}

} // namespace

RunConfig config_from_json(const json& j) {
    RunConfig c;
    Fields f(j, "");
    if (const json* m = f.object("model")) {
        read_model(*m, c.model);
    }
    if (const json* o = f.object("optimizer")) {
        read_optimizer(*o, c.optimizer);
    }
    if (const json* g = f.object("grass")) {
        read_grass(*g, c.grass);
    }
    if (const json* d = f.object("dataset")) {
        read_dataset(*d, c.dataset);
    }
    if (const json* o = f.object("offload")) {
        read_offload(*o, c.offload);
    }
    std::string method = method_name(c.method);
    f.read("method", method);
    c.method = parse_method(method);
    std::string precision = c.precision == Precision::float64 ? "float64" : "float32";
    f.read("precision", precision);
    if (precision == "float64") {
        c.precision = Precision::float64;
    } else if (precision == "float32") {
        c.precision = Precision::float32;
    } else {
        throw ConfigError("precision: expected 'float32' or 'float64'");
    }
    f.read("total_steps", c.total_steps);
    f.read("batch_size", c.batch_size);
    f.read("seq_len", c.seq_len);
    f.read("seed", c.seed);
    f.read("output_dir", c.output_dir);
    f.read("eval_every", c.eval_every);
    f.read("log_every", c.log_every);
    f.read("record_wall_time", c.record_wall_time);
    f.read("write_checkpoint", c.write_checkpoint);
    f.finish();
    return c;
}

json config_to_json(const RunConfig& c) {
    const auto& m = c.model;
    const auto& o = c.optimizer;
    const auto& g = c.grass;
    const auto& d = c.dataset;
    const auto& t = c.offload.tier;
    return json{
        {"method", method_name(c.method)},
        {"precision", c.precision == Precision::float64 ? "float64" : "float32"},
        {"total_steps", c.total_steps},
        {"batch_size", c.batch_size},
        {"seq_len", c.seq_len},
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"eval_every", c.eval_every},
        {"log_every", c.log_every},
        {"record_wall_time", c.record_wall_time},
        {"write_checkpoint", c.write_checkpoint},
        {"model",
         {{"n_layers", m.n_layers},
          {"d_model", m.d_model},
          {"n_heads", m.n_heads},
          {"d_ff", m.d_ff},
          {"vocab_size", m.vocab_size},
          {"max_seq_len", m.max_seq_len},
          {"attention_windows", m.attention_windows},
          {"init_std", m.init_std},
          {"embed_init_std", m.embed_init_std},
          {"groups_always_trainable", m.groups_always_trainable}}},
        {"optimizer",
         {{"learning_rate", o.learning_rate},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"epsilon", o.epsilon},
          {"weight_decay", o.weight_decay},
          {"clip_global_norm", o.clip_global_norm}}},
        {"grass",
         {{"probe_steps", g.probe_steps},
          {"sample_period", g.sample_period},
          {"prob_update_period", g.prob_update_period},
          {"active_layers", g.active_layers},
          {"temperature", g.temperature},
          {"ema_alpha", g.ema_alpha},
          {"normalize_mgn", g.normalize_mgn},
          {"rng_seed", g.rng_seed}}},
        {"dataset",
         {{"kind", dataset_kind_name(d.kind)},
          {"vocab", d.vocab},
          {"period", d.period},
          {"planted_layer", d.planted_layer},
          {"lag", d.lag},
          {"strength", d.strength},
          {"source", d.source},
          {"seed", d.seed},
          {"val_sequences", d.val_sequences}}},
        {"offload",
         {{"enabled", c.offload.enabled},
          {"mode", mode_name(c.offload.mode)},
          {"device_capacity", t.device_capacity},
          {"host_capacity", t.host_capacity},
          {"bandwidth_bytes_per_ms", t.bandwidth_bytes_per_ms},
          {"latency_ms", t.latency_ms},
          {"update_fixed_ms", t.update_fixed_ms},
          {"update_ms_per_byte", t.update_ms_per_byte},
          {"compute_ms", c.offload.compute_ms},
          {"jitter_us", c.offload.jitter_us},
          {"jitter_seed", c.offload.jitter_seed}}},
    };
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read config '" + path + "'");
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

void RunConfig::validate() const {
    model.validate();
    optimizer.validate();
    if (method != Method::FFT) {
        grass.validate(model.n_layers);
    }
    dataset.validate(model, seq_len);
    offload.tier.validate();
    if (total_steps == 0) {
        throw ConfigError("total_steps must be positive");
    }
    if (batch_size == 0) {
        throw ConfigError("batch_size must be positive");
    }
    if (log_every == 0) {
        throw ConfigError("log_every must be positive");
    }
    if (!(offload.compute_ms >= 0.0)) {
        throw ConfigError("offload.compute_ms must be non-negative");
    }
}

RunConfig RunConfig::resolved() const {
    RunConfig r = *this;
    if (r.dataset.kind == DatasetKind::planted_importance && r.model.attention_windows.empty()) {
        r.model.attention_windows = planted_windows(r.model.n_layers, r.dataset.planted_layer, r.dataset.lag);
    }
    switch (r.method) {
    case Method::FFT:
        break;
    case Method::UNIFORM_STATIC:
        r.grass.probe_steps = 0;
        r.grass.adaptive = false;
        break;
    case Method::GRASS_STATIC:
        r.grass.adaptive = false;
        break;
    case Method::GRASS:
        r.grass.adaptive = true;
        break;
    }
    return r;
}

} // namespace grass
