// SPDX-License-Identifier: Apache-2.0

#include "grass/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "grass/error.hpp"
#include "grass/trainer.hpp"

namespace grass {

using nlohmann::json;
namespace fs = std::filesystem;

std::size_t SweepGrid::size() const {
    auto n = [](std::size_t k) { return k == 0 ? std::size_t{1} : k; };
    return n(probe_steps.size()) * n(sample_period.size()) * n(active_layers.size()) * n(seeds.size());
}

SweepGrid grid_from_json(const json& j) {
    if (!j.is_object()) {
        throw ConfigError("grid: expected an object");
    }
    SweepGrid g;
    auto axis = [&](const char* key, auto& out) {
        if (!j.contains(key)) {
            return;
        }
        const json& a = j.at(key);
        if (!a.is_array()) {
            throw ConfigError(std::string("grid.") + key + ": expected an array");
        }
        if (a.empty()) {
            throw ConfigError(std::string("grid.") + key + ": empty axis");
        }
        for (const auto& v : a) {
            if (!v.is_number_unsigned() && (!v.is_number_integer() || v.get<std::int64_t>() < 0)) {
                throw ConfigError(std::string("grid.") + key + ": expected non-negative integers");
            }
            out.push_back(v.get<typename std::decay_t<decltype(out)>::value_type>());
        }
    };
    for (const auto& [k, v] : j.items()) {
        if (k != "probe_steps" && k != "sample_period" && k != "active_layers" && k != "seeds") {
            throw ConfigError("grid." + k + ": unknown axis");
        }
    }
    axis("probe_steps", g.probe_steps);
    axis("sample_period", g.sample_period);
    axis("active_layers", g.active_layers);
    axis("seeds", g.seeds);
    return g;
}

void write_sweep_header(std::ostream& out) {
    out << "probe_steps,sample_period,active_layers,seed,status,final_val_loss,final_train_loss,mean_step_ms,"
           "mean_vanilla_ms,mean_overlapped_ms,output_dir,error\n";
}

void write_sweep_row(std::ostream& out, const SweepRow& r) {
    std::string err = r.error;
    for (char& c : err) {
        if (c == ',' || c == '\n' || c == '"') {
            c = ' ';
        }
    }
    out << r.probe_steps << ',' << r.sample_period << ',' << r.active_layers << ',' << r.seed << ','
        << (r.ok ? "ok" : "error") << ',' << std::setprecision(17) << r.final_val_loss << ',' << r.final_train_loss
        << ',' << r.mean_step_ms << ',' << r.mean_vanilla_ms << ',' << r.mean_overlapped_ms << ',' << r.output_dir
        << ',' << err << '\n';
    out.flush();
}

std::vector<SweepRow> run_sweep(const RunConfig& base, const SweepGrid& grid, bool write_artifacts, std::ostream* csv) {
    auto or_base = [](const auto& axis, auto value) {
        return axis.empty() ? std::vector<decltype(value)>{value} : axis;
    };
    const auto tps = or_base(grid.probe_steps, base.grass.probe_steps);
    const auto tss = or_base(grid.sample_period, base.grass.sample_period);
    const auto gammas = or_base(grid.active_layers, base.grass.active_layers);
    const auto seeds = or_base(grid.seeds, base.seed);

    if (csv != nullptr) {
        write_sweep_header(*csv);
    }
    std::vector<SweepRow> rows;
    for (auto tp : tps) {
        for (auto ts : tss) {
            for (auto gamma : gammas) {
                for (auto seed : seeds) {
                    RunConfig c = base;
                    c.grass.probe_steps = tp;
                    c.grass.sample_period = ts;
                    c.grass.active_layers = gamma;
                    c.seed = seed;
                    std::ostringstream name;
                    name << "tp" << tp << "_ts" << ts << "_g" << gamma << "_s" << seed;
                    c.output_dir = (fs::path(base.output_dir) / name.str()).string();

                    SweepRow row{tp, ts, gamma, seed, false, "", 0.0, 0.0, 0.0, 0.0, 0.0, c.output_dir};
                    try {
                        const RunResult res = run_training(c, write_artifacts);
                        row.ok = true;
                        row.final_val_loss = res.final_val_loss;
                        row.final_train_loss = res.final_train_loss;
                        for (const auto& m : res.metrics) {
                            row.mean_step_ms += m.step_time_ms;
                            row.mean_vanilla_ms += m.step_time_vanilla_ms;
                            row.mean_overlapped_ms += m.step_time_overlapped_ms;
                        }
                        const auto k = static_cast<double>(std::max<std::size_t>(res.metrics.size(), 1));
                        row.mean_step_ms /= k;
                        row.mean_vanilla_ms /= k;
                        row.mean_overlapped_ms /= k;
                    } catch (const std::exception& e) {
                        row.error = e.what();
                    }
                    if (csv != nullptr) {
                        write_sweep_row(*csv, row);
                    }
                    rows.push_back(std::move(row));
                }
            }
        }
    }
    return rows;
}

namespace {

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) {
        throw IoError("report: missing " + p.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("report: malformed " + p.string() + ": " + e.what());
    }
}

std::vector<json> read_jsonl(const fs::path& p) {
    std::ifstream in(p);
    if (!in) {
        throw IoError("report: missing " + p.string());
    }
    std::vector<json> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception&) {
            throw IoError("report: malformed line " + std::to_string(n) + " of " + p.string());
        }
    }
    return out;
}

} // namespace

RunReport build_report(const std::string& artifacts_dir) {
    const fs::path dir(artifacts_dir);
    if (!fs::is_directory(dir)) {
        throw IoError("report: '" + artifacts_dir + "' is not a directory");
    }
    const json summary = read_json_file(dir / "summary.json");
    const auto metrics = read_jsonl(dir / "metrics.jsonl");
    RunReport r;
    try {
        r.method = summary.at("method").get<std::string>();
        r.final_train_loss = summary.at("final_train_loss").get<double>();
        r.final_val_loss = summary.at("final_val_loss").get<double>();
        r.peak_device_bytes = summary.at("peak_device_bytes").get<std::map<std::string, std::size_t>>();
        const double v = summary.at("simulated_vanilla_ms").get<double>();
        const double o = summary.at("simulated_overlapped_ms").get<double>();
        r.overlap_speedup = o > 0.0 ? v / o : 1.0;
    } catch (const json::exception& e) {
        throw IoError(std::string("report: summary.json lacks a field: ") + e.what());
    }
    r.metrics_records = metrics.size();
    if (fs::exists(dir / "prob_trace.jsonl")) {
        for (const auto& rec : read_jsonl(dir / "prob_trace.jsonl")) {
            double h = 0.0;
            for (double p : rec.at("p").get<std::vector<double>>()) {
                if (p > 0.0) {
                    h -= p * std::log(p);
                }
            }
            r.entropy.emplace_back(rec.at("step").get<std::size_t>(), h);
        }
    }
    return r;
}

std::string format_report(const RunReport& r) {
    std::ostringstream out;
    out << std::setprecision(6);
    out << "method            " << r.method << '\n';
    out << "final train loss  " << r.final_train_loss << '\n';
    out << "final val loss    " << r.final_val_loss << '\n';
    out << "metrics records   " << r.metrics_records << '\n';
    out << "overlap speedup   " << r.overlap_speedup << "x (simulated vanilla / overlapped)\n";
    out << "peak device bytes\n";
    for (const auto& [k, v] : r.peak_device_bytes) {
        out << "  " << std::left << std::setw(18) << k << v << '\n';
    }
    if (!r.entropy.empty()) {
        out << "policy entropy    " << r.entropy.front().second << " (step " << r.entropy.front().first << ") -> "
            << r.entropy.back().second << " (step " << r.entropy.back().first << ")\n";
    }
    return out.str();
}

void write_report_files(const std::string& artifacts_dir, const RunReport& r) {
    const fs::path dir(artifacts_dir);
    std::ofstream kv(dir / "report.csv", std::ios::trunc);
    kv << std::setprecision(17) << "key,value\n";
    kv << "method," << r.method << '\n';
    kv << "final_train_loss," << r.final_train_loss << '\n';
    kv << "final_val_loss," << r.final_val_loss << '\n';
    kv << "overlap_speedup," << r.overlap_speedup << '\n';
    for (const auto& [k, v] : r.peak_device_bytes) {
        kv << "peak_" << k << ',' << v << '\n';
    }
    std::ofstream ent(dir / "entropy.csv", std::ios::trunc);
    ent << std::setprecision(17) << "step,entropy\n";
    for (const auto& [s, h] : r.entropy) {
        ent << s << ',' << h << '\n';
    }
    if (!kv || !ent) {
        throw IoError("report: cannot write report files in " + dir.string());
    }
}

} // namespace grass
