// SPDX-License-Identifier: Apache-2.0
//
// grass: run, sweep, report and gen-dataset.
// Exit codes: 0 ok, 1 other failure, 2 config or input error, 3 numerical fault,
// 4 I/O error (including corrupt artifacts).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "grass/config.hpp"
#include "grass/data.hpp"
#include "grass/error.hpp"
#include "grass/experiment.hpp"
#include "grass/trainer.hpp"

namespace {

using grass::RunConfig;
using nlohmann::json;

// Flags that override fields of the config file.
struct Overrides {
    std::optional<std::size_t> probe_steps, sample_period, prob_update_period, active_layers, steps;
    std::optional<double> temperature, ema_alpha;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> method, output;

    void attach(CLI::App* app) {
        app->add_option("--probe-steps", probe_steps, "T_p: probing steps before the first sample");
        app->add_option("--sample-period", sample_period, "T_s: steps between layer resamples");
        app->add_option("--update-period", prob_update_period, "T_u: steps between probability refreshes");
        app->add_option("--active-layers", active_layers, "gamma: blocks trained per sampling period");
        app->add_option("--temperature", temperature, "tau: softmax temperature");
        app->add_option("--ema-alpha", ema_alpha, "alpha: weight of the newest MGN window");
        app->add_option("--steps", steps, "total training steps");
        app->add_option("--seed", seed, "run seed");
        app->add_option("--method", method, "FFT | UNIFORM_STATIC | GRASS_STATIC | GRASS");
        app->add_option("--output", output, "output directory");
    }

    void apply(RunConfig& c) const {
        if (probe_steps) c.grass.probe_steps = *probe_steps;
        if (sample_period) c.grass.sample_period = *sample_period;
        if (prob_update_period) c.grass.prob_update_period = *prob_update_period;
        if (active_layers) c.grass.active_layers = *active_layers;
        if (temperature) c.grass.temperature = *temperature;
        if (ema_alpha) c.grass.ema_alpha = *ema_alpha;
        if (steps) c.total_steps = *steps;
        if (seed) c.seed = *seed;
        if (method) c.method = grass::parse_method(*method);
        if (output) c.output_dir = *output;
        c.validate();
    }
};

RunConfig load_with(const std::string& path, const Overrides& o) {
    RunConfig c = path.empty() ? RunConfig{} : grass::load_config(path);
    o.apply(c);
    return c;
}

std::vector<std::uint64_t> parse_list(const std::string& text, const char* flag) {
    std::vector<std::uint64_t> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto comma = text.find(',', pos);
        const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            std::size_t used = 0;
            out.push_back(std::stoull(item, &used));
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
        } catch (const std::exception&) {
            throw grass::ConfigError(std::string(flag) + ": '" + item + "' is not a non-negative integer");
        }
        if (comma == std::string::npos) {
            break;
        }
        pos = comma + 1;
    }
    return out;
}

int cmd_run(const std::string& config_path, const Overrides& o) {
    const RunConfig c = load_with(config_path, o);
    const auto res = grass::run_training(c);
    std::cout << "method " << grass::method_name(res.config.method) << "  steps " << res.config.total_steps
              << "  final train " << res.final_train_loss << "  final val " << res.final_val_loss << '\n'
              << "artifacts " << grass::effective_output_dir(res.config) << '\n';
    return 0;
}

int cmd_sweep(const std::string& config_path, const Overrides& o, const std::string& grid_path,
              const std::string& tps, const std::string& tss, const std::string& gammas, const std::string& seeds) {
    RunConfig base = load_with(config_path, o);
    grass::SweepGrid grid;
    if (!grid_path.empty()) {
        std::ifstream in(grid_path);
        if (!in) {
            throw grass::IoError("sweep: cannot read grid '" + grid_path + "'");
        }
        try {
            grid = grass::grid_from_json(json::parse(in));
        } catch (const json::exception& e) {
            throw grass::ConfigError("sweep: malformed grid: " + std::string(e.what()));
        }
    }
    auto axis = [](const std::string& text, const char* flag, auto& out) {
        if (!text.empty()) {
            out.clear();
            for (auto v : parse_list(text, flag)) {
                out.push_back(static_cast<typename std::decay_t<decltype(out)>::value_type>(v));
            }
        }
    };
    axis(tps, "--probe-steps-grid", grid.probe_steps);
    axis(tss, "--sample-period-grid", grid.sample_period);
    axis(gammas, "--active-layers-grid", grid.active_layers);
    axis(seeds, "--seeds", grid.seeds);

    const std::filesystem::path root = grass::effective_output_dir(base);
    std::filesystem::create_directories(root);
    base.output_dir = root.string();
    std::ofstream csv(root / "sweep.csv", std::ios::trunc);
    if (!csv) {
        throw grass::IoError("sweep: cannot write " + (root / "sweep.csv").string());
    }
    const auto rows = grass::run_sweep(base, grid, true, &csv);
    std::size_t failed = 0;
    for (const auto& r : rows) {
        failed += r.ok ? 0 : 1;
    }
    std::cout << rows.size() << " runs, " << failed << " failed; results in " << (root / "sweep.csv").string()
              << '\n';
    return failed == 0 ? 0 : 1;
}

int cmd_report(const std::string& dir) {
    const auto r = grass::build_report(dir);
    grass::write_report_files(dir, r);
    std::cout << grass::format_report(r);
    return 0;
}

int cmd_gen_dataset(const std::string& config_path, const Overrides& o, std::size_t batches,
                    const std::string& out_path) {
    const RunConfig c = load_with(config_path, o).resolved();
    const grass::Dataset ds(c.dataset, c.model, c.seq_len);
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path, std::ios::trunc);
        if (!file) {
            throw grass::IoError("gen-dataset: cannot write '" + out_path + "'");
        }
    }
    std::ostream& out = out_path.empty() ? std::cout : file;
    for (std::size_t s = 0; s < batches; ++s) {
        const auto b = ds.train_batch(s, c.batch_size);
        out << json{{"step", s}, {"batch", b.batch}, {"seq", b.seq}, {"tokens", b.tokens}, {"targets", b.targets}}
                   .dump()
            << '\n';
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layer-sampled fine-tuning with optimizer-state offloading"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides o;

    auto* run = app.add_subcommand("run", "train one configuration and write artifacts");
    run->add_option("config", config_path, "JSON run config");
    o.attach(run);

    std::string grid_path, tps, tss, gammas, seeds;
    auto* sweep = app.add_subcommand("sweep", "train every point of a grid; writes sweep.csv");
    sweep->add_option("config", config_path, "JSON base config");
    sweep->add_option("--grid", grid_path, "JSON grid {probe_steps, sample_period, active_layers, seeds}");
    sweep->add_option("--probe-steps-grid", tps, "comma-separated T_p values");
    sweep->add_option("--sample-period-grid", tss, "comma-separated T_s values");
    sweep->add_option("--active-layers-grid", gammas, "comma-separated gamma values");
    sweep->add_option("--seeds", seeds, "comma-separated seeds");
    o.attach(sweep);

    std::string report_dir;
    auto* report = app.add_subcommand("report", "summarize a run directory; writes report.csv and entropy.csv");
    report->add_option("dir", report_dir, "artifacts directory")->required();

    std::size_t batches = 1;
    std::string out_path;
    auto* gen = app.add_subcommand("gen-dataset", "print training batches as JSON lines");
    gen->add_option("config", config_path, "JSON run config");
    gen->add_option("--batches", batches, "number of batches");
    gen->add_option("--out", out_path, "write to a file instead of stdout");
    o.attach(gen);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) {
            return cmd_run(config_path, o);
        }
        if (*sweep) {
            return cmd_sweep(config_path, o, grid_path, tps, tss, gammas, seeds);
        }
        if (*report) {
            return cmd_report(report_dir);
        }
        return cmd_gen_dataset(config_path, o, batches, out_path);
    } catch (const grass::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const grass::InputError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return 2;
    } catch (const grass::NumericalFault& e) {
        std::cerr << "numerical fault: " << e.what() << '\n';
        return 3;
    } catch (const grass::IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return 4;
    } catch (const grass::IntegrityError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return 4;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
