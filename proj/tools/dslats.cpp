#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dslats/config.hpp"
#include "dslats/error.hpp"
#include "dslats/eval.hpp"

namespace fs = std::filesystem;
using namespace dslats;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::string> algorithm, topology, msg_types;
    std::optional<double> rate, duration;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
};

void add_common(CLI::App* app, Overrides& o) {
    app->add_option("--config", o.config, "Scenario config (JSON)");
    app->add_option("--algorithm", o.algorithm, "ckal | dkal | mkal | opt");
    app->add_option("--topology", o.topology, "full | k:<n>");
    app->add_option("--msg-types", o.msg_types, "Comma list of message types, e.g. 1,2,3");
    app->add_option("--rate", o.rate, "Epoch rate in Hz");
    app->add_option("--duration", o.duration, "Duration in seconds");
    app->add_option("--seed", o.seed, "Random seed");
    app->add_option("--out", o.out, "Output directory");
}

ScenarioConfig resolve(const Overrides& o) {
    ScenarioConfig cfg = o.config.empty() ? ScenarioConfig{} : load_config(o.config);
    if (o.algorithm) {
        const auto a = parse_algorithm(*o.algorithm);
        if (!a) throw ConfigError("--algorithm: unknown value '" + *o.algorithm + "' (allowed: ckal, dkal, mkal, opt)");
        cfg.algorithm = *a;
    }
    if (o.topology) cfg.topology = parse_topology_flag(*o.topology);
    if (o.msg_types) cfg.msg_types = parse_msg_types(*o.msg_types);
    if (o.rate) cfg.rate_hz = *o.rate;
    if (o.duration) cfg.duration_s = *o.duration;
    if (o.seed) cfg.seed = *o.seed;
    validate(cfg);
    return cfg;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    return f;
}

std::string stem(const ScenarioConfig& cfg) {
    return cfg.name + "_" + std::string(to_string(cfg.algorithm)) + "_" + std::to_string(cfg.seed);
}

// Runs one scenario and writes its series CSV. Returns false on estimator failure.
bool run_one(const ScenarioConfig& cfg, const fs::path& out, const std::string& label, std::ostream& summary,
             ErrorReport* report = nullptr) {
    const RunResult res = run_experiment(cfg);
    {
        auto f = open_out(out / (stem(cfg) + ".csv"));
        write_series_csv(f, res.series);
    }
    write_summary_rows(summary, label, res.report);
    print_summary(std::cout, label, res.report);
    if (report) *report = res.report;
    return !res.report.failure_epoch;
}

int cmd_run(const Overrides& o) {
    const ScenarioConfig cfg = resolve(o);
    const fs::path out(o.out);
    fs::create_directories(out);
    {
        auto f = open_out(out / "effective_config.json");
        f << to_json(cfg);
    }
    auto summary = open_out(out / (stem(cfg) + "_summary.csv"));
    write_summary_header(summary);
    return run_one(cfg, out, cfg.name, summary) ? 0 : 1;
}

int cmd_sweep(const Overrides& o, const std::string& axis, const std::string& values) {
    ScenarioConfig base = resolve(o);
    const fs::path out(o.out);
    fs::create_directories(out);
    {
        auto f = open_out(out / "effective_config.json");
        f << to_json(base);
    }

    std::vector<std::pair<std::string, ScenarioConfig>> runs;
    std::vector<std::string> items;
    if (!values.empty()) {
        std::stringstream ss(values);
        for (std::string v; std::getline(ss, v, ',');) items.push_back(v);
    }
    if (axis == "k") {
        if (items.empty()) items = {"7", "6", "5", "4", "3"};
        for (const std::string& v : items) {
            ScenarioConfig c = base;
            c.topology = parse_topology_flag("k:" + v);
            c.name = base.name + "_k" + v;
            validate(c);
            runs.emplace_back("k=" + v, c);
        }
    } else if (axis == "noise") {
        if (items.empty()) items = {"0.1", "0.3", "1.0"};
        for (const std::string& v : items) {
            ScenarioConfig c = base;
            c.noise.timestamp_std = std::stod(v) * 1e-9;
            c.name = base.name + "_noise" + v + "ns";
            validate(c);
            runs.emplace_back("noise=" + v + "ns", c);
        }
    } else if (axis == "algorithm") {
        if (items.empty()) items = {"ckal", "dkal", "mkal", "opt"};
        for (const std::string& v : items) {
            const auto a = parse_algorithm(v);
            if (!a) throw ConfigError("--values: unknown algorithm '" + v + "'");
            ScenarioConfig c = base;
            c.algorithm = *a;
            runs.emplace_back(v, c);
        }
    } else {
        throw ConfigError("--axis: unknown value '" + axis + "' (allowed: k, noise, algorithm)");
    }

    auto summary = open_out(out / (base.name + "_sweep_" + axis + "_" + std::to_string(base.seed) + ".csv"));
    write_summary_header(summary);
    bool ok = true;
    for (const auto& [label, cfg] : runs) ok = run_one(cfg, out, label, summary) && ok;
    return ok ? 0 : 1;
}

int cmd_export(const Overrides& o) {
    const ScenarioConfig cfg = resolve(o);
    const fs::path out(o.out);
    fs::create_directories(out);
    auto f = open_out(out / (cfg.name + "_" + std::to_string(cfg.seed) + "_exchanges.csv"));
    RunHooks hooks;
    hooks.exchange_log = &f;
    const RunResult res = run_experiment(cfg, hooks);
    std::cout << "wrote " << (out / (cfg.name + "_" + std::to_string(cfg.seed) + "_exchanges.csv")).string() << '\n';
    return res.report.failure_epoch ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint localization and clock synchronization experiments"};
    app.require_subcommand(1);

    Overrides run_o, sweep_o, export_o;
    auto* run = app.add_subcommand("run", "Run one scenario");
    add_common(run, run_o);
    auto* sweep = app.add_subcommand("sweep", "Run one scenario per axis value");
    add_common(sweep, sweep_o);
    std::string axis = "algorithm", values;
    sweep->add_option("--axis", axis, "k | noise | algorithm");
    sweep->add_option("--values", values, "Comma list overriding the default axis values");
    auto* exp = app.add_subcommand("export-traces", "Write the raw exchange log");
    add_common(exp, export_o);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*run) return cmd_run(run_o);
        if (*sweep) return cmd_sweep(sweep_o, axis, values);
        if (*exp) return cmd_export(export_o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
