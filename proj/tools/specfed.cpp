// specfed — batch experiment runner for the spectral federated learning
// library. Subcommands:
//
//   run            train for the configured number of rounds; writes
//                  rounds.csv, summary.csv, optional curves.svg, checkpoint
//   sweep          one full run per value of --axis; writes sweep.csv
//   ablate         full pipeline plus four component-removal variants;
//                  writes ablation.csv
//   spectrum-probe render cross-modality scene pairs and measure how much of
//                  the spectral difference lies below the tokenizer cutoff;
//                  writes spectrum.csv plus per-pair PGM spectra and prints
//                  the mean ratio
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration (the
// message names the offending key path).

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "specfed/config.hpp"
#include "specfed/experiment.hpp"

namespace {

std::vector<double> parse_value_list(const std::string& csv) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= csv.size()) {
        std::size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        const std::string item = csv.substr(pos, comma - pos);
        try {
            std::size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw specfed::ConfigError("sweep.values", "'" + item + "' is not a number");
        }
        pos = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spectral federated learning experiment runner"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    std::string axis_name = "lambda";
    std::string values_csv;
    int pairs = 100;
    bool include_same = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("config", config_path, "JSON experiment configuration")->required();
        sub->add_option("--seed", seed, "override federation.seed");
        sub->add_option("--workers", workers, "override federation.workers");
        sub->add_option("--out", out_dir, "output directory (default: config output.dir, "
                                          "then $SPECFED_OUT, then '.')");
    };

    CLI::App* cmd_run = app.add_subcommand("run", "execute the configured federation");
    add_common(cmd_run);
    CLI::App* cmd_sweep = app.add_subcommand("sweep", "run once per axis value");
    add_common(cmd_sweep);
    cmd_sweep->add_option("--axis", axis_name, "sweep axis: lambda or top_k")->required();
    cmd_sweep->add_option("--values", values_csv, "comma-separated axis values")->required();
    CLI::App* cmd_ablate = app.add_subcommand("ablate", "full pipeline plus four ablations");
    add_common(cmd_ablate);
    CLI::App* cmd_probe =
        app.add_subcommand("spectrum-probe", "measure cross-modality spectral overlap");
    add_common(cmd_probe);
    cmd_probe->add_option("--pairs", pairs, "number of cross-modality scene pairs");
    cmd_probe->add_flag("--include-same", include_same,
                        "also emit same-modality control pairs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // bad command line is a configuration problem
    }

    try {
        specfed::ExperimentConfig cfg = specfed::load_config(config_path);
        if (seed) cfg.fed.round.seed = *seed;
        if (workers) cfg.fed.round.workers = *workers;
        cfg.output.dir = specfed::resolve_output_dir(out_dir, cfg);
        cfg.output.dir_set = true;

        if (cmd_run->parsed()) {
            specfed::RunArtifacts art = specfed::command_run(cfg);
            std::cout << "executed " << art.reports.size() << " round(s)\n"
                      << "wrote " << art.rounds_csv << '\n'
                      << "wrote " << art.summary_csv << '\n';
            if (!art.curves_svg.empty()) std::cout << "wrote " << art.curves_svg << '\n';
            if (!art.checkpoint_path.empty())
                std::cout << "wrote " << art.checkpoint_path << '\n';
        } else if (cmd_sweep->parsed()) {
            const specfed::SweepAxis axis = specfed::sweep_axis_from_string(axis_name);
            const std::string path =
                specfed::command_sweep(cfg, axis, parse_value_list(values_csv));
            std::cout << "wrote " << path << '\n';
        } else if (cmd_ablate->parsed()) {
            std::cout << "wrote " << specfed::command_ablate(cfg) << '\n';
        } else {
            specfed::ProbeReport rep = specfed::command_spectrum_probe(cfg, pairs, include_same);
            std::cout << "wrote " << rep.csv_path << '\n';
            if (pairs > 0)
                std::cout << "mean low-pass/full distance ratio: "
                          << specfed::format_double(rep.mean_cross_ratio) << '\n';
        }
        return 0;
    } catch (const specfed::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
