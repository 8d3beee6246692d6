#pragma once

// Experiment drivers built on top of the federation engine: dataset and shard
// preparation from a parsed configuration, the four CLI commands (run, sweep,
// ablate, spectrum-probe), and the CSV / SVG / PGM writers they emit. All
// numeric output goes through shortest-round-trip formatting so identical
// results produce byte-identical files regardless of worker count.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "specfed/config.hpp"
#include "specfed/error.hpp"
#include "specfed/federation.hpp"
#include "specfed/image.hpp"
#include "specfed/metrics.hpp"
#include "specfed/rng.hpp"
#include "specfed/spectral.hpp"
#include "specfed/synthdata.hpp"

namespace specfed {

// ---------------------------------------------------------------------------
// Deterministic number formatting
// ---------------------------------------------------------------------------

// Shortest decimal string that round-trips to the same double. Locale-free
// and platform-stable, so CSV bytes do not depend on stream state.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

// Output directory resolution, highest priority first: explicit CLI --out,
// the config file's output.dir, the SPECFED_OUT environment variable, ".".
inline std::string resolve_output_dir(const std::string& cli_out, const ExperimentConfig& cfg) {
    if (!cli_out.empty()) return cli_out;
    if (cfg.output.dir_set) return cfg.output.dir;
    if (const char* env = std::getenv("SPECFED_OUT"); env != nullptr && *env != '\0') return env;
    return ".";
}

// ---------------------------------------------------------------------------
// Dataset + shard preparation
// ---------------------------------------------------------------------------

struct PreparedData {
    std::shared_ptr<const Dataset> dataset;
    std::vector<std::vector<int>> shards;  // one per client, indices into dataset
};

// Builds the synthetic dataset and splits it into client shards according to
// the configured partition scheme.
//
//  * dirichlet: class proportions per client drawn from Dirichlet(gamma).
//    Each scene is then rendered in the modality `owner % num_modalities`, so
//    clients also differ in appearance, not just label balance.
//  * modality_disjoint / modality_overlapping: scenes are rendered round-robin
//    across modalities first, then sharded by modality membership.
inline PreparedData prepare_data(const ExperimentConfig& cfg) {
    const std::size_t K = static_cast<std::size_t>(cfg.fed.num_clients);
    const std::uint64_t seed = cfg.fed.round.seed;
    PreparedData out;

    if (cfg.partition == PartitionKind::dirichlet) {
        std::vector<SceneSpec> scenes = make_scene_specs(cfg.data, seed);
        const std::size_t C = static_cast<std::size_t>(cfg.data.num_classes);
        std::vector<std::size_t> per_class(C, 0);
        for (std::size_t i = 0; i < scenes.size(); ++i) ++per_class[i % C];
        auto rng = make_stream(seed, "partition", {});
        auto class_major = dirichlet_partition(per_class, K, cfg.gamma, rng);

        // Class-major index j = (class block start of c) + o maps back to
        // scene o*C + c, because scene i carries class i % C.
        std::vector<std::size_t> start(C + 1, 0);
        for (std::size_t c = 0; c < C; ++c) start[c + 1] = start[c] + per_class[c];
        std::vector<int> owner(scenes.size(), 0);
        out.shards.assign(K, {});
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t j : class_major[k]) {
                const std::size_t c =
                    static_cast<std::size_t>(
                        std::upper_bound(start.begin(), start.end(), j) - start.begin()) -
                    1;
                const std::size_t scene = (j - start[c]) * C + c;
                owner[scene] = static_cast<int>(k);
                out.shards[k].push_back(static_cast<int>(scene));
            }
            std::sort(out.shards[k].begin(), out.shards[k].end());
        }
        std::vector<int> assignment(scenes.size());
        for (std::size_t i = 0; i < scenes.size(); ++i)
            assignment[i] = owner[i] % cfg.data.num_modalities;
        auto modalities = default_modalities(cfg.data.num_modalities);
        out.dataset = std::make_shared<Dataset>(
            render_dataset(cfg.data, scenes, modalities, assignment, seed));
        return out;
    }

    Dataset ds = make_dataset(cfg.data, seed);
    std::vector<int> sample_modalities(ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        sample_modalities[i] = ds.samples[i].modality_id;
    const auto mode = cfg.partition == PartitionKind::modality_disjoint
                          ? ModalityPartitionMode::disjoint
                          : ModalityPartitionMode::overlapping;
    auto raw = modality_partition(sample_modalities, K, mode, cfg.overlap_fraction);
    out.shards.assign(K, {});
    for (std::size_t k = 0; k < K; ++k) {
        out.shards[k].reserve(raw[k].size());
        for (std::size_t idx : raw[k]) out.shards[k].push_back(static_cast<int>(idx));
        std::sort(out.shards[k].begin(), out.shards[k].end());
    }
    out.dataset = std::make_shared<Dataset>(std::move(ds));
    return out;
}

inline Federation build_federation(const ExperimentConfig& cfg, PreparedData prepared) {
    std::vector<HeadConfig> heads(static_cast<std::size_t>(cfg.fed.num_clients),
                                  head_config_of(cfg));
    return Federation(cfg.fed, std::move(prepared.dataset), std::move(prepared.shards),
                      std::move(heads));
}

// ---------------------------------------------------------------------------
// CSV / SVG writers
// ---------------------------------------------------------------------------

inline void write_rounds_csv(const std::string& path, const std::vector<RoundReport>& reports) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot open " + path + " for writing");
    out << "round,client_id,task,metric,value\n";
    for (const RoundReport& rep : reports)
        for (const MetricRecord& r : rep.records)
            out << r.round << ',' << r.client_id << ',' << r.task << ',' << r.metric << ','
                << format_double(r.value) << '\n';
}

struct AggregateRow {
    std::string task;
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation across clients
};

// Per-(task, metric) mean and population standard deviation over the records
// of one round, in lexicographic (task, metric) order.
inline std::vector<AggregateRow> aggregate_report(const RoundReport& report) {
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    for (const MetricRecord& r : report.records) groups[{r.task, r.metric}].push_back(r.value);
    std::vector<AggregateRow> rows;
    rows.reserve(groups.size());
    for (const auto& [key, values] : groups) {
        double mean = 0.0;
        for (double v : values) mean += v;
        mean /= static_cast<double>(values.size());
        double var = 0.0;
        for (double v : values) var += (v - mean) * (v - mean);
        var /= static_cast<double>(values.size());
        rows.push_back({key.first, key.second, mean, std::sqrt(var)});
    }
    return rows;
}

inline void write_summary_csv(const std::string& path, const std::vector<AggregateRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot open " + path + " for writing");
    out << "task,metric,mean,std\n";
    for (const AggregateRow& r : rows)
        out << r.task << ',' << r.metric << ',' << format_double(r.mean) << ','
            << format_double(r.stddev) << '\n';
}

// Self-contained learning-curve plot: one polyline per (task, metric) series
// of per-round means, with an inline legend. No external references.
inline void write_curves_svg(const std::string& path, const std::vector<RoundReport>& reports) {
    std::map<std::pair<std::string, std::string>, std::vector<std::pair<int, double>>> series;
    for (const RoundReport& rep : reports)
        for (const AggregateRow& row : aggregate_report(rep))
            series[{row.task, row.metric}].push_back({rep.round, row.mean});

    const double W = 640.0, H = 400.0, ml = 64.0, mr = 16.0, mt = 16.0, mb = 40.0;
    double lo = 0.0, hi = 1.0;
    int rmin = 0, rmax = 1;
    bool first = true;
    for (const auto& [key, pts] : series)
        for (const auto& [r, v] : pts) {
            if (first) {
                lo = hi = v;
                rmin = rmax = r;
                first = false;
            } else {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
                rmin = std::min(rmin, r);
                rmax = std::max(rmax, r);
            }
        }
    if (hi - lo < 1e-12) {
        hi += 0.5;
        lo -= 0.5;
    }
    const double xspan = rmax > rmin ? static_cast<double>(rmax - rmin) : 1.0;
    auto X = [&](int r) { return ml + (W - ml - mr) * (r - rmin) / xspan; };
    auto Y = [&](double v) { return H - mb - (H - mt - mb) * (v - lo) / (hi - lo); };
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot open " + path + " for writing");
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 400\" "
           "font-family=\"monospace\" font-size=\"11\">\n";
    out << "<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
        << H - mb << "\" stroke=\"#333\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
        << "\" stroke=\"#333\"/>\n";
    out << "<text x=\"" << ml << "\" y=\"" << H - mb + 16 << "\">round " << rmin << "</text>\n";
    out << "<text x=\"" << W - mr - 64 << "\" y=\"" << H - mb + 16 << "\">round " << rmax
        << "</text>\n";
    out << "<text x=\"4\" y=\"" << Y(hi) + 4 << "\">" << format_double(hi) << "</text>\n";
    out << "<text x=\"4\" y=\"" << Y(lo) + 4 << "\">" << format_double(lo) << "</text>\n";
    std::size_t idx = 0;
    for (const auto& [key, pts] : series) {
        const char* color = palette[idx % (sizeof(palette) / sizeof(palette[0]))];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [r, v] : pts) out << X(r) << ',' << Y(v) << ' ';
        out << "\"/>\n";
        const double ly = mt + 14.0 * static_cast<double>(idx + 1);
        out << "<rect x=\"" << ml + 8 << "\" y=\"" << ly - 8 << "\" width=\"10\" height=\"10\" "
            << "fill=\"" << color << "\"/>\n";
        out << "<text x=\"" << ml + 22 << "\" y=\"" << ly << "\">" << key.first << '/'
            << key.second << "</text>\n";
        ++idx;
    }
    out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct RunArtifacts {
    std::vector<RoundReport> reports;  // rounds executed by this invocation
    std::string rounds_csv;
    std::string summary_csv;
    std::string curves_svg;      // empty when curves are disabled
    std::string checkpoint_path; // empty when checkpointing is disabled
};

// Runs rounds until cfg.rounds, annotating runtime failures with the round
// index. Shared by run/sweep/ablate.
inline std::vector<RoundReport> drive_rounds(Federation& fed, int total_rounds) {
    std::vector<RoundReport> reports;
    while (fed.round() < total_rounds) {
        try {
            reports.push_back(fed.run_round());
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ContractError("round " + std::to_string(fed.round()) + ": " + e.what());
        }
    }
    return reports;
}

// Full `run` command: execute the configured federation, write rounds.csv,
// summary.csv, optional curves.svg, and a checkpoint. With output.resume set
// and a checkpoint present, training continues from the stored round and the
// CSV files cover only the newly executed rounds.
inline RunArtifacts command_run(const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.output.dir);
    Federation fed = build_federation(cfg, prepare_data(cfg));
    RunArtifacts art;
    if (!cfg.output.checkpoint.empty())
        art.checkpoint_path = (fs::path(cfg.output.dir) / cfg.output.checkpoint).string();

    const std::uint64_t hash = config_hash(cfg);
    if (cfg.output.resume && !art.checkpoint_path.empty() && fs::exists(art.checkpoint_path)) {
        std::ifstream in(art.checkpoint_path, std::ios::binary);
        if (!in) throw ContractError("cannot open " + art.checkpoint_path + " for reading");
        fed.restore(in, hash);
    }

    art.reports = drive_rounds(fed, cfg.rounds);

    art.rounds_csv = (fs::path(cfg.output.dir) / "rounds.csv").string();
    write_rounds_csv(art.rounds_csv, art.reports);
    art.summary_csv = (fs::path(cfg.output.dir) / "summary.csv").string();
    write_summary_csv(art.summary_csv,
                      art.reports.empty() ? std::vector<AggregateRow>{}
                                          : aggregate_report(art.reports.back()));
    if (cfg.output.curves && !art.reports.empty()) {
        art.curves_svg = (fs::path(cfg.output.dir) / "curves.svg").string();
        write_curves_svg(art.curves_svg, art.reports);
    }
    if (!art.checkpoint_path.empty()) {
        std::ofstream out(art.checkpoint_path, std::ios::binary);
        if (!out) throw ContractError("cannot open " + art.checkpoint_path + " for writing");
        fed.save(out, hash);
    }
    return art;
}

// In-memory run (no files): returns the final-round aggregates. Used for
// sweep cells and ablation variants.
inline std::vector<AggregateRow> run_final_aggregates(const ExperimentConfig& cfg) {
    Federation fed = build_federation(cfg, prepare_data(cfg));
    std::vector<RoundReport> reports = drive_rounds(fed, cfg.rounds);
    if (reports.empty()) throw ContractError("run produced no rounds");
    return aggregate_report(reports.back());
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

enum class SweepAxis { lambda, top_k };

inline SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "lambda") return SweepAxis::lambda;
    if (s == "top_k") return SweepAxis::top_k;
    throw ConfigError("sweep.axis", "unknown axis '" + s + "' (expected lambda or top_k)");
}

inline ExperimentConfig apply_axis(ExperimentConfig cfg, SweepAxis axis, double value) {
    switch (axis) {
        case SweepAxis::lambda:
            if (value < 0.0) throw ConfigError("sweep.values", "lambda must be >= 0");
            cfg.fed.round.lambda_align = value;
            break;
        case SweepAxis::top_k: {
            const double r = std::round(value);
            if (value != r || r < 1.0)
                throw ConfigError("sweep.values", "top_k values must be positive integers");
            cfg.fed.round.top_k = static_cast<int>(r);
            break;
        }
    }
    return cfg;
}

struct SweepCell {
    double axis_value = 0.0;
    std::vector<AggregateRow> finals;
};

inline std::vector<SweepCell> run_sweep(const ExperimentConfig& cfg, SweepAxis axis,
                                        const std::vector<double>& values) {
    if (values.empty()) throw ConfigError("sweep.values", "need at least one value");
    std::vector<SweepCell> cells;
    cells.reserve(values.size());
    for (double v : values)
        cells.push_back({v, run_final_aggregates(apply_axis(cfg, axis, v))});
    return cells;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot open " + path + " for writing");
    out << "axis_value,task,metric,final_value\n";
    for (const SweepCell& c : cells)
        for (const AggregateRow& r : c.finals)
            out << format_double(c.axis_value) << ',' << r.task << ',' << r.metric << ','
                << format_double(r.mean) << '\n';
}

// Sweep command: one full in-memory run per axis value, results to sweep.csv.
inline std::string command_sweep(const ExperimentConfig& cfg, SweepAxis axis,
                                 const std::vector<double>& values) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.output.dir);
    const std::string path = (fs::path(cfg.output.dir) / "sweep.csv").string();
    write_sweep_csv(path, run_sweep(cfg, axis, values));
    return path;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationVariant {
    std::string name;
    ExperimentConfig cfg;
};

// The full pipeline plus four single-component removals:
//   no_retrieval  — retrieval returns the bank-wide mean row instead of top-k
//   no_attention  — cross-attention fusion replaced by feature modulation
//   no_prompt     — prefix/suffix prompting replaced by plain projection
//   no_alignment  — spectral alignment penalty weight set to zero
inline std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base) {
    std::vector<AblationVariant> v;
    v.push_back({"full", base});
    {
        ExperimentConfig c = base;
        c.fed.round.retrieval = RetrievalMode::global_mean;
        v.push_back({"no_retrieval", std::move(c)});
    }
    {
        ExperimentConfig c = base;
        c.fed.fusion.kind = FusionKind::film;
        v.push_back({"no_attention", std::move(c)});
    }
    {
        ExperimentConfig c = base;
        c.fed.fusion.kind = FusionKind::projection;
        v.push_back({"no_prompt", std::move(c)});
    }
    {
        ExperimentConfig c = base;
        c.fed.round.lambda_align = 0.0;
        v.push_back({"no_alignment", std::move(c)});
    }
    return v;
}

struct AblationResult {
    std::string variant;
    std::vector<AggregateRow> finals;
};

inline std::vector<AblationResult> run_ablation(const ExperimentConfig& cfg) {
    std::vector<AblationResult> out;
    for (AblationVariant& var : ablation_variants(cfg))
        out.push_back({var.name, run_final_aggregates(var.cfg)});
    return out;
}

inline void write_ablation_csv(const std::string& path,
                               const std::vector<AblationResult>& results) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot open " + path + " for writing");
    out << "variant,task,metric,final_value\n";
    for (const AblationResult& res : results)
        for (const AggregateRow& r : res.finals)
            out << res.variant << ',' << r.task << ',' << r.metric << ','
                << format_double(r.mean) << '\n';
}

inline std::string command_ablate(const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.output.dir);
    const std::string path = (fs::path(cfg.output.dir) / "ablation.csv").string();
    write_ablation_csv(path, run_ablation(cfg));
    return path;
}

// ---------------------------------------------------------------------------
// spectrum-probe
// ---------------------------------------------------------------------------

struct ProbeRow {
    int pair = 0;
    bool same_modality = false;
    double full_distance = 0.0;
    double lowpass_distance = 0.0;
    double ratio = 0.0;
};

struct ProbeReport {
    std::vector<ProbeRow> rows;
    double mean_cross_ratio = 0.0;  // over cross-modality pairs only
    std::string csv_path;
};

namespace probedetail {

// Root sum of squared magnitude-spectrum differences, full and low-pass.
inline std::pair<double, double> spectrum_distances(const Image& a, const Image& b,
                                                    double cutoff) {
    Spectrum sa = magnitude_spectrum(a);
    Spectrum sb = magnitude_spectrum(b);
    double full = 0.0, masked = 0.0;
    for (int c = 0; c < sa.channels; ++c)
        for (int y = 0; y < sa.height; ++y)
            for (int x = 0; x < sa.width; ++x) {
                const double d = sa.at(y, x, c) - sb.at(y, x, c);
                full += d * d;
                if (radial_norm(y, x, sa.height, sa.width) <= cutoff) masked += d * d;
            }
    return {std::sqrt(full), std::sqrt(masked)};
}

inline void write_spectrum_pgm(const std::string& path, const Image& img) {
    Spectrum s = magnitude_spectrum(img);
    Image vis(s.height, s.width, 1);
    double maxv = 0.0;
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const double v = std::log1p(s.at(y, x, 0));
            vis.at(y, x) = v;
            maxv = std::max(maxv, v);
        }
    write_pgm(path, vis, 0.0, maxv > 0.0 ? maxv : 1.0);
}

}  // namespace probedetail

// Renders each probe scene under two modalities and measures how much of the
// spectral difference lives below the tokenizer cutoff. Cross-modality pairs
// use modalities (i % M, (i+1) % M); with include_same an extra batch of
// same-modality pairs (two independent noise draws) is appended as a control.
inline ProbeReport command_spectrum_probe(const ExperimentConfig& cfg, int pairs,
                                          bool include_same) {
    namespace fs = std::filesystem;
    if (pairs < 0) throw ConfigError("probe.pairs", "must be >= 0");
    const int M = cfg.data.num_modalities;
    if (pairs > 0 && M < 2)
        throw ConfigError("data.modalities", "spectrum probe needs at least two modalities");
    fs::create_directories(cfg.output.dir);

    ProbeReport report;
    report.csv_path = (fs::path(cfg.output.dir) / "spectrum.csv").string();
    std::ofstream out(report.csv_path, std::ios::binary);
    if (!out) throw ContractError("cannot open " + report.csv_path + " for writing");
    out << "pair,same_modality,full_distance,lowpass_distance,ratio\n";
    if (pairs == 0) return report;

    DataConfig dc = cfg.data;
    dc.num_samples = pairs;
    std::vector<SceneSpec> scenes = make_scene_specs(dc, cfg.fed.round.seed);
    auto modalities = default_modalities(M);
    const double cutoff = cfg.fed.tokenizer.cutoff_radius;

    double cross_sum = 0.0;
    int next_id = 0;
    auto emit = [&](const SceneSpec& scene, int ma, int mb, bool same) {
        const int id = next_id++;
        auto ga = make_stream(cfg.fed.round.seed, "probe",
                              {static_cast<std::uint64_t>(id), 0});
        auto gb = make_stream(cfg.fed.round.seed, "probe",
                              {static_cast<std::uint64_t>(id), 1});
        Image ia = generate_sample_image(scene, modalities[ma], dc.height, dc.width, ga);
        Image ib = generate_sample_image(scene, modalities[mb], dc.height, dc.width, gb);
        auto [full, low] = probedetail::spectrum_distances(ia, ib, cutoff);
        const double ratio = full > 0.0 ? low / full : 0.0;
        report.rows.push_back({id, same, full, low, ratio});
        out << id << ',' << (same ? 1 : 0) << ',' << format_double(full) << ','
            << format_double(low) << ',' << format_double(ratio) << '\n';
        char name[64];
        std::snprintf(name, sizeof(name), "spectrum_pair%03d_a.pgm", id);
        probedetail::write_spectrum_pgm((fs::path(cfg.output.dir) / name).string(), ia);
        std::snprintf(name, sizeof(name), "spectrum_pair%03d_b.pgm", id);
        probedetail::write_spectrum_pgm((fs::path(cfg.output.dir) / name).string(), ib);
        if (!same) cross_sum += ratio;
    };

    for (int i = 0; i < pairs; ++i)
        emit(scenes[static_cast<std::size_t>(i)], i % M, (i + 1) % M, false);
    if (include_same)
        for (int i = 0; i < pairs; ++i)
            emit(scenes[static_cast<std::size_t>(i)], i % M, i % M, true);

    report.mean_cross_ratio = cross_sum / static_cast<double>(pairs);
    return report;
}

}  // namespace specfed
