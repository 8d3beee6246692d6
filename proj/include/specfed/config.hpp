#pragma once

// JSON experiment configuration: one document with `data`, `model`,
// `federation`, and `output` sections. Parsing validates presence and types
// up front and reports problems by dotted key path, so a bad file fails
// before any work starts.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "specfed/error.hpp"
#include "specfed/federation.hpp"
#include "specfed/fusion.hpp"
#include "specfed/models.hpp"
#include "specfed/rng.hpp"
#include "specfed/spectral.hpp"
#include "specfed/synthdata.hpp"

namespace specfed {

enum class PartitionKind { dirichlet, modality_disjoint, modality_overlapping };

inline PartitionKind partition_from_string(const std::string& s) {
    if (s == "dirichlet") return PartitionKind::dirichlet;
    if (s == "modality_disjoint") return PartitionKind::modality_disjoint;
    if (s == "modality_overlapping") return PartitionKind::modality_overlapping;
    throw ConfigError("data.partition", "unknown partition scheme '" + s + "'");
}

inline PrefixMode prefix_mode_from_string(const std::string& s) {
    if (s == "pooled") return PrefixMode::pooled;
    if (s == "full") return PrefixMode::full;
    throw ConfigError("model.prefix", "unknown prefix mode '" + s + "'");
}

struct OutputConfig {
    std::string dir = ".";
    bool dir_set = false;  // true when the config file names a directory
    std::string checkpoint = "checkpoint.bin";  // empty disables checkpointing
    bool curves = true;
    bool resume = false;
};

struct ExperimentConfig {
    DataConfig data;
    PartitionKind partition = PartitionKind::dirichlet;
    double gamma = 0.5;
    double overlap_fraction = 0.5;
    TaskKind task = TaskKind::classification;
    int rounds = 10;
    FederationConfig fed;
    OutputConfig output;
};

namespace cfgdetail {

using json = nlohmann::json;

inline const json& section(const json& root, const char* name) {
    auto it = root.find(name);
    if (it == root.end()) throw ConfigError(name, "missing section");
    if (!it->is_object()) throw ConfigError(name, "must be an object");
    return *it;
}

inline std::string path_of(const std::string& sec, const char* key) { return sec + "." + key; }

inline const json* lookup(const json& sec, const std::string& secname, const char* key,
                          bool required) {
    auto it = sec.find(key);
    if (it == sec.end()) {
        if (required) throw ConfigError(path_of(secname, key), "missing required key");
        return nullptr;
    }
    return &*it;
}

inline int as_int(const json& v, const std::string& path) {
    if (!v.is_number_integer())
        throw ConfigError(path, "expected an integer");
    return v.get<int>();
}

inline double as_num(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    return v.get<double>();
}

inline bool as_bool(const json& v, const std::string& path) {
    if (!v.is_boolean()) throw ConfigError(path, "expected a boolean");
    return v.get<bool>();
}

inline std::string as_str(const json& v, const std::string& path) {
    if (!v.is_string()) throw ConfigError(path, "expected a string");
    return v.get<std::string>();
}

inline int req_int(const json& s, const std::string& sec, const char* key) {
    return as_int(*lookup(s, sec, key, true), path_of(sec, key));
}
inline double req_num(const json& s, const std::string& sec, const char* key) {
    return as_num(*lookup(s, sec, key, true), path_of(sec, key));
}
inline int opt_int(const json& s, const std::string& sec, const char* key, int dflt) {
    const json* v = lookup(s, sec, key, false);
    return v ? as_int(*v, path_of(sec, key)) : dflt;
}
inline double opt_num(const json& s, const std::string& sec, const char* key, double dflt) {
    const json* v = lookup(s, sec, key, false);
    return v ? as_num(*v, path_of(sec, key)) : dflt;
}
inline bool opt_bool(const json& s, const std::string& sec, const char* key, bool dflt) {
    const json* v = lookup(s, sec, key, false);
    return v ? as_bool(*v, path_of(sec, key)) : dflt;
}
inline std::string opt_str(const json& s, const std::string& sec, const char* key,
                           const std::string& dflt) {
    const json* v = lookup(s, sec, key, false);
    return v ? as_str(*v, path_of(sec, key)) : dflt;
}

}  // namespace cfgdetail

inline ExperimentConfig parse_config(const nlohmann::json& root) {
    using namespace cfgdetail;
    if (!root.is_object()) throw ConfigError("config", "top level must be a JSON object");
    ExperimentConfig out;

    const json& data = section(root, "data");
    out.data.height = req_int(data, "data", "height");
    out.data.width = req_int(data, "data", "width");
    out.data.num_classes = req_int(data, "data", "classes");
    out.data.num_modalities = req_int(data, "data", "modalities");
    out.data.num_samples = req_int(data, "data", "samples");
    out.data.sr_scale = opt_int(data, "data", "sr_scale", 2);
    out.data.mask_threshold = opt_num(data, "data", "mask_threshold", 0.3);
    out.partition = partition_from_string(opt_str(data, "data", "partition", "dirichlet"));
    out.gamma = opt_num(data, "data", "gamma", 0.5);
    out.overlap_fraction = opt_num(data, "data", "overlap_fraction", 0.5);
    if (out.data.height < 1 || out.data.width < 1)
        throw ConfigError("data.height", "image size must be positive");
    if (out.data.num_classes < 2) throw ConfigError("data.classes", "need at least two classes");
    if (out.data.num_modalities < 1)
        throw ConfigError("data.modalities", "need at least one modality");
    if (out.data.num_samples < 1) throw ConfigError("data.samples", "need at least one sample");
    if (out.data.sr_scale < 1) throw ConfigError("data.sr_scale", "must be >= 1");

    const json& model = section(root, "model");
    const int token_dim = req_int(model, "model", "token_dim");
    const int patch = req_int(model, "model", "patch_size");
    out.fed.tokenizer.cutoff_radius = req_num(model, "model", "cutoff_radius");
    out.fed.tokenizer.bands = req_int(model, "model", "bands");
    out.fed.tokenizer.sectors = req_int(model, "model", "sectors");
    out.fed.tokenizer.hidden = opt_int(model, "model", "hidden", 64);
    out.fed.tokenizer.token_dim = token_dim;
    out.fed.tokenizer.channels = opt_int(model, "model", "channels", 1);
    out.fed.backbone.patch_size = patch;
    out.fed.backbone.depth = req_int(model, "model", "depth");
    out.fed.backbone.token_dim = token_dim;
    out.fed.backbone.channels = out.fed.tokenizer.channels;
    out.fed.backbone.mlp_hidden = opt_int(model, "model", "mlp_hidden", 0);
    out.fed.fusion.token_dim = token_dim;
    out.fed.fusion.head_dim = opt_int(model, "model", "head_dim", token_dim);
    out.fed.fusion.suffix_count = opt_int(model, "model", "suffix_count", 2);
    out.fed.fusion.prefix_mode =
        prefix_mode_from_string(opt_str(model, "model", "prefix", "pooled"));
    out.fed.fusion.kind = fusion_kind_from_string(opt_str(model, "model", "fusion", "full"));
    out.task = task_kind_from_string(opt_str(model, "model", "task", "classification"));

    const json& fede = section(root, "federation");
    out.fed.num_clients = req_int(fede, "federation", "clients");
    out.rounds = req_int(fede, "federation", "rounds");
    if (out.rounds < 1) throw ConfigError("federation.rounds", "must be >= 1");
    out.fed.round.participation_ratio = req_num(fede, "federation", "participation");
    out.fed.round.local_epochs = req_int(fede, "federation", "epochs");
    out.fed.round.lr = req_num(fede, "federation", "lr");
    out.fed.round.lambda_align = req_num(fede, "federation", "lambda");
    out.fed.round.top_k = req_int(fede, "federation", "top_k");
    out.fed.round.batch_size = req_int(fede, "federation", "batch_size");
    out.fed.round.prune_window = opt_int(fede, "federation", "prune_window", 5);
    out.fed.round.workers = opt_int(fede, "federation", "workers", 1);
    out.fed.round.retrieval =
        retrieval_mode_from_string(opt_str(fede, "federation", "retrieval", "top_k"));
    {
        const json* v = lookup(fede, "federation", "seed", false);
        out.fed.round.seed =
            v ? static_cast<std::uint64_t>(as_num(*v, "federation.seed")) : 0;
    }
    out.fed.bank.rho = opt_num(fede, "federation", "rho", 1.0);
    out.fed.bank.delta = opt_num(fede, "federation", "delta", 0.05);
    out.fed.bank.max_size =
        static_cast<std::size_t>(opt_int(fede, "federation", "max_size", 512));
    validate(out.fed.round);

    if (root.contains("output")) {
        const json& o = section(root, "output");
        if (const json* d = lookup(o, "output", "dir", false)) {
            out.output.dir = as_str(*d, "output.dir");
            out.output.dir_set = true;
        }
        out.output.checkpoint = opt_str(o, "output", "checkpoint", "checkpoint.bin");
        out.output.curves = opt_bool(o, "output", "curves", true);
        out.output.resume = opt_bool(o, "output", "resume", false);
    }

    // Head geometry follows from data and model sections.
    out.fed.round.top_k = std::max(1, out.fed.round.top_k);
    return out;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open '" + path + "'");
    nlohmann::json root;
    try {
        in >> root;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(root);
}

inline HeadConfig head_config_of(const ExperimentConfig& cfg) {
    HeadConfig h;
    h.kind = cfg.task;
    h.token_dim = cfg.fed.backbone.token_dim;
    h.num_classes = cfg.data.num_classes;
    h.height = cfg.data.height;
    h.width = cfg.data.width;
    h.patch_size = cfg.fed.backbone.patch_size;
    h.sr_scale = cfg.data.sr_scale;
    return h;
}

// Stable fingerprint of everything that shapes the trajectory of a run.
// Round count, worker count, and output paths are deliberately excluded:
// resuming may extend rounds, and worker count never changes results.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
    std::ostringstream s;
    s.precision(17);
    s << "data:" << c.data.height << ',' << c.data.width << ',' << c.data.num_classes << ','
      << c.data.num_modalities << ',' << c.data.num_samples << ',' << c.data.sr_scale << ','
      << c.data.mask_threshold << ',' << static_cast<int>(c.partition) << ',' << c.gamma << ','
      << c.overlap_fraction << ";model:" << c.fed.tokenizer.cutoff_radius << ','
      << c.fed.tokenizer.bands << ',' << c.fed.tokenizer.sectors << ',' << c.fed.tokenizer.hidden
      << ',' << c.fed.tokenizer.token_dim << ',' << c.fed.tokenizer.channels << ','
      << c.fed.backbone.patch_size << ',' << c.fed.backbone.depth << ','
      << c.fed.backbone.mlp_hidden << ',' << c.fed.fusion.head_dim << ','
      << c.fed.fusion.suffix_count << ',' << static_cast<int>(c.fed.fusion.prefix_mode) << ','
      << static_cast<int>(c.fed.fusion.kind) << ',' << static_cast<int>(c.task)
      << ";federation:" << c.fed.num_clients << ',' << c.fed.round.participation_ratio << ','
      << c.fed.round.local_epochs << ',' << c.fed.round.lr << ',' << c.fed.round.lambda_align
      << ',' << c.fed.round.top_k << ',' << c.fed.round.batch_size << ','
      << c.fed.round.prune_window << ',' << static_cast<int>(c.fed.round.retrieval) << ','
      << c.fed.round.seed << ',' << c.fed.bank.rho << ',' << c.fed.bank.delta << ','
      << c.fed.bank.max_size;
    return hash_tag(s.str());
}

}  // namespace specfed
