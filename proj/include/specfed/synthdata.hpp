#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "specfed/error.hpp"
#include "specfed/image.hpp"
#include "specfed/rng.hpp"

namespace specfed {

// ---------------------------------------------------------------------------
// Scene and modality specifications
//
// A scene is a sum of Gaussian blobs: smooth, hence spectrally low-pass by
// construction. A modality overlays an oriented sinusoidal carrier whose
// frequency sits at or above half Nyquist, plus a monotone per-pixel gamma
// curve and pixel noise. Two renderings of one scene therefore differ only in
// high-frequency content and a monotone intensity mapping, which is exactly
// the structure the low-pass probes are meant to detect.
// ---------------------------------------------------------------------------

struct Blob {
    double cy = 0.5, cx = 0.5;  // center, normalized [0,1] coordinates
    double sigma = 0.12;        // width, normalized
    double intensity = 0.9;
};

struct ModalitySpec {
    int modality_id = 0;
    double carrier_freq_frac = 0.55;  // fraction of Nyquist; kept >= 0.5
    double orientation = 0.0;         // radians
    double amplitude = 0.12;
    double phase = 0.0;
    double noise_scale = 0.015;
    // Monotone intensity transfer v -> lift + span * v^gamma. The default
    // modalities use lift/span headroom so the carrier rarely clips; clipping
    // would scatter cross terms back into the low band.
    double gamma = 1.0;
    double lift = 0.0;
    double span = 1.0;
};

struct SceneSpec {
    int class_id = 0;
    std::vector<Blob> blobs;
    std::vector<double> mask;  // H*W binary ground truth at base resolution
    Image hr_reference;        // clean render at sr_scale times base resolution
};

struct DataConfig {
    int height = 32;
    int width = 32;
    int num_classes = 4;
    int num_modalities = 3;
    int num_samples = 2000;
    int sr_scale = 2;
    double mask_threshold = 0.3;
};

// Continuous blob field evaluated at a normalized point, clamped to [0,1].
inline double blob_field(const std::vector<Blob>& blobs, double ny, double nx) {
    double v = 0.0;
    for (const Blob& b : blobs) {
        const double dy = ny - b.cy, dx = nx - b.cx;
        v += b.intensity * std::exp(-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma));
    }
    return std::min(1.0, v);
}

inline Image render_scene(const std::vector<Blob>& blobs, int H, int W) {
    Image img(H, W, 1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            img.at(y, x) = blob_field(blobs, (y + 0.5) / H, (x + 0.5) / W);
    return img;
}

// Class layouts: blob count cycles 2..4 with the class index and the ring of
// centers is phase-rotated per class, so every class id owns a distinct
// low-frequency signature. Jitter keeps samples within a class varied.
inline SceneSpec make_scene(int class_id, int num_classes, const DataConfig& cfg,
                            std::mt19937_64& rng) {
    if (class_id < 0 || class_id >= num_classes)
        throw ContractError("make_scene: class id out of range");
    SceneSpec scene;
    scene.class_id = class_id;
    const int count = 2 + class_id % 3;
    const double ring_phase = 2.0 * std::numbers::pi * class_id / num_classes;
    for (int i = 0; i < count; ++i) {
        const double ang = ring_phase + 2.0 * std::numbers::pi * i / count;
        Blob b;
        b.cy = 0.5 + 0.22 * std::sin(ang) + uniform(rng, -0.04, 0.04);
        b.cx = 0.5 + 0.22 * std::cos(ang) + uniform(rng, -0.04, 0.04);
        b.sigma = uniform(rng, 0.10, 0.15);
        b.intensity = uniform(rng, 0.75, 1.0);
        scene.blobs.push_back(b);
    }
    Image base = render_scene(scene.blobs, cfg.height, cfg.width);
    scene.mask.resize(base.data.size());
    for (std::size_t i = 0; i < base.data.size(); ++i)
        scene.mask[i] = base.data[i] > cfg.mask_threshold ? 1.0 : 0.0;
    scene.hr_reference = render_scene(scene.blobs, cfg.height * cfg.sr_scale, cfg.width * cfg.sr_scale);
    return scene;
}

inline std::vector<ModalitySpec> default_modalities(int count) {
    if (count < 1) throw ConfigError("data.modalities", "need at least one modality");
    std::vector<ModalitySpec> out;
    const double gammas[3] = {0.95, 1.0, 1.08};
    for (int m = 0; m < count; ++m) {
        ModalitySpec spec;
        spec.modality_id = m;
        spec.carrier_freq_frac = count > 1 ? 0.55 + 0.35 * m / (count - 1) : 0.7;
        spec.orientation = std::numbers::pi * (m + 0.5) / count;
        spec.amplitude = 0.10;
        spec.phase = 0.7 * m;
        spec.noise_scale = 0.012;
        spec.gamma = gammas[m % 3];
        spec.lift = 0.14;
        spec.span = 0.72;
        out.push_back(spec);
    }
    return out;
}

inline double intensity_transfer(double v, const ModalitySpec& m) {
    const double base = m.gamma == 1.0 ? v : std::pow(std::clamp(v, 0.0, 1.0), m.gamma);
    return m.lift + m.span * base;
}

inline Image generate_sample_image(const SceneSpec& scene, const ModalitySpec& modality, int H,
                                   int W, std::mt19937_64& rng) {
    Image img(H, W, 1);
    const double cpp = modality.carrier_freq_frac * 0.5;  // cycles per pixel
    const double ky = std::sin(modality.orientation) * cpp * 2.0 * std::numbers::pi;
    const double kx = std::cos(modality.orientation) * cpp * 2.0 * std::numbers::pi;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double v = intensity_transfer(blob_field(scene.blobs, (y + 0.5) / H, (x + 0.5) / W),
                                          modality);
            v += modality.amplitude * std::sin(ky * y + kx * x + modality.phase);
            if (modality.noise_scale > 0.0) v += gaussian(rng, 0.0, modality.noise_scale);
            img.at(y, x) = std::clamp(v, 0.0, 1.0);
        }
    return img;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct Sample {
    Image image;               // modality rendering, base resolution
    int class_id = 0;
    std::vector<double> mask;  // binary, base resolution
    Image hr;                  // clean high-resolution reference
    int modality_id = 0;
    int scene_index = 0;
};

struct Dataset {
    DataConfig config;
    std::vector<Sample> samples;
};

inline std::vector<SceneSpec> make_scene_specs(const DataConfig& cfg, std::uint64_t seed) {
    if (cfg.num_samples < 1) throw ConfigError("data.samples", "need at least one sample");
    if (cfg.num_classes < 1) throw ConfigError("data.classes", "need at least one class");
    std::vector<SceneSpec> scenes;
    scenes.reserve(cfg.num_samples);
    for (int i = 0; i < cfg.num_samples; ++i) {
        auto g = make_stream(seed, "scene", {static_cast<std::uint64_t>(i)});
        scenes.push_back(make_scene(i % cfg.num_classes, cfg.num_classes, cfg, g));
    }
    return scenes;
}

// Renders scene i under modality assignment[i]. Per-sample counter-based
// noise streams make generation order-independent and parallel-safe.
inline Dataset render_dataset(const DataConfig& cfg, const std::vector<SceneSpec>& scenes,
                              const std::vector<ModalitySpec>& modalities,
                              const std::vector<int>& assignment, std::uint64_t seed) {
    if (assignment.size() != scenes.size())
        throw ContractError("render_dataset: one modality assignment per scene required");
    Dataset ds;
    ds.config = cfg;
    ds.samples.reserve(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        const int m = assignment[i];
        if (m < 0 || m >= static_cast<int>(modalities.size()))
            throw ContractError("render_dataset: modality id out of range");
        auto g = make_stream(seed, "noise", {static_cast<std::uint64_t>(i)});
        Sample s;
        s.image = generate_sample_image(scenes[i], modalities[m], cfg.height, cfg.width, g);
        s.class_id = scenes[i].class_id;
        s.mask = scenes[i].mask;
        s.hr = scenes[i].hr_reference;
        s.modality_id = m;
        s.scene_index = static_cast<int>(i);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

inline Dataset make_dataset(const DataConfig& cfg, std::uint64_t seed) {
    std::vector<SceneSpec> scenes = make_scene_specs(cfg, seed);
    std::vector<ModalitySpec> modalities = default_modalities(cfg.num_modalities);
    std::vector<int> assignment(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i)
        assignment[i] = static_cast<int>((i / cfg.num_classes) % cfg.num_modalities);
    return render_dataset(cfg, scenes, modalities, assignment, seed);
}

// ---------------------------------------------------------------------------
// Partitioners
// ---------------------------------------------------------------------------

// Class-skewed shards: per class, a proportion vector drawn from
// Dirichlet(gamma * 1_K) splits that class's samples (listed class-major)
// across clients via largest-remainder rounding. If a draw leaves any client
// entirely empty the whole draw is retried a bounded number of times, after
// which a deterministic round-robin fix-up moves single samples from the
// largest shards to the empty clients.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(
    const std::vector<std::size_t>& num_samples_per_class, std::size_t K, double gamma,
    std::mt19937_64& rng) {
    if (K < 1) throw ConfigError("federation.clients", "need at least one client");
    if (!(gamma > 0.0)) throw ConfigError("data.gamma", "Dirichlet gamma must be positive");
    std::size_t total = 0;
    for (std::size_t n : num_samples_per_class) total += n;
    if (total < K)
        throw ConfigError("data.samples", "cannot give every client a sample: " +
                                              std::to_string(total) + " samples for " +
                                              std::to_string(K) + " clients");

    std::gamma_distribution<double> gd(gamma, 1.0);
    auto draw_counts = [&](std::size_t n) {
        std::vector<double> p(K);
        double sum = 0.0;
        for (double& v : p) {
            v = std::max(gd(rng), 1e-300);
            sum += v;
        }
        for (double& v : p) v /= sum;
        // Largest-remainder rounding to integer counts summing to n.
        std::vector<std::size_t> counts(K);
        std::vector<std::pair<double, std::size_t>> rem(K);
        std::size_t assigned = 0;
        for (std::size_t k = 0; k < K; ++k) {
            const double exact = p[k] * static_cast<double>(n);
            counts[k] = static_cast<std::size_t>(std::floor(exact));
            assigned += counts[k];
            rem[k] = {exact - std::floor(exact), k};
        }
        std::stable_sort(rem.begin(), rem.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (std::size_t i = 0; assigned < n; ++i, ++assigned) counts[rem[i % K].second] += 1;
        return counts;
    };

    const int max_retries = 25;
    std::vector<std::vector<std::size_t>> shards;
    for (int attempt = 0; attempt < max_retries; ++attempt) {
        shards.assign(K, {});
        std::size_t offset = 0;
        for (std::size_t n : num_samples_per_class) {
            std::vector<std::size_t> counts = draw_counts(n);
            std::size_t pos = offset;
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t j = 0; j < counts[k]; ++j) shards[k].push_back(pos++);
            offset += n;
        }
        bool all_covered = true;
        for (const auto& s : shards) all_covered = all_covered && !s.empty();
        if (all_covered) return shards;
    }
    // Deterministic fix-up: hand one sample from the currently largest shard
    // to each empty client in ascending client order.
    for (std::size_t k = 0; k < K; ++k) {
        if (!shards[k].empty()) continue;
        std::size_t donor = 0;
        for (std::size_t j = 1; j < K; ++j)
            if (shards[j].size() > shards[donor].size()) donor = j;
        shards[k].push_back(shards[donor].back());
        shards[donor].pop_back();
    }
    for (auto& s : shards) std::sort(s.begin(), s.end());
    return shards;
}

enum class ModalityPartitionMode { disjoint, overlapping };

// Modality-skewed shards. Disjoint: modality m belongs wholly to client
// m mod K, so per-client modality sets never intersect. Overlapping: the
// leading `overlap_fraction` of each modality's samples spill to the next
// client, so adjacent clients share a modality while the sample multiset is
// preserved (samples are moved, never copied).
inline std::vector<std::vector<std::size_t>> modality_partition(
    const std::vector<int>& sample_modalities, std::size_t K, ModalityPartitionMode mode,
    double overlap_fraction = 0.5) {
    if (K < 1) throw ConfigError("federation.clients", "need at least one client");
    int num_modalities = 0;
    for (int m : sample_modalities) num_modalities = std::max(num_modalities, m + 1);
    if (mode == ModalityPartitionMode::disjoint && static_cast<std::size_t>(num_modalities) < K)
        throw ConfigError("data.partition", "disjoint modality partition needs at least as many "
                                            "modalities as clients, have " +
                                                std::to_string(num_modalities) + " for " +
                                                std::to_string(K));
    if (mode == ModalityPartitionMode::overlapping &&
        (overlap_fraction < 0.0 || overlap_fraction > 1.0))
        throw ConfigError("data.overlap_fraction", "overlap fraction must lie in [0, 1]");

    std::vector<std::vector<std::size_t>> by_modality(num_modalities);
    for (std::size_t i = 0; i < sample_modalities.size(); ++i)
        by_modality[sample_modalities[i]].push_back(i);

    std::vector<std::vector<std::size_t>> shards(K);
    for (int m = 0; m < num_modalities; ++m) {
        const std::size_t primary = static_cast<std::size_t>(m) % K;
        const auto& ids = by_modality[m];
        std::size_t spill = 0;
        if (mode == ModalityPartitionMode::overlapping && K > 1)
            spill = static_cast<std::size_t>(std::ceil(overlap_fraction * ids.size()));
        for (std::size_t j = 0; j < ids.size(); ++j) {
            const std::size_t target = j < spill ? (primary + 1) % K : primary;
            shards[target].push_back(ids[j]);
        }
    }
    for (auto& s : shards) std::sort(s.begin(), s.end());
    return shards;
}

// ---------------------------------------------------------------------------
// Binary dataset container
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void put(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
inline void put_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}
inline void get_doubles(std::ifstream& in, std::vector<double>& v) {
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}
}  // namespace detail

inline void write_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write("SFDS", 4);
    detail::put<std::uint32_t>(out, 1);  // container version
    detail::put<std::int32_t>(out, ds.config.height);
    detail::put<std::int32_t>(out, ds.config.width);
    detail::put<std::int32_t>(out, ds.config.num_classes);
    detail::put<std::int32_t>(out, ds.config.num_modalities);
    detail::put<std::int32_t>(out, static_cast<std::int32_t>(ds.samples.size()));
    detail::put<std::int32_t>(out, ds.config.sr_scale);
    detail::put<double>(out, ds.config.mask_threshold);
    for (const Sample& s : ds.samples) {
        detail::put<std::int32_t>(out, s.class_id);
        detail::put<std::int32_t>(out, s.modality_id);
        detail::put<std::int32_t>(out, s.scene_index);
        detail::put_doubles(out, s.image.data);
        detail::put_doubles(out, s.mask);
        detail::put_doubles(out, s.hr.data);
    }
    if (!out) throw std::runtime_error("short write to " + path);
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SFDS", 4) != 0)
        throw std::runtime_error(path + " is not a dataset container");
    const auto version = detail::get<std::uint32_t>(in);
    if (version != 1)
        throw std::runtime_error("unsupported dataset container version " + std::to_string(version));
    Dataset ds;
    ds.config.height = detail::get<std::int32_t>(in);
    ds.config.width = detail::get<std::int32_t>(in);
    ds.config.num_classes = detail::get<std::int32_t>(in);
    ds.config.num_modalities = detail::get<std::int32_t>(in);
    const int n = detail::get<std::int32_t>(in);
    ds.config.num_samples = n;
    ds.config.sr_scale = detail::get<std::int32_t>(in);
    ds.config.mask_threshold = detail::get<double>(in);
    ds.samples.resize(n);
    for (Sample& s : ds.samples) {
        s.class_id = detail::get<std::int32_t>(in);
        s.modality_id = detail::get<std::int32_t>(in);
        s.scene_index = detail::get<std::int32_t>(in);
        s.image = Image(ds.config.height, ds.config.width, 1);
        detail::get_doubles(in, s.image.data);
        s.mask.resize(s.image.data.size());
        detail::get_doubles(in, s.mask);
        s.hr = Image(ds.config.height * ds.config.sr_scale, ds.config.width * ds.config.sr_scale, 1);
        detail::get_doubles(in, s.hr.data);
    }
    if (!in) throw std::runtime_error("truncated dataset container " + path);
    return ds;
}

}  // namespace specfed
