#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "specfed/error.hpp"
#include "specfed/image.hpp"
#include "specfed/tensor.hpp"

namespace specfed {

// ---------------------------------------------------------------------------
// FFT: unnormalized forward DFT, arbitrary sizes (radix-2 when possible,
// Bluestein's chirp-z otherwise). Inverse applies the 1/N factor.
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_pow2(std::size_t n) { return n && (n & (n - 1)) == 0; }

inline void fft_pow2(std::vector<std::complex<double>>& a, bool invert) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = (invert ? 2.0 : -2.0) * std::numbers::pi / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (invert)
        for (auto& x : a) x /= static_cast<double>(n);
}

// Arbitrary-length DFT as a convolution of chirped sequences.
inline void fft_bluestein(std::vector<std::complex<double>>& a, bool invert) {
    const std::size_t n = a.size();
    std::size_t m = 1;
    while (m < 2 * n - 1) m <<= 1;

    // w[j] = exp(sign * i*pi*j^2/n), angle folded mod 2n to stay accurate for large j.
    std::vector<std::complex<double>> w(n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t jsq = (j * j) % (2 * n);
        const double ang = (invert ? 1.0 : -1.0) * std::numbers::pi * static_cast<double>(jsq) /
                           static_cast<double>(n);
        w[j] = {std::cos(ang), std::sin(ang)};
    }
    std::vector<std::complex<double>> u(m, {0.0, 0.0}), v(m, {0.0, 0.0});
    for (std::size_t j = 0; j < n; ++j) u[j] = a[j] * w[j];
    v[0] = std::conj(w[0]);
    for (std::size_t j = 1; j < n; ++j) v[j] = v[m - j] = std::conj(w[j]);
    fft_pow2(u, false);
    fft_pow2(v, false);
    for (std::size_t j = 0; j < m; ++j) u[j] *= v[j];
    fft_pow2(u, true);
    for (std::size_t j = 0; j < n; ++j) a[j] = u[j] * w[j];
    if (invert)
        for (auto& x : a) x /= static_cast<double>(n);
}

inline void fft_1d(std::vector<std::complex<double>>& a, bool invert) {
    if (a.size() <= 1) return;
    if (is_pow2(a.size()))
        fft_pow2(a, invert);
    else
        fft_bluestein(a, invert);
}

}  // namespace detail

using ComplexGrid = std::vector<std::complex<double>>;  // row-major H*W

inline ComplexGrid fft2d_complex(const ComplexGrid& grid, std::size_t H, std::size_t W,
                                 bool invert) {
    if (H < 1 || W < 1) throw ContractError("fft2d: empty grid");
    if (grid.size() != H * W) throw DimensionError("fft2d: grid size does not match H*W");
    ComplexGrid out = grid;
    std::vector<std::complex<double>> line;
    line.resize(W);
    for (std::size_t i = 0; i < H; ++i) {
        std::copy(out.begin() + i * W, out.begin() + (i + 1) * W, line.begin());
        detail::fft_1d(line, invert);
        std::copy(line.begin(), line.end(), out.begin() + i * W);
    }
    line.resize(H);
    for (std::size_t j = 0; j < W; ++j) {
        for (std::size_t i = 0; i < H; ++i) line[i] = out[i * W + j];
        detail::fft_1d(line, invert);
        for (std::size_t i = 0; i < H; ++i) out[i * W + j] = line[i];
    }
    return out;
}

inline ComplexGrid fft2d(const std::vector<double>& image, std::size_t H, std::size_t W) {
    ComplexGrid g(H * W);
    for (std::size_t i = 0; i < H * W; ++i) g[i] = {image[i], 0.0};
    return fft2d_complex(g, H, W, false);
}

inline std::vector<double> ifft2d(const ComplexGrid& spec, std::size_t H, std::size_t W) {
    ComplexGrid g = fft2d_complex(spec, H, W, true);
    std::vector<double> out(H * W);
    for (std::size_t i = 0; i < H * W; ++i) out[i] = g[i].real();
    return out;
}

// ---------------------------------------------------------------------------
// Center-shifted magnitude spectra
// ---------------------------------------------------------------------------

// DC-centered magnitude spectrum. `disc_radius` records the pass band the
// magnitudes have been projected onto (1 = full spectrum); downstream
// partitioning reads it so bands always tile exactly the surviving disc.
struct Spectrum {
    int height = 0;
    int width = 0;
    int channels = 0;
    double disc_radius = 1.0;
    std::vector<double> magnitudes;  // channel planes, row-major

    double& at(int y, int x, int c = 0) {
        return magnitudes[static_cast<std::size_t>(c) * height * width +
                          static_cast<std::size_t>(y) * width + x];
    }
    double at(int y, int x, int c = 0) const {
        return magnitudes[static_cast<std::size_t>(c) * height * width +
                          static_cast<std::size_t>(y) * width + x];
    }
};

// Normalized radial distance of a DC-centered bin from the center, clamped to
// [0,1] so the extreme corner bins (raw distance sqrt(2)) count as Nyquist.
inline double radial_norm(int y, int x, int H, int W) {
    const int cy = H / 2, cx = W / 2;
    const double dy = cy > 0 ? static_cast<double>(y - cy) / cy : 0.0;
    const double dx = cx > 0 ? static_cast<double>(x - cx) / cx : 0.0;
    return std::min(1.0, std::sqrt(dy * dy + dx * dx));
}

inline Spectrum magnitude_spectrum(const Image& img) {
    Spectrum s;
    s.height = img.height;
    s.width = img.width;
    s.channels = img.channels;
    s.disc_radius = 1.0;
    s.magnitudes.resize(static_cast<std::size_t>(img.height) * img.width * img.channels);
    const int H = img.height, W = img.width;
    const int cy = H / 2, cx = W / 2;
    for (int c = 0; c < img.channels; ++c) {
        std::vector<double> plane(static_cast<std::size_t>(H) * W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) plane[static_cast<std::size_t>(y) * W + x] = img.at(y, x, c);
        ComplexGrid f = fft2d(plane, H, W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                s.at((y + cy) % H, (x + cx) % W, c) = std::abs(f[static_cast<std::size_t>(y) * W + x]);
    }
    return s;
}

inline Spectrum lowpass_project(const Spectrum& spec, double cutoff_radius) {
    if (!(cutoff_radius > 0.0) || cutoff_radius > 1.0)
        throw ConfigError("model.cutoff_radius", "cutoff radius must lie in (0, 1], got " +
                                                     std::to_string(cutoff_radius));
    Spectrum out = spec;
    out.disc_radius = std::min(spec.disc_radius, cutoff_radius);
    for (int c = 0; c < spec.channels; ++c)
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x)
                if (radial_norm(y, x, spec.height, spec.width) > cutoff_radius) out.at(y, x, c) = 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// FreqMix: radial-band x angular-sector pooling of log-compressed magnitudes
// ---------------------------------------------------------------------------

// Partitions the spectrum's disc into `bands` concentric shells x `sectors`
// angular wedges and returns band-major per-channel means of log(1+magnitude):
// row p = b*sectors + a, column c = channel. Bins outside the disc are
// excluded; empty cells stay zero.
inline std::vector<double> freqmix(const Spectrum& spec, int bands, int sectors) {
    if (bands < 1 || sectors < 1) throw ContractError("freqmix: bands and sectors must be >= 1");
    const int P = bands * sectors;
    const int C = spec.channels;
    std::vector<double> desc(static_cast<std::size_t>(P) * C, 0.0);
    std::vector<double> count(static_cast<std::size_t>(P), 0.0);
    const int H = spec.height, W = spec.width;
    const int cy = H / 2, cx = W / 2;
    const double two_pi = 2.0 * std::numbers::pi;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double r = radial_norm(y, x, H, W);
            if (r > spec.disc_radius) continue;
            int b = static_cast<int>(std::floor(r / spec.disc_radius * bands));
            b = std::min(b, bands - 1);
            double theta = std::atan2(static_cast<double>(y - cy), static_cast<double>(x - cx));
            if (theta < 0.0) theta += two_pi;
            int a = static_cast<int>(std::floor(theta / two_pi * sectors));
            a = std::min(a, sectors - 1);
            const int p = b * sectors + a;
            count[p] += 1.0;
            for (int c = 0; c < C; ++c)
                desc[static_cast<std::size_t>(p) * C + c] += std::log1p(spec.at(y, x, c));
        }
    for (int p = 0; p < P; ++p)
        if (count[p] > 0.0)
            for (int c = 0; c < C; ++c) desc[static_cast<std::size_t>(p) * C + c] /= count[p];
    return desc;
}

// ---------------------------------------------------------------------------
// Spectral tokenizer
// ---------------------------------------------------------------------------

struct TokenizerConfig {
    double cutoff_radius = 0.25;
    int bands = 4;
    int sectors = 8;
    int channels = 1;
    int hidden = 64;
    int token_dim = 32;
};

// Bank/wire representation of a token: plain values plus provenance.
struct SpectralToken {
    std::vector<double> values;
    int source_client = -1;
    long round = -1;
};

struct TokenizeResult {
    Tensor token;            // 1 x d, unit norm, differentiable through W1/W2
    bool degenerate = false; // all-zero pooled activation was replaced by e1
};

class SpectralTokenizer {
public:
    SpectralTokenizer() = default;

    SpectralTokenizer(const TokenizerConfig& cfg, std::mt19937_64& init_stream) : cfg_(cfg) {
        validate(cfg);
        const std::size_t in = descriptor_dim(cfg);
        const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        W1_ = Tensor::randn({in, static_cast<std::size_t>(cfg.hidden)}, init_stream, s1);
        W2_ = Tensor::randn({static_cast<std::size_t>(cfg.hidden), static_cast<std::size_t>(cfg.token_dim)},
                            init_stream, s2);
    }

    // Per-descriptor MLP input width: the cell's per-channel means plus three
    // fixed coordinates (band-center radius, sector-center angle as cos/sin).
    // The coordinates are load-bearing: ReLU is positively homogeneous, so on
    // nonnegative magnitude features alone every row would map to the same
    // direction scaled by its value, and the normalized pooled token would be
    // identical for all images. Anchoring each row to its cell breaks that
    // homogeneity and lets different spectra produce different tokens.
    static std::size_t descriptor_dim(const TokenizerConfig& cfg) {
        return static_cast<std::size_t>(cfg.channels) + 3;
    }

    static void validate(const TokenizerConfig& cfg) {
        if (cfg.bands < 1 || cfg.sectors < 1)
            throw ConfigError("model.bands", "bands and sectors must be >= 1");
        if (!(cfg.cutoff_radius > 0.0) || cfg.cutoff_radius > 1.0)
            throw ConfigError("model.cutoff_radius", "cutoff radius must lie in (0, 1]");
        if (cfg.channels < 1 || cfg.hidden < 1 || cfg.token_dim < 1)
            throw ConfigError("model.token_dim", "tokenizer dimensions must be positive");
    }

    const TokenizerConfig& config() const { return cfg_; }
    Tensor& W1() { return W1_; }
    Tensor& W2() { return W2_; }
    std::vector<Tensor> params() { return {W1_, W2_}; }

    // Parameter-free front half: spectrum -> low-pass -> descriptor grid, one
    // row per band/sector cell holding [per-channel means, r_center,
    // cos(theta_center), sin(theta_center)]. Constant w.r.t. training, so
    // callers may cache the result per image.
    Tensor descriptors(const Image& img) const {
        if (img.channels != cfg_.channels)
            throw DimensionError("tokenizer expects " + std::to_string(cfg_.channels) +
                                 " channel(s), image has " + std::to_string(img.channels));
        Spectrum spec = lowpass_project(magnitude_spectrum(img), cfg_.cutoff_radius);
        std::vector<double> d = freqmix(spec, cfg_.bands, cfg_.sectors);
        const std::size_t C = static_cast<std::size_t>(cfg_.channels);
        const std::size_t cols = descriptor_dim(cfg_);
        const std::size_t P = static_cast<std::size_t>(cfg_.bands) * cfg_.sectors;
        // Standardize each channel's cell values across the grid (per-image
        // z-score). The raw means share a large common level (overall spectral
        // energy) that would dominate the pooled activation and, after unit
        // normalization, crush the differences between images into
        // near-identical tokens. Standardizing keeps the profile shape — which
        // is what should separate tokens on the sphere — and puts the value
        // features on the same scale as the coordinate features.
        std::vector<double> level(C, 0.0), scale(C, 0.0);
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t c = 0; c < C; ++c) level[c] += d[p * C + c];
        for (std::size_t c = 0; c < C; ++c) level[c] /= static_cast<double>(P);
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t c = 0; c < C; ++c) {
                const double dev = d[p * C + c] - level[c];
                scale[c] += dev * dev;
            }
        for (std::size_t c = 0; c < C; ++c)
            scale[c] = std::sqrt(scale[c] / static_cast<double>(P)) + 1e-12;
        std::vector<double> rows(P * cols);
        const double two_pi = 2.0 * std::numbers::pi;
        for (int b = 0; b < cfg_.bands; ++b)
            for (int a = 0; a < cfg_.sectors; ++a) {
                const std::size_t p = static_cast<std::size_t>(b) * cfg_.sectors + a;
                double* row = rows.data() + p * cols;
                for (std::size_t c = 0; c < C; ++c)
                    row[c] = (d[p * C + c] - level[c]) / scale[c];
                row[C] = (b + 0.5) / cfg_.bands;
                const double theta = two_pi * (a + 0.5) / cfg_.sectors;
                row[C + 1] = std::cos(theta);
                row[C + 2] = std::sin(theta);
            }
        return Tensor({P, cols}, std::move(rows));
    }

    // Differentiable back half: per-descriptor two-layer ReLU MLP, mean pool,
    // unit normalization. An all-zero pooled vector cannot be normalized; it
    // is mapped to the first basis vector and flagged.
    TokenizeResult tokenize_descriptors(const Tensor& desc) const {
        Tensor h = relu(matmul(desc, W1_));
        Tensor t = relu(matmul(h, W2_));
        Tensor pooled = mean_rows(t);
        double norm_sq = 0.0;
        for (double v : pooled.data()) norm_sq += v * v;
        if (norm_sq < 1e-24) {
            std::vector<double> e1(cfg_.token_dim, 0.0);
            e1[0] = 1.0;
            return {Tensor({1, static_cast<std::size_t>(cfg_.token_dim)}, std::move(e1)), true};
        }
        return {l2_normalize(pooled), false};
    }

    TokenizeResult tokenize(const Image& img) const { return tokenize_descriptors(descriptors(img)); }

private:
    TokenizerConfig cfg_;
    Tensor W1_, W2_;
};

inline SpectralToken to_spectral_token(const TokenizeResult& r, int client = -1, long round = -1) {
    return {r.token.data(), client, round};
}

// ---------------------------------------------------------------------------
// Low-pass dominance probe
// ---------------------------------------------------------------------------

// || P_LP(|F(x_i)| - |F(x_j)|) ||_2 / || |F(x_i)| - |F(x_j)| ||_2, in [0,1].
// Identical images give 0 by definition.
inline double spectrum_distance_ratio(const Image& a, const Image& b, double cutoff_radius) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels)
        throw DimensionError("spectrum_distance_ratio: image dimensions differ");
    Spectrum sa = magnitude_spectrum(a);
    Spectrum sb = magnitude_spectrum(b);
    double full = 0.0, masked = 0.0;
    for (int c = 0; c < sa.channels; ++c)
        for (int y = 0; y < sa.height; ++y)
            for (int x = 0; x < sa.width; ++x) {
                const double d = sa.at(y, x, c) - sb.at(y, x, c);
                full += d * d;
                if (radial_norm(y, x, sa.height, sa.width) <= cutoff_radius) masked += d * d;
            }
    if (full == 0.0) return 0.0;
    return std::sqrt(masked / full);
}

}  // namespace specfed
