#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "specfed/spectral.hpp"

using namespace specfed;

namespace {

Image random_image(int H, int W, int C, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    std::mt19937_64 g(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    Image img(H, W, C);
    for (double& v : img.data) v = d(g);
    return img;
}

Spectrum random_spectrum(int H, int W, int C, std::uint64_t seed) {
    std::mt19937_64 g(seed);
    std::uniform_real_distribution<double> d(0.0, 2.0);
    Spectrum s;
    s.height = H;
    s.width = W;
    s.channels = C;
    s.magnitudes.resize(static_cast<std::size_t>(H) * W * C);
    for (double& v : s.magnitudes) v = d(g);
    return s;
}

double rel_l2(const std::vector<double>& got, const std::vector<double>& want) {
    long double num = 0.0L, den = 0.0L;
    for (std::size_t i = 0; i < got.size(); ++i) {
        num += (got[i] - want[i]) * (got[i] - want[i]);
        den += want[i] * want[i];
    }
    return den == 0.0L ? std::sqrt(static_cast<double>(num)) : std::sqrt(static_cast<double>(num / den));
}

// Structurally independent cell binning: assign pixels to cells first, then
// average each cell's member list.
std::vector<double> freqmix_oracle(const Spectrum& s, int B, int A) {
    const int H = s.height, W = s.width, C = s.channels;
    const int cy = H / 2, cx = W / 2;
    std::vector<std::vector<std::pair<int, int>>> members(static_cast<std::size_t>(B) * A);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double dy = cy > 0 ? double(y - cy) / cy : 0.0;
            double dx = cx > 0 ? double(x - cx) / cx : 0.0;
            double r = std::min(1.0, std::hypot(dy, dx));
            if (r > s.disc_radius) continue;
            int b = std::min(B - 1, static_cast<int>(std::floor(r / s.disc_radius * B)));
            double th = std::atan2(double(y - cy), double(x - cx));
            if (th < 0) th += 2.0 * std::numbers::pi;
            int a = std::min(A - 1, static_cast<int>(std::floor(th / (2.0 * std::numbers::pi) * A)));
            members[static_cast<std::size_t>(b) * A + a].push_back({y, x});
        }
    std::vector<double> out(static_cast<std::size_t>(B) * A * C, 0.0);
    for (std::size_t p = 0; p < members.size(); ++p) {
        if (members[p].empty()) continue;
        for (int c = 0; c < C; ++c) {
            long double acc = 0.0L;
            for (auto [y, x] : members[p]) acc += std::log1p(s.at(y, x, c));
            out[p * C + c] = static_cast<double>(acc / members[p].size());
        }
    }
    return out;
}

}  // namespace

TEST_CASE("fft of a constant image puts everything in the DC bin") {
    const double c = 2.75;
    std::vector<double> img(16, c);
    ComplexGrid f = fft2d(img, 4, 4);
    REQUIRE(std::abs(f[0] - std::complex<double>(16.0 * c, 0.0)) < 1e-12);
    for (std::size_t i = 1; i < 16; ++i) REQUIRE(std::abs(f[i]) < 1e-12);
}

TEST_CASE("fft of a unit impulse is flat with magnitude one") {
    std::vector<double> img(5 * 6, 0.0);
    img[0] = 1.0;
    ComplexGrid f = fft2d(img, 5, 6);
    for (const auto& v : f) REQUIRE(std::abs(v) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("fft matches the direct-summation reference on random grids") {
    for (auto [H, W] : std::vector<std::pair<int, int>>{{8, 8}, {6, 5}, {7, 7}, {1, 9}, {12, 10}}) {
        Image img = random_image(H, W, 1, 1000 + H * 100 + W, -1.0, 1.0);
        ComplexGrid got = fft2d(img.data, H, W);
        auto want = oracle::dft2d(img.data, H, W);
        double worst = 0.0;
        for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
        INFO("size " << H << "x" << W << " max bin error " << worst);
        REQUIRE(worst < 1e-9);
    }
}

TEST_CASE("fft roundtrip reconstructs the input within 1e-9 relative") {
    for (auto [H, W] : std::vector<std::pair<int, int>>{{64, 64}, {32, 16}, {5, 6}, {7, 9}, {1, 1}, {3, 1}}) {
        Image img = random_image(H, W, 1, 2000 + H * 100 + W, -2.0, 2.0);
        std::vector<double> back = ifft2d(fft2d(img.data, H, W), H, W);
        REQUIRE(rel_l2(back, img.data) < 1e-9);
    }
}

TEST_CASE("Parseval: spectrum energy equals H*W times image energy") {
    for (auto [H, W] : std::vector<std::pair<int, int>>{{16, 16}, {10, 6}, {9, 9}}) {
        Image img = random_image(H, W, 1, 3000 + H * 100 + W, -1.0, 1.0);
        ComplexGrid f = fft2d(img.data, H, W);
        long double lhs = 0.0L, rhs = 0.0L;
        for (const auto& v : f) lhs += std::norm(v);
        for (double v : img.data) rhs += v * v;
        rhs *= H * W;
        REQUIRE(std::abs(static_cast<double>(lhs - rhs)) < 1e-9 * static_cast<double>(rhs));
    }
}

TEST_CASE("magnitude spectrum of a constant image is a single centered peak") {
    Image img(4, 6, 1);
    img.data.assign(24, 1.5);
    Spectrum s = magnitude_spectrum(img);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 6; ++x) {
            if (y == 2 && x == 3)
                REQUIRE(s.at(y, x) == Catch::Approx(24.0 * 1.5));
            else
                REQUIRE(s.at(y, x) == Catch::Approx(0.0).margin(1e-10));
        }
}

TEST_CASE("magnitude spectrum of a real image is point-symmetric about the center") {
    Image img = random_image(9, 7, 1, 4001);
    Spectrum s = magnitude_spectrum(img);
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 7; ++x)
            REQUIRE(s.at(y, x) == Catch::Approx(s.at(8 - y, 6 - x)).margin(1e-10));
}

TEST_CASE("magnitude spectrum equals shifted |fft| composed by hand") {
    Image img = random_image(8, 6, 2, 4002);
    Spectrum s = magnitude_spectrum(img);
    for (int c = 0; c < 2; ++c) {
        std::vector<double> plane(48);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 6; ++x) plane[y * 6 + x] = img.at(y, x, c);
        ComplexGrid f = fft2d(plane, 8, 6);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 6; ++x)
                REQUIRE(s.at((y + 4) % 8, (x + 3) % 6, c) ==
                        Catch::Approx(std::abs(f[y * 6 + x])).margin(1e-12));
    }
}

TEST_CASE("lowpass at cutoff 1.0 is the identity") {
    Spectrum s = random_spectrum(8, 8, 1, 5001);
    Spectrum out = lowpass_project(s, 1.0);
    REQUIRE(out.magnitudes == s.magnitudes);
    REQUIRE(out.disc_radius == 1.0);
}

TEST_CASE("lowpass in the small-cutoff limit keeps only the center bin") {
    Spectrum s = random_spectrum(5, 5, 1, 5002);
    for (double& v : s.magnitudes) v += 0.5;  // strictly positive everywhere
    Spectrum out = lowpass_project(s, 1e-9);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) {
            if (y == 2 && x == 2)
                REQUIRE(out.at(y, x) == s.at(2, 2));
            else
                REQUIRE(out.at(y, x) == 0.0);
        }
}

TEST_CASE("lowpass is idempotent, never increases magnitudes, validates cutoff") {
    Spectrum s = random_spectrum(16, 12, 2, 5003);
    Spectrum once = lowpass_project(s, 0.4);
    Spectrum twice = lowpass_project(once, 0.4);
    REQUIRE(once.magnitudes == twice.magnitudes);
    REQUIRE(once.disc_radius == twice.disc_radius);
    for (std::size_t i = 0; i < s.magnitudes.size(); ++i)
        REQUIRE(once.magnitudes[i] <= s.magnitudes[i]);
    REQUIRE_THROWS_AS(lowpass_project(s, 0.0), ConfigError);
    REQUIRE_THROWS_AS(lowpass_project(s, 1.5), ConfigError);
    REQUIRE_THROWS_AS(lowpass_project(s, -0.2), ConfigError);
}

TEST_CASE("freqmix of an all-zero spectrum is all zero") {
    Spectrum s;
    s.height = 8;
    s.width = 8;
    s.channels = 2;
    s.magnitudes.assign(128, 0.0);
    auto d = freqmix(s, 4, 8);
    for (double v : d) REQUIRE(v == 0.0);
    REQUIRE(d.size() == 4 * 8 * 2);
}

TEST_CASE("freqmix with one band and one sector is the global disc mean") {
    Spectrum s = random_spectrum(8, 8, 1, 6001);
    auto d = freqmix(s, 1, 1);
    REQUIRE(d.size() == 1);
    long double acc = 0.0L;
    for (double v : s.magnitudes) acc += std::log1p(v);
    REQUIRE(d[0] == Catch::Approx(static_cast<double>(acc / 64.0)).epsilon(1e-12));
}

TEST_CASE("freqmix matches the per-pixel binning reference") {
    SECTION("full disc, multi-channel") {
        Spectrum s = random_spectrum(16, 16, 3, 6002);
        auto got = freqmix(s, 2, 4);
        auto want = freqmix_oracle(s, 2, 4);
        REQUIRE(oracle::max_abs_diff(got, want) < 1e-12);
    }
    SECTION("after low-pass projection the bands tile the surviving disc") {
        Spectrum s = lowpass_project(random_spectrum(32, 32, 1, 6003), 0.25);
        auto got = freqmix(s, 4, 8);
        auto want = freqmix_oracle(s, 4, 8);
        REQUIRE(oracle::max_abs_diff(got, want) < 1e-12);
    }
    SECTION("odd sizes") {
        Spectrum s = random_spectrum(9, 7, 2, 6004);
        auto got = freqmix(s, 3, 5);
        auto want = freqmix_oracle(s, 3, 5);
        REQUIRE(oracle::max_abs_diff(got, want) < 1e-12);
    }
}

TEST_CASE("tokenizer produces identical unit-norm tokens for identical images") {
    TokenizerConfig cfg;  // defaults: cutoff 0.25, 4x8 cells, h 64, d 32
    auto g = make_stream(7, "tok-init", {0});
    SpectralTokenizer tok(cfg, g);
    Image img = random_image(32, 32, 1, 7001);
    TokenizeResult r1 = tok.tokenize(img);
    TokenizeResult r2 = tok.tokenize(img);
    REQUIRE_FALSE(r1.degenerate);
    REQUIRE(r1.token.data() == r2.token.data());
    double n = 0.0;
    for (double v : r1.token.data()) n += v * v;
    REQUIRE(std::abs(std::sqrt(n) - 1.0) < 1e-9);
}

TEST_CASE("tokenizer maps an all-zero pooled activation to e1 with a flag") {
    TokenizerConfig cfg;
    auto g = make_stream(7, "tok-init", {1});
    SpectralTokenizer tok(cfg, g);
    // An all-negative second layer drives the final ReLU, and therefore the
    // pooled vector, to exactly zero for every input.
    for (double& w : tok.W2().mutable_data()) w = -std::abs(w) - 0.1;
    Image img = random_image(16, 16, 1, 7002);
    TokenizeResult r = tok.tokenize(img);
    REQUIRE(r.degenerate);
    REQUIRE(r.token.data()[0] == 1.0);
    for (std::size_t i = 1; i < r.token.data().size(); ++i) REQUIRE(r.token.data()[i] == 0.0);
}

TEST_CASE("tokenizer gradients w.r.t. W1 and W2 match finite differences") {
    TokenizerConfig cfg;
    cfg.bands = 2;
    cfg.sectors = 4;
    cfg.hidden = 8;
    cfg.token_dim = 6;
    auto g = make_stream(9, "tok-init", {2});
    SpectralTokenizer tok(cfg, g);
    Image img = random_image(8, 8, 1, 7002, 0.2, 1.0);
    std::mt19937_64 wg(7003);
    std::uniform_real_distribution<double> wd(-1.0, 1.0);
    std::vector<double> probe(6);
    for (double& v : probe) v = wd(wg);

    Tensor desc = tok.descriptors(img);
    Tensor loss = sum_all(mul(tok.tokenize_descriptors(desc).token, Tensor({1, 6}, probe)));
    backward(loss);
    auto dW1 = tok.W1().grad();
    auto dW2 = tok.W2().grad();

    auto eval_with = [&](Tensor& slot, const std::vector<double>& vals) {
        NoGradGuard off;
        std::vector<double> keep = slot.data();
        slot.mutable_data() = vals;
        double out = sum_all(mul(tok.tokenize_descriptors(desc).token, Tensor({1, 6}, probe))).item();
        slot.mutable_data() = keep;
        return out;
    };
    auto fd1 = oracle::finite_difference(
        [&](const std::vector<double>& p) { return eval_with(tok.W1(), p); }, tok.W1().data());
    auto fd2 = oracle::finite_difference(
        [&](const std::vector<double>& p) { return eval_with(tok.W2(), p); }, tok.W2().data());
    REQUIRE(oracle::grads_close(dW1, fd1));
    REQUIRE(oracle::grads_close(dW2, fd2));
}

TEST_CASE("tokenizer validates its configuration") {
    TokenizerConfig bad;
    bad.cutoff_radius = 0.0;
    auto g = make_stream(1, "tok-init", {3});
    REQUIRE_THROWS_AS(SpectralTokenizer(bad, g), ConfigError);
    bad = TokenizerConfig{};
    bad.bands = 0;
    REQUIRE_THROWS_AS(SpectralTokenizer(bad, g), ConfigError);
    bad = TokenizerConfig{};
    bad.token_dim = 0;
    REQUIRE_THROWS_AS(SpectralTokenizer(bad, g), ConfigError);
}

TEST_CASE("tokenizer rejects images with the wrong channel count") {
    TokenizerConfig cfg;
    auto g = make_stream(1, "tok-init", {4});
    SpectralTokenizer tok(cfg, g);
    Image img = random_image(8, 8, 3, 7004);
    REQUIRE_THROWS_AS(tok.descriptors(img), DimensionError);
}

TEST_CASE("spectrum distance ratio is zero for identical images") {
    Image img = random_image(16, 16, 1, 8001);
    REQUIRE(spectrum_distance_ratio(img, img, 0.25) == 0.0);
}

TEST_CASE("a pure high-frequency checkerboard perturbation is invisible to the pass band") {
    Image a = random_image(16, 16, 1, 8002);
    Image b = a;
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) b.at(y, x) += ((x + y) % 2 == 0 ? 1.0 : -1.0);
    double ratio = spectrum_distance_ratio(a, b, 0.25);
    REQUIRE(ratio < 1e-9);
}

TEST_CASE("spectrum distance ratio always lands in [0,1]") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        Image a = random_image(12, 12, 1, 9000 + s);
        Image b = random_image(12, 12, 1, 9100 + s);
        for (double cutoff : {0.1, 0.25, 0.5, 1.0}) {
            double r = spectrum_distance_ratio(a, b, cutoff);
            REQUIRE(r >= 0.0);
            REQUIRE(r <= 1.0 + 1e-12);
        }
    }
    Image a = random_image(8, 8, 1, 9999);
    Image c = random_image(10, 10, 1, 9998);
    REQUIRE_THROWS_AS(spectrum_distance_ratio(a, c, 0.25), DimensionError);
}

TEST_CASE("ratio at full cutoff is exactly one for differing images") {
    Image a = random_image(10, 10, 1, 9501);
    Image b = random_image(10, 10, 1, 9502);
    REQUIRE(spectrum_distance_ratio(a, b, 1.0) == Catch::Approx(1.0).epsilon(1e-12));
}
