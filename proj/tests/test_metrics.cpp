#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "specfed/metrics.hpp"

using namespace specfed;

namespace {

// Confusion-matrix reference for classification scores.
std::pair<double, double> cls_oracle(const std::vector<int>& pred, const std::vector<int>& tgt,
                                     int K) {
    std::vector<std::vector<double>> cm(K, std::vector<double>(K, 0.0));
    for (std::size_t i = 0; i < pred.size(); ++i) cm[tgt[i]][pred[i]] += 1.0;
    double correct = 0.0;
    for (int k = 0; k < K; ++k) correct += cm[k][k];
    double f1sum = 0.0;
    for (int k = 0; k < K; ++k) {
        double tp = cm[k][k], row = 0.0, col = 0.0;
        for (int j = 0; j < K; ++j) {
            row += cm[k][j];  // actual k
            col += cm[j][k];  // predicted k
        }
        const double prec = col > 0.0 ? tp / col : 0.0;
        const double rec = row > 0.0 ? tp / row : 0.0;
        f1sum += (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    }
    return {correct / pred.size(), f1sum / K};
}

Image rand_img(int H, int W, std::uint64_t seed) {
    std::mt19937_64 g(seed);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    Image img(H, W, 1);
    for (double& v : img.data) v = d(g);
    return img;
}

// Straight-from-definition SSIM over non-overlapping windows.
double ssim_oracle(const Image& a, const Image& b, int w = 8) {
    const double C1 = 1e-4, C2 = 9e-4;
    std::vector<double> scores;
    for (int wy = 0; wy + w <= a.height; wy += w)
        for (int wx = 0; wx + w <= a.width; wx += w) {
            std::vector<double> xa, xb;
            for (int y = wy; y < wy + w; ++y)
                for (int x = wx; x < wx + w; ++x) {
                    xa.push_back(a.at(y, x));
                    xb.push_back(b.at(y, x));
                }
            auto mean = [](const std::vector<double>& v) {
                long double s = 0.0L;
                for (double x : v) s += x;
                return static_cast<double>(s / v.size());
            };
            const double ma = mean(xa), mb = mean(xb);
            long double va = 0.0L, vb = 0.0L, cov = 0.0L;
            for (std::size_t i = 0; i < xa.size(); ++i) {
                va += (xa[i] - ma) * (xa[i] - ma);
                vb += (xb[i] - mb) * (xb[i] - mb);
                cov += (xa[i] - ma) * (xb[i] - mb);
            }
            const double n = static_cast<double>(xa.size());
            scores.push_back(((2 * ma * mb + C1) * (2 * (cov / n) + C2)) /
                             ((ma * ma + mb * mb + C1) * ((va / n) + (vb / n) + C2)));
        }
    long double s = 0.0L;
    for (double v : scores) s += v;
    return static_cast<double>(s / scores.size());
}

}  // namespace

TEST_CASE("perfect predictions score (1,1)") {
    std::vector<int> y = {0, 1, 2, 3, 2, 1};
    auto [acc, f1] = accuracy_macro_f1(y, y, 4);
    REQUIRE(acc == 1.0);
    REQUIRE(f1 == 1.0);
}

TEST_CASE("constant predictor on balanced binary data") {
    std::vector<int> pred(10, 0);
    std::vector<int> tgt = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    auto [acc, f1] = accuracy_macro_f1(pred, tgt, 2);
    REQUIRE(acc == Catch::Approx(0.5));
    REQUIRE(f1 == Catch::Approx((2.0 / 3.0 + 0.0) / 2.0));
}

TEST_CASE("classes absent from both sides contribute zero F1") {
    std::vector<int> pred = {0, 1, 0, 1};
    std::vector<int> tgt = {0, 1, 1, 0};
    auto [acc4, f14] = accuracy_macro_f1(pred, tgt, 4);
    auto [acc2, f12] = accuracy_macro_f1(pred, tgt, 2);
    REQUIRE(acc4 == acc2);
    REQUIRE(f14 == Catch::Approx(f12 * 2.0 / 4.0));
}

TEST_CASE("classification metrics match the confusion-matrix reference") {
    std::mt19937_64 g(101);
    for (int trial = 0; trial < 10; ++trial) {
        const int K = 2 + trial % 5;
        std::uniform_int_distribution<int> d(0, K - 1);
        std::vector<int> pred(200), tgt(200);
        for (int i = 0; i < 200; ++i) {
            pred[i] = d(g);
            tgt[i] = d(g);
        }
        auto [acc, f1] = accuracy_macro_f1(pred, tgt, K);
        auto [oacc, of1] = cls_oracle(pred, tgt, K);
        REQUIRE(acc == Catch::Approx(oacc).epsilon(1e-12));
        REQUIRE(f1 == Catch::Approx(of1).epsilon(1e-12));
    }
}

TEST_CASE("classification metrics reject bad input") {
    REQUIRE_THROWS_AS(accuracy_macro_f1({}, {}, 2), ContractError);
    REQUIRE_THROWS_AS(accuracy_macro_f1({0}, {0, 1}, 2), ContractError);
    REQUIRE_THROWS_AS(accuracy_macro_f1({5}, {0}, 2), ContractError);
    REQUIRE_THROWS_AS(accuracy_macro_f1({0}, {-1}, 2), ContractError);
}

TEST_CASE("psnr caps identical images at 99 dB") {
    Image a = rand_img(8, 8, 201);
    REQUIRE(psnr(a, a) == 99.0);
}

TEST_CASE("psnr of a uniform 0.1 offset is exactly 20 dB") {
    Image a(8, 8, 1);
    Image b(8, 8, 1);
    for (auto& v : a.data) v = 0.4;
    for (auto& v : b.data) v = 0.5;
    REQUIRE(psnr(a, b) == Catch::Approx(20.0).epsilon(1e-12));
}

TEST_CASE("psnr matches the direct formula and is symmetric") {
    Image a = rand_img(16, 16, 202);
    Image b = rand_img(16, 16, 203);
    long double mse = 0.0L;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        mse += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    mse /= a.data.size();
    const double want = 10.0 * std::log10(1.0 / static_cast<double>(mse));
    REQUIRE(psnr(a, b) == Catch::Approx(want).epsilon(1e-12));
    REQUIRE(psnr(a, b) == psnr(b, a));
    Image c = rand_img(8, 16, 204);
    REQUIRE_THROWS_AS(psnr(a, c), ContractError);
}

TEST_CASE("ssim of identical images is 1") {
    Image a = rand_img(16, 16, 301);
    REQUIRE(ssim(a, a) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim of an inverted binary image is negative") {
    Image a(8, 8, 1), b(8, 8, 1);
    std::mt19937_64 g(302);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        a.data[i] = (g() & 1) ? 1.0 : 0.0;
        b.data[i] = 1.0 - a.data[i];
    }
    REQUIRE(ssim(a, b) < 0.0);
}

TEST_CASE("ssim matches the per-window definition and is symmetric") {
    Image a = rand_img(24, 16, 303);
    Image b = rand_img(24, 16, 304);
    REQUIRE(ssim(a, b) == Catch::Approx(ssim_oracle(a, b)).epsilon(1e-12));
    REQUIRE(ssim(a, b) == Catch::Approx(ssim(b, a)).epsilon(1e-12));
    REQUIRE(ssim(a, b) >= -1.0);
    REQUIRE(ssim(a, b) <= 1.0);
    Image tiny = rand_img(4, 4, 305);
    REQUIRE_THROWS_AS(ssim(tiny, tiny), ContractError);
}

TEST_CASE("dice and iou match hand-computed closed forms") {
    SECTION("identical masks") {
        std::vector<double> m = {1, 0, 1, 1, 0};
        auto [d, i] = dice_iou(m, m);
        REQUIRE(d == 1.0);
        REQUIRE(i == 1.0);
    }
    SECTION("disjoint non-empty masks") {
        std::vector<double> a = {1, 1, 0, 0};
        std::vector<double> b = {0, 0, 1, 1};
        auto [d, i] = dice_iou(a, b);
        REQUIRE(d == 0.0);
        REQUIRE(i == 0.0);
    }
    SECTION("half overlap: dice 0.5, iou 1/3") {
        std::vector<double> a(200, 0.0), b(200, 0.0);
        for (int j = 0; j < 100; ++j) a[j] = 1.0;        // |A| = 100
        for (int j = 50; j < 150; ++j) b[j] = 1.0;       // |B| = 100, overlap 50
        auto [d, i] = dice_iou(a, b);
        REQUIRE(d == Catch::Approx(0.5));
        REQUIRE(i == Catch::Approx(1.0 / 3.0));
    }
    SECTION("both empty scores (1,1) by convention") {
        std::vector<double> z(16, 0.0);
        auto [d, i] = dice_iou(z, z);
        REQUIRE(d == 1.0);
        REQUIRE(i == 1.0);
    }
    SECTION("non-binary input rejected") {
        REQUIRE_THROWS_AS(dice_iou({0.5}, {1.0}), ContractError);
        REQUIRE_THROWS_AS(dice_iou({1.0}, {0.2}), ContractError);
    }
}

TEST_CASE("dice dominates iou, equal only at the extremes") {
    std::mt19937_64 g(401);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> a(64), b(64);
        for (int j = 0; j < 64; ++j) {
            a[j] = (g() & 1) ? 1.0 : 0.0;
            b[j] = (g() & 1) ? 1.0 : 0.0;
        }
        auto [d, i] = dice_iou(a, b);
        REQUIRE(d >= i - 1e-15);
        const bool extreme = (d == 0.0 || d == 1.0);
        if (!extreme) REQUIRE(d > i);
        if (d == i) REQUIRE((d == 0.0 || d == 1.0));
    }
}
