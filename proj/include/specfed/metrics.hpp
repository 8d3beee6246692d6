#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "specfed/error.hpp"
#include "specfed/image.hpp"

namespace specfed {

// Fraction correct plus the unweighted mean of per-class F1 scores. A class
// absent from both predictions and targets contributes F1 = 0, which keeps
// the macro average honest about unexercised classes.
inline std::pair<double, double> accuracy_macro_f1(const std::vector<int>& predictions,
                                                   const std::vector<int>& targets,
                                                   int num_classes) {
    if (predictions.empty()) throw ContractError("accuracy_macro_f1: empty input");
    if (predictions.size() != targets.size())
        throw ContractError("accuracy_macro_f1: prediction/target length mismatch");
    for (int p : predictions)
        if (p < 0 || p >= num_classes) throw ContractError("accuracy_macro_f1: prediction id out of range");
    for (int t : targets)
        if (t < 0 || t >= num_classes) throw ContractError("accuracy_macro_f1: target id out of range");

    std::size_t correct = 0;
    std::vector<double> tp(num_classes, 0.0), fp(num_classes, 0.0), fn(num_classes, 0.0);
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] == targets[i]) {
            ++correct;
            tp[predictions[i]] += 1.0;
        } else {
            fp[predictions[i]] += 1.0;
            fn[targets[i]] += 1.0;
        }
    }
    double f1_sum = 0.0;
    for (int c = 0; c < num_classes; ++c) {
        const double denom = 2.0 * tp[c] + fp[c] + fn[c];
        f1_sum += denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
    }
    return {static_cast<double>(correct) / predictions.size(), f1_sum / num_classes};
}

// Peak signal-to-noise ratio for unit-range images, capped at 99 dB so exact
// reconstructions stay representable in plain numeric CSV columns.
inline double psnr(const Image& pred, const Image& target) {
    if (pred.height != target.height || pred.width != target.width || pred.channels != target.channels)
        throw ContractError("psnr: image shapes differ");
    if (pred.data.empty()) throw ContractError("psnr: empty image");
    double mse = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - target.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(pred.data.size());
    if (mse == 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

// Mean structural similarity over non-overlapping uniform windows (no
// Gaussian weighting), constants C1 = 0.01^2 and C2 = 0.03^2 for unit range.
// Numbers are therefore not comparable with Gaussian-window implementations.
inline double ssim(const Image& pred, const Image& target, int window = 8) {
    if (pred.height != target.height || pred.width != target.width || pred.channels != target.channels)
        throw ContractError("ssim: image shapes differ");
    if (pred.height < window || pred.width < window)
        throw ContractError("ssim: image smaller than the " + std::to_string(window) + "x" +
                            std::to_string(window) + " window");
    const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    double acc = 0.0;
    std::size_t windows = 0;
    for (int c = 0; c < pred.channels; ++c)
        for (int wy = 0; wy + window <= pred.height; wy += window)
            for (int wx = 0; wx + window <= pred.width; wx += window) {
                const double n = static_cast<double>(window) * window;
                double mx = 0.0, my = 0.0;
                for (int y = wy; y < wy + window; ++y)
                    for (int x = wx; x < wx + window; ++x) {
                        mx += pred.at(y, x, c);
                        my += target.at(y, x, c);
                    }
                mx /= n;
                my /= n;
                double vx = 0.0, vy = 0.0, cov = 0.0;
                for (int y = wy; y < wy + window; ++y)
                    for (int x = wx; x < wx + window; ++x) {
                        const double dx = pred.at(y, x, c) - mx;
                        const double dy = target.at(y, x, c) - my;
                        vx += dx * dx;
                        vy += dy * dy;
                        cov += dx * dy;
                    }
                vx /= n;
                vy /= n;
                cov /= n;
                acc += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) /
                       ((mx * mx + my * my + C1) * (vx + vy + C2));
                ++windows;
            }
    return acc / static_cast<double>(windows);
}

// Overlap scores for binary masks. Two empty masks agree perfectly by
// convention and score (1, 1).
inline std::pair<double, double> dice_iou(const std::vector<double>& pred_mask,
                                          const std::vector<double>& target_mask) {
    if (pred_mask.size() != target_mask.size()) throw ContractError("dice_iou: mask sizes differ");
    double inter = 0.0, a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < pred_mask.size(); ++i) {
        if (pred_mask[i] != 0.0 && pred_mask[i] != 1.0)
            throw ContractError("dice_iou: prediction mask is not binary");
        if (target_mask[i] != 0.0 && target_mask[i] != 1.0)
            throw ContractError("dice_iou: target mask is not binary");
        a += pred_mask[i];
        b += target_mask[i];
        inter += pred_mask[i] * target_mask[i];
    }
    if (a == 0.0 && b == 0.0) return {1.0, 1.0};
    const double dice = 2.0 * inter / (a + b);
    const double uni = a + b - inter;
    const double iou = uni > 0.0 ? inter / uni : 1.0;
    return {dice, iou};
}

}  // namespace specfed
