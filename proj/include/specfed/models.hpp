#pragma once

// Token backbone and task heads. The backbone turns an image into an L x d
// token map; each head consumes the fused prompt sequence and produces a
// task prediction, a differentiable loss, and shard-level quality metrics.
// All heads share one interface so orchestration code never branches on the
// task.

#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "specfed/error.hpp"
#include "specfed/fusion.hpp"
#include "specfed/image.hpp"
#include "specfed/metrics.hpp"
#include "specfed/synthdata.hpp"
#include "specfed/tensor.hpp"

namespace specfed {

struct BackboneConfig {
    int patch_size = 4;
    int depth = 2;
    int token_dim = 32;
    int channels = 1;
    int mlp_hidden = 0;  // 0 selects 2 * token_dim

    int resolved_hidden() const { return mlp_hidden > 0 ? mlp_hidden : 2 * token_dim; }
};

// Patch-embedding backbone with token-mixing blocks (single-head
// self-attention plus a two-layer MLP, both residual).
class Backbone {
  public:
    Backbone(const BackboneConfig& cfg, std::mt19937_64& init) : cfg_(cfg) {
        if (cfg.patch_size < 1) throw ConfigError("model.patch_size", "must be >= 1");
        if (cfg.depth < 0) throw ConfigError("model.depth", "must be >= 0");
        if (cfg.token_dim < 1) throw ConfigError("model.token_dim", "must be >= 1");
        if (cfg.channels < 1) throw ConfigError("model.channels", "must be >= 1");
        const std::size_t d = static_cast<std::size_t>(cfg.token_dim);
        const std::size_t p2c =
            static_cast<std::size_t>(cfg.patch_size) * cfg.patch_size * cfg.channels;
        const std::size_t h = static_cast<std::size_t>(cfg.resolved_hidden());
        embed_ = Tensor::randn({p2c, d}, init, 1.0 / std::sqrt(static_cast<double>(p2c)));
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        for (int b = 0; b < cfg.depth; ++b) {
            Block blk;
            blk.wq = Tensor::randn({d, d}, init, sd);
            blk.wk = Tensor::randn({d, d}, init, sd);
            blk.wv = Tensor::randn({d, d}, init, sd);
            blk.w1 = Tensor::randn({d, h}, init, sd);
            blk.w2 = Tensor::randn({h, d}, init, 1.0 / std::sqrt(static_cast<double>(h)));
            blocks_.push_back(std::move(blk));
        }
    }

    const BackboneConfig& config() const { return cfg_; }

    // Number of tokens a height x width image yields.
    std::size_t token_count(int height, int width) const {
        check_divisible(height, width);
        const int p = cfg_.patch_size;
        return static_cast<std::size_t>(height / p) * static_cast<std::size_t>(width / p);
    }

    Tensor forward(const Image& img) const {
        check_divisible(img.height, img.width);
        if (img.channels != cfg_.channels)
            throw DimensionError("backbone expects " + std::to_string(cfg_.channels) +
                                 " channels, got " + std::to_string(img.channels));
        const int p = cfg_.patch_size;
        const int gh = img.height / p, gw = img.width / p;
        const std::size_t p2c = static_cast<std::size_t>(p) * p * cfg_.channels;
        std::vector<double> patches(static_cast<std::size_t>(gh) * gw * p2c);
        std::size_t row = 0;
        for (int ty = 0; ty < gh; ++ty) {
            for (int tx = 0; tx < gw; ++tx, ++row) {
                std::size_t col = 0;
                for (int c = 0; c < cfg_.channels; ++c)
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx, ++col)
                            patches[row * p2c + col] = img.at(ty * p + dy, tx * p + dx, c);
            }
        }
        Tensor tokens = matmul(
            Tensor({static_cast<std::size_t>(gh) * gw, p2c}, std::move(patches)), embed_);
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.token_dim));
        for (const Block& blk : blocks_) {
            Tensor q = matmul(tokens, blk.wq);
            Tensor k = matmul(tokens, blk.wk);
            Tensor v = matmul(tokens, blk.wv);
            Tensor attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d));
            tokens = add(tokens, matmul(attn, v));
            tokens = add(tokens, matmul(relu(matmul(tokens, blk.w1)), blk.w2));
        }
        return tokens;
    }

    std::vector<Tensor> params() {
        std::vector<Tensor> out{embed_};
        for (Block& blk : blocks_) {
            out.push_back(blk.wq);
            out.push_back(blk.wk);
            out.push_back(blk.wv);
            out.push_back(blk.w1);
            out.push_back(blk.w2);
        }
        return out;
    }

  private:
    struct Block {
        Tensor wq, wk, wv, w1, w2;
    };

    void check_divisible(int height, int width) const {
        if (height % cfg_.patch_size != 0 || width % cfg_.patch_size != 0)
            throw ConfigError("model.patch_size",
                              std::to_string(height) + "x" + std::to_string(width) +
                                  " image is not divisible by patch size " +
                                  std::to_string(cfg_.patch_size));
    }

    BackboneConfig cfg_;
    Tensor embed_;
    std::vector<Block> blocks_;
};

enum class TaskKind { classification, segmentation, super_resolution };

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "classification") return TaskKind::classification;
    if (s == "segmentation") return TaskKind::segmentation;
    if (s == "super_resolution") return TaskKind::super_resolution;
    throw ConfigError("model.task", "unknown task '" + s + "'");
}

inline std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::classification: return "classification";
        case TaskKind::segmentation: return "segmentation";
        case TaskKind::super_resolution: return "super_resolution";
    }
    throw ContractError("invalid task kind");
}

struct HeadConfig {
    TaskKind kind = TaskKind::classification;
    int token_dim = 32;
    int num_classes = 4;
    int height = 32;
    int width = 32;
    int patch_size = 4;
    int sr_scale = 2;
};

// Uniform task interface: forward consumes the fused sequence, loss pairs a
// prediction with a sample's ground truth, evaluate reduces a shard of
// predictions to named quality metrics.
class TaskHead {
  public:
    virtual ~TaskHead() = default;
    virtual std::string task_name() const = 0;
    virtual Tensor forward(const FusedSequence& fused) const = 0;
    virtual Tensor loss(const Tensor& prediction, const Sample& sample) const = 0;
    virtual std::map<std::string, double> evaluate(
        const std::vector<Tensor>& predictions,
        const std::vector<const Sample*>& samples) const = 0;
    virtual std::vector<Tensor> params() = 0;
    virtual std::unique_ptr<TaskHead> clone() const = 0;
};

namespace detail {

inline Tensor clone_param(const Tensor& t) { return Tensor(t.shape(), t.data(), true); }

inline Tensor backbone_rows_of(const FusedSequence& fused) {
    if (fused.backbone_rows == 0) throw ContractError("fused sequence has no backbone rows");
    return slice_rows(fused.seq, fused.prefix_rows, fused.prefix_rows + fused.backbone_rows);
}

inline void check_eval_inputs(const std::vector<Tensor>& predictions,
                              const std::vector<const Sample*>& samples) {
    if (predictions.empty()) throw ContractError("evaluate: no predictions");
    if (predictions.size() != samples.size())
        throw ContractError("evaluate: prediction/sample count mismatch");
}

}  // namespace detail

class ClassificationHead final : public TaskHead {
  public:
    ClassificationHead(const HeadConfig& cfg, std::mt19937_64& init) : cfg_(cfg) {
        if (cfg.num_classes < 2) throw ConfigError("data.classes", "classification needs >= 2");
        const std::size_t d = static_cast<std::size_t>(cfg.token_dim);
        const std::size_t c = static_cast<std::size_t>(cfg.num_classes);
        w_ = Tensor::randn({d, c}, init, 1.0 / std::sqrt(static_cast<double>(d)));
        b_ = Tensor::zeros({1, c}, true);
    }

    std::string task_name() const override { return "classification"; }

    // Mean-pool over the whole fused sequence (prefix and suffix included),
    // then map to class logits.
    Tensor forward(const FusedSequence& fused) const override {
        return add(matmul(mean_rows(fused.seq), w_), b_);
    }

    Tensor loss(const Tensor& prediction, const Sample& sample) const override {
        return cross_entropy_with_logits(prediction, sample.class_id);
    }

    std::map<std::string, double> evaluate(
        const std::vector<Tensor>& predictions,
        const std::vector<const Sample*>& samples) const override {
        detail::check_eval_inputs(predictions, samples);
        std::vector<int> pred_labels, targets;
        pred_labels.reserve(predictions.size());
        targets.reserve(predictions.size());
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            const auto& logits = predictions[i].data();
            int best = 0;
            for (int c = 1; c < cfg_.num_classes; ++c)
                if (logits[static_cast<std::size_t>(c)] > logits[static_cast<std::size_t>(best)])
                    best = c;
            pred_labels.push_back(best);
            targets.push_back(samples[i]->class_id);
        }
        auto [acc, f1] = accuracy_macro_f1(pred_labels, targets, cfg_.num_classes);
        return {{"accuracy", acc}, {"macro_f1", f1}};
    }

    std::vector<Tensor> params() override { return {w_, b_}; }

    std::unique_ptr<TaskHead> clone() const override {
        auto copy = std::make_unique<ClassificationHead>(*this);
        copy->w_ = detail::clone_param(w_);
        copy->b_ = detail::clone_param(b_);
        return copy;
    }

  private:
    HeadConfig cfg_;
    Tensor w_, b_;
};

// One logit per backbone token, reshaped to the patch grid and upsampled
// nearest-neighbor to full resolution. Prefix and suffix tokens carry no
// spatial position and are excluded from the reshape.
class SegmentationHead final : public TaskHead {
  public:
    SegmentationHead(const HeadConfig& cfg, std::mt19937_64& init) : cfg_(cfg) {
        if (cfg.height % cfg.patch_size != 0 || cfg.width % cfg.patch_size != 0)
            throw ConfigError("model.patch_size", "image not divisible by patch size");
        const std::size_t d = static_cast<std::size_t>(cfg.token_dim);
        w_ = Tensor::randn({d, 1}, init, 1.0 / std::sqrt(static_cast<double>(d)));
        b_ = Tensor::zeros({1, 1}, true);
    }

    std::string task_name() const override { return "segmentation"; }

    Tensor forward(const FusedSequence& fused) const override {
        Tensor tokens = detail::backbone_rows_of(fused);
        const int p = cfg_.patch_size;
        const std::size_t gw = static_cast<std::size_t>(cfg_.width / p);
        const std::size_t expected = static_cast<std::size_t>(cfg_.height / p) * gw;
        if (fused.backbone_rows != expected)
            throw DimensionError("segmentation head expects " + std::to_string(expected) +
                                 " backbone tokens, got " + std::to_string(fused.backbone_rows));
        Tensor logits = add_rowvec(matmul(tokens, w_), b_);  // L x 1, one logit per patch
        std::vector<std::size_t> index(static_cast<std::size_t>(cfg_.height) * cfg_.width);
        for (int y = 0; y < cfg_.height; ++y)
            for (int x = 0; x < cfg_.width; ++x)
                index[static_cast<std::size_t>(y) * cfg_.width + x] =
                    static_cast<std::size_t>(y / p) * gw + static_cast<std::size_t>(x / p);
        return gather(logits, index, {1, index.size()});
    }

    Tensor loss(const Tensor& prediction, const Sample& sample) const override {
        if (prediction.numel() != sample.mask.size())
            throw ContractError("segmentation: prediction/mask size mismatch");
        return bce_with_logits_mean(prediction, sample.mask);
    }

    std::map<std::string, double> evaluate(
        const std::vector<Tensor>& predictions,
        const std::vector<const Sample*>& samples) const override {
        detail::check_eval_inputs(predictions, samples);
        double dice_sum = 0.0, iou_sum = 0.0;
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            const auto& logits = predictions[i].data();
            std::vector<double> pred_mask(logits.size());
            for (std::size_t j = 0; j < logits.size(); ++j)
                pred_mask[j] = logits[j] > 0.0 ? 1.0 : 0.0;  // sigmoid(z) > 0.5
            auto [dice, iou] = dice_iou(pred_mask, samples[i]->mask);
            dice_sum += dice;
            iou_sum += iou;
        }
        const double n = static_cast<double>(predictions.size());
        return {{"dice", dice_sum / n}, {"iou", iou_sum / n}};
    }

    std::vector<Tensor> params() override { return {w_, b_}; }

    std::unique_ptr<TaskHead> clone() const override {
        auto copy = std::make_unique<SegmentationHead>(*this);
        copy->w_ = detail::clone_param(w_);
        copy->b_ = detail::clone_param(b_);
        return copy;
    }

  private:
    HeadConfig cfg_;
    Tensor w_, b_;
};

// Per-backbone-token linear map to a (scale*patch)^2 pixel block, rearranged
// pixel-shuffle style into the upscaled image.
class SuperResolutionHead final : public TaskHead {
  public:
    SuperResolutionHead(const HeadConfig& cfg, std::mt19937_64& init) : cfg_(cfg) {
        if (cfg.sr_scale < 1) throw ConfigError("data.sr_scale", "must be >= 1");
        if (cfg.height % cfg.patch_size != 0 || cfg.width % cfg.patch_size != 0)
            throw ConfigError("model.patch_size", "image not divisible by patch size");
        const std::size_t d = static_cast<std::size_t>(cfg.token_dim);
        const std::size_t block = static_cast<std::size_t>(cfg.sr_scale) * cfg.patch_size;
        w_ = Tensor::randn({d, block * block}, init, 1.0 / std::sqrt(static_cast<double>(d)));
        b_ = Tensor::zeros({1, block * block}, true);
    }

    std::string task_name() const override { return "super_resolution"; }

    Tensor forward(const FusedSequence& fused) const override {
        Tensor tokens = detail::backbone_rows_of(fused);
        const int p = cfg_.patch_size, s = cfg_.sr_scale;
        const int sp = s * p;
        const std::size_t gw = static_cast<std::size_t>(cfg_.width / p);
        const std::size_t expected = static_cast<std::size_t>(cfg_.height / p) * gw;
        if (fused.backbone_rows != expected)
            throw DimensionError("super-resolution head expects " + std::to_string(expected) +
                                 " backbone tokens, got " + std::to_string(fused.backbone_rows));
        Tensor blocks = add_rowvec(matmul(tokens, w_), b_);  // L x (s*p)^2
        const int oh = cfg_.height * s, ow = cfg_.width * s;
        std::vector<std::size_t> index(static_cast<std::size_t>(oh) * ow);
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                const std::size_t token = static_cast<std::size_t>(y / sp) * gw +
                                          static_cast<std::size_t>(x / sp);
                const std::size_t within = static_cast<std::size_t>(y % sp) * sp +
                                           static_cast<std::size_t>(x % sp);
                index[static_cast<std::size_t>(y) * ow + x] =
                    token * static_cast<std::size_t>(sp) * sp + within;
            }
        return gather(blocks, index, {1, index.size()});
    }

    Tensor loss(const Tensor& prediction, const Sample& sample) const override {
        if (prediction.numel() != sample.hr.data.size())
            throw ContractError("super-resolution: prediction/reference size mismatch");
        Tensor diff = sub(prediction, Tensor({1, sample.hr.data.size()}, sample.hr.data));
        return mean_all(mul(diff, diff));
    }

    std::map<std::string, double> evaluate(
        const std::vector<Tensor>& predictions,
        const std::vector<const Sample*>& samples) const override {
        detail::check_eval_inputs(predictions, samples);
        double psnr_sum = 0.0, ssim_sum = 0.0;
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            const Image& ref = samples[i]->hr;
            if (predictions[i].numel() != ref.data.size())
                throw ContractError("super-resolution: prediction/reference size mismatch");
            Image out(ref.height, ref.width, ref.channels);
            for (std::size_t j = 0; j < out.data.size(); ++j)
                out.data[j] = std::min(1.0, std::max(0.0, predictions[i].data()[j]));
            psnr_sum += psnr(out, ref);
            ssim_sum += ssim(out, ref);
        }
        const double n = static_cast<double>(predictions.size());
        return {{"psnr", psnr_sum / n}, {"ssim", ssim_sum / n}};
    }

    std::vector<Tensor> params() override { return {w_, b_}; }

    std::unique_ptr<TaskHead> clone() const override {
        auto copy = std::make_unique<SuperResolutionHead>(*this);
        copy->w_ = detail::clone_param(w_);
        copy->b_ = detail::clone_param(b_);
        return copy;
    }

  private:
    HeadConfig cfg_;
    Tensor w_, b_;
};

inline std::unique_ptr<TaskHead> make_task_head(const HeadConfig& cfg, std::mt19937_64& init) {
    switch (cfg.kind) {
        case TaskKind::classification: return std::make_unique<ClassificationHead>(cfg, init);
        case TaskKind::segmentation: return std::make_unique<SegmentationHead>(cfg, init);
        case TaskKind::super_resolution:
            return std::make_unique<SuperResolutionHead>(cfg, init);
    }
    throw ContractError("invalid task kind");
}

}  // namespace specfed
