#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "specfed/models.hpp"

using namespace specfed;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& g, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = d(g);
    return v;
}

Image random_image(int h, int w, std::mt19937_64& g) {
    Image img(h, w, 1);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (double& x : img.data) x = d(g);
    return img;
}

FusedSequence bare_sequence(const Tensor& tokens) {
    return FusedSequence{tokens, 0, tokens.rows(), 0};
}

double eval_with(Tensor& param, const std::vector<double>& values,
                 const std::function<double()>& f) {
    std::vector<double> keep = param.data();
    param.mutable_data() = values;
    double out = f();
    param.mutable_data() = keep;
    return out;
}

}  // namespace

TEST_CASE("backbone token count follows the patch grid") {
    BackboneConfig cfg;
    cfg.patch_size = 4;
    cfg.token_dim = 8;
    cfg.depth = 1;
    auto g = make_stream(7, "bb", {0});
    Backbone bb(cfg, g);
    REQUIRE(bb.token_count(8, 8) == 4);
    REQUIRE(bb.token_count(32, 32) == 64);

    std::mt19937_64 img_rng(1);
    Tensor r = bb.forward(random_image(8, 8, img_rng));
    REQUIRE(r.shape() == Shape{4, 8});
}

TEST_CASE("backbone rejects images that do not tile into patches") {
    BackboneConfig cfg;
    cfg.patch_size = 4;
    cfg.token_dim = 8;
    auto g = make_stream(7, "bb", {1});
    Backbone bb(cfg, g);
    std::mt19937_64 img_rng(2);
    Image bad = random_image(10, 8, img_rng);
    REQUIRE_THROWS_AS(bb.forward(bad), ConfigError);
    REQUIRE_THROWS_AS(bb.token_count(8, 9), ConfigError);
    Image wrong_channels(8, 8, 2);
    REQUIRE_THROWS_AS(bb.forward(wrong_channels), DimensionError);
}

TEST_CASE("backbone is deterministic for identical inputs") {
    BackboneConfig cfg;
    cfg.patch_size = 4;
    cfg.token_dim = 16;
    auto g = make_stream(9, "bb", {0});
    Backbone bb(cfg, g);
    std::mt19937_64 img_rng(3);
    Image a = random_image(16, 16, img_rng);
    Image b = a;
    Tensor ra = bb.forward(a);
    Tensor rb = bb.forward(b);
    REQUIRE(ra.data() == rb.data());
}

TEST_CASE("backbone gradients through one block match finite differences") {
    BackboneConfig cfg;
    cfg.patch_size = 2;
    cfg.token_dim = 4;
    cfg.depth = 1;
    auto g = make_stream(11, "bb", {0});
    Backbone bb(cfg, g);
    std::mt19937_64 img_rng(4);
    Image img = random_image(4, 4, img_rng);
    auto probe = random_vec(4 * 4, img_rng);

    auto loss_value = [&] { return sum_all(mul(bb.forward(img), Tensor({4, 4}, probe))); };
    backward(loss_value());
    for (Tensor& p : bb.params()) {
        auto fd = oracle::finite_difference(
            [&](const std::vector<double>& vals) {
                NoGradGuard off;
                return eval_with(p, vals, [&] { return loss_value().item(); });
            },
            p.data());
        REQUIRE(oracle::grads_close(p.grad(), fd));
    }
}

TEST_CASE("classification head with zeroed parameters is uniform") {
    HeadConfig cfg;
    cfg.kind = TaskKind::classification;
    cfg.token_dim = 6;
    cfg.num_classes = 5;
    auto g = make_stream(13, "head", {0});
    auto head = make_task_head(cfg, g);
    for (Tensor& p : head->params()) p.mutable_data().assign(p.numel(), 0.0);

    std::mt19937_64 rng(5);
    FusedSequence fused = bare_sequence(Tensor({3, 6}, random_vec(18, rng)));
    Tensor logits = head->forward(fused);
    REQUIRE(logits.shape() == Shape{1, 5});
    for (double z : logits.data()) REQUIRE(z == 0.0);

    Sample s;
    s.class_id = 2;
    Tensor l = head->loss(logits, s);
    REQUIRE(l.item() == Catch::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("classification loss vanishes for a confident correct prediction") {
    HeadConfig cfg;
    cfg.kind = TaskKind::classification;
    cfg.token_dim = 4;
    cfg.num_classes = 3;
    auto g = make_stream(13, "head", {1});
    auto head = make_task_head(cfg, g);
    Sample s;
    s.class_id = 1;
    Tensor logits({1, 3}, {-40.0, 40.0, -40.0});
    REQUIRE(head->loss(logits, s).item() < 1e-12);
}

TEST_CASE("classification loss matches an extended-precision reference") {
    HeadConfig cfg;
    cfg.kind = TaskKind::classification;
    cfg.token_dim = 4;
    cfg.num_classes = 6;
    auto g = make_stream(13, "head", {2});
    auto head = make_task_head(cfg, g);
    std::mt19937_64 rng(6);
    auto zv = random_vec(6, rng, -3.0, 3.0);
    Sample s;
    s.class_id = 4;
    long double denom = 0.0L;
    for (double z : zv) denom += std::exp(static_cast<long double>(z));
    const double want = static_cast<double>(std::log(denom) - zv[4]);
    REQUIRE(head->loss(Tensor({1, 6}, zv), s).item() == Catch::Approx(want).epsilon(1e-12));
}

TEST_CASE("classification evaluate reports accuracy and macro F1 by argmax") {
    HeadConfig cfg;
    cfg.kind = TaskKind::classification;
    cfg.token_dim = 4;
    cfg.num_classes = 3;
    auto g = make_stream(13, "head", {3});
    auto head = make_task_head(cfg, g);
    std::vector<Tensor> preds{Tensor({1, 3}, {3.0, 1.0, 0.0}), Tensor({1, 3}, {0.0, 2.0, 1.0}),
                              Tensor({1, 3}, {0.0, 5.0, 1.0})};
    Sample s0, s1, s2;
    s0.class_id = 0;
    s1.class_id = 1;
    s2.class_id = 2;  // predicted 1 -> one miss
    auto metrics = head->evaluate(preds, {&s0, &s1, &s2});
    REQUIRE(metrics.at("accuracy") == Catch::Approx(2.0 / 3.0));
    REQUIRE(metrics.count("macro_f1") == 1);
}

TEST_CASE("segmentation head maps patch logits onto the full mask grid") {
    HeadConfig cfg;
    cfg.kind = TaskKind::segmentation;
    cfg.token_dim = 5;
    cfg.height = 8;
    cfg.width = 8;
    cfg.patch_size = 4;
    auto g = make_stream(17, "head", {0});
    auto head = make_task_head(cfg, g);

    std::mt19937_64 rng(7);
    FusedSequence fused = bare_sequence(Tensor({4, 5}, random_vec(20, rng)));
    Tensor out = head->forward(fused);
    REQUIRE(out.shape() == Shape{1, 64});

    // Nearest-neighbor oracle: every pixel of a patch carries its token's logit.
    auto* seg = dynamic_cast<SegmentationHead*>(head.get());
    REQUIRE(seg != nullptr);
    Tensor w = seg->params()[0], b = seg->params()[1];
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const std::size_t token = static_cast<std::size_t>(y / 4) * 2 + (x / 4);
            long double logit = b.data()[0];
            for (std::size_t j = 0; j < 5; ++j)
                logit += static_cast<long double>(fused.seq.data()[token * 5 + j]) * w.data()[j];
            REQUIRE(out.data()[y * 8 + x] ==
                    Catch::Approx(static_cast<double>(logit)).epsilon(1e-12));
        }
}

TEST_CASE("segmentation ignores prefix and suffix rows in the spatial reshape") {
    HeadConfig cfg;
    cfg.kind = TaskKind::segmentation;
    cfg.token_dim = 5;
    cfg.height = 8;
    cfg.width = 8;
    cfg.patch_size = 4;
    auto g = make_stream(17, "head", {1});
    auto head = make_task_head(cfg, g);
    std::mt19937_64 rng(8);
    auto body = random_vec(4 * 5, rng);
    FusedSequence plain = bare_sequence(Tensor({4, 5}, body));

    std::vector<double> padded = random_vec(5, rng);  // prefix row
    padded.insert(padded.end(), body.begin(), body.end());
    auto suffix = random_vec(2 * 5, rng);
    padded.insert(padded.end(), suffix.begin(), suffix.end());
    FusedSequence wrapped{Tensor({7, 5}, padded), 1, 4, 2};

    REQUIRE(head->forward(plain).data() == head->forward(wrapped).data());
}

TEST_CASE("segmentation loss agrees with the direct binary cross-entropy formula") {
    HeadConfig cfg;
    cfg.kind = TaskKind::segmentation;
    cfg.token_dim = 4;
    cfg.height = 4;
    cfg.width = 4;
    cfg.patch_size = 4;
    auto g = make_stream(17, "head", {2});
    auto head = make_task_head(cfg, g);
    std::mt19937_64 rng(9);
    auto zv = random_vec(16, rng, -4.0, 4.0);
    Sample s;
    s.mask.resize(16);
    std::uniform_int_distribution<int> bit(0, 1);
    for (double& m : s.mask) m = bit(rng);
    long double acc = 0.0L;
    for (std::size_t i = 0; i < 16; ++i) {
        const long double sig = 1.0L / (1.0L + std::exp(-static_cast<long double>(zv[i])));
        acc += -(s.mask[i] * std::log(sig) + (1.0L - s.mask[i]) * std::log(1.0L - sig));
    }
    const double want = static_cast<double>(acc / 16.0L);
    REQUIRE(head->loss(Tensor({1, 16}, zv), s).item() == Catch::Approx(want).epsilon(1e-10));
}

TEST_CASE("segmentation evaluate thresholds logits at zero") {
    HeadConfig cfg;
    cfg.kind = TaskKind::segmentation;
    cfg.token_dim = 4;
    cfg.height = 4;
    cfg.width = 4;
    cfg.patch_size = 4;
    auto g = make_stream(17, "head", {3});
    auto head = make_task_head(cfg, g);
    Sample s;
    s.mask = {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    std::vector<double> logits(16, -2.0);
    logits[0] = 3.0;
    logits[1] = 0.5;
    logits[4] = 1.0;
    logits[5] = 2.0;  // predicted mask equals target
    auto metrics = head->evaluate({Tensor({1, 16}, logits)}, {&s});
    REQUIRE(metrics.at("dice") == Catch::Approx(1.0));
    REQUIRE(metrics.at("iou") == Catch::Approx(1.0));
}

TEST_CASE("super-resolution pixel shuffle matches a naive rearrangement oracle") {
    HeadConfig cfg;
    cfg.kind = TaskKind::super_resolution;
    cfg.token_dim = 5;
    cfg.height = 8;
    cfg.width = 8;
    cfg.patch_size = 4;
    cfg.sr_scale = 2;
    auto g = make_stream(19, "head", {0});
    auto head = make_task_head(cfg, g);

    std::mt19937_64 rng(10);
    FusedSequence fused = bare_sequence(Tensor({4, 5}, random_vec(20, rng)));
    Tensor out = head->forward(fused);
    REQUIRE(out.shape() == Shape{1, 16 * 16});

    auto* sr = dynamic_cast<SuperResolutionHead*>(head.get());
    REQUIRE(sr != nullptr);
    Tensor w = sr->params()[0], b = sr->params()[1];
    const int sp = 8;  // scale * patch
    // Naive oracle: compute each token's 8x8 block, then place it.
    std::vector<double> want(16 * 16, 0.0);
    for (int ty = 0; ty < 2; ++ty)
        for (int tx = 0; tx < 2; ++tx) {
            const std::size_t t = static_cast<std::size_t>(ty) * 2 + tx;
            for (int i = 0; i < sp; ++i)
                for (int j = 0; j < sp; ++j) {
                    const std::size_t col = static_cast<std::size_t>(i) * sp + j;
                    long double v = b.data()[col];
                    for (std::size_t d = 0; d < 5; ++d)
                        v += static_cast<long double>(fused.seq.data()[t * 5 + d]) *
                             w.data()[d * 64 + col];
                    want[static_cast<std::size_t>(ty * sp + i) * 16 + tx * sp + j] =
                        static_cast<double>(v);
                }
        }
    REQUIRE(oracle::max_abs_diff(out.data(), want) < 1e-12);
}

TEST_CASE("super-resolution loss is zero on a perfect prediction and matches MSE otherwise") {
    HeadConfig cfg;
    cfg.kind = TaskKind::super_resolution;
    cfg.token_dim = 4;
    cfg.height = 4;
    cfg.width = 4;
    cfg.patch_size = 4;
    cfg.sr_scale = 2;
    auto g = make_stream(19, "head", {1});
    auto head = make_task_head(cfg, g);
    std::mt19937_64 rng(11);
    Sample s;
    s.hr = Image(8, 8, 1);
    for (double& v : s.hr.data) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);

    Tensor perfect({1, 64}, s.hr.data);
    REQUIRE(head->loss(perfect, s).item() == 0.0);

    auto pv = random_vec(64, rng, 0.0, 1.0);
    long double acc = 0.0L;
    for (std::size_t i = 0; i < 64; ++i) {
        const long double d = static_cast<long double>(pv[i]) - s.hr.data[i];
        acc += d * d;
    }
    REQUIRE(head->loss(Tensor({1, 64}, pv), s).item() ==
            Catch::Approx(static_cast<double>(acc / 64.0L)).epsilon(1e-12));
}

TEST_CASE("super-resolution evaluate clamps into the unit range and caps PSNR") {
    HeadConfig cfg;
    cfg.kind = TaskKind::super_resolution;
    cfg.token_dim = 4;
    cfg.height = 8;
    cfg.width = 8;
    cfg.patch_size = 4;
    cfg.sr_scale = 1;
    auto g = make_stream(19, "head", {2});
    auto head = make_task_head(cfg, g);
    Sample s;
    s.hr = Image(8, 8, 1);
    for (double& v : s.hr.data) v = 1.0;
    std::vector<double> overshoot(64, 1.7);  // clamps to exactly the reference
    auto metrics = head->evaluate({Tensor({1, 64}, overshoot)}, {&s});
    REQUIRE(metrics.at("psnr") == Catch::Approx(99.0));
    REQUIRE(metrics.at("ssim") == Catch::Approx(1.0));
}

TEST_CASE("head losses are differentiable end to end") {
    std::mt19937_64 rng(12);
    const std::size_t L = 4, d = 5;
    auto body = random_vec(L * d, rng);

    HeadConfig base;
    base.token_dim = static_cast<int>(d);
    base.num_classes = 3;
    base.height = 8;
    base.width = 8;
    base.patch_size = 4;
    base.sr_scale = 2;

    Sample s;
    s.class_id = 1;
    s.mask.assign(64, 0.0);
    for (int i = 0; i < 20; ++i) s.mask[static_cast<std::size_t>(i) * 3 % 64] = 1.0;
    s.hr = Image(16, 16, 1);
    for (double& v : s.hr.data) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);

    for (TaskKind kind :
         {TaskKind::classification, TaskKind::segmentation, TaskKind::super_resolution}) {
        HeadConfig cfg = base;
        cfg.kind = kind;
        auto g = make_stream(23, "head", {static_cast<std::uint64_t>(kind)});
        auto head = make_task_head(cfg, g);
        auto loss_value = [&] {
            FusedSequence fused = bare_sequence(Tensor({L, d}, body));
            return head->loss(head->forward(fused), s);
        };
        backward(loss_value());
        for (Tensor& p : head->params()) {
            auto fd = oracle::finite_difference(
                [&](const std::vector<double>& vals) {
                    NoGradGuard off;
                    return eval_with(p, vals, [&] { return loss_value().item(); });
                },
                p.data());
            INFO("task " << head->task_name());
            REQUIRE(oracle::grads_close(p.grad(), fd));
        }
    }
}

TEST_CASE("all heads run through one task-agnostic code path") {
    std::mt19937_64 rng(13);
    const std::size_t L = 4, d = 5;

    HeadConfig base;
    base.token_dim = static_cast<int>(d);
    base.num_classes = 3;
    base.height = 8;
    base.width = 8;
    base.patch_size = 4;
    base.sr_scale = 2;

    Sample s;
    s.class_id = 0;
    s.mask.assign(64, 1.0);
    s.hr = Image(16, 16, 1);
    for (double& v : s.hr.data) v = 0.5;

    for (TaskKind kind :
         {TaskKind::classification, TaskKind::segmentation, TaskKind::super_resolution}) {
        HeadConfig cfg = base;
        cfg.kind = kind;
        auto g = make_stream(29, "head", {static_cast<std::uint64_t>(kind)});
        auto head = make_task_head(cfg, g);
        // Identical orchestration for every kind: forward, loss, evaluate.
        FusedSequence fused = bare_sequence(Tensor({L, d}, random_vec(L * d, rng)));
        Tensor pred = head->forward(fused);
        Tensor l = head->loss(pred, s);
        REQUIRE(std::isfinite(l.item()));
        auto metrics = head->evaluate({pred}, {&s});
        REQUIRE(metrics.size() == 2);
        for (const auto& [name, value] : metrics) {
            REQUIRE_FALSE(name.empty());
            REQUIRE(std::isfinite(value));
        }
    }
}

TEST_CASE("cloned heads are independent deep copies") {
    HeadConfig cfg;
    cfg.kind = TaskKind::classification;
    cfg.token_dim = 4;
    cfg.num_classes = 3;
    auto g = make_stream(31, "head", {0});
    auto head = make_task_head(cfg, g);
    auto copy = head->clone();
    REQUIRE(copy->params()[0].data() == head->params()[0].data());
    copy->params()[0].mutable_data()[0] += 1.0;
    REQUIRE(copy->params()[0].data()[0] != head->params()[0].data()[0]);
}

TEST_CASE("task names round-trip through the factory") {
    for (const char* name : {"classification", "segmentation", "super_resolution"})
        REQUIRE(to_string(task_kind_from_string(name)) == name);
    REQUIRE_THROWS_AS(task_kind_from_string("detection"), ConfigError);
}
