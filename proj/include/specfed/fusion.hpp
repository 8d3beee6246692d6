#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "specfed/error.hpp"
#include "specfed/rng.hpp"
#include "specfed/tensor.hpp"

namespace specfed {

// ---------------------------------------------------------------------------
// Embedding-wise cross-attention
// ---------------------------------------------------------------------------

// Z = softmax_rows(Q K^T / sqrt(d_h)) V with Q = r W_Q, K = S_g W_K,
// V = S_g W_V. Single head; each output row is a convex combination of the
// rows of V, so Z always lies in their convex hull.
inline Tensor cross_attention(const Tensor& r, const Tensor& S_g, const Tensor& W_Q,
                              const Tensor& W_K, const Tensor& W_V) {
    if (S_g.shape().size() != 2 || S_g.shape()[0] < 1)
        throw ContractError("cross_attention: need at least one retrieved prototype row");
    if (r.shape().size() != 2 || r.shape()[1] != W_Q.shape()[0] || S_g.shape()[1] != W_K.shape()[0] ||
        S_g.shape()[1] != W_V.shape()[0])
        throw DimensionError("cross_attention: token/projection dimensions disagree");
    if (W_Q.shape()[1] != W_K.shape()[1])
        throw DimensionError("cross_attention: W_Q and W_K must share the head dimension");
    const double d_h = static_cast<double>(W_Q.shape()[1]);
    Tensor Q = matmul(r, W_Q);
    Tensor K = matmul(S_g, W_K);
    Tensor V = matmul(S_g, W_V);
    Tensor A = softmax_rows(scale(matmul(Q, transpose(K)), 1.0 / std::sqrt(d_h)));
    return matmul(A, V);
}

// Ordered concatenation [Z || r || c]; every input row appears bit-exactly at
// its mapped position. Z and c may be empty (zero rows).
inline Tensor prefix_suffix_concat(const Tensor& Z, const Tensor& r, const Tensor& c) {
    const std::size_t d = r.shape()[1];
    if ((Z.defined() && Z.numel() > 0 && Z.shape()[1] != d) ||
        (c.defined() && c.numel() > 0 && c.shape()[1] != d))
        throw DimensionError("prefix_suffix_concat: embedding dimensions disagree");
    std::vector<Tensor> parts;
    if (Z.defined() && Z.numel() > 0) parts.push_back(Z);
    parts.push_back(r);
    if (c.defined() && c.numel() > 0) parts.push_back(c);
    if (parts.size() == 1) return r;
    return concat_rows(parts);
}

// ---------------------------------------------------------------------------
// Fusion module: retrieval-conditioned sequence assembly
// ---------------------------------------------------------------------------

enum class FusionKind {
    full,        // cross-attention prefix + learnable suffix tokens
    film,        // per-channel affine modulation from mean(S_g); suffix kept
    projection,  // fused signal folded in additively, token count preserved
    identity,    // sequence passes through untouched (plain-averaging baseline)
};

enum class PrefixMode {
    pooled,  // mean-pool Z into a single prefix token
    full,    // prepend all L fused rows
};

inline FusionKind fusion_kind_from_string(const std::string& s) {
    if (s == "full") return FusionKind::full;
    if (s == "film") return FusionKind::film;
    if (s == "projection") return FusionKind::projection;
    if (s == "identity") return FusionKind::identity;
    throw ConfigError("model.fusion", "unknown fusion kind '" + s + "'");
}

struct FusionConfig {
    int token_dim = 32;   // d
    int head_dim = 32;    // d_h; an output projection maps back to d when != d
    int suffix_count = 2; // p learnable client-specific tokens
    PrefixMode prefix_mode = PrefixMode::pooled;
    FusionKind kind = FusionKind::full;
};

struct FusedSequence {
    Tensor seq;  // (prefix + backbone + suffix) x d
    std::size_t prefix_rows = 0;
    std::size_t backbone_rows = 0;
    std::size_t suffix_rows = 0;
};

class FusionModule {
public:
    FusionModule() = default;

    FusionModule(const FusionConfig& cfg, std::mt19937_64& init_stream) : cfg_(cfg) {
        if (cfg.token_dim < 1) throw ConfigError("model.token_dim", "token dimension must be positive");
        if (cfg.head_dim < 1) throw ConfigError("model.head_dim", "head dimension must be positive");
        if (cfg.suffix_count < 0)
            throw ConfigError("model.suffix_count", "suffix token count cannot be negative");
        const std::size_t d = static_cast<std::size_t>(cfg.token_dim);
        const std::size_t dh = static_cast<std::size_t>(cfg.head_dim);
        const double ws = 1.0 / std::sqrt(static_cast<double>(d));
        switch (cfg.kind) {
            case FusionKind::full:
            case FusionKind::projection:
                W_Q_ = Tensor::randn({d, dh}, init_stream, ws);
                W_K_ = Tensor::randn({d, dh}, init_stream, ws);
                W_V_ = Tensor::randn({d, dh}, init_stream, ws);
                if (dh != d)
                    W_O_ = Tensor::randn({dh, d}, init_stream,
                                         1.0 / std::sqrt(static_cast<double>(dh)));
                if (cfg.kind == FusionKind::projection)
                    W_proj_ = Tensor::randn({d, d}, init_stream, ws);
                break;
            case FusionKind::film:
                W_gamma_ = Tensor::randn({d, d}, init_stream, ws);
                W_beta_ = Tensor::randn({d, d}, init_stream, ws);
                break;
            case FusionKind::identity:
                break;
        }
        if (wants_suffix())
            suffix_ = Tensor::randn({static_cast<std::size_t>(cfg.suffix_count), d}, init_stream, 0.02);
    }

    const FusionConfig& config() const { return cfg_; }
    bool needs_retrieval() const { return cfg_.kind != FusionKind::identity; }

    // Shared parameters participate in federated aggregation; the suffix
    // tokens are client-personal and never leave the client.
    std::vector<Tensor> shared_params() {
        std::vector<Tensor> out;
        for (Tensor* t : {&W_Q_, &W_K_, &W_V_, &W_O_, &W_proj_, &W_gamma_, &W_beta_})
            if (t->defined()) out.push_back(*t);
        return out;
    }
    std::vector<Tensor> personal_params() {
        std::vector<Tensor> out;
        if (suffix_.defined()) out.push_back(suffix_);
        return out;
    }

    Tensor& suffix_tokens() { return suffix_; }

    // Assembles the task sequence from backbone tokens and retrieved
    // prototypes. S_g is ignored by the identity kind.
    FusedSequence fuse(const Tensor& r, const Tensor& S_g) const {
        const std::size_t L = r.shape()[0];
        switch (cfg_.kind) {
            case FusionKind::identity:
                return {r, 0, L, 0};
            case FusionKind::full: {
                Tensor Z = project_out(cross_attention(r, S_g, W_Q_, W_K_, W_V_));
                Tensor prefix = cfg_.prefix_mode == PrefixMode::pooled ? mean_rows(Z) : Z;
                Tensor seq = prefix_suffix_concat(prefix, r, suffix_);
                return {seq, prefix.shape()[0], L, suffix_rows()};
            }
            case FusionKind::film: {
                // Scale/shift every token channel-wise from the prototype mean.
                Tensor m = mean_rows(S_g);  // 1 x d
                Tensor gamma = matmul(m, W_gamma_);
                Tensor beta = matmul(m, W_beta_);
                Tensor ones = Tensor::full({1, static_cast<std::size_t>(cfg_.token_dim)}, 1.0);
                Tensor modulated = add_rowvec(mul_rowvec(r, add(ones, gamma)), beta);
                Tensor seq = prefix_suffix_concat(Tensor(), modulated, suffix_);
                return {seq, 0, L, suffix_rows()};
            }
            case FusionKind::projection: {
                // No prompt structure: the pooled fused signal enters
                // additively and a linear layer keeps the token count at L.
                Tensor Z = project_out(cross_attention(r, S_g, W_Q_, W_K_, W_V_));
                Tensor seq = matmul(add_rowvec(r, mean_rows(Z)), W_proj_);
                return {seq, 0, L, 0};
            }
        }
        throw ContractError("fuse: unreachable fusion kind");
    }

private:
    bool wants_suffix() const {
        return (cfg_.kind == FusionKind::full || cfg_.kind == FusionKind::film) &&
               cfg_.suffix_count > 0;
    }
    std::size_t suffix_rows() const { return wants_suffix() ? suffix_.shape()[0] : 0; }

    Tensor project_out(const Tensor& Z) const { return W_O_.defined() ? matmul(Z, W_O_) : Z; }

    FusionConfig cfg_;
    Tensor W_Q_, W_K_, W_V_, W_O_;  // attention projections (+ optional d_h -> d)
    Tensor W_proj_;                 // projection-kind output map
    Tensor W_gamma_, W_beta_;       // film-kind modulation maps
    Tensor suffix_;                 // p x d client-personal tokens
};

}  // namespace specfed
