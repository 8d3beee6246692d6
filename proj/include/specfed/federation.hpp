#pragma once

// Federated round orchestration: participant sampling, knowledge-bank
// snapshot broadcast, local training with spectral alignment, spectral-token
// upload, sample-weighted aggregation of the shared parameters, and bank
// maintenance. The client/server boundary admits only parameter values,
// spectral tokens, retrieval logs, and metric records — never image data.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <istream>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "specfed/bank.hpp"
#include "specfed/error.hpp"
#include "specfed/fusion.hpp"
#include "specfed/models.hpp"
#include "specfed/rng.hpp"
#include "specfed/spectral.hpp"
#include "specfed/synthdata.hpp"
#include "specfed/tensor.hpp"

namespace specfed {

// How a client turns the bank snapshot into guidance: nearest prototypes by
// cosine similarity, or the bank-wide mean (the retrieval ablation).
enum class RetrievalMode { top_k, global_mean };

inline RetrievalMode retrieval_mode_from_string(const std::string& s) {
    if (s == "top_k") return RetrievalMode::top_k;
    if (s == "global_mean") return RetrievalMode::global_mean;
    throw ConfigError("federation.retrieval", "unknown retrieval mode '" + s + "'");
}

struct RoundConfig {
    double participation_ratio = 1.0;
    int local_epochs = 2;
    double lr = 0.05;
    double lambda_align = 0.1;
    int top_k = 2;
    int batch_size = 16;
    int prune_window = 5;
    int workers = 1;
    RetrievalMode retrieval = RetrievalMode::top_k;
    std::uint64_t seed = 0;
};

inline void validate(const RoundConfig& rc) {
    if (!(rc.participation_ratio > 0.0) || rc.participation_ratio > 1.0)
        throw ConfigError("federation.participation", "must lie in (0, 1]");
    if (rc.local_epochs < 1) throw ConfigError("federation.epochs", "must be >= 1");
    if (!(rc.lr > 0.0)) throw ConfigError("federation.lr", "must be positive");
    if (rc.lambda_align < 0.0) throw ConfigError("federation.lambda", "must be >= 0");
    if (rc.top_k < 1) throw ConfigError("federation.top_k", "must be >= 1");
    if (rc.batch_size < 1) throw ConfigError("federation.batch_size", "must be >= 1");
    if (rc.prune_window < 1) throw ConfigError("federation.prune_window", "must be >= 1");
    if (rc.workers < 1) throw ConfigError("federation.workers", "must be >= 1");
}

struct MetricRecord {
    int round = 0;
    int client_id = 0;
    std::string task;
    std::string metric;
    double value = 0.0;
};

inline bool operator==(const MetricRecord& a, const MetricRecord& b) {
    return a.round == b.round && a.client_id == b.client_id && a.task == b.task &&
           a.metric == b.metric && a.value == b.value;
}

struct RoundReport {
    int round = 0;
    std::vector<int> participants;
    std::size_t bank_size = 0;
    std::vector<MetricRecord> records;
};

// Everything a client sends upstream after a round of local work. The type
// carries parameter values, one spectral token, retrieval logs, and metrics;
// image data has no representation here.
struct ClientUpdate {
    int client_id = -1;
    std::size_t n_k = 0;
    std::vector<std::vector<double>> shared_values;
    SpectralToken token;
    std::vector<RetrievalResult> retrievals;
    std::vector<MetricRecord> records;
};

struct ClientState {
    int client_id = -1;
    std::vector<int> shard;         // indices into the local dataset
    std::vector<int> modality_mix;  // per-modality sample counts
    std::size_t n_k = 0;
    Backbone backbone;
    SpectralTokenizer tokenizer;
    FusionModule fusion;
    std::unique_ptr<TaskHead> head;
    std::vector<Tensor> descriptor_cache;  // parallel to shard, built lazily

    ClientState(int id, std::vector<int> shard_indices, std::vector<int> mix, Backbone bb,
                SpectralTokenizer tok, FusionModule fus, std::unique_ptr<TaskHead> hd)
        : client_id(id),
          shard(std::move(shard_indices)),
          modality_mix(std::move(mix)),
          n_k(shard.size()),
          backbone(std::move(bb)),
          tokenizer(std::move(tok)),
          fusion(std::move(fus)),
          head(std::move(hd)) {}
};

// Canonical order of the federated (shared) parameters: backbone, tokenizer,
// fusion projections. Heads and suffix tokens stay personal.
inline std::vector<Tensor> shared_params(ClientState& c) {
    std::vector<Tensor> out = c.backbone.params();
    for (Tensor& t : c.tokenizer.params()) out.push_back(t);
    for (Tensor& t : c.fusion.shared_params()) out.push_back(t);
    return out;
}

inline std::vector<Tensor> trainable_params(ClientState& c) {
    std::vector<Tensor> out = shared_params(c);
    for (Tensor& t : c.head->params()) out.push_back(t);
    for (Tensor& t : c.fusion.personal_params()) out.push_back(t);
    return out;
}

inline std::vector<std::vector<double>> values_of(const std::vector<Tensor>& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const Tensor& p : params) out.push_back(p.data());
    return out;
}

inline void assign_values(std::vector<Tensor> params,
                          const std::vector<std::vector<double>>& values) {
    if (params.size() != values.size())
        throw ContractError("assign_values: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].numel() != values[i].size())
            throw ContractError("assign_values: parameter size mismatch at index " +
                                std::to_string(i));
        params[i].mutable_data() = values[i];
    }
}

inline ClientState make_client(int id, std::vector<int> shard, const Dataset& data,
                               const BackboneConfig& bcfg, const TokenizerConfig& tcfg,
                               const FusionConfig& fcfg, const HeadConfig& hcfg,
                               std::uint64_t seed) {
    std::vector<int> mix(static_cast<std::size_t>(std::max(1, data.config.num_modalities)), 0);
    for (int idx : shard) {
        if (idx < 0 || idx >= static_cast<int>(data.samples.size()))
            throw ContractError("make_client: shard index out of range");
        const int m = data.samples[static_cast<std::size_t>(idx)].modality_id;
        if (m >= 0 && m < static_cast<int>(mix.size())) ++mix[static_cast<std::size_t>(m)];
    }
    auto bg = make_stream(seed, "init_backbone", {static_cast<std::uint64_t>(id)});
    auto tg = make_stream(seed, "init_tokenizer", {static_cast<std::uint64_t>(id)});
    auto fg = make_stream(seed, "init_fusion", {static_cast<std::uint64_t>(id)});
    auto hg = make_stream(seed, "init_head", {static_cast<std::uint64_t>(id)});
    return ClientState(id, std::move(shard), std::move(mix), Backbone(bcfg, bg),
                       SpectralTokenizer(tcfg, tg), FusionModule(fcfg, fg),
                       make_task_head(hcfg, hg));
}

// ---------------------------------------------------------------------------
// Round-level operations
// ---------------------------------------------------------------------------

// ceil(ratio * K) distinct clients, uniform without replacement, ascending id.
inline std::vector<int> sample_clients(int num_clients, double ratio, std::mt19937_64& g) {
    if (num_clients < 1) throw ConfigError("federation.clients", "need at least one client");
    if (!(ratio > 0.0) || ratio > 1.0)
        throw ConfigError("federation.participation", "must lie in (0, 1]");
    const int take = std::min(
        num_clients, std::max(1, static_cast<int>(std::ceil(ratio * num_clients))));
    std::vector<int> ids(static_cast<std::size_t>(num_clients));
    std::iota(ids.begin(), ids.end(), 0);
    for (int i = 0; i < take; ++i) {
        const int remaining = num_clients - i;
        int j = i + static_cast<int>(uniform01(g) * remaining);
        if (j >= num_clients) j = num_clients - 1;  // guard the u == 1.0 edge
        std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
    }
    ids.resize(static_cast<std::size_t>(take));
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Squared L2 distance between a client token and its alignment target (the
// retrieved-prototype barycenter). The target is a constant; gradients flow
// only through the token, hence into the tokenizer weights.
inline Tensor spalign_loss(const Tensor& token, const Tensor& target) {
    if (token.shape() != target.shape())
        throw DimensionError("spalign_loss: token and target shapes differ");
    Tensor d = sub(token, target);
    return sum_all(mul(d, d));
}

// Element-wise weighted average of structurally identical parameter sets,
// weights n_k normalized over the participants.
inline std::vector<std::vector<double>> aggregate_values(
    const std::vector<std::vector<std::vector<double>>>& updates,
    const std::vector<double>& weights) {
    if (updates.empty()) throw ContractError("aggregate_values: no updates");
    if (updates.size() != weights.size())
        throw ContractError("aggregate_values: update/weight count mismatch");
    double total = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw ContractError("aggregate_values: weights must be positive");
        total += w;
    }
    std::vector<std::vector<double>> out(updates[0].size());
    for (std::size_t p = 0; p < out.size(); ++p)
        out[p].assign(updates[0][p].size(), 0.0);
    for (std::size_t k = 0; k < updates.size(); ++k) {
        if (updates[k].size() != out.size())
            throw ContractError("aggregate_values: parameter count mismatch");
        const double w = weights[k] / total;
        for (std::size_t p = 0; p < out.size(); ++p) {
            if (updates[k][p].size() != out[p].size())
                throw ContractError("aggregate_values: parameter size mismatch");
            for (std::size_t i = 0; i < out[p].size(); ++i) out[p][i] += w * updates[k][p][i];
        }
    }
    return out;
}

namespace detail {

// Portable Fisher-Yates built on uniform01 so results do not depend on the
// standard library's distribution implementations.
inline std::vector<std::size_t> shuffled_order(std::size_t n, std::mt19937_64& g) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const std::size_t remaining = n - i;
        std::size_t j = i + static_cast<std::size_t>(uniform01(g) * remaining);
        if (j >= n) j = n - 1;
        std::swap(order[i], order[j]);
    }
    return order;
}

// Per-sample guidance pulled from the immutable snapshot: the prototype rows
// fed to fusion, the alignment target, and the retrieval log entry (absent
// on cold start, when the client falls back to its own token).
struct Guidance {
    Tensor prototypes;
    Tensor align_target;
    bool logged = false;
    RetrievalResult log;
};

inline Guidance consult_snapshot(const KnowledgeBank::Snapshot& snap,
                                 const std::vector<double>& token_values,
                                 const RoundConfig& rc) {
    Guidance out;
    const std::size_t d = token_values.size();
    if (snap.values.empty()) {
        // Cold start: self-retrieval. The client's own token stands in for the
        // missing prototypes, replicated to the configured row count.
        const std::size_t k = static_cast<std::size_t>(rc.top_k);
        std::vector<double> flat;
        flat.reserve(k * d);
        for (std::size_t i = 0; i < k; ++i)
            flat.insert(flat.end(), token_values.begin(), token_values.end());
        out.prototypes = Tensor({k, d}, std::move(flat));
        out.align_target = Tensor({1, d}, token_values);
        return out;
    }
    if (rc.retrieval == RetrievalMode::top_k) {
        RetrievalResult rr =
            KnowledgeBank::query_snapshot(snap, token_values, static_cast<std::size_t>(rc.top_k));
        out.prototypes = rr.matrix();
        out.align_target = Tensor({1, d}, barycenter(rr));
        out.logged = true;
        out.log = std::move(rr);
        return out;
    }
    // Bank-wide mean: one prototype row, every entry counts as consulted.
    std::vector<double> mean(d, 0.0);
    for (const auto& v : snap.values) {
        if (v.size() != d) throw DimensionError("consult_snapshot: token dimension mismatch");
        for (std::size_t i = 0; i < d; ++i) mean[i] += v[i];
    }
    for (double& m : mean) m /= static_cast<double>(snap.values.size());
    out.prototypes = Tensor({1, d}, mean);
    out.align_target = Tensor({1, d}, std::move(mean));
    out.logged = true;
    out.log.indices.resize(snap.values.size());
    std::iota(out.log.indices.begin(), out.log.indices.end(), std::size_t{0});
    return out;
}

inline void ensure_descriptor_cache(ClientState& c, const Dataset& data) {
    if (c.descriptor_cache.size() == c.shard.size()) return;
    c.descriptor_cache.clear();
    c.descriptor_cache.reserve(c.shard.size());
    for (int idx : c.shard)
        c.descriptor_cache.push_back(
            c.tokenizer.descriptors(data.samples[static_cast<std::size_t>(idx)].image));
}

}  // namespace detail

// One client's round of local work against an immutable bank snapshot:
// E epochs of SGD on task loss + lambda * alignment, spectral-token upload
// (re-normalized mean of the final epoch's per-sample tokens), and metrics
// over the local shard.
inline ClientUpdate local_update(ClientState& client, const Dataset& data,
                                 const KnowledgeBank::Snapshot& snapshot, const RoundConfig& rc,
                                 int round) {
    validate(rc);
    if (client.shard.empty())
        throw ConfigError("federation.clients",
                          "client " + std::to_string(client.client_id) + " has an empty shard");
    detail::ensure_descriptor_cache(client, data);

    const bool fusion_reads_bank = client.fusion.needs_retrieval();
    const bool aligns = rc.lambda_align > 0.0;
    const bool token_in_graph = fusion_reads_bank || aligns;

    ClientUpdate up;
    up.client_id = client.client_id;
    up.n_k = client.n_k;

    std::vector<std::vector<double>> final_tokens;
    double final_loss_sum = 0.0;
    int final_batches = 0;

    for (int epoch = 0; epoch < rc.local_epochs; ++epoch) {
        const bool final_epoch = epoch == rc.local_epochs - 1;
        auto sg = make_stream(rc.seed, "shuffle",
                              {static_cast<std::uint64_t>(round),
                               static_cast<std::uint64_t>(client.client_id),
                               static_cast<std::uint64_t>(epoch)});
        const std::vector<std::size_t> order = detail::shuffled_order(client.shard.size(), sg);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(rc.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(rc.batch_size));
            Tensor acc;
            for (std::size_t b = start; b < stop; ++b) {
                const std::size_t pos = order[b];
                const Sample& sample = data.samples[static_cast<std::size_t>(client.shard[pos])];
                Tensor token;
                if (token_in_graph)
                    token = client.tokenizer.tokenize_descriptors(client.descriptor_cache[pos])
                                .token;
                detail::Guidance guide;
                if (fusion_reads_bank || aligns) {
                    guide = detail::consult_snapshot(snapshot, token.data(), rc);
                    if (guide.logged) up.retrievals.push_back(guide.log);
                }
                FusedSequence fused =
                    client.fusion.fuse(client.backbone.forward(sample.image), guide.prototypes);
                Tensor loss = client.head->loss(client.head->forward(fused), sample);
                if (aligns)
                    loss = add(loss,
                               scale(spalign_loss(token, guide.align_target), rc.lambda_align));
                if (final_epoch) {
                    if (token_in_graph) {
                        final_tokens.push_back(token.data());
                    } else {
                        NoGradGuard off;
                        final_tokens.push_back(
                            client.tokenizer.tokenize_descriptors(client.descriptor_cache[pos])
                                .token.data());
                    }
                }
                acc = acc.defined() ? add(acc, loss) : loss;
            }
            Tensor batch_loss = scale(acc, 1.0 / static_cast<double>(stop - start));
            if (final_epoch) {
                final_loss_sum += batch_loss.item();
                ++final_batches;
            }
            backward(batch_loss);
            sgd_step(trainable_params(client), rc.lr);
        }
    }

    // Upload token: re-normalized mean of the final epoch's per-sample tokens.
    std::vector<double> mean(final_tokens[0].size(), 0.0);
    for (const auto& t : final_tokens)
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += t[i];
    double norm = 0.0;
    for (double& m : mean) {
        m /= static_cast<double>(final_tokens.size());
        norm += m * m;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        std::fill(mean.begin(), mean.end(), 0.0);
        mean[0] = 1.0;
    } else {
        for (double& m : mean) m /= norm;
    }
    up.token = SpectralToken{std::move(mean), client.client_id, round};

    // Post-update metrics over the local shard. Evaluation consults the
    // snapshot the same way training does but leaves the usage counters
    // untouched (they track training-time retrieval only).
    {
        NoGradGuard off;
        std::vector<Tensor> predictions;
        std::vector<const Sample*> samples;
        predictions.reserve(client.shard.size());
        samples.reserve(client.shard.size());
        for (std::size_t pos = 0; pos < client.shard.size(); ++pos) {
            const Sample& sample = data.samples[static_cast<std::size_t>(client.shard[pos])];
            Tensor token;
            detail::Guidance guide;
            if (fusion_reads_bank) {
                token = client.tokenizer.tokenize_descriptors(client.descriptor_cache[pos]).token;
                guide = detail::consult_snapshot(snapshot, token.data(), rc);
            }
            FusedSequence fused =
                client.fusion.fuse(client.backbone.forward(sample.image), guide.prototypes);
            predictions.push_back(client.head->forward(fused));
            samples.push_back(&sample);
        }
        for (const auto& [name, value] : client.head->evaluate(predictions, samples))
            up.records.push_back(
                {round, client.client_id, client.head->task_name(), name, value});
    }
    up.records.push_back({round, client.client_id, client.head->task_name(), "train_loss",
                          final_loss_sum / static_cast<double>(final_batches)});

    up.shared_values = values_of(shared_params(client));
    return up;
}

// ---------------------------------------------------------------------------
// Federation: server state plus the round loop
// ---------------------------------------------------------------------------

struct FederationConfig {
    int num_clients = 4;
    RoundConfig round;
    BankConfig bank;
    BackboneConfig backbone;
    TokenizerConfig tokenizer;
    FusionConfig fusion;
};

class Federation {
  public:
    Federation(const FederationConfig& cfg, std::shared_ptr<const Dataset> data,
               std::vector<std::vector<int>> shards, std::vector<HeadConfig> head_cfgs)
        : cfg_(cfg), data_(std::move(data)), bank_(cfg.bank) {
        validate(cfg_.round);
        if (cfg_.num_clients < 1) throw ConfigError("federation.clients", "need >= 1 client");
        if (shards.size() != static_cast<std::size_t>(cfg_.num_clients))
            throw ConfigError("federation.clients", "shard list does not match client count");
        if (head_cfgs.size() != static_cast<std::size_t>(cfg_.num_clients))
            throw ContractError("federation: head config list does not match client count");
        std::vector<char> seen(data_->samples.size(), 0);
        for (std::size_t k = 0; k < shards.size(); ++k) {
            if (shards[k].empty())
                throw ConfigError("federation.clients",
                                  "client " + std::to_string(k) + " has an empty shard");
            for (int idx : shards[k]) {
                if (idx < 0 || idx >= static_cast<int>(seen.size()) ||
                    seen[static_cast<std::size_t>(idx)]++)
                    throw ContractError("federation: shards must be disjoint and in range");
            }
        }
        clients_.reserve(shards.size());
        for (std::size_t k = 0; k < shards.size(); ++k)
            clients_.push_back(make_client(static_cast<int>(k), std::move(shards[k]), *data_,
                                           cfg_.backbone, cfg_.tokenizer, cfg_.fusion,
                                           head_cfgs[k], cfg_.round.seed));
        auto bg = make_stream(cfg_.round.seed, "global_backbone", {});
        auto tg = make_stream(cfg_.round.seed, "global_tokenizer", {});
        auto fg = make_stream(cfg_.round.seed, "global_fusion", {});
        Backbone gb(cfg_.backbone, bg);
        SpectralTokenizer gt(cfg_.tokenizer, tg);
        FusionModule gf(cfg_.fusion, fg);
        std::vector<Tensor> globals = gb.params();
        for (Tensor& t : gt.params()) globals.push_back(t);
        for (Tensor& t : gf.shared_params()) globals.push_back(t);
        global_values_ = values_of(globals);
    }

    int round() const { return round_; }
    const KnowledgeBank& bank() const { return bank_; }
    const Dataset& data() const { return *data_; }
    std::size_t num_clients() const { return clients_.size(); }
    ClientState& client(std::size_t k) { return clients_.at(k); }
    const std::vector<std::vector<double>>& global_values() const { return global_values_; }
    const FederationConfig& config() const { return cfg_; }

    RoundReport run_round() {
        const int r = round_;
        auto pg = make_stream(cfg_.round.seed, "participation", {static_cast<std::uint64_t>(r)});
        const std::vector<int> participants =
            sample_clients(cfg_.num_clients, cfg_.round.participation_ratio, pg);
        const KnowledgeBank::Snapshot snapshot = bank_.snapshot();

        for (int k : participants)
            assign_values(shared_params(clients_[static_cast<std::size_t>(k)]), global_values_);

        std::vector<ClientUpdate> updates(participants.size());
        run_clients(participants, snapshot, r, updates);

        // Server-side mutation, serialized in ascending client id.
        for (const ClientUpdate& up : updates)
            for (const RetrievalResult& rr : up.retrievals) bank_.apply_retrieval(rr);
        std::vector<SpectralToken> tokens;
        tokens.reserve(updates.size());
        for (const ClientUpdate& up : updates) tokens.push_back(up.token);
        bank_.insert_and_project(std::move(tokens));
        if ((r + 1) % cfg_.round.prune_window == 0) bank_.prune(cfg_.round.prune_window);

        std::vector<std::vector<std::vector<double>>> shared;
        std::vector<double> weights;
        shared.reserve(updates.size());
        for (const ClientUpdate& up : updates) {
            shared.push_back(up.shared_values);
            weights.push_back(static_cast<double>(up.n_k));
        }
        global_values_ = aggregate_values(shared, weights);

        RoundReport report;
        report.round = r;
        report.participants = participants;
        report.bank_size = bank_.size();
        for (const ClientUpdate& up : updates)
            report.records.insert(report.records.end(), up.records.begin(), up.records.end());

        bank_.advance_round();
        ++round_;
        return report;
    }

    // ---- checkpointing ----------------------------------------------------

    void save(std::ostream& out, std::uint64_t config_hash) const {
        out.write("SPFD", 4);
        put<std::uint32_t>(out, 1);
        put<std::uint64_t>(out, config_hash);
        put<std::int64_t>(out, round_);
        put<std::uint64_t>(out, global_values_.size());
        for (const auto& v : global_values_) put_doubles(out, v);
        put<std::uint64_t>(out, clients_.size());
        for (const ClientState& c : clients_) {
            put<std::int32_t>(out, c.client_id);
            put<std::uint64_t>(out, c.shard.size());
            for (int idx : c.shard) put<std::int32_t>(out, idx);
            auto params = trainable_params(const_cast<ClientState&>(c));
            put<std::uint64_t>(out, params.size());
            for (const Tensor& p : params) put_doubles(out, p.data());
        }
        bank_.save(out);
    }

    void restore(std::istream& in, std::uint64_t config_hash) {
        char magic[4];
        in.read(magic, 4);
        if (!in || std::string(magic, 4) != "SPFD")
            throw ContractError("checkpoint: bad magic header");
        if (get<std::uint32_t>(in) != 1)
            throw ContractError("checkpoint: unsupported schema version");
        if (get<std::uint64_t>(in) != config_hash)
            throw ContractError("checkpoint: configuration does not match");
        round_ = static_cast<int>(get<std::int64_t>(in));
        const auto n_globals = get<std::uint64_t>(in);
        if (n_globals != global_values_.size())
            throw ContractError("checkpoint: global parameter count mismatch");
        for (auto& v : global_values_) get_doubles(in, v);
        if (get<std::uint64_t>(in) != clients_.size())
            throw ContractError("checkpoint: client count mismatch");
        for (ClientState& c : clients_) {
            if (get<std::int32_t>(in) != c.client_id)
                throw ContractError("checkpoint: client id mismatch");
            if (get<std::uint64_t>(in) != c.shard.size())
                throw ContractError("checkpoint: shard size mismatch");
            for (int idx : c.shard)
                if (get<std::int32_t>(in) != idx)
                    throw ContractError("checkpoint: shard content mismatch");
            auto params = trainable_params(c);
            if (get<std::uint64_t>(in) != params.size())
                throw ContractError("checkpoint: parameter count mismatch");
            for (Tensor& p : params) {
                std::vector<double> v = p.data();
                get_doubles(in, v);
                p.mutable_data() = v;
            }
        }
        bank_ = KnowledgeBank::load(in);
        if (!in) throw ContractError("checkpoint: truncated stream");
    }

  private:
    void run_clients(const std::vector<int>& participants,
                     const KnowledgeBank::Snapshot& snapshot, int round,
                     std::vector<ClientUpdate>& updates) {
        struct Failure {
            int client_id;
            std::exception_ptr error;
        };
        std::vector<Failure> failures(participants.size());
        auto work = [&](std::size_t i) {
            const int k = participants[i];
            try {
                updates[i] = local_update(clients_[static_cast<std::size_t>(k)], *data_, snapshot,
                                          cfg_.round, round);
            } catch (...) {
                failures[i] = {k, std::current_exception()};
            }
        };
        const int workers =
            std::min<int>(cfg_.round.workers, static_cast<int>(participants.size()));
        if (workers <= 1) {
            for (std::size_t i = 0; i < participants.size(); ++i) work(i);
        } else {
            std::atomic<std::size_t> next{0};
            std::vector<std::thread> pool;
            pool.reserve(static_cast<std::size_t>(workers));
            for (int w = 0; w < workers; ++w)
                pool.emplace_back([&] {
                    for (std::size_t i = next.fetch_add(1); i < participants.size();
                         i = next.fetch_add(1))
                        work(i);
                });
            for (std::thread& t : pool) t.join();
        }
        for (const Failure& f : failures) {
            if (!f.error) continue;
            const std::string who = "client " + std::to_string(f.client_id) + ": ";
            try {
                std::rethrow_exception(f.error);
            } catch (const ConfigError& e) {
                throw ConfigError(e.key_path(), who + e.what());
            } catch (const std::exception& e) {
                throw ContractError(who + e.what());
            }
        }
    }

    template <typename T>
    static void put(std::ostream& out, const T& v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    template <typename T>
    static T get(std::istream& in) {
        T v{};
        in.read(reinterpret_cast<char*>(&v), sizeof(T));
        return v;
    }
    static void put_doubles(std::ostream& out, const std::vector<double>& v) {
        put<std::uint64_t>(out, v.size());
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    static void get_doubles(std::istream& in, std::vector<double>& v) {
        const auto n = get<std::uint64_t>(in);
        if (n != v.size()) throw ContractError("checkpoint: parameter size mismatch");
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
    }

    FederationConfig cfg_;
    std::shared_ptr<const Dataset> data_;
    std::vector<ClientState> clients_;
    KnowledgeBank bank_;
    std::vector<std::vector<double>> global_values_;
    int round_ = 0;
};

}  // namespace specfed
