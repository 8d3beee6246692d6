#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "specfed/error.hpp"
#include "specfed/spectral.hpp"
#include "specfed/tensor.hpp"

namespace specfed {

// ---------------------------------------------------------------------------
// Global spectral knowledge bank
//
// Server-side store of prototype tokens. Retrieval is exact cosine top-k over
// an insertion-ordered scan (the bank stays small enough that the scan is
// both the implementation and the oracle). Insertion projects every entry
// back into the radius-rho ball; low retrieval frequency over a sliding
// round window prunes stale prototypes; an optional capacity evicts by
// lifetime frequency. All state transitions are deterministic functions of
// the operation sequence.
// ---------------------------------------------------------------------------

struct RetrievalResult {
    std::vector<std::size_t> indices;            // bank positions, best first
    std::vector<double> similarities;            // cosine values, descending
    std::vector<std::vector<double>> prototypes; // the retrieved token values

    // The retrieved prototypes as a constant k x d matrix (S_g). Retrieval is
    // not differentiated through; the tensor carries no graph history.
    Tensor matrix() const {
        if (prototypes.empty()) throw ContractError("RetrievalResult::matrix on empty result");
        const std::size_t k = prototypes.size(), d = prototypes[0].size();
        std::vector<double> flat;
        flat.reserve(k * d);
        for (const auto& p : prototypes) flat.insert(flat.end(), p.begin(), p.end());
        return Tensor({k, d}, std::move(flat));
    }
};

// Raw (un-renormalized) mean of the retrieved prototypes.
inline std::vector<double> barycenter(const RetrievalResult& result) {
    if (result.prototypes.empty()) throw ContractError("barycenter of an empty retrieval");
    std::vector<double> mean(result.prototypes[0].size(), 0.0);
    for (const auto& p : result.prototypes)
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p[i];
    for (double& v : mean) v /= static_cast<double>(result.prototypes.size());
    return mean;
}

struct BankConfig {
    double rho = 1.0;          // Hilbert-ball radius
    double delta = 0.05;       // prune threshold on window retrieval frequency
    std::size_t max_size = 512;  // 0 = unbounded
};

class KnowledgeBank {
public:
    KnowledgeBank() : KnowledgeBank(BankConfig{}) {}

    explicit KnowledgeBank(const BankConfig& cfg) : cfg_(cfg) {
        if (!(cfg.rho > 0.0)) throw ConfigError("federation.rho", "ball radius must be positive");
        if (cfg.delta < 0.0 || cfg.delta > 1.0)
            throw ConfigError("federation.delta", "prune threshold must lie in [0, 1]");
    }

    const BankConfig& config() const { return cfg_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    long current_round() const { return round_; }
    void advance_round() {
        ++round_;
        ensure_round_slot();
    }

    const SpectralToken& prototype(std::size_t i) const { return entries_[i].token; }
    std::uint64_t retrieval_count(std::size_t i) const { return entries_[i].retrieval_count; }
    long insertion_round(std::size_t i) const { return entries_[i].insertion_round; }
    long rounds_resident(std::size_t i) const { return round_ - entries_[i].insertion_round; }

    // Immutable view for serving a round's queries concurrently.
    struct Snapshot {
        std::vector<std::vector<double>> values;
    };

    Snapshot snapshot() const {
        Snapshot s;
        s.values.reserve(entries_.size());
        for (const auto& e : entries_) s.values.push_back(e.token.values);
        return s;
    }

    static RetrievalResult query_snapshot(const Snapshot& snap, const std::vector<double>& query,
                                          std::size_t k) {
        if (snap.values.empty()) throw EmptyBankError();
        if (k < 1) throw ContractError("retrieve_topk: k must be positive");
        struct Scored {
            double sim;
            std::size_t idx;
        };
        std::vector<Scored> scored;
        scored.reserve(snap.values.size());
        for (std::size_t i = 0; i < snap.values.size(); ++i)
            scored.push_back({cosine_sim(query, snap.values[i]), i});
        // Stable sort on descending similarity: equal scores keep ascending
        // index order, so ties break toward the earliest insertion.
        std::stable_sort(scored.begin(), scored.end(),
                         [](const Scored& a, const Scored& b) { return a.sim > b.sim; });
        const std::size_t take = std::min(k, scored.size());
        RetrievalResult out;
        for (std::size_t i = 0; i < take; ++i) {
            out.indices.push_back(scored[i].idx);
            out.similarities.push_back(scored[i].sim);
            out.prototypes.push_back(snap.values[scored[i].idx]);
        }
        return out;
    }

    // Serial form: query the live bank and account for the query immediately.
    RetrievalResult retrieve_topk(const std::vector<double>& query, std::size_t k) {
        RetrievalResult r = query_snapshot(snapshot(), query, k);
        apply_retrieval(r);
        return r;
    }
    RetrievalResult retrieve_topk(const SpectralToken& query, std::size_t k) {
        return retrieve_topk(query.values, k);
    }

    // Deferred counter accounting for snapshot-served queries. The federation
    // engine replays logs in ascending client id, one call per query.
    void apply_retrieval(const RetrievalResult& r) {
        ensure_round_slot();
        queries_per_round_[round_] += 1;
        for (std::size_t idx : r.indices) {
            Entry& e = entries_[idx];
            e.retrieval_count += 1;
            e.hits_per_round.resize(round_ + 1, 0);
            e.hits_per_round[round_] += 1;
        }
    }

    // Appends this round's tokens in ascending client id, then projects every
    // bank entry back into the rho-ball (norm > rho rescaled onto the
    // boundary, direction kept). Over-capacity banks evict lowest lifetime
    // retrieval frequency first, oldest first among ties.
    void insert_and_project(std::vector<SpectralToken> tokens) {
        std::stable_sort(tokens.begin(), tokens.end(),
                         [](const SpectralToken& a, const SpectralToken& b) {
                             return a.source_client < b.source_client;
                         });
        for (SpectralToken& t : tokens) {
            for (double v : t.values)
                if (!std::isfinite(v)) throw ContractError("insert_and_project: non-finite token");
            Entry e;
            e.token = std::move(t);
            e.token.round = round_;
            e.insertion_round = round_;
            entries_.push_back(std::move(e));
        }
        for (Entry& e : entries_) project_entry(e);
        if (cfg_.max_size > 0 && entries_.size() > cfg_.max_size) evict_to_capacity();
    }

    // Removes prototypes that served a full `window` rounds yet were retrieved
    // in fewer than delta of that window's queries. Entries younger than the
    // window are immune, and nothing retrieved in the current round is ever
    // pruned. Survivors keep their counters.
    void prune(long window) {
        if (window < 1) throw ContractError("prune: window must be >= 1");
        ensure_round_slot();
        std::vector<Entry> kept;
        kept.reserve(entries_.size());
        for (Entry& e : entries_) {
            if (keep_under_prune(e, window)) kept.push_back(std::move(e));
        }
        entries_ = std::move(kept);
    }

    double window_frequency(std::size_t i, long window) const {
        return frequency_over(entries_[i], std::max(round_ - window + 1, 0L), round_);
    }

    // ---- checkpoint serialization -----------------------------------------

    void save(std::ostream& out) const {
        out.write("SPBK", 4);
        put<std::uint32_t>(out, 1);
        put<double>(out, cfg_.rho);
        put<double>(out, cfg_.delta);
        put<std::uint64_t>(out, cfg_.max_size);
        put<std::int64_t>(out, round_);
        put_vec64(out, queries_per_round_);
        put<std::uint64_t>(out, entries_.size());
        for (const Entry& e : entries_) {
            put<std::int64_t>(out, e.insertion_round);
            put<std::uint64_t>(out, e.retrieval_count);
            put_vec64(out, e.hits_per_round);
            put<std::int32_t>(out, e.token.source_client);
            put<std::int64_t>(out, e.token.round);
            put<std::uint64_t>(out, e.token.values.size());
            out.write(reinterpret_cast<const char*>(e.token.values.data()),
                      static_cast<std::streamsize>(e.token.values.size() * sizeof(double)));
        }
    }

    static KnowledgeBank load(std::istream& in) {
        char magic[4];
        in.read(magic, 4);
        if (!in || std::string(magic, 4) != "SPBK")
            throw std::runtime_error("knowledge-bank snapshot: bad magic header");
        if (get<std::uint32_t>(in) != 1)
            throw std::runtime_error("knowledge-bank snapshot: unsupported schema version");
        BankConfig cfg;
        cfg.rho = get<double>(in);
        cfg.delta = get<double>(in);
        cfg.max_size = get<std::uint64_t>(in);
        KnowledgeBank bank(cfg);
        bank.round_ = get<std::int64_t>(in);
        bank.queries_per_round_ = get_vec64(in);
        const auto n = get<std::uint64_t>(in);
        bank.entries_.resize(n);
        for (auto& e : bank.entries_) {
            e.insertion_round = get<std::int64_t>(in);
            e.retrieval_count = get<std::uint64_t>(in);
            e.hits_per_round = get_vec64(in);
            e.token.source_client = get<std::int32_t>(in);
            e.token.round = get<std::int64_t>(in);
            e.token.values.resize(get<std::uint64_t>(in));
            in.read(reinterpret_cast<char*>(e.token.values.data()),
                    static_cast<std::streamsize>(e.token.values.size() * sizeof(double)));
        }
        if (!in) throw std::runtime_error("knowledge-bank snapshot: truncated");
        return bank;
    }

    static double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
        if (a.size() != b.size()) throw DimensionError("cosine: dimension mismatch");
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        const double denom = std::sqrt(na) * std::sqrt(nb);
        if (denom < 1e-300) throw ContractError("cosine similarity of a zero-norm vector");
        return dot / denom;
    }

private:
    struct Entry {
        SpectralToken token;
        long insertion_round = 0;
        std::uint64_t retrieval_count = 0;             // lifetime hits
        std::vector<std::uint64_t> hits_per_round;     // absolute round index
    };

    void ensure_round_slot() {
        if (queries_per_round_.size() <= static_cast<std::size_t>(round_))
            queries_per_round_.resize(round_ + 1, 0);
    }

    void project_entry(Entry& e) {
        double nsq = 0.0;
        for (double v : e.token.values) nsq += v * v;
        const double norm = std::sqrt(nsq);
        if (norm > cfg_.rho) {
            const double s = cfg_.rho / norm;
            for (double& v : e.token.values) v *= s;
        }
    }

    std::uint64_t hits_over(const Entry& e, long from, long to) const {
        std::uint64_t h = 0;
        for (long r = std::max(from, 0L); r <= to; ++r)
            if (r < static_cast<long>(e.hits_per_round.size())) h += e.hits_per_round[r];
        return h;
    }

    std::uint64_t queries_over(long from, long to) const {
        std::uint64_t q = 0;
        for (long r = std::max(from, 0L); r <= to; ++r)
            if (r < static_cast<long>(queries_per_round_.size())) q += queries_per_round_[r];
        return q;
    }

    double frequency_over(const Entry& e, long from, long to) const {
        const std::uint64_t q = queries_over(from, to);
        if (q == 0) return 0.0;
        return static_cast<double>(hits_over(e, from, to)) / static_cast<double>(q);
    }

    bool keep_under_prune(const Entry& e, long window) const {
        if (round_ - e.insertion_round < window) return true;  // immune until its window elapses
        if (hits_over(e, round_, round_) > 0) return true;     // retrieved this round
        return frequency_over(e, round_ - window + 1, round_) >= cfg_.delta;
    }

    void evict_to_capacity() {
        // Lifetime frequency: hits since insertion over queries served since
        // insertion (rounds after the entry arrived).
        std::vector<std::size_t> order(entries_.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        auto lifetime_freq = [&](const Entry& e) {
            return frequency_over(e, e.insertion_round + 1, round_);
        };
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double fa = lifetime_freq(entries_[a]), fb = lifetime_freq(entries_[b]);
            if (fa != fb) return fa < fb;
            return entries_[a].insertion_round < entries_[b].insertion_round;
        });
        const std::size_t excess = entries_.size() - cfg_.max_size;
        std::vector<bool> drop(entries_.size(), false);
        for (std::size_t i = 0; i < excess; ++i) drop[order[i]] = true;
        std::vector<Entry> kept;
        kept.reserve(cfg_.max_size);
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (!drop[i]) kept.push_back(std::move(entries_[i]));
        entries_ = std::move(kept);
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
    static void put_vec64(std::ostream& out, const std::vector<std::uint64_t>& v) {
        put<std::uint64_t>(out, v.size());
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(std::uint64_t)));
    }
    static std::vector<std::uint64_t> get_vec64(std::istream& in) {
        std::vector<std::uint64_t> v(get<std::uint64_t>(in));
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(std::uint64_t)));
        return v;
    }

    BankConfig cfg_;
    long round_ = 0;
    std::vector<std::uint64_t> queries_per_round_;
    std::vector<Entry> entries_;
};

}  // namespace specfed
