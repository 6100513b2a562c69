#pragma once

// Dual-side Thompson sampling: picks history items to swap for DUMMY.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tdm/corpus.hpp"
#include "tdm/embed_nn.hpp"
#include "tdm/error.hpp"
#include "tdm/rng.hpp"

namespace tdm {

enum class LocalValue { continuity, popularity, position, random };
enum class GlobalValue { stability, diversity, length, random };

inline LocalValue parse_local_value(std::string_view s) {
    if (s == "continuity") return LocalValue::continuity;
    if (s == "popularity") return LocalValue::popularity;
    if (s == "position") return LocalValue::position;
    if (s == "random") return LocalValue::random;
    throw ConfigError("unknown local value function '" + std::string(s) + "'");
}

inline GlobalValue parse_global_value(std::string_view s) {
    if (s == "stability") return GlobalValue::stability;
    if (s == "diversity") return GlobalValue::diversity;
    if (s == "length") return GlobalValue::length;
    if (s == "random") return GlobalValue::random;
    throw ConfigError("unknown global value function '" + std::string(s) + "'");
}

inline std::string to_string(LocalValue v) {
    switch (v) {
        case LocalValue::continuity: return "continuity";
        case LocalValue::popularity: return "popularity";
        case LocalValue::position: return "position";
        case LocalValue::random: return "random";
    }
    return "?";
}

inline std::string to_string(GlobalValue v) {
    switch (v) {
        case GlobalValue::stability: return "stability";
        case GlobalValue::diversity: return "diversity";
        case GlobalValue::length: return "length";
        case GlobalValue::random: return "random";
    }
    return "?";
}

struct DtsConfig {
    double lambda1 = 0.5;  // sequence-level threshold
    double lambda2 = 0.3;  // item-level threshold
    double kappa = 4.0;    // Beta concentration
    LocalValue local = LocalValue::continuity;
    GlobalValue global = GlobalValue::stability;

    void validate() const {
        if (!(lambda1 >= 0 && lambda1 <= 1) || !(lambda2 >= 0 && lambda2 <= 1))
            throw ConfigError("lambda1 and lambda2 must lie in [0, 1]");
        if (!(kappa > 0)) throw ConfigError("kappa must be positive");
    }
};

// con[i] scores the pair (slots[first + i], slots[first + i + 1]).
struct ContinuityScores {
    std::vector<double> con;
    std::size_t first = 0;
};

inline double cosine_similarity(const RowVec& a, const RowVec& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

inline std::vector<double> softmax(std::span<const double> x) {
    std::vector<double> out(x.size());
    if (x.empty()) return out;
    const double mx = *std::max_element(x.begin(), x.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sum += (out[i] = std::exp(x[i] - mx));
    for (auto& v : out) v /= sum;
    return out;
}

/// Softmax over cosine similarities of consecutive real items. Requires at
/// least two real items, which must be contiguous.
inline ContinuityScores continuity_scores(const Matrix& emb, const std::vector<bool>& mask) {
    if (static_cast<std::size_t>(emb.rows()) != mask.size()) throw UsageError("mask length mismatch");
    std::size_t first = 0;
    while (first < mask.size() && !mask[first]) ++first;
    std::size_t last = first;
    while (last < mask.size() && mask[last]) ++last;
    if (last - first < 2) throw UsageError("continuity is undefined with fewer than two real items");
    for (std::size_t i = last; i < mask.size(); ++i)
        if (mask[i]) throw UsageError("real items must be contiguous");

    std::vector<double> sims;
    for (std::size_t i = first; i + 1 < last; ++i)
        sims.push_back(cosine_similarity(emb.row(static_cast<Eigen::Index>(i)),
                                         emb.row(static_cast<Eigen::Index>(i + 1))));
    return {softmax(sims), first};
}

inline double sequence_entropy(std::span<const double> con) {
    double h = 0.0;
    for (double c : con)
        if (c > 0) h -= c * std::log(c);
    return h;
}

inline std::vector<double> stability_scores(std::span<const double> entropies) {
    if (entropies.empty()) throw UsageError("stability needs a nonempty batch");
    return softmax(entropies);
}

/// Min-max scaling to [0, 1]; a constant input maps to 0.5 everywhere.
inline std::vector<double> minmax_scale(std::span<const double> x) {
    std::vector<double> out(x.size(), 0.5);
    if (x.empty()) return out;
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    if (*hi - *lo <= 0.0) return out;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - *lo) / (*hi - *lo);
    return out;
}

/// One draw from Beta(1 + kappa * v, 1 + kappa * (1 - v)). Higher v shifts
/// the mass toward 1.
inline double thompson_sample(double v, double kappa, Rng& rng) {
    if (!(kappa > 0)) throw ConfigError("kappa must be positive");
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw UsageError("thompson value must be scaled to [0, 1]");
    return sample_beta(1.0 + kappa * v, 1.0 + kappa * (1.0 - v), rng);
}

struct SequenceEdit {
    bool editable = false;  // at least two real items
    double p_sequence = 0.0;
    bool edited = false;
    std::vector<double> p_item;  // per slot; 0 for PAD and the last slot
    std::vector<bool> removed;
};

struct EditPlan {
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    std::vector<SequenceEdit> sequences;

    std::size_t edited_count() const {
        return static_cast<std::size_t>(
            std::count_if(sequences.begin(), sequences.end(), [](const auto& s) { return s.edited; }));
    }

    std::size_t removed_count() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += static_cast<std::size_t>(std::count(s.removed.begin(), s.removed.end(), true));
        return n;
    }
};

struct EditResult {
    std::vector<ItemSequence> sequences;
    EditPlan plan;
};

/// Normalized item frequency (count / max count) over a dataset, used by the
/// popularity value function.
inline std::vector<double> item_popularity(const RawDataset& ds) {
    std::vector<double> freq(static_cast<std::size_t>(ds.item_count), 0.0);
    for (const auto& s : ds.sequences)
        for (auto it : s.items) freq[static_cast<std::size_t>(it)] += 1.0;
    const double mx = freq.empty() ? 0.0 : *std::max_element(freq.begin(), freq.end());
    if (mx > 0)
        for (auto& f : freq) f /= mx;
    return freq;
}

namespace detail {

inline double mean_pairwise_cosine_distance(const Matrix& emb, std::size_t first) {
    const auto n = static_cast<std::size_t>(emb.rows());
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = first; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j, ++pairs)
            total += 1.0 - cosine_similarity(emb.row(static_cast<Eigen::Index>(i)),
                                             emb.row(static_cast<Eigen::Index>(j)));
    return pairs ? total / static_cast<double>(pairs) : 0.0;
}

}  // namespace detail

/// Samples which sequences to edit and which of their items to replace by
/// DUMMY. Sequence k is edited iff 1 - p_k < lambda1; inside it, slot n is
/// replaced iff 1 - p_n < lambda2. The last slot and PAD slots are kept.
/// Scores read the current embedding values; nothing here is differentiated.
inline EditResult dts_edit(std::span<const ItemSequence> batch, const EmbeddingTable& table, const DtsConfig& cfg,
                           std::span<const double> popularity, Rng& rng) {
    cfg.validate();
    const Vocab vocab = table.vocab();
    EditResult out;
    out.sequences.assign(batch.begin(), batch.end());
    out.plan.lambda1 = cfg.lambda1;
    out.plan.lambda2 = cfg.lambda2;
    out.plan.sequences.resize(batch.size());
    if (cfg.lambda1 == 0.0) {
        for (std::size_t k = 0; k < batch.size(); ++k) {
            out.plan.sequences[k].p_item.assign(batch[k].slots.size(), 0.0);
            out.plan.sequences[k].removed.assign(batch[k].slots.size(), false);
        }
        return out;
    }
    if (cfg.local == LocalValue::popularity && popularity.size() < static_cast<std::size_t>(vocab.item_count))
        throw ConfigError("popularity value function needs item frequencies");

    // Raw values, gathered across the batch for min-max scaling.
    std::vector<double> local_raw, global_raw, entropies;
    std::vector<std::size_t> editable;
    std::vector<ContinuityScores> scores(batch.size());
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const auto& seq = batch[k];
        auto& edit = out.plan.sequences[k];
        edit.p_item.assign(seq.slots.size(), 0.0);
        edit.removed.assign(seq.slots.size(), false);
        if (seq.filled_count(vocab) < 2) continue;
        edit.editable = true;
        editable.push_back(k);

        // DUMMY slots left by earlier edits take part in continuity but are
        // never removed again.
        std::vector<bool> filled(seq.slots.size());
        for (std::size_t i = 0; i < filled.size(); ++i) filled[i] = seq.slots[i] != vocab.pad();
        const Matrix emb = embed_lookup(table, seq);
        scores[k] = continuity_scores(emb, filled);
        const auto& cs = scores[k];
        entropies.push_back(sequence_entropy(cs.con));
        switch (cfg.global) {
            case GlobalValue::diversity: global_raw.push_back(detail::mean_pairwise_cosine_distance(emb, cs.first)); break;
            case GlobalValue::length: global_raw.push_back(static_cast<double>(cs.con.size() + 1)); break;
            default: break;
        }
        for (std::size_t i = 0; i < cs.con.size(); ++i) {
            const std::size_t slot = cs.first + i;
            switch (cfg.local) {
                case LocalValue::continuity: local_raw.push_back(cs.con[i]); break;
                case LocalValue::popularity:
                    local_raw.push_back(vocab.is_real(seq.slots[slot])
                                            ? popularity[static_cast<std::size_t>(seq.slots[slot])]
                                            : 0.0);
                    break;
                case LocalValue::position:  // index among the sequence's own items over (count - 1)
                    local_raw.push_back(static_cast<double>(i) / static_cast<double>(cs.con.size()));
                    break;
                case LocalValue::random: local_raw.push_back(0.0); break;
            }
        }
    }
    if (editable.empty()) return out;
    if (cfg.global == GlobalValue::stability) global_raw = stability_scores(entropies);
    const auto global_v = minmax_scale(global_raw);
    const auto local_v = minmax_scale(local_raw);

    for (std::size_t e = 0; e < editable.size(); ++e) {
        auto& edit = out.plan.sequences[editable[e]];
        edit.p_sequence = cfg.global == GlobalValue::random ? uniform01(rng)
                                                            : thompson_sample(global_v[e], cfg.kappa, rng);
        edit.edited = 1.0 - edit.p_sequence < cfg.lambda1;
    }
    std::size_t cursor = 0;
    for (std::size_t e = 0; e < editable.size(); ++e) {
        const std::size_t k = editable[e];
        auto& edit = out.plan.sequences[k];
        auto& seq = out.sequences[k];
        const auto& cs = scores[k];
        for (std::size_t i = 0; i < cs.con.size(); ++i, ++cursor) {
            const std::size_t slot = cs.first + i;
            edit.p_item[slot] = cfg.local == LocalValue::random ? uniform01(rng)
                                                                : thompson_sample(local_v[cursor], cfg.kappa, rng);
            if (edit.edited && 1.0 - edit.p_item[slot] < cfg.lambda2 && vocab.is_real(seq.slots[slot])) {
                edit.removed[slot] = true;
                seq.slots[slot] = vocab.dummy();
            }
        }
    }
    return out;
}

}  // namespace tdm
