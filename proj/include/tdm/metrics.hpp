#pragma once

// Top-K retrieval of real items for a generated embedding, and the
// single-target HR@K / NDCG@K metrics.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "tdm/corpus.hpp"
#include "tdm/diffusion.hpp"
#include "tdm/embed_nn.hpp"
#include "tdm/error.hpp"
#include "tdm/parallel.hpp"

namespace tdm {

enum class Similarity { inner_product, cosine };

struct RankedList {
    std::vector<ItemId> ids;
    std::vector<double> scores;

    /// 1-based rank of item, or 0 when absent.
    std::size_t rank_of(ItemId item) const {
        const auto it = std::find(ids.begin(), ids.end(), item);
        return it == ids.end() ? 0 : static_cast<std::size_t>(it - ids.begin()) + 1;
    }
};

/// Ranks every real item by similarity to the query, descending, ties to the
/// smaller id, and keeps the first K.
inline RankedList retrieve_topk(const RowVec& query, const EmbeddingTable& table, int k,
                                Similarity sim = Similarity::inner_product) {
    const ItemId n = table.vocab().item_count;
    if (k <= 0) throw UsageError("K must be positive");
    if (k > n) throw UsageError("K exceeds the number of items");
    const auto items = table.weights.topRows(n);
    Eigen::VectorXd scores = items * query.transpose();
    if (sim == Similarity::cosine) {
        const double qn = query.norm();
        for (ItemId i = 0; i < n; ++i) {
            const double denom = items.row(i).norm() * qn;
            scores(i) = denom > 0 ? scores(i) / denom : 0.0;
        }
    }
    std::vector<ItemId> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const auto better = [&](ItemId a, ItemId b) { return scores(a) > scores(b) || (scores(a) == scores(b) && a < b); };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), better);
    RankedList out;
    out.ids.assign(order.begin(), order.begin() + k);
    for (auto id : out.ids) out.scores.push_back(scores(id));
    return out;
}

inline double hr_at_k(std::span<const RankedList> lists, std::span<const ItemId> targets, std::size_t k) {
    if (lists.size() != targets.size()) throw UsageError("lists and targets differ in length");
    if (lists.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < lists.size(); ++i) {
        const auto r = lists[i].rank_of(targets[i]);
        hits += (r != 0 && r <= k) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(lists.size());
}

inline double ndcg_from_rank(std::size_t rank, std::size_t k) {
    return (rank != 0 && rank <= k) ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

inline double ndcg_at_k(std::span<const RankedList> lists, std::span<const ItemId> targets, std::size_t k) {
    if (lists.size() != targets.size()) throw UsageError("lists and targets differ in length");
    if (lists.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < lists.size(); ++i) total += ndcg_from_rank(lists[i].rank_of(targets[i]), k);
    return total / static_cast<double>(lists.size());
}

struct RunMetrics {
    double hr = 0.0;
    double ndcg = 0.0;
    std::size_t n = 0;
};

/// Generates an oracle embedding for each sequence (unedited guidance),
/// retrieves the top K and scores the targets. Sequence i draws its noise
/// from substream(gen.seed, "generate", i).
inline RunMetrics evaluate_params(const ModelParams& params, std::span<const ItemSequence> seqs,
                                  const NoiseSchedule& schedule, const GenerationConfig& gen, int k,
                                  Similarity sim = Similarity::inner_product) {
    RunMetrics m;
    m.n = seqs.size();
    if (seqs.empty()) return m;
    const UncondGuidance uncond = unconditional_guidance(params);
    std::vector<std::size_t> ranks(seqs.size());
    parallel_for(seqs.size(), [&](std::size_t i) {
        Rng rng = substream(gen.seed, "generate", i);
        const RowVec e = generate(seqs[i], params, uncond, schedule, gen, rng);
        ranks[i] = retrieve_topk(e, params.embedding, k, sim).rank_of(seqs[i].target);
    });
    for (auto r : ranks) {
        m.hr += r != 0 ? 1.0 : 0.0;
        m.ndcg += ndcg_from_rank(r, static_cast<std::size_t>(k));
    }
    m.hr /= static_cast<double>(seqs.size());
    m.ndcg /= static_cast<double>(seqs.size());
    return m;
}

}  // namespace tdm
