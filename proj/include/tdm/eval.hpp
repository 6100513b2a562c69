#pragma once

// Evaluation harness built on top of training: multi-seed scoring, ablations,
// missing-data sweeps and the consistency probe.

#include <cmath>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tdm/corpus.hpp"
#include "tdm/diffusion.hpp"
#include "tdm/dts.hpp"
#include "tdm/metrics.hpp"
#include "tdm/trainer.hpp"

namespace tdm {

struct Metrics {
    double hr = 0.0;  // mean over seeds
    double ndcg = 0.0;
    double hr_std = 0.0;
    double ndcg_std = 0.0;
    std::size_t n = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<RunMetrics> per_seed;
};

namespace detail {

inline double sample_std(const std::vector<double>& x, double mean) {
    if (x.size() < 2) return 0.0;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

}  // namespace detail

inline Metrics summarize(std::vector<std::uint64_t> seeds, std::vector<RunMetrics> runs) {
    Metrics m;
    m.seeds = std::move(seeds);
    m.per_seed = std::move(runs);
    if (m.per_seed.empty()) return m;
    std::vector<double> hr, ndcg;
    for (const auto& r : m.per_seed) {
        hr.push_back(r.hr);
        ndcg.push_back(r.ndcg);
        m.hr += r.hr;
        m.ndcg += r.ndcg;
    }
    m.hr /= static_cast<double>(hr.size());
    m.ndcg /= static_cast<double>(ndcg.size());
    m.hr_std = detail::sample_std(hr, m.hr);
    m.ndcg_std = detail::sample_std(ndcg, m.ndcg);
    m.n = m.per_seed.front().n;
    return m;
}

/// Scores the checkpoint's best parameters on `split` once per generation
/// seed.
inline Metrics evaluate(const Checkpoint& ck, const RawDataset& split, int k, const GenerationConfig& gen,
                        std::span<const std::uint64_t> seeds, Similarity sim = Similarity::inner_product) {
    const auto seqs = to_item_sequences(split, static_cast<std::size_t>(ck.config.model.seq_len));
    std::vector<RunMetrics> runs;
    for (auto seed : seeds) {
        GenerationConfig g = gen;
        g.seed = seed;
        runs.push_back(evaluate_params(ck.best, seqs, ck.schedule, g, k, sim));
    }
    return summarize({seeds.begin(), seeds.end()}, std::move(runs));
}

// ---------------------------------------------------------------------------
// Ablation variants

inline const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> names = {"Base", "w/o GL", "w/o L", "w/o G", "w/P",
                                                   "w/I",  "w/D",    "w/S",   "TDM"};
    return names;
}

/// The config a named variant trains with: Base switches editing off, the
/// rest pick the local and global value functions.
inline TrainConfig apply_variant(TrainConfig cfg, const std::string& variant) {
    auto set = [&](LocalValue l, GlobalValue g) {
        cfg.dts_enabled = true;
        cfg.dts.local = l;
        cfg.dts.global = g;
    };
    if (variant == "Base") {
        cfg.dts_enabled = false;
        cfg.dts.lambda1 = 0.0;
    } else if (variant == "w/o GL") set(LocalValue::random, GlobalValue::random);
    else if (variant == "w/o L") set(LocalValue::random, GlobalValue::stability);
    else if (variant == "w/o G") set(LocalValue::continuity, GlobalValue::random);
    else if (variant == "w/P") set(LocalValue::popularity, GlobalValue::stability);
    else if (variant == "w/I") set(LocalValue::position, GlobalValue::stability);
    else if (variant == "w/D") set(LocalValue::continuity, GlobalValue::diversity);
    else if (variant == "w/S") set(LocalValue::continuity, GlobalValue::length);
    else if (variant == "TDM") set(LocalValue::continuity, GlobalValue::stability);
    else throw ConfigError("unknown variant '" + variant + "'");
    return cfg;
}

struct MetricRow {
    std::string variant;
    double ratio = 0.0;
    std::string seed;  // decimal seed, or "mean"
    double hr = 0.0;
    double ndcg = 0.0;
    std::size_t n = 0;
    TrainConfig config;  // as trained
};

struct ExperimentData {
    RawDataset train;
    RawDataset val;
    RawDataset test;
};

using CheckpointFactory = std::function<Checkpoint(const TrainConfig&, const RawDataset&, const RawDataset&)>;

inline CheckpointFactory default_factory() {
    return [](const TrainConfig& c, const RawDataset& tr, const RawDataset& va) { return train(c, tr, va); };
}

/// Trains and evaluates every requested variant with the same seed list.
/// Seed s sets both the training seed and the generation seed.
inline std::vector<MetricRow> ablation_run(const TrainConfig& base, std::span<const std::string> variants,
                                           const ExperimentData& data, std::span<const std::uint64_t> seeds,
                                           const CheckpointFactory& factory = default_factory()) {
    for (const auto& v : variants) (void)apply_variant(base, v);  // reject unknown names before training
    std::vector<MetricRow> rows;
    for (const auto& v : variants) {
        for (auto seed : seeds) {
            TrainConfig cfg = apply_variant(base, v);
            cfg.seed = seed;
            const Checkpoint ck = factory(cfg, data.train, data.val);
            const std::uint64_t s[] = {seed};
            const Metrics m = evaluate(ck, data.test, cfg.eval_k, cfg.generation(seed), s);
            rows.push_back({v, 0.0, std::to_string(seed), m.hr, m.ndcg, m.n, cfg});
        }
    }
    return rows;
}

/// Per ratio and seed, damages the whole corpus with that seed before
/// splitting, then trains and scores on the damaged test part.
inline std::vector<MetricRow> robustness_sweep(const TrainConfig& base, const std::string& variant,
                                               std::span<const double> ratios, const RawDataset& corpus,
                                               const SplitSpec& split, std::span<const std::uint64_t> seeds,
                                               const CheckpointFactory& factory = default_factory()) {
    std::vector<MetricRow> rows;
    for (double ratio : ratios) {
        for (auto seed : seeds) {
            const RawDataset damaged = inject_missing(corpus, ratio, seed);
            const Splits parts = chronological_split(damaged, split);
            TrainConfig cfg = apply_variant(base, variant);
            cfg.seed = seed;
            const Checkpoint ck = factory(cfg, parts.train, parts.val);
            const std::uint64_t s[] = {seed};
            const Metrics m = evaluate(ck, parts.test, cfg.eval_k, cfg.generation(seed), s);
            rows.push_back({variant, ratio, std::to_string(seed), m.hr, m.ndcg, m.n, cfg});
        }
    }
    return rows;
}

/// True when HR does not increase from one ratio to the next (seed means).
inline bool hr_non_increasing_in_ratio(const std::vector<MetricRow>& rows) {
    std::map<double, std::pair<double, int>> by_ratio;
    for (const auto& r : rows) {
        if (r.seed == "mean") continue;
        by_ratio[r.ratio].first += r.hr;
        by_ratio[r.ratio].second += 1;
    }
    double prev = 2.0;
    for (const auto& [ratio, acc] : by_ratio) {
        const double mean = acc.first / acc.second;
        if (mean > prev) return false;
        prev = mean;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Consistency probe

struct ConsistencyBound {
    double lhs = 0.0;  // |a - b|^2
    double rhs = 0.0;  // 2 (|a - c|^2 + |b - c|^2)
    bool holds(double tol = 1e-9) const { return lhs <= rhs + tol; }
};

inline ConsistencyBound consistency_bound(const RowVec& a, const RowVec& b, const RowVec& c) {
    return {(a - b).squaredNorm(), 2.0 * ((a - c).squaredNorm() + (b - c).squaredNorm())};
}

struct ProbeStats {
    std::vector<ConsistencyBound> elements;
    double mean_gap = 0.0;  // mean lhs
    std::size_t violations = 0;
};

/// Compares denoiser predictions under observed-history guidance and
/// DTS-edited guidance against the clean target, one random step per
/// element.
inline ProbeStats consistency_probe(const ModelParams& params, std::span<const ItemSequence> batch,
                                    const NoiseSchedule& schedule, const DtsConfig& dts,
                                    std::span<const double> popularity, Rng& rng) {
    ProbeStats out;
    if (batch.empty()) return out;
    const auto edited = dts_edit(batch, params.embedding, dts, popularity, rng).sequences;
    std::uniform_int_distribution<std::size_t> pick(1, schedule.steps());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const int t = schedule.tau[pick(rng) - 1];
        const RowVec c = params.embedding.weights.row(batch[i].target);
        const RowVec x = q_sample_alpha(c, schedule.alpha(t), standard_normal_vector(params.dim(), rng));
        const RowVec a = denoiser_forward(params.denoiser, x, t_enc_forward(params, batch[i]).guidance, t).output;
        const RowVec b = denoiser_forward(params.denoiser, x, t_enc_forward(params, edited[i]).guidance, t).output;
        out.elements.push_back(consistency_bound(a, b, c));
        out.mean_gap += out.elements.back().lhs;
        out.violations += out.elements.back().holds() ? 0 : 1;
    }
    out.mean_gap /= static_cast<double>(batch.size());
    return out;
}

// ---------------------------------------------------------------------------
// Reporting

/// Appends a "mean" row after the seed rows of every (variant, ratio) group
/// that has more than one seed.
inline std::vector<MetricRow> with_mean_rows(const std::vector<MetricRow>& rows) {
    std::vector<MetricRow> out;
    for (std::size_t i = 0; i < rows.size();) {
        std::size_t j = i;
        MetricRow mean = rows[i];
        mean.seed = "mean";
        mean.hr = mean.ndcg = 0.0;
        while (j < rows.size() && rows[j].variant == rows[i].variant && rows[j].ratio == rows[i].ratio) {
            out.push_back(rows[j]);
            mean.hr += rows[j].hr;
            mean.ndcg += rows[j].ndcg;
            ++j;
        }
        mean.hr /= static_cast<double>(j - i);
        mean.ndcg /= static_cast<double>(j - i);
        if (j - i > 1) out.push_back(mean);
        i = j;
    }
    return out;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows, int k) {
    const std::string ks = std::to_string(k);
    std::string out = "variant,ratio,seed,hr@" + ks + ",ndcg@" + ks + ",n\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.2f,%s,%.6f,%.6f,%zu\n", r.variant.c_str(), r.ratio, r.seed.c_str(), r.hr,
                      r.ndcg, r.n);
        out += buf;
    }
    return out;
}

inline std::string metrics_table(const std::vector<MetricRow>& rows, int k) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-8s %6s %6s %10s %10s %6s\n", "variant", "ratio", "seed",
                  ("HR@" + std::to_string(k)).c_str(), ("NDCG@" + std::to_string(k)).c_str(), "n");
    std::string out = buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-8s %6.2f %6s %10.4f %10.4f %6zu\n", r.variant.c_str(), r.ratio,
                      r.seed.c_str(), r.hr, r.ndcg, r.n);
        out += buf;
    }
    return out;
}

}  // namespace tdm
