#include <gtest/gtest.h>

#include <cmath>

#include "tdm/tdm.hpp"

using namespace tdm;

namespace {

// Rows chosen so consecutive cosines are exactly the requested values.
Matrix rows_with_cosines(double c1, double c2) {
    Matrix m(3, 2);
    const double a1 = std::acos(c1), a2 = std::acos(c2);
    m << 1.0, 0.0, std::cos(a1), std::sin(a1), std::cos(a1 + a2), std::sin(a1 + a2);
    return m;
}

ModelParams params_for(ItemId items, int dim, std::uint64_t seed) {
    ModelConfig mc;
    mc.dim = dim;
    Rng rng(seed);
    return init_params(mc, items, rng);
}

std::vector<ItemSequence> random_batch(const Vocab& v, std::size_t n, Rng& rng) {
    std::vector<ItemSequence> out;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t real = std::uniform_int_distribution<std::size_t>(2, 10)(rng);
        ItemSequence s;
        s.slots.assign(10, v.pad());
        for (std::size_t i = 10 - real; i < 10; ++i) s.slots[i] = std::uniform_int_distribution<ItemId>(0, v.item_count - 1)(rng);
        s.target = 0;
        out.push_back(s);
    }
    return out;
}

}  // namespace

TEST(Continuity, SinglePairIsOne) {
    const auto cs = continuity_scores(Matrix::Random(2, 4), {true, true});
    ASSERT_EQ(cs.con.size(), 1u);
    EXPECT_DOUBLE_EQ(cs.con[0], 1.0);
}

TEST(Continuity, SoftmaxOfCosines) {
    const auto cs = continuity_scores(rows_with_cosines(0.9, 0.2), {true, true, true});
    // Oracle: e^0.9 / (e^0.9 + e^0.2) evaluated directly.
    const double a = std::exp(0.9), b = std::exp(0.2);
    ASSERT_EQ(cs.con.size(), 2u);
    EXPECT_NEAR(cs.con[0], a / (a + b), 1e-12);
    EXPECT_NEAR(cs.con[1], b / (a + b), 1e-12);
    EXPECT_NEAR(cs.con[0], 0.668, 1e-3);
}

TEST(Continuity, IdenticalEmbeddingsAreUniform) {
    Matrix m(6, 3);
    m.rowwise() = RowVec::LinSpaced(3, 1.0, 2.0);
    const auto cs = continuity_scores(m, std::vector<bool>(6, true));
    for (double c : cs.con) EXPECT_NEAR(c, 1.0 / 5.0, 1e-15);
}

TEST(Continuity, PadsAndZeroVectorsAndErrors) {
    Matrix m = Matrix::Random(5, 3);
    m.row(0).setZero();
    m.row(3).setZero();  // zero-norm real item: similarity 0
    const auto cs = continuity_scores(m, {false, true, true, true, true});
    EXPECT_EQ(cs.first, 1u);
    ASSERT_EQ(cs.con.size(), 3u);
    EXPECT_NEAR(cs.con[1], cs.con[2], 1e-15);
    EXPECT_THROW(continuity_scores(m, {false, false, false, false, true}), UsageError);
}

TEST(Entropy, KnownValues) {
    const std::vector<double> uniform(7, 1.0 / 7.0);
    EXPECT_NEAR(sequence_entropy(uniform), std::log(7.0), 1e-12);
    EXPECT_EQ(sequence_entropy(std::vector<double>{1.0}), 0.0);
    const double p = std::exp(0.9) / (std::exp(0.9) + std::exp(0.2));
    const double h = -(p * std::log(p) + (1 - p) * std::log(1 - p));
    EXPECT_NEAR(sequence_entropy(std::vector<double>{p, 1 - p}), h, 1e-15);
    EXPECT_NEAR(h, 0.6346, 1e-3);
}

TEST(Stability, KnownValues) {
    EXPECT_EQ(stability_scores(std::vector<double>{0.7}), std::vector<double>{1.0});
    for (double s : stability_scores(std::vector<double>(4, 0.3))) EXPECT_NEAR(s, 0.25, 1e-15);
    const auto sta = stability_scores(std::vector<double>{0.0, std::log(2.0)});
    EXPECT_NEAR(sta[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(sta[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmaxes, SumToOneAndPositive) {
    Rng rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = std::uniform_int_distribution<int>(2, 10)(rng);
        const auto cs = continuity_scores(Matrix::Random(n, 8), std::vector<bool>(static_cast<std::size_t>(n), true));
        double sum = 0.0;
        for (double c : cs.con) {
            EXPECT_GT(c, 0.0);
            sum += c;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
        const double h = sequence_entropy(cs.con);
        EXPECT_GE(h, 0.0);
        EXPECT_LE(h, std::log(static_cast<double>(cs.con.size())) + 1e-12);
    }
}

TEST(Thompson, SymmetricAtHalf) {
    Rng rng(11);
    double sum = 0.0;
    for (int i = 0; i < 100000; ++i) sum += thompson_sample(0.5, 4.0, rng);
    EXPECT_NEAR(sum / 1e5, 0.5, 0.01);
}

TEST(Thompson, BetaMeanAtTheTop) {
    Rng rng(12);
    double sum = 0.0;
    for (int i = 0; i < 100000; ++i) {
        const double p = thompson_sample(1.0, 4.0, rng);
        ASSERT_GT(p, 0.0);
        ASSERT_LT(p, 1.0);
        sum += p;
    }
    // Beta(5, 1): mean 5 / 6.
    EXPECT_NEAR(sum / 1e5, 5.0 / 6.0, 0.01);
}

TEST(Thompson, MonotoneInValue) {
    Rng rng(13);
    double lo = 0.0, hi = 0.0;
    for (int i = 0; i < 10000; ++i) {
        lo += thompson_sample(0.1, 4.0, rng);
        hi += thompson_sample(0.9, 4.0, rng);
    }
    EXPECT_GT(hi, lo);
}

TEST(Thompson, RejectsBadArguments) {
    Rng rng(1);
    EXPECT_THROW(thompson_sample(0.5, 0.0, rng), ConfigError);
    EXPECT_THROW(thompson_sample(1.5, 4.0, rng), UsageError);
    EXPECT_THROW(parse_local_value("bogus"), ConfigError);
    EXPECT_THROW(parse_global_value("continuity"), ConfigError);
}

TEST(MinMax, ConstantInputMapsToHalf) {
    EXPECT_EQ(minmax_scale(std::vector<double>{3.0, 3.0}), (std::vector<double>{0.5, 0.5}));
    EXPECT_EQ(minmax_scale(std::vector<double>{1.0, 3.0, 2.0}), (std::vector<double>{0.0, 1.0, 0.5}));
}

TEST(DtsEdit, ZeroLambda1EditsNothing) {
    const auto p = params_for(40, 8, 2);
    Rng rng(3);
    const auto batch = random_batch(p.vocab(), 64, rng);
    DtsConfig cfg{.lambda1 = 0.0, .lambda2 = 1.0};
    const auto res = dts_edit(batch, p.embedding, cfg, {}, rng);
    EXPECT_EQ(res.plan.edited_count(), 0u);
    EXPECT_EQ(res.sequences, batch);
}

TEST(DtsEdit, ZeroLambda2RemovesNothing) {
    const auto p = params_for(40, 8, 2);
    Rng rng(4);
    const auto batch = random_batch(p.vocab(), 64, rng);
    DtsConfig cfg{.lambda1 = 1.0, .lambda2 = 0.0};
    const auto res = dts_edit(batch, p.embedding, cfg, {}, rng);
    EXPECT_EQ(res.plan.edited_count(), 64u);
    EXPECT_EQ(res.plan.removed_count(), 0u);
}

TEST(DtsEdit, FullThresholdsReplaceEveryNonLastRealSlot) {
    const auto p = params_for(40, 8, 2);
    Rng rng(5);
    const Vocab v = p.vocab();
    const auto batch = random_batch(v, 16, rng);
    DtsConfig cfg{.lambda1 = 1.0, .lambda2 = 1.0};
    std::size_t replaced = 0, eligible = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto res = dts_edit(batch, p.embedding, cfg, {}, rng);
        for (std::size_t k = 0; k < batch.size(); ++k) {
            const auto& in = batch[k].slots;
            const auto& out = res.sequences[k].slots;
            ASSERT_EQ(out.back(), in.back());
            for (std::size_t i = 0; i + 1 < in.size(); ++i) {
                if (in[i] == v.pad()) {
                    ASSERT_EQ(out[i], v.pad());
                    continue;
                }
                ++eligible;
                replaced += out[i] == v.dummy();
            }
        }
    }
    EXPECT_EQ(replaced, eligible);
}

TEST(DtsEdit, PlanInvariantsAndReproducibility) {
    const auto p = params_for(40, 8, 9);
    const Vocab v = p.vocab();
    Rng gen(6);
    auto batch = random_batch(v, 32, gen);
    batch[3].slots.assign(10, v.pad());
    batch[3].slots.back() = 7;  // one real item: never edited
    const RawDataset pop_source{{{0, {1, 1, 2, 3}}}, 40, {}};
    const auto popularity = item_popularity(pop_source);
    for (auto local : {LocalValue::continuity, LocalValue::popularity, LocalValue::position, LocalValue::random})
        for (auto global : {GlobalValue::stability, GlobalValue::diversity, GlobalValue::length, GlobalValue::random}) {
            DtsConfig cfg{.lambda1 = 0.6, .lambda2 = 0.5, .local = local, .global = global};
            Rng a(77), b(77);
            const auto r1 = dts_edit(batch, p.embedding, cfg, popularity, a);
            const auto r2 = dts_edit(batch, p.embedding, cfg, popularity, b);
            EXPECT_EQ(r1.sequences, r2.sequences);
            EXPECT_FALSE(r1.plan.sequences[3].editable);
            EXPECT_FALSE(r1.plan.sequences[3].edited);
            for (std::size_t k = 0; k < batch.size(); ++k) {
                const auto& e = r1.plan.sequences[k];
                EXPECT_EQ(e.p_item.back(), 0.0);
                EXPECT_FALSE(e.removed.back());
                for (std::size_t i = 0; i < e.removed.size(); ++i) {
                    if (e.removed[i]) EXPECT_TRUE(e.edited);
                    EXPECT_EQ(r1.sequences[k].slots[i] == v.dummy(), static_cast<bool>(e.removed[i]));
                }
            }
        }
}

TEST(DtsEdit, HigherContinuityIsRemovedMoreOften) {
    // Two-dimensional embeddings with a steep continuity profile: the pair
    // (slot 7, slot 8) is nearly parallel, (slot 6, slot 7) nearly opposite.
    ModelParams p = params_for(4, 2, 1);
    auto& W = p.embedding.weights;
    W.row(0) << 1.0, 0.0;
    W.row(1) << -1.0, 0.05;
    W.row(2) << -1.0, 0.0;
    W.row(3) << 0.0, 1.0;
    const Vocab v = p.vocab();
    const ItemId P = v.pad();
    const std::vector<ItemSequence> batch = {{{P, P, P, P, P, P, 0, 1, 2, 3}, 0}, {{P, P, P, P, P, P, P, 1, 2, 3}, 0}};
    const auto cs = continuity_scores(embed_lookup(p.embedding, batch[0]), batch[0].mask(v));
    ASSERT_GE(cs.con[1] - cs.con[0], 0.2);

    DtsConfig cfg{.lambda1 = 1.0, .lambda2 = 0.5};
    Rng rng(8);
    int low = 0, high = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        const auto res = dts_edit(batch, p.embedding, cfg, {}, rng);
        low += res.plan.sequences[0].removed[6];
        high += res.plan.sequences[0].removed[7];
    }
    EXPECT_GT(high, low);
}

TEST(DtsEdit, AblationVariantsSelectValueFunctions) {
    TrainConfig base;
    EXPECT_EQ(apply_variant(base, "w/o GL").dts.local, LocalValue::random);
    EXPECT_EQ(apply_variant(base, "w/o GL").dts.global, GlobalValue::random);
    EXPECT_EQ(apply_variant(base, "w/o L").dts.local, LocalValue::random);
    EXPECT_EQ(apply_variant(base, "w/o L").dts.global, GlobalValue::stability);
    EXPECT_EQ(apply_variant(base, "w/o G").dts.local, LocalValue::continuity);
    EXPECT_EQ(apply_variant(base, "w/o G").dts.global, GlobalValue::random);
    EXPECT_FALSE(apply_variant(base, "Base").dts_enabled);
    EXPECT_EQ(apply_variant(base, "Base").dts.lambda1, 0.0);
    EXPECT_THROW(apply_variant(base, "w/Q"), ConfigError);
}

TEST(DtsEdit, ExistingDummySlotsAreKeptAndNotCounted) {
    const auto p = params_for(12, 8, 4);
    const Vocab v = p.vocab();
    const ItemId P = v.pad(), D = v.dummy();
    const std::vector<ItemSequence> batch = {{{P, P, P, P, P, 3, D, D, D, 5}, 6}, {{P, P, P, P, P, P, P, P, D, 2}, 0}};
    std::vector<double> popularity(12, 0.5);
    for (auto local : {LocalValue::continuity, LocalValue::popularity}) {
        DtsConfig cfg{.lambda1 = 1.0, .lambda2 = 1.0, .local = local};
        Rng rng(1);
        const auto res = dts_edit(batch, p.embedding, cfg, popularity, rng);
        EXPECT_EQ(res.sequences[0].slots, (std::vector<ItemId>{P, P, P, P, P, D, D, D, D, 5}));
        EXPECT_EQ(res.sequences[1].slots, batch[1].slots);
        EXPECT_EQ(res.plan.removed_count(), 1u);
    }
}

TEST(DtsEdit, PositionValueIsRelativeToEachSequence) {
    // With a very large kappa the Beta draw sits on the scaled value itself.
    const auto p = params_for(12, 8, 5);
    const Vocab v = p.vocab();
    const ItemId P = v.pad();
    const std::vector<ItemSequence> batch = {{{P, P, P, P, P, P, P, 1, 2, 3}, 4}, {{P, P, P, P, P, 1, 2, 3, 4, 5}, 6}};
    DtsConfig cfg{.lambda1 = 1.0, .lambda2 = 0.0, .kappa = 1e7, .local = LocalValue::position};
    Rng rng(3);
    const auto res = dts_edit(batch, p.embedding, cfg, {}, rng);
    // Raw values i / (count - 1): {0, 1/2} and {0, 1/4, 1/2, 3/4}, then scaled by the batch maximum 3/4.
    const std::vector<double> a = {0.0, 2.0 / 3.0}, b = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(res.plan.sequences[0].p_item[7 + i], a[i], 2e-3);
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(res.plan.sequences[1].p_item[5 + i], b[i], 2e-3);
}
