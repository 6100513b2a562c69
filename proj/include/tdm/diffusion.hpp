#pragma once

// DDIM over item embeddings. Training predicts x0 directly; sampling walks
// an evenly spaced subsequence of the schedule.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tdm/corpus.hpp"
#include "tdm/dts.hpp"
#include "tdm/embed_nn.hpp"
#include "tdm/error.hpp"
#include "tdm/parallel.hpp"
#include "tdm/rng.hpp"

namespace tdm {

struct NoiseSchedule {
    int total_steps = 0;         // T
    std::vector<double> betas;   // betas[t - 1]
    std::vector<double> alphas;  // alphas[t - 1] = prod_{i <= t} (1 - beta_i)
    std::vector<int> tau;        // tau[s - 1], strictly increasing, tau.back() == T

    std::size_t steps() const noexcept { return tau.size(); }

    /// Cumulative alpha at diffusion step t; alpha(0) == 1.
    double alpha(int t) const {
        if (t == 0) return 1.0;
        if (t < 0 || t > total_steps) throw UsageError("diffusion step out of range");
        return alphas[static_cast<std::size_t>(t - 1)];
    }

    /// Alpha at tau_s for s in [0, S]; tau_0 is the clean end.
    double alpha_at(std::size_t s) const {
        if (s > tau.size()) throw UsageError("subsequence index out of range");
        return s == 0 ? 1.0 : alpha(tau[s - 1]);
    }

    bool in_subsequence(int t) const { return std::find(tau.begin(), tau.end(), t) != tau.end(); }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> betas, int subsequence_len) {
    const int T = static_cast<int>(betas.size());
    if (T <= 0) throw ConfigError("schedule needs at least one step");
    if (subsequence_len <= 0 || subsequence_len > T) throw ConfigError("subsequence length must lie in [1, T]");
    if (T % subsequence_len != 0) throw ConfigError("subsequence length must divide T");
    NoiseSchedule s;
    s.total_steps = T;
    double a = 1.0;
    for (double b : betas) {
        if (!(b > 0.0 && b < 1.0)) throw ConfigError("betas must lie in (0, 1)");
        a *= 1.0 - b;
        s.alphas.push_back(a);
    }
    s.betas = std::move(betas);
    const int stride = T / subsequence_len;
    for (int i = 1; i <= subsequence_len; ++i) s.tau.push_back(i * stride);
    for (std::size_t i = 0; i < s.alphas.size(); ++i) {
        const double prev = i == 0 ? 1.0 : s.alphas[i - 1];
        if (!(s.alphas[i] > 0.0 && s.alphas[i] < prev)) throw ConfigError("alphas must decrease strictly within (0, 1)");
    }
    return s;
}

/// Linear betas from beta_start to beta_end over T steps; tau every T/S steps.
inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end, int S) {
    if (T <= 0) throw ConfigError("T must be positive");
    std::vector<double> betas(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t)
        betas[static_cast<std::size_t>(t)] =
            T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / static_cast<double>(T - 1);
    return schedule_from_betas(std::move(betas), S);
}

/// sqrt(alpha) * x0 + sqrt(1 - alpha) * eps.
inline RowVec q_sample_alpha(const RowVec& x0, double alpha, const RowVec& eps) {
    return std::sqrt(alpha) * x0 + std::sqrt(1.0 - alpha) * eps;
}

inline RowVec q_sample(const RowVec& x0, int step, const RowVec& eps, const NoiseSchedule& schedule) {
    if (!schedule.in_subsequence(step)) throw UsageError("step " + std::to_string(step) + " is not in the subsequence");
    return q_sample_alpha(x0, schedule.alpha(step), eps);
}

/// (1 + w) * cond - w * uncond.
inline RowVec cfg_combine(const RowVec& cond, const RowVec& uncond, double w) {
    return (1.0 + w) * cond - w * uncond;
}

/// One reverse step from tau_s to tau_{s-1} given a clean-sample estimate.
/// With sigma > 0 the noise scale is capped at sqrt(1 - alpha_{s-1}) so the
/// final step stays deterministic.
inline RowVec ddim_step(const RowVec& x, const RowVec& x0_hat, std::size_t s, const NoiseSchedule& schedule,
                        double sigma, Rng& rng) {
    if (s < 1 || s > schedule.steps()) throw UsageError("reverse step index out of range");
    const double a_t = schedule.alpha_at(s);
    const double a_prev = schedule.alpha_at(s - 1);
    if (a_t >= 1.0) throw NumericError("alpha at the current step is 1; residual is undefined");
    const RowVec eps_hat = (x - std::sqrt(a_t) * x0_hat) / std::sqrt(1.0 - a_t);
    if (sigma <= 0.0) return std::sqrt(a_prev) * x0_hat + std::sqrt(1.0 - a_prev) * eps_hat;

    const double sig = std::min(sigma, std::sqrt(1.0 - a_prev));
    RowVec out = std::sqrt(a_prev) * x0_hat + std::sqrt(std::max(0.0, 1.0 - a_prev - sig * sig)) * eps_hat;
    if (sig > 0.0)
        for (Eigen::Index i = 0; i < out.size(); ++i) out(i) += sig * standard_normal(rng);
    return out;
}

inline RowVec standard_normal_vector(int dim, Rng& rng) {
    RowVec v(dim);
    for (int i = 0; i < dim; ++i) v(i) = standard_normal(rng);
    return v;
}

struct GenerationConfig {
    double w = 2.0;
    double sigma = 0.0;
    std::uint64_t seed = 0;
};

/// Runs the S-step reverse process from x. predict(x, t) returns the
/// conditional clean estimate and predict_uncond(x, t) the unconditional one;
/// the latter is skipped entirely when w == 0.
template <class Cond, class Uncond>
RowVec reverse_process(RowVec x, const NoiseSchedule& schedule, const GenerationConfig& cfg, Rng& rng, Cond&& predict,
                       Uncond&& predict_uncond) {
    for (std::size_t s = schedule.steps(); s >= 1; --s) {
        const int t = schedule.tau[s - 1];
        RowVec x0_hat = predict(x, t);
        if (cfg.w != 0.0) x0_hat = cfg_combine(x0_hat, predict_uncond(x, t), cfg.w);
        x = ddim_step(x, x0_hat, s, schedule, cfg.sigma, rng);
    }
    return x;
}

/// Generates the oracle item embedding for an observed (unedited) history.
inline RowVec generate(const ItemSequence& seq, const ModelParams& params, const UncondGuidance& uncond,
                       const NoiseSchedule& schedule, const GenerationConfig& cfg, Rng& rng) {
    const RowVec g = t_enc_forward(params, seq).guidance;
    RowVec x = standard_normal_vector(params.dim(), rng);
    return reverse_process(
        std::move(x), schedule, cfg, rng,
        [&](const RowVec& xt, int t) { return denoiser_forward(params.denoiser, xt, g, t).output; },
        [&](const RowVec& xt, int t) { return denoiser_forward(params.denoiser, xt, uncond.guidance, t).output; });
}

inline RowVec generate(const ItemSequence& seq, const ModelParams& params, const NoiseSchedule& schedule,
                       const GenerationConfig& cfg, Rng& rng) {
    return generate(seq, params, unconditional_guidance(params), schedule, cfg, rng);
}

enum class LossWeighting { simple, elbo };

struct LossConfig {
    double rho = 0.1;  // probability of training a step unconditionally
    DtsConfig dts;
    bool dts_enabled = true;
    LossWeighting weighting = LossWeighting::simple;
    double sigma = 0.0;  // only used by the elbo weighting
};

// Everything random about one batch element, drawn up front so the
// forward/backward work can run in any order.
struct ElementDraw {
    ItemSequence edited;
    bool unconditional = false;
    std::size_t s = 1;  // index into tau, 1-based
    RowVec eps;
};

// Per-element forward record.
struct ElementTrace {
    std::optional<EncoderCache> encoder;
    DenoiserCache denoiser;
    RowVec diff;  // prediction - target
    double weight = 1.0;
};

/// Scalar batch loss plus the recorded forward pass; backward() walks it.
class TrainingLoss {
public:
    static constexpr std::size_t kChunk = 8;

    double value() const noexcept { return loss_; }
    const EditPlan& plan() const noexcept { return plan_; }
    const std::vector<ElementDraw>& draws() const noexcept { return draws_; }
    bool recorded() const noexcept { return params_ != nullptr; }

    /// Gradients of value() for every parameter. Chunks of kChunk elements
    /// are reduced in a fixed order, so the result does not depend on the
    /// worker count.
    Gradients backward() const {
        if (!recorded()) throw UsageError("backward called without a recorded forward pass");
        const ModelParams& params = *params_;
        const std::size_t n = draws_.size();
        const std::size_t chunks = (n + kChunk - 1) / kChunk;
        std::vector<Gradients> partial(chunks);
        parallel_for(chunks, [&](std::size_t c) {
            Gradients g = Gradients::zeros(params);
            RowVec duncond = RowVec::Zero(params.dim());
            bool any_uncond = false;
            for (std::size_t i = c * kChunk; i < std::min(n, (c + 1) * kChunk); ++i) {
                const auto& draw = draws_[i];
                const auto& tr = traces_[i];
                const RowVec dout = (2.0 * tr.weight / static_cast<double>(n)) * tr.diff;
                const auto din = denoiser_backward(params.denoiser, tr.denoiser, dout, g.denoiser);
                const int t = schedule_->tau[draw.s - 1];
                g.row(batch_[i].target, params.dim()) += std::sqrt(schedule_->alpha(t)) * din.x_t - dout;
                if (draw.unconditional) {
                    duncond += din.guidance;
                    any_uncond = true;
                } else {
                    t_enc_backward(params, *tr.encoder, din.guidance, g);
                }
            }
            if (any_uncond) unconditional_backward(params, uncond_, duncond, g);
            partial[c] = std::move(g);
        });
        Gradients total = Gradients::zeros(params);
        for (const auto& p : partial) total.add(p);
        return total;
    }

    friend TrainingLoss training_loss(std::span<const ItemSequence>, const ModelParams&, const NoiseSchedule&,
                                      const LossConfig&, std::span<const double>, Rng&, Rng&);

private:
    double loss_ = 0.0;
    const ModelParams* params_ = nullptr;
    const NoiseSchedule* schedule_ = nullptr;
    std::vector<ItemSequence> batch_;
    std::vector<ElementDraw> draws_;
    std::vector<ElementTrace> traces_;
    UncondGuidance uncond_;
    EditPlan plan_;
};

/// Mean squared error between the predicted and true target embeddings over
/// the batch. Histories are edited by DTS, guidance is dropped with
/// probability rho, and one subsequence step is drawn per element. dts_rng
/// drives edits; noise_rng drives dropout, steps and noise. params and
/// schedule must outlive the returned object.
inline TrainingLoss training_loss(std::span<const ItemSequence> batch, const ModelParams& params,
                                  const NoiseSchedule& schedule, const LossConfig& cfg,
                                  std::span<const double> popularity, Rng& dts_rng, Rng& noise_rng) {
    if (batch.empty()) throw UsageError("training loss needs a nonempty batch");
    if (!(cfg.rho >= 0.0 && cfg.rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
    if (cfg.weighting == LossWeighting::elbo && !(cfg.sigma > 0.0))
        throw ConfigError("elbo loss weighting needs sigma > 0");

    TrainingLoss out;
    out.params_ = &params;
    out.schedule_ = &schedule;
    out.batch_.assign(batch.begin(), batch.end());

    std::vector<ItemSequence> edited;
    if (cfg.dts_enabled) {
        auto res = dts_edit(batch, params.embedding, cfg.dts, popularity, dts_rng);
        edited = std::move(res.sequences);
        out.plan_ = std::move(res.plan);
    } else {
        edited.assign(batch.begin(), batch.end());
    }

    const int d = params.dim();
    const std::size_t S = schedule.steps();
    std::uniform_int_distribution<std::size_t> pick_step(1, S);
    out.draws_.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto& draw = out.draws_[i];
        draw.edited = std::move(edited[i]);
        draw.unconditional = uniform01(noise_rng) < cfg.rho;
        draw.s = pick_step(noise_rng);
        draw.eps = standard_normal_vector(d, noise_rng);
    }

    out.uncond_ = unconditional_guidance(params);
    out.traces_.resize(batch.size());
    const std::size_t n = batch.size();
    const std::size_t chunks = (n + TrainingLoss::kChunk - 1) / TrainingLoss::kChunk;
    std::vector<double> chunk_loss(chunks, 0.0);
    parallel_for(chunks, [&](std::size_t c) {
        for (std::size_t i = c * TrainingLoss::kChunk; i < std::min(n, (c + 1) * TrainingLoss::kChunk); ++i) {
            const auto& draw = out.draws_[i];
            auto& tr = out.traces_[i];
            const RowVec& g = draw.unconditional ? out.uncond_.guidance
                                                 : tr.encoder.emplace(t_enc_forward(params, draw.edited)).guidance;
            const int t = schedule.tau[draw.s - 1];
            const RowVec target = params.embedding.weights.row(batch[i].target);
            const RowVec x_t = q_sample_alpha(target, schedule.alpha(t), draw.eps);
            tr.denoiser = denoiser_forward(params.denoiser, x_t, g, t);
            tr.diff = tr.denoiser.output - target;
            if (cfg.weighting == LossWeighting::elbo)
                tr.weight = 1.0 / (2.0 * d * cfg.sigma * cfg.sigma * (1.0 - schedule.alpha(t)));
            chunk_loss[c] += tr.weight * tr.diff.squaredNorm();
        }
    });
    for (double l : chunk_loss) out.loss_ += l;
    out.loss_ /= static_cast<double>(n);
    return out;
}

}  // namespace tdm
