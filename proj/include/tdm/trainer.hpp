#pragma once

// Epoch loop, Adam, early stopping and the checkpoint file.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tdm/config.hpp"
#include "tdm/corpus.hpp"
#include "tdm/diffusion.hpp"
#include "tdm/dts.hpp"
#include "tdm/embed_nn.hpp"
#include "tdm/error.hpp"
#include "tdm/metrics.hpp"
#include "tdm/rng.hpp"

namespace tdm {

struct TrainConfig {
    ModelConfig model;
    double learning_rate = 5e-4;
    std::size_t batch_size = 256;
    int epochs = 200;
    int patience = 20;
    DtsConfig dts;
    bool dts_enabled = true;
    double rho = 0.1;
    int diffusion_steps = 1000;  // T
    int subsequence = 10;        // S
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double w = 2.0;
    double sigma = 0.0;
    LossWeighting weighting = LossWeighting::simple;
    int eval_k = 20;
    std::uint64_t seed = 1;

    bool operator==(const TrainConfig& o) const { return to_kv() == o.to_kv(); }

    void validate() const {
        model.validate();
        dts.validate();
        if (!(learning_rate >= 0)) throw ConfigError("learning_rate must be non-negative");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (epochs < 0 || patience < 1) throw ConfigError("epochs must be >= 0 and patience >= 1");
        if (!(rho >= 0 && rho <= 1)) throw ConfigError("rho must lie in [0, 1]");
        if (!(sigma >= 0)) throw ConfigError("sigma must be non-negative");
        if (eval_k < 1) throw ConfigError("eval_k must be positive");
        if (weighting == LossWeighting::elbo && !(sigma > 0)) throw ConfigError("elbo weighting needs sigma > 0");
        (void)schedule();
    }

    NoiseSchedule schedule() const { return build_schedule(diffusion_steps, beta_start, beta_end, subsequence); }

    LossConfig loss_config() const {
        LossConfig lc;
        lc.rho = rho;
        lc.dts = dts;
        lc.dts_enabled = dts_enabled;
        lc.weighting = weighting;
        lc.sigma = sigma;
        return lc;
    }

    GenerationConfig generation(std::uint64_t gen_seed) const { return GenerationConfig{w, sigma, gen_seed}; }

    KeyValues to_kv() const {
        return {
            {"dim", std::to_string(model.dim)},
            {"seq_len", std::to_string(model.seq_len)},
            {"encoder_layers", std::to_string(model.encoder_layers)},
            {"heads", std::to_string(model.heads)},
            {"ffn_mult", std::to_string(model.ffn_mult)},
            {"denoiser_hidden", std::to_string(model.denoiser_hidden)},
            {"embed_init_std", format_double(model.embed_init_std)},
            {"raw_dummy_guidance", model.raw_dummy_guidance ? "true" : "false"},
            {"learning_rate", format_double(learning_rate)},
            {"batch_size", std::to_string(batch_size)},
            {"epochs", std::to_string(epochs)},
            {"patience", std::to_string(patience)},
            {"lambda1", format_double(dts.lambda1)},
            {"lambda2", format_double(dts.lambda2)},
            {"kappa", format_double(dts.kappa)},
            {"local_value", to_string(dts.local)},
            {"global_value", to_string(dts.global)},
            {"dts", dts_enabled ? "true" : "false"},
            {"rho", format_double(rho)},
            {"T", std::to_string(diffusion_steps)},
            {"S", std::to_string(subsequence)},
            {"beta_start", format_double(beta_start)},
            {"beta_end", format_double(beta_end)},
            {"w", format_double(w)},
            {"sigma", format_double(sigma)},
            {"loss_weighting", weighting == LossWeighting::simple ? "simple" : "elbo"},
            {"eval_k", std::to_string(eval_k)},
            {"seed", std::to_string(seed)},
        };
    }

    /// Sets one key; unknown keys are a ConfigError.
    void set(const std::string& key, const std::string& v) {
        if (key == "dim") model.dim = parse_int<int>(key, v);
        else if (key == "seq_len") model.seq_len = parse_int<int>(key, v);
        else if (key == "encoder_layers") model.encoder_layers = parse_int<int>(key, v);
        else if (key == "heads") model.heads = parse_int<int>(key, v);
        else if (key == "ffn_mult") model.ffn_mult = parse_int<int>(key, v);
        else if (key == "denoiser_hidden") model.denoiser_hidden = parse_int<int>(key, v);
        else if (key == "embed_init_std") model.embed_init_std = parse_double(key, v);
        else if (key == "raw_dummy_guidance") model.raw_dummy_guidance = parse_bool(key, v);
        else if (key == "learning_rate") learning_rate = parse_double(key, v);
        else if (key == "batch_size") batch_size = parse_int<std::size_t>(key, v);
        else if (key == "epochs") epochs = parse_int<int>(key, v);
        else if (key == "patience") patience = parse_int<int>(key, v);
        else if (key == "lambda1") dts.lambda1 = parse_double(key, v);
        else if (key == "lambda2") dts.lambda2 = parse_double(key, v);
        else if (key == "kappa") dts.kappa = parse_double(key, v);
        else if (key == "local_value") dts.local = parse_local_value(v);
        else if (key == "global_value") dts.global = parse_global_value(v);
        else if (key == "dts") dts_enabled = parse_bool(key, v);
        else if (key == "rho") rho = parse_double(key, v);
        else if (key == "T") diffusion_steps = parse_int<int>(key, v);
        else if (key == "S") subsequence = parse_int<int>(key, v);
        else if (key == "beta_start") beta_start = parse_double(key, v);
        else if (key == "beta_end") beta_end = parse_double(key, v);
        else if (key == "w") w = parse_double(key, v);
        else if (key == "sigma") sigma = parse_double(key, v);
        else if (key == "loss_weighting") {
            if (v == "simple") weighting = LossWeighting::simple;
            else if (v == "elbo") weighting = LossWeighting::elbo;
            else throw ConfigError("loss_weighting must be simple or elbo");
        } else if (key == "eval_k") eval_k = parse_int<int>(key, v);
        else if (key == "seed") seed = parse_int<std::uint64_t>(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
    }

    static TrainConfig from_kv(const KeyValues& kv) {
        TrainConfig c;
        for (const auto& [k, v] : kv) c.set(k, v);
        return c;
    }
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
    ModelParams m;
    ModelParams v;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState zeros(const ModelParams& like) { return AdamState{zeros_like(like), zeros_like(like)}; }
};

namespace detail {

struct TensorRef {
    std::string name;
    double* data;
    Eigen::Index rows, cols;
};

template <class Params>
std::vector<TensorRef> tensor_refs(Params& p) {
    std::vector<TensorRef> out;
    visit_params(p, [&](const std::string& name, auto& t) {
        out.push_back({name, const_cast<double*>(t.data()), t.rows(), t.cols()});
    });
    return out;
}

}  // namespace detail

/// Bias-corrected adaptive-moment update. The PAD embedding row is never
/// touched.
inline void optimizer_step(ModelParams& params, const ModelParams& grads, AdamState& state, double learning_rate) {
    auto p = detail::tensor_refs(params);
    auto g = detail::tensor_refs(grads);
    auto m = detail::tensor_refs(state.m);
    auto v = detail::tensor_refs(state.v);
    if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size())
        throw UsageError("optimizer: parameter tree mismatch");
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i].rows != g[i].rows || p[i].cols != g[i].cols || p[i].rows != m[i].rows || p[i].cols != m[i].cols ||
            p[i].rows != v[i].rows || p[i].cols != v[i].cols)
            throw UsageError("optimizer: shape mismatch for " + p[i].name);

    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const Eigen::Index pad = params.vocab().pad();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool is_table = i == 0;  // visit order puts the embedding table first
        const Eigen::Index n = p[i].rows * p[i].cols;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (is_table && j % p[i].rows == pad) continue;  // column-major: row index is j % rows
            const double gj = g[i].data[j];
            double& mj = m[i].data[j];
            double& vj = v[i].data[j];
            mj = state.beta1 * mj + (1.0 - state.beta1) * gj;
            vj = state.beta2 * vj + (1.0 - state.beta2) * gj * gj;
            p[i].data[j] -= learning_rate * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
        }
    }
}

inline bool bit_equal(const ModelParams& a, const ModelParams& b) {
    const auto ra = detail::tensor_refs(a);
    const auto rb = detail::tensor_refs(b);
    if (ra.size() != rb.size() || a.raw_dummy_guidance != b.raw_dummy_guidance || a.encoder.heads != b.encoder.heads)
        return false;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        if (ra[i].name != rb[i].name || ra[i].rows != rb[i].rows || ra[i].cols != rb[i].cols) return false;
        if (std::memcmp(ra[i].data, rb[i].data, sizeof(double) * static_cast<std::size_t>(ra[i].rows * ra[i].cols)))
            return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainState {
    ModelParams params;
    AdamState adam;
    Rng shuffle_rng;
    Rng dts_rng;
    Rng noise_rng;
    int epoch = 0;  // completed epochs
    int best_epoch = 0;
    double best_hr = -1.0;
    int bad_epochs = 0;
    bool finished = false;
    std::vector<double> train_loss;  // mean batch loss per epoch
    std::vector<double> val_hr;
};

struct Checkpoint {
    TrainConfig config;
    NoiseSchedule schedule;
    ModelParams best;  // parameters with the highest validation HR
    TrainState state;  // where training stopped, for resuming
};

inline bool bit_equal(const Checkpoint& a, const Checkpoint& b) {
    const auto& x = a.state;
    const auto& y = b.state;
    return a.config == b.config && a.schedule.betas == b.schedule.betas && a.schedule.tau == b.schedule.tau &&
           bit_equal(a.best, b.best) && bit_equal(x.params, y.params) && bit_equal(x.adam.m, y.adam.m) &&
           bit_equal(x.adam.v, y.adam.v) && x.adam.step == y.adam.step && x.shuffle_rng == y.shuffle_rng &&
           x.dts_rng == y.dts_rng && x.noise_rng == y.noise_rng && x.epoch == y.epoch &&
           x.best_epoch == y.best_epoch && std::memcmp(&x.best_hr, &y.best_hr, sizeof(double)) == 0 &&
           x.bad_epochs == y.bad_epochs && x.finished == y.finished && x.train_loss == y.train_loss &&
           x.val_hr == y.val_hr;
}

struct TrainOptions {
    // Stop (as if interrupted) once this many epochs are complete.
    std::optional<int> stop_after_epoch;
    // Called after every epoch with (epoch, mean train loss, val HR@K).
    std::function<void(int, double, double)> on_epoch;
};

/// Fresh state for a config: parameters from the "init" substream, zeroed
/// optimizer moments and the shuffle/dts/noise substreams.
inline Checkpoint initial_checkpoint(const TrainConfig& config, ItemId item_count) {
    config.validate();
    Checkpoint ck;
    ck.config = config;
    ck.schedule = config.schedule();
    Rng init = substream(config.seed, "init");
    ck.state.params = init_params(config.model, item_count, init);
    ck.state.adam = AdamState::zeros(ck.state.params);
    ck.state.shuffle_rng = substream(config.seed, "shuffle");
    ck.state.dts_rng = substream(config.seed, "dts");
    ck.state.noise_rng = substream(config.seed, "noise");
    ck.best = ck.state.params;
    return ck;
}

inline GenerationConfig validation_generation(const TrainConfig& config) {
    return config.generation(splitmix64(config.seed ^ name_hash("validation")));
}

/// Runs (or resumes) training. Each epoch shuffles the training sequences,
/// takes DTS-edited loss gradients batch by batch, and scores HR@K on the
/// validation split; the returned checkpoint keeps the best-scoring
/// parameters alongside the resumable state.
inline Checkpoint train(Checkpoint ck, const RawDataset& train_split, const RawDataset& val_split,
                        const TrainOptions& opts = {}) {
    const auto& cfg = ck.config;
    cfg.validate();
    const auto train_seqs = to_item_sequences(train_split, static_cast<std::size_t>(cfg.model.seq_len));
    const auto val_seqs = to_item_sequences(val_split, static_cast<std::size_t>(cfg.model.seq_len));
    if (train_seqs.empty() || val_seqs.empty()) throw EmptyDatasetError("training needs nonempty train and val splits");
    if (train_split.item_count != ck.state.params.vocab().item_count)
        throw UsageError("dataset item count does not match the model");
    const auto popularity = item_popularity(train_split);
    const LossConfig loss_cfg = cfg.loss_config();
    const GenerationConfig val_gen = validation_generation(cfg);
    auto& st = ck.state;

    while (!st.finished && st.epoch < cfg.epochs) {
        if (opts.stop_after_epoch && st.epoch >= *opts.stop_after_epoch) break;
        const int epoch = st.epoch + 1;
        std::vector<std::size_t> order(train_seqs.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), st.shuffle_rng);

        double loss_sum = 0.0;
        std::vector<ItemSequence> batch;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            batch.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
                batch.push_back(train_seqs[order[i]]);
            const auto loss = training_loss(batch, st.params, ck.schedule, loss_cfg, popularity, st.dts_rng, st.noise_rng);
            if (!std::isfinite(loss.value()))
                throw NumericError("loss diverged at epoch " + std::to_string(epoch) + ", batch starting " +
                                   std::to_string(start));
            const ModelParams grads = loss.backward().to_dense(st.params);
            optimizer_step(st.params, grads, st.adam, cfg.learning_rate);
            if (!all_finite(st.params))
                throw NumericError("non-finite parameters after the step at epoch " + std::to_string(epoch));
            loss_sum += loss.value() * static_cast<double>(batch.size());
        }
        const double mean_loss = loss_sum / static_cast<double>(train_seqs.size());
        const double hr = evaluate_params(st.params, val_seqs, ck.schedule, val_gen, cfg.eval_k).hr;
        st.train_loss.push_back(mean_loss);
        st.val_hr.push_back(hr);
        st.epoch = epoch;
        if (hr > st.best_hr) {
            st.best_hr = hr;
            st.best_epoch = epoch;
            st.bad_epochs = 0;
            ck.best = st.params;
        } else if (++st.bad_epochs >= cfg.patience) {
            st.finished = true;
        }
        if (opts.on_epoch) opts.on_epoch(epoch, mean_loss, hr);
    }
    if (st.epoch >= cfg.epochs) st.finished = true;
    return ck;
}

inline Checkpoint train(const TrainConfig& config, const RawDataset& train_split, const RawDataset& val_split,
                        const TrainOptions& opts = {}) {
    return train(initial_checkpoint(config, train_split.item_count), train_split, val_split, opts);
}

// ---------------------------------------------------------------------------
// Checkpoint file: "TDM1", u32 version, u64 array count, arrays (u64 name
// length, name, u64 rank, u64 dims, row-major f64 data), u64 config length,
// config text, u64 rng length, rng state bytes. All integers little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        u64(bits);
    }
    void bytes(std::string_view s) { buf_.append(s); }
    void str(std::string_view s) {
        u64(s.size());
        bytes(s);
    }
    const std::string& data() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::size_t offset() const { return pos_; }
    bool done() const { return pos_ == data_.size(); }

    std::string_view bytes(std::size_t n) {
        if (n > data_.size() - pos_) throw FormatError("truncated file", pos_);
        const auto out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::uint32_t u32() {
        const auto b = bytes(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        return v;
    }
    std::uint64_t u64() {
        const auto b = bytes(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
    std::string str() {
        const auto at = pos_;
        const auto n = u64();
        if (n > data_.size() - pos_) throw FormatError("string length exceeds file", at);
        return std::string(bytes(n));
    }

private:
    std::string_view data_;
    std::size_t pos_ = 0;
};

struct NamedArray {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> values;  // row-major
};

template <class T>
NamedArray to_named(const std::string& name, const T& t) {
    NamedArray a;
    a.name = name;
    if constexpr (T::IsVectorAtCompileTime) a.dims = {static_cast<std::uint64_t>(t.size())};
    else a.dims = {static_cast<std::uint64_t>(t.rows()), static_cast<std::uint64_t>(t.cols())};
    a.values.reserve(static_cast<std::size_t>(t.size()));
    for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) a.values.push_back(t(r, c));
    return a;
}

inline NamedArray vector_array(const std::string& name, const std::vector<double>& v) {
    return NamedArray{name, {v.size()}, v};
}

inline void append_params(std::vector<NamedArray>& out, const std::string& prefix, const ModelParams& p) {
    visit_params(p, [&](const std::string& name, const auto& t) { out.push_back(to_named(prefix + name, t)); });
}

inline void fill_params(ModelParams& p, const std::string& prefix, const std::map<std::string, const NamedArray*>& arrays) {
    visit_params(p, [&](const std::string& name, auto& t) {
        const auto it = arrays.find(prefix + name);
        if (it == arrays.end()) throw FormatError("missing array " + prefix + name, 0);
        const NamedArray& a = *it->second;
        const bool vec = std::decay_t<decltype(t)>::IsVectorAtCompileTime;
        const bool shape_ok = vec ? (a.dims.size() == 1 && a.dims[0] == static_cast<std::uint64_t>(t.size()))
                                  : (a.dims.size() == 2 && a.dims[0] == static_cast<std::uint64_t>(t.rows()) &&
                                     a.dims[1] == static_cast<std::uint64_t>(t.cols()));
        if (!shape_ok) throw FormatError("shape mismatch for " + prefix + name, 0);
        std::size_t k = 0;
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = a.values[k++];
    });
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    std::vector<detail::NamedArray> arrays;
    detail::append_params(arrays, "best.", ck.best);
    detail::append_params(arrays, "state.", ck.state.params);
    detail::append_params(arrays, "adam_m.", ck.state.adam.m);
    detail::append_params(arrays, "adam_v.", ck.state.adam.v);
    arrays.push_back(detail::vector_array("schedule.betas", ck.schedule.betas));
    arrays.push_back(detail::vector_array("schedule.tau", std::vector<double>(ck.schedule.tau.begin(), ck.schedule.tau.end())));
    arrays.push_back(detail::vector_array("history.train_loss", ck.state.train_loss));
    arrays.push_back(detail::vector_array("history.val_hr", ck.state.val_hr));

    detail::ByteWriter w;
    w.bytes("TDM1");
    w.u32(kCheckpointVersion);
    w.u64(arrays.size());
    for (const auto& a : arrays) {
        w.str(a.name);
        w.u64(a.dims.size());
        for (auto d : a.dims) w.u64(d);
        for (double v : a.values) w.f64(v);
    }

    KeyValues kv = ck.config.to_kv();
    const auto& st = ck.state;
    kv.emplace_back("item_count", std::to_string(ck.best.vocab().item_count));
    kv.emplace_back("state.epoch", std::to_string(st.epoch));
    kv.emplace_back("state.best_epoch", std::to_string(st.best_epoch));
    kv.emplace_back("state.best_hr", format_double(st.best_hr));
    kv.emplace_back("state.bad_epochs", std::to_string(st.bad_epochs));
    kv.emplace_back("state.finished", st.finished ? "true" : "false");
    kv.emplace_back("adam.step", std::to_string(st.adam.step));
    w.str(format_key_values(kv));

    const std::string rng = rng_state(st.shuffle_rng) + "\n" + rng_state(st.dts_rng) + "\n" + rng_state(st.noise_rng);
    w.str(rng);
    return w.data();
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
    detail::ByteReader r(bytes);
    if (r.bytes(4) != "TDM1") throw FormatError("bad magic", 0);
    const auto version_at = r.offset();
    if (r.u32() != kCheckpointVersion) throw FormatError("unsupported version", version_at);

    const auto count_at = r.offset();
    const auto count = r.u64();
    if (count > bytes.size()) throw FormatError("implausible array count", count_at);
    std::vector<detail::NamedArray> arrays(count);
    std::map<std::string, const detail::NamedArray*> by_name;
    for (auto& a : arrays) {
        a.name = r.str();
        const auto rank_at = r.offset();
        const auto rank = r.u64();
        if (rank > 8) throw FormatError("implausible rank", rank_at);
        std::uint64_t n = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            const auto d = r.u64();
            if (d > bytes.size()) throw FormatError("implausible dimension", r.offset() - 8);
            a.dims.push_back(d);
            n *= d;
        }
        if (n * 8 > bytes.size() - r.offset()) throw FormatError("truncated array " + a.name, r.offset());
        a.values.resize(static_cast<std::size_t>(n));
        for (auto& v : a.values) v = r.f64();
        by_name[a.name] = &a;
    }

    const auto config_at = r.offset();
    KeyValues kv;
    try {
        kv = parse_key_values(r.str());
    } catch (const ParseError& e) {
        throw FormatError(std::string("config block: ") + e.what(), config_at);
    }
    const std::string rng = r.str();
    if (!r.done()) throw FormatError("trailing bytes", r.offset());

    Checkpoint ck;
    KeyValues train_kv;
    std::map<std::string, std::string> extra;
    for (const auto& [k, v] : kv) {
        if (k == "item_count" || k.starts_with("state.") || k.starts_with("adam.")) extra[k] = v;
        else train_kv.emplace_back(k, v);
    }
    try {
        ck.config = TrainConfig::from_kv(train_kv);
        const auto item_count = parse_int<ItemId>("item_count", extra.at("item_count"));
        auto& st = ck.state;
        st.epoch = parse_int<int>("state.epoch", extra.at("state.epoch"));
        st.best_epoch = parse_int<int>("state.best_epoch", extra.at("state.best_epoch"));
        st.best_hr = parse_double("state.best_hr", extra.at("state.best_hr"));
        st.bad_epochs = parse_int<int>("state.bad_epochs", extra.at("state.bad_epochs"));
        st.finished = parse_bool("state.finished", extra.at("state.finished"));

        Rng dummy;
        ck.best = init_params(ck.config.model, item_count, dummy);
        st.params = ck.best;
        st.adam = AdamState::zeros(ck.best);
        st.adam.step = parse_int<std::uint64_t>("adam.step", extra.at("adam.step"));
    } catch (const std::out_of_range&) {
        throw FormatError("config block is missing state keys", config_at);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("config block: ") + e.what(), config_at);
    }
    detail::fill_params(ck.best, "best.", by_name);
    detail::fill_params(ck.state.params, "state.", by_name);
    detail::fill_params(ck.state.adam.m, "adam_m.", by_name);
    detail::fill_params(ck.state.adam.v, "adam_v.", by_name);

    const auto get = [&](const std::string& name) -> const std::vector<double>& {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("missing array " + name, 0);
        return it->second->values;
    };
    ck.schedule = schedule_from_betas(get("schedule.betas"), ck.config.subsequence);
    const auto& tau = get("schedule.tau");
    if (std::vector<double>(ck.schedule.tau.begin(), ck.schedule.tau.end()) != tau)
        throw FormatError("stored subsequence disagrees with the schedule", 0);
    ck.state.train_loss = get("history.train_loss");
    ck.state.val_hr = get("history.val_hr");

    std::istringstream rs(rng);
    std::string line;
    std::vector<std::string> states;
    while (std::getline(rs, line)) states.push_back(line);
    if (states.size() != 3) throw FormatError("rng block must hold three engine states", bytes.size() - rng.size());
    ck.state.shuffle_rng = rng_from_state(states[0]);
    ck.state.dts_rng = rng_from_state(states[1]);
    ck.state.noise_rng = rng_from_state(states[2]);
    return ck;
}

/// Writes bytes to `path` via a sibling temporary and a rename, so readers
/// never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace tdm
