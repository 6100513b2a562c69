#pragma once

// Embedding table, guidance encoder and denoiser, each with a hand-written
// backward pass. No general autodiff.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tdm/corpus.hpp"
#include "tdm/error.hpp"
#include "tdm/rng.hpp"

namespace tdm {

using Matrix = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

struct ModelConfig {
    int dim = 64;
    int seq_len = 10;
    int encoder_layers = 1;
    int heads = 1;
    int ffn_mult = 4;
    int denoiser_hidden = 0;  // 0 means 2 * dim
    double embed_init_std = 1.0;
    // Unconditional guidance is the raw DUMMY row instead of T-enc([DUMMY]).
    bool raw_dummy_guidance = false;

    int hidden() const { return denoiser_hidden > 0 ? denoiser_hidden : 2 * dim; }

    void validate() const {
        if (dim <= 0 || seq_len < 3 || encoder_layers < 1 || heads < 1 || ffn_mult < 1)
            throw ConfigError("model dimensions must be positive (seq_len >= 3)");
        if (dim % heads != 0) throw ConfigError("dim must be divisible by heads");
        if (!(embed_init_std > 0)) throw ConfigError("embed_init_std must be positive");
    }
};

struct EmbeddingTable {
    Matrix weights;  // rows: items, then PAD (zero, frozen), then DUMMY

    Vocab vocab() const { return Vocab{static_cast<ItemId>(weights.rows()) - 2}; }
    int dim() const { return static_cast<int>(weights.cols()); }
};

struct EncoderLayer {
    Matrix wq, wk, wv, wo;
    RowVec ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Matrix ffn_w1;
    RowVec ffn_b1;
    Matrix ffn_w2;
    RowVec ffn_b2;
};

struct EncoderParams {
    Matrix positions;  // seq_len x dim
    std::vector<EncoderLayer> layers;
    RowVec final_gain, final_bias;
    int heads = 1;
};

struct DenoiserParams {
    Matrix w1;  // 3d x h, input is [x_t | g | step embedding]
    RowVec b1;
    Matrix w2;
    RowVec b2;
    Matrix w3;  // h x d
    RowVec b3;
};

struct ModelParams {
    EmbeddingTable embedding;
    EncoderParams encoder;
    DenoiserParams denoiser;
    bool raw_dummy_guidance = false;

    int dim() const { return embedding.dim(); }
    Vocab vocab() const { return embedding.vocab(); }
    int seq_len() const { return static_cast<int>(encoder.positions.rows()); }
};

/// Calls f(name, tensor) for every parameter array in a fixed order. The
/// tensor is either a Matrix or a RowVec.
template <class Params, class F>
void visit_params(Params& p, F&& f) {
    f("embedding.weights", p.embedding.weights);
    f("encoder.positions", p.encoder.positions);
    for (std::size_t l = 0; l < p.encoder.layers.size(); ++l) {
        auto& L = p.encoder.layers[l];
        const std::string pre = "encoder.layer" + std::to_string(l) + ".";
        f(pre + "wq", L.wq);
        f(pre + "wk", L.wk);
        f(pre + "wv", L.wv);
        f(pre + "wo", L.wo);
        f(pre + "ln1_gain", L.ln1_gain);
        f(pre + "ln1_bias", L.ln1_bias);
        f(pre + "ln2_gain", L.ln2_gain);
        f(pre + "ln2_bias", L.ln2_bias);
        f(pre + "ffn_w1", L.ffn_w1);
        f(pre + "ffn_b1", L.ffn_b1);
        f(pre + "ffn_w2", L.ffn_w2);
        f(pre + "ffn_b2", L.ffn_b2);
    }
    f("encoder.final_gain", p.encoder.final_gain);
    f("encoder.final_bias", p.encoder.final_bias);
    f("denoiser.w1", p.denoiser.w1);
    f("denoiser.b1", p.denoiser.b1);
    f("denoiser.w2", p.denoiser.w2);
    f("denoiser.b2", p.denoiser.b2);
    f("denoiser.w3", p.denoiser.w3);
    f("denoiser.b3", p.denoiser.b3);
}

inline ModelParams zeros_like(const ModelParams& p) {
    ModelParams z = p;
    visit_params(z, [](const std::string&, auto& t) { t.setZero(); });
    return z;
}

inline bool all_finite(const ModelParams& p) {
    bool ok = true;
    visit_params(p, [&](const std::string&, const auto& t) { ok = ok && t.allFinite(); });
    return ok;
}

namespace detail {

inline Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
    Matrix m(rows, cols);
    // Fill in row-major order so the draw sequence is layout independent.
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = std * standard_normal(rng);
    return m;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline Matrix silu(const Matrix& z) {
    return z.unaryExpr([](double v) { return v * sigmoid(v); });
}

inline Matrix silu_grad(const Matrix& z) {
    return z.unaryExpr([](double v) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
    });
}

constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    Matrix xhat;
    Eigen::VectorXd inv_std;
};

inline Matrix layer_norm(const Matrix& x, const RowVec& gain, const RowVec& bias, LayerNormCache& c) {
    const auto n = x.cols();
    c.xhat.resize(x.rows(), n);
    c.inv_std.resize(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mu = x.row(r).mean();
        const RowVec xc = x.row(r).array() - mu;
        const double var = xc.squaredNorm() / static_cast<double>(n);
        c.inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
        c.xhat.row(r) = xc * c.inv_std(r);
    }
    Matrix y = c.xhat.array().rowwise() * gain.array();
    y.rowwise() += bias;
    return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const RowVec& gain, const LayerNormCache& c,
                                  RowVec& dgain, RowVec& dbias) {
    dgain += dy.cwiseProduct(c.xhat).colwise().sum();
    dbias += dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * gain.array();
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const double mean_d = dxhat.row(r).mean();
        const double mean_dx = dxhat.row(r).dot(c.xhat.row(r)) / static_cast<double>(dy.cols());
        dx.row(r) = c.inv_std(r) * (dxhat.row(r).array() - mean_d - c.xhat.row(r).array() * mean_dx);
    }
    return dx;
}

}  // namespace detail

/// Random initialization; PAD row zero, LayerNorm gains one.
inline ModelParams init_params(const ModelConfig& cfg, ItemId item_count, Rng& rng) {
    cfg.validate();
    if (item_count <= 0) throw ConfigError("item_count must be positive");
    const int d = cfg.dim;
    const int f = cfg.ffn_mult * d;
    const int h = cfg.hidden();
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));

    ModelParams p;
    p.raw_dummy_guidance = cfg.raw_dummy_guidance;
    p.embedding.weights = detail::normal_matrix(item_count + 2, d, cfg.embed_init_std, rng);
    p.embedding.weights.row(item_count).setZero();

    p.encoder.heads = cfg.heads;
    p.encoder.positions = detail::normal_matrix(cfg.seq_len, d, 0.1, rng);
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        EncoderLayer L;
        L.wq = detail::normal_matrix(d, d, sd, rng);
        L.wk = detail::normal_matrix(d, d, sd, rng);
        L.wv = detail::normal_matrix(d, d, sd, rng);
        L.wo = detail::normal_matrix(d, d, sd, rng);
        L.ln1_gain = RowVec::Ones(d);
        L.ln1_bias = RowVec::Zero(d);
        L.ln2_gain = RowVec::Ones(d);
        L.ln2_bias = RowVec::Zero(d);
        L.ffn_w1 = detail::normal_matrix(d, f, sd, rng);
        L.ffn_b1 = RowVec::Zero(f);
        L.ffn_w2 = detail::normal_matrix(f, d, 1.0 / std::sqrt(static_cast<double>(f)), rng);
        L.ffn_b2 = RowVec::Zero(d);
        p.encoder.layers.push_back(std::move(L));
    }
    p.encoder.final_gain = RowVec::Ones(d);
    p.encoder.final_bias = RowVec::Zero(d);

    p.denoiser.w1 = detail::normal_matrix(3 * d, h, 1.0 / std::sqrt(3.0 * d), rng);
    p.denoiser.b1 = RowVec::Zero(h);
    p.denoiser.w2 = detail::normal_matrix(h, h, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    p.denoiser.b2 = RowVec::Zero(h);
    p.denoiser.w3 = detail::normal_matrix(h, d, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    p.denoiser.b3 = RowVec::Zero(d);
    return p;
}

/// Rows of the table for each slot; PAD rows come out as zeros.
inline Matrix embed_lookup(const EmbeddingTable& table, const ItemSequence& seq) {
    const auto rows = table.weights.rows();
    Matrix out(static_cast<Eigen::Index>(seq.slots.size()), table.weights.cols());
    for (std::size_t i = 0; i < seq.slots.size(); ++i) {
        const ItemId id = seq.slots[i];
        if (id < 0 || id >= rows) throw IndexError("item id " + std::to_string(id) + " out of range");
        out.row(static_cast<Eigen::Index>(i)) = table.weights.row(id);
    }
    return out;
}

/// Sinusoidal step features: sin(step * f_i) then cos(step * f_i) with
/// geometric frequencies f_i = 10000^(-i / half).
inline RowVec timestep_embedding(long step, int dim) {
    if (step < 0) throw UsageError("diffusion step must be non-negative");
    RowVec e = RowVec::Zero(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / static_cast<double>(half));
        e(i) = std::sin(static_cast<double>(step) * freq);
        e(half + i) = std::cos(static_cast<double>(step) * freq);
    }
    return e;
}

// Gradient accumulator. Embedding gradients are sparse by row so per-chunk
// accumulators stay small for large catalogues.
struct Gradients {
    std::map<ItemId, RowVec> embedding_rows;
    EncoderParams encoder;
    DenoiserParams denoiser;

    static Gradients zeros(const ModelParams& like) {
        const ModelParams z = zeros_like(like);
        return Gradients{{}, z.encoder, z.denoiser};
    }

    RowVec& row(ItemId id, int dim) {
        auto it = embedding_rows.find(id);
        if (it == embedding_rows.end()) it = embedding_rows.emplace(id, RowVec::Zero(dim)).first;
        return it->second;
    }

    void add(const Gradients& other) {
        for (const auto& [id, g] : other.embedding_rows) row(id, static_cast<int>(g.size())) += g;
        encoder.positions += other.encoder.positions;
        for (std::size_t l = 0; l < encoder.layers.size(); ++l) {
            auto& a = encoder.layers[l];
            const auto& b = other.encoder.layers[l];
            a.wq += b.wq;
            a.wk += b.wk;
            a.wv += b.wv;
            a.wo += b.wo;
            a.ln1_gain += b.ln1_gain;
            a.ln1_bias += b.ln1_bias;
            a.ln2_gain += b.ln2_gain;
            a.ln2_bias += b.ln2_bias;
            a.ffn_w1 += b.ffn_w1;
            a.ffn_b1 += b.ffn_b1;
            a.ffn_w2 += b.ffn_w2;
            a.ffn_b2 += b.ffn_b2;
        }
        encoder.final_gain += other.encoder.final_gain;
        encoder.final_bias += other.encoder.final_bias;
        denoiser.w1 += other.denoiser.w1;
        denoiser.b1 += other.denoiser.b1;
        denoiser.w2 += other.denoiser.w2;
        denoiser.b2 += other.denoiser.b2;
        denoiser.w3 += other.denoiser.w3;
        denoiser.b3 += other.denoiser.b3;
    }

    /// Dense gradient shaped like the parameters; the PAD row is zero.
    ModelParams to_dense(const ModelParams& like) const {
        ModelParams g = zeros_like(like);
        g.encoder = encoder;
        g.denoiser = denoiser;
        const ItemId pad = like.vocab().pad();
        for (const auto& [id, v] : embedding_rows)
            if (id != pad) g.embedding.weights.row(id) = v;
        return g;
    }
};

struct EncoderLayerCache {
    Matrix input;
    detail::LayerNormCache ln1, ln2;
    Matrix a, q, k, v;
    std::vector<Matrix> attn;  // per head, m x m, zero above the diagonal
    Matrix ctx;
    Matrix b, z, u;
};

struct EncoderCache {
    std::vector<ItemId> ids;  // the non-PAD slice
    Eigen::Index offset = 0;  // position of ids[0] among the slots
    std::vector<EncoderLayerCache> layers;
    detail::LayerNormCache final_ln;
    RowVec guidance;
};

/// Causal self-attention over the non-PAD slots; the guidance is the final
/// normalized representation of the last slot.
inline EncoderCache t_enc_forward(const ModelParams& params, const ItemSequence& seq) {
    const auto& enc = params.encoder;
    const auto& table = params.embedding.weights;
    const Vocab vocab = params.vocab();
    const auto L = enc.positions.rows();
    const auto d = table.cols();
    if (static_cast<Eigen::Index>(seq.slots.size()) != L)
        throw UsageError("sequence length does not match encoder positions");

    EncoderCache c;
    const std::size_t first = seq.first_filled(vocab);
    if (first == seq.slots.size()) throw UsageError("cannot encode an all-PAD sequence");
    for (std::size_t i = first; i < seq.slots.size(); ++i) {
        const ItemId id = seq.slots[i];
        if (id < 0 || id >= vocab.rows() || id == vocab.pad())
            throw IndexError("invalid slot id " + std::to_string(id));
        c.ids.push_back(id);
    }
    c.offset = static_cast<Eigen::Index>(first);
    const auto m = static_cast<Eigen::Index>(c.ids.size());

    Matrix h(m, d);
    for (Eigen::Index i = 0; i < m; ++i) h.row(i) = table.row(c.ids[static_cast<std::size_t>(i)]);
    h += enc.positions.block(c.offset, 0, m, d);

    const int heads = enc.heads;
    const auto dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const auto& P : enc.layers) {
        EncoderLayerCache lc;
        lc.input = h;
        lc.a = detail::layer_norm(h, P.ln1_gain, P.ln1_bias, lc.ln1);
        lc.q = lc.a * P.wq;
        lc.k = lc.a * P.wk;
        lc.v = lc.a * P.wv;
        lc.ctx.resize(m, d);
        for (int hd = 0; hd < heads; ++hd) {
            const auto col = hd * dh;
            Matrix s = lc.q.middleCols(col, dh) * lc.k.middleCols(col, dh).transpose() * scale;
            Matrix attn = Matrix::Zero(m, m);
            for (Eigen::Index i = 0; i < m; ++i) {
                const double mx = s.row(i).head(i + 1).maxCoeff();
                double sum = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) sum += (attn(i, j) = std::exp(s(i, j) - mx));
                attn.row(i).head(i + 1) /= sum;
            }
            lc.ctx.middleCols(col, dh) = attn * lc.v.middleCols(col, dh);
            lc.attn.push_back(std::move(attn));
        }
        Matrix h1 = h + lc.ctx * P.wo;
        lc.b = detail::layer_norm(h1, P.ln2_gain, P.ln2_bias, lc.ln2);
        lc.z = lc.b * P.ffn_w1;
        lc.z.rowwise() += P.ffn_b1;
        lc.u = detail::silu(lc.z);
        Matrix f = lc.u * P.ffn_w2;
        f.rowwise() += P.ffn_b2;
        h = h1 + f;
        c.layers.push_back(std::move(lc));
    }
    const Matrix last = h.row(m - 1);
    c.guidance = detail::layer_norm(last, enc.final_gain, enc.final_bias, c.final_ln).row(0);
    return c;
}

/// Accumulates d(loss)/d(params) given d(loss)/d(guidance).
inline void t_enc_backward(const ModelParams& params, const EncoderCache& c, const RowVec& dguidance,
                           Gradients& grads) {
    const auto& enc = params.encoder;
    const auto d = params.embedding.weights.cols();
    const auto m = static_cast<Eigen::Index>(c.ids.size());
    const int heads = enc.heads;
    const auto dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix dh_mat = Matrix::Zero(m, d);
    dh_mat.row(m - 1) = detail::layer_norm_backward(Matrix(dguidance), enc.final_gain, c.final_ln,
                                                    grads.encoder.final_gain, grads.encoder.final_bias);

    for (std::size_t li = enc.layers.size(); li-- > 0;) {
        const auto& P = enc.layers[li];
        const auto& lc = c.layers[li];
        auto& G = grads.encoder.layers[li];

        // h = h1 + ffn(ln2(h1))
        const Matrix& df = dh_mat;
        G.ffn_w2.noalias() += lc.u.transpose() * df;
        G.ffn_b2 += df.colwise().sum();
        const Matrix dz = (df * P.ffn_w2.transpose()).cwiseProduct(detail::silu_grad(lc.z));
        G.ffn_w1.noalias() += lc.b.transpose() * dz;
        G.ffn_b1 += dz.colwise().sum();
        const Matrix db = dz * P.ffn_w1.transpose();
        const Matrix dh1 = dh_mat + detail::layer_norm_backward(db, P.ln2_gain, lc.ln2, G.ln2_gain, G.ln2_bias);

        // h1 = h + attn(ln1(h)) wo
        G.wo.noalias() += lc.ctx.transpose() * dh1;
        const Matrix dctx = dh1 * P.wo.transpose();
        Matrix dq(m, d), dk(m, d), dv(m, d);
        for (int hd = 0; hd < heads; ++hd) {
            const auto col = hd * dh;
            const Matrix& attn = lc.attn[static_cast<std::size_t>(hd)];
            const Matrix dattn = dctx.middleCols(col, dh) * lc.v.middleCols(col, dh).transpose();
            dv.middleCols(col, dh) = attn.transpose() * dctx.middleCols(col, dh);
            Matrix ds = Matrix::Zero(m, m);
            for (Eigen::Index i = 0; i < m; ++i) {
                const double dot = attn.row(i).head(i + 1).dot(dattn.row(i).head(i + 1));
                for (Eigen::Index j = 0; j <= i; ++j) ds(i, j) = attn(i, j) * (dattn(i, j) - dot);
            }
            ds *= scale;
            dq.middleCols(col, dh) = ds * lc.k.middleCols(col, dh);
            dk.middleCols(col, dh) = ds.transpose() * lc.q.middleCols(col, dh);
        }
        G.wq.noalias() += lc.a.transpose() * dq;
        G.wk.noalias() += lc.a.transpose() * dk;
        G.wv.noalias() += lc.a.transpose() * dv;
        const Matrix da = dq * P.wq.transpose() + dk * P.wk.transpose() + dv * P.wv.transpose();
        dh_mat = dh1 + detail::layer_norm_backward(da, P.ln1_gain, lc.ln1, G.ln1_gain, G.ln1_bias);
    }

    grads.encoder.positions.block(c.offset, 0, m, d) += dh_mat;
    for (Eigen::Index i = 0; i < m; ++i)
        grads.row(c.ids[static_cast<std::size_t>(i)], static_cast<int>(d)) += dh_mat.row(i);
}

/// The length-1 sequence [PAD, ..., PAD, DUMMY] used for unconditional guidance.
inline ItemSequence dummy_sequence(const ModelParams& params) {
    const Vocab vocab = params.vocab();
    ItemSequence s;
    s.slots.assign(static_cast<std::size_t>(params.seq_len()), vocab.pad());
    s.slots.back() = vocab.dummy();
    s.target = 0;
    return s;
}

// Unconditional guidance: T-enc of the dummy sequence, or the raw DUMMY row.
struct UncondGuidance {
    EncoderCache cache;
    RowVec guidance;
};

inline UncondGuidance unconditional_guidance(const ModelParams& params) {
    UncondGuidance u;
    if (params.raw_dummy_guidance) {
        u.guidance = params.embedding.weights.row(params.vocab().dummy());
    } else {
        u.cache = t_enc_forward(params, dummy_sequence(params));
        u.guidance = u.cache.guidance;
    }
    return u;
}

inline void unconditional_backward(const ModelParams& params, const UncondGuidance& u, const RowVec& dguidance,
                                   Gradients& grads) {
    if (params.raw_dummy_guidance) grads.row(params.vocab().dummy(), params.dim()) += dguidance;
    else t_enc_backward(params, u.cache, dguidance, grads);
}

struct DenoiserCache {
    RowVec input;  // [x_t | g | step embedding]
    RowVec z1, h1, z2, h2;
    RowVec output;
};

/// Predicts the clean target embedding from the noisy one, the guidance and
/// the step.
inline DenoiserCache denoiser_forward(const DenoiserParams& p, const RowVec& x_t, const RowVec& g, long step) {
    if (!x_t.allFinite() || !g.allFinite()) throw NumericError("non-finite denoiser input");
    const auto d = x_t.size();
    if (g.size() != d || p.w1.rows() != 3 * d) throw UsageError("denoiser input dimension mismatch");
    DenoiserCache c;
    c.input.resize(3 * d);
    c.input << x_t, g, timestep_embedding(step, static_cast<int>(d));
    c.z1 = c.input * p.w1 + p.b1;
    c.h1 = detail::silu(c.z1);
    c.z2 = c.h1 * p.w2 + p.b2;
    c.h2 = detail::silu(c.z2);
    c.output = c.h2 * p.w3 + p.b3;
    return c;
}

struct DenoiserInputGrads {
    RowVec x_t;
    RowVec guidance;
};

inline DenoiserInputGrads denoiser_backward(const DenoiserParams& p, const DenoiserCache& c, const RowVec& dout,
                                            DenoiserParams& grads) {
    const auto d = dout.size();
    grads.w3.noalias() += c.h2.transpose() * dout;
    grads.b3 += dout;
    const RowVec dz2 = (dout * p.w3.transpose()).cwiseProduct(detail::silu_grad(c.z2));
    grads.w2.noalias() += c.h1.transpose() * dz2;
    grads.b2 += dz2;
    const RowVec dz1 = (dz2 * p.w2.transpose()).cwiseProduct(detail::silu_grad(c.z1));
    grads.w1.noalias() += c.input.transpose() * dz1;
    grads.b1 += dz1;
    const RowVec din = dz1 * p.w1.transpose();
    return {din.head(d), din.segment(d, d)};
}

}  // namespace tdm
