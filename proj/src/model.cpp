#include "latentlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace latentlab {

static constexpr double kLnEps = 1e-5;

void ModelConfig::validate() const {
    if (d_model <= 0 || d_vis <= 0 || n_layers <= 0 || n_heads <= 0 || vocab_size <= 0 ||
        n_vis_tokens <= 0 || detrans_layers <= 0 || max_seq_len <= 0)
        throw std::invalid_argument("ModelConfig: all dims must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("ModelConfig: d_model must divide by n_heads");
    if (hidden_layer_index < 0 || hidden_layer_index > n_layers)
        throw std::invalid_argument("ModelConfig: hidden_layer_index out of range");
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("ModelConfig: alpha must be in [0,1]");
}

void adamw_step(ParamTensor &p, const AdamConfig &cfg) {
    if (!p.trainable) return;
    p.steps++;
    double b1c = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.steps));
    double b2c = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.steps));
    for (size_t i = 0; i < p.value.data.size(); i++) {
        double g = p.grad.data[i];
        p.m.data[i] = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * g;
        p.v.data[i] = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * g * g;
        double mhat = p.m.data[i] / b1c;
        double vhat = p.v.data[i] / b2c;
        p.value.data[i] -=
            cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.value.data[i]);
    }
}

// ---- state wiring ----

static void collect(std::vector<ParamTensor *> &out, BlockParams &b, bool with_ln1) {
    if (with_ln1) {
        out.push_back(&b.ln1_g);
        out.push_back(&b.ln1_b);
    }
    out.push_back(&b.wq);
    out.push_back(&b.wk);
    out.push_back(&b.wv);
    out.push_back(&b.wo);
    out.push_back(&b.ln2_g);
    out.push_back(&b.ln2_b);
    out.push_back(&b.w1);
    out.push_back(&b.b1);
    out.push_back(&b.w2);
    out.push_back(&b.b2);
}

std::vector<ParamTensor *> ModelState::llm_tensors() {
    std::vector<ParamTensor *> out{&tok_emb, &pos_emb, &lnf_g, &lnf_b, &w_head};
    for (auto &b : blocks) collect(out, b, true);
    return out;
}

std::vector<ParamTensor *> ModelState::detrans_tensors() {
    std::vector<ParamTensor *> out{&dt_ln_in_g, &dt_ln_in_b, &dt_out_w, &dt_out_b};
    for (auto &b : dt_blocks) collect(out, b, false);
    return out;
}

std::vector<ParamTensor *> ModelState::all_tensors() {
    std::vector<ParamTensor *> out{&w_vis, &w_proj};
    for (auto *p : llm_tensors()) out.push_back(p);
    for (auto *p : detrans_tensors()) out.push_back(p);
    return out;
}

std::vector<const ParamTensor *> ModelState::all_tensors() const {
    auto *self = const_cast<ModelState *>(this);
    std::vector<const ParamTensor *> out;
    for (auto *p : self->all_tensors()) out.push_back(p);
    return out;
}

void ModelState::set_trainable_all(bool flag) {
    for (auto *p : all_tensors()) p->trainable = flag;
    w_vis.trainable = false;
    w_proj.trainable = false;
}

void ModelState::set_trainable(std::vector<ParamTensor *> group, bool flag) {
    for (auto *p : group) p->trainable = flag;
}

void ModelState::zero_grads() {
    for (auto *p : all_tensors()) p->zero_grad();
}

static void orthonormalize_rows(Matrix2D &m, SeededRng &rng) {
    for (int i = 0; i < m.rows; i++) {
        for (int p = 0; p < i; p++) {
            double s = 0.0;
            for (int j = 0; j < m.cols; j++) s += m.at(p, j) * m.at(i, j);
            for (int j = 0; j < m.cols; j++) m.at(i, j) -= s * m.at(p, j);
        }
        double nrm = 0.0;
        for (int j = 0; j < m.cols; j++) nrm += m.at(i, j) * m.at(i, j);
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) {
            for (int j = 0; j < m.cols; j++) m.at(i, j) = rng.normal();
            i--;
            continue;
        }
        for (int j = 0; j < m.cols; j++) m.at(i, j) /= nrm;
    }
}

static BlockParams init_block(const std::string &prefix, const ModelConfig &cfg, SeededRng &rng,
                              bool with_ln1, const Matrix2D *q_seed, const Matrix2D *k_seed) {
    int d = cfg.d_model, h = cfg.ffn_hidden();
    BlockParams b;
    b.ln1_g = ParamTensor(prefix + ".ln1_g", 1, d);
    b.ln1_b = ParamTensor(prefix + ".ln1_b", 1, d);
    b.ln1_g.init_const(1.0);
    if (!with_ln1) {
        // detransformer blocks norm only in front of the FFN
        b.ln1_g = ParamTensor(prefix + ".ln1_g", 0, 0);
        b.ln1_b = ParamTensor(prefix + ".ln1_b", 0, 0);
    }
    b.wq = ParamTensor(prefix + ".wq", d, d);
    b.wk = ParamTensor(prefix + ".wk", d, d);
    b.wv = ParamTensor(prefix + ".wv", d, d);
    b.wo = ParamTensor(prefix + ".wo", d, d);
    b.ln2_g = ParamTensor(prefix + ".ln2_g", 1, d);
    b.ln2_b = ParamTensor(prefix + ".ln2_b", 1, d);
    b.ln2_g.init_const(1.0);
    b.w1 = ParamTensor(prefix + ".w1", d, h);
    b.b1 = ParamTensor(prefix + ".b1", 1, h);
    b.w2 = ParamTensor(prefix + ".w2", h, d);
    b.b2 = ParamTensor(prefix + ".b2", 1, d);
    double s = 0.08;
    // Attention starts as a similarity kernel plus a small symmetry-breaking
    // perturbation: a supplied seed form (positional or content matching), or
    // the identity when none is given. White noise at this width cannot
    // express matching, so seeded structure is what makes gradients exist.
    b.wq.init_normal(rng, 0.005);
    b.wk.init_normal(rng, 0.005);
    for (int i = 0; i < d; i++)
        for (int j = 0; j < d; j++) {
            b.wq.value.at(i, j) += q_seed ? q_seed->at(i, j) : (i == j ? 1.0 : 0.0);
            b.wk.value.at(i, j) += k_seed ? k_seed->at(i, j) : (i == j ? 1.0 : 0.0);
        }
    // The OV path is a partial copy (0.85 * I each) so attended content
    // arrives in the residual stream recognisably instead of scrambled.
    // Trained transformers exhibit the same high-trace OV structure in
    // copying heads.
    b.wv.init_normal(rng, s);
    b.wo.init_normal(rng, s);
    for (int i = 0; i < d; i++) {
        b.wv.value.at(i, i) += 0.85;
        b.wo.value.at(i, i) += 0.85;
    }
    b.w1.init_normal(rng, s);
    b.w2.init_normal(rng, s);
    return b;
}

ModelState init_model(const ModelConfig &cfg, SeededRng rng, const InitPriors *priors) {
    cfg.validate();
    if (priors) {
        for (const Matrix2D *m : {&priors->emb_prototypes, &priors->match_prototypes})
            if (m->rows != cfg.vocab_size || m->cols != cfg.d_vis)
                throw std::invalid_argument("init_model: prototype matrices must be vocab_size x d_vis");
    }
    ModelState st;
    st.cfg = cfg;

    st.w_vis = ParamTensor("w_vis", cfg.d_vis, cfg.d_vis);
    {
        SeededRng r = rng.derive("w_vis");
        st.w_vis.init_normal(r, 1.0);
        orthonormalize_rows(st.w_vis.value, r);
        st.w_vis.trainable = false;
    }
    // The last quarter of the model width is reserved for position codes: the
    // projector never writes there, so positional and visual content stay in
    // complementary subspaces and neither pollutes readouts of the other.
    const int pos_dims = cfg.d_model / 4;
    const int content_dims = cfg.d_model - pos_dims;
    st.w_proj = ParamTensor("w_proj", cfg.d_vis, cfg.d_model);
    {
        SeededRng r = rng.derive("w_proj");
        st.w_proj.init_normal(r, 1.0);
        for (int i = 0; i < cfg.d_vis; i++)
            for (int j = content_dims; j < cfg.d_model; j++) st.w_proj.value.at(i, j) = 0.0;
        orthonormalize_rows(st.w_proj.value, r);
        st.w_proj.trainable = false;
    }

    SeededRng r_emb = rng.derive("emb");
    st.tok_emb = ParamTensor("tok_emb", cfg.vocab_size, cfg.d_model);
    st.tok_emb.init_normal(r_emb, 0.2);
    for (int t = 0; t < cfg.vocab_size; t++)
        for (int j = content_dims; j < cfg.d_model; j++) st.tok_emb.value.at(t, j) = 0.0;
    // Sinusoidal position codes confined to the reserved subspace, with
    // frequencies spread geometrically so that the code autocorrelation falls
    // off within one step of offset zero and never aliases inside a sequence.
    // Paired with a one-step phase rotation on the query side of the first
    // block this realises a previous-token head at initialisation.
    const int n_freq = pos_dims / 2;
    std::vector<double> freqs(std::max(n_freq, 1));
    {
        const double w_hi = std::numbers::pi / 2.0;
        const double w_lo = 2.0 * std::numbers::pi / cfg.max_seq_len;
        for (int k = 0; k < n_freq; k++)
            freqs[k] = n_freq > 1 ? w_hi * std::pow(w_lo / w_hi, k / (n_freq - 1.0)) : w_hi;
    }
    st.pos_emb = ParamTensor("pos_emb", cfg.max_seq_len, cfg.d_model);
    st.pos_emb.init_normal(r_emb, 0.01);
    for (int t = 0; t < cfg.max_seq_len; t++) {
        for (int k = 0; 2 * k + 1 < pos_dims; k++) {
            st.pos_emb.value.at(t, content_dims + 2 * k) += std::sin(freqs[k] * t);
            st.pos_emb.value.at(t, content_dims + 2 * k + 1) += std::cos(freqs[k] * t);
        }
    }

    // carry a raw visual-space prototype into model space the same way image
    // features travel: through the frozen encoder, then the frozen projector.
    // Both are orthonormal, so directions and dot products survive.
    auto project_proto = [&](const Matrix2D &protos, int t) {
        std::vector<double> enc(cfg.d_vis, 0.0);
        for (int j = 0; j < cfg.d_vis; j++) {
            double v = protos.at(t, j);
            if (v == 0.0) continue;
            for (int k = 0; k < cfg.d_vis; k++) enc[k] += v * st.w_vis.value.at(j, k);
        }
        std::vector<double> e(cfg.d_model, 0.0);
        for (int j = 0; j < cfg.d_vis; j++) {
            const double *pr = st.w_proj.value.row_ptr(j);
            for (int k = 0; k < cfg.d_model; k++) e[k] += enc[j] * pr[k];
        }
        return e;
    };

    // QK seed: scaled projector onto the span of the projected match
    // prototypes (the grounding subspace)
    Matrix2D qk_seed;
    if (priors) {
        std::vector<std::vector<double>> basis;
        for (int t = 0; t < cfg.vocab_size; t++) {
            std::vector<double> e = project_proto(priors->match_prototypes, t);
            for (const auto &b : basis) {
                double s = 0.0;
                for (int k = 0; k < cfg.d_model; k++) s += e[k] * b[k];
                for (int k = 0; k < cfg.d_model; k++) e[k] -= s * b[k];
            }
            double n2 = 0.0;
            for (double v : e) n2 += v * v;
            if (n2 <= 1e-12) continue;
            double inv = 1.0 / std::sqrt(n2);
            for (double &v : e) v *= inv;
            basis.push_back(std::move(e));
        }
        if (!basis.empty()) {
            // Isometric copy of the grounding span into every head's q/k
            // slice. Each head then scores a full conjunctive match (all tag
            // coordinates at once) instead of the heads splitting the span
            // between them, which would only ever give disjunctive row-OR-col
            // matching and a weak preference for the jointly-matching cell.
            const double match_gain = 1.9;
            const int hd = cfg.head_dim();
            qk_seed = Matrix2D(cfg.d_model, cfg.d_model);
            int n_dirs = std::min(static_cast<int>(basis.size()), hd);
            for (int h = 0; h < cfg.n_heads; h++)
                for (int m = 0; m < n_dirs; m++)
                    for (int i = 0; i < cfg.d_model; i++)
                        qk_seed.at(i, h * hd + m) += match_gain * basis[m][i];
        }
    }
    const Matrix2D *seed = qk_seed.rows > 0 ? &qk_seed : nullptr;

    // Fixed-offset heads, the bottom rungs of every copying circuit in
    // trained stacks. Keys expose each row's position code; queries carry the
    // same code rotated back `off` steps, so position t matches t-off
    // exactly. The code is replicated into every head's slice, which makes
    // all heads attend to t-off while each head's value slice copies its own
    // chunk of that row's content - a full-width relative copy. Content
    // matching then happens in the blocks above, on gathered evidence.
    const int hd = cfg.head_dim();
    auto offset_seed = [&](int off, bool rotate) {
        const double pos_gain = 1.2;
        Matrix2D m(cfg.d_model, cfg.d_model);
        for (int h = 0; h < cfg.n_heads; h++)
            for (int k = 0; 2 * k + 1 < std::min(pos_dims, hd); k++) {
                int in0 = content_dims + 2 * k, out0 = h * hd + 2 * k;
                double a = rotate ? freqs[k] * off : 0.0;
                m.at(in0, out0) = pos_gain * std::cos(a);
                m.at(in0 + 1, out0) = -pos_gain * std::sin(a);
                m.at(in0, out0 + 1) = pos_gain * std::sin(a);
                m.at(in0 + 1, out0 + 1) = pos_gain * std::cos(a);
            }
        return m;
    };
    Matrix2D pos_k_seed = offset_seed(0, false);
    // The first block copies each token's predecessor. The second copies from
    // three steps back, which is where the token grammar keeps the value every
    // structural continuation restates (announced coordinates echo at that
    // distance). With both in place, format accuracy costs no attention
    // re-learning and training pressure stays off the matching blocks.
    Matrix2D prev_q_seed = offset_seed(1, true);
    Matrix2D echo_q_seed = offset_seed(3, true);

    for (int i = 0; i < cfg.n_layers; i++) {
        SeededRng r = rng.derive("block", static_cast<uint64_t>(i));
        const Matrix2D *qs = seed, *ks = seed;
        if (i == 0) {
            qs = &prev_q_seed;
            ks = &pos_k_seed;
        } else if (i == 1 && cfg.n_layers >= 4) {
            qs = &echo_q_seed;
            ks = &pos_k_seed;
        }
        st.blocks.push_back(init_block("blocks." + std::to_string(i), cfg, r, true, qs, ks));
    }
    st.lnf_g = ParamTensor("lnf_g", 1, cfg.d_model);
    st.lnf_b = ParamTensor("lnf_b", 1, cfg.d_model);
    st.lnf_g.init_const(1.0);
    st.w_head = ParamTensor("w_head", cfg.d_model, cfg.vocab_size);
    {
        SeededRng r = rng.derive("head");
        // Quiet readout: content arriving through the attention copy is a
        // small fraction of the residual stream, and 0.08-scale noise here
        // would bury it at the logits.
        st.w_head.init_normal(r, 0.02);
        // Position codes are scaffolding for routing, not evidence: keep them
        // out of the output logits.
        for (int i = content_dims; i < cfg.d_model; i++)
            for (int t = 0; t < cfg.vocab_size; t++) st.w_head.value.at(i, t) = 0.0;
    }

    st.dt_ln_in_g = ParamTensor("dt_ln_in_g", 1, cfg.d_model);
    st.dt_ln_in_b = ParamTensor("dt_ln_in_b", 1, cfg.d_model);
    st.dt_ln_in_g.init_const(1.0);
    for (int i = 0; i < cfg.detrans_layers; i++) {
        SeededRng r = rng.derive("dt_block", static_cast<uint64_t>(i));
        st.dt_blocks.push_back(
            init_block("dt_blocks." + std::to_string(i), cfg, r, false, seed, seed));
    }
    st.dt_out_w = ParamTensor("dt_out_w", cfg.d_model, cfg.d_vis);
    st.dt_out_b = ParamTensor("dt_out_b", 1, cfg.d_vis);
    {
        SeededRng r = rng.derive("dt_out");
        st.dt_out_w.init_normal(r, 0.08);
        for (int i = content_dims; i < cfg.d_model; i++)
            for (int j = 0; j < cfg.d_vis; j++) st.dt_out_w.value.at(i, j) = 0.0;
    }

    if (priors) {
        const double emb_norm = 0.4 * std::sqrt(static_cast<double>(cfg.d_model));
        const double head_norm = 1.0;
        for (int t = 0; t < cfg.vocab_size; t++) {
            double n2 = 0.0;
            for (int j = 0; j < cfg.d_vis; j++) {
                double v = priors->emb_prototypes.at(t, j);
                n2 += v * v;
            }
            if (n2 <= 1e-24) continue;
            std::vector<double> e = project_proto(priors->emb_prototypes, t);
            double inv = 1.0 / std::sqrt(n2);
            for (int k = 0; k < cfg.d_model; k++) {
                st.tok_emb.value.at(t, k) = e[k] * inv * emb_norm;
                st.w_head.value.at(k, t) = e[k] * inv * head_norm;
            }
        }
    }
    return st;
}

// ---- layer norm with cache ----

static Matrix2D ln_fwd(const Matrix2D &x, const ParamTensor &g, const ParamTensor &b, LnCache &c) {
    int n = x.cols;
    c.xhat = Matrix2D(x.rows, n);
    c.rstd.assign(x.rows, 0.0);
    Matrix2D out(x.rows, n);
    for (int i = 0; i < x.rows; i++) {
        const double *xr = x.row_ptr(i);
        double mu = 0.0;
        for (int j = 0; j < n; j++) mu += xr[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; j++) {
            double d = xr[j] - mu;
            var += d * d;
        }
        var /= n;
        double rstd = 1.0 / std::sqrt(var + kLnEps);
        c.rstd[i] = rstd;
        double *xh = c.xhat.row_ptr(i);
        double *o = out.row_ptr(i);
        for (int j = 0; j < n; j++) {
            xh[j] = (xr[j] - mu) * rstd;
            o[j] = xh[j] * g.value.data[j] + b.value.data[j];
        }
    }
    return out;
}

static Matrix2D ln_bwd(const Matrix2D &dy, const LnCache &c, ParamTensor &g, ParamTensor &b) {
    int n = dy.cols;
    Matrix2D dx(dy.rows, n);
    Matrix2D dg(1, n), db(1, n);
    for (int i = 0; i < dy.rows; i++) {
        const double *dyr = dy.row_ptr(i);
        const double *xh = c.xhat.row_ptr(i);
        double *dxr = dx.row_ptr(i);
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < n; j++) {
            double dxh = dyr[j] * g.value.data[j];
            m1 += dxh;
            m2 += dxh * xh[j];
            dg.data[j] += dyr[j] * xh[j];
            db.data[j] += dyr[j];
        }
        m1 /= n;
        m2 /= n;
        double rstd = c.rstd[i];
        for (int j = 0; j < n; j++) {
            double dxh = dyr[j] * g.value.data[j];
            dxr[j] = rstd * (dxh - m1 - xh[j] * m2);
        }
    }
    g.acc_grad(dg);
    b.acc_grad(db);
    return dx;
}

// ---- transformer block ----

static Matrix2D block_fwd(const ModelConfig &cfg, const BlockParams &p, const Matrix2D &x,
                          bool causal, BlockCache &c) {
    int L = x.rows, d = cfg.d_model, nh = cfg.n_heads, hd = cfg.head_dim();
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    bool has_ln1 = p.ln1_g.value.cols > 0;

    c.x_in = x;
    const Matrix2D *attn_in = &x;
    if (has_ln1) {
        c.ln1_out = ln_fwd(x, p.ln1_g, p.ln1_b, c.ln1);
        attn_in = &c.ln1_out;
    }
    c.q = matmul(*attn_in, p.wq.value);
    c.k = matmul(*attn_in, p.wk.value);
    c.v = matmul(*attn_in, p.wv.value);

    c.att_probs.assign(nh, Matrix2D(L, L));
    c.att_cat = Matrix2D(L, d);
    for (int h = 0; h < nh; h++) {
        int off = h * hd;
        Matrix2D &P = c.att_probs[h];
        for (int i = 0; i < L; i++) {
            int jmax = causal ? i : L - 1;
            const double *qi = c.q.row_ptr(i) + off;
            double mx = -1e300;
            double *Pi = P.row_ptr(i);
            for (int j = 0; j <= jmax; j++) {
                const double *kj = c.k.row_ptr(j) + off;
                double s = 0.0;
                for (int t = 0; t < hd; t++) s += qi[t] * kj[t];
                s *= scale;
                Pi[j] = s;
                if (s > mx) mx = s;
            }
            double z = 0.0;
            for (int j = 0; j <= jmax; j++) {
                Pi[j] = std::exp(Pi[j] - mx);
                z += Pi[j];
            }
            double inv = 1.0 / z;
            double *oi = c.att_cat.row_ptr(i) + off;
            for (int j = 0; j <= jmax; j++) {
                Pi[j] *= inv;
                const double *vj = c.v.row_ptr(j) + off;
                double pij = Pi[j];
                for (int t = 0; t < hd; t++) oi[t] += pij * vj[t];
            }
        }
    }

    c.x_mid = x;
    matmul_acc(c.att_cat, p.wo.value, c.x_mid);

    c.ln2_out = ln_fwd(c.x_mid, p.ln2_g, p.ln2_b, c.ln2);
    c.ffn_pre = matmul(c.ln2_out, p.w1.value);
    for (int i = 0; i < L; i++) {
        double *r = c.ffn_pre.row_ptr(i);
        for (int j = 0; j < c.ffn_pre.cols; j++) r[j] += p.b1.value.data[j];
    }
    c.ffn_act = c.ffn_pre;
    for (double &v : c.ffn_act.data) v = v > 0.0 ? v : 0.0;

    Matrix2D out = c.x_mid;
    matmul_acc(c.ffn_act, p.w2.value, out);
    for (int i = 0; i < L; i++) {
        double *r = out.row_ptr(i);
        for (int j = 0; j < d; j++) r[j] += p.b2.value.data[j];
    }
    return out;
}

static Matrix2D block_bwd(const ModelConfig &cfg, BlockParams &p, const BlockCache &c,
                          bool causal, const Matrix2D &dout) {
    int L = dout.rows, d = cfg.d_model, nh = cfg.n_heads, hd = cfg.head_dim();
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    bool has_ln1 = p.ln1_g.value.cols > 0;

    // FFN
    Matrix2D db2(1, d);
    for (int i = 0; i < L; i++) {
        const double *r = dout.row_ptr(i);
        for (int j = 0; j < d; j++) db2.data[j] += r[j];
    }
    p.b2.acc_grad(db2);
    if (p.w2.trainable) matmul_tn_acc(c.ffn_act, dout, p.w2.grad);
    Matrix2D dact = matmul_nt(dout, p.w2.value);
    for (size_t i = 0; i < dact.data.size(); i++)
        if (c.ffn_pre.data[i] <= 0.0) dact.data[i] = 0.0;
    Matrix2D db1(1, dact.cols);
    for (int i = 0; i < L; i++) {
        const double *r = dact.row_ptr(i);
        for (int j = 0; j < dact.cols; j++) db1.data[j] += r[j];
    }
    p.b1.acc_grad(db1);
    if (p.w1.trainable) matmul_tn_acc(c.ln2_out, dact, p.w1.grad);
    Matrix2D dln2_out = matmul_nt(dact, p.w1.value);
    Matrix2D dx_mid = ln_bwd(dln2_out, c.ln2, p.ln2_g, p.ln2_b);
    add_inplace(dx_mid, dout);  // residual

    // attention projection
    if (p.wo.trainable) matmul_tn_acc(c.att_cat, dx_mid, p.wo.grad);
    Matrix2D datt = matmul_nt(dx_mid, p.wo.value);

    Matrix2D dq(L, d), dk(L, d), dv(L, d);
    std::vector<double> dP(L);
    for (int h = 0; h < nh; h++) {
        int off = h * hd;
        const Matrix2D &P = c.att_probs[h];
        for (int i = 0; i < L; i++) {
            int jmax = causal ? i : L - 1;
            const double *di = datt.row_ptr(i) + off;
            const double *Pi = P.row_ptr(i);
            double inner = 0.0;
            for (int j = 0; j <= jmax; j++) {
                const double *vj = c.v.row_ptr(j) + off;
                double s = 0.0;
                for (int t = 0; t < hd; t++) s += di[t] * vj[t];
                dP[j] = s;
                inner += Pi[j] * s;
                double *dvj = dv.row_ptr(j) + off;
                double pij = Pi[j];
                for (int t = 0; t < hd; t++) dvj[t] += pij * di[t];
            }
            double *dqi = dq.row_ptr(i) + off;
            const double *qi = c.q.row_ptr(i) + off;
            for (int j = 0; j <= jmax; j++) {
                double ds = Pi[j] * (dP[j] - inner) * scale;
                if (ds == 0.0) continue;
                const double *kj = c.k.row_ptr(j) + off;
                double *dkj = dk.row_ptr(j) + off;
                for (int t = 0; t < hd; t++) {
                    dqi[t] += ds * kj[t];
                    dkj[t] += ds * qi[t];
                }
            }
        }
    }

    const Matrix2D &attn_in = has_ln1 ? c.ln1_out : c.x_in;
    if (p.wq.trainable) matmul_tn_acc(attn_in, dq, p.wq.grad);
    if (p.wk.trainable) matmul_tn_acc(attn_in, dk, p.wk.grad);
    if (p.wv.trainable) matmul_tn_acc(attn_in, dv, p.wv.grad);
    Matrix2D da = matmul_nt(dq, p.wq.value);
    add_inplace(da, matmul_nt(dk, p.wk.value));
    add_inplace(da, matmul_nt(dv, p.wv.value));

    Matrix2D dx;
    if (has_ln1) {
        dx = ln_bwd(da, c.ln1, p.ln1_g, p.ln1_b);
    } else {
        dx = da;
    }
    add_inplace(dx, dx_mid);  // residual into the attention sub-layer
    return dx;
}

// ---- sequence embedding ----

Matrix2D encode_image(const ModelState &state, const Matrix2D &img_features) {
    if (img_features.cols != state.cfg.d_vis)
        throw std::invalid_argument("encode_image: feature dim mismatch");
    return matmul(img_features, state.w_vis.value);
}

Matrix2D project_vis(const ModelState &state, const Matrix2D &V) {
    return matmul(V, state.w_proj.value);
}

static Matrix2D embed_sequence(const ModelState &state, const SeqInput &input) {
    const ModelConfig &cfg = state.cfg;
    if (input.vis_features.rows != cfg.n_vis_tokens || input.vis_features.cols != cfg.d_vis)
        throw std::invalid_argument("embed_sequence: visual block has wrong shape");
    int L = input.total_len(cfg);
    if (L > cfg.max_seq_len)
        throw std::runtime_error("sequence length " + std::to_string(L) + " exceeds max_seq_len " +
                                 std::to_string(cfg.max_seq_len));
    Matrix2D x0(L, cfg.d_model);
    Matrix2D xv = project_vis(state, input.vis_features);
    int row = 0;
    for (int i = 0; i < xv.rows; i++, row++)
        std::copy(xv.row_ptr(i), xv.row_ptr(i) + cfg.d_model, x0.row_ptr(row));
    for (const auto &piece : input.pieces) {
        if (piece.kind == Piece::Tokens) {
            for (int t : piece.tokens) {
                if (t < 0 || t >= cfg.vocab_size)
                    throw std::invalid_argument("embed_sequence: token id out of range");
                std::copy(state.tok_emb.value.row_ptr(t), state.tok_emb.value.row_ptr(t) + cfg.d_model,
                          x0.row_ptr(row++));
            }
        } else if (piece.kind == Piece::VisRows) {
            if (piece.rows.cols != cfg.d_vis)
                throw std::invalid_argument("embed_sequence: VisRows dim mismatch");
            Matrix2D proj = project_vis(state, piece.rows);
            for (int i = 0; i < proj.rows; i++, row++)
                std::copy(proj.row_ptr(i), proj.row_ptr(i) + cfg.d_model, x0.row_ptr(row));
        } else {
            if (piece.rows.cols != cfg.d_model)
                throw std::invalid_argument("embed_sequence: DenseRows dim mismatch");
            for (int i = 0; i < piece.rows.rows; i++, row++)
                std::copy(piece.rows.row_ptr(i), piece.rows.row_ptr(i) + cfg.d_model,
                          x0.row_ptr(row));
        }
    }
    // Sequence-position codes go on token rows only. Visual and injected
    // blocks carry their coordinates as content (grid tags); giving them
    // sequence positions as well would make the first block's local copying
    // blur neighbouring cells into each other.
    row = cfg.n_vis_tokens;
    for (const auto &piece : input.pieces) {
        if (piece.kind == Piece::Tokens) {
            for (int i = 0; i < piece.length(); i++) {
                double *r = x0.row_ptr(row + i);
                const double *pe = state.pos_emb.value.row_ptr(row + i);
                for (int j = 0; j < cfg.d_model; j++) r[j] += pe[j];
            }
        }
        row += piece.length();
    }
    return x0;
}

ForwardTrace forward(const ModelState &state, const SeqInput &input, int upto_layer) {
    const ModelConfig &cfg = state.cfg;
    int hl = cfg.hidden_layer();
    if (upto_layer != 0 && upto_layer != hl)
        throw std::invalid_argument("forward: partial passes must stop at the tap layer");

    ForwardTrace tr;
    tr.input = input;
    tr.x0 = embed_sequence(state, input);
    tr.seq_len = tr.x0.rows;

    Matrix2D x = tr.x0;
    for (int b = 1; b <= cfg.n_layers; b++) {
        if (b == hl) tr.hidden_at_l = x;
        if (upto_layer == b) {
            tr.layers_run = b - 1;
            return tr;
        }
        tr.block_caches.emplace_back();
        x = block_fwd(cfg, state.blocks[b - 1], x, true, tr.block_caches.back());
        tr.layers_run = b;
    }
    tr.final_hidden = ln_fwd(x, state.lnf_g, state.lnf_b, tr.lnf);
    tr.logits = matmul(tr.final_hidden, state.w_head.value);
    tr.has_logits = true;
    return tr;
}

Matrix2D backward(ModelState &state, const ForwardTrace &trace, const Matrix2D *d_logits,
                  const Matrix2D *d_hidden_at_l) {
    const ModelConfig &cfg = state.cfg;
    int hl = cfg.hidden_layer();
    Matrix2D dx(trace.seq_len, cfg.d_model);

    if (d_logits != nullptr) {
        if (!trace.has_logits) throw std::invalid_argument("backward: trace has no logits");
        if (state.w_head.trainable) matmul_tn_acc(trace.final_hidden, *d_logits, state.w_head.grad);
        Matrix2D dfh = matmul_nt(*d_logits, state.w_head.value);
        dx = ln_bwd(dfh, trace.lnf, state.lnf_g, state.lnf_b);
    }
    if (d_hidden_at_l != nullptr && trace.layers_run < hl) {
        // trace stopped exactly at the tap; gradient starts there
        add_inplace(dx, *d_hidden_at_l);
    }
    for (int b = trace.layers_run; b >= 1; b--) {
        dx = block_bwd(cfg, state.blocks[b - 1], trace.block_caches[b - 1], true, dx);
        if (d_hidden_at_l != nullptr && b == hl && trace.layers_run >= hl)
            add_inplace(dx, *d_hidden_at_l);
    }
    return dx;
}

std::vector<Matrix2D> route_input_grads(ModelState &state, const ForwardTrace &trace,
                                        const Matrix2D &dx0) {
    const ModelConfig &cfg = state.cfg;
    std::vector<Matrix2D> piece_grads;
    if (state.pos_emb.trainable) {
        // mirror of embed_sequence: position codes touch token rows only
        int r = cfg.n_vis_tokens;
        for (const auto &piece : trace.input.pieces) {
            if (piece.kind == Piece::Tokens) {
                for (int i = 0; i < piece.length(); i++) {
                    double *g = state.pos_emb.grad.row_ptr(r + i);
                    const double *d = dx0.row_ptr(r + i);
                    for (int j = 0; j < cfg.d_model; j++) g[j] += d[j];
                }
            }
            r += piece.length();
        }
    }
    int row = cfg.n_vis_tokens;  // grads for the frozen visual block are not propagated
    for (const auto &piece : trace.input.pieces) {
        if (piece.kind == Piece::Tokens) {
            if (state.tok_emb.trainable) {
                for (int t : piece.tokens) {
                    double *g = state.tok_emb.grad.row_ptr(t);
                    const double *d = dx0.row_ptr(row);
                    for (int j = 0; j < cfg.d_model; j++) g[j] += d[j];
                    row++;
                }
            } else {
                row += static_cast<int>(piece.tokens.size());
            }
            piece_grads.emplace_back();
        } else {
            int n = piece.rows.rows;
            Matrix2D slice(n, cfg.d_model);
            for (int i = 0; i < n; i++, row++)
                std::copy(dx0.row_ptr(row), dx0.row_ptr(row) + cfg.d_model, slice.row_ptr(i));
            if (piece.kind == Piece::VisRows) {
                // back through the frozen projector to visual-feature space
                piece_grads.push_back(matmul_nt(slice, state.w_proj.value));
            } else {
                piece_grads.push_back(std::move(slice));
            }
        }
    }
    return piece_grads;
}

// ---- detransformer ----

std::pair<Matrix2D, DetransTrace> detransform(const ModelState &state, const Matrix2D &H,
                                              int n_vis_rows) {
    const ModelConfig &cfg = state.cfg;
    if (H.cols != cfg.d_model) throw std::invalid_argument("detransform: H dim mismatch");
    if (n_vis_rows > H.rows) throw std::invalid_argument("detransform: more vis rows than H rows");
    DetransTrace tr;
    tr.h_in = H;
    Matrix2D z = ln_fwd(H, state.dt_ln_in_g, state.dt_ln_in_b, tr.ln_in);
    for (int m = 0; m < cfg.detrans_layers; m++) {
        tr.block_caches.emplace_back();
        z = block_fwd(cfg, state.dt_blocks[m], z, false, tr.block_caches.back());
    }
    tr.z_final = z;
    tr.picked_rows.resize(n_vis_rows);
    tr.picked = Matrix2D(n_vis_rows, cfg.d_model);
    for (int i = 0; i < n_vis_rows; i++) {
        tr.picked_rows[i] = i;
        std::copy(z.row_ptr(i), z.row_ptr(i) + cfg.d_model, tr.picked.row_ptr(i));
    }
    Matrix2D A0 = matmul(tr.picked, state.dt_out_w.value);
    for (int i = 0; i < n_vis_rows; i++) {
        double *r = A0.row_ptr(i);
        for (int j = 0; j < cfg.d_vis; j++) r[j] += state.dt_out_b.value.data[j];
    }
    return {std::move(A0), std::move(tr)};
}

Matrix2D detrans_backward(ModelState &state, const DetransTrace &trace, const Matrix2D &dA0) {
    const ModelConfig &cfg = state.cfg;
    int nv = static_cast<int>(trace.picked_rows.size());
    if (dA0.rows != nv || dA0.cols != cfg.d_vis)
        throw std::invalid_argument("detrans_backward: dA0 shape mismatch");

    if (state.dt_out_w.trainable) matmul_tn_acc(trace.picked, dA0, state.dt_out_w.grad);
    Matrix2D dob(1, cfg.d_vis);
    for (int i = 0; i < nv; i++) {
        const double *r = dA0.row_ptr(i);
        for (int j = 0; j < cfg.d_vis; j++) dob.data[j] += r[j];
    }
    state.dt_out_b.acc_grad(dob);

    Matrix2D dpicked = matmul_nt(dA0, state.dt_out_w.value);
    Matrix2D dz(trace.z_final.rows, cfg.d_model);
    for (int i = 0; i < nv; i++)
        std::copy(dpicked.row_ptr(i), dpicked.row_ptr(i) + cfg.d_model,
                  dz.row_ptr(trace.picked_rows[i]));

    for (int m = cfg.detrans_layers - 1; m >= 0; m--)
        dz = block_bwd(cfg, state.dt_blocks[m], trace.block_caches[m], false, dz);
    return ln_bwd(dz, trace.ln_in, state.dt_ln_in_g, state.dt_ln_in_b);
}

Matrix2D fuse_gated(const Matrix2D &V, const Matrix2D &A0, double alpha) {
    if (!V.same_shape(A0)) throw std::invalid_argument("fuse_gated: shape mismatch");
    Matrix2D A = V;
    axpy_inplace(A, alpha, A0);
    return A;
}

int pooled_len(int rows, int ratio) {
    if (ratio < 1) throw std::invalid_argument("pooled_len: ratio must be >= 1");
    return (rows + ratio - 1) / ratio;
}

Matrix2D mean_pool_rows(const Matrix2D &M, int ratio) {
    if (ratio == 1) return M;
    int out_rows = pooled_len(M.rows, ratio);
    Matrix2D out(out_rows, M.cols);
    for (int w = 0; w < out_rows; w++) {
        int lo = w * ratio;
        int hi = std::min(M.rows, lo + ratio);
        double inv = 1.0 / (hi - lo);
        double *o = out.row_ptr(w);
        for (int i = lo; i < hi; i++) {
            const double *r = M.row_ptr(i);
            for (int j = 0; j < M.cols; j++) o[j] += r[j] * inv;
        }
    }
    return out;
}

Matrix2D mean_pool_rows_backward(const Matrix2D &dPooled, int in_rows, int ratio) {
    if (ratio == 1) return dPooled;
    Matrix2D dM(in_rows, dPooled.cols);
    int out_rows = pooled_len(in_rows, ratio);
    if (dPooled.rows != out_rows)
        throw std::invalid_argument("mean_pool_rows_backward: row mismatch");
    for (int w = 0; w < out_rows; w++) {
        int lo = w * ratio;
        int hi = std::min(in_rows, lo + ratio);
        double inv = 1.0 / (hi - lo);
        const double *dp = dPooled.row_ptr(w);
        for (int i = lo; i < hi; i++) {
            double *r = dM.row_ptr(i);
            for (int j = 0; j < dPooled.cols; j++) r[j] += dp[j] * inv;
        }
    }
    return dM;
}

double global_grad_norm(const std::vector<ParamTensor *> &params) {
    double s = 0.0;
    for (auto *p : params)
        for (double g : p->grad.data) s += g * g;
    return std::sqrt(s);
}

}  // namespace latentlab
