#pragma once

#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "latentlab/matrix.hpp"
#include "latentlab/param.hpp"
#include "latentlab/rng.hpp"

namespace latentlab {

// Toy vision-language model: frozen linear vision encoder, frozen projector,
// a small pre-norm causal transformer, and a trainable "detransformer" branch
// that turns mid-stack hidden states back into visual-feature-space tokens.
struct ModelConfig {
    int d_model = 64;
    int d_vis = 32;
    int n_layers = 4;
    int n_heads = 4;
    int vocab_size = 64;
    int n_vis_tokens = 64;        // 8x8 grid
    int hidden_layer_index = 0;   // 1-based; 0 means use the default ratio
    int detrans_layers = 2;
    double alpha = 1.0;           // gate on the detransformer edit
    int max_seq_len = 256;

    int head_dim() const { return d_model / n_heads; }
    int ffn_hidden() const { return 2 * d_model; }
    // mirrors tapping layer 20 of 28 at full scale
    int hidden_layer() const {
        if (hidden_layer_index > 0) return hidden_layer_index;
        int l = static_cast<int>(std::lround(0.71 * n_layers));
        return std::max(1, std::min(l, n_layers));
    }
    void validate() const;
};

struct BlockParams {
    ParamTensor ln1_g, ln1_b, wq, wk, wv, wo;
    ParamTensor ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ModelState {
    ModelConfig cfg;
    ParamTensor w_vis;    // d_vis x d_vis, frozen vision encoder
    ParamTensor w_proj;   // d_vis x d_model, frozen projector
    ParamTensor tok_emb;  // vocab x d_model
    ParamTensor pos_emb;  // max_seq_len x d_model
    std::vector<BlockParams> blocks;
    ParamTensor lnf_g, lnf_b;
    ParamTensor w_head;   // d_model x vocab

    // detransformer: one input LN, detrans_layers attention+FFN blocks
    // (bidirectional attention), then a linear head back to d_vis
    ParamTensor dt_ln_in_g, dt_ln_in_b;
    std::vector<BlockParams> dt_blocks;  // ln1 unused; ln2 feeds the FFN
    ParamTensor dt_out_w, dt_out_b;      // d_model x d_vis, 1 x d_vis

    std::set<int> stage_markers;  // completed training stages

    std::vector<ParamTensor *> all_tensors();
    std::vector<const ParamTensor *> all_tensors() const;
    std::vector<ParamTensor *> llm_tensors();       // blocks + head + embeddings + final LN
    std::vector<ParamTensor *> detrans_tensors();
    void set_trainable_all(bool flag);
    void set_trainable(std::vector<ParamTensor *> group, bool flag);
    void zero_grads();
};

// Optional "pretrained alignment", standing in for the structure a pretrained
// checkpoint would provide. Rows are visual-space prototypes per token id;
// zero rows mean "no prototype".
//  - emb_prototypes: prototyped tokens get their embedding and head column
//    seeded from the projected prototype direction.
//  - match_prototypes: QK weights of all blocks past the first start as a
//    scaled projector onto the span of these projected rows, so attention is
//    born matching on grounding content (a from-scratch random QK form cannot
//    express content matching at this width, and identity QK pins the self
//    logit at the layer-norm ceiling where no match can compete).
struct InitPriors {
    Matrix2D emb_prototypes;    // vocab_size x d_vis
    Matrix2D match_prototypes;  // vocab_size x d_vis
};

ModelState init_model(const ModelConfig &cfg, SeededRng rng, const InitPriors *priors = nullptr);

// ---- sequence assembly ----

// A sequence is the visual block followed by pieces of text tokens and
// (optionally) injected continuous blocks. Injected blocks come either in
// visual feature space (routed through the frozen projector) or already in
// model space (cached rollout embeddings).
struct Piece {
    enum Kind { Tokens, VisRows, DenseRows } kind = Tokens;
    std::vector<int> tokens;
    Matrix2D rows;

    static Piece make_tokens(std::vector<int> t) {
        Piece p;
        p.kind = Tokens;
        p.tokens = std::move(t);
        return p;
    }
    static Piece make_vis(Matrix2D m) {
        Piece p;
        p.kind = VisRows;
        p.rows = std::move(m);
        return p;
    }
    static Piece make_dense(Matrix2D m) {
        Piece p;
        p.kind = DenseRows;
        p.rows = std::move(m);
        return p;
    }
    int length() const { return kind == Tokens ? static_cast<int>(tokens.size()) : rows.rows; }
};

struct SeqInput {
    Matrix2D vis_features;      // n_vis_tokens x d_vis (pre-projector)
    std::vector<Piece> pieces;  // after the visual block

    int total_len(const ModelConfig &cfg) const {
        int n = cfg.n_vis_tokens;
        for (const auto &p : pieces) n += p.length();
        return n;
    }
};

struct LnCache {
    Matrix2D xhat;              // normalized rows before gain/bias
    std::vector<double> rstd;
};

struct BlockCache {
    Matrix2D x_in;
    LnCache ln1;
    Matrix2D ln1_out;
    Matrix2D q, k, v;                 // L x d
    std::vector<Matrix2D> att_probs;  // per head, L x L
    Matrix2D att_cat;                 // L x d
    Matrix2D x_mid;                   // after attention residual
    LnCache ln2;
    Matrix2D ln2_out;
    Matrix2D ffn_pre;                 // pre-activation (bias included)
    Matrix2D ffn_act;
};

struct ForwardTrace {
    SeqInput input;             // kept for backward routing
    int seq_len = 0;
    Matrix2D x0;                // embedded rows + positions
    std::vector<BlockCache> block_caches;
    Matrix2D hidden_at_l;       // input of block `hidden_layer()`, (L, d)
    int layers_run = 0;
    bool has_logits = false;
    LnCache lnf;
    Matrix2D final_hidden;
    Matrix2D logits;            // L x vocab
};

struct DetransTrace {
    Matrix2D h_in;
    LnCache ln_in;
    std::vector<BlockCache> block_caches;
    Matrix2D z_final;
    std::vector<int> picked_rows;
    Matrix2D picked;            // n_vis x d_model rows fed to the head
};

// V = E_vis(I): frozen linear map, zero input gives zero output
Matrix2D encode_image(const ModelState &state, const Matrix2D &img_features);
Matrix2D project_vis(const ModelState &state, const Matrix2D &V);

// Runs the causal stack. If upto_layer is in [1, n_layers] the pass stops at
// the input of that layer (hidden_at_l filled, no logits); 0 runs everything.
ForwardTrace forward(const ModelState &state, const SeqInput &input, int upto_layer = 0);

// Accumulates parameter grads from d_logits (L x vocab) and/or an extra
// gradient arriving at hidden_at_l. Returns d(x0), the gradient w.r.t. the
// embedded input rows, which the caller routes back into pieces.
Matrix2D backward(ModelState &state, const ForwardTrace &trace, const Matrix2D *d_logits,
                  const Matrix2D *d_hidden_at_l);

// Detransformer: full-sequence hidden states -> single-shot visual edit.
std::pair<Matrix2D, DetransTrace> detransform(const ModelState &state, const Matrix2D &H,
                                              int n_vis_rows);
Matrix2D detrans_backward(ModelState &state, const DetransTrace &trace, const Matrix2D &dA0);

// A = V + alpha * A0
Matrix2D fuse_gated(const Matrix2D &V, const Matrix2D &A0, double alpha);

// Mean pooling over contiguous windows along the row axis; a remainder forms
// a final smaller window. ratio 1 is the identity.
Matrix2D mean_pool_rows(const Matrix2D &M, int ratio);
Matrix2D mean_pool_rows_backward(const Matrix2D &dPooled, int in_rows, int ratio);
int pooled_len(int rows, int ratio);

// Routes d(x0) into the embedding tables (token/pos) and returns per-piece
// gradients for VisRows/DenseRows pieces (empty matrices for token pieces).
std::vector<Matrix2D> route_input_grads(ModelState &state, const ForwardTrace &trace,
                                        const Matrix2D &dx0);

double global_grad_norm(const std::vector<ParamTensor *> &params);

}  // namespace latentlab
