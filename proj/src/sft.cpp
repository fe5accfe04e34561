#include "latentlab/sft.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "latentlab/tokens.hpp"

namespace latentlab {

double SftConfig::lr_for(int stage) const {
    if (stage == 1) return lr_stage1;
    if (stage == 2) return lr_stage2;
    if (stage == 3) return lr_stage3;
    throw std::invalid_argument("SftConfig: stage must be 1, 2 or 3");
}

int SftConfig::steps_for(int stage) const {
    if (stage == 1) return steps_stage1;
    if (stage == 2) return steps_stage2;
    if (stage == 3) return steps_stage3;
    throw std::invalid_argument("SftConfig: stage must be 1, 2 or 3");
}

void SftConfig::validate() const {
    if (!(w_normal <= 1.0 && 1.0 <= w_aux))
        throw std::invalid_argument("SftConfig: need w_normal <= 1 <= w_aux");
    if (lambda_vis < 0.0) throw std::invalid_argument("SftConfig: lambda_vis < 0");
    if (batch_size < 1 || grad_accum < 1)
        throw std::invalid_argument("SftConfig: batch sizes must be positive");
    if (anneal_steps < 0) throw std::invalid_argument("SftConfig: anneal_steps < 0");
}

Matrix2D delta_aux(const ModelState &state, const GridSample &sample) {
    return sub(encode_image(state, sample.aux_features),
               encode_image(state, sample.input_features));
}

double anneal_probability(int step, int anneal_steps) {
    if (anneal_steps <= 0) return 0.0;
    double p = 1.0 - static_cast<double>(step) / anneal_steps;
    return std::max(0.0, p);
}

double ntp_loss_and_grad(const Matrix2D &logits, const std::vector<int> &targets,
                         const std::vector<int> &pred_rows, const std::vector<double> &weights,
                         Matrix2D *d_logits, double scale) {
    if (targets.size() != pred_rows.size() || targets.size() != weights.size())
        throw std::invalid_argument("ntp_loss_and_grad: length mismatch");
    double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (wsum <= 0.0) throw std::invalid_argument("ntp_loss_and_grad: weight sum must be > 0");
    double loss = 0.0;
    int V = logits.cols;
    std::vector<double> p(V);
    for (size_t i = 0; i < targets.size(); i++) {
        int row = pred_rows[i], y = targets[i];
        if (row < 0 || row >= logits.rows || y < 0 || y >= V)
            throw std::invalid_argument("ntp_loss_and_grad: index out of range");
        const double *lr = logits.row_ptr(row);
        double mx = lr[0];
        for (int j = 1; j < V; j++) mx = std::max(mx, lr[j]);
        double z = 0.0;
        for (int j = 0; j < V; j++) {
            p[j] = std::exp(lr[j] - mx);
            z += p[j];
        }
        loss += weights[i] * (std::log(z) - (lr[y] - mx));
        if (d_logits) {
            double c = scale * weights[i] / wsum;
            double *dr = d_logits->row_ptr(row);
            for (int j = 0; j < V; j++) dr[j] += c * p[j] / z;
            dr[y] -= c;
        }
    }
    return loss / wsum;
}

double vis_loss_and_grad(const Matrix2D &A0, const Matrix2D &target, double cosine_weight,
                         Matrix2D *dA0, double scale) {
    if (!A0.same_shape(target)) throw std::invalid_argument("vis_loss_and_grad: shape mismatch");
    double n_el = static_cast<double>(A0.numel());
    double mse = 0.0;
    for (size_t i = 0; i < A0.data.size(); i++) {
        double d = A0.data[i] - target.data[i];
        mse += d * d;
        if (dA0) dA0->data[i] += scale * 2.0 * d / n_el;
    }
    mse /= n_el;

    // rows with a zero target carry no direction; MSE already pins them
    std::vector<int> rows;
    for (int i = 0; i < target.rows; i++) {
        double nb = 0.0;
        for (int j = 0; j < target.cols; j++) nb += target.at(i, j) * target.at(i, j);
        if (std::sqrt(nb) > 1e-12) rows.push_back(i);
    }
    double cos_term = 0.0;
    if (cosine_weight > 0.0 && !rows.empty()) {
        for (int i : rows) {
            const double *a = A0.row_ptr(i);
            const double *b = target.row_ptr(i);
            double dot = 0.0, na2 = 0.0, nb2 = 0.0;
            for (int j = 0; j < A0.cols; j++) {
                dot += a[j] * b[j];
                na2 += a[j] * a[j];
                nb2 += b[j] * b[j];
            }
            double na_raw = std::sqrt(na2);
            double na = std::max(na_raw, 1e-8);
            double nb = std::sqrt(nb2);
            double cosv = dot / (na * nb);
            cos_term += 1.0 - cosv;
            if (dA0) {
                double c = scale * cosine_weight / rows.size();
                double *dr = dA0->row_ptr(i);
                for (int j = 0; j < A0.cols; j++) {
                    double dcos = b[j] / (na * nb);
                    if (na_raw > 1e-8) dcos -= dot * a[j] / (na * na * na * nb);
                    dr[j] += c * (-dcos);
                }
            }
        }
        cos_term /= rows.size();
    }
    return mse + cosine_weight * cos_term;
}

void set_stage_trainables(ModelState &state, int stage) {
    state.set_trainable_all(false);
    if (stage == 1 || stage == 3) state.set_trainable(state.detrans_tensors(), true);
    if (stage == 2 || stage == 3) state.set_trainable(state.llm_tensors(), true);
    state.w_vis.trainable = false;
    state.w_proj.trainable = false;
}

// ---- sequence assembly ----

static std::vector<int> prefix_tokens(const GridSample &s) {
    std::vector<int> t = s.question;
    t.insert(t.end(), s.phase1.begin(), s.phase1.end());
    return t;
}

static SeqInput prefix_seq(const ModelState &state, const GridSample &s) {
    SeqInput seq;
    seq.vis_features = encode_image(state, s.input_features);
    seq.pieces.push_back(Piece::make_tokens(prefix_tokens(s)));
    return seq;
}

// ---- stage 1 ----

static LossParts stage1_sample(ModelState &state, const GridSample &s, double scale) {
    SeqInput seq = prefix_seq(state, s);
    ForwardTrace tr = forward(state, seq, state.cfg.hidden_layer());
    auto [A0, dtr] = detransform(state, tr.hidden_at_l, state.cfg.n_vis_tokens);
    Matrix2D target = delta_aux(state, s);
    LossParts parts;
    if (scale != 0.0) {
        Matrix2D dA0(A0.rows, A0.cols);
        parts.vis = vis_loss_and_grad(A0, target, 0.0, &dA0, scale);
        detrans_backward(state, dtr, dA0);  // dH discarded: the stack is frozen
    } else {
        parts.vis = vis_loss_and_grad(A0, target, 0.0, nullptr, 0.0);
    }
    parts.total = parts.vis;
    return parts;
}

LossParts stage1_accumulate(ModelState &state, const Batch &batch, const SftConfig &cfg,
                            double scale) {
    (void)cfg;
    if (batch.empty()) throw std::invalid_argument("stage1: empty batch");
    LossParts acc;
    double per = scale / batch.size();
    for (const GridSample *s : batch) {
        LossParts p = stage1_sample(state, *s, per);
        acc.total += p.total / batch.size();
        acc.ntp += p.ntp / batch.size();
        acc.vis += p.vis / batch.size();
    }
    return acc;
}

double stage1_loss(const ModelState &state, const Batch &batch, const SftConfig &cfg) {
    return stage1_accumulate(const_cast<ModelState &>(state), batch, cfg, 0.0).total;
}

// ---- stage 2 ----

static LossParts stage2_sample(ModelState &state, const GridSample &s, const SftConfig &cfg,
                               double scale) {
    SeqInput seq;
    seq.vis_features = encode_image(state, s.input_features);
    std::vector<int> text = prefix_tokens(s);
    text.insert(text.end(), s.phase2.begin(), s.phase2.end());
    seq.pieces.push_back(Piece::make_tokens(std::move(text)));

    int n_q = static_cast<int>(s.question.size());
    int base = state.cfg.n_vis_tokens + n_q - 1;  // row predicting the first y1 token
    std::vector<int> targets = s.phase1;
    targets.insert(targets.end(), s.phase2.begin(), s.phase2.end());
    std::vector<int> pred_rows(targets.size());
    std::vector<double> weights(targets.size());
    for (size_t i = 0; i < targets.size(); i++) {
        pred_rows[i] = base + static_cast<int>(i);
        weights[i] = targets[i] == tok::TRIGGER ? cfg.w_aux : cfg.w_normal;
    }

    ForwardTrace tr = forward(state, seq);
    LossParts parts;
    if (scale != 0.0) {
        Matrix2D d_logits(tr.logits.rows, tr.logits.cols);
        parts.ntp = ntp_loss_and_grad(tr.logits, targets, pred_rows, weights, &d_logits, scale);
        Matrix2D dx0 = backward(state, tr, &d_logits, nullptr);
        route_input_grads(state, tr, dx0);
    } else {
        parts.ntp = ntp_loss_and_grad(tr.logits, targets, pred_rows, weights, nullptr, 0.0);
    }
    parts.total = parts.ntp;
    return parts;
}

LossParts stage2_accumulate(ModelState &state, const Batch &batch, const SftConfig &cfg,
                            double scale) {
    if (batch.empty()) throw std::invalid_argument("stage2: empty batch");
    LossParts acc;
    double per = scale / batch.size();
    for (const GridSample *s : batch) {
        LossParts p = stage2_sample(state, *s, cfg, per);
        acc.total += p.total / batch.size();
        acc.ntp += p.ntp / batch.size();
    }
    return acc;
}

double stage2_loss(const ModelState &state, const Batch &batch, const SftConfig &cfg) {
    return stage2_accumulate(const_cast<ModelState &>(state), batch, cfg, 0.0).total;
}

// ---- stage 3 ----

static LossParts stage3_sample(ModelState &state, const GridSample &s, const SftConfig &cfg,
                               bool teacher, double scale) {
    const ModelConfig &mc = state.cfg;
    SeqInput seq1 = prefix_seq(state, s);
    const Matrix2D &V = seq1.vis_features;
    ForwardTrace tr1 = forward(state, seq1, mc.hidden_layer());
    auto [A0, dtr] = detransform(state, tr1.hidden_at_l, mc.n_vis_tokens);
    Matrix2D target = delta_aux(state, s);

    Matrix2D inject = teacher ? encode_image(state, s.aux_features) : fuse_gated(V, A0, mc.alpha);

    SeqInput seq2 = prefix_seq(state, s);
    seq2.pieces.push_back(Piece::make_vis(inject));
    seq2.pieces.push_back(Piece::make_tokens(s.phase2));
    int base = mc.n_vis_tokens + static_cast<int>(prefix_tokens(s).size()) + inject.rows - 1;
    std::vector<int> targets = s.phase2;
    std::vector<int> pred_rows(targets.size());
    std::vector<double> weights(targets.size(), 1.0);
    for (size_t i = 0; i < targets.size(); i++) pred_rows[i] = base + static_cast<int>(i);

    ForwardTrace tr2 = forward(state, seq2);
    LossParts parts;
    if (scale == 0.0) {
        parts.ntp = ntp_loss_and_grad(tr2.logits, targets, pred_rows, weights, nullptr, 0.0);
        parts.vis = vis_loss_and_grad(A0, target, cfg.cosine_weight, nullptr, 0.0);
        parts.total = parts.ntp + cfg.lambda_vis * parts.vis;
        return parts;
    }

    Matrix2D d_logits(tr2.logits.rows, tr2.logits.cols);
    parts.ntp = ntp_loss_and_grad(tr2.logits, targets, pred_rows, weights, &d_logits, scale);
    Matrix2D dx0_2 = backward(state, tr2, &d_logits, nullptr);
    std::vector<Matrix2D> piece_grads = route_input_grads(state, tr2, dx0_2);

    Matrix2D dA0(A0.rows, A0.cols);
    parts.vis = vis_loss_and_grad(A0, target, cfg.cosine_weight, &dA0, scale * cfg.lambda_vis);
    if (!teacher) {
        const Matrix2D &d_inject = piece_grads[1];  // the VisRows piece
        if (!d_inject.same_shape(A0))
            throw std::logic_error("stage3: inject gradient shape mismatch");
        axpy_inplace(dA0, mc.alpha, d_inject);
    }
    Matrix2D dH = detrans_backward(state, dtr, dA0);
    Matrix2D dx0_1 = backward(state, tr1, nullptr, &dH);
    route_input_grads(state, tr1, dx0_1);

    parts.total = parts.ntp + cfg.lambda_vis * parts.vis;
    return parts;
}

LossParts stage3_accumulate(ModelState &state, const Batch &batch, const SftConfig &cfg,
                            const std::vector<bool> &teacher_branch, double scale) {
    if (batch.empty()) throw std::invalid_argument("stage3: empty batch");
    if (teacher_branch.size() != batch.size())
        throw std::invalid_argument("stage3: branch choices must match the batch");
    LossParts acc;
    double per = scale / batch.size();
    for (size_t i = 0; i < batch.size(); i++) {
        LossParts p = stage3_sample(state, *batch[i], cfg, teacher_branch[i], per);
        acc.total += p.total / batch.size();
        acc.ntp += p.ntp / batch.size();
        acc.vis += p.vis / batch.size();
    }
    return acc;
}

double stage3_loss(const ModelState &state, const Batch &batch, const SftConfig &cfg,
                   const std::vector<bool> &teacher_branch) {
    return stage3_accumulate(const_cast<ModelState &>(state), batch, cfg, teacher_branch, 0.0)
        .total;
}

// ---- optimizer steps ----

static void optimizer_step(ModelState &state, const SftConfig &cfg, int stage) {
    AdamConfig ac;
    ac.lr = cfg.lr_for(stage);
    ac.beta1 = cfg.beta1;
    ac.beta2 = cfg.beta2;
    ac.eps = cfg.adam_eps;
    ac.weight_decay = cfg.weight_decay;
    for (ParamTensor *p : state.all_tensors()) adamw_step(*p, ac);
}

static double trainable_grad_norm(ModelState &state) {
    std::vector<ParamTensor *> t;
    for (ParamTensor *p : state.all_tensors())
        if (p->trainable) t.push_back(p);
    return global_grad_norm(t);
}

StageMetrics stage1_step(ModelState &state, const Batch &batch, const SftConfig &cfg) {
    cfg.validate();
    set_stage_trainables(state, 1);
    state.zero_grads();
    LossParts p = stage1_accumulate(state, batch, cfg, 1.0);
    StageMetrics m;
    m.loss_total = p.total;
    m.loss_vis = p.vis;
    m.grad_norm = trainable_grad_norm(state);
    optimizer_step(state, cfg, 1);
    return m;
}

StageMetrics stage2_step(ModelState &state, const Batch &batch, const SftConfig &cfg) {
    cfg.validate();
    set_stage_trainables(state, 2);
    state.zero_grads();
    LossParts p = stage2_accumulate(state, batch, cfg, 1.0);
    StageMetrics m;
    m.loss_total = p.total;
    m.loss_ntp = p.ntp;
    m.grad_norm = trainable_grad_norm(state);
    optimizer_step(state, cfg, 2);
    return m;
}

StageMetrics stage3_step(ModelState &state, const Batch &batch, const SftConfig &cfg, int step,
                         SeededRng &rng) {
    cfg.validate();
    set_stage_trainables(state, 3);
    state.zero_grads();
    double p_tf = anneal_probability(step, cfg.anneal_steps);
    std::vector<bool> teacher(batch.size());
    for (size_t i = 0; i < batch.size(); i++) teacher[i] = rng.bernoulli(p_tf);
    LossParts p = stage3_accumulate(state, batch, cfg, teacher, 1.0);
    StageMetrics m;
    m.loss_total = p.total;
    m.loss_ntp = p.ntp;
    m.loss_vis = p.vis;
    m.tf_prob = p_tf;
    m.grad_norm = trainable_grad_norm(state);
    optimizer_step(state, cfg, 3);
    return m;
}

// ---- stage driver ----

void write_metrics_csv(const std::vector<StageMetrics> &metrics, const std::string &path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open metrics file " + path);
    f << "step,loss_total,loss_ntp,loss_vis,tf_prob,grad_norm\n";
    f.setf(std::ios::fmtflags(0), std::ios::floatfield);
    f.precision(17);
    for (const StageMetrics &m : metrics)
        f << m.step << ',' << m.loss_total << ',' << m.loss_ntp << ',' << m.loss_vis << ','
          << m.tf_prob << ',' << m.grad_norm << "\n";
}

std::vector<StageMetrics> run_stage(ModelState &state, const Dataset &data, const SftConfig &cfg,
                                    int stage, uint64_t seed, const std::string &metrics_path,
                                    bool force) {
    cfg.validate();
    if (stage < 1 || stage > 3) throw std::invalid_argument("run_stage: stage must be 1..3");
    if (data.samples.empty()) throw std::invalid_argument("run_stage: empty dataset");
    for (int prev = 1; prev < stage; prev++)
        if (!state.stage_markers.count(prev) && !force)
            throw std::runtime_error("run_stage: stage " + std::to_string(stage) +
                                     " requires completed stage " + std::to_string(prev) +
                                     " (use force to override)");

    SeededRng root(seed);
    int n = static_cast<int>(data.samples.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    int cursor = n;  // forces a shuffle before the first use
    int epoch = 0;
    auto next_sample = [&]() -> const GridSample * {
        if (cursor >= n) {
            SeededRng sh = root.derive("shuffle", epoch++);
            for (int i = n - 1; i > 0; i--) std::swap(order[i], order[sh.uniform_int(i + 1)]);
            cursor = 0;
        }
        return &data.samples[order[cursor++]];
    };

    int steps = cfg.steps_for(stage);
    std::vector<StageMetrics> log;
    log.reserve(steps);
    SeededRng branch_rng = root.derive("branch");
    for (int step = 0; step < steps; step++) {
        Batch batch(cfg.samples_per_step());
        for (auto &b : batch) b = next_sample();
        StageMetrics m;
        if (stage == 1)
            m = stage1_step(state, batch, cfg);
        else if (stage == 2)
            m = stage2_step(state, batch, cfg);
        else
            m = stage3_step(state, batch, cfg, step, branch_rng);
        m.step = step;
        log.push_back(m);
    }
    state.stage_markers.insert(stage);
    if (!metrics_path.empty()) write_metrics_csv(log, metrics_path);
    return log;
}

}  // namespace latentlab
