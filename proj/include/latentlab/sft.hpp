#pragma once

#include <string>
#include <vector>

#include "latentlab/model.hpp"
#include "latentlab/rng.hpp"
#include "latentlab/synthdata.hpp"

namespace latentlab {

// Three-stage supervised pipeline: (1) detransformer reconstruction against
// the encoded-feature difference, (2) weighted next-token prediction that
// teaches the trigger, (3) joint tuning with teacher-forcing annealing.
struct SftConfig {
    double lr_stage1 = 1e-4;
    double lr_stage2 = 1e-5;
    double lr_stage3 = 4e-6;
    int steps_stage1 = 3000;
    int steps_stage2 = 100;
    int steps_stage3 = 1500;
    double w_aux = 4.0;     // trigger-position weight, stage 2
    double w_normal = 1.0;
    double lambda_vis = 2.0;
    double cosine_weight = 0.5;
    int anneal_steps = 700;
    int batch_size = 1;
    int grad_accum = 16;
    double weight_decay = 0.0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

    int samples_per_step() const { return batch_size * grad_accum; }
    double lr_for(int stage) const;
    int steps_for(int stage) const;
    void validate() const;
};

struct StageMetrics {
    int step = 0;
    double loss_total = 0.0;
    double loss_ntp = 0.0;
    double loss_vis = 0.0;
    double tf_prob = 0.0;
    double grad_norm = 0.0;
};

using Batch = std::vector<const GridSample *>;

// E_v(I_aux) - E_v(I): the reconstruction target. Nonzero only at rows whose
// raw features differ (the query region, by construction).
Matrix2D delta_aux(const ModelState &state, const GridSample &sample);

// max(0, 1 - step/anneal_steps); anneal_steps <= 0 gives 0 everywhere.
double anneal_probability(int step, int anneal_steps);

// Weighted token-level cross entropy, normalized by the weight sum. pred_rows
// holds the logits row predicting each target. When d_logits is given, adds
// scale * dLoss/dlogits into it.
double ntp_loss_and_grad(const Matrix2D &logits, const std::vector<int> &targets,
                         const std::vector<int> &pred_rows, const std::vector<double> &weights,
                         Matrix2D *d_logits, double scale);

// MSE over all elements plus cosine_weight * mean over rows of (1 - cosine),
// where rows with a (numerically) zero target are excluded from the cosine
// mean — they carry no direction, and MSE already pins them. When dA0 is
// given, adds scale * dLoss/dA0 into it.
double vis_loss_and_grad(const Matrix2D &A0, const Matrix2D &target, double cosine_weight,
                         Matrix2D *dA0, double scale);

// Enables exactly the tensors a stage trains (1: detransformer; 2: LLM side;
// 3: both). The encoder and projector stay frozen always.
void set_stage_trainables(ModelState &state, int stage);

// Loss-only evaluations over a batch (mean over samples), used by the
// finite-difference harness; stage 3 takes an explicit per-sample branch
// choice so the loss is a deterministic function of the state.
double stage1_loss(const ModelState &state, const Batch &batch, const SftConfig &cfg);
double stage2_loss(const ModelState &state, const Batch &batch, const SftConfig &cfg);
double stage3_loss(const ModelState &state, const Batch &batch, const SftConfig &cfg,
                   const std::vector<bool> &teacher_branch);

// Gradient accumulation twins: add dLoss/dparams (same normalization as the
// loss fns, extra factor `scale`) into state grads. Return (ntp, vis) parts.
struct LossParts {
    double total = 0.0, ntp = 0.0, vis = 0.0;
};
LossParts stage1_accumulate(ModelState &state, const Batch &batch, const SftConfig &cfg,
                            double scale);
LossParts stage2_accumulate(ModelState &state, const Batch &batch, const SftConfig &cfg,
                            double scale);
LossParts stage3_accumulate(ModelState &state, const Batch &batch, const SftConfig &cfg,
                            const std::vector<bool> &teacher_branch, double scale);

// One optimizer step over samples_per_step() samples taken from `batch`
// (grad accumulation is internal). stage3_step draws the teacher-forcing
// branch per sample from rng at probability anneal_probability(step).
StageMetrics stage1_step(ModelState &state, const Batch &batch, const SftConfig &cfg);
StageMetrics stage2_step(ModelState &state, const Batch &batch, const SftConfig &cfg);
StageMetrics stage3_step(ModelState &state, const Batch &batch, const SftConfig &cfg, int step,
                         SeededRng &rng);

// Full stage driver: deterministic shuffled cycling over the dataset,
// per-step metrics (CSV at metrics_path unless empty), stage-order checks
// via checkpoint markers (bypassed by force), marker update at the end.
std::vector<StageMetrics> run_stage(ModelState &state, const Dataset &data, const SftConfig &cfg,
                                    int stage, uint64_t seed,
                                    const std::string &metrics_path = "", bool force = false);

void write_metrics_csv(const std::vector<StageMetrics> &metrics, const std::string &path);

}  // namespace latentlab
