#pragma once

#include <string>
#include <vector>

#include "latentlab/inference.hpp"
#include "latentlab/model.hpp"
#include "latentlab/synthdata.hpp"

namespace latentlab {

// Group-relative policy optimization where the continuous auxiliary block is
// cached at rollout time and replayed verbatim during the update, so the
// surrogate only differentiates through discrete-token log-probabilities.
struct AlpoConfig {
    int group_size = 8;
    double clip_eps = 0.2;
    double kl_coef = 1e-2;
    double lambda_fmt = 0.5;
    double lambda_aux = 0.3;
    double temperature = 1.0;
    double lr = 4e-6;
    int max_response_len = 16;  // per-phase decode budget
    int max_triggers = 1;
    double adv_eps = 1e-6;
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int prompts_per_step = 12;
    void validate() const;
    InferenceConfig rollout_inference_config() const;
};

struct RewardBreakdown {
    double r_acc = 0.0, r_fmt = 0.0, r_aux = 0.0;
    double total(const AlpoConfig &cfg) const {
        return r_acc + cfg.lambda_fmt * r_fmt + cfg.lambda_aux * r_aux;
    }
};

struct RolloutRecord {
    int sample_id = 0;
    std::vector<int> phase1_tokens;  // o1, up to and including the trigger
    std::vector<int> phase2_tokens;  // o2
    bool has_aux = false;
    Matrix2D e_aux;                  // cached injected block, model width
    std::vector<double> old_logprobs;  // over o1 then o2
    bool truncated = false;
    int n_triggers = 0;
    RewardBreakdown reward;
    double total_reward = 0.0;
    double advantage = 0.0;

    int n_tokens() const {
        return static_cast<int>(phase1_tokens.size() + phase2_tokens.size());
    }
};

RewardBreakdown compute_reward(const RolloutRecord &record, const GridSample &sample,
                               const AlpoConfig &cfg);

// G independent samples of one prompt, rewards filled in, advantages not.
std::vector<RolloutRecord> rollout_group(const ModelState &state, const GridSample &sample,
                                         const AlpoConfig &cfg, SeededRng rng);

// (r_i - mean) / (population std + adv_eps); all-equal groups give zeros.
std::vector<double> group_advantages(const std::vector<double> &rewards, double adv_eps);

// min(ratio*adv, clip(ratio, 1-eps, 1+eps)*adv)
double clipped_token_objective(double ratio, double advantage, double eps);

struct AlpoStepMetrics {
    int step = 0;
    double mean_reward = 0.0;
    double mean_r_acc = 0.0;
    double trigger_rate = 0.0;
    double mean_kl = 0.0;
    double clip_frac = 0.0;
    double policy_loss = 0.0;
};

// Surrogate loss (to minimize) over a batch of records: -(token mean of the
// clipped objective) + kl_coef * (token mean of the k3 divergence estimate
// against ref_state). Pure; used by the finite-difference harness.
double alpo_loss(const ModelState &state, const ModelState &ref_state,
                 const std::vector<RolloutRecord> &records,
                 const std::vector<const GridSample *> &samples, const AlpoConfig &cfg);

// One optimizer epoch on the batch: replays each record with its cached
// block as fixed context, forms per-token ratios against old_logprobs, and
// steps the LLM-side tensors. The detransformer gets no gradient.
AlpoStepMetrics alpo_step(ModelState &state, const ModelState &ref_state,
                          std::vector<RolloutRecord> &records,
                          const std::vector<const GridSample *> &samples, const AlpoConfig &cfg);

// Rollout -> advantage -> update loop with stratified deterministic cycling
// over aux-needed / aux-unneeded samples. ref_state is copied at entry.
std::vector<AlpoStepMetrics> run_alpo(ModelState &state, const Dataset &data,
                                      const AlpoConfig &cfg, int n_steps, uint64_t seed,
                                      const std::string &metrics_path, int n_threads,
                                      const std::string &rollout_dump_path = "");

void write_alpo_metrics_csv(const std::vector<AlpoStepMetrics> &metrics,
                            const std::string &path);

}  // namespace latentlab
