#pragma once

#include <string>
#include <vector>

#include "latentlab/model.hpp"
#include "latentlab/rng.hpp"
#include "latentlab/synthdata.hpp"

namespace latentlab {

// Two-phase generation: decode text until the model emits the trigger token,
// turn the mid-stack hidden states into an auxiliary visual block, append it
// to the context, recompute the full sequence, and keep decoding.
enum class AuxMode { Normal, Disabled, Placeholder, RawVisual };

std::string aux_mode_name(AuxMode m);
AuxMode aux_mode_from_name(const std::string &s);

struct InferenceConfig {
    int max_phase1_tokens = 16;
    int max_phase2_tokens = 16;
    double temperature = 0.0;  // 0 = greedy (ties to the lowest id)
    int pooling_ratio = 1;
    AuxMode aux_mode = AuxMode::Normal;
    double placeholder_value = 0.0;
    int max_triggers = 1;
    void validate() const;
};

// One auxiliary block in every representation the pipeline needs.
struct AuxBlocks {
    bool present = false;
    Matrix2D a0;     // detransformer output (or its mode substitute), pre-pooling
    Matrix2D fused;  // post-pooling A = pool(V + alpha*A0)
    Matrix2D e_aux;  // fused block through the projector: what enters the context
};

struct InferenceResult {
    std::vector<int> phase1_tokens;    // up to and including the first trigger
    std::vector<int> phase2_tokens;    // everything after it
    std::vector<double> gen_logprobs;  // one per generated token, both phases
    bool triggered = false;
    bool truncated = false;
    int n_triggers = 0;
    Matrix2D aux_tokens;  // first fused block (post-pooling), empty when absent
    Matrix2D raw_A0;      // first block's pre-pooling A0
    Matrix2D e_aux;       // first injected block in model width
    std::vector<Matrix2D> extra_fused;  // blocks beyond the first (multi-trigger)
    std::vector<Matrix2D> extra_e_aux;
    std::vector<int> answer;

    std::vector<int> all_tokens() const {
        std::vector<int> t = phase1_tokens;
        t.insert(t.end(), phase2_tokens.begin(), phase2_tokens.end());
        return t;
    }
};

struct Phase1Result {
    std::vector<int> tokens;
    bool triggered = false;
    bool truncated = false;
    Matrix2D hidden;  // layer-tap activations over the prefix incl. the trigger
};

// Decodes from [X_v; question] until trigger, EOS, or the budget. When the
// trigger fires, hidden carries the tap-layer states of the whole prefix.
Phase1Result generate_phase1(const ModelState &state, const GridSample &sample,
                             const InferenceConfig &cfg, SeededRng &rng,
                             std::vector<double> *logprobs = nullptr);

// hidden: tap-layer states incl. trigger; V: encoded input features.
// Disabled mode returns present=false; calling without a trigger having fired
// is the caller's contract violation and throws.
AuxBlocks build_auxiliary(const ModelState &state, const Matrix2D &hidden, const Matrix2D &V,
                          const InferenceConfig &cfg);

InferenceResult run_inference(const ModelState &state, const GridSample &sample,
                              const InferenceConfig &cfg, SeededRng rng);

// Tokens after the first answer delimiter, up to (not including) EOS.
std::vector<int> extract_answer(const std::vector<int> &generated);

// Post-pooling fused blocks of each triggering sample, for the analysis
// module. Non-triggering samples are skipped and counted.
std::vector<Matrix2D> capture_latents(const ModelState &state,
                                      const std::vector<GridSample> &samples,
                                      const InferenceConfig &cfg, uint64_t seed, int n_threads,
                                      int *n_skipped = nullptr);

struct EvalSummary {
    double accuracy = 0.0;
    double trigger_rate = 0.0;
    int n = 0;
};

bool answer_correct(const InferenceResult &res, const GridSample &sample);

EvalSummary evaluate_accuracy(const ModelState &state, const std::vector<GridSample> &samples,
                              const InferenceConfig &cfg, uint64_t seed, int n_threads);

// Samples an id from softmax(logits_row / temperature); temperature 0 takes
// the argmax (ties to the lowest id). *logprob receives the log-probability
// of the chosen id under softmax(logits/temperature); with temperature 0 the
// untempered softmax is used, for reporting only.
int sample_token(const double *logits, int vocab, double temperature, SeededRng &rng,
                 double *logprob);

// log softmax(logits/temperature)[id]; temperature <= 0 means 1.
double token_logprob(const double *logits, int vocab, double temperature, int id);

}  // namespace latentlab
