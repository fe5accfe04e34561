#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "latentlab/alpo.hpp"
#include "latentlab/analysis.hpp"
#include "latentlab/checkpoint.hpp"
#include "latentlab/gradcheck.hpp"
#include "latentlab/inference.hpp"
#include "latentlab/manifest.hpp"
#include "latentlab/model.hpp"
#include "latentlab/sft.hpp"
#include "latentlab/synthdata.hpp"
#include "latentlab/threadpool.hpp"
#include "latentlab/tokens.hpp"

namespace fs = std::filesystem;
using namespace latentlab;
using nlohmann::json;

namespace {

struct GlobalOpts {
    uint64_t seed = 1;
    int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    std::string out_dir = "out";
};

std::string dir_of(const std::string &path) {
    fs::path p = fs::path(path).parent_path();
    return p.empty() ? std::string(".") : p.string();
}

void ensure_dir(const std::string &dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

RunManifest begin_manifest(const std::string &subcommand, const GlobalOpts &g) {
    RunManifest m;
    m.subcommand = subcommand;
    m.seed = g.seed;
    m.started_at = iso_utc_now();
    m.config["seed"] = std::to_string(g.seed);
    m.config["threads"] = std::to_string(g.threads);
    m.config["out_dir"] = g.out_dir;
    return m;
}

void finish_manifest(RunManifest &m, const std::string &dir) {
    m.finished_at = iso_utc_now();
    write_manifest(m, dir);
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

ModelConfig model_config_for(const DatasetHeader &h) {
    ModelConfig mc;
    mc.d_vis = h.code_dim + 2 * h.tag_dim;
    mc.n_vis_tokens = h.grid_size * h.grid_size;
    return mc;
}

std::vector<GridSample> head_samples(const Dataset &ds, int n) {
    int take = n <= 0 ? static_cast<int>(ds.samples.size())
                      : std::min<int>(n, static_cast<int>(ds.samples.size()));
    return {ds.samples.begin(), ds.samples.begin() + take};
}

// ---- gen-data ----

struct GenDataOpts {
    int n = 2000;
    int grid = 8;
    int glyphs = 16;
    double sigma = 2.5;
    double iso_frac = 0.25;
    double margin = 1.0;
    double easy_margin = 1.25;
    std::string mode = "filtered";
    std::string out;
};

int run_gen_data(const GenDataOpts &o, const GlobalOpts &g) {
    GenParams p;
    p.n_samples = o.n;
    p.grid_size = o.grid;
    p.n_glyphs = o.glyphs;
    p.noise_level = o.sigma;
    p.iso_frac = o.iso_frac;
    p.necessity_margin = o.margin;
    p.easy_margin = o.easy_margin;
    p.seed = g.seed;
    p.mode = mode_from_name(o.mode);
    std::string out = o.out.empty() ? g.out_dir + "/data.jsonl" : o.out;
    ensure_dir(dir_of(out));

    RunManifest m = begin_manifest("gen-data", g);
    m.config["n"] = std::to_string(p.n_samples);
    m.config["grid"] = std::to_string(p.grid_size);
    m.config["glyphs"] = std::to_string(p.n_glyphs);
    m.config["sigma"] = fmt(p.noise_level);
    m.config["iso_frac"] = fmt(p.iso_frac);
    m.config["margin"] = fmt(p.necessity_margin);
    m.config["easy_margin"] = fmt(p.easy_margin);
    m.config["mode"] = o.mode;
    m.config["out"] = out;

    Dataset ds = gen_dataset(p);
    write_dataset(ds, out);
    std::cout << "wrote " << ds.samples.size() << " samples to " << out
              << " (kept fraction " << ds.header.kept_fraction << ")\n";
    m.output_hashes[out] = hash_file_hex(out);
    finish_manifest(m, dir_of(out));
    return 0;
}

// ---- train-sft ----

struct TrainSftOpts {
    std::string data;
    std::string ckpt_in;
    std::string ckpt_out;
    int stage = 0;  // 0 = stages 1,2,3 in order
    // toy-scaled schedule; the paper-scale values are the struct defaults
    double lr1 = 3e-3, lr2 = 1e-3, lr3 = 5e-4;
    int steps1 = 500, steps2 = 60, steps3 = 300;
    int batch_size = 1, grad_accum = 8;
    double lambda_vis = 2.0, cosine_weight = 0.5;
    double w_aux = 4.0, w_normal = 1.0;
    int anneal = 200;
    bool force = false;
};

SftConfig sft_config_from(const TrainSftOpts &o) {
    SftConfig c;
    c.lr_stage1 = o.lr1;
    c.lr_stage2 = o.lr2;
    c.lr_stage3 = o.lr3;
    c.steps_stage1 = o.steps1;
    c.steps_stage2 = o.steps2;
    c.steps_stage3 = o.steps3;
    c.batch_size = o.batch_size;
    c.grad_accum = o.grad_accum;
    c.lambda_vis = o.lambda_vis;
    c.cosine_weight = o.cosine_weight;
    c.w_aux = o.w_aux;
    c.w_normal = o.w_normal;
    c.anneal_steps = o.anneal;
    return c;
}

int run_train_sft(const TrainSftOpts &o, const GlobalOpts &g) {
    Dataset ds = load_dataset(o.data);
    SftConfig cfg = sft_config_from(o);
    cfg.validate();

    ModelState state = [&]() {
        if (!o.ckpt_in.empty()) return load_checkpoint(o.ckpt_in);
        GenParams gp = params_from_header(ds.header);
        TaskBasis basis = make_basis(gp);
        ModelConfig mc = model_config_for(ds.header);
        InitPriors priors = task_priors(basis, gp, mc.vocab_size);
        return init_model(mc, SeededRng(g.seed), &priors);
    }();
    if (state.cfg.d_vis != ds.header.code_dim + 2 * ds.header.tag_dim)
        throw std::runtime_error("checkpoint visual width does not match the dataset");

    std::string ckpt_out = o.ckpt_out.empty() ? g.out_dir + "/sft.bin" : o.ckpt_out;
    ensure_dir(dir_of(ckpt_out));
    ensure_dir(g.out_dir);

    RunManifest m = begin_manifest("train-sft", g);
    m.input_hashes[o.data] = hash_file_hex(o.data);
    if (!o.ckpt_in.empty()) m.input_hashes[o.ckpt_in] = hash_file_hex(o.ckpt_in);
    m.config["data"] = o.data;
    m.config["stage"] = std::to_string(o.stage);
    m.config["lr1"] = fmt(cfg.lr_stage1);
    m.config["lr2"] = fmt(cfg.lr_stage2);
    m.config["lr3"] = fmt(cfg.lr_stage3);
    m.config["steps1"] = std::to_string(cfg.steps_stage1);
    m.config["steps2"] = std::to_string(cfg.steps_stage2);
    m.config["steps3"] = std::to_string(cfg.steps_stage3);
    m.config["batch_size"] = std::to_string(cfg.batch_size);
    m.config["grad_accum"] = std::to_string(cfg.grad_accum);
    m.config["lambda_vis"] = fmt(cfg.lambda_vis);
    m.config["cosine_weight"] = fmt(cfg.cosine_weight);
    m.config["w_aux"] = fmt(cfg.w_aux);
    m.config["anneal"] = std::to_string(cfg.anneal_steps);
    m.config["force"] = o.force ? "1" : "0";
    m.config["ckpt_out"] = ckpt_out;

    std::vector<int> stages = o.stage == 0 ? std::vector<int>{1, 2, 3}
                                           : std::vector<int>{o.stage};
    for (int s : stages) {
        std::string metrics = g.out_dir + "/sft_stage" + std::to_string(s) + "_metrics.csv";
        auto log = run_stage(state, ds, cfg, s, g.seed + static_cast<uint64_t>(s), metrics,
                             o.force);
        std::cout << "stage " << s << ": " << log.size() << " steps, final loss "
                  << (log.empty() ? 0.0 : log.back().loss_total) << "\n";
        m.output_hashes[metrics] = hash_file_hex(metrics);
    }
    save_checkpoint(state, ckpt_out);
    m.output_hashes[ckpt_out] = hash_file_hex(ckpt_out);
    finish_manifest(m, g.out_dir);
    std::cout << "checkpoint written to " << ckpt_out << "\n";
    return 0;
}

// ---- train-alpo ----

struct TrainAlpoOpts {
    std::string data;
    std::string ckpt_in;
    std::string ckpt_out;
    int steps = 30;
    int group_size = 8;
    double lr = 1e-4;
    double kl_coef = 1e-2;
    double clip_eps = 0.2;
    double lambda_fmt = 0.5;
    double lambda_aux = 0.3;
    double temperature = 1.0;
    int prompts_per_step = 12;
    int max_response_len = 16;
    bool dump_rollouts = false;
};

int run_train_alpo(const TrainAlpoOpts &o, const GlobalOpts &g) {
    Dataset ds = load_dataset(o.data);
    ModelState state = load_checkpoint(o.ckpt_in);
    AlpoConfig cfg;
    cfg.group_size = o.group_size;
    cfg.lr = o.lr;
    cfg.kl_coef = o.kl_coef;
    cfg.clip_eps = o.clip_eps;
    cfg.lambda_fmt = o.lambda_fmt;
    cfg.lambda_aux = o.lambda_aux;
    cfg.temperature = o.temperature;
    cfg.prompts_per_step = o.prompts_per_step;
    cfg.max_response_len = o.max_response_len;
    cfg.validate();

    std::string ckpt_out = o.ckpt_out.empty() ? g.out_dir + "/alpo.bin" : o.ckpt_out;
    ensure_dir(dir_of(ckpt_out));
    ensure_dir(g.out_dir);
    std::string metrics = g.out_dir + "/alpo_metrics.csv";
    std::string dump = o.dump_rollouts ? g.out_dir + "/alpo_rollouts.jsonl" : "";

    RunManifest m = begin_manifest("train-alpo", g);
    m.input_hashes[o.data] = hash_file_hex(o.data);
    m.input_hashes[o.ckpt_in] = hash_file_hex(o.ckpt_in);
    m.config["data"] = o.data;
    m.config["steps"] = std::to_string(o.steps);
    m.config["group_size"] = std::to_string(cfg.group_size);
    m.config["lr"] = fmt(cfg.lr);
    m.config["kl_coef"] = fmt(cfg.kl_coef);
    m.config["clip_eps"] = fmt(cfg.clip_eps);
    m.config["lambda_fmt"] = fmt(cfg.lambda_fmt);
    m.config["lambda_aux"] = fmt(cfg.lambda_aux);
    m.config["temperature"] = fmt(cfg.temperature);
    m.config["prompts_per_step"] = std::to_string(cfg.prompts_per_step);
    m.config["max_response_len"] = std::to_string(cfg.max_response_len);
    m.config["ckpt_out"] = ckpt_out;

    auto log = run_alpo(state, ds, cfg, o.steps, g.seed, metrics, g.threads, dump);
    save_checkpoint(state, ckpt_out);
    std::cout << "alpo: " << log.size() << " steps, mean reward "
              << (log.empty() ? 0.0 : log.front().mean_reward) << " -> "
              << (log.empty() ? 0.0 : log.back().mean_reward) << "\n";
    m.output_hashes[metrics] = hash_file_hex(metrics);
    m.output_hashes[ckpt_out] = hash_file_hex(ckpt_out);
    if (!dump.empty()) m.output_hashes[dump] = hash_file_hex(dump);
    finish_manifest(m, g.out_dir);
    return 0;
}

// ---- infer ----

struct InferOpts {
    std::string data;
    std::string ckpt;
    std::string aux_mode = "normal";
    int pooling_ratio = 1;
    double placeholder_value = 0.0;
    double temperature = 0.0;
    int max_samples = 0;
    std::string out;
};

int run_infer(const InferOpts &o, const GlobalOpts &g) {
    Dataset ds = load_dataset(o.data);
    ModelState state = load_checkpoint(o.ckpt);
    InferenceConfig cfg;
    cfg.aux_mode = aux_mode_from_name(o.aux_mode);
    cfg.pooling_ratio = o.pooling_ratio;
    cfg.placeholder_value = o.placeholder_value;
    cfg.temperature = o.temperature;
    cfg.validate();
    std::vector<GridSample> samples = head_samples(ds, o.max_samples);

    std::string out = o.out.empty() ? g.out_dir + "/infer.jsonl" : o.out;
    ensure_dir(dir_of(out));

    RunManifest m = begin_manifest("infer", g);
    m.input_hashes[o.data] = hash_file_hex(o.data);
    m.input_hashes[o.ckpt] = hash_file_hex(o.ckpt);
    m.config["data"] = o.data;
    m.config["ckpt"] = o.ckpt;
    m.config["aux_mode"] = o.aux_mode;
    m.config["pooling_ratio"] = std::to_string(cfg.pooling_ratio);
    m.config["placeholder_value"] = fmt(cfg.placeholder_value);
    m.config["temperature"] = fmt(cfg.temperature);
    m.config["max_samples"] = std::to_string(o.max_samples);
    m.config["out"] = out;

    SeededRng root(g.seed);
    std::vector<InferenceResult> results(samples.size());
    parallel_for(static_cast<int>(samples.size()), g.threads, [&](int i) {
        results[i] = run_inference(state, samples[i], cfg, root.derive("infer", i));
    });

    std::ofstream f(out, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + out);
    int correct = 0;
    for (size_t i = 0; i < samples.size(); i++) {
        const InferenceResult &r = results[i];
        bool ok = answer_correct(r, samples[i]);
        correct += ok ? 1 : 0;
        json line{{"id", samples[i].id},
                  {"triggered", r.triggered},
                  {"answer", r.answer},
                  {"answer_text", tok::decode(r.answer)},
                  {"correct", ok},
                  {"latent_len", r.aux_tokens.rows}};
        f << line.dump() << "\n";
    }
    f.close();
    double acc = samples.empty() ? 0.0 : static_cast<double>(correct) / samples.size();
    std::cout << "accuracy " << acc << " over " << samples.size() << " samples (mode "
              << o.aux_mode << ")\n";
    m.output_hashes[out] = hash_file_hex(out);
    finish_manifest(m, dir_of(out));
    return 0;
}

// ---- analyze-ig ----

struct AnalyzeIgOpts {
    std::string data;
    std::string ckpt;
    int n_samples = 50;
    std::string latent_space = "model";  // model | visual
    int svd_threshold = 500;
    double ar_contraction = 0.7;
    double ar_rho = 0.93;
    double ar_beta0_frac = 0.5;
};

int run_analyze_ig(const AnalyzeIgOpts &o, const GlobalOpts &g) {
    if (o.latent_space != "model" && o.latent_space != "visual")
        throw CLI::ValidationError("--latent-space", "must be 'model' or 'visual'");
    Dataset ds = load_dataset(o.data);
    ModelState state = load_checkpoint(o.ckpt);
    std::vector<GridSample> samples = head_samples(ds, o.n_samples);
    ensure_dir(g.out_dir);

    RunManifest m = begin_manifest("analyze-ig", g);
    m.input_hashes[o.data] = hash_file_hex(o.data);
    m.input_hashes[o.ckpt] = hash_file_hex(o.ckpt);
    m.config["data"] = o.data;
    m.config["ckpt"] = o.ckpt;
    m.config["n_samples"] = std::to_string(o.n_samples);
    m.config["latent_space"] = o.latent_space;
    m.config["svd_threshold"] = std::to_string(o.svd_threshold);

    InferenceConfig icfg;  // normal mode, pooling 1, greedy
    SeededRng root(g.seed);
    std::vector<Matrix2D> single(samples.size()), ar(samples.size());
    std::vector<char> ok(samples.size(), 0);
    ArBaselineParams ap{o.ar_contraction, o.ar_rho, o.ar_beta0_frac};
    int T = state.cfg.n_vis_tokens;
    parallel_for(static_cast<int>(samples.size()), g.threads, [&](int i) {
        InferenceResult r = run_inference(state, samples[i], icfg, root.derive("ig", i));
        if (r.triggered) {
            single[i] = o.latent_space == "model" ? r.e_aux : r.raw_A0;
            ok[i] = 1;
        }
        ar[i] = ar_baseline_latents(state, samples[i], T, ap, root.derive("ar", i));
    });
    std::vector<Matrix2D> single_kept, ar_kept;
    int skipped = 0;
    for (size_t i = 0; i < samples.size(); i++) {
        if (ok[i]) {
            single_kept.push_back(std::move(single[i]));
            ar_kept.push_back(std::move(ar[i]));
        } else {
            skipped++;
        }
    }
    if (single_kept.empty())
        throw std::runtime_error("analyze-ig: no sample triggered the auxiliary block");

    IGCurve c_single = ig_curve(single_kept, T);
    IGCurve c_ar = ig_curve(ar_kept, T);
    std::string f_single = g.out_dir + "/ig_single_shot.csv";
    std::string f_ar = g.out_dir + "/ig_ar_baseline.csv";
    std::string f_meta = g.out_dir + "/ig_metadata.json";
    write_ig_csv(c_single, f_single);
    write_ig_csv(c_ar, f_ar);

    json meta{{"latent_space", o.latent_space},
              {"space_note", o.latent_space == "model"
                                 ? "injected auxiliary rows at model width, post-projector"
                                 : "detransformer output rows at visual width, pre-pooling"},
              {"n_sequences", c_single.n_sequences},
              {"n_skipped_untriggered", skipped},
              {"svd_threshold", o.svd_threshold},
              {"ar_contraction", ap.contraction},
              {"ar_rho", ap.rho},
              {"ar_beta0_frac", ap.beta0_frac},
              {"checkpoint_hash", hash_file_hex(o.ckpt)},
              {"seed", g.seed}};
    {
        std::ofstream f(f_meta, std::ios::trunc);
        f << meta.dump(2) << "\n";
    }
    std::cout << "ig curves over " << c_single.n_sequences << " sequences written to "
              << g.out_dir << "\n";
    m.output_hashes[f_single] = hash_file_hex(f_single);
    m.output_hashes[f_ar] = hash_file_hex(f_ar);
    m.output_hashes[f_meta] = hash_file_hex(f_meta);
    finish_manifest(m, g.out_dir);
    return 0;
}

// ---- sweep / pad-exp ----

struct SweepOpts {
    std::string data;
    std::string ckpt;
    std::string lengths = "1,2,4,8,16,32,64";
    int n_samples = 200;
};

std::vector<int> parse_lengths(const std::string &s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stoi(item));
    }
    if (out.empty()) throw CLI::ValidationError("--lengths", "no lengths given");
    return out;
}

int run_sweep(const SweepOpts &o, const GlobalOpts &g) {
    Dataset ds = load_dataset(o.data);
    ModelState state = load_checkpoint(o.ckpt);
    std::vector<GridSample> samples = head_samples(ds, o.n_samples);
    std::vector<int> lengths = parse_lengths(o.lengths);
    ensure_dir(g.out_dir);

    RunManifest m = begin_manifest("sweep", g);
    m.input_hashes[o.data] = hash_file_hex(o.data);
    m.input_hashes[o.ckpt] = hash_file_hex(o.ckpt);
    m.config["data"] = o.data;
    m.config["ckpt"] = o.ckpt;
    m.config["lengths"] = o.lengths;
    m.config["n_samples"] = std::to_string(o.n_samples);

    InferenceConfig base;
    SweepResult res = latent_length_sweep(state, samples, lengths, base, g.seed, g.threads);
    std::string f_csv = g.out_dir + "/sweep.csv";
    std::string f_meta = g.out_dir + "/sweep_metadata.json";
    write_sweep_csv(res, f_csv);
    json meta{{"n_samples", res.n_samples},
              {"pooling_ratios", res.pooling_ratios},
              {"checkpoint_hash", hash_file_hex(o.ckpt)},
              {"seed", g.seed}};
    {
        std::ofstream f(f_meta, std::ios::trunc);
        f << meta.dump(2) << "\n";
    }
    std::vector<double> gap = padding_gap(res);
    for (size_t i = 0; i < res.latent_lengths.size(); i++)
        std::cout << "len " << res.latent_lengths[i] << ": normal "
                  << res.accuracy_normal[i] << ", padded " << res.accuracy_padded[i]
                  << ", gap " << gap[i] << "\n";
    m.output_hashes[f_csv] = hash_file_hex(f_csv);
    m.output_hashes[f_meta] = hash_file_hex(f_meta);
    finish_manifest(m, g.out_dir);
    return 0;
}

struct PadExpOpts {
    std::string data;
    std::string ckpt;
    int pooling_ratio = 1;
    double placeholder_value = 0.0;
    int n_samples = 200;
};

int run_pad_exp(const PadExpOpts &o, const GlobalOpts &g) {
    Dataset ds = load_dataset(o.data);
    ModelState state = load_checkpoint(o.ckpt);
    std::vector<GridSample> samples = head_samples(ds, o.n_samples);
    ensure_dir(g.out_dir);

    RunManifest m = begin_manifest("pad-exp", g);
    m.input_hashes[o.data] = hash_file_hex(o.data);
    m.input_hashes[o.ckpt] = hash_file_hex(o.ckpt);
    m.config["data"] = o.data;
    m.config["ckpt"] = o.ckpt;
    m.config["pooling_ratio"] = std::to_string(o.pooling_ratio);
    m.config["placeholder_value"] = fmt(o.placeholder_value);
    m.config["n_samples"] = std::to_string(o.n_samples);

    InferenceConfig cfg;
    cfg.pooling_ratio = o.pooling_ratio;
    cfg.placeholder_value = o.placeholder_value;
    cfg.aux_mode = AuxMode::Normal;
    EvalSummary normal = evaluate_accuracy(state, samples, cfg, g.seed, g.threads);
    cfg.aux_mode = AuxMode::Placeholder;
    EvalSummary padded = evaluate_accuracy(state, samples, cfg, g.seed, g.threads);

    int len = pooled_len(state.cfg.n_vis_tokens, o.pooling_ratio);
    std::string f_csv = g.out_dir + "/pad_exp.csv";
    {
        std::ofstream f(f_csv, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + f_csv);
        f.precision(17);
        f << "length,acc_normal,acc_padded,gap\n";
        f << len << ',' << normal.accuracy << ',' << padded.accuracy << ','
          << normal.accuracy - padded.accuracy << "\n";
    }
    std::cout << "latent len " << len << ": normal " << normal.accuracy << ", padded "
              << padded.accuracy << ", gap " << normal.accuracy - padded.accuracy << "\n";
    m.output_hashes[f_csv] = hash_file_hex(f_csv);
    finish_manifest(m, g.out_dir);
    return 0;
}

// ---- grad-check ----

struct GradCheckOpts {
    std::string ckpt;
    int probes = 64;
    double h = 1e-5;
    double tol = 1e-4;
};

int run_grad_check(const GradCheckOpts &o, const GlobalOpts &g) {
    GenParams gp;
    gp.n_samples = 2;
    gp.mode = GenMode::Raw;
    gp.seed = g.seed;
    Dataset ds = gen_dataset(gp);
    Batch batch{&ds.samples[0], &ds.samples[1]};

    ModelState state = o.ckpt.empty() ? init_model(model_config_for(ds.header), SeededRng(g.seed))
                                      : load_checkpoint(o.ckpt);
    SftConfig scfg;
    scfg.cosine_weight = 0.5;
    double worst = 0.0;
    auto report = [&](const char *name, const FdReport &r) {
        std::cout << name << ": max rel err " << r.max_rel_err << " over " << r.n_checked
                  << " probes (worst " << r.worst_tensor << "[" << r.worst_row << ","
                  << r.worst_col << "] analytic " << r.worst_analytic << " fd " << r.worst_fd
                  << ")\n";
        worst = std::max(worst, r.max_rel_err);
    };

    {
        set_stage_trainables(state, 1);
        state.zero_grads();
        stage1_accumulate(state, batch, scfg, 1.0);
        auto loss = [&]() { return stage1_loss(state, batch, scfg); };
        report("stage1", finite_diff_check(loss, state, o.probes, o.h, SeededRng(11)));
    }
    {
        set_stage_trainables(state, 2);
        state.zero_grads();
        stage2_accumulate(state, batch, scfg, 1.0);
        auto loss = [&]() { return stage2_loss(state, batch, scfg); };
        report("stage2", finite_diff_check(loss, state, o.probes, o.h, SeededRng(12)));
    }
    {
        set_stage_trainables(state, 3);
        state.zero_grads();
        std::vector<bool> branch{false, true};
        stage3_accumulate(state, batch, scfg, branch, 1.0);
        auto loss = [&]() { return stage3_loss(state, batch, scfg, branch); };
        report("stage3", finite_diff_check(loss, state, o.probes, o.h, SeededRng(13)));
    }
    {
        AlpoConfig acfg;
        acfg.group_size = 4;
        ModelState ref_state = state;
        std::vector<RolloutRecord> records =
            rollout_group(state, ds.samples[0], acfg, SeededRng(g.seed).derive("gc"));
        std::vector<double> rewards;
        for (auto &r : records) rewards.push_back(r.total_reward);
        std::vector<double> adv = group_advantages(rewards, acfg.adv_eps);
        std::vector<const GridSample *> samples;
        for (size_t i = 0; i < records.size(); i++) {
            records[i].advantage = adv[i] + 0.25 * (static_cast<int>(i) + 1);
            samples.push_back(&ds.samples[0]);
        }
        state.set_trainable_all(false);
        state.set_trainable(state.llm_tensors(), true);
        state.zero_grads();
        // accumulate analytic grads without the optimizer step
        ModelState ref_copy = ref_state;
        AlpoStepMetrics mm;
        (void)mm;
        // reuse alpo_step's gradient path by freezing the lr to zero
        AlpoConfig zcfg = acfg;
        zcfg.lr = 0.0;
        std::vector<RolloutRecord> recs_copy = records;
        alpo_step(state, ref_copy, recs_copy, samples, zcfg);
        auto loss = [&]() { return alpo_loss(state, ref_state, records, samples, acfg); };
        report("alpo", finite_diff_check(loss, state, o.probes, o.h, SeededRng(14)));
    }
    std::cout << "overall max rel err " << worst << (worst < o.tol ? " OK" : " FAIL") << "\n";
    return worst < o.tol ? 0 : 2;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{
        "latentlab: a desk-scale latent visual reasoning laboratory.\n"
        "Training defaults are scaled-down analogs of the full-scale recipe\n"
        "(same schedule shape and loss weights; step counts and learning\n"
        "rates resized for a ~100k-parameter model)."};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value config file ([subcommand] sections supported)");

    GlobalOpts g;
    app.add_option("--seed", g.seed, "root RNG seed")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads for rollouts/evaluation")
        ->capture_default_str();
    app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();

    GenDataOpts gd;
    CLI::App *c_gd = app.add_subcommand("gen-data", "generate a synthetic grid dataset");
    c_gd->add_option("--n", gd.n, "samples to keep")->capture_default_str();
    c_gd->add_option("--grid", gd.grid, "grid side length")->capture_default_str();
    c_gd->add_option("--glyphs", gd.glyphs, "glyph count")->capture_default_str();
    c_gd->add_option("--sigma", gd.sigma, "structured noise level")->capture_default_str();
    c_gd->add_option("--iso-frac", gd.iso_frac, "isotropic noise fraction")
        ->capture_default_str();
    c_gd->add_option("--margin", gd.margin, "necessity margin")->capture_default_str();
    c_gd->add_option("--easy-margin", gd.easy_margin, "easy-mode margin")
        ->capture_default_str();
    c_gd->add_option("--mode", gd.mode, "filtered | raw | easy")->capture_default_str();
    c_gd->add_option("--out", gd.out, "output path (default <out-dir>/data.jsonl)");

    TrainSftOpts ts;
    CLI::App *c_ts = app.add_subcommand("train-sft", "run the three-stage supervised pipeline");
    c_ts->add_option("--data", ts.data, "training dataset (jsonl)")->required();
    c_ts->add_option("--ckpt-in", ts.ckpt_in, "checkpoint to continue from (default: fresh)");
    c_ts->add_option("--ckpt-out", ts.ckpt_out, "checkpoint to write (default <out-dir>/sft.bin)");
    c_ts->add_option("--stage", ts.stage, "1|2|3, or 0 for all stages in order")
        ->capture_default_str();
    c_ts->add_option("--lr1", ts.lr1, "stage-1 learning rate")->capture_default_str();
    c_ts->add_option("--lr2", ts.lr2, "stage-2 learning rate")->capture_default_str();
    c_ts->add_option("--lr3", ts.lr3, "stage-3 learning rate")->capture_default_str();
    c_ts->add_option("--steps1", ts.steps1, "stage-1 steps")->capture_default_str();
    c_ts->add_option("--steps2", ts.steps2, "stage-2 steps")->capture_default_str();
    c_ts->add_option("--steps3", ts.steps3, "stage-3 steps")->capture_default_str();
    c_ts->add_option("--batch-size", ts.batch_size, "samples per micro-batch")
        ->capture_default_str();
    c_ts->add_option("--grad-accum", ts.grad_accum, "micro-batches per optimizer step")
        ->capture_default_str();
    c_ts->add_option("--lambda-vis", ts.lambda_vis, "visual loss weight")
        ->capture_default_str();
    c_ts->add_option("--cosine-weight", ts.cosine_weight, "cosine term weight")
        ->capture_default_str();
    c_ts->add_option("--w-aux", ts.w_aux, "trigger-token NTP weight")->capture_default_str();
    c_ts->add_option("--anneal", ts.anneal, "teacher-forcing annealing steps")
        ->capture_default_str();
    c_ts->add_flag("--force", ts.force, "bypass stage-order checks (ablations)");

    TrainAlpoOpts ta;
    CLI::App *c_ta = app.add_subcommand("train-alpo", "policy optimization from a checkpoint");
    c_ta->add_option("--data", ta.data, "prompt dataset (jsonl)")->required();
    c_ta->add_option("--ckpt-in", ta.ckpt_in, "starting checkpoint")->required();
    c_ta->add_option("--ckpt-out", ta.ckpt_out, "checkpoint to write (default <out-dir>/alpo.bin)");
    c_ta->add_option("--steps", ta.steps, "optimizer steps")->capture_default_str();
    c_ta->add_option("--group-size", ta.group_size, "rollouts per prompt")
        ->capture_default_str();
    c_ta->add_option("--lr", ta.lr, "learning rate")->capture_default_str();
    c_ta->add_option("--kl-coef", ta.kl_coef, "KL penalty coefficient")->capture_default_str();
    c_ta->add_option("--clip-eps", ta.clip_eps, "surrogate clip width")->capture_default_str();
    c_ta->add_option("--lambda-fmt", ta.lambda_fmt, "format reward weight")
        ->capture_default_str();
    c_ta->add_option("--lambda-aux", ta.lambda_aux, "auxiliary reward weight")
        ->capture_default_str();
    c_ta->add_option("--temp", ta.temperature, "rollout temperature")->capture_default_str();
    c_ta->add_option("--prompts-per-step", ta.prompts_per_step, "prompts per rollout batch")
        ->capture_default_str();
    c_ta->add_option("--max-response-len", ta.max_response_len, "per-phase decode budget")
        ->capture_default_str();
    c_ta->add_flag("--dump-rollouts", ta.dump_rollouts, "write rollout records as jsonl");

    InferOpts io_;
    CLI::App *c_in = app.add_subcommand("infer", "run two-phase inference over a dataset");
    c_in->add_option("--data", io_.data, "dataset (jsonl)")->required();
    c_in->add_option("--ckpt", io_.ckpt, "checkpoint")->required();
    c_in->add_option("--aux-mode", io_.aux_mode, "normal | disabled | placeholder | raw")
        ->capture_default_str();
    c_in->add_option("--pooling-ratio", io_.pooling_ratio, "latent pooling window")
        ->capture_default_str();
    c_in->add_option("--placeholder-value", io_.placeholder_value,
                     "constant used by placeholder mode")
        ->capture_default_str();
    c_in->add_option("--temperature", io_.temperature, "0 = greedy")->capture_default_str();
    c_in->add_option("--max-samples", io_.max_samples, "limit (0 = all)")
        ->capture_default_str();
    c_in->add_option("--out", io_.out, "output path (default <out-dir>/infer.jsonl)");

    AnalyzeIgOpts ai;
    CLI::App *c_ai = app.add_subcommand("analyze-ig",
                                        "information-gain curves, single-shot vs ar baseline");
    c_ai->add_option("--data", ai.data, "dataset (jsonl)")->required();
    c_ai->add_option("--ckpt", ai.ckpt, "checkpoint")->required();
    c_ai->add_option("--n-samples", ai.n_samples, "evaluation samples")->capture_default_str();
    c_ai->add_option("--latent-space", ai.latent_space,
                     "model (injected rows) | visual (detransformer output)")
        ->capture_default_str();
    c_ai->add_option("--svd-threshold", ai.svd_threshold,
                     "positions above this use the truncated-SVD path")
        ->capture_default_str();
    c_ai->add_option("--ar-contraction", ai.ar_contraction, "baseline propagation factor")
        ->capture_default_str();
    c_ai->add_option("--ar-rho", ai.ar_rho, "baseline innovation decay")->capture_default_str();
    c_ai->add_option("--ar-beta0", ai.ar_beta0_frac, "baseline first innovation fraction")
        ->capture_default_str();

    SweepOpts sw;
    CLI::App *c_sw = app.add_subcommand("sweep", "accuracy vs latent length, normal and padded");
    c_sw->add_option("--data", sw.data, "dataset (jsonl)")->required();
    c_sw->add_option("--ckpt", sw.ckpt, "checkpoint")->required();
    c_sw->add_option("--lengths", sw.lengths, "comma-separated target latent lengths")
        ->capture_default_str();
    c_sw->add_option("--n-samples", sw.n_samples, "evaluation samples")->capture_default_str();

    PadExpOpts pe;
    CLI::App *c_pe = app.add_subcommand("pad-exp", "paired normal-vs-padding evaluation");
    c_pe->add_option("--data", pe.data, "dataset (jsonl)")->required();
    c_pe->add_option("--ckpt", pe.ckpt, "checkpoint")->required();
    c_pe->add_option("--pooling-ratio", pe.pooling_ratio, "latent pooling window")
        ->capture_default_str();
    c_pe->add_option("--placeholder-value", pe.placeholder_value, "padding constant")
        ->capture_default_str();
    c_pe->add_option("--n-samples", pe.n_samples, "evaluation samples")->capture_default_str();

    GradCheckOpts gc;
    CLI::App *c_gc = app.add_subcommand("grad-check",
                                        "finite-difference audit of every training loss");
    c_gc->add_option("--ckpt", gc.ckpt, "checkpoint (default: fresh model)");
    c_gc->add_option("--probes", gc.probes, "coordinates per loss")->capture_default_str();
    c_gc->add_option("--fd-step", gc.h, "central difference step")->capture_default_str();
    c_gc->add_option("--tol", gc.tol, "pass threshold on max relative error")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (c_gd->parsed()) return run_gen_data(gd, g);
        if (c_ts->parsed()) return run_train_sft(ts, g);
        if (c_ta->parsed()) return run_train_alpo(ta, g);
        if (c_in->parsed()) return run_infer(io_, g);
        if (c_ai->parsed()) return run_analyze_ig(ai, g);
        if (c_sw->parsed()) return run_sweep(sw, g);
        if (c_pe->parsed()) return run_pad_exp(pe, g);
        if (c_gc->parsed()) return run_grad_check(gc, g);
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
