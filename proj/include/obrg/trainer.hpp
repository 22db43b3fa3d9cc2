#pragma once

#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "obrg/checkpoint.hpp"
#include "obrg/dataset.hpp"
#include "obrg/model.hpp"
#include "obrg/optimizer.hpp"
#include "obrg/sequences.hpp"

namespace obrg {

struct MetricsRecord {
    uint64_t step = 0;
    int stage = 0;
    std::optional<double> loss_ar;
    std::optional<double> loss_gen;
    std::optional<double> loss_itc;
    double beta = 0.0;
    double r = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

namespace detail {
inline void append_kv(std::string& s, const char* key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    s += ' ';
    s += key;
    s += '=';
    s += buf;
}
}  // namespace detail

// Persisted form: deterministic fields only. wall_ms goes to the console
// stream so metrics files are byte-comparable across runs.
inline std::string metrics_file_line(const MetricsRecord& m) {
    std::string s = "step=" + std::to_string(m.step) + " stage=" + std::to_string(m.stage);
    if (m.loss_ar) detail::append_kv(s, "loss_ar", *m.loss_ar);
    if (m.loss_gen) detail::append_kv(s, "loss_gen", *m.loss_gen);
    if (m.loss_itc) detail::append_kv(s, "loss_itc", *m.loss_itc);
    detail::append_kv(s, "beta", m.beta);
    detail::append_kv(s, "r", m.r);
    detail::append_kv(s, "lr", m.lr);
    return s;
}

inline std::string metrics_console_line(const MetricsRecord& m) {
    std::string s = metrics_file_line(m);
    detail::append_kv(s, "wall_ms", m.wall_ms);
    return s;
}

struct StagePlan {
    int stage = 1;
    int steps = 0;
    int batch = 16;      // stage 1
    int batch_gen = 16;  // stage 2
    int batch_itc = 32;
    double lr = 1e-3;
    double edit_fraction = 0.5;  // stage 1 task mix
    double gen_weight = 1.0;     // stage 2 loss weights
    double itc_weight = 1.0;
    double warmup_frac = 0.1;  // stage 2: initial fraction at 10x lower lr
    uint64_t seed = 0;
    int log_interval = 25;
    MixMode mix_mode = MixMode::continuous_mix;
    bool eps_prediction = true;
    bool lora_enabled = false;
    int lora_rank = 4;
    double lora_scale = 1.0;
    std::string lora_targets;

    void validate() const {
        if (stage != 1 && stage != 2) fail(ErrKind::config, "plan: stage must be 1 or 2");
        if (steps < 1) fail(ErrKind::config, "plan: steps must be positive");
        if (stage == 1 && batch < 1) fail(ErrKind::config, "plan: batch must be positive");
        if (stage == 2 && (batch_gen < 1 || batch_itc < 1)) fail(ErrKind::config, "plan: batches must be positive");
        if (stage == 2 && gen_weight <= 0.0 && itc_weight <= 0.0) {
            fail(ErrKind::config, "plan: stage 2 needs a positive generation or contrastive weight");
        }
    }
};

inline StagePlan stage1_plan(const Config& cfg) {
    StagePlan p;
    p.stage = 1;
    p.steps = cfg.trainer_stage1_steps;
    p.batch = cfg.trainer_stage1_batch;
    p.lr = cfg.trainer_stage1_lr;
    p.edit_fraction = cfg.trainer_stage1_edit_fraction;
    p.seed = cfg.seeds_root;
    p.log_interval = cfg.trainer_log_interval;
    p.lora_enabled = cfg.trainer_lora_enabled;
    p.lora_rank = cfg.trainer_lora_rank;
    p.lora_scale = cfg.trainer_lora_scale;
    p.lora_targets = cfg.trainer_lora_targets;
    return p;
}

inline StagePlan stage2_plan(const Config& cfg) {
    StagePlan p;
    p.stage = 2;
    p.steps = cfg.trainer_stage2_steps;
    p.batch_gen = cfg.trainer_stage2_batch_gen;
    p.batch_itc = cfg.trainer_stage2_batch_itc;
    p.lr = cfg.trainer_stage2_lr;
    p.gen_weight = cfg.trainer_stage2_gen_weight;
    p.itc_weight = cfg.trainer_stage2_itc_weight;
    p.warmup_frac = cfg.trainer_stage2_warmup_frac;
    p.seed = cfg.seeds_root;
    p.log_interval = cfg.trainer_log_interval;
    p.mix_mode = cfg.mix_mode();
    p.eps_prediction = cfg.gen_eps_prediction;
    return p;
}

// Precomputed final-layer hidden states over a frozen backbone; stage 2 and
// the evaluators never rerun the backbone on cached sequences.
struct HiddenCache {
    std::vector<Tensor> image;      // seq_image_only
    std::vector<Tensor> text_long;  // seq_text_plain(long caption)
    std::vector<Tensor> gen_cond;   // seq_gen_condition(long caption)

    void build(const Model& model, const Corpus& corpus, bool with_image, bool with_text, bool with_gen) {
        const size_t n = corpus.records.size();
        if (with_image) image.resize(n);
        if (with_text) text_long.resize(n);
        if (with_gen) gen_cond.resize(n);
        const int threads = env_thread_cap();
        parallel_for(n, threads, [&](size_t i) {
            const CorpusRecord& r = corpus.records[i];
            if (with_image) {
                image[i] = model.backbone.run(seq_image_only(model.featurizer.scene_features(r.scene))).hidden.detach();
            }
            if (with_text) {
                text_long[i] = model.backbone.run(seq_text_plain(r.caption_long)).hidden.detach();
            }
            if (with_gen) {
                gen_cond[i] = model.backbone.run(seq_gen_condition(r.caption_long)).hidden.detach();
            }
        });
    }
};

struct StageResult {
    std::vector<MetricsRecord> metrics;
    double first_loss = 0.0;
    double last_loss = 0.0;
    uint64_t final_step = 0;
};

class Trainer {
public:
    Trainer(Model& model, const Config& cfg) : model_(model), cfg_(cfg) {}

    // Stage 1: autoregressive fine-tuning of the backbone over mixed
    // captioning/editing sequences; alignment modules frozen throughout.
    StageResult run_stage1(const Corpus& train, const StagePlan& plan, const std::string& checkpoint_out,
                           const std::string& metrics_out = "", const std::string& resume_from = "") {
        plan.validate();
        if (plan.stage != 1) fail(ErrKind::config, "run_stage1: plan stage mismatch");
        if (train.records.empty()) fail(ErrKind::config, "run_stage1: empty corpus");
        check_corpus(train);

        Adam opt({0.9f, 0.999f, 1e-8f, static_cast<float>(cfg_.trainer_clip_norm)});
        Rng rng = Rng(plan.seed).split("stage1");
        uint64_t start_step = 0;

        if (plan.lora_enabled && resume_from.empty()) {
            model_.adapt_low_rank(plan.lora_targets, plan.lora_rank, static_cast<float>(plan.lora_scale),
                                  Rng(plan.seed).split("stage1.lora"));
        }
        model_.set_stage_freeze(1);

        if (!resume_from.empty()) {
            const CheckpointMeta meta =
                load_checkpoint(resume_from, model_.registry(), opt, config_fingerprint(cfg_));
            if (meta.stage != 1) fail(ErrKind::compat, "run_stage1: checkpoint is not a stage-1 checkpoint");
            if (static_cast<int>(meta.step) >= plan.steps) {
                fail(ErrKind::config, "run_stage1: checkpoint already has " + std::to_string(meta.step) + " steps");
            }
            rng.restore(meta.rng_key, meta.rng_counter);
            start_step = meta.step;
        }

        const uint64_t freeze_before = alignment_checksum();
        StageResult result;
        std::ofstream metrics_file = open_metrics(metrics_out);
        auto t0 = std::chrono::steady_clock::now();

        const int n = static_cast<int>(train.records.size());
        for (uint64_t step = start_step + 1; step <= static_cast<uint64_t>(plan.steps); ++step) {
            zero_all_grads(model_.registry());
            Tensor total;
            for (int b = 0; b < plan.batch; ++b) {
                const int idx = static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
                const bool use_edit = rng.uniform() < plan.edit_fraction;
                const CorpusRecord& rec = train.records[static_cast<size_t>(idx)];
                MultimodalSequence seq;
                const Tensor feats = model_.featurizer.scene_features(rec.scene);
                if (use_edit && rec.edit) {
                    seq = seq_editing(feats, rec.edit->instruction, rec.edit->post_caption_long);
                } else {
                    seq = seq_captioning(feats, rec.caption_long);
                }
                Tensor loss = model_.backbone.autoregressive_loss(model_.backbone.run(seq).logits, seq);
                total = b == 0 ? loss : add(total, loss);
            }
            total = scale(total, 1.0f / static_cast<float>(plan.batch));
            total.backward();
            opt.step(model_.registry(), static_cast<float>(plan.lr));

            const double loss_val = total.item();
            if (step == start_step + 1) result.first_loss = loss_val;
            result.last_loss = loss_val;
            if (step % static_cast<uint64_t>(plan.log_interval) == 0 || step == static_cast<uint64_t>(plan.steps)) {
                MetricsRecord m;
                m.step = step;
                m.stage = 1;
                m.loss_ar = loss_val;
                m.lr = plan.lr;
                m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                emit(m, metrics_file, result.metrics);
            }
        }

        if (alignment_checksum() != freeze_before) {
            fail(ErrKind::numeric, "run_stage1: frozen alignment parameters changed");
        }
        if (model_.has_active_adapters()) {
            model_.merge_adapters();
            model_.set_stage_freeze(1);
        }
        result.final_step = static_cast<uint64_t>(plan.steps);
        if (!checkpoint_out.empty()) {
            CheckpointMeta meta;
            meta.config_fingerprint = config_fingerprint(cfg_);
            meta.stage = 1;
            meta.step = result.final_step;
            meta.gen_step = 0;
            meta.rng_key = rng.key();
            meta.rng_counter = rng.counter();
            meta.opt_step = opt.step_count();
            save_checkpoint(checkpoint_out, model_.registry(), opt, meta);
        }
        return result;
    }

    // Stage 2: alternating generation/contrastive batches over the frozen
    // backbone; the replacement schedule advances on generation batches.
    StageResult run_stage2(const Corpus& train, const StagePlan& plan, const std::string& checkpoint_out,
                           const std::string& metrics_out = "", const std::string& resume_from = "") {
        plan.validate();
        if (plan.stage != 2) fail(ErrKind::config, "run_stage2: plan stage mismatch");
        if (train.records.empty()) fail(ErrKind::config, "run_stage2: empty corpus");
        check_corpus(train);

        model_.set_stage_freeze(2);
        Adam opt({0.9f, 0.999f, 1e-8f, static_cast<float>(cfg_.trainer_clip_norm)});
        Rng rng = Rng(plan.seed).split("stage2");
        uint64_t start_step = 0;
        uint64_t gen_step = 0;

        if (!resume_from.empty()) {
            const CheckpointMeta meta =
                load_checkpoint(resume_from, model_.registry(), opt, config_fingerprint(cfg_));
            if (meta.stage != 2) fail(ErrKind::compat, "run_stage2: checkpoint is not a stage-2 checkpoint");
            if (static_cast<int>(meta.step) >= plan.steps) {
                fail(ErrKind::config, "run_stage2: checkpoint already has " + std::to_string(meta.step) + " steps");
            }
            rng.restore(meta.rng_key, meta.rng_counter);
            start_step = meta.step;
            gen_step = meta.gen_step;
        }

        ReplacementSchedule sched;
        sched.total_steps = count_gen_batches(plan);
        sched.initial_frac = cfg_.sched_replacement_initial_frac;
        sched.progressive_frac = cfg_.sched_replacement_progressive_frac;
        sched.mode = plan.mix_mode;
        sched.validate();
        const NoiseSchedule noise = cfg_.noise_schedule();

        HiddenCache cache;
        cache.build(model_, train, plan.itc_weight > 0.0, plan.itc_weight > 0.0, plan.gen_weight > 0.0);

        const uint64_t backbone_before = backbone_checksum();
        StageResult result;
        std::ofstream metrics_file = open_metrics(metrics_out);
        auto t0 = std::chrono::steady_clock::now();
        const int warmup_end = static_cast<int>(plan.warmup_frac * plan.steps);
        const int n = static_cast<int>(train.records.size());

        std::optional<double> last_gen, last_itc;
        for (uint64_t step = start_step + 1; step <= static_cast<uint64_t>(plan.steps); ++step) {
            zero_all_grads(model_.registry());
            const bool gen_batch = is_gen_batch(plan, step);
            const double lr_scale = static_cast<int>(step) <= warmup_end ? 0.1 : 1.0;
            if (gen_batch) {
                const double r_now =
                    sched.ratio(static_cast<int>(std::min(gen_step, static_cast<uint64_t>(sched.total_steps))));
                // draw everything per sample first (fixed rng call order),
                // then run one batched graph over the generation batch
                struct GenDraw {
                    int idx = 0;
                    bool use_query = false;
                    int t = 1;
                    std::vector<float> eps;
                };
                std::vector<GenDraw> draws(static_cast<size_t>(plan.batch_gen));
                for (auto& d : draws) {
                    d.idx = static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
                    if (plan.mix_mode == MixMode::per_sample_bernoulli) d.use_query = rng.uniform() < r_now;
                    d.t = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(noise.steps)));
                    d.eps.resize(train.records[static_cast<size_t>(d.idx)].latent.size());
                    for (auto& v : d.eps) v = static_cast<float>(rng.normal());
                }
                std::vector<Tensor> kv_parts;
                std::vector<int> kv_sizes;
                for (const auto& d : draws) {
                    kv_parts.push_back(cache.gen_cond[static_cast<size_t>(d.idx)]);
                    kv_sizes.push_back(kv_parts.back().dim(0));
                }
                const Tensor ds_rows = model_.down.forward(concat_rows(kv_parts));
                const int n_q = model_.queries.q_text.dim(0);
                const std::vector<int> q_sizes(draws.size(), n_q);
                Tensor z_text = model_.bit.forward_batched(tile_rows(model_.queries.text(), plan.batch_gen), q_sizes,
                                                           ds_rows, kv_sizes);
                Tensor z_query = model_.bit.forward_batched(tile_rows(model_.queries.uncond(), plan.batch_gen),
                                                            q_sizes, ds_rows, kv_sizes);
                Tensor cond;
                if (plan.mix_mode == MixMode::continuous_mix) {
                    cond = mix_condition(z_text, z_query, 1.0 - r_now);
                } else {
                    std::vector<Tensor> picks;
                    for (size_t b = 0; b < draws.size(); ++b) {
                        picks.push_back(
                            slice_rows(draws[b].use_query ? z_query : z_text, static_cast<int>(b) * n_q, n_q));
                    }
                    cond = concat_rows(picks);
                }
                Tensor loss;
                if (plan.eps_prediction) {
                    std::vector<SceneLatent> zts(draws.size());
                    std::vector<int> ts(draws.size());
                    Tensor eps_target({plan.batch_gen, kLatentDim});
                    for (size_t b = 0; b < draws.size(); ++b) {
                        const CorpusRecord& rec = train.records[static_cast<size_t>(draws[b].idx)];
                        zts[b] = noise_latent(rec.latent, draws[b].t, draws[b].eps, noise);
                        ts[b] = draws[b].t;
                        std::copy(draws[b].eps.begin(), draws[b].eps.end(),
                                  eps_target.data() + b * static_cast<size_t>(kLatentDim));
                    }
                    Tensor eps_hat = model_.denoiser.forward_batched(zts, ts, cond, n_q);
                    loss = mse(eps_hat, eps_target);
                } else {
                    Tensor total;
                    for (size_t b = 0; b < draws.size(); ++b) {
                        const CorpusRecord& rec = train.records[static_cast<size_t>(draws[b].idx)];
                        Tensor sample_cond = slice_rows(cond, static_cast<int>(b) * n_q, n_q);
                        Tensor term = latent_regression_loss(model_.denoiser.direct_fn(), rec.latent, draws[b].t,
                                                             draws[b].eps, sample_cond, noise);
                        total = b == 0 ? term : add(total, term);
                    }
                    loss = scale(total, 1.0f / static_cast<float>(plan.batch_gen));
                }
                Tensor weighted = scale(loss, static_cast<float>(plan.gen_weight));
                weighted.backward();
                opt.step(model_.registry(), static_cast<float>(plan.lr * lr_scale));
                ++gen_step;
                last_gen = loss.item();
            } else {
                std::vector<int> idxs(static_cast<size_t>(plan.batch_itc));
                for (auto& idx : idxs) idx = static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
                std::vector<Tensor> img_parts, txt_parts;
                std::vector<int> img_sizes, txt_sizes;
                for (int idx : idxs) {
                    img_parts.push_back(cache.image[static_cast<size_t>(idx)]);
                    img_sizes.push_back(img_parts.back().dim(0));
                    txt_parts.push_back(cache.text_long[static_cast<size_t>(idx)]);
                    txt_sizes.push_back(txt_parts.back().dim(0));
                }
                const Tensor ds_img = model_.down.forward(concat_rows(img_parts));
                const Tensor ds_txt = model_.down.forward(concat_rows(txt_parts));
                const int n_qi = model_.queries.q_img.dim(0);
                const int n_qt = model_.queries.q_text.dim(0);
                Tensor bit_img = model_.bit.forward_batched(tile_rows(model_.queries.img(), plan.batch_itc),
                                                            std::vector<int>(idxs.size(), n_qi), ds_img, img_sizes);
                Tensor bit_txt = model_.bit.forward_batched(tile_rows(model_.queries.text(), plan.batch_itc),
                                                            std::vector<int>(idxs.size(), n_qt), ds_txt, txt_sizes);
                std::vector<Tensor> e_img, e_text;
                int img_off = 0, txt_off = 0;
                for (size_t b = 0; b < idxs.size(); ++b) {
                    Tensor ebit_i = attention_pool(slice_rows(bit_img, static_cast<int>(b) * n_qi, n_qi),
                                                   model_.fusion.pool_bit_img);
                    Tensor ellm_i =
                        attention_pool(slice_rows(ds_img, img_off, img_sizes[b]), model_.fusion.pool_llm_img);
                    e_img.push_back(reshape(fuse(ebit_i, ellm_i, model_.fusion.alpha_img), {1, cfg_.bit_d_bit}));
                    Tensor ebit_t = attention_pool(slice_rows(bit_txt, static_cast<int>(b) * n_qt, n_qt),
                                                   model_.fusion.pool_bit_text);
                    Tensor ellm_t =
                        attention_pool(slice_rows(ds_txt, txt_off, txt_sizes[b]), model_.fusion.pool_llm_text);
                    e_text.push_back(reshape(fuse(ebit_t, ellm_t, model_.fusion.alpha_text), {1, cfg_.bit_d_bit}));
                    img_off += img_sizes[b];
                    txt_off += txt_sizes[b];
                }
                Tensor loss = info_nce_loss(concat_rows(e_img), concat_rows(e_text), model_.fusion.tau());
                Tensor weighted = scale(loss, static_cast<float>(plan.itc_weight));
                weighted.backward();
                opt.step(model_.registry(), static_cast<float>(plan.lr * lr_scale));
                model_.fusion.clamp_tau();
                last_itc = loss.item();
            }

            const double loss_now = gen_batch ? *last_gen : *last_itc;
            if (step == start_step + 1) result.first_loss = loss_now;
            result.last_loss = loss_now;
            if (step % static_cast<uint64_t>(plan.log_interval) == 0 || step == static_cast<uint64_t>(plan.steps)) {
                MetricsRecord m;
                m.step = step;
                m.stage = 2;
                m.loss_gen = last_gen;
                m.loss_itc = last_itc;
                const double r_now = sched.ratio(static_cast<int>(std::min(gen_step, static_cast<uint64_t>(sched.total_steps))));
                m.r = r_now;
                m.beta = 1.0 - r_now;
                m.lr = plan.lr * lr_scale;
                m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                emit(m, metrics_file, result.metrics);
            }
        }

        if (backbone_checksum() != backbone_before) {
            fail(ErrKind::numeric, "run_stage2: frozen backbone parameters changed");
        }
        result.final_step = static_cast<uint64_t>(plan.steps);
        if (!checkpoint_out.empty()) {
            CheckpointMeta meta;
            meta.config_fingerprint = config_fingerprint(cfg_);
            meta.stage = 2;
            meta.step = result.final_step;
            meta.gen_step = gen_step;
            meta.rng_key = rng.key();
            meta.rng_counter = rng.counter();
            meta.opt_step = opt.step_count();
            save_checkpoint(checkpoint_out, model_.registry(), opt, meta);
        }
        return result;
    }

    static bool is_gen_batch(const StagePlan& plan, uint64_t step) {
        if (plan.gen_weight <= 0.0) return false;
        if (plan.itc_weight <= 0.0) return true;
        return step % 2 == 1;  // alternation starts with a generation batch
    }

    static int count_gen_batches(const StagePlan& plan) {
        int count = 0;
        for (uint64_t s = 1; s <= static_cast<uint64_t>(plan.steps); ++s) count += is_gen_batch(plan, s) ? 1 : 0;
        return std::max(count, 1);
    }

    uint64_t backbone_checksum() const { return model_.group_checksum(Model::is_backbone_param); }
    uint64_t alignment_checksum() const { return model_.group_checksum(Model::is_alignment_param); }

private:
    void check_corpus(const Corpus& corpus) const {
        if (corpus.featurizer_seed != cfg_.data_featurizer_seed) {
            fail(ErrKind::compat, "trainer: corpus featurizer seed does not match the configuration");
        }
    }

    std::ofstream open_metrics(const std::string& path) {
        std::ofstream f;
        if (!path.empty()) {
            f.open(path, std::ios::trunc);
            if (!f) fail(ErrKind::io, "trainer: cannot open metrics file '" + path + "'");
        }
        return f;
    }

    void emit(const MetricsRecord& m, std::ofstream& file, std::vector<MetricsRecord>& sink) {
        sink.push_back(m);
        if (file.is_open()) file << metrics_file_line(m) << '\n';
        std::fprintf(stderr, "%s\n", metrics_console_line(m).c_str());
    }

    Model& model_;
    Config cfg_;
};

}  // namespace obrg
