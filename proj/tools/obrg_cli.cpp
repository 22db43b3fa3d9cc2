// Command-line front end: corpus generation, two-stage training, evaluation,
// and the invariant verification suites.

#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "obrg/checkpoint.hpp"
#include "obrg/config.hpp"
#include "obrg/dataset.hpp"
#include "obrg/eval.hpp"
#include "obrg/model.hpp"
#include "obrg/trainer.hpp"
#include "obrg/verify.hpp"

namespace {

using namespace obrg;

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrKind::config:
        case ErrKind::parse:
            return kExitUsage;
        case ErrKind::io:
        case ErrKind::corruption:
        case ErrKind::compat:
            return kExitIo;
        default:
            return kExitVerifyFailure;
    }
}

Config load_cli_config(const std::string& path) {
    Config cfg;
    if (!path.empty()) cfg = load_config(path);
    return cfg;
}

void print_effective_config(const Config& cfg) {
    std::printf("# effective configuration\n%s# end configuration\n", dump_config(cfg).c_str());
    std::fflush(stdout);
}

std::string train_path(const std::string& prefix) { return prefix + ".train.jsonl"; }
std::string test_path(const std::string& prefix) { return prefix + ".test.jsonl"; }

int cmd_gen_data(const std::string& config_path, uint64_t seed, bool seed_set, int n_train, int n_test,
                 const std::string& out_prefix) {
    Config cfg = load_cli_config(config_path);
    if (seed_set) cfg.seeds_root = seed;
    if (n_train >= 0) cfg.data_n_train = n_train;
    if (n_test >= 0) cfg.data_n_test = n_test;
    print_effective_config(cfg);

    auto [train, test] = make_corpora(cfg.seeds_root, cfg.data_n_train, cfg.data_n_test, cfg.data_featurizer_seed);
    write_corpus(train_path(out_prefix), train);
    write_corpus(test_path(out_prefix), test);
    std::printf("wrote %s (%zu records) checksum=%08x\n", train_path(out_prefix).c_str(), train.records.size(),
                file_crc32(train_path(out_prefix)));
    std::printf("wrote %s (%zu records) checksum=%08x\n", test_path(out_prefix).c_str(), test.records.size(),
                file_crc32(test_path(out_prefix)));
    return kExitOk;
}

int cmd_train(const std::string& config_path, int stage, const std::string& data_prefix, const std::string& out,
              const std::string& resume, const std::string& backbone_ckpt, bool random_backbone) {
    const Config cfg = load_cli_config(config_path);
    print_effective_config(cfg);

    const Corpus train = read_corpus(train_path(data_prefix));
    Model model;
    model.init(cfg);
    Trainer trainer(model, cfg);
    const std::string metrics_path = out + ".metrics";

    if (stage == 1) {
        const StageResult r = trainer.run_stage1(train, stage1_plan(cfg), out, metrics_path, resume);
        std::printf("stage 1 done: steps=%llu first_loss=%.6f last_loss=%.6f checkpoint=%s\n",
                    static_cast<unsigned long long>(r.final_step), r.first_loss, r.last_loss, out.c_str());
        return kExitOk;
    }

    if (resume.empty()) {
        if (backbone_ckpt.empty() && !random_backbone) {
            fail(ErrKind::config,
                 "train: stage 2 requires a stage-1 checkpoint via --backbone, or --random-backbone for the "
                 "ablation baseline");
        }
        if (!backbone_ckpt.empty()) {
            model.set_stage_freeze(1);
            Adam scratch;
            const CheckpointMeta meta =
                load_checkpoint(backbone_ckpt, model.registry(), scratch, config_fingerprint(cfg));
            if (meta.stage != 1) fail(ErrKind::compat, "train: --backbone expects a stage-1 checkpoint");
        }
    }
    const StageResult r = trainer.run_stage2(train, stage2_plan(cfg), out, metrics_path, resume);
    std::printf("stage 2 done: steps=%llu last_loss=%.6f checkpoint=%s\n",
                static_cast<unsigned long long>(r.final_step), r.last_loss, out.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& config_path, const std::string& task, const std::string& checkpoint,
             const std::string& data_prefix, const std::string& mode, const std::string& out) {
    const Config cfg = load_cli_config(config_path);
    print_effective_config(cfg);

    const Corpus test = read_corpus(test_path(data_prefix));
    Model model;
    model.init(cfg);
    if (!checkpoint.empty()) {
        Adam scratch;
        load_checkpoint(checkpoint, model.registry(), scratch, config_fingerprint(cfg));
    }

    nlohmann::json report;
    if (task == "retrieval") {
        const RetrievalReport r = eval_retrieval(model, test);
        report = {{"task", "retrieval"},
                  {"n", r.n},
                  {"image_to_text", {{"r1", r.i2t_r1}, {"r5", r.i2t_r5}, {"r10", r.i2t_r10}}},
                  {"text_to_image", {{"r1", r.t2i_r1}, {"r5", r.t2i_r5}, {"r10", r.t2i_r10}}},
                  {"text_to_text", {{"r1", r.t2t_r1}, {"r5", r.t2t_r5}, {"r10", r.t2t_r10}}}};
    } else if (task == "generation") {
        ConditionMode cm = ConditionMode::text;
        if (mode == "query_only") {
            cm = ConditionMode::query_only;
        } else if (!mode.empty() && mode != "text") {
            fail(ErrKind::config, "eval: --mode must be text or query_only");
        }
        const GenerationReport r = eval_generation(model, test, cm, cfg.seeds_root);
        report = {{"task", "generation"},     {"mode", r.mode},         {"colors", r.colors},
                  {"shapes", r.shapes},       {"counting", r.counting}, {"position", r.position},
                  {"overall", r.overall},     {"n_samples", r.n_samples}, {"seed", r.seed}};
    } else if (task == "caption") {
        const CaptionReport r = eval_caption(model, test);
        report = {{"task", "caption"}, {"exact_scene", r.exact_scene}, {"parse_rate", r.parse_rate}, {"n", r.n}};
    } else {
        fail(ErrKind::config, "eval: --task must be retrieval, generation, or caption");
    }

    const std::string line = report.dump();
    std::printf("%s\n", line.c_str());
    if (!out.empty()) {
        std::ofstream f(out, std::ios::trunc);
        if (!f) fail(ErrKind::io, "eval: cannot open '" + out + "'");
        f << line << '\n';
    }
    return kExitOk;
}

int cmd_verify(const std::string& suite) {
    const VerifySuiteResult r = run_verify_suite(suite);
    int failed = 0;
    for (const auto& c : r.checks) {
        std::printf("[%s] %s.%s: %s\n", c.pass ? "PASS" : "FAIL", r.suite.c_str(), c.name.c_str(), c.detail.c_str());
        failed += c.pass ? 0 : 1;
    }
    std::printf("suite=%s checks=%zu failed=%d\n", r.suite.c_str(), r.checks.size(), failed);
    return failed == 0 ? kExitOk : kExitVerifyFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal alignment lab: captioning, contrastive retrieval, and conditional latent diffusion "
                 "over a synthetic scene corpus"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "configuration file (key = value lines)");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
    uint64_t seed = 0;
    int n_train = -1, n_test = -1;
    std::string gen_out = "corpus";
    auto* seed_opt = gen->add_option("--seed", seed, "corpus seed (defaults to seeds.root)");
    gen->add_option("--n-train", n_train, "training records (default data.n_train)");
    gen->add_option("--n-test", n_test, "held-out records (default data.n_test)");
    gen->add_option("--out", gen_out, "output path prefix")->capture_default_str();

    auto* train = app.add_subcommand("train", "run one training stage");
    int stage = 0;
    std::string data_prefix = "corpus", train_out, resume, backbone_ckpt;
    bool random_backbone = false;
    train->add_option("--stage", stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
    train->add_option("--data", data_prefix, "corpus path prefix")->capture_default_str();
    train->add_option("--out", train_out, "checkpoint output path");
    train->add_option("--resume", resume, "resume from a checkpoint of the same stage");
    train->add_option("--backbone", backbone_ckpt, "stage-1 checkpoint to freeze (stage 2)");
    train->add_flag("--random-backbone", random_backbone, "stage 2 over an untrained backbone (ablation)");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string task, eval_ckpt, eval_mode, eval_out;
    eval->add_option("--task", task, "retrieval, generation, or caption")->required();
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate (untrained model if omitted)");
    eval->add_option("--data", data_prefix, "corpus path prefix")->capture_default_str();
    eval->add_option("--mode", eval_mode, "generation conditioning: text or query_only");
    eval->add_option("--out", eval_out, "also write the report to this file");

    auto* verify = app.add_subcommand("verify", "run an invariant suite");
    std::string suite;
    verify->add_option("--suite", suite, "grad, freeze, schedule, or oracle")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_data(config_path, seed, seed_opt->count() > 0, n_train, n_test, gen_out);
        }
        if (train->parsed()) {
            if (train_out.empty()) train_out = "checkpoint.stage" + std::to_string(stage) + ".obrg";
            return cmd_train(config_path, stage, data_prefix, train_out, resume, backbone_ckpt, random_backbone);
        }
        if (eval->parsed()) {
            return cmd_eval(config_path, task, eval_ckpt, data_prefix, eval_mode, eval_out);
        }
        if (verify->parsed()) {
            return cmd_verify(suite);
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error (%s): %s\n", err_kind_name(e.kind()), e.what());
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitVerifyFailure;
    }
    return kExitUsage;
}
