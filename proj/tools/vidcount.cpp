#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "vidcount/commands.hpp"

using namespace vidcount;

namespace {

struct CommonArgs {
    std::string config_path;
    int64_t seed = -1;
    std::string out_dir;
};

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg = args.config_path.empty() ? parse_run_config("[train]\nsteps = 600\n")
                                             : load_run_config(args.config_path);
    if (args.seed >= 0) cfg.seed = uint64_t(args.seed);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
    auto* opt = cmd->add_option("--config", args.config_path, "run configuration file");
    if (config_required) opt->required();
    cmd->add_option("--seed", args.seed, "seed override");
    cmd->add_option("--out", args.out_dir, "output directory override");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"video object counting: dataset synthesis, training, evaluation"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, predict_args, ablate_args;
    bool dump_density = false;
    std::string resume_path, eval_checkpoint, eval_split = "test";
    std::string predict_checkpoint, predict_sequence;

    CLI::App* gen = app.add_subcommand("generate", "synthesize a dataset with ground truth");
    add_common(gen, gen_args, true);
    gen->add_flag("--dump-density", dump_density, "also export first-frame density PGMs");

    CLI::App* train = app.add_subcommand("train", "train a model on a generated dataset");
    add_common(train, train_args, true);
    train->add_option("--resume", resume_path, "checkpoint to resume from");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval, eval_args, true);
    eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
    eval->add_option("--split", eval_split, "train, val or test");

    CLI::App* predict = app.add_subcommand("predict", "render predictions for a sequence");
    add_common(predict, predict_args, false);
    predict->add_option("--checkpoint", predict_checkpoint, "checkpoint file")->required();
    predict->add_option("--sequence", predict_sequence, "sequence directory")->required();

    CLI::App* ablate = app.add_subcommand("ablate", "train/eval the query-mode x frames grid");
    add_common(ablate, ablate_args, true);

    try {
        app.parse(argc, argv);
        if (gen->parsed()) {
            RunConfig cfg = resolve_config(gen_args);
            GenerateResult result = cmd_generate(cfg, cfg.out_dir, dump_density);
            printf("generated %zu sequences (train %zu, val %zu, test %zu) in %s\n",
                   result.sequence_ids.size(), result.splits.train.size(),
                   result.splits.val.size(), result.splits.test.size(), cfg.out_dir.c_str());
        } else if (train->parsed()) {
            RunConfig cfg = resolve_config(train_args);
            TrainResult result = cmd_train(cfg, resume_path);
            if (!result.log.empty()) {
                const StepLog& last = result.log.back();
                printf("trained %zu steps, final total loss %.6f\n", result.log.size(), last.total);
            }
            printf("checkpoint: %s\nlog: %s\n", result.checkpoint_path.c_str(),
                   result.log_path.c_str());
        } else if (eval->parsed()) {
            RunConfig cfg = resolve_config(eval_args);
            EvalOutput result = cmd_eval(cfg, eval_checkpoint, eval_split);
            printf("%s\n", render_report(result.report).c_str());
            printf("csv: %s\n", result.csv_path.c_str());
        } else if (predict->parsed()) {
            RunConfig cfg = resolve_config(predict_args);
            PredictOutput result = cmd_predict(cfg, predict_checkpoint, predict_sequence,
                                               cfg.out_dir);
            printf("predicted %zu frames, points: %s\n", result.counts.size(),
                   result.json_path.c_str());
        } else if (ablate->parsed()) {
            RunConfig cfg = resolve_config(ablate_args);
            AblateResult result = cmd_ablate(cfg);
            printf("%s", result.csv.c_str());
            printf("csv: %s\n", result.csv_path.c_str());
        }
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        fprintf(stderr, "vidcount: config-error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        fprintf(stderr, "vidcount: config-error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        fprintf(stderr, "vidcount: data-error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        fprintf(stderr, "vidcount: numeric-error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        fprintf(stderr, "vidcount: error: %s\n", e.what());
        return 1;
    }
    return 0;
}
