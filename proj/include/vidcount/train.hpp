#ifndef VIDCOUNT_TRAIN_HPP
#define VIDCOUNT_TRAIN_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vidcount/common.hpp"
#include "vidcount/data.hpp"
#include "vidcount/matchloss.hpp"
#include "vidcount/metrics.hpp"
#include "vidcount/model.hpp"

namespace vidcount {

struct OptimSettings {
    double step_size = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct GenerateConfig {
    int num_sequences = 35;
    int frame_height = 64;
    int frame_width = 64;
    int num_frames = 30;
    double fps = 25.0;
    int count_min = 2;
    int count_max = 5;
    double radius_min = 2.0;
    double radius_max = 4.0;
    double blend = 1.0;
    double max_speed = 1.5;
    int split_train = 25;
    int split_val = 3;
    int split_test = 7;
};

struct RunConfig {
    ModelConfig model;
    OptimSettings optim;
    GenerateConfig generate;
    LossWeights loss;
    MatchWeights match;
    InferenceConfig infer;
    int epochs = 0;   // used when steps == 0: one epoch ~ one pass over the training frames
    int steps = 600;  // explicit step count wins over epochs
    int batch_clips = 2;
    int checkpoint_interval = 200;
    uint64_t seed = 1;
    std::string dataset_dir;
    std::string out_dir = ".";
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

struct StepLog {
    int64_t step = 0;
    double l_cls = 0;
    double l_loc = 0;
    double l_dm = 0;
    double total = 0;
};

std::string train_log_csv(const std::vector<StepLog>& log);

struct Dataset {
    std::vector<EvalSequence> train;
    std::vector<EvalSequence> val;
    std::vector<EvalSequence> test;

    const std::vector<EvalSequence>& split(const std::string& name) const;
};

// Single-threaded, fully seeded optimizer loop. The step-k sampling stream
// is derived from (seed, k), so resuming from a checkpoint continues the
// exact run.
class Trainer {
public:
    Trainer(const RunConfig& cfg, const Dataset& data);
    Trainer(const RunConfig& cfg, const Dataset& data, const Checkpoint& resume);

    StepLog step();
    int64_t current_step() const { return step_; }
    int64_t total_steps() const;
    const ParamStore& params() const { return params_; }
    void save(const std::string& path) const;

private:
    const RunConfig cfg_;
    const Dataset& data_;
    ParamStore params_;
    std::map<std::string, std::vector<double>> adam_m_, adam_v_;
    int64_t step_ = 0;
    Tape tape_;
};

}  // namespace vidcount

#endif
