#ifndef VIDCOUNT_COMMANDS_HPP
#define VIDCOUNT_COMMANDS_HPP

#include <string>
#include <vector>

#include "vidcount/train.hpp"

namespace vidcount {

// dataset directory layout:
//   <dir>/manifest.json
//   <dir>/<sequence_id>/annotations.json
//   <dir>/<sequence_id>/frame_%06d.ppm

struct GenerateResult {
    std::vector<std::string> sequence_ids;
    DatasetSplit splits;
};

GenerateResult cmd_generate(const RunConfig& cfg, const std::string& out_dir,
                            bool dump_density = false);

Dataset load_dataset(const std::string& dir);

struct TrainResult {
    std::vector<StepLog> log;
    std::string checkpoint_path;
    std::string log_path;
};

TrainResult cmd_train(const RunConfig& cfg, const std::string& resume_path = "");

struct EvalOutput {
    MetricsReport report;
    std::string csv;
    std::string csv_path;
};

EvalOutput cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path,
                    const std::string& split_name);

struct PredictOutput {
    std::vector<int> counts;
    std::string json_path;
};

PredictOutput cmd_predict(const RunConfig& cfg, const std::string& checkpoint_path,
                          const std::string& sequence_dir, const std::string& out_dir);

struct AblateRow {
    std::string mode;
    int frames = 0;
    MetricsReport report;
    double wall_seconds = 0;
};

struct AblateResult {
    std::vector<AblateRow> rows;
    std::string csv;
    std::string csv_path;
};

AblateResult cmd_ablate(const RunConfig& cfg);

}  // namespace vidcount

#endif
