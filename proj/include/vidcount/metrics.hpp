#ifndef VIDCOUNT_METRICS_HPP
#define VIDCOUNT_METRICS_HPP

#include <string>
#include <vector>

#include "vidcount/common.hpp"
#include "vidcount/data.hpp"
#include "vidcount/model.hpp"

namespace vidcount {

struct InferenceConfig {
    double threshold = 0.3;
    int patch_size = 0;  // 0 resolves to the model crop size

    int resolve_patch(const ModelConfig& cfg) const {
        return patch_size > 0 ? patch_size : cfg.crop_size;
    }
};

struct MetricsReport {
    double mae = 0;
    double mse = 0;  // root of the mean squared count error
    double nae = 0;
    int n_frames = 0;
    int n_frames_nae = 0;  // frames with nonzero ground truth
};

struct FrameResult {
    std::string sequence_id;
    int frame_index = 0;
    int gt_count = 0;
    int pred_count = 0;
};

struct EvalSequence {
    FrameSequence frames;
    PointAnnotationSet points;
};

struct EvalResult {
    MetricsReport report;
    std::vector<FrameResult> rows;
};

// keeps predictions with confidence strictly above the threshold
std::vector<PointPrediction> filter_by_threshold(const std::vector<PointPrediction>& preds,
                                                 double threshold);

// Maps per-patch normalized predictions to frame pixels and keeps each one
// only when it falls inside its source patch's ownership rectangle, so
// overlap regions are counted exactly once.
std::vector<Point2> stitch_patch_predictions(const std::vector<std::vector<PointPrediction>>& per_patch,
                                             const PatchGrid& grid);

MetricsReport compute_metrics(const std::vector<int>& pred_counts,
                              const std::vector<int>& gt_counts);

std::string render_report(const MetricsReport& report);

EvalResult evaluate_split(const ParamStore& params, const ModelConfig& cfg,
                          const InferenceConfig& infer, const std::vector<EvalSequence>& split);

// full frame-level prediction pipeline: patches -> model -> filter -> stitch
std::vector<Point2> predict_frame_points(const ParamStore& params, const ModelConfig& cfg,
                                         const InferenceConfig& infer, const FrameSequence& seq,
                                         int frame_index);

std::string frame_results_csv(const std::vector<FrameResult>& rows);

}  // namespace vidcount

#endif
