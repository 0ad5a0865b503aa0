#include "vidcount/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace vidcount {

std::vector<PointPrediction> filter_by_threshold(const std::vector<PointPrediction>& preds,
                                                 double threshold) {
    if (threshold < 0 || threshold > 1) {
        throw ConfigError(strformat("confidence threshold %g outside [0,1]", threshold));
    }
    std::vector<PointPrediction> kept;
    for (const PointPrediction& p : preds) {
        if (p.confidence > threshold) kept.push_back(p);
    }
    return kept;
}

std::vector<Point2> stitch_patch_predictions(const std::vector<std::vector<PointPrediction>>& per_patch,
                                             const PatchGrid& grid) {
    if (per_patch.size() != grid.cells.size()) {
        throw DataError(strformat(
            "stitch_patch_predictions: %zu prediction lists for %zu patches", per_patch.size(),
            grid.cells.size()));
    }
    std::vector<Point2> kept;
    for (size_t c = 0; c < grid.cells.size(); ++c) {
        const PatchGrid::Cell& cell = grid.cells[c];
        for (const PointPrediction& p : per_patch[c]) {
            const double gx = cell.x0 + p.x * grid.patch_size;
            const double gy = cell.y0 + p.y * grid.patch_size;
            if (gx >= cell.own_x0 && gx < cell.own_x1 && gy >= cell.own_y0 && gy < cell.own_y1) {
                kept.push_back(Point2{gx, gy});
            }
        }
    }
    return kept;
}

MetricsReport compute_metrics(const std::vector<int>& pred_counts,
                              const std::vector<int>& gt_counts) {
    if (pred_counts.empty() || pred_counts.size() != gt_counts.size()) {
        throw DataError("compute_metrics: count lists must be non-empty and equal length");
    }
    MetricsReport r;
    r.n_frames = int(pred_counts.size());
    double abs_sum = 0, sq_sum = 0, nae_sum = 0;
    for (size_t i = 0; i < pred_counts.size(); ++i) {
        const int p = pred_counts[i], g = gt_counts[i];
        if (p < 0 || g < 0) throw DataError("compute_metrics: counts must be non-negative");
        const double err = std::fabs(double(p) - double(g));
        abs_sum += err;
        sq_sum += err * err;
        if (g > 0) {
            nae_sum += err / double(g);
            ++r.n_frames_nae;
        }
    }
    r.mae = abs_sum / r.n_frames;
    r.mse = std::sqrt(sq_sum / r.n_frames);
    r.nae = r.n_frames_nae > 0 ? nae_sum / r.n_frames_nae : 0.0;
    return r;
}

std::string render_report(const MetricsReport& report) {
    return strformat("MAE %.3f MSE %.3f NAE %.3f", report.mae, report.mse, report.nae);
}

namespace {

std::vector<double> crop_window(const Frame& frame, int frame_width, int x0, int y0, int size) {
    std::vector<double> out(size_t(size) * size * 3);
    for (int y = 0; y < size; ++y) {
        const double* src = &frame.pixels[(size_t(y0 + y) * frame_width + x0) * 3];
        std::copy(src, src + size_t(size) * 3, &out[size_t(y) * size * 3]);
    }
    return out;
}

}  // namespace

std::vector<Point2> predict_frame_points(const ParamStore& params, const ModelConfig& cfg,
                                         const InferenceConfig& infer, const FrameSequence& seq,
                                         int frame_index) {
    const int patch = infer.resolve_patch(cfg);
    if (patch != cfg.crop_size) {
        throw ConfigError(strformat("inference patch size %d must equal the training crop %d",
                                    patch, cfg.crop_size));
    }
    if (seq.width < patch || seq.height < patch) {
        throw DataError(strformat("sequence %s frames (%dx%d) smaller than the %d-px patch",
                                  seq.sequence_id.c_str(), seq.width, seq.height, patch));
    }
    const PatchGrid grid = crop_patches(seq.height, seq.width, patch);
    const int n = int(seq.frames.size());
    const int ref = cfg.ref_frame();
    std::vector<std::vector<PointPrediction>> per_patch;
    for (const PatchGrid::Cell& cell : grid.cells) {
        std::vector<Tensor> clip;
        for (int t = 0; t < cfg.frames; ++t) {
            // same spatial window across the clip; edge frames repeat at
            // the sequence boundaries
            const int idx = std::clamp(frame_index - ref + t, 0, n - 1);
            clip.push_back(Tensor({patch, patch, 3},
                                  crop_window(seq.frames[size_t(idx)], seq.width, cell.x0,
                                              cell.y0, patch)));
        }
        const ModelOutput out = model_forward(clip, params, cfg);
        per_patch.push_back(filter_by_threshold(to_predictions(out), infer.threshold));
    }
    return stitch_patch_predictions(per_patch, grid);
}

EvalResult evaluate_split(const ParamStore& params, const ModelConfig& cfg,
                          const InferenceConfig& infer, const std::vector<EvalSequence>& split) {
    EvalResult result;
    std::vector<int> pred_counts, gt_counts;
    for (const EvalSequence& seq : split) {
        if (seq.points.frames.size() != seq.frames.frames.size()) {
            throw DataError("evaluate_split: annotation/frame count mismatch in sequence " +
                            seq.frames.sequence_id);
        }
        for (size_t e = 0; e < seq.frames.frames.size(); ++e) {
            const std::vector<Point2> points =
                predict_frame_points(params, cfg, infer, seq.frames, int(e));
            FrameResult row;
            row.sequence_id = seq.frames.sequence_id;
            row.frame_index = seq.frames.frames[e].index;
            row.gt_count = seq.points.count(int(e));
            row.pred_count = int(points.size());
            result.rows.push_back(row);
            pred_counts.push_back(row.pred_count);
            gt_counts.push_back(row.gt_count);
        }
    }
    result.report = compute_metrics(pred_counts, gt_counts);
    return result;
}

std::string frame_results_csv(const std::vector<FrameResult>& rows) {
    std::string out = "sequence_id,frame_index,gt_count,pred_count,abs_err\n";
    for (const FrameResult& r : rows) {
        out += strformat("%s,%d,%d,%d,%d\n", r.sequence_id.c_str(), r.frame_index, r.gt_count,
                         r.pred_count, std::abs(r.pred_count - r.gt_count));
    }
    return out;
}

}  // namespace vidcount
