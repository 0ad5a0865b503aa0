#ifndef VIDCOUNT_TESTS_SUPPORT_HPP
#define VIDCOUNT_TESTS_SUPPORT_HPP

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "vidcount/common.hpp"
#include "vidcount/data.hpp"
#include "vidcount/matchloss.hpp"
#include "vidcount/model.hpp"

namespace vidcount::testsupport {

inline ModelConfig miniature_config() {
    ModelConfig cfg;
    cfg.crop_size = 16;
    cfg.downsample_factor = 8;
    cfg.backbone_channels = {4, 6, 8};
    cfg.token_dim = 8;
    cfg.density_dim = 8;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.heads = 2;
    cfg.num_queries = 4;
    cfg.frames = 2;
    cfg.query_mode = QueryMode::kConcat;
    cfg.sigma = 2.0;
    return cfg;
}

struct MiniPipeline {
    ModelConfig cfg;
    ParamStore params;
    std::vector<Tensor> clip;
    std::vector<Tensor> density_targets;
    std::vector<Point2> gts;  // normalized
    LossWeights loss_weights;
    MatchWeights match_weights;
};

inline std::vector<Tensor> random_clip(const ModelConfig& cfg, Rng& rng) {
    std::vector<Tensor> clip;
    for (int t = 0; t < cfg.frames; ++t) {
        Tensor frame = Tensor::zeros({cfg.crop_size, cfg.crop_size, 3});
        for (double& v : frame.values) v = rng.uniform(0.0, 1.0);
        clip.push_back(std::move(frame));
    }
    return clip;
}

inline MiniPipeline make_mini_pipeline(uint64_t seed, ModelConfig cfg = miniature_config()) {
    MiniPipeline p;
    p.cfg = cfg;
    p.params = init_params(cfg, seed);
    Rng rng(mix_seed(seed, 0xDA7A));
    p.clip = random_clip(cfg, rng);
    for (int t = 0; t < cfg.frames; ++t) {
        std::vector<Point2> pts;
        const int n = rng.uniform_int(1, 3);
        for (int i = 0; i < n; ++i) {
            pts.push_back({rng.uniform(1.0, cfg.crop_size - 1.0),
                           rng.uniform(1.0, cfg.crop_size - 1.0)});
        }
        PseudoDensityMap m = generate_pseudo_density(pts, cfg.crop_size, cfg.crop_size, cfg.sigma);
        p.density_targets.push_back(
            Tensor({cfg.crop_size, cfg.crop_size, 1}, std::vector<double>(m.grid)));
        if (t == cfg.ref_frame()) {
            for (const Point2& pt : pts) {
                p.gts.push_back({pt.x / cfg.crop_size, pt.y / cfg.crop_size});
            }
        }
    }
    return p;
}

// full model loss: forward, match on detached predictions, Eq-style combination
inline Tensor pipeline_loss(const ParamStore& params, const MiniPipeline& p) {
    ModelOutput out = model_forward(p.clip, params, p.cfg);
    const std::vector<PointPrediction> preds = to_predictions(out);
    const CostMatrix cost = build_cost_matrix(preds, p.gts, p.match_weights);
    const Assignment assignment = hungarian(cost);
    const Tensor cls = focal_cls_loss(out.confidence, assignment, p.loss_weights.focal_alpha,
                                      p.loss_weights.focal_gamma);
    const Tensor loc = point_l1_loss(out.coords, p.gts, assignment);
    const Tensor dm = density_loss(out.densities, p.density_targets);
    return total_loss(cls, loc, dm, p.loss_weights);
}

// max relative error of the backpropagated gradient of the full loss with
// respect to one named parameter tensor
inline double param_gradient_error(const MiniPipeline& p, const std::string& name,
                                   double epsilon = 1e-4) {
    ParamStore working = p.params;
    auto f = [&](const Tensor& t) {
        working.at(name) = t;
        return pipeline_loss(working, p);
    };
    return finite_difference_check(f, p.params.at(name), epsilon);
}

// Central differences have two failure modes unrelated to gradient bugs:
// large steps straddle relu kinks, tiny steps drown near-zero coordinates
// in round-off over the 1e-8 denominator floor. A genuine backward bug
// shows up at every step size, so the check takes the best error across a
// ladder of steps.
inline double robust_param_gradient_error(const MiniPipeline& p, const std::string& name) {
    double best = std::numeric_limits<double>::infinity();
    for (double eps : {1e-3, 3e-4, 1e-4, 1e-5, 3e-6, 1e-6, 1e-7}) {
        best = std::min(best, param_gradient_error(p, name, eps));
        if (best < 1e-5) break;
    }
    return best;
}

}  // namespace vidcount::testsupport

#endif
