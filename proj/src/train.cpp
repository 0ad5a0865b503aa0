#include "vidcount/train.hpp"

#include <algorithm>
#include <cmath>

namespace vidcount {

const std::vector<EvalSequence>& Dataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

Trainer::Trainer(const RunConfig& cfg, const Dataset& data)
    : cfg_(cfg), data_(data), params_(init_params(cfg.model, cfg.seed)) {
    if (data_.train.empty()) throw DataError("training split is empty");
}

Trainer::Trainer(const RunConfig& cfg, const Dataset& data, const Checkpoint& resume)
    : cfg_(cfg), data_(data) {
    if (data_.train.empty()) throw DataError("training split is empty");
    params_ = resume.params;
    params_.detach_all();
    for (const std::string& name : params_.names()) {
        const std::vector<double>* m = resume.find_extra("adam.m." + name);
        const std::vector<double>* v = resume.find_extra("adam.v." + name);
        if (m) adam_m_[name] = *m;
        if (v) adam_v_[name] = *v;
    }
    if (const std::vector<double>* s = resume.find_extra("trainer.step")) {
        step_ = int64_t((*s)[0]);
    }
}

int64_t Trainer::total_steps() const {
    if (cfg_.steps > 0) return cfg_.steps;
    int64_t train_frames = 0;
    for (const EvalSequence& s : data_.train) train_frames += int64_t(s.frames.frames.size());
    const int64_t steps_per_epoch = std::max<int64_t>(1, train_frames / cfg_.batch_clips);
    return steps_per_epoch * cfg_.epochs;
}

namespace {

struct ClipSample {
    std::vector<Tensor> frames;
    std::vector<Tensor> density_targets;
    std::vector<Point2> gts;  // normalized to the crop window
};

std::vector<double> crop_window(const Frame& frame, int frame_width, int x0, int y0, int size) {
    std::vector<double> out(size_t(size) * size * 3);
    for (int y = 0; y < size; ++y) {
        const double* src = &frame.pixels[(size_t(y0 + y) * frame_width + x0) * 3];
        std::copy(src, src + size_t(size) * 3, &out[size_t(y) * size * 3]);
    }
    return out;
}

ClipSample sample_clip(const Dataset& data, const RunConfig& cfg, Rng& rng) {
    const ModelConfig& mc = cfg.model;
    const EvalSequence& seq = data.train[size_t(rng.uniform_int(0, int(data.train.size()) - 1))];
    const int n = int(seq.frames.frames.size());
    if (n < mc.frames) {
        throw DataError(strformat("sequence %s has %d frames, need at least %d",
                                  seq.frames.sequence_id.c_str(), n, mc.frames));
    }
    if (seq.frames.width < mc.crop_size || seq.frames.height < mc.crop_size) {
        throw DataError(strformat("sequence %s frames smaller than the %d-px training crop",
                                  seq.frames.sequence_id.c_str(), mc.crop_size));
    }
    const int start = rng.uniform_int(0, n - mc.frames);
    const int x0 = rng.uniform_int(0, seq.frames.width - mc.crop_size);
    const int y0 = rng.uniform_int(0, seq.frames.height - mc.crop_size);

    ClipSample clip;
    for (int t = 0; t < mc.frames; ++t) {
        const Frame& frame = seq.frames.frames[size_t(start + t)];
        clip.frames.push_back(Tensor({mc.crop_size, mc.crop_size, 3},
                                     crop_window(frame, seq.frames.width, x0, y0, mc.crop_size)));
        std::vector<Point2> window_points;
        for (const Point2& p : seq.points.frames[size_t(start + t)]) {
            const double lx = p.x - x0, ly = p.y - y0;
            if (lx >= 0 && lx < mc.crop_size && ly >= 0 && ly < mc.crop_size) {
                window_points.push_back({lx, ly});
            }
        }
        PseudoDensityMap dm =
            generate_pseudo_density(window_points, mc.crop_size, mc.crop_size, mc.sigma);
        clip.density_targets.push_back(
            Tensor({mc.crop_size, mc.crop_size, 1}, std::move(dm.grid)));
        if (t == mc.ref_frame()) {
            for (const Point2& p : window_points) {
                clip.gts.push_back({p.x / mc.crop_size, p.y / mc.crop_size});
            }
        }
    }
    return clip;
}

}  // namespace

StepLog Trainer::step() {
    tape_.reset();
    TapeScope scope(tape_);
    params_.watch_all();
    Rng rng(mix_seed(cfg_.seed, 0x57E9000ULL + uint64_t(step_)));

    Tensor cls_sum = Tensor::scalar(0.0);
    Tensor loc_sum = Tensor::scalar(0.0);
    std::vector<Tensor> all_maps, all_targets;
    for (int b = 0; b < cfg_.batch_clips; ++b) {
        ClipSample clip = sample_clip(data_, cfg_, rng);
        ModelOutput out = model_forward(clip.frames, params_, cfg_.model);
        const std::vector<PointPrediction> preds = to_predictions(out);
        if (int(clip.gts.size()) > cfg_.model.num_queries) {
            fprintf(stderr, "warning: %zu ground-truth points exceed %d queries; extras unmatched\n",
                    clip.gts.size(), cfg_.model.num_queries);
        }
        const CostMatrix cost = build_cost_matrix(preds, clip.gts, cfg_.match);
        const Assignment assignment = hungarian(cost);
        cls_sum = add(cls_sum, focal_cls_loss(out.confidence, assignment, cfg_.loss.focal_alpha,
                                              cfg_.loss.focal_gamma));
        loc_sum = add(loc_sum, point_l1_loss(out.coords, clip.gts, assignment));
        for (size_t t = 0; t < out.densities.size(); ++t) {
            all_maps.push_back(out.densities[t]);
            all_targets.push_back(clip.density_targets[t]);
        }
    }
    const Tensor cls = scale(cls_sum, 1.0 / cfg_.batch_clips);
    const Tensor loc = scale(loc_sum, 1.0 / cfg_.batch_clips);
    const Tensor dm = density_loss(all_maps, all_targets);
    const Tensor total = total_loss(cls, loc, dm, cfg_.loss);
    if (!std::isfinite(total.item())) {
        throw NumericError(strformat("non-finite loss at step %lld", (long long)step_));
    }

    GradientMap grads = backpropagate(total);

    const OptimSettings& opt = cfg_.optim;
    const double t = double(step_ + 1);
    const double bias1 = 1.0 - std::pow(opt.beta1, t);
    const double bias2 = 1.0 - std::pow(opt.beta2, t);
    for (const std::string& name : params_.names()) {
        Tensor& p = params_.at(name);
        if (p.node < 0 || !grads.contains(p.node)) continue;
        const std::vector<double>& g = grads.at(p.node);
        std::vector<double>& m = adam_m_[name];
        std::vector<double>& v = adam_v_[name];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        for (size_t i = 0; i < g.size(); ++i) {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            const double mhat = m[i] / bias1;
            const double vhat = v[i] / bias2;
            p.values[i] -= opt.step_size * mhat / (std::sqrt(vhat) + opt.eps);
        }
    }
    params_.detach_all();

    StepLog log;
    log.step = step_;
    log.l_cls = cls.item();
    log.l_loc = loc.item();
    log.l_dm = dm.item();
    log.total = total.item();
    ++step_;
    return log;
}

void Trainer::save(const std::string& path) const {
    std::vector<std::pair<std::string, std::vector<double>>> extras;
    extras.push_back({"trainer.step", {double(step_)}});
    for (const auto& [name, m] : adam_m_) extras.push_back({"adam.m." + name, m});
    for (const auto& [name, v] : adam_v_) extras.push_back({"adam.v." + name, v});
    save_checkpoint(path, cfg_.model, params_, extras);
}

}  // namespace vidcount
