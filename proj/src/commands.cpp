#include "vidcount/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <memory>

#include <json.hpp>

namespace vidcount {

namespace fs = std::filesystem;

namespace {

std::string frame_filename(int index) { return strformat("frame_%06d.ppm", index); }

SyntheticSceneConfig scene_config(const RunConfig& cfg, int sequence_index) {
    SyntheticSceneConfig sc;
    sc.frame_height = cfg.generate.frame_height;
    sc.frame_width = cfg.generate.frame_width;
    sc.num_frames = cfg.generate.num_frames;
    sc.fps = cfg.generate.fps;
    sc.count_min = cfg.generate.count_min;
    sc.count_max = cfg.generate.count_max;
    sc.radius_min = cfg.generate.radius_min;
    sc.radius_max = cfg.generate.radius_max;
    sc.blend = cfg.generate.blend;
    sc.max_speed = cfg.generate.max_speed;
    // per-sequence stream so generation parallelizes without reordering
    sc.seed = cfg.seed ^ uint64_t(sequence_index);
    sc.sequence_id = strformat("seq_%03d", sequence_index);
    return sc;
}

}  // namespace

GenerateResult cmd_generate(const RunConfig& cfg, const std::string& out_dir, bool dump_density) {
    if (cfg.generate.num_sequences <= 0) throw ConfigError("num_sequences must be positive");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output directory " + out_dir + ": " + ec.message());

    GenerateResult result;
    for (int i = 0; i < cfg.generate.num_sequences; ++i) {
        const SyntheticSceneConfig sc = scene_config(cfg, i);
        auto [seq, points] = synthesize_sequence(sc);
        const fs::path seq_dir = fs::path(out_dir) / sc.sequence_id;
        fs::create_directories(seq_dir, ec);
        if (ec) throw DataError("cannot create " + seq_dir.string() + ": " + ec.message());
        for (const Frame& frame : seq.frames) {
            write_ppm((seq_dir / frame_filename(frame.index)).string(), seq.width, seq.height,
                      frame.pixels);
        }
        AnnotationFile ann;
        ann.sequence_id = sc.sequence_id;
        ann.fps = seq.fps;
        ann.width = seq.width;
        ann.height = seq.height;
        for (const Frame& frame : seq.frames) ann.frame_indices.push_back(frame.index);
        ann.points = points;
        write_text_file((seq_dir / "annotations.json").string(), save_annotations(ann));
        if (dump_density) {
            PseudoDensityMap dm = generate_pseudo_density(points.frames[0], seq.height, seq.width,
                                                          cfg.model.sigma);
            write_density_pgm((seq_dir / "density_000000.pgm").string(), dm);
        }
        result.sequence_ids.push_back(sc.sequence_id);
    }

    result.splits = split_dataset(result.sequence_ids, cfg.generate.split_train,
                                  cfg.generate.split_val, cfg.generate.split_test);
    nlohmann::json manifest;
    manifest["sequences"] = result.sequence_ids;
    manifest["splits"]["train"] = result.splits.train;
    manifest["splits"]["val"] = result.splits.val;
    manifest["splits"]["test"] = result.splits.test;
    write_text_file((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
    return result;
}

namespace {

EvalSequence load_sequence_dir(const std::string& dir) {
    const std::string ann_path = (fs::path(dir) / "annotations.json").string();
    AnnotationFile ann = load_annotations(read_text_file(ann_path));
    EvalSequence seq;
    seq.frames.sequence_id = ann.sequence_id;
    seq.frames.fps = ann.fps;
    seq.frames.width = ann.width;
    seq.frames.height = ann.height;
    seq.points = ann.points;
    for (int index : ann.frame_indices) {
        const std::string path = (fs::path(dir) / frame_filename(index)).string();
        PpmImage img = read_ppm(path);
        if (img.width != ann.width || img.height != ann.height) {
            throw DataError(strformat("%s: frame extent %dx%d does not match annotations %dx%d",
                                      path.c_str(), img.width, img.height, ann.width, ann.height));
        }
        Frame frame;
        frame.index = index;
        frame.pixels = std::move(img.pixels);
        seq.frames.frames.push_back(std::move(frame));
    }
    return seq;
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text_file(manifest_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(std::string("manifest parse error: ") + e.what());
    }
    Dataset data;
    try {
        for (const std::string name : {"train", "val", "test"}) {
            std::vector<EvalSequence>& dst = name == std::string("train") ? data.train
                                           : name == std::string("val") ? data.val
                                                                        : data.test;
            for (const auto& id : manifest.at("splits").at(name)) {
                dst.push_back(load_sequence_dir((fs::path(dir) / id.get<std::string>()).string()));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest field error: ") + e.what());
    }
    return data;
}

TrainResult cmd_train(const RunConfig& cfg, const std::string& resume_path) {
    if (cfg.dataset_dir.empty()) throw ConfigError("dataset_dir is not set");
    const Dataset data = load_dataset(cfg.dataset_dir);
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw DataError("cannot create output directory " + cfg.out_dir + ": " + ec.message());

    std::unique_ptr<Trainer> trainer;
    if (!resume_path.empty()) {
        const Checkpoint resume = load_checkpoint(resume_path);
        trainer = std::make_unique<Trainer>(cfg, data, resume);
    } else {
        trainer = std::make_unique<Trainer>(cfg, data);
    }

    TrainResult result;
    result.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.bin").string();
    result.log_path = (fs::path(cfg.out_dir) / "train_log.csv").string();
    const int64_t total = trainer->total_steps();
    while (trainer->current_step() < total) {
        result.log.push_back(trainer->step());
        if (cfg.checkpoint_interval > 0 &&
            trainer->current_step() % cfg.checkpoint_interval == 0) {
            trainer->save(result.checkpoint_path);
        }
    }
    trainer->save(result.checkpoint_path);
    write_text_file(result.log_path, train_log_csv(result.log));
    return result;
}

EvalOutput cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path,
                    const std::string& split_name) {
    if (cfg.dataset_dir.empty()) throw ConfigError("dataset_dir is not set");
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    const Dataset data = load_dataset(cfg.dataset_dir);
    const std::vector<EvalSequence>& split = data.split(split_name);
    if (split.empty()) throw DataError("split '" + split_name + "' is empty");

    EvalResult eval = evaluate_split(ckpt.params, ckpt.config, cfg.infer, split);
    EvalOutput out;
    out.report = eval.report;
    out.csv = frame_results_csv(eval.rows);
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw DataError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
    out.csv_path = (fs::path(cfg.out_dir) / ("eval_" + split_name + ".csv")).string();
    write_text_file(out.csv_path, out.csv);
    return out;
}

namespace {

void draw_cross(std::vector<double>& pixels, int width, int height, double px, double py) {
    const int cx = int(std::lround(px));
    const int cy = int(std::lround(py));
    const int offsets[5][2] = {{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}};
    for (const auto& off : offsets) {
        const int x = cx + off[0], y = cy + off[1];
        if (x < 0 || x >= width || y < 0 || y >= height) continue;
        double* p = &pixels[(size_t(y) * width + x) * 3];
        p[0] = 1.0;
        p[1] = 0.0;
        p[2] = 0.0;
    }
}

}  // namespace

PredictOutput cmd_predict(const RunConfig& cfg, const std::string& checkpoint_path,
                          const std::string& sequence_dir, const std::string& out_dir) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    EvalSequence seq = load_sequence_dir(sequence_dir);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create output directory " + out_dir + ": " + ec.message());

    PredictOutput out;
    std::string counts_text;
    AnnotationFile exported;
    exported.sequence_id = seq.frames.sequence_id;
    exported.fps = seq.frames.fps;
    exported.width = seq.frames.width;
    exported.height = seq.frames.height;
    for (size_t e = 0; e < seq.frames.frames.size(); ++e) {
        const std::vector<Point2> points =
            predict_frame_points(ckpt.params, ckpt.config, cfg.infer, seq.frames, int(e));
        std::vector<double> overlay = seq.frames.frames[e].pixels;
        for (const Point2& p : points) {
            draw_cross(overlay, seq.frames.width, seq.frames.height, p.x, p.y);
        }
        const int index = seq.frames.frames[e].index;
        write_ppm((fs::path(out_dir) / frame_filename(index)).string(), seq.frames.width,
                  seq.frames.height, overlay);
        counts_text += strformat("%06d %d\n", index, int(points.size()));
        out.counts.push_back(int(points.size()));
        exported.frame_indices.push_back(index);
        std::vector<Point2> clamped = points;
        for (Point2& p : clamped) {
            p.x = std::clamp(p.x, 0.0, double(seq.frames.width) - 1e-6);
            p.y = std::clamp(p.y, 0.0, double(seq.frames.height) - 1e-6);
        }
        exported.points.frames.push_back(std::move(clamped));
    }
    write_text_file((fs::path(out_dir) / "counts.txt").string(), counts_text);
    out.json_path = (fs::path(out_dir) / "predictions.json").string();
    write_text_file(out.json_path, save_annotations(exported));
    return out;
}

AblateResult cmd_ablate(const RunConfig& cfg) {
    if (cfg.dataset_dir.empty()) throw ConfigError("dataset_dir is not set");
    const Dataset data = load_dataset(cfg.dataset_dir);
    const std::vector<EvalSequence>& split =
        !data.test.empty() ? data.test : (!data.val.empty() ? data.val : data.train);
    if (split.empty()) throw DataError("dataset has no sequences to evaluate");

    AblateResult result;
    for (QueryMode mode : {QueryMode::kAdd, QueryMode::kConcat}) {
        for (int frames : {1, 5}) {
            RunConfig run = cfg;
            run.model.query_mode = mode;
            run.model.frames = frames;
            run.model.reference_frame = -1;
            run.model.validate();
            const auto t0 = std::chrono::steady_clock::now();
            Trainer trainer(run, data);
            const int64_t total = trainer.total_steps();
            while (trainer.current_step() < total) trainer.step();
            EvalResult eval = evaluate_split(trainer.params(), run.model, run.infer, split);
            const auto t1 = std::chrono::steady_clock::now();
            AblateRow row;
            row.mode = to_string(mode);
            row.frames = frames;
            row.report = eval.report;
            row.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
            result.rows.push_back(row);
        }
    }
    result.csv = "mode,frames,mae,mse,nae,wall_seconds\n";
    for (const AblateRow& row : result.rows) {
        result.csv += strformat("%s,%d,%.6f,%.6f,%.6f,%.3f\n", row.mode.c_str(), row.frames,
                                row.report.mae, row.report.mse, row.report.nae, row.wall_seconds);
    }
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw DataError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
    result.csv_path = (fs::path(cfg.out_dir) / "ablation.csv").string();
    write_text_file(result.csv_path, result.csv);
    return result;
}

}  // namespace vidcount
