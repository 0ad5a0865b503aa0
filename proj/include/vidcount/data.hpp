#ifndef VIDCOUNT_DATA_HPP
#define VIDCOUNT_DATA_HPP

#include <string>
#include <utility>
#include <vector>

#include "vidcount/common.hpp"

namespace vidcount {

struct Frame {
    int index = 0;
    std::vector<double> pixels;  // H*W*3, row-major, values in [0,1]
};

struct FrameSequence {
    std::string sequence_id;
    double fps = 25.0;
    int height = 0;
    int width = 0;
    std::vector<Frame> frames;
};

// Per-frame center-point ground truth, pixel coordinates with origin at the
// top-left corner, x rightward, y downward.
struct PointAnnotationSet {
    std::vector<std::vector<Point2>> frames;

    int count(int frame) const { return int(frames[size_t(frame)].size()); }
};

struct AnnotationFile {
    std::string sequence_id;
    double fps = 25.0;
    int width = 0;
    int height = 0;
    std::vector<int> frame_indices;
    PointAnnotationSet points;
};

struct PseudoDensityMap {
    int height = 0;
    int width = 0;
    double sigma = 0;
    std::vector<double> grid;  // H*W, non-negative

    double sum() const {
        double s = 0;
        for (double v : grid) s += v;
        return s;
    }
};

struct PatchGrid {
    struct Cell {
        int x0 = 0, y0 = 0;                  // patch origin
        int own_x0 = 0, own_y0 = 0;          // half-open ownership rectangle
        int own_x1 = 0, own_y1 = 0;
    };
    int patch_size = 0;
    int frame_height = 0;
    int frame_width = 0;
    std::vector<Cell> cells;  // row-major over (y origin, x origin)
};

struct SyntheticSceneConfig {
    int frame_height = 64;
    int frame_width = 64;
    int num_frames = 30;
    double fps = 25.0;
    int count_min = 2;
    int count_max = 5;
    double radius_min = 2.0;
    double radius_max = 4.0;
    double blend = 1.0;      // 0 = object texture identical to background
    double max_speed = 1.5;  // pixels per frame, per axis
    uint64_t seed = 1;
    std::string sequence_id = "seq";
};

// ---- annotation file format (JSON, see README) ----
AnnotationFile load_annotations(const std::string& content);
std::string save_annotations(const AnnotationFile& file);

// ---- pseudo density maps ----
// Each point contributes a Gaussian of scale sigma, truncated at radius
// 4*sigma and renormalized over the in-frame truncated window so every
// point adds exactly unit mass.
PseudoDensityMap generate_pseudo_density(const std::vector<Point2>& points, int height, int width,
                                         double sigma);

// ---- patch grids ----
// Origins advance by patch_size with the last origin clamped to
// extent - patch_size; ownership rectangles partition the frame.
PatchGrid crop_patches(int frame_height, int frame_width, int patch_size);

// ---- synthetic sequences ----
std::pair<FrameSequence, PointAnnotationSet> synthesize_sequence(const SyntheticSceneConfig& config);

// ---- dataset splits ----
struct DatasetSplit {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};
DatasetSplit split_dataset(std::vector<std::string> sequence_ids, int n_train, int n_val, int n_test);

// ---- image files ----
void write_ppm(const std::string& path, int width, int height, const std::vector<double>& rgb);
struct PpmImage {
    int width = 0;
    int height = 0;
    std::vector<double> pixels;
};
PpmImage read_ppm(const std::string& path);
// P5 grayscale scaled so the max density maps to 255; the applied scale is
// recorded in a sidecar text file at path + ".scale.txt".
void write_density_pgm(const std::string& path, const PseudoDensityMap& map);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace vidcount

#endif
