#include "vidcount/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace vidcount {

// ---- annotation files -------------------------------------------------------

AnnotationFile load_annotations(const std::string& content) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(content);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(std::string("annotation parse error: ") + e.what());
    }
    AnnotationFile out;
    try {
        out.sequence_id = doc.at("sequence_id").get<std::string>();
        out.fps = doc.at("fps").get<double>();
        out.width = doc.at("width").get<int>();
        out.height = doc.at("height").get<int>();
        const auto& frames = doc.at("frames");
        if (!frames.is_array()) throw DataError("annotation field 'frames' must be an array");
        for (const auto& f : frames) {
            const int index = f.at("index").get<int>();
            out.frame_indices.push_back(index);
            std::vector<Point2> pts;
            for (const auto& p : f.at("points")) {
                if (!p.is_array() || p.size() != 2) {
                    throw DataError(strformat("annotation frame %d: points must be [x, y] pairs", index));
                }
                Point2 pt{p[0].get<double>(), p[1].get<double>()};
                if (pt.x < 0 || pt.x >= out.width || pt.y < 0 || pt.y >= out.height) {
                    throw DataError(strformat(
                        "annotation frame %d: point (%g, %g) outside %dx%d frame bounds", index,
                        pt.x, pt.y, out.width, out.height));
                }
                pts.push_back(pt);
            }
            out.points.frames.push_back(std::move(pts));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("annotation field error: ") + e.what());
    }
    if (out.width <= 0 || out.height <= 0) {
        throw DataError("annotation width/height must be positive");
    }
    for (size_t i = 1; i < out.frame_indices.size(); ++i) {
        if (out.frame_indices[i] <= out.frame_indices[i - 1]) {
            throw DataError("annotation frame indices must be strictly increasing");
        }
    }
    return out;
}

namespace {

std::string fmt_coord(double v) {
    char buf[64];
    snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt_double(double v) {
    char buf[64];
    snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

// Hand-rolled writer: fixed 6-decimal coordinates and a stable field order
// keep serialized bytes reproducible.
std::string save_annotations(const AnnotationFile& file) {
    std::string out = "{\n";
    out += "  \"sequence_id\": \"" + file.sequence_id + "\",\n";
    out += "  \"fps\": " + fmt_double(file.fps) + ",\n";
    out += "  \"width\": " + std::to_string(file.width) + ",\n";
    out += "  \"height\": " + std::to_string(file.height) + ",\n";
    out += "  \"frames\": [";
    for (size_t i = 0; i < file.points.frames.size(); ++i) {
        if (i) out += ",";
        const int index = i < file.frame_indices.size() ? file.frame_indices[i] : int(i);
        out += "\n    { \"index\": " + std::to_string(index) + ", \"points\": [";
        const auto& pts = file.points.frames[i];
        for (size_t j = 0; j < pts.size(); ++j) {
            if (j) out += ", ";
            out += "[" + fmt_coord(pts[j].x) + ", " + fmt_coord(pts[j].y) + "]";
        }
        out += "] }";
    }
    if (!file.points.frames.empty()) out += "\n  ";
    out += "]\n}\n";
    return out;
}

// ---- pseudo density ----------------------------------------------------------

PseudoDensityMap generate_pseudo_density(const std::vector<Point2>& points, int height, int width,
                                         double sigma) {
    if (sigma <= 0) throw ConfigError(strformat("density sigma must be positive, got %g", sigma));
    if (height <= 0 || width <= 0) throw DataError("density grid extent must be positive");
    PseudoDensityMap map;
    map.height = height;
    map.width = width;
    map.sigma = sigma;
    map.grid.assign(size_t(height) * width, 0.0);
    const double radius = 4.0 * sigma;
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (const Point2& p : points) {
        if (p.x < 0 || p.x >= width || p.y < 0 || p.y >= height) {
            throw DataError(strformat("density point (%g, %g) outside %dx%d grid", p.x, p.y, width, height));
        }
        const int x_lo = std::max(0, int(std::ceil(p.x - radius)));
        const int x_hi = std::min(width - 1, int(std::floor(p.x + radius)));
        const int y_lo = std::max(0, int(std::ceil(p.y - radius)));
        const int y_hi = std::min(height - 1, int(std::floor(p.y + radius)));
        double mass = 0;
        for (int y = y_lo; y <= y_hi; ++y) {
            for (int x = x_lo; x <= x_hi; ++x) {
                const double dx = x - p.x, dy = y - p.y;
                const double d2 = dx * dx + dy * dy;
                if (d2 > radius * radius) continue;
                mass += std::exp(-d2 * inv2s2);
            }
        }
        // mass > 0 always: the pixel nearest the (in-bounds) point lies inside
        // the truncation radius
        const double inv_mass = 1.0 / mass;
        for (int y = y_lo; y <= y_hi; ++y) {
            for (int x = x_lo; x <= x_hi; ++x) {
                const double dx = x - p.x, dy = y - p.y;
                const double d2 = dx * dx + dy * dy;
                if (d2 > radius * radius) continue;
                map.grid[size_t(y) * width + x] += std::exp(-d2 * inv2s2) * inv_mass;
            }
        }
    }
    return map;
}

// ---- patch grids ---------------------------------------------------------------

namespace {

struct AxisSplit {
    std::vector<int> origins;
    std::vector<int> own_lo, own_hi;  // half-open ownership intervals
};

AxisSplit split_axis(int extent, int patch) {
    AxisSplit s;
    for (int o = 0; o + patch < extent; o += patch) s.origins.push_back(o);
    s.origins.push_back(extent - patch);
    for (size_t i = 0; i < s.origins.size(); ++i) {
        s.own_lo.push_back(s.origins[i]);
        s.own_hi.push_back(i + 1 < s.origins.size() ? s.origins[i + 1] : extent);
    }
    return s;
}

}  // namespace

PatchGrid crop_patches(int frame_height, int frame_width, int patch_size) {
    if (patch_size <= 0) throw ConfigError("patch size must be positive");
    if (patch_size > frame_height || patch_size > frame_width) {
        throw DataError(strformat("patch size %d exceeds frame extent %dx%d", patch_size,
                                  frame_width, frame_height));
    }
    PatchGrid grid;
    grid.patch_size = patch_size;
    grid.frame_height = frame_height;
    grid.frame_width = frame_width;
    const AxisSplit ys = split_axis(frame_height, patch_size);
    const AxisSplit xs = split_axis(frame_width, patch_size);
    for (size_t yi = 0; yi < ys.origins.size(); ++yi) {
        for (size_t xi = 0; xi < xs.origins.size(); ++xi) {
            PatchGrid::Cell cell;
            cell.x0 = xs.origins[xi];
            cell.y0 = ys.origins[yi];
            cell.own_x0 = xs.own_lo[xi];
            cell.own_x1 = xs.own_hi[xi];
            cell.own_y0 = ys.own_lo[yi];
            cell.own_y1 = ys.own_hi[yi];
            grid.cells.push_back(cell);
        }
    }
    return grid;
}

// ---- synthetic sequences ---------------------------------------------------------

namespace {

// value noise lattice point in [0,1), decorrelated by channel and octave
double lattice_value(uint64_t seed, int64_t ix, int64_t iy, int channel, int octave) {
    uint64_t h = seed;
    h = mix_seed(h, uint64_t(ix) * 0x8DA6B343ULL);
    h = mix_seed(h, uint64_t(iy) * 0xD8163841ULL);
    h = mix_seed(h, uint64_t(channel) * 0xCB1AB31FULL + uint64_t(octave));
    return double(h >> 11) * 0x1.0p-53;
}

double smoothstep01(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(uint64_t seed, double x, double y, int channel, int octave, double cell) {
    const double gx = x / cell, gy = y / cell;
    const int64_t ix = int64_t(std::floor(gx)), iy = int64_t(std::floor(gy));
    const double fx = smoothstep01(gx - double(ix));
    const double fy = smoothstep01(gy - double(iy));
    const double v00 = lattice_value(seed, ix, iy, channel, octave);
    const double v01 = lattice_value(seed, ix + 1, iy, channel, octave);
    const double v10 = lattice_value(seed, ix, iy + 1, channel, octave);
    const double v11 = lattice_value(seed, ix + 1, iy + 1, channel, octave);
    const double top = v00 + (v01 - v00) * fx;
    const double bot = v10 + (v11 - v10) * fx;
    return top + (bot - top) * fy;
}

// multi-octave value noise in [0,1]
double fbm(uint64_t seed, double x, double y, int channel) {
    double acc = 0, amp = 1, total = 0, cell = 16.0;
    for (int octave = 0; octave < 4; ++octave) {
        acc += amp * value_noise(seed, x, y, channel, octave, cell);
        total += amp;
        amp *= 0.5;
        cell *= 0.5;
    }
    return acc / total;
}

struct MovingObject {
    double x, y;      // center
    double vx, vy;    // pixels per frame
    double rx, ry;    // ellipse radii
    double off_x, off_y;  // texture displacement direction, scaled by blend
};

void reflect_into(double& pos, double& vel, double lo, double hi) {
    // lo < hi guaranteed by the geometry check
    while (pos < lo || pos > hi) {
        if (pos < lo) {
            pos = lo + (lo - pos);
            vel = -vel;
        } else {
            pos = hi - (pos - hi);
            vel = -vel;
        }
    }
}

}  // namespace

std::pair<FrameSequence, PointAnnotationSet> synthesize_sequence(const SyntheticSceneConfig& cfg) {
    if (cfg.frame_height <= 0 || cfg.frame_width <= 0 || cfg.num_frames <= 0) {
        throw ConfigError("synthetic scene: frame extent and frame count must be positive");
    }
    if (cfg.count_min < 0 || cfg.count_min > cfg.count_max) {
        throw ConfigError("synthetic scene: count range must satisfy 0 <= min <= max");
    }
    if (cfg.radius_min <= 0 || cfg.radius_min > cfg.radius_max) {
        throw ConfigError("synthetic scene: radius range must satisfy 0 < min <= max");
    }
    if (cfg.blend < 0 || cfg.blend > 1) throw ConfigError("synthetic scene: blend must be in [0,1]");
    if (cfg.max_speed < 0) throw ConfigError("synthetic scene: max_speed must be non-negative");
    const double min_extent = double(std::min(cfg.frame_height, cfg.frame_width));
    if (2.0 * cfg.radius_max + 2.0 >= min_extent) {
        throw ConfigError(strformat(
            "synthetic scene: objects of radius %g cannot fit a %dx%d frame", cfg.radius_max,
            cfg.frame_width, cfg.frame_height));
    }

    const uint64_t bg_seed = mix_seed(cfg.seed, 0xBA5E);
    Rng obj_rng(mix_seed(cfg.seed, 0x0B1EC7));

    const int count = obj_rng.uniform_int(cfg.count_min, cfg.count_max);
    std::vector<MovingObject> objects;
    for (int i = 0; i < count; ++i) {
        MovingObject o;
        o.rx = obj_rng.uniform(cfg.radius_min, cfg.radius_max);
        o.ry = obj_rng.uniform(cfg.radius_min, cfg.radius_max);
        o.x = obj_rng.uniform(o.rx + 1.0, cfg.frame_width - 1.0 - o.rx);
        o.y = obj_rng.uniform(o.ry + 1.0, cfg.frame_height - 1.0 - o.ry);
        o.vx = obj_rng.uniform(-cfg.max_speed, cfg.max_speed);
        o.vy = obj_rng.uniform(-cfg.max_speed, cfg.max_speed);
        const double angle = obj_rng.uniform(0, 2.0 * M_PI);
        o.off_x = 512.0 * std::cos(angle);
        o.off_y = 512.0 * std::sin(angle);
        objects.push_back(o);
    }

    FrameSequence seq;
    seq.sequence_id = cfg.sequence_id;
    seq.fps = cfg.fps;
    seq.height = cfg.frame_height;
    seq.width = cfg.frame_width;
    PointAnnotationSet ann;

    for (int t = 0; t < cfg.num_frames; ++t) {
        Frame frame;
        frame.index = t;
        frame.pixels.assign(size_t(cfg.frame_height) * cfg.frame_width * 3, 0.0);
        for (int y = 0; y < cfg.frame_height; ++y) {
            for (int x = 0; x < cfg.frame_width; ++x) {
                double* px = &frame.pixels[(size_t(y) * cfg.frame_width + x) * 3];
                for (int c = 0; c < 3; ++c) px[c] = fbm(bg_seed, x, y, c);
                for (const MovingObject& o : objects) {
                    const double dx = (x - o.x) / o.rx, dy = (y - o.y) / o.ry;
                    const double d = dx * dx + dy * dy;
                    if (d >= 1.0) continue;
                    const double alpha = smoothstep01(std::clamp((1.0 - d) / 0.3, 0.0, 1.0));
                    for (int c = 0; c < 3; ++c) {
                        const double tex = fbm(bg_seed, x + cfg.blend * o.off_x,
                                               y + cfg.blend * o.off_y, c);
                        px[c] = px[c] + alpha * (tex - px[c]);
                    }
                }
            }
        }
        std::vector<Point2> pts;
        for (const MovingObject& o : objects) pts.push_back(Point2{o.x, o.y});
        ann.frames.push_back(std::move(pts));
        seq.frames.push_back(std::move(frame));
        for (MovingObject& o : objects) {
            o.x += o.vx;
            o.y += o.vy;
            reflect_into(o.x, o.vx, o.rx + 1.0, cfg.frame_width - 1.0 - o.rx);
            reflect_into(o.y, o.vy, o.ry + 1.0, cfg.frame_height - 1.0 - o.ry);
        }
    }
    return {std::move(seq), std::move(ann)};
}

// ---- splits -------------------------------------------------------------------------

DatasetSplit split_dataset(std::vector<std::string> ids, int n_train, int n_val, int n_test) {
    if (n_train < 0 || n_val < 0 || n_test < 0 ||
        size_t(n_train) + size_t(n_val) + size_t(n_test) != ids.size()) {
        throw ConfigError(strformat("split sizes %d/%d/%d do not sum to %zu sequences", n_train,
                                    n_val, n_test, ids.size()));
    }
    std::sort(ids.begin(), ids.end());
    DatasetSplit out;
    out.train.assign(ids.begin(), ids.begin() + n_train);
    out.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
    out.test.assign(ids.begin() + n_train + n_val, ids.end());
    return out;
}

// ---- image io -----------------------------------------------------------------------

void write_ppm(const std::string& path, int width, int height, const std::vector<double>& rgb) {
    if (int64_t(rgb.size()) != int64_t(width) * height * 3) {
        throw DataError(strformat("write_ppm %s: pixel buffer size %zu does not match %dx%d",
                                  path.c_str(), rgb.size(), width, height));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << "P6\n" << width << " " << height << "\n255\n";
    std::vector<unsigned char> bytes(rgb.size());
    for (size_t i = 0; i < rgb.size(); ++i) {
        bytes[i] = (unsigned char)std::lround(std::clamp(rgb[i], 0.0, 1.0) * 255.0);
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw DataError("write failed: " + path);
}

namespace {

int read_pnm_token(std::istream& in, const std::string& path) {
    // skips whitespace and '#' comments
    while (true) {
        int c = in.peek();
        if (c == std::istream::traits_type::eof()) {
            break;
        } else if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int value = 0;
    if (!(in >> value)) throw DataError("malformed PNM header in " + path);
    return value;
}

}  // namespace

PpmImage read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw DataError("not a binary PPM (P6): " + path);
    PpmImage img;
    img.width = read_pnm_token(in, path);
    img.height = read_pnm_token(in, path);
    const int maxval = read_pnm_token(in, path);
    if (img.width <= 0 || img.height <= 0 || maxval != 255) {
        throw DataError("unsupported PPM geometry/maxval in " + path);
    }
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(size_t(img.width) * img.height * 3);
    in.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
    if (in.gcount() != std::streamsize(bytes.size())) {
        throw DataError("truncated PPM payload in " + path);
    }
    img.pixels.resize(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = double(bytes[i]) / 255.0;
    return img;
}

void write_density_pgm(const std::string& path, const PseudoDensityMap& map) {
    double mx = 0;
    for (double v : map.grid) mx = std::max(mx, v);
    const double scale = mx > 0 ? 255.0 / mx : 0.0;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << "P5\n" << map.width << " " << map.height << "\n255\n";
    std::vector<unsigned char> bytes(map.grid.size());
    for (size_t i = 0; i < map.grid.size(); ++i) {
        bytes[i] = (unsigned char)std::lround(std::clamp(map.grid[i] * scale, 0.0, 255.0));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw DataError("write failed: " + path);
    char buf[64];
    snprintf(buf, sizeof(buf), "%.9g\n", scale);
    write_text_file(path + ".scale.txt", buf);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << content;
    if (!out) throw DataError("write failed: " + path);
}

}  // namespace vidcount
