#include <cstdlib>
#include <fstream>
#include <sstream>

#include "vidcount/train.hpp"

namespace vidcount {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

int parse_int(const std::string& key, const std::string& value) {
    char* end = nullptr;
    long v = strtol(value.c_str(), &end, 10);
    if (end == value.c_str() || *end != '\0') {
        throw ConfigError("value for '" + key + "' is not an integer: " + value);
    }
    return int(v);
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
    char* end = nullptr;
    unsigned long long v = strtoull(value.c_str(), &end, 10);
    if (end == value.c_str() || *end != '\0') {
        throw ConfigError("value for '" + key + "' is not an unsigned integer: " + value);
    }
    return uint64_t(v);
}

double parse_real(const std::string& key, const std::string& value) {
    char* end = nullptr;
    double v = strtod(value.c_str(), &end);
    if (end == value.c_str() || *end != '\0') {
        throw ConfigError("value for '" + key + "' is not a number: " + value);
    }
    return v;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::istringstream in(value);
    std::string tok;
    while (std::getline(in, tok, ',')) out.push_back(parse_int(key, trim(tok)));
    if (out.empty()) throw ConfigError("value for '" + key + "' is an empty list");
    return out;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(strformat("config line %d: malformed section header", line_no));
            }
            section = trim(line.substr(1, line.size() - 2));
            if (section != "model" && section != "train" && section != "loss" &&
                section != "infer" && section != "generate") {
                throw ConfigError(strformat("config line %d: unknown section [%s]", line_no,
                                            section.c_str()));
            }
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(strformat("config line %d: expected key = value", line_no));
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) {
            throw ConfigError(strformat("config line %d: key '%s' outside any section", line_no,
                                        key.c_str()));
        }

        if (section == "model") {
            if (key == "crop_size") cfg.model.crop_size = parse_int(key, value);
            else if (key == "downsample_factor") cfg.model.downsample_factor = parse_int(key, value);
            else if (key == "backbone_channels") cfg.model.backbone_channels = parse_int_list(key, value);
            else if (key == "token_dim") cfg.model.token_dim = parse_int(key, value);
            else if (key == "density_dim") cfg.model.density_dim = parse_int(key, value);
            else if (key == "encoder_layers") cfg.model.encoder_layers = parse_int(key, value);
            else if (key == "decoder_layers") cfg.model.decoder_layers = parse_int(key, value);
            else if (key == "heads") cfg.model.heads = parse_int(key, value);
            else if (key == "num_queries") cfg.model.num_queries = parse_int(key, value);
            else if (key == "frames") cfg.model.frames = parse_int(key, value);
            else if (key == "reference_frame") cfg.model.reference_frame = parse_int(key, value);
            else if (key == "query_mode") cfg.model.query_mode = query_mode_from_string(value);
            else if (key == "sigma") cfg.model.sigma = parse_real(key, value);
            else throw ConfigError("unknown key '" + key + "' in section [model]");
        } else if (section == "train") {
            if (key == "step_size") cfg.optim.step_size = parse_real(key, value);
            else if (key == "beta1") cfg.optim.beta1 = parse_real(key, value);
            else if (key == "beta2") cfg.optim.beta2 = parse_real(key, value);
            else if (key == "eps") cfg.optim.eps = parse_real(key, value);
            else if (key == "epochs") cfg.epochs = parse_int(key, value);
            else if (key == "steps") cfg.steps = parse_int(key, value);
            else if (key == "batch_clips") cfg.batch_clips = parse_int(key, value);
            else if (key == "checkpoint_interval") cfg.checkpoint_interval = parse_int(key, value);
            else if (key == "seed") cfg.seed = parse_u64(key, value);
            else if (key == "dataset_dir") cfg.dataset_dir = value;
            else if (key == "out_dir") cfg.out_dir = value;
            else throw ConfigError("unknown key '" + key + "' in section [train]");
        } else if (section == "loss") {
            if (key == "lambda_reg") cfg.loss.lambda_reg = parse_real(key, value);
            else if (key == "lambda_dm") cfg.loss.lambda_dm = parse_real(key, value);
            else if (key == "focal_alpha") cfg.loss.focal_alpha = parse_real(key, value);
            else if (key == "focal_gamma") cfg.loss.focal_gamma = parse_real(key, value);
            else if (key == "match_lambda_point") cfg.match.lambda_point = parse_real(key, value);
            else if (key == "match_lambda_conf") cfg.match.lambda_conf = parse_real(key, value);
            else throw ConfigError("unknown key '" + key + "' in section [loss]");
        } else if (section == "infer") {
            if (key == "threshold") cfg.infer.threshold = parse_real(key, value);
            else if (key == "patch_size") cfg.infer.patch_size = parse_int(key, value);
            else throw ConfigError("unknown key '" + key + "' in section [infer]");
        } else {  // generate
            if (key == "num_sequences") cfg.generate.num_sequences = parse_int(key, value);
            else if (key == "frame_height") cfg.generate.frame_height = parse_int(key, value);
            else if (key == "frame_width") cfg.generate.frame_width = parse_int(key, value);
            else if (key == "num_frames") cfg.generate.num_frames = parse_int(key, value);
            else if (key == "fps") cfg.generate.fps = parse_real(key, value);
            else if (key == "count_min") cfg.generate.count_min = parse_int(key, value);
            else if (key == "count_max") cfg.generate.count_max = parse_int(key, value);
            else if (key == "radius_min") cfg.generate.radius_min = parse_real(key, value);
            else if (key == "radius_max") cfg.generate.radius_max = parse_real(key, value);
            else if (key == "blend") cfg.generate.blend = parse_real(key, value);
            else if (key == "max_speed") cfg.generate.max_speed = parse_real(key, value);
            else if (key == "split_train") cfg.generate.split_train = parse_int(key, value);
            else if (key == "split_val") cfg.generate.split_val = parse_int(key, value);
            else if (key == "split_test") cfg.generate.split_test = parse_int(key, value);
            else throw ConfigError("unknown key '" + key + "' in section [generate]");
        }
    }
    cfg.model.validate();
    if (cfg.batch_clips <= 0) throw ConfigError("batch_clips must be positive");
    if (cfg.steps < 0 || cfg.epochs < 0) throw ConfigError("steps/epochs must be non-negative");
    if (cfg.steps == 0 && cfg.epochs == 0) {
        throw ConfigError("either steps or epochs must be positive");
    }
    if (cfg.infer.threshold < 0 || cfg.infer.threshold > 1) {
        throw ConfigError("inference threshold must lie in [0,1]");
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string train_log_csv(const std::vector<StepLog>& log) {
    std::string out = "step,l_cls,l_loc,l_dm,total\n";
    for (const StepLog& s : log) {
        out += strformat("%lld,%.9f,%.9f,%.9f,%.9f\n", (long long)s.step, s.l_cls, s.l_loc,
                         s.l_dm, s.total);
    }
    return out;
}

}  // namespace vidcount
