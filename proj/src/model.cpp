#include "vidcount/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vidcount {

QueryMode query_mode_from_string(const std::string& s) {
    if (s == "add") return QueryMode::kAdd;
    if (s == "concat") return QueryMode::kConcat;
    throw ConfigError("unknown query_mode '" + s + "' (expected add or concat)");
}

std::string to_string(QueryMode mode) { return mode == QueryMode::kAdd ? "add" : "concat"; }

int ModelConfig::query_grid() const {
    const int g = int(std::lround(std::sqrt(double(num_queries))));
    return g;
}

void ModelConfig::validate() const {
    if (crop_size <= 0 || downsample_factor <= 0 || token_dim <= 0 || density_dim <= 0 ||
        encoder_layers <= 0 || decoder_layers <= 0 || heads <= 0 || num_queries <= 0 ||
        frames <= 0 || sigma <= 0) {
        throw ConfigError("model config: all sizes must be positive");
    }
    if (crop_size % downsample_factor != 0) {
        throw ConfigError(strformat("crop_size %d is not divisible by downsample_factor %d",
                                    crop_size, downsample_factor));
    }
    if (backbone_channels.empty()) throw ConfigError("backbone_channels must be non-empty");
    if ((1 << backbone_channels.size()) != downsample_factor) {
        throw ConfigError(strformat(
            "downsample_factor %d must equal 2^len(backbone_channels) = %d", downsample_factor,
            1 << backbone_channels.size()));
    }
    const int g = query_grid();
    if (g * g != num_queries) {
        throw ConfigError(strformat("num_queries %d is not a perfect square", num_queries));
    }
    if (token_dim % heads != 0) {
        throw ConfigError(strformat("token_dim %d is not divisible by %d heads", token_dim, heads));
    }
    if (token_dim % 4 != 0) {
        throw ConfigError("token_dim must be divisible by 4 for the 2-D sine positional table");
    }
    if (feature_size() % g != 0) {
        throw ConfigError(strformat("feature grid %d is not divisible by query grid %d",
                                    feature_size(), g));
    }
    if (reference_frame >= frames) {
        throw ConfigError(strformat("reference_frame %d out of range for %d frames",
                                    reference_frame, frames));
    }
}

// ---- parameters ------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor t) {
    if (map_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    names_.push_back(name);
    auto [it, ok] = map_.emplace(name, std::move(t));
    (void)ok;
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw DataError("unknown parameter: " + name);
    return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw DataError("unknown parameter: " + name);
    return it->second;
}

void ParamStore::watch_all() {
    for (const std::string& name : names_) watch(map_.at(name));
}

void ParamStore::detach_all() {
    for (const std::string& name : names_) map_.at(name).detach();
}

namespace {

void attention_spec(std::vector<std::pair<std::string, std::vector<int>>>& out,
                    const std::string& prefix, int dim) {
    out.push_back({prefix + ".wq", {dim, dim}});
    out.push_back({prefix + ".bq", {dim}});
    out.push_back({prefix + ".wk", {dim, dim}});
    out.push_back({prefix + ".bk", {dim}});
    out.push_back({prefix + ".wv", {dim, dim}});
    out.push_back({prefix + ".bv", {dim}});
    out.push_back({prefix + ".wo", {dim, dim}});
    out.push_back({prefix + ".bo", {dim}});
}

void norm_spec(std::vector<std::pair<std::string, std::vector<int>>>& out,
               const std::string& prefix, int dim) {
    out.push_back({prefix + ".g", {dim}});
    out.push_back({prefix + ".b", {dim}});
}

void ffn_spec(std::vector<std::pair<std::string, std::vector<int>>>& out,
              const std::string& prefix, int dim) {
    const int hidden = 2 * dim;
    out.push_back({prefix + ".w1", {dim, hidden}});
    out.push_back({prefix + ".b1", {hidden}});
    out.push_back({prefix + ".w2", {hidden, dim}});
    out.push_back({prefix + ".b2", {dim}});
}

}  // namespace

std::vector<std::pair<std::string, std::vector<int>>> parameter_spec(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<std::string, std::vector<int>>> out;
    const int d = cfg.token_dim, dd = cfg.density_dim;

    int cin = 3;
    for (size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
        const int cout = cfg.backbone_channels[i];
        out.push_back({strformat("backbone.conv%zu.w", i), {3, 3, cin, cout}});
        out.push_back({strformat("backbone.conv%zu.b", i), {cout}});
        cin = cout;
    }
    out.push_back({"backbone.proj.w", {1, 1, cin, d}});
    out.push_back({"backbone.proj.b", {d}});

    out.push_back({"density.conv0.w", {3, 3, d, dd}});
    out.push_back({"density.conv0.b", {dd}});
    out.push_back({"density.conv1.w", {3, 3, dd, dd}});
    out.push_back({"density.conv1.b", {dd}});
    out.push_back({"density.head.w", {1, 1, dd, 1}});
    out.push_back({"density.head.b", {1}});

    out.push_back({"temporal.pos", {cfg.frames, dd}});
    out.push_back({"temporal.wq", {dd, dd}});
    out.push_back({"temporal.bq", {dd}});
    out.push_back({"temporal.wk", {dd, dd}});
    out.push_back({"temporal.bk", {dd}});
    out.push_back({"temporal.wv", {dd, dd}});
    out.push_back({"temporal.bv", {dd}});

    out.push_back({"encoder.inject.w", {1, 1, dd, d}});
    out.push_back({"encoder.inject.b", {d}});
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        const std::string p = strformat("enc%d", l);
        norm_spec(out, p + ".ln1", d);
        attention_spec(out, p + ".attn", d);
        norm_spec(out, p + ".ln2", d);
        ffn_spec(out, p + ".fc", d);
    }

    const int g = cfg.query_grid();
    const int stride = cfg.feature_size() / g;
    out.push_back({"query.embed", {cfg.num_queries, d}});
    out.push_back({"query.conv.w", {stride, stride, dd, d}});
    out.push_back({"query.conv.b", {d}});
    out.push_back({"query.proj.w", {d, d}});
    out.push_back({"query.proj.b", {d}});
    if (cfg.query_mode == QueryMode::kConcat) {
        out.push_back({"query.cat.w", {2 * d, d}});
        out.push_back({"query.cat.b", {d}});
    }

    for (int l = 0; l < cfg.decoder_layers; ++l) {
        const std::string p = strformat("dec%d", l);
        attention_spec(out, p + ".self", d);
        norm_spec(out, p + ".ln1", d);
        attention_spec(out, p + ".cross", d);
        norm_spec(out, p + ".ln2", d);
        ffn_spec(out, p + ".fc", d);
        norm_spec(out, p + ".ln3", d);
    }

    out.push_back({"head.reg.w1", {d, d}});
    out.push_back({"head.reg.b1", {d}});
    out.push_back({"head.reg.w2", {d, 2}});
    out.push_back({"head.reg.b2", {2}});
    out.push_back({"head.cls.w", {d, 1}});
    out.push_back({"head.cls.b", {1}});
    return out;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_bias_name(const std::string& name) {
    for (const char* b : {".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo"}) {
        if (ends_with(name, b)) return true;
    }
    return false;
}

int fan_in_of(const std::vector<int>& shape) {
    if (shape.size() == 2) return shape[0];
    if (shape.size() == 4) return shape[0] * shape[1] * shape[2];
    return shape.back();
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
    ParamStore params;
    Rng rng(mix_seed(seed, 0x9A7A));
    for (const auto& [name, shape] : parameter_spec(cfg)) {
        Tensor t = Tensor::zeros(shape);
        if (name == "query.embed" || name == "temporal.pos") {
            for (double& v : t.values) v = rng.normal(0.0, 0.02);
        } else if (name.find(".ln") != std::string::npos && ends_with(name, ".g")) {
            for (double& v : t.values) v = 1.0;
        } else if (!is_bias_name(name)) {
            const double bound = 1.0 / std::sqrt(double(fan_in_of(shape)));
            for (double& v : t.values) v = rng.uniform(-bound, bound);
        }
        t.requires_grad = true;
        params.add(name, std::move(t));
    }
    return params;
}

// ---- building blocks ----------------------------------------------------------

Tensor sine_position_table(int h, int w, int dim) {
    if (dim % 4 != 0) throw ConfigError("sine positional table needs dim divisible by 4");
    const int half = dim / 2;
    Tensor table = Tensor::zeros({h * w, dim});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double* row = &table.values[size_t(y * w + x) * dim];
            for (int k = 0; k < half / 2; ++k) {
                const double freq = std::pow(10000.0, -2.0 * k / double(half));
                row[2 * k] = std::sin(y * freq);
                row[2 * k + 1] = std::cos(y * freq);
                row[half + 2 * k] = std::sin(x * freq);
                row[half + 2 * k + 1] = std::cos(x * freq);
            }
        }
    }
    return table;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape[1] != k.shape[1] ||
        k.shape[0] != v.shape[0]) {
        throw DataError("scaled_dot_attention: incompatible operand shapes");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(double(q.shape[1]));
    const Tensor logits = scale(matmul(q, transpose(k)), inv_sqrt_d);
    return matmul(softmax(logits, 1), v);
}

namespace {

Tensor linear(const Tensor& x, const ParamStore& params, const std::string& w,
              const std::string& b) {
    return add(matmul(x, params.at(w)), params.at(b));
}

Tensor layer_norm_affine(const Tensor& x, const ParamStore& params, const std::string& prefix) {
    return add(multiply(layer_norm(x), params.at(prefix + ".g")), params.at(prefix + ".b"));
}

Tensor feed_forward(const Tensor& x, const ParamStore& params, const std::string& prefix) {
    return linear(relu(linear(x, params, prefix + ".w1", prefix + ".b1")), params, prefix + ".w2",
                  prefix + ".b2");
}

}  // namespace

Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                            const ParamStore& params, const std::string& prefix, int heads) {
    const int d = q_in.shape[1];
    if (d % heads != 0) throw ConfigError("multi_head_attention: dim not divisible by heads");
    const Tensor q = linear(q_in, params, prefix + ".wq", prefix + ".bq");
    const Tensor k = linear(k_in, params, prefix + ".wk", prefix + ".bk");
    const Tensor v = linear(v_in, params, prefix + ".wv", prefix + ".bv");
    const int dh = d / heads;
    std::vector<Tensor> head_outputs;
    for (int h = 0; h < heads; ++h) {
        const Tensor qh = slice(q, {0, h * dh}, {q.shape[0], dh});
        const Tensor kh = slice(k, {0, h * dh}, {k.shape[0], dh});
        const Tensor vh = slice(v, {0, h * dh}, {v.shape[0], dh});
        head_outputs.push_back(scaled_dot_attention(qh, kh, vh));
    }
    const Tensor merged = heads == 1 ? head_outputs[0] : concat(head_outputs, 1);
    return linear(merged, params, prefix + ".wo", prefix + ".bo");
}

std::vector<Tensor> backbone_forward(const std::vector<Tensor>& frames, const ParamStore& params,
                                     const ModelConfig& cfg) {
    std::vector<Tensor> out;
    for (const Tensor& frame : frames) {
        if (frame.shape != std::vector<int>{cfg.crop_size, cfg.crop_size, 3}) {
            throw DataError(strformat("backbone_forward: expected %dx%dx3 frame", cfg.crop_size,
                                      cfg.crop_size));
        }
        Tensor x = frame;
        for (size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
            x = relu(add(conv2d(x, params.at(strformat("backbone.conv%zu.w", i)), 2, 1),
                         params.at(strformat("backbone.conv%zu.b", i))));
        }
        x = add(conv2d(x, params.at("backbone.proj.w"), 1, 0), params.at("backbone.proj.b"));
        out.push_back(std::move(x));
    }
    return out;
}

std::pair<Tensor, Tensor> density_branch(const Tensor& features, const ParamStore& params,
                                         const ModelConfig& cfg) {
    Tensor f = relu(add(conv2d(features, params.at("density.conv0.w"), 1, 1),
                        params.at("density.conv0.b")));
    f = relu(add(conv2d(f, params.at("density.conv1.w"), 1, 1), params.at("density.conv1.b")));
    Tensor head = relu(add(conv2d(f, params.at("density.head.w"), 1, 0),
                           params.at("density.head.b")));
    Tensor map = upsample_bilinear(head, cfg.crop_size, cfg.crop_size);
    return {std::move(f), std::move(map)};
}

Tensor temporal_attention(const std::vector<Tensor>& density_features, const ParamStore& params,
                          const ModelConfig& cfg) {
    if (int(density_features.size()) != cfg.frames) {
        throw DataError(strformat("temporal_attention: got %zu frames, config says %d",
                                  density_features.size(), cfg.frames));
    }
    const int hs = cfg.feature_size();
    const int dd = cfg.density_dim;
    const int ref = cfg.ref_frame();
    std::vector<Tensor> flat;
    for (const Tensor& f : density_features) flat.push_back(reshape(f, {hs * hs, dd}));
    const Tensor& pos = params.at("temporal.pos");
    std::vector<Tensor> per_location;
    for (int loc = 0; loc < hs * hs; ++loc) {
        std::vector<Tensor> rows;
        for (int t = 0; t < cfg.frames; ++t) rows.push_back(slice(flat[size_t(t)], {loc, 0}, {1, dd}));
        const Tensor tokens = add(cfg.frames == 1 ? rows[0] : concat(rows, 0), pos);
        const Tensor q = linear(tokens, params, "temporal.wq", "temporal.bq");
        const Tensor k = linear(tokens, params, "temporal.wk", "temporal.bk");
        const Tensor v = linear(tokens, params, "temporal.wv", "temporal.bv");
        const Tensor attended = scaled_dot_attention(q, k, v);
        per_location.push_back(slice(attended, {ref, 0}, {1, dd}));
    }
    const Tensor stacked = per_location.size() == 1 ? per_location[0] : concat(per_location, 0);
    return reshape(stacked, {hs, hs, dd});
}

Tensor encoder_forward(const Tensor& ref_features, const Tensor& temporal_features,
                       const ParamStore& params, const ModelConfig& cfg) {
    const int hs = cfg.feature_size();
    const int d = cfg.token_dim;
    Tensor tokens = add(reshape(ref_features, {hs * hs, d}), sine_position_table(hs, hs, d));
    const Tensor injected = reshape(
        add(conv2d(temporal_features, params.at("encoder.inject.w"), 1, 0),
            params.at("encoder.inject.b")),
        {hs * hs, d});
    // per layer: F' = MSA(LN(F + inject)); F = F' + FC(LN(F'))
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        const std::string p = strformat("enc%d", l);
        const Tensor z = layer_norm_affine(add(tokens, injected), params, p + ".ln1");
        const Tensor attended = multi_head_attention(z, z, z, params, p + ".attn", cfg.heads);
        tokens = add(attended, feed_forward(layer_norm_affine(attended, params, p + ".ln2"),
                                            params, p + ".fc"));
    }
    return tokens;
}

Tensor build_queries(const Tensor& temporal_features, const ParamStore& params,
                     const ModelConfig& cfg) {
    const int g = cfg.query_grid();
    const int stride = cfg.feature_size() / g;
    const Tensor pooled = add(conv2d(temporal_features, params.at("query.conv.w"), stride, 0),
                              params.at("query.conv.b"));
    const Tensor tokens = linear(reshape(pooled, {g * g, cfg.token_dim}), params, "query.proj.w",
                                 "query.proj.b");
    const Tensor& embed = params.at("query.embed");
    if (cfg.query_mode == QueryMode::kAdd) {
        return add(embed, tokens);
    }
    return linear(concat({embed, tokens}, 1), params, "query.cat.w", "query.cat.b");
}

Tensor decoder_forward(const Tensor& queries, const Tensor& memory, const Tensor& memory_pos,
                       const ParamStore& params, const ModelConfig& cfg) {
    if (memory.shape != memory_pos.shape) {
        throw DataError("decoder_forward: memory and positional table shapes differ");
    }
    const Tensor keys = add(memory, memory_pos);
    Tensor x = queries;
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        const std::string p = strformat("dec%d", l);
        const Tensor self_att = multi_head_attention(x, x, x, params, p + ".self", cfg.heads);
        x = layer_norm_affine(add(x, self_att), params, p + ".ln1");
        const Tensor cross = multi_head_attention(x, keys, memory, params, p + ".cross", cfg.heads);
        x = layer_norm_affine(add(x, cross), params, p + ".ln2");
        const Tensor ff = feed_forward(x, params, p + ".fc");
        x = layer_norm_affine(add(x, ff), params, p + ".ln3");
    }
    return x;
}

ModelOutput prediction_heads(const Tensor& embeddings, const ParamStore& params,
                             const ModelConfig& cfg) {
    ModelOutput out;
    const Tensor hidden = relu(linear(embeddings, params, "head.reg.w1", "head.reg.b1"));
    out.coords = sigmoid(linear(hidden, params, "head.reg.w2", "head.reg.b2"));
    const Tensor logit = linear(embeddings, params, "head.cls.w", "head.cls.b");
    out.confidence = reshape(sigmoid(logit), {cfg.num_queries});
    return out;
}

ModelOutput model_forward(const std::vector<Tensor>& clip, const ParamStore& params,
                          const ModelConfig& cfg) {
    if (int(clip.size()) != cfg.frames) {
        throw DataError(strformat("model_forward: clip has %zu frames, config says %d",
                                  clip.size(), cfg.frames));
    }
    const std::vector<Tensor> features = backbone_forward(clip, params, cfg);
    std::vector<Tensor> density_features;
    std::vector<Tensor> density_maps;
    for (const Tensor& f : features) {
        auto [df, dm] = density_branch(f, params, cfg);
        density_features.push_back(std::move(df));
        density_maps.push_back(std::move(dm));
    }
    const Tensor temporal = temporal_attention(density_features, params, cfg);
    const Tensor memory = encoder_forward(features[size_t(cfg.ref_frame())], temporal, params, cfg);
    const Tensor queries = build_queries(temporal, params, cfg);
    const int hs = cfg.feature_size();
    const Tensor emb = decoder_forward(queries, memory,
                                       sine_position_table(hs, hs, cfg.token_dim), params, cfg);
    ModelOutput out = prediction_heads(emb, params, cfg);
    out.densities = std::move(density_maps);
    return out;
}

std::vector<PointPrediction> to_predictions(const ModelOutput& out) {
    std::vector<PointPrediction> preds;
    const int n = out.confidence.shape[0];
    for (int i = 0; i < n; ++i) {
        preds.push_back(PointPrediction{out.coords.values[size_t(i) * 2],
                                        out.coords.values[size_t(i) * 2 + 1],
                                        out.confidence.values[size_t(i)]});
    }
    return preds;
}

// ---- checkpoints ------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'V', 'C', 'P', '1'};

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& buf, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(buf, bits);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw DataError("checkpoint file truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

std::string config_to_text(const ModelConfig& cfg) {
    std::ostringstream out;
    out << "crop_size=" << cfg.crop_size << "\n";
    out << "downsample_factor=" << cfg.downsample_factor << "\n";
    out << "backbone_channels=";
    for (size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
        if (i) out << ",";
        out << cfg.backbone_channels[i];
    }
    out << "\n";
    out << "token_dim=" << cfg.token_dim << "\n";
    out << "density_dim=" << cfg.density_dim << "\n";
    out << "encoder_layers=" << cfg.encoder_layers << "\n";
    out << "decoder_layers=" << cfg.decoder_layers << "\n";
    out << "heads=" << cfg.heads << "\n";
    out << "num_queries=" << cfg.num_queries << "\n";
    out << "frames=" << cfg.frames << "\n";
    out << "reference_frame=" << cfg.reference_frame << "\n";
    out << "query_mode=" << to_string(cfg.query_mode) << "\n";
    out << "sigma=" << strformat("%.17g", cfg.sigma) << "\n";
    return out.str();
}

ModelConfig config_from_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw DataError("checkpoint config line missing '=': " + line);
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "crop_size") cfg.crop_size = std::stoi(value);
        else if (key == "downsample_factor") cfg.downsample_factor = std::stoi(value);
        else if (key == "backbone_channels") {
            cfg.backbone_channels.clear();
            std::istringstream vs(value);
            std::string tok;
            while (std::getline(vs, tok, ',')) cfg.backbone_channels.push_back(std::stoi(tok));
        } else if (key == "token_dim") cfg.token_dim = std::stoi(value);
        else if (key == "density_dim") cfg.density_dim = std::stoi(value);
        else if (key == "encoder_layers") cfg.encoder_layers = std::stoi(value);
        else if (key == "decoder_layers") cfg.decoder_layers = std::stoi(value);
        else if (key == "heads") cfg.heads = std::stoi(value);
        else if (key == "num_queries") cfg.num_queries = std::stoi(value);
        else if (key == "frames") cfg.frames = std::stoi(value);
        else if (key == "reference_frame") cfg.reference_frame = std::stoi(value);
        else if (key == "query_mode") cfg.query_mode = query_mode_from_string(value);
        else if (key == "sigma") cfg.sigma = std::stod(value);
        else throw DataError("checkpoint config has unknown key: " + key);
    }
    return cfg;
}

}  // namespace

const std::vector<double>* Checkpoint::find_extra(const std::string& name) const {
    for (const auto& [n, v] : extras) {
        if (n == name) return &v;
    }
    return nullptr;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& params,
                     const std::vector<std::pair<std::string, std::vector<double>>>& extras) {
    std::string buf;
    buf.append(kMagic, 4);
    const std::string cfg_text = config_to_text(cfg);
    put_u32(buf, uint32_t(cfg_text.size()));
    buf += cfg_text;
    put_u32(buf, uint32_t(params.size() + extras.size()));
    for (const std::string& name : params.names()) {
        const Tensor& t = params.at(name);
        put_u32(buf, uint32_t(name.size()));
        buf += name;
        put_u32(buf, uint32_t(t.shape.size()));
        for (int d : t.shape) put_u32(buf, uint32_t(d));
        for (double v : t.values) put_f64(buf, v);
    }
    for (const auto& [name, values] : extras) {
        const std::string full = "extra." + name;
        put_u32(buf, uint32_t(full.size()));
        buf += full;
        put_u32(buf, 1);
        put_u32(buf, uint32_t(values.size()));
        for (double v : values) put_f64(buf, v);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw DataError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw DataError("not a checkpoint file: " + path);
    }
    Reader r{buf, 4};
    Checkpoint ckpt;
    ckpt.config = config_from_text(r.str());
    auto expected = parameter_spec(ckpt.config);
    std::map<std::string, std::vector<int>> expected_by_name(expected.begin(), expected.end());

    const uint32_t n_entries = r.u32();
    std::map<std::string, Tensor> loaded;
    for (uint32_t e = 0; e < n_entries; ++e) {
        const std::string name = r.str();
        const uint32_t rank = r.u32();
        std::vector<int> shape;
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            shape.push_back(int(r.u32()));
            numel *= shape.back();
        }
        std::vector<double> values(static_cast<size_t>(numel));
        for (double& v : values) v = r.f64();
        if (name.rfind("extra.", 0) == 0) {
            ckpt.extras.push_back({name.substr(6), std::move(values)});
            continue;
        }
        auto it = expected_by_name.find(name);
        if (it == expected_by_name.end()) {
            throw DataError("checkpoint has unexpected parameter: " + name);
        }
        if (it->second != shape) {
            throw DataError("checkpoint parameter " + name + " has the wrong shape");
        }
        Tensor t(shape, std::move(values));
        t.requires_grad = true;
        loaded.emplace(name, std::move(t));
    }
    for (const auto& [name, shape] : expected) {
        auto it = loaded.find(name);
        if (it == loaded.end()) throw DataError("checkpoint missing parameter: " + name);
        ckpt.params.add(name, std::move(it->second));
    }
    return ckpt;
}

}  // namespace vidcount
