#ifndef VIDCOUNT_MODEL_HPP
#define VIDCOUNT_MODEL_HPP

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vidcount/common.hpp"
#include "vidcount/tensor.hpp"

namespace vidcount {

enum class QueryMode { kAdd, kConcat };

QueryMode query_mode_from_string(const std::string& s);
std::string to_string(QueryMode mode);

struct ModelConfig {
    int crop_size = 64;
    int downsample_factor = 8;
    std::vector<int> backbone_channels = {32, 64, 128};
    int token_dim = 64;    // d
    int density_dim = 64;  // d'
    int encoder_layers = 2;
    int decoder_layers = 2;
    int heads = 4;
    int num_queries = 16;  // g*g
    int frames = 5;        // T
    int reference_frame = -1;  // -1 resolves to frames/2
    QueryMode query_mode = QueryMode::kConcat;
    double sigma = 4.0;

    void validate() const;
    int feature_size() const { return crop_size / downsample_factor; }
    int query_grid() const;
    int ref_frame() const { return reference_frame < 0 ? frames / 2 : reference_frame; }
};

// Learned arrays in a stable, insertion-ordered collection; order drives
// both initialization and optimizer iteration, so runs are reproducible.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t);
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    bool contains(const std::string& name) const { return map_.count(name) != 0; }
    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }

    // registers every parameter as a leaf on the active tape
    void watch_all();
    void detach_all();

private:
    std::vector<std::string> names_;
    std::map<std::string, Tensor> map_;
};

// (name, shape) of every learned array the configuration requires
std::vector<std::pair<std::string, std::vector<int>>> parameter_spec(const ModelConfig& cfg);

ParamStore init_params(const ModelConfig& cfg, uint64_t seed);

struct ModelOutput {
    Tensor coords;                  // [num_queries, 2], sigmoid outputs
    Tensor confidence;              // [num_queries]
    std::vector<Tensor> densities;  // T maps of [crop, crop, 1]
};

// fixed 2-D sine/cosine positional table, shape [h*w, dim]
Tensor sine_position_table(int h, int w, int dim);

// softmax(Q K^T / sqrt(D)) V
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                            const ParamStore& params, const std::string& prefix, int heads);

// per-frame shared-weight feature maps, spatially reduced by the
// downsample factor: T x [h', w', d]
std::vector<Tensor> backbone_forward(const std::vector<Tensor>& frames, const ParamStore& params,
                                     const ModelConfig& cfg);

// returns (density features [h',w',d'], density map [crop,crop,1])
std::pair<Tensor, Tensor> density_branch(const Tensor& features, const ParamStore& params,
                                         const ModelConfig& cfg);

// self-attention across the T frames at each spatial location; returns the
// reference-frame token per location, shape [h', w', d']
Tensor temporal_attention(const std::vector<Tensor>& density_features, const ParamStore& params,
                          const ModelConfig& cfg);

// L layers of density-injected self-attention over the reference frame's
// tokens; returns memory of shape [h'*w', d]
Tensor encoder_forward(const Tensor& ref_features, const Tensor& temporal_features,
                       const ParamStore& params, const ModelConfig& cfg);

// density-guided query embeddings, shape [num_queries, d]
Tensor build_queries(const Tensor& temporal_features, const ParamStore& params,
                     const ModelConfig& cfg);

// decoder layers of {query self-attention, cross-attention to memory with
// positional keys, feed-forward}, post-norm residuals
Tensor decoder_forward(const Tensor& queries, const Tensor& memory, const Tensor& memory_pos,
                       const ParamStore& params, const ModelConfig& cfg);

ModelOutput prediction_heads(const Tensor& embeddings, const ParamStore& params,
                             const ModelConfig& cfg);

ModelOutput model_forward(const std::vector<Tensor>& clip, const ParamStore& params,
                          const ModelConfig& cfg);

std::vector<PointPrediction> to_predictions(const ModelOutput& out);

// ---- checkpoints ----
struct Checkpoint {
    ModelConfig config;
    ParamStore params;
    // auxiliary arrays (optimizer state, step counter), names prefixed "extra."
    std::vector<std::pair<std::string, std::vector<double>>> extras;

    const std::vector<double>* find_extra(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& params,
                     const std::vector<std::pair<std::string, std::vector<double>>>& extras = {});
Checkpoint load_checkpoint(const std::string& path);

}  // namespace vidcount

#endif
