#ifndef VIDCOUNT_TENSOR_HPP
#define VIDCOUNT_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

#include "vidcount/common.hpp"

namespace vidcount {

// Dense row-major tensor of 64-bit reals. A tensor is plain value data;
// it participates in differentiation only while `node` points at a live
// entry of the active tape (generation stamp guards against stale ids
// after a tape reset).
struct Tensor {
    std::vector<int> shape;
    std::vector<double> values;
    bool requires_grad = false;
    int node = -1;
    uint64_t gen = 0;

    Tensor() = default;
    Tensor(std::vector<int> shape_, std::vector<double> values_);

    static Tensor zeros(std::vector<int> shape_);
    static Tensor full(std::vector<int> shape_, double v);
    static Tensor scalar(double v);

    int64_t numel() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }
    int rank() const { return int(shape.size()); }
    double item() const;
    double at(std::initializer_list<int> idx) const;
    double& at(std::initializer_list<int> idx);
    void detach() { node = -1; gen = 0; }
};

// Gradients keyed by leaf node id, one array per leaf that participated
// in the loss.
class GradientMap {
public:
    bool contains(int node) const { return grads_.count(node) != 0; }
    const std::vector<double>& at(int node) const;
    void set(int node, std::vector<double> g) { grads_[node] = std::move(g); }
    size_t size() const { return grads_.size(); }

private:
    std::map<int, std::vector<double>> grads_;
};

// Reverse-mode tape. Nodes are appended in forward order, so the list is
// topologically sorted by construction; backpropagation walks it once in
// reverse, which makes gradients bit-identical across runs.
class Tape {
public:
    using Grads = std::vector<std::vector<double>>;
    using BackwardFn = std::function<void(const std::vector<double>& gout, Grads& grads)>;

    Tape();

    int add_leaf(int64_t numel);
    int add_node(int64_t numel, BackwardFn backward);

    GradientMap backpropagate(const Tensor& loss);
    void reset();

    uint64_t generation() const { return generation_; }
    size_t size() const { return nodes_.size(); }
    int64_t node_numel(int id) const { return nodes_[size_t(id)].numel; }

    static Tape* active();

private:
    struct Node {
        int64_t numel;
        BackwardFn backward;  // empty for leaves
        bool is_leaf;
    };
    std::vector<Node> nodes_;
    uint64_t generation_;
};

// RAII guard installing a tape as the active one for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// Registers `t` as a differentiable leaf on the active tape.
void watch(Tensor& t);

// Gradients of a scalar loss w.r.t. every watched leaf it depends on.
GradientMap backpropagate(const Tensor& loss);

// ---- forward primitives -------------------------------------------------
// Elementwise ops accept either identical shapes or a right operand whose
// shape is a suffix of the left one (broadcast over leading axes); that
// covers bias and per-channel affine terms.
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
// input [h,w,cin], kernel [kh,kw,cin,cout]; output floor((n+2p-k)/s)+1
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
Tensor upsample_bilinear(const Tensor& input, int out_h, int out_w);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& a);  // normalizes the last axis, eps 1e-5
Tensor reduce_sum(const Tensor& a);  // -> shape [1]
Tensor reduce_mean(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> new_shape);
Tensor transpose(const Tensor& a);  // 2-D
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, const std::vector<int>& offsets, const std::vector<int>& sizes);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor log(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double exponent);  // requires a > 0

// Max over coordinates of the relative error between the backpropagated
// gradient of f at x and a central finite difference with step epsilon.
// Relative error: |a-b| / max(1e-8, |a|+|b|).
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double epsilon);

}  // namespace vidcount

#endif
