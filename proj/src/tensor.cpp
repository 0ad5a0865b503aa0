#include "vidcount/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace vidcount {

namespace {

thread_local Tape* g_active_tape = nullptr;
uint64_t g_tape_generation = 0;

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
    throw DataError(std::string("shape mismatch in ") + op + ": " + detail);
}

int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

// Node id of `t` if it is live on the active tape, else -1.
int live_id(const Tensor& t) {
    Tape* tape = Tape::active();
    if (!tape || t.node < 0 || t.gen != tape->generation()) return -1;
    return t.node;
}

void accumulate(Tape::Grads& grads, int id, int64_t numel,
                const std::function<void(std::vector<double>&)>& fn) {
    std::vector<double>& g = grads[size_t(id)];
    if (g.empty()) g.assign(size_t(numel), 0.0);
    fn(g);
}

Tensor finish(const char* op, std::vector<int> shape, std::vector<double> values,
              std::initializer_list<const Tensor*> inputs,
              const std::function<Tape::BackwardFn()>& make_backward) {
    check_finite(op, values);
    Tensor out(std::move(shape), std::move(values));
    bool any_live = false;
    for (const Tensor* t : inputs) {
        out.requires_grad = out.requires_grad || t->requires_grad;
        any_live = any_live || live_id(*t) >= 0;
    }
    if (any_live) {
        Tape* tape = Tape::active();
        out.node = tape->add_node(out.numel(), make_backward());
        out.gen = tape->generation();
    }
    return out;
}

// true when b's shape equals the trailing axes of a's shape
bool is_suffix(const std::vector<int>& a, const std::vector<int>& b) {
    if (b.size() > a.size()) return false;
    return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape_, std::vector<double> values_)
    : shape(std::move(shape_)), values(std::move(values_)) {
    for (int d : shape) {
        if (d <= 0) throw DataError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (numel() != int64_t(values.size())) {
        throw DataError(strformat("tensor values length %zu does not match shape %s",
                                  values.size(), shape_str(shape).c_str()));
    }
}

Tensor Tensor::zeros(std::vector<int> shape_) {
    std::vector<double> v(size_t(numel_of(shape_)), 0.0);
    return Tensor(std::move(shape_), std::move(v));
}

Tensor Tensor::full(std::vector<int> shape_, double value) {
    std::vector<double> v(size_t(numel_of(shape_)), value);
    return Tensor(std::move(shape_), std::move(v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

double Tensor::item() const {
    if (numel() != 1) throw DataError("item() requires a scalar tensor, got " + shape_str(shape));
    return values[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    return const_cast<Tensor*>(this)->at(idx);
}

double& Tensor::at(std::initializer_list<int> idx) {
    if (int(idx.size()) != rank()) throw DataError("index rank mismatch");
    int64_t flat = 0;
    int i = 0;
    for (int v : idx) {
        flat = flat * shape[size_t(i)] + v;
        ++i;
    }
    return values[size_t(flat)];
}

// ---- GradientMap / Tape ----------------------------------------------------

const std::vector<double>& GradientMap::at(int node) const {
    auto it = grads_.find(node);
    if (it == grads_.end()) {
        throw NumericError(strformat("no gradient recorded for leaf node %d", node));
    }
    return it->second;
}

Tape::Tape() : generation_(++g_tape_generation) {}

int Tape::add_leaf(int64_t numel) {
    nodes_.push_back(Node{numel, BackwardFn(), true});
    return int(nodes_.size()) - 1;
}

int Tape::add_node(int64_t numel, BackwardFn backward) {
    nodes_.push_back(Node{numel, std::move(backward), false});
    return int(nodes_.size()) - 1;
}

void Tape::reset() {
    nodes_.clear();
    generation_ = ++g_tape_generation;
}

Tape* Tape::active() { return g_active_tape; }

GradientMap Tape::backpropagate(const Tensor& loss) {
    if (loss.node < 0 || loss.gen != generation_ || loss.node >= int(nodes_.size())) {
        throw NumericError("backpropagate: loss is not on the active tape");
    }
    if (loss.numel() != 1) {
        throw NumericError("backpropagate: loss must be a scalar, got " + shape_str(loss.shape));
    }
    Grads grads(nodes_.size());
    grads[size_t(loss.node)] = {1.0};
    for (int i = loss.node; i >= 0; --i) {
        const Node& node = nodes_[size_t(i)];
        if (grads[size_t(i)].empty() || node.is_leaf) continue;
        node.backward(grads[size_t(i)], grads);
    }
    GradientMap out;
    for (int i = 0; i <= loss.node; ++i) {
        if (nodes_[size_t(i)].is_leaf && !grads[size_t(i)].empty()) {
            out.set(i, std::move(grads[size_t(i)]));
        }
    }
    return out;
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

void watch(Tensor& t) {
    Tape* tape = Tape::active();
    if (!tape) throw NumericError("watch: no active tape");
    t.node = tape->add_leaf(t.numel());
    t.gen = tape->generation();
    t.requires_grad = true;
}

GradientMap backpropagate(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) throw NumericError("backpropagate: no active tape");
    return tape->backpropagate(loss);
}

// ---- elementwise binary ops -------------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const char* name, BinKind kind, const Tensor& a, const Tensor& b) {
    if (!is_suffix(a.shape, b.shape)) {
        shape_fail(name, shape_str(a.shape) + " vs " + shape_str(b.shape) +
                             " (right operand must match or be a trailing-axes broadcast)");
    }
    const int64_t n = a.numel();
    const int64_t bn = b.numel();
    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double bv = b.values[size_t(i % bn)];
        double av = a.values[size_t(i)];
        switch (kind) {
            case BinKind::Add: out[size_t(i)] = av + bv; break;
            case BinKind::Sub: out[size_t(i)] = av - bv; break;
            case BinKind::Mul: out[size_t(i)] = av * bv; break;
        }
    }
    int ia = live_id(a), ib = live_id(b);
    std::vector<double> asave, bsave;
    if (kind == BinKind::Mul) {
        if (ib >= 0) asave = a.values;
        if (ia >= 0) bsave = b.values;
    }
    return finish(name, a.shape, std::move(out), {&a, &b}, [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            if (ia >= 0) {
                accumulate(grads, ia, n, [&](std::vector<double>& ga) {
                    for (int64_t i = 0; i < n; ++i) {
                        double w = (kind == BinKind::Mul) ? bsave[size_t(i % bn)] : 1.0;
                        ga[size_t(i)] += g[size_t(i)] * w;
                    }
                });
            }
            if (ib >= 0) {
                accumulate(grads, ib, bn, [&](std::vector<double>& gb) {
                    for (int64_t i = 0; i < n; ++i) {
                        double w = 1.0;
                        if (kind == BinKind::Mul) w = asave[size_t(i)];
                        else if (kind == BinKind::Sub) w = -1.0;
                        gb[size_t(i % bn)] += g[size_t(i)] * w;
                    }
                });
            }
        };
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinKind::Add, a, b); }
Tensor subtract(const Tensor& a, const Tensor& b) { return binary_op("subtract", BinKind::Sub, a, b); }
Tensor multiply(const Tensor& a, const Tensor& b) { return binary_op("multiply", BinKind::Mul, a, b); }

Tensor scale(const Tensor& a, double c) {
    if (!std::isfinite(c)) throw NumericError("scale: factor must be finite");
    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[size_t(i)] = a.values[size_t(i)] * c;
    int ia = live_id(a);
    return finish("scale", a.shape, std::move(out), {&a}, [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            accumulate(grads, ia, n, [&](std::vector<double>& ga) {
                for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)] * c;
            });
        };
    });
}

// ---- elementwise unary ops --------------------------------------------------

namespace {

// dfdx receives (x, f(x))
Tensor unary_op(const char* name, const Tensor& a,
                const std::function<double(double)>& f,
                const std::function<double(double, double)>& dfdx,
                const std::function<void(double)>& domain_check = nullptr) {
    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double x = a.values[size_t(i)];
        if (domain_check) domain_check(x);
        out[size_t(i)] = f(x);
    }
    int ia = live_id(a);
    std::vector<double> xsave, ysave;
    if (ia >= 0) {
        xsave = a.values;
        ysave = out;
    }
    return finish(name, a.shape, std::move(out), {&a}, [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            accumulate(grads, ia, n, [&](std::vector<double>& ga) {
                for (int64_t i = 0; i < n; ++i) {
                    ga[size_t(i)] += g[size_t(i)] * dfdx(xsave[size_t(i)], ysave[size_t(i)]);
                }
            });
        };
    });
}

}  // namespace

Tensor relu(const Tensor& a) {
    return unary_op(
        "relu", a, [](double x) { return x > 0 ? x : 0.0; },
        [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
    return unary_op(
        "abs", a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
    return unary_op(
        "square", a, [](double x) { return x * x; },
        [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double x, double y) { return x > 0 ? 0.5 / y : 0.0; },
        [](double x) {
            if (x < 0) throw NumericError(strformat("sqrt of negative input %g", x));
        });
}

Tensor log(const Tensor& a) {
    return unary_op(
        "log", a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; },
        [](double x) {
            if (x <= 0) throw NumericError(strformat("log of non-positive input %g", x));
        });
}

Tensor pow_scalar(const Tensor& a, double exponent) {
    return unary_op(
        "pow_scalar", a, [=](double x) { return std::pow(x, exponent); },
        [=](double x, double) { return exponent == 0.0 ? 0.0 : exponent * std::pow(x, exponent - 1.0); },
        [](double x) {
            if (x <= 0) throw NumericError(strformat("pow_scalar of non-positive input %g", x));
        });
}

// ---- matmul ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        shape_fail("matmul", "expects 2-D operands, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
    }
    const int n = a.shape[0], k = a.shape[1], k2 = b.shape[0], m = b.shape[1];
    if (k != k2) {
        shape_fail("matmul", strformat("inner dimensions %d vs %d", k, k2));
    }
    std::vector<double> out(size_t(n) * size_t(m), 0.0);
    for (int i = 0; i < n; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = a.values[size_t(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = &b.values[size_t(p) * m];
            double* orow = &out[size_t(i) * m];
            for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    int ia = live_id(a), ib = live_id(b);
    std::vector<double> asave, bsave;
    if (ib >= 0) asave = a.values;
    if (ia >= 0) bsave = b.values;
    return finish("matmul", {n, m}, std::move(out), {&a, &b}, [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            if (ia >= 0) {
                accumulate(grads, ia, int64_t(n) * k, [&](std::vector<double>& ga) {
                    // dA = G * B^T
                    for (int i = 0; i < n; ++i)
                        for (int p = 0; p < k; ++p) {
                            double s = 0;
                            for (int j = 0; j < m; ++j)
                                s += g[size_t(i) * m + j] * bsave[size_t(p) * m + j];
                            ga[size_t(i) * k + p] += s;
                        }
                });
            }
            if (ib >= 0) {
                accumulate(grads, ib, int64_t(k) * m, [&](std::vector<double>& gb) {
                    // dB = A^T * G
                    for (int p = 0; p < k; ++p)
                        for (int i = 0; i < n; ++i) {
                            const double av = asave[size_t(i) * k + p];
                            if (av == 0.0) continue;
                            for (int j = 0; j < m; ++j)
                                gb[size_t(p) * m + j] += av * g[size_t(i) * m + j];
                        }
                });
            }
        };
    });
}

// ---- conv2d ------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    if (input.rank() != 3 || kernel.rank() != 4) {
        shape_fail("conv2d", "expects input [h,w,c] and kernel [kh,kw,cin,cout], got " +
                                 shape_str(input.shape) + " and " + shape_str(kernel.shape));
    }
    if (stride < 1 || padding < 0) throw DataError("conv2d: stride must be >=1 and padding >=0");
    const int h = input.shape[0], w = input.shape[1], cin = input.shape[2];
    const int kh = kernel.shape[0], kw = kernel.shape[1];
    const int kcin = kernel.shape[2], cout = kernel.shape[3];
    if (cin != kcin) {
        shape_fail("conv2d", strformat("input channels %d vs kernel channels %d", cin, kcin));
    }
    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (w + 2 * padding - kw) / stride + 1;
    if (h + 2 * padding < kh || w + 2 * padding < kw) {
        shape_fail("conv2d", strformat("kernel %dx%d larger than padded input %dx%d", kh, kw,
                                       h + 2 * padding, w + 2 * padding));
    }
    std::vector<double> out(size_t(oh) * ow * cout, 0.0);
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            double* opix = &out[(size_t(oy) * ow + ox) * cout];
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride + ky - padding;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride + kx - padding;
                    if (ix < 0 || ix >= w) continue;
                    const double* ipix = &input.values[(size_t(iy) * w + ix) * cin];
                    const double* kpos = &kernel.values[(size_t(ky) * kw + kx) * cin * cout];
                    for (int ci = 0; ci < cin; ++ci) {
                        const double iv = ipix[ci];
                        if (iv == 0.0) continue;
                        const double* kvec = &kpos[size_t(ci) * cout];
                        for (int co = 0; co < cout; ++co) opix[co] += iv * kvec[co];
                    }
                }
            }
        }
    }
    int ii = live_id(input), ik = live_id(kernel);
    std::vector<double> isave, ksave;
    if (ik >= 0) isave = input.values;
    if (ii >= 0) ksave = kernel.values;
    return finish("conv2d", {oh, ow, cout}, std::move(out), {&input, &kernel},
                  [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            if (ii >= 0) {
                accumulate(grads, ii, int64_t(h) * w * cin, [&](std::vector<double>& gi) {
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            const double* gpix = &g[(size_t(oy) * ow + ox) * cout];
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * stride + ky - padding;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * stride + kx - padding;
                                    if (ix < 0 || ix >= w) continue;
                                    double* gipix = &gi[(size_t(iy) * w + ix) * cin];
                                    const double* kpos = &ksave[(size_t(ky) * kw + kx) * cin * cout];
                                    for (int ci = 0; ci < cin; ++ci) {
                                        double s = 0;
                                        const double* kvec = &kpos[size_t(ci) * cout];
                                        for (int co = 0; co < cout; ++co) s += kvec[co] * gpix[co];
                                        gipix[ci] += s;
                                    }
                                }
                            }
                        }
                });
            }
            if (ik >= 0) {
                accumulate(grads, ik, int64_t(kh) * kw * cin * cout, [&](std::vector<double>& gk) {
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            const double* gpix = &g[(size_t(oy) * ow + ox) * cout];
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * stride + ky - padding;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * stride + kx - padding;
                                    if (ix < 0 || ix >= w) continue;
                                    const double* ipix = &isave[(size_t(iy) * w + ix) * cin];
                                    double* kpos = &gk[(size_t(ky) * kw + kx) * cin * cout];
                                    for (int ci = 0; ci < cin; ++ci) {
                                        const double iv = ipix[ci];
                                        if (iv == 0.0) continue;
                                        double* kvec = &kpos[size_t(ci) * cout];
                                        for (int co = 0; co < cout; ++co) kvec[co] += iv * gpix[co];
                                    }
                                }
                            }
                        }
                });
            }
        };
    });
}

// ---- bilinear upsample ---------------------------------------------------------

Tensor upsample_bilinear(const Tensor& input, int out_h, int out_w) {
    if (input.rank() != 3) {
        shape_fail("upsample_bilinear", "expects [h,w,c], got " + shape_str(input.shape));
    }
    if (out_h < 1 || out_w < 1) throw DataError("upsample_bilinear: output extent must be positive");
    const int h = input.shape[0], w = input.shape[1], c = input.shape[2];
    struct Corner { int y0, y1, x0, x1; double wy, wx; };
    std::vector<Corner> corners(size_t(out_h) * out_w);
    for (int y = 0; y < out_h; ++y) {
        double sy = (y + 0.5) * double(h) / out_h - 0.5;
        int y0 = int(std::floor(sy));
        double fy = sy - y0;
        int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
        for (int x = 0; x < out_w; ++x) {
            double sx = (x + 0.5) * double(w) / out_w - 0.5;
            int x0 = int(std::floor(sx));
            double fx = sx - x0;
            int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
            corners[size_t(y) * out_w + x] = Corner{y0c, y1c, x0c, x1c, fy, fx};
        }
    }
    std::vector<double> out(size_t(out_h) * out_w * c, 0.0);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            const Corner& cr = corners[size_t(y) * out_w + x];
            double* opix = &out[(size_t(y) * out_w + x) * c];
            const double w00 = (1 - cr.wy) * (1 - cr.wx), w01 = (1 - cr.wy) * cr.wx;
            const double w10 = cr.wy * (1 - cr.wx), w11 = cr.wy * cr.wx;
            const double* p00 = &input.values[(size_t(cr.y0) * w + cr.x0) * c];
            const double* p01 = &input.values[(size_t(cr.y0) * w + cr.x1) * c];
            const double* p10 = &input.values[(size_t(cr.y1) * w + cr.x0) * c];
            const double* p11 = &input.values[(size_t(cr.y1) * w + cr.x1) * c];
            for (int ch = 0; ch < c; ++ch)
                opix[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
        }
    int ii = live_id(input);
    return finish("upsample_bilinear", {out_h, out_w, c}, std::move(out), {&input},
                  [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            accumulate(grads, ii, int64_t(h) * w * c, [&](std::vector<double>& gi) {
                for (int y = 0; y < out_h; ++y)
                    for (int x = 0; x < out_w; ++x) {
                        const Corner& cr = corners[size_t(y) * out_w + x];
                        const double* gpix = &g[(size_t(y) * out_w + x) * c];
                        const double w00 = (1 - cr.wy) * (1 - cr.wx), w01 = (1 - cr.wy) * cr.wx;
                        const double w10 = cr.wy * (1 - cr.wx), w11 = cr.wy * cr.wx;
                        for (int ch = 0; ch < c; ++ch) {
                            const double gv = gpix[ch];
                            gi[(size_t(cr.y0) * w + cr.x0) * c + ch] += w00 * gv;
                            gi[(size_t(cr.y0) * w + cr.x1) * c + ch] += w01 * gv;
                            gi[(size_t(cr.y1) * w + cr.x0) * c + ch] += w10 * gv;
                            gi[(size_t(cr.y1) * w + cr.x1) * c + ch] += w11 * gv;
                        }
                    }
            });
        };
    });
}

// ---- softmax / layer norm ------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank()) {
        shape_fail("softmax", strformat("axis %d out of range for %s", axis, shape_str(a.shape).c_str()));
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.shape[size_t(i)];
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.shape[size_t(i)];
    const int64_t n = a.shape[size_t(axis)];
    std::vector<double> out(a.values.size());
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            double mx = a.values[size_t(base)];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, a.values[size_t(base + j * inner)]);
            double sum = 0;
            for (int64_t j = 0; j < n; ++j) {
                double e = std::exp(a.values[size_t(base + j * inner)] - mx);
                out[size_t(base + j * inner)] = e;
                sum += e;
            }
            for (int64_t j = 0; j < n; ++j) out[size_t(base + j * inner)] /= sum;
        }
    }
    int ia = live_id(a);
    std::vector<double> ysave;
    if (ia >= 0) ysave = out;
    const int64_t total = a.numel();
    return finish("softmax", a.shape, std::move(out), {&a}, [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            accumulate(grads, ia, total, [&](std::vector<double>& ga) {
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t in = 0; in < inner; ++in) {
                        const int64_t base = o * n * inner + in;
                        double dot = 0;
                        for (int64_t j = 0; j < n; ++j) {
                            const size_t k = size_t(base + j * inner);
                            dot += g[k] * ysave[k];
                        }
                        for (int64_t j = 0; j < n; ++j) {
                            const size_t k = size_t(base + j * inner);
                            ga[k] += ysave[k] * (g[k] - dot);
                        }
                    }
            });
        };
    });
}

Tensor layer_norm(const Tensor& a) {
    constexpr double kEps = 1e-5;
    if (a.rank() < 1) shape_fail("layer_norm", "requires rank >= 1");
    const int64_t d = a.shape.back();
    const int64_t rows = a.numel() / d;
    std::vector<double> out(a.values.size());
    std::vector<double> inv_std(static_cast<size_t>(rows));
    std::vector<double> xhat(a.values.size());
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = &a.values[size_t(r * d)];
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += x[j];
        mean /= double(d);
        double var = 0;
        for (int64_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= double(d);
        const double is = 1.0 / std::sqrt(var + kEps);
        inv_std[size_t(r)] = is;
        for (int64_t j = 0; j < d; ++j) {
            xhat[size_t(r * d + j)] = (x[j] - mean) * is;
            out[size_t(r * d + j)] = xhat[size_t(r * d + j)];
        }
    }
    int ia = live_id(a);
    const int64_t total = a.numel();
    return finish("layer_norm", a.shape, std::move(out), {&a}, [&]() -> Tape::BackwardFn {
        return [=, xh = std::move(xhat), is = std::move(inv_std)](const std::vector<double>& g,
                                                                 Tape::Grads& grads) {
            accumulate(grads, ia, total, [&](std::vector<double>& ga) {
                for (int64_t r = 0; r < rows; ++r) {
                    const double* gr = &g[size_t(r * d)];
                    const double* xr = &xh[size_t(r * d)];
                    double gmean = 0, gxmean = 0;
                    for (int64_t j = 0; j < d; ++j) {
                        gmean += gr[j];
                        gxmean += gr[j] * xr[j];
                    }
                    gmean /= double(d);
                    gxmean /= double(d);
                    for (int64_t j = 0; j < d; ++j) {
                        ga[size_t(r * d + j)] += is[size_t(r)] * (gr[j] - gmean - xr[j] * gxmean);
                    }
                }
            });
        };
    });
}

// ---- reductions / shape ops -----------------------------------------------------

Tensor reduce_sum(const Tensor& a) {
    double s = 0;
    for (double v : a.values) s += v;
    const int64_t n = a.numel();
    int ia = live_id(a);
    return finish("reduce_sum", {1}, {s}, {&a}, [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            accumulate(grads, ia, n, [&](std::vector<double>& ga) {
                for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[0];
            });
        };
    });
}

Tensor reduce_mean(const Tensor& a) {
    double s = 0;
    for (double v : a.values) s += v;
    const int64_t n = a.numel();
    int ia = live_id(a);
    return finish("reduce_mean", {1}, {s / double(n)}, {&a}, [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            accumulate(grads, ia, n, [&](std::vector<double>& ga) {
                const double gv = g[0] / double(n);
                for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += gv;
            });
        };
    });
}

Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    if (numel_of(new_shape) != a.numel()) {
        shape_fail("reshape", shape_str(a.shape) + " cannot reshape to " + shape_str(new_shape));
    }
    const int64_t n = a.numel();
    int ia = live_id(a);
    std::vector<double> vals = a.values;
    return finish("reshape", std::move(new_shape), std::move(vals), {&a}, [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            accumulate(grads, ia, n, [&](std::vector<double>& ga) {
                for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)];
            });
        };
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) shape_fail("transpose", "expects 2-D, got " + shape_str(a.shape));
    const int n = a.shape[0], m = a.shape[1];
    std::vector<double> out(size_t(n) * m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out[size_t(j) * n + i] = a.values[size_t(i) * m + j];
    int ia = live_id(a);
    return finish("transpose", {m, n}, std::move(out), {&a}, [&]() -> Tape::BackwardFn {
        return [=](const std::vector<double>& g, Tape::Grads& grads) {
            accumulate(grads, ia, int64_t(n) * m, [&](std::vector<double>& ga) {
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) ga[size_t(i) * m + j] += g[size_t(j) * n + i];
            });
        };
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DataError("concat: no inputs");
    const int rank = parts[0].rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) shape_fail("concat", strformat("axis %d out of range", axis));
    std::vector<int> out_shape = parts[0].shape;
    int axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) shape_fail("concat", "rank mismatch across inputs");
        for (int i = 0; i < rank; ++i) {
            if (i != axis && p.shape[size_t(i)] != out_shape[size_t(i)]) {
                shape_fail("concat", strformat("dimension %d differs: %d vs %d", i,
                                               p.shape[size_t(i)], out_shape[size_t(i)]));
            }
        }
        axis_total += p.shape[size_t(axis)];
    }
    out_shape[size_t(axis)] = axis_total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[size_t(i)];
    for (int i = axis + 1; i < rank; ++i) inner *= out_shape[size_t(i)];
    std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));
    std::vector<int> part_axis(parts.size());
    std::vector<int> part_ids(parts.size());
    std::vector<int64_t> part_numel(parts.size());
    int64_t off = 0;
    bool any = false;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor& p = parts[pi];
        part_axis[pi] = p.shape[size_t(axis)];
        part_ids[pi] = live_id(p);
        part_numel[pi] = p.numel();
        any = any || part_ids[pi] >= 0;
        for (int64_t o = 0; o < outer; ++o) {
            const int64_t src = o * part_axis[pi] * inner;
            const int64_t dst = o * axis_total * inner + off * inner;
            std::copy(p.values.begin() + src, p.values.begin() + src + part_axis[pi] * inner,
                      out.begin() + dst);
        }
        off += part_axis[pi];
    }
    check_finite("concat", out);
    Tensor result(std::move(out_shape), std::move(out));
    for (const Tensor& p : parts) result.requires_grad = result.requires_grad || p.requires_grad;
    Tape* tape = Tape::active();
    if (any && tape) {
        result.node = tape->add_node(
            result.numel(),
            [=](const std::vector<double>& g, Tape::Grads& grads) {
                int64_t run = 0;
                for (size_t pi = 0; pi < part_ids.size(); ++pi) {
                    const int64_t pa = part_axis[pi];
                    if (part_ids[pi] >= 0) {
                        accumulate(grads, part_ids[pi], part_numel[pi], [&](std::vector<double>& gp) {
                            for (int64_t o = 0; o < outer; ++o) {
                                const int64_t src = o * axis_total * inner + run * inner;
                                const int64_t dst = o * pa * inner;
                                for (int64_t i = 0; i < pa * inner; ++i)
                                    gp[size_t(dst + i)] += g[size_t(src + i)];
                            }
                        });
                    }
                    run += pa;
                }
            });
        result.gen = tape->generation();
    }
    return result;
}

Tensor slice(const Tensor& a, const std::vector<int>& offsets, const std::vector<int>& sizes) {
    const int rank = a.rank();
    if (int(offsets.size()) != rank || int(sizes.size()) != rank) {
        shape_fail("slice", "offsets/sizes rank mismatch with " + shape_str(a.shape));
    }
    for (int i = 0; i < rank; ++i) {
        if (offsets[size_t(i)] < 0 || sizes[size_t(i)] < 1 ||
            offsets[size_t(i)] + sizes[size_t(i)] > a.shape[size_t(i)]) {
            shape_fail("slice", strformat("window [%d,%d) out of bounds on axis %d of extent %d",
                                          offsets[size_t(i)], offsets[size_t(i)] + sizes[size_t(i)],
                                          i, a.shape[size_t(i)]));
        }
    }
    std::vector<int> strides(size_t(rank), 1);
    for (int i = rank - 2; i >= 0; --i)
        strides[size_t(i)] = strides[size_t(i + 1)] * a.shape[size_t(i + 1)];
    const int64_t out_n = numel_of(sizes);
    std::vector<double> out(static_cast<size_t>(out_n));
    std::vector<int64_t> src_index(static_cast<size_t>(out_n));
    std::vector<int> idx(size_t(rank), 0);
    for (int64_t flat = 0; flat < out_n; ++flat) {
        int64_t src = 0;
        for (int i = 0; i < rank; ++i)
            src += int64_t(offsets[size_t(i)] + idx[size_t(i)]) * strides[size_t(i)];
        out[size_t(flat)] = a.values[size_t(src)];
        src_index[size_t(flat)] = src;
        for (int i = rank - 1; i >= 0; --i) {
            if (++idx[size_t(i)] < sizes[size_t(i)]) break;
            idx[size_t(i)] = 0;
        }
    }
    int ia = live_id(a);
    const int64_t in_n = a.numel();
    return finish("slice", sizes, std::move(out), {&a}, [&]() -> Tape::BackwardFn {
        return [=, src = std::move(src_index)](const std::vector<double>& g, Tape::Grads& grads) {
            accumulate(grads, ia, in_n, [&](std::vector<double>& ga) {
                for (int64_t flat = 0; flat < out_n; ++flat)
                    ga[size_t(src[size_t(flat)])] += g[size_t(flat)];
            });
        };
    });
}

// ---- finite differences ------------------------------------------------------------

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double epsilon) {
    if (epsilon <= 0) throw NumericError("finite_difference_check: epsilon must be positive");
    std::vector<double> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor xt = x;
        xt.detach();
        watch(xt);
        Tensor loss = f(xt);
        if (loss.numel() != 1) {
            throw NumericError("finite_difference_check: f must return a scalar");
        }
        GradientMap grads = backpropagate(loss);
        analytic = grads.contains(xt.node) ? grads.at(xt.node)
                                           : std::vector<double>(size_t(x.numel()), 0.0);
    }
    double max_rel = 0;
    Tensor probe = x;
    probe.detach();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = probe.values[size_t(i)];
        probe.values[size_t(i)] = orig + epsilon;
        const double fp = f(probe).item();
        probe.values[size_t(i)] = orig - epsilon;
        const double fm = f(probe).item();
        probe.values[size_t(i)] = orig;
        const double fd = (fp - fm) / (2.0 * epsilon);
        const double a = analytic[size_t(i)];
        const double rel = std::fabs(a - fd) / std::max(1e-8, std::fabs(a) + std::fabs(fd));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace vidcount
