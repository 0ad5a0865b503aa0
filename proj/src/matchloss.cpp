#include "vidcount/matchloss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vidcount {

CostMatrix build_cost_matrix(const std::vector<PointPrediction>& preds,
                             const std::vector<Point2>& gts, const MatchWeights& weights) {
    for (const Point2& g : gts) {
        if (g.x < 0 || g.x > 1 || g.y < 0 || g.y > 1) {
            throw DataError(strformat(
                "build_cost_matrix: ground truth (%g, %g) is not normalized to [0,1]", g.x, g.y));
        }
    }
    CostMatrix cost;
    cost.n_pred = int(preds.size());
    cost.n_gt = int(gts.size());
    cost.entries.resize(preds.size() * gts.size());
    for (int i = 0; i < cost.n_pred; ++i) {
        for (int j = 0; j < cost.n_gt; ++j) {
            const double l1 = std::fabs(preds[size_t(i)].x - gts[size_t(j)].x) +
                              std::fabs(preds[size_t(i)].y - gts[size_t(j)].y);
            cost.at(i, j) = weights.lambda_point * l1 - weights.lambda_conf * preds[size_t(i)].confidence;
        }
    }
    return cost;
}

namespace {

// O(n^3) assignment on a square matrix via the potentials method.
// Returns for each column its assigned row (matrix is padded by the caller).
std::vector<int> solve_square(const std::vector<double>& a, int n) {
    const double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(size_t(n) + 1, 0.0), v(size_t(n) + 1, 0.0);
    std::vector<int> p(size_t(n) + 1, 0), way(size_t(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(size_t(n) + 1, kInf);
        std::vector<char> used(size_t(n) + 1, 0);
        do {
            used[size_t(j0)] = 1;
            const int i0 = p[size_t(j0)];
            double delta = kInf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[size_t(j)]) continue;
                const double cur = a[size_t(i0 - 1) * n + (j - 1)] - u[size_t(i0)] - v[size_t(j)];
                if (cur < minv[size_t(j)]) {
                    minv[size_t(j)] = cur;
                    way[size_t(j)] = j0;
                }
                if (minv[size_t(j)] < delta) {
                    delta = minv[size_t(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[size_t(j)]) {
                    u[size_t(p[size_t(j)])] += delta;
                    v[size_t(j)] -= delta;
                } else {
                    minv[size_t(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[size_t(j0)] != 0);
        do {
            const int j1 = way[size_t(j0)];
            p[size_t(j0)] = p[size_t(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_of_col(size_t(n), -1);
    for (int j = 1; j <= n; ++j) row_of_col[size_t(j - 1)] = p[size_t(j)] - 1;
    return row_of_col;
}

// Minimum assignment cost over `rows` x `cols` of the given cost matrix,
// using exactly min(|rows|, |cols|) pairs. The smaller side is padded with
// zero-cost dummies, which leaves the real total unchanged.
double min_cost_subproblem(const CostMatrix& cost, const std::vector<int>& rows,
                           const std::vector<int>& cols) {
    const int nr = int(rows.size()), nc = int(cols.size());
    if (nr == 0 || nc == 0) return 0.0;
    const int n = std::max(nr, nc);
    std::vector<double> a(size_t(n) * n, 0.0);
    for (int i = 0; i < nr; ++i) {
        for (int j = 0; j < nc; ++j) {
            a[size_t(i) * n + j] = cost.at(rows[size_t(i)], cols[size_t(j)]);
        }
    }
    std::vector<int> row_of_col = solve_square(a, n);
    double total = 0;
    for (int j = 0; j < nc; ++j) {
        const int i = row_of_col[size_t(j)];
        if (i < nr) total += cost.at(rows[size_t(i)], cols[size_t(j)]);
    }
    return total;
}

}  // namespace

double hungarian_cost(const CostMatrix& cost) {
    std::vector<int> rows(size_t(cost.n_pred)), cols(size_t(cost.n_gt));
    for (int i = 0; i < cost.n_pred; ++i) rows[size_t(i)] = i;
    for (int j = 0; j < cost.n_gt; ++j) cols[size_t(j)] = j;
    return min_cost_subproblem(cost, rows, cols);
}

Assignment hungarian(const CostMatrix& cost) {
    for (double v : cost.entries) {
        if (!std::isfinite(v)) throw NumericError("hungarian: cost entries must be finite");
    }
    Assignment out;
    if (cost.n_pred == 0 || cost.n_gt == 0) return out;

    // Walk prediction indices in order, fixing for each the smallest ground
    // truth that keeps the remaining subproblem optimal. This produces the
    // lexicographically smallest pair list among the optimal assignments.
    std::vector<int> later_rows;
    for (int i = 0; i < cost.n_pred; ++i) later_rows.push_back(i);
    std::vector<int> avail_cols;
    for (int j = 0; j < cost.n_gt; ++j) avail_cols.push_back(j);

    double remaining = min_cost_subproblem(cost, later_rows, avail_cols);
    int pairs_needed = std::min(cost.n_pred, cost.n_gt);
    constexpr double kTieTol = 1e-9;

    for (int i = 0; i < cost.n_pred && pairs_needed > 0; ++i) {
        later_rows.erase(later_rows.begin());
        bool matched = false;
        for (size_t cj = 0; cj < avail_cols.size(); ++cj) {
            const int j = avail_cols[cj];
            std::vector<int> rest_cols = avail_cols;
            rest_cols.erase(rest_cols.begin() + long(cj));
            // the subproblem keeps exactly pairs_needed-1 pairs as long as
            // enough rows and columns remain, which the feasibility of the
            // original problem guarantees
            const double sub = min_cost_subproblem(cost, later_rows, rest_cols);
            if (cost.at(i, j) + sub <= remaining + kTieTol) {
                out.pairs.emplace_back(i, j);
                avail_cols = std::move(rest_cols);
                remaining = sub;
                --pairs_needed;
                matched = true;
                break;
            }
        }
        if (!matched) {
            // prediction i is unmatched in every optimal assignment
            continue;
        }
    }
    return out;
}

double assignment_cost(const CostMatrix& cost, const Assignment& assignment) {
    double total = 0;
    for (const auto& [i, j] : assignment.pairs) total += cost.at(i, j);
    return total;
}

Tensor focal_cls_loss(const Tensor& confidences, const Assignment& assignment, double alpha,
                      double gamma) {
    if (confidences.rank() != 1) {
        throw DataError("focal_cls_loss: confidences must be a rank-1 tensor");
    }
    for (double p : confidences.values) {
        if (!(p > 0.0 && p < 1.0)) {
            throw NumericError(strformat("focal_cls_loss: confidence %g outside (0,1)", p));
        }
    }
    const int n = confidences.shape[0];
    std::vector<double> target(size_t(n), 0.0);
    for (const auto& [i, j] : assignment.pairs) {
        (void)j;
        if (i < 0 || i >= n) throw DataError("focal_cls_loss: assignment index out of range");
        target[size_t(i)] = 1.0;
    }
    const Tensor ones = Tensor::full({n}, 1.0);
    const Tensor mask({n}, std::vector<double>(target));
    const Tensor inv_mask = subtract(ones, mask);
    const Tensor one_minus_p = subtract(ones, confidences);
    // matched:   -alpha * (1-p)^gamma * log(p)
    // background: -(1-alpha) * p^gamma * log(1-p)
    const Tensor pos = scale(multiply(pow_scalar(one_minus_p, gamma), log(confidences)), -alpha);
    const Tensor neg = scale(multiply(pow_scalar(confidences, gamma), log(one_minus_p)), -(1.0 - alpha));
    const Tensor per_query = add(multiply(mask, pos), multiply(inv_mask, neg));
    return reduce_mean(per_query);
}

Tensor point_l1_loss(const Tensor& coords, const std::vector<Point2>& gts,
                     const Assignment& assignment) {
    if (coords.rank() != 2 || coords.shape[1] != 2) {
        throw DataError("point_l1_loss: coords must have shape [n,2]");
    }
    if (assignment.pairs.empty()) return Tensor::scalar(0.0);
    std::vector<Tensor> rows;
    std::vector<double> targets;
    for (const auto& [i, j] : assignment.pairs) {
        if (i < 0 || i >= coords.shape[0] || j < 0 || j >= int(gts.size())) {
            throw DataError("point_l1_loss: assignment index out of range");
        }
        rows.push_back(slice(coords, {i, 0}, {1, 2}));
        targets.push_back(gts[size_t(j)].x);
        targets.push_back(gts[size_t(j)].y);
    }
    const Tensor matched = concat(rows, 0);
    const Tensor target({int(assignment.pairs.size()), 2}, std::move(targets));
    const Tensor diffs = abs(subtract(matched, target));
    return scale(reduce_sum(diffs), 1.0 / double(assignment.pairs.size()));
}

Tensor density_loss(const std::vector<Tensor>& predicted, const std::vector<Tensor>& target) {
    if (predicted.size() != target.size() || predicted.empty()) {
        throw DataError("density_loss: prediction/target map counts differ or are empty");
    }
    Tensor acc = Tensor::scalar(0.0);
    for (size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i].shape != target[i].shape) {
            throw DataError(strformat("density_loss: map %zu shape mismatch", i));
        }
        acc = add(acc, reduce_sum(square(subtract(predicted[i], target[i]))));
    }
    return scale(acc, 1.0 / double(predicted.size()));
}

LossBreakdown total_loss(double l_cls, double l_loc, double l_dm, const LossWeights& weights) {
    if (l_cls < 0 || l_loc < 0 || l_dm < 0) {
        throw NumericError(strformat("total_loss: components must be non-negative, got %g/%g/%g",
                                     l_cls, l_loc, l_dm));
    }
    LossBreakdown out;
    out.l_cls = l_cls;
    out.l_loc = l_loc;
    out.l_dm = l_dm;
    out.total = weights.lambda_reg * (l_cls + l_loc) + weights.lambda_dm * l_dm;
    return out;
}

Tensor total_loss(const Tensor& l_cls, const Tensor& l_loc, const Tensor& l_dm,
                  const LossWeights& weights) {
    return add(scale(add(l_cls, l_loc), weights.lambda_reg), scale(l_dm, weights.lambda_dm));
}

}  // namespace vidcount
