#ifndef VIDCOUNT_MATCHLOSS_HPP
#define VIDCOUNT_MATCHLOSS_HPP

#include <utility>
#include <vector>

#include "vidcount/common.hpp"
#include "vidcount/tensor.hpp"

namespace vidcount {

struct MatchWeights {
    double lambda_point = 1.0;
    double lambda_conf = 1.0;
};

struct CostMatrix {
    int n_pred = 0;
    int n_gt = 0;
    std::vector<double> entries;  // row-major, n_pred x n_gt

    double at(int i, int j) const { return entries[size_t(i) * n_gt + j]; }
    double& at(int i, int j) { return entries[size_t(i) * n_gt + j]; }
};

// One-to-one assignment of size min(n_pred, n_gt); pairs sorted by
// prediction index.
struct Assignment {
    std::vector<std::pair<int, int>> pairs;  // (prediction, ground truth)

    bool matched_pred(int i) const {
        for (const auto& p : pairs)
            if (p.first == i) return true;
        return false;
    }
};

struct LossWeights {
    double lambda_reg = 1.0;
    double lambda_dm = 0.25;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
};

struct LossBreakdown {
    double l_cls = 0;
    double l_loc = 0;
    double l_dm = 0;
    double total = 0;
};

// entry(i,j) = lambda_point * ||pred_i - gt_j||_1 - lambda_conf * conf_i,
// coordinates normalized to [0,1]^2.
CostMatrix build_cost_matrix(const std::vector<PointPrediction>& preds,
                             const std::vector<Point2>& gts, const MatchWeights& weights);

// Minimum-total-cost assignment; ties resolved toward the lexicographically
// smallest pair list.
Assignment hungarian(const CostMatrix& cost);

// Minimum achievable total cost (used by the tie-break search and tests).
double hungarian_cost(const CostMatrix& cost);

double assignment_cost(const CostMatrix& cost, const Assignment& assignment);

// Binary focal loss over query confidences, matched queries as targets and
// the rest as background, averaged over all queries.
Tensor focal_cls_loss(const Tensor& confidences, const Assignment& assignment, double alpha,
                      double gamma);

// Mean L1 distance over matched pairs in normalized coordinates.
Tensor point_l1_loss(const Tensor& coords, const std::vector<Point2>& gts,
                     const Assignment& assignment);

// Mean over maps of the squared L2 difference to the target map.
Tensor density_loss(const std::vector<Tensor>& predicted, const std::vector<Tensor>& target);

LossBreakdown total_loss(double l_cls, double l_loc, double l_dm, const LossWeights& weights);
Tensor total_loss(const Tensor& l_cls, const Tensor& l_loc, const Tensor& l_dm,
                  const LossWeights& weights);

}  // namespace vidcount

#endif
