#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "vidcount/matchloss.hpp"

using namespace vidcount;

namespace {

// Exhaustive assignment search, the independent oracle for the matcher.
// Enumerates every injective mapping of the smaller side into the larger.
double brute_force_min_cost(const CostMatrix& cost) {
    const int n = cost.n_pred, m = cost.n_gt;
    if (n == 0 || m == 0) return 0.0;
    double best = std::numeric_limits<double>::infinity();
    if (n <= m) {
        std::vector<int> cols(static_cast<size_t>(m));
        std::iota(cols.begin(), cols.end(), 0);
        std::sort(cols.begin(), cols.end());
        do {
            double total = 0;
            for (int i = 0; i < n; ++i) total += cost.at(i, cols[size_t(i)]);
            best = std::min(best, total);
        } while (std::next_permutation(cols.begin(), cols.end()));
    } else {
        std::vector<int> rows(static_cast<size_t>(n));
        std::iota(rows.begin(), rows.end(), 0);
        do {
            double total = 0;
            for (int j = 0; j < m; ++j) total += cost.at(rows[size_t(j)], j);
            best = std::min(best, total);
        } while (std::next_permutation(rows.begin(), rows.end()));
    }
    return best;
}

CostMatrix random_cost(int n, int m, Rng& rng, double lo = -5.0, double hi = 5.0) {
    CostMatrix c;
    c.n_pred = n;
    c.n_gt = m;
    c.entries.resize(size_t(n) * m);
    for (double& v : c.entries) v = rng.uniform(lo, hi);
    return c;
}

bool valid_assignment(const Assignment& a, int n, int m) {
    if (int(a.pairs.size()) != std::min(n, m)) return false;
    std::vector<char> ri(size_t(n), 0), cj(size_t(m), 0);
    for (const auto& [i, j] : a.pairs) {
        if (i < 0 || i >= n || j < 0 || j >= m) return false;
        if (ri[size_t(i)] || cj[size_t(j)]) return false;
        ri[size_t(i)] = cj[size_t(j)] = 1;
    }
    return true;
}

}  // namespace

TEST_CASE("cost matrix formula") {
    MatchWeights w;
    SUBCASE("coincident confident prediction") {
        CostMatrix c = build_cost_matrix({{0.5, 0.5, 1.0}}, {{0.5, 0.5}}, w);
        CHECK(c.at(0, 0) == doctest::Approx(-1.0));
    }
    SUBCASE("zero-confidence coincident prediction") {
        CostMatrix c = build_cost_matrix({{0.25, 0.75, 0.0}}, {{0.25, 0.75}}, w);
        CHECK(c.at(0, 0) == doctest::Approx(0.0));
    }
    SUBCASE("uniform confidence shift preserves the argmin pair set") {
        Rng rng(8);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<PointPrediction> preds;
            std::vector<Point2> gts;
            for (int i = 0; i < 5; ++i) {
                preds.push_back({rng.uniform(), rng.uniform(), rng.uniform(0.05, 0.55)});
            }
            for (int j = 0; j < 4; ++j) gts.push_back({rng.uniform(), rng.uniform()});
            CostMatrix base = build_cost_matrix(preds, gts, w);
            std::vector<PointPrediction> shifted = preds;
            for (auto& p : shifted) p.confidence += 0.4;
            CostMatrix moved = build_cost_matrix(shifted, gts, w);
            for (size_t k = 0; k < base.entries.size(); ++k) {
                CHECK(moved.entries[k] == doctest::Approx(base.entries[k] - 0.4));
            }
            CHECK(hungarian(base).pairs == hungarian(moved).pairs);
        }
    }
    SUBCASE("unnormalized ground truth rejected") {
        CHECK_THROWS_AS(build_cost_matrix({{0.5, 0.5, 0.5}}, {{1.5, 0.0}}, w), DataError);
    }
}

TEST_CASE("hungarian fixtures") {
    SUBCASE("diagonal dominance gives identity") {
        CostMatrix c{3, 3, {0, 5, 5, 5, 0, 5, 5, 5, 0}};
        Assignment a = hungarian(c);
        CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}});
    }
    SUBCASE("worked 3x3 example") {
        CostMatrix c{3, 3, {4, 1, 3, 2, 0, 5, 3, 2, 2}};
        CHECK(brute_force_min_cost(c) == doctest::Approx(5.0));
        Assignment a = hungarian(c);
        CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 1}, {1, 0}, {2, 2}});
        CHECK(assignment_cost(c, a) == doctest::Approx(5.0));
    }
    SUBCASE("single row picks its minimum") {
        CostMatrix c{1, 3, {5, 2, 7}};
        Assignment a = hungarian(c);
        CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 1}});
    }
    SUBCASE("empty matrix yields empty assignment") {
        CostMatrix c{0, 0, {}};
        CHECK(hungarian(c).pairs.empty());
        CostMatrix c2{2, 0, {}};
        CHECK(hungarian(c2).pairs.empty());
    }
    SUBCASE("ties break toward the lexicographically smallest pair list") {
        CostMatrix zeros{3, 3, std::vector<double>(9, 0.0)};
        Assignment a = hungarian(zeros);
        CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}});
        // two optimal solutions: (0,0),(1,1) and (0,1),(1,0); prefer the first
        CostMatrix tie{2, 2, {1, 1, 1, 1}};
        CHECK(hungarian(tie).pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
    }
}

TEST_CASE("hungarian agrees with brute force on random matrices") {
    Rng rng(31337);
    for (int trial = 0; trial < 120; ++trial) {
        const int n = rng.uniform_int(1, 7);
        const int m = rng.uniform_int(1, 7);
        CostMatrix c = random_cost(n, m, rng);
        Assignment a = hungarian(c);
        REQUIRE(valid_assignment(a, n, m));
        const double got = assignment_cost(c, a);
        const double want = brute_force_min_cost(c);
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("focal classification loss") {
    LossWeights w;
    SUBCASE("matched query with certain-ish prediction contributes almost nothing") {
        Tensor conf({1}, {1.0 - 1e-12});
        Assignment a;
        a.pairs = {{0, 0}};
        CHECK(focal_cls_loss(conf, a, w.focal_alpha, w.focal_gamma).item() ==
              doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("matched query at half confidence") {
        Tensor conf({1}, {0.5});
        Assignment a;
        a.pairs = {{0, 0}};
        const double got = focal_cls_loss(conf, a, 0.25, 2.0).item();
        CHECK(std::fabs(got - 0.043322) < 1e-6);
    }
    SUBCASE("background query at low confidence") {
        Tensor conf({1}, {0.1});
        Assignment a;
        const double got = focal_cls_loss(conf, a, 0.25, 2.0).item();
        CHECK(std::fabs(got - 0.000790) < 1e-6);
    }
    SUBCASE("gamma 0 and alpha 0.5 reduce to scaled cross-entropy") {
        Rng rng(17);
        for (int trial = 0; trial < 10; ++trial) {
            const int n = 6;
            std::vector<double> p(static_cast<size_t>(n));
            for (double& v : p) v = rng.uniform(0.02, 0.98);
            Tensor conf({n}, std::vector<double>(p));
            Assignment a;
            a.pairs = {{1, 0}, {4, 1}};
            const double got = focal_cls_loss(conf, a, 0.5, 0.0).item();
            double bce = 0;
            for (int i = 0; i < n; ++i) {
                const bool pos = i == 1 || i == 4;
                bce += pos ? -std::log(p[size_t(i)]) : -std::log(1.0 - p[size_t(i)]);
            }
            bce /= n;
            CHECK(std::fabs(got - 0.5 * bce) <= 1e-12);
        }
    }
    SUBCASE("confidence bounds enforced") {
        Tensor conf({2}, {0.5, 1.0});
        Assignment a;
        CHECK_THROWS_AS(focal_cls_loss(conf, a, 0.25, 2.0), NumericError);
    }
}

TEST_CASE("point L1 loss") {
    Assignment a;
    SUBCASE("coincident pair") {
        a.pairs = {{0, 0}};
        Tensor coords({1, 2}, {0.3, 0.4});
        CHECK(point_l1_loss(coords, {{0.3, 0.4}}, a).item() == doctest::Approx(0.0));
    }
    SUBCASE("worked example") {
        a.pairs = {{0, 0}};
        Tensor coords({1, 2}, {0.2, 0.2});
        CHECK(point_l1_loss(coords, {{0.5, 0.6}}, a).item() == doctest::Approx(0.7));
    }
    SUBCASE("no ground truth yields zero") {
        Assignment empty;
        Tensor coords({3, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
        CHECK(point_l1_loss(coords, {}, empty).item() == doctest::Approx(0.0));
    }
    SUBCASE("mean over pairs") {
        Assignment two;
        two.pairs = {{0, 0}, {1, 1}};
        Tensor coords({2, 2}, {0.0, 0.0, 1.0, 1.0});
        const double got = point_l1_loss(coords, {{0.1, 0.1}, {0.8, 0.7}}, two).item();
        CHECK(got == doctest::Approx((0.2 + 0.5) / 2.0));
    }
}

TEST_CASE("density loss") {
    SUBCASE("identical maps") {
        Tensor m = Tensor::full({4, 4, 1}, 0.37);
        CHECK(density_loss({m}, {m}).item() == doctest::Approx(0.0));
    }
    SUBCASE("single differing pixel") {
        Tensor a = Tensor::zeros({2, 2, 1});
        Tensor b = Tensor::zeros({2, 2, 1});
        b.values[2] = 2.0;
        CHECK(density_loss({a}, {b}).item() == doctest::Approx(4.0));
    }
    SUBCASE("mean over maps") {
        Tensor a = Tensor::zeros({2, 2, 1});
        Tensor b = Tensor::zeros({2, 2, 1});
        b.values[0] = 2.0;  // squared norm 4
        CHECK(density_loss({a, a}, {b, a}).item() == doctest::Approx(2.0));
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(density_loss({Tensor::zeros({2, 2, 1})}, {Tensor::zeros({2, 3, 1})}),
                        DataError);
    }
}

TEST_CASE("total loss combination") {
    LossWeights w;
    SUBCASE("default weights fixture") {
        LossBreakdown b = total_loss(0.5, 1.5, 2.0, w);
        CHECK(b.total == doctest::Approx(2.5));
        CHECK(b.total == w.lambda_reg * (b.l_cls + b.l_loc) + w.lambda_dm * b.l_dm);
    }
    SUBCASE("all zeros") {
        CHECK(total_loss(0.0, 0.0, 0.0, w).total == doctest::Approx(0.0));
    }
    SUBCASE("density weight switch") {
        LossWeights off = w;
        off.lambda_dm = 0.0;
        CHECK(total_loss(0.5, 1.5, 123.0, off).total == doctest::Approx(2.0));
    }
    SUBCASE("breakdown identity holds exactly for random inputs") {
        Rng rng(5);
        for (int trial = 0; trial < 50; ++trial) {
            const double c = rng.uniform(0, 3), l = rng.uniform(0, 3), d = rng.uniform(0, 3);
            LossWeights rw;
            rw.lambda_reg = rng.uniform(0, 2);
            rw.lambda_dm = rng.uniform(0, 2);
            LossBreakdown b = total_loss(c, l, d, rw);
            CHECK(b.total == rw.lambda_reg * (b.l_cls + b.l_loc) + rw.lambda_dm * b.l_dm);
        }
    }
    SUBCASE("tensor and scalar paths agree bitwise") {
        const double c = 0.125, l = 0.375, d = 1.625;
        LossBreakdown b = total_loss(c, l, d, w);
        Tensor t = total_loss(Tensor::scalar(c), Tensor::scalar(l), Tensor::scalar(d), w);
        CHECK(t.item() == b.total);
    }
    SUBCASE("negative component rejected") {
        CHECK_THROWS_AS(total_loss(-0.1, 0, 0, w), NumericError);
    }
}

TEST_CASE("losses are differentiable through the fixed assignment") {
    Rng rng(91);
    Assignment a;
    a.pairs = {{0, 1}, {2, 0}};
    std::vector<Point2> gts = {{0.8, 0.2}, {0.3, 0.7}};

    Tensor conf({4}, {0.3, 0.6, 0.55, 0.2});
    double err = finite_difference_check(
        [&](const Tensor& t) { return focal_cls_loss(sigmoid(t), a, 0.25, 2.0); },
        Tensor({4}, {-0.5, 0.4, 0.1, -1.2}), 1e-4);
    CHECK(err < 1e-4);

    err = finite_difference_check(
        [&](const Tensor& t) { return point_l1_loss(sigmoid(t), gts, a); },
        Tensor({4, 2}, {0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.6}), 1e-4);
    CHECK(err < 1e-4);

    Tensor target = Tensor::full({3, 3, 1}, 0.25);
    err = finite_difference_check(
        [&](const Tensor& t) { return density_loss({t}, {target}); },
        Tensor({3, 3, 1}, {0.1, 0.9, 0.2, 0.4, 0.3, 0.8, 0.6, 0.5, 0.7}), 1e-4);
    CHECK(err < 1e-4);
}
