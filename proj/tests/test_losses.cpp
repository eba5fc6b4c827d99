#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <handfit/losses.hpp>
#include <handfit/rng.hpp>

#include "oracles.hpp"

using namespace handfit;
using diff::Param;
using diff::Tape;
using diff::Value;

TEST_CASE("pose loss") {
    SUBCASE("zero at the target") {
        Tape t;
        Tensor target = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
        CHECK(t.scalar(pose_loss(t, t.constant(target), target)) == 0.0);
    }

    SUBCASE("one joint of two off by (1,0,0) gives 0.5") {
        Tape t;
        Tensor target = Tensor::from({2, 3}, {0, 0, 0, 0, 0, 0});
        Tensor pred = Tensor::from({2, 3}, {1, 0, 0, 0, 0, 0});
        CHECK(t.scalar(pose_loss(t, t.constant(pred), target)) == doctest::Approx(0.5).epsilon(1e-15));
    }

    SUBCASE("random pairs match a loop oracle") {
        Rng rng(1);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t J = 1 + rng.uniform_int(8);
            Tensor a = Tensor::zeros({J, 3}), b = Tensor::zeros({J, 3});
            for (auto& v : a.data()) v = rng.uniform(-50, 50);
            for (auto& v : b.data()) v = rng.uniform(-50, 50);
            double want = 0;
            for (std::size_t i = 0; i < a.numel(); ++i) want += std::fabs(a[i] - b[i]);
            want /= static_cast<double>(J);
            Tape t;
            CHECK(std::fabs(t.scalar(pose_loss(t, t.constant(a), b)) - want) < 1e-12);
        }
    }

    SUBCASE("NaN target raises a data error") {
        Tape t;
        Tensor target = Tensor::from({1, 3}, {0.0, std::nan(""), 0.0});
        CHECK_THROWS_AS(pose_loss(t, t.constant(Tensor::zeros({1, 3})), target), DataError);
    }
}

TEST_CASE("smooth_l1") {
    CHECK(smooth_l1(0.5) == doctest::Approx(0.125).epsilon(1e-15));
    CHECK(smooth_l1(1.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(smooth_l1(2.0) == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(smooth_l1(-2.0) == doctest::Approx(1.5).epsilon(1e-15));
    // continuity at the knee
    CHECK(std::fabs(smooth_l1(1.0 - 1e-12) - smooth_l1(1.0 + 1e-12)) < 1e-10);
}

namespace {

DepthMap map_from(const std::vector<double>& vals, int w, int h) {
    DepthMap m(w, h);
    for (std::size_t i = 0; i < vals.size(); ++i)
        if (vals[i] > 0) m[i] = vals[i];
    return m;
}

}  // namespace

TEST_CASE("depth loss") {
    SUBCASE("zero when rendered equals target") {
        Tape t;
        DepthMap r = map_from({100, 200, 0, 300}, 2, 2);
        Tensor node = Tensor::from({4}, {100, 200, 0, 300});
        std::vector<DepthViewNodes> views{{t.constant(node), &r, &r}};
        CHECK(t.scalar(depth_loss(t, views)) == 0.0);
    }

    SUBCASE("two masked pixels with residuals 0.5 and 2.0 average to 0.8125") {
        Tape t;
        DepthMap target = map_from({100, 200, 0, 0}, 2, 2);
        DepthMap rendered = map_from({100.5, 202.0, 50, 0}, 2, 2);
        Tensor node = Tensor::from({4}, {100.5, 202.0, 50, 0});
        std::vector<DepthViewNodes> views{{t.constant(node), &rendered, &target}};
        CHECK(t.scalar(depth_loss(t, views)) == doctest::Approx(0.8125).epsilon(1e-14));
    }

    SUBCASE("pixels outside the mask never contribute") {
        Tape t;
        DepthMap target = map_from({100, 0, 0, 0}, 2, 2);
        DepthMap rendered_a = map_from({101, 900, 0, 0}, 2, 2);
        DepthMap rendered_b = map_from({101, 5, 0, 0}, 2, 2);
        Tensor node_a = Tensor::from({4}, {101, 900, 0, 0});
        Tensor node_b = Tensor::from({4}, {101, 5, 0, 0});
        std::vector<DepthViewNodes> va{{t.constant(node_a), &rendered_a, &target}};
        std::vector<DepthViewNodes> vb{{t.constant(node_b), &rendered_b, &target}};
        CHECK(t.scalar(depth_loss(t, va)) == t.scalar(depth_loss(t, vb)));
    }

    SUBCASE("empty-mask view contributes zero") {
        Tape t;
        DepthMap target = map_from({0, 0, 0, 100}, 2, 2);
        DepthMap rendered = map_from({100, 0, 0, 0}, 2, 2);
        Tensor node = Tensor::from({4}, {100, 0, 0, 0});
        DepthMap both = map_from({100, 0, 0, 100}, 2, 2);
        Tensor node2 = Tensor::from({4}, {101, 0, 0, 100});
        DepthMap rendered2 = map_from({101, 0, 0, 100}, 2, 2);
        std::vector<DepthViewNodes> views{{t.constant(node), &rendered, &target},
                                          {t.constant(node2), &rendered2, &both}};
        // first view: empty mask, 0. second view: masked pixels have residuals
        // 1 and 0, mean smooth_l1 = 0.25. over two views: 0.125.
        CHECK(t.scalar(depth_loss(t, views)) == doctest::Approx(0.125).epsilon(1e-14));
    }
}

TEST_CASE("laplacian loss") {
    SUBCASE("zero residuals give zero") {
        Tape t;
        CHECK(t.scalar(laplacian_loss(t, t.constant(Tensor::zeros({5, 3})))) == 0.0);
    }

    SUBCASE("V=1 with r=(3,4,0) gives 5 under the L2 reduction") {
        Tape t;
        CHECK(t.scalar(laplacian_loss(t, t.constant(Tensor::from({1, 3}, {3, 4, 0})))) ==
              doctest::Approx(5.0).epsilon(1e-15));
        CHECK(t.scalar(laplacian_loss(t, t.constant(Tensor::from({1, 3}, {3, 4, 0})), true)) ==
              doctest::Approx(25.0).epsilon(1e-15));
    }

    SUBCASE("random residuals match a loop oracle") {
        Rng rng(2);
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t V = 2 + rng.uniform_int(20);
            Tensor r = Tensor::zeros({V, 3});
            for (auto& v : r.data()) v = rng.uniform(-3, 3);
            double want = 0;
            for (std::size_t i = 0; i < V; ++i)
                want += std::sqrt(r.at(i, 0) * r.at(i, 0) + r.at(i, 1) * r.at(i, 1) +
                                  r.at(i, 2) * r.at(i, 2));
            want /= static_cast<double>(V);
            Tape t;
            CHECK(std::fabs(t.scalar(laplacian_loss(t, t.constant(r))) - want) < 1e-12);
        }
    }
}

TEST_CASE("total loss") {
    SUBCASE("all parts zero") {
        Tape t;
        const TotalLoss L = total_loss(t, t.constant_scalar(0), t.constant_scalar(0),
                                       t.constant_scalar(0), t.constant_scalar(0),
                                       t.constant_scalar(0), LossWeights{});
        CHECK(t.scalar(L.total) == 0.0);
    }

    SUBCASE("unit parts weigh to 8 with default lambdas") {
        // pose=1, depth=1, combined penetration=1 (rigid=1, nonrigid=0), lap=1
        Tape t;
        const TotalLoss L = total_loss(t, t.constant_scalar(1), t.constant_scalar(1),
                                       t.constant_scalar(1), t.constant_scalar(0),
                                       t.constant_scalar(1), LossWeights{});
        CHECK(t.scalar(L.total) == doctest::Approx(8.0).epsilon(1e-15));
    }

    SUBCASE("lambda_lap=1 override gives 4") {
        Tape t;
        LossWeights w;
        w.lambda_lap = 1.0;
        const TotalLoss L = total_loss(t, t.constant_scalar(1), t.constant_scalar(1),
                                       t.constant_scalar(1), t.constant_scalar(0),
                                       t.constant_scalar(1), w);
        CHECK(t.scalar(L.total) == doctest::Approx(4.0).epsilon(1e-15));
    }

    SUBCASE("breakdown satisfies the weighted identity") {
        Rng rng(3);
        for (int trial = 0; trial < 10; ++trial) {
            Tape t;
            LossWeights w;
            w.lambda_nr = rng.uniform(0, 10);
            w.lambda_lap = rng.uniform(0, 10);
            const double pose = rng.uniform(0, 5), depth = rng.uniform(0, 5);
            const double rigid = rng.uniform(0, 5), nonrigid = rng.uniform(0, 5);
            const double lap = rng.uniform(0, 5);
            const TotalLoss L =
                total_loss(t, t.constant_scalar(pose), t.constant_scalar(depth),
                           t.constant_scalar(rigid), t.constant_scalar(nonrigid),
                           t.constant_scalar(lap), w);
            const LossBreakdown& b = L.breakdown;
            CHECK(std::fabs(b.total - (b.pose + b.depth + (b.penet_rigid + w.lambda_nr * b.penet_nonrigid) +
                                       w.lambda_lap * b.laplacian)) < 1e-12);
        }
    }

    SUBCASE("non-finite part raises a training error with the breakdown") {
        Tape t;
        Value inf = t.div(t.constant_scalar(1.0), t.constant_scalar(0.0));
        CHECK_THROWS_WITH_AS(total_loss(t, inf, t.constant_scalar(0), t.constant_scalar(0),
                                        t.constant_scalar(0), t.constant_scalar(0), LossWeights{}),
                             doctest::Contains("pose=inf"), TrainingError);
    }

    SUBCASE("total gradient is the weighted sum of per-term gradients") {
        Rng rng(4);
        std::vector<double> xs{0.7, -0.4, 1.3};
        LossWeights w;

        // gradient of the weighted total
        Param p(Tensor::from({3}, xs));
        {
            Tape t;
            Value x = t.param(p);
            Value pose = t.sum(t.mul(x, x));
            Value depth = t.sum(t.abs(x));
            Value rigid = t.sum(t.relu(x));
            Value nonrigid = t.sum(t.tanh(x));
            Value lap = t.sum(t.mul(x, t.constant_scalar(2.0)));
            t.backward(total_loss(t, pose, depth, rigid, nonrigid, lap, w).total);
        }
        // weighted sum of separate gradients
        Param q(Tensor::from({3}, xs));
        const auto add_term = [&](double weight, int which) {
            Tape t;
            Value x = t.param(q);
            Value term = which == 0   ? t.sum(t.mul(x, x))
                         : which == 1 ? t.sum(t.abs(x))
                         : which == 2 ? t.sum(t.relu(x))
                         : which == 3 ? t.sum(t.tanh(x))
                                      : t.sum(t.mul(x, t.constant_scalar(2.0)));
            t.backward(t.scale(term, weight));
        };
        add_term(1.0, 0);
        add_term(1.0, 1);
        add_term(1.0, 2);
        add_term(w.lambda_nr, 3);
        add_term(w.lambda_lap, 4);
        for (std::size_t i = 0; i < 3; ++i)
            CHECK(std::fabs(p.grad[i] - q.grad[i]) < 1e-12);
        (void)rng;
    }
}
