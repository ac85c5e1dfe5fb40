#include <cmath>

#include <gtest/gtest.h>

#include "fd_check.hpp"
#include "sfuse/losses.hpp"

using namespace sfuse;
using namespace sfuse::test;

namespace {

TEST(LossInpaint, PerfectReconstructionIsZero) {
    Graph<double> g;
    Rng rng(3);
    DTensor t = random_tensor({2, 2, 2}, rng);
    DTensor m = DTensor::zeros({2, 2, 2});
    m.data[0] = m.data[5] = 1;
    auto loss = loss_inpaint(g, g.constant(t), g.constant(t), g.constant(m));
    EXPECT_DOUBLE_EQ(g.val(loss).data[0], 0.0);
}

TEST(LossInpaint, ConstantOffsetGivesOne) {
    Graph<double> g;
    Rng rng(5);
    DTensor t = random_tensor({8}, rng);
    DTensor r = t;
    for (auto& x : r.data) x += 1.0;
    DTensor m = DTensor::zeros({8});
    m.data[1] = m.data[4] = m.data[7] = 1;
    auto loss = loss_inpaint(g, g.constant(r), g.constant(t), g.constant(m));
    EXPECT_NEAR(g.val(loss).data[0], 1.0, 1e-12);
}

TEST(LossInpaint, MatchesDirectSummationOracle) {
    Graph<double> g;
    Rng rng(7);
    DTensor r = random_tensor({4, 4}, rng), t = random_tensor({4, 4}, rng);
    DTensor m = DTensor::zeros({4, 4});
    double want = 0;
    int count = 0;
    for (int i = 0; i < 16; ++i)
        if (rng.uniform() < 0.4) {
            m.data[i] = 1;
            want += std::abs(r.data[i] - t.data[i]);
            ++count;
        }
    if (count == 0) {
        m.data[0] = 1;
        want = std::abs(r.data[0] - t.data[0]);
        count = 1;
    }
    auto loss = loss_inpaint(g, g.constant(r), g.constant(t), g.constant(m));
    EXPECT_NEAR(g.val(loss).data[0], want / count, 1e-12);
}

TEST(LossInpaint, EmptyMaskRejected) {
    Graph<double> g;
    auto z = g.constant(DTensor::zeros({4}));
    EXPECT_THROW(loss_inpaint(g, z, z, z), ContractError);
}

TEST(LossRot, UniformLogitsGiveLogFour) {
    Graph<double> g;
    auto loss = loss_rot(g, g.constant(DTensor::zeros({3, 4})), {0, 2, 3});
    EXPECT_NEAR(g.val(loss).data[0], std::log(4.0), 1e-9);
}

TEST(LossRot, ConfidentCorrectLogitGoesToZero) {
    Graph<double> g;
    DTensor l = DTensor::zeros({1, 4});
    l.data[2] = 1e4;
    auto loss = loss_rot(g, g.constant(l), {2});
    EXPECT_LT(g.val(loss).data[0], 1e-6);
}

TEST(LossRot, MatchesHandComputedCrossEntropy) {
    Graph<double> g;
    Rng rng(11);
    DTensor l = random_tensor({5, 4}, rng);
    std::vector<int> labels = {3, 0, 1, 1, 2};
    double want = 0;
    for (int b = 0; b < 5; ++b) {
        double mx = l.data[b * 4];
        for (int j = 1; j < 4; ++j) mx = std::max(mx, l.data[b * 4 + j]);
        double z = 0;
        for (int j = 0; j < 4; ++j) z += std::exp(l.data[b * 4 + j] - mx);
        want -= l.data[b * 4 + labels[b]] - mx - std::log(z);
    }
    auto loss = loss_rot(g, g.constant(l), labels);
    EXPECT_NEAR(g.val(loss).data[0], want / 5, 1e-9);
}

TEST(LossRot, OutOfRangeLabelRejected) {
    Graph<double> g;
    EXPECT_THROW(loss_rot(g, g.constant(DTensor::zeros({1, 4})), {4}), ContractError);
}

TEST(LossContrast, AlignedPairsVanishAtSmallTemperature) {
    Graph<double> g;
    Rng rng(13);
    DTensor z = DTensor::zeros({3, 8});
    for (int b = 0; b < 3; ++b) {
        double norm = 0;
        for (int j = 0; j < 8; ++j) {
            z.data[b * 8 + j] = rng.normal();
            norm += z.data[b * 8 + j] * z.data[b * 8 + j];
        }
        for (int j = 0; j < 8; ++j) z.data[b * 8 + j] /= std::sqrt(norm);
    }
    auto loss = loss_contrast(g, g.constant(z), g.constant(z), 0.01);
    EXPECT_LT(g.val(loss).data[0], 1e-3);
}

TEST(LossContrast, TwoOrthogonalPairsClosedForm) {
    // z1 = z2 = {u, w} with u ⟂ w: every row sees numerator e and two unit
    // negatives, so each term is -ln(e / (e + 2)).
    Graph<double> g;
    DTensor z = DTensor::zeros({2, 4});
    z.data[0] = 1.0;  // u = e_0
    z.data[5] = 1.0;  // w = e_1
    auto loss = loss_contrast(g, g.constant(z), g.constant(z), 1.0);
    const double e = std::exp(1.0);
    EXPECT_NEAR(g.val(loss).data[0], -std::log(e / (e + 2.0)), 1e-9);
}

TEST(LossContrast, SymmetricInViewSwap) {
    Graph<double> g;
    Rng rng(17);
    auto normalize = [](DTensor t) {
        for (int b = 0; b < t.shape[0]; ++b) {
            double n = 0;
            for (int j = 0; j < t.shape[1]; ++j) n += t.data[b * t.shape[1] + j] * t.data[b * t.shape[1] + j];
            for (int j = 0; j < t.shape[1]; ++j) t.data[b * t.shape[1] + j] /= std::sqrt(n);
        }
        return t;
    };
    DTensor z1 = normalize(random_tensor({4, 6}, rng));
    DTensor z2 = normalize(random_tensor({4, 6}, rng));
    auto a = loss_contrast(g, g.constant(z1), g.constant(z2), 0.25);
    auto b = loss_contrast(g, g.constant(z2), g.constant(z1), 0.25);
    EXPECT_NEAR(g.val(a).data[0], g.val(b).data[0], 1e-12);
}

TEST(LossContrast, SingletonBatchRejected) {
    Graph<double> g;
    auto z = g.constant(DTensor({1, 4}, {1, 0, 0, 0}));
    EXPECT_THROW(loss_contrast(g, z, z, 0.1), ContractError);
}

TEST(KdeBandwidth, TwoPointsGiveTheirDistance) {
    Graph<double> g;
    auto s = g.constant(DTensor({2, 3}, {0, 0, 0, 2, 1, 2}));
    auto sigma = kde_bandwidth(g, s);
    EXPECT_NEAR(g.val(sigma).data[0], 3.0, 1e-9);
}

TEST(KdeBandwidth, HandEnumeratedCase) {
    // 1-D samples {0, 1, 3}: nearest-neighbor distances {1, 1, 2}
    Graph<double> g;
    auto s = g.constant(DTensor({3, 1}, {0, 1, 3}));
    auto sigma = kde_bandwidth(g, s);
    EXPECT_NEAR(g.val(sigma).data[0], 4.0 / 3.0, 1e-9);
}

TEST(KdeBandwidth, HomogeneousInScale) {
    Graph<double> g;
    Rng rng(19);
    DTensor s = random_tensor({6, 3}, rng);
    DTensor s3 = s;
    for (auto& x : s3.data) x *= 3.0;
    auto a = kde_bandwidth(g, g.constant(s));
    auto b = kde_bandwidth(g, g.constant(s3));
    EXPECT_NEAR(g.val(b).data[0], 3.0 * g.val(a).data[0], 1e-9);
}

TEST(KdeBandwidth, PermutationInvariant) {
    Graph<double> g;
    Rng rng(23);
    DTensor s = random_tensor({5, 2}, rng);
    DTensor p = DTensor::zeros({5, 2});
    const int perm[5] = {4, 2, 0, 1, 3};
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 2; ++j) p.data[i * 2 + j] = s.data[perm[i] * 2 + j];
    auto a = kde_bandwidth(g, g.constant(s));
    auto b = kde_bandwidth(g, g.constant(p));
    EXPECT_NEAR(g.val(a).data[0], g.val(b).data[0], 1e-12);
}

TEST(KdeBandwidth, IdenticalSamplesDegenerate) {
    Graph<double> g;
    EXPECT_THROW(kde_bandwidth(g, g.constant(DTensor::full({3, 2}, 1.0))), ContractError);
}

TEST(KdeDensity, EvalAtSingleSampleIsOne) {
    Graph<double> g;
    auto s = g.constant(DTensor({1, 2}, {0.5, -1.0}));
    auto sigma = g.constant(DTensor::scalar(0.7));
    auto est = kde_density(g, s, s, sigma);
    EXPECT_NEAR(g.val(est.values).data[0], 1.0, 1e-12);
}

TEST(KdeDensity, HalfHeightAtSigmaSqrtTwoLogTwo) {
    Graph<double> g;
    const double sigma = 0.8;
    const double r = sigma * std::sqrt(2.0 * std::log(2.0));
    auto s = g.constant(DTensor({1, 1}, {0.0}));
    auto e = g.constant(DTensor({1, 1}, {r}));
    auto est = kde_density(g, s, e, g.constant(DTensor::scalar(sigma)));
    EXPECT_NEAR(g.val(est.values).data[0], 0.5, 1e-9);
}

TEST(KdeDensity, MonotoneInDistanceFromSingleSample) {
    Graph<double> g;
    auto s = g.constant(DTensor({1, 1}, {0.0}));
    auto e = g.constant(DTensor({5, 1}, {0.1, 0.5, 1.0, 2.0, 4.0}));
    auto est = kde_density(g, s, e, g.constant(DTensor::scalar(0.9)));
    const auto& v = g.val(est.values);
    for (int i = 1; i < 5; ++i) EXPECT_LT(v.data[i], v.data[i - 1]);
}

DensityEstimate<double> synthetic_estimate(Graph<double>& g, Graph<double>::Var evals,
                                           std::vector<double> values) {
    DensityEstimate<double> est;
    const int m = static_cast<int>(values.size());
    est.values = g.constant(DTensor({m}, std::move(values)));
    est.eval_points = evals;
    est.bandwidth = g.constant(DTensor::scalar(1.0));
    est.sample_count = 1;
    return est;
}

TEST(Jsd, IdenticalDistributionsGiveZero) {
    Graph<double> g;
    Rng rng(29);
    auto evals = g.constant(random_tensor({6, 2}, rng));
    std::vector<double> v = {0.2, 0.5, 0.9, 0.1, 0.4, 0.3};
    auto a = synthetic_estimate(g, evals, v);
    auto b = synthetic_estimate(g, evals, v);
    EXPECT_LE(std::abs(g.val(jsd(g, a, b)).data[0]), 1e-9);
}

TEST(Jsd, DisjointSupportsSaturateAtLogTwo) {
    Graph<double> g;
    Rng rng(31);
    auto evals = g.constant(random_tensor({4, 2}, rng));
    auto a = synthetic_estimate(g, evals, {1.0, 0.7, 0.0, 0.0});
    auto b = synthetic_estimate(g, evals, {0.0, 0.0, 0.3, 0.9});
    EXPECT_NEAR(g.val(jsd(g, a, b)).data[0], std::log(2.0), 1e-6);
}

TEST(Jsd, TwoPointHandCase) {
    Graph<double> g;
    auto evals = g.constant(DTensor({2, 1}, {0.0, 1.0}));
    auto a = synthetic_estimate(g, evals, {0.5, 0.5});
    auto b = synthetic_estimate(g, evals, {0.9, 0.1});
    // direct formula
    const double p[2] = {0.5, 0.5}, q[2] = {0.9, 0.1};
    double want = 0;
    for (int i = 0; i < 2; ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        want += 0.5 * (p[i] * std::log(p[i] / m) + q[i] * std::log(q[i] / m));
    }
    EXPECT_NEAR(g.val(jsd(g, a, b)).data[0], want, 1e-9);
}

TEST(Jsd, SymmetricAndBounded) {
    Graph<double> g;
    Rng rng(37);
    for (int rep = 0; rep < 100; ++rep) {
        auto evals = g.constant(random_tensor({5, 2}, rng));
        std::vector<double> v1(5), v2(5);
        for (int i = 0; i < 5; ++i) {
            v1[i] = rng.uniform(0.0, 1.0);
            v2[i] = rng.uniform(0.0, 1.0);
        }
        v1[0] += 1e-3;  // keep the normalizer nonzero
        v2[0] += 1e-3;
        auto a = synthetic_estimate(g, evals, v1);
        auto b = synthetic_estimate(g, evals, v2);
        const double ab = g.val(jsd(g, a, b)).data[0];
        const double ba = g.val(jsd(g, b, a)).data[0];
        EXPECT_NEAR(ab, ba, 1e-12);
        EXPECT_GE(ab, 0.0);
        EXPECT_LE(ab, std::log(2.0) + 1e-9);
    }
}

TEST(Jsd, EvalPointMismatchRejected) {
    Graph<double> g;
    Rng rng(41);
    auto e1 = g.constant(random_tensor({3, 2}, rng));
    auto e2 = g.constant(random_tensor({3, 2}, rng));
    auto a = synthetic_estimate(g, e1, {0.1, 0.2, 0.3});
    auto b = synthetic_estimate(g, e2, {0.1, 0.2, 0.3});
    EXPECT_THROW(jsd(g, a, b), ContractError);
}

TEST(Jsd, GradientThroughKdePipelineMatchesFiniteDifferences) {
    Rng rng(43);
    expect_gradients_match(
        [](DGraph& g, const std::vector<DVar>& in) {
            auto evals = g.concat_first({in[0], in[1]});
            auto s1 = kde_bandwidth(g, in[0]);
            auto s2 = kde_bandwidth(g, in[1]);
            auto d1 = kde_density(g, in[0], evals, s1);
            auto d2 = kde_density(g, in[1], evals, s2);
            return jsd(g, d1, d2);
        },
        {random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)}, 1e-4, "kde+jsd");
}

TEST(TotalLoss, Composition) {
    Graph<double> g;
    auto mk = [&](double v) { return g.constant(DTensor::scalar(v)); };
    LossReport rep;
    auto t = total_loss(g, mk(1.0), mk(1.0), mk(1.0), mk(0.0), -1, &rep);
    EXPECT_DOUBLE_EQ(g.val(t).data[0], 3.0);
    EXPECT_DOUBLE_EQ(rep.total, 3.0);

    auto t2 = total_loss(g, mk(0.5), mk(0.2), mk(0.3), mk(0.1), -1, &rep);
    EXPECT_NEAR(g.val(t2).data[0], 0.9, 1e-12);
    EXPECT_NEAR(rep.inpaint + rep.contrast + rep.rot - rep.jsd, rep.total, 1e-15);

    auto t3 = total_loss(g, mk(0.5), mk(0.2), mk(0.3), mk(0.1), +1, &rep);
    EXPECT_NEAR(g.val(t3).data[0], 1.1, 1e-12);
}

TEST(TotalLoss, NaNPartAborts) {
    Graph<double> g;
    auto mk = [&](double v) { return g.constant(DTensor::scalar(v)); };
    auto nan = g.constant(DTensor::scalar(std::nan("")));
    try {
        total_loss(g, mk(1.0), nan, mk(1.0), mk(0.0), -1);
        FAIL() << "expected TrainAbortError";
    } catch (const TrainAbortError& e) {
        EXPECT_NE(std::string(e.what()).find("contrast"), std::string::npos);
    }
}

TEST(CeDice, PerfectPredictionNearZero) {
    Graph<double> g;
    const int L = 2, S = 2;
    std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 0};
    DTensor logits = DTensor::zeros({L + 1, S, S, S});
    for (int v = 0; v < 8; ++v) logits.data[labels[v] * 8 + v] = 50.0;
    double ce = -1, dice = -1;
    auto loss = loss_ce_dice(g, g.constant(logits), labels, L, &ce, &dice);
    EXPECT_LT(ce, 1e-6);
    EXPECT_LT(dice, 1e-4);
    EXPECT_LT(g.val(loss).data[0], 1e-4);
}

TEST(CeDice, GradientsMatchFiniteDifferences) {
    Rng rng(47);
    std::vector<int> labels(8);
    for (auto& l : labels) l = static_cast<int>(rng.below(3));
    expect_gradients_match(
        [&labels](DGraph& g, const std::vector<DVar>& in) {
            return loss_ce_dice(g, in[0], labels, 2);
        },
        {random_tensor({3, 2, 2, 2}, rng)}, 1e-4, "ce+dice");
}

TEST(ProxyLossGradients, AllThreeMatchFiniteDifferences) {
    Rng rng(53);
    DTensor mask = DTensor::zeros({2, 2, 2});
    mask.data[1] = mask.data[6] = 1;
    DTensor target = random_tensor({2, 2, 2}, rng);
    expect_gradients_match(
        [&](DGraph& g, const std::vector<DVar>& in) {
            return loss_inpaint(g, in[0], g.constant(target), g.constant(mask));
        },
        {random_tensor({2, 2, 2}, rng)}, 1e-4, "inpaint grad");
    expect_gradients_match(
        [](DGraph& g, const std::vector<DVar>& in) { return loss_rot(g, in[0], {1, 3}); },
        {random_tensor({2, 4}, rng)}, 1e-4, "rot grad");
    expect_gradients_match(
        [](DGraph& g, const std::vector<DVar>& in) {
            // normalize inside the graph so inputs stay unconstrained
            auto norm = [&g](DVar z) {
                auto n = g.sqrt_op(g.add_const(g.sum_last(g.square(z)), 1e-12));
                return g.div_keeplast1(z, g.reshape(n, {g.val(z).shape[0], 1}));
            };
            return loss_contrast(g, norm(in[0]), norm(in[1]), 0.2);
        },
        {random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)}, 1e-4, "contrast grad");
}

}  // namespace
