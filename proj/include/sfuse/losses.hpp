#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/graph.hpp"

namespace sfuse {

constexpr double kKlFloor = 1e-12;  // probability floor inside the KL logs

// ---- proxy losses ----

// Mean absolute error over masked voxels only. recon/target/mask must share
// element counts; mask entries are 0/1.
template <class R>
typename Graph<R>::Var loss_inpaint(Graph<R>& g, typename Graph<R>::Var recon,
                                    typename Graph<R>::Var target, typename Graph<R>::Var mask) {
    const auto& tr = g.val(recon);
    const auto& tt = g.val(target);
    const auto& tm = g.val(mask);
    if (tr.numel() != tt.numel() || tr.numel() != tm.numel())
        throw DimensionError("loss_inpaint: shape mismatch " + shape_str(tr.shape) + " vs " +
                             shape_str(tt.shape) + " vs " + shape_str(tm.shape));
    double count = 0;
    for (R v : tm.data) count += static_cast<double>(v);
    if (count <= 0) throw ContractError("loss_inpaint: empty cutout mask");
    auto flat_r = g.reshape(recon, {static_cast<int>(tr.numel())});
    auto flat_t = g.reshape(target, {static_cast<int>(tt.numel())});
    auto flat_m = g.reshape(mask, {static_cast<int>(tm.numel())});
    auto masked = g.mul(g.sub(flat_r, flat_t), flat_m);
    return g.scale(g.sum_all(g.abs_op(masked)), static_cast<R>(1.0 / count));
}

// Mean cross-entropy with log-softmax over 4 rotation classes.
template <class R>
typename Graph<R>::Var loss_rot(Graph<R>& g, typename Graph<R>::Var logits,
                                const std::vector<int>& labels) {
    const auto& tl = g.val(logits);
    if (tl.rank() != 2 || tl.shape[1] != 4)
        throw DimensionError("loss_rot: logits must be [B,4], got " + shape_str(tl.shape));
    if (static_cast<int>(labels.size()) != tl.shape[0])
        throw ContractError("loss_rot: label count mismatch");
    for (int l : labels)
        if (l < 0 || l > 3) throw ContractError("loss_rot: label " + std::to_string(l) + " outside {0..3}");
    return g.neg(g.mean_all(g.pick_last(g.log_softmax_last(logits), labels)));
}

// NT-Xent over the 2B views: positives are (z1_i, z2_i), negatives all other
// views in the batch. Rows are expected L2-normalized.
template <class R>
typename Graph<R>::Var loss_contrast(Graph<R>& g, typename Graph<R>::Var z1,
                                     typename Graph<R>::Var z2, double tau) {
    const auto& t1 = g.val(z1);
    const auto& t2 = g.val(z2);
    require_shape(t1.rank() == 2 && t1.shape == t2.shape, "loss_contrast", t1.shape, t2.shape);
    const int B = t1.shape[0];
    if (B < 2) throw ContractError("loss_contrast: batch of " + std::to_string(B) + " has no negatives");
    auto z = g.concat_first({z1, z2});
    auto sim = g.scale(g.matmul_nt(z, z), static_cast<R>(1.0 / tau));
    Tensor<R> diag = Tensor<R>::zeros({2 * B, 2 * B});
    for (int i = 0; i < 2 * B; ++i) diag.data[static_cast<std::size_t>(i) * (2 * B) + i] = R(-1e9);
    auto logp = g.log_softmax_last(g.add(sim, g.constant(std::move(diag))));
    std::vector<int> pos(static_cast<std::size_t>(2 * B));
    for (int i = 0; i < B; ++i) {
        pos[static_cast<std::size_t>(i)] = i + B;
        pos[static_cast<std::size_t>(i + B)] = i;
    }
    return g.neg(g.mean_all(g.pick_last(logp, pos)));
}

// ---- density matching ----

// squared pairwise distances, clamped at zero against cancellation
template <class R>
typename Graph<R>::Var pairwise_sqdist(Graph<R>& g, typename Graph<R>::Var a,
                                       typename Graph<R>::Var b) {
    auto sq_a = g.sum_last(g.square(a));  // [M]
    auto sq_b = g.sum_last(g.square(b));  // [N]
    auto cross = g.scale(g.matmul_nt(a, b), R(-2));
    auto d = g.add_colvec(g.add_lastvec(cross, sq_b), sq_a);
    return g.scale(g.add(d, g.abs_op(d)), R(0.5));  // max(d, 0)
}

// sigma = mean over samples of the distance to the nearest other sample
template <class R>
typename Graph<R>::Var kde_bandwidth(Graph<R>& g, typename Graph<R>::Var samples) {
    const auto& ts = g.val(samples);
    if (ts.rank() != 2 || ts.shape[0] < 2)
        throw ContractError("kde_bandwidth: need at least two samples, got " + shape_str(ts.shape));
    const int n = ts.shape[0];
    auto d = pairwise_sqdist(g, samples, samples);
    Tensor<R> diag = Tensor<R>::zeros({n, n});
    for (int i = 0; i < n; ++i) diag.data[static_cast<std::size_t>(i) * n + i] = R(1e30);
    auto sigma = g.mean_all(g.sqrt_op(g.min_last(g.add(d, g.constant(std::move(diag))))));
    if (static_cast<double>(g.val(sigma).data[0]) < 1e-12)
        throw ContractError("kde_bandwidth: degenerate bandwidth (all samples identical)");
    return sigma;
}

template <class R>
struct DensityEstimate {
    typename Graph<R>::Var values;       // [M], unnormalized
    typename Graph<R>::Var eval_points;  // [M, d]
    typename Graph<R>::Var bandwidth;    // [1]
    int sample_count = 0;
};

// values_m = (1/N) sum_n exp(-||e_m - x_n||^2 / (2 sigma^2))
template <class R>
DensityEstimate<R> kde_density(Graph<R>& g, typename Graph<R>::Var samples,
                               typename Graph<R>::Var eval_points, typename Graph<R>::Var sigma) {
    const auto& ts = g.val(samples);
    const auto& te = g.val(eval_points);
    require_shape(ts.rank() == 2 && te.rank() == 2 && ts.shape[1] == te.shape[1], "kde_density",
                  ts.shape, te.shape);
    if (static_cast<double>(g.val(sigma).data[0]) <= 0)
        throw ContractError("kde_density: bandwidth must be positive");
    auto d = pairwise_sqdist(g, eval_points, samples);  // [M, N]
    auto two_sigma_sq = g.scale(g.square(sigma), R(2));
    DensityEstimate<R> est;
    est.values = g.mean_last(g.exp_op(g.neg(g.div_scalarv(d, two_sigma_sq))));
    est.eval_points = eval_points;
    est.bandwidth = sigma;
    est.sample_count = ts.shape[0];
    return est;
}

// Discrete Jensen-Shannon divergence over the shared eval set, natural log,
// bounded by ln 2. Each value vector is normalized to a distribution first.
template <class R>
typename Graph<R>::Var jsd(Graph<R>& g, const DensityEstimate<R>& d1,
                           const DensityEstimate<R>& d2) {
    const auto& e1 = g.val(d1.eval_points);
    const auto& e2 = g.val(d2.eval_points);
    if (e1.shape != e2.shape || e1.data != e2.data)
        throw ContractError("jsd: density estimates use different eval points");
    const R eps = static_cast<R>(kKlFloor);
    auto p = g.div_scalarv(d1.values, g.sum_all(d1.values));
    auto q = g.div_scalarv(d2.values, g.sum_all(d2.values));
    auto m = g.scale(g.add(p, q), R(0.5));
    auto log_m = g.log_clamped(m, eps);
    auto kl_pm = g.sum_all(g.mul(p, g.sub(g.log_clamped(p, eps), log_m)));
    auto kl_qm = g.sum_all(g.mul(q, g.sub(g.log_clamped(q, eps), log_m)));
    return g.scale(g.add(kl_pm, kl_qm), R(0.5));
}

// ---- composition (Eq. 4) ----

struct LossReport {
    double inpaint = 0;
    double contrast = 0;
    double rot = 0;
    double jsd = 0;
    double total = 0;
};

template <class R>
typename Graph<R>::Var total_loss(Graph<R>& g, typename Graph<R>::Var inpaint,
                                  typename Graph<R>::Var contrast, typename Graph<R>::Var rot,
                                  typename Graph<R>::Var jsd_term, int jsd_sign,
                                  LossReport* report = nullptr) {
    if (jsd_sign != 1 && jsd_sign != -1) throw ConfigError("jsd_sign must be +1 or -1");
    const char* names[4] = {"inpaint", "contrast", "rot", "jsd"};
    const typename Graph<R>::Var parts[4] = {inpaint, contrast, rot, jsd_term};
    double vals[4];
    for (int i = 0; i < 4; ++i) {
        if (g.val(parts[i]).numel() != 1)
            throw ContractError(std::string("total_loss: ") + names[i] + " term is not scalar");
        vals[i] = static_cast<double>(g.val(parts[i]).data[0]);
        if (!std::isfinite(vals[i]))
            throw TrainAbortError(std::string("non-finite loss term '") + names[i] + "'");
    }
    auto total = g.add(g.add(inpaint, contrast),
                       g.add(rot, g.scale(jsd_term, static_cast<R>(jsd_sign))));
    if (report) {
        report->inpaint = vals[0];
        report->contrast = vals[1];
        report->rot = vals[2];
        report->jsd = vals[3];
        report->total = static_cast<double>(g.val(total).data[0]);
    }
    return total;
}

// ---- fine-tuning segmentation loss ----

// Per-voxel cross-entropy plus soft Dice (foreground classes), equal
// weights. logits: [L+1, S, S, S] channel-major; labels: voxel class ids.
template <class R>
typename Graph<R>::Var loss_ce_dice(Graph<R>& g, typename Graph<R>::Var logits,
                                    const std::vector<int>& labels, int n_classes,
                                    double* ce_out = nullptr, double* dice_out = nullptr) {
    const auto& tl = g.val(logits);
    if (tl.rank() != 4 || tl.shape[0] != n_classes + 1)
        throw DimensionError("loss_ce_dice: logits must be [L+1,S,S,S], got " + shape_str(tl.shape));
    const int V = tl.shape[1] * tl.shape[2] * tl.shape[3];
    if (static_cast<int>(labels.size()) != V) throw ContractError("loss_ce_dice: label count mismatch");
    for (int l : labels)
        if (l < 0 || l > n_classes)
            throw ContractError("loss_ce_dice: label " + std::to_string(l) + " outside [0," +
                                std::to_string(n_classes) + "]");

    auto rows = g.transpose2d(g.reshape(logits, {n_classes + 1, V}));  // [V, L+1]
    auto ce = g.neg(g.mean_all(g.pick_last(g.log_softmax_last(rows), labels)));

    Tensor<R> onehot = Tensor<R>::zeros({V, n_classes + 1});
    Tensor<R> tsum = Tensor<R>::zeros({n_classes + 1});
    for (int v = 0; v < V; ++v) {
        onehot.data[static_cast<std::size_t>(v) * (n_classes + 1) + labels[static_cast<std::size_t>(v)]] = R(1);
        tsum.data[static_cast<std::size_t>(labels[static_cast<std::size_t>(v)])] += R(1);
    }
    const R smooth = R(1e-5);
    auto probs = g.softmax_last(rows);
    auto inter = g.sum_first(g.mul(probs, g.constant(std::move(onehot))));  // [L+1]
    auto psum = g.sum_first(probs);
    auto denom = g.add_const(g.add(psum, g.constant(std::move(tsum))), smooth);
    auto dice_vec = g.div(g.add_const(g.scale(inter, R(2)), smooth), denom);
    auto fg = g.reshape(dice_vec, {1, n_classes + 1});
    auto dice_loss = g.add_const(g.neg(g.mean_all(g.slice_last(fg, 1, n_classes + 1))), R(1));

    if (ce_out) *ce_out = static_cast<double>(g.val(ce).data[0]);
    if (dice_out) *dice_out = static_cast<double>(g.val(dice_loss).data[0]);
    return g.add(ce, dice_loss);
}

// 9-significant-digit decimal used by every CSV emitter
inline std::string format_sig9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace sfuse
