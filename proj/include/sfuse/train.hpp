#pragma once

#include <algorithm>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "sfuse/checkpoint.hpp"
#include "sfuse/config.hpp"
#include "sfuse/metrics.hpp"
#include "sfuse/model.hpp"
#include "sfuse/optim.hpp"

namespace sfuse {

namespace detail {
constexpr std::uint64_t kTrainStream = 0x5452414e;  // "TRAN"
constexpr std::uint64_t kFoldStream = 0x464f4c44;   // "FOLD"

template <class R>
typename Graph<R>::Var mean_of(Graph<R>& g, const std::vector<typename Graph<R>::Var>& terms) {
    auto acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = g.add(acc, terms[i]);
    return g.scale(acc, static_cast<R>(1.0 / static_cast<double>(terms.size())));
}

inline Tensor<float> view_tensor(const std::vector<float>& v) {
    Tensor<float> t;
    t.shape = {static_cast<int>(v.size())};
    t.data = v;
    return t;
}

inline Tensor<float> mask_tensor(const std::vector<std::uint8_t>& m) {
    Tensor<float> t = Tensor<float>::zeros({static_cast<int>(m.size())});
    for (std::size_t i = 0; i < m.size(); ++i) t.data[i] = m[i] ? 1.0f : 0.0f;
    return t;
}
}  // namespace detail

// Density-matching term for one pass: both DIM streams are subsampled, each
// density is evaluated on the union of the subsamples.
template <class R>
typename Graph<R>::Var stream_jsd(Graph<R>& g, const DimOutput<R>& dim, int T, int max_samples,
                                  Rng& rng) {
    const int k = std::min(max_samples, T);
    auto s1 = g.gather_first(dim.stream1, rng.sample_indices(T, k));
    auto s2 = g.gather_first(dim.stream2, rng.sample_indices(T, k));
    auto evals = g.concat_first({s1, s2});
    auto d1 = kde_density(g, s1, evals, kde_bandwidth(g, s1));
    auto d2 = kde_density(g, s2, evals, kde_bandwidth(g, s2));
    return jsd(g, d1, d2);
}

struct PretrainResult {
    ParamStore<float> params;
    std::string csv;  // step,lr,inpaint,contrast,rot,jsd,total
    LossReport last;
};

// Eq. 2 pipeline at desk scale. Per step and batch item: crop a sub-volume,
// make two augmented views, run two passes with the stream roles swapped.
// Each pass supervises its own view's inpainting and rotation; the
// contrastive pair is (pass A embedding, pass B embedding); the divergence
// term comes from pass A's stream features.
inline PretrainResult pretrain_loop(const TrainConfig& cfg, const std::vector<Volume>& dataset,
                                    std::ostream* info = nullptr) {
    cfg.validate();
    if (dataset.empty()) throw ContractError("pretrain_loop: empty dataset");
    if (cfg.batch_size < 2)
        throw ConfigError("pretraining requires batch_size >= 2 (contrastive negatives)");
    bool has_ct = false, has_mr = false;
    for (const auto& v : dataset) {
        has_ct = has_ct || v.modality == Modality::ct_like;
        has_mr = has_mr || v.modality == Modality::mr_like;
    }
    if (info && !(has_ct && has_mr))
        *info << "warning: dataset has a single modality; the divergence term still compares the "
                 "two augmented views\n";

    const std::vector<Volume> volumes = normalize_dataset(dataset);
    PretrainResult out;
    out.params = init_model_params<float>(cfg, ModelMode::pretrain, cfg.seed);
    AdamState<float> adam = AdamState<float>::init(out.params);
    Rng rng(derive_seed(cfg.seed, detail::kTrainStream));
    AugmentConfig aug;
    aug.cutout_fmin = cfg.cutout_fmin;
    aug.cutout_fmax = cfg.cutout_fmax;
    const TokenGeometry geom(cfg.S, cfg.P, cfg.C);
    bool lr_warned = false;
    out.csv = "step,lr,inpaint,contrast,rot,jsd,total\n";

    for (int step = 0; step < cfg.total_steps; ++step) {
        Graph<float> g;
        ParamBinding<float> bind(g, out.params);
        std::vector<Graph<float>::Var> inpaint_terms, rot_logits, za, zb, jsd_terms;
        std::vector<int> rot_labels;

        for (int b = 0; b < cfg.batch_size; ++b) {
            const Volume& vol = volumes[rng.below(volumes.size())];
            SubVolume sv = sample_subvolume(vol, cfg.S, rng);
            const AugmentedView vi = augment(sv, rng, aug);
            const AugmentedView vj = augment(sv, rng, aug);

            auto pass_a = pretrain_pass(g, vi.voxels, vj.voxels, bind, cfg);
            inpaint_terms.push_back(loss_inpaint(
                g, pass_a.proxy.reconstruction, g.constant(detail::view_tensor(vi.pre_cutout)),
                g.constant(detail::mask_tensor(vi.cutout_mask))));
            rot_logits.push_back(pass_a.proxy.rot_logits);
            rot_labels.push_back(vi.rot_label);
            za.push_back(pass_a.proxy.contrast);
            jsd_terms.push_back(stream_jsd(g, pass_a.dim, geom.T, cfg.kde_max_samples, rng));

            auto pass_b = pretrain_pass(g, vj.voxels, vi.voxels, bind, cfg);
            inpaint_terms.push_back(loss_inpaint(
                g, pass_b.proxy.reconstruction, g.constant(detail::view_tensor(vj.pre_cutout)),
                g.constant(detail::mask_tensor(vj.cutout_mask))));
            rot_logits.push_back(pass_b.proxy.rot_logits);
            rot_labels.push_back(vj.rot_label);
            zb.push_back(pass_b.proxy.contrast);
        }

        auto inpaint = detail::mean_of(g, inpaint_terms);
        auto rot = loss_rot(g, g.concat_first(rot_logits), rot_labels);
        auto contrast = loss_contrast(g, g.concat_first(za), g.concat_first(zb), cfg.tau);
        auto jsd_term = detail::mean_of(g, jsd_terms);
        auto total = total_loss(g, inpaint, contrast, rot, jsd_term, cfg.jsd_sign, &out.last);

        g.backward(total);
        auto grads = bind.gradients();
        const double lr = lr_schedule(step, cfg, &lr_warned);
        adamw_step(out.params, grads, adam, lr, cfg);

        out.csv += std::to_string(step) + "," + format_sig9(lr) + "," +
                   format_sig9(out.last.inpaint) + "," + format_sig9(out.last.contrast) + "," +
                   format_sig9(out.last.rot) + "," + format_sig9(out.last.jsd) + "," +
                   format_sig9(out.last.total) + "\n";
        if (info && (step % 50 == 0 || step + 1 == cfg.total_steps))
            *info << "step " << step << " total " << out.last.total << "\n";
    }
    return out;
}

// Tiled full-volume inference: non-overlapping S^3 tiles over the padded
// volume, both DIM streams fed the identical unaugmented tile.
inline std::vector<int> predict_labels(const ParamStore<float>& params, const TrainConfig& cfg,
                                       const Volume& vol) {
    Volume normalized = vol;
    normalize_volume(normalized);
    const Volume padded = pad_to_multiple(normalized, cfg.S);
    std::vector<int> full(static_cast<std::size_t>(padded.count()), 0);
    for (int oz = 0; oz + cfg.S <= padded.dz; oz += cfg.S)
        for (int oy = 0; oy + cfg.S <= padded.dy; oy += cfg.S)
            for (int ox = 0; ox + cfg.S <= padded.dx; ox += cfg.S) {
                SubVolume sv = crop_subvolume_at(padded, cfg.S, ox, oy, oz);
                const AugmentedView view = identity_view(sv);
                Graph<float> g;
                ParamBinding<float> bind(g, params, /*trainable=*/false);
                auto logits = segmentation_pass(g, view.voxels, view.voxels, bind, cfg);
                const auto& t = g.val(logits);
                const int S = cfg.S, L1 = cfg.n_classes + 1;
                for (int z = 0; z < S; ++z)
                    for (int y = 0; y < S; ++y)
                        for (int x = 0; x < S; ++x) {
                            int best = 0;
                            float bv = t.data[((0 * S + z) * S + y) * S + x];
                            for (int c = 1; c < L1; ++c) {
                                const float v = t.data[((static_cast<std::size_t>(c) * S + z) * S + y) * S + x];
                                if (v > bv) {
                                    bv = v;
                                    best = c;
                                }
                            }
                            full[static_cast<std::size_t>(padded.index(ox + x, oy + y, oz + z))] = best;
                        }
            }
    std::vector<int> cropped(static_cast<std::size_t>(vol.count()));
    for (int z = 0; z < vol.dz; ++z)
        for (int y = 0; y < vol.dy; ++y)
            for (int x = 0; x < vol.dx; ++x)
                cropped[static_cast<std::size_t>(vol.index(x, y, z))] =
                    full[static_cast<std::size_t>(padded.index(x, y, z))];
    return cropped;
}

inline double mean_dice_over(const ParamStore<float>& params, const TrainConfig& cfg,
                             const std::vector<Volume>& cases) {
    if (cases.empty()) throw ContractError("mean_dice_over: no cases");
    double sum = 0;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto pred = predict_labels(params, cfg, cases[i]);
        sum += dice_report("case" + std::to_string(i), pred, cases[i].labels, cfg.n_classes).mean;
    }
    return sum / static_cast<double>(cases.size());
}

struct LoadReport {
    std::vector<std::string> loaded;
    std::vector<std::string> dropped;  // checkpoint names not used (proxy heads)
    std::vector<std::string> fresh;    // model names absent from the checkpoint
};

// Head surgery: keep embedding+DIM+encoder, drop proxy heads, leave the
// freshly initialized decoder untouched.
inline LoadReport apply_pretrained(ParamStore<float>& params, const CheckpointData& ck,
                                   const TrainConfig& cfg, bool force) {
    if (ck.fingerprint != config_fingerprint(cfg) && !force)
        throw ConfigError("checkpoint fingerprint " + std::to_string(ck.fingerprint) +
                          " does not match config fingerprint " +
                          std::to_string(config_fingerprint(cfg)) + " (use --force to override)");
    LoadReport rep;
    for (const auto& [name, tensor] : ck.params) {
        auto it = params.find(name);
        if (it == params.end()) {
            rep.dropped.push_back(name);
            continue;
        }
        if (it->second.shape != tensor.shape)
            throw ConfigError("checkpoint tensor '" + name + "' has shape " +
                              shape_str(tensor.shape) + ", model expects " +
                              shape_str(it->second.shape));
        it->second = tensor;
        rep.loaded.push_back(name);
    }
    for (const auto& [name, tensor] : params)
        if (!ck.params.count(name)) rep.fresh.push_back(name);
    return rep;
}

struct FinetuneResult {
    ParamStore<float> params;
    LoadReport load_report;
    std::string csv;  // step,lr,ce,dice,total,train_dice
    double final_train_dice = 0;
};

// Dual-view fine-tuning: both augmented views feed the DIM; supervision uses
// view 1's geometry (its rotation is applied to the labels as well).
inline FinetuneResult finetune_loop(const TrainConfig& cfg, const std::vector<Volume>& dataset,
                                    const CheckpointData* init = nullptr, bool force = false,
                                    std::ostream* info = nullptr) {
    cfg.validate();
    if (dataset.empty()) throw ContractError("finetune_loop: empty dataset");
    for (const auto& v : dataset) {
        if (!v.has_labels()) throw ContractError("finetune_loop: dataset volume lacks labels");
        for (int l : v.labels)
            if (l > cfg.n_classes)
                throw ConfigError("label " + std::to_string(l) + " exceeds n_classes=" +
                                  std::to_string(cfg.n_classes));
    }

    const std::vector<Volume> volumes = normalize_dataset(dataset);
    FinetuneResult out;
    out.params = init_model_params<float>(cfg, ModelMode::finetune, cfg.seed);
    if (init) {
        out.load_report = apply_pretrained(out.params, *init, cfg, force);
        if (info) {
            *info << "loaded " << out.load_report.loaded.size() << " tensors; dropped:";
            for (const auto& n : out.load_report.dropped) *info << ' ' << n;
            *info << "; fresh:";
            for (const auto& n : out.load_report.fresh) *info << ' ' << n;
            *info << "\n";
        }
    }
    AdamState<float> adam = AdamState<float>::init(out.params);
    Rng rng(derive_seed(cfg.seed, detail::kTrainStream));
    AugmentConfig aug;
    aug.cutout_fmin = cfg.cutout_fmin;
    aug.cutout_fmax = cfg.cutout_fmax;
    bool lr_warned = false;
    out.csv = "step,lr,ce,dice,total,train_dice\n";

    for (int step = 0; step < cfg.total_steps; ++step) {
        Graph<float> g;
        ParamBinding<float> bind(g, out.params);
        std::vector<Graph<float>::Var> losses;
        double ce_sum = 0, dice_sum = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const Volume& vol = volumes[rng.below(volumes.size())];
            SubVolume sv = sample_subvolume(vol, cfg.S, rng);
            const AugmentedView v1 = augment(sv, rng, aug);
            const AugmentedView v2 = augment(sv, rng, aug);
            auto logits = segmentation_pass(g, v1.voxels, v2.voxels, bind, cfg);
            double ce = 0, dc = 0;
            losses.push_back(loss_ce_dice(g, logits, v1.labels, cfg.n_classes, &ce, &dc));
            ce_sum += ce;
            dice_sum += dc;
        }
        auto total = detail::mean_of(g, losses);
        g.backward(total);
        auto grads = bind.gradients();
        const double lr = lr_schedule(step, cfg, &lr_warned);
        adamw_step(out.params, grads, adam, lr, cfg);

        std::string dice_cell;
        if ((cfg.log_dice_every > 0 && step % cfg.log_dice_every == 0) ||
            step + 1 == cfg.total_steps) {
            out.final_train_dice = mean_dice_over(out.params, cfg, dataset);
            dice_cell = format_sig9(out.final_train_dice);
            if (info) *info << "step " << step << " train dice " << dice_cell << "\n";
        }
        out.csv += std::to_string(step) + "," + format_sig9(lr) + "," +
                   format_sig9(ce_sum / cfg.batch_size) + "," +
                   format_sig9(dice_sum / cfg.batch_size) + "," +
                   format_sig9(static_cast<double>(g.val(total).data[0])) + "," + dice_cell + "\n";
    }
    return out;
}

struct KfoldResult {
    std::vector<std::vector<int>> folds;  // case indices per fold
    std::vector<double> fold_dice;
    double mean_dice = 0;
};

// Deterministic seeded split into k folds; each fold is held out once.
inline KfoldResult kfold(const TrainConfig& cfg, const std::vector<Volume>& dataset, int k,
                         const CheckpointData* init = nullptr, bool force = false,
                         std::ostream* info = nullptr) {
    if (k < 2) throw ConfigError("kfold: k must be >= 2");
    if (static_cast<int>(dataset.size()) < k)
        throw ContractError("kfold: dataset of " + std::to_string(dataset.size()) +
                            " cases is smaller than k=" + std::to_string(k));
    std::vector<int> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, detail::kFoldStream));
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);

    KfoldResult out;
    out.folds.assign(static_cast<std::size_t>(k), {});
    for (std::size_t i = 0; i < order.size(); ++i)
        out.folds[i % static_cast<std::size_t>(k)].push_back(order[i]);

    for (int f = 0; f < k; ++f) {
        std::vector<Volume> train_set, test_set;
        for (int fi = 0; fi < k; ++fi)
            for (int idx : out.folds[static_cast<std::size_t>(fi)])
                (fi == f ? test_set : train_set).push_back(dataset[static_cast<std::size_t>(idx)]);
        if (info) *info << "fold " << f << ": train " << train_set.size() << ", test "
                        << test_set.size() << "\n";
        auto ft = finetune_loop(cfg, train_set, init, force, nullptr);
        out.fold_dice.push_back(mean_dice_over(ft.params, cfg, test_set));
    }
    for (double d : out.fold_dice) out.mean_dice += d;
    out.mean_dice /= static_cast<double>(k);
    return out;
}

}  // namespace sfuse
