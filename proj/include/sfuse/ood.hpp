#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "sfuse/metrics.hpp"
#include "sfuse/phantom.hpp"
#include "sfuse/train.hpp"

namespace sfuse {

// Cross-modality transfer experiment: pre-train on a mixed CT-like/MR-like
// corpus, fine-tune on a CT-like region, evaluate on MR-like regions, and
// compare against the identical architecture trained from scratch.
struct OodOptions {
    int vol_dim = 32;
    int n_pretrain_cases = 8;  // registered pairs (one CT-like + one MR-like each)
    int n_ft_cases = 4;
    int n_test_cases = 4;
    int pretrain_steps = 400;
    int finetune_steps = 300;
};

// Anatomy regimes for the four synthetic test regions. All share the class
// count; they differ in organ size statistics, bias strength and noise.
inline std::vector<std::pair<std::string, PhantomOptions>> ood_test_regions() {
    std::vector<std::pair<std::string, PhantomOptions>> regions;
    PhantomOptions small;
    small.radius_min = 0.08;
    small.radius_max = 0.16;
    regions.emplace_back("mr_small", small);
    PhantomOptions large;
    large.radius_min = 0.20;
    large.radius_max = 0.32;
    regions.emplace_back("mr_large", large);
    PhantomOptions mixed;  // defaults
    regions.emplace_back("mr_mixed", mixed);
    PhantomOptions noisy;
    noisy.noise_sigma = 0.05;
    noisy.bias_amplitude = 0.35;
    regions.emplace_back("mr_noisy", noisy);
    return regions;
}

inline PhantomOptions ood_ft_region_options() {
    PhantomOptions opt;  // the "standard" CT-like regime
    return opt;
}

namespace detail {
constexpr std::uint64_t kOodPretrain = 0x4f505245;  // "OPRE"
constexpr std::uint64_t kOodFinetune = 0x4f46542e;  // "OFT."
constexpr std::uint64_t kOodTest = 0x4f545354;      // "OTST"
}  // namespace detail

struct OodResult {
    std::vector<OodRow> rows;
    ParamStore<float> pretrained;  // the pre-training product, reusable
};

inline OodResult ood_experiment(TrainConfig cfg, const OodOptions& opt,
                                std::ostream* info = nullptr,
                                const CheckpointData* pretrained = nullptr) {
    cfg.validate();
    const std::uint64_t seed = cfg.seed;
    const auto regions = ood_test_regions();

    // pre-training corpus: registered pairs cycling through the regimes
    std::vector<Volume> corpus;
    for (int i = 0; i < opt.n_pretrain_cases; ++i) {
        PhantomOptions po = regions[static_cast<std::size_t>(i) % regions.size()].second;
        const std::uint64_t case_seed = derive_seed(seed, detail::kOodPretrain) + static_cast<std::uint64_t>(i);
        corpus.push_back(gen_phantom(case_seed, opt.vol_dim, opt.vol_dim, opt.vol_dim,
                                     cfg.n_classes, Modality::ct_like, 1, po));
        corpus.push_back(gen_phantom(case_seed, opt.vol_dim, opt.vol_dim, opt.vol_dim,
                                     cfg.n_classes, Modality::mr_like, 1, po));
    }

    OodResult out;
    if (pretrained) {
        if (info) *info << "ood: using supplied checkpoint\n";
        if (pretrained->fingerprint != config_fingerprint(cfg))
            throw ConfigError("ood: checkpoint fingerprint does not match config");
        out.pretrained = pretrained->params;
    } else {
        TrainConfig pre_cfg = cfg;
        pre_cfg.total_steps = opt.pretrain_steps;
        if (info) *info << "ood: pre-training " << pre_cfg.total_steps << " steps on "
                        << corpus.size() << " volumes\n";
        out.pretrained = pretrain_loop(pre_cfg, corpus, info).params;
    }

    // fine-tune family: CT-like, standard regime
    std::vector<Volume> ft_cases;
    for (int i = 0; i < opt.n_ft_cases; ++i)
        ft_cases.push_back(gen_phantom(derive_seed(seed, detail::kOodFinetune) + static_cast<std::uint64_t>(i),
                                       opt.vol_dim, opt.vol_dim, opt.vol_dim, cfg.n_classes,
                                       Modality::ct_like, 1, ood_ft_region_options()));

    TrainConfig ft_cfg = cfg;
    ft_cfg.total_steps = opt.finetune_steps;
    CheckpointData ck;
    ck.fingerprint = config_fingerprint(cfg);
    ck.params = out.pretrained;
    if (info) *info << "ood: fine-tuning the pre-trained variant\n";
    const FinetuneResult warm = finetune_loop(ft_cfg, ft_cases, &ck, false, info);
    if (info) *info << "ood: fine-tuning the from-scratch baseline\n";
    const FinetuneResult cold = finetune_loop(ft_cfg, ft_cases, nullptr, false, info);

    for (std::size_t r = 0; r < regions.size(); ++r) {
        std::vector<Volume> test_cases;
        for (int i = 0; i < opt.n_test_cases; ++i)
            test_cases.push_back(gen_phantom(
                derive_seed(seed, detail::kOodTest + r) + static_cast<std::uint64_t>(i), opt.vol_dim,
                opt.vol_dim, opt.vol_dim, cfg.n_classes, Modality::mr_like, 1, regions[r].second));
        const double warm_dice = mean_dice_over(warm.params, ft_cfg, test_cases);
        const double cold_dice = mean_dice_over(cold.params, ft_cfg, test_cases);
        OodRow base{"ct_std", regions[r].first, "baseline", cold_dice, 0.0};
        OodRow pre{"ct_std", regions[r].first, "pretrained", warm_dice, warm_dice - cold_dice};
        if (info) *info << "ood: " << regions[r].first << " baseline " << cold_dice
                        << " pretrained " << warm_dice << " delta " << pre.delta << "\n";
        out.rows.push_back(base);
        out.rows.push_back(pre);
    }
    return out;
}

}  // namespace sfuse
