#include <cmath>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "sfuse/phantom.hpp"
#include "sfuse/train.hpp"

using namespace sfuse;

namespace {

TEST(LrSchedule, WarmupAndCosine) {
    TrainConfig cfg;
    cfg.lr_base = 4e-4;
    cfg.warmup_steps = 500;
    cfg.total_steps = 5000;
    EXPECT_EQ(cfg.effective_warmup(), 500);
    EXPECT_DOUBLE_EQ(lr_schedule(0, cfg), 0.0);
    EXPECT_DOUBLE_EQ(lr_schedule(500, cfg), 4e-4);  // peak at warmup end
    const int mid = (500 + 5000) / 2;
    EXPECT_NEAR(lr_schedule(mid, cfg), 2e-4, 1e-12);
    EXPECT_NEAR(lr_schedule(5000, cfg), 0.0, 1e-18);
}

TEST(LrSchedule, ContinuousAtWarmupBoundary) {
    TrainConfig cfg;
    cfg.lr_base = 4e-4;
    cfg.warmup_steps = 500;
    cfg.total_steps = 5000;
    const double before = lr_schedule(499, cfg);
    const double at = lr_schedule(500, cfg);
    EXPECT_NEAR(at - before, cfg.lr_base / 500, 1e-9);  // one linear increment
}

TEST(LrSchedule, PastEndClampsToZeroWithWarning) {
    TrainConfig cfg;
    cfg.total_steps = 100;
    cfg.warmup_steps = 10;
    bool warned = false;
    EXPECT_DOUBLE_EQ(lr_schedule(101, cfg, &warned), 0.0);
    EXPECT_TRUE(warned);
}

TEST(LrSchedule, ShortRunsShrinkWarmup) {
    TrainConfig cfg;
    cfg.warmup_steps = 500;
    cfg.total_steps = 200;
    EXPECT_EQ(cfg.effective_warmup(), 40);  // total/5
    EXPECT_DOUBLE_EQ(lr_schedule(40, cfg), cfg.lr_base);
}

TrainConfig tiny_train_cfg() {
    TrainConfig cfg;
    cfg.S = 4;
    cfg.P = 2;
    cfg.C = 2;
    cfg.dim_base_heads = 1;
    cfg.enc_stages = 1;
    cfg.enc_depth = 2;
    cfg.enc_window = 2;
    cfg.enc_base_heads = 1;
    cfg.c_proj = 4;
    cfg.n_classes = 2;
    cfg.total_steps = 3;
    cfg.warmup_steps = 1;
    cfg.batch_size = 2;
    cfg.kde_max_samples = 8;
    cfg.log_dice_every = 0;
    return cfg;
}

TEST(AdamW, ZeroGradientLeavesParamsUnchangedWithoutDecay) {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    ParamStore<float> params;
    params.emplace("p", Tensor<float>({2}, {1.0f, -2.0f}));
    GradientMap<float> grads;
    grads.emplace("p", Tensor<float>::zeros({2}));
    auto st = AdamState<float>::init(params);
    adamw_step(params, grads, st, 0.1, cfg);
    EXPECT_FLOAT_EQ(params.at("p").data[0], 1.0f);
    EXPECT_FLOAT_EQ(params.at("p").data[1], -2.0f);
}

TEST(AdamW, DecayOnlyStepScalesParameters) {
    TrainConfig cfg;
    cfg.weight_decay = 1e-5;
    ParamStore<float> params;
    params.emplace("p", Tensor<float>({1}, {2.0f}));
    GradientMap<float> grads;
    grads.emplace("p", Tensor<float>::zeros({1}));
    auto st = AdamState<float>::init(params);
    const double lr = 0.5;
    adamw_step(params, grads, st, lr, cfg);
    EXPECT_NEAR(params.at("p").data[0], 2.0 * (1.0 - lr * 1e-5), 1e-6);
}

TEST(AdamW, QuadraticLossDecreasesMonotonically) {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    ParamStore<float> params;
    params.emplace("p", Tensor<float>({1}, {3.0f}));
    auto st = AdamState<float>::init(params);
    double prev = 9.0;
    for (int i = 0; i < 100; ++i) {
        const double p = params.at("p").data[0];
        GradientMap<float> grads;
        grads.emplace("p", Tensor<float>({1}, {static_cast<float>(2.0 * p)}));
        adamw_step(params, grads, st, 0.05, cfg);
        const double loss = params.at("p").data[0] * params.at("p").data[0];
        EXPECT_LE(loss, prev + 1e-9);
        prev = loss;
    }
    EXPECT_LT(prev, 1.0);
}

TEST(AdamW, ZeroBetasReduceToSignFreeAdaptiveSgd) {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.adam_beta1 = 0.0;
    cfg.adam_beta2 = 0.0;
    cfg.adam_eps = 1e-8;
    ParamStore<float> params;
    params.emplace("p", Tensor<float>({1}, {1.5f}));
    auto st = AdamState<float>::init(params);
    const double gval = -0.7, lr = 0.2;
    GradientMap<float> grads;
    grads.emplace("p", Tensor<float>({1}, {static_cast<float>(gval)}));
    adamw_step(params, grads, st, lr, cfg);
    EXPECT_NEAR(params.at("p").data[0], 1.5 - lr * gval / (std::abs(gval) + 1e-8), 1e-6);
}

TEST(AdamW, NaNGradientAbortsWithName) {
    TrainConfig cfg;
    ParamStore<float> params;
    params.emplace("layer.weight", Tensor<float>({1}, {1.0f}));
    GradientMap<float> grads;
    grads.emplace("layer.weight", Tensor<float>({1}, {std::nanf("")}));
    auto st = AdamState<float>::init(params);
    try {
        adamw_step(params, grads, st, 0.1, cfg);
        FAIL() << "expected TrainAbortError";
    } catch (const TrainAbortError& e) {
        EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
    }
}

TEST(Config, ParseRoundTripAndUnknownKey) {
    TrainConfig cfg = parse_config_text("S=8\nC = 4 # comment\n\n# full line comment\ntau=0.2\n");
    EXPECT_EQ(cfg.S, 8);
    EXPECT_EQ(cfg.C, 4);
    EXPECT_DOUBLE_EQ(cfg.tau, 0.2);
    EXPECT_THROW(parse_config_text("nope=1\n"), ConfigError);
    EXPECT_THROW(parse_config_text("S=abc\n"), ConfigError);
    EXPECT_THROW(parse_config_text("just a line\n"), ConfigError);
    // canonical text parses back to the same canonical text
    const std::string canon = canonical_config_text(cfg);
    EXPECT_EQ(canonical_config_text(parse_config_text(canon)), canon);
}

TEST(Config, FingerprintTracksArchitectureOnly) {
    TrainConfig a, b;
    b.total_steps = 999;  // not architectural
    EXPECT_EQ(config_fingerprint(a), config_fingerprint(b));
    b.C = 16;
    EXPECT_NE(config_fingerprint(a), config_fingerprint(b));
}

TEST(Checkpoint, RoundTripBitExact) {
    TrainConfig cfg = tiny_train_cfg();
    auto params = init_model_params<float>(cfg, ModelMode::pretrain, 7);
    const std::uint64_t fp = config_fingerprint(cfg);
    const std::string bytes = encode_checkpoint(params, fp);
    const CheckpointData back = decode_checkpoint(bytes);
    EXPECT_EQ(back.fingerprint, fp);
    EXPECT_EQ(encode_checkpoint(back.params, back.fingerprint), bytes);
    EXPECT_EQ(param_names(back.params), param_names(params));
    for (const auto& [name, t] : params) {
        EXPECT_EQ(back.params.at(name).shape, t.shape);
        EXPECT_EQ(back.params.at(name).data, t.data);
    }
}

TEST(Checkpoint, MomentsRoundTrip) {
    TrainConfig cfg = tiny_train_cfg();
    ParamStore<float> params;
    Rng rng(3);
    params.emplace("a", Tensor<float>::randn({3, 2}, rng, 1.0));
    params.emplace("b", Tensor<float>::randn({4}, rng, 1.0));
    AdamState<float> st = AdamState<float>::init(params);
    st.step = 42;
    st.m.at("a").data[1] = 0.5f;
    st.v.at("b").data[2] = 0.25f;
    const std::string bytes = encode_checkpoint(params, 123, &st);
    const CheckpointData back = decode_checkpoint(bytes);
    ASSERT_TRUE(back.has_moments);
    EXPECT_EQ(back.moments.step, 42);
    EXPECT_EQ(back.moments.m.at("a").data, st.m.at("a").data);
    EXPECT_EQ(back.moments.v.at("b").data, st.v.at("b").data);
}

TEST(Checkpoint, CorruptionRejectedWithOffset) {
    TrainConfig cfg = tiny_train_cfg();
    ParamStore<float> params;
    params.emplace("w", Tensor<float>({2}, {1.0f, 2.0f}));
    std::string bytes = encode_checkpoint(params, 5);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    try {
        decode_checkpoint(bytes.substr(0, bytes.size() - 3));
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_GT(e.byte_offset, 0u);
        EXPECT_LE(e.byte_offset, bytes.size());
    }
}

TEST(Surgery, FinetuneLoadKeepsExactlyTheCoreNames) {
    TrainConfig cfg = tiny_train_cfg();
    auto pre = init_model_params<float>(cfg, ModelMode::pretrain, 1);
    CheckpointData ck = decode_checkpoint(encode_checkpoint(pre, config_fingerprint(cfg)));

    auto ft = init_model_params<float>(cfg, ModelMode::finetune, 2);
    LoadReport rep = apply_pretrained(ft, ck, cfg, false);

    std::set<std::string> dropped(rep.dropped.begin(), rep.dropped.end());
    std::set<std::string> want_dropped, want_loaded, want_fresh;
    for (const auto& [name, t] : pre)
        (is_proxy_param(name) ? want_dropped : want_loaded).insert(name);
    for (const auto& [name, t] : ft)
        if (is_decoder_param(name)) want_fresh.insert(name);

    EXPECT_EQ(dropped, want_dropped);
    EXPECT_EQ(std::set<std::string>(rep.loaded.begin(), rep.loaded.end()), want_loaded);
    EXPECT_EQ(std::set<std::string>(rep.fresh.begin(), rep.fresh.end()), want_fresh);
    for (const auto& n : rep.loaded) {
        EXPECT_TRUE(is_pretrain_core_param(n)) << n;
        EXPECT_EQ(ft.at(n).data, pre.at(n).data);
    }
}

TEST(Surgery, FingerprintMismatchNeedsForce) {
    TrainConfig cfg = tiny_train_cfg();
    auto pre = init_model_params<float>(cfg, ModelMode::pretrain, 1);
    CheckpointData ck = decode_checkpoint(encode_checkpoint(pre, /*fingerprint=*/999));
    auto ft = init_model_params<float>(cfg, ModelMode::finetune, 2);
    EXPECT_THROW(apply_pretrained(ft, ck, cfg, false), ConfigError);
    EXPECT_NO_THROW(apply_pretrained(ft, ck, cfg, true));
}

std::vector<Volume> tiny_dataset(int n, int organs, bool both_modalities) {
    std::vector<Volume> out;
    for (int i = 0; i < n; ++i) {
        const Modality m =
            (both_modalities && i % 2 == 1) ? Modality::mr_like : Modality::ct_like;
        out.push_back(gen_phantom(100 + i, 8, 8, 8, organs, m, 1));
    }
    return out;
}

TEST(Pretrain, DeterministicAcrossReruns) {
    TrainConfig cfg = tiny_train_cfg();
    auto data = tiny_dataset(2, 2, true);
    const PretrainResult a = pretrain_loop(cfg, data);
    const PretrainResult b = pretrain_loop(cfg, data);
    EXPECT_EQ(a.csv, b.csv);
    for (const auto& [name, t] : a.params) EXPECT_EQ(b.params.at(name).data, t.data);
    // checkpoint carries the full declared parameter set
    EXPECT_EQ(param_names(a.params),
              param_names(init_model_params<float>(cfg, ModelMode::pretrain, cfg.seed)));
}

TEST(Pretrain, SingleModalityWarnsButRuns) {
    TrainConfig cfg = tiny_train_cfg();
    auto data = tiny_dataset(2, 2, false);
    std::ostringstream info;
    const PretrainResult r = pretrain_loop(cfg, data, &info);
    EXPECT_NE(info.str().find("single modality"), std::string::npos);
    EXPECT_EQ(r.csv.substr(0, 39), "step,lr,inpaint,contrast,rot,jsd,total\n");
}

TEST(Pretrain, BatchOfOneRejected) {
    TrainConfig cfg = tiny_train_cfg();
    cfg.batch_size = 1;
    EXPECT_THROW(pretrain_loop(cfg, tiny_dataset(2, 2, true)), ConfigError);
}

TEST(Finetune, RunsFromScratchAndFromCheckpoint) {
    TrainConfig cfg = tiny_train_cfg();
    auto data = tiny_dataset(2, 2, false);
    const FinetuneResult scratch = finetune_loop(cfg, data);
    EXPECT_TRUE(scratch.load_report.loaded.empty());

    const PretrainResult pre = pretrain_loop(cfg, data);
    CheckpointData ck =
        decode_checkpoint(encode_checkpoint(pre.params, config_fingerprint(cfg)));
    std::ostringstream info;
    const FinetuneResult warm = finetune_loop(cfg, data, &ck, false, &info);
    EXPECT_FALSE(warm.load_report.loaded.empty());
    EXPECT_NE(info.str().find("dropped"), std::string::npos);
    EXPECT_NE(warm.csv.find("step,lr,ce,dice,total,train_dice"), std::string::npos);
}

TEST(Finetune, MissingLabelsRejected) {
    TrainConfig cfg = tiny_train_cfg();
    auto data = tiny_dataset(1, 2, false);
    data[0].labels.clear();
    EXPECT_THROW(finetune_loop(cfg, data), ContractError);
}

TEST(Inference, PredictsFullVolumeWithTiling) {
    TrainConfig cfg = tiny_train_cfg();
    auto params = init_model_params<float>(cfg, ModelMode::finetune, 3);
    Volume v = gen_phantom(5, 9, 10, 11, 2, Modality::ct_like, 1);  // forces padding
    const auto labels = predict_labels(params, cfg, v);
    EXPECT_EQ(static_cast<std::int64_t>(labels.size()), v.count());
    for (int l : labels) {
        EXPECT_GE(l, 0);
        EXPECT_LE(l, cfg.n_classes);
    }
}

TEST(Kfold, SplitContract) {
    TrainConfig cfg = tiny_train_cfg();
    cfg.total_steps = 1;
    cfg.warmup_steps = 0;
    auto data = tiny_dataset(10, 2, false);
    const KfoldResult r = kfold(cfg, data, 5);
    ASSERT_EQ(r.folds.size(), 5u);
    std::set<int> all;
    for (const auto& fold : r.folds) {
        EXPECT_EQ(fold.size(), 2u);
        for (int idx : fold) EXPECT_TRUE(all.insert(idx).second);  // disjoint
    }
    EXPECT_EQ(all.size(), 10u);
    // same seed, same splits
    const KfoldResult r2 = kfold(cfg, data, 5);
    EXPECT_EQ(r.folds, r2.folds);
    // reported mean recomposes exactly
    double mean = 0;
    for (double d : r.fold_dice) mean += d;
    mean /= 5.0;
    EXPECT_NEAR(r.mean_dice, mean, 1e-12);
}

TEST(Kfold, SmallDatasetRejected) {
    TrainConfig cfg = tiny_train_cfg();
    EXPECT_THROW(kfold(cfg, tiny_dataset(3, 2, false), 5), ContractError);
}

}  // namespace
