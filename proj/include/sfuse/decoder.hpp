#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/config.hpp"
#include "sfuse/encoder.hpp"
#include "sfuse/graph.hpp"
#include "sfuse/params.hpp"

namespace sfuse {

inline int decoder_voxel_width(const TrainConfig& cfg) { return std::max(cfg.C / 2, 2); }

template <class R>
Tensor<R> conv_init(std::vector<int> shape, Rng& rng) {
    // fan-in scaled normal; shape is [Co, Ci, k, k, k] or [Ci, Co, k, k, k]
    std::int64_t fan = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan *= shape[i];
    return Tensor<R>::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan)));
}

// Segmentation decoder: transpose-conv upsampling with skip fusion per
// encoder stage, a full-resolution skip from the raw voxels, and a 1x1x1
// classification head. Fresh-initialized at fine-tuning; absent during
// pre-training.
template <class R>
void init_decoder_params(ParamStore<R>& store, const TrainConfig& cfg, Rng& rng) {
    const int dv = decoder_voxel_width(cfg);
    for (int s = cfg.enc_stages - 1; s >= 1; --s) {
        const int din = cfg.enc_width(s), dout = cfg.enc_width(s - 1);
        store.emplace("dec.up" + std::to_string(s) + ".w", conv_init<R>({din, dout, 2, 2, 2}, rng));
        store.emplace("dec.up" + std::to_string(s) + ".b", Tensor<R>::zeros({dout}));
        store.emplace("dec.fuse" + std::to_string(s - 1) + ".w",
                      conv_init<R>({dout, 2 * dout, 3, 3, 3}, rng));
        store.emplace("dec.fuse" + std::to_string(s - 1) + ".b", Tensor<R>::zeros({dout}));
    }
    store.emplace("dec.voxup.w", conv_init<R>({cfg.C, dv, cfg.P, cfg.P, cfg.P}, rng));
    store.emplace("dec.voxup.b", Tensor<R>::zeros({dv}));
    store.emplace("dec.root.w", conv_init<R>({dv, 1, 3, 3, 3}, rng));
    store.emplace("dec.root.b", Tensor<R>::zeros({dv}));
    store.emplace("dec.fusevox.w", conv_init<R>({dv, 2 * dv, 3, 3, 3}, rng));
    store.emplace("dec.fusevox.b", Tensor<R>::zeros({dv}));
    store.emplace("dec.head.w", conv_init<R>({cfg.n_classes + 1, dv, 1, 1, 1}, rng));
    store.emplace("dec.head.b", Tensor<R>::zeros({cfg.n_classes + 1}));
}

// Projection heads used only during pre-training and dropped at fine-tuning.
template <class R>
void init_proxy_params(ParamStore<R>& store, const TrainConfig& cfg, Rng& rng) {
    const int dv = decoder_voxel_width(cfg);
    for (int s = cfg.enc_stages - 1; s >= 1; --s) {
        const int din = cfg.enc_width(s), dout = cfg.enc_width(s - 1);
        store.emplace("proxy.inpaint.up" + std::to_string(s) + ".w",
                      conv_init<R>({din, dout, 2, 2, 2}, rng));
        store.emplace("proxy.inpaint.up" + std::to_string(s) + ".b", Tensor<R>::zeros({dout}));
    }
    store.emplace("proxy.inpaint.voxup.w", conv_init<R>({cfg.C, dv, cfg.P, cfg.P, cfg.P}, rng));
    store.emplace("proxy.inpaint.voxup.b", Tensor<R>::zeros({dv}));
    store.emplace("proxy.inpaint.out.w", conv_init<R>({1, dv, 1, 1, 1}, rng));
    store.emplace("proxy.inpaint.out.b", Tensor<R>::zeros({1}));
    const int d_top = cfg.enc_width(cfg.enc_stages - 1);
    store.emplace("proxy.rot.w", linear_init<R>(d_top, 4, rng));
    store.emplace("proxy.rot.b", Tensor<R>::zeros({4}));
    store.emplace("proxy.contrast.w", linear_init<R>(d_top, cfg.c_proj, rng));
    store.emplace("proxy.contrast.b", Tensor<R>::zeros({cfg.c_proj}));
}

// [T, d] token features -> [d, e, e, e] channel-major grid
template <class R>
typename Graph<R>::Var tokens_to_grid(Graph<R>& g, typename Graph<R>::Var tokens, int extent) {
    const int d = g.val(tokens).shape[1];
    return g.reshape(g.transpose2d(tokens), {d, extent, extent, extent});
}

// Coarse-to-fine upsampling with skip fusion; emits per-voxel class logits
// at full sub-volume resolution as [n_classes+1, S, S, S].
template <class R>
typename Graph<R>::Var decoder_forward(Graph<R>& g, const EncoderOutput<R>& enc,
                                       const std::vector<float>& raw_voxels,
                                       const ParamBinding<R>& bind, const TrainConfig& cfg) {
    if (static_cast<int>(enc.stage_features.size()) != cfg.enc_stages)
        throw ConfigError("decoder_forward: encoder stage count mismatch");
    const int S = cfg.S;
    if (static_cast<std::int64_t>(raw_voxels.size()) != static_cast<std::int64_t>(S) * S * S)
        throw DimensionError("decoder_forward: raw voxel count != S^3");

    auto x = tokens_to_grid(g, enc.stage_features.back(), enc.stage_extents.back());
    for (int s = cfg.enc_stages - 1; s >= 1; --s) {
        x = g.conv_transpose3d(x, bind["dec.up" + std::to_string(s) + ".w"],
                               bind["dec.up" + std::to_string(s) + ".b"]);
        auto skip = tokens_to_grid(g, enc.stage_features[static_cast<std::size_t>(s - 1)],
                                   enc.stage_extents[static_cast<std::size_t>(s - 1)]);
        auto fused = g.concat_first({x, skip});
        x = g.gelu(g.conv3d(fused, bind["dec.fuse" + std::to_string(s - 1) + ".w"],
                            bind["dec.fuse" + std::to_string(s - 1) + ".b"]));
    }
    x = g.conv_transpose3d(x, bind["dec.voxup.w"], bind["dec.voxup.b"]);

    Tensor<R> raw = Tensor<R>::zeros({1, S, S, S});
    for (std::size_t i = 0; i < raw_voxels.size(); ++i) raw.data[i] = static_cast<R>(raw_voxels[i]);
    auto root = g.gelu(g.conv3d(g.constant(std::move(raw)), bind["dec.root.w"], bind["dec.root.b"]));
    auto fused = g.concat_first({x, root});
    x = g.gelu(g.conv3d(fused, bind["dec.fusevox.w"], bind["dec.fusevox.b"]));
    return g.conv3d(x, bind["dec.head.w"], bind["dec.head.b"]);
}

template <class R>
struct ProxyOutput {
    typename Graph<R>::Var reconstruction;  // [1, S, S, S]
    typename Graph<R>::Var rot_logits;      // [1, 4]
    typename Graph<R>::Var contrast;        // [1, c_proj], L2-normalized
};

template <class R>
ProxyOutput<R> proxy_forward(Graph<R>& g, const EncoderOutput<R>& enc,
                             const ParamBinding<R>& bind, const TrainConfig& cfg) {
    if (!bind.has("proxy.rot.w"))
        throw ContractError("proxy_forward called without proxy heads (fine-tune mode)");
    ProxyOutput<R> out;
    auto x = tokens_to_grid(g, enc.stage_features.back(), enc.stage_extents.back());
    for (int s = cfg.enc_stages - 1; s >= 1; --s)
        x = g.gelu(g.conv_transpose3d(x, bind["proxy.inpaint.up" + std::to_string(s) + ".w"],
                                      bind["proxy.inpaint.up" + std::to_string(s) + ".b"]));
    x = g.gelu(g.conv_transpose3d(x, bind["proxy.inpaint.voxup.w"], bind["proxy.inpaint.voxup.b"]));
    out.reconstruction = g.conv3d(x, bind["proxy.inpaint.out.w"], bind["proxy.inpaint.out.b"]);

    const int d_top = cfg.enc_width(cfg.enc_stages - 1);
    auto pooled = g.reshape(g.mean_first(enc.stage_features.back()), {1, d_top});
    out.rot_logits = g.add_lastvec(g.matmul(pooled, bind["proxy.rot.w"]), bind["proxy.rot.b"]);

    auto z = g.add_lastvec(g.matmul(pooled, bind["proxy.contrast.w"]), bind["proxy.contrast.b"]);
    auto norm = g.sqrt_op(g.add_const(g.sum_last(g.square(z)), R(1e-12)));
    out.contrast = g.div_keeplast1(z, g.reshape(norm, {1, 1}));
    return out;
}

}  // namespace sfuse
