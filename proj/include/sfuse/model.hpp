#pragma once

#include <string>
#include <vector>

#include "sfuse/config.hpp"
#include "sfuse/decoder.hpp"
#include "sfuse/dim.hpp"
#include "sfuse/encoder.hpp"
#include "sfuse/losses.hpp"
#include "sfuse/params.hpp"
#include "sfuse/pipeline.hpp"

namespace sfuse {

enum class ModelMode { pretrain, finetune };

inline bool is_proxy_param(const std::string& name) { return name.rfind("proxy.", 0) == 0; }
inline bool is_decoder_param(const std::string& name) { return name.rfind("dec.", 0) == 0; }

// embedding + DIM + encoder: the subset retained across the fine-tune load
inline bool is_pretrain_core_param(const std::string& name) {
    return name.rfind("embed.", 0) == 0 || name.rfind("dim.", 0) == 0 || name.rfind("enc.", 0) == 0;
}

template <class R>
void init_embed_params(ParamStore<R>& store, const TrainConfig& cfg, Rng& rng) {
    store.emplace("embed.weight", linear_init<R>(cfg.P * cfg.P * cfg.P, cfg.C, rng));
    store.emplace("embed.bias", Tensor<R>::zeros({cfg.C}));
}

template <class R>
ParamStore<R> init_model_params(const TrainConfig& cfg, ModelMode mode, std::uint64_t seed) {
    cfg.validate();
    ParamStore<R> store;
    Rng rng(derive_seed(seed, 0x4d4f444c));  // "MODL"
    init_embed_params(store, cfg, rng);
    init_dim_params(store, cfg, rng);
    init_encoder_params(store, cfg, rng);
    if (mode == ModelMode::pretrain)
        init_proxy_params(store, cfg, rng);
    else
        init_decoder_params(store, cfg, rng);
    return store;
}

template <class R>
TokenGrid<R> embed_view(Graph<R>& g, const std::vector<float>& voxels, const ParamBinding<R>& bind,
                        const TrainConfig& cfg) {
    const TokenGeometry geom(cfg.S, cfg.P, cfg.C);
    return patch_partition_embed(g, voxels, geom, bind["embed.weight"], bind["embed.bias"]);
}

template <class R>
struct PretrainPass {
    DimOutput<R> dim;
    EncoderOutput<R> enc;
    ProxyOutput<R> proxy;
};

// One full pre-training pass: the fused grid follows view_a's geometry, so
// the proxy targets (rotation class, inpainting mask) are view_a's.
template <class R>
PretrainPass<R> pretrain_pass(Graph<R>& g, const std::vector<float>& view_a,
                              const std::vector<float>& view_b, const ParamBinding<R>& bind,
                              const TrainConfig& cfg) {
    PretrainPass<R> pass;
    auto pa = embed_view(g, view_a, bind, cfg);
    auto pb = embed_view(g, view_b, bind, cfg);
    pass.dim = dim_forward(g, pa, pb, bind, cfg);
    TokenGrid<R> fused{pass.dim.fused, pa.geom};
    pass.enc = encoder_forward(g, fused, bind, cfg);
    pass.proxy = proxy_forward(g, pass.enc, bind, cfg);
    return pass;
}

// Fine-tune / inference pass: fused tokens -> encoder -> decoder; the raw
// full-resolution skip comes from view_a (the supervised geometry).
template <class R>
typename Graph<R>::Var segmentation_pass(Graph<R>& g, const std::vector<float>& view_a,
                                         const std::vector<float>& view_b,
                                         const ParamBinding<R>& bind, const TrainConfig& cfg) {
    auto pa = embed_view(g, view_a, bind, cfg);
    auto pb = embed_view(g, view_b, bind, cfg);
    auto dim = dim_forward(g, pa, pb, bind, cfg);
    TokenGrid<R> fused{dim.fused, pa.geom};
    auto enc = encoder_forward(g, fused, bind, cfg);
    return decoder_forward(g, enc, view_a, bind, cfg);
}

}  // namespace sfuse
