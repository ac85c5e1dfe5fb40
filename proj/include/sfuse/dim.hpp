#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/config.hpp"
#include "sfuse/graph.hpp"
#include "sfuse/params.hpp"
#include "sfuse/pipeline.hpp"

namespace sfuse {

// Two parallel cross-attention stacks with swapped queries. Stream i owns
// K/V; its queries come from the other stream at every layer. Widths double
// per layer from C; each stream's final feature is projected back to C,
// multiplied elementwise with that stream's original embedding, and the two
// scaled streams are fused (mean by default).

inline std::string dim_prefix(int stream, int layer) {
    return "dim.s" + std::to_string(stream) + ".l" + std::to_string(layer) + ".";
}

template <class R>
void init_dim_params(ParamStore<R>& store, const TrainConfig& cfg, Rng& rng) {
    for (int s = 1; s <= 2; ++s) {
        for (int l = 0; l < kDimLayers; ++l) {
            const int d = cfg.dim_width(l);
            const std::string p = dim_prefix(s, l);
            store.emplace(p + "ln_q.gain", Tensor<R>::full({d}, R(1)));
            store.emplace(p + "ln_q.bias", Tensor<R>::zeros({d}));
            store.emplace(p + "ln_kv.gain", Tensor<R>::full({d}, R(1)));
            store.emplace(p + "ln_kv.bias", Tensor<R>::zeros({d}));
            for (const char* w : {"wq", "wk", "wv", "wo"})
                store.emplace(p + w, linear_init<R>(d, d, rng));
            for (const char* b : {"bq", "bk", "bv", "bo"})
                store.emplace(p + b, Tensor<R>::zeros({d}));
            if (l + 1 < kDimLayers) {
                const int dn = cfg.dim_width(l + 1);
                store.emplace("dim.s" + std::to_string(s) + ".up" + std::to_string(l) + ".w",
                              linear_init<R>(d, dn, rng));
                store.emplace("dim.s" + std::to_string(s) + ".up" + std::to_string(l) + ".b",
                              Tensor<R>::zeros({dn}));
            }
        }
        store.emplace("dim.s" + std::to_string(s) + ".down.w",
                      linear_init<R>(cfg.dim_width(kDimLayers - 1), cfg.C, rng));
        store.emplace("dim.s" + std::to_string(s) + ".down.b", Tensor<R>::zeros({cfg.C}));
    }
}

template <class R>
struct MhaLayerVars {
    typename Graph<R>::Var ln_q_gain, ln_q_bias, ln_kv_gain, ln_kv_bias;
    typename Graph<R>::Var wq, bq, wk, bk, wv, bv, wo, bo;
    int width = 0;
    int heads = 0;
};

template <class R>
MhaLayerVars<R> dim_layer_vars(const ParamBinding<R>& bind, const TrainConfig& cfg, int stream,
                               int layer) {
    const std::string p = dim_prefix(stream, layer);
    MhaLayerVars<R> v;
    v.ln_q_gain = bind[p + "ln_q.gain"];
    v.ln_q_bias = bind[p + "ln_q.bias"];
    v.ln_kv_gain = bind[p + "ln_kv.gain"];
    v.ln_kv_bias = bind[p + "ln_kv.bias"];
    v.wq = bind[p + "wq"];
    v.bq = bind[p + "bq"];
    v.wk = bind[p + "wk"];
    v.bk = bind[p + "bk"];
    v.wv = bind[p + "wv"];
    v.bv = bind[p + "bv"];
    v.wo = bind[p + "wo"];
    v.bo = bind[p + "bo"];
    v.width = cfg.dim_width(layer);
    v.heads = cfg.dim_heads(layer);
    return v;
}

template <class R>
struct MhaResult {
    typename Graph<R>::Var out;                    // [T, d], residual applied
    std::vector<typename Graph<R>::Var> attn;      // per head, [T, T]
};

// Pre-norm cross-attention block. Q is projected from q_source, K and V from
// kv_source; the residual connection adds onto kv_source (the stream that
// owns this block).
template <class R>
MhaResult<R> mha_cross(Graph<R>& g, const MhaLayerVars<R>& p, typename Graph<R>::Var q_source,
                       typename Graph<R>::Var kv_source, R ln_eps = R(1e-5)) {
    const auto& qs = g.val(q_source);
    const auto& ks = g.val(kv_source);
    require_shape(qs.rank() == 2 && ks.rank() == 2 && qs.shape[1] == p.width &&
                      ks.shape[1] == p.width && qs.shape[0] == ks.shape[0],
                  "mha_cross", qs.shape, ks.shape);
    const int d = p.width, h = p.heads;
    if (d % h != 0)
        throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                          std::to_string(h) + " heads");
    const int dh = d / h;
    const R inv_sqrt_dh = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh)));

    auto nq = g.layer_norm(q_source, p.ln_q_gain, p.ln_q_bias, ln_eps);
    auto nkv = g.layer_norm(kv_source, p.ln_kv_gain, p.ln_kv_bias, ln_eps);
    auto q = g.add_lastvec(g.matmul(nq, p.wq), p.bq);
    auto k = g.add_lastvec(g.matmul(nkv, p.wk), p.bk);
    auto v = g.add_lastvec(g.matmul(nkv, p.wv), p.bv);

    MhaResult<R> res;
    std::vector<typename Graph<R>::Var> head_outs;
    for (int hi = 0; hi < h; ++hi) {
        auto qh = g.slice_last(q, hi * dh, (hi + 1) * dh);
        auto kh = g.slice_last(k, hi * dh, (hi + 1) * dh);
        auto vh = g.slice_last(v, hi * dh, (hi + 1) * dh);
        auto scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
        auto attn = g.softmax_last(scores);
        res.attn.push_back(attn);
        head_outs.push_back(g.bmatmul(attn, vh));
    }
    auto merged = h == 1 ? head_outs[0] : g.concat_last(head_outs);
    auto proj = g.add_lastvec(g.matmul(merged, p.wo), p.bo);
    res.out = g.add(kv_source, proj);
    return res;
}

template <class R>
struct DimOutput {
    typename Graph<R>::Var fused;     // [T, C]
    typename Graph<R>::Var stream1;   // [T, d3] final MHA features
    typename Graph<R>::Var stream2;   // [T, d3]
    // attn[stream][layer][head] -> [T, T]
    std::vector<std::vector<std::vector<typename Graph<R>::Var>>> attn;
};

template <class R>
DimOutput<R> dim_forward(Graph<R>& g, const TokenGrid<R>& p1, const TokenGrid<R>& p2,
                         const ParamBinding<R>& bind, const TrainConfig& cfg) {
    const auto& t1 = g.val(p1.tokens);
    const auto& t2 = g.val(p2.tokens);
    if (t1.shape != t2.shape || p1.geom.T != p2.geom.T || p1.geom.C != p2.geom.C)
        throw ContractError("dim_forward: token grids disagree in shape or geometry");

    DimOutput<R> out;
    out.attn.assign(2, {});
    auto x1 = p1.tokens;
    auto x2 = p2.tokens;
    for (int l = 0; l < kDimLayers; ++l) {
        const auto p_s1 = dim_layer_vars(bind, cfg, 1, l);
        const auto p_s2 = dim_layer_vars(bind, cfg, 2, l);
        // queries swapped at every layer, both blocks read pre-update features
        auto r1 = mha_cross(g, p_s1, /*q=*/x2, /*kv=*/x1);
        auto r2 = mha_cross(g, p_s2, /*q=*/x1, /*kv=*/x2);
        out.attn[0].push_back(std::move(r1.attn));
        out.attn[1].push_back(std::move(r2.attn));
        x1 = r1.out;
        x2 = r2.out;
        if (l + 1 < kDimLayers) {
            x1 = g.add_lastvec(g.matmul(x1, bind["dim.s1.up" + std::to_string(l) + ".w"]),
                               bind["dim.s1.up" + std::to_string(l) + ".b"]);
            x2 = g.add_lastvec(g.matmul(x2, bind["dim.s2.up" + std::to_string(l) + ".w"]),
                               bind["dim.s2.up" + std::to_string(l) + ".b"]);
        }
    }
    out.stream1 = x1;
    out.stream2 = x2;

    auto f1 = g.add_lastvec(g.matmul(x1, bind["dim.s1.down.w"]), bind["dim.s1.down.b"]);
    auto f2 = g.add_lastvec(g.matmul(x2, bind["dim.s2.down.w"]), bind["dim.s2.down.b"]);
    auto scaled = g.add(g.mul(p1.tokens, f1), g.mul(p2.tokens, f2));
    out.fused = cfg.dim_fuse == "sum" ? scaled : g.scale(scaled, R(0.5));
    return out;
}

// Per-token relevance of one attention map: how much each token is attended
// to, i.e. the column mean. Unfolded to voxels by nearest-patch upsampling
// and max-normalized into [0,1].
template <class R>
Volume export_attention(Graph<R>& g, const DimOutput<R>& out, int stream, int layer, int head,
                        const TokenGeometry& geom, Modality modality) {
    if (stream < 1 || stream > 2) throw ConfigError("stream index must be 1 or 2");
    const auto& layers = out.attn[static_cast<std::size_t>(stream - 1)];
    if (layer < 0 || layer >= static_cast<int>(layers.size()))
        throw ConfigError("attention layer index " + std::to_string(layer) + " out of range [0," +
                          std::to_string(layers.size()) + ")");
    const auto& heads = layers[static_cast<std::size_t>(layer)];
    if (head < 0 || head >= static_cast<int>(heads.size()))
        throw ConfigError("attention head index " + std::to_string(head) + " out of range [0," +
                          std::to_string(heads.size()) + ")");
    const Tensor<R>& attn = g.val(heads[static_cast<std::size_t>(head)]);
    const int T = geom.T;
    std::vector<double> relevance(static_cast<std::size_t>(T), 0.0);
    for (int q = 0; q < T; ++q)
        for (int t = 0; t < T; ++t)
            relevance[static_cast<std::size_t>(t)] += static_cast<double>(attn.data[static_cast<std::size_t>(q) * T + t]);
    double mx = 0.0;
    for (auto& v : relevance) {
        v /= T;
        mx = std::max(mx, v);
    }
    if (mx > 0.0)
        for (auto& v : relevance) v /= mx;

    Volume vol;
    vol.dx = vol.dy = vol.dz = geom.S;
    vol.modality = modality;
    vol.voxels.resize(static_cast<std::size_t>(vol.count()));
    const int n = geom.n, P = geom.P;
    for (int z = 0; z < geom.S; ++z)
        for (int y = 0; y < geom.S; ++y)
            for (int x = 0; x < geom.S; ++x) {
                const int t = ((z / P) * n + (y / P)) * n + (x / P);
                vol.voxels[static_cast<std::size_t>(vol.index(x, y, z))] =
                    static_cast<float>(relevance[static_cast<std::size_t>(t)]);
            }
    return vol;
}

}  // namespace sfuse
