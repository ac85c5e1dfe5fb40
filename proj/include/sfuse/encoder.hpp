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

// Window partition bookkeeping for one (extents, W, shift) combination.
// Tokens live in x-fastest order on an nd grid; slots enumerate windows in
// window-major order. Region ids follow the rolled coordinate: the trailing
// W (resp. shift) positions of a rolled axis hold wrapped content, and only
// slots with identical region tuples may attend to each other.
struct WindowLayout {
    int window_volume = 1;
    int n_windows = 1;
    std::vector<int> perm;               // slot -> token
    std::vector<int> inv_perm;           // token -> slot
    std::vector<std::uint8_t> allowed;   // [n_windows][wv][wv]
    bool any_masked = false;

    bool pair_allowed(int window, int i, int j) const {
        return allowed[(static_cast<std::size_t>(window) * window_volume + i) * window_volume + j] != 0;
    }
};

// extents: tokens per axis, slowest axis first (z, y, x for the 3D grid).
// Every axis uses window size min(W, extent); shift applies only where the
// axis is longer than one window.
inline WindowLayout window_layout(const std::vector<int>& extents, int W, int shift) {
    const int nd = static_cast<int>(extents.size());
    if (nd < 1) throw ConfigError("window_layout: no extents");
    if (shift >= W) throw ConfigError("window_layout: shift must be < W");
    std::vector<int> win(nd), nwin(nd), shifts(nd);
    WindowLayout lay;
    for (int a = 0; a < nd; ++a) {
        win[a] = std::min(W, extents[a]);
        if (extents[a] % win[a] != 0)
            throw ConfigError("window " + std::to_string(win[a]) + " does not divide extent " +
                              std::to_string(extents[a]));
        nwin[a] = extents[a] / win[a];
        shifts[a] = (nwin[a] > 1) ? shift : 0;  // single-window axes need no roll
        lay.window_volume *= win[a];
        lay.n_windows *= nwin[a];
    }

    const int total = lay.n_windows * lay.window_volume;
    lay.perm.resize(static_cast<std::size_t>(total));
    lay.inv_perm.resize(static_cast<std::size_t>(total));
    // region id per axis of a rolled coordinate
    const auto region = [&](int a, int p) {
        if (shifts[a] == 0) return 0;
        if (p < extents[a] - win[a]) return 0;
        if (p < extents[a] - shifts[a]) return 1;
        return 2;
    };

    std::vector<int> wcoord(nd), lcoord(nd);
    std::vector<int> slot_region(static_cast<std::size_t>(total));
    for (int w = 0; w < lay.n_windows; ++w) {
        int rem = w;
        for (int a = 0; a < nd; ++a) {  // slowest axis first
            int prod = 1;
            for (int b = a + 1; b < nd; ++b) prod *= nwin[b];
            wcoord[a] = rem / prod;
            rem %= prod;
        }
        for (int l = 0; l < lay.window_volume; ++l) {
            int lrem = l;
            for (int a = 0; a < nd; ++a) {
                int prod = 1;
                for (int b = a + 1; b < nd; ++b) prod *= win[b];
                lcoord[a] = lrem / prod;
                lrem %= prod;
            }
            int token = 0, rid = 0;
            for (int a = 0; a < nd; ++a) {
                const int rolled = wcoord[a] * win[a] + lcoord[a];
                const int orig = (rolled + shifts[a]) % extents[a];
                token = token * extents[a] + orig;
                rid = rid * 3 + region(a, rolled);
            }
            const int slot = w * lay.window_volume + l;
            lay.perm[static_cast<std::size_t>(slot)] = token;
            lay.inv_perm[static_cast<std::size_t>(token)] = slot;
            slot_region[static_cast<std::size_t>(slot)] = rid;
        }
    }

    lay.allowed.assign(static_cast<std::size_t>(lay.n_windows) * lay.window_volume * lay.window_volume, 1);
    for (int w = 0; w < lay.n_windows; ++w)
        for (int i = 0; i < lay.window_volume; ++i)
            for (int j = 0; j < lay.window_volume; ++j) {
                const bool ok = slot_region[static_cast<std::size_t>(w * lay.window_volume + i)] ==
                                slot_region[static_cast<std::size_t>(w * lay.window_volume + j)];
                if (!ok) {
                    lay.allowed[(static_cast<std::size_t>(w) * lay.window_volume + i) * lay.window_volume + j] = 0;
                    lay.any_masked = true;
                }
            }
    return lay;
}

// relative-position index between two local window coordinates
inline std::vector<int> relative_bias_index(int W) {
    const int span = 2 * W - 1;
    std::vector<int> idx(static_cast<std::size_t>(W * W * W) * (W * W * W));
    int k = 0;
    for (int zi = 0; zi < W; ++zi)
        for (int yi = 0; yi < W; ++yi)
            for (int xi = 0; xi < W; ++xi)
                for (int zj = 0; zj < W; ++zj)
                    for (int yj = 0; yj < W; ++yj)
                        for (int xj = 0; xj < W; ++xj)
                            idx[static_cast<std::size_t>(k++)] =
                                ((zi - zj + W - 1) * span + (yi - yj + W - 1)) * span + (xi - xj + W - 1);
    return idx;
}

inline std::string enc_block_prefix(int stage, int block) {
    return "enc.stage" + std::to_string(stage) + ".block" + std::to_string(block) + ".";
}

template <class R>
void init_encoder_params(ParamStore<R>& store, const TrainConfig& cfg, Rng& rng) {
    const int W = cfg.enc_window;
    const int span = 2 * W - 1;
    for (int s = 0; s < cfg.enc_stages; ++s) {
        const int d = cfg.enc_width(s);
        const int h = cfg.enc_heads(s);
        for (int b = 0; b < cfg.enc_depth; ++b) {
            const std::string p = enc_block_prefix(s, b);
            store.emplace(p + "ln1.gain", Tensor<R>::full({d}, R(1)));
            store.emplace(p + "ln1.bias", Tensor<R>::zeros({d}));
            store.emplace(p + "ln2.gain", Tensor<R>::full({d}, R(1)));
            store.emplace(p + "ln2.bias", Tensor<R>::zeros({d}));
            for (const char* w : {"wq", "wk", "wv", "wo"})
                store.emplace(p + w, linear_init<R>(d, d, rng));
            for (const char* bb : {"bq", "bk", "bv", "bo"})
                store.emplace(p + bb, Tensor<R>::zeros({d}));
            // zero-initialized: early training equals bias-free attention
            store.emplace(p + "relbias", Tensor<R>::zeros({span * span * span, h}));
            store.emplace(p + "ffn.w1", linear_init<R>(d, 4 * d, rng));
            store.emplace(p + "ffn.b1", Tensor<R>::zeros({4 * d}));
            store.emplace(p + "ffn.w2", linear_init<R>(4 * d, d, rng));
            store.emplace(p + "ffn.b2", Tensor<R>::zeros({d}));
        }
        if (s + 1 < cfg.enc_stages) {
            const std::string m = "enc.merge" + std::to_string(s) + ".";
            store.emplace(m + "ln.gain", Tensor<R>::full({8 * d}, R(1)));
            store.emplace(m + "ln.bias", Tensor<R>::zeros({8 * d}));
            store.emplace(m + "w", linear_init<R>(8 * d, 2 * d, rng));
        }
    }
}

// One pre-norm Swin block: windowed MHA (+relative position bias, +shift
// mask) and a GELU MLP, both with residuals.
template <class R>
typename Graph<R>::Var encoder_block(Graph<R>& g, typename Graph<R>::Var x,
                                     const ParamBinding<R>& bind, const std::string& prefix,
                                     int width, int heads, const WindowLayout& lay,
                                     std::vector<typename Graph<R>::Var>* attn_sink = nullptr,
                                     R ln_eps = R(1e-5)) {
    const int d = width, h = heads;
    if (d % h != 0)
        throw ConfigError("encoder width " + std::to_string(d) + " not divisible by " +
                          std::to_string(h) + " heads");
    const int dh = d / h;
    const int wv = lay.window_volume;
    const R inv_sqrt_dh = static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh)));

    auto n1 = g.layer_norm(x, bind[prefix + "ln1.gain"], bind[prefix + "ln1.bias"], ln_eps);
    auto xw = g.reshape(g.gather_first(n1, lay.perm), {lay.n_windows, wv, d});
    auto q = g.add_lastvec(g.matmul(xw, bind[prefix + "wq"]), bind[prefix + "bq"]);
    auto k = g.add_lastvec(g.matmul(xw, bind[prefix + "wk"]), bind[prefix + "bk"]);
    auto v = g.add_lastvec(g.matmul(xw, bind[prefix + "wv"]), bind[prefix + "bv"]);

    // W is recoverable from the bias table span
    const int span3 = g.val(bind[prefix + "relbias"]).shape[0];
    const int span = static_cast<int>(std::lround(std::cbrt(static_cast<double>(span3))));
    const int W = (span + 1) / 2;
    auto pair_bias = g.gather_first(bind[prefix + "relbias"], relative_bias_index(W));  // [wv*wv, h]

    typename Graph<R>::Var mask;
    if (lay.any_masked) {
        Tensor<R> m = Tensor<R>::zeros({lay.n_windows, wv, wv});
        for (int w = 0; w < lay.n_windows; ++w)
            for (int i = 0; i < wv; ++i)
                for (int j = 0; j < wv; ++j)
                    if (!lay.pair_allowed(w, i, j))
                        m.data[(static_cast<std::size_t>(w) * wv + i) * wv + j] = R(-1e9);
        mask = g.constant(std::move(m));
    }

    std::vector<typename Graph<R>::Var> head_outs;
    for (int hi = 0; hi < h; ++hi) {
        auto qh = g.slice_last(q, hi * dh, (hi + 1) * dh);
        auto kh = g.slice_last(k, hi * dh, (hi + 1) * dh);
        auto vh = g.slice_last(v, hi * dh, (hi + 1) * dh);
        auto scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
        auto bias_h = g.reshape(g.slice_last(pair_bias, hi, hi + 1), {wv, wv});
        scores = g.add_mat2(scores, bias_h);
        if (lay.any_masked) scores = g.add(scores, mask);
        auto attn = g.softmax_last(scores);
        if (attn_sink) attn_sink->push_back(attn);
        head_outs.push_back(g.bmatmul(attn, vh));
    }
    auto merged = h == 1 ? head_outs[0] : g.concat_last(head_outs);
    auto proj = g.add_lastvec(g.matmul(merged, bind[prefix + "wo"]), bind[prefix + "bo"]);
    auto back = g.gather_first(g.reshape(proj, {lay.n_windows * wv, d}), lay.inv_perm);
    x = g.add(x, back);

    auto n2 = g.layer_norm(x, bind[prefix + "ln2.gain"], bind[prefix + "ln2.bias"], ln_eps);
    auto hminner = g.gelu(g.add_lastvec(g.matmul(n2, bind[prefix + "ffn.w1"]), bind[prefix + "ffn.b1"]));
    auto ffn = g.add_lastvec(g.matmul(hminner, bind[prefix + "ffn.w2"]), bind[prefix + "ffn.b2"]);
    return g.add(x, ffn);
}

// 2x spatial downsample: concatenate each 2^3 block of tokens, layer-norm,
// project 8d -> 2d.
template <class R>
typename Graph<R>::Var patch_merge(Graph<R>& g, typename Graph<R>::Var x,
                                   const ParamBinding<R>& bind, const std::string& prefix,
                                   int extent, int width, R ln_eps = R(1e-5)) {
    if (extent % 2 != 0) throw ConfigError("patch_merge: odd extent");
    const int ne = extent / 2;
    std::vector<int> perm;
    perm.reserve(static_cast<std::size_t>(ne) * ne * ne * 8);
    for (int qz = 0; qz < ne; ++qz)
        for (int qy = 0; qy < ne; ++qy)
            for (int qx = 0; qx < ne; ++qx)
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            perm.push_back(((qz * 2 + dz) * extent + (qy * 2 + dy)) * extent +
                                           (qx * 2 + dx));
    auto grouped = g.reshape(g.gather_first(x, perm), {ne * ne * ne, 8 * width});
    auto normed = g.layer_norm(grouped, bind[prefix + "ln.gain"], bind[prefix + "ln.bias"], ln_eps);
    return g.matmul(normed, bind[prefix + "w"]);
}

template <class R>
struct EncoderOutput {
    // stage_features[s]: [T_s, C*2^s], taken after the stage's blocks and
    // before merging; the last entry is the bottleneck
    std::vector<typename Graph<R>::Var> stage_features;
    std::vector<int> stage_extents;
    std::vector<typename Graph<R>::Var> attention;  // every head, [nWin, wv, wv]
};

template <class R>
EncoderOutput<R> encoder_forward(Graph<R>& g, const TokenGrid<R>& grid,
                                 const ParamBinding<R>& bind, const TrainConfig& cfg) {
    EncoderOutput<R> out;
    auto x = grid.tokens;
    int extent = grid.geom.n;
    for (int s = 0; s < cfg.enc_stages; ++s) {
        const int d = cfg.enc_width(s);
        const int h = cfg.enc_heads(s);
        if (extent < cfg.enc_window || extent % cfg.enc_window != 0)
            throw ConfigError("token extent " + std::to_string(extent) + " at stage " +
                              std::to_string(s) + " incompatible with window " +
                              std::to_string(cfg.enc_window));
        // shift only when there is more than one window per axis
        const int shift = (extent > cfg.enc_window) ? cfg.enc_window / 2 : 0;
        const WindowLayout regular = window_layout({extent, extent, extent}, cfg.enc_window, 0);
        const WindowLayout shifted = window_layout({extent, extent, extent}, cfg.enc_window, shift);
        for (int b = 0; b < cfg.enc_depth; ++b) {
            const bool use_shift = (b % 2 == 1) && shift > 0;
            x = encoder_block(g, x, bind, enc_block_prefix(s, b), d, h,
                              use_shift ? shifted : regular, &out.attention);
        }
        out.stage_features.push_back(x);
        out.stage_extents.push_back(extent);
        if (s + 1 < cfg.enc_stages) {
            x = patch_merge(g, x, bind, "enc.merge" + std::to_string(s) + ".", extent, d);
            extent /= 2;
        }
    }
    return out;
}

}  // namespace sfuse
