#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/graph.hpp"
#include "sfuse/rng.hpp"
#include "sfuse/volume.hpp"

namespace sfuse {

// Cubic crop of side S, intensity-normalized to [0,1] before any
// augmentation so downstream losses are scale-free.
struct SubVolume {
    int S = 0;
    std::vector<float> voxels;
    std::vector<int> labels;  // empty when the source had none
    Modality modality = Modality::ct_like;
    int off_x = 0, off_y = 0, off_z = 0;

    std::int64_t index(int x, int y, int z) const {
        return (static_cast<std::int64_t>(z) * S + y) * S + x;
    }
};

struct AugmentConfig {
    double cutout_fmin = 0.1;
    double cutout_fmax = 0.3;
    int force_rot = -1;  // >= 0 pins the rotation class (tests/inference)
};

// One stochastic view: rotation class + inner cutouts. pre_cutout holds the
// rotated-but-unerased voxels, i.e. the inpainting target in view geometry.
struct AugmentedView {
    int S = 0;
    std::vector<float> voxels;
    std::vector<float> pre_cutout;
    std::vector<std::uint8_t> cutout_mask;
    std::vector<int> labels;  // rotated with the view, never erased
    int rot_label = 0;
};

// Edge-replication padding up to side >= S on every axis.
inline Volume pad_to_min_extent(const Volume& v, int S) {
    if (v.dx >= S && v.dy >= S && v.dz >= S) return v;
    Volume p;
    p.dx = std::max(v.dx, S);
    p.dy = std::max(v.dy, S);
    p.dz = std::max(v.dz, S);
    p.modality = v.modality;
    p.sx = v.sx;
    p.sy = v.sy;
    p.sz = v.sz;
    p.voxels.resize(static_cast<std::size_t>(p.count()));
    if (v.has_labels()) p.labels.resize(static_cast<std::size_t>(p.count()));
    for (int z = 0; z < p.dz; ++z) {
        const int sz0 = std::min(z, v.dz - 1);
        for (int y = 0; y < p.dy; ++y) {
            const int sy0 = std::min(y, v.dy - 1);
            for (int x = 0; x < p.dx; ++x) {
                const int sx0 = std::min(x, v.dx - 1);
                p.voxels[static_cast<std::size_t>(p.index(x, y, z))] = v.at(sx0, sy0, sz0);
                if (v.has_labels())
                    p.labels[static_cast<std::size_t>(p.index(x, y, z))] =
                        v.labels[static_cast<std::size_t>(v.index(sx0, sy0, sz0))];
            }
        }
    }
    return p;
}

// Edge-replication padding up to a multiple of S on every axis (tiling).
inline Volume pad_to_multiple(const Volume& v, int S) {
    const auto round_up = [S](int d) { return ((d + S - 1) / S) * S; };
    const int nx = round_up(v.dx), ny = round_up(v.dy), nz = round_up(v.dz);
    if (nx == v.dx && ny == v.dy && nz == v.dz) return v;
    Volume p;
    p.dx = nx;
    p.dy = ny;
    p.dz = nz;
    p.modality = v.modality;
    p.sx = v.sx;
    p.sy = v.sy;
    p.sz = v.sz;
    p.voxels.resize(static_cast<std::size_t>(p.count()));
    if (v.has_labels()) p.labels.resize(static_cast<std::size_t>(p.count()));
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const int sx0 = std::min(x, v.dx - 1), sy0 = std::min(y, v.dy - 1),
                          sz0 = std::min(z, v.dz - 1);
                p.voxels[static_cast<std::size_t>(p.index(x, y, z))] = v.at(sx0, sy0, sz0);
                if (v.has_labels())
                    p.labels[static_cast<std::size_t>(p.index(x, y, z))] =
                        v.labels[static_cast<std::size_t>(v.index(sx0, sy0, sz0))];
            }
    return p;
}

// Deterministic crop at a fixed offset (used by the tiling inference path).
inline SubVolume crop_subvolume_at(const Volume& vol, int S, int ox, int oy, int oz) {
    if (ox < 0 || oy < 0 || oz < 0 || ox + S > vol.dx || oy + S > vol.dy || oz + S > vol.dz)
        throw ContractError("crop_subvolume_at: tile outside volume");
    SubVolume sv;
    sv.S = S;
    sv.modality = vol.modality;
    sv.off_x = ox;
    sv.off_y = oy;
    sv.off_z = oz;
    sv.voxels.resize(static_cast<std::size_t>(S) * S * S);
    if (vol.has_labels()) sv.labels.resize(sv.voxels.size());
    for (int z = 0; z < S; ++z)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                sv.voxels[static_cast<std::size_t>(sv.index(x, y, z))] = vol.at(ox + x, oy + y, oz + z);
                if (vol.has_labels())
                    sv.labels[static_cast<std::size_t>(sv.index(x, y, z))] =
                        vol.labels[static_cast<std::size_t>(vol.index(ox + x, oy + y, oz + z))];
            }
    return sv;
}

// Uniform random axis-aligned S^3 crop; labels (if any) share the offset.
inline SubVolume sample_subvolume(const Volume& vol, int S, Rng& rng) {
    const Volume* src = &vol;
    Volume padded;
    if (vol.dx < S || vol.dy < S || vol.dz < S) {
        padded = pad_to_min_extent(vol, S);
        src = &padded;
    }
    SubVolume sv;
    sv.S = S;
    sv.modality = src->modality;
    sv.off_x = src->dx == S ? 0 : static_cast<int>(rng.below(static_cast<std::uint64_t>(src->dx - S + 1)));
    sv.off_y = src->dy == S ? 0 : static_cast<int>(rng.below(static_cast<std::uint64_t>(src->dy - S + 1)));
    sv.off_z = src->dz == S ? 0 : static_cast<int>(rng.below(static_cast<std::uint64_t>(src->dz - S + 1)));
    sv.voxels.resize(static_cast<std::size_t>(S) * S * S);
    if (src->has_labels()) sv.labels.resize(sv.voxels.size());
    for (int z = 0; z < S; ++z)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                sv.voxels[static_cast<std::size_t>(sv.index(x, y, z))] =
                    src->at(sv.off_x + x, sv.off_y + y, sv.off_z + z);
                if (src->has_labels())
                    sv.labels[static_cast<std::size_t>(sv.index(x, y, z))] =
                        src->labels[static_cast<std::size_t>(src->index(sv.off_x + x, sv.off_y + y, sv.off_z + z))];
            }
    return sv;
}

// Per-sub-volume min-max normalization to [0,1]. Constant crops map to all
// zeros. Kept for callers that work on isolated crops.
inline void normalize_intensity(SubVolume& sv) {
    if (sv.voxels.empty()) return;
    float lo = sv.voxels[0], hi = sv.voxels[0];
    for (float v : sv.voxels) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float range = hi - lo;
    if (range > 1e-12f) {
        for (auto& v : sv.voxels) v = (v - lo) / range;
    } else {
        for (auto& v : sv.voxels) v = 0.0f;
    }
}

// Per-volume min-max normalization to [0,1], applied once at ingest. Crops
// taken afterwards all share one intensity map, so the intensity-to-class
// relation is stable across crops of the same volume.
inline void normalize_volume(Volume& v) {
    if (v.voxels.empty()) return;
    float lo = v.voxels[0], hi = v.voxels[0];
    for (float x : v.voxels) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    const float range = hi - lo;
    if (range > 1e-12f) {
        for (auto& x : v.voxels) x = (x - lo) / range;
    } else {
        for (auto& x : v.voxels) x = 0.0f;
    }
}

inline std::vector<Volume> normalize_dataset(std::vector<Volume> volumes) {
    for (auto& v : volumes) normalize_volume(v);
    return volumes;
}

// k*90deg rotation about the z axis: (x, y) -> (y, S-1-x), applied k times.
template <class T>
std::vector<T> rot90_z(const std::vector<T>& grid, int S, int k) {
    std::vector<T> cur = grid;
    std::vector<T> next(grid.size());
    for (int rep = 0; rep < (k % 4 + 4) % 4; ++rep) {
        for (int z = 0; z < S; ++z)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    next[(static_cast<std::size_t>(z) * S + y) * S + x] =
                        cur[(static_cast<std::size_t>(z) * S + x) * S + (S - 1 - y)];
        std::swap(cur, next);
    }
    return cur;
}

// Rotation (recorded as rot_label) followed by random interior cuboid
// cutouts until the erased fraction reaches cutout_fmin. Cuboid sides are
// capped at S/2, which bounds the final fraction below fmin + 1/8.
inline AugmentedView augment(const SubVolume& sv, Rng& rng, const AugmentConfig& cfg = {}) {
    AugmentedView view;
    view.S = sv.S;
    const int S = sv.S;
    view.rot_label = cfg.force_rot >= 0 ? (cfg.force_rot % 4) : rng.range(0, 3);
    view.pre_cutout = rot90_z(sv.voxels, S, view.rot_label);
    if (!sv.labels.empty()) view.labels = rot90_z(sv.labels, S, view.rot_label);
    view.voxels = view.pre_cutout;
    view.cutout_mask.assign(view.voxels.size(), 0);

    const std::int64_t total = static_cast<std::int64_t>(S) * S * S;
    std::int64_t erased = 0;
    const std::int64_t want =
        static_cast<std::int64_t>(std::ceil(cfg.cutout_fmin * static_cast<double>(total)));
    const int side_max = std::max(1, S / 2);
    while (erased < want) {
        const int wx = rng.range(std::min(2, side_max), side_max);
        const int wy = rng.range(std::min(2, side_max), side_max);
        const int wz = rng.range(std::min(2, side_max), side_max);
        const int x0 = rng.range(0, S - wx);
        const int y0 = rng.range(0, S - wy);
        const int z0 = rng.range(0, S - wz);
        for (int z = z0; z < z0 + wz; ++z)
            for (int y = y0; y < y0 + wy; ++y)
                for (int x = x0; x < x0 + wx; ++x) {
                    auto& m = view.cutout_mask[(static_cast<std::size_t>(z) * S + y) * S + x];
                    if (!m) {
                        m = 1;
                        view.voxels[(static_cast<std::size_t>(z) * S + y) * S + x] = 0.0f;
                        ++erased;
                    }
                }
    }
    return view;
}

// View with no rotation and no cutouts (the inference-time path: both DIM
// streams receive the identical unaugmented sub-volume).
inline AugmentedView identity_view(const SubVolume& sv) {
    AugmentedView view;
    view.S = sv.S;
    view.rot_label = 0;
    view.voxels = sv.voxels;
    view.pre_cutout = sv.voxels;
    view.cutout_mask.assign(sv.voxels.size(), 0);
    view.labels = sv.labels;
    return view;
}

// Token grid geometry shared by the embedding, DIM, encoder and exporters.
struct TokenGeometry {
    int S = 0;  // sub-volume side
    int P = 0;  // patch side
    int C = 0;  // embedding width
    int n = 0;  // tokens per axis = S/P
    int T = 0;  // n^3

    TokenGeometry() = default;
    TokenGeometry(int S_, int P_, int C_) : S(S_), P(P_), C(C_) {
        if (P <= 0 || S % P != 0)
            throw ConfigError("patch size " + std::to_string(P) + " does not divide sub-volume side " +
                              std::to_string(S));
        n = S / P;
        T = n * n * n;
    }
};

template <class R>
struct TokenGrid {
    typename Graph<R>::Var tokens;  // [T, C]
    TokenGeometry geom;
};

// Rows of the patch matrix: non-overlapping P^3 patches in x-fastest patch
// order, each flattened x-fastest.
template <class R>
Tensor<R> patch_matrix(const std::vector<float>& voxels, const TokenGeometry& g) {
    Tensor<R> m = Tensor<R>::zeros({g.T, g.P * g.P * g.P});
    const int n = g.n, P = g.P, S = g.S;
    for (int pz = 0; pz < n; ++pz)
        for (int py = 0; py < n; ++py)
            for (int px = 0; px < n; ++px) {
                const int t = (pz * n + py) * n + px;
                int col = 0;
                for (int lz = 0; lz < P; ++lz)
                    for (int ly = 0; ly < P; ++ly)
                        for (int lx = 0; lx < P; ++lx) {
                            const int x = px * P + lx, y = py * P + ly, z = pz * P + lz;
                            m.data[static_cast<std::size_t>(t) * (P * P * P) + col] =
                                static_cast<R>(voxels[(static_cast<std::size_t>(z) * S + y) * S + x]);
                            ++col;
                        }
            }
    return m;
}

// Linear patch embedding: [T, P^3] x [P^3, C] + bias. Differentiable w.r.t.
// the map and bias; the voxel patches enter as constants.
template <class R>
TokenGrid<R> patch_partition_embed(Graph<R>& g, const std::vector<float>& voxels,
                                   const TokenGeometry& geom, typename Graph<R>::Var weight,
                                   typename Graph<R>::Var bias) {
    auto patches = g.constant(patch_matrix<R>(voxels, geom));
    auto tokens = g.add_lastvec(g.matmul(patches, weight), bias);
    return TokenGrid<R>{tokens, geom};
}

}  // namespace sfuse
