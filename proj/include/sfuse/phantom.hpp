#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "sfuse/common.hpp"
#include "sfuse/rng.hpp"
#include "sfuse/volume.hpp"

namespace sfuse {

// Knobs for the synthetic anatomy. The defaults are the "standard" regime;
// the OOD harness varies them to define distinct test regions.
struct PhantomOptions {
    double noise_sigma = 0.02;
    double bias_amplitude = 0.25;  // MR-like multiplicative field, +/- this
    double radius_min = 0.12;      // semi-axes as a fraction of min extent
    double radius_max = 0.28;
    double center_margin = 0.18;   // keep organ centers away from the border
};

namespace detail {

// anatomy stream must not depend on modality: paired volumes are registered
constexpr std::uint64_t kAnatomyStream = 0x414e4154;  // "ANAT"
constexpr std::uint64_t kNoiseStream = 0x4e4f4953;    // "NOIS"
constexpr std::uint64_t kBiasStream = 0x42494153;     // "BIAS"

struct Ellipsoid {
    double cx, cy, cz;
    double ax, ay, az;
};

inline std::vector<Ellipsoid> sample_anatomy(std::uint64_t seed, int dx, int dy, int dz,
                                             int n_organs, const PhantomOptions& opt) {
    Rng rng(derive_seed(seed, kAnatomyStream));
    const double mind = static_cast<double>(std::min({dx, dy, dz}));
    std::vector<Ellipsoid> organs;
    // each class draws its semi-axes from its own size band, so organ scale
    // carries class information even in a sub-volume crop
    const double band = (opt.radius_max - opt.radius_min) / n_organs;
    for (int i = 0; i < n_organs; ++i) {
        Ellipsoid e{};
        // retry a few times to keep organ centers apart
        for (int attempt = 0; attempt < 20; ++attempt) {
            e.cx = rng.uniform(opt.center_margin, 1.0 - opt.center_margin) * dx;
            e.cy = rng.uniform(opt.center_margin, 1.0 - opt.center_margin) * dy;
            e.cz = rng.uniform(opt.center_margin, 1.0 - opt.center_margin) * dz;
            bool clear = true;
            for (const auto& o : organs) {
                const double d2 = (e.cx - o.cx) * (e.cx - o.cx) + (e.cy - o.cy) * (e.cy - o.cy) +
                                  (e.cz - o.cz) * (e.cz - o.cz);
                if (d2 < (0.15 * mind) * (0.15 * mind)) {
                    clear = false;
                    break;
                }
            }
            if (clear) break;
        }
        const double lo = opt.radius_min + band * i;
        const double hi = opt.radius_min + band * (i + 1);
        e.ax = rng.uniform(lo, hi) * mind;
        e.ay = rng.uniform(lo, hi) * mind;
        e.az = rng.uniform(lo, hi) * mind;
        organs.push_back(e);
    }
    return organs;
}

// label permutation for the MR-like lookup, keyed by transfer_id
inline std::vector<int> label_permutation(int n_labels, std::uint64_t transfer_id) {
    std::vector<int> perm(n_labels);
    for (int i = 0; i < n_labels; ++i) perm[i] = i + 1;
    Rng rng(derive_seed(transfer_id, 0x5045524d));
    for (int i = n_labels - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(perm[i], perm[j]);
    }
    return perm;
}

}  // namespace detail

// CT-like: ascending affine ramp over label ids.
// MR-like: descending ramp over a transfer_id-keyed permutation of the labels,
// so the two modalities disagree on intensity ordering.
inline double transfer_intensity(Modality m, int label, int n_labels,
                                 const std::vector<int>& perm) {
    if (m == Modality::ct_like) {
        if (label == 0) return 0.10;
        return 0.10 + 0.75 * static_cast<double>(label) / n_labels;
    }
    if (label == 0) return 0.05;
    return 0.90 - 0.70 * static_cast<double>(perm[label - 1]) / n_labels;
}

// Deterministic synthetic dual-modality phantom: background plus n_organs
// random ellipsoids. The label grid depends only on (seed, dims, n_organs,
// options), never on modality, so CT-like/MR-like calls at the same seed
// produce registered pairs.
inline Volume gen_phantom(std::uint64_t seed, int dx, int dy, int dz, int n_organs,
                          Modality modality, std::uint64_t transfer_id,
                          const PhantomOptions& opt = {}) {
    if (n_organs < 1) throw ConfigError("gen_phantom: n_organs must be >= 1");
    if (n_organs > 64) throw ConfigError("gen_phantom: n_organs > 64");
    if (dx < 8 || dy < 8 || dz < 8) throw ConfigError("gen_phantom: dims must each be >= 8");

    Volume v;
    v.dx = dx;
    v.dy = dy;
    v.dz = dz;
    v.modality = modality;
    v.labels.assign(static_cast<std::size_t>(v.count()), 0);
    v.voxels.assign(static_cast<std::size_t>(v.count()), 0.0f);

    const auto organs = detail::sample_anatomy(seed, dx, dy, dz, n_organs, opt);
    for (int z = 0; z < dz; ++z)
        for (int y = 0; y < dy; ++y)
            for (int x = 0; x < dx; ++x) {
                int label = 0;
                for (int i = 0; i < n_organs; ++i) {
                    const auto& e = organs[static_cast<std::size_t>(i)];
                    const double ux = (x + 0.5 - e.cx) / e.ax;
                    const double uy = (y + 0.5 - e.cy) / e.ay;
                    const double uz = (z + 0.5 - e.cz) / e.az;
                    if (ux * ux + uy * uy + uz * uz <= 1.0) label = i + 1;
                }
                v.labels[static_cast<std::size_t>(v.index(x, y, z))] = label;
            }

    const auto perm = detail::label_permutation(n_organs, transfer_id);

    // low-frequency multiplicative bias field (MR-like only): trilinear
    // interpolation of a random 2x2x2 corner grid
    double corners[8] = {1, 1, 1, 1, 1, 1, 1, 1};
    if (modality == Modality::mr_like && opt.bias_amplitude > 0.0) {
        Rng brng(derive_seed(seed, detail::kBiasStream));
        for (auto& c : corners) c = 1.0 + opt.bias_amplitude * (2.0 * brng.uniform() - 1.0);
    }
    const auto bias_at = [&](int x, int y, int z) {
        const double fx = dx > 1 ? static_cast<double>(x) / (dx - 1) : 0.0;
        const double fy = dy > 1 ? static_cast<double>(y) / (dy - 1) : 0.0;
        const double fz = dz > 1 ? static_cast<double>(z) / (dz - 1) : 0.0;
        double c00 = corners[0] * (1 - fx) + corners[1] * fx;
        double c01 = corners[2] * (1 - fx) + corners[3] * fx;
        double c10 = corners[4] * (1 - fx) + corners[5] * fx;
        double c11 = corners[6] * (1 - fx) + corners[7] * fx;
        return (c00 * (1 - fy) + c01 * fy) * (1 - fz) + (c10 * (1 - fy) + c11 * fy) * fz;
    };

    Rng nrng(derive_seed(seed, detail::kNoiseStream + static_cast<std::uint64_t>(modality)));
    for (int z = 0; z < dz; ++z)
        for (int y = 0; y < dy; ++y)
            for (int x = 0; x < dx; ++x) {
                const std::int64_t i = v.index(x, y, z);
                double val = transfer_intensity(modality, v.labels[static_cast<std::size_t>(i)],
                                                n_organs, perm);
                if (modality == Modality::mr_like && opt.bias_amplitude > 0.0)
                    val *= bias_at(x, y, z);
                if (opt.noise_sigma > 0.0) val += nrng.normal(0.0, opt.noise_sigma);
                v.voxels[static_cast<std::size_t>(i)] = static_cast<float>(val);
            }
    return v;
}

}  // namespace sfuse
