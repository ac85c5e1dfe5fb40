#include <cstdio>
#include <set>
#include <unordered_set>

#include <gtest/gtest.h>

#include "sfuse/phantom.hpp"
#include "sfuse/pipeline.hpp"
#include "sfuse/volume.hpp"

using namespace sfuse;

namespace {

Volume tiny_volume() {
    Volume v;
    v.dx = v.dy = v.dz = 1;
    v.voxels = {0.5f};
    v.modality = Modality::ct_like;
    v.sx = v.sy = v.sz = 1.0f;
    return v;
}

TEST(Sfv1, MinimalFileSizeFromFormatDefinition) {
    // magic(4) + dims(3*4) + modality(1) + labels flag(1) + spacing(3*4) + one f32 voxel(4)
    const std::string bytes = encode_volume(tiny_volume());
    EXPECT_EQ(bytes.size(), 4u + 12u + 1u + 1u + 12u + 4u);
    EXPECT_EQ(bytes.size(), 34u);
    const Volume back = decode_volume(bytes);
    EXPECT_EQ(encode_volume(back), bytes);
    EXPECT_EQ(back.voxels[0], 0.5f);
}

TEST(Sfv1, RoundTripBitExact) {
    Volume v;
    v.dx = v.dy = v.dz = 4;
    v.voxels.assign(64, 0.0f);
    v.modality = Modality::mr_like;
    const std::string a = encode_volume(v);
    EXPECT_EQ(encode_volume(decode_volume(a)), a);

    Rng rng(5);
    Volume w = gen_phantom(3, 9, 10, 11, 4, Modality::mr_like, 1);
    w.sx = 0.7f;
    w.sy = 1.3f;
    w.sz = 2.0f;
    const std::string b = encode_volume(w);
    const Volume back = decode_volume(b);
    EXPECT_EQ(encode_volume(back), b);
    EXPECT_EQ(back.labels, w.labels);
    EXPECT_EQ(back.voxels, w.voxels);
}

TEST(Sfv1, FileRoundTrip) {
    const std::string path = testing::TempDir() + "sfv1_roundtrip.sfv";
    Volume v = gen_phantom(7, 8, 8, 8, 2, Modality::ct_like, 0);
    write_volume(v, path);
    const Volume back = read_volume(path);
    EXPECT_EQ(encode_volume(back), encode_volume(v));
    std::remove(path.c_str());
}

TEST(Sfv1, BadMagicRejected) {
    std::string bytes = encode_volume(tiny_volume());
    bytes[0] = 'X';
    bytes[1] = 'X';
    try {
        decode_volume(bytes);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.byte_offset, 0u);
    }
}

TEST(Sfv1, TruncationRejectedWithOffset) {
    const std::string bytes = encode_volume(tiny_volume());
    for (std::size_t cut : {3u, 10u, 20u, 33u}) {
        try {
            decode_volume(bytes.substr(0, cut));
            FAIL() << "expected FormatError at cut " << cut;
        } catch (const FormatError& e) {
            EXPECT_LE(e.byte_offset, cut);
        }
    }
}

TEST(Sfv1, OversizedLabelRejected) {
    Volume v = tiny_volume();
    v.labels = {70000};
    EXPECT_THROW(encode_volume(v), FormatError);
}

TEST(Phantom, RegisteredPairsShareLabels) {
    for (std::uint64_t seed : {0ull, 1ull, 42ull}) {
        const Volume ct = gen_phantom(seed, 12, 12, 12, 3, Modality::ct_like, 0);
        const Volume mr = gen_phantom(seed, 12, 12, 12, 3, Modality::mr_like, 0);
        EXPECT_EQ(ct.labels, mr.labels);
        EXPECT_NE(ct.voxels, mr.voxels);  // appearance gap
    }
}

TEST(Phantom, NoiseFreeSingleOrganHasTwoIntensities) {
    PhantomOptions opt;
    opt.noise_sigma = 0.0;
    opt.bias_amplitude = 0.0;
    for (Modality m : {Modality::ct_like, Modality::mr_like}) {
        const Volume v = gen_phantom(11, 10, 10, 10, 1, m, 0, opt);
        std::set<float> distinct(v.voxels.begin(), v.voxels.end());
        EXPECT_EQ(distinct.size(), 2u) << modality_name(m);
    }
}

TEST(Phantom, DifferentSeedsDiffer) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Volume a = gen_phantom(seed, 10, 10, 10, 2, Modality::ct_like, 0);
        const Volume b = gen_phantom(seed + 1000, 10, 10, 10, 2, Modality::ct_like, 0);
        EXPECT_NE(a.labels, b.labels) << "seed " << seed;
    }
}

TEST(Phantom, PureFunctionOfArguments) {
    const Volume a = gen_phantom(5, 9, 9, 9, 3, Modality::mr_like, 2);
    const Volume b = gen_phantom(5, 9, 9, 9, 3, Modality::mr_like, 2);
    EXPECT_EQ(a.voxels, b.voxels);
    EXPECT_EQ(a.labels, b.labels);
}

TEST(Phantom, ConfigErrors) {
    EXPECT_THROW(gen_phantom(0, 8, 8, 8, 65, Modality::ct_like, 0), ConfigError);
    EXPECT_THROW(gen_phantom(0, 8, 8, 8, 0, Modality::ct_like, 0), ConfigError);
    EXPECT_THROW(gen_phantom(0, 4, 8, 8, 1, Modality::ct_like, 0), ConfigError);
}

TEST(SampleSubvolume, ExactSizeReturnsWholeVolume) {
    const int S = 8;
    Volume v = gen_phantom(3, S, S, S, 2, Modality::ct_like, 0);
    Rng rng(0);
    const SubVolume sv = sample_subvolume(v, S, rng);
    EXPECT_EQ(sv.off_x, 0);
    EXPECT_EQ(sv.off_y, 0);
    EXPECT_EQ(sv.off_z, 0);
    EXPECT_EQ(sv.voxels, v.voxels);
    EXPECT_EQ(sv.labels, v.labels);
}

TEST(SampleSubvolume, OffsetsCoverManyPositions) {
    const int S = 8;
    Volume v = gen_phantom(4, 2 * S, 2 * S, 2 * S, 2, Modality::ct_like, 0);
    Rng rng(9);
    std::unordered_set<int> seen;
    for (int i = 0; i < 1000; ++i) {
        const SubVolume sv = sample_subvolume(v, S, rng);
        seen.insert((sv.off_z * 32 + sv.off_y) * 32 + sv.off_x);
    }
    EXPECT_GT(seen.size(), 50u);
}

TEST(SampleSubvolume, LabelsShareTheOffset) {
    Volume v = gen_phantom(6, 20, 20, 20, 3, Modality::mr_like, 1);
    Rng rng(2);
    const SubVolume sv = sample_subvolume(v, 8, rng);
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                EXPECT_EQ(sv.labels[static_cast<std::size_t>(sv.index(x, y, z))],
                          v.labels[static_cast<std::size_t>(v.index(sv.off_x + x, sv.off_y + y, sv.off_z + z))]);
}

TEST(SampleSubvolume, UndersizedVolumePaddedByEdgeReplication) {
    Volume v = gen_phantom(1, 8, 8, 8, 1, Modality::ct_like, 0);
    Rng rng(3);
    const SubVolume sv = sample_subvolume(v, 12, rng);
    EXPECT_EQ(sv.voxels.size(), 12u * 12u * 12u);
    // padded border replicates the source edge
    EXPECT_EQ(sv.voxels[static_cast<std::size_t>(sv.index(11, 0, 0))],
              v.at(7, 0, 0));
}

TEST(Normalize, MapsToUnitRange) {
    SubVolume sv;
    sv.S = 2;
    sv.voxels = {2, 4, 6, 8, 2, 4, 6, 8};
    normalize_intensity(sv);
    EXPECT_FLOAT_EQ(sv.voxels[0], 0.0f);
    EXPECT_FLOAT_EQ(sv.voxels[3], 1.0f);
    SubVolume flat;
    flat.S = 1;
    flat.voxels = {5.0f};
    normalize_intensity(flat);
    EXPECT_FLOAT_EQ(flat.voxels[0], 0.0f);
}

SubVolume demo_subvolume(int S, std::uint64_t seed) {
    Volume v = gen_phantom(seed, S, S, S, 2, Modality::ct_like, 0);
    Rng rng(seed);
    SubVolume sv = sample_subvolume(v, S, rng);
    normalize_intensity(sv);
    return sv;
}

TEST(Augment, IdentityWhenForced) {
    const SubVolume sv = demo_subvolume(8, 1);
    Rng rng(0);
    AugmentConfig cfg;
    cfg.cutout_fmin = 0.0;
    cfg.cutout_fmax = 0.0;
    cfg.force_rot = 0;
    const AugmentedView view = augment(sv, rng, cfg);
    EXPECT_EQ(view.voxels, sv.voxels);
    EXPECT_EQ(view.rot_label, 0);
    for (auto m : view.cutout_mask) EXPECT_EQ(m, 0);
}

TEST(Augment, RotationComposesToIdentity) {
    const SubVolume sv = demo_subvolume(8, 2);
    const auto once = rot90_z(sv.voxels, 8, 2);
    const auto twice = rot90_z(once, 8, 2);
    EXPECT_EQ(twice, sv.voxels);
    const auto four = rot90_z(rot90_z(rot90_z(rot90_z(sv.voxels, 8, 1), 8, 1), 8, 1), 8, 1);
    EXPECT_EQ(four, sv.voxels);
}

TEST(Augment, RotationPreservesVoxelMultiset) {
    const SubVolume sv = demo_subvolume(8, 3);
    for (int k = 1; k < 4; ++k) {
        auto rotated = rot90_z(sv.voxels, 8, k);
        auto a = sv.voxels;
        std::sort(a.begin(), a.end());
        std::sort(rotated.begin(), rotated.end());
        EXPECT_EQ(a, rotated);
    }
}

TEST(Augment, ErasedFractionWithinBounds) {
    const SubVolume sv = demo_subvolume(16, 4);
    Rng rng(7);
    const AugmentConfig cfg;  // defaults 0.1 .. 0.3
    for (int i = 0; i < 100; ++i) {
        const AugmentedView view = augment(sv, rng, cfg);
        std::int64_t erased = 0;
        for (auto m : view.cutout_mask) erased += m;
        const double f = static_cast<double>(erased) / static_cast<double>(view.cutout_mask.size());
        EXPECT_GE(f, cfg.cutout_fmin);
        EXPECT_LE(f, cfg.cutout_fmax);
        // erased voxels are zeroed; the pre-cutout target keeps the original
        for (std::size_t e = 0; e < view.cutout_mask.size(); ++e) {
            if (view.cutout_mask[e])
                EXPECT_EQ(view.voxels[e], 0.0f);
            else
                EXPECT_EQ(view.voxels[e], view.pre_cutout[e]);
        }
    }
}

TEST(Augment, RotatingSourceReproducesViewOrientation) {
    const SubVolume sv = demo_subvolume(8, 5);
    Rng rng(11);
    AugmentConfig cfg;
    cfg.cutout_fmin = 0.0;
    cfg.cutout_fmax = 0.0;
    const AugmentedView view = augment(sv, rng, cfg);
    EXPECT_EQ(view.pre_cutout, rot90_z(sv.voxels, 8, view.rot_label));
}

TEST(PatchEmbed, TokenCount) {
    const TokenGeometry g(4, 2, 5);
    EXPECT_EQ(g.T, 8);
    EXPECT_EQ(TokenGeometry(16, 2, 8).T, 512);
    EXPECT_THROW(TokenGeometry(10, 3, 8), ConfigError);
}

TEST(PatchEmbed, ZeroVolumeZeroBiasGivesZeroTokens) {
    Graph<double> g;
    const TokenGeometry geom(4, 2, 3);
    std::vector<float> voxels(64, 0.0f);
    auto w = g.leaf(Tensor<double>::full({8, 3}, 0.5));
    auto b = g.leaf(Tensor<double>::zeros({3}));
    auto grid = patch_partition_embed(g, voxels, geom, w, b);
    for (double v : g.val(grid.tokens).data) EXPECT_EQ(v, 0.0);
}

TEST(PatchEmbed, OneHotVoxelSelectsWeightRow) {
    Graph<double> g;
    const TokenGeometry geom(4, 2, 6);
    Rng rng(13);
    Tensor<double> w = Tensor<double>::randn({8, 6}, rng, 1.0);
    std::vector<float> voxels(64, 0.0f);
    // voxel (3, 2, 1): patch (1, 1, 0) -> token 3; local (1, 0, 1) -> column 5
    voxels[(1 * 4 + 2) * 4 + 3] = 1.0f;
    auto grid = patch_partition_embed(g, voxels, geom, g.leaf(w), g.leaf(Tensor<double>::zeros({6})));
    const auto& tok = g.val(grid.tokens);
    for (int t = 0; t < 8; ++t)
        for (int c = 0; c < 6; ++c) {
            const double want = (t == 3) ? w.data[5 * 6 + c] : 0.0;
            EXPECT_NEAR(tok.data[t * 6 + c], want, 1e-12) << "token " << t << " ch " << c;
        }
}

TEST(PatchEmbed, LinearInVoxelsWithZeroBias) {
    Rng rng(17);
    const TokenGeometry geom(4, 2, 4);
    Tensor<double> w = Tensor<double>::randn({8, 4}, rng, 0.3);
    std::vector<float> v1(64), v2(64), mix(64);
    for (int i = 0; i < 64; ++i) {
        v1[i] = static_cast<float>(rng.uniform());
        v2[i] = static_cast<float>(rng.uniform());
        mix[i] = 2.0f * v1[i] - 3.0f * v2[i];
    }
    Graph<double> g;
    auto wv = g.leaf(w);
    auto bz = g.leaf(Tensor<double>::zeros({4}));
    const auto& e1 = g.val(patch_partition_embed(g, v1, geom, wv, bz).tokens);
    const auto& e2 = g.val(patch_partition_embed(g, v2, geom, wv, bz).tokens);
    const auto& em = g.val(patch_partition_embed(g, mix, geom, wv, bz).tokens);
    for (std::size_t i = 0; i < em.data.size(); ++i)
        EXPECT_NEAR(em.data[i], 2.0 * e1.data[i] - 3.0 * e2.data[i], 1e-5);
}

}  // namespace
