#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "symseg/data.hpp"
#include "symseg/errors.hpp"
#include "testutil.hpp"

using namespace symseg;
using namespace symseg::data;

namespace {

/// CT-like synthetic volume: bright body ellipse on dark background with two
/// dark lung ellipses inside. Returns the exact lung bbox.
VolumeRecord make_ct_volume(int64_t D, int64_t H, int64_t W, CropBox* lung_bbox,
                            bool with_lung_mask, uint64_t seed = 5) {
    Rng rng(seed);
    VolumeRecord rec;
    rec.image = Tensor({D, H, W});
    rec.infection = Tensor({D, H, W});
    Tensor lung({D, H, W});
    const double cy = H / 2.0, cx = W / 2.0;
    CropBox box{H, -1, W, -1};
    for (int64_t z = 0; z < D; ++z)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const int64_t i = (z * H + y) * W + x;
                const double by = (y - cy) / (0.45 * H), bx = (x - cx) / (0.45 * W);
                double v = 0.05;
                if (by * by + bx * bx <= 1.0) v = 0.85;  // body
                for (int l = 0; l < 2; ++l) {
                    const double lcx = cx + (l == 0 ? -0.22 : 0.22) * W;
                    const double ly = (y - cy) / (0.28 * H), lx = (x - lcx) / (0.13 * W);
                    if (ly * ly + lx * lx <= 1.0) {
                        v = 0.12;
                        lung[i] = 1.0f;
                        box.y0 = std::min(box.y0, y);
                        box.y1 = std::max(box.y1, y);
                        box.x0 = std::min(box.x0, x);
                        box.x1 = std::max(box.x1, x);
                    }
                }
                rec.image[i] = static_cast<float>(v + 0.005 * rng.uniform());
                if (lung[i] == 1.0f && rng.uniform() < 0.15) rec.infection[i] = 1.0f;
            }
    if (with_lung_mask) rec.lung = lung;
    if (lung_bbox) *lung_bbox = box;
    rec.cohort = "synthetic";
    rec.volume_id = "vol_test";
    return rec;
}

}  // namespace

TEST_CASE("preprocess defaults match the stated margin and size") {
    PreprocessParams p;
    CHECK(p.margin == 20);
    CHECK(p.out_size == 400);
}

TEST_CASE("crop equals lung bbox plus margin (index arithmetic)") {
    CropBox bbox;
    VolumeRecord rec = make_ct_volume(2, 100, 120, &bbox, true);
    PreprocessParams params;
    params.margin = 20;
    params.out_size = 64;
    PreprocessTrace trace;
    auto samples = preprocess_volume(rec, params, &trace);
    REQUIRE(samples.size() == 2);
    CHECK(trace.crop.y0 == std::max<int64_t>(0, bbox.y0 - 20));
    CHECK(trace.crop.y1 == std::min<int64_t>(99, bbox.y1 + 20));
    CHECK(trace.crop.x0 == std::max<int64_t>(0, bbox.x0 - 20));
    CHECK(trace.crop.x1 == std::min<int64_t>(119, bbox.x1 + 20));
    CHECK_FALSE(trace.bbox_estimated);
    for (const auto& s : samples) {
        CHECK(s.image.shape() == Shape{64, 64});
        CHECK_NOTHROW(s.validate());
    }
}

TEST_CASE("estimated lung bbox is close to the true one when no mask exists") {
    CropBox bbox;
    VolumeRecord rec = make_ct_volume(2, 100, 120, &bbox, false);
    auto est = estimate_lung_bbox(rec.image);
    REQUIRE(est.has_value());
    CHECK(std::abs(est->y0 - bbox.y0) <= 2);
    CHECK(std::abs(est->y1 - bbox.y1) <= 2);
    CHECK(std::abs(est->x0 - bbox.x0) <= 2);
    CHECK(std::abs(est->x1 - bbox.x1) <= 2);
}

TEST_CASE("uniform volume: estimation fails and the volume is skipped") {
    VolumeRecord rec;
    rec.image = Tensor({1, 40, 40}, 0.5f);
    rec.infection = Tensor({1, 40, 40});
    rec.cohort = "synthetic";
    rec.volume_id = "flat";
    auto samples = preprocess_volume(rec, PreprocessParams{20, 64});
    CHECK(samples.empty());
}

TEST_CASE("normalization: nonconstant slices hit zero mean unit std before max standardization") {
    CropBox bbox;
    VolumeRecord rec = make_ct_volume(3, 100, 120, &bbox, true);
    PreprocessTrace trace;
    PreprocessParams params;
    params.out_size = 64;
    auto samples = preprocess_volume(rec, params, &trace);
    REQUIRE(trace.slice_mean.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(std::abs(trace.slice_mean[i]) < 1e-5);
        CHECK(std::abs(trace.slice_std[i] - 1.0) < 1e-3);
    }
    // final images live in [-1, 1] after the max standardization
    for (const auto& s : samples) {
        CHECK(s.image.min() >= -1.0f - 1e-6f);
        CHECK(s.image.max() <= 1.0f + 1e-6f);
    }
}

TEST_CASE("zero-variance guard outputs zeros") {
    std::vector<float> flat(64, 3.5f);
    double mean = -1, sd = -1, mx = -1;
    normalize_slice(flat.data(), 64, &mean, &sd, &mx);
    for (float v : flat) CHECK(v == 0.0f);
    CHECK(mean == 0.0);
    CHECK(sd == 0.0);
}

TEST_CASE("mask/image shape mismatch is a hard error") {
    VolumeRecord rec;
    rec.image = Tensor({1, 8, 8});
    rec.infection = Tensor({1, 8, 9});
    rec.cohort = "x";
    rec.volume_id = "bad";
    CHECK_THROWS_AS(preprocess_volume(rec, PreprocessParams{}), ValidationError);
}

TEST_CASE("augment: zero rotation and unit scale is an exact identity") {
    Rng rng(11);
    auto samples = generate_phantoms(1, 64, rng);
    Rng arng(1);
    AugmentParams id{0.0, 1.0, 1.0};
    auto out = augment(samples[0], arng, id);
    for (int64_t i = 0; i < out.image.numel(); ++i) {
        CHECK(out.image[i] == doctest::Approx(samples[0].image[i]).epsilon(1e-6));
        CHECK(out.mask[i] == samples[0].mask[i]);
    }
}

TEST_CASE("augment keeps masks binary and bookkeeping consistent") {
    Rng rng(12);
    auto samples = generate_phantoms(5, 64, rng);
    Rng arng(77);
    for (const auto& s : samples) {
        auto out = augment(s, arng);
        CHECK_NOTHROW(out.validate());
    }
}

TEST_CASE("augment replays bit-identically under a fixed seed") {
    Rng rng(13);
    auto samples = generate_phantoms(1, 64, rng);
    Rng a(42), b(42), c(43);
    auto outa = augment(samples[0], a);
    auto outb = augment(samples[0], b);
    auto outc = augment(samples[0], c);
    CHECK(std::memcmp(outa.image.data(), outb.image.data(),
                      sizeof(float) * outa.image.numel()) == 0);
    CHECK(std::memcmp(outa.image.data(), outc.image.data(),
                      sizeof(float) * outa.image.numel()) != 0);
}

TEST_CASE("phantoms: preconditions, bookkeeping, containment") {
    Rng rng(14);
    CHECK_THROWS_AS(generate_phantoms(0, 64, rng), ValidationError);
    CHECK_THROWS_AS(generate_phantoms(4, 16, rng), ValidationError);

    std::vector<PhantomGeometry> geo;
    auto samples = generate_phantoms(40, 64, rng, &geo);
    REQUIRE(samples.size() == 40);
    REQUIRE(geo.size() == 40);
    int clean = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        CHECK_NOTHROW(s.validate());  // area bookkeeping is exact
        clean += s.covid_present ? 0 : 1;
        // every infected pixel sits inside one of the two lung ellipses
        for (int64_t y = 0; y < 64; ++y)
            for (int64_t x = 0; x < 64; ++x) {
                if (s.mask[y * 64 + x] != 1.0f) continue;
                bool inside = false;
                for (const auto& l : geo[i].lungs) {
                    const double dy = (y - l.cy) / l.ry, dx = (x - l.cx) / l.rx;
                    if (dy * dy + dx * dx <= 1.0) inside = true;
                }
                CHECK(inside);
            }
    }
    CHECK(clean >= 4);   // roughly 30% stay clean
    CHECK(clean <= 24);
}

TEST_CASE("phantom generation is deterministic per seed") {
    Rng a(21), b(21);
    auto sa = generate_phantoms(3, 64, a);
    auto sb = generate_phantoms(3, 64, b);
    for (size_t i = 0; i < sa.size(); ++i)
        CHECK(std::memcmp(sa[i].image.data(), sb[i].image.data(),
                          sizeof(float) * sa[i].image.numel()) == 0);
}

TEST_CASE("manifest: 29 volumes with a 3-volume test split leaves 26 for train+val") {
    Rng rng(15);
    auto samples = generate_phantoms(29, 64, rng);
    SplitSpec spec{20.0 / 29, 6.0 / 29, 3.0 / 29, 7};
    const std::string dir = testutil::temp_dir("manifest29");
    DatasetManifest m = build_manifest(samples, spec, dir);
    std::map<std::string, Split> vol_split;
    for (const auto& e : m.entries) vol_split[e.volume_id] = e.split;
    int counts[3] = {0, 0, 0};
    for (auto& [vol, s] : vol_split) ++counts[static_cast<int>(s)];
    CHECK(counts[2] == 3);
    CHECK(counts[0] + counts[1] == 26);
}

TEST_CASE("manifest: degenerate single-volume split puts every slice in train") {
    Rng rng(16);
    auto samples = generate_phantoms(1, 64, rng);
    const std::string dir = testutil::temp_dir("manifest1");
    DatasetManifest m = build_manifest(samples, SplitSpec{1.0, 0.0, 0.0, 3}, dir);
    for (const auto& e : m.entries) CHECK(e.split == Split::kTrain);
}

TEST_CASE("split fractions must sum to one") {
    CHECK_THROWS_AS((SplitSpec{0.5, 0.2, 0.2, 1}).validate(), ValidationError);
}

TEST_CASE("cache round-trip is bit-identical and reloads through the manifest") {
    Rng rng(17);
    auto samples = generate_phantoms(6, 64, rng);
    const std::string dir = testutil::temp_dir("roundtrip");
    build_manifest(samples, SplitSpec{0.5, 1.0 / 6, 2.0 / 6, 9}, dir);
    SliceDataset ds = SliceDataset::load(dir + "/manifest.json");
    REQUIRE(ds.samples.size() == samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        CHECK(std::memcmp(ds.samples[i].image.data(), samples[i].image.data(),
                          sizeof(float) * samples[i].image.numel()) == 0);
        CHECK(std::memcmp(ds.samples[i].mask.data(), samples[i].mask.data(),
                          sizeof(float) * samples[i].mask.numel()) == 0);
        CHECK(ds.samples[i].infection_area == samples[i].infection_area);
    }
}

TEST_CASE("split hygiene: no volume straddles splits; test slices stay out of train/val") {
    Rng rng(18);
    auto volumes = generate_phantoms(12, 64, rng);
    // several slices per volume to make straddling possible at all
    std::vector<SegmentationSample> samples;
    for (const auto& v : volumes)
        for (int s = 0; s < 3; ++s) {
            SegmentationSample c = v;
            c.slice_index = s;
            samples.push_back(std::move(c));
        }
    SliceDataset ds = SliceDataset::from_memory(samples, SplitSpec{0.5, 0.25, 0.25, 31});
    std::map<std::string, std::set<Split>> seen;
    for (size_t i = 0; i < ds.samples.size(); ++i)
        seen[ds.samples[i].volume_id].insert(ds.split[i]);
    for (auto& [vol, splits] : seen) CHECK(splits.size() == 1);
}

TEST_CASE("cache writes are deterministic for identical inputs and seed") {
    Rng a(19), b(19);
    auto sa = generate_phantoms(4, 64, a);
    auto sb = generate_phantoms(4, 64, b);
    const std::string da = testutil::temp_dir("detA");
    const std::string db = testutil::temp_dir("detB");
    build_manifest(sa, SplitSpec{0.75, 0.0, 0.25, 5}, da);
    build_manifest(sb, SplitSpec{0.75, 0.0, 0.25, 5}, db);
    for (const auto& name : {"manifest.json"}) {
        std::ifstream fa(da + "/" + name), fb(db + "/" + name);
        std::string ca((std::istreambuf_iterator<char>(fa)), {});
        std::string cb((std::istreambuf_iterator<char>(fb)), {});
        CHECK(ca == cb);
    }
}

TEST_CASE("manifest rejects a volume assigned to two splits") {
    const std::string dir = testutil::temp_dir("straddle");
    std::ofstream out(dir + "/manifest.json");
    out << R"({"format":"symseg-manifest","version":1,"size":64,"preprocess_hash":"",
"normalization":"per_slice_zscore_maxabs_v1","samples":[
{"file":"a.ssmp","volume_id":"v1","slice_index":0,"split":"train","cohort":"c","covid_present":false,"infection_area":0},
{"file":"b.ssmp","volume_id":"v1","slice_index":1,"split":"test","cohort":"c","covid_present":false,"infection_area":0}]})";
    out.close();
    CHECK_THROWS_AS(load_manifest(dir + "/manifest.json"), ValidationError);
}
