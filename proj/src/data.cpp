#include "symseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <queue>

#include <json.hpp>

#include "symseg/errors.hpp"
#include "symseg/image_io.hpp"

namespace symseg::data {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// record validation
// ---------------------------------------------------------------------------

void VolumeRecord::validate() const {
    if (image.rank() != 3) throw ValidationError("volume image must be [D,H,W]");
    if (!image.same_shape(infection))
        throw ValidationError("volume " + volume_id + ": image and infection mask shapes differ");
    if (lung && !lung->same_shape(image))
        throw ValidationError("volume " + volume_id + ": lung mask shape differs");
    if (cohort.empty()) throw ValidationError("volume " + volume_id + ": cohort must be nonempty");
    if (bit_depth != 8 && bit_depth != 16)
        throw ValidationError("volume " + volume_id + ": bit depth must be 8 or 16");
    for (int64_t i = 0; i < infection.numel(); ++i)
        if (infection[i] != 0.0f && infection[i] != 1.0f)
            throw ValidationError("volume " + volume_id + ": infection mask must be binary");
}

void SegmentationSample::validate() const {
    if (image.rank() != 2 || !image.same_shape(mask))
        throw ValidationError("sample: image and mask must share a 2D shape");
    if (!image.all_finite()) throw ValidationError("sample: image has non-finite values");
    int64_t area = 0;
    for (int64_t i = 0; i < mask.numel(); ++i) {
        if (mask[i] != 0.0f && mask[i] != 1.0f)
            throw ValidationError("sample: mask must be binary");
        area += mask[i] == 1.0f;
    }
    if (area != infection_area)
        throw ValidationError("sample: stored infection_area " + std::to_string(infection_area) +
                              " != mask area " + std::to_string(area));
    if (covid_present != (infection_area > 0))
        throw ValidationError("sample: covid_present flag inconsistent with area");
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

void normalize_slice(float* px, int64_t n, double* out_mean, double* out_std,
                     double* out_max_abs) {
    double s = 0.0, s2 = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        s += px[i];
        s2 += double(px[i]) * px[i];
    }
    const double mu = s / n;
    const double var = std::max(0.0, s2 / n - mu * mu);
    const double sd = std::sqrt(var);
    if (sd < 1e-12) {
        // zero-variance guard
        for (int64_t i = 0; i < n; ++i) px[i] = 0.0f;
        if (out_mean) *out_mean = 0.0;
        if (out_std) *out_std = 0.0;
        if (out_max_abs) *out_max_abs = 0.0;
        return;
    }
    double mx = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        px[i] = static_cast<float>((px[i] - mu) / sd);
        mx = std::max(mx, std::abs(double(px[i])));
    }
    if (out_mean || out_std) {
        double m2 = 0.0, v2 = 0.0;
        for (int64_t i = 0; i < n; ++i) m2 += px[i];
        m2 /= n;
        for (int64_t i = 0; i < n; ++i) v2 += (px[i] - m2) * (px[i] - m2);
        if (out_mean) *out_mean = m2;
        if (out_std) *out_std = std::sqrt(v2 / n);
    }
    if (out_max_abs) *out_max_abs = mx;
    if (mx > 0.0)
        for (int64_t i = 0; i < n; ++i) px[i] = static_cast<float>(px[i] / mx);
}

// ---------------------------------------------------------------------------
// lung bbox estimation: Otsu threshold + two largest interior components
// ---------------------------------------------------------------------------

double otsu_threshold(const Tensor& volume) {
    const float lo = volume.min(), hi = volume.max();
    if (!(hi > lo)) return lo;
    constexpr int kBins = 256;
    std::vector<int64_t> hist(kBins, 0);
    const double scale = (kBins - 1) / double(hi - lo);
    for (int64_t i = 0; i < volume.numel(); ++i)
        ++hist[static_cast<int>((volume[i] - lo) * scale)];
    const double total = static_cast<double>(volume.numel());
    double sum_all = 0.0;
    for (int b = 0; b < kBins; ++b) sum_all += b * double(hist[b]);
    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_bin = 0;
    for (int b = 0; b < kBins; ++b) {
        w0 += hist[b];
        if (w0 == 0.0) continue;
        const double w1 = total - w0;
        if (w1 == 0.0) break;
        sum0 += b * double(hist[b]);
        const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_bin = b;
        }
    }
    return lo + (best_bin + 0.5) / scale;
}

std::optional<CropBox> estimate_lung_bbox(const Tensor& volume) {
    const int64_t D = volume.dim(0), H = volume.dim(1), W = volume.dim(2);
    const double thr = otsu_threshold(volume);
    // Air and lung voxels sit below the threshold in CT; drop components
    // touching the x-y border (outside air), keep the two largest.
    std::vector<int32_t> label(static_cast<size_t>(volume.numel()), 0);
    int32_t next = 0;
    std::vector<std::pair<int64_t, int32_t>> comp_sizes;
    std::vector<bool> touches;
    std::vector<int64_t> qbuf;
    for (int64_t start = 0; start < volume.numel(); ++start) {
        if (volume[start] >= thr || label[static_cast<size_t>(start)]) continue;
        ++next;
        int64_t size = 0;
        bool border = false;
        qbuf.clear();
        qbuf.push_back(start);
        label[static_cast<size_t>(start)] = next;
        while (!qbuf.empty()) {
            const int64_t v = qbuf.back();
            qbuf.pop_back();
            ++size;
            const int64_t z = v / (H * W), rem = v % (H * W);
            const int64_t y = rem / W, x = rem % W;
            if (y == 0 || y == H - 1 || x == 0 || x == W - 1) border = true;
            const int64_t nbrs[6] = {v - H * W, v + H * W, v - W, v + W, v - 1, v + 1};
            const bool ok[6] = {z > 0, z < D - 1, y > 0, y < H - 1, x > 0, x < W - 1};
            for (int k = 0; k < 6; ++k) {
                if (!ok[k]) continue;
                const int64_t u = nbrs[k];
                if (volume[u] < thr && !label[static_cast<size_t>(u)]) {
                    label[static_cast<size_t>(u)] = next;
                    qbuf.push_back(u);
                }
            }
        }
        comp_sizes.emplace_back(size, next);
        touches.push_back(border);
    }
    std::vector<std::pair<int64_t, int32_t>> interior;
    for (size_t i = 0; i < comp_sizes.size(); ++i)
        if (!touches[comp_sizes[i].second - 1]) interior.push_back(comp_sizes[i]);
    if (interior.empty()) return std::nullopt;
    std::sort(interior.begin(), interior.end(), [](auto& a, auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<int32_t> keep;
    for (size_t i = 0; i < interior.size() && i < 2; ++i) keep.push_back(interior[i].second);

    CropBox box{H, -1, W, -1};
    for (int64_t v = 0; v < volume.numel(); ++v) {
        const int32_t l = label[static_cast<size_t>(v)];
        if (l != keep[0] && (keep.size() < 2 || l != keep[1])) continue;
        const int64_t rem = v % (H * W);
        const int64_t y = rem / W, x = rem % W;
        box.y0 = std::min(box.y0, y);
        box.y1 = std::max(box.y1, y);
        box.x0 = std::min(box.x0, x);
        box.x1 = std::max(box.x1, x);
    }
    if (box.y1 < box.y0) return std::nullopt;
    return box;
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

namespace {

std::optional<CropBox> mask_bbox_xy(const Tensor& mask) {
    const int64_t D = mask.dim(0), H = mask.dim(1), W = mask.dim(2);
    CropBox box{H, -1, W, -1};
    for (int64_t z = 0; z < D; ++z)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                if (mask[(z * H + y) * W + x] != 0.0f) {
                    box.y0 = std::min(box.y0, y);
                    box.y1 = std::max(box.y1, y);
                    box.x0 = std::min(box.x0, x);
                    box.x1 = std::max(box.x1, x);
                }
    if (box.y1 < box.y0) return std::nullopt;
    return box;
}

// Zero-pad a crop to square (centered) then resize to out x out.
void square_resize(const std::vector<float>& crop, int64_t ch, int64_t cw, int out,
                   std::vector<float>& result) {
    const int64_t side = std::max(ch, cw);
    std::vector<float> padded(static_cast<size_t>(side * side), 0.0f);
    const int64_t oy = (side - ch) / 2, ox = (side - cw) / 2;
    for (int64_t y = 0; y < ch; ++y)
        std::memcpy(padded.data() + (y + oy) * side + ox, crop.data() + y * cw,
                    sizeof(float) * cw);
    result.assign(static_cast<size_t>(out) * out, 0.0f);
    io::resize_bilinear(padded.data(), side, side, result.data(), out, out);
}

}  // namespace

std::vector<SegmentationSample> preprocess_volume(const VolumeRecord& rec,
                                                  const PreprocessParams& params,
                                                  PreprocessTrace* trace) {
    rec.validate();
    if (params.out_size < 32) throw ValidationError("preprocess: out_size must be >= 32");
    if (params.margin < 0) throw ValidationError("preprocess: margin must be >= 0");
    const int64_t D = rec.image.dim(0), H = rec.image.dim(1), W = rec.image.dim(2);

    std::optional<CropBox> bbox;
    bool estimated = false;
    if (rec.lung) bbox = mask_bbox_xy(*rec.lung);
    if (!bbox) {
        bbox = estimate_lung_bbox(rec.image);
        estimated = true;
    }
    if (!bbox) {
        std::cerr << "[preprocess] skipping volume '" << rec.volume_id
                  << "': no lung mask and bbox estimation failed\n";
        return {};
    }
    CropBox crop;
    crop.y0 = std::max<int64_t>(0, bbox->y0 - params.margin);
    crop.y1 = std::min<int64_t>(H - 1, bbox->y1 + params.margin);
    crop.x0 = std::max<int64_t>(0, bbox->x0 - params.margin);
    crop.x1 = std::min<int64_t>(W - 1, bbox->x1 + params.margin);
    if (trace) {
        trace->crop = crop;
        trace->bbox_estimated = estimated;
    }

    const int64_t ch = crop.height(), cw = crop.width();
    std::vector<SegmentationSample> out;
    out.reserve(static_cast<size_t>(D));
    std::vector<float> img_crop(static_cast<size_t>(ch * cw));
    std::vector<float> msk_crop(static_cast<size_t>(ch * cw));
    std::vector<float> img_final, msk_final;

    for (int64_t z = 0; z < D; ++z) {
        for (int64_t y = 0; y < ch; ++y)
            for (int64_t x = 0; x < cw; ++x) {
                const int64_t src = (z * H + crop.y0 + y) * W + crop.x0 + x;
                img_crop[static_cast<size_t>(y * cw + x)] = rec.image[src];
                msk_crop[static_cast<size_t>(y * cw + x)] = rec.infection[src];
            }
        double mean = 0.0, sd = 0.0, mx = 0.0;
        normalize_slice(img_crop.data(), ch * cw, &mean, &sd, &mx);
        if (trace) {
            trace->slice_mean.push_back(mean);
            trace->slice_std.push_back(sd);
            trace->slice_max_abs.push_back(mx);
        }
        square_resize(img_crop, ch, cw, params.out_size, img_final);
        square_resize(msk_crop, ch, cw, params.out_size, msk_final);

        SegmentationSample s;
        s.image = Tensor({params.out_size, params.out_size}, img_final);
        Tensor m({params.out_size, params.out_size});
        int64_t area = 0;
        for (int64_t i = 0; i < m.numel(); ++i) {
            m[i] = msk_final[static_cast<size_t>(i)] >= 0.5f ? 1.0f : 0.0f;
            area += m[i] == 1.0f;
        }
        s.mask = std::move(m);
        s.infection_area = area;
        s.covid_present = area > 0;
        s.cohort = rec.cohort;
        s.volume_id = rec.volume_id;
        s.slice_index = static_cast<int>(z);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

SegmentationSample augment(const SegmentationSample& sample, Rng& rng,
                           const AugmentParams& params) {
    sample.validate();
    const double deg = rng.uniform(-params.rotate_deg, params.rotate_deg);
    const double scale = rng.uniform(params.scale_lo, params.scale_hi);
    const int64_t h = sample.image.dim(0), w = sample.image.dim(1);

    SegmentationSample out = sample;
    io::rotate_scale(sample.image.data(), h, w, out.image.data(), deg, scale);
    std::vector<float> warped(static_cast<size_t>(h * w));
    io::rotate_scale(sample.mask.data(), h, w, warped.data(), deg, scale);
    int64_t area = 0;
    for (int64_t i = 0; i < h * w; ++i) {
        out.mask[i] = warped[static_cast<size_t>(i)] >= 0.5f ? 1.0f : 0.0f;
        area += out.mask[i] == 1.0f;
    }
    out.infection_area = area;
    out.covid_present = area > 0;
    return out;
}

// ---------------------------------------------------------------------------
// phantom generator
// ---------------------------------------------------------------------------

namespace {

struct Ellipse {
    double cy, cx, ry, rx, rot;
    bool contains(double y, double x) const {
        const double c = std::cos(rot), s = std::sin(rot);
        const double dy = y - cy, dx = x - cx;
        const double u = (c * dx + s * dy) / rx;
        const double v = (-s * dx + c * dy) / ry;
        return u * u + v * v <= 1.0;
    }
};

// Smooth value noise: coarse random grid upsampled bilinearly.
std::vector<float> value_noise(int size, int grid, Rng& rng) {
    std::vector<float> coarse(static_cast<size_t>(grid) * grid);
    for (auto& v : coarse) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<float> fine(static_cast<size_t>(size) * size);
    io::resize_bilinear(coarse.data(), grid, grid, fine.data(), size, size);
    return fine;
}

}  // namespace

std::vector<SegmentationSample> generate_phantoms(int count, int size, Rng& rng,
                                                  std::vector<PhantomGeometry>* geometry) {
    if (count < 1) throw ValidationError("generate_phantoms: count must be >= 1");
    if (size < 32) throw ValidationError("generate_phantoms: size must be >= 32");
    const uint64_t base = rng.next_u64();
    std::vector<SegmentationSample> out(static_cast<size_t>(count));
    if (geometry) geometry->assign(static_cast<size_t>(count), {});

    for (int i = 0; i < count; ++i) {
        Rng prng = Rng::stream(base, static_cast<uint64_t>(i));
        const double S = size;
        Ellipse lungs[2];
        for (int l = 0; l < 2; ++l) {
            lungs[l].cx = S * ((l == 0 ? 0.30 : 0.70) + prng.uniform(-0.02, 0.02));
            lungs[l].cy = S * (0.50 + prng.uniform(-0.03, 0.03));
            lungs[l].rx = S * prng.uniform(0.13, 0.17);
            lungs[l].ry = S * prng.uniform(0.26, 0.34);
            lungs[l].rot = 0.0;
            if (geometry)
                (*geometry)[static_cast<size_t>(i)].lungs[l] = {lungs[l].cy, lungs[l].cx,
                                                                lungs[l].ry, lungs[l].rx};
        }
        // infection blobs, ~30% of phantoms stay clean
        int blobs = 0;
        if (prng.uniform() >= 0.30) blobs = 1 + static_cast<int>(prng.below(4));
        std::vector<Ellipse> infl;
        std::vector<int> blob_lung;
        for (int b = 0; b < blobs; ++b) {
            const int l = static_cast<int>(prng.below(2));
            const double ang = prng.uniform(0.0, 6.283185307179586);
            const double rad = std::sqrt(prng.uniform());
            Ellipse e;
            e.cx = lungs[l].cx + rad * std::cos(ang) * lungs[l].rx * 0.8;
            e.cy = lungs[l].cy + rad * std::sin(ang) * lungs[l].ry * 0.8;
            e.rx = S * prng.uniform(0.035, 0.10);
            e.ry = S * prng.uniform(0.035, 0.10);
            e.rot = prng.uniform(0.0, 3.14159265358979);
            infl.push_back(e);
            blob_lung.push_back(l);
        }

        std::vector<float> lung_tex = value_noise(size, 9, prng);
        std::vector<float> inf_tex = value_noise(size, 5, prng);
        Tensor img({size, size});
        Tensor msk({size, size});
        int64_t area = 0;
        for (int64_t y = 0; y < size; ++y) {
            for (int64_t x = 0; x < size; ++x) {
                const int64_t idx = y * size + x;
                double v = 0.07 + 0.015 * prng.normal();
                int in_lung = -1;
                for (int l = 0; l < 2; ++l)
                    if (lungs[l].contains(double(y), double(x))) in_lung = l;
                if (in_lung >= 0)
                    v = 0.45 + 0.06 * lung_tex[static_cast<size_t>(idx)] + 0.01 * prng.normal();
                bool infected = false;
                if (in_lung >= 0)
                    for (size_t b = 0; b < infl.size(); ++b)
                        if (blob_lung[b] == in_lung && infl[b].contains(double(y), double(x))) {
                            infected = true;
                            break;
                        }
                if (infected) {
                    v = 0.80 + 0.10 * inf_tex[static_cast<size_t>(idx)] + 0.01 * prng.normal();
                    msk[idx] = 1.0f;
                    ++area;
                }
                img[idx] = static_cast<float>(v);
            }
        }
        normalize_slice(img.data(), img.numel());

        SegmentationSample s;
        s.image = std::move(img);
        s.mask = std::move(msk);
        s.infection_area = area;
        s.covid_present = area > 0;
        s.cohort = "phantom";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "phantom_%05d", i);
        s.volume_id = buf;
        s.slice_index = 0;
        out[static_cast<size_t>(i)] = std::move(s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// manifest + cache
// ---------------------------------------------------------------------------

std::string split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        default: return "test";
    }
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::kTrain;
    if (name == "val") return Split::kVal;
    if (name == "test") return Split::kTest;
    throw ValidationError("unknown split name '" + name + "'");
}

void SplitSpec::validate() const {
    if (train < 0 || val < 0 || test < 0)
        throw ValidationError("split fractions must be nonnegative");
    if (std::abs(train + val + test - 1.0) > 1e-9)
        throw ValidationError("split fractions must sum to 1");
}

namespace {

/// Per-volume split assignment; largest-remainder apportionment, then a
/// seeded shuffle decides which volume lands where.
std::map<std::string, Split> assign_splits(const std::vector<std::string>& volumes,
                                           const SplitSpec& spec) {
    spec.validate();
    const int64_t n = static_cast<int64_t>(volumes.size());
    const double quotas[3] = {spec.train * n, spec.val * n, spec.test * n};
    int64_t counts[3];
    double rema[3];
    int64_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        counts[k] = static_cast<int64_t>(std::floor(quotas[k] + 1e-9));
        rema[k] = quotas[k] - counts[k];
        assigned += counts[k];
    }
    while (assigned < n) {
        int best = 0;
        for (int k = 1; k < 3; ++k)
            if (rema[k] > rema[best] + 1e-12) best = k;
        ++counts[best];
        rema[best] = -1.0;
        ++assigned;
    }
    std::vector<std::string> order = volumes;
    Rng rng = Rng::stream(spec.seed, 0x5054l);
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.below(i)]);
    std::map<std::string, Split> out;
    int64_t pos = 0;
    for (int k = 0; k < 3; ++k) {
        const Split s = k == 0 ? Split::kTrain : (k == 1 ? Split::kVal : Split::kTest);
        for (int64_t i = 0; i < counts[k]; ++i) out[order[static_cast<size_t>(pos++)]] = s;
    }
    return out;
}

std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s)
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
    return out;
}

std::vector<std::string> volume_order(const std::vector<SegmentationSample>& samples) {
    std::vector<std::string> volumes;
    for (const auto& s : samples)
        if (std::find(volumes.begin(), volumes.end(), s.volume_id) == volumes.end())
            volumes.push_back(s.volume_id);
    return volumes;
}

}  // namespace

// Sample container: magic "SSMP", u32 version, two tensor records
// (u8 dtype=0 float32, u8 rank, u16 reserved, u32 dims..., payload LE),
// then u32 metadata length + JSON metadata.
void write_sample_file(const std::string& path, const SegmentationSample& s) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write sample file: " + path);
    out.write("SSMP", 4);
    const uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 4);
    auto write_tensor = [&](const Tensor& t) {
        const uint8_t dtype = 0, rank = static_cast<uint8_t>(t.rank());
        const uint16_t reserved = 0;
        out.write(reinterpret_cast<const char*>(&dtype), 1);
        out.write(reinterpret_cast<const char*>(&rank), 1);
        out.write(reinterpret_cast<const char*>(&reserved), 2);
        for (int64_t d : t.shape()) {
            const uint32_t v = static_cast<uint32_t>(d);
            out.write(reinterpret_cast<const char*>(&v), 4);
        }
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    };
    write_tensor(s.image);
    write_tensor(s.mask);
    nlohmann::json meta{{"covid_present", s.covid_present},
                        {"infection_area", s.infection_area},
                        {"cohort", s.cohort},
                        {"volume_id", s.volume_id},
                        {"slice_index", s.slice_index}};
    const std::string m = meta.dump();
    const uint32_t len = static_cast<uint32_t>(m.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(m.data(), len);
    if (!out) throw RuntimeFailure("short write: " + path);
}

SegmentationSample read_sample_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot open sample file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SSMP", 4) != 0)
        throw ValidationError("not a sample file: " + path);
    uint32_t version;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1) throw ValidationError("unsupported sample file version");
    auto read_tensor = [&]() {
        uint8_t dtype, rank;
        uint16_t reserved;
        in.read(reinterpret_cast<char*>(&dtype), 1);
        in.read(reinterpret_cast<char*>(&rank), 1);
        in.read(reinterpret_cast<char*>(&reserved), 2);
        if (dtype != 0) throw ValidationError("unsupported tensor dtype in " + path);
        Shape shape(rank);
        for (auto& d : shape) {
            uint32_t v;
            in.read(reinterpret_cast<char*>(&v), 4);
            d = v;
        }
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!in) throw RuntimeFailure("truncated sample file: " + path);
        return t;
    };
    SegmentationSample s;
    s.image = read_tensor();
    s.mask = read_tensor();
    uint32_t len;
    in.read(reinterpret_cast<char*>(&len), 4);
    std::string m(len, '\0');
    in.read(m.data(), len);
    if (!in) throw RuntimeFailure("truncated sample metadata: " + path);
    nlohmann::json meta = nlohmann::json::parse(m);
    s.covid_present = meta.at("covid_present");
    s.infection_area = meta.at("infection_area");
    s.cohort = meta.at("cohort");
    s.volume_id = meta.at("volume_id");
    s.slice_index = meta.at("slice_index");
    return s;
}

DatasetManifest build_manifest(const std::vector<SegmentationSample>& samples,
                               const SplitSpec& spec, const std::string& cache_dir,
                               const std::string& preprocess_hash) {
    if (samples.empty()) throw ValidationError("build_manifest: no samples");
    fs::create_directories(cache_dir);
    const auto volumes = volume_order(samples);
    const auto splits = assign_splits(volumes, spec);

    DatasetManifest m;
    m.size = static_cast<int>(samples[0].image.dim(0));
    m.preprocess_hash = preprocess_hash;
    int index = 0;
    for (const auto& s : samples) {
        s.validate();
        char prefix[16];
        std::snprintf(prefix, sizeof(prefix), "s%06d", index++);
        ManifestEntry e;
        e.file = std::string(prefix) + "_" + sanitize(s.volume_id) + "_" +
                 std::to_string(s.slice_index) + ".ssmp";
        e.volume_id = s.volume_id;
        e.slice_index = s.slice_index;
        e.split = splits.at(s.volume_id);
        e.cohort = s.cohort;
        e.covid_present = s.covid_present;
        e.infection_area = s.infection_area;
        write_sample_file((fs::path(cache_dir) / e.file).string(), s);
        m.entries.push_back(std::move(e));
    }
    save_manifest(m, (fs::path(cache_dir) / "manifest.json").string());
    return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    nlohmann::json j;
    j["format"] = "symseg-manifest";
    j["version"] = 1;
    j["size"] = m.size;
    j["preprocess_hash"] = m.preprocess_hash;
    j["normalization"] = m.normalization;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : m.entries)
        arr.push_back({{"file", e.file},
                       {"volume_id", e.volume_id},
                       {"slice_index", e.slice_index},
                       {"split", split_name(e.split)},
                       {"cohort", e.cohort},
                       {"covid_present", e.covid_present},
                       {"infection_area", e.infection_area}});
    j["samples"] = arr;
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("cannot open manifest: " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "symseg-manifest")
        throw ValidationError("not a symseg manifest: " + path);
    DatasetManifest m;
    m.size = j.at("size");
    m.preprocess_hash = j.value("preprocess_hash", "");
    m.normalization = j.value("normalization", "");
    std::map<std::string, Split> seen;
    for (const auto& e : j.at("samples")) {
        ManifestEntry me;
        me.file = e.at("file");
        me.volume_id = e.at("volume_id");
        me.slice_index = e.at("slice_index");
        me.split = split_from_name(e.at("split"));
        me.cohort = e.at("cohort");
        me.covid_present = e.at("covid_present");
        me.infection_area = e.at("infection_area");
        auto it = seen.find(me.volume_id);
        if (it == seen.end())
            seen[me.volume_id] = me.split;
        else if (it->second != me.split)
            throw ValidationError("manifest: volume '" + me.volume_id +
                                  "' appears in more than one split");
        m.entries.push_back(std::move(me));
    }
    return m;
}

std::vector<size_t> SliceDataset::indices(Split s) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < split.size(); ++i)
        if (split[i] == s) out.push_back(i);
    return out;
}

SliceDataset SliceDataset::from_memory(std::vector<SegmentationSample> samples,
                                       const SplitSpec& spec) {
    SliceDataset ds;
    const auto volumes = volume_order(samples);
    const auto splits = assign_splits(volumes, spec);
    ds.split.reserve(samples.size());
    for (const auto& s : samples) ds.split.push_back(splits.at(s.volume_id));
    ds.samples = std::move(samples);
    return ds;
}

SliceDataset SliceDataset::load(const std::string& manifest_path) {
    const DatasetManifest m = load_manifest(manifest_path);
    const fs::path dir = fs::path(manifest_path).parent_path();
    SliceDataset ds;
    for (const auto& e : m.entries) {
        SegmentationSample s = read_sample_file((dir / e.file).string());
        if (s.volume_id != e.volume_id || s.slice_index != e.slice_index)
            throw ValidationError("manifest entry does not match sample file " + e.file);
        ds.samples.push_back(std::move(s));
        ds.split.push_back(e.split);
    }
    return ds;
}

}  // namespace symseg::data
