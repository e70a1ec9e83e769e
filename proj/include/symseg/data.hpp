#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "symseg/rng.hpp"
#include "symseg/tensor.hpp"

namespace symseg::data {

struct VolumeRecord {
    Tensor image;      // [D,H,W]
    Tensor infection;  // [D,H,W], binary
    std::optional<Tensor> lung;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string cohort;
    std::string volume_id;
    int bit_depth = 16;
    void validate() const;
};

/// One normalized 2D training slice.
struct SegmentationSample {
    Tensor image;  // [S,S]
    Tensor mask;   // [S,S], binary
    bool covid_present = false;
    int64_t infection_area = 0;
    std::string cohort;
    std::string volume_id;
    int slice_index = 0;
    void validate() const;
};

struct CropBox {
    int64_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;  // inclusive
    int64_t height() const { return y1 - y0 + 1; }
    int64_t width() const { return x1 - x0 + 1; }
};

struct PreprocessParams {
    int margin = 20;    // voxels beyond the lung bbox in x-y
    int out_size = 400;
};

/// Per-stage evidence for contract tests: crop box actually used and the
/// post-z-score slice statistics before max standardization.
struct PreprocessTrace {
    CropBox crop;
    std::vector<double> slice_mean;
    std::vector<double> slice_std;
    std::vector<double> slice_max_abs;
    bool bbox_estimated = false;
};

/// z-score then divide by max-abs, in place. Constant input becomes zeros.
void normalize_slice(float* px, int64_t n, double* out_mean = nullptr, double* out_std = nullptr,
                     double* out_max_abs = nullptr);

std::optional<CropBox> estimate_lung_bbox(const Tensor& volume);
double otsu_threshold(const Tensor& volume);

/// Crop to lung bbox +/- margin, normalize per slice, pad square, resize.
/// Returns empty (with a stderr diagnostic) when no lung extent is found.
std::vector<SegmentationSample> preprocess_volume(const VolumeRecord& rec,
                                                  const PreprocessParams& params,
                                                  PreprocessTrace* trace = nullptr);

struct AugmentParams {
    double rotate_deg = 5.0;
    double scale_lo = 0.97;
    double scale_hi = 1.03;
};

SegmentationSample augment(const SegmentationSample& sample, Rng& rng,
                           const AugmentParams& params = {});

struct PhantomGeometry {
    struct EllipseParams {
        double cy = 0, cx = 0, ry = 1, rx = 1;
    };
    EllipseParams lungs[2];
};

/// Synthetic desk-scale dataset: dark background, two bright elliptical
/// lungs, 0-4 textured infection blobs inside them; ~30% infection-free.
std::vector<SegmentationSample> generate_phantoms(int count, int size, Rng& rng,
                                                  std::vector<PhantomGeometry>* geometry = nullptr);

// ---------------------------------------------------------------------------
// dataset cache + manifest
// ---------------------------------------------------------------------------

enum class Split { kTrain, kVal, kTest };
std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct SplitSpec {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
    uint64_t seed = 17;
    void validate() const;
};

struct ManifestEntry {
    std::string file;
    std::string volume_id;
    int slice_index = 0;
    Split split = Split::kTrain;
    std::string cohort;
    bool covid_present = false;
    int64_t infection_area = 0;
};

struct DatasetManifest {
    int size = 0;
    std::string preprocess_hash;
    std::string normalization = "per_slice_zscore_maxabs_v1";
    std::vector<ManifestEntry> entries;
};

/// Assigns whole volumes to splits (no volume straddles splits), writes each
/// sample into cache_dir and the manifest alongside.
DatasetManifest build_manifest(const std::vector<SegmentationSample>& samples,
                               const SplitSpec& spec, const std::string& cache_dir,
                               const std::string& preprocess_hash = "");

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

void write_sample_file(const std::string& path, const SegmentationSample& s);
SegmentationSample read_sample_file(const std::string& path);

/// Fully materialized dataset.
struct SliceDataset {
    std::vector<SegmentationSample> samples;
    std::vector<Split> split;
    std::vector<size_t> indices(Split s) const;
    static SliceDataset from_memory(std::vector<SegmentationSample> samples,
                                    const SplitSpec& spec);
    static SliceDataset load(const std::string& manifest_path);
};

}  // namespace symseg::data
