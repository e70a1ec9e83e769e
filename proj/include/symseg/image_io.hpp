#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "symseg/tensor.hpp"

namespace symseg::io {

/// Grayscale image as float rows; values in native units (0..255 / 0..65535).
struct GrayImage {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<float> pixels;
    int bit_depth = 8;
};

GrayImage read_png_gray(const std::string& path);
void write_png_gray(const std::string& path, const GrayImage& img);
void write_png_rgb(const std::string& path, int64_t h, int64_t w,
                   const std::vector<std::array<uint8_t, 3>>& pixels);

/// Minimal NIfTI-1 reader (.nii or .nii.gz): uint8/int16/uint16/int32/float32,
/// 3D volumes. Returns [D,H,W] tensor plus voxel spacing.
struct NiftiVolume {
    Tensor data;  // [D,H,W]
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    int bit_depth = 16;
};
NiftiVolume read_nifti(const std::string& path);

// -- plain 2D raster helpers (non-autograd) ---------------------------------

void resize_bilinear(const float* src, int64_t sh, int64_t sw, float* dst, int64_t dh, int64_t dw);

/// Rotate by `deg` and scale by `s` about the center (inverse mapping,
/// bilinear, zero fill). deg=0, s=1 is an exact identity.
void rotate_scale(const float* src, int64_t h, int64_t w, float* dst, double deg, double s);

/// Ground truth and prediction contours over the grayscale base, sentence
/// caption drawn top-left.
void render_overlay(const std::string& path, const Tensor& image, const Tensor& target_mask,
                    const Tensor& pred_mask, const std::string& caption);

}  // namespace symseg::io
