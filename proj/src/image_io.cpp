#include "symseg/image_io.hpp"

#include <png.h>
#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "symseg/errors.hpp"

namespace symseg::io {

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

namespace {
struct FileCloser {
    FILE* f;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};
}  // namespace

GrayImage read_png_gray(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw RuntimeFailure("cannot open PNG: " + path);
    FileCloser closer{f};

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw RuntimeFailure("libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw RuntimeFailure("failed to decode PNG: " + path);
    }
    png_init_io(png, f);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color & PNG_COLOR_MASK_COLOR || color == PNG_COLOR_TYPE_PALETTE)
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (depth == 16) png_set_swap(png);  // wire is big-endian
    png_read_update_info(png, info);
    depth = png_get_bit_depth(png, info);

    GrayImage out;
    out.height = h;
    out.width = w;
    out.bit_depth = depth;
    out.pixels.resize(static_cast<size_t>(h) * w);

    std::vector<uint8_t> row(png_get_rowbytes(png, info));
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        if (depth == 16) {
            const uint16_t* r16 = reinterpret_cast<const uint16_t*>(row.data());
            for (png_uint_32 x = 0; x < w; ++x) out.pixels[size_t(y) * w + x] = r16[x];
        } else {
            for (png_uint_32 x = 0; x < w; ++x) out.pixels[size_t(y) * w + x] = row[x];
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png_gray(const std::string& path, const GrayImage& img) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw RuntimeFailure("cannot write PNG: " + path);
    FileCloser closer{f};
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw RuntimeFailure("libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw RuntimeFailure("failed to encode PNG: " + path);
    }
    png_init_io(png, f);
    const int depth = img.bit_depth == 16 ? 16 : 8;
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), depth, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (depth == 16) png_set_swap(png);
    std::vector<uint8_t> row(static_cast<size_t>(img.width) * (depth / 8));
    for (int64_t y = 0; y < img.height; ++y) {
        if (depth == 16) {
            uint16_t* r16 = reinterpret_cast<uint16_t*>(row.data());
            for (int64_t x = 0; x < img.width; ++x)
                r16[x] = static_cast<uint16_t>(
                    std::min(65535.0f, std::max(0.0f, img.pixels[y * img.width + x])));
        } else {
            for (int64_t x = 0; x < img.width; ++x)
                row[static_cast<size_t>(x)] = static_cast<uint8_t>(
                    std::min(255.0f, std::max(0.0f, img.pixels[y * img.width + x])));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_png_rgb(const std::string& path, int64_t h, int64_t w,
                   const std::vector<std::array<uint8_t, 3>>& pixels) {
    if (static_cast<int64_t>(pixels.size()) != h * w)
        throw ValidationError("write_png_rgb: pixel count mismatch");
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw RuntimeFailure("cannot write PNG: " + path);
    FileCloser closer{f};
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw RuntimeFailure("libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw RuntimeFailure("failed to encode PNG: " + path);
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const auto& px = pixels[static_cast<size_t>(y * w + x)];
            row[static_cast<size_t>(3 * x)] = px[0];
            row[static_cast<size_t>(3 * x + 1)] = px[1];
            row[static_cast<size_t>(3 * x + 2)] = px[2];
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// NIfTI-1
// ---------------------------------------------------------------------------

namespace {
struct NiftiHeader {
    int32_t sizeof_hdr;
    char pad1[36];
    int16_t dim[8];
    char pad2[14];
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    char pad3[224];
    char magic[4];
};
static_assert(sizeof(NiftiHeader) == 348, "nifti header must be 348 bytes");

std::vector<uint8_t> read_all_maybe_gz(const std::string& path) {
    gzFile gz = gzopen(path.c_str(), "rb");
    if (!gz) throw RuntimeFailure("cannot open volume: " + path);
    std::vector<uint8_t> out;
    uint8_t buf[1 << 16];
    int n;
    while ((n = gzread(gz, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
    gzclose(gz);
    if (n < 0) throw RuntimeFailure("failed to decompress: " + path);
    return out;
}
}  // namespace

NiftiVolume read_nifti(const std::string& path) {
    const std::vector<uint8_t> raw = read_all_maybe_gz(path);
    if (raw.size() < sizeof(NiftiHeader)) throw ValidationError("truncated NIfTI file: " + path);
    NiftiHeader hdr;
    std::memcpy(&hdr, raw.data(), sizeof(hdr));
    if (hdr.sizeof_hdr != 348 ||
        !(std::memcmp(hdr.magic, "n+1", 3) == 0 || std::memcmp(hdr.magic, "ni1", 3) == 0))
        throw ValidationError("not a NIfTI-1 file: " + path);
    if (hdr.dim[0] < 2 || hdr.dim[0] > 4)
        throw ValidationError("unsupported NIfTI dimensionality " + std::to_string(hdr.dim[0]));
    const int64_t nx = hdr.dim[1], ny = hdr.dim[2];
    const int64_t nz = hdr.dim[0] >= 3 ? hdr.dim[3] : 1;
    const size_t nvox = static_cast<size_t>(nx) * ny * nz;
    const size_t off = static_cast<size_t>(hdr.vox_offset);
    NiftiVolume vol;
    vol.data = Tensor({nz, ny, nx});
    vol.spacing = {hdr.pixdim[3], hdr.pixdim[2], hdr.pixdim[1]};
    const double slope = hdr.scl_slope != 0.0f ? hdr.scl_slope : 1.0;
    const double inter = hdr.scl_slope != 0.0f ? hdr.scl_inter : 0.0;

    auto fill = [&](auto reader, size_t elem) {
        if (raw.size() < off + nvox * elem) throw ValidationError("truncated NIfTI data: " + path);
        for (size_t i = 0; i < nvox; ++i)
            vol.data[static_cast<int64_t>(i)] =
                static_cast<float>(reader(raw.data() + off + i * elem) * slope + inter);
    };
    switch (hdr.datatype) {
        case 2:  // uint8
            vol.bit_depth = 8;
            fill([](const uint8_t* p) { return double(*p); }, 1);
            break;
        case 4:  // int16
            vol.bit_depth = 16;
            fill([](const uint8_t* p) {
                int16_t v;
                std::memcpy(&v, p, 2);
                return double(v);
            }, 2);
            break;
        case 512:  // uint16
            vol.bit_depth = 16;
            fill([](const uint8_t* p) {
                uint16_t v;
                std::memcpy(&v, p, 2);
                return double(v);
            }, 2);
            break;
        case 8:  // int32
            vol.bit_depth = 16;
            fill([](const uint8_t* p) {
                int32_t v;
                std::memcpy(&v, p, 4);
                return double(v);
            }, 4);
            break;
        case 16:  // float32
            vol.bit_depth = 16;
            fill([](const uint8_t* p) {
                float v;
                std::memcpy(&v, p, 4);
                return double(v);
            }, 4);
            break;
        default:
            throw ValidationError("unsupported NIfTI datatype " + std::to_string(hdr.datatype));
    }
    return vol;
}

// ---------------------------------------------------------------------------
// raster helpers
// ---------------------------------------------------------------------------

void resize_bilinear(const float* src, int64_t sh, int64_t sw, float* dst, int64_t dh, int64_t dw) {
    const double ys = static_cast<double>(sh) / dh;
    const double xs = static_cast<double>(sw) / dw;
    for (int64_t y = 0; y < dh; ++y) {
        double fy = (y + 0.5) * ys - 0.5;
        fy = std::max(0.0, std::min(fy, static_cast<double>(sh - 1)));
        const int64_t y0 = static_cast<int64_t>(fy);
        const int64_t y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int64_t x = 0; x < dw; ++x) {
            double fx = (x + 0.5) * xs - 0.5;
            fx = std::max(0.0, std::min(fx, static_cast<double>(sw - 1)));
            const int64_t x0 = static_cast<int64_t>(fx);
            const int64_t x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            dst[y * dw + x] = static_cast<float>(
                (1 - wy) * ((1 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1]) +
                wy * ((1 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1]));
        }
    }
}

void rotate_scale(const float* src, int64_t h, int64_t w, float* dst, double deg, double s) {
    const double rad = deg * M_PI / 180.0;
    const double c = std::cos(rad), sn = std::sin(rad);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            // inverse map: rotate by -deg, scale by 1/s about the center
            const double dy = (y - cy), dx = (x - cx);
            const double sy = (c * dy - sn * dx) / s + cy;
            const double sx = (sn * dy + c * dx) / s + cx;
            float v = 0.0f;
            if (sy >= 0.0 && sy <= h - 1 && sx >= 0.0 && sx <= w - 1) {
                const int64_t y0 = static_cast<int64_t>(sy);
                const int64_t x0 = static_cast<int64_t>(sx);
                const int64_t y1 = std::min(y0 + 1, h - 1);
                const int64_t x1 = std::min(x0 + 1, w - 1);
                const double wy = sy - y0, wx = sx - x0;
                v = static_cast<float>(
                    (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                    wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]));
            }
            dst[y * w + x] = v;
        }
    }
}

// ---------------------------------------------------------------------------
// overlays
// ---------------------------------------------------------------------------

namespace {

// 5x7 digit glyphs, row-major bit masks (LSB = leftmost column).
constexpr uint8_t kDigits[10][7] = {
    {0x0e, 0x11, 0x19, 0x15, 0x13, 0x11, 0x0e},  // 0
    {0x04, 0x06, 0x04, 0x04, 0x04, 0x04, 0x0e},  // 1
    {0x0e, 0x11, 0x10, 0x08, 0x04, 0x02, 0x1f},  // 2
    {0x0e, 0x11, 0x10, 0x0c, 0x10, 0x11, 0x0e},  // 3
    {0x08, 0x0c, 0x0a, 0x09, 0x1f, 0x08, 0x08},  // 4
    {0x1f, 0x01, 0x0f, 0x10, 0x10, 0x11, 0x0e},  // 5
    {0x0c, 0x02, 0x01, 0x0f, 0x11, 0x11, 0x0e},  // 6
    {0x1f, 0x10, 0x08, 0x04, 0x02, 0x02, 0x02},  // 7
    {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e},  // 8
    {0x0e, 0x11, 0x11, 0x1e, 0x10, 0x08, 0x06},  // 9
};

void draw_text(std::vector<std::array<uint8_t, 3>>& img, int64_t h, int64_t w,
               const std::string& text, int64_t oy, int64_t ox) {
    int64_t cx = ox;
    for (char ch : text) {
        if (ch == ' ') {
            cx += 4;
            continue;
        }
        if (ch < '0' || ch > '9') {
            cx += 6;
            continue;
        }
        const uint8_t* glyph = kDigits[ch - '0'];
        for (int gy = 0; gy < 7; ++gy)
            for (int gx = 0; gx < 5; ++gx)
                if (glyph[gy] & (1 << gx)) {
                    const int64_t py = oy + gy, px = cx + gx;
                    if (py >= 0 && py < h && px >= 0 && px < w)
                        img[static_cast<size_t>(py * w + px)] = {255, 255, 0};
                }
        cx += 6;
    }
}

bool on_contour(const Tensor& m, int64_t y, int64_t x, int64_t h, int64_t w) {
    if (m[y * w + x] < 0.5f) return false;
    if (y == 0 || y == h - 1 || x == 0 || x == w - 1) return true;
    return m[(y - 1) * w + x] < 0.5f || m[(y + 1) * w + x] < 0.5f || m[y * w + x - 1] < 0.5f ||
           m[y * w + x + 1] < 0.5f;
}

}  // namespace

void render_overlay(const std::string& path, const Tensor& image, const Tensor& target_mask,
                    const Tensor& pred_mask, const std::string& caption) {
    if (image.rank() != 2 || !image.same_shape(target_mask) || !image.same_shape(pred_mask))
        throw ValidationError("render_overlay: image and masks must share a 2D shape");
    const int64_t h = image.dim(0), w = image.dim(1);
    const float lo = image.min(), hi = image.max();
    const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
    std::vector<std::array<uint8_t, 3>> rgb(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) {
        const uint8_t g = static_cast<uint8_t>(std::min(255.0f, (image[i] - lo) * scale));
        rgb[static_cast<size_t>(i)] = {g, g, g};
    }
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            if (on_contour(target_mask, y, x, h, w)) rgb[static_cast<size_t>(y * w + x)] = {0, 255, 0};
            if (on_contour(pred_mask, y, x, h, w)) rgb[static_cast<size_t>(y * w + x)] = {255, 0, 0};
        }
    draw_text(rgb, h, w, caption, 3, 3);
    write_png_rgb(path, h, w, rgb);
}

}  // namespace symseg::io
