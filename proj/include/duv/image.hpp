#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace duv {

enum class Provenance { raw, dark_subtracted, processed, simulated };

std::string to_string(Provenance p);

/// Row-major raster, row 0 at the top of the screen. Used both for simulated
/// detector images and camera frames.
class Image {
public:
    Image() = default;
    Image(std::size_t width, std::size_t height, double pixel_pitch = 1.0, double fill = 0.0);

    std::size_t width() const { return width_; }
    std::size_t height() const { return height_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t col, std::size_t row) { return data_[row * width_ + col]; }
    double operator()(std::size_t col, std::size_t row) const { return data_[row * width_ + col]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    double* row(std::size_t r) { return data_.data() + r * width_; }
    const double* row(std::size_t r) const { return data_.data() + r * width_; }

    double sum() const;
    double max() const;

    double pixel_pitch = 1.0;
    // Screen coordinates of the image centre.
    double center_x = 0.0;
    double center_y = 0.0;
    bool normalized = false;
    Provenance provenance = Provenance::raw;
    // Per-pixel validity (1 = valid). Empty means every pixel is valid.
    std::vector<std::uint8_t> valid;

    bool is_valid(std::size_t col, std::size_t row) const {
        return valid.empty() || valid[row * width_ + col] != 0;
    }

private:
    std::size_t width_ = 0;
    std::size_t height_ = 0;
    std::vector<double> data_;
};

using DetectorImage = Image;
using RawImage = Image;

/// Pixel mask, 1 = included.
struct Mask {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> keep;

    bool operator()(std::size_t col, std::size_t row) const { return keep[row * width + col] != 0; }
    std::size_t count() const;
};

// --- file formats ------------------------------------------------------------

/// 16-bit binary graymap (P5, maxval 65535). The header carries a comment
/// `# scale <s>` with pixel value = round(intensity / s); negatives clip to 0.
void write_pgm16(const std::string& path, const Image& img);
/// Reads 8- or 16-bit P5; applies the `# scale` comment when present.
Image read_pgm(const std::string& path);

/// One image row per line, values printed with 17 significant digits.
void write_csv(const std::string& path, const Image& img);
std::string to_csv(const Image& img);
Image read_csv(const std::string& path);

/// P5 or CSV chosen by file extension (.pgm / .csv).
Image read_image(const std::string& path);

/// Mask file: P5 graymap, 0 = excluded.
Mask read_mask(const std::string& path);

} // namespace duv
