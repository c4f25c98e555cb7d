#pragma once

#include "duv/image.hpp"

#include <optional>
#include <vector>

namespace duv {

struct Rect {
    std::size_t x = 0, y = 0, width = 0, height = 0;
};

RawImage subtract_background(const RawImage& img, const RawImage& bright);
/// Subtracts the mean of the bright frames taken before and after deposition.
RawImage subtract_background(const RawImage& img, const RawImage& bright_before, const RawImage& bright_after);

/// Quantile with linear interpolation on the sorted sample (position q (n - 1)).
double quantile(std::vector<double> values, double q);

/// Winsorises pixels below the q-quantile or above the (1 - q)-quantile.
RawImage despike(const RawImage& img, double q = 1e-5);

/// Least-squares plane a + b x + c y over pixels with fit_region == 1, subtracted
/// everywhere. Needs >= 5 % of the pixels and a non-collinear region.
RawImage subtract_plane(const RawImage& img, const Mask& fit_region);

/// Bilinear rotation by theta (degrees) about the image centre. Pixels sampling
/// outside the frame become 0 and are marked invalid.
RawImage rotate(const RawImage& img, double theta_deg = 0.4);

RawImage crop(const RawImage& img, const Rect& rect);

/// Column-wise boxcar of width 2h + 1, renormalised where it is truncated by the edge.
RawImage vertical_smooth(const RawImage& img, std::size_t half_width);

RawImage normalize_unity(const RawImage& img);

/// Sum of squared pixel differences of two images normalised to unity.
/// Pixels excluded by `mask` (or invalid in either image) are skipped.
double rss(const Image& a, const Image& b, const Mask* mask = nullptr);

/// log(max(rss, DBL_MIN)), finite for exact matches.
double ln_rss(double rss_value);

struct PreprocessOptions {
    double despike_quantile = 1e-5;
    double rotation_deg = 0.4;
    std::optional<Rect> crop;
    // Diffraction-pattern region excluded from the background plane fit.
    std::optional<Rect> pattern;
    std::optional<Mask> plane_region;   // overrides `pattern` when set
    std::optional<Mask> contamination;  // 0 = manually removed pixels
};

/// Bright subtraction, despiking, plane subtraction, rotation, crop. The dark
/// frame is assumed to be subtracted by the camera software.
RawImage preprocess(const RawImage& raw, const std::vector<RawImage>& brights, const PreprocessOptions& opts);

} // namespace duv
