#include "duv/imageproc.hpp"

#include "duv/constants.hpp"
#include "duv/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cfloat>
#include <cmath>

namespace duv {

namespace {

void require_same_dims(const Image& a, const Image& b, const char* op) {
    if (a.width() != b.width() || a.height() != b.height())
        throw DataError{std::string{op} + ": image dimensions differ (" + std::to_string(a.width()) + "x" +
                        std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                        std::to_string(b.height()) + ")"};
}

Image like(const Image& src) {
    Image out{src.width(), src.height(), src.pixel_pitch};
    out.center_x = src.center_x;
    out.center_y = src.center_y;
    out.provenance = src.provenance;
    out.valid = src.valid;
    return out;
}

bool near_unity(double s) { return std::abs(s - 1.0) <= 1e-9; }

} // namespace

RawImage subtract_background(const RawImage& img, const RawImage& bright) {
    require_same_dims(img, bright, "subtract_background");
    RawImage out = like(img);
    for (std::size_t i = 0; i < img.size(); ++i) out.data()[i] = img.data()[i] - bright.data()[i];
    out.provenance = Provenance::processed;
    return out;
}

RawImage subtract_background(const RawImage& img, const RawImage& before, const RawImage& after) {
    require_same_dims(img, before, "subtract_background");
    require_same_dims(img, after, "subtract_background");
    RawImage out = like(img);
    for (std::size_t i = 0; i < img.size(); ++i)
        out.data()[i] = img.data()[i] - 0.5 * (before.data()[i] + after.data()[i]);
    out.provenance = Provenance::processed;
    return out;
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw DataError{"quantile of an empty sample"};
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double a = values[lo];
    if (hi == lo) return a;
    const double b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
    return a + (pos - static_cast<double>(lo)) * (b - a);
}

RawImage despike(const RawImage& img, double q) {
    if (!(q > 0.0 && q < 0.5)) throw DomainError{"despike: quantile must lie in (0, 0.5)"};
    const double lo = quantile(img.data(), q);
    const double hi = quantile(img.data(), 1.0 - q);
    RawImage out = img;
    for (double& v : out.data()) v = std::clamp(v, lo, hi);
    return out;
}

RawImage subtract_plane(const RawImage& img, const Mask& fit_region) {
    if (fit_region.width != img.width() || fit_region.height != img.height())
        throw DataError{"subtract_plane: mask dimensions differ from the image"};
    std::size_t n = 0;
    for (std::size_t r = 0; r < img.height(); ++r)
        for (std::size_t c = 0; c < img.width(); ++c)
            if (fit_region(c, r) && img.is_valid(c, r)) ++n;
    if (n * 20 < img.size())
        throw DataError{"subtract_plane: fit region covers fewer than 5% of the pixels"};

    // Normal equations in centred pixel coordinates.
    const double cx = (static_cast<double>(img.width()) - 1.0) / 2.0;
    const double cy = (static_cast<double>(img.height()) - 1.0) / 2.0;
    Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
    Eigen::Vector3d atb = Eigen::Vector3d::Zero();
    for (std::size_t r = 0; r < img.height(); ++r)
        for (std::size_t c = 0; c < img.width(); ++c) {
            if (!fit_region(c, r) || !img.is_valid(c, r)) continue;
            const Eigen::Vector3d row{1.0, static_cast<double>(c) - cx, static_cast<double>(r) - cy};
            ata.noalias() += row * row.transpose();
            atb += row * img(c, r);
        }
    Eigen::FullPivLU<Eigen::Matrix3d> lu{ata};
    lu.setThreshold(1e-10);
    if (lu.rank() < 3) throw NumericalError{"subtract_plane: fit region is collinear (rank-deficient plane fit)"};
    const Eigen::Vector3d coef = lu.solve(atb);

    RawImage out = img;
    for (std::size_t r = 0; r < img.height(); ++r)
        for (std::size_t c = 0; c < img.width(); ++c)
            out(c, r) -= coef[0] + coef[1] * (static_cast<double>(c) - cx) + coef[2] * (static_cast<double>(r) - cy);
    return out;
}

RawImage rotate(const RawImage& img, double theta_deg) {
    if (theta_deg == 0.0) return img;
    if (!(std::abs(theta_deg) < 5.0)) throw DomainError{"rotate: |theta| must be below 5 degrees"};
    const double th = theta_deg * constants::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double cx = (static_cast<double>(img.width()) - 1.0) / 2.0;
    const double cy = (static_cast<double>(img.height()) - 1.0) / 2.0;
    const auto w = static_cast<long>(img.width());
    const auto h = static_cast<long>(img.height());

    RawImage out = like(img);
    out.valid.assign(img.size(), 1);
    for (long r = 0; r < h; ++r)
        for (long c = 0; c < w; ++c) {
            // Counter-clockwise on screen (y up): sample the source at R(-theta) p.
            const double dx = static_cast<double>(c) - cx;
            const double dy = cy - static_cast<double>(r);
            const double sx = cx + (cs * dx + sn * dy);
            const double sy = cy - (-sn * dx + cs * dy);
            const auto idx = static_cast<std::size_t>(r * w + c);
            const double fx = std::floor(sx), fy = std::floor(sy);
            const auto x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
            const double tx = sx - fx, ty = sy - fy;
            const long x1 = tx > 0.0 ? x0 + 1 : x0;
            const long y1 = ty > 0.0 ? y0 + 1 : y0;
            if (x0 < 0 || y0 < 0 || x1 >= w || y1 >= h) {
                out.data()[idx] = 0.0;
                out.valid[idx] = 0;
                continue;
            }
            const auto at = [&](long x, long y) { return img(static_cast<std::size_t>(x), static_cast<std::size_t>(y)); };
            const auto ok = [&](long x, long y) { return img.is_valid(static_cast<std::size_t>(x), static_cast<std::size_t>(y)); };
            out.data()[idx] = (1 - tx) * (1 - ty) * at(x0, y0) + tx * (1 - ty) * at(x1, y0) +
                              (1 - tx) * ty * at(x0, y1) + tx * ty * at(x1, y1);
            if (!(ok(x0, y0) && ok(x1, y0) && ok(x0, y1) && ok(x1, y1))) out.valid[idx] = 0;
        }
    return out;
}

RawImage crop(const RawImage& img, const Rect& rect) {
    if (rect.width == 0 || rect.height == 0) throw DataError{"crop: empty rectangle"};
    if (rect.x + rect.width > img.width() || rect.y + rect.height > img.height())
        throw DataError{"crop: rectangle exceeds the image bounds"};
    RawImage out{rect.width, rect.height, img.pixel_pitch};
    out.provenance = img.provenance;
    out.normalized = false;
    const double ox = (static_cast<double>(rect.x) + (rect.width - 1.0) / 2.0) - (img.width() - 1.0) / 2.0;
    const double oy = (static_cast<double>(rect.y) + (rect.height - 1.0) / 2.0) - (img.height() - 1.0) / 2.0;
    out.center_x = img.center_x + ox * img.pixel_pitch;
    out.center_y = img.center_y - oy * img.pixel_pitch;
    if (!img.valid.empty()) out.valid.resize(out.size());
    for (std::size_t r = 0; r < rect.height; ++r)
        for (std::size_t c = 0; c < rect.width; ++c) {
            out(c, r) = img(rect.x + c, rect.y + r);
            if (!img.valid.empty()) out.valid[r * rect.width + c] = img.valid[(rect.y + r) * img.width() + rect.x + c];
        }
    return out;
}

RawImage vertical_smooth(const RawImage& img, std::size_t h) {
    if (h == 0) return img;
    RawImage out = img;
    out.normalized = false;
    const auto height = static_cast<long>(img.height());
    const auto hw = static_cast<long>(h);
    for (std::size_t c = 0; c < img.width(); ++c)
        for (long r = 0; r < height; ++r) {
            const long lo = std::max(0L, r - hw), hi = std::min(height - 1, r + hw);
            double s = 0.0;
            for (long k = lo; k <= hi; ++k) s += img(c, static_cast<std::size_t>(k));
            out(c, static_cast<std::size_t>(r)) = s / static_cast<double>(hi - lo + 1);
        }
    return out;
}

RawImage normalize_unity(const RawImage& img) {
    const double s = img.sum();
    if (!(s != 0.0) || !std::isfinite(s)) throw DataError{"normalize_unity: image sums to zero"};
    RawImage out = img;
    for (double& v : out.data()) v /= s;
    out.normalized = true;
    return out;
}

double rss(const Image& a, const Image& b, const Mask* mask) {
    require_same_dims(a, b, "rss");
    if (!near_unity(a.sum()) || !near_unity(b.sum()))
        throw DataError{"rss: both images must be normalised to unity"};
    if (mask && (mask->width != a.width() || mask->height != a.height()))
        throw DataError{"rss: mask dimensions differ from the images"};
    double total = 0.0;
    for (std::size_t r = 0; r < a.height(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < a.width(); ++c) {
            if ((mask && !(*mask)(c, r)) || !a.is_valid(c, r) || !b.is_valid(c, r)) continue;
            const double d = a(c, r) - b(c, r);
            acc += d * d;
        }
        total += acc;
    }
    return total;
}

double ln_rss(double rss_value) { return std::log(std::max(rss_value, DBL_MIN)); }

RawImage preprocess(const RawImage& raw, const std::vector<RawImage>& brights, const PreprocessOptions& opts) {
    RawImage img = raw;
    if (brights.size() == 1) img = subtract_background(raw, brights[0]);
    else if (brights.size() == 2) img = subtract_background(raw, brights[0], brights[1]);
    else if (brights.size() > 2) throw DataError{"preprocess: at most two bright frames (before, after)"};

    if (opts.contamination) {
        const auto& m = *opts.contamination;
        if (m.width != img.width() || m.height != img.height())
            throw DataError{"preprocess: contamination mask dimensions differ from the image"};
        if (img.valid.empty()) img.valid.assign(img.size(), 1);
        for (std::size_t i = 0; i < img.size(); ++i)
            if (!m.keep[i]) img.valid[i] = 0;
    }

    img = despike(img, opts.despike_quantile);

    Mask region;
    if (opts.plane_region) {
        region = *opts.plane_region;
    } else {
        region = {img.width(), img.height(), std::vector<std::uint8_t>(img.size(), 1)};
        if (opts.pattern) {
            const auto& p = *opts.pattern;
            for (std::size_t r = p.y; r < std::min(img.height(), p.y + p.height); ++r)
                for (std::size_t c = p.x; c < std::min(img.width(), p.x + p.width); ++c) region.keep[r * img.width() + c] = 0;
        }
    }
    img = subtract_plane(img, region);
    img = rotate(img, opts.rotation_deg);
    if (opts.crop) img = crop(img, *opts.crop);
    // Pixels without data carry no signal.
    for (std::size_t i = 0; i < img.valid.size(); ++i)
        if (!img.valid[i]) img.data()[i] = 0.0;
    img.provenance = Provenance::processed;
    return img;
}

} // namespace duv
