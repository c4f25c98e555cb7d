#pragma once

#include "duv/image.hpp"
#include "duv/imageproc.hpp"

#include <cmath>
#include <numbers>

namespace duv::testing {

// Plane + Gaussian blob + hot/cold spikes, tilted by -theta so that rotating the
// processed frame by +theta puts the blob back at (blob_x, blob_y).
struct PipelineFixture {
    std::size_t width = 1000, height = 800;
    double theta_deg = 0.4;
    double blob_x = 650.0, blob_y = 300.0;  // column, row after processing
    double blob_sigma = 6.0;
    double blob_peak = 500.0;
    double bright_level = 120.0;

    RawImage raw;
    RawImage bright;
    Rect pattern;  // blob region in raw coordinates

    // Blob centre in the raw (tilted) frame.
    void raw_blob_center(double& x, double& y) const {
        const double cx = (width - 1) / 2.0, cy = (height - 1) / 2.0;
        const double t = -theta_deg * std::numbers::pi / 180.0;
        const double dx = blob_x - cx, dy_up = -(blob_y - cy);
        x = cx + std::cos(t) * dx - std::sin(t) * dy_up;
        y = cy - (std::sin(t) * dx + std::cos(t) * dy_up);
    }

    PipelineFixture() : raw(width, height), bright(width, height) {
        double bx, by;
        raw_blob_center(bx, by);
        for (std::size_t r = 0; r < height; ++r)
            for (std::size_t c = 0; c < width; ++c) {
                const double plane = 40.0 + 0.02 * c - 0.03 * r;
                const double dx = c - bx, dy = r - by;
                const double blob = blob_peak * std::exp(-(dx * dx + dy * dy) / (2.0 * blob_sigma * blob_sigma));
                const double b = bright_level + 5.0 * std::sin(0.01 * c) * std::cos(0.013 * r);
                bright(c, r) = b;
                raw(c, r) = b + plane + blob;
            }
        const std::size_t spikes[][2] = {{10, 10}, {900, 50}, {120, 700}, {500, 400}, {333, 222}, {777, 555}};
        for (std::size_t i = 0; i < 6; ++i) raw(spikes[i][0], spikes[i][1]) += (i % 2 ? -1.0 : 1.0) * 1e6;
        pattern = {static_cast<std::size_t>(bx) - 40, static_cast<std::size_t>(by) - 40, 80, 80};
    }
};

} // namespace duv::testing
