#pragma once

#include "duv/image.hpp"

#include <string>
#include <vector>

namespace duv {

struct RunManifest {
    std::string command;
    std::string config_path;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::vector<std::pair<std::string, double>> quadrature;
    std::string tool_version;
    double wall_time = 0.0;  // s

    std::string to_json() const;
};

/// Column sums over the lowest `fraction` of the rows.
std::vector<double> lower_trace(const Image& img, double fraction = 2.0 / 3.0);

struct PeakStats {
    int order = 0;
    double center_px = 0.0;  // centroid column
    double width_px = 0.0;   // RMS width
    double mass = 0.0;       // fraction of the trace total
};

/// With order_spacing_px > 0 the trace is split into bins of that width centred
/// on the trace centroid; otherwise peaks are separated at local minima and
/// numbered from the one nearest the centroid.
std::vector<PeakStats> peak_table(const std::vector<double>& trace, double order_spacing_px = 0.0);

struct CompareReport {
    double rss = 0.0;
    std::vector<PeakStats> peaks_a, peaks_b;
    std::string to_text() const;
};

CompareReport compare_images(const Image& a, const Image& b, double fraction = 2.0 / 3.0,
                             double order_spacing_px = 0.0);

/// Entry point of the command-line tool; returns the process exit code.
int run_cli(int argc, char** argv);

} // namespace duv
