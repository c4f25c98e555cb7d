#pragma once

#include "duv/beamline.hpp"
#include "duv/config.hpp"
#include "duv/image.hpp"

#include <string>
#include <vector>

namespace duv {

/// Per-row sums of a normalised image.
std::vector<double> integrate_horizontal(const Image& img);

struct Bounds {
    double lo = 0.0;
    double hi = 0.0;
    bool contains(double x) const { return x >= lo && x <= hi; }
};

struct FitStage1Params {
    double y02 = 0.0;      // m
    double v_shift = 0.0;  // m/s
    Bounds y02_bounds;
    Bounds v_shift_bounds;
};

struct Stage1Options {
    int grid_y02 = 9;
    int grid_v_shift = 9;
    int sweeps = 2;
    double tol_y02 = 0.1e-6;  // golden-section stopping width, m
    double tol_v_shift = 0.5; // m/s
    bool polish = true;       // simplex refinement of the swept optimum
    int polish_max_iter = 200;
    Quadrature quad;
};

struct FitStage1Result {
    FitStage1Params params;
    double objective = 0.0;  // sum of squared profile residuals
    bool on_boundary = false;
    bool degenerate = false;
    int evaluations = 0;
    std::vector<std::string> warnings;
};

/// Fits the velocity-selection slit height and the source velocity shift to the
/// horizontally integrated profile. Grating and molecule are held at `cfg`.
FitStage1Result fit_stage1(const std::vector<double>& exp_profile, const ExperimentConfig& cfg,
                           const Bounds& y02, const Bounds& v_shift, const Stage1Options& opts = {});

/// Grid axis; log spacing requires lo > 0. include_zero prepends an exact 0.
struct GridAxis {
    double lo = 0.0;
    double hi = 0.0;
    int n = 1;
    bool log = true;
    bool include_zero = false;
    std::vector<double> values() const;
};

struct FitStage2Params {
    double y0g = 0.0;    // m
    double alpha = 0.0;  // |alpha|, C m^2 / V
    double sigma = 0.0;  // m^2
};

struct HeatmapResult {
    std::vector<double> alpha;   // rows
    std::vector<double> sigma;   // columns
    std::vector<double> ln_rss;  // alpha.size() x sigma.size(), row-major
    std::size_t arg_alpha = 0, arg_sigma = 0;
    bool tie = false;            // several cells share the minimum; lowest index kept

    double at(std::size_t i, std::size_t j) const { return ln_rss[i * sigma.size() + j]; }
};

struct Stage2Options {
    std::vector<double> y0g;  // candidate grating heights, m
    GridAxis alpha;
    GridAxis sigma;
    Quadrature quad;          // quad.threads is used across grid cells
    const Mask* mask = nullptr;
    // Candidate scan on every `coarse_stride`-th grid node (last node always kept).
    std::size_t coarse_stride = 1;
    // Simplex refinement of (y0g, ln|alpha|, ln sigma) from the candidate-scan
    // argmin; the full heatmap is then rescanned at the polished y0g.
    bool polish = false;
    int polish_max_iter = 400;
};

struct FitStage2Result {
    FitStage2Params grid;     // grid argmin
    FitStage2Params refined;  // quadratic refinement of the grid argmin
    bool refinement_applied = false;
    HeatmapResult heatmap;    // at the best y0g
    std::vector<double> y0g_ln_rss;  // best ln RSS per y0g candidate
    bool polished = false;
    FitStage2Params polish;   // simplex optimum (heatmap is taken at polish.y0g)
    double polish_ln_rss = 0.0;
    int evaluations = 0;      // simulated images
    double rss = 0.0;         // at `grid`
    double ln_rss = 0.0;
    std::vector<std::string> warnings;
};

/// RSS scan over (|alpha|, sigma) for each y0g candidate, optionally followed
/// by a simplex polish and a rescan at the polished grating height. `exp` must be
/// normalised and match the detector dimensions.
FitStage2Result fit_stage2(const Image& exp, const ExperimentConfig& cfg, const FitStage1Params& stage1,
                           const Stage2Options& opts);

/// Lowest-index argmin of a row-major matrix; `tie` reports duplicates of the minimum.
void heatmap_argmin(HeatmapResult& hm);

/// Quadratic surface fit to the 3x3 neighbourhood of the argmin in grid-index
/// coordinates. Returns false (and leaves di, dj at 0) at the edges or without
/// a positive-definite minimum inside the neighbourhood.
bool refine_quadratic(const HeatmapResult& hm, double& di, double& dj);

/// Config with the stage-1 and stage-2 parameters applied.
ExperimentConfig apply_params(const ExperimentConfig& cfg, const FitStage1Params& s1, const FitStage2Params& s2);

void write_heatmap_csv(const std::string& path, const HeatmapResult& hm);
std::string heatmap_report(const FitStage2Result& result);

} // namespace duv
