#pragma once

#include "duv/config.hpp"
#include "duv/grating.hpp"
#include "duv/image.hpp"

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace duv {

/// Quadrature over the forward-velocity density f(v) ~ v^3 exp(-m (v - v_shift)^2 / 2 k_B T).
struct VelocityGrid {
    std::vector<double> nodes;
    std::vector<double> weights;
    double v_min = 0.0;
    double v_max = 0.0;
};

/// Unnormalised beam density f(v); zero for v <= 0.
double beam_density(const SourceSpec& src, const MoleculeSpec& mol, double v);

/// Midpoint nodes on [v_min, v_max], the central 99.9 % of the density mass.
VelocityGrid velocity_grid(const SourceSpec& src, const MoleculeSpec& mol, int n);

struct Trajectory {
    double z = 0.0;
    double x = 0.0, y = 0.0;
    double vx = 0.0, vy = 0.0;
    double vz = 0.0;
};

/// Transverse acceleration g e_y - 2 Omega x v with Omega = (omega_x, omega_y, 0).
/// Only v_z enters, so it is constant along a trajectory.
struct TransverseAcceleration {
    double ax = 0.0;
    double ay = 0.0;
};
TransverseAcceleration transverse_acceleration(const EnvironmentSpec& env, double v_z);

Trajectory propagate(const Trajectory& traj, double z_from, double z_to, const EnvironmentSpec& env);

struct Slit {
    double z = 0.0;
    double center_x = 0.0, center_y = 0.0;
    double width_x = 0.0, width_y = 0.0;
};

/// Closed-interval aperture test at the slit plane.
bool slit_pass(const Trajectory& traj, const Slit& slit);

struct Beamline {
    StationTable stations;
    Slit source;
    Slit slit1;
    Slit slit2;
};
Beamline make_beamline(const ExperimentConfig& cfg);

struct Quadrature {
    int source_points = 128;   // samples across the first limiting aperture, per axis
    int angles = 16;           // samples across the second limiting aperture, per axis
    int velocities = 64;
    int kick_nodes = 96;       // tabulation nodes for the kick distribution in G(y)/v_z
    double fixed_velocity = 0.0;  // > 0: monochromatic beam at this speed
    bool use_slit2 = true;
    bool apply_acceptance = true;
    bool normalize = true;
    bool cache_orders = true;  // precompute order columns; only images need them
    int threads = 1;
    ChannelOptions channels;

    void check() const;
};

/// Bookkeeping of where sampled ray weight ended up.
struct SynthesisDiagnostics {
    std::size_t x_rays = 0, x_blocked_source = 0, x_blocked_slit1 = 0, x_blocked_slit2 = 0;
    std::size_t y_rays = 0, y_blocked_source = 0, y_blocked_slit1 = 0, y_blocked_slit2 = 0;
    double admitted_weight = 0.0;  // phase-space weight passing every aperture
    double deposited_weight = 0.0;
    double off_detector_weight = 0.0;
    double outside_acceptance_weight = 0.0;
    double depleted_weight = 0.0;

    std::string summary() const;
};

class KickTable;

/// Dense run of detector columns starting at `first`.
struct ColumnProfile {
    long first = 0;
    std::vector<double> values;
    double total = 0.0;
};

/// Geometry-dependent part of image synthesis: admitted rays per velocity node.
/// Independent of alpha, sigma and the grating height, so a fit can reuse it.
class SynthesisPlan {
public:
    SynthesisPlan(const ExperimentConfig& cfg, const Quadrature& quad);

    struct XRay {
        double x_screen;  // undiffracted landing position
        double weight;
    };
    /// A vertical ray is split linearly between rows `row` and `row + 1`; rendered
    /// rows are then spread by the plan's footprint kernel (the screen image of one
    /// sample cell of the vertical aperture pair).
    struct YRay {
        int row;               // may lie outside the detector
        double upper;          // share of the weight on row + 1
        double y_grating;
        double weight;
        double on_detector;    // share landing on detector rows after the kernel
    };

    struct VelocityNode {
        double v = 0.0;
        double weight = 0.0;
        double order_shift = 0.0;  // screen displacement per hbar k_L
        double kick_angle = 0.0;   // deflection angle per hbar k_L
        std::vector<XRay> x_rays;
        std::vector<double> x_sorted, x_cumulative;  // landing positions and running weight
        std::vector<YRay> y_rays;
        int row_begin = 0, row_end = 0;  // rows touched by y_rays, before the footprint kernel
        double x_weight = 0.0, y_weight = 0.0;
        int cached_orders = -1;                    // orders |j| <= cached_orders are precomputed
        std::vector<ColumnProfile> order_columns;  // index j + cached_orders
    };

    const ExperimentConfig& config() const { return cfg_; }
    const Quadrature& quadrature() const { return quad_; }
    const std::vector<VelocityNode>& nodes() const { return nodes_; }
    const SynthesisDiagnostics& geometry_diagnostics() const { return diag_; }
    /// Row weights at offsets -half .. half; sums to 1.
    const std::vector<double>& footprint() const { return footprint_; }

    /// Renders the detector image for the given molecule and grating. Only
    /// alpha, sigma, branching, depletion and the grating height may differ
    /// from the planning config.
    DetectorImage render(const MoleculeSpec& mol, const GratingSpec& grat,
                         SynthesisDiagnostics* diag = nullptr) const;
    /// As above with a table from kick_table(); the table may be reused for any
    /// grating height since it does not depend on it.
    DetectorImage render(const MoleculeSpec& mol, const GratingSpec& grat, const KickTable& table,
                         SynthesisDiagnostics* diag = nullptr) const;

    /// Row sums of render(), computed without materialising the image.
    std::vector<double> render_profile(const MoleculeSpec& mol, const GratingSpec& grat) const;
    std::vector<double> render_profile(const MoleculeSpec& mol, const GratingSpec& grat,
                                       const KickTable& table) const;

    /// Kick table covering every node of this plan, u in [0, 1 / v_min].
    KickTable kick_table(const MoleculeSpec& mol, const GratingSpec& grat) const;

private:
    ExperimentConfig cfg_;
    Quadrature quad_;
    std::vector<VelocityNode> nodes_;
    SynthesisDiagnostics diag_;
    std::vector<double> footprint_;
    int footprint_half_ = 0;
    int row_begin_ = 0, row_end_ = 0;  // union of the node row ranges

    // Spreads unconvolved rows [row_begin_, row_end_) over the detector rows.
    void spread_rows(const double* raw, std::size_t stride, double* out, std::size_t out_stride,
                     std::size_t count) const;
};

DetectorImage synthesize_image(const ExperimentConfig& cfg, const Quadrature& quad,
                               SynthesisDiagnostics* diag = nullptr);

/// Horizontally integrated profile of synthesize_image, normalised when quad.normalize.
std::vector<double> synthesize_profile(const ExperimentConfig& cfg, const Quadrature& quad);

/// Kick distribution tabulated on uniform nodes in u = G(y)/v_z; linear interpolation.
class KickTable {
public:
    KickTable(const MoleculeSpec& mol, const GratingSpec& grat, double u_max, int nodes,
              const ChannelOptions& opts);

    int j_max() const { return j_max_; }
    /// Largest order with nonzero weight for any u' <= u.
    int j_extent(double u) const;
    /// (j, f) pairs with nonzero smear mass at any node, f >= 1.
    const std::vector<std::pair<int, int>>& smear_keys() const { return smear_keys_; }

    /// Adds scale * interpolated probabilities at u into discrete[j + window] for
    /// |j| <= window (clamped to j_max) and into smear[k].
    void accumulate(double u, double scale, int window, double* discrete, double* smear) const;
    double survival(double u) const;

private:
    double u_max_ = 0.0;
    int nodes_ = 0;
    int j_max_ = 0;
    std::vector<std::pair<int, int>> smear_keys_;
    std::vector<double> discrete_;  // nodes x (2 j_max + 1)
    std::vector<double> smear_;     // nodes x smear_keys
    std::vector<double> survival_;
    std::vector<int> extent_;  // running maximum of the per-node order range
};

/// de Broglie wavelength h / (m v).
double de_broglie_wavelength(double mass, double v);

} // namespace duv
