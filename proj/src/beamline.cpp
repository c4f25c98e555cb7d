#include "duv/beamline.hpp"

#include "duv/constants.hpp"
#include "duv/errors.hpp"
#include "duv/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace duv {

double de_broglie_wavelength(double mass, double v) { return constants::h / (mass * v); }

double beam_density(const SourceSpec& src, const MoleculeSpec& mol, double v) {
    if (v <= 0.0) return 0.0;
    const double d = v - src.v_shift;
    return v * v * v * std::exp(-mol.mass * d * d / (2.0 * constants::k_B * src.temperature));
}

VelocityGrid velocity_grid(const SourceSpec& src, const MoleculeSpec& mol, int n) {
    if (n < 8) throw DomainError{"velocity_grid: at least 8 nodes required"};
    const double thermal = std::sqrt(constants::k_B * src.temperature / mol.mass);
    if (!(thermal > 1e-9) && src.v_shift == 0.0)
        throw DomainError{"velocity_grid: degenerate beam (zero temperature and zero velocity shift)"};
    if (!(thermal > 0.0)) throw DomainError{"velocity_grid: temperature must be > 0"};

    // Fine trapezoid CDF on [0, v_hi]; the v^3 factor shifts the mode above v_shift.
    const double v_hi = src.v_shift + 3.0 * std::sqrt(3.0) * thermal + 14.0 * thermal;
    constexpr int steps = 40000;
    const double dv = v_hi / steps;
    std::vector<double> cdf(steps + 1, 0.0);
    double prev = 0.0;
    for (int i = 1; i <= steps; ++i) {
        const double f = beam_density(src, mol, i * dv);
        cdf[static_cast<std::size_t>(i)] = cdf[static_cast<std::size_t>(i - 1)] + 0.5 * (prev + f) * dv;
        prev = f;
    }
    const double total = cdf.back();
    if (!(total > 0.0) || !std::isfinite(total)) throw NumericalError{"velocity_grid: density has no mass"};
    auto quantile = [&](double q) {
        const double target = q * total;
        const auto it = std::lower_bound(cdf.begin(), cdf.end(), target);
        const auto i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(it - cdf.begin(), 1));
        const double frac = (target - cdf[i - 1]) / std::max(cdf[i] - cdf[i - 1], 1e-300);
        return (static_cast<double>(i - 1) + std::clamp(frac, 0.0, 1.0)) * dv;
    };

    VelocityGrid grid;
    grid.v_min = quantile(0.0005);
    grid.v_max = quantile(0.9995);
    const double h = (grid.v_max - grid.v_min) / n;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = grid.v_min + (i + 0.5) * h;
        grid.nodes.push_back(v);
        grid.weights.push_back(beam_density(src, mol, v));
        sum += grid.weights.back();
    }
    for (auto& w : grid.weights) w /= sum;
    return grid;
}

TransverseAcceleration transverse_acceleration(const EnvironmentSpec& env, double v_z) {
    // -2 Omega x v with Omega_z = 0: only v_z contributes to the transverse components.
    return {-2.0 * env.omega_y * v_z, env.g + 2.0 * env.omega_x * v_z};
}

Trajectory propagate(const Trajectory& traj, double z_from, double z_to, const EnvironmentSpec& env) {
    if (!(traj.vz > 0)) throw DomainError{"propagate: v_z must be > 0"};
    const double t = (z_to - z_from) / traj.vz;
    const auto a = transverse_acceleration(env, traj.vz);
    Trajectory out = traj;
    out.z = z_to;
    out.x = traj.x + traj.vx * t + 0.5 * a.ax * t * t;
    out.y = traj.y + traj.vy * t + 0.5 * a.ay * t * t;
    out.vx = traj.vx + a.ax * t;
    out.vy = traj.vy + a.ay * t;
    return out;
}

bool slit_pass(const Trajectory& traj, const Slit& slit) {
    return std::abs(traj.x - slit.center_x) <= slit.width_x / 2.0 &&
           std::abs(traj.y - slit.center_y) <= slit.width_y / 2.0;
}

Beamline make_beamline(const ExperimentConfig& cfg) {
    const auto& g = cfg.geometry;
    Beamline b;
    b.stations = z_stations(g);
    b.source = {b.stations.source, 0.0, 0.0, g.source_size, g.source_size};
    b.slit1 = {b.stations.slit1, 0.0, g.slit1_height, g.slit1_width_x, g.slit1_width_y};
    b.slit2 = {b.stations.slit2, 0.0, g.slit2_height, g.slit2_width_x, g.slit2_width_y};
    return b;
}

void Quadrature::check() const {
    if (source_points < 4) throw ConfigError{"quadrature: source_points must be >= 4"};
    if (angles < 2) throw ConfigError{"quadrature: angles must be >= 2"};
    if (fixed_velocity <= 0.0 && velocities < 8) throw ConfigError{"quadrature: velocities must be >= 8"};
    if (kick_nodes < 8) throw ConfigError{"quadrature: kick_nodes must be >= 8"};
    if (threads < 1) throw ConfigError{"quadrature: threads must be >= 1"};
}

std::string SynthesisDiagnostics::summary() const {
    std::ostringstream os;
    os << "x rays " << x_rays << " (blocked: source " << x_blocked_source << ", slit1 " << x_blocked_slit1
       << ", slit2 " << x_blocked_slit2 << "); y rays " << y_rays << " (blocked: source " << y_blocked_source
       << ", slit1 " << y_blocked_slit1 << ", slit2 " << y_blocked_slit2 << "); admitted weight "
       << admitted_weight << ", deposited " << deposited_weight << ", off detector " << off_detector_weight
       << ", outside acceptance " << outside_acceptance_weight << ", depleted " << depleted_weight;
    return os.str();
}

namespace {

struct Aperture1D {
    double z, center, width;
    int station;  // 0 source, 1 slit1, 2 slit2
};

struct AxisRay {
    double p0;      // position at z = 0
    double v0;      // transverse velocity at z = 0
    double weight;
};

// Samples rays uniformly on the pair of apertures with the smallest phase-space
// acceptance and keeps those passing the remaining apertures. blocked[k] counts
// rays stopped at station k.
// Aperture pair with the smallest phase-space acceptance; independent of velocity.
std::pair<std::size_t, std::size_t> pick_pair(const std::vector<Aperture1D>& aps) {
    std::size_t ia = 0, ib = 1;
    double best = INFINITY;
    for (std::size_t a = 0; a < aps.size(); ++a)
        for (std::size_t b = a + 1; b < aps.size(); ++b) {
            const double acc = aps[a].width * aps[b].width / std::abs(aps[b].z - aps[a].z);
            if (acc < best) {
                best = acc;
                ia = a;
                ib = b;
            }
        }
    return {ia, ib};
}

struct AxisSample {
    std::vector<AxisRay> rays;
    double za = 0.0, zb = 0.0;          // planes of the sampled aperture pair
    double cell_a = 0.0, cell_b = 0.0;  // sample cell widths on those planes

    // Widths of the images of one sample cell on the plane z.
    std::pair<double, double> cell_images(double z) const {
        return {std::abs((zb - z) / (zb - za)) * cell_a, std::abs((z - za) / (zb - za)) * cell_b};
    }
};

AxisSample sample_axis(const std::vector<Aperture1D>& aps, double v, double accel, int n_first, int n_second,
                       std::size_t blocked[3]) {
    const auto [ia, ib] = pick_pair(aps);
    const auto& A = aps[ia];
    const auto& B = aps[ib];
    const double ta = A.z / v, tb = B.z / v;
    const double weight = (A.width / n_first) * (B.width / n_second) / std::abs(B.z - A.z);

    AxisSample out;
    out.za = A.z, out.zb = B.z;
    out.cell_a = A.width / n_first, out.cell_b = B.width / n_second;
    auto& rays = out.rays;
    rays.reserve(static_cast<std::size_t>(n_first) * static_cast<std::size_t>(n_second));
    for (int i = 0; i < n_first; ++i) {
        const double pa = A.center - A.width / 2.0 + (i + 0.5) * A.width / n_first;
        for (int k = 0; k < n_second; ++k) {
            const double pb = B.center - B.width / 2.0 + (k + 0.5) * B.width / n_second;
            const double va = (pb - pa) / (tb - ta) - accel * (tb - ta) / 2.0;
            const double v0 = va - accel * ta;
            const double p0 = pa - va * ta + 0.5 * accel * ta * ta;
            bool pass = true;
            for (std::size_t s = 0; s < aps.size() && pass; ++s) {
                if (s == ia || s == ib) continue;
                const double t = aps[s].z / v;
                const double p = p0 + v0 * t + 0.5 * accel * t * t;
                if (std::abs(p - aps[s].center) > aps[s].width / 2.0) {
                    pass = false;
                    ++blocked[aps[s].station];
                }
            }
            if (pass) rays.push_back({p0, v0, weight});
        }
    }
    return out;
}

// CDF of c + U(-a/2, a/2) + U(-b/2, b/2) at t.
double trapezoid_cdf(double t, double c, double a, double b) {
    const auto g = [](double x) { return x > 0.0 ? 0.5 * x * x : 0.0; };
    const double x = t - c, s = 0.5 * (a + b), d = 0.5 * (a - b);
    const double f = (g(x + s) - g(x + d) - g(x - d) + g(x - s)) / (a * b);
    return std::clamp(f, 0.0, 1.0);
}

long pixel_index(double coord, double lower_edge, double pitch) {
    const double u = std::floor((coord - lower_edge) / pitch);
    if (!(std::abs(u) < 1e15)) return -1;
    return static_cast<long>(u);
}

ColumnProfile deposit(const std::vector<SynthesisPlan::XRay>& rays, double shift, double left, double pitch,
                long width) {
    long lo = std::numeric_limits<long>::max(), hi = std::numeric_limits<long>::min();
    std::vector<long> cols(rays.size());
    for (std::size_t i = 0; i < rays.size(); ++i) {
        cols[i] = pixel_index(rays[i].x_screen + shift, left, pitch);
        if (cols[i] < 0 || cols[i] >= width) continue;
        lo = std::min(lo, cols[i]);
        hi = std::max(hi, cols[i]);
    }
    ColumnProfile p;
    if (hi < lo) return p;
    p.first = lo;
    p.values.assign(static_cast<std::size_t>(hi - lo + 1), 0.0);
    for (std::size_t i = 0; i < rays.size(); ++i) {
        if (cols[i] < 0 || cols[i] >= width) continue;
        p.values[static_cast<std::size_t>(cols[i] - lo)] += rays[i].weight;
    }
    for (double v : p.values) p.total += v;
    return p;
}

} // namespace

SynthesisPlan::SynthesisPlan(const ExperimentConfig& cfg, const Quadrature& quad) : cfg_{cfg}, quad_{quad} {
    quad_.check();
    validate(cfg_);
    const Beamline bl = make_beamline(cfg_);
    const auto& det = cfg_.detector;

    VelocityGrid vg;
    if (quad_.fixed_velocity > 0.0) {
        vg.nodes = {quad_.fixed_velocity};
        vg.weights = {1.0};
        vg.v_min = vg.v_max = quad_.fixed_velocity;
    } else {
        vg = velocity_grid(cfg_.source, cfg_.molecule, quad_.velocities);
    }

    std::vector<Aperture1D> ax{{bl.source.z, bl.source.center_x, bl.source.width_x, 0},
                               {bl.slit1.z, bl.slit1.center_x, bl.slit1.width_x, 1}};
    std::vector<Aperture1D> ay{{bl.source.z, bl.source.center_y, bl.source.width_y, 0},
                               {bl.slit1.z, bl.slit1.center_y, bl.slit1.width_y, 1}};
    if (quad_.use_slit2) {
        ax.push_back({bl.slit2.z, bl.slit2.center_x, bl.slit2.width_x, 2});
        ay.push_back({bl.slit2.z, bl.slit2.center_y, bl.slit2.width_y, 2});
    }

    const double top = det.center_y + det.height_px * det.pixel_pitch / 2.0;
    const double hbar_k = 2.0 * constants::pi * constants::hbar / cfg_.grating.lambda_l;
    const double z_g = bl.stations.grating, z_s = bl.stations.screen;

    {
        const auto [ia, ib] = pick_pair(ay);
        const auto& A = ay[ia];
        const auto& B = ay[ib];
        const double img_a = std::abs((B.z - z_s) / (B.z - A.z)) * A.width / quad_.source_points;
        const double img_b = std::abs((z_s - A.z) / (B.z - A.z)) * B.width / quad_.angles;
        // A floor keeps the CDF well conditioned for point-like cells.
        const double fa = std::max(img_a / det.pixel_pitch, 1e-3);
        const double fb = std::max(img_b / det.pixel_pitch, 1e-3);
        footprint_half_ = static_cast<int>(std::ceil(0.5 * (fa + fb) + 0.5));
        for (int k = -footprint_half_; k <= footprint_half_; ++k)
            footprint_.push_back(trapezoid_cdf(k + 0.5, 0.0, fa, fb) - trapezoid_cdf(k - 0.5, 0.0, fa, fb));
    }
    const int kh = footprint_half_;

    nodes_.resize(vg.nodes.size());
    std::vector<SynthesisDiagnostics> per_node(vg.nodes.size());
    parallel_for(vg.nodes.size(), quad_.threads, [&](std::size_t i) {
        auto& node = nodes_[i];
        auto& d = per_node[i];
        node.v = vg.nodes[i];
        node.weight = vg.weights[i];
        node.kick_angle = hbar_k / (cfg_.molecule.mass * node.v);
        node.order_shift = node.kick_angle * (z_s - z_g);
        const auto acc = transverse_acceleration(cfg_.environment, node.v);

        std::size_t bx[3] = {0, 0, 0}, by[3] = {0, 0, 0};
        const auto xr = sample_axis(ax, node.v, acc.ax, quad_.source_points, quad_.angles, bx);
        const auto yr = sample_axis(ay, node.v, acc.ay, quad_.source_points, quad_.angles, by);
        d.x_rays = static_cast<std::size_t>(quad_.source_points) * static_cast<std::size_t>(quad_.angles);
        d.y_rays = d.x_rays;
        d.x_blocked_source = bx[0], d.x_blocked_slit1 = bx[1], d.x_blocked_slit2 = bx[2];
        d.y_blocked_source = by[0], d.y_blocked_slit1 = by[1], d.y_blocked_slit2 = by[2];

        Trajectory t0;
        t0.vz = node.v;
        for (const auto& r : xr.rays) {
            t0.x = r.p0, t0.vx = r.v0;
            const auto at_screen = propagate(t0, 0.0, z_s, cfg_.environment);
            node.x_rays.push_back({at_screen.x, r.weight});
            node.x_weight += r.weight;
        }
        t0.x = t0.vx = 0.0;
        int rmin = std::numeric_limits<int>::max(), rmax = std::numeric_limits<int>::min();
        const long height = static_cast<long>(det.height_px);
        // Rays further than this from the detector cannot reach it.
        const double reach = kh + 2.0;
        for (const auto& r : yr.rays) {
            t0.y = r.p0, t0.vy = r.v0;
            const auto at_grating = propagate(t0, 0.0, z_g, cfg_.environment);
            const auto at_screen = propagate(at_grating, z_g, z_s, cfg_.environment);
            node.y_weight += r.weight;
            const double p = (top - at_screen.y) / det.pixel_pitch - 0.5;
            if (!(p > -reach && p < static_cast<double>(height) + reach)) continue;
            const double fl = std::floor(p);
            SynthesisPlan::YRay y{static_cast<int>(fl), p - fl, at_grating.y, r.weight, 0.0};
            for (int c = 0; c < 2; ++c)
                for (int k = -kh; k <= kh; ++k) {
                    const long row = y.row + c + k;
                    if (row >= 0 && row < height)
                        y.on_detector += (c ? y.upper : 1.0 - y.upper) * footprint_[static_cast<std::size_t>(k + kh)];
                }
            if (!(y.on_detector > 0.0)) continue;
            node.y_rays.push_back(y);
            rmin = std::min(rmin, y.row);
            rmax = std::max(rmax, y.row + 1);
        }
        if (rmax >= rmin) {
            node.row_begin = rmin;
            node.row_end = rmax + 1;
        }
        d.admitted_weight = node.weight * node.x_weight * node.y_weight;

        std::vector<XRay> by_x = node.x_rays;
        std::sort(by_x.begin(), by_x.end(), [](const XRay& a, const XRay& b) { return a.x_screen < b.x_screen; });
        double run = 0.0;
        node.x_cumulative.push_back(0.0);
        for (const auto& r : by_x) {
            node.x_sorted.push_back(r.x_screen);
            node.x_cumulative.push_back(run += r.weight);
        }

        if (quad_.apply_acceptance && quad_.cache_orders) {
            node.cached_orders = static_cast<int>(std::floor(det.acceptance_angle / node.kick_angle));
            node.cached_orders = std::min(node.cached_orders, 4096);
            const double left = det.center_x - det.width_px * det.pixel_pitch / 2.0;
            for (int j = -node.cached_orders; j <= node.cached_orders; ++j)
                node.order_columns.push_back(deposit(node.x_rays, j * node.order_shift, left, det.pixel_pitch,
                                                     static_cast<long>(det.width_px)));
        }
    });
    row_begin_ = std::numeric_limits<int>::max();
    row_end_ = std::numeric_limits<int>::min();
    for (const auto& n : nodes_)
        if (n.row_end > n.row_begin) row_begin_ = std::min(row_begin_, n.row_begin), row_end_ = std::max(row_end_, n.row_end);
    if (row_end_ < row_begin_) row_begin_ = row_end_ = 0;
    for (const auto& d : per_node) {
        diag_.x_rays += d.x_rays, diag_.y_rays += d.y_rays;
        diag_.x_blocked_source += d.x_blocked_source, diag_.x_blocked_slit1 += d.x_blocked_slit1;
        diag_.x_blocked_slit2 += d.x_blocked_slit2;
        diag_.y_blocked_source += d.y_blocked_source, diag_.y_blocked_slit1 += d.y_blocked_slit1;
        diag_.y_blocked_slit2 += d.y_blocked_slit2;
        diag_.admitted_weight += d.admitted_weight;
    }
}

KickTable::KickTable(const MoleculeSpec& mol, const GratingSpec& grat, double u_max, int nodes,
                     const ChannelOptions& opts)
    : u_max_{u_max}, nodes_{nodes} {
    const auto scales = grating_scales(mol, grat);
    std::vector<KickDistribution> kds;
    kds.reserve(static_cast<std::size_t>(nodes));
    for (int k = 0; k < nodes; ++k) {
        const double u = u_max * k / (nodes - 1);
        kds.push_back(kick_distribution(channel_amplitudes(scales.at(u), opts), mol));
        j_max_ = std::max(j_max_, kds.back().j_max);
        extent_.push_back(j_max_);
    }
    std::map<std::pair<int, int>, std::size_t> key_index;
    for (const auto& kd : kds)
        for (const auto& e : kd.smear) key_index.emplace(std::pair{e.j, e.f}, 0);
    for (auto& [key, idx] : key_index) {
        idx = smear_keys_.size();
        smear_keys_.push_back(key);
    }
    const auto width = static_cast<std::size_t>(2 * j_max_ + 1);
    discrete_.assign(width * static_cast<std::size_t>(nodes), 0.0);
    smear_.assign(smear_keys_.size() * static_cast<std::size_t>(nodes), 0.0);
    survival_.resize(static_cast<std::size_t>(nodes));
    for (std::size_t k = 0; k < kds.size(); ++k) {
        const auto& kd = kds[k];
        for (int j = -kd.j_max; j <= kd.j_max; ++j) {
            const double p = kd.at(j);
            if (!std::isfinite(p)) throw NumericalError{"kick table: non-finite probability"};
            discrete_[k * width + static_cast<std::size_t>(j + j_max_)] = p;
        }
        for (const auto& e : kd.smear)
            smear_[k * smear_keys_.size() + key_index.at({e.j, e.f})] = e.probability;
        survival_[k] = kd.survival;
    }
}

namespace {
struct Bracket {
    std::size_t lo;
    double frac;
};
Bracket bracket(double u, double u_max, int nodes) {
    if (u_max <= 0.0) return {0, 0.0};
    const double pos = std::clamp(u / u_max, 0.0, 1.0) * (nodes - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    if (lo >= static_cast<std::size_t>(nodes - 1)) lo = static_cast<std::size_t>(nodes - 2);
    return {lo, pos - static_cast<double>(lo)};
}
} // namespace

void KickTable::accumulate(double u, double scale, int window, double* discrete, double* smear) const {
    const auto [lo, frac] = bracket(u, u_max_, nodes_);
    const auto width = static_cast<std::size_t>(2 * j_max_ + 1);
    const int jw = std::min(window, j_max_);
    const double w0 = scale * (1.0 - frac), w1 = scale * frac;
    const double* a = discrete_.data() + lo * width + (j_max_ - jw);
    const double* b = a + width;
    double* dst = discrete + (window - jw);
    for (std::size_t j = 0; j < static_cast<std::size_t>(2 * jw + 1); ++j) dst[j] += w0 * a[j] + w1 * b[j];
    const std::size_t ns = smear_keys_.size();
    if (ns == 0) return;
    const double* sa = smear_.data() + lo * ns;
    const double* sb = sa + ns;
    for (std::size_t k = 0; k < ns; ++k) smear[k] += w0 * sa[k] + w1 * sb[k];
}

int KickTable::j_extent(double u) const {
    const auto [lo, frac] = bracket(u, u_max_, nodes_);
    return extent_[frac > 0.0 ? lo + 1 : lo];
}

double KickTable::survival(double u) const {
    const auto [lo, frac] = bracket(u, u_max_, nodes_);
    return (1.0 - frac) * survival_[lo] + frac * survival_[lo + 1];
}

namespace {

ColumnProfile convolve_clipped(const ColumnProfile& base, const std::vector<double>& kernel, long half, long width) {
    ColumnProfile p;
    if (base.values.empty()) return p;
    const long lo = std::max(0L, base.first - half);
    const long hi = std::min(width - 1, base.first + static_cast<long>(base.values.size()) - 1 + half);
    if (hi < lo) return p;
    p.first = lo;
    p.values.assign(static_cast<std::size_t>(hi - lo + 1), 0.0);
    for (std::size_t i = 0; i < base.values.size(); ++i) {
        const long c0 = base.first + static_cast<long>(i);
        for (long k = -half; k <= half; ++k) {
            const long c = c0 + k;
            if (c < lo || c > hi) continue;
            p.values[static_cast<std::size_t>(c - lo)] += base.values[i] * kernel[static_cast<std::size_t>(k + half)];
        }
    }
    for (double v : p.values) p.total += v;
    return p;
}

struct NodeWork {
    int window = 0;                             // orders |j| <= window are kept
    std::vector<const ColumnProfile*> orders;  // index j + window
    std::vector<double> totals;                 // column sums of the orders
    std::vector<ColumnProfile> owned;           // orders not cached by the plan
    std::vector<ColumnProfile> smears;          // index into smear keys
    std::vector<double> a;                      // rows x (2 window + 1)
    std::vector<double> s;                      // rows x smear keys
    double outside_acceptance = 0.0;
    double depleted = 0.0;
    double off_detector = 0.0;
};

// Weight of the x rays that land on the detector after a shift.
double landed_weight(const SynthesisPlan::VelocityNode& node, double shift, double left, double span) {
    const auto lo = std::lower_bound(node.x_sorted.begin(), node.x_sorted.end(), left - shift);
    const auto hi = std::lower_bound(node.x_sorted.begin(), node.x_sorted.end(), left + span - shift);
    return node.x_cumulative[static_cast<std::size_t>(hi - node.x_sorted.begin())] -
           node.x_cumulative[static_cast<std::size_t>(lo - node.x_sorted.begin())];
}

// With columns false only the order totals are filled, which is all a profile needs.
std::vector<NodeWork> prepare(const SynthesisPlan& plan, const MoleculeSpec& mol, const GratingSpec& grat,
                              const KickTable& table, bool columns) {
    const auto& cfg = plan.config();
    const auto& quad = plan.quadrature();
    const auto& det = cfg.detector;
    const auto& nodes = plan.nodes();

    const int J = table.j_max();
    const auto& keys = table.smear_keys();
    const double left = det.center_x - det.width_px * det.pixel_pitch / 2.0;
    const auto det_w = static_cast<long>(det.width_px);
    const double span = det.width_px * det.pixel_pitch;
    const double l4 = cfg.geometry.l4;

    std::vector<NodeWork> work(nodes.size());
    parallel_for(nodes.size(), quad.threads, [&](std::size_t i) {
        const auto& node = nodes[i];
        auto& w = work[i];
        // Depletion of classes that never reach the detector shows up as off-detector weight.
        if (node.row_end <= node.row_begin) return;
        w.window = std::min(J, table.j_extent(1.0 / node.v));
        if (quad.apply_acceptance)
            w.window = std::min(w.window, static_cast<int>(std::floor(det.acceptance_angle / node.kick_angle)));
        const auto width = static_cast<std::size_t>(2 * w.window + 1);
        w.orders.assign(width, nullptr);
        w.owned.resize(width);
        w.totals.resize(width);
        for (int j = -w.window; j <= w.window; ++j) {
            const auto jj = static_cast<std::size_t>(j + w.window);
            const bool base_needed =
                columns || std::any_of(keys.begin(), keys.end(), [j](const auto& key) { return key.first == j; });
            if (!base_needed) {
                w.totals[jj] = landed_weight(node, j * node.order_shift, left, span);
                continue;
            }
            if (std::abs(j) <= node.cached_orders) {
                w.orders[jj] = &node.order_columns[static_cast<std::size_t>(j + node.cached_orders)];
            } else {
                w.owned[jj] = deposit(node.x_rays, j * node.order_shift, left, det.pixel_pitch, det_w);
                w.orders[jj] = &w.owned[jj];
            }
            w.totals[jj] = w.orders[jj]->total;
        }
        if (!keys.empty()) {
            const double recoil_shift = constants::h / mol.lambda_f / (mol.mass * node.v) * l4;
            std::map<int, std::pair<long, std::vector<double>>> kernels;
            w.smears.resize(keys.size());
            for (std::size_t k = 0; k < keys.size(); ++k) {
                const auto [j, f] = keys[k];
                if (std::abs(j) > w.window) continue;
                const ColumnProfile* base = w.orders[static_cast<std::size_t>(j + w.window)];
                auto it = kernels.find(f);
                if (it == kernels.end()) {
                    const long half = static_cast<long>(std::ceil(f * recoil_shift / det.pixel_pitch)) + 1;
                    std::vector<double> ker(static_cast<std::size_t>(2 * half + 1));
                    for (long c = -half; c <= half; ++c)
                        ker[static_cast<std::size_t>(c + half)] =
                            FluorescenceKernel::unit_cdf(f, (c + 0.5) * det.pixel_pitch / recoil_shift) -
                            FluorescenceKernel::unit_cdf(f, (c - 0.5) * det.pixel_pitch / recoil_shift);
                    it = kernels.emplace(f, std::pair{half, std::move(ker)}).first;
                }
                w.smears[k] = convolve_clipped(*base, it->second.second, it->second.first, det_w);
            }
        }

        const auto rows = static_cast<std::size_t>(node.row_end - node.row_begin);
        const std::size_t nk = keys.size();
        w.a.assign(rows * width, 0.0);
        w.s.assign(rows * nk, 0.0);
        double surviving = 0.0;
        for (const auto& r : node.y_rays) {
            const double u = vertical_envelope(grat, r.y_grating) / node.v;
            const double scale = node.weight * r.weight;
            const double survival = table.survival(u);
            w.depleted += scale * node.x_weight * (1.0 - survival);
            w.off_detector += scale * node.x_weight * survival * (1.0 - r.on_detector);
            surviving += scale * survival;
            const auto row = static_cast<std::size_t>(r.row - node.row_begin);
            for (std::size_t c = 0; c < 2; ++c) {
                const double share = c ? r.upper : 1.0 - r.upper;
                if (share == 0.0) continue;
                table.accumulate(u, scale * share, w.window, w.a.data() + (row + c) * width,
                                 nk ? w.s.data() + (row + c) * nk : nullptr);
            }
        }
        // Whatever survives but was not accumulated inside the window left the acceptance cone.
        double kept = 0.0;
        for (double v : w.a) kept += v;
        for (std::size_t row = 0; row < rows; ++row)
            for (std::size_t k = 0; k < keys.size(); ++k)
                if (std::abs(keys[k].first) <= w.window) kept += w.s[row * keys.size() + k];
        w.outside_acceptance = std::max(0.0, surviving - kept) * node.x_weight;
    });
    return work;
}

} // namespace

void SynthesisPlan::spread_rows(const double* raw, std::size_t stride, double* out, std::size_t out_stride,
                                std::size_t count) const {
    const int kh = footprint_half_;
    const int height = static_cast<int>(cfg_.detector.height_px);
    parallel_for(static_cast<std::size_t>(height), quad_.threads, [&](std::size_t row) {
        const int d = static_cast<int>(row);
        double* dst = out + row * out_stride;
        for (int k = -kh; k <= kh; ++k) {
            const int src = d - k;
            if (src < row_begin_ || src >= row_end_) continue;
            const double c = footprint_[static_cast<std::size_t>(k + kh)];
            const double* from = raw + static_cast<std::size_t>(src - row_begin_) * stride;
            for (std::size_t i = 0; i < count; ++i) dst[i] += c * from[i];
        }
    });
}

KickTable SynthesisPlan::kick_table(const MoleculeSpec& mol, const GratingSpec& grat) const {
    // Only velocity classes that reach the detector are looked up.
    double v_min = INFINITY;
    for (const auto& n : nodes_)
        if (n.row_end > n.row_begin) v_min = std::min(v_min, n.v);
    if (!std::isfinite(v_min))
        for (const auto& n : nodes_) v_min = std::min(v_min, n.v);
    return KickTable{mol, grat, 1.0 / v_min, quad_.kick_nodes, quad_.channels};
}

DetectorImage SynthesisPlan::render(const MoleculeSpec& mol, const GratingSpec& grat,
                                    SynthesisDiagnostics* diag) const {
    return render(mol, grat, kick_table(mol, grat), diag);
}

DetectorImage SynthesisPlan::render(const MoleculeSpec& mol, const GratingSpec& grat, const KickTable& table,
                                    SynthesisDiagnostics* diag) const {
    const auto& det = cfg_.detector;
    const auto work = prepare(*this, mol, grat, table, true);
    const std::size_t nkeys = table.smear_keys().size();

    DetectorImage img{det.width_px, det.height_px, det.pixel_pitch};
    img.center_x = det.center_x;
    img.center_y = det.center_y;
    img.provenance = Provenance::simulated;

    // Each row sums over velocity nodes in fixed order: independent of thread count.
    const auto raw_rows = static_cast<std::size_t>(row_end_ - row_begin_);
    const std::size_t W = det.width_px;
    std::vector<double> raw(raw_rows * W, 0.0);
    parallel_for(raw_rows, quad_.threads, [&](std::size_t idx) {
        double* out = raw.data() + idx * W;
        const int r = row_begin_ + static_cast<int>(idx);
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const auto& node = nodes_[i];
            if (r < node.row_begin || r >= node.row_end) continue;
            const auto& w = work[i];
            const auto width = w.orders.size();
            const auto local = static_cast<std::size_t>(r - node.row_begin);
            const double* a = w.a.data() + local * width;
            for (std::size_t jj = 0; jj < width; ++jj) {
                const double coef = a[jj];
                const ColumnProfile* prof = w.orders[jj];
                if (coef == 0.0 || prof->values.empty()) continue;
                double* dst = out + prof->first;
                const double* src = prof->values.data();
                for (std::size_t c = 0; c < prof->values.size(); ++c) dst[c] += coef * src[c];
            }
            if (nkeys == 0) continue;
            const double* s = w.s.data() + local * nkeys;
            for (std::size_t k = 0; k < nkeys; ++k) {
                const double coef = s[k];
                const auto& prof = w.smears[k];
                if (coef == 0.0 || prof.values.empty()) continue;
                double* dst = out + prof.first;
                for (std::size_t c = 0; c < prof.values.size(); ++c) dst[c] += coef * prof.values[c];
            }
        }
    });
    spread_rows(raw.data(), W, img.data().data(), W, W);

    SynthesisDiagnostics d = diag_;
    d.deposited_weight = img.sum();
    for (const auto& w : work) {
        d.outside_acceptance_weight += w.outside_acceptance;
        d.depleted_weight += w.depleted;
    }
    d.off_detector_weight =
        std::max(0.0, d.admitted_weight - d.depleted_weight - d.outside_acceptance_weight - d.deposited_weight);
    if (diag) *diag = d;

    for (double v : img.data())
        if (!std::isfinite(v)) throw NumericalError{"image synthesis produced non-finite intensities"};
    if (!(d.deposited_weight > 0.0))
        throw NumericalError{"image synthesis: no trajectory reached the detector; " + d.summary()};
    if (quad_.normalize) {
        const double inv = 1.0 / d.deposited_weight;
        for (double& v : img.data()) v *= inv;
        img.normalized = true;
    }
    return img;
}

std::vector<double> SynthesisPlan::render_profile(const MoleculeSpec& mol, const GratingSpec& grat) const {
    return render_profile(mol, grat, kick_table(mol, grat));
}

std::vector<double> SynthesisPlan::render_profile(const MoleculeSpec& mol, const GratingSpec& grat,
                                                  const KickTable& table) const {
    const auto& det = cfg_.detector;
    const auto work = prepare(*this, mol, grat, table, false);
    const std::size_t nkeys = table.smear_keys().size();
    std::vector<double> raw(static_cast<std::size_t>(row_end_ - row_begin_), 0.0);
    for (std::size_t idx = 0; idx < raw.size(); ++idx) {
        const int r = row_begin_ + static_cast<int>(idx);
        double acc = 0.0;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const auto& node = nodes_[i];
            if (r < node.row_begin || r >= node.row_end) continue;
            const auto& w = work[i];
            const auto width = w.orders.size();
            const auto local = static_cast<std::size_t>(r - node.row_begin);
            for (std::size_t jj = 0; jj < width; ++jj) acc += w.a[local * width + jj] * w.totals[jj];
            for (std::size_t k = 0; k < nkeys; ++k) acc += w.s[local * nkeys + k] * w.smears[k].total;
        }
        raw[idx] = acc;
    }
    std::vector<double> profile(det.height_px, 0.0);
    spread_rows(raw.data(), 1, profile.data(), 1, 1);
    double total = 0.0;
    for (double v : profile) total += v;
    if (!std::isfinite(total)) throw NumericalError{"profile synthesis produced non-finite values"};
    if (!(total > 0.0))
        throw NumericalError{"profile synthesis: no trajectory reached the detector; " + diag_.summary()};
    if (quad_.normalize)
        for (double& v : profile) v /= total;
    return profile;
}

DetectorImage synthesize_image(const ExperimentConfig& cfg, const Quadrature& quad, SynthesisDiagnostics* diag) {
    const SynthesisPlan plan{cfg, quad};
    return plan.render(cfg.molecule, cfg.grating, diag);
}

std::vector<double> synthesize_profile(const ExperimentConfig& cfg, const Quadrature& quad) {
    Quadrature q = quad;
    q.cache_orders = false;
    const SynthesisPlan plan{cfg, q};
    return plan.render_profile(cfg.molecule, cfg.grating);
}

} // namespace duv
