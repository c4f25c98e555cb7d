#pragma once

#include "duv/config.hpp"

#include <complex>
#include <vector>

namespace duv {

/// Peak eikonal phase and mean absorbed photon number at the antinodes for one
/// molecule crossing the standing wave at forward speed v_z and height y.
struct GratingStrength {
    double phi0 = 0.0;
    double n0 = 0.0;
    // Photons absorbed from the unmodulated running-wave part (reflectivity < 1).
    double n_uniform = 0.0;
};

/// phi0 and n0 per unit of G(y)/v_z, where G is the vertical Gaussian envelope.
struct GratingScales {
    double phi_per_u = 0.0;
    double n_per_u = 0.0;
    double n_uniform_per_u = 0.0;

    GratingStrength at(double u) const { return {phi_per_u * u, n_per_u * u, n_uniform_per_u * u}; }
};

GratingScales grating_scales(const MoleculeSpec& mol, const GratingSpec& grat);

/// exp(-2 (y - y0g)^2 / w_y^2)
double vertical_envelope(const GratingSpec& grat, double y);

GratingStrength grating_strength(const MoleculeSpec& mol, const GratingSpec& grat, double v_z, double y);

/// Channel m: the molecule absorbed m photons. coeffs[j + j_max] is the Fourier
/// amplitude of the channel transmission function at momentum order j (units hbar k_L).
struct Channel {
    int m = 0;
    std::vector<std::complex<double>> coeffs;
    double mass = 0.0;  // sum_j |c_{m,j}|^2
};

struct ChannelSet {
    GratingStrength strength;
    int m_max = 0;
    int j_max = 0;
    int samples = 0;           // DFT length over one period
    double epsilon_trunc = 0.0;
    double tail_mass = 0.0;    // period-averaged Poisson mass beyond m_max
    std::vector<Channel> channels;  // channels[m].m == m

    std::complex<double> coeff(int m, int j) const {
        if (j < -j_max || j > j_max) return {};
        return channels[static_cast<std::size_t>(m)].coeffs[static_cast<std::size_t>(j + j_max)];
    }
};

struct ChannelOptions {
    int m_max_cap = 400;
    int j_max = -1;  // < 0: 2 ceil(|phi0|) + m_max + 8
    double epsilon_trunc = 1e-6;
};

/// Smallest channel count whose period-averaged Poisson tail is below epsilon_trunc.
/// Throws TruncationError when that needs more than m_max_cap channels.
ChannelSet channel_amplitudes(const GratingStrength& gs, const ChannelOptions& opts = {});

/// max over m of | sum_j |c_{m,j}|^2 - <exp(-nbar) nbar^m / m!>_period |, with the
/// period average taken by an independent fine quadrature.
double poisson_consistency_check(const ChannelSet& cs);

struct SmearEntry {
    int j = 0;  // coherent order the fluorescence blur is centred on
    int f = 0;  // number of fluorescence photons, >= 1
    double probability = 0.0;
};

/// Transverse momentum transfer at the grating in units of hbar k_L.
struct KickDistribution {
    int j_max = 0;
    std::vector<double> discrete;     // discrete[j + j_max]
    std::vector<SmearEntry> smear;
    double survival = 0.0;
    double mean_absorbed = 0.0;       // mean photon number of the surviving molecules, per incident molecule

    double at(int j) const {
        if (j < -j_max || j > j_max) return 0.0;
        return discrete[static_cast<std::size_t>(j + j_max)];
    }
    double discrete_total() const;
    double smear_total() const;
    /// <p^2> in SI given the photon momenta of the grating and fluorescence light.
    double second_moment(double hbar_k_l, double hbar_k_f) const;
};

KickDistribution kick_distribution(const ChannelSet& cs, const MoleculeSpec& mol);

/// Momentum density of f isotropically emitted photons projected on x: the sum of
/// f independent uniform variables on [-hbar k_F, hbar k_F].
class FluorescenceKernel {
public:
    FluorescenceKernel(int f, double lambda_f);

    int photons() const { return f_; }
    double recoil() const { return recoil_; }  // hbar k_F
    double density(double p) const;
    double cdf(double p) const;
    double variance() const { return f_ * recoil_ * recoil_ / 3.0; }

    /// Same distributions in units of hbar k_F (support [-f, f]).
    static double unit_density(int f, double u);
    static double unit_cdf(int f, double u);

private:
    int f_;
    double recoil_;
};

FluorescenceKernel fluorescence_kernel(int f, double lambda_f);

} // namespace duv
