#include "duv/grating.hpp"

#include "duv/constants.hpp"
#include "duv/errors.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace duv {

namespace {

using cplx = std::complex<double>;

// FFTW planning is not thread-safe; execution with fftw_execute_dft is.
fftw_plan forward_plan(int n) {
    static std::mutex mutex;
    static std::map<int, fftw_plan> plans;
    std::lock_guard lock{mutex};
    auto it = plans.find(n);
    if (it != plans.end()) return it->second;
    std::vector<cplx> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
    fftw_plan p = fftw_plan_dft_1d(n, reinterpret_cast<fftw_complex*>(a.data()),
                                   reinterpret_cast<fftw_complex*>(b.data()), FFTW_FORWARD,
                                   FFTW_ESTIMATE | FFTW_UNALIGNED);
    plans.emplace(n, p);
    return p;
}

int next_pow2(int n) {
    int p = 1;
    while (p < n) p <<= 1;
    return p;
}

int default_j_max(double phi0, int m_max) {
    return 2 * static_cast<int>(std::ceil(std::abs(phi0))) + m_max + 8;
}

// exp(-n) n^m / m! averaged over cos^2 on a uniform periodic grid.
std::vector<double> period_poisson(double n0, int m_count, int samples) {
    std::vector<double> avg(static_cast<std::size_t>(m_count), 0.0);
    for (int s = 0; s < samples; ++s) {
        const double c = std::cos(2.0 * constants::pi * s / samples);
        const double nbar = n0 * c * c;
        double term = std::exp(-nbar);
        for (int m = 0; m < m_count; ++m) {
            if (m > 0) term *= nbar / m;
            avg[static_cast<std::size_t>(m)] += term;
        }
    }
    for (auto& a : avg) a /= samples;
    return avg;
}

} // namespace

GratingScales grating_scales(const MoleculeSpec& mol, const GratingSpec& grat) {
    using namespace constants;
    const double sqrt_eta = std::sqrt(grat.reflectivity);
    const double phi = std::sqrt(8.0 / pi) * mol.alpha_duv * grat.power / (hbar * epsilon0 * c * grat.waist_y);
    const double n = 8.0 / std::sqrt(2.0 * pi) * mol.sigma_duv * grat.power * grat.lambda_l /
                     (h * c * grat.waist_y);
    const double uniform = (1.0 - sqrt_eta) * (1.0 - sqrt_eta) / 4.0;
    return {phi * sqrt_eta, n * sqrt_eta, n * uniform};
}

double vertical_envelope(const GratingSpec& grat, double y) {
    const double d = (y - grat.height) / grat.waist_y;
    return std::exp(-2.0 * d * d);
}

GratingStrength grating_strength(const MoleculeSpec& mol, const GratingSpec& grat, double v_z, double y) {
    if (!(v_z > 0)) throw DomainError{"grating_strength: v_z must be > 0"};
    return grating_scales(mol, grat).at(vertical_envelope(grat, y) / v_z);
}

ChannelSet channel_amplitudes(const GratingStrength& gs, const ChannelOptions& opts) {
    if (opts.m_max_cap < 0) throw DomainError{"channel_amplitudes: m_max must be >= 0"};
    if (!(gs.n0 >= 0)) throw DomainError{"channel_amplitudes: n0 must be >= 0"};

    ChannelSet cs;
    cs.strength = gs;
    cs.epsilon_trunc = opts.epsilon_trunc;

    // Channel count from the period-averaged Poisson tail.
    int m_max = 0;
    double tail = 0.0;
    if (gs.n0 > 0) {
        const int probe_samples = std::max(256, next_pow2(8 * (static_cast<int>(gs.n0) + 16)));
        // The Poisson tail beyond n0 + 12 sqrt(n0) + 40 is far below any useful epsilon.
        const int probe_m = std::min(opts.m_max_cap + 1,
                                     static_cast<int>(gs.n0 + 12.0 * std::sqrt(gs.n0)) + 40);
        const auto avg = period_poisson(gs.n0, probe_m, probe_samples);
        double acc = 0.0;
        m_max = -1;
        for (int m = 0; m < probe_m; ++m) {
            acc += avg[static_cast<std::size_t>(m)];
            tail = std::max(0.0, 1.0 - acc);
            if (tail < opts.epsilon_trunc) {
                m_max = m;
                break;
            }
        }
        if (m_max < 0 && probe_m <= opts.m_max_cap)
            throw NumericalError{"channel truncation probe exhausted before epsilon_trunc"};
        if (m_max < 0)
            throw TruncationError{"channel truncation did not reach epsilon_trunc within m_max = " +
                                      std::to_string(opts.m_max_cap) +
                                      " (residual mass " + std::to_string(tail) + ")",
                                  tail};
    }
    cs.m_max = m_max;
    cs.tail_mass = tail;
    cs.j_max = opts.j_max >= 0 ? opts.j_max : default_j_max(gs.phi0, m_max);
    if (cs.j_max < m_max) throw DomainError{"channel_amplitudes: j_max must be >= m_max"};
    const int n = std::max(64, next_pow2(4 * cs.j_max + 1));
    cs.samples = n;

    std::vector<cplx> amp(static_cast<std::size_t>(n));
    std::vector<double> step(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s) {
        const double c = std::cos(2.0 * constants::pi * s / n);
        const double nbar = gs.n0 * c * c;
        amp[static_cast<std::size_t>(s)] = std::polar(std::exp(-nbar / 2.0), gs.phi0 * c * c);
        step[static_cast<std::size_t>(s)] = std::sqrt(gs.n0) * c;
    }

    const fftw_plan plan = forward_plan(n);
    std::vector<cplx> spectrum(static_cast<std::size_t>(n));
    cs.channels.reserve(static_cast<std::size_t>(m_max + 1));
    for (int m = 0; m <= m_max; ++m) {
        if (m > 0) {
            const double inv = 1.0 / std::sqrt(static_cast<double>(m));
            for (int s = 0; s < n; ++s) amp[static_cast<std::size_t>(s)] *= step[static_cast<std::size_t>(s)] * inv;
        }
        fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(amp.data()),
                         reinterpret_cast<fftw_complex*>(spectrum.data()));
        Channel ch;
        ch.m = m;
        ch.coeffs.assign(static_cast<std::size_t>(2 * cs.j_max + 1), cplx{});
        for (int j = -cs.j_max; j <= cs.j_max; ++j) {
            // cos^m has parity m: odd m + j vanish identically.
            if (((m + j) & 1) != 0) continue;
            const cplx c = spectrum[static_cast<std::size_t>((j % n + n) % n)] / static_cast<double>(n);
            ch.coeffs[static_cast<std::size_t>(j + cs.j_max)] = c;
            ch.mass += std::norm(c);
        }
        cs.channels.push_back(std::move(ch));
    }
    return cs;
}

double poisson_consistency_check(const ChannelSet& cs) {
    const int samples = std::max(4096, 4 * cs.samples + 7);
    const auto avg = period_poisson(cs.strength.n0, cs.m_max + 1, samples);
    double worst = 0.0;
    for (const auto& ch : cs.channels)
        worst = std::max(worst, std::abs(ch.mass - avg[static_cast<std::size_t>(ch.m)]));
    return worst;
}

double KickDistribution::discrete_total() const {
    double s = 0.0;
    for (double p : discrete) s += p;
    return s;
}

double KickDistribution::smear_total() const {
    double s = 0.0;
    for (const auto& e : smear) s += e.probability;
    return s;
}

double KickDistribution::second_moment(double hbar_k_l, double hbar_k_f) const {
    double acc = 0.0;
    for (int j = -j_max; j <= j_max; ++j) acc += at(j) * j * j * hbar_k_l * hbar_k_l;
    for (const auto& e : smear)
        acc += e.probability * (e.j * e.j * hbar_k_l * hbar_k_l + e.f * hbar_k_f * hbar_k_f / 3.0);
    return acc;
}

KickDistribution kick_distribution(const ChannelSet& cs, const MoleculeSpec& mol) {
    KickDistribution kd;
    kd.j_max = cs.j_max;
    const auto width = static_cast<std::size_t>(2 * cs.j_max + 1);
    kd.discrete.assign(width, 0.0);

    const int m_count = cs.m_max + 1;
    // smear_acc[(j + j_max) * m_count + f]
    std::vector<double> smear_acc(width * static_cast<std::size_t>(m_count), 0.0);
    const double keep = 1.0 - mol.p_dep;
    // Depletion by photons from the unmodulated part: sum_k Poisson(n_u, k) keep^k.
    const double uniform_survival = std::exp(-cs.strength.n_uniform * mol.p_dep);

    std::vector<double> binom(static_cast<std::size_t>(m_count), 0.0);
    for (const auto& ch : cs.channels) {
        const int m = ch.m;
        const double survive = std::pow(keep, m) * uniform_survival;
        if (survive == 0.0) continue;
        // Binomial(m, phi_f) split of fluorescence counts.
        const int f_top = mol.phi_f > 0.0 ? m : 0;
        for (int f = 0; f <= f_top; ++f) {
            const double lc = std::lgamma(m + 1.0) - std::lgamma(f + 1.0) - std::lgamma(m - f + 1.0);
            const double pf = (f == 0 ? 1.0 : std::pow(mol.phi_f, f)) *
                              (m - f == 0 ? 1.0 : std::pow(1.0 - mol.phi_f, m - f));
            binom[static_cast<std::size_t>(f)] = pf == 0.0 ? 0.0 : std::exp(lc) * pf;
        }
        kd.mean_absorbed += m * ch.mass * survive;
        for (int j = -cs.j_max; j <= cs.j_max; ++j) {
            const auto idx = static_cast<std::size_t>(j + cs.j_max);
            const double p = std::norm(ch.coeffs[idx]) * survive;
            if (p == 0.0) continue;
            kd.discrete[idx] += p * binom[0];
            for (int f = 1; f <= f_top; ++f)
                smear_acc[idx * static_cast<std::size_t>(m_count) + static_cast<std::size_t>(f)] +=
                    p * binom[static_cast<std::size_t>(f)];
        }
    }
    for (int j = -cs.j_max; j <= cs.j_max; ++j) {
        const auto idx = static_cast<std::size_t>(j + cs.j_max);
        for (int f = 1; f < m_count; ++f) {
            const double p = smear_acc[idx * static_cast<std::size_t>(m_count) + static_cast<std::size_t>(f)];
            if (p > 0.0) kd.smear.push_back({j, f, p});
        }
    }
    kd.survival = kd.discrete_total() + kd.smear_total();
    return kd;
}

namespace {

// Irwin-Hall CDF of f uniforms on [0, 1] via F_n(t) = (t F_{n-1}(t) + (n - t) F_{n-1}(t - 1)) / n.
double irwin_hall_cdf(int f, double t) {
    if (t <= 0.0) return 0.0;
    if (t >= f) return 1.0;
    // row[i] = F_r(t - i), i = 0..f-r
    std::vector<double> row(static_cast<std::size_t>(f));
    for (int i = 0; i < f; ++i) row[static_cast<std::size_t>(i)] = std::clamp(t - i, 0.0, 1.0);
    for (int r = 2; r <= f; ++r)
        for (int i = 0; i + r <= f; ++i) {
            const double s = t - i;
            row[static_cast<std::size_t>(i)] =
                (s * row[static_cast<std::size_t>(i)] + (r - s) * row[static_cast<std::size_t>(i + 1)]) / r;
        }
    return row[0];
}

// Irwin-Hall density (cardinal B-spline) via M_r(t) = (t M_{r-1}(t) + (r - t) M_{r-1}(t - 1)) / (r - 1).
double irwin_hall_density(int f, double t) {
    if (t < 0.0 || t > f) return 0.0;
    std::vector<double> row(static_cast<std::size_t>(f));
    for (int i = 0; i < f; ++i) {
        const double s = t - i;
        row[static_cast<std::size_t>(i)] = (s >= 0.0 && s < 1.0) ? 1.0 : 0.0;
    }
    if (f == 1 && t == 1.0) row[0] = 1.0;
    for (int r = 2; r <= f; ++r)
        for (int i = 0; i + r <= f; ++i) {
            const double s = t - i;
            row[static_cast<std::size_t>(i)] =
                (s * row[static_cast<std::size_t>(i)] + (r - s) * row[static_cast<std::size_t>(i + 1)]) / (r - 1);
        }
    return row[0];
}

constexpr int kExactKernelMax = 64;

} // namespace

FluorescenceKernel::FluorescenceKernel(int f, double lambda_f) : f_{f} {
    if (f <= 0) throw DomainError{"fluorescence_kernel: photon count must be >= 1"};
    if (!(lambda_f > 0)) throw DomainError{"fluorescence_kernel: wavelength must be > 0"};
    recoil_ = constants::h / lambda_f;
}

double FluorescenceKernel::unit_density(int f, double u) {
    if (f > kExactKernelMax) {
        const double var = f / 3.0;
        return std::exp(-u * u / (2.0 * var)) / std::sqrt(2.0 * constants::pi * var);
    }
    return 0.5 * irwin_hall_density(f, (u + f) / 2.0);
}

double FluorescenceKernel::unit_cdf(int f, double u) {
    if (f > kExactKernelMax) return 0.5 * std::erfc(-u / std::sqrt(2.0 * f / 3.0));
    return irwin_hall_cdf(f, (u + f) / 2.0);
}

double FluorescenceKernel::density(double p) const { return unit_density(f_, p / recoil_) / recoil_; }

double FluorescenceKernel::cdf(double p) const { return unit_cdf(f_, p / recoil_); }

FluorescenceKernel fluorescence_kernel(int f, double lambda_f) { return FluorescenceKernel{f, lambda_f}; }

} // namespace duv
