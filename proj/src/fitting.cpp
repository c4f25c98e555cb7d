#include "duv/fitting.hpp"

#include "duv/errors.hpp"
#include "duv/imageproc.hpp"
#include "duv/parallel.hpp"

#include <Eigen/Dense>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>

namespace duv {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void check_bounds(const Bounds& b, const char* name) {
    if (!(std::isfinite(b.lo) && std::isfinite(b.hi) && b.lo < b.hi))
        throw ConfigError{std::string{"fit: invalid bounds for "} + name};
}

std::vector<double> linspace(double lo, double hi, int n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1);
    return v;
}

constexpr double kInvPhi = 0.6180339887498949;

// Golden-section search on [a, b] until the bracket is narrower than tol.
std::pair<double, double> golden_section(const std::function<double(double)>& f, double a, double b, double tol) {
    double c = b - kInvPhi * (b - a);
    double d = a + kInvPhi * (b - a);
    double fc = f(c), fd = f(d);
    while (b - a > tol) {
        if (fc <= fd) {
            b = d, d = c, fd = fc;
            c = b - kInvPhi * (b - a);
            fc = f(c);
        } else {
            a = c, c = d, fc = fd;
            d = a + kInvPhi * (b - a);
            fd = f(d);
        }
    }
    return fc <= fd ? std::pair{c, fc} : std::pair{d, fd};
}

struct SimplexResult {
    std::vector<double> x;
    double f = 0.0;
};

// Nelder-Mead (GSL nmsimplex2) until the simplex size drops below tol.
// Non-finite objective values are replaced by a large penalty.
SimplexResult simplex_minimize(const std::function<double(const std::vector<double>&)>& f, const std::vector<double>& x0,
                               const std::vector<double>& step, double tol, int max_iter) {
    gsl_set_error_handler_off();
    const std::size_t n = x0.size();
    struct Ctx {
        const std::function<double(const std::vector<double>&)>* f;
        std::vector<double> x;
    } ctx{&f, std::vector<double>(n)};
    gsl_multimin_function fn;
    fn.n = n;
    fn.params = &ctx;
    fn.f = [](const gsl_vector* v, void* p) {
        auto* c = static_cast<Ctx*>(p);
        for (std::size_t i = 0; i < c->x.size(); ++i) c->x[i] = gsl_vector_get(v, i);
        const double y = (*c->f)(c->x);
        return std::isfinite(y) ? y : 1e10;
    };
    const std::unique_ptr<gsl_vector, void (*)(gsl_vector*)> x{gsl_vector_alloc(n), gsl_vector_free};
    const std::unique_ptr<gsl_vector, void (*)(gsl_vector*)> s{gsl_vector_alloc(n), gsl_vector_free};
    for (std::size_t i = 0; i < n; ++i) gsl_vector_set(x.get(), i, x0[i]), gsl_vector_set(s.get(), i, step[i]);
    const std::unique_ptr<gsl_multimin_fminimizer, void (*)(gsl_multimin_fminimizer*)> m{
        gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, n), gsl_multimin_fminimizer_free};
    if (!m || gsl_multimin_fminimizer_set(m.get(), &fn, x.get(), s.get()) != GSL_SUCCESS)
        throw NumericalError{"simplex minimiser could not be initialised"};
    for (int it = 0; it < max_iter; ++it) {
        if (gsl_multimin_fminimizer_iterate(m.get()) != GSL_SUCCESS) break;
        if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(m.get()), tol) == GSL_SUCCESS) break;
    }
    SimplexResult r{std::vector<double>(n), gsl_multimin_fminimizer_minimum(m.get())};
    const gsl_vector* best = gsl_multimin_fminimizer_x(m.get());
    for (std::size_t i = 0; i < n; ++i) r.x[i] = gsl_vector_get(best, i);
    return r;
}

double value_at(const std::vector<double>& values, double index, bool log) {
    const auto n = static_cast<double>(values.size());
    index = std::clamp(index, 0.0, n - 1.0);
    auto lo = static_cast<std::size_t>(std::floor(index));
    if (lo + 1 >= values.size()) return values.back();
    const double t = index - static_cast<double>(lo);
    const double a = values[lo], b = values[lo + 1];
    if (log && a > 0.0 && b > 0.0) return std::exp(std::log(a) + t * (std::log(b) - std::log(a)));
    return a + t * (b - a);
}

} // namespace

std::vector<double> integrate_horizontal(const Image& img) {
    if (!img.normalized) throw DataError{"integrate_horizontal: image is not normalised"};
    std::vector<double> profile(img.height(), 0.0);
    for (std::size_t r = 0; r < img.height(); ++r) {
        const double* p = img.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < img.width(); ++c) s += p[c];
        profile[r] = s;
    }
    return profile;
}

FitStage1Result fit_stage1(const std::vector<double>& exp_profile, const ExperimentConfig& cfg,
                           const Bounds& y02, const Bounds& v_shift, const Stage1Options& opts) {
    check_bounds(y02, "y02");
    check_bounds(v_shift, "v_shift");
    if (v_shift.lo < 0.0) throw ConfigError{"fit: v_shift bounds must be >= 0"};
    if (opts.grid_y02 < 2 || opts.grid_v_shift < 2 || opts.sweeps < 0)
        throw ConfigError{"fit: stage-1 grids need at least 2 points per axis"};
    if (exp_profile.size() != cfg.detector.height_px)
        throw DataError{"fit_stage1: profile length " + std::to_string(exp_profile.size()) +
                        " differs from the detector height " + std::to_string(cfg.detector.height_px)};
    double total = 0.0;
    for (double v : exp_profile) total += v;
    if (std::abs(total - 1.0) > 1e-9) throw DataError{"fit_stage1: profile is not normalised"};

    FitStage1Result res;
    res.params.y02_bounds = y02;
    res.params.v_shift_bounds = v_shift;

    Quadrature quad = opts.quad;
    quad.normalize = true;
    quad.cache_orders = false;
    const auto objective = [&](double y, double v) {
        ++res.evaluations;
        ExperimentConfig c = cfg;
        c.geometry.slit2_height = y;
        c.source.v_shift = v;
        std::vector<double> sim;
        try {
            sim = synthesize_profile(c, quad);
        } catch (const NumericalError&) {
            return std::numeric_limits<double>::infinity();  // nothing reaches the detector
        }
        double sse = 0.0;
        for (std::size_t i = 0; i < sim.size(); ++i) sse += (sim[i] - exp_profile[i]) * (sim[i] - exp_profile[i]);
        return sse;
    };

    const auto [pmin, pmax] = std::minmax_element(exp_profile.begin(), exp_profile.end());
    if (*pmax - *pmin <= 1e-12 * std::abs(*pmax)) {
        res.degenerate = true;
        res.warnings.push_back("degenerate objective: the experimental profile is flat");
    }

    const auto ys = linspace(y02.lo, y02.hi, opts.grid_y02);
    const auto vs = linspace(v_shift.lo, v_shift.hi, opts.grid_v_shift);
    double best = std::numeric_limits<double>::infinity(), worst = -best;
    double by = ys[0], bv = vs[0];
    for (double y : ys)
        for (double v : vs) {
            const double f = objective(y, v);
            if (f < best) best = f, by = y, bv = v;
            if (std::isfinite(f)) worst = std::max(worst, f);
        }
    if (!std::isfinite(best)) throw NumericalError{"fit_stage1: no grid point produced a detector signal"};
    if (!res.degenerate && worst - best <= 1e-12 * std::max(worst, 1e-300)) {
        res.degenerate = true;
        res.warnings.push_back("degenerate objective: constant over the coarse grid");
    }

    const double hy = ys[1] - ys[0], hv = vs[1] - vs[0];
    for (int sweep = 0; sweep < opts.sweeps; ++sweep) {
        {
            const auto [x, f] = golden_section([&](double y) { return objective(y, bv); }, std::max(y02.lo, by - hy),
                                               std::min(y02.hi, by + hy), opts.tol_y02);
            if (f < best) best = f, by = x;
        }
        {
            const auto [x, f] = golden_section([&](double v) { return objective(by, v); }, std::max(v_shift.lo, bv - hv),
                                               std::min(v_shift.hi, bv + hv), opts.tol_v_shift);
            if (f < best) best = f, bv = x;
        }
    }
    // The objective has a narrow (y02, v_shift) valley; coordinate sweeps stall in it.
    if (opts.polish && !res.degenerate && best > 0.0) {
        const auto r = simplex_minimize(
            [&](const std::vector<double>& x) {
                const double y = x[0] * hy, v = x[1] * hv;
                if (!y02.contains(y) || !v_shift.contains(v)) return 1e10;
                return std::log(std::max(objective(y, v), std::numeric_limits<double>::min()));
            },
            {by / hy, bv / hv}, {0.5, 0.5}, 1e-5, opts.polish_max_iter);
        const double f = objective(r.x[0] * hy, r.x[1] * hv);
        if (f < best) best = f, by = r.x[0] * hy, bv = r.x[1] * hv;
    }
    res.params.y02 = by;
    res.params.v_shift = bv;
    res.objective = best;
    if (by - y02.lo <= opts.tol_y02 || y02.hi - by <= opts.tol_y02 || bv - v_shift.lo <= opts.tol_v_shift ||
        v_shift.hi - bv <= opts.tol_v_shift) {
        res.on_boundary = true;
        res.warnings.push_back("stage-1 optimum lies on a bound");
    }
    return res;
}

std::vector<double> GridAxis::values() const {
    if (n < 1) throw ConfigError{"grid axis needs at least one point"};
    if (!(std::isfinite(lo) && std::isfinite(hi) && lo <= hi)) throw ConfigError{"grid axis: invalid range"};
    if (log && !(lo > 0.0)) throw ConfigError{"grid axis: log spacing needs a positive lower bound"};
    if (!log && lo < 0.0) throw ConfigError{"grid axis: values must be >= 0"};
    std::vector<double> v;
    if (include_zero) v.push_back(0.0);
    for (int i = 0; i < n; ++i) {
        const double t = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
        v.push_back(log ? std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo))) : lo + t * (hi - lo));
    }
    return v;
}

void heatmap_argmin(HeatmapResult& hm) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < hm.ln_rss.size(); ++k)
        if (hm.ln_rss[k] < hm.ln_rss[best]) best = k;
    hm.tie = std::count(hm.ln_rss.begin(), hm.ln_rss.end(), hm.ln_rss[best]) > 1;
    hm.arg_alpha = best / hm.sigma.size();
    hm.arg_sigma = best % hm.sigma.size();
}

bool refine_quadratic(const HeatmapResult& hm, double& di, double& dj) {
    di = dj = 0.0;
    const std::size_t i0 = hm.arg_alpha, j0 = hm.arg_sigma;
    if (i0 == 0 || j0 == 0 || i0 + 1 >= hm.alpha.size() || j0 + 1 >= hm.sigma.size()) return false;
    Eigen::Matrix<double, 9, 6> A;
    Eigen::Matrix<double, 9, 1> z;
    int k = 0;
    for (int a = -1; a <= 1; ++a)
        for (int b = -1; b <= 1; ++b, ++k) {
            A.row(k) << 1.0, a, b, a * a, a * b, b * b;
            z(k) = hm.at(i0 + static_cast<std::size_t>(a + 1) - 1, j0 + static_cast<std::size_t>(b + 1) - 1);
        }
    const Eigen::Matrix<double, 6, 1> c = A.colPivHouseholderQr().solve(z);
    Eigen::Matrix2d H;
    H << 2.0 * c(3), c(4), c(4), 2.0 * c(5);
    const Eigen::Vector2d g{c(1), c(2)};
    if (!(H.determinant() > 0.0 && H(0, 0) > 0.0)) return false;
    const Eigen::Vector2d x = H.ldlt().solve(-g);
    if (!(std::abs(x(0)) <= 1.0 && std::abs(x(1)) <= 1.0)) return false;
    di = x(0);
    dj = x(1);
    return true;
}

ExperimentConfig apply_params(const ExperimentConfig& cfg, const FitStage1Params& s1, const FitStage2Params& s2) {
    ExperimentConfig c = cfg;
    c.geometry.slit2_height = s1.y02;
    c.source.v_shift = s1.v_shift;
    c.grating.height = s2.y0g;
    c.molecule.alpha_duv = s2.alpha;
    c.molecule.sigma_duv = s2.sigma;
    return c;
}

FitStage2Result fit_stage2(const Image& exp, const ExperimentConfig& cfg, const FitStage1Params& stage1,
                           const Stage2Options& opts) {
    if (opts.y0g.empty()) throw ConfigError{"fit: at least one y0g candidate is required"};
    if (!exp.normalized) throw DataError{"fit_stage2: experimental image is not normalised"};
    if (exp.width() != cfg.detector.width_px || exp.height() != cfg.detector.height_px)
        throw DataError{"fit_stage2: image is " + std::to_string(exp.width()) + "x" + std::to_string(exp.height()) +
                        " but the detector is " + std::to_string(cfg.detector.width_px) + "x" +
                        std::to_string(cfg.detector.height_px)};

    FitStage2Result res;
    HeatmapResult& hm = res.heatmap;
    hm.alpha = opts.alpha.values();
    hm.sigma = opts.sigma.values();
    const std::size_t na = hm.alpha.size(), ns = hm.sigma.size(), ny = opts.y0g.size();

    ExperimentConfig base = cfg;
    base.geometry.slit2_height = stage1.y02;
    base.source.v_shift = stage1.v_shift;
    Quadrature quad = opts.quad;
    quad.normalize = true;
    quad.threads = 1;
    const SynthesisPlan plan{base, quad};

    const auto cell_error = [&](double alpha, double sigma, double y0g, const std::string& where, const char* what) {
        return NumericalError{"fit_stage2: " + where + "alpha = " + fmt(alpha) + " C m^2/V, sigma = " + fmt(sigma) +
                              " m^2, y0g = " + fmt(y0g) + " m): " + what};
    };

    // RSS over the sub-grid ai x sj for each height; out[k * cells + cell].
    const auto scan = [&](const std::vector<double>& heights, const std::vector<std::size_t>& ai,
                          const std::vector<std::size_t>& sj) {
        const std::size_t cells = ai.size() * sj.size();
        std::vector<double> out(heights.size() * cells, 0.0);
        parallel_for(cells, opts.quad.threads, [&](std::size_t cell) {
            const std::size_t i = ai[cell / sj.size()], j = sj[cell % sj.size()];
            MoleculeSpec mol = base.molecule;
            mol.alpha_duv = hm.alpha[i];
            mol.sigma_duv = hm.sigma[j];
            GratingSpec grat = base.grating;
            grat.height = heights[0];
            try {
                const KickTable table = plan.kick_table(mol, grat);
                for (std::size_t k = 0; k < heights.size(); ++k) {
                    grat.height = heights[k];
                    const double r = duv::rss(plan.render(mol, grat, table), exp, opts.mask);
                    if (!std::isfinite(r)) throw NumericalError{"non-finite residual"};
                    out[k * cells + cell] = r;
                }
            } catch (const Error& e) {
                throw cell_error(hm.alpha[i], hm.sigma[j], grat.height,
                                 "grid cell (alpha index " + std::to_string(i) + ", sigma index " + std::to_string(j) +
                                     "; ",
                                 e.what());
            }
        });
        res.evaluations += static_cast<int>(heights.size() * cells);
        return out;
    };
    const auto strided = [&](std::size_t n) {
        std::vector<std::size_t> idx;
        const std::size_t step = std::max<std::size_t>(1, opts.coarse_stride);
        for (std::size_t i = 0; i < n; i += step) idx.push_back(i);
        if (idx.back() != n - 1) idx.push_back(n - 1);
        return idx;
    };
    const auto all = [](std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        return idx;
    };

    const auto ai = strided(na), sj = strided(ns);
    const std::size_t cells = ai.size() * sj.size();
    const auto coarse = scan(opts.y0g, ai, sj);
    std::size_t best_k = 0, best_cell = 0;
    double best = std::numeric_limits<double>::infinity();
    res.y0g_ln_rss.resize(ny);
    for (std::size_t k = 0; k < ny; ++k) {
        const auto first = coarse.begin() + static_cast<std::ptrdiff_t>(k * cells);
        const auto it = std::min_element(first, first + static_cast<std::ptrdiff_t>(cells));
        res.y0g_ln_rss[k] = ln_rss(*it);
        if (*it < best) best = *it, best_k = k, best_cell = static_cast<std::size_t>(it - first);
    }
    if (ny > 1 && (best_k == 0 || best_k + 1 == ny)) res.warnings.push_back("best y0g is at the end of the candidate list");

    double y0g = opts.y0g[best_k];
    std::vector<double> full;
    if (opts.polish) {
        const double a0 = hm.alpha[ai[best_cell / sj.size()]], s0 = hm.sigma[sj[best_cell % sj.size()]];
        if (a0 > 0.0 && s0 > 0.0) {
            // Scaled coordinates: one unit is a candidate gap or a grid cell.
            double dy = 1e-6;
            for (std::size_t k = 1; k < ny; ++k) dy = std::min(dy, std::abs(opts.y0g[k] - opts.y0g[k - 1]));
            if (!(dy > 0.0)) dy = 1e-6;
            const auto log_step = [](const std::vector<double>& v) {
                const auto first = std::find_if(v.begin(), v.end(), [](double x) { return x > 0.0; });
                const auto n = static_cast<double>(v.end() - first);
                return n > 1 ? std::log(v.back() / *first) / (n - 1) : 0.5;
            };
            const double da = log_step(hm.alpha), ds = log_step(hm.sigma);
            const double step = static_cast<double>(std::max<std::size_t>(1, opts.coarse_stride));
            MoleculeSpec mol = base.molecule;
            GratingSpec grat = base.grating;
            const auto r = simplex_minimize(
                [&](const std::vector<double>& x) {
                    grat.height = x[0] * dy;
                    mol.alpha_duv = std::exp(x[1] * da);
                    mol.sigma_duv = std::exp(x[2] * ds);
                    ++res.evaluations;
                    try {
                        return ln_rss(duv::rss(plan.render(mol, grat, plan.kick_table(mol, grat)), exp, opts.mask));
                    } catch (const Error& e) {
                        throw cell_error(mol.alpha_duv, mol.sigma_duv, grat.height, "polish (", e.what());
                    }
                },
                {y0g / dy, std::log(a0) / da, std::log(s0) / ds}, {0.5, step, step}, 1e-3, opts.polish_max_iter);
            res.polished = true;
            res.polish = {r.x[0] * dy, std::exp(r.x[1] * da), std::exp(r.x[2] * ds)};
            res.polish_ln_rss = r.f;
            y0g = res.polish.y0g;
            full = scan({y0g}, all(na), all(ns));
        } else {
            res.warnings.push_back("polish skipped: the candidate-scan argmin has a zero parameter");
        }
    }
    if (full.empty()) {
        if (ai.size() == na && sj.size() == ns)
            full.assign(coarse.begin() + static_cast<std::ptrdiff_t>(best_k * cells),
                        coarse.begin() + static_cast<std::ptrdiff_t>((best_k + 1) * cells));
        else
            full = scan({y0g}, all(na), all(ns));
    }

    hm.ln_rss.resize(na * ns);
    for (std::size_t c = 0; c < na * ns; ++c) hm.ln_rss[c] = ln_rss(full[c]);
    heatmap_argmin(hm);
    if (hm.tie) res.warnings.push_back("heatmap minimum is shared by several cells; lowest index kept");

    res.grid = {y0g, hm.alpha[hm.arg_alpha], hm.sigma[hm.arg_sigma]};
    res.rss = full[hm.arg_alpha * ns + hm.arg_sigma];
    res.ln_rss = hm.at(hm.arg_alpha, hm.arg_sigma);
    res.refined = res.grid;
    double di = 0.0, dj = 0.0;
    res.refinement_applied = refine_quadratic(hm, di, dj);
    if (res.refinement_applied) {
        res.refined.alpha = value_at(hm.alpha, static_cast<double>(hm.arg_alpha) + di, opts.alpha.log);
        res.refined.sigma = value_at(hm.sigma, static_cast<double>(hm.arg_sigma) + dj, opts.sigma.log);
    } else {
        res.warnings.push_back("quadratic refinement skipped (edge of grid or no interior minimum)");
    }
    return res;
}

void write_heatmap_csv(const std::string& path, const HeatmapResult& hm) {
    std::ofstream out{path};
    if (!out) throw DataError{"cannot write '" + path + "'"};
    out << "alpha\\sigma";
    for (double s : hm.sigma) out << ',' << fmt(s);
    out << '\n';
    for (std::size_t i = 0; i < hm.alpha.size(); ++i) {
        out << fmt(hm.alpha[i]);
        for (std::size_t j = 0; j < hm.sigma.size(); ++j) out << ',' << fmt(hm.at(i, j));
        out << '\n';
    }
    if (!out) throw DataError{"failed writing '" + path + "'"};
}

std::string heatmap_report(const FitStage2Result& r) {
    std::ostringstream os;
    const auto& hm = r.heatmap;
    os << "argmin_alpha_index = " << hm.arg_alpha << '\n'
       << "argmin_sigma_index = " << hm.arg_sigma << '\n'
       << "argmin_tie = " << (hm.tie ? "true" : "false") << '\n'
       << "y0g_m = " << fmt(r.grid.y0g) << '\n'
       << "alpha_Cm2pV = " << fmt(r.grid.alpha) << '\n'
       << "sigma_m2 = " << fmt(r.grid.sigma) << '\n'
       << "rss = " << fmt(r.rss) << '\n'
       << "ln_rss = " << fmt(r.ln_rss) << '\n'
       << "refinement_applied = " << (r.refinement_applied ? "true" : "false") << '\n'
       << "refined_alpha_Cm2pV = " << fmt(r.refined.alpha) << '\n'
       << "refined_sigma_m2 = " << fmt(r.refined.sigma) << '\n';
    if (r.polished)
        os << "polish_y0g_m = " << fmt(r.polish.y0g) << '\n'
           << "polish_alpha_Cm2pV = " << fmt(r.polish.alpha) << '\n'
           << "polish_sigma_m2 = " << fmt(r.polish.sigma) << '\n'
           << "polish_ln_rss = " << fmt(r.polish_ln_rss) << '\n';
    os << "evaluations = " << r.evaluations << '\n';
    for (const auto& w : r.warnings) os << "warning = " << w << '\n';
    return os.str();
}

} // namespace duv
