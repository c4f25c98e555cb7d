#include "doctest.h"

#include "duv/constants.hpp"
#include "duv/errors.hpp"
#include "duv/fitting.hpp"
#include "duv/imageproc.hpp"
#include "support.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

using namespace duv;

namespace {

Quadrature coarse() {
    Quadrature q;
    q.source_points = 32;
    q.angles = 8;
    q.velocities = 16;
    q.kick_nodes = 32;
    return q;
}

const double A = constants::polarizability_volume_to_si;

} // namespace

TEST_CASE("horizontal integration") {
    Image u{7, 5, 1.0, 1.0 / 35.0};
    u.normalized = true;
    for (double v : integrate_horizontal(u)) CHECK(v == doctest::Approx(0.2));
    Image row{4, 6};
    for (std::size_t c = 0; c < 4; ++c) row(c, 2) = 0.25;
    row.normalized = true;
    const auto p = integrate_horizontal(row);
    for (std::size_t r = 0; r < 6; ++r) CHECK(p[r] == doctest::Approx(r == 2 ? 1.0 : 0.0));
    row.normalized = false;
    CHECK_THROWS_AS(integrate_horizontal(row), DataError);
}

TEST_CASE("monochromatic profile is centred on the ray through both aperture centres") {
    auto cfg = testing::load("pch2");
    auto q = coarse();
    q.fixed_velocity = 220.0;
    const auto prof = integrate_horizontal(synthesize_image(cfg, q));
    double m = 0.0;
    for (std::size_t r = 0; r < prof.size(); ++r) m += r * prof[r];

    const auto st = z_stations(cfg.geometry);
    const double v = 220.0, g = cfg.environment.g + 2.0 * cfg.environment.omega_x * v;
    const double t2 = st.slit2 / v, ts = st.screen / v;
    const double vy0 = (cfg.geometry.slit2_height - 0.5 * g * t2 * t2) / t2;
    const double ys = vy0 * ts + 0.5 * g * ts * ts;
    const double top = cfg.detector.center_y + cfg.detector.height_px * cfg.detector.pixel_pitch / 2.0;
    CHECK(std::abs(m + 0.5 - (top - ys) / cfg.detector.pixel_pitch) < 1.0);
}

TEST_CASE("stage 1 recovers the slit height and velocity shift of a synthetic profile") {
    auto cfg = testing::small_pch2(201, 1201);
    const auto q = coarse();
    const auto prof = integrate_horizontal(synthesize_image(cfg, q));
    Stage1Options o;
    o.quad = q;
    o.grid_y02 = 5;
    o.grid_v_shift = 5;
    const Bounds by{-20.5e-6, -12.5e-6}, bv{55.0, 95.0};
    const auto r = fit_stage1(prof, cfg, by, bv, o);
    CHECK(std::abs(r.params.y02 - cfg.geometry.slit2_height) < 2e-6);  // one grid spacing
    CHECK(std::abs(r.params.v_shift - cfg.source.v_shift) < 10.0);
    CHECK_FALSE(r.on_boundary);
    CHECK_FALSE(r.degenerate);
    CHECK(r.objective < 1e-6);
    CHECK(r.evaluations > 25);
}

TEST_CASE("stage 1 polish closes the gap left by the coordinate sweeps") {
    auto cfg = testing::small_pch2(201, 1201);
    const auto q = coarse();
    const auto prof = integrate_horizontal(synthesize_image(cfg, q));
    Stage1Options o;
    o.quad = q;
    o.polish = false;
    const Bounds by{-22e-6, -11e-6}, bv{50.0, 100.0};
    const auto swept = fit_stage1(prof, cfg, by, bv, o);
    o.polish = true;
    const auto polished = fit_stage1(prof, cfg, by, bv, o);
    CHECK(polished.objective <= swept.objective);
    CHECK(polished.evaluations > swept.evaluations);
    CHECK(std::abs(polished.params.y02 - cfg.geometry.slit2_height) < 0.01e-6);
    CHECK(std::abs(polished.params.v_shift - cfg.source.v_shift) < 0.05);
}

TEST_CASE("stage 1 flags flat profiles and bounds that exclude the optimum") {
    auto cfg = testing::small_pch2(101, 601);
    const auto q = coarse();
    Stage1Options o;
    o.quad = q;
    o.grid_y02 = 3;
    o.grid_v_shift = 3;
    o.sweeps = 0;
    const std::vector<double> flat(601, 1.0 / 601);
    const auto d = fit_stage1(flat, cfg, {-20e-6, -13e-6}, {60.0, 90.0}, o);
    CHECK(d.degenerate);
    CHECK_FALSE(d.warnings.empty());

    const auto prof = integrate_horizontal(synthesize_image(cfg, q));
    o.sweeps = 1;
    const auto b = fit_stage1(prof, cfg, {-14e-6, -12e-6}, {60.0, 90.0}, o);
    CHECK(b.on_boundary);
    CHECK(b.params.y02 == doctest::Approx(-14e-6).epsilon(0.01));

    CHECK_THROWS_AS(fit_stage1(std::vector<double>(600, 1.0 / 600), cfg, {-20e-6, -13e-6}, {60.0, 90.0}, o), DataError);
    CHECK_THROWS_AS(fit_stage1(std::vector<double>(601, 1.0), cfg, {-20e-6, -13e-6}, {60.0, 90.0}, o), DataError);
}

TEST_CASE("grid axes") {
    const auto lin = GridAxis{1.0, 3.0, 3, false, false}.values();
    CHECK(lin == std::vector<double>{1.0, 2.0, 3.0});
    const auto lg = GridAxis{1e-21, 1e-19, 3, true, true}.values();
    REQUIRE(lg.size() == 4);
    CHECK(lg[0] == 0.0);
    CHECK(lg[2] == doctest::Approx(1e-20));
    CHECK_THROWS_AS(GridAxis({0.0, 1.0, 3, true, false}).values(), ConfigError);
    CHECK_THROWS_AS(GridAxis({2.0, 1.0, 3, false, false}).values(), ConfigError);
    CHECK_THROWS_AS(GridAxis({1.0, 2.0, 0, false, false}).values(), ConfigError);
}

TEST_CASE("heatmap argmin breaks ties by the lowest index") {
    HeatmapResult hm;
    hm.alpha = {1, 2, 3};
    hm.sigma = {1, 2};
    hm.ln_rss.assign(6, -3.0);
    heatmap_argmin(hm);
    CHECK(hm.arg_alpha == 0);
    CHECK(hm.arg_sigma == 0);
    CHECK(hm.tie);
    hm.ln_rss[3] = -4.0;
    heatmap_argmin(hm);
    CHECK(hm.arg_alpha == 1);
    CHECK(hm.arg_sigma == 1);
    CHECK_FALSE(hm.tie);
}

TEST_CASE("quadratic refinement finds the vertex of a paraboloid") {
    HeatmapResult hm;
    hm.alpha = {0, 1, 2, 3, 4};
    hm.sigma = {0, 1, 2, 3, 4};
    const double x0 = 2.3, y0 = 1.8;
    for (double a : hm.alpha)
        for (double s : hm.sigma)
            hm.ln_rss.push_back(1.5 * (a - x0) * (a - x0) + 0.4 * (a - x0) * (s - y0) + 2.0 * (s - y0) * (s - y0) - 7.0);
    heatmap_argmin(hm);
    double di = 0.0, dj = 0.0;
    REQUIRE(refine_quadratic(hm, di, dj));
    CHECK(hm.arg_alpha + di == doctest::Approx(x0).epsilon(1e-10));
    CHECK(hm.arg_sigma + dj == doctest::Approx(y0).epsilon(1e-10));

    for (auto& v : hm.ln_rss) v = -v;  // maximum, not a minimum
    heatmap_argmin(hm);
    CHECK_FALSE(refine_quadratic(hm, di, dj));
    CHECK(di == 0.0);
}

TEST_CASE("stage 2 on an absorption-free target picks the sigma = 0 column") {
    auto cfg = testing::small_pch2(301, 1201);
    cfg.molecule.sigma_duv = 0.0;
    const auto q = coarse();
    const auto exp = synthesize_image(cfg, q);
    FitStage1Params s1{cfg.geometry.slit2_height, cfg.source.v_shift, {}, {}};
    Stage2Options o;
    o.quad = q;
    o.y0g = {cfg.grating.height};
    o.alpha = {cfg.molecule.alpha_duv / 2.0, cfg.molecule.alpha_duv * 2.0, 3, true, false};
    o.sigma = {2e-21, 2e-20, 3, true, true};
    const auto r = fit_stage2(exp, cfg, s1, o);
    CHECK(r.heatmap.arg_sigma == 0);
    CHECK(r.grid.sigma == 0.0);
    CHECK(r.heatmap.arg_alpha == 1);
    CHECK(r.rss < 1e-20);
    for (double v : r.heatmap.ln_rss) CHECK(std::isfinite(v));

    // Objective identity: recompute the argmin cell independently.
    const auto sim = synthesize_image(apply_params(cfg, s1, r.grid), q);
    CHECK(std::abs(r.ln_rss - ln_rss(rss(sim, exp))) < 1e-12);
}

TEST_CASE("stage 2 heatmap and report") {
    auto cfg = testing::small_pch2(301, 1201);
    auto q = coarse();
    const auto exp = synthesize_image(cfg, q);
    FitStage1Params s1{cfg.geometry.slit2_height, cfg.source.v_shift, {}, {}};
    Stage2Options o;
    o.quad = q;
    o.quad.threads = 3;
    o.y0g = {cfg.grating.height - 2e-6, cfg.grating.height, cfg.grating.height + 2e-6};
    o.alpha = {0.4 * A, 3.6 * A, 5, true, false};
    o.sigma = {8.5e-21 / 3.0, 8.5e-21 * 3.0, 5, true, false};
    const auto r = fit_stage2(exp, cfg, s1, o);
    CHECK(r.grid.y0g == cfg.grating.height);
    CHECK(r.heatmap.arg_alpha == 2);  // 1.2 is the middle node
    CHECK(r.heatmap.arg_sigma == 2);
    CHECK(r.refinement_applied);
    CHECK(std::abs(std::log(r.refined.alpha / cfg.molecule.alpha_duv)) < 0.25 * std::log(3.0));
    const auto sim = synthesize_image(apply_params(cfg, s1, r.grid), q);
    CHECK(std::abs(r.ln_rss - ln_rss(rss(sim, exp))) < 1e-12);

    const std::string path = "heatmap_test.csv";
    write_heatmap_csv(path, r.heatmap);
    std::ifstream in{path};
    std::string header;
    std::getline(in, header);
    CHECK(header.rfind("alpha\\sigma,", 0) == 0);
    int rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    CHECK(rows == 5);
    std::remove(path.c_str());
    const auto text = heatmap_report(r);
    CHECK(text.find("argmin_alpha_index = 2") != std::string::npos);
    CHECK(text.find("refinement_applied = true") != std::string::npos);

    o.mask = nullptr;
    Image unnormalised = exp;
    unnormalised.normalized = false;
    CHECK_THROWS_AS(fit_stage2(unnormalised, cfg, s1, o), DataError);
    o.y0g.clear();
    CHECK_THROWS_AS(fit_stage2(exp, cfg, s1, o), ConfigError);
}

TEST_CASE("stage 2 polish finds a grating height between the candidates") {
    auto cfg = testing::small_pch2(301, 1201);
    const auto q = coarse();
    const auto exp = synthesize_image(cfg, q);
    const FitStage1Params s1{cfg.geometry.slit2_height, cfg.source.v_shift, {}, {}};
    Stage2Options o;
    o.quad = q;
    o.y0g = {cfg.grating.height - 1.5e-6, cfg.grating.height + 1.5e-6};
    o.alpha = {0.4 * A, 3.6 * A, 5, true, false};
    o.sigma = {8.5e-21 / 3.0, 8.5e-21 * 3.0, 5, true, false};
    o.coarse_stride = 2;
    o.polish = true;
    const auto r = fit_stage2(exp, cfg, s1, o);
    REQUIRE(r.polished);
    CHECK(std::abs(r.polish.y0g - cfg.grating.height) < 0.05e-6);
    CHECK(r.polish.sigma == doctest::Approx(cfg.molecule.sigma_duv).epsilon(0.01));
    CHECK(r.polish.alpha == doctest::Approx(cfg.molecule.alpha_duv).epsilon(0.1));
    CHECK(r.grid.y0g == r.polish.y0g);
    CHECK(r.heatmap.ln_rss.size() == 25);
    CHECK(r.y0g_ln_rss.size() == 2);
    CHECK(r.evaluations > 2 * 9 + 25);  // 3x3 strided candidate scan, polish, full rescan
    const auto sim = synthesize_image(apply_params(cfg, s1, r.grid), q);
    CHECK(std::abs(r.ln_rss - ln_rss(rss(sim, exp))) < 1e-12);
    CHECK(heatmap_report(r).find("polish_y0g_m = ") != std::string::npos);
}

TEST_CASE("stage 2 names the grid cell that failed") {
    auto cfg = testing::small_pch2(101, 601);
    auto q = coarse();
    q.channels.m_max_cap = 8;
    cfg.molecule.sigma_duv = 1e-22;
    const auto exp = synthesize_image(cfg, q);
    Stage2Options o;
    o.quad = q;
    o.y0g = {cfg.grating.height};
    o.alpha = {A, A, 1, true, false};
    o.sigma = {1e-22, 1e-19, 2, true, false};
    try {
        fit_stage2(exp, cfg, {cfg.geometry.slit2_height, cfg.source.v_shift, {}, {}}, o);
        FAIL("expected an error");
    } catch (const NumericalError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("alpha index 0, sigma index 1") != std::string::npos);
    }
}

TEST_CASE("the sign of the polarisability does not change the image") {
    auto cfg = testing::small_pch2(301, 401);
    const auto q = coarse();
    const auto plus = synthesize_image(cfg, q);
    set_config_value(cfg, "molecule.alpha", "-1.2 A3_4pie0");
    CHECK(cfg.molecule.alpha_duv > 0.0);
    CHECK(synthesize_image(cfg, q).data() == plus.data());

    // Also when a negative value reaches the physics directly.
    const SynthesisPlan plan{cfg, q};
    auto mol = cfg.molecule;
    const auto a = plan.render(mol, cfg.grating);
    mol.alpha_duv = -mol.alpha_duv;
    const auto b = plan.render(mol, cfg.grating);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    CHECK(worst <= 1e-12 * a.max());
}
