#include "duv/cli.hpp"

#include "duv/beamline.hpp"
#include "duv/config.hpp"
#include "duv/constants.hpp"
#include "duv/errors.hpp"
#include "duv/fitting.hpp"
#include "duv/grating.hpp"
#include "duv/imageproc.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#ifndef DUV_VERSION
#define DUV_VERSION "0.0.0"
#endif

namespace duv {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string RunManifest::to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["config"] = config_path;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    nlohmann::ordered_json q = nlohmann::ordered_json::object();
    for (const auto& [k, v] : quadrature) q[k] = v;
    j["quadrature"] = q;
    j["tool_version"] = tool_version;
    j["wall_time_s"] = wall_time;
    return j.dump(2) + "\n";
}

std::vector<double> lower_trace(const Image& img, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw DomainError{"trace fraction must lie in (0, 1]"};
    const auto rows = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(img.height()) - 1e-9));
    std::vector<double> trace(img.width(), 0.0);
    for (std::size_t r = img.height() - rows; r < img.height(); ++r) {
        const double* p = img.row(r);
        for (std::size_t c = 0; c < img.width(); ++c) trace[c] += p[c];
    }
    return trace;
}

namespace {

PeakStats stats(const std::vector<double>& t, long lo, long hi, int order, double total) {
    PeakStats s;
    s.order = order;
    double m = 0.0, m1 = 0.0, m2 = 0.0;
    for (long c = std::max(0L, lo); c <= std::min(hi, static_cast<long>(t.size()) - 1); ++c) {
        const double w = t[static_cast<std::size_t>(c)];
        m += w;
        m1 += w * static_cast<double>(c);
        m2 += w * static_cast<double>(c) * static_cast<double>(c);
    }
    s.mass = total != 0.0 ? m / total : 0.0;
    if (m != 0.0) {
        s.center_px = m1 / m;
        s.width_px = std::sqrt(std::max(0.0, m2 / m - s.center_px * s.center_px));
    } else {
        s.center_px = 0.5 * static_cast<double>(lo + hi);
    }
    return s;
}

} // namespace

std::vector<PeakStats> peak_table(const std::vector<double>& trace, double spacing) {
    std::vector<PeakStats> out;
    double total = 0.0, m1 = 0.0;
    for (std::size_t c = 0; c < trace.size(); ++c) total += trace[c], m1 += trace[c] * static_cast<double>(c);
    if (trace.empty() || !(total > 0.0)) return out;
    const double centroid = m1 / total;

    if (spacing > 0.0) {
        const auto n_lo = static_cast<int>(std::floor((-0.5 - centroid) / spacing + 0.5));
        const auto n_hi = static_cast<int>(std::ceil((static_cast<double>(trace.size()) - 0.5 - centroid) / spacing - 0.5));
        for (int n = n_lo; n <= n_hi; ++n) {
            const double a = centroid + (n - 0.5) * spacing, b = centroid + (n + 0.5) * spacing;
            const auto lo = static_cast<long>(std::ceil(a - 1e-12));
            auto hi = static_cast<long>(std::ceil(b - 1e-12)) - 1;
            if (hi < lo) continue;
            const auto s = stats(trace, lo, hi, n, total);
            if (s.mass > 0.0) out.push_back(s);
        }
        return out;
    }

    const double peak = *std::max_element(trace.begin(), trace.end());
    std::vector<long> maxima;
    for (std::size_t c = 0; c < trace.size(); ++c) {
        const double left = c > 0 ? trace[c - 1] : -INFINITY;
        const double right = c + 1 < trace.size() ? trace[c + 1] : -INFINITY;
        if (trace[c] >= 1e-3 * peak && trace[c] > left && trace[c] >= right) maxima.push_back(static_cast<long>(c));
    }
    if (maxima.empty()) return out;
    std::vector<long> edges{0};
    for (std::size_t k = 0; k + 1 < maxima.size(); ++k) {
        long cut = maxima[k];
        for (long c = maxima[k]; c <= maxima[k + 1]; ++c)
            if (trace[static_cast<std::size_t>(c)] < trace[static_cast<std::size_t>(cut)]) cut = c;
        edges.push_back(cut);
    }
    edges.push_back(static_cast<long>(trace.size()));
    std::size_t zero = 0;
    for (std::size_t k = 1; k < maxima.size(); ++k)
        if (std::abs(static_cast<double>(maxima[k]) - centroid) < std::abs(static_cast<double>(maxima[zero]) - centroid))
            zero = k;
    for (std::size_t k = 0; k < maxima.size(); ++k)
        out.push_back(stats(trace, edges[k], edges[k + 1] - 1, static_cast<int>(k) - static_cast<int>(zero), total));
    return out;
}

std::string CompareReport::to_text() const {
    std::ostringstream os;
    os << "rss = " << fmt(rss) << "\n";
    for (const auto& [name, peaks] : {std::pair{"a", &peaks_a}, std::pair{"b", &peaks_b}}) {
        os << "\n[peaks_" << name << "]\norder,center_px,width_px,mass\n";
        for (const auto& p : *peaks)
            os << p.order << ',' << fmt(p.center_px) << ',' << fmt(p.width_px) << ',' << fmt(p.mass) << '\n';
    }
    return os.str();
}

CompareReport compare_images(const Image& a, const Image& b, double fraction, double spacing) {
    if (a.width() != b.width() || a.height() != b.height())
        throw DataError{"compare: image dimensions differ (" + std::to_string(a.width()) + "x" +
                        std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                        std::to_string(b.height()) + ")"};
    const Image na = a.normalized ? a : normalize_unity(a);
    const Image nb = b.normalized ? b : normalize_unity(b);
    CompareReport r;
    r.rss = rss(na, nb);
    r.peaks_a = peak_table(lower_trace(na, fraction), spacing);
    r.peaks_b = peak_table(lower_trace(nb, fraction), spacing);
    return r;
}

namespace {

using clk = std::chrono::steady_clock;

class JsonLog {
public:
    void open(const std::string& path) {
        if (path.empty()) return;
        out_.open(path, std::ios::app);
        if (!out_) throw DataError{"cannot open log file '" + path + "'"};
    }
    void event(const std::string& name, nlohmann::ordered_json fields = nlohmann::ordered_json::object()) {
        if (!out_.is_open()) return;
        nlohmann::ordered_json j;
        j["event"] = name;
        for (auto& [k, v] : fields.items()) j[k] = v;
        out_ << j.dump() << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

struct QuadFlags {
    int source_points = 128, angles = 16, velocities = 64, kick_nodes = 96, threads = 1;
    std::string fixed_velocity;
    bool no_slit2 = false, no_acceptance = false;

    void add(CLI::App* app) {
        app->add_option("--source-points", source_points, "samples across the first limiting aperture")->capture_default_str();
        app->add_option("--angles", angles, "samples across the second limiting aperture")->capture_default_str();
        app->add_option("--velocities", velocities, "velocity quadrature nodes")->capture_default_str();
        app->add_option("--kick-nodes", kick_nodes, "kick-table nodes in G(y)/v_z")->capture_default_str();
        app->add_option("--threads", threads, "worker threads")->capture_default_str();
        app->add_option("--fixed-velocity", fixed_velocity, "monochromatic beam, e.g. '150 mps'");
        app->add_flag("--no-slit2", no_slit2, "remove the velocity-selection slit");
        app->add_flag("--no-acceptance", no_acceptance, "keep kicks beyond the detector acceptance");
    }
    Quadrature build() const {
        Quadrature q;
        q.source_points = source_points;
        q.angles = angles;
        q.velocities = velocities;
        q.kick_nodes = kick_nodes;
        q.threads = threads;
        if (!fixed_velocity.empty()) q.fixed_velocity = parse_quantity(fixed_velocity, "velocity");
        q.use_slit2 = !no_slit2;
        q.apply_acceptance = !no_acceptance;
        q.check();
        return q;
    }
    static std::vector<std::pair<std::string, double>> describe(const Quadrature& q) {
        return {{"source_points", q.source_points}, {"angles", q.angles}, {"velocities", q.velocities},
                {"kick_nodes", q.kick_nodes},       {"threads", q.threads}, {"fixed_velocity", q.fixed_velocity},
                {"use_slit2", q.use_slit2 ? 1 : 0}, {"apply_acceptance", q.apply_acceptance ? 1 : 0}};
    }
};

ExperimentConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
    ExperimentConfig cfg = load_config(path);
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError{"--set expects key=value, got '" + s + "'"};
        set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    return cfg;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::stringstream ss{s};
    std::string item;
    while (std::getline(ss, item, sep)) parts.push_back(item);
    return parts;
}

Bounds parse_range(const std::string& s, std::string_view dim, const char* name) {
    const auto p = split(s, ',');
    if (p.size() != 2) throw ConfigError{std::string{name} + ": expected 'lo,hi'"};
    return {parse_quantity(p[0], dim), parse_quantity(p[1], dim)};
}

Rect parse_rect(const std::string& s, const char* name) {
    const auto p = split(s, ',');
    if (p.size() != 4) throw ConfigError{std::string{name} + ": expected 'x,y,width,height'"};
    Rect r;
    std::size_t* f[] = {&r.x, &r.y, &r.width, &r.height};
    for (std::size_t i = 0; i < 4; ++i) {
        const double v = parse_quantity(p[i], "");
        if (v < 0 || v != std::floor(v)) throw ConfigError{std::string{name} + ": entries must be non-negative integers"};
        *f[i] = static_cast<std::size_t>(v);
    }
    return r;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out{path};
    if (!out) throw DataError{"cannot write '" + path + "'"};
    out << text;
    if (!out) throw DataError{"failed writing '" + path + "'"};
}

void ensure_parent(const std::string& prefix) {
    const auto parent = std::filesystem::path{prefix}.parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

struct Run {
    RunManifest manifest;
    JsonLog log;
    clk::time_point start = clk::now();

    void output(const std::string& path) {
        manifest.outputs.push_back(path);
        log.event("output", {{"path", path}});
    }
    void finish(const std::string& manifest_path) {
        manifest.wall_time = std::chrono::duration<double>(clk::now() - start).count();
        manifest.outputs.push_back(manifest_path);
        write_text(manifest_path, manifest.to_json());
        log.event("output", {{"path", manifest_path}});
    }
};

} // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Deep-UV standing-wave diffraction: simulation, preprocessing and fitting"};
    app.require_subcommand(1);
    app.set_version_flag("--version", DUV_VERSION);
    std::string log_path;
    app.add_option("--log-json", log_path, "append JSON-lines progress events to this file");

    // simulate
    auto* sim = app.add_subcommand("simulate", "synthesize a detector image (P5 + CSV + manifest)");
    std::string sim_config, sim_out;
    std::vector<std::string> sim_sets;
    QuadFlags sim_q;
    sim->add_option("config", sim_config, "experiment config")->required();
    sim->add_option("-o,--out", sim_out, "output prefix")->required();
    sim->add_option("--set", sim_sets, "override a config key, e.g. grating.power=0W");
    sim_q.add(sim);

    // preprocess
    auto* pre = app.add_subcommand("preprocess", "background, despike, plane, rotation and crop");
    std::string pre_raw, pre_out, pre_mask, pre_plane, pre_rect, pre_pattern, pre_theta = "0.4 deg";
    std::vector<std::string> pre_brights;
    double pre_q = 1e-5;
    pre->add_option("raw", pre_raw, "raw (dark-subtracted) image, .pgm or .csv")->required();
    pre->add_option("--bright", pre_brights, "bright frame(s) taken before and after deposition")->expected(0, 2);
    pre->add_option("--mask", pre_mask, "contamination mask (P5, 0 = remove)");
    pre->add_option("--plane-mask", pre_plane, "background region for the plane fit (P5, nonzero = use)");
    pre->add_option("--pattern", pre_pattern, "pattern region x,y,w,h excluded from the plane fit");
    pre->add_option("--theta", pre_theta, "rotation angle")->capture_default_str();
    pre->add_option("--rect", pre_rect, "crop rectangle x,y,w,h");
    pre->add_option("--despike", pre_q, "winsorising quantile")->capture_default_str();
    pre->add_option("-o,--out", pre_out, "output prefix")->required();

    // fit
    auto* fit = app.add_subcommand("fit", "two-stage fit and ln RSS heatmap");
    std::string fit_config, fit_image, fit_out, fit_mask;
    std::string fit_y02 = "-25um,-8um", fit_vs = "40mps,120mps", fit_y0g, fit_alpha, fit_sigma;
    int fit_smooth = -1, fit_grid1 = 9, fit_sweeps = 2, fit_na = 21, fit_ns = 21, fit_stride = 1;
    bool fit_polish = false, fit_sigma_zero = false, fit_alpha_lin = false, fit_sigma_lin = false, fit_manual = false, fit_skip1 = false;
    std::vector<std::string> fit_sets;
    QuadFlags fit_q;
    fit->add_option("config", fit_config, "experiment config (initial values)")->required();
    fit->add_option("image", fit_image, "preprocessed experimental image")->required();
    fit->add_option("-o,--out", fit_out, "output prefix")->required();
    fit->add_option("--smooth", fit_smooth, "vertical boxcar half-width in rows (0 = none)")->required();
    fit->add_option("--mask", fit_mask, "pixels to ignore (P5, 0 = ignore)");
    fit->add_option("--y02", fit_y02, "stage-1 bounds for the slit height lo,hi")->capture_default_str();
    fit->add_option("--v-shift", fit_vs, "stage-1 bounds for the velocity shift lo,hi")->capture_default_str();
    fit->add_option("--grid1", fit_grid1, "stage-1 coarse grid points per axis")->capture_default_str();
    fit->add_option("--sweeps", fit_sweeps, "stage-1 coordinate sweeps")->capture_default_str();
    fit->add_option("--y0g", fit_y0g, "grating height candidates, comma separated (default: config value)");
    fit->add_option("--alpha", fit_alpha, "|alpha| range lo,hi")->required();
    fit->add_option("--sigma", fit_sigma, "sigma range lo,hi")->required();
    fit->add_option("--alpha-n", fit_na, "alpha grid points")->capture_default_str();
    fit->add_option("--sigma-n", fit_ns, "sigma grid points")->capture_default_str();
    fit->add_flag("--polish", fit_polish, "simplex polish of (y0g, alpha, sigma), then rescan at the polished y0g");
    fit->add_option("--coarse-stride", fit_stride, "grid stride of the y0g candidate scan")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    fit->add_flag("--sigma-zero", fit_sigma_zero, "prepend sigma = 0 to the grid");
    fit->add_flag("--alpha-linear", fit_alpha_lin, "linear alpha spacing (default log)");
    fit->add_flag("--sigma-linear", fit_sigma_lin, "linear sigma spacing (default log)");
    fit->add_flag("--skip-stage1", fit_skip1, "use y02 and v_shift from the config");
    fit->add_flag("--manual-params", fit_manual, "no optimisation: simulate the config and report its RSS");
    fit->add_option("--set", fit_sets, "override a config key");
    fit_q.add(fit);

    // compare
    auto* cmp = app.add_subcommand("compare", "RSS and per-order peak table of two images");
    std::string cmp_a, cmp_b, cmp_out;
    double cmp_fraction = 2.0 / 3.0, cmp_spacing = 0.0;
    cmp->add_option("a", cmp_a, "first image")->required();
    cmp->add_option("b", cmp_b, "second image")->required();
    cmp->add_option("-o,--out", cmp_out, "report path (default stdout)");
    cmp->add_option("--fraction", cmp_fraction, "lower fraction of the rows used for the trace")->capture_default_str();
    cmp->add_option("--order-spacing", cmp_spacing, "order spacing in pixels (default: split at minima)");

    // dump-kicks
    auto* dk = app.add_subcommand("dump-kicks", "kick distribution as CSV (j,f,probability)");
    std::string dk_config, dk_v, dk_y, dk_out;
    std::vector<std::string> dk_sets;
    dk->add_option("config", dk_config, "experiment config")->required();
    dk->add_option("--velocity", dk_v, "forward velocity, e.g. '150 mps'")->required();
    dk->add_option("--y", dk_y, "height at the grating (default: grating height)");
    dk->add_option("-o,--out", dk_out, "CSV path (default stdout)");
    dk->add_option("--set", dk_sets, "override a config key");

    // dump-config
    auto* dc = app.add_subcommand("dump-config", "print the config in canonical SI units");
    std::string dc_config, dc_out;
    std::vector<std::string> dc_sets;
    dc->add_option("config", dc_config, "experiment config")->required();
    dc->add_option("-o,--out", dc_out, "output path (default stdout)");
    dc->add_option("--set", dc_sets, "override a config key");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    Run run;
    run.manifest.tool_version = DUV_VERSION;
    try {
        run.log.open(log_path);
        const std::string name = app.get_subcommands().front()->get_name();
        run.manifest.command = name;
        run.log.event("start", {{"command", name}});

        if (*sim) {
            const auto cfg = load_with_overrides(sim_config, sim_sets);
            const auto quad = sim_q.build();
            run.manifest.config_path = sim_config;
            run.manifest.inputs = {sim_config};
            run.manifest.quadrature = QuadFlags::describe(quad);
            ensure_parent(sim_out);
            SynthesisDiagnostics diag;
            const auto img = synthesize_image(cfg, quad, &diag);
            run.log.event("diagnostics", {{"summary", diag.summary()}});
            write_pgm16(sim_out + ".pgm", img);
            run.output(sim_out + ".pgm");
            write_csv(sim_out + ".csv", img);
            run.output(sim_out + ".csv");
            run.finish(sim_out + ".manifest.json");
        } else if (*pre) {
            const auto raw = read_image(pre_raw);
            run.manifest.inputs = {pre_raw};
            std::vector<RawImage> brights;
            for (const auto& b : pre_brights) {
                brights.push_back(read_image(b));
                run.manifest.inputs.push_back(b);
            }
            PreprocessOptions opts;
            opts.despike_quantile = pre_q;
            opts.rotation_deg = parse_quantity(pre_theta, "angle") * 180.0 / constants::pi;
            if (!pre_rect.empty()) opts.crop = parse_rect(pre_rect, "--rect");
            if (!pre_pattern.empty()) opts.pattern = parse_rect(pre_pattern, "--pattern");
            if (!pre_mask.empty()) {
                opts.contamination = read_mask(pre_mask);
                run.manifest.inputs.push_back(pre_mask);
            }
            if (!pre_plane.empty()) {
                opts.plane_region = read_mask(pre_plane);
                run.manifest.inputs.push_back(pre_plane);
            }
            ensure_parent(pre_out);
            const auto out = preprocess(raw, brights, opts);
            write_pgm16(pre_out + ".pgm", out);
            run.output(pre_out + ".pgm");
            write_csv(pre_out + ".csv", out);
            run.output(pre_out + ".csv");
            run.finish(pre_out + ".manifest.json");
        } else if (*fit) {
            const auto cfg = load_with_overrides(fit_config, fit_sets);
            const auto quad = fit_q.build();
            run.manifest.config_path = fit_config;
            run.manifest.inputs = {fit_config, fit_image};
            run.manifest.quadrature = QuadFlags::describe(quad);
            if (fit_smooth < 0) throw ConfigError{"--smooth must be >= 0"};
            auto raw = read_image(fit_image);
            std::optional<Mask> mask;
            if (!fit_mask.empty()) {
                mask = read_mask(fit_mask);
                run.manifest.inputs.push_back(fit_mask);
            }
            const auto exp = normalize_unity(vertical_smooth(raw, static_cast<std::size_t>(fit_smooth)));
            ensure_parent(fit_out);

            if (fit_manual) {
                auto q = quad;
                q.normalize = true;
                const auto simimg = synthesize_image(cfg, q);
                const double r = rss(simimg, exp, mask ? &*mask : nullptr);
                write_csv(fit_out + ".sim.csv", simimg);
                run.output(fit_out + ".sim.csv");
                write_text(fit_out + ".report.txt", "mode = manual\nrss = " + fmt(r) + "\nln_rss = " + fmt(ln_rss(r)) + "\n");
                run.output(fit_out + ".report.txt");
                run.finish(fit_out + ".manifest.json");
            } else {
                FitStage1Params s1{cfg.geometry.slit2_height, cfg.source.v_shift, {}, {}};
                std::string report;
                if (!fit_skip1) {
                    Stage1Options o1;
                    o1.grid_y02 = o1.grid_v_shift = fit_grid1;
                    o1.sweeps = fit_sweeps;
                    o1.quad = quad;
                    const auto r1 = fit_stage1(integrate_horizontal(exp), cfg, parse_range(fit_y02, "length", "--y02"),
                                               parse_range(fit_vs, "velocity", "--v-shift"), o1);
                    s1 = r1.params;
                    report += "stage1_y02_m = " + fmt(r1.params.y02) + "\nstage1_v_shift_mps = " + fmt(r1.params.v_shift) +
                              "\nstage1_objective = " + fmt(r1.objective) +
                              "\nstage1_on_boundary = " + (r1.on_boundary ? "true" : "false") +
                              "\nstage1_degenerate = " + (r1.degenerate ? "true" : "false") + "\n";
                    for (const auto& w : r1.warnings) report += "warning = " + w + "\n";
                    run.log.event("stage1", {{"y02", s1.y02}, {"v_shift", s1.v_shift}, {"objective", r1.objective}});
                }
                Stage2Options o2;
                o2.quad = quad;
                o2.mask = mask ? &*mask : nullptr;
                if (fit_y0g.empty()) o2.y0g = {cfg.grating.height};
                for (const auto& s : split(fit_y0g, ',')) o2.y0g.push_back(parse_quantity(s, "length"));
                const auto ar = parse_range(fit_alpha, "polarizability", "--alpha");
                const auto sr = parse_range(fit_sigma, "area", "--sigma");
                o2.alpha = {ar.lo, ar.hi, fit_na, !fit_alpha_lin, false};
                o2.sigma = {sr.lo, sr.hi, fit_ns, !fit_sigma_lin, fit_sigma_zero};
                o2.polish = fit_polish;
                o2.coarse_stride = static_cast<std::size_t>(fit_stride);
                const auto r2 = fit_stage2(exp, cfg, s1, o2);
                write_heatmap_csv(fit_out + ".heatmap.csv", r2.heatmap);
                run.output(fit_out + ".heatmap.csv");
                write_text(fit_out + ".report.txt", report + heatmap_report(r2));
                run.output(fit_out + ".report.txt");
                run.finish(fit_out + ".manifest.json");
            }
        } else if (*cmp) {
            const auto a = read_image(cmp_a);
            const auto b = read_image(cmp_b);
            const auto rep = compare_images(a, b, cmp_fraction, cmp_spacing);
            if (cmp_out.empty()) {
                std::cout << rep.to_text();
            } else {
                write_text(cmp_out, rep.to_text());
                run.log.event("output", {{"path", cmp_out}});
            }
        } else if (*dk) {
            const auto cfg = load_with_overrides(dk_config, dk_sets);
            const double v = parse_quantity(dk_v, "velocity");
            const double y = dk_y.empty() ? cfg.grating.height : parse_quantity(dk_y, "length");
            const auto cs = channel_amplitudes(grating_strength(cfg.molecule, cfg.grating, v, y));
            const auto kd = kick_distribution(cs, cfg.molecule);
            std::string csv = "j,f,probability\n";
            for (int j = -kd.j_max; j <= kd.j_max; ++j) csv += std::to_string(j) + ",0," + fmt(kd.at(j)) + "\n";
            for (const auto& e : kd.smear) csv += std::to_string(e.j) + "," + std::to_string(e.f) + "," + fmt(e.probability) + "\n";
            if (dk_out.empty()) std::cout << csv;
            else write_text(dk_out, csv);
        } else if (*dc) {
            const auto text = dump_config(load_with_overrides(dc_config, dc_sets));
            if (dc_out.empty()) std::cout << text;
            else write_text(dc_out, text);
        }
        run.log.event("done", {{"exit_code", 0},
                               {"wall_time_s", std::chrono::duration<double>(clk::now() - run.start).count()}});
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        run.log.event("error", {{"message", e.what()}, {"exit_code", e.exit_code()}});
        return e.exit_code();
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        run.log.event("error", {{"message", e.what()}, {"exit_code", 3}});
        return 3;
    }
}

} // namespace duv
