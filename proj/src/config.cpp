#include "duv/config.hpp"

#include "duv/constants.hpp"
#include "duv/errors.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <vector>

namespace duv {

namespace {

struct Unit {
    std::string_view suffix;
    std::string_view dimension;
    double factor;
};

// The first entry of each dimension is its canonical SI spelling.
constexpr Unit kUnits[] = {
    {"kg", "mass", 1.0},
    {"u", "mass", constants::amu},
    {"m", "length", 1.0},
    {"um", "length", 1e-6},
    {"nm", "length", 1e-9},
    {"m2", "area", 1.0},
    {"Cm2pV", "polarizability", 1.0},
    {"A3_4pie0", "polarizability", constants::polarizability_volume_to_si},
    {"W", "power", 1.0},
    {"K", "temperature", 1.0},
    {"mps", "velocity", 1.0},
    {"mps2", "acceleration", 1.0},
    {"per_s", "rate", 1.0},
    {"rad", "angle", 1.0},
    {"mrad", "angle", 1e-3},
    {"deg", "angle", constants::pi / 180.0},
};

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::string_view canonical_unit(std::string_view dimension) {
    for (const auto& u : kUnits)
        if (u.dimension == dimension) return u.suffix;
    return {};
}

struct Field {
    std::string key;
    std::string_view dimension;  // "" = dimensionless, "count" = positive integer
    bool required;
    std::function<void(ExperimentConfig&, double)> set;
    std::function<double(const ExperimentConfig&)> get;
};

#define DUV_FIELD(key, dim, req, member)                                                  \
    Field {                                                                               \
        key, dim, req, [](ExperimentConfig& c, double v) { c.member = v; },               \
            [](const ExperimentConfig& c) { return static_cast<double>(c.member); }       \
    }
#define DUV_COUNT(key, member)                                                            \
    Field {                                                                               \
        key, "count", true,                                                               \
            [](ExperimentConfig& c, double v) { c.member = static_cast<std::size_t>(v); }, \
            [](const ExperimentConfig& c) { return static_cast<double>(c.member); }       \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        DUV_FIELD("molecule.mass", "mass", true, molecule.mass),
        DUV_FIELD("molecule.alpha", "polarizability", true, molecule.alpha_duv),
        DUV_FIELD("molecule.sigma", "area", true, molecule.sigma_duv),
        DUV_FIELD("molecule.phi_ic", "", true, molecule.phi_ic),
        DUV_FIELD("molecule.phi_isc", "", true, molecule.phi_isc),
        DUV_FIELD("molecule.phi_f", "", true, molecule.phi_f),
        DUV_FIELD("molecule.p_dep", "", true, molecule.p_dep),
        DUV_FIELD("molecule.lambda_f", "length", false, molecule.lambda_f),
        DUV_FIELD("grating.lambda", "length", true, grating.lambda_l),
        DUV_FIELD("grating.power", "power", true, grating.power),
        DUV_FIELD("grating.waist_y", "length", true, grating.waist_y),
        DUV_FIELD("grating.height", "length", true, grating.height),
        DUV_FIELD("grating.reflectivity", "", false, grating.reflectivity),
        DUV_FIELD("geometry.l1", "length", true, geometry.l1),
        DUV_FIELD("geometry.l2", "length", true, geometry.l2),
        DUV_FIELD("geometry.l2p", "length", true, geometry.l2p),
        DUV_FIELD("geometry.l3", "length", true, geometry.l3),
        DUV_FIELD("geometry.l4", "length", true, geometry.l4),
        DUV_FIELD("geometry.l4p", "length", true, geometry.l4p),
        DUV_FIELD("geometry.slit1_width_x", "length", true, geometry.slit1_width_x),
        DUV_FIELD("geometry.slit2_width_x", "length", true, geometry.slit2_width_x),
        DUV_FIELD("geometry.slit1_width_y", "length", true, geometry.slit1_width_y),
        DUV_FIELD("geometry.slit2_width_y", "length", true, geometry.slit2_width_y),
        DUV_FIELD("geometry.slit1_height", "length", true, geometry.slit1_height),
        DUV_FIELD("geometry.slit2_height", "length", true, geometry.slit2_height),
        DUV_FIELD("geometry.source_size", "length", true, geometry.source_size),
        DUV_FIELD("source.temperature", "temperature", true, source.temperature),
        DUV_FIELD("source.v_shift", "velocity", true, source.v_shift),
        DUV_FIELD("detector.pixel_pitch", "length", true, detector.pixel_pitch),
        DUV_COUNT("detector.width_px", detector.width_px),
        DUV_COUNT("detector.height_px", detector.height_px),
        DUV_FIELD("detector.acceptance_angle", "angle", true, detector.acceptance_angle),
        DUV_FIELD("detector.center_x", "length", false, detector.center_x),
        DUV_FIELD("detector.center_y", "length", false, detector.center_y),
        DUV_FIELD("environment.g", "acceleration", true, environment.g),
        DUV_FIELD("environment.omega_x", "rate", true, environment.omega_x),
        DUV_FIELD("environment.omega_y", "rate", true, environment.omega_y),
    };
    return table;
}

#undef DUV_FIELD
#undef DUV_COUNT

[[noreturn]] void bound_error(std::string_view field, std::string_view bound, double value) {
    std::ostringstream os;
    os << field << " must be " << bound << " (got " << value << ")";
    throw ConfigError{os.str()};
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

double parse_quantity(std::string_view text, std::string_view dimension) {
    text = trim(text);
    double value = 0.0;
    const char* begin = text.data();
    const char* end = text.data() + text.size();
    if (!text.empty() && *begin == '+') ++begin;
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc{} || ptr == begin)
        throw ConfigError{"cannot parse number in '" + std::string{text} + "'"};
    if (!std::isfinite(value)) throw ConfigError{"non-finite value '" + std::string{text} + "'"};
    const std::string_view suffix = trim(std::string_view{ptr, static_cast<std::size_t>(end - ptr)});
    if (suffix.empty()) return value;
    for (const auto& u : kUnits) {
        if (u.suffix != suffix) continue;
        if (u.dimension != dimension)
            throw ConfigError{"unit '" + std::string{suffix} + "' is not a " +
                              (dimension.empty() ? std::string{"dimensionless"} : std::string{dimension}) +
                              " unit"};
        return value * u.factor;
    }
    throw ConfigError{"unknown unit suffix '" + std::string{suffix} + "'"};
}

ExperimentConfig parse_config(std::string_view text, bool strict) {
    std::map<std::string, std::string, std::less<>> values;
    std::string section;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError{"line " + std::to_string(line_no) + ": malformed section header"};
            section = std::string{trim(line.substr(1, line.size() - 2))};
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError{"line " + std::to_string(line_no) + ": expected 'key = value'"};
        std::string key{trim(line.substr(0, eq))};
        if (key.find('.') == std::string::npos && !section.empty()) key = section + "." + key;
        if (!values.emplace(key, std::string{trim(line.substr(eq + 1))}).second)
            throw ConfigError{"duplicate key '" + key + "'"};
    }

    ExperimentConfig cfg;
    bool have_lambda_f = false;
    std::set<std::string, std::less<>> used;
    for (const auto& f : fields()) {
        const auto it = values.find(f.key);
        if (it == values.end()) {
            if (f.required) throw ConfigError{"missing key '" + f.key + "'"};
            continue;
        }
        used.insert(f.key);
        double v = 0.0;
        try {
            v = parse_quantity(it->second, f.dimension == "count" ? std::string_view{} : f.dimension);
        } catch (const ConfigError& e) {
            throw ConfigError{f.key + ": " + e.what()};
        }
        if (f.dimension == "count" && (v != std::floor(v) || v < 1.0))
            bound_error(f.key, "a positive integer", v);
        if (f.key == "molecule.alpha") v = std::abs(v);
        if (f.key == "molecule.lambda_f") have_lambda_f = true;
        f.set(cfg, v);
    }
    if (strict) {
        for (const auto& [key, value] : values)
            if (!used.contains(key)) throw ConfigError{"unknown key '" + key + "'"};
    }
    if (!have_lambda_f) cfg.molecule.lambda_f = cfg.grating.lambda_l;
    validate(cfg);
    return cfg;
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
    for (const auto& f : fields()) {
        if (f.key != key) continue;
        double v = 0.0;
        try {
            v = parse_quantity(value, f.dimension == "count" ? std::string_view{} : f.dimension);
        } catch (const ConfigError& e) {
            throw ConfigError{f.key + ": " + e.what()};
        }
        if (f.dimension == "count" && (v != std::floor(v) || v < 1.0))
            bound_error(f.key, "a positive integer", v);
        if (f.key == "molecule.alpha") v = std::abs(v);
        f.set(cfg, v);
        validate(cfg);
        return;
    }
    throw ConfigError{"unknown key '" + std::string{key} + "'"};
}

ExperimentConfig load_config(const std::string& path, bool strict) {
    std::ifstream in{path};
    if (!in) throw ConfigError{"cannot open config file '" + path + "'"};
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), strict);
}

std::string dump_config(const ExperimentConfig& cfg) {
    std::string out;
    std::string section;
    for (const auto& f : fields()) {
        const auto dot = f.key.find('.');
        const std::string sec = f.key.substr(0, dot);
        if (sec != section) {
            if (!section.empty()) out += "\n";
            out += "[" + sec + "]\n";
            section = sec;
        }
        out += f.key.substr(dot + 1) + " = " + format_double(f.get(cfg));
        if (f.dimension != "count" && !f.dimension.empty()) {
            out += " ";
            out += canonical_unit(f.dimension);
        }
        out += "\n";
    }
    return out;
}

void validate(const ExperimentConfig& cfg) {
    const auto& m = cfg.molecule;
    if (!(m.mass > 0)) bound_error("molecule.mass", "> 0", m.mass);
    if (!(m.sigma_duv >= 0)) bound_error("molecule.sigma", ">= 0", m.sigma_duv);
    for (auto [name, v] : {std::pair{"molecule.phi_ic", m.phi_ic}, std::pair{"molecule.phi_isc", m.phi_isc},
                           std::pair{"molecule.phi_f", m.phi_f}})
        if (!(v >= 0 && v <= 1)) bound_error(name, "in [0, 1]", v);
    const double branching = m.phi_ic + m.phi_isc + m.phi_f;
    if (!(std::abs(branching - 1.0) <= 1e-12))
        bound_error("molecule.phi_ic + phi_isc + phi_f", "1 within 1e-12", branching);
    if (!(m.p_dep >= 0 && m.p_dep <= 1)) bound_error("molecule.p_dep", "in [0, 1]", m.p_dep);
    if (!(m.lambda_f > 0)) bound_error("molecule.lambda_f", "> 0", m.lambda_f);

    const auto& gr = cfg.grating;
    if (!(gr.lambda_l > 0)) bound_error("grating.lambda", "> 0", gr.lambda_l);
    if (!(gr.power >= 0)) bound_error("grating.power", ">= 0", gr.power);
    if (!(gr.waist_y > 0)) bound_error("grating.waist_y", "> 0", gr.waist_y);
    if (!(gr.reflectivity >= 0 && gr.reflectivity <= 1))
        bound_error("grating.reflectivity", "in [0, 1]", gr.reflectivity);

    const auto& g = cfg.geometry;
    for (auto [name, v] : {std::pair{"geometry.l1", g.l1}, std::pair{"geometry.l2", g.l2},
                           std::pair{"geometry.l2p", g.l2p}, std::pair{"geometry.l3", g.l3},
                           std::pair{"geometry.l4", g.l4}, std::pair{"geometry.l4p", g.l4p},
                           std::pair{"geometry.slit1_width_x", g.slit1_width_x},
                           std::pair{"geometry.slit2_width_x", g.slit2_width_x},
                           std::pair{"geometry.slit1_width_y", g.slit1_width_y},
                           std::pair{"geometry.slit2_width_y", g.slit2_width_y},
                           std::pair{"geometry.source_size", g.source_size}})
        if (!(v > 0)) bound_error(name, "> 0", v);
    z_stations(g);

    if (!(cfg.source.temperature > 0)) bound_error("source.temperature", "> 0", cfg.source.temperature);
    if (!(cfg.source.v_shift >= 0)) bound_error("source.v_shift", ">= 0", cfg.source.v_shift);

    const auto& d = cfg.detector;
    if (!(d.pixel_pitch > 0)) bound_error("detector.pixel_pitch", "> 0", d.pixel_pitch);
    if (d.width_px == 0) bound_error("detector.width_px", "> 0", 0);
    if (d.height_px == 0) bound_error("detector.height_px", "> 0", 0);
    if (!(d.acceptance_angle > 0)) bound_error("detector.acceptance_angle", "> 0", d.acceptance_angle);

    const auto& e = cfg.environment;
    for (auto [name, v] : {std::pair{"environment.g", e.g}, std::pair{"environment.omega_x", e.omega_x},
                           std::pair{"environment.omega_y", e.omega_y}})
        if (!std::isfinite(v)) bound_error(name, "finite", v);
}

StationTable z_stations(const GeometrySpec& geom) {
    StationTable t;
    t.source = 0.0;
    t.slit1 = geom.l1;
    t.slit2 = geom.l1 + geom.l2;
    t.grating = t.slit2 + geom.l2p;
    t.screen = t.grating + geom.l4;
    if (!(t.source < t.slit1 && t.slit1 < t.slit2 && t.slit2 < t.grating && t.grating < t.screen))
        throw ConfigError{"beamline stations are not monotone in z (check l1, l2, l2p, l4)"};
    return t;
}

} // namespace duv
