#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

namespace duv {

struct MoleculeSpec {
    double mass = 0.0;       // kg
    double alpha_duv = 0.0;  // C m^2 / V, stored as |alpha|
    double sigma_duv = 0.0;  // m^2
    double phi_ic = 0.0;
    double phi_isc = 1.0;
    double phi_f = 0.0;
    double p_dep = 0.0;
    double lambda_f = 0.0;   // m
};

struct GratingSpec {
    double lambda_l = 0.0;   // m
    double power = 0.0;      // W
    double waist_y = 0.0;    // m
    double height = 0.0;     // y0g, m
    double reflectivity = 1.0;

    double period() const { return lambda_l / 2.0; }
};

struct GeometrySpec {
    double l1 = 0.0, l2 = 0.0, l2p = 0.0, l3 = 0.0, l4 = 0.0, l4p = 0.0;
    double slit1_width_x = 0.0, slit2_width_x = 0.0;
    double slit1_width_y = 0.0, slit2_width_y = 0.0;
    double slit1_height = 0.0, slit2_height = 0.0;
    double source_size = 0.0;
};

struct SourceSpec {
    double temperature = 0.0;  // K
    double v_shift = 0.0;      // m/s
};

struct DetectorSpec {
    double pixel_pitch = 0.0;
    std::size_t width_px = 0;
    std::size_t height_px = 0;
    double acceptance_angle = 0.0;  // rad
    // Screen coordinates of the image centre.
    double center_x = 0.0;
    double center_y = 0.0;
};

struct EnvironmentSpec {
    double g = -9.81;
    double omega_x = 0.0;
    double omega_y = 0.0;
};

struct ExperimentConfig {
    MoleculeSpec molecule;
    GratingSpec grating;
    GeometrySpec geometry;
    SourceSpec source;
    DetectorSpec detector;
    EnvironmentSpec environment;
};

/// Longitudinal positions along the beam axis, source at z = 0.
struct StationTable {
    double source = 0.0;
    double slit1 = 0.0;
    double slit2 = 0.0;
    double grating = 0.0;
    double screen = 0.0;
};

/// Parses the line-oriented `key = value [unit]` experiment description.
/// Keys are `section.name`, or bare names under a `[section]` header.
/// Throws ConfigError on missing, unknown (when strict) or invalid keys.
ExperimentConfig parse_config(std::string_view text, bool strict = true);
ExperimentConfig load_config(const std::string& path, bool strict = true);

/// Overrides one `section.name` key with a value in config syntax, then validates.
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);

/// Writes every field in canonical SI units; parse_config reads it back bit-exactly.
std::string dump_config(const ExperimentConfig& cfg);

/// Throws ConfigError naming the first field violating its bounds.
void validate(const ExperimentConfig& cfg);

StationTable z_stations(const GeometrySpec& geom);

/// Parses a number with an optional whitelisted unit suffix ("16 um", "0.5mrad")
/// and returns it in SI. `dimension` restricts accepted suffixes; see config.cpp.
double parse_quantity(std::string_view text, std::string_view dimension);

} // namespace duv
