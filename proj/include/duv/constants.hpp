#pragma once

#include <numbers>

// CODATA 2018 exact / recommended values, SI units.
namespace duv::constants {

inline constexpr double pi = std::numbers::pi;
inline constexpr double h = 6.62607015e-34;
inline constexpr double hbar = h / (2.0 * pi);
inline constexpr double c = 299792458.0;
inline constexpr double epsilon0 = 8.8541878128e-12;
inline constexpr double k_B = 1.380649e-23;
inline constexpr double amu = 1.66053906660e-27;
inline constexpr double angstrom = 1e-10;

/// Polarisability volume (A^3) to SI polarisability (C m^2 / V).
inline constexpr double polarizability_volume_to_si = 4.0 * pi * epsilon0 * angstrom * angstrom * angstrom;

} // namespace duv::constants
