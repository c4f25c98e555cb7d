#pragma once

#include "duv/config.hpp"

#include <string>

#ifndef DUV_SOURCE_DIR
#error "DUV_SOURCE_DIR must point at the repository root"
#endif

namespace duv::testing {

inline std::string source_path(const std::string& rel) { return std::string{DUV_SOURCE_DIR} + "/" + rel; }

inline ExperimentConfig load(const std::string& name) { return load_config(source_path("configs/" + name + ".conf")); }

// PcH2 parameters with a small detector window around the undiffracted beam.
inline ExperimentConfig small_pch2(std::size_t width = 401, std::size_t height = 241) {
    ExperimentConfig cfg = load("pch2");
    cfg.detector.width_px = width;
    cfg.detector.height_px = height;
    return cfg;
}

} // namespace duv::testing
