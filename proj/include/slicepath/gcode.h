#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace slicepath::gcode {

enum class Mode { Absolute, Relative };

struct Keypoint {
    double x = 0.0;  // mm
    double y = 0.0;  // mm
    double e = 0.0;  // cumulative extrusion at arrival, mm of filament

    bool operator==(const Keypoint&) const = default;
};

struct LayerToolpath {
    double z = 0.0;
    std::vector<Keypoint> keypoints;
};

// Interpreter state. Positions are machine positions; the G92 offsets map the
// program's logical coordinates onto them.
struct MachineState {
    Mode position_mode = Mode::Absolute;
    Mode extrusion_mode = Mode::Absolute;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    double e_cumulative = 0.0;
    double x_offset = 0.0;
    double y_offset = 0.0;
    double z_offset = 0.0;
    double e_offset = 0.0;

    // E follows G91 as well as M83 (RepRap/Marlin semantics).
    bool extrusion_relative() const {
        return position_mode == Mode::Relative || extrusion_mode == Mode::Relative;
    }
};

struct PrinterProfile {
    double build_min_x = 0.0;
    double build_min_y = 0.0;
    double build_max_x = 220.0;
    double build_max_y = 220.0;
    double feedrate = 1200.0;  // mm/min
    double extrusion_multiplier = 1.0;
    double nozzle_temp = 200.0;
    double bed_temp = 60.0;
    double retract_length = 1.0;  // mm of filament pulled back in the footer

    // Throws InvalidArgument when the invariants do not hold.
    void check() const;
};

// key = value lines, '#' or ';' comments. Unknown keys are rejected so typos
// do not silently fall back to defaults.
PrinterProfile parse_profile(std::string_view text);
PrinterProfile load_profile(const std::string& path);
std::string format_profile(const PrinterProfile& profile);

std::vector<LayerToolpath> parse_program(std::string_view text);

std::string emit_layer(std::span<const Keypoint> keypoints, const PrinterProfile& profile, double z);

enum class ViolationKind { OutOfBounds, NonMonotonicExtrusion };

struct Violation {
    ViolationKind kind;
    std::size_t index;
    std::string detail;
};

struct ValidationReport {
    std::vector<Violation> violations;

    bool valid() const { return violations.empty(); }
    std::size_t count(ViolationKind kind) const;
};

ValidationReport validate_layer(std::span<const Keypoint> keypoints, const PrinterProfile& profile);

double travel_length(std::span<const Keypoint> keypoints);

}  // namespace slicepath::gcode
