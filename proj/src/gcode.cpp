#include "slicepath/gcode.h"

#include <fmt/format.h>

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>

#include "slicepath/error.h"

namespace slicepath::gcode {

namespace {

constexpr double kZEpsilon = 1e-9;

struct Word {
    char letter;
    double value;
};

// Drops `;` comments, `(...)` comments, line numbers' checksums and trailing
// whitespace. Returns the upper-cased remainder.
std::string strip_comments(std::string_view line) {
    std::string out;
    out.reserve(line.size());
    int paren_depth = 0;
    for (char c : line) {
        if (c == ';' && paren_depth == 0) break;
        if (c == '*' && paren_depth == 0) break;
        if (c == '(') {
            ++paren_depth;
            continue;
        }
        if (c == ')' && paren_depth > 0) {
            --paren_depth;
            continue;
        }
        if (paren_depth > 0) continue;
        out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    return out;
}

double parse_number(std::string_view text, std::size_t line_no) {
    std::string_view digits = text;
    if (!digits.empty() && digits.front() == '+') digits.remove_prefix(1);
    double value = 0.0;
    const auto* first = digits.data();
    const auto* last = digits.data() + digits.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (digits.empty() || ec != std::errc{} || ptr != last || !std::isfinite(value)) {
        throw Error(ErrorKind::MalformedNumber,
                    fmt::format("line {}: cannot parse '{}'", line_no, std::string(text)));
    }
    return value;
}

std::vector<Word> tokenize(const std::string& code, std::size_t line_no) {
    std::vector<Word> words;
    std::size_t i = 0;
    while (i < code.size()) {
        const char c = code[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (!std::isalpha(static_cast<unsigned char>(c))) {
            throw Error(ErrorKind::MalformedNumber,
                        fmt::format("line {}: unexpected character '{}'", line_no, c));
        }
        std::size_t j = i + 1;
        while (j < code.size() && (std::isdigit(static_cast<unsigned char>(code[j])) || code[j] == '.' ||
                                   code[j] == '-' || code[j] == '+')) {
            ++j;
        }
        words.push_back({c, parse_number(std::string_view(code).substr(i + 1, j - i - 1), line_no)});
        i = j;
    }
    return words;
}

std::optional<double> find_word(const std::vector<Word>& words, char letter) {
    for (std::size_t k = 1; k < words.size(); ++k) {
        if (words[k].letter == letter) return words[k].value;
    }
    return std::nullopt;
}

class Interpreter {
public:
    void run_line(std::string_view raw, std::size_t line_no) {
        const std::string code = strip_comments(raw);
        std::size_t start = 0;
        while (start < code.size() && std::isspace(static_cast<unsigned char>(code[start]))) ++start;
        if (start == code.size()) return;
        // Skip a leading line number word.
        std::string_view view(code);
        view.remove_prefix(start);
        if (view.front() == 'N') {
            std::size_t k = 1;
            while (k < view.size() && std::isdigit(static_cast<unsigned char>(view[k]))) ++k;
            view.remove_prefix(k);
            while (!view.empty() && std::isspace(static_cast<unsigned char>(view.front()))) view.remove_prefix(1);
            if (view.empty()) return;
        }
        const char letter = view.front();
        if (letter != 'G' && letter != 'M') return;
        std::size_t k = 1;
        while (k < view.size() && (std::isdigit(static_cast<unsigned char>(view[k])) || view[k] == '.')) ++k;
        if (k == 1) return;
        const std::string command = std::string(1, letter) + std::string(view.substr(1, k - 1));
        if (!is_interpreted(command)) return;
        const auto words = tokenize(std::string(view), line_no);
        dispatch(command, words, line_no);
    }

    std::vector<LayerToolpath> finish() {
        close_layer();
        return std::move(layers_);
    }

private:
    static bool is_interpreted(const std::string& c) {
        static constexpr std::array<std::string_view, 11> known = {
            "G0", "G1", "G2", "G3", "G28", "G90", "G91", "G92", "M82", "M83", "G00"};
        for (auto k : known) {
            if (c == k) return true;
        }
        return c == "G01" || c == "G02" || c == "G03";
    }

    void dispatch(const std::string& command, const std::vector<Word>& words, std::size_t line_no) {
        if (command == "G0" || command == "G1" || command == "G00" || command == "G01") {
            move(words, line_no);
        } else if (command == "G2" || command == "G3" || command == "G02" || command == "G03") {
            throw Error(ErrorKind::UnsupportedArc, fmt::format("line {}: arc moves are not supported", line_no));
        } else if (command == "G28") {
            home(words);
        } else if (command == "G90") {
            state_.position_mode = Mode::Absolute;
        } else if (command == "G91") {
            state_.position_mode = Mode::Relative;
        } else if (command == "M82") {
            state_.extrusion_mode = Mode::Absolute;
        } else if (command == "M83") {
            state_.extrusion_mode = Mode::Relative;
        } else if (command == "G92") {
            set_position(words);
        }
    }

    void move(const std::vector<Word>& words, std::size_t line_no) {
        const bool relative = state_.position_mode == Mode::Relative;
        const auto x = find_word(words, 'X');
        const auto y = find_word(words, 'Y');
        const auto z = find_word(words, 'Z');
        const auto e = find_word(words, 'E');
        if (x) state_.x = relative ? state_.x + *x : *x + state_.x_offset;
        if (y) state_.y = relative ? state_.y + *y : *y + state_.y_offset;
        if (e) state_.e_cumulative = state_.extrusion_relative() ? state_.e_cumulative + *e : *e + state_.e_offset;
        if (z) {
            const double new_z = relative ? state_.z + *z : *z + state_.z_offset;
            if (std::abs(new_z - state_.z) > kZEpsilon) {
                if (new_z < layer_z_ - kZEpsilon) {
                    throw Error(ErrorKind::NegativeLayerHeight,
                                fmt::format("line {}: Z drops from {} to {}", line_no, layer_z_, new_z));
                }
                close_layer();
                layer_z_ = new_z;
            }
            state_.z = new_z;
        }
        if (x || y) {
            if (!open_) {
                open_ = LayerToolpath{state_.z, {}};
                layer_z_ = state_.z;
            }
            open_->keypoints.push_back({state_.x, state_.y, state_.e_cumulative});
        }
    }

    void home(const std::vector<Word>& words) {
        const bool all = words.size() == 1;
        if (all || find_word(words, 'X')) {
            state_.x = 0.0;
            state_.x_offset = 0.0;
        }
        if (all || find_word(words, 'Y')) {
            state_.y = 0.0;
            state_.y_offset = 0.0;
        }
        if (all || find_word(words, 'Z')) {
            close_layer();
            state_.z = 0.0;
            state_.z_offset = 0.0;
            layer_z_ = 0.0;
        }
    }

    void set_position(const std::vector<Word>& words) {
        const bool all = words.size() == 1;
        auto reset = [&](char letter, double machine, double& offset) {
            if (all) {
                offset = machine;
            } else if (auto v = find_word(words, letter)) {
                offset = machine - *v;
            }
        };
        reset('X', state_.x, state_.x_offset);
        reset('Y', state_.y, state_.y_offset);
        reset('Z', state_.z, state_.z_offset);
        reset('E', state_.e_cumulative, state_.e_offset);
    }

    void close_layer() {
        if (open_ && !open_->keypoints.empty()) layers_.push_back(std::move(*open_));
        open_.reset();
    }

    MachineState state_;
    double layer_z_ = 0.0;
    std::optional<LayerToolpath> open_;
    std::vector<LayerToolpath> layers_;
};

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

}  // namespace

void PrinterProfile::check() const {
    if (!(build_min_x < build_max_x) || !(build_min_y < build_max_y)) {
        throw Error(ErrorKind::InvalidArgument, "build_min must be below build_max on both axes");
    }
    if (!(feedrate > 0.0)) throw Error(ErrorKind::InvalidArgument, "feedrate must be positive");
    if (!(extrusion_multiplier > 0.0)) {
        throw Error(ErrorKind::InvalidArgument, "extrusion_multiplier must be positive");
    }
    if (!(retract_length >= 0.0)) throw Error(ErrorKind::InvalidArgument, "retract_length must be >= 0");
}

PrinterProfile parse_profile(std::string_view text) {
    PrinterProfile p;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view view(line);
        if (auto pos = view.find_first_of("#;"); pos != std::string_view::npos) view = view.substr(0, pos);
        view = trim(view);
        if (view.empty()) continue;
        const auto eq = view.find('=');
        if (eq == std::string_view::npos) {
            throw Error(ErrorKind::InvalidArgument, fmt::format("profile line {}: expected key = value", line_no));
        }
        const std::string key(trim(view.substr(0, eq)));
        const double value = parse_number(trim(view.substr(eq + 1)), line_no);
        if (key == "build_min_x") p.build_min_x = value;
        else if (key == "build_min_y") p.build_min_y = value;
        else if (key == "build_max_x") p.build_max_x = value;
        else if (key == "build_max_y") p.build_max_y = value;
        else if (key == "feedrate") p.feedrate = value;
        else if (key == "extrusion_multiplier") p.extrusion_multiplier = value;
        else if (key == "nozzle_temp") p.nozzle_temp = value;
        else if (key == "bed_temp") p.bed_temp = value;
        else if (key == "retract_length") p.retract_length = value;
        else throw Error(ErrorKind::InvalidArgument, fmt::format("profile line {}: unknown key '{}'", line_no, key));
    }
    p.check();
    return p;
}

PrinterProfile load_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoFailure, "cannot open profile " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_profile(ss.str());
}

std::string format_profile(const PrinterProfile& p) {
    return fmt::format(
        "build_min_x = {}\nbuild_min_y = {}\nbuild_max_x = {}\nbuild_max_y = {}\nfeedrate = {}\n"
        "extrusion_multiplier = {}\nnozzle_temp = {}\nbed_temp = {}\nretract_length = {}\n",
        p.build_min_x, p.build_min_y, p.build_max_x, p.build_max_y, p.feedrate, p.extrusion_multiplier,
        p.nozzle_temp, p.bed_temp, p.retract_length);
}

std::vector<LayerToolpath> parse_program(std::string_view text) {
    Interpreter interp;
    std::size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        const auto line = text.substr(0, nl);
        interp.run_line(line, line_no);
        if (nl == std::string_view::npos) break;
        text.remove_prefix(nl + 1);
    }
    return interp.finish();
}

std::string emit_layer(std::span<const Keypoint> keypoints, const PrinterProfile& profile, double z) {
    std::string out;
    out += "; single-layer toolpath\n";
    out += "G90\n";
    out += "M82\n";
    out += fmt::format("M104 S{}\n", profile.nozzle_temp);
    out += fmt::format("M140 S{}\n", profile.bed_temp);
    out += fmt::format("M190 S{}\n", profile.bed_temp);
    out += fmt::format("M109 S{}\n", profile.nozzle_temp);
    out += "G28\n";
    out += "G92 E0\n";
    out += fmt::format("G1 Z{:.5f} F{}\n", z, profile.feedrate);
    for (const auto& k : keypoints) {
        out += fmt::format("G1 X{:.5f} Y{:.5f} E{:.5f} F{}\n", k.x, k.y, k.e, profile.feedrate);
    }
    const double last_e = keypoints.empty() ? 0.0 : keypoints.back().e;
    out += "; end\n";
    out += fmt::format("G1 E{:.5f} F2400\n", last_e - profile.retract_length);
    out += fmt::format("G1 Z{:.5f} F600\n", z + 5.0);
    out += "M104 S0\n";
    out += "M140 S0\n";
    out += "M84\n";
    return out;
}

std::size_t ValidationReport::count(ViolationKind kind) const {
    std::size_t n = 0;
    for (const auto& v : violations) n += v.kind == kind ? 1 : 0;
    return n;
}

ValidationReport validate_layer(std::span<const Keypoint> keypoints, const PrinterProfile& profile) {
    ValidationReport report;
    for (std::size_t i = 0; i < keypoints.size(); ++i) {
        const auto& k = keypoints[i];
        if (!(k.x >= profile.build_min_x && k.x <= profile.build_max_x && k.y >= profile.build_min_y &&
              k.y <= profile.build_max_y)) {
            report.violations.push_back(
                {ViolationKind::OutOfBounds, i, fmt::format("({:.5f}, {:.5f}) outside build area", k.x, k.y)});
        }
        if (i > 0 && k.e < keypoints[i - 1].e) {
            report.violations.push_back({ViolationKind::NonMonotonicExtrusion, i,
                                         fmt::format("E drops from {:.5f} to {:.5f}", keypoints[i - 1].e, k.e)});
        }
    }
    return report;
}

double travel_length(std::span<const Keypoint> keypoints) {
    double total = 0.0;
    for (std::size_t i = 1; i < keypoints.size(); ++i) {
        total += std::hypot(keypoints[i].x - keypoints[i - 1].x, keypoints[i].y - keypoints[i - 1].y);
    }
    return total;
}

}  // namespace slicepath::gcode
