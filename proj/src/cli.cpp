#include "slicepath/cli.h"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "slicepath/checkpoint.h"
#include "slicepath/dataset.h"
#include "slicepath/diffusion.h"
#include "slicepath/eval.h"
#include "slicepath/gcode.h"
#include "slicepath/geometry.h"
#include "slicepath/random.h"
#include "slicepath/train.h"

#ifndef SLICEPATH_VERSION
#define SLICEPATH_VERSION "0.0.0"
#endif

namespace slicepath::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::NonFiniteGradient:
        case ErrorKind::NonFiniteParam:
        case ErrorKind::NonFiniteLoss:
        case ErrorKind::NonFiniteState:
        case ErrorKind::AllMasked:
            return kTrainingError;
        case ErrorKind::NoContourFound:
            return kConditioningError;
        case ErrorKind::IoFailure:
            return kUnexpected;
        default:
            return kInputError;
    }
}

namespace {

// Raised when emission is refused because the validation report is not empty.
struct ValidationRefused : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::InvalidArgument, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Trimmed, non-empty pieces.
std::vector<std::string> split(const std::string& text, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::stringstream ss(text);
    while (std::getline(ss, item, sep))
        if (auto t = trim(item); !t.empty()) out.push_back(std::move(t));
    return out;
}

// key = value lines with '#' or ';' comments, the same layout printer profiles use.
std::map<std::string, std::string> parse_key_values(const std::string& text) {
    std::map<std::string, std::string> out;
    std::stringstream ss(text);
    std::string line;
    int number = 0;
    while (std::getline(ss, line)) {
        ++number;
        const auto cut = line.find_first_of("#;");
        if (cut != std::string::npos) line.resize(cut);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorKind::InvalidArgument, fmt::format("config line {}: expected key = value", number));
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw Error(ErrorKind::InvalidArgument, fmt::format("config line {}: empty key or value", number));
        out[key] = value;
    }
    return out;
}

double to_number(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size()) throw Error(ErrorKind::MalformedNumber, fmt::format("config key {}: '{}' is not a number", key, value));
    return v;
}

void apply_train_config(train::TrainConfig& c, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, value] : kv) {
        const double v = to_number(key, value);
        if (key == "batch_size") c.batch_size = static_cast<int>(v);
        else if (key == "epochs") c.epochs = static_cast<int>(v);
        else if (key == "lr0" || key == "lr") c.lr0 = v;
        else if (key == "weight_decay") c.weight_decay = v;
        else if (key == "clip_norm") c.clip_norm = v;
        else if (key == "seed") c.seed = static_cast<std::uint64_t>(v);
        else if (key == "val_fraction") c.val_fraction = v;
        else if (key == "diffusion_steps") c.diffusion_steps = static_cast<int>(v);
        else if (key == "val_timesteps") c.val_timesteps = static_cast<int>(v);
        else if (key == "length_weight") c.length_weight = v;
        else if (key == "threads") c.threads = static_cast<int>(v);
        else if (key == "checkpoint_every") c.checkpoint_every = static_cast<int>(v);
        else if (key == "plateau_factor") c.plateau.factor = v;
        else if (key == "plateau_patience") c.plateau.patience = static_cast<int>(v);
        else if (key == "min_lr") c.plateau.min_lr = v;
        else throw Error(ErrorKind::InvalidArgument, "unknown config key " + key);
    }
}

train::TrainConfig train_preset(const std::string& name) {
    train::TrainConfig c;
    if (name == "desk") {
        c.batch_size = 8;
        c.epochs = 50;
        c.lr0 = 1e-3;
        c.diffusion_steps = 100;
        c.val_timesteps = 4;
    }
    return c;
}

model::ModelConfig model_preset(const std::string& name) {
    return name == "paper" ? model::paper_preset() : model::desk_preset();
}

// Deposited layers of a G-code file, or of every .gcode file in a directory, in name order.
std::vector<eval::Layer> load_layers(const fs::path& path) {
    std::vector<fs::path> files;
    if (fs::is_directory(path)) {
        for (const auto& entry : fs::directory_iterator(path))
            if (entry.path().extension() == ".gcode") files.push_back(entry.path());
        std::sort(files.begin(), files.end());
    } else if (fs::exists(path)) {
        files.push_back(path);
    }
    if (files.empty()) throw Error(ErrorKind::InvalidArgument, "no G-code found at " + path.string());
    std::vector<eval::Layer> layers;
    for (const auto& file : files)
        for (auto& layer : gcode::parse_program(read_text(file))) {
            // Travel-only layers (a final lift, a purge-free start) carry no deposition.
            bool deposits = false;
            for (std::size_t k = 1; k < layer.keypoints.size(); ++k) deposits |= layer.keypoints[k].e > layer.keypoints[k - 1].e;
            if (deposits) layers.push_back(std::move(layer.keypoints));
        }
    if (layers.empty()) throw Error(ErrorKind::EmptyPath, "no deposited layer in " + path.string());
    return layers;
}

struct Context {
    Context(std::ostream& o, std::ostream& e) : out(o), err(e) {}

    std::ostream& out;
    std::ostream& err;
    json config = json::object();
    json inputs = json::object();
    json outputs = json::object();
    std::uint64_t seed = 0;
    fs::path manifest;
};

// ---- build-data ----------------------------------------------------------

struct BuildDataOptions {
    std::string stl_dir;
    std::string synthetic;
    int count = 64;
    std::string out;
    std::size_t n_max = dataset::kDefaultMaxLength;
    std::uint64_t seed = 0;
};

struct SyntheticPlan {
    std::vector<geometry::Shape> shapes;
    std::vector<geometry::Infill> infills;
};

SyntheticPlan parse_synthetic(std::string text) {
    for (std::size_t at; (at = text.find("\xc3\x97")) != std::string::npos;) text.replace(at, 2, "x");
    std::replace(text.begin(), text.end(), 'X', 'x');
    const auto parts = split(lower(text), 'x');
    if (parts.empty() || parts.size() > 2) throw Error(ErrorKind::InvalidArgument, "synthetic spec must be SHAPES[xINFILLS]");
    SyntheticPlan plan;
    for (const auto& s : split(parts[0], ',')) plan.shapes.push_back(geometry::parse_shape(s));
    if (parts.size() == 2)
        for (const auto& s : split(parts[1], ',')) plan.infills.push_back(geometry::parse_infill(s));
    else
        plan.infills = {geometry::Infill::Rectilinear, geometry::Infill::Concentric};
    if (plan.shapes.empty() || plan.infills.empty()) throw Error(ErrorKind::InvalidArgument, "synthetic spec names no shape or infill");
    return plan;
}

std::vector<dataset::TrainingRecord> synthetic_records(const SyntheticPlan& plan, int count, std::size_t n_max,
                                                       std::uint64_t seed) {
    std::vector<dataset::TrainingRecord> records;
    const std::size_t combos = plan.shapes.size() * plan.infills.size();
    for (int i = 0; i < count; ++i) {
        const std::size_t c = static_cast<std::size_t>(i) % combos;
        const std::uint64_t item_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
        Rng rng(item_seed);
        geometry::ShapeSpec spec;
        spec.shape = plan.shapes[c / plan.infills.size()];
        spec.infill = plan.infills[c % plan.infills.size()];
        spec.size = rng.uniform(10.0, 40.0);
        spec.aspect = rng.uniform(0.4, 0.9);
        spec.hole_ratio = rng.uniform(0.3, 0.6);
        spec.gap_degrees = rng.uniform(45.0, 120.0);
        spec.hatch_degrees = rng.uniform(0.0, 180.0);
        spec.density = rng.uniform(0.15, 0.35);
        spec.arc_segments = 48;
        const auto sample = geometry::synth_sample(spec, item_seed);
        auto record = dataset::normalize(sample.toolpath, n_max);
        record.image = geometry::rasterize(sample.contour);
        record.tag = geometry::to_string(spec.shape) + "/" + geometry::to_string(spec.infill);
        records.push_back(std::move(record));
    }
    return records;
}

// STL files paired with a G-code file of the same stem. Each printed layer is
// sliced through the middle of its layer height.
std::vector<dataset::TrainingRecord> stl_records(const fs::path& dir, std::size_t n_max, std::ostream& err) {
    if (!fs::is_directory(dir)) throw Error(ErrorKind::InvalidArgument, "not a directory: " + dir.string());
    std::vector<fs::path> stls;
    for (const auto& entry : fs::directory_iterator(dir))
        if (lower(entry.path().extension().string()) == ".stl") stls.push_back(entry.path());
    std::sort(stls.begin(), stls.end());
    std::vector<dataset::TrainingRecord> records;
    for (const auto& stl : stls) {
        auto gcode_path = stl;
        gcode_path.replace_extension(".gcode");
        if (!fs::exists(gcode_path)) {
            err << "skipping " << stl.filename().string() << ": no matching .gcode\n";
            continue;
        }
        const auto mesh = geometry::load_stl(stl.string()).mesh;
        const auto box = mesh.bounds();
        const auto layers = gcode::parse_program(read_text(gcode_path));
        double previous_z = 0.0;
        for (std::size_t j = 0; j < layers.size(); ++j) {
            const auto& layer = layers[j];
            const double height = layer.z - previous_z;
            previous_z = layer.z;
            const double z = box.min().z() + layer.z - 0.5 * height;
            if (layer.keypoints.empty() || !(z > box.min().z() && z < box.max().z())) continue;
            const auto contour = geometry::slice_mesh(mesh, z);
            if (contour.loops.empty()) continue;
            auto record = dataset::normalize(layer, n_max);
            record.image = geometry::rasterize(contour);
            record.tag = fmt::format("{}:{}", stl.stem().string(), j);
            records.push_back(std::move(record));
        }
    }
    if (records.empty()) throw Error(ErrorKind::InvalidArgument, "no STL/G-code layer pairs in " + dir.string());
    return records;
}

int build_data(const BuildDataOptions& o, Context& ctx) {
    if (o.stl_dir.empty() == o.synthetic.empty())
        throw Error(ErrorKind::InvalidArgument, "give exactly one of --stl or --synthetic");
    if (o.n_max == 0 || o.count <= 0) throw Error(ErrorKind::InvalidArgument, "--n-max and --count must be positive");
    ctx.config = {{"stl", o.stl_dir}, {"synthetic", o.synthetic}, {"count", o.count}, {"n_max", o.n_max}, {"out", o.out}};
    ctx.inputs = {{"stl", o.stl_dir}};
    const auto records = o.synthetic.empty() ? stl_records(o.stl_dir, o.n_max, ctx.err)
                                             : synthetic_records(parse_synthetic(o.synthetic), o.count, o.n_max, o.seed);
    dataset::write_records(o.out, records);
    std::map<std::string, int> by_shape;
    for (const auto& r : records) ++by_shape[r.tag.substr(0, r.tag.find_first_of("/:"))];
    const auto checksum = dataset::dataset_checksum(o.out);
    ctx.out << fmt::format("wrote {} records to {}\n", records.size(), o.out);
    for (const auto& [shape, n] : by_shape) ctx.out << fmt::format("  {:<12} {}\n", shape, n);
    ctx.out << fmt::format("checksum {:08x}\n", checksum);
    ctx.outputs = {{"dataset", o.out}, {"records", records.size()}, {"checksum", fmt::format("{:08x}", checksum)}};
    return kOk;
}

// ---- train ---------------------------------------------------------------

struct TrainOptions {
    std::string data;
    std::string preset = "desk";
    std::string out;
    std::string config_file;
    std::uint64_t seed = 0;
    int epochs = 0;
    int batch_size = 0;
    double lr = 0.0;
    int threads = 1;
    int checkpoint_every = 0;
    bool resume = false;
};

int train_command(const TrainOptions& o, const CLI::App& sub, Context& ctx) {
    if (!fs::exists(fs::path(o.data) / "manifest.jsonl"))
        throw Error(ErrorKind::InvalidArgument, "no dataset at " + o.data);
    auto model = model_preset(o.preset);
    auto config = train_preset(o.preset);
    if (!o.config_file.empty()) apply_train_config(config, parse_key_values(read_text(o.config_file)));
    if (sub.count("--seed")) config.seed = o.seed;
    if (sub.count("--epochs")) config.epochs = o.epochs;
    if (sub.count("--batch-size")) config.batch_size = o.batch_size;
    if (sub.count("--lr")) config.lr0 = o.lr;
    if (sub.count("--threads")) config.threads = o.threads;
    if (sub.count("--checkpoint-every")) config.checkpoint_every = o.checkpoint_every;

    const auto records = dataset::read_records(o.data);
    if (records.empty()) throw Error(ErrorKind::InvalidArgument, "dataset " + o.data + " has no records");
    model.max_length = static_cast<int>(records.front().max_length());
    model.check();
    config.check();

    ctx.seed = config.seed;
    ctx.config = {{"preset", o.preset},
                  {"model", json::parse(model::config_to_json(model))},
                  {"train", json::parse(train::train_config_to_json(config))},
                  {"resume", o.resume},
                  {"config_file", o.config_file}};
    ctx.inputs = {{"data", o.data}, {"dataset_checksum", fmt::format("{:08x}", dataset::dataset_checksum(o.data))}};
    make_dir(o.out);
    ctx.out << fmt::format("training on {} records, preset {}\n", records.size(), o.preset);
    const auto state = train::train_loop(records, model, config, o.out, o.resume, [&](const train::EpochRecord& e) {
        ctx.out << fmt::format("epoch {} train {:.6g} val {:.6g} lr {:.3g}\n", e.epoch, e.train_loss, e.val_loss, e.lr);
    });
    const fs::path dir(o.out);
    ctx.outputs = {{"last", (dir / train::kLastCheckpoint).string()},
                   {"best", (dir / train::kBestCheckpoint).string()},
                   {"curve", (dir / train::kCurveFile).string()},
                   {"epochs", state.epoch}};
    return kOk;
}

// ---- generate ------------------------------------------------------------

struct GenerateOptions {
    std::string checkpoint;
    std::string image;
    std::string photo;
    int runs = 1;
    std::uint64_t seed = 0;
    std::string out;
    bool trace = false;
};

inline constexpr const char* kConditionImage = "condition.pgm";

std::string keypoints_name(int run) { return fmt::format("run_{}.csv", run); }

int generate_command(const GenerateOptions& o, Context& ctx) {
    if (o.image.empty() == o.photo.empty()) throw Error(ErrorKind::InvalidArgument, "give exactly one of --image or --photo");
    if (o.runs < 1) throw Error(ErrorKind::InvalidArgument, "--runs must be at least 1");
    ctx.seed = o.seed;
    ctx.config = {{"runs", o.runs}, {"out", o.out}, {"trace", o.trace}};
    ctx.inputs = {{"checkpoint", o.checkpoint}, {"image", o.image}, {"photo", o.photo}};
    const auto ck = train::load_checkpoint(o.checkpoint);
    const int side = ck.model.encoder.image_side;

    Eigen::MatrixXf image;
    if (!o.photo.empty()) {
        image = dataset::silhouette_from_photo(geometry::read_pgm(o.photo)).pixels;
    } else {
        image = geometry::read_pgm(o.image);
    }
    if (image.rows() != side || image.cols() != side)
        throw Error(ErrorKind::ShapeMismatch, fmt::format("conditioning image is {}x{}, the model expects {}x{}", image.cols(),
                                                          image.rows(), side, side));
    make_dir(o.out);
    const fs::path dir(o.out);
    geometry::write_pgm((dir / kConditionImage).string(), image);

    const auto schedule = diffusion::make_cosine_schedule(ck.train.diffusion_steps);
    json runs = json::array();
    for (int k = 0; k < o.runs; ++k) {
        const std::uint64_t run_seed = derive_seed(o.seed, static_cast<std::uint64_t>(k));
        Rng rng(run_seed);
        std::vector<diffusion::TraceRow> trace;
        auto g = diffusion::generate(ck.model, ck.state.params, image, schedule, rng, o.trace ? &trace : nullptr);
        diffusion::project_monotone_extrusion(g.x0, g.length);
        std::string csv = "x,y,e\n";
        for (std::size_t i = 0; i < g.length; ++i)
            csv += fmt::format("{},{},{}\n", eval::format_number(g.x0(0, i)), eval::format_number(g.x0(1, i)),
                               eval::format_number(g.x0(2, i)));
        write_text(dir / keypoints_name(k), csv);
        if (o.trace) diffusion::write_trace_csv((dir / fmt::format("run_{}.trace.csv", k)).string(), trace);
        runs.push_back({{"run", k}, {"seed", run_seed}, {"length", g.length}, {"keypoints", keypoints_name(k)}});
        ctx.out << fmt::format("run {} seed {} length {} -> {}\n", k, run_seed, g.length, (dir / keypoints_name(k)).string());
    }
    write_text(dir / "runs.json", json{{"runs", runs}}.dump(2) + "\n");
    ctx.outputs = {{"condition", (dir / kConditionImage).string()}, {"runs", runs}};
    return kOk;
}

// ---- emit ----------------------------------------------------------------

struct EmitOptions {
    std::string keypoints;
    std::string profile;
    double scale_mm = 0.0;
    double z = 0.2;
    std::string out;
    bool force = false;
};

Eigen::MatrixXd read_keypoint_csv(const std::string& path) {
    std::stringstream ss(read_text(path));
    std::string line;
    std::vector<std::array<double, 3>> rows;
    int number = 0;
    while (std::getline(ss, line)) {
        ++number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || (number == 1 && line.rfind("x", 0) == 0)) continue;
        const auto cells = split(line, ',');
        if (cells.size() != 3) throw Error(ErrorKind::InvalidArgument, fmt::format("{} line {}: expected x,y,e", path, number));
        std::array<double, 3> row{};
        for (int c = 0; c < 3; ++c) row[c] = to_number(fmt::format("line {}", number), cells[c]);
        rows.push_back(row);
    }
    if (rows.empty()) throw Error(ErrorKind::InvalidArgument, path + " has no keypoints");
    Eigen::MatrixXd x0(3, static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < 3; ++c) x0(c, static_cast<Eigen::Index>(i)) = rows[i][c];
    return x0;
}

int emit_command(const EmitOptions& o, Context& ctx) {
    if (!(o.scale_mm > 0.0)) throw Error(ErrorKind::InvalidArgument, "--scale-mm must be positive");
    ctx.config = {{"scale_mm", o.scale_mm}, {"z", o.z}, {"force", o.force}, {"out", o.out}};
    ctx.inputs = {{"keypoints", o.keypoints}, {"profile", o.profile}};
    const auto profile = o.profile.empty() ? gcode::PrinterProfile{} : gcode::load_profile(o.profile);
    ctx.config["profile"] = gcode::format_profile(profile);
    const Eigen::MatrixXd x0 = read_keypoint_csv(o.keypoints);

    // Model units carry no physical scale: the part's larger side becomes
    // scale_mm, centered on the bed, depositing kExtrusionPerMm along the path.
    dataset::NormalizationParams norm;
    norm.xy_scale = 0.5 * o.scale_mm;
    norm.xy_mid = {0.5 * (profile.build_min_x + profile.build_max_x), 0.5 * (profile.build_min_y + profile.build_max_y)};
    double length = 0.0;
    for (Eigen::Index i = 1; i < x0.cols(); ++i) length += (x0.block<2, 1>(0, i) - x0.block<2, 1>(0, i - 1)).norm();
    norm.e_min = 0.0;
    norm.e_max = geometry::kExtrusionPerMm * length * norm.xy_scale;
    norm.degenerate_e = !(norm.e_max > 0.0);
    dataset::DenormalizeOptions options;
    options.extrusion_multiplier = profile.extrusion_multiplier;
    const auto keypoints = dataset::denormalize(x0, Eigen::VectorXd::Ones(x0.cols()), norm, options);

    const auto report = gcode::validate_layer(keypoints, profile);
    ctx.outputs = {{"violations", report.violations.size()}};
    if (!report.valid()) {
        const std::size_t shown = std::min<std::size_t>(report.violations.size(), 10);
        for (std::size_t i = 0; i < shown; ++i)
            ctx.err << fmt::format("{}: keypoint {}: {}\n", o.force ? "warning" : "error", report.violations[i].index,
                                   report.violations[i].detail);
        if (report.violations.size() > shown) ctx.err << fmt::format("... {} more\n", report.violations.size() - shown);
        if (!o.force)
            throw ValidationRefused(fmt::format("{} validation violation(s); use --force to emit anyway",
                                                report.violations.size()));
    }
    const fs::path out(o.out);
    if (out.has_parent_path()) make_dir(out.parent_path());
    write_text(out, gcode::emit_layer(keypoints, profile, o.z));
    ctx.out << fmt::format("wrote {} keypoints to {}\n", keypoints.size(), o.out);
    ctx.outputs["gcode"] = o.out;
    return kOk;
}

// ---- evaluate ------------------------------------------------------------

struct EvaluateOptions {
    std::string truth;
    std::vector<std::string> generated;
    std::string out;
    double line_width = eval::kLineWidth;
    double grid_pitch = eval::kGridPitch;
    std::uint64_t seed = 0;
};

// Layers mapped into the truth layer's normalized frame.
std::vector<eval::Layer> normalized(const std::vector<eval::Layer>& layers, const std::vector<eval::Layer>& truth) {
    std::vector<eval::Layer> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto norm = dataset::normalize({0.0, truth[l]}, truth[l].size()).norm;
        eval::Layer mapped;
        for (const auto& k : layers[l])
            mapped.push_back({(k.x - norm.xy_mid.x()) / norm.xy_scale, (k.y - norm.xy_mid.y()) / norm.xy_scale, k.e});
        out.push_back(std::move(mapped));
    }
    return out;
}

json summary_json(const eval::Evaluation& ev) {
    if (!ev.summary) return nullptr;
    const auto& s = *ev.summary;
    return {{"truth_mean", s.truth_mean},
            {"generated_mean", s.generated_mean},
            {"truth_ci", {{"lo", s.truth_ci.lo}, {"hi", s.truth_ci.hi}}},
            {"generated_ci", {{"lo", s.generated_ci.lo}, {"hi", s.generated_ci.hi}}},
            {"reduction_percent", s.reduction_percent}};
}

int evaluate_command(const EvaluateOptions& o, Context& ctx) {
    ctx.seed = o.seed;
    ctx.config = {{"line_width", o.line_width}, {"grid_pitch", o.grid_pitch}, {"out", o.out}};
    ctx.inputs = {{"truth", o.truth}, {"generated", o.generated}};
    const auto truth = load_layers(o.truth);
    std::vector<std::vector<eval::Layer>> runs;
    for (const auto& g : o.generated) {
        runs.push_back(load_layers(g));
        if (runs.back().size() != truth.size())
            throw Error(ErrorKind::InvalidArgument,
                        fmt::format("{} has {} layers, truth has {}", g, runs.back().size(), truth.size()));
    }
    eval::EvaluateOptions options;
    options.line_width = o.line_width;
    options.grid_pitch = o.grid_pitch;
    options.seed = o.seed;
    const auto ev = eval::evaluate(truth, runs, options);
    make_dir(o.out);
    eval::emit_plots({.evaluation = &ev, .truth_layers = &truth, .run_layers = &runs, .line_width = o.line_width,
                      .seed = o.seed},
                     o.out);

    // Travel units: millimetres as parsed, and normalized by each truth layer's scale.
    std::vector<std::vector<eval::Layer>> runs_norm;
    for (const auto& r : runs) runs_norm.push_back(normalized(r, truth));
    const auto truth_norm = normalized(truth, truth);
    const auto ev_norm = eval::evaluate(truth_norm, runs_norm, options);
    const fs::path summary_path = fs::path(o.out) / eval::kSummaryJson;
    json summary = json::parse(read_text(summary_path));
    summary["units"] = "mm";
    summary["normalized"] = summary_json(ev_norm);
    write_text(summary_path, summary.dump(2) + "\n");

    if (ev.summary) {
        ctx.out << fmt::format("layers {} runs {}\n", truth.size(), runs.size());
        ctx.out << fmt::format("travel mean truth {:.4f} generated {:.4f} mm, reduction {:.4f}%\n", ev.summary->truth_mean,
                               ev.summary->generated_mean, ev.summary->reduction_percent);
        ctx.out << fmt::format("mean iou {:.4f}\n", summary.value("mean_iou", 0.0));
    } else {
        ctx.out << fmt::format("layers {} runs 0\n", truth.size());
    }
    ctx.outputs = {{"dir", o.out}, {"summary", summary}};
    return kOk;
}

void write_manifest(const Context& ctx, const std::string& subcommand, const std::vector<std::string>& args,
                    const std::string& started, int code, const std::string& message) {
    if (ctx.manifest.empty()) return;
    const json doc = {{"subcommand", subcommand},
                      {"arguments", args},
                      {"config", ctx.config},
                      {"seed", ctx.seed},
                      {"inputs", ctx.inputs},
                      {"outputs", ctx.outputs},
                      {"tool_version", SLICEPATH_VERSION},
                      {"started_at", started},
                      {"finished_at", utc_now()},
                      {"exit_code", code},
                      {"status", code == kOk ? "ok" : "error"},
                      {"message", message}};
    std::error_code ec;
    if (ctx.manifest.has_parent_path()) fs::create_directories(ctx.manifest.parent_path(), ec);
    std::ofstream out(ctx.manifest, std::ios::binary);
    out << doc.dump(2) << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Slice images to extrusion toolpaths with a conditional diffusion model", "slicepath"};
    app.set_version_flag("--version", SLICEPATH_VERSION);
    app.require_subcommand(1);

    BuildDataOptions build;
    auto* build_cmd = app.add_subcommand("build-data", "Build a training dataset from STL/G-code pairs or synthetic shapes");
    build_cmd->add_option("--stl", build.stl_dir, "Directory of STL files with same-stem .gcode files");
    build_cmd->add_option("--synthetic", build.synthetic, "Shapes x infills, e.g. \"square,circle x rectilinear,concentric\"");
    build_cmd->add_option("--count", build.count, "Number of synthetic records")->capture_default_str();
    build_cmd->add_option("--out", build.out, "Output dataset directory")->required();
    build_cmd->add_option("--n-max", build.n_max, "Sequence length")->capture_default_str();
    build_cmd->add_option("--seed", build.seed, "Random seed")->capture_default_str();

    TrainOptions tr;
    auto* train_cmd = app.add_subcommand("train", "Train the denoiser");
    train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
    train_cmd->add_option("--preset", tr.preset, "Model and schedule preset")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->capture_default_str();
    train_cmd->add_option("--out", tr.out, "Checkpoint directory")->required();
    train_cmd->add_option("--config", tr.config_file, "key = value training overrides");
    train_cmd->add_option("--seed", tr.seed, "Random seed");
    train_cmd->add_option("--epochs", tr.epochs, "Total epochs");
    train_cmd->add_option("--batch-size", tr.batch_size, "Batch size");
    train_cmd->add_option("--lr", tr.lr, "Initial learning rate");
    train_cmd->add_option("--threads", tr.threads, "Worker threads (1 = fully deterministic)");
    train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "Epochs between checkpoint writes");
    train_cmd->add_flag("--resume", tr.resume, "Continue from the last checkpoint in --out");

    GenerateOptions gen;
    auto* gen_cmd = app.add_subcommand("generate", "Sample toolpaths for a slice image or photo");
    gen_cmd->add_option("--checkpoint", gen.checkpoint, "Trained checkpoint")->required();
    gen_cmd->add_option("--image", gen.image, "Slice image (PGM)");
    gen_cmd->add_option("--photo", gen.photo, "Photo or sketch (PGM)");
    gen_cmd->add_option("--runs", gen.runs, "Independent samples")->capture_default_str();
    gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_flag("--trace", gen.trace, "Write per-step sampler norms");

    EmitOptions em;
    auto* emit_cmd = app.add_subcommand("emit", "Validate generated keypoints and write G-code");
    emit_cmd->add_option("--keypoints", em.keypoints, "Normalized keypoints CSV")->required();
    emit_cmd->add_option("--profile", em.profile, "Printer profile (key = value)");
    emit_cmd->add_option("--scale-mm", em.scale_mm, "Printed size of the part's larger side")->required();
    emit_cmd->add_option("--z", em.z, "Layer height")->capture_default_str();
    emit_cmd->add_option("--out", em.out, "Output .gcode file")->required();
    emit_cmd->add_flag("--force", em.force, "Emit even when validation fails");

    EvaluateOptions ev;
    auto* eval_cmd = app.add_subcommand("evaluate", "Compare generated toolpaths with ground truth");
    eval_cmd->add_option("--truth", ev.truth, "Ground-truth G-code file or directory")->required();
    eval_cmd->add_option("--generated", ev.generated, "One G-code file or directory per run");
    eval_cmd->add_option("--out", ev.out, "Output directory")->required();
    eval_cmd->add_option("--line-width", ev.line_width, "Stroke width for overlap")->capture_default_str();
    eval_cmd->add_option("--grid-pitch", ev.grid_pitch, "Raster pitch for overlap")->capture_default_str();
    eval_cmd->add_option("--seed", ev.seed, "Bootstrap seed")->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::CallForVersion&) {
        out << SLICEPATH_VERSION << "\n";
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        return kInputError;
    }

    Context ctx{out, err};
    const std::string started = utc_now();
    std::string name;
    int code = kOk;
    std::string message;
    try {
        if (build_cmd->parsed()) {
            name = "build-data";
            ctx.seed = build.seed;
            ctx.manifest = fs::path(build.out) / kRunManifest;
            code = build_data(build, ctx);
        } else if (train_cmd->parsed()) {
            name = "train";
            ctx.manifest = fs::path(tr.out) / kRunManifest;
            code = train_command(tr, *train_cmd, ctx);
        } else if (gen_cmd->parsed()) {
            name = "generate";
            ctx.manifest = fs::path(gen.out) / kRunManifest;
            code = generate_command(gen, ctx);
        } else if (emit_cmd->parsed()) {
            name = "emit";
            ctx.manifest = fs::path(em.out + ".manifest.json");
            code = emit_command(em, ctx);
        } else if (eval_cmd->parsed()) {
            name = "evaluate";
            ctx.manifest = fs::path(ev.out) / kRunManifest;
            code = evaluate_command(ev, ctx);
        }
    } catch (const Error& e) {
        code = exit_code_for(e.kind());
        message = e.what();
    } catch (const ValidationRefused& e) {
        code = kValidationError;
        message = e.what();
    } catch (const std::exception& e) {
        code = kUnexpected;
        message = e.what();
    }
    if (code != kOk) err << "slicepath " << name << ": " << message << "\n";
    try {
        write_manifest(ctx, name, args, started, code, message);
    } catch (const std::exception& e) {
        err << "cannot write run manifest: " << e.what() << "\n";
    }
    return code;
}

}  // namespace slicepath::cli
