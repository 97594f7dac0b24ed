#include "slicepath/dataset.h"

#include <fmt/format.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "slicepath/error.h"

namespace slicepath::dataset {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormatName = "slicepath-records";

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    out.insert(out.end(), raw.begin(), raw.end());
}

template <typename T>
T get_le(const std::uint8_t* p) {
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
}

std::vector<std::uint8_t> as_bytes(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TrainingRecord normalize(const gcode::LayerToolpath& layer, std::size_t n_max) {
    const auto& ks = layer.keypoints;
    if (ks.empty()) throw Error(ErrorKind::InvalidArgument, "cannot normalize an empty layer");
    if (n_max == 0) throw Error(ErrorKind::InvalidArgument, "n_max must be positive");

    double x_lo = ks[0].x, x_hi = ks[0].x, y_lo = ks[0].y, y_hi = ks[0].y, e_lo = ks[0].e, e_hi = ks[0].e;
    for (const auto& k : ks) {
        x_lo = std::min(x_lo, k.x);
        x_hi = std::max(x_hi, k.x);
        y_lo = std::min(y_lo, k.y);
        y_hi = std::max(y_hi, k.y);
        e_lo = std::min(e_lo, k.e);
        e_hi = std::max(e_hi, k.e);
    }

    TrainingRecord record;
    auto& norm = record.norm;
    norm.xy_mid = Vec2(0.5 * (x_lo + x_hi), 0.5 * (y_lo + y_hi));
    const double half = 0.5 * std::max(x_hi - x_lo, y_hi - y_lo);
    norm.xy_scale = half > 0.0 ? half : 1.0;
    norm.e_min = e_lo;
    norm.e_max = e_hi;
    norm.degenerate_e = e_hi - e_lo < kDegenerateExtrusion;

    record.true_len = std::min(ks.size(), n_max);
    record.x0 = Eigen::MatrixXd::Zero(3, static_cast<Eigen::Index>(n_max));
    record.mask = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_max));
    for (std::size_t i = 0; i < record.true_len; ++i) {
        const auto c = static_cast<Eigen::Index>(i);
        record.x0(0, c) = (ks[i].x - norm.xy_mid.x()) / norm.xy_scale;
        record.x0(1, c) = (ks[i].y - norm.xy_mid.y()) / norm.xy_scale;
        record.x0(2, c) = norm.degenerate_e ? 0.0 : 2.0 * (ks[i].e - e_lo) / (e_hi - e_lo) - 1.0;
        record.mask(c) = 1.0;
    }
    return record;
}

std::vector<gcode::Keypoint> denormalize(const Eigen::MatrixXd& x0, const Eigen::VectorXd& mask,
                                         const NormalizationParams& norm, const DenormalizeOptions& options) {
    if (x0.rows() != 3 || x0.cols() != mask.size()) {
        throw Error(ErrorKind::ShapeMismatch,
                    fmt::format("x0 is {}x{}, mask has {} entries", x0.rows(), x0.cols(), mask.size()));
    }
    const double scale = options.xy_scale.value_or(norm.xy_scale);
    const Vec2 mid = options.xy_mid.value_or(norm.xy_mid);
    std::vector<gcode::Keypoint> out;
    for (Eigen::Index i = 0; i < x0.cols(); ++i) {
        if (mask(i) <= 0.5) continue;
        gcode::Keypoint k;
        k.x = mid.x() + x0(0, i) * scale;
        k.y = mid.y() + x0(1, i) * scale;
        k.e = norm.degenerate_e ? norm.e_min : norm.e_min + 0.5 * (x0(2, i) + 1.0) * (norm.e_max - norm.e_min);
        out.push_back(k);
    }
    if (out.empty()) throw Error(ErrorKind::MaskEmpty, "mask selects no keypoints");
    if (options.extrusion_multiplier != 1.0) {
        const double base = out.front().e;
        for (auto& k : out) k.e = base + options.extrusion_multiplier * (k.e - base);
    }
    return out;
}

RecordWriter::RecordWriter(std::string directory) : directory_(std::move(directory)) {
    std::error_code ec;
    fs::create_directories(fs::path(directory_) / "images", ec);
    fs::create_directories(fs::path(directory_) / "blobs", ec);
    if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + directory_ + ": " + ec.message());
    const json header = {{"format", kFormatName}, {"version", kSchemaVersion}};
    std::ofstream out(fs::path(directory_) / "manifest.jsonl", std::ios::trunc);
    out << header.dump() << '\n';
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write manifest in " + directory_);
}

void RecordWriter::append(const TrainingRecord& r) {
    if (r.x0.rows() != 3 || r.x0.cols() != r.mask.size()) {
        throw Error(ErrorKind::ShapeMismatch, "record x0/mask shapes disagree");
    }
    const std::string stem = fmt::format("{:06d}", count_);
    const std::string image_rel = "images/" + stem + ".pgm";
    const std::string x0_rel = "blobs/" + stem + ".x0.f64";
    const std::string mask_rel = "blobs/" + stem + ".mask.f32";
    const fs::path root(directory_);

    const auto image_bytes = as_bytes(geometry::encode_pgm(r.image.pixels));
    std::vector<std::uint8_t> x0_bytes;
    x0_bytes.reserve(static_cast<std::size_t>(r.x0.size()) * 8);
    for (Eigen::Index c = 0; c < r.x0.cols(); ++c) {
        for (Eigen::Index ch = 0; ch < 3; ++ch) put_le(x0_bytes, r.x0(ch, c));
    }
    std::vector<std::uint8_t> mask_bytes;
    for (Eigen::Index i = 0; i < r.mask.size(); ++i) put_le(mask_bytes, static_cast<float>(r.mask(i)));

    write_file(root / image_rel, image_bytes);
    write_file(root / x0_rel, x0_bytes);
    write_file(root / mask_rel, mask_bytes);

    const json line = {
        {"index", count_},
        {"tag", r.tag},
        {"true_len", r.true_len},
        {"n_max", r.x0.cols()},
        {"image", image_rel},
        {"pixel_pitch", r.image.pixel_pitch},
        {"origin", {r.image.origin.x(), r.image.origin.y()}},
        {"x0", x0_rel},
        {"mask", mask_rel},
        {"norm",
         {{"xy_mid", {r.norm.xy_mid.x(), r.norm.xy_mid.y()}},
          {"xy_scale", r.norm.xy_scale},
          {"e_min", r.norm.e_min},
          {"e_max", r.norm.e_max},
          {"degenerate_e", r.norm.degenerate_e}}},
        {"crc32", {{"image", crc_of(image_bytes)}, {"x0", crc_of(x0_bytes)}, {"mask", crc_of(mask_bytes)}}},
    };
    std::ofstream out(root / "manifest.jsonl", std::ios::app);
    out << line.dump() << '\n';
    if (!out) throw Error(ErrorKind::IoFailure, "cannot append to manifest in " + directory_);
    ++count_;
}

void write_records(const std::string& directory, std::span<const TrainingRecord> records) {
    RecordWriter writer(directory);
    for (const auto& r : records) writer.append(r);
}

std::vector<TrainingRecord> read_records(const std::string& directory) {
    const fs::path root(directory);
    std::ifstream in(root / "manifest.jsonl");
    if (!in) throw Error(ErrorKind::IoFailure, "no manifest.jsonl in " + directory);
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::SchemaVersionMismatch, "empty manifest");
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::SchemaVersionMismatch, std::string("unreadable manifest header: ") + e.what());
    }
    if (header.value("format", "") != kFormatName || header.value("version", -1) != kSchemaVersion) {
        throw Error(ErrorKind::SchemaVersionMismatch,
                    fmt::format("manifest header {} does not match {} v{}", line, kFormatName, kSchemaVersion));
    }

    std::vector<TrainingRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        TrainingRecord r;
        try {
            const json j = json::parse(line);
            const auto n_max = j.at("n_max").get<Eigen::Index>();
            const auto image_bytes = read_file(root / j.at("image").get<std::string>());
            const auto x0_bytes = read_file(root / j.at("x0").get<std::string>());
            const auto mask_bytes = read_file(root / j.at("mask").get<std::string>());
            const auto& crc = j.at("crc32");
            if (crc.at("image").get<std::uint32_t>() != crc_of(image_bytes) ||
                crc.at("x0").get<std::uint32_t>() != crc_of(x0_bytes) ||
                crc.at("mask").get<std::uint32_t>() != crc_of(mask_bytes)) {
                throw Error(ErrorKind::ChecksumMismatch, fmt::format("record {} fails its checksum", records.size()));
            }
            if (x0_bytes.size() != static_cast<std::size_t>(n_max) * 3 * 8 ||
                mask_bytes.size() != static_cast<std::size_t>(n_max) * 4) {
                throw Error(ErrorKind::ShapeMismatch, fmt::format("record {} blob sizes disagree with n_max", records.size()));
            }
            r.image.pixels = geometry::decode_pgm(image_bytes);
            r.image.pixel_pitch = j.at("pixel_pitch").get<double>();
            r.image.origin = Vec2(j.at("origin").at(0).get<double>(), j.at("origin").at(1).get<double>());
            r.x0.resize(3, n_max);
            r.mask.resize(n_max);
            for (Eigen::Index c = 0; c < n_max; ++c) {
                for (Eigen::Index ch = 0; ch < 3; ++ch) r.x0(ch, c) = get_le<double>(x0_bytes.data() + 8 * (3 * c + ch));
                r.mask(c) = get_le<float>(mask_bytes.data() + 4 * c);
            }
            const auto& norm = j.at("norm");
            r.norm.xy_mid = Vec2(norm.at("xy_mid").at(0).get<double>(), norm.at("xy_mid").at(1).get<double>());
            r.norm.xy_scale = norm.at("xy_scale").get<double>();
            r.norm.e_min = norm.at("e_min").get<double>();
            r.norm.e_max = norm.at("e_max").get<double>();
            r.norm.degenerate_e = norm.at("degenerate_e").get<bool>();
            r.true_len = j.at("true_len").get<std::size_t>();
            r.tag = j.value("tag", "");
        } catch (const json::exception& e) {
            throw Error(ErrorKind::SchemaVersionMismatch, fmt::format("record {}: {}", records.size(), e.what()));
        }
        records.push_back(std::move(r));
    }
    return records;
}

std::uint32_t dataset_checksum(const std::string& directory) {
    return crc_of(read_file(fs::path(directory) / "manifest.jsonl"));
}

}  // namespace slicepath::dataset
