#include "slicepath/checkpoint.h"

#include <fmt/format.h>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "slicepath/error.h"

namespace slicepath::model {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'S', 'P', 'C', 'K'};

template <typename U>
void put(std::string& out, U value) {
    static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
    char raw[sizeof(U)];
    std::memcpy(raw, &value, sizeof(U));
    out.append(raw, sizeof(U));
}

template <typename U>
U get(const std::string& in, std::size_t& pos) {
    static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
    if (pos + sizeof(U) > in.size()) throw Error(ErrorKind::TruncatedFile, "checkpoint ends early");
    U value;
    std::memcpy(&value, in.data() + pos, sizeof(U));
    pos += sizeof(U);
    return value;
}

const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& s) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    throw Error(ErrorKind::SchemaVersionMismatch, "unknown dtype " + s);
}

}  // namespace

const NamedArray& Archive::find(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return a;
    }
    throw Error(ErrorKind::ShapeMismatch, "checkpoint has no array " + name);
}

bool Archive::contains(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return true;
    }
    return false;
}

void save_archive(const std::string& path, const Archive& archive) {
    std::string payload;
    json table = json::array();
    for (const auto& a : archive.arrays) {
        table.push_back({{"name", a.name}, {"dtype", dtype_name(a.dtype)}, {"rows", a.values.rows()}, {"cols", a.values.cols()}});
        if (a.dtype == DType::F32) {
            const Eigen::MatrixXf narrow = a.values.cast<float>();
            payload.append(reinterpret_cast<const char*>(narrow.data()), sizeof(float) * static_cast<std::size_t>(narrow.size()));
        } else {
            payload.append(reinterpret_cast<const char*>(a.values.data()),
                           sizeof(double) * static_cast<std::size_t>(a.values.size()));
        }
    }
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size()));
    const json header = {{"metadata", json::parse(archive.metadata)}, {"arrays", table}, {"crc32", crc}};
    const std::string header_text = header.dump();

    std::string out(kMagic, 4);
    put(out, kArchiveVersion);
    put(out, static_cast<std::uint64_t>(header_text.size()));
    out += header_text;
    out += payload;

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw Error(ErrorKind::IoFailure, "cannot write " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error(ErrorKind::IoFailure, fmt::format("cannot move checkpoint into {}: {}", path, ec.message()));
}

Archive load_archive(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::IoFailure, "cannot open " + path);
    const std::string in{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0) throw Error(ErrorKind::BadMagic, path + " is not a checkpoint");
    std::size_t pos = 4;
    const auto version = get<std::uint32_t>(in, pos);
    if (version != kArchiveVersion) {
        throw Error(ErrorKind::SchemaVersionMismatch, fmt::format("checkpoint version {} (expected {})", version, kArchiveVersion));
    }
    const auto header_size = get<std::uint64_t>(in, pos);
    if (pos + header_size > in.size()) throw Error(ErrorKind::TruncatedFile, "checkpoint header truncated");
    json header;
    try {
        header = json::parse(in.substr(pos, header_size));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::SchemaVersionMismatch, std::string("bad checkpoint header: ") + e.what());
    }
    pos += header_size;
    const std::string payload = in.substr(pos);
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size()));
    if (crc != header.at("crc32").get<std::uint64_t>()) throw Error(ErrorKind::ChecksumMismatch, path + " payload checksum mismatch");

    Archive archive;
    archive.metadata = header.at("metadata").dump();
    std::size_t at = 0;
    for (const auto& entry : header.at("arrays")) {
        NamedArray a;
        a.name = entry.at("name").get<std::string>();
        a.dtype = parse_dtype(entry.at("dtype").get<std::string>());
        const auto rows = entry.at("rows").get<Eigen::Index>();
        const auto cols = entry.at("cols").get<Eigen::Index>();
        const std::size_t width = a.dtype == DType::F32 ? sizeof(float) : sizeof(double);
        const std::size_t bytes = width * static_cast<std::size_t>(rows * cols);
        if (rows < 0 || cols < 0 || at + bytes > payload.size()) throw Error(ErrorKind::TruncatedFile, "checkpoint payload truncated");
        if (a.dtype == DType::F32) {
            Eigen::MatrixXf narrow(rows, cols);
            std::memcpy(narrow.data(), payload.data() + at, bytes);
            a.values = narrow.cast<double>();
        } else {
            a.values.resize(rows, cols);
            std::memcpy(a.values.data(), payload.data() + at, bytes);
        }
        at += bytes;
        archive.arrays.push_back(std::move(a));
    }
    if (at != payload.size()) throw Error(ErrorKind::ShapeMismatch, "checkpoint payload has trailing bytes");
    return archive;
}

std::string config_to_json(const ModelConfig& c) {
    const json j = {
        {"encoder",
         {{"image_side", c.encoder.image_side},
          {"patch_size", c.encoder.patch_size},
          {"embed_dim", c.encoder.embed_dim},
          {"depth", c.encoder.depth},
          {"heads", c.encoder.heads},
          {"mlp_ratio", c.encoder.mlp_ratio}}},
        {"unet",
         {{"in_channels", c.unet.in_channels},
          {"base_channels", c.unet.base_channels},
          {"multipliers", c.unet.multipliers},
          {"head_dim", c.unet.head_dim},
          {"attention_levels", c.unet.attention_levels},
          {"max_groups", c.unet.max_groups}}},
        {"max_length", c.max_length},
        {"length_hidden", c.length_hidden},
    };
    return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
    ModelConfig c;
    try {
        const json j = json::parse(text);
        const auto& e = j.at("encoder");
        c.encoder.image_side = e.at("image_side");
        c.encoder.patch_size = e.at("patch_size");
        c.encoder.embed_dim = e.at("embed_dim");
        c.encoder.depth = e.at("depth");
        c.encoder.heads = e.at("heads");
        c.encoder.mlp_ratio = e.at("mlp_ratio");
        const auto& u = j.at("unet");
        c.unet.in_channels = u.at("in_channels");
        c.unet.base_channels = u.at("base_channels");
        c.unet.multipliers = u.at("multipliers").get<std::vector<int>>();
        c.unet.head_dim = u.at("head_dim");
        c.unet.attention_levels = u.at("attention_levels");
        c.unet.max_groups = u.at("max_groups");
        c.max_length = j.at("max_length");
        c.length_hidden = j.at("length_hidden");
    } catch (const json::exception& e) {
        throw Error(ErrorKind::SchemaVersionMismatch, std::string("bad model config: ") + e.what());
    }
    c.check();
    return c;
}

template <typename T>
void append_parameters(Archive& archive, const std::string& prefix, const Parameters<T>& params, DType dtype) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        archive.arrays.push_back({prefix + params.name(i), dtype, params[i].template cast<double>()});
    }
}

template <typename T>
Parameters<T> extract_parameters(const Archive& archive, const std::string& prefix) {
    Parameters<T> out;
    for (const auto& a : archive.arrays) {
        if (a.name.compare(0, prefix.size(), prefix) == 0) out.add(a.name.substr(prefix.size()), a.values.cast<T>());
    }
    return out;
}

template void append_parameters<float>(Archive&, const std::string&, const Parameters<float>&, DType);
template void append_parameters<double>(Archive&, const std::string&, const Parameters<double>&, DType);
template Parameters<float> extract_parameters<float>(const Archive&, const std::string&);
template Parameters<double> extract_parameters<double>(const Archive&, const std::string&);

}  // namespace slicepath::model
