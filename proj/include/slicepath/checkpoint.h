#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "slicepath/model.h"

namespace slicepath::model {

enum class DType { F32, F64 };

struct NamedArray {
    std::string name;
    DType dtype = DType::F32;
    Eigen::MatrixXd values;
};

// Named-array container. Layout: "SPCK", u32 version, u64 header size, JSON
// header (metadata, array table, payload CRC-32), then each array column-major
// little-endian in its dtype.
struct Archive {
    std::string metadata = "{}";  // JSON object
    std::vector<NamedArray> arrays;

    const NamedArray& find(const std::string& name) const;
    bool contains(const std::string& name) const;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

// Written to a temporary file first, then renamed into place.
void save_archive(const std::string& path, const Archive& archive);
Archive load_archive(const std::string& path);

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

template <typename T>
void append_parameters(Archive& archive, const std::string& prefix, const Parameters<T>& params, DType dtype);

// Every array whose name starts with prefix, in archive order.
template <typename T>
Parameters<T> extract_parameters(const Archive& archive, const std::string& prefix);

}  // namespace slicepath::model
