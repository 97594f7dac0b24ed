#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slicepath/gcode.h"
#include "slicepath/geometry.h"

namespace slicepath::dataset {

using geometry::SliceImage;
using geometry::Vec2;

inline constexpr std::size_t kDefaultMaxLength = 512;
inline constexpr double kDegenerateExtrusion = 1e-9;

struct NormalizationParams {
    Vec2 xy_mid = Vec2::Zero();
    double xy_scale = 1.0;  // half of the larger bounding-box side
    double e_min = 0.0;
    double e_max = 0.0;
    bool degenerate_e = false;

    bool operator==(const NormalizationParams&) const = default;
};

// One (slice image, toolpath) training pair in model units. x0 is channels
// first: row 0 = X, row 1 = Y, row 2 = E; columns are sequence steps.
struct TrainingRecord {
    SliceImage image;
    Eigen::MatrixXd x0;
    Eigen::VectorXd mask;
    NormalizationParams norm;
    std::size_t true_len = 0;
    std::string tag;

    std::size_t max_length() const { return static_cast<std::size_t>(x0.cols()); }
};

// Parameters come from the whole layer; only the first n_max keypoints are kept.
TrainingRecord normalize(const gcode::LayerToolpath& layer, std::size_t n_max = kDefaultMaxLength);

struct DenormalizeOptions {
    std::optional<double> xy_scale;  // overrides norm.xy_scale (uniform rescale)
    std::optional<Vec2> xy_mid;      // overrides norm.xy_mid (placement)
    double extrusion_multiplier = 1.0;
};

std::vector<gcode::Keypoint> denormalize(const Eigen::MatrixXd& x0, const Eigen::VectorXd& mask,
                                         const NormalizationParams& norm, const DenormalizeOptions& options = {});

// Turns a photograph or sketch into a framed binary silhouette.
SliceImage silhouette_from_photo(const Eigen::MatrixXf& gray);

// Pieces of the photo pipeline, exposed for testing.
Eigen::MatrixXf gaussian_blur(const Eigen::MatrixXf& image, double sigma);
Eigen::MatrixXf sobel_magnitude(const Eigen::MatrixXf& image);
float otsu_threshold(const Eigen::MatrixXf& values);

// Intersection over union of two binary rasters (pixels > 0.5 are set).
double iou(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b);

inline constexpr int kSchemaVersion = 1;

// On-disk layout:
//   manifest.jsonl           header line, then one JSON object per record
//   images/NNNNNN.pgm        slice image
//   blobs/NNNNNN.x0.f64      x0, little-endian float64, step-major (X,Y,E per step)
//   blobs/NNNNNN.mask.f32    mask, little-endian float32
class RecordWriter {
public:
    explicit RecordWriter(std::string directory);

    void append(const TrainingRecord& record);
    std::size_t count() const { return count_; }

private:
    std::string directory_;
    std::size_t count_ = 0;
};

void write_records(const std::string& directory, std::span<const TrainingRecord> records);
std::vector<TrainingRecord> read_records(const std::string& directory);

// CRC-32 of the manifest, which covers every blob checksum.
std::uint32_t dataset_checksum(const std::string& directory);

}  // namespace slicepath::dataset
