#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace unmix::datagen {

// Single-channel luminance grid, values in [0,1], row-major.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> px;

    Image() = default;
    Image(int h, int w) : height(h), width(w), px(static_cast<std::size_t>(h) * w, 0.0f) {}

    float& at(int r, int c) { return px[static_cast<std::size_t>(r) * width + c]; }
    float at(int r, int c) const { return px[static_cast<std::size_t>(r) * width + c]; }
};

enum class ShapeKind { triangle, circle };

// Center coordinates and scale are fractions of the image width; scale is the
// side of the shape's square bounding box.
struct ShapeSpec {
    ShapeKind kind = ShapeKind::circle;
    double center_x = 0.5;
    double center_y = 0.5;
    double scale = 0.5;
};

struct SourceImage {
    Image image;
    ShapeKind role = ShapeKind::circle;
};

struct MixingConfig {
    double alpha = 6.0;
    int kernel_size = 7;
    std::vector<double> kernel;  // row-major kernel_size^2; empty -> default kernel
    double flip_probability = 0.5;
    std::uint64_t seed = 0;
};

struct MixtureSample {
    Image mixture;
    std::vector<SourceImage> sources;  // [triangle, circle]
    std::uint64_t seed = 0;
};

struct DatasetSplit {
    std::vector<MixtureSample> train;
    std::vector<MixtureSample> test;
};

// Flat [count, height, width] pixel store used by the training/eval loaders.
struct ImageStack {
    std::int64_t count = 0;
    int height = 0;
    int width = 0;
    std::vector<float> px;

    const float* sample(std::int64_t i) const {
        return px.data() + static_cast<std::size_t>(i) * height * width;
    }
};

struct DatasetMeta {
    int image_size = 0;
    std::int64_t n_train = 0;
    std::int64_t n_test = 0;
    double split_fraction = 0.8;
    MixingConfig mixing;
};

// 7x7 distortion kernel: a centered identity tap averaged with a Gaussian blob
// displaced (+2,+2), so edges come out shifted and blurred. Normalized to
// unit sum.
std::vector<double> default_distortion_kernel();

Image render_shape(const ShapeSpec& spec, int resolution);
Image downsample_bilinear(const Image& img, int target);

// (x - min) / (max - min); a constant grid maps to all zeros.
Image minmax_scale(const Image& img);
void minmax_scale_inplace(std::vector<double>& grid);

MixtureSample mix(const SourceImage& tri, const SourceImage& circ, const MixingConfig& cfg);

// Renders each pair at 2x `image_size` then downsamples. Deterministic in
// (cfg.seed, arguments); sample i depends only on its derived seed, so
// generation may run on any number of threads.
DatasetSplit generate_dataset(std::int64_t n_pairs, int image_size, const MixingConfig& cfg,
                              double split_fraction, int threads = 0);

// Streaming variant for large datasets: writes blobs + manifest directly.
void generate_dataset_to_dir(std::int64_t n_pairs, int image_size, const MixingConfig& cfg,
                             double split_fraction, const std::string& dir, int threads = 0);

void save_dataset(const DatasetSplit& split, int image_size, const MixingConfig& cfg,
                  double split_fraction, const std::string& dir);

DatasetMeta read_manifest(const std::string& dir);

enum class Role { mixtures, sources_triangle, sources_circle };

ImageStack load_stack(const std::string& dir, const std::string& split, Role role);

std::string role_filename(const std::string& split, Role role);

}  // namespace unmix::datagen
