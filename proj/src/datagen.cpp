#include "unmix/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "unmix/errors.hpp"
#include "unmix/io.hpp"
#include "unmix/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace unmix::datagen {

namespace {

constexpr double kScaleMin = 0.40;
constexpr double kScaleMax = 0.60;

void validate_spec(const ShapeSpec& spec) {
    if (spec.scale < kScaleMin - 1e-12 || spec.scale > kScaleMax + 1e-12)
        throw std::invalid_argument("ShapeSpec: scale outside [0.40, 0.60]");
    double half = spec.scale / 2.0;
    if (spec.center_x - half < -1e-12 || spec.center_x + half > 1.0 + 1e-12 ||
        spec.center_y - half < -1e-12 || spec.center_y + half > 1.0 + 1e-12)
        throw std::invalid_argument("ShapeSpec: shape exceeds image bounds");
}

void validate_mixing(const MixingConfig& cfg) {
    if (!(cfg.alpha > 0.0)) throw std::invalid_argument("MixingConfig: alpha must be positive");
    if (cfg.kernel_size < 1 || cfg.kernel_size % 2 == 0)
        throw std::invalid_argument("MixingConfig: kernel side must be odd");
    if (!cfg.kernel.empty() &&
        cfg.kernel.size() != static_cast<std::size_t>(cfg.kernel_size) * cfg.kernel_size)
        throw std::invalid_argument("MixingConfig: kernel size mismatch");
    if (cfg.flip_probability < 0.0 || cfg.flip_probability > 1.0)
        throw std::invalid_argument("MixingConfig: flip_probability outside [0,1]");
}

bool inside_triangle(double px, double py, const ShapeSpec& s) {
    // Isoceles triangle with a square bounding box: apex at top center.
    double half = s.scale / 2.0;
    double ax = s.center_x, ay = s.center_y - half;
    double bx = s.center_x - half, by = s.center_y + half;
    double cx = s.center_x + half, cy = s.center_y + half;
    auto side = [](double x1, double y1, double x2, double y2, double x, double y) {
        return (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
    };
    double d1 = side(ax, ay, bx, by, px, py);
    double d2 = side(bx, by, cx, cy, px, py);
    double d3 = side(cx, cy, ax, ay, px, py);
    bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
    bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
    return !(has_neg && has_pos);
}

ShapeSpec draw_spec(ShapeKind kind, Rng& rng) {
    ShapeSpec spec;
    spec.kind = kind;
    spec.scale = rng.uniform(kScaleMin, kScaleMax);
    double half = spec.scale / 2.0;
    // Re-draw the position until the shape fits inside the image.
    for (int tries = 0; tries < 10000; ++tries) {
        spec.center_x = rng.uniform01();
        spec.center_y = rng.uniform01();
        if (spec.center_x - half >= 0.0 && spec.center_x + half <= 1.0 &&
            spec.center_y - half >= 0.0 && spec.center_y + half <= 1.0)
            return spec;
    }
    throw std::runtime_error("draw_spec: rejection sampling did not converge");
}

std::vector<double> correlate_same(const std::vector<double>& img, int h, int w,
                                   const std::vector<double>& kernel, int k) {
    std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
    int half = k / 2;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int dr = 0; dr < k; ++dr) {
                int rr = r + dr - half;
                if (rr < 0 || rr >= h) continue;
                for (int dc = 0; dc < k; ++dc) {
                    int cc = c + dc - half;
                    if (cc < 0 || cc >= w) continue;
                    acc += img[static_cast<std::size_t>(rr) * w + cc] * kernel[dr * k + dc];
                }
            }
            out[static_cast<std::size_t>(r) * w + c] = acc;
        }
    }
    return out;
}

MixtureSample make_sample(std::uint64_t sample_seed, int image_size, const MixingConfig& base) {
    Rng rng(sample_seed);
    MixingConfig cfg = base;
    cfg.seed = rng.next_u64();

    ShapeSpec tri_spec = draw_spec(ShapeKind::triangle, rng);
    ShapeSpec circ_spec = draw_spec(ShapeKind::circle, rng);

    int hires = 2 * image_size;
    SourceImage tri{downsample_bilinear(render_shape(tri_spec, hires), image_size),
                    ShapeKind::triangle};
    SourceImage circ{downsample_bilinear(render_shape(circ_spec, hires), image_size),
                     ShapeKind::circle};

    MixtureSample sample = mix(tri, circ, cfg);
    sample.seed = sample_seed;
    return sample;
}

void run_indexed(std::int64_t n, int threads, const std::function<void(std::int64_t)>& body) {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#pragma omp parallel for schedule(dynamic, 64)
    for (std::int64_t i = 0; i < n; ++i) body(i);
#else
    (void)threads;
    for (std::int64_t i = 0; i < n; ++i) body(i);
#endif
}

json mixing_to_json(const MixingConfig& cfg) {
    return json{{"alpha", cfg.alpha},
                {"kernel_size", cfg.kernel_size},
                {"kernel", cfg.kernel.empty() ? default_distortion_kernel() : cfg.kernel},
                {"flip_probability", cfg.flip_probability},
                {"seed", cfg.seed}};
}

MixingConfig mixing_from_json(const json& j) {
    MixingConfig cfg;
    cfg.alpha = j.at("alpha").get<double>();
    cfg.kernel_size = j.at("kernel_size").get<int>();
    cfg.kernel = j.at("kernel").get<std::vector<double>>();
    cfg.flip_probability = j.at("flip_probability").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

std::int64_t train_count(std::int64_t n, double split_fraction) {
    return std::llround(static_cast<double>(n) * split_fraction);
}

}  // namespace

std::vector<double> default_distortion_kernel() {
    constexpr int k = 7;
    std::vector<double> kernel(k * k, 0.0);
    const double sigma = 1.0;
    const int cy = k / 2 + 2, cx = k / 2 + 2;  // blob displaced (+2,+2)
    double blob_sum = 0.0;
    for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c) {
            double d2 = double(r - cy) * (r - cy) + double(c - cx) * (c - cx);
            kernel[r * k + c] = std::exp(-d2 / (2.0 * sigma * sigma));
            blob_sum += kernel[r * k + c];
        }
    for (auto& v : kernel) v /= blob_sum;  // unit-mass blob
    kernel[(k / 2) * k + (k / 2)] += 1.0;  // identity tap
    for (auto& v : kernel) v /= 2.0;
    return kernel;
}

Image render_shape(const ShapeSpec& spec, int resolution) {
    if (resolution < 8) throw std::invalid_argument("render_shape: resolution must be >= 8");
    validate_spec(spec);

    Image img(resolution, resolution);
    double r2 = (spec.scale / 2.0) * (spec.scale / 2.0);
    for (int r = 0; r < resolution; ++r) {
        double py = (r + 0.5) / resolution;
        for (int c = 0; c < resolution; ++c) {
            double px = (c + 0.5) / resolution;
            bool in = false;
            if (spec.kind == ShapeKind::circle) {
                double dx = px - spec.center_x, dy = py - spec.center_y;
                in = dx * dx + dy * dy <= r2;
            } else {
                in = inside_triangle(px, py, spec);
            }
            img.at(r, c) = in ? 1.0f : 0.0f;
        }
    }
    return img;
}

Image downsample_bilinear(const Image& img, int target) {
    if (target <= 0) throw std::invalid_argument("downsample_bilinear: target must be positive");
    if (target > img.height || target > img.width)
        throw std::invalid_argument("downsample_bilinear: target exceeds source resolution");
    if (target == img.height && target == img.width) return img;

    Image out(target, target);
    double ry = static_cast<double>(img.height) / target;
    double rx = static_cast<double>(img.width) / target;
    for (int r = 0; r < target; ++r) {
        double sy = (r + 0.5) * ry - 0.5;
        int y0 = static_cast<int>(std::floor(sy));
        double fy = sy - y0;
        int y0c = std::clamp(y0, 0, img.height - 1);
        int y1c = std::clamp(y0 + 1, 0, img.height - 1);
        for (int c = 0; c < target; ++c) {
            double sx = (c + 0.5) * rx - 0.5;
            int x0 = static_cast<int>(std::floor(sx));
            double fx = sx - x0;
            int x0c = std::clamp(x0, 0, img.width - 1);
            int x1c = std::clamp(x0 + 1, 0, img.width - 1);
            double v = (1 - fy) * ((1 - fx) * img.at(y0c, x0c) + fx * img.at(y0c, x1c)) +
                       fy * ((1 - fx) * img.at(y1c, x0c) + fx * img.at(y1c, x1c));
            out.at(r, c) = static_cast<float>(v);
        }
    }
    return out;
}

void minmax_scale_inplace(std::vector<double>& grid) {
    if (grid.empty()) return;
    auto [mn_it, mx_it] = std::minmax_element(grid.begin(), grid.end());
    double mn = *mn_it, mx = *mx_it;
    if (mx - mn <= 0.0) {
        std::fill(grid.begin(), grid.end(), 0.0);
        return;
    }
    double inv = 1.0 / (mx - mn);
    for (auto& v : grid) v = (v - mn) * inv;
}

Image minmax_scale(const Image& img) {
    std::vector<double> grid(img.px.begin(), img.px.end());
    minmax_scale_inplace(grid);
    Image out(img.height, img.width);
    for (std::size_t i = 0; i < grid.size(); ++i) out.px[i] = static_cast<float>(grid[i]);
    return out;
}

MixtureSample mix(const SourceImage& tri, const SourceImage& circ, const MixingConfig& cfg) {
    validate_mixing(cfg);
    if (tri.image.height != circ.image.height || tri.image.width != circ.image.width)
        throw std::invalid_argument("mix: source dimensions differ");

    int h = tri.image.height, w = tri.image.width;
    std::vector<double> field(static_cast<std::size_t>(h) * w);
    double half_alpha = cfg.alpha / 2.0;
    for (std::size_t i = 0; i < field.size(); ++i) {
        double s = half_alpha * (static_cast<double>(tri.image.px[i]) + circ.image.px[i]);
        field[i] = 1.0 / (1.0 + std::exp(-s));
    }
    minmax_scale_inplace(field);

    std::vector<double> kernel = cfg.kernel.empty() ? default_distortion_kernel() : cfg.kernel;
    Rng rng(cfg.seed);
    if (rng.bernoulli(cfg.flip_probability)) {
        // Vertical flip: reverse kernel rows.
        int k = cfg.kernel_size;
        for (int r = 0; r < k / 2; ++r)
            for (int c = 0; c < k; ++c) std::swap(kernel[r * k + c], kernel[(k - 1 - r) * k + c]);
    }

    std::vector<double> mixed = correlate_same(field, h, w, kernel, cfg.kernel_size);
    minmax_scale_inplace(mixed);  // convolution may leave [0,1]

    MixtureSample sample;
    sample.mixture = Image(h, w);
    for (std::size_t i = 0; i < mixed.size(); ++i)
        sample.mixture.px[i] = static_cast<float>(mixed[i]);
    sample.sources = {tri, circ};
    sample.seed = cfg.seed;
    return sample;
}

DatasetSplit generate_dataset(std::int64_t n_pairs, int image_size, const MixingConfig& cfg,
                              double split_fraction, int threads) {
    if (n_pairs < 1) throw std::invalid_argument("generate_dataset: n_pairs must be >= 1");
    if (!(split_fraction > 0.0 && split_fraction < 1.0))
        throw std::invalid_argument("generate_dataset: split_fraction outside (0,1)");
    validate_mixing(cfg);

    std::vector<MixtureSample> samples(static_cast<std::size_t>(n_pairs));
    run_indexed(n_pairs, threads, [&](std::int64_t i) {
        samples[static_cast<std::size_t>(i)] =
            make_sample(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)), image_size, cfg);
    });

    std::int64_t n_train = train_count(n_pairs, split_fraction);
    DatasetSplit split;
    split.train.assign(samples.begin(), samples.begin() + n_train);
    split.test.assign(samples.begin() + n_train, samples.end());
    return split;
}

std::string role_filename(const std::string& split, Role role) {
    switch (role) {
        case Role::mixtures: return split + "_mixtures.f32";
        case Role::sources_triangle: return split + "_sources_triangle.f32";
        case Role::sources_circle: return split + "_sources_circle.f32";
    }
    throw std::logic_error("role_filename: bad role");
}

namespace {

void write_manifest(const std::string& dir, int image_size, std::int64_t n_train,
                    std::int64_t n_test, double split_fraction, const MixingConfig& cfg) {
    json j{{"format", "unmix-ae-dataset"},
           {"version", 1},
           {"image_size", image_size},
           {"n_train", n_train},
           {"n_test", n_test},
           {"split_fraction", split_fraction},
           {"mixing", mixing_to_json(cfg)},
           {"files",
            {{"train_mixtures", role_filename("train", Role::mixtures)},
             {"train_sources_triangle", role_filename("train", Role::sources_triangle)},
             {"train_sources_circle", role_filename("train", Role::sources_circle)},
             {"test_mixtures", role_filename("test", Role::mixtures)},
             {"test_sources_triangle", role_filename("test", Role::sources_triangle)},
             {"test_sources_circle", role_filename("test", Role::sources_circle)}}}};
    io::write_text((fs::path(dir) / "manifest.json").string(), j.dump(2) + "\n");
}

void append_samples(const std::string& dir, const std::string& split,
                    const std::vector<MixtureSample>& samples, std::size_t begin,
                    std::size_t end) {
    if (begin >= end) return;
    std::vector<float> mix_buf, tri_buf, circ_buf;
    std::size_t n = end - begin;
    std::size_t hw = samples[begin].mixture.px.size();
    mix_buf.reserve(n * hw);
    tri_buf.reserve(n * hw);
    circ_buf.reserve(n * hw);
    for (std::size_t i = begin; i < end; ++i) {
        const auto& s = samples[i];
        mix_buf.insert(mix_buf.end(), s.mixture.px.begin(), s.mixture.px.end());
        tri_buf.insert(tri_buf.end(), s.sources[0].image.px.begin(), s.sources[0].image.px.end());
        circ_buf.insert(circ_buf.end(), s.sources[1].image.px.begin(),
                        s.sources[1].image.px.end());
    }
    auto p = fs::path(dir);
    io::append_f32((p / role_filename(split, Role::mixtures)).string(), mix_buf.data(),
                   mix_buf.size());
    io::append_f32((p / role_filename(split, Role::sources_triangle)).string(), tri_buf.data(),
                   tri_buf.size());
    io::append_f32((p / role_filename(split, Role::sources_circle)).string(), circ_buf.data(),
                   circ_buf.size());
}

void clear_split_files(const std::string& dir) {
    for (const std::string& split : {"train", "test"})
        for (Role role : {Role::mixtures, Role::sources_triangle, Role::sources_circle})
            fs::remove(fs::path(dir) / role_filename(split, role));
}

}  // namespace

void save_dataset(const DatasetSplit& split, int image_size, const MixingConfig& cfg,
                  double split_fraction, const std::string& dir) {
    fs::create_directories(dir);
    clear_split_files(dir);
    append_samples(dir, "train", split.train, 0, split.train.size());
    append_samples(dir, "test", split.test, 0, split.test.size());
    write_manifest(dir, image_size, static_cast<std::int64_t>(split.train.size()),
                   static_cast<std::int64_t>(split.test.size()), split_fraction, cfg);
}

void generate_dataset_to_dir(std::int64_t n_pairs, int image_size, const MixingConfig& cfg,
                             double split_fraction, const std::string& dir, int threads) {
    if (n_pairs < 1) throw std::invalid_argument("generate_dataset: n_pairs must be >= 1");
    if (!(split_fraction > 0.0 && split_fraction < 1.0))
        throw std::invalid_argument("generate_dataset: split_fraction outside (0,1)");
    validate_mixing(cfg);

    fs::create_directories(dir);
    clear_split_files(dir);
    std::int64_t n_train = train_count(n_pairs, split_fraction);

    constexpr std::int64_t kChunk = 2048;
    std::vector<MixtureSample> chunk;
    for (std::int64_t base = 0; base < n_pairs; base += kChunk) {
        std::int64_t count = std::min(kChunk, n_pairs - base);
        chunk.assign(static_cast<std::size_t>(count), MixtureSample{});
        run_indexed(count, threads, [&](std::int64_t i) {
            chunk[static_cast<std::size_t>(i)] = make_sample(
                derive_seed(cfg.seed, static_cast<std::uint64_t>(base + i)), image_size, cfg);
        });
        // A chunk may straddle the train/test boundary.
        std::int64_t train_in_chunk = std::clamp<std::int64_t>(n_train - base, 0, count);
        append_samples(dir, "train", chunk, 0, static_cast<std::size_t>(train_in_chunk));
        append_samples(dir, "test", chunk, static_cast<std::size_t>(train_in_chunk),
                       static_cast<std::size_t>(count));
    }
    write_manifest(dir, image_size, n_train, n_pairs - n_train, split_fraction, cfg);
}

DatasetMeta read_manifest(const std::string& dir) {
    json j = json::parse(io::read_text((fs::path(dir) / "manifest.json").string()));
    if (j.at("format").get<std::string>() != "unmix-ae-dataset")
        throw DataError("read_manifest: not an unmix-ae dataset: " + dir);
    DatasetMeta meta;
    meta.image_size = j.at("image_size").get<int>();
    meta.n_train = j.at("n_train").get<std::int64_t>();
    meta.n_test = j.at("n_test").get<std::int64_t>();
    meta.split_fraction = j.at("split_fraction").get<double>();
    meta.mixing = mixing_from_json(j.at("mixing"));
    return meta;
}

ImageStack load_stack(const std::string& dir, const std::string& split, Role role) {
    DatasetMeta meta = read_manifest(dir);
    ImageStack stack;
    stack.height = stack.width = meta.image_size;
    stack.px = io::read_f32((fs::path(dir) / role_filename(split, role)).string());
    std::size_t hw = static_cast<std::size_t>(meta.image_size) * meta.image_size;
    if (hw == 0 || stack.px.size() % hw != 0)
        throw DataError("load_stack: blob size inconsistent with image_size");
    stack.count = static_cast<std::int64_t>(stack.px.size() / hw);
    std::int64_t expected = split == "train" ? meta.n_train : meta.n_test;
    if (stack.count != expected)
        throw DataError("load_stack: sample count disagrees with manifest");
    return stack;
}

}  // namespace unmix::datagen
