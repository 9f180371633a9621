// unmix-ae: self-supervised blind source separation with multi-encoder
// autoencoders. Subcommands cover the full pipeline:
//   generate -> train -> separate -> evaluate -> export-weights -> gradcheck

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "unmix/checkpoint.hpp"
#include "unmix/config.hpp"
#include "unmix/datagen.hpp"
#include "unmix/errors.hpp"
#include "unmix/eval.hpp"
#include "unmix/gradcheck.hpp"
#include "unmix/infer.hpp"
#include "unmix/io.hpp"
#include "unmix/train.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using namespace unmix;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfigError = 2;
constexpr int kExitDataError = 3;
constexpr int kExitDivergence = 4;

void cap_threads(int threads) {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#else
    (void)threads;
#endif
}

config::RunConfig load_run_config(const std::string& config_path,
                                  std::optional<std::uint64_t> seed_override) {
    config::RunConfig cfg =
        config_path.empty() ? config::parse_config_text("") : config::parse_config(config_path);
    if (seed_override) cfg.set_seed(*seed_override);
    return cfg;
}

std::string dataset_cache_dir(const config::RunConfig& cfg, int image_size) {
    const char* cache = std::getenv("UNMIX_AE_CACHE");
    if (!cache || !*cache) return "";
    // Key the cache entry on everything that shapes the blobs.
    std::ostringstream key;
    key << "n" << cfg.n_pairs << "_s" << image_size << "_a" << cfg.mixing.alpha << "_f"
        << cfg.mixing.flip_probability << "_seed" << cfg.mixing.seed << "_split"
        << cfg.split_fraction;
    return (fs::path(cache) / key.str()).string();
}

bool dataset_exists(const std::string& dir, const config::RunConfig& cfg, int image_size) {
    if (dir.empty() || !fs::exists(fs::path(dir) / "manifest.json")) return false;
    try {
        datagen::DatasetMeta meta = datagen::read_manifest(dir);
        return meta.image_size == image_size && meta.n_train + meta.n_test == cfg.n_pairs &&
               meta.mixing.seed == cfg.mixing.seed && meta.mixing.alpha == cfg.mixing.alpha &&
               meta.mixing.flip_probability == cfg.mixing.flip_probability;
    } catch (const std::exception&) {
        return false;
    }
}

unsigned char to_byte(float v) {
    float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<unsigned char>(c * 255.0f + 0.5f);
}

void write_image_png(const std::string& path, const datagen::Image& img) {
    std::vector<unsigned char> bytes(img.px.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(img.px[i]);
    io::write_png_gray8(path, img.width, img.height, bytes);
}

int run_generate(const config::RunConfig& cfg, int image_size, std::string out_dir,
                 int threads) {
    if (out_dir.empty()) {
        out_dir = dataset_cache_dir(cfg, image_size);
        if (out_dir.empty())
            throw ConfigError("generate: pass --out or set UNMIX_AE_CACHE");
        if (dataset_exists(out_dir, cfg, image_size)) {
            std::cout << "dataset cached at " << out_dir << "\n";
            return kExitOk;
        }
    }
    datagen::generate_dataset_to_dir(cfg.n_pairs, image_size, cfg.mixing, cfg.split_fraction,
                                     out_dir, threads);
    std::cout << "wrote " << cfg.n_pairs << " pairs at " << image_size << "x" << image_size
              << " to " << out_dir << "\n";
    return kExitOk;
}

int run_train(const config::RunConfig& cfg, const std::string& data_dir,
              const std::string& out_dir) {
    datagen::DatasetMeta meta = datagen::read_manifest(data_dir);
    config::RunConfig run = cfg;
    if (meta.image_size != run.model.image_size) run.model.image_size = meta.image_size;
    run.validate();

    datagen::ImageStack train_mix = datagen::load_stack(data_dir, "train",
                                                        datagen::Role::mixtures);
    datagen::ImageStack val_mix = datagen::load_stack(data_dir, "test",
                                                      datagen::Role::mixtures);

    auto m = model::Model<float>::build(run.model, run.seed);
    std::cout << "model: " << m.parameter_count() << " parameters, N=" << run.model.num_encoders
              << "\n";
    fs::create_directories(out_dir);
    io::write_text((fs::path(out_dir) / "run_config.txt").string(),
                   config::run_config_to_text(run));
    train::TrainReport report = train::fit(m, train_mix, val_mix, run.train, out_dir,
                                           &std::cout);
    std::cout << "best epoch " << report.best_epoch << " val_mae " << report.best_val_mae
              << "\ncheckpoints: " << report.best_checkpoint << ", " << report.last_checkpoint
              << "\n";
    return kExitOk;
}

int run_separate(const std::string& ckpt_path, const std::string& data_dir,
                 const std::string& encoder_arg, int crop_margin, const std::string& out_dir,
                 const std::string& split, std::int64_t limit, bool png) {
    auto m = model::load_checkpoint<float>(ckpt_path);
    const int N = m.config().num_encoders;
    std::vector<int> encoders;
    if (encoder_arg == "all")
        for (int n = 0; n < N; ++n) encoders.push_back(n);
    else {
        int n = std::stoi(encoder_arg);
        if (n < 0 || n >= N) throw ConfigError("separate: encoder index out of range");
        encoders.push_back(n);
    }

    datagen::ImageStack mixtures = datagen::load_stack(data_dir, split,
                                                       datagen::Role::mixtures);
    const std::int64_t count =
        limit > 0 ? std::min<std::int64_t>(limit, mixtures.count) : mixtures.count;
    fs::create_directories(out_dir);

    const int H = mixtures.height, W = mixtures.width;
    const int Hc = H - 2 * crop_margin, Wc = W - 2 * crop_margin;
    if (Hc <= 0 || Wc <= 0) throw ConfigError("separate: crop margin too large");

    for (int n : encoders) {
        std::vector<float> blob;
        blob.reserve(static_cast<std::size_t>(count) * Hc * Wc);
        for (std::int64_t i = 0; i < count; ++i) {
            datagen::Image img(H, W);
            std::copy_n(mixtures.sample(i), img.px.size(), img.px.begin());
            infer::SourceEstimate est = infer::mask_and_decode(m, img, n);
            if (crop_margin > 0) est = infer::crop(est, crop_margin);
            blob.insert(blob.end(), est.estimate.px.begin(), est.estimate.px.end());
            if (png && i < 16)
                write_image_png((fs::path(out_dir) / ("estimate_e" + std::to_string(n) + "_" +
                                                      std::to_string(i) + ".png"))
                                    .string(),
                                est.estimate);
        }
        io::write_f32(
            (fs::path(out_dir) / ("estimates_encoder" + std::to_string(n) + ".f32")).string(),
            blob.data(), blob.size());
    }

    std::ostringstream manifest;
    manifest << "{\n  \"checkpoint\": \"" << ckpt_path << "\",\n  \"split\": \"" << split
             << "\",\n  \"samples\": " << count << ",\n  \"height\": " << Hc
             << ",\n  \"width\": " << Wc << ",\n  \"crop_margin\": " << crop_margin
             << ",\n  \"encoders\": [";
    for (std::size_t i = 0; i < encoders.size(); ++i)
        manifest << encoders[i] << (i + 1 < encoders.size() ? ", " : "");
    manifest << "]\n}\n";
    io::write_text((fs::path(out_dir) / "estimates_manifest.json").string(), manifest.str());
    std::cout << "wrote estimates for " << count << " samples to " << out_dir << "\n";
    return kExitOk;
}

int run_evaluate(const std::string& ckpt_path, const std::string& data_dir,
                 const std::string& out_path, int crop_margin, std::int64_t max_samples) {
    auto m = model::load_checkpoint<float>(ckpt_path);
    datagen::ImageStack mixtures = datagen::load_stack(data_dir, "test",
                                                       datagen::Role::mixtures);
    datagen::ImageStack tri = datagen::load_stack(data_dir, "test",
                                                  datagen::Role::sources_triangle);
    datagen::ImageStack circ = datagen::load_stack(data_dir, "test",
                                                   datagen::Role::sources_circle);
    eval::EvalReport report = eval::evaluate(m, mixtures, tri, circ, crop_margin, 128,
                                             max_samples);
    std::string json = eval::eval_report_to_json(report);
    if (out_path.empty() || out_path == "-")
        std::cout << json;
    else {
        io::write_text(out_path, json);
        std::cout << "mixture_mae " << report.mixture_mae << " triangle_mae "
                  << report.triangle_mae << " circle_mae " << report.circle_mae << "\nreport: "
                  << out_path << "\n";
    }
    return kExitOk;
}

int run_export_weights(const std::string& ckpt_path, const std::string& out_dir) {
    auto m = model::load_checkpoint<float>(ckpt_path);
    fs::create_directories(out_dir);
    auto masses = eval::weight_mass(m);
    for (std::size_t layer = 0; layer < masses.size(); ++layer) {
        const auto& mass = masses[layer];
        const std::size_t n = mass.dim(0);
        std::ostringstream csv;
        double peak = 0.0;
        for (std::size_t i = 0; i < mass.numel(); ++i) peak = std::max(peak, mass[i]);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j)
                csv << mass[i * n + j] << (j + 1 < n ? "," : "");
            csv << "\n";
        }
        std::string base = (fs::path(out_dir) / ("decoder_layer" + std::to_string(layer))).string();
        io::write_text(base + "_block_mass.csv", csv.str());
        std::vector<unsigned char> pix(mass.numel());
        for (std::size_t i = 0; i < mass.numel(); ++i)
            pix[i] = peak > 0 ? static_cast<unsigned char>(255.0 * mass[i] / peak) : 0;
        io::write_png_gray8(base + "_block_mass.png", static_cast<int>(n),
                            static_cast<int>(n), pix);
    }
    auto out_mass = eval::output_layer_pathway_mass(m);
    std::ostringstream csv;
    for (std::size_t i = 0; i < out_mass.size(); ++i)
        csv << out_mass[i] << (i + 1 < out_mass.size() ? "," : "\n");
    io::write_text((fs::path(out_dir) / "decoder_output_pathway_mass.csv").string(), csv.str());
    std::cout << "wrote " << masses.size() << " block-mass matrices to " << out_dir << "\n";
    return kExitOk;
}

int run_gradcheck(std::uint64_t seed, const losses::LossConfig& lc, double tolerance) {
    gradcheck::Report report = gradcheck::run(seed, lc);
    std::cout << "gradcheck: " << report.parameter_count << " parameters, tolerance "
              << tolerance << "\n";
    bool ok = true;
    for (const auto& e : report.entries) {
        if (e.skipped) {
            std::cout << "  " << e.term << ": skipped (lambda = 0)\n";
            continue;
        }
        bool term_ok = e.max_rel_err < tolerance && e.max_frozen_grad == 0.0;
        ok = ok && term_ok;
        std::cout << "  " << e.term << ": max rel err " << e.max_rel_err << " over "
                  << e.compared << " params";
        if (e.frozen_checked)
            std::cout << "; frozen grads max |g| = " << e.max_frozen_grad << " over "
                      << e.frozen_checked;
        std::cout << (term_ok ? "  [ok]" : "  [FAIL]") << "\n";
        if (!e.worst_param.empty()) std::cout << "    worst: " << e.worst_param << "\n";
    }
    return ok ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-supervised blind source separation with multi-encoder autoencoders"};
    app.require_subcommand(1);
    app.fallthrough();  // global --seed/--threads may follow the subcommand

    std::string config_path;
    std::optional<std::uint64_t> seed;
    int threads = 0;
    app.add_option("--seed", seed, "Override the run seed");
    app.add_option("--threads", threads, "Cap worker threads (0 = default)");

    // generate
    auto* gen = app.add_subcommand("generate", "Generate the triangles & circles dataset");
    std::int64_t gen_n = 150000;
    int gen_size = 64;
    double gen_alpha = 6.0;
    double gen_flip = 0.5;
    double gen_split = 0.8;
    std::string gen_out;
    gen->add_option("--n", gen_n, "Number of shape pairs");
    gen->add_option("--size", gen_size, "Output image side");
    gen->add_option("--alpha", gen_alpha, "Mixing sharpness");
    gen->add_option("--flip-prob", gen_flip, "Kernel vertical-flip probability");
    gen->add_option("--split", gen_split, "Training fraction");
    gen->add_option("--out", gen_out, "Output directory (default: UNMIX_AE_CACHE entry)");

    // train
    auto* tr = app.add_subcommand("train", "Train a model on a generated dataset");
    std::string tr_data, tr_out = "run";
    tr->add_option("--data", tr_data, "Dataset directory")->required();
    tr->add_option("--config", config_path, "Config file (flat key = value)");
    tr->add_option("--out", tr_out, "Output directory for checkpoints and logs");

    // separate
    auto* sep = app.add_subcommand("separate", "Decode per-encoder source estimates");
    std::string sep_ckpt, sep_data, sep_out = "estimates", sep_encoder = "all",
                sep_split = "test";
    int sep_crop = 0;
    std::int64_t sep_limit = 0;
    bool sep_png = false;
    sep->add_option("--ckpt", sep_ckpt, "Checkpoint file")->required();
    sep->add_option("--data", sep_data, "Dataset directory")->required();
    sep->add_option("--encoder", sep_encoder, "Encoder index or 'all'");
    sep->add_option("--crop", sep_crop, "Crop margin in pixels");
    sep->add_option("--out", sep_out, "Output directory");
    sep->add_option("--split", sep_split, "Dataset split (train|test)");
    sep->add_option("--limit", sep_limit, "Max samples (0 = all)");
    sep->add_flag("--png", sep_png, "Also render the first estimates as PNG");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint against ground truth");
    std::string ev_ckpt, ev_data, ev_out = "report.json";
    int ev_crop = 0;
    std::int64_t ev_max = 0;
    ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
    ev->add_option("--data", ev_data, "Dataset directory")->required();
    ev->add_option("--out", ev_out, "Report path ('-' for stdout)");
    ev->add_option("--crop", ev_crop, "Crop margin in pixels");
    ev->add_option("--max-samples", ev_max, "Cap evaluated samples (0 = all)");

    // export-weights
    auto* ex = app.add_subcommand("export-weights",
                                  "Export decoder block L1 mass as CSV + PNG");
    std::string ex_ckpt, ex_out = "weights";
    ex->add_option("--ckpt", ex_ckpt, "Checkpoint file")->required();
    ex->add_option("--out", ex_out, "Output directory");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck",
                                  "Verify loss gradients against finite differences");
    double gc_tol = 1e-4;
    gc->add_option("--config", config_path, "Config file (lambdas select terms)");
    gc->add_option("--tolerance", gc_tol, "Max allowed relative error");

    CLI11_PARSE(app, argc, argv);
    cap_threads(threads);

    try {
        if (gen->parsed()) {
            config::RunConfig cfg = load_run_config(config_path, seed);
            cfg.n_pairs = gen_n;
            cfg.mixing.alpha = gen_alpha;
            cfg.mixing.flip_probability = gen_flip;
            cfg.split_fraction = gen_split;
            if (!(gen_alpha > 0)) throw ConfigError("generate: alpha must be positive");
            if (!(gen_split > 0 && gen_split < 1))
                throw ConfigError("generate: split outside (0,1)");
            return run_generate(cfg, gen_size, gen_out, threads);
        }
        if (tr->parsed()) {
            config::RunConfig cfg = load_run_config(config_path, seed);
            return run_train(cfg, tr_data, tr_out);
        }
        if (sep->parsed())
            return run_separate(sep_ckpt, sep_data, sep_encoder, sep_crop, sep_out, sep_split,
                                sep_limit, sep_png);
        if (ev->parsed()) return run_evaluate(ev_ckpt, ev_data, ev_out, ev_crop, ev_max);
        if (ex->parsed()) return run_export_weights(ex_ckpt, ex_out);
        if (gc->parsed()) {
            config::RunConfig cfg = load_run_config(config_path, seed);
            return run_gradcheck(cfg.seed, cfg.train.loss, gc_tol);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const train::DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitDataError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}
