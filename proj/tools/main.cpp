#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "attnalign/checkpoint.hpp"
#include "attnalign/config.hpp"
#include "attnalign/data.hpp"
#include "attnalign/grid.hpp"
#include "attnalign/teacher.hpp"
#include "attnalign/train.hpp"

using namespace attnalign;

namespace {

// Timestamps are confined to run.log so every other output is bit-identical
// across reruns of the same config and seed.
void append_log(const std::string& out_dir, const std::string& line) {
    std::ofstream f(out_dir + "/run.log", std::ios::app);
    if (!f) return;
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%d %H:%M:%S", std::localtime(&t));
    f << "[" << stamp << "] " << line << "\n";
}

void require_input_file(const std::string& path, const char* key) {
    if (path.empty()) {
        throw ConfigError(std::string("config: ") + key + " is not set");
    }
    if (!std::filesystem::exists(path)) {
        throw IoError(std::string(key) + " not found: " + path);
    }
}

void require_out_dir(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("config: out_dir is not set");
}

void require_dataset_inputs(const RunConfig& cfg) {
    require_input_file(cfg.train_images, "train_images");
    require_input_file(cfg.train_labels, "train_labels");
    require_input_file(cfg.test_images, "test_images");
    require_input_file(cfg.test_labels, "test_labels");
    if (!cfg.external_teachers.empty()) {
        require_input_file(cfg.external_teachers, "external_teachers");
    }
}

/// Create the output directory and echo the fully resolved config. Called
/// only after all inputs have been validated so failures leave no files.
void prepare_out_dir(const RunConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create out_dir " + cfg.out_dir + ": " + ec.message());
    write_file_bytes(cfg.out_dir + "/resolved_config.txt", resolved_config_text(cfg));
}

DatasetSplit build_split(const RunConfig& cfg) {
    MnistRaw train_raw = load_mnist(cfg.train_images, cfg.train_labels);
    MnistRaw test_raw = load_mnist(cfg.test_images, cfg.test_labels);
    if (cfg.train.dataset == DatasetKind::colored) {
        return synth_colored_mnist(train_raw, test_raw, cfg.train.seed, cfg.palette,
                                   cfg.val_fraction);
    }
    return synth_decoy_mnist(train_raw, test_raw, cfg.train.seed, cfg.val_fraction);
}

/// Oracle teachers by default; an external ATTN bundle must cover exactly
/// train followed by val, in split order.
TeacherSet build_teachers(const RunConfig& cfg, const DatasetSplit& split,
                          std::size_t* renormalized) {
    if (cfg.external_teachers.empty()) {
        return build_teacher_set(split, cfg.train.morph);
    }
    ExternalMapLoad ext = load_external_maps(cfg.external_teachers);
    const std::size_t want = split.train.size() + split.val.size();
    if (ext.maps.size() != want) {
        throw ConfigError("external_teachers: bundle has " + std::to_string(ext.maps.size()) +
                          " maps but the split needs " + std::to_string(want) + " (train " +
                          std::to_string(split.train.size()) + " + val " +
                          std::to_string(split.val.size()) + ")");
    }
    if (renormalized) *renormalized = ext.renormalized;
    TeacherSet set;
    set.train.assign(ext.maps.begin(),
                     ext.maps.begin() + static_cast<std::ptrdiff_t>(split.train.size()));
    set.val.assign(ext.maps.begin() + static_cast<std::ptrdiff_t>(split.train.size()),
                   ext.maps.end());
    return set;
}

/// Nearest-neighbor 7x7 -> 28x28 for display, min -> 0 and max -> 255 per
/// panel (a flat map renders white, matching the grid heatmap convention).
GrayImage upsample_cam(const Tensor& grid) {
    double lo = grid[0], hi = grid[0];
    for (std::size_t i = 0; i < grid.size(); ++i) {
        lo = std::min(lo, grid[i]);
        hi = std::max(hi, grid[i]);
    }
    GrayImage img(28, 28);
    for (std::size_t y = 0; y < 28; ++y) {
        for (std::size_t x = 0; x < 28; ++x) {
            const double v = grid.at2(y / 4, x / 4);
            img.pixels[y * 28 + x] =
                hi == lo ? 255
                         : static_cast<std::uint8_t>((v - lo) / (hi - lo) * 255.0 + 0.5);
        }
    }
    return img;
}

RgbImage triptych(const BiasedExample& ex, const GrayImage& baseline, const GrayImage& aligned) {
    const RgbImage original = example_to_rgb(ex);
    RgbImage out(28, 84);
    for (std::size_t y = 0; y < 28; ++y) {
        for (std::size_t x = 0; x < 28; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                out.pixels[3 * (y * 84 + x) + c] = original.pixels[3 * (y * 28 + x) + c];
                out.pixels[3 * (y * 84 + 28 + x) + c] = baseline.pixels[y * 28 + x];
                out.pixels[3 * (y * 84 + 56 + x) + c] = aligned.pixels[y * 28 + x];
            }
        }
    }
    return out;
}

SaliencyMap cam_for_example(const ModelParams& params, const BiasedExample& ex, double eps_kl) {
    Tensor x({1, 3, 28, 28});
    std::copy(ex.image.data(), ex.image.data() + ex.image.size(), x.data());
    ForwardCache cache = model_forward(params, x);
    return cam(cache, 0, params.head, ex.label, eps_kl);
}

std::string split_stats(const char* name, const std::vector<BiasedExample>& exs) {
    std::array<std::size_t, 10> per_class{};
    for (const BiasedExample& ex : exs) per_class[static_cast<std::size_t>(ex.label)] += 1;
    std::string out = std::string(name) + "_count = " + std::to_string(exs.size()) + "\n";
    out += std::string(name) + "_per_class =";
    for (std::size_t c = 0; c < 10; ++c) out += " " + std::to_string(per_class[c]);
    out += "\n";
    return out;
}

int cmd_synth(const RunConfig& cfg) {
    require_dataset_inputs(cfg);
    require_out_dir(cfg);
    DatasetSplit split = build_split(cfg);
    prepare_out_dir(cfg);

    std::string stats = "dataset = " + std::string(dataset_name(split.kind)) + "\n";
    stats += "seed = " + std::to_string(split.seed) + "\n";
    stats += split_stats("train", split.train);
    stats += split_stats("val", split.val);
    stats += split_stats("test", split.test);
    write_file_bytes(cfg.out_dir + "/stats.txt", stats);

    const std::vector<std::string> files =
        export_examples_ppm(split, cfg.out_dir, cfg.export_count);
    std::cout << "synth: " << dataset_name(split.kind) << " " << split.train.size() << " train, "
              << split.val.size() << " val, " << split.test.size() << " test\n";
    for (const std::string& f : files) std::cout << "wrote " << f << "\n";
    append_log(cfg.out_dir, "synth done, " + std::to_string(files.size()) + " previews");
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    require_dataset_inputs(cfg);
    require_out_dir(cfg);
    DatasetSplit split = build_split(cfg);
    std::size_t renormalized = 0;
    TeacherSet teachers = build_teachers(cfg, split, &renormalized);
    prepare_out_dir(cfg);
    append_log(cfg.out_dir, "train start");

    TrainHooks hooks;
    hooks.on_epoch_end = [&](const EpochMetrics& m, const ModelParams&) {
        std::cout << "epoch " << m.epoch << " " << phase_name(m.phase)
                  << " lambda=" << format_g9(m.lambda_effective)
                  << " ce=" << format_g9(m.train_ce) << " attn=" << format_g9(m.train_attn)
                  << " val_acc=" << format_g9(m.val_acc)
                  << " optim=" << format_g9(m.optim_value) << "\n";
    };
    TrainReport report =
        train_two_phase(cfg.train, split, teachers, hooks, cfg.out_dir + "/model.ckpt");
    write_metrics_csv(report, cfg.out_dir + "/metrics.csv");

    std::string rep = "dataset = " + std::string(dataset_name(cfg.train.dataset)) + "\n";
    rep += "seed = " + std::to_string(cfg.train.seed) + "\n";
    rep += "lambda0 = " + format_g17(cfg.train.lambda0) + "\n";
    rep += "e_attn = " + std::to_string(cfg.train.e_attn) + "\n";
    rep += "epochs = " + std::to_string(cfg.train.epochs) + "\n";
    rep += "teacher_source = " + std::string(cfg.external_teachers.empty() ? "oracle" : "external") + "\n";
    rep += "external_renormalized = " + std::to_string(renormalized) + "\n";
    rep += "final_test_acc = " + format_g17(report.final_test_acc) + "\n";
    rep += "best_optim_value = " + format_g17(report.best_optim_value) + "\n";
    rep += "checkpoint = " + report.checkpoint_path + "\n";
    write_file_bytes(cfg.out_dir + "/report.txt", rep);

    std::cout << "final_test_acc = " << format_g17(report.final_test_acc) << "\n";
    std::cout << "best_optim_value = " << format_g17(report.best_optim_value) << "\n";
    append_log(cfg.out_dir, "train done, final_test_acc " + format_g9(report.final_test_acc));
    return 0;
}

int cmd_grid(const RunConfig& cfg, std::size_t jobs) {
    require_dataset_inputs(cfg);
    require_out_dir(cfg);
    DatasetSplit split = build_split(cfg);
    TeacherSet teachers = build_teachers(cfg, split, nullptr);
    prepare_out_dir(cfg);
    append_log(cfg.out_dir, "grid start, " +
                                std::to_string(cfg.grid_lambdas.size() * cfg.grid_e_attns.size()) +
                                " cells, jobs " + std::to_string(jobs));

    auto on_cell = [](const GridCell& c) {
        if (c.failed) {
            std::cout << "cell lambda0=" << format_g9(c.lambda0) << " e_attn=" << c.e_attn
                      << " FAILED: " << c.error << "\n";
        } else {
            std::cout << "cell lambda0=" << format_g9(c.lambda0) << " e_attn=" << c.e_attn
                      << " optim=" << format_g9(c.best_optim_value) << "\n";
        }
    };
    GridResult g =
        run_grid(cfg.grid_lambdas, cfg.grid_e_attns, cfg.train, split, teachers, jobs, on_cell);
    write_file_bytes(cfg.out_dir + "/grid.csv", grid_csv(g));
    write_pgm(grid_pgm(g), cfg.out_dir + "/grid.pgm");
    append_log(cfg.out_dir, "grid done");
    if (!g.has_chosen) {
        throw ConfigError("grid: every cell failed, nothing to choose");
    }
    const GridCell& c = g.chosen();
    std::string rep = "chosen_lambda0 = " + format_g17(c.lambda0) + "\n";
    rep += "chosen_e_attn = " + std::to_string(c.e_attn) + "\n";
    rep += "chosen_optim_value = " + format_g17(c.best_optim_value) + "\n";
    write_file_bytes(cfg.out_dir + "/grid_report.txt", rep);
    std::cout << "chosen lambda0=" << format_g17(c.lambda0) << " e_attn=" << c.e_attn
              << " optim_value=" << format_g17(c.best_optim_value) << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint) {
    require_input_file(checkpoint, "checkpoint");
    require_dataset_inputs(cfg);
    ModelParams params = load_checkpoint(checkpoint);
    DatasetSplit split = build_split(cfg);
    EvalResult r = evaluate(params, split.test);
    std::cout << "test_accuracy = " << format_g17(r.accuracy) << "\n";
    return 0;
}

int cmd_saliency(const RunConfig& cfg, const std::string& baseline_ckpt,
                 const std::string& aligned_ckpt) {
    require_input_file(baseline_ckpt, "baseline checkpoint");
    require_input_file(aligned_ckpt, "aligned checkpoint");
    require_dataset_inputs(cfg);
    require_out_dir(cfg);
    ModelParams baseline = load_checkpoint(baseline_ckpt);
    ModelParams aligned = load_checkpoint(aligned_ckpt);
    DatasetSplit split = build_split(cfg);
    prepare_out_dir(cfg);

    const std::size_t n = std::min(cfg.export_count, split.test.size());
    for (std::size_t i = 0; i < n; ++i) {
        const BiasedExample& ex = split.test[i];
        const GrayImage base = upsample_cam(cam_for_example(baseline, ex, cfg.train.eps_kl).grid);
        const GrayImage align = upsample_cam(cam_for_example(aligned, ex, cfg.train.eps_kl).grid);
        const std::string path = cfg.out_dir + "/saliency_" + std::to_string(i) + "_label" +
                                 std::to_string(ex.label) + ".ppm";
        write_ppm(triptych(ex, base, align), path);
        std::cout << "wrote " << path << "\n";
    }
    append_log(cfg.out_dir, "saliency done, " + std::to_string(n) + " triptychs");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"attnalign: attention-aligned CNN training on biased MNIST benchmarks"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint, baseline_ckpt, aligned_ckpt;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    app.add_option("--config", config_path, "key = value config file");
    auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
    auto* out_opt = app.add_option("--out", out_dir, "override the config out_dir");
    app.add_option("--jobs", jobs, "grid worker threads");

    CLI::App* synth = app.add_subcommand("synth", "synthesize a biased dataset, write previews");
    CLI::App* train = app.add_subcommand("train", "two-phase attention-aligned training");
    CLI::App* grid = app.add_subcommand("grid", "lambda0 x e_attn grid search");
    CLI::App* eval = app.add_subcommand("eval", "test accuracy of a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    CLI::App* saliency = app.add_subcommand("saliency", "baseline-vs-aligned CAM triptychs");
    saliency->add_option("--baseline", baseline_ckpt, "pure-CE checkpoint")->required();
    saliency->add_option("--aligned", aligned_ckpt, "attention-aligned checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1; // --help exits 0, anything malformed is a config error
    }

    try {
        RunConfig cfg;
        if (!config_path.empty()) {
            try {
                cfg = parse_config(config_path);
            } catch (const IoError& e) {
                // an unreadable config file is a configuration error, not a data error
                throw ConfigError(e.what());
            }
        }
        if (seed_opt->count() > 0) cfg.train.seed = seed;
        if (out_opt->count() > 0) cfg.out_dir = out_dir;

        if (synth->parsed()) return cmd_synth(cfg);
        if (train->parsed()) return cmd_train(cfg);
        if (grid->parsed()) return cmd_grid(cfg, jobs);
        if (eval->parsed()) return cmd_eval(cfg, checkpoint);
        if (saliency->parsed()) return cmd_saliency(cfg, baseline_ckpt, aligned_ckpt);
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const AttnAlignError& e) {
        std::cerr << "error: " << e.what() << "\n"; // parse/io/dimension/domain/index
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
