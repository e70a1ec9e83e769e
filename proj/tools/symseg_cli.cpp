#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "symseg/config.hpp"
#include "symseg/data.hpp"
#include "symseg/errors.hpp"
#include "symseg/image_io.hpp"
#include "symseg/interpret.hpp"
#include "symseg/symfuse.hpp"

namespace fs = std::filesystem;
using namespace symseg;

namespace {

std::string cache_root(const std::string& out_flag) {
    if (!out_flag.empty()) return out_flag;
    if (const char* env = std::getenv("SYMSEG_CACHE")) return env;
    return "symseg_cache";
}

void write_run_artifact(const std::string& dir, const std::string& command,
                        const std::string& cfg_hash, const nlohmann::json& outputs) {
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
    nlohmann::json j;
    j["run_id"] = command + "-" + std::to_string(ms);
    j["command"] = command;
    j["config_hash"] = cfg_hash;
    j["outputs"] = outputs;
    j["status"] = "ok";
    std::ofstream out(fs::path(dir) / "run_artifact.json");
    out << j.dump(2) << "\n";
}

Tensor binarize(const Tensor& t) {
    Tensor out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = t[i] > 0.5f ? 1.0f : 0.0f;
    return out;
}

data::VolumeRecord load_volume_pair(const std::string& image_path, const std::string& mask_path,
                                    const std::string& lung_path, const std::string& cohort) {
    data::VolumeRecord rec;
    io::NiftiVolume img = io::read_nifti(image_path);
    io::NiftiVolume msk = io::read_nifti(mask_path);
    rec.image = std::move(img.data);
    rec.infection = binarize(msk.data);
    rec.spacing = img.spacing;
    rec.bit_depth = img.bit_depth;
    if (!lung_path.empty()) rec.lung = binarize(io::read_nifti(lung_path).data);
    rec.cohort = cohort;
    rec.volume_id = fs::path(image_path).stem().stem().string();
    return rec;
}

data::VolumeRecord load_png_dir(const std::string& image_dir, const std::string& mask_dir,
                                const std::string& cohort) {
    auto list_pngs = [](const std::string& dir) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.path().extension() == ".png") files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw ValidationError("no PNG slices in " + dir);
        return files;
    };
    const auto imgs = list_pngs(image_dir);
    const auto msks = list_pngs(mask_dir);
    if (imgs.size() != msks.size())
        throw ValidationError("image/mask slice counts differ: " + std::to_string(imgs.size()) +
                              " vs " + std::to_string(msks.size()));
    data::VolumeRecord rec;
    int bit_depth = 8;
    for (size_t z = 0; z < imgs.size(); ++z) {
        io::GrayImage gi = io::read_png_gray(imgs[z]);
        io::GrayImage gm = io::read_png_gray(msks[z]);
        if (z == 0) {
            rec.image = Tensor({static_cast<int64_t>(imgs.size()), gi.height, gi.width});
            rec.infection = Tensor(rec.image.shape());
            bit_depth = gi.bit_depth;
        }
        if (gi.height != rec.image.dim(1) || gi.width != rec.image.dim(2))
            throw ValidationError("slice " + imgs[z] + " has inconsistent dimensions");
        const int64_t plane = gi.height * gi.width;
        const float mask_thresh = gm.bit_depth == 16 ? 32767.0f : 127.0f;
        for (int64_t i = 0; i < plane; ++i) {
            rec.image[static_cast<int64_t>(z) * plane + i] = gi.pixels[static_cast<size_t>(i)];
            rec.infection[static_cast<int64_t>(z) * plane + i] =
                gm.pixels[static_cast<size_t>(i)] > mask_thresh ? 1.0f : 0.0f;
        }
    }
    rec.bit_depth = bit_depth;
    rec.cohort = cohort;
    rec.volume_id = fs::path(image_dir).filename().string();
    return rec;
}

struct AblationCell {
    int ns;
    int vocab;
    bool ok = false;
    std::string error;
    double dice = 0.0, s_measure = 0.0, mae = 0.0;
};

int run(int argc, char** argv) {
    CLI::App app{"Symbolic semantic segmentation with an emergent-language symbol channel"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_path, checkpoint_path, report_path;
    uint64_t seed_override = 0;
    bool seed_given = false;

    auto add_common = [&](CLI::App* cmd, bool needs_config) {
        if (needs_config)
            cmd->add_option("--config", config_path, "experiment config JSON")->required();
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option_function<uint64_t>(
               "--seed",
               [&](uint64_t v) {
                   seed_override = v;
                   seed_given = true;
               },
               "override the config seed");
    };

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a phantom dataset cache");
    int synth_count = 600;
    add_common(synth, true);
    synth->add_option("--count", synth_count, "number of phantoms");

    // ---- preprocess ----
    auto* prep = app.add_subcommand("preprocess", "ingest CT volumes into the slice cache");
    std::vector<std::string> vol_paths, mask_paths, lung_paths;
    std::string png_images, png_masks, cohort = "cohort0";
    int margin = 20, size = 400;
    uint64_t split_seed = 17;
    add_common(prep, true);
    prep->add_option("--volumes", vol_paths, "NIfTI image volumes (.nii/.nii.gz)");
    prep->add_option("--masks", mask_paths, "NIfTI infection masks, parallel to --volumes");
    prep->add_option("--lungs", lung_paths, "optional NIfTI lung masks");
    prep->add_option("--png-images", png_images, "directory of grayscale PNG slices");
    prep->add_option("--png-masks", png_masks, "directory of PNG masks");
    prep->add_option("--cohort", cohort, "cohort tag");
    prep->add_option("--margin", margin, "crop margin around the lung bbox (voxels)");
    prep->add_option("--size", size, "output slice size");
    prep->add_option("--split-seed", split_seed, "per-volume split assignment seed");

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train a model on a cached dataset");
    add_common(tr, true);
    tr->add_option("--data", data_path, "manifest.json of the dataset cache")->required();

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string split_name = "test";
    add_common(ev, false);
    ev->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    ev->add_option("--data", data_path, "manifest.json")->required();
    ev->add_option("--split", split_name, "train|val|test");

    // ---- ablate ----
    auto* ab = app.add_subcommand("ablate", "N_S x V ablation sweep");
    std::vector<int> ns_grid{8, 16}, vocab_grid{1000, 10000};
    add_common(ab, true);
    ab->add_option("--data", data_path, "manifest.json")->required();
    ab->add_option("--ns-grid", ns_grid, "sentence lengths");
    ab->add_option("--vocab-grid", vocab_grid, "vocabulary sizes");

    // ---- interpret ----
    auto* in = app.add_subcommand("interpret", "regress symbols against presence and area");
    int vocab_flag = 0, positions = 0;
    add_common(in, false);
    in->add_option("--report", report_path, "per-slice eval report CSV")->required();
    in->add_option("--vocab", vocab_flag, "vocabulary size (default: inferred)");
    in->add_option("--positions", positions, "symbol positions to analyze (default min(4, N_S))");

    // ---- report ----
    auto* rp = app.add_subcommand("report", "render overlay images with sentences");
    int count = 4;
    std::string rp_split = "test";
    add_common(rp, false);
    rp->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    rp->add_option("--data", data_path, "manifest.json")->required();
    rp->add_option("--count", count, "number of slices to render");
    rp->add_option("--split", rp_split, "train|val|test");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    auto load_cfg = [&]() {
        SymSegConfig cfg = load_config(config_path);
        if (seed_given) cfg.seed = seed_override;
        return cfg;
    };

    if (synth->parsed()) {
        SymSegConfig cfg = load_cfg();
        const std::string dir = cache_root(out_dir);
        Rng rng(cfg.seed);
        auto samples = data::generate_phantoms(synth_count, cfg.data.size, rng);
        data::SplitSpec spec{cfg.data.splits.train, cfg.data.splits.val, cfg.data.splits.test,
                             cfg.data.split_seed};
        data::build_manifest(samples, spec, dir, config_hash(cfg));
        write_run_artifact(dir, "synth", config_hash(cfg),
                           {{"manifest", (fs::path(dir) / "manifest.json").string()},
                            {"count", synth_count}});
        std::cout << "wrote " << samples.size() << " phantoms to " << dir << "\n";
    } else if (prep->parsed()) {
        SymSegConfig cfg = load_cfg();
        const std::string dir = cache_root(out_dir);
        std::vector<data::VolumeRecord> records;
        if (!png_images.empty() || !png_masks.empty()) {
            if (png_images.empty() || png_masks.empty())
                throw ValidationError("--png-images and --png-masks must be given together");
            records.push_back(load_png_dir(png_images, png_masks, cohort));
        }
        if (vol_paths.size() != mask_paths.size())
            throw ValidationError("--volumes and --masks must be parallel lists");
        if (!lung_paths.empty() && lung_paths.size() != vol_paths.size())
            throw ValidationError("--lungs must match --volumes when given");
        for (size_t i = 0; i < vol_paths.size(); ++i)
            records.push_back(load_volume_pair(vol_paths[i], mask_paths[i],
                                               lung_paths.empty() ? "" : lung_paths[i], cohort));
        if (records.empty())
            throw ValidationError("no inputs: pass --volumes/--masks or --png-images/--png-masks");

        data::PreprocessParams params{margin, size};
        std::vector<data::SegmentationSample> samples;
        for (const auto& rec : records) {
            data::PreprocessTrace trace;
            auto s = data::preprocess_volume(rec, params, &trace);
            std::cout << "volume " << rec.volume_id << ": " << s.size() << " slices, crop ["
                      << trace.crop.y0 << ".." << trace.crop.y1 << "]x[" << trace.crop.x0 << ".."
                      << trace.crop.x1 << "]\n";
            samples.insert(samples.end(), s.begin(), s.end());
        }
        if (samples.empty()) throw RuntimeFailure("preprocessing produced no slices");
        data::SplitSpec spec{cfg.data.splits.train, cfg.data.splits.val, cfg.data.splits.test,
                             split_seed};
        data::build_manifest(samples, spec, dir, config_hash(cfg));
        write_run_artifact(dir, "preprocess", config_hash(cfg),
                           {{"manifest", (fs::path(dir) / "manifest.json").string()},
                            {"slices", samples.size()}});
    } else if (tr->parsed()) {
        SymSegConfig cfg = load_cfg();
        const std::string dir = out_dir.empty() ? "symseg_run" : out_dir;
        fs::create_directories(dir);
        data::SliceDataset ds = data::SliceDataset::load(data_path);
        Rng rng(cfg.seed);
        fuse::SymSegModel model(cfg, rng);
        fuse::TrainResult res = fuse::train(model, ds, cfg, dir);
        save_config((fs::path(dir) / "config.json").string(), cfg);
        write_run_artifact(dir, "train", config_hash(cfg),
                           {{"checkpoint", res.checkpoint_path},
                            {"log", res.log_path},
                            {"best_epoch", res.best_epoch},
                            {"best_val_loss", res.best_val_loss}});
        std::cout << "best epoch " << res.best_epoch << ", val loss " << res.best_val_loss
                  << ", checkpoint " << res.checkpoint_path << "\n";
    } else if (ev->parsed()) {
        auto model = fuse::model_from_checkpoint(checkpoint_path);
        data::SliceDataset ds = data::SliceDataset::load(data_path);
        const std::string dir = out_dir.empty() ? "symseg_eval" : out_dir;
        fs::create_directories(dir);
        auto report = fuse::evaluate(*model, ds, data::split_from_name(split_name),
                                     model->config().optimizer.batch_size);
        metrics::write_report_csv(report, (fs::path(dir) / "report.csv").string());
        metrics::write_aggregates_json(report, (fs::path(dir) / "aggregates.json").string());
        write_run_artifact(dir, "eval", config_hash(model->config()),
                           {{"report", (fs::path(dir) / "report.csv").string()},
                            {"aggregates", (fs::path(dir) / "aggregates.json").string()},
                            {"mean_dice", report.mean_dice}});
        std::cout << "slices " << report.rows.size() << "  dice " << report.mean_dice
                  << "  s-measure " << report.mean_s_measure << "  mae " << report.mean_mae
                  << "\n";
    } else if (ab->parsed()) {
        SymSegConfig base = load_cfg();
        const std::string dir = out_dir.empty() ? "symseg_ablation" : out_dir;
        fs::create_directories(dir);
        data::SliceDataset ds = data::SliceDataset::load(data_path);
        std::vector<AblationCell> cells;
        for (int ns : ns_grid)
            for (int vocab : vocab_grid) {
                AblationCell cell;
                cell.ns = ns;
                cell.vocab = vocab;
                const std::string cell_dir =
                    (fs::path(dir) / ("ns" + std::to_string(ns) + "_v" + std::to_string(vocab)))
                        .string();
                try {
                    SymSegConfig cfg = base;
                    cfg.sentence_len = ns;
                    cfg.vocab_size = vocab;
                    Rng rng(cfg.seed);
                    fuse::SymSegModel model(cfg, rng);
                    fuse::train(model, ds, cfg, cell_dir);
                    auto report =
                        fuse::evaluate(model, ds, data::Split::kTest, cfg.optimizer.batch_size);
                    cell.ok = true;
                    cell.dice = report.mean_dice;
                    cell.s_measure = report.mean_s_measure;
                    cell.mae = report.mean_mae;
                } catch (const std::exception& e) {
                    cell.error = e.what();
                }
                cells.push_back(cell);
                std::cout << "cell N_S=" << cell.ns << " V=" << cell.vocab << ": "
                          << (cell.ok ? "dice " + std::to_string(cell.dice)
                                      : "FAILED: " + cell.error)
                          << "\n";
            }
        const AblationCell* best = nullptr;
        for (const auto& c : cells)
            if (c.ok && (!best || c.dice > best->dice)) best = &c;
        {
            std::ofstream csv(fs::path(dir) / "ablation.csv");
            csv << "ns,vocab,status,dice,s_measure,mae,best\n";
            csv.precision(6);
            for (const auto& c : cells)
                csv << c.ns << ',' << c.vocab << ',' << (c.ok ? "ok" : "failed") << ',' << c.dice
                    << ',' << c.s_measure << ',' << c.mae << ',' << (best == &c ? 1 : 0) << "\n";
            std::ofstream txt(fs::path(dir) / "ablation.txt");
            txt << "N_S   V       Dice    S-measure  MAE\n";
            char buf[160];
            for (const auto& c : cells) {
                if (c.ok)
                    std::snprintf(buf, sizeof(buf), "%-5d %-7d %.4f  %.4f     %.4f%s\n", c.ns,
                                  c.vocab, c.dice, c.s_measure, c.mae,
                                  best == &c ? "  <- best" : "");
                else
                    std::snprintf(buf, sizeof(buf), "%-5d %-7d failed: %s\n", c.ns, c.vocab,
                                  c.error.c_str());
                txt << buf;
            }
        }
        write_run_artifact(dir, "ablate", config_hash(base),
                           {{"table", (fs::path(dir) / "ablation.csv").string()}});
    } else if (in->parsed()) {
        metrics::EvalReport report = metrics::read_report_csv(report_path);
        const std::string dir = out_dir.empty() ? "symseg_interpret" : out_dir;
        fs::create_directories(dir);
        int vocab = vocab_flag;
        if (vocab <= 0) {
            const auto sentences = interpret::parse_sentences(report);
            int mx = 1;
            for (const auto& s : sentences)
                for (int v : s) mx = std::max(mx, v + 1);
            vocab = std::max(mx, 2);
        }
        std::vector<interpret::RegressionResult> results;
        results.push_back(interpret::analyze_presence(report, vocab, positions));
        try {
            results.push_back(interpret::analyze_area(report, vocab, positions));
        } catch (const std::exception& e) {
            std::cerr << "area regression undefined: " << e.what() << "\n";
        }
        interpret::write_results(results, (fs::path(dir) / "regression.json").string(),
                                 (fs::path(dir) / "regression.csv").string(),
                                 (fs::path(dir) / "regression.txt").string());
        write_run_artifact(dir, "interpret", "",
                           {{"regression", (fs::path(dir) / "regression.json").string()}});
        for (const auto& r : results)
            std::cout << r.outcome << ": S* = S" << r.best_position << " (fit " << r.best_value
                      << ")\n";
    } else if (rp->parsed()) {
        auto model = fuse::model_from_checkpoint(checkpoint_path);
        data::SliceDataset ds = data::SliceDataset::load(data_path);
        const std::string dir = out_dir.empty() ? "symseg_report" : out_dir;
        fs::create_directories(dir);
        const auto ids = ds.indices(data::split_from_name(rp_split));
        const int64_t S = model->config().data.size;
        nlohmann::json images = nlohmann::json::array();
        ag::NoGradGuard ng;
        for (size_t k = 0; k < ids.size() && k < static_cast<size_t>(count); ++k) {
            const auto& sample = ds.samples[ids[k]];
            Tensor img({1, 1, S, S}, sample.image.data(), S * S);
            auto res = model->forward(ag::constant(std::move(img)), el::Mode::kInference);
            Tensor pred({S, S});
            for (int64_t i = 0; i < S * S; ++i)
                pred[i] = res.mask->value[i] >= 0.5f ? 1.0f : 0.0f;
            const std::string caption = res.sentences.empty() ? "" : res.sentences[0].to_string();
            const std::string file =
                (fs::path(dir) / ("overlay_" + sample.volume_id + "_" +
                                  std::to_string(sample.slice_index) + ".png"))
                    .string();
            io::render_overlay(file, sample.image, sample.mask, pred, caption);
            images.push_back({{"file", file}, {"sentence", caption}});
            std::cout << file << "  [" << caption << "]\n";
        }
        if (images.empty()) throw RuntimeFailure("no slices available in split " + rp_split);
        write_run_artifact(dir, "report", config_hash(model->config()), {{"images", images}});
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
