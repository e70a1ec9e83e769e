#include "symseg/symfuse.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "symseg/checkpoint.hpp"
#include "symseg/errors.hpp"

namespace symseg::fuse {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

LossReport compute_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg, int epoch,
                        int step) {
    if (!pred.same_shape(target))
        throw ValidationError("compute_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                              shape_str(target.shape()));
    if (!pred.all_finite())
        throw DivergenceError("compute_loss: non-finite prediction", epoch, step);
    for (int64_t i = 0; i < target.numel(); ++i)
        if (target[i] != 0.0f && target[i] != 1.0f)
            throw ValidationError("compute_loss: target must be binary");

    const int64_t N = pred.rank() == 4 ? pred.dim(0) : 1;
    const int64_t M = pred.numel() / N;
    constexpr double kEps = 1e-7;
    double bce = 0.0, dice_loss = 0.0;
    for (int64_t im = 0; im < N; ++im) {
        const float* p = pred.data() + im * M;
        const float* t = target.data() + im * M;
        double inter = 0.0, tot = 0.0;
        for (int64_t i = 0; i < M; ++i) {
            const double pc = std::min(1.0 - kEps, std::max(kEps, double(p[i])));
            bce -= t[i] * std::log(pc) + (1.0 - t[i]) * std::log(1.0 - pc);
            inter += double(p[i]) * t[i];
            tot += double(p[i]) + t[i];
        }
        dice_loss += 1.0 - (2.0 * inter + cfg.dice_smooth) / (tot + cfg.dice_smooth);
    }
    LossReport rep;
    rep.bce_term = cfg.bce_weight * bce / static_cast<double>(pred.numel());
    rep.dice_term = cfg.dice_weight * dice_loss / static_cast<double>(N);
    rep.total = rep.bce_term + rep.dice_term;
    return rep;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

SymSegModel::SymSegModel(const SymSegConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    backbones::register_builtin_backbones();
    const auto bc = cfg_.backbone_config();
    backbone_ = backbones::BackboneRegistry::instance().create(cfg_.backbone, bc, rng);
    register_child("backbone", backbone_.get());
    grid_ = cfg_.data.size >> bc.depth;

    if (cfg_.symbolic) {
        el::SenderConfig sc;
        sc.input_dim = cfg_.feature_dim;
        sc.vocab_size = cfg_.vocab_size;
        sc.sentence_len = cfg_.sentence_len;
        sc.embed_dim = cfg_.embed_dim;
        sc.layers = cfg_.sender_layers;
        sc.temperature = static_cast<float>(cfg_.temperature);
        sc.hard_mode = cfg_.hard_mode;
        sender_ = std::make_unique<el::Sender>(sc, rng);

        el::ReceiverConfig rc;
        rc.vocab_size = cfg_.vocab_size;
        rc.embed_dim = cfg_.embed_dim;
        rc.layers = cfg_.receiver_layers;
        receiver_ = std::make_unique<el::Receiver>(rc, rng);

        projector_ = nn::Linear(cfg_.embed_dim, grid_ * grid_, rng);
        fusion_ = nn::Conv2d(2, 1, 3, rng);

        register_child("sender", sender_.get());
        register_child("receiver", receiver_.get());
        register_child("projector", &projector_);
        register_child("fusion", &fusion_);
    }
}

ag::Var SymSegModel::spatial_project(const ag::Var& hidden, int64_t out_h, int64_t out_w) const {
    if (!cfg_.symbolic) throw ValidationError("spatial_project: baseline model has no projector");
    if (hidden->value.rank() != 2 || hidden->value.dim(1) != cfg_.embed_dim)
        throw ValidationError("spatial_project: hidden must be [N," +
                              std::to_string(cfg_.embed_dim) + "]");
    const int64_t N = hidden->value.dim(0);
    ag::Var grid = ag::reshape(projector_.forward(hidden), {N, 1, grid_, grid_});
    return ag::upsample_bilinear(grid, out_h, out_w);
}

SymSegModel::Result SymSegModel::forward(const ag::Var& images, el::Mode mode, Rng* rng,
                                         const el::NoiseFn& noise, bool zero_receiver) const {
    if (images->value.rank() != 4 || images->value.dim(1) != 1)
        throw ValidationError("symseg: input must be [N,1,H,W]");
    const int64_t H = images->value.dim(2), W = images->value.dim(3);
    if (H != cfg_.data.size || W != cfg_.data.size)
        throw ValidationError("symseg: model built for " + std::to_string(cfg_.data.size) + "x" +
                              std::to_string(cfg_.data.size) + " inputs, got " +
                              std::to_string(H) + "x" + std::to_string(W));

    backbones::BackboneOutput bb = backbone_->forward(images);
    Result res;
    res.feature_summary = bb.feature_summary;
    if (!cfg_.symbolic) {
        res.mask = ag::sigmoid(bb.logits, 1e-7f);
        return res;
    }

    el::SenderResult sent = sender_->forward(bb.feature_summary, mode, rng, noise);
    ag::Var decoded = mode == el::Mode::kTraining ? receiver_->forward_steps(sent.steps)
                                                  : receiver_->forward_symbols(sent.sentences);
    ag::Var xprime = spatial_project(decoded, H, W);
    if (zero_receiver) xprime = ag::constant(Tensor(xprime->value.shape()));
    res.receiver_map = xprime;
    ag::Var fused = fusion_.forward(ag::concat_channels(bb.logits, xprime));
    res.mask = ag::sigmoid(fused, 1e-7f);
    res.sentences = std::move(sent.sentences);
    return res;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

Tensor batch_tensor(const data::SliceDataset& ds, const std::vector<size_t>& ids, bool masks) {
    const int64_t S = ds.samples[ids[0]].image.dim(0);
    Tensor out({static_cast<int64_t>(ids.size()), 1, S, S});
    for (size_t b = 0; b < ids.size(); ++b) {
        const Tensor& src = masks ? ds.samples[ids[b]].mask : ds.samples[ids[b]].image;
        std::copy(src.data(), src.data() + S * S, out.data() + static_cast<int64_t>(b) * S * S);
    }
    return out;
}

Tensor batch_images_aug(const data::SliceDataset& ds, const std::vector<size_t>& ids,
                        Tensor& masks_out, const SymSegConfig& cfg, int epoch) {
    const int64_t S = ds.samples[ids[0]].image.dim(0);
    Tensor images({static_cast<int64_t>(ids.size()), 1, S, S});
    masks_out = Tensor({static_cast<int64_t>(ids.size()), 1, S, S});
    data::AugmentParams ap{cfg.data.rotate_deg, cfg.data.scale_lo, cfg.data.scale_hi};
    for (size_t b = 0; b < ids.size(); ++b) {
        const auto& s = ds.samples[ids[b]];
        if (cfg.data.augment) {
            Rng arng = Rng::stream(cfg.seed + 0x9e37 * static_cast<uint64_t>(epoch),
                                   static_cast<uint64_t>(ids[b]));
            data::SegmentationSample a = data::augment(s, arng, ap);
            std::copy(a.image.data(), a.image.data() + S * S,
                      images.data() + static_cast<int64_t>(b) * S * S);
            std::copy(a.mask.data(), a.mask.data() + S * S,
                      masks_out.data() + static_cast<int64_t>(b) * S * S);
        } else {
            std::copy(s.image.data(), s.image.data() + S * S,
                      images.data() + static_cast<int64_t>(b) * S * S);
            std::copy(s.mask.data(), s.mask.data() + S * S,
                      masks_out.data() + static_cast<int64_t>(b) * S * S);
        }
    }
    return images;
}

std::vector<Tensor> snapshot_params(const std::vector<ag::Var>& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p->value);
    return out;
}

void restore_params(const std::vector<ag::Var>& params, const std::vector<Tensor>& snap) {
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

struct ValScore {
    double loss = 0.0;
    double dice = 0.0;
};

ValScore validate_split(const SymSegModel& model, const data::SliceDataset& ds,
                        const std::vector<size_t>& ids, const SymSegConfig& cfg) {
    ag::NoGradGuard ng;
    ValScore v;
    if (ids.empty()) return v;
    const int B = cfg.optimizer.batch_size;
    int64_t n = 0;
    for (size_t at = 0; at < ids.size(); at += static_cast<size_t>(B)) {
        std::vector<size_t> chunk(ids.begin() + at,
                                  ids.begin() + std::min(ids.size(), at + static_cast<size_t>(B)));
        Tensor imgs = batch_tensor(ds, chunk, false);
        Tensor msks = batch_tensor(ds, chunk, true);
        auto res = model.forward(ag::constant(std::move(imgs)), el::Mode::kInference);
        LossReport lr = compute_loss(res.mask->value, msks, cfg.loss);
        v.loss += lr.total * static_cast<double>(chunk.size());
        const int64_t M = static_cast<int64_t>(cfg.data.size) * cfg.data.size;
        for (size_t b = 0; b < chunk.size(); ++b) {
            Tensor pred({cfg.data.size, cfg.data.size},
                        std::vector<float>(res.mask->value.data() + static_cast<int64_t>(b) * M,
                                           res.mask->value.data() + static_cast<int64_t>(b + 1) * M));
            v.dice += metrics::dice(pred, ds.samples[chunk[b]].mask);
        }
        n += static_cast<int64_t>(chunk.size());
    }
    v.loss /= static_cast<double>(n);
    v.dice /= static_cast<double>(n);
    return v;
}

}  // namespace

TrainResult train(SymSegModel& model, const data::SliceDataset& dataset, const SymSegConfig& cfg,
                  const std::string& out_dir) {
    cfg.validate();
    if (dataset.samples.empty()) throw ValidationError("train: empty dataset");
    fs::create_directories(out_dir);

    std::vector<size_t> train_ids = dataset.indices(data::Split::kTrain);
    std::vector<size_t> val_ids = dataset.indices(data::Split::kVal);
    if (train_ids.empty()) throw ValidationError("train: no training samples");
    if (val_ids.empty()) {
        // Carve a seeded 10% of training volumes for early stopping.
        std::vector<std::string> vols;
        for (size_t i : train_ids)
            if (std::find(vols.begin(), vols.end(), dataset.samples[i].volume_id) == vols.end())
                vols.push_back(dataset.samples[i].volume_id);
        Rng vr = Rng::stream(cfg.seed, 0x7a1);
        for (size_t i = vols.size(); i > 1; --i) std::swap(vols[i - 1], vols[vr.below(i)]);
        const size_t nval = std::max<size_t>(1, vols.size() / 10);
        std::vector<std::string> val_vols(vols.begin(), vols.begin() + static_cast<long>(nval));
        std::vector<size_t> keep;
        for (size_t i : train_ids) {
            if (std::find(val_vols.begin(), val_vols.end(), dataset.samples[i].volume_id) !=
                val_vols.end())
                val_ids.push_back(i);
            else
                keep.push_back(i);
        }
        train_ids = std::move(keep);
    }

    auto params = model.parameters();
    std::unique_ptr<nn::Optimizer> opt;
    if (cfg.optimizer.kind == "adam")
        opt = std::make_unique<nn::Adam>(params, static_cast<float>(cfg.optimizer.lr));
    else
        opt = std::make_unique<nn::Sgd>(params, static_cast<float>(cfg.optimizer.lr));

    Rng shuffle_rng = Rng::stream(cfg.seed, 0x5487);
    Rng noise_rng = Rng::stream(cfg.seed, 0x6e01);

    TrainResult result;
    result.log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    result.checkpoint_path = (fs::path(out_dir) / "checkpoint.symseg").string();
    std::ofstream log(result.log_path, std::ios::trunc);
    if (!log) throw RuntimeFailure("cannot write training log: " + result.log_path);

    double best_val = 1e300;
    int best_epoch = 0;
    std::vector<Tensor> best_snap = snapshot_params(params);
    std::vector<Tensor> last_finite = best_snap;

    auto save_checkpoint = [&](const std::vector<Tensor>& snap) {
        restore_params(params, snap);
        nlohmann::json header;
        header["backbone"] = cfg.backbone;
        header["config"] = config_to_json(cfg);
        header["config_hash"] = config_hash(cfg);
        ckpt::save(result.checkpoint_path, model, header);
    };

    const int B = cfg.optimizer.batch_size;
    for (int epoch = 1; epoch <= cfg.optimizer.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<size_t> order = train_ids;
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double ep_loss = 0.0, ep_bce = 0.0, ep_dice = 0.0;
        int64_t seen = 0;
        int step = 0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(B), ++step) {
            std::vector<size_t> chunk(
                order.begin() + at, order.begin() + std::min(order.size(), at + static_cast<size_t>(B)));
            Tensor masks;
            Tensor images = batch_images_aug(dataset, chunk, masks, cfg, epoch);

            auto res = model.forward(ag::constant(std::move(images)), el::Mode::kTraining,
                                     &noise_rng);
            ag::Var bce = ag::scale(ag::bce_mean(res.mask, masks),
                                    static_cast<float>(cfg.loss.bce_weight));
            ag::Var dce = ag::scale(
                ag::soft_dice_loss(res.mask, masks, static_cast<float>(cfg.loss.dice_smooth)),
                static_cast<float>(cfg.loss.dice_weight));
            ag::Var total = ag::add(bce, dce);
            const double lv = total->value[0];
            if (!std::isfinite(lv)) {
                save_checkpoint(last_finite);
                throw DivergenceError("non-finite training loss", epoch, step);
            }
            opt->zero_grad();
            ag::backward(total);
            opt->step();
            for (const auto& p : params)
                if (!p->value.all_finite()) {
                    save_checkpoint(last_finite);
                    throw DivergenceError("non-finite parameters after update", epoch, step);
                }
            ep_loss += lv * static_cast<double>(chunk.size());
            ep_bce += bce->value[0] * static_cast<double>(chunk.size());
            ep_dice += dce->value[0] * static_cast<double>(chunk.size());
            seen += static_cast<int64_t>(chunk.size());
        }
        last_finite = snapshot_params(params);

        const ValScore val = validate_split(model, dataset, val_ids, cfg);
        const auto t1 = std::chrono::steady_clock::now();

        EpochLog el;
        el.epoch = epoch;
        el.train_loss = ep_loss / static_cast<double>(seen);
        el.train_bce = ep_bce / static_cast<double>(seen);
        el.train_dice_term = ep_dice / static_cast<double>(seen);
        el.val_loss = val.loss;
        el.val_dice = val.dice;
        el.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
        result.log.push_back(el);
        nlohmann::json line{{"epoch", el.epoch},
                            {"train_loss", el.train_loss},
                            {"train_bce", el.train_bce},
                            {"train_dice_term", el.train_dice_term},
                            {"val_loss", el.val_loss},
                            {"val_dice", el.val_dice},
                            {"wall_ms", el.wall_ms}};
        log << line.dump() << "\n";
        log.flush();

        if (val.loss < best_val) {
            best_val = val.loss;
            best_epoch = epoch;
            best_snap = snapshot_params(params);
            result.final_val_dice = val.dice;
        } else if (epoch - best_epoch >= cfg.optimizer.patience) {
            break;  // never run past best_epoch + patience
        }
    }

    result.best_epoch = best_epoch;
    result.best_val_loss = best_val;
    save_checkpoint(best_snap);
    return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

metrics::EvalReport evaluate(const SymSegModel& model, const data::SliceDataset& dataset,
                             data::Split split, int batch_size) {
    ag::NoGradGuard ng;
    metrics::EvalReport report;
    const std::vector<size_t> ids = dataset.indices(split);
    const int64_t S = model.config().data.size;
    const int64_t M = S * S;
    for (size_t at = 0; at < ids.size(); at += static_cast<size_t>(batch_size)) {
        std::vector<size_t> chunk(
            ids.begin() + at, ids.begin() + std::min(ids.size(), at + static_cast<size_t>(batch_size)));
        Tensor imgs = batch_tensor(dataset, chunk, false);
        auto res = model.forward(ag::constant(std::move(imgs)), el::Mode::kInference);
        for (size_t b = 0; b < chunk.size(); ++b) {
            const auto& s = dataset.samples[chunk[b]];
            Tensor pred({S, S},
                        std::vector<float>(res.mask->value.data() + static_cast<int64_t>(b) * M,
                                           res.mask->value.data() + static_cast<int64_t>(b + 1) * M));
            metrics::EvalRow row;
            row.volume_id = s.volume_id;
            row.slice_index = s.slice_index;
            row.cohort = s.cohort;
            row.covid_present = s.covid_present;
            row.infection_area = s.infection_area;
            row.dice = metrics::dice(pred, s.mask);
            row.s_measure = metrics::s_measure(pred, s.mask);
            row.mae = metrics::mae(pred, s.mask);
            if (!res.sentences.empty()) row.sentence = res.sentences[b].to_string();
            report.rows.push_back(std::move(row));
        }
    }
    report.finalize();
    return report;
}

std::unique_ptr<SymSegModel> model_from_checkpoint(const std::string& path) {
    nlohmann::json header = ckpt::read_header(path);
    SymSegConfig cfg = config_from_json(header.at("config"));
    Rng rng(cfg.seed);
    auto model = std::make_unique<SymSegModel>(cfg, rng);
    ckpt::load_into(path, *model);
    return model;
}

}  // namespace symseg::fuse
