#pragma once

#include <memory>
#include <string>
#include <vector>

#include "symseg/backbones.hpp"
#include "symseg/config.hpp"
#include "symseg/data.hpp"
#include "symseg/elcore.hpp"
#include "symseg/metrics.hpp"

namespace symseg::fuse {

struct LossReport {
    double total = 0.0;
    double bce_term = 0.0;
    double dice_term = 0.0;
};

/// Plain evaluation of the training loss on tensors (BCE + soft Dice).
/// Non-finite predictions raise DivergenceError with the given context.
LossReport compute_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg = {},
                        int epoch = -1, int step = -1);

/// Backbone + Sender + Receiver + spatial projector + fusion head.
/// With cfg.symbolic == false only the backbone and a sigmoid remain.
class SymSegModel : public nn::Module {
public:
    SymSegModel(const SymSegConfig& cfg, Rng& rng);

    struct Result {
        ag::Var mask;  // [N,1,H,W] probabilities in (0,1)
        std::vector<el::SymbolSentence> sentences;
        ag::Var receiver_map;      // decoded x' channel (null for baselines)
        ag::Var feature_summary;   // the Sender's input vector
    };

    /// zero_receiver replaces the decoded channel with zeros (ablation probe).
    Result forward(const ag::Var& images, el::Mode mode, Rng* rng = nullptr,
                   const el::NoiseFn& noise = nullptr, bool zero_receiver = false) const;

    /// hidden [N,embed] -> coarse grid -> bilinear upsample to H x W.
    ag::Var spatial_project(const ag::Var& hidden, int64_t out_h, int64_t out_w) const;

    const SymSegConfig& config() const { return cfg_; }
    const backbones::Backbone& backbone() const { return *backbone_; }
    const el::Sender& sender() const { return *sender_; }
    const el::Receiver& receiver() const { return *receiver_; }
    nn::Conv2d& fusion_conv() { return fusion_; }
    int64_t coarse_grid() const { return grid_; }

private:
    SymSegConfig cfg_;
    std::unique_ptr<backbones::Backbone> backbone_;
    std::unique_ptr<el::Sender> sender_;
    std::unique_ptr<el::Receiver> receiver_;
    nn::Linear projector_;
    nn::Conv2d fusion_;
    int64_t grid_ = 0;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double train_bce = 0.0;
    double train_dice_term = 0.0;
    double val_loss = 0.0;
    double val_dice = 0.0;
    int64_t wall_ms = 0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    double final_val_dice = 0.0;
    std::string checkpoint_path;
    std::string log_path;
};

/// End-to-end optimization with early stopping on validation loss.
/// Writes <out_dir>/checkpoint.symseg (best weights) and train_log.jsonl.
TrainResult train(SymSegModel& model, const data::SliceDataset& dataset, const SymSegConfig& cfg,
                  const std::string& out_dir);

/// Inference over a split; one report row per slice.
metrics::EvalReport evaluate(const SymSegModel& model, const data::SliceDataset& dataset,
                             data::Split split, int batch_size = 16);

/// Construct the model a checkpoint was trained with, then load its weights.
std::unique_ptr<SymSegModel> model_from_checkpoint(const std::string& path);

}  // namespace symseg::fuse
