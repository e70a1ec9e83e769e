#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "symseg/backbones.hpp"

namespace symseg {

struct OptimizerConfig {
    std::string kind = "adam";  // "adam" | "sgd"
    double lr = 5e-5;
    int batch_size = 16;
    int max_epochs = 300;
    int patience = 20;

    bool operator==(const OptimizerConfig&) const = default;
};

struct LossConfig {
    double bce_weight = 1.0;
    double dice_weight = 1.0;
    double dice_smooth = 1.0;

    bool operator==(const LossConfig&) const = default;
};

struct SplitConfig {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;

    bool operator==(const SplitConfig&) const = default;
};

struct DataConfig {
    int size = 400;
    int margin = 20;
    SplitConfig splits;
    uint64_t split_seed = 17;
    bool augment = true;
    double rotate_deg = 5.0;
    double scale_lo = 0.97;
    double scale_hi = 1.03;

    bool operator==(const DataConfig&) const = default;
};

/// Full experiment configuration; serializes to JSON losslessly.
struct SymSegConfig {
    int schema_version = 1;
    std::string backbone = "unet";
    bool symbolic = true;
    int sentence_len = 8;   // N_S
    int vocab_size = 1000;  // V
    int64_t embed_dim = 512;
    double temperature = 1.0;
    bool hard_mode = false;
    int sender_layers = 2;
    int receiver_layers = 1;
    std::string feature_source = "pooled_logits";  // or "penultimate"
    int64_t feature_dim = 64;
    std::string backbone_preset = "full";  // "toy" | "full" | "custom"
    int64_t base_width = 64;
    int depth = 4;
    bool deep_supervision = false;
    OptimizerConfig optimizer;
    LossConfig loss;
    DataConfig data;
    uint64_t seed = 42;

    void validate() const;
    backbones::BackboneConfig backbone_config() const;

    bool operator==(const SymSegConfig&) const = default;
};

nlohmann::json config_to_json(const SymSegConfig& cfg);
SymSegConfig config_from_json(const nlohmann::json& j);
SymSegConfig load_config(const std::string& path);
void save_config(const std::string& path, const SymSegConfig& cfg);

/// FNV-1a 64 hex digest of the canonical (sorted-key) serialization.
std::string config_hash(const SymSegConfig& cfg);
std::string fnv1a_hex(const std::string& bytes);

}  // namespace symseg
