#include "symseg/config.hpp"

#include <cmath>
#include <fstream>

#include "symseg/errors.hpp"

namespace symseg {

void SymSegConfig::validate() const {
    if (schema_version != 1)
        throw ConfigError("unsupported schema_version " + std::to_string(schema_version));
    if (backbone.empty()) throw ConfigError("backbone name must be nonempty");
    if (sentence_len < 1) throw ConfigError("sentence_len (N_S) must be >= 1");
    if (vocab_size < 2) throw ConfigError("vocab_size (V) must be >= 2");
    if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (sender_layers < 1 || receiver_layers < 1)
        throw ConfigError("agent layer counts must be >= 1");
    if (feature_source != "pooled_logits" && feature_source != "penultimate")
        throw ConfigError("feature_source must be 'pooled_logits' or 'penultimate'");
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (backbone_preset != "toy" && backbone_preset != "full" && backbone_preset != "custom")
        throw ConfigError("backbone_preset must be toy|full|custom");
    if (base_width < 1 || depth < 1) throw ConfigError("backbone width/depth must be positive");
    if (!(optimizer.lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (optimizer.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (optimizer.max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (optimizer.patience < 0) throw ConfigError("patience must be >= 0");
    if (optimizer.kind != "adam" && optimizer.kind != "sgd")
        throw ConfigError("optimizer.kind must be 'adam' or 'sgd'");
    if (data.size < 32) throw ConfigError("data.size must be >= 32");
    if (data.margin < 0) throw ConfigError("data.margin must be >= 0");
    const double s = data.splits.train + data.splits.val + data.splits.test;
    if (std::abs(s - 1.0) > 1e-9)
        throw ConfigError("split fractions must sum to 1, got " + std::to_string(s));
    if (!(data.scale_lo > 0.0) || data.scale_lo > data.scale_hi)
        throw ConfigError("augment scale range invalid");
    const int eff_depth = backbone_preset == "toy" ? 3 : backbone_preset == "full" ? 4 : depth;
    const int64_t div = int64_t(1) << eff_depth;
    if (data.size % div != 0)
        throw ConfigError("data.size " + std::to_string(data.size) +
                          " must be divisible by 2^depth = " + std::to_string(div));
}

backbones::BackboneConfig SymSegConfig::backbone_config() const {
    backbones::BackboneConfig bc;
    if (backbone_preset == "toy")
        bc = backbones::BackboneConfig::toy();
    else if (backbone_preset == "full")
        bc = backbones::BackboneConfig::full();
    else {
        bc.base_width = base_width;
        bc.depth = depth;
    }
    bc.feature_source = feature_source == "pooled_logits"
                            ? backbones::FeatureSource::kPooledLogits
                            : backbones::FeatureSource::kPenultimate;
    bc.feature_dim = feature_dim;
    bc.deep_supervision = deep_supervision;
    return bc;
}

nlohmann::json config_to_json(const SymSegConfig& c) {
    nlohmann::json j;
    j["schema_version"] = c.schema_version;
    j["backbone"] = c.backbone;
    j["symbolic"] = c.symbolic;
    j["sentence_len"] = c.sentence_len;
    j["vocab_size"] = c.vocab_size;
    j["embed_dim"] = c.embed_dim;
    j["temperature"] = c.temperature;
    j["hard_mode"] = c.hard_mode;
    j["sender_layers"] = c.sender_layers;
    j["receiver_layers"] = c.receiver_layers;
    j["feature_source"] = c.feature_source;
    j["feature_dim"] = c.feature_dim;
    j["backbone_preset"] = c.backbone_preset;
    j["base_width"] = c.base_width;
    j["depth"] = c.depth;
    j["deep_supervision"] = c.deep_supervision;
    j["optimizer"] = {{"kind", c.optimizer.kind},
                      {"lr", c.optimizer.lr},
                      {"batch_size", c.optimizer.batch_size},
                      {"max_epochs", c.optimizer.max_epochs},
                      {"patience", c.optimizer.patience}};
    j["loss"] = {{"bce_weight", c.loss.bce_weight},
                 {"dice_weight", c.loss.dice_weight},
                 {"dice_smooth", c.loss.dice_smooth}};
    j["data"] = {{"size", c.data.size},
                 {"margin", c.data.margin},
                 {"splits",
                  {{"train", c.data.splits.train},
                   {"val", c.data.splits.val},
                   {"test", c.data.splits.test}}},
                 {"split_seed", c.data.split_seed},
                 {"augment", c.data.augment},
                 {"rotate_deg", c.data.rotate_deg},
                 {"scale_lo", c.data.scale_lo},
                 {"scale_hi", c.data.scale_hi}};
    j["seed"] = c.seed;
    return j;
}

namespace {
template <typename T>
void pull(const nlohmann::json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}
}  // namespace

SymSegConfig config_from_json(const nlohmann::json& j) {
    SymSegConfig c;
    pull(j, "schema_version", c.schema_version);
    pull(j, "backbone", c.backbone);
    pull(j, "symbolic", c.symbolic);
    pull(j, "sentence_len", c.sentence_len);
    pull(j, "vocab_size", c.vocab_size);
    pull(j, "embed_dim", c.embed_dim);
    pull(j, "temperature", c.temperature);
    pull(j, "hard_mode", c.hard_mode);
    pull(j, "sender_layers", c.sender_layers);
    pull(j, "receiver_layers", c.receiver_layers);
    pull(j, "feature_source", c.feature_source);
    pull(j, "feature_dim", c.feature_dim);
    pull(j, "backbone_preset", c.backbone_preset);
    pull(j, "base_width", c.base_width);
    pull(j, "depth", c.depth);
    pull(j, "deep_supervision", c.deep_supervision);
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        pull(o, "kind", c.optimizer.kind);
        pull(o, "lr", c.optimizer.lr);
        pull(o, "batch_size", c.optimizer.batch_size);
        pull(o, "max_epochs", c.optimizer.max_epochs);
        pull(o, "patience", c.optimizer.patience);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        pull(l, "bce_weight", c.loss.bce_weight);
        pull(l, "dice_weight", c.loss.dice_weight);
        pull(l, "dice_smooth", c.loss.dice_smooth);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        pull(d, "size", c.data.size);
        pull(d, "margin", c.data.margin);
        if (d.contains("splits")) {
            const auto& s = d.at("splits");
            pull(s, "train", c.data.splits.train);
            pull(s, "val", c.data.splits.val);
            pull(s, "test", c.data.splits.test);
        }
        pull(d, "split_seed", c.data.split_seed);
        pull(d, "augment", c.data.augment);
        pull(d, "rotate_deg", c.data.rotate_deg);
        pull(d, "scale_lo", c.data.scale_lo);
        pull(d, "scale_hi", c.data.scale_hi);
    }
    pull(j, "seed", c.seed);
    c.validate();
    return c;
}

SymSegConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config JSON in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

void save_config(const std::string& path, const SymSegConfig& cfg) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write config file: " + path);
    out << config_to_json(cfg).dump(2) << "\n";
}

std::string fnv1a_hex(const std::string& bytes) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string config_hash(const SymSegConfig& cfg) {
    // nlohmann::json keeps keys sorted, so dump() is canonical.
    return fnv1a_hex(config_to_json(cfg).dump());
}

}  // namespace symseg
