#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "symseg/nn.hpp"

namespace symseg::backbones {

/// Pre-sigmoid segmentation logits plus a pooled feature vector for the
/// symbol channel.
struct BackboneOutput {
    ag::Var logits;           // [N,1,H,W]
    ag::Var feature_summary;  // [N, feature_dim]
};

enum class FeatureSource { kPooledLogits, kPenultimate };

struct BackboneConfig {
    int64_t in_channels = 1;
    int64_t base_width = 64;
    int depth = 4;  // number of 2x downsamplings
    FeatureSource feature_source = FeatureSource::kPooledLogits;
    int64_t feature_dim = 64;
    bool deep_supervision = false;  // UNet++ only

    static BackboneConfig toy();   // base 16, depth 3 (desk-scale preset)
    static BackboneConfig full();  // base 64, depth 4
    void validate() const;
};

struct BackboneSpec {
    std::string name;
    std::vector<int64_t> stage_widths;
    int depth = 0;
    int64_t input_channels = 1;
    void validate() const;
};

class Backbone : public nn::Module {
public:
    virtual BackboneOutput forward(const ag::Var& image) const = 0;
    virtual std::string name() const = 0;
    const BackboneConfig& config() const { return cfg_; }

protected:
    explicit Backbone(BackboneConfig cfg) : cfg_(cfg) { cfg_.validate(); }
    /// Throws naming the padding needed when dims do not divide 2^depth.
    void check_divisible(int64_t h, int64_t w) const;
    BackboneConfig cfg_;
};

/// conv3x3 -> InstanceNorm -> ReLU, twice.
class DoubleConv : public nn::Module {
public:
    DoubleConv() = default;
    DoubleConv(int64_t in_ch, int64_t out_ch, Rng& rng);
    ag::Var forward(const ag::Var& x) const;

private:
    nn::Conv2d c1_, c2_;
    nn::InstanceNorm2d n1_, n2_;
};

class UNet : public Backbone {
public:
    UNet(BackboneConfig cfg, Rng& rng);
    BackboneOutput forward(const ag::Var& image) const override;
    std::string name() const override { return "unet"; }

private:
    std::vector<std::unique_ptr<DoubleConv>> enc_;  // depth+1 blocks
    std::vector<std::unique_ptr<DoubleConv>> dec_;  // depth blocks
    nn::Conv2d head_;
    nn::Linear feat_proj_;
};

/// Nested dense skip pathways; a strict architectural superset of UNet.
class UNetPP : public Backbone {
public:
    UNetPP(BackboneConfig cfg, Rng& rng);
    BackboneOutput forward(const ag::Var& image) const override;
    std::string name() const override { return "unetpp"; }

private:
    // nodes_[i][j] computes grid node X(i,j); j = 0 is the encoder column.
    std::vector<std::vector<std::unique_ptr<DoubleConv>>> nodes_;
    nn::Conv2d head_;
    std::vector<std::unique_ptr<nn::Conv2d>> ds_heads_;
    nn::Linear feat_proj_;
};

using BackboneFactory =
    std::function<std::unique_ptr<Backbone>(const BackboneConfig&, Rng&)>;

/// Process-wide name -> factory map; lets external backbones plug in.
class BackboneRegistry {
public:
    static BackboneRegistry& instance();

    void add(const BackboneSpec& spec, BackboneFactory factory);
    std::unique_ptr<Backbone> create(const std::string& name, const BackboneConfig& cfg,
                                     Rng& rng) const;
    const BackboneSpec& spec(const std::string& name) const;
    const BackboneFactory& factory(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::vector<std::string> names() const;

private:
    struct Entry {
        BackboneSpec spec;
        BackboneFactory factory;
    };
    std::map<std::string, Entry> entries_;
};

/// Registers "unet" and "unetpp"; safe to call more than once.
void register_builtin_backbones();

}  // namespace symseg::backbones
