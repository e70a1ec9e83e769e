#include "symseg/backbones.hpp"

#include <mutex>

#include "symseg/errors.hpp"

namespace symseg::backbones {

BackboneConfig BackboneConfig::toy() {
    BackboneConfig c;
    c.base_width = 16;
    c.depth = 3;
    return c;
}

BackboneConfig BackboneConfig::full() {
    BackboneConfig c;
    c.base_width = 64;
    c.depth = 4;
    return c;
}

void BackboneConfig::validate() const {
    if (in_channels < 1) throw ConfigError("backbone: in_channels must be >= 1");
    if (base_width < 1) throw ConfigError("backbone: base width must be >= 1");
    if (depth < 1 || depth > 8) throw ConfigError("backbone: depth must be in [1,8]");
    if (feature_dim < 1) throw ConfigError("backbone: feature dim must be >= 1");
}

void BackboneSpec::validate() const {
    if (name.empty()) throw ValidationError("backbone spec: name must be nonempty");
    for (int64_t w : stage_widths)
        if (w <= 0) throw ValidationError("backbone spec: stage widths must be positive");
}

void Backbone::check_divisible(int64_t h, int64_t w) const {
    const int64_t div = int64_t(1) << cfg_.depth;
    if (h % div == 0 && w % div == 0) return;
    auto up = [div](int64_t v) { return (v + div - 1) / div * div; };
    throw ValidationError("backbone: input " + std::to_string(h) + "x" + std::to_string(w) +
                          " must be divisible by " + std::to_string(div) + "; pad to " +
                          std::to_string(up(h)) + "x" + std::to_string(up(w)));
}

// ---------------------------------------------------------------------------
// DoubleConv
// ---------------------------------------------------------------------------

DoubleConv::DoubleConv(int64_t in_ch, int64_t out_ch, Rng& rng)
    : c1_(in_ch, out_ch, 3, rng), c2_(out_ch, out_ch, 3, rng), n1_(out_ch), n2_(out_ch) {
    register_child("conv1", &c1_);
    register_child("norm1", &n1_);
    register_child("conv2", &c2_);
    register_child("norm2", &n2_);
}

ag::Var DoubleConv::forward(const ag::Var& x) const {
    ag::Var y = ag::relu(n1_.forward(c1_.forward(x)));
    return ag::relu(n2_.forward(c2_.forward(y)));
}

// ---------------------------------------------------------------------------
// UNet
// ---------------------------------------------------------------------------

UNet::UNet(BackboneConfig cfg, Rng& rng) : Backbone(cfg) {
    const int D = cfg_.depth;
    auto width = [&](int level) { return cfg_.base_width << level; };

    enc_.push_back(std::make_unique<DoubleConv>(cfg_.in_channels, width(0), rng));
    for (int d = 1; d <= D; ++d)
        enc_.push_back(std::make_unique<DoubleConv>(width(d - 1), width(d), rng));
    for (int d = D; d >= 1; --d)
        dec_.push_back(std::make_unique<DoubleConv>(width(d) + width(d - 1), width(d - 1), rng));

    head_ = nn::Conv2d(width(0), 1, 1, rng);
    const int64_t feat_in =
        cfg_.feature_source == FeatureSource::kPooledLogits ? 1 : width(0);
    feat_proj_ = nn::Linear(feat_in, cfg_.feature_dim, rng);

    for (size_t i = 0; i < enc_.size(); ++i)
        register_child("enc" + std::to_string(i), enc_[i].get());
    for (size_t i = 0; i < dec_.size(); ++i)
        register_child("dec" + std::to_string(i), dec_[i].get());
    register_child("head", &head_);
    register_child("feat_proj", &feat_proj_);
}

BackboneOutput UNet::forward(const ag::Var& image) const {
    if (image->value.rank() != 4 || image->value.dim(1) != cfg_.in_channels)
        throw ValidationError("unet: input must be [N," + std::to_string(cfg_.in_channels) +
                              ",H,W], got " + shape_str(image->value.shape()));
    check_divisible(image->value.dim(2), image->value.dim(3));

    std::vector<ag::Var> skips;
    ag::Var x = enc_[0]->forward(image);
    skips.push_back(x);
    for (int d = 1; d <= cfg_.depth; ++d) {
        x = enc_[static_cast<size_t>(d)]->forward(ag::maxpool2d(x));
        if (d < cfg_.depth) skips.push_back(x);
    }
    for (int i = 0; i < cfg_.depth; ++i) {
        const ag::Var& skip = skips[skips.size() - 1 - static_cast<size_t>(i)];
        ag::Var up = ag::upsample_bilinear(x, skip->value.dim(2), skip->value.dim(3));
        x = dec_[static_cast<size_t>(i)]->forward(ag::concat_channels(skip, up));
    }

    BackboneOutput out;
    out.logits = head_.forward(x);
    const ag::Var pooled = cfg_.feature_source == FeatureSource::kPooledLogits
                               ? ag::global_avg_pool(out.logits)
                               : ag::global_avg_pool(x);
    out.feature_summary = feat_proj_.forward(pooled);
    return out;
}

// ---------------------------------------------------------------------------
// UNet++
// ---------------------------------------------------------------------------

UNetPP::UNetPP(BackboneConfig cfg, Rng& rng) : Backbone(cfg) {
    const int D = cfg_.depth;
    auto width = [&](int level) { return cfg_.base_width << level; };

    nodes_.resize(static_cast<size_t>(D + 1));
    for (int i = 0; i <= D; ++i) {
        for (int j = 0; j <= D - i; ++j) {
            int64_t in_ch;
            if (j == 0) {
                in_ch = i == 0 ? cfg_.in_channels : width(i - 1);
            } else {
                in_ch = j * width(i) + width(i + 1);
            }
            nodes_[static_cast<size_t>(i)].push_back(
                std::make_unique<DoubleConv>(in_ch, width(i), rng));
            register_child("x" + std::to_string(i) + std::to_string(j),
                           nodes_[static_cast<size_t>(i)].back().get());
        }
    }
    head_ = nn::Conv2d(width(0), 1, 1, rng);
    if (cfg_.deep_supervision) {
        for (int j = 1; j < D; ++j) {
            ds_heads_.push_back(std::make_unique<nn::Conv2d>(width(0), 1, 1, rng));
            register_child("ds_head" + std::to_string(j), ds_heads_.back().get());
        }
    }
    const int64_t feat_in =
        cfg_.feature_source == FeatureSource::kPooledLogits ? 1 : width(0);
    feat_proj_ = nn::Linear(feat_in, cfg_.feature_dim, rng);
    register_child("head", &head_);
    register_child("feat_proj", &feat_proj_);
}

BackboneOutput UNetPP::forward(const ag::Var& image) const {
    if (image->value.rank() != 4 || image->value.dim(1) != cfg_.in_channels)
        throw ValidationError("unetpp: input must be [N," + std::to_string(cfg_.in_channels) +
                              ",H,W], got " + shape_str(image->value.shape()));
    check_divisible(image->value.dim(2), image->value.dim(3));
    const int D = cfg_.depth;

    std::vector<std::vector<ag::Var>> grid(static_cast<size_t>(D + 1));
    grid[0].push_back(nodes_[0][0]->forward(image));
    for (int i = 1; i <= D; ++i)
        grid[static_cast<size_t>(i)].push_back(
            nodes_[static_cast<size_t>(i)][0]->forward(ag::maxpool2d(grid[static_cast<size_t>(i - 1)][0])));

    for (int j = 1; j <= D; ++j) {
        for (int i = 0; i <= D - j; ++i) {
            auto& row = grid[static_cast<size_t>(i)];
            const ag::Var& below = grid[static_cast<size_t>(i + 1)][static_cast<size_t>(j - 1)];
            std::vector<ag::Var> cat(row.begin(), row.begin() + j);
            cat.push_back(ag::upsample_bilinear(below, row[0]->value.dim(2), row[0]->value.dim(3)));
            row.push_back(nodes_[static_cast<size_t>(i)][static_cast<size_t>(j)]->forward(
                ag::concat_channels(cat)));
        }
    }

    BackboneOutput out;
    const ag::Var& final_feat = grid[0][static_cast<size_t>(D)];
    out.logits = head_.forward(final_feat);
    if (cfg_.deep_supervision && !ds_heads_.empty()) {
        ag::Var acc = out.logits;
        for (size_t j = 0; j < ds_heads_.size(); ++j)
            acc = ag::add(acc, ds_heads_[j]->forward(grid[0][j + 1]));
        out.logits = ag::scale(acc, 1.0f / static_cast<float>(ds_heads_.size() + 1));
    }
    const ag::Var pooled = cfg_.feature_source == FeatureSource::kPooledLogits
                               ? ag::global_avg_pool(out.logits)
                               : ag::global_avg_pool(final_feat);
    out.feature_summary = feat_proj_.forward(pooled);
    return out;
}

// ---------------------------------------------------------------------------
// registry
// ---------------------------------------------------------------------------

BackboneRegistry& BackboneRegistry::instance() {
    static BackboneRegistry reg;
    return reg;
}

void BackboneRegistry::add(const BackboneSpec& spec, BackboneFactory factory) {
    spec.validate();
    if (entries_.count(spec.name))
        throw RegistryError("backbone '" + spec.name + "' already registered");
    entries_[spec.name] = Entry{spec, std::move(factory)};
}

std::unique_ptr<Backbone> BackboneRegistry::create(const std::string& name,
                                                   const BackboneConfig& cfg, Rng& rng) const {
    return factory(name)(cfg, rng);
}

const BackboneSpec& BackboneRegistry::spec(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw RegistryError("unknown backbone '" + name + "'");
    return it->second.spec;
}

const BackboneFactory& BackboneRegistry::factory(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw RegistryError("unknown backbone '" + name + "'");
    return it->second.factory;
}

bool BackboneRegistry::contains(const std::string& name) const { return entries_.count(name) > 0; }

std::vector<std::string> BackboneRegistry::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

void register_builtin_backbones() {
    static std::once_flag flag;
    std::call_once(flag, [] {
        auto& reg = BackboneRegistry::instance();
        BackboneSpec unet{"unet", {64, 128, 256, 512, 1024}, 4, 1};
        reg.add(unet, [](const BackboneConfig& cfg, Rng& rng) -> std::unique_ptr<Backbone> {
            return std::make_unique<UNet>(cfg, rng);
        });
        BackboneSpec unetpp{"unetpp", {64, 128, 256, 512, 1024}, 4, 1};
        reg.add(unetpp, [](const BackboneConfig& cfg, Rng& rng) -> std::unique_ptr<Backbone> {
            return std::make_unique<UNetPP>(cfg, rng);
        });
    });
}

}  // namespace symseg::backbones
