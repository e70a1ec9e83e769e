#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "symseg/backbones.hpp"
#include "symseg/checkpoint.hpp"
#include "symseg/errors.hpp"
#include "symseg/graph.hpp"
#include "testutil.hpp"

using namespace symseg;
using namespace symseg::backbones;

namespace {

BackboneConfig tiny_cfg(int depth = 2, int64_t width = 4) {
    BackboneConfig c;
    c.base_width = width;
    c.depth = depth;
    return c;
}

}  // namespace

TEST_CASE("unet maps 400x400 input to a 400x400 logit map") {
    Rng rng(1);
    UNet net(BackboneConfig::toy(), rng);
    ag::NoGradGuard ng;
    auto out = net.forward(ag::constant(testutil::random_tensor({1, 1, 400, 400}, rng)));
    CHECK(out.logits->value.shape() == Shape{1, 1, 400, 400});
    CHECK(out.feature_summary->value.shape() == Shape{1, 64});
    CHECK(out.logits->value.all_finite());
}

TEST_CASE("unet rejects dims that do not divide 2^depth and names the padding") {
    Rng rng(2);
    UNet net(tiny_cfg(3), rng);
    ag::NoGradGuard ng;
    try {
        net.forward(ag::constant(Tensor({1, 1, 100, 98})));
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("104") != std::string::npos);  // 100 -> 104, 98 -> 104
        CHECK(msg.find("divisible by 8") != std::string::npos);
    }
}

TEST_CASE("unet: zero-initialized final layer yields all-zero logits") {
    Rng rng(3);
    UNet net(tiny_cfg(), rng);
    for (auto& [name, p] : net.named_parameters())
        if (name.rfind("head.", 0) == 0) p->value.fill(0.0f);
    ag::NoGradGuard ng;
    auto out = net.forward(ag::constant(Tensor({1, 1, 64, 64})));
    for (int64_t i = 0; i < out.logits->value.numel(); ++i) CHECK(out.logits->value[i] == 0.0f);
}

TEST_CASE("unet forward is repeatable with frozen weights") {
    Rng rng(4);
    UNet net(tiny_cfg(), rng);
    auto img = testutil::random_tensor({2, 1, 32, 32}, rng);
    ag::NoGradGuard ng;
    auto a = net.forward(ag::constant(img));
    auto b = net.forward(ag::constant(img));
    CHECK(a.logits->value.all_finite());
    for (int64_t i = 0; i < a.logits->value.numel(); ++i)
        CHECK(a.logits->value[i] == b.logits->value[i]);
}

TEST_CASE("unetpp output contract and parameter superset") {
    Rng rng(5);
    UNetPP pp(tiny_cfg(), rng);
    Rng rng2(5);
    UNet plain(tiny_cfg(), rng2);
    CHECK(pp.parameter_count() > plain.parameter_count());

    ag::NoGradGuard ng;
    auto out = pp.forward(ag::constant(testutil::random_tensor({1, 1, 48, 48}, rng)));
    CHECK(out.logits->value.shape() == Shape{1, 1, 48, 48});
    CHECK(out.logits->value.all_finite());
}

TEST_CASE("unetpp 400x400 shape contract at toy width") {
    Rng rng(6);
    UNetPP pp(BackboneConfig::toy(), rng);
    ag::NoGradGuard ng;
    auto out = pp.forward(ag::constant(testutil::random_tensor({1, 1, 400, 400}, rng)));
    CHECK(out.logits->value.shape() == Shape{1, 1, 400, 400});
}

TEST_CASE("unetpp deep supervision keeps the output contract") {
    Rng rng(7);
    BackboneConfig c = tiny_cfg(3);
    c.deep_supervision = true;
    UNetPP pp(c, rng);
    ag::NoGradGuard ng;
    auto out = pp.forward(ag::constant(testutil::random_tensor({1, 1, 40, 40}, rng)));
    CHECK(out.logits->value.shape() == Shape{1, 1, 40, 40});
    CHECK(out.logits->value.all_finite());
}

TEST_CASE("penultimate feature source pools decoder features") {
    Rng rng(8);
    BackboneConfig c = tiny_cfg();
    c.feature_source = FeatureSource::kPenultimate;
    c.feature_dim = 10;
    UNet net(c, rng);
    ag::NoGradGuard ng;
    auto out = net.forward(ag::constant(testutil::random_tensor({3, 1, 32, 32}, rng)));
    CHECK(out.feature_summary->value.shape() == Shape{3, 10});
}

TEST_CASE("registry: identity, duplicates, unknown names") {
    register_builtin_backbones();
    auto& reg = BackboneRegistry::instance();
    CHECK(reg.contains("unet"));
    CHECK(reg.contains("unetpp"));
    const BackboneFactory* f1 = &reg.factory("unet");
    const BackboneFactory* f2 = &reg.factory("unet");
    CHECK(f1 == f2);

    Rng rng(9);
    auto made = reg.create("unet", tiny_cfg(), rng);
    CHECK(made->name() == "unet");

    BackboneSpec dup{"unet", {16}, 3, 1};
    CHECK_THROWS_AS(reg.add(dup, reg.factory("unet")), RegistryError);
    CHECK_THROWS_AS(reg.factory("inf-net-external"), RegistryError);
    BackboneSpec nameless{"", {16}, 3, 1};
    CHECK_THROWS_AS(nameless.validate(), ValidationError);
}

TEST_CASE("gradient flows to every trainable parameter after one backward") {
    Rng rng(10);
    UNet net(tiny_cfg(), rng);
    auto img = testutil::random_tensor({2, 1, 16, 16}, rng);
    auto target = testutil::random_binary({2, 1, 16, 16}, rng);
    auto out = net.forward(ag::constant(img));
    ag::Var loss = ag::add(ag::bce_mean(ag::sigmoid(out.logits, 1e-7f), target),
                           ag::mean_all(ag::mul(out.feature_summary, out.feature_summary)));
    ag::backward(loss);
    for (auto& [name, p] : net.named_parameters()) {
        INFO(name);
        REQUIRE_FALSE(p->grad.empty());
        CHECK(p->grad.all_finite());
        double norm = 0.0;
        for (int64_t i = 0; i < p->grad.numel(); ++i) norm += std::abs(double(p->grad[i]));
        CHECK(norm > 0.0);
    }
}

TEST_CASE("identical seeds give identical parameters") {
    Rng a(77), b(77);
    UNet na(tiny_cfg(), a), nb(tiny_cfg(), b);
    auto pa = na.named_parameters(), pb = nb.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i)
        for (int64_t j = 0; j < pa[i].second->value.numel(); ++j)
            CHECK(pa[i].second->value[j] == pb[i].second->value[j]);
}

TEST_CASE("checkpoint round-trip restores every parameter bit-exactly") {
    Rng rng(11);
    UNet net(tiny_cfg(), rng);
    const std::string dir = testutil::temp_dir("ckpt");
    nlohmann::json header{{"backbone", "unet"}};
    ckpt::save(dir + "/w.symseg", net, header);

    Rng rng2(999);
    UNet other(tiny_cfg(), rng2);
    ckpt::load_into(dir + "/w.symseg", other);
    auto pa = net.named_parameters(), pb = other.named_parameters();
    for (size_t i = 0; i < pa.size(); ++i)
        for (int64_t j = 0; j < pa[i].second->value.numel(); ++j)
            CHECK(pa[i].second->value[j] == pb[i].second->value[j]);

    auto hdr = ckpt::read_header(dir + "/w.symseg");
    CHECK(hdr.at("backbone") == "unet");
    CHECK(hdr.at("tensors").size() == pa.size());
}
