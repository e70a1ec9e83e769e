#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "symseg/config.hpp"
#include "symseg/errors.hpp"
#include "testutil.hpp"

using namespace symseg;

TEST_CASE("config round-trips losslessly through JSON") {
    SymSegConfig cfg;
    cfg.backbone = "unetpp";
    cfg.sentence_len = 16;
    cfg.vocab_size = 10000;
    cfg.temperature = 0.73;
    cfg.optimizer.lr = 5e-5;
    cfg.data.splits = {0.7, 0.15, 0.15};
    cfg.data.split_seed = 123456789012345ull;
    cfg.seed = 987654321;

    SymSegConfig back = config_from_json(config_to_json(cfg));
    CHECK(back == cfg);
    CHECK(config_to_json(back).dump() == config_to_json(cfg).dump());
}

TEST_CASE("config file save/load round-trip") {
    const std::string dir = testutil::temp_dir("config");
    SymSegConfig cfg;
    cfg.backbone_preset = "toy";
    cfg.data.size = 128;
    save_config(dir + "/c.json", cfg);
    SymSegConfig back = load_config(dir + "/c.json");
    CHECK(back == cfg);
}

TEST_CASE("config hash is stable and sensitive") {
    SymSegConfig a, b;
    CHECK(config_hash(a) == config_hash(b));
    b.vocab_size = 10000;
    CHECK(config_hash(a) != config_hash(b));
    b = a;
    b.optimizer.lr = 4.9999e-5;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("config validation rejects out-of-contract values") {
    auto expect_bad = [](auto mutate) {
        SymSegConfig cfg;
        mutate(cfg);
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    };
    expect_bad([](SymSegConfig& c) { c.sentence_len = 0; });
    expect_bad([](SymSegConfig& c) { c.vocab_size = 1; });
    expect_bad([](SymSegConfig& c) { c.optimizer.lr = 0.0; });
    expect_bad([](SymSegConfig& c) { c.optimizer.batch_size = 0; });
    expect_bad([](SymSegConfig& c) { c.temperature = -1.0; });
    expect_bad([](SymSegConfig& c) { c.data.splits = {0.5, 0.1, 0.1}; });
    expect_bad([](SymSegConfig& c) { c.feature_source = "mystery"; });
    expect_bad([](SymSegConfig& c) { c.data.size = 100; });  // not divisible by 2^depth
    expect_bad([](SymSegConfig& c) { c.optimizer.kind = "rmsprop"; });
    SymSegConfig ok;
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("malformed config files raise ConfigError") {
    const std::string dir = testutil::temp_dir("badconfig");
    std::ofstream out(dir + "/broken.json");
    out << "{ not json";
    out.close();
    CHECK_THROWS_AS(load_config(dir + "/broken.json"), ConfigError);
    CHECK_THROWS_AS(load_config(dir + "/missing.json"), ConfigError);
}

TEST_CASE("schema version is enforced") {
    nlohmann::json j = config_to_json(SymSegConfig{});
    j["schema_version"] = 99;
    CHECK_THROWS_AS(config_from_json(j), ConfigError);
}
