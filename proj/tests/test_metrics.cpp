#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracle_smeasure.hpp"
#include "symseg/errors.hpp"
#include "symseg/metrics.hpp"
#include "testutil.hpp"

using namespace symseg;
using namespace symseg::metrics;

namespace {

oracle::Map to_map(const Tensor& t) {
    oracle::Map m;
    m.h = static_cast<int>(t.dim(0));
    m.w = static_cast<int>(t.dim(1));
    m.v.assign(t.data(), t.data() + t.numel());
    return m;
}

}  // namespace

TEST_CASE("dice: identity, disjoint, hand-counted overlap") {
    Rng rng(1);
    Tensor a = testutil::random_binary({8, 8}, rng);
    a[0] = 1.0f;  // nonempty
    CHECK(dice(a, a) == doctest::Approx(1.0));

    Tensor left({4, 4}), right({4, 4});
    left[0] = left[1] = 1.0f;
    right[10] = right[11] = 1.0f;
    CHECK(dice(left, right) == doctest::Approx(0.0));

    // two 2x2 blocks sharing a 1x2 strip: 2*2/(4+4)
    Tensor p({4, 4}), t({4, 4});
    p[0] = p[1] = p[4] = p[5] = 1.0f;
    t[4] = t[5] = t[8] = t[9] = 1.0f;
    CHECK(dice(p, t) == doctest::Approx(0.5));
}

TEST_CASE("dice: both-empty convention and shape validation") {
    Tensor z({4, 4});
    CHECK(dice(z, z) == doctest::Approx(1.0));
    CHECK_THROWS_AS(dice(Tensor({2, 2}), Tensor({2, 3})), ValidationError);
}

TEST_CASE("mae: identity, complement, scalar recomputation") {
    Rng rng(2);
    Tensor t = testutil::random_binary({8, 8}, rng);
    CHECK(mae(t, t) == doctest::Approx(0.0));
    Tensor inv({8, 8});
    for (int64_t i = 0; i < 64; ++i) inv[i] = 1.0f - t[i];
    CHECK(mae(inv, t) == doctest::Approx(1.0));

    for (int rep = 0; rep < 20; ++rep) {
        Tensor pred = testutil::random_tensor({8, 8}, rng, 0.0f, 1.0f);
        Tensor mask = testutil::random_binary({8, 8}, rng);
        double expect = 0.0;
        for (int64_t i = 0; i < 64; ++i) expect += std::abs(double(pred[i]) - double(mask[i]));
        expect /= 64.0;
        CHECK(mae(pred, mask) == doctest::Approx(expect).epsilon(1e-10));
    }
    CHECK_THROWS_AS(mae(Tensor({2, 2}, 1.5f), Tensor({2, 2})), ValidationError);
}

TEST_CASE("dice and mae match brute-force pixel counting on 200 random 16x16 pairs") {
    Rng rng(3);
    for (int rep = 0; rep < 200; ++rep) {
        Tensor p = testutil::random_binary({16, 16}, rng, rng.uniform(0.1, 0.9));
        Tensor t = testutil::random_binary({16, 16}, rng, rng.uniform(0.1, 0.9));
        int64_t inter = 0, pa = 0, ta = 0, diff = 0;
        for (int64_t i = 0; i < 256; ++i) {
            inter += p[i] == 1.0f && t[i] == 1.0f;
            pa += p[i] == 1.0f;
            ta += t[i] == 1.0f;
            diff += p[i] != t[i];
        }
        const double want_dice = (pa + ta) == 0 ? 1.0 : 2.0 * inter / double(pa + ta);
        CHECK(dice(p, t) == want_dice);
        CHECK(mae(p, t) == doctest::Approx(diff / 256.0).epsilon(1e-12));
    }
}

TEST_CASE("dice symmetry for binary inputs") {
    Rng rng(4);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor a = testutil::random_binary({12, 12}, rng);
        Tensor b = testutil::random_binary({12, 12}, rng);
        CHECK(dice(a, b) == dice(b, a));
    }
}

TEST_CASE("dice-mae coupling for binary predictions") {
    Rng rng(5);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor a = testutil::random_binary({10, 10}, rng);
        Tensor b = rng.uniform() < 0.3 ? a : testutil::random_binary({10, 10}, rng);
        const bool dice_one = dice(a, b) == 1.0;
        const bool mae_zero = mae(a, b) == 0.0;
        CHECK(dice_one == mae_zero);
    }
}

TEST_CASE("s-measure: identity, degenerate targets, alpha endpoint") {
    Rng rng(6);
    Tensor t = testutil::random_binary({8, 8}, rng);
    t[0] = 1.0f;
    t[63] = 0.0f;
    CHECK(s_measure(t, t) == doctest::Approx(1.0).epsilon(1e-9));

    Tensor empty({8, 8});
    Tensor pred = testutil::random_tensor({8, 8}, rng, 0.0f, 1.0f);
    CHECK(s_measure(pred, empty) == doctest::Approx(1.0 - pred.mean()).epsilon(1e-12));
    Tensor full({8, 8}, 1.0f);
    CHECK(s_measure(pred, full) == doctest::Approx(pred.mean()).epsilon(1e-12));

    CHECK(s_measure(pred, t, 1.0) == doctest::Approx(s_object(pred, t)).epsilon(1e-12));
}

TEST_CASE("s-measure: complement prediction scores below 0.5 and matches the oracle") {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor t = testutil::random_binary({8, 8}, rng, 0.4);
        bool has_fg = false, has_bg = false;
        for (int64_t i = 0; i < 64; ++i) (t[i] == 1.0f ? has_fg : has_bg) = true;
        if (!has_fg || !has_bg) continue;
        Tensor pred({8, 8});
        for (int64_t i = 0; i < 64; ++i) pred[i] = 1.0f - t[i];
        const double v = s_measure(pred, t);
        CHECK(v == doctest::Approx(oracle::structure_measure(to_map(pred), to_map(t))).epsilon(1e-6));
        CHECK(v < 0.5);
    }
}

TEST_CASE("s-measure matches the independent reference on 50 random pairs") {
    Rng rng(8);
    for (int rep = 0; rep < 50; ++rep) {
        const int64_t side = 8 + static_cast<int64_t>(rng.below(9));
        Tensor pred = testutil::random_tensor({side, side}, rng, 0.0f, 1.0f);
        Tensor t = testutil::random_binary({side, side}, rng, rng.uniform(0.05, 0.95));
        const double got = s_measure(pred, t);
        const double want = oracle::structure_measure(to_map(pred), to_map(t));
        CHECK(got == doctest::Approx(want).epsilon(1e-6));
        CHECK(got >= 0.0);
        CHECK(got <= 1.0);
    }
}

TEST_CASE("all three metrics stay in [0,1] on valid inputs") {
    Rng rng(9);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor pred = testutil::random_tensor({9, 9}, rng, 0.0f, 1.0f);
        Tensor t = testutil::random_binary({9, 9}, rng, rng.uniform(0.0, 1.0));
        for (double v : {dice(pred, t), mae(pred, t), s_measure(pred, t)}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("report CSV round-trip and aggregates") {
    EvalReport rep;
    for (int i = 0; i < 5; ++i) {
        EvalRow r;
        r.volume_id = "phantom_0000" + std::to_string(i);
        r.slice_index = i;
        r.cohort = "phantom";
        r.covid_present = i % 2 == 0;
        r.infection_area = i * 17;
        r.dice = 0.5 + 0.05 * i;
        r.s_measure = 0.6 + 0.05 * i;
        r.mae = 0.1 / (1 + i);
        r.sentence = "189 663 277 277 925 103 155 155";
        rep.rows.push_back(r);
    }
    rep.finalize();
    CHECK(rep.mean_dice == doctest::Approx(0.6));

    const std::string dir = testutil::temp_dir("metrics_csv");
    write_report_csv(rep, dir + "/report.csv");
    write_aggregates_json(rep, dir + "/aggregates.json");
    EvalReport back = read_report_csv(dir + "/report.csv");
    REQUIRE(back.rows.size() == rep.rows.size());
    for (size_t i = 0; i < rep.rows.size(); ++i) {
        CHECK(back.rows[i].sentence == rep.rows[i].sentence);
        CHECK(back.rows[i].dice == doctest::Approx(rep.rows[i].dice).epsilon(1e-12));
        CHECK(back.rows[i].covid_present == rep.rows[i].covid_present);
        CHECK(back.rows[i].infection_area == rep.rows[i].infection_area);
    }
    CHECK(back.mean_mae == doctest::Approx(rep.mean_mae).epsilon(1e-12));
}
