#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "symseg/errors.hpp"
#include "symseg/interpret.hpp"
#include "testutil.hpp"

using namespace symseg;
using namespace symseg::interpret;

namespace {

// Gradient-ascent maximizer of the penalized logistic likelihood over an
// explicit one-hot design; independent of the library's IRLS path.
double oracle_mcfadden(const std::vector<PresenceRow>& rows, int n_symbols, double ridge) {
    const size_t n = rows.size();
    const size_t p = static_cast<size_t>(n_symbols) + 1;  // intercept + one-hots
    std::vector<std::vector<double>> X(n, std::vector<double>(p, 0.0));
    std::vector<double> y(n);
    for (size_t i = 0; i < n; ++i) {
        X[i][0] = 1.0;
        X[i][static_cast<size_t>(rows[i].symbol) + 1] = 1.0;
        y[i] = rows[i].present ? 1.0 : 0.0;
    }
    std::vector<double> beta(p, 0.0);
    auto loglik = [&](const std::vector<double>& b) {
        double ll = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double eta = 0.0;
            for (size_t j = 0; j < p; ++j) eta += X[i][j] * b[j];
            ll += y[i] * eta - std::log1p(std::exp(eta));
        }
        for (size_t j = 1; j < p; ++j) ll -= 0.5 * ridge * b[j] * b[j];
        return ll;
    };
    double step = 0.5;
    double cur = loglik(beta);
    for (int it = 0; it < 20000; ++it) {
        std::vector<double> grad(p, 0.0);
        for (size_t i = 0; i < n; ++i) {
            double eta = 0.0;
            for (size_t j = 0; j < p; ++j) eta += X[i][j] * beta[j];
            const double mu = 1.0 / (1.0 + std::exp(-eta));
            for (size_t j = 0; j < p; ++j) grad[j] += X[i][j] * (y[i] - mu);
        }
        for (size_t j = 1; j < p; ++j) grad[j] -= ridge * beta[j];
        std::vector<double> cand(p);
        double next;
        while (true) {
            for (size_t j = 0; j < p; ++j) cand[j] = beta[j] + step * grad[j];
            next = loglik(cand);
            if (next >= cur || step < 1e-12) break;
            step *= 0.5;
        }
        if (std::abs(next - cur) < 1e-14 && it > 100) break;
        beta = cand;
        cur = next;
        step = std::min(step * 1.3, 2.0);
    }
    double ll = 0.0, pos = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double eta = 0.0;
        for (size_t j = 0; j < p; ++j) eta += X[i][j] * beta[j];
        ll += y[i] * eta - std::log1p(std::exp(eta));
        pos += y[i];
    }
    const double pbar = pos / n;
    const double ll0 = pos * std::log(pbar) + (n - pos) * std::log(1.0 - pbar);
    return 1.0 - ll / ll0;
}

// Closed-form normal equations via hand-rolled Gaussian elimination.
double oracle_area_r2(const std::vector<AreaRow>& rows, int n_symbols, double ridge) {
    const size_t n = rows.size();
    const size_t p = static_cast<size_t>(n_symbols) + 1;
    std::vector<std::vector<double>> X(n, std::vector<double>(p, 0.0));
    std::vector<double> y(n);
    for (size_t i = 0; i < n; ++i) {
        X[i][0] = 1.0;
        X[i][static_cast<size_t>(rows[i].symbol) + 1] = 1.0;
        y[i] = rows[i].area;
    }
    std::vector<std::vector<double>> A(p, std::vector<double>(p + 1, 0.0));
    for (size_t a = 0; a < p; ++a) {
        for (size_t b = 0; b < p; ++b)
            for (size_t i = 0; i < n; ++i) A[a][b] += X[i][a] * X[i][b];
        if (a > 0) A[a][a] += ridge;
        for (size_t i = 0; i < n; ++i) A[a][p] += X[i][a] * y[i];
    }
    for (size_t col = 0; col < p; ++col) {  // partial-pivot elimination
        size_t piv = col;
        for (size_t r = col + 1; r < p; ++r)
            if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
        std::swap(A[piv], A[col]);
        for (size_t r = 0; r < p; ++r) {
            if (r == col || A[col][col] == 0.0) continue;
            const double f = A[r][col] / A[col][col];
            for (size_t c = col; c <= p; ++c) A[r][c] -= f * A[col][c];
        }
    }
    std::vector<double> beta(p, 0.0);
    for (size_t j = 0; j < p; ++j)
        if (A[j][j] != 0.0) beta[j] = A[j][p] / A[j][j];
    std::vector<double> fitted(n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < p; ++j) fitted[i] += X[i][j] * beta[j];
    double mf = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mf += fitted[i];
        my += y[i];
    }
    mf /= n;
    my /= n;
    double vf = 0.0, vy = 0.0, c = 0.0;
    for (size_t i = 0; i < n; ++i) {
        vf += (fitted[i] - mf) * (fitted[i] - mf);
        vy += (y[i] - my) * (y[i] - my);
        c += (fitted[i] - mf) * (y[i] - my);
    }
    if (vf < 1e-30 || vy < 1e-30) return 0.0;
    return c * c / (vf * vy);
}

}  // namespace

TEST_CASE("fit_presence: shuffled symbols carry no signal") {
    Rng rng(1);
    std::vector<PresenceRow> rows;
    for (int i = 0; i < 400; ++i)
        rows.push_back({static_cast<int>(rng.below(6)), rng.uniform() < 0.5});
    CHECK(fit_presence(rows, 1000) < 0.05);
}

TEST_CASE("fit_presence: a deterministic symbol approaches a perfect fit") {
    std::vector<PresenceRow> rows;
    for (int i = 0; i < 200; ++i) rows.push_back({i % 2 == 0 ? 3 : 9, i % 2 == 0});
    const double r2 = fit_presence(rows, 1000);
    CHECK(r2 > 0.9);
    CHECK(r2 < 1.0);  // the ridge keeps it off the boundary
}

TEST_CASE("fit_presence matches an independent likelihood maximizer on 50 rows") {
    Rng rng(2);
    for (int rep = 0; rep < 3; ++rep) {
        std::vector<PresenceRow> rows;
        for (int i = 0; i < 50; ++i) {
            const int sym = static_cast<int>(rng.below(4));
            // correlated but noisy outcome, all symbols well-populated
            const bool present = rng.uniform() < (sym < 2 ? 0.8 : 0.25);
            rows.push_back({sym, present});
        }
        bool has0 = false, has1 = false;
        for (auto& r : rows) (r.present ? has1 : has0) = true;
        if (!has0 || !has1) continue;
        const double got = fit_presence(rows, 4);
        const double want = oracle_mcfadden(rows, 4, 1e-3);
        CHECK(got == doctest::Approx(want).epsilon(1e-4));
    }
}

TEST_CASE("fit_presence rejects single-class outcomes") {
    std::vector<PresenceRow> rows;
    for (int i = 0; i < 30; ++i) rows.push_back({i % 5, true});
    CHECK_THROWS_AS(fit_presence(rows, 10), UndefinedFitError);
}

TEST_CASE("fit_area: group-constant outcome explains everything") {
    std::vector<AreaRow> rows;
    for (int i = 0; i < 120; ++i) {
        const int sym = i % 4;
        rows.push_back({sym, 100.0 + 50.0 * sym});
    }
    CHECK(fit_area(rows, 1000) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("fit_area: independent outcome carries no signal; constant outcome is undefined") {
    Rng rng(3);
    std::vector<AreaRow> rows;
    for (int i = 0; i < 400; ++i)
        rows.push_back({static_cast<int>(rng.below(5)), rng.uniform(10.0, 500.0)});
    CHECK(fit_area(rows, 1000) < 0.05);

    std::vector<AreaRow> constant;
    for (int i = 0; i < 50; ++i) constant.push_back({i % 3, 42.0});
    CHECK_THROWS_AS(fit_area(constant, 10), UndefinedFitError);
    std::vector<AreaRow> unfiltered{{0, 12.0}, {1, 0.0}};
    CHECK_THROWS_AS(fit_area(unfiltered, 10), ValidationError);
}

TEST_CASE("fit_area matches the closed-form normal equations on 50 rows") {
    Rng rng(4);
    std::vector<AreaRow> rows;
    for (int i = 0; i < 50; ++i) {
        const int sym = static_cast<int>(rng.below(4));
        rows.push_back({sym, 50.0 * (sym + 1) + rng.uniform(-20.0, 20.0)});
    }
    const double got = fit_area(rows, 4);
    const double want = oracle_area_r2(rows, 4, 1e-3);
    CHECK(got == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("mcfadden of the null model against itself is exactly zero") {
    std::vector<uint8_t> labels;
    Rng rng(5);
    for (int i = 0; i < 100; ++i) labels.push_back(rng.uniform() < 0.4 ? 1 : 0);
    const double ll0 = null_loglik(labels);
    CHECK(mcfadden(ll0, ll0) == 0.0);
}

TEST_CASE("r^2 is invariant under affine rescaling of the outcome") {
    Rng rng(6);
    std::vector<AreaRow> rows, scaled;
    for (int i = 0; i < 200; ++i) {
        const int sym = static_cast<int>(rng.below(6));
        const double area = 30.0 * (sym + 1) + rng.uniform(-10.0, 10.0);
        rows.push_back({sym, area});
        scaled.push_back({sym, area * 0.04});  // pixels -> mm^2
    }
    CHECK(fit_area(rows, 100) == doctest::Approx(fit_area(scaled, 100)).epsilon(1e-9));
}

TEST_CASE("adding a constant column leaves fitted values unchanged") {
    Rng rng(7);
    std::vector<AreaRow> rows;
    for (int i = 0; i < 80; ++i)
        rows.push_back({static_cast<int>(rng.below(5)), rng.uniform(10.0, 300.0)});
    const auto plain = interpret::detail::fitted_area_values(rows, 100, FitOptions{}, false);
    const auto extra = interpret::detail::fitted_area_values(rows, 100, FitOptions{}, true);
    REQUIRE(plain.size() == extra.size());
    for (size_t i = 0; i < plain.size(); ++i)
        CHECK(plain[i] == doctest::Approx(extra[i]).epsilon(1e-8));
}

TEST_CASE("permutation controls stay under 0.05 on both regressions") {
    Rng rng(8);
    std::vector<PresenceRow> prows;
    std::vector<AreaRow> arows;
    for (int i = 0; i < 300; ++i) {
        const int sym = static_cast<int>(rng.below(6));
        prows.push_back({sym, rng.uniform() < 0.4});
        arows.push_back({sym, rng.uniform(20.0, 400.0)});
    }
    CHECK(permutation_mean_presence(prows, 1000, 100, 99) < 0.05);
    CHECK(permutation_mean_area(arows, 1000, 100, 99) < 0.05);
}

TEST_CASE("select_best_position: argmax, tie-break, undefined propagation") {
    std::vector<PositionFit> fits{{1, 0.21, true, ""},
                                  {2, 0.43, true, ""},
                                  {3, 0.10, true, ""},
                                  {4, 0.05, true, ""}};
    CHECK(select_best_position(fits) == 2);

    std::vector<PositionFit> tie{{1, 0.3, true, ""}, {2, 0.3, true, ""}};
    CHECK(select_best_position(tie) == 1);

    std::vector<PositionFit> broken{{1, 0.0, false, "x"}, {2, 0.0, false, "y"}};
    CHECK_THROWS_AS(select_best_position(broken), UndefinedFitError);
}

TEST_CASE("analyze_* walk the first min(4, N_S) positions of report sentences") {
    Rng rng(9);
    metrics::EvalReport report;
    for (int i = 0; i < 160; ++i) {
        metrics::EvalRow r;
        r.volume_id = "p" + std::to_string(i);
        r.covid_present = rng.uniform() < 0.5;
        r.infection_area = r.covid_present ? 50 + static_cast<int64_t>(rng.below(200)) : 0;
        // position 2 encodes presence; everything else is noise
        const int s1 = static_cast<int>(rng.below(5));
        const int s2 = r.covid_present ? 7 : 2;
        const int s3 = static_cast<int>(rng.below(5));
        const int s4 = static_cast<int>(rng.below(5));
        const int s5 = static_cast<int>(rng.below(5));
        r.sentence = std::to_string(s1) + " " + std::to_string(s2) + " " + std::to_string(s3) +
                     " " + std::to_string(s4) + " " + std::to_string(s5);
        report.rows.push_back(r);
    }
    report.finalize();
    RegressionResult res = analyze_presence(report, 10, 0, "unet");
    CHECK(res.fits.size() == 4);  // min(4, 5)
    CHECK(res.best_position == 2);
    CHECK(res.best_value > 0.5);
    CHECK(res.sentence_len == 5);

    RegressionResult area = analyze_area(report, 10, 5, "unet");
    CHECK(area.fits.size() == 5);
    CHECK(area.outcome == "area");
}

TEST_CASE("results serialize as a Table-3-shaped summary (format fixture)") {
    RegressionResult r;
    r.outcome = "presence";
    r.fits = {{1, 0.12, true, ""}, {2, 0.20, true, ""}, {3, 0.31, true, ""}, {4, 0.43, true, ""}};
    r.best_position = 4;
    r.best_value = 0.43;
    r.sentence_len = 8;
    r.vocab_size = 10000;
    r.backbone = "unet";

    nlohmann::json j = result_to_json(r);
    CHECK(j.at("best_position") == 4);
    CHECK(j.at("vocab_size") == 10000);
    CHECK(j.at("fits").size() == 4);

    const std::string dir = testutil::temp_dir("interp_out");
    write_results({r}, dir + "/regression.json", dir + "/regression.csv", dir + "/regression.txt");
    std::ifstream csv(dir + "/regression.csv");
    std::string header, row;
    std::getline(csv, header);
    std::getline(csv, row);
    CHECK(row.find("S4") != std::string::npos);
    CHECK(row.find("0.43") != std::string::npos);
    std::ifstream txt(dir + "/regression.txt");
    std::string text((std::istreambuf_iterator<char>(txt)), {});
    CHECK(text.find("S*") != std::string::npos);
    CHECK(text.find("10000") != std::string::npos);
}
