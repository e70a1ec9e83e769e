#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "symseg/metrics.hpp"
#include "symseg/rng.hpp"

namespace symseg::interpret {

struct PresenceRow {
    int symbol = 0;
    bool present = false;
};

struct AreaRow {
    int symbol = 0;
    double area = 0.0;
};

struct FitOptions {
    double ridge = 1e-3;  // L2 on non-intercept coefficients
    int min_count = 2;    // rarer symbols pool into an "other" category
};

/// McFadden pseudo-R^2 of a ridge-regularized logistic fit of the outcome on
/// one-hot symbol indicators. Throws UndefinedFitError on a single-class
/// outcome.
double fit_presence(const std::vector<PresenceRow>& rows, int vocab_size,
                    const FitOptions& opts = {});

/// Squared Pearson correlation between observed and least-squares-fitted
/// areas (rows must already be filtered to infection_area > 0). Throws
/// UndefinedFitError on a constant outcome.
double fit_area(const std::vector<AreaRow>& rows, int vocab_size, const FitOptions& opts = {});

double null_loglik(const std::vector<uint8_t>& labels);
double mcfadden(double ll_model, double ll_null);

struct PositionFit {
    int position = 0;  // 1-based
    double value = 0.0;
    bool defined = false;
    std::string error;
};

/// 1-based argmax over defined fits; ties resolve to the lowest position.
int select_best_position(const std::vector<PositionFit>& fits);

struct RegressionResult {
    std::string outcome;  // "presence" | "area"
    std::vector<PositionFit> fits;
    int best_position = 0;  // S*
    double best_value = 0.0;
    int sentence_len = 0;
    int vocab_size = 0;
    std::string backbone;
};

std::vector<std::vector<int>> parse_sentences(const metrics::EvalReport& report);

/// Fits the first `positions` symbol positions (default min(4, N_S)).
RegressionResult analyze_presence(const metrics::EvalReport& report, int vocab_size,
                                  int positions = 0, const std::string& backbone = "",
                                  const FitOptions& opts = {});
RegressionResult analyze_area(const metrics::EvalReport& report, int vocab_size,
                              int positions = 0, const std::string& backbone = "",
                              const FitOptions& opts = {});

/// Mean fit value across `n_perms` outcome shuffles (chance control).
double permutation_mean_presence(const std::vector<PresenceRow>& rows, int vocab_size, int n_perms,
                                 uint64_t seed, const FitOptions& opts = {});
double permutation_mean_area(const std::vector<AreaRow>& rows, int vocab_size, int n_perms,
                             uint64_t seed, const FitOptions& opts = {});

namespace detail {
/// Fitted values of the ridge least-squares area fit; optionally appends an
/// extra (penalized) all-ones column to the one-hot design.
std::vector<double> fitted_area_values(const std::vector<AreaRow>& rows, int vocab_size,
                                       const FitOptions& opts, bool extra_constant_column);
}  // namespace detail

nlohmann::json result_to_json(const RegressionResult& r);
void write_results(const std::vector<RegressionResult>& results, const std::string& json_path,
                   const std::string& csv_path, const std::string& text_path);

}  // namespace symseg::interpret
