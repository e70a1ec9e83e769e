#include "symseg/interpret.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "symseg/errors.hpp"

namespace symseg::interpret {

namespace {

/// One-hot design over observed symbols; symbols seen fewer than min_count
/// times share an "other" column. Column 0 is the (unpenalized) intercept.
Eigen::MatrixXd build_design(const std::vector<int>& symbols, int vocab_size, int min_count) {
    for (int s : symbols)
        if (s < 0 || s >= vocab_size)
            throw ValidationError("interpret: symbol " + std::to_string(s) +
                                  " outside vocabulary [0," + std::to_string(vocab_size) + ")");
    std::map<int, int> counts;
    for (int s : symbols) ++counts[s];
    std::map<int, int> col_of;
    int ncols = 1;
    bool has_other = false;
    for (const auto& [sym, cnt] : counts) {
        if (cnt >= min_count)
            col_of[sym] = ncols++;
        else
            has_other = true;
    }
    const int other_col = has_other ? ncols++ : -1;
    const auto n = static_cast<Eigen::Index>(symbols.size());
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, ncols);
    X.col(0).setOnes();
    for (Eigen::Index i = 0; i < n; ++i) {
        auto it = col_of.find(symbols[static_cast<size_t>(i)]);
        X(i, it != col_of.end() ? it->second : other_col) = 1.0;
    }
    return X;
}

double loglik(const Eigen::VectorXd& eta, const Eigen::VectorXd& y) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        // log sigma(eta) = -log(1+exp(-eta)), stable in both tails
        const double e = eta[i];
        const double log_p = e >= 0 ? -std::log1p(std::exp(-e)) : e - std::log1p(std::exp(e));
        const double log_q = e >= 0 ? -e - std::log1p(std::exp(-e)) : -std::log1p(std::exp(e));
        ll += y[i] * log_p + (1.0 - y[i]) * log_q;
    }
    return ll;
}

/// Penalized IRLS; intercept (column 0) unpenalized.
Eigen::VectorXd logistic_irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double ridge) {
    const Eigen::Index p = X.cols();
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p, ridge);
    penalty[0] = 0.0;
    double prev_obj = -1e300;
    for (int it = 0; it < 200; ++it) {
        const Eigen::VectorXd eta = X * beta;
        Eigen::VectorXd mu(eta.size()), w(eta.size());
        for (Eigen::Index i = 0; i < eta.size(); ++i) {
            const double m = 1.0 / (1.0 + std::exp(-eta[i]));
            mu[i] = m;
            w[i] = std::max(m * (1.0 - m), 1e-10);
        }
        const Eigen::VectorXd grad = X.transpose() * (y - mu) - penalty.cwiseProduct(beta);
        Eigen::MatrixXd H = X.transpose() * w.asDiagonal() * X;
        H.diagonal() += penalty;
        const Eigen::VectorXd step = H.ldlt().solve(grad);
        double t = 1.0;
        const double obj0 = loglik(eta, y) - 0.5 * beta.cwiseProduct(penalty).dot(beta);
        Eigen::VectorXd cand;
        double obj = obj0;
        for (int half = 0; half < 30; ++half) {
            cand = beta + t * step;
            obj = loglik(X * cand, y) - 0.5 * cand.cwiseProduct(penalty).dot(cand);
            if (obj >= obj0 - 1e-12) break;
            t *= 0.5;
        }
        beta = cand;
        if (std::abs(obj - prev_obj) < 1e-12 && grad.lpNorm<Eigen::Infinity>() < 1e-9) break;
        prev_obj = obj;
        if (grad.lpNorm<Eigen::Infinity>() < 1e-10) break;
    }
    return beta;
}

double pearson_r2(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double ma = a.mean(), mb = b.mean();
    const Eigen::VectorXd da = a.array() - ma, db = b.array() - mb;
    const double va = da.squaredNorm(), vb = db.squaredNorm();
    if (va < 1e-30 || vb < 1e-30) return 0.0;
    const double c = da.dot(db);
    return (c * c) / (va * vb);
}

}  // namespace

double null_loglik(const std::vector<uint8_t>& labels) {
    const double n = static_cast<double>(labels.size());
    double pos = 0.0;
    for (uint8_t v : labels) pos += v ? 1.0 : 0.0;
    const double p = pos / n;
    if (p <= 0.0 || p >= 1.0)
        throw UndefinedFitError("null model undefined: outcome has a single class");
    return pos * std::log(p) + (n - pos) * std::log(1.0 - p);
}

double mcfadden(double ll_model, double ll_null) { return 1.0 - ll_model / ll_null; }

double fit_presence(const std::vector<PresenceRow>& rows, int vocab_size, const FitOptions& opts) {
    if (rows.size() < 2) throw UndefinedFitError("fit_presence: needs at least 2 rows");
    std::vector<int> symbols;
    std::vector<uint8_t> labels;
    for (const auto& r : rows) {
        symbols.push_back(r.symbol);
        labels.push_back(r.present ? 1 : 0);
    }
    const double ll0 = null_loglik(labels);  // throws on a single class
    const Eigen::MatrixXd X = build_design(symbols, vocab_size, opts.min_count);
    Eigen::VectorXd y(static_cast<Eigen::Index>(labels.size()));
    for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = labels[static_cast<size_t>(i)];
    const Eigen::VectorXd beta = logistic_irls(X, y, opts.ridge);
    const double ll = loglik(X * beta, y);
    const double r2 = mcfadden(ll, ll0);
    return std::max(0.0, std::min(r2, 1.0 - 1e-12));
}

double fit_area(const std::vector<AreaRow>& rows, int vocab_size, const FitOptions& opts) {
    if (rows.size() < 2) throw UndefinedFitError("fit_area: needs at least 2 rows");
    std::vector<int> symbols;
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].area <= 0.0)
            throw ValidationError("fit_area: rows must be filtered to infection_area > 0");
        symbols.push_back(rows[i].symbol);
        y[static_cast<Eigen::Index>(i)] = rows[i].area;
    }
    const double ymean = y.mean();
    if ((y.array() - ymean).abs().maxCoeff() < 1e-12)
        throw UndefinedFitError("fit_area: outcome is constant");
    const Eigen::MatrixXd X = build_design(symbols, vocab_size, opts.min_count);
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(X.cols(), opts.ridge);
    penalty[0] = 0.0;
    Eigen::MatrixXd XtX = X.transpose() * X;
    XtX.diagonal() += penalty;
    const Eigen::VectorXd beta = XtX.ldlt().solve(X.transpose() * y);
    return pearson_r2(X * beta, y);
}

namespace detail {

std::vector<double> fitted_area_values(const std::vector<AreaRow>& rows, int vocab_size,
                                       const FitOptions& opts, bool extra_constant_column) {
    std::vector<int> symbols;
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (size_t i = 0; i < rows.size(); ++i) {
        symbols.push_back(rows[i].symbol);
        y[static_cast<Eigen::Index>(i)] = rows[i].area;
    }
    Eigen::MatrixXd X = build_design(symbols, vocab_size, opts.min_count);
    if (extra_constant_column) {
        X.conservativeResize(Eigen::NoChange, X.cols() + 1);
        X.col(X.cols() - 1).setOnes();
    }
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(X.cols(), opts.ridge);
    penalty[0] = 0.0;
    Eigen::MatrixXd XtX = X.transpose() * X;
    XtX.diagonal() += penalty;
    const Eigen::VectorXd beta = XtX.ldlt().solve(X.transpose() * y);
    const Eigen::VectorXd fitted = X * beta;
    return std::vector<double>(fitted.data(), fitted.data() + fitted.size());
}

}  // namespace detail

int select_best_position(const std::vector<PositionFit>& fits) {
    if (fits.empty()) throw ValidationError("select_best_position: no fits");
    int best = -1;
    for (const auto& f : fits) {
        if (!f.defined) continue;
        if (best < 0 || f.value > fits[static_cast<size_t>(best)].value) best = f.position - 1;
    }
    if (best < 0) throw UndefinedFitError("select_best_position: every positional fit failed");
    return fits[static_cast<size_t>(best)].position;
}

std::vector<std::vector<int>> parse_sentences(const metrics::EvalReport& report) {
    std::vector<std::vector<int>> out;
    for (const auto& row : report.rows) {
        std::vector<int> symbols;
        std::istringstream in(row.sentence);
        int v;
        while (in >> v) symbols.push_back(v);
        if (symbols.empty())
            throw ValidationError("interpret: report row for " + row.volume_id +
                                  " carries no sentence — was this a baseline run?");
        out.push_back(std::move(symbols));
    }
    return out;
}

namespace {

RegressionResult analyze(const metrics::EvalReport& report, int vocab_size, int positions,
                         const std::string& backbone, const FitOptions& opts, bool presence) {
    if (report.rows.empty()) throw ValidationError("interpret: empty report");
    const auto sentences = parse_sentences(report);
    const int ns = static_cast<int>(sentences[0].size());
    for (const auto& s : sentences)
        if (static_cast<int>(s.size()) != ns)
            throw ValidationError("interpret: ragged sentences in report");
    if (positions <= 0) positions = std::min(4, ns);
    positions = std::min(positions, ns);

    RegressionResult res;
    res.outcome = presence ? "presence" : "area";
    res.sentence_len = ns;
    res.vocab_size = vocab_size;
    res.backbone = backbone;
    for (int pos = 0; pos < positions; ++pos) {
        PositionFit f;
        f.position = pos + 1;
        try {
            if (presence) {
                std::vector<PresenceRow> rows;
                for (size_t i = 0; i < sentences.size(); ++i)
                    rows.push_back({sentences[i][static_cast<size_t>(pos)],
                                    report.rows[i].covid_present});
                f.value = fit_presence(rows, vocab_size, opts);
            } else {
                std::vector<AreaRow> rows;
                for (size_t i = 0; i < sentences.size(); ++i)
                    if (report.rows[i].infection_area > 0)
                        rows.push_back({sentences[i][static_cast<size_t>(pos)],
                                        static_cast<double>(report.rows[i].infection_area)});
                f.value = fit_area(rows, vocab_size, opts);
            }
            f.defined = true;
        } catch (const std::exception& e) {
            f.error = e.what();
        }
        res.fits.push_back(std::move(f));
    }
    res.best_position = select_best_position(res.fits);
    res.best_value = res.fits[static_cast<size_t>(res.best_position - 1)].value;
    return res;
}

}  // namespace

RegressionResult analyze_presence(const metrics::EvalReport& report, int vocab_size, int positions,
                                  const std::string& backbone, const FitOptions& opts) {
    return analyze(report, vocab_size, positions, backbone, opts, true);
}

RegressionResult analyze_area(const metrics::EvalReport& report, int vocab_size, int positions,
                              const std::string& backbone, const FitOptions& opts) {
    return analyze(report, vocab_size, positions, backbone, opts, false);
}

double permutation_mean_presence(const std::vector<PresenceRow>& rows, int vocab_size, int n_perms,
                                 uint64_t seed, const FitOptions& opts) {
    std::vector<PresenceRow> shuffled = rows;
    double acc = 0.0;
    for (int k = 0; k < n_perms; ++k) {
        Rng rng = Rng::stream(seed, static_cast<uint64_t>(k));
        for (size_t i = shuffled.size(); i > 1; --i) {
            const size_t j = rng.below(i);
            std::swap(shuffled[i - 1].present, shuffled[j].present);
        }
        acc += fit_presence(shuffled, vocab_size, opts);
    }
    return acc / n_perms;
}

double permutation_mean_area(const std::vector<AreaRow>& rows, int vocab_size, int n_perms,
                             uint64_t seed, const FitOptions& opts) {
    std::vector<AreaRow> shuffled = rows;
    double acc = 0.0;
    for (int k = 0; k < n_perms; ++k) {
        Rng rng = Rng::stream(seed, static_cast<uint64_t>(k));
        for (size_t i = shuffled.size(); i > 1; --i) {
            const size_t j = rng.below(i);
            std::swap(shuffled[i - 1].area, shuffled[j].area);
        }
        acc += fit_area(shuffled, vocab_size, opts);
    }
    return acc / n_perms;
}

nlohmann::json result_to_json(const RegressionResult& r) {
    nlohmann::json fits = nlohmann::json::array();
    for (const auto& f : r.fits) {
        nlohmann::json jf{{"position", f.position}, {"defined", f.defined}};
        if (f.defined)
            jf["value"] = f.value;
        else
            jf["error"] = f.error;
        fits.push_back(jf);
    }
    return nlohmann::json{{"outcome", r.outcome},
                          {"fits", fits},
                          {"best_position", r.best_position},
                          {"best_value", r.best_value},
                          {"sentence_len", r.sentence_len},
                          {"vocab_size", r.vocab_size},
                          {"backbone", r.backbone}};
}

void write_results(const std::vector<RegressionResult>& results, const std::string& json_path,
                   const std::string& csv_path, const std::string& text_path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : results) arr.push_back(result_to_json(r));
    {
        std::ofstream out(json_path);
        if (!out) throw RuntimeFailure("cannot write " + json_path);
        out << arr.dump(2) << "\n";
    }
    {
        std::ofstream out(csv_path);
        if (!out) throw RuntimeFailure("cannot write " + csv_path);
        out << "backbone,ns,vocab,outcome,best_position,best_value\n";
        out.precision(6);
        for (const auto& r : results)
            out << r.backbone << ',' << r.sentence_len << ',' << r.vocab_size << ',' << r.outcome
                << ",S" << r.best_position << ',' << r.best_value << "\n";
    }
    {
        std::ofstream out(text_path);
        if (!out) throw RuntimeFailure("cannot write " + text_path);
        out << "backbone   N_S  V      outcome    S*   fit\n";
        char buf[128];
        for (const auto& r : results) {
            std::snprintf(buf, sizeof(buf), "%-10s %-4d %-6d %-10s S%-3d %.3f\n",
                          r.backbone.c_str(), r.sentence_len, r.vocab_size, r.outcome.c_str(),
                          r.best_position, r.best_value);
            out << buf;
        }
    }
}

}  // namespace symseg::interpret
