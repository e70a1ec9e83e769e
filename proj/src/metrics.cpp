#include "symseg/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "symseg/errors.hpp"

namespace symseg::metrics {

namespace {

void check_pair(const Tensor& pred, const Tensor& target, bool pred_unit_range) {
    if (!pred.same_shape(target))
        throw ValidationError("metric: pred " + shape_str(pred.shape()) + " vs target " +
                              shape_str(target.shape()));
    if (pred.empty()) throw ValidationError("metric: empty tensors");
    if (pred_unit_range)
        for (int64_t i = 0; i < pred.numel(); ++i)
            if (pred[i] < -1e-6f || pred[i] > 1.0f + 1e-6f)
                throw ValidationError("metric: pred values must lie in [0,1]");
}

constexpr double kEps = 2.2204e-16;  // matched in the reference definition

}  // namespace

double dice(const Tensor& pred, const Tensor& target, double threshold) {
    check_pair(pred, target, false);
    int64_t inter = 0, p_area = 0, t_area = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred[i] >= threshold;
        const bool t = target[i] >= 0.5f;
        inter += p && t;
        p_area += p;
        t_area += t;
    }
    if (p_area + t_area == 0) return 1.0;  // no disease, none predicted
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p_area + t_area);
}

double mae(const Tensor& pred, const Tensor& target) {
    check_pair(pred, target, true);
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) acc += std::abs(double(pred[i]) - double(target[i]));
    return acc / static_cast<double>(pred.numel());
}

// ---------------------------------------------------------------------------
// structure measure
// ---------------------------------------------------------------------------

namespace {

// Similarity of a (possibly masked) prediction against a set region:
// 2*mean / (mean^2 + 1 + std + eps), sample std over the region.
double object_score(const Tensor& pred, const Tensor& gt, bool fg) {
    int64_t n = 0;
    double sum = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i)
        if ((gt[i] >= 0.5f) == fg) {
            sum += fg ? pred[i] : 1.0 - pred[i];
            ++n;
        }
    if (n == 0) return 0.0;
    const double x = sum / n;
    double var = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i)
        if ((gt[i] >= 0.5f) == fg) {
            const double d = (fg ? pred[i] : 1.0 - pred[i]) - x;
            var += d * d;
        }
    const double sigma = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
    return 2.0 * x / (x * x + 1.0 + sigma + kEps);
}

struct Block {
    int64_t y0, y1, x0, x1;  // half-open
    int64_t area() const { return (y1 - y0) * (x1 - x0); }
};

double region_ssim(const Tensor& pred, const Tensor& gt, const Block& b) {
    const int64_t w = gt.dim(1);
    const int64_t n = b.area();
    if (n == 0) return 1.0;
    double sx = 0.0, sy = 0.0;
    for (int64_t y = b.y0; y < b.y1; ++y)
        for (int64_t x = b.x0; x < b.x1; ++x) {
            sx += pred[y * w + x];
            sy += gt[y * w + x];
        }
    const double mx = sx / n, my = sy / n;
    double vx = 0.0, vy = 0.0, cxy = 0.0;
    for (int64_t y = b.y0; y < b.y1; ++y)
        for (int64_t x = b.x0; x < b.x1; ++x) {
            const double dx = pred[y * w + x] - mx;
            const double dy = gt[y * w + x] - my;
            vx += dx * dx;
            vy += dy * dy;
            cxy += dx * dy;
        }
    const double denom_n = static_cast<double>(n) - 1.0 + kEps;
    vx /= denom_n;
    vy /= denom_n;
    cxy /= denom_n;
    const double alpha = 4.0 * mx * my * cxy;
    const double beta = (mx * mx + my * my) * (vx + vy);
    if (alpha != 0.0) return alpha / (beta + kEps);
    return beta == 0.0 ? 1.0 : 0.0;
}

}  // namespace

double s_object(const Tensor& pred, const Tensor& target) {
    const double u = [&] {
        double s = 0.0;
        for (int64_t i = 0; i < target.numel(); ++i) s += target[i] >= 0.5f;
        return s / target.numel();
    }();
    return u * object_score(pred, target, true) + (1.0 - u) * object_score(pred, target, false);
}

double s_region(const Tensor& pred, const Tensor& target) {
    const int64_t h = target.dim(0), w = target.dim(1);
    // foreground centroid, 1-based rounding as in the reference definition
    double total = 0.0, sumx = 0.0, sumy = 0.0;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            if (target[y * w + x] >= 0.5f) {
                total += 1.0;
                sumx += static_cast<double>(x + 1);
                sumy += static_cast<double>(y + 1);
            }
    int64_t X, Y;
    if (total == 0.0) {
        X = static_cast<int64_t>(std::llround(w / 2.0));
        Y = static_cast<int64_t>(std::llround(h / 2.0));
    } else {
        X = static_cast<int64_t>(std::llround(sumx / total));
        Y = static_cast<int64_t>(std::llround(sumy / total));
    }
    const Block blocks[4] = {
        {0, Y, 0, X},  // left-top
        {0, Y, X, w},  // right-top
        {Y, h, 0, X},  // left-bottom
        {Y, h, X, w},  // right-bottom
    };
    const double hw = static_cast<double>(h) * w;
    double q = 0.0;
    for (const auto& b : blocks)
        q += (b.area() / hw) * region_ssim(pred, target, b);
    return q;
}

double s_measure(const Tensor& pred, const Tensor& target, double alpha) {
    check_pair(pred, target, true);
    if (target.rank() != 2) throw ValidationError("s_measure: expects 2D maps");
    if (alpha < 0.0 || alpha > 1.0) throw ValidationError("s_measure: alpha must be in [0,1]");
    double fg = 0.0;
    for (int64_t i = 0; i < target.numel(); ++i) fg += target[i] >= 0.5f;
    const double y = fg / target.numel();
    if (y == 0.0) return 1.0 - pred.mean();
    if (y == 1.0) return pred.mean();
    const double q = alpha * s_object(pred, target) + (1.0 - alpha) * s_region(pred, target);
    return std::min(1.0, std::max(0.0, q));
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

void EvalReport::finalize() {
    mean_dice = mean_s_measure = mean_mae = 0.0;
    if (rows.empty()) return;
    for (const auto& r : rows) {
        mean_dice += r.dice;
        mean_s_measure += r.s_measure;
        mean_mae += r.mae;
    }
    mean_dice /= rows.size();
    mean_s_measure /= rows.size();
    mean_mae /= rows.size();
}

void write_report_csv(const EvalReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write report: " + path);
    out << "volume_id,slice_index,cohort,covid_present,infection_area,dice,s_measure,mae,sentence\n";
    out.precision(17);
    for (const auto& r : report.rows)
        out << r.volume_id << ',' << r.slice_index << ',' << r.cohort << ','
            << (r.covid_present ? 1 : 0) << ',' << r.infection_area << ',' << r.dice << ','
            << r.s_measure << ',' << r.mae << ",\"" << r.sentence << "\"\n";
}

EvalReport read_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("cannot open report: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty report: " + path);
    EvalReport rep;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string cur;
        bool quoted = false;
        for (char c : line) {
            if (c == '"') {
                quoted = !quoted;
            } else if (c == ',' && !quoted) {
                fields.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        fields.push_back(cur);
        if (fields.size() != 9) throw ValidationError("malformed report row: " + line);
        EvalRow r;
        r.volume_id = fields[0];
        r.slice_index = std::stoi(fields[1]);
        r.cohort = fields[2];
        r.covid_present = fields[3] == "1";
        r.infection_area = std::stoll(fields[4]);
        r.dice = std::stod(fields[5]);
        r.s_measure = std::stod(fields[6]);
        r.mae = std::stod(fields[7]);
        r.sentence = fields[8];
        rep.rows.push_back(std::move(r));
    }
    rep.finalize();
    return rep;
}

void write_aggregates_json(const EvalReport& report, const std::string& path) {
    nlohmann::json j{{"n_slices", report.rows.size()},
                     {"mean_dice", report.mean_dice},
                     {"mean_s_measure", report.mean_s_measure},
                     {"mean_mae", report.mean_mae}};
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot write aggregates: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace symseg::metrics
