#pragma once

#include <string>
#include <vector>

#include "symseg/tensor.hpp"

namespace symseg::metrics {

/// Overlap 2|P∩T|/(|P|+|T|) after thresholding pred; 1.0 when both empty.
double dice(const Tensor& pred, const Tensor& target, double threshold = 0.5);

/// Mean per-pixel |pred - target|; pred must lie in [0,1].
double mae(const Tensor& pred, const Tensor& target);

/// Structure measure: alpha*S_object + (1-alpha)*S_region. Degenerate
/// targets follow the usual conventions (all-background -> 1 - mean(pred),
/// all-foreground -> mean(pred)).
double s_measure(const Tensor& pred, const Tensor& target, double alpha = 0.5);
double s_object(const Tensor& pred, const Tensor& target);
double s_region(const Tensor& pred, const Tensor& target);

struct EvalRow {
    std::string volume_id;
    int slice_index = 0;
    std::string cohort;
    bool covid_present = false;
    int64_t infection_area = 0;
    double dice = 0.0;
    double s_measure = 0.0;
    double mae = 0.0;
    std::string sentence;  // "189 663 ..."
};

struct EvalReport {
    std::vector<EvalRow> rows;
    double mean_dice = 0.0;
    double mean_s_measure = 0.0;
    double mean_mae = 0.0;
    void finalize();  // recompute aggregates from rows
};

void write_report_csv(const EvalReport& report, const std::string& path);
EvalReport read_report_csv(const std::string& path);
void write_aggregates_json(const EvalReport& report, const std::string& path);

}  // namespace symseg::metrics
