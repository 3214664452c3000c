#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "protoreg/volume.hpp"
#include "protoreg/warp.hpp"

namespace protoreg {

/// Names for `num_classes` labels. Presets: "abdomen" (12 organs), "acdc" (LV, Myo, RV);
/// an empty preset yields class_1..class_K.
std::vector<std::string> class_names(std::string_view preset, int num_classes);

/// Hard Dice of class `label`; nullopt when the class is absent from both volumes.
std::optional<double> dsc(const LabelVolume& a, const LabelVolume& b, int label);

/// Soft-warp the one-hot channels, then argmax with a 0.5 background threshold.
LabelVolume warp_labels(const LabelVolume& labels, const DisplacementField& field);

struct DscSummary {
    std::vector<std::optional<double>> per_class;
    std::optional<double> average;  // mean over present classes
    double std_across_classes = 0.0;  // population std over present classes
};

DscSummary summarize_dsc(const LabelVolume& fixed, const LabelVolume& other);

struct EvalReport {
    std::string pair_id;
    std::vector<std::string> class_names;
    DscSummary registered;
    std::optional<DscSummary> initial;  // unregistered moving labels vs fixed
    double sdlogj = 0.0;
    long long sdlogj_excluded = 0;
};

/// `initial_moving` (optional) adds the pre-registration row.
EvalReport evaluate(const LabelVolume& fixed_labels, const LabelVolume& warped_moving_labels,
                    const DisplacementField& field, const std::string& pair_id,
                    const std::vector<std::string>& names, const LabelVolume* initial_moving = nullptr);

/// Field-only report (no masks available).
EvalReport evaluate_field(const DisplacementField& field, const std::string& pair_id);

void to_json(nlohmann::json& j, const EvalReport& r);

/// Columns: pair_id,class_name,dsc,avg_dsc,sdlogj. Initial rows use pair_id "<id>/initial"
/// and "-" for sdlogj; absent classes print "absent".
void write_csv(std::ostream& out, const EvalReport& r);

/// Shortest round-trip decimal form, shared by the CSV and JSON writers.
std::string format_number(double v);

}  // namespace protoreg
