#include "protoreg/metrics.hpp"

#include <charconv>
#include <cmath>

#include <nlohmann/json.hpp>

namespace protoreg {

using nlohmann::json;

std::vector<std::string> class_names(std::string_view preset, int num_classes) {
    static const std::vector<std::string> abdomen = {
        "spleen", "right_kidney", "left_kidney", "esophagus", "liver", "stomach", "aorta",
        "inferior_vena_cava", "portal_and_splenic_vein", "pancreas", "right_adrenal_gland", "left_adrenal_gland"};
    static const std::vector<std::string> acdc = {"LV", "Myo", "RV"};
    if (preset.empty()) {
        std::vector<std::string> out;
        for (int k = 1; k <= num_classes; ++k) out.push_back("class_" + std::to_string(k));
        return out;
    }
    const std::vector<std::string>* names = nullptr;
    if (preset == "abdomen") names = &abdomen;
    else if (preset == "acdc") names = &acdc;
    else throw InvalidArgument("unknown class-name preset \"" + std::string(preset) + "\"");
    if (int(names->size()) != num_classes) {
        throw InvalidArgument("preset \"" + std::string(preset) + "\" names " + std::to_string(names->size()) +
                              " classes, labels have " + std::to_string(num_classes));
    }
    return *names;
}

std::optional<double> dsc(const LabelVolume& a, const LabelVolume& b, int label) {
    require_same_dims(a.dims(), b.dims(), "dsc");
    const auto in_a = (a.labels() == label);
    const auto in_b = (b.labels() == label);
    const double na = double(in_a.count());
    const double nb = double(in_b.count());
    if (na + nb == 0.0) return std::nullopt;
    return 2.0 * double((in_a && in_b).count()) / (na + nb);
}

LabelVolume warp_labels(const LabelVolume& labels, const DisplacementField& field) {
    return labels_from_onehot(warp_onehot(one_hot(labels), field), 0.5);
}

DscSummary summarize_dsc(const LabelVolume& fixed, const LabelVolume& other) {
    const int k_count = std::max(fixed.num_classes(), other.num_classes());
    DscSummary s;
    std::vector<double> present;
    for (int k = 1; k <= k_count; ++k) {
        s.per_class.push_back(dsc(fixed, other, k));
        if (s.per_class.back()) present.push_back(*s.per_class.back());
    }
    if (!present.empty()) {
        const Eigen::Map<const Eigen::ArrayXd> v(present.data(), Eigen::Index(present.size()));
        s.average = v.mean();
        s.std_across_classes = std::sqrt((v - v.mean()).square().mean());
    }
    return s;
}

EvalReport evaluate(const LabelVolume& fixed_labels, const LabelVolume& warped_moving_labels,
                    const DisplacementField& field, const std::string& pair_id,
                    const std::vector<std::string>& names, const LabelVolume* initial_moving) {
    require_same_dims(fixed_labels.dims(), warped_moving_labels.dims(), "evaluate");
    require_same_dims(fixed_labels.dims(), field.dims(), "evaluate");
    EvalReport r = evaluate_field(field, pair_id);
    r.registered = summarize_dsc(fixed_labels, warped_moving_labels);
    if (initial_moving) r.initial = summarize_dsc(fixed_labels, *initial_moving);
    r.class_names = names;
    const std::size_t k_count = r.registered.per_class.size();
    if (r.class_names.size() < k_count) {
        const auto generic = class_names("", int(k_count));
        r.class_names.insert(r.class_names.end(), generic.begin() + long(r.class_names.size()), generic.end());
    }
    return r;
}

EvalReport evaluate_field(const DisplacementField& field, const std::string& pair_id) {
    EvalReport r;
    r.pair_id = pair_id;
    const LogJacobianStats j = sdlogj(field);
    r.sdlogj = j.sdlogj;
    r.sdlogj_excluded = j.excluded;
    return r;
}

std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

json summary_json(const DscSummary& s, const std::vector<std::string>& names) {
    json per = json::object();
    for (std::size_t k = 0; k < s.per_class.size(); ++k) {
        per[names[k]] = s.per_class[k] ? json(*s.per_class[k]) : json("absent");
    }
    return json{{"per_class", per},
                {"avg_dsc", s.average ? json(*s.average) : json(nullptr)},
                {"dsc_std_across_classes", s.std_across_classes}};
}

void summary_rows(std::ostream& out, const DscSummary& s, const std::vector<std::string>& names,
                  const std::string& pair_id, const std::string& sdlogj) {
    const std::string avg = s.average ? format_number(*s.average) : "absent";
    for (std::size_t k = 0; k < s.per_class.size(); ++k) {
        out << pair_id << ',' << names[k] << ',' << (s.per_class[k] ? format_number(*s.per_class[k]) : "absent")
            << ',' << avg << ',' << sdlogj << '\n';
    }
}

}  // namespace

void to_json(json& j, const EvalReport& r) {
    j = json{{"pair_id", r.pair_id},
             {"class_names", r.class_names},
             {"registered", summary_json(r.registered, r.class_names)},
             {"sdlogj", r.sdlogj},
             {"sdlogj_excluded_voxels", r.sdlogj_excluded}};
    if (r.initial) j["initial"] = summary_json(*r.initial, r.class_names);
}

void write_csv(std::ostream& out, const EvalReport& r) {
    out << "pair_id,class_name,dsc,avg_dsc,sdlogj\n";
    if (r.initial) summary_rows(out, *r.initial, r.class_names, r.pair_id + "/initial", "-");
    summary_rows(out, r.registered, r.class_names, r.pair_id, format_number(r.sdlogj));
}

}  // namespace protoreg
