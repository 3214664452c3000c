#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "protoreg/gradients.hpp"
#include "protoreg/losses.hpp"
#include "protoreg/volume.hpp"
#include "protoreg/warp.hpp"

namespace protoreg {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Eigen::Matrix3Xd m;
    Eigen::Matrix3Xd v;
    int t = 0;

    explicit AdamState(Eigen::Index voxels = 0)
        : m(Eigen::Matrix3Xd::Zero(3, voxels)), v(Eigen::Matrix3Xd::Zero(3, voxels)) {}
};

/// One bias-corrected Adam update of `params` in place; advances state.t.
void adam_step(Eigen::Ref<Eigen::Matrix3Xd> params, const Eigen::Matrix3Xd& grad, AdamState& state,
               const AdamConfig& config);

struct RegistrationConfig {
    int levels = 4;
    // Coarse to fine. A single entry applies to every level; a longer list contributes its
    // last `levels` entries.
    std::vector<int> iterations = {300, 200, 150, 100};
    AdamConfig adam;
    LossWeights weights;
    int lncc_window = 9;
    int max_contour_points = 2048;
    double temperature = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
    // Iterations at pyramid level `level` (0 = full resolution).
    int iterations_at(int level) const;
};

void to_json(nlohmann::json& j, const RegistrationConfig& c);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, RegistrationConfig& c);
void to_json(nlohmann::json& j, const LossBreakdown& b);

struct LevelTrace {
    int level = 0;  // 0 = full resolution
    Dims dims;
    std::vector<double> totals;  // objective before each Adam step, then after the last
    LossBreakdown start;
    LossBreakdown end;  // best iterate of the level
    double seconds = 0.0;
};

struct RegistrationResult {
    DisplacementField field;
    std::vector<LevelTrace> levels;  // in optimization order, coarse to fine
    LossBreakdown final_breakdown;
    LogJacobianStats jacobian;
    bool unsupervised = false;
};

/// Coarse-to-fine optimization: zero field at the coarsest level; at each finer level the
/// previous field is upsampled and a zero-initialized delta is optimized on
/// superpose(upsampled, delta). Each level keeps its lowest-objective iterate.
RegistrationResult register_pair(const Volume& fixed, const Volume& moving, const RegistrationConfig& config);
RegistrationResult register_pair(const Volume& fixed, const Volume& moving, const LabelVolume& fixed_mask,
                                 const LabelVolume& moving_mask, const RegistrationConfig& config);

}  // namespace protoreg
