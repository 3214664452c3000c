#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string_view>

#include "protoreg/losses.hpp"

namespace protoreg {

/// dL/du per voxel, same layout as DisplacementField::u().
struct FieldGradient {
    Dims dims;
    Eigen::Matrix3Xd values;

    FieldGradient() = default;
    explicit FieldGradient(const Dims& d) : dims(d), values(Eigen::Matrix3Xd::Zero(3, d.size())) {}
};

/// Individually differentiable pieces of the objective. `contrast` and `align` together form
/// the prototype term.
enum class LossTerm { sim, smooth, seg, contrast, align, contour };

inline constexpr std::array<LossTerm, 6> kAllTerms = {LossTerm::sim,      LossTerm::smooth, LossTerm::seg,
                                                      LossTerm::contrast, LossTerm::align,  LossTerm::contour};

std::string_view term_name(LossTerm term);

/// Unweighted value of one term, as reported in LossBreakdown.
double term_value(const ObjectiveInputs& inputs, const DisplacementField& field, LossTerm term);

/// Analytic gradient of one unweighted term with respect to u.
FieldGradient term_gradient(const ObjectiveInputs& inputs, const DisplacementField& field, LossTerm term);

struct LossAndGradient {
    LossBreakdown breakdown;
    FieldGradient gradient;
};

/// Weighted objective and its gradient. Terms with zero weight are not differentiated.
LossAndGradient grad_total(const ObjectiveInputs& inputs, const DisplacementField& field, const LossWeights& weights);

/// True when a central difference of half-width `eps` on component `component` of voxel
/// `voxel` straddles a point where `term` is not differentiable: a trilinear cell face, the
/// clamp border, or a Chamfer nearest-neighbour tie.
bool is_nonsmooth_probe(const ObjectiveInputs& inputs, const DisplacementField& field, LossTerm term,
                        Eigen::Index voxel, int component, double eps);

struct FiniteDiffReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    int probes = 0;
    int skipped = 0;
};

using FieldLoss = std::function<double(const DisplacementField&)>;
using ProbeFilter = std::function<bool(Eigen::Index voxel, int component)>;

/// Central differences at `probe_count` random (voxel, component) pairs. Pairs for which
/// `skip` returns true are resampled (and counted). Relative error uses
/// max(|analytic|, |numeric|, 1e-8) as denominator.
FiniteDiffReport finite_diff_check(const FieldLoss& loss, const DisplacementField& field,
                                   const FieldGradient& analytic, int probe_count, double eps, std::uint64_t seed,
                                   const ProbeFilter& skip = {});

}  // namespace protoreg
