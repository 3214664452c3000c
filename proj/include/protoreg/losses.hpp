#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "protoreg/volume.hpp"
#include "protoreg/warp.hpp"

namespace protoreg {

/// Weights of the five objective terms.
struct LossWeights {
    double sim = 1.0;
    double smooth = 4.0;
    double seg = 1.0;
    double prototype = 1.0;
    double contour = 0.1;

    bool uses_masks() const { return seg != 0.0 || prototype != 0.0 || contour != 0.0; }
    void validate() const;
};

/// Each term's unweighted value alongside the weighted total.
struct LossBreakdown {
    LossWeights weights;
    double sim = 0.0;
    double smooth = 0.0;
    double seg = 0.0;
    double prototype = 0.0;
    double contrast = 0.0;  // prototype = contrast + align
    double align = 0.0;
    double contour = 0.0;
    double total = 0.0;

    void recompute_total();
    // First term (in fixed order) that is not finite, if any.
    std::optional<std::string> non_finite_term() const;
};

/// One feature vector per class; column k holds class k+1. Absent classes carry no vector.
struct PrototypeSet {
    Eigen::MatrixXd vectors;
    std::vector<bool> present;

    int num_classes() const { return int(present.size()); }
    int num_present() const;
};

/// Contour samples of one class, in voxel coordinates (one point per column).
struct ContourPointSet {
    int label = 0;
    Eigen::Matrix3Xd points;

    Eigen::Index size() const { return points.cols(); }
    bool empty() const { return points.cols() == 0; }
};

constexpr double kLnccVarianceFloor = 1e-5;
constexpr double kDiceEps = 1e-7;
constexpr double kPrototypeEps = 1e-7;
constexpr double kCosineEps = 1e-8;

/// Negative mean squared local NCC over fully-contained windows, in [-1, 0].
/// Windows where either side has variance < 1e-5 are skipped; returns 0 if none remain.
double lncc(const Volume& fixed, const Volume& moved, int window);

/// Largest odd window <= min(requested, smallest extent), or 0 when the volume is too small.
int effective_window(const Dims& dims, int requested);

/// Mean over voxels of squared forward differences of u (zero at trailing borders).
double smoothness(const DisplacementField& field);

/// 1 - mean over present classes of soft Dice (intersection = sum of products).
double dice_loss(const OneHotMask& fixed, const OneHotMask& moved);

/// Intensity and gradient magnitude, each standardized to zero mean and unit variance.
FeatureVolume make_features(const Volume& vol);

/// Masked average pooling per class.
PrototypeSet extract_prototypes(const FeatureVolume& features, const OneHotMask& mask);

double cosine_similarity(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b);

/// Mean over hard-assigned foreground voxels of the softmax cross-entropy of cosine
/// similarities to the prototypes. Zero with fewer than two present prototypes.
double contrast_loss(const FeatureVolume& features, const OneHotMask& mask, const PrototypeSet& protos,
                     double temperature);

/// Sum over classes present on both sides of (1 - cos). `skipped` receives the count of
/// classes present on exactly one side.
double align_loss(const PrototypeSet& fixed, const PrototypeSet& moving, int* skipped = nullptr);

struct PrototypeTerms {
    double contrast = 0.0;
    double align = 0.0;
    double total() const { return contrast + align; }
};

/// Contrast is the average of (warped moving features, fixed features) against fixed
/// prototypes, both assigned by the fixed mask. Alignment compares fixed prototypes with
/// prototypes pooled from the warped moving features under the warped moving mask.
PrototypeTerms prototype_loss(const FeatureVolume& fixed_features, const FeatureVolume& warped_moving_features,
                              const OneHotMask& fixed_mask, const OneHotMask& warped_moving_mask,
                              double temperature);

/// Boundary voxels (channel >= 0.5 with a 6-neighbour below 0.5 or outside the grid) of
/// class `label` (1-based), randomly subsampled to `max_points` with `seed`.
ContourPointSet extract_contour_points(const OneHotMask& mask, int label, int max_points, std::uint64_t seed);
ContourPointSet extract_contour_points(const LabelVolume& labels, int label, int max_points, std::uint64_t seed);

/// Symmetric mean squared nearest-neighbour distance. Both sets must be nonempty.
double chamfer(const ContourPointSet& a, const ContourPointSet& b);

/// points + u(points), u sampled trilinearly.
ContourPointSet transport_points(const ContourPointSet& points, const DisplacementField& field);

/// Mean Chamfer over classes with points on both sides; 0 if no class qualifies.
double contour_loss(const std::vector<ContourPointSet>& transported_fixed,
                    const std::vector<ContourPointSet>& moving);

/// Everything the objective needs at one pyramid level, built once per level.
struct ObjectiveInputs {
    Volume fixed;
    Volume moving;
    bool has_masks = false;
    OneHotMask fixed_mask;
    OneHotMask moving_mask;
    FeatureVolume fixed_features;
    FeatureVolume moving_features;
    PrototypeSet fixed_prototypes;
    std::vector<ContourPointSet> fixed_contours;
    std::vector<ContourPointSet> moving_contours;
    int window = 0;  // effective LNCC window; 0 disables the similarity term
    double temperature = 0.1;

    const Dims& dims() const { return fixed.dims(); }
};

struct ObjectiveOptions {
    int window = 9;
    double temperature = 0.1;
    int max_contour_points = 2048;
    std::uint64_t seed = 0;
};

ObjectiveInputs make_objective_inputs(const Volume& fixed, const Volume& moving, const OneHotMask* fixed_mask,
                                      const OneHotMask* moving_mask, const ObjectiveOptions& options);

/// The weighted objective at displacement `field`.
LossBreakdown total_loss(const ObjectiveInputs& inputs, const DisplacementField& field, const LossWeights& weights);

}  // namespace protoreg
