#include "protoreg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>

#include "window_sums.hpp"

namespace protoreg {

void LossWeights::validate() const {
    for (double w : {sim, smooth, seg, prototype, contour}) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("loss weights must be finite and >= 0");
    }
}

void LossBreakdown::recompute_total() {
    total = weights.sim * sim + weights.smooth * smooth + weights.seg * seg + weights.prototype * prototype +
            weights.contour * contour;
}

std::optional<std::string> LossBreakdown::non_finite_term() const {
    const std::pair<const char*, double> terms[] = {{"sim", sim},           {"smooth", smooth},
                                                    {"seg", seg},           {"contrast", contrast},
                                                    {"align", align},       {"contour", contour}};
    for (const auto& [name, v] : terms) {
        if (!std::isfinite(v)) return std::string(name);
    }
    if (!std::isfinite(total)) return std::string("total");
    return std::nullopt;
}

int PrototypeSet::num_present() const { return int(std::count(present.begin(), present.end(), true)); }

// ---------------------------------------------------------------- similarity

int effective_window(const Dims& dims, int requested) {
    int w = std::min(requested, dims.min_extent());
    if (w % 2 == 0) --w;
    return w >= 3 ? w : 0;
}

double lncc(const Volume& fixed, const Volume& moved, int window) {
    require_same_dims(fixed.dims(), moved.dims(), "lncc");
    if (window < 3 || window % 2 == 0 || window > fixed.dims().min_extent()) {
        throw InvalidArgument("lncc: window must be odd, >= 3 and <= the smallest extent; got " +
                              std::to_string(window));
    }
    const auto win = detail::lncc_windows(fixed, moved, window, kLnccVarianceFloor);
    if (win.valid_count == 0) return 0.0;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < win.grid.size(); ++i) {
        if (!win.valid[i]) continue;
        sum += win.cross[i] * win.cross[i] / (win.var_f[i] * win.var_m[i]);
    }
    return -sum / double(win.valid_count);
}

// ---------------------------------------------------------------- regularization

double smoothness(const DisplacementField& field) {
    const Dims& d = field.dims();
    const auto& u = field.u();
    double sum = 0.0;
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const Eigen::Index i = d.index(x, y, z);
                if (x + 1 < d.nx) sum += (u.col(d.index(x + 1, y, z)) - u.col(i)).squaredNorm();
                if (y + 1 < d.ny) sum += (u.col(d.index(x, y + 1, z)) - u.col(i)).squaredNorm();
                if (z + 1 < d.nz) sum += (u.col(d.index(x, y, z + 1)) - u.col(i)).squaredNorm();
            }
    return sum / double(d.size());
}

// ---------------------------------------------------------------- overlap

double dice_loss(const OneHotMask& fixed, const OneHotMask& moved) {
    if (fixed.channels() != moved.channels()) {
        throw InvalidArgument("dice_loss: class count mismatch " + std::to_string(fixed.channels()) + " vs " +
                              std::to_string(moved.channels()));
    }
    require_same_dims(fixed.dims(), moved.dims(), "dice_loss");
    double dice_sum = 0.0;
    int present = 0;
    for (int k = 0; k < fixed.channels(); ++k) {
        const auto f = fixed.channel(k);
        const auto s = moved.channel(k);
        const double sf = f.sum();
        const double ss = s.sum();
        if (sf <= 0.0 && ss <= 0.0) continue;
        const double inter = (f * s).sum();
        dice_sum += 2.0 * inter / (sf + ss + kDiceEps);
        ++present;
    }
    return present == 0 ? 0.0 : 1.0 - dice_sum / present;
}

// ---------------------------------------------------------------- prototypes

FeatureVolume make_features(const Volume& vol) {
    const Dims& d = vol.dims();
    FeatureVolume out(d, vol.spacing(), 2);
    out.channel(0) = vol.data();
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const int p[3] = {x, y, z};
                double g2 = 0.0;
                for (int a = 0; a < 3; ++a) {
                    const int n = d[a];
                    if (n == 1) continue;
                    int lo[3] = {x, y, z};
                    int hi[3] = {x, y, z};
                    lo[a] = std::max(0, p[a] - 1);
                    hi[a] = std::min(n - 1, p[a] + 1);
                    const double g = (vol(hi[0], hi[1], hi[2]) - vol(lo[0], lo[1], lo[2])) / double(hi[a] - lo[a]);
                    g2 += g * g;
                }
                out.data()(d.index(x, y, z), 1) = std::sqrt(g2);
            }
    for (int c = 0; c < 2; ++c) {
        auto col = out.channel(c);
        const double mean = col.mean();
        const double sd = std::sqrt((col - mean).square().mean());
        if (sd > 1e-12) col = (col - mean) / sd;
        else col.setZero();
    }
    return out;
}

PrototypeSet extract_prototypes(const FeatureVolume& features, const OneHotMask& mask) {
    require_same_dims(features.dims(), mask.dims(), "extract_prototypes");
    PrototypeSet set;
    set.vectors = Eigen::MatrixXd::Zero(features.channels(), mask.channels());
    set.present.assign(std::size_t(mask.channels()), false);
    for (int k = 0; k < mask.channels(); ++k) {
        const auto w = mask.channel(k);
        const double z = w.sum();
        if (z < kPrototypeEps) continue;
        for (int c = 0; c < features.channels(); ++c) set.vectors(c, k) = (features.channel(c) * w).sum() / z;
        set.present[std::size_t(k)] = true;
    }
    return set;
}

double cosine_similarity(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
    return a.dot(b) / (std::max(a.norm(), kCosineEps) * std::max(b.norm(), kCosineEps));
}

double contrast_loss(const FeatureVolume& features, const OneHotMask& mask, const PrototypeSet& protos,
                     double temperature) {
    require_same_dims(features.dims(), mask.dims(), "contrast_loss");
    if (protos.num_classes() != mask.channels()) throw InvalidArgument("contrast_loss: class count mismatch");
    if (protos.num_present() < 2) return 0.0;
    const int k_count = mask.channels();
    Eigen::VectorXd logits(k_count);
    Eigen::VectorXd f(features.channels());
    double sum = 0.0;
    Eigen::Index counted = 0;
    for (Eigen::Index i = 0; i < mask.dims().size(); ++i) {
        Eigen::Index assigned = 0;
        if (mask.data().row(i).maxCoeff(&assigned) < 0.5) continue;
        if (!protos.present[std::size_t(assigned)]) continue;
        f = features.data().row(i).transpose();
        double max_logit = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < k_count; ++k) {
            if (!protos.present[std::size_t(k)]) continue;
            logits[k] = cosine_similarity(f, protos.vectors.col(k)) / temperature;
            max_logit = std::max(max_logit, logits[k]);
        }
        double denom = 0.0;
        for (int k = 0; k < k_count; ++k) {
            if (protos.present[std::size_t(k)]) denom += std::exp(logits[k] - max_logit);
        }
        sum += -(logits[assigned] - max_logit) + std::log(denom);
        ++counted;
    }
    return counted == 0 ? 0.0 : sum / double(counted);
}

double align_loss(const PrototypeSet& fixed, const PrototypeSet& moving, int* skipped) {
    if (fixed.num_classes() != moving.num_classes()) throw InvalidArgument("align_loss: class count mismatch");
    double sum = 0.0;
    int one_sided = 0;
    for (int k = 0; k < fixed.num_classes(); ++k) {
        const bool pf = fixed.present[std::size_t(k)];
        const bool pm = moving.present[std::size_t(k)];
        if (pf && pm) sum += 1.0 - cosine_similarity(fixed.vectors.col(k), moving.vectors.col(k));
        else if (pf != pm) ++one_sided;
    }
    if (skipped) *skipped = one_sided;
    return sum;
}

PrototypeTerms prototype_loss(const FeatureVolume& fixed_features, const FeatureVolume& warped_moving_features,
                              const OneHotMask& fixed_mask, const OneHotMask& warped_moving_mask,
                              double temperature) {
    const PrototypeSet pf = extract_prototypes(fixed_features, fixed_mask);
    const PrototypeSet pm = extract_prototypes(warped_moving_features, warped_moving_mask);
    PrototypeTerms t;
    t.contrast = 0.5 * (contrast_loss(warped_moving_features, fixed_mask, pf, temperature) +
                        contrast_loss(fixed_features, fixed_mask, pf, temperature));
    t.align = align_loss(pf, pm);
    return t;
}

// ---------------------------------------------------------------- contours

ContourPointSet extract_contour_points(const OneHotMask& mask, int label, int max_points, std::uint64_t seed) {
    if (label < 1 || label > mask.channels()) {
        throw InvalidArgument("extract_contour_points: label " + std::to_string(label) + " out of range");
    }
    if (max_points < 1) throw InvalidArgument("extract_contour_points: max_points must be >= 1");
    const Dims& d = mask.dims();
    const auto ch = mask.channel(label - 1);
    auto inside = [&](int x, int y, int z) {
        if (x < 0 || y < 0 || z < 0 || x >= d.nx || y >= d.ny || z >= d.nz) return false;
        return ch[d.index(x, y, z)] >= 0.5;
    };
    std::vector<Eigen::Index> boundary;
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                if (!inside(x, y, z)) continue;
                if (!inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) ||
                    !inside(x, y + 1, z) || !inside(x, y, z - 1) || !inside(x, y, z + 1)) {
                    boundary.push_back(d.index(x, y, z));
                }
            }
    if (boundary.size() > std::size_t(max_points)) {
        std::vector<Eigen::Index> picked;
        picked.reserve(std::size_t(max_points));
        std::mt19937_64 rng(seed);
        std::sample(boundary.begin(), boundary.end(), std::back_inserter(picked), max_points, rng);
        boundary = std::move(picked);
    }
    ContourPointSet out;
    out.label = label;
    out.points.resize(3, Eigen::Index(boundary.size()));
    for (std::size_t i = 0; i < boundary.size(); ++i) {
        out.points.col(Eigen::Index(i)) = voxel_point(d, boundary[i]);
    }
    return out;
}

ContourPointSet extract_contour_points(const LabelVolume& labels, int label, int max_points, std::uint64_t seed) {
    return extract_contour_points(one_hot(labels), label, max_points, seed);
}

double chamfer(const ContourPointSet& a, const ContourPointSet& b) {
    if (a.empty() || b.empty()) throw InvalidArgument("chamfer: both point sets must be nonempty");
    Eigen::VectorXd best_a = Eigen::VectorXd::Constant(a.size(), std::numeric_limits<double>::infinity());
    Eigen::VectorXd best_b = Eigen::VectorXd::Constant(b.size(), std::numeric_limits<double>::infinity());
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        for (Eigen::Index j = 0; j < b.size(); ++j) {
            const double d2 = (a.points.col(i) - b.points.col(j)).squaredNorm();
            best_a[i] = std::min(best_a[i], d2);
            best_b[j] = std::min(best_b[j], d2);
        }
    }
    return best_a.mean() + best_b.mean();
}

ContourPointSet transport_points(const ContourPointSet& points, const DisplacementField& field) {
    ContourPointSet out = points;
    for (Eigen::Index i = 0; i < points.size(); ++i) {
        const TrilinearStencil st(field.dims(), points.points.col(i));
        for (int k = 0; k < 3; ++k) out.points(k, i) += st.sample(field.u().row(k));
    }
    return out;
}

double contour_loss(const std::vector<ContourPointSet>& transported_fixed, const std::vector<ContourPointSet>& moving) {
    if (transported_fixed.size() != moving.size()) throw InvalidArgument("contour_loss: class count mismatch");
    double sum = 0.0;
    int classes = 0;
    for (std::size_t k = 0; k < moving.size(); ++k) {
        if (transported_fixed[k].empty() || moving[k].empty()) continue;
        sum += chamfer(transported_fixed[k], moving[k]);
        ++classes;
    }
    return classes == 0 ? 0.0 : sum / classes;
}

// ---------------------------------------------------------------- objective

ObjectiveInputs make_objective_inputs(const Volume& fixed, const Volume& moving, const OneHotMask* fixed_mask,
                                      const OneHotMask* moving_mask, const ObjectiveOptions& options) {
    require_same_dims(fixed.dims(), moving.dims(), "objective inputs");
    if (bool(fixed_mask) != bool(moving_mask)) throw InvalidArgument("provide both masks or neither");
    ObjectiveInputs in;
    in.fixed = fixed;
    in.moving = moving;
    in.window = effective_window(fixed.dims(), options.window);
    in.temperature = options.temperature;
    if (!fixed_mask) return in;

    require_same_dims(fixed.dims(), fixed_mask->dims(), "fixed mask");
    require_same_dims(fixed.dims(), moving_mask->dims(), "moving mask");
    if (fixed_mask->channels() != moving_mask->channels()) {
        throw InvalidArgument("fixed and moving masks have different class counts");
    }
    in.has_masks = true;
    in.fixed_mask = *fixed_mask;
    in.moving_mask = *moving_mask;
    in.fixed_features = make_features(fixed);
    in.moving_features = make_features(moving);
    in.fixed_prototypes = extract_prototypes(in.fixed_features, in.fixed_mask);
    for (int k = 1; k <= fixed_mask->channels(); ++k) {
        in.fixed_contours.push_back(extract_contour_points(*fixed_mask, k, options.max_contour_points, options.seed));
        in.moving_contours.push_back(
            extract_contour_points(*moving_mask, k, options.max_contour_points, options.seed + 7919u * unsigned(k)));
    }
    return in;
}

LossBreakdown total_loss(const ObjectiveInputs& in, const DisplacementField& field, const LossWeights& weights) {
    require_same_dims(in.dims(), field.dims(), "total_loss");
    LossBreakdown b;
    b.weights = weights;
    if (in.window >= 3) b.sim = lncc(in.fixed, warp_volume(in.moving, field), in.window);
    b.smooth = smoothness(field);
    if (in.has_masks) {
        const OneHotMask warped_mask = warp_onehot(in.moving_mask, field);
        b.seg = dice_loss(in.fixed_mask, warped_mask);
        const FeatureVolume warped_features = warp_channels(in.moving_features, field);
        const PrototypeTerms pt =
            prototype_loss(in.fixed_features, warped_features, in.fixed_mask, warped_mask, in.temperature);
        b.contrast = pt.contrast;
        b.align = pt.align;
        b.prototype = pt.total();
        std::vector<ContourPointSet> transported;
        transported.reserve(in.fixed_contours.size());
        for (const auto& c : in.fixed_contours) transported.push_back(transport_points(c, field));
        b.contour = contour_loss(transported, in.moving_contours);
    }
    b.recompute_total();
    return b;
}

}  // namespace protoreg
