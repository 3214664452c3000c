#include "protoreg/gradients.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "window_sums.hpp"

namespace protoreg {

namespace {

std::vector<TrilinearStencil> stencils(const DisplacementField& field) {
    const Dims& d = field.dims();
    std::vector<TrilinearStencil> out;
    out.reserve(std::size_t(d.size()));
    for (Eigen::Index i = 0; i < d.size(); ++i) out.emplace_back(d, voxel_point(d, i) + field.u().col(i));
    return out;
}

// d cos(a, b) / d a, matching cosine_similarity's norm guard.
Eigen::VectorXd cosine_grad_first(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double na = a.norm();
    const double nb = std::max(b.norm(), kCosineEps);
    if (na <= kCosineEps) return b / (kCosineEps * nb);
    const double c = a.dot(b) / (na * nb);
    return b / (na * nb) - c * a / (na * na);
}

FieldGradient grad_sim(const ObjectiveInputs& in, const DisplacementField& field) {
    FieldGradient g(in.dims());
    if (in.window < 3) return g;
    const int w = in.window;
    const Volume moved = warp_volume(in.moving, field);
    const auto win = detail::lncc_windows(in.fixed, moved, w, kLnccVarianceFloor);
    if (win.valid_count == 0) return g;

    const Eigen::Index nc = win.grid.size();
    Eigen::ArrayXd alpha = Eigen::ArrayXd::Zero(nc);
    Eigen::ArrayXd beta = Eigen::ArrayXd::Zero(nc);
    for (Eigen::Index p = 0; p < nc; ++p) {
        if (!win.valid[p]) continue;
        const double bc = win.var_f[p] * win.var_m[p];
        alpha[p] = 2.0 * win.cross[p] / bc;
        beta[p] = 2.0 * win.cross[p] * win.cross[p] / (bc * win.var_m[p]);
    }
    const Dims& d = in.dims();
    const Eigen::ArrayXd s_alpha = detail::window_scatter(d, alpha, w);
    const Eigen::ArrayXd s_alpha_f = detail::window_scatter(d, alpha * win.mean_f, w);
    const Eigen::ArrayXd s_beta = detail::window_scatter(d, beta, w);
    const Eigen::ArrayXd s_beta_m = detail::window_scatter(d, beta * win.mean_m, w);
    const Eigen::ArrayXd& f = in.fixed.data();
    const Eigen::ArrayXd& m = moved.data();
    const Eigen::ArrayXd dm =
        -(f * s_alpha - s_alpha_f - m * s_beta + s_beta_m) / double(win.valid_count);

    for (Eigen::Index i = 0; i < d.size(); ++i) {
        if (dm[i] == 0.0) continue;
        const TrilinearStencil st(d, voxel_point(d, i) + field.u().col(i));
        g.values.col(i) = dm[i] * st.gradient(in.moving.data());
    }
    return g;
}

FieldGradient grad_smooth(const DisplacementField& field) {
    const Dims& d = field.dims();
    FieldGradient g(d);
    const auto& u = field.u();
    const double scale = 2.0 / double(d.size());
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const Eigen::Index i = d.index(x, y, z);
                const Eigen::Index next[3] = {x + 1 < d.nx ? d.index(x + 1, y, z) : -1,
                                              y + 1 < d.ny ? d.index(x, y + 1, z) : -1,
                                              z + 1 < d.nz ? d.index(x, y, z + 1) : -1};
                for (Eigen::Index j : next) {
                    if (j < 0) continue;
                    const Eigen::Vector3d diff = scale * (u.col(j) - u.col(i));
                    g.values.col(j) += diff;
                    g.values.col(i) -= diff;
                }
            }
    return g;
}

FieldGradient grad_seg(const ObjectiveInputs& in, const DisplacementField& field) {
    FieldGradient g(in.dims());
    if (!in.has_masks) return g;
    const Dims& d = in.dims();
    const int kc = in.fixed_mask.channels();
    const auto st = stencils(field);
    const OneHotMask warped = warp_onehot(in.moving_mask, field);

    // dL/ds_k(q) = coef_f[k] * f_k(q) + coef_c[k]
    Eigen::VectorXd coef_f = Eigen::VectorXd::Zero(kc);
    Eigen::VectorXd coef_c = Eigen::VectorXd::Zero(kc);
    int present = 0;
    for (int k = 0; k < kc; ++k) {
        const auto f = in.fixed_mask.channel(k);
        const auto s = warped.channel(k);
        const double sf = f.sum();
        const double ss = s.sum();
        if (sf <= 0.0 && ss <= 0.0) continue;
        ++present;
        const double denom = sf + ss + kDiceEps;
        const double inter = (f * s).sum();
        coef_f[k] = 2.0 / denom;
        coef_c[k] = -2.0 * inter / (denom * denom);
    }
    if (present == 0) return g;
    coef_f /= -double(present);
    coef_c /= -double(present);
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        for (int k = 0; k < kc; ++k) {
            const double ds = coef_f[k] * in.fixed_mask.data()(i, k) + coef_c[k];
            if (ds == 0.0) continue;
            acc += ds * st[std::size_t(i)].gradient(in.moving_mask.data().col(k));
        }
        g.values.col(i) = acc;
    }
    return g;
}

FieldGradient grad_contrast(const ObjectiveInputs& in, const DisplacementField& field) {
    FieldGradient g(in.dims());
    if (!in.has_masks) return g;
    const PrototypeSet& protos = in.fixed_prototypes;
    if (protos.num_present() < 2) return g;
    const Dims& d = in.dims();
    const int kc = in.fixed_mask.channels();
    const int cc = in.moving_features.channels();
    const auto st = stencils(field);
    const FeatureVolume warped = warp_channels(in.moving_features, field);

    Eigen::Index counted = 0;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        Eigen::Index a = 0;
        if (in.fixed_mask.data().row(i).maxCoeff(&a) < 0.5 || !protos.present[std::size_t(a)]) continue;
        ++counted;
    }
    if (counted == 0) return g;
    const double scale = 0.5 / double(counted) / in.temperature;

    Eigen::VectorXd f(cc);
    Eigen::VectorXd logits(kc);
    Eigen::VectorXd prob(kc);
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        Eigen::Index a = 0;
        if (in.fixed_mask.data().row(i).maxCoeff(&a) < 0.5 || !protos.present[std::size_t(a)]) continue;
        f = warped.data().row(i).transpose();
        double max_logit = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < kc; ++k) {
            if (!protos.present[std::size_t(k)]) continue;
            logits[k] = cosine_similarity(f, protos.vectors.col(k)) / in.temperature;
            max_logit = std::max(max_logit, logits[k]);
        }
        double denom = 0.0;
        for (int k = 0; k < kc; ++k) {
            prob[k] = protos.present[std::size_t(k)] ? std::exp(logits[k] - max_logit) : 0.0;
            denom += prob[k];
        }
        prob /= denom;
        Eigen::VectorXd df = Eigen::VectorXd::Zero(cc);
        for (int k = 0; k < kc; ++k) {
            if (!protos.present[std::size_t(k)]) continue;
            const double coef = prob[k] - (k == a ? 1.0 : 0.0);
            df += coef * cosine_grad_first(f, protos.vectors.col(k));
        }
        df *= scale;
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        for (int c = 0; c < cc; ++c) acc += df[c] * st[std::size_t(i)].gradient(in.moving_features.data().col(c));
        g.values.col(i) = acc;
    }
    return g;
}

FieldGradient grad_align(const ObjectiveInputs& in, const DisplacementField& field) {
    FieldGradient g(in.dims());
    if (!in.has_masks) return g;
    const Dims& d = in.dims();
    const int kc = in.fixed_mask.channels();
    const int cc = in.moving_features.channels();
    const auto st = stencils(field);
    const FeatureVolume warped_f = warp_channels(in.moving_features, field);
    const OneHotMask warped_m = warp_onehot(in.moving_mask, field);
    const PrototypeSet pm = extract_prototypes(warped_f, warped_m);
    const PrototypeSet& pf = in.fixed_prototypes;

    // gk = d align / d Pm_k, scaled by 1 / Z_k
    Eigen::MatrixXd gk = Eigen::MatrixXd::Zero(cc, kc);
    bool any = false;
    for (int k = 0; k < kc; ++k) {
        if (!pf.present[std::size_t(k)] || !pm.present[std::size_t(k)]) continue;
        const double z = warped_m.channel(k).sum();
        gk.col(k) = -cosine_grad_first(pm.vectors.col(k), pf.vectors.col(k)) / z;
        any = true;
    }
    if (!any) return g;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        const Eigen::VectorXd fi = warped_f.data().row(i).transpose();
        Eigen::VectorXd df = Eigen::VectorXd::Zero(cc);
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        for (int k = 0; k < kc; ++k) {
            if (gk.col(k).isZero(0.0)) continue;
            const double s = warped_m.data()(i, k);
            df += s * gk.col(k);
            const double ds = gk.col(k).dot(fi - pm.vectors.col(k));
            acc += ds * st[std::size_t(i)].gradient(in.moving_mask.data().col(k));
        }
        for (int c = 0; c < cc; ++c) acc += df[c] * st[std::size_t(i)].gradient(in.moving_features.data().col(c));
        g.values.col(i) = acc;
    }
    return g;
}

struct ChamferMatch {
    std::vector<Eigen::Index> nn_of_a;  // nearest b for each a
    std::vector<Eigen::Index> nn_of_b;  // nearest a for each b
};

ChamferMatch chamfer_match(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b) {
    ChamferMatch m;
    m.nn_of_a.assign(std::size_t(a.cols()), 0);
    m.nn_of_b.assign(std::size_t(b.cols()), 0);
    std::vector<double> best_a(std::size_t(a.cols()), std::numeric_limits<double>::infinity());
    std::vector<double> best_b(std::size_t(b.cols()), std::numeric_limits<double>::infinity());
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
        for (Eigen::Index j = 0; j < b.cols(); ++j) {
            const double d2 = (a.col(i) - b.col(j)).squaredNorm();
            if (d2 < best_a[std::size_t(i)]) {
                best_a[std::size_t(i)] = d2;
                m.nn_of_a[std::size_t(i)] = j;
            }
            if (d2 < best_b[std::size_t(j)]) {
                best_b[std::size_t(j)] = d2;
                m.nn_of_b[std::size_t(j)] = i;
            }
        }
    }
    return m;
}

FieldGradient grad_contour(const ObjectiveInputs& in, const DisplacementField& field) {
    FieldGradient g(in.dims());
    if (!in.has_masks) return g;
    int classes = 0;
    for (std::size_t k = 0; k < in.moving_contours.size(); ++k) {
        if (!in.fixed_contours[k].empty() && !in.moving_contours[k].empty()) ++classes;
    }
    if (classes == 0) return g;
    for (std::size_t k = 0; k < in.moving_contours.size(); ++k) {
        const ContourPointSet& fixed_pts = in.fixed_contours[k];
        const ContourPointSet& moving_pts = in.moving_contours[k];
        if (fixed_pts.empty() || moving_pts.empty()) continue;
        const ContourPointSet x = transport_points(fixed_pts, field);
        const ChamferMatch m = chamfer_match(x.points, moving_pts.points);
        const double wa = 2.0 / double(x.size()) / classes;
        const double wb = 2.0 / double(moving_pts.size()) / classes;
        Eigen::Matrix3Xd dx(3, x.size());
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            dx.col(j) = wa * (x.points.col(j) - moving_pts.points.col(m.nn_of_a[std::size_t(j)]));
        }
        for (Eigen::Index i = 0; i < moving_pts.size(); ++i) {
            const Eigen::Index j = m.nn_of_b[std::size_t(i)];
            dx.col(j) += wb * (x.points.col(j) - moving_pts.points.col(i));
        }
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            const TrilinearStencil st(field.dims(), fixed_pts.points.col(j));
            for (int c = 0; c < 8; ++c) {
                if (st.weight[std::size_t(c)] != 0.0) g.values.col(st.index[std::size_t(c)]) += st.weight[std::size_t(c)] * dx.col(j);
            }
        }
    }
    return g;
}

}  // namespace

std::string_view term_name(LossTerm term) {
    switch (term) {
        case LossTerm::sim: return "sim";
        case LossTerm::smooth: return "smooth";
        case LossTerm::seg: return "seg";
        case LossTerm::contrast: return "contrast";
        case LossTerm::align: return "align";
        case LossTerm::contour: return "contour";
    }
    return "?";
}

double term_value(const ObjectiveInputs& inputs, const DisplacementField& field, LossTerm term) {
    const LossBreakdown b = total_loss(inputs, field, LossWeights{});
    switch (term) {
        case LossTerm::sim: return b.sim;
        case LossTerm::smooth: return b.smooth;
        case LossTerm::seg: return b.seg;
        case LossTerm::contrast: return b.contrast;
        case LossTerm::align: return b.align;
        case LossTerm::contour: return b.contour;
    }
    return 0.0;
}

FieldGradient term_gradient(const ObjectiveInputs& inputs, const DisplacementField& field, LossTerm term) {
    require_same_dims(inputs.dims(), field.dims(), "term_gradient");
    switch (term) {
        case LossTerm::sim: return grad_sim(inputs, field);
        case LossTerm::smooth: return grad_smooth(field);
        case LossTerm::seg: return grad_seg(inputs, field);
        case LossTerm::contrast: return grad_contrast(inputs, field);
        case LossTerm::align: return grad_align(inputs, field);
        case LossTerm::contour: return grad_contour(inputs, field);
    }
    return FieldGradient(inputs.dims());
}

LossAndGradient grad_total(const ObjectiveInputs& inputs, const DisplacementField& field, const LossWeights& weights) {
    LossAndGradient out{total_loss(inputs, field, weights), FieldGradient(inputs.dims())};
    const std::pair<LossTerm, double> weighted[] = {
        {LossTerm::sim, weights.sim},           {LossTerm::smooth, weights.smooth},
        {LossTerm::seg, weights.seg},           {LossTerm::contrast, weights.prototype},
        {LossTerm::align, weights.prototype},   {LossTerm::contour, weights.contour}};
    for (const auto& [term, w] : weighted) {
        if (w == 0.0) continue;
        out.gradient.values += w * term_gradient(inputs, field, term).values;
    }
    return out;
}

bool is_nonsmooth_probe(const ObjectiveInputs& inputs, const DisplacementField& field, LossTerm term,
                        Eigen::Index voxel, int component, double eps) {
    const Dims& d = field.dims();
    if (term == LossTerm::smooth) return false;
    if (term == LossTerm::contour) {
        // A step of +-eps on one coordinate changes a squared distance by at most
        // 2 eps |offset| + eps^2, so orderings closer than that can flip inside the stencil.
        const Eigen::Vector3d p = voxel_point(d, voxel);
        const double slack = 1e-12;
        for (std::size_t k = 0; k < inputs.fixed_contours.size(); ++k) {
            const ContourPointSet& fp = inputs.fixed_contours[k];
            const ContourPointSet& mp = inputs.moving_contours[k];
            if (fp.empty() || mp.empty()) continue;
            Eigen::Index self = -1;
            for (Eigen::Index j = 0; j < fp.size(); ++j) {
                if ((fp.points.col(j) - p).cwiseAbs().maxCoeff() < 0.5) self = j;
            }
            if (self < 0) continue;
            const ContourPointSet x = transport_points(fp, field);
            const Eigen::Vector3d xs = x.points.col(self);
            // Ties among the moving neighbours of the probed point.
            Eigen::Index nearest = 0;
            double best = std::numeric_limits<double>::infinity();
            for (Eigen::Index i = 0; i < mp.size(); ++i) {
                const double d2 = (xs - mp.points.col(i)).squaredNorm();
                if (d2 < best) {
                    best = d2;
                    nearest = i;
                }
            }
            for (Eigen::Index i = 0; i < mp.size(); ++i) {
                if (i == nearest) continue;
                const double gap = (xs - mp.points.col(i)).squaredNorm() - best;
                const double reach = 2.0 * eps * std::abs(mp.points(component, i) - mp.points(component, nearest));
                if (gap <= reach + slack) return true;
            }
            // Ties where the probed point competes to be some moving point's neighbour.
            for (Eigen::Index i = 0; i < mp.size(); ++i) {
                double other = std::numeric_limits<double>::infinity();
                for (Eigen::Index j = 0; j < x.size(); ++j) {
                    if (j != self) other = std::min(other, (x.points.col(j) - mp.points.col(i)).squaredNorm());
                }
                const double mine = (xs - mp.points.col(i)).squaredNorm();
                const double reach = 2.0 * eps * std::abs(xs[component] - mp.points(component, i)) + eps * eps;
                if (std::abs(mine - other) <= reach + slack) return true;
            }
        }
        return false;
    }
    const int n = d[component];
    if (n == 1) return false;
    const double c = double(voxel_of(d, voxel)[component]) + field.u()(component, voxel);
    const double margin = 2.0 * eps;
    if (c < margin || c > double(n - 1) - margin) return true;
    return std::abs(c - std::round(c)) < margin;
}

FiniteDiffReport finite_diff_check(const FieldLoss& loss, const DisplacementField& field,
                                   const FieldGradient& analytic, int probe_count, double eps, std::uint64_t seed,
                                   const ProbeFilter& skip) {
    require_same_dims(field.dims(), analytic.dims, "finite_diff_check");
    FiniteDiffReport report;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Eigen::Index> pick_voxel(0, field.dims().size() - 1);
    std::uniform_int_distribution<int> pick_comp(0, 2);
    DisplacementField probe = field;
    const int max_attempts = 100 * probe_count + 1000;
    for (int attempt = 0; report.probes < probe_count && attempt < max_attempts; ++attempt) {
        const Eigen::Index v = pick_voxel(rng);
        const int c = pick_comp(rng);
        if (skip && skip(v, c)) {
            ++report.skipped;
            continue;
        }
        const double u0 = field.u()(c, v);
        probe.u()(c, v) = u0 + eps;
        const double lp = loss(probe);
        probe.u()(c, v) = u0 - eps;
        const double lm = loss(probe);
        probe.u()(c, v) = u0;
        const double numeric = (lp - lm) / (2.0 * eps);
        const double a = analytic.values(c, v);
        const double abs_err = std::abs(a - numeric);
        const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8});
        report.max_abs_err = std::max(report.max_abs_err, abs_err);
        report.max_rel_err = std::max(report.max_rel_err, rel_err);
        ++report.probes;
    }
    return report;
}

}  // namespace protoreg
