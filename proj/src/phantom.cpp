#include "protoreg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <random>

#include <nlohmann/json.hpp>

namespace protoreg {

using nlohmann::json;

namespace {

struct Blob {
    Eigen::Vector3d center;
    Eigen::Vector3d semi_axes;
    double intensity = 1.0;
};

// Approximate signed distance to an axis-aligned ellipsoid surface (negative inside).
double signed_distance(const Blob& b, const Eigen::Vector3d& p) {
    const double r = ((p - b.center).array() / b.semi_axes.array()).matrix().norm();
    return (r - 1.0) * b.semi_axes.minCoeff();
}

struct Scene {
    std::vector<Blob> blobs;
    double edge_width = 0.5;

    int label(const Eigen::Vector3d& p) const {
        for (std::size_t i = 0; i < blobs.size(); ++i) {
            if (signed_distance(blobs[i], p) <= 0.0) return int(i) + 1;
        }
        return 0;
    }

    double intensity(const Eigen::Vector3d& p) const {
        double v = 0.0;
        for (const Blob& b : blobs) {
            const double s = signed_distance(b, p);
            v = std::max(v, b.intensity / (1.0 + std::exp(s / edge_width)));
        }
        return v;
    }
};

Scene place_blobs(const PhantomSpec& spec, std::mt19937_64& rng) {
    const double margin = spec.magnitude + 2.0;
    const double base_radius = 0.2 * spec.dims.min_extent() * std::cbrt(3.0 / double(spec.blobs));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Scene scene;
    scene.edge_width = spec.edge_width;
    for (int k = 0; k < spec.blobs; ++k) {
        const double intensity =
            spec.contrast.empty() ? (spec.blobs == 1 ? 1.0 : 0.4 + 0.6 * double(k) / double(spec.blobs - 1))
                                  : spec.contrast[std::size_t(k)];
        bool placed = false;
        for (int attempt = 0; attempt < 20000 && !placed; ++attempt) {
            // shrink gradually if the grid is crowded
            const double shrink = 1.0 - 0.5 * double(attempt) / 20000.0;
            const double r = base_radius * shrink * (0.85 + 0.3 * unit(rng));
            Eigen::Vector3d axes = Eigen::Vector3d::Constant(r);
            if (spec.blob_kind == BlobKind::ellipsoid) {
                for (int a = 0; a < 3; ++a) axes[a] = r * (0.7 + 0.6 * unit(rng));
            }
            const double extent = axes.maxCoeff();
            Eigen::Vector3d c;
            bool fits = true;
            for (int a = 0; a < 3; ++a) {
                const double lo = margin + extent;
                const double hi = double(spec.dims[a] - 1) - margin - extent;
                if (hi < lo) {
                    fits = false;
                    break;
                }
                c[a] = lo + (hi - lo) * unit(rng);
            }
            if (!fits) continue;
            for (const Blob& other : scene.blobs) {
                if ((other.center - c).norm() < other.semi_axes.maxCoeff() + extent + 1.5) fits = false;
            }
            if (!fits) continue;
            scene.blobs.push_back({c, axes, intensity});
            placed = true;
        }
        if (!placed) {
            throw InvalidArgument("phantom: cannot fit " + std::to_string(spec.blobs) + " blobs in " +
                                  to_string(spec.dims) + " with margin " + std::to_string(margin));
        }
    }
    return scene;
}

// Periodic boundary, so the smoothed noise has the same variance everywhere.
Eigen::ArrayXd gaussian_smooth(const Dims& d, const Eigen::ArrayXd& v, double sigma) {
    if (sigma <= 0.0) return v;
    const int radius = int(std::ceil(3.0 * sigma));
    Eigen::ArrayXd kernel(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i) kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel /= kernel.sum();
    Eigen::ArrayXd cur = v;
    for (int axis = 0; axis < 3; ++axis) {
        const int n = d[axis];
        if (n == 1) continue;
        Eigen::ArrayXd next(cur.size());
        for (Eigen::Index i = 0; i < d.size(); ++i) {
            const Eigen::Vector3i p = voxel_of(d, i);
            double s = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                Eigen::Vector3i q = p;
                q[axis] = ((p[axis] + k) % n + n) % n;
                s += kernel[k + radius] * cur[d.index(q[0], q[1], q[2])];
            }
            next[i] = s;
        }
        cur = std::move(next);
    }
    return cur;
}

DisplacementField make_truth(const PhantomSpec& spec, std::mt19937_64& rng) {
    DisplacementField truth(spec.dims);
    if (spec.magnitude == 0.0) return truth;
    if (spec.deformation == DeformationKind::rigid) {
        const Eigen::Vector3d t = spec.magnitude * spec.rigid_direction.normalized();
        truth.u().colwise() = t;
        return truth;
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int k = 0; k < 3; ++k) {
        Eigen::ArrayXd noise(spec.dims.size());
        for (Eigen::Index i = 0; i < noise.size(); ++i) noise[i] = normal(rng);
        if (spec.dims[k] == 1) noise.setZero();
        truth.u().row(k) = gaussian_smooth(spec.dims, noise, spec.smoothing).matrix().transpose();
    }
    const double peak = truth.u().colwise().norm().maxCoeff();
    if (peak > 0.0) truth.u() *= spec.magnitude / peak;
    return truth;
}

// v such that x + v(x) inverts p -> p + u(p); fixed-point iteration v = -u(x + v).
DisplacementField invert(const DisplacementField& u) {
    const Dims& d = u.dims();
    DisplacementField v(d, u.spacing(), -u.u());
    for (int iter = 0; iter < 30; ++iter) {
        DisplacementField next(d, u.spacing());
        for (Eigen::Index i = 0; i < d.size(); ++i) {
            const TrilinearStencil st(d, voxel_point(d, i) + v.u().col(i));
            for (int k = 0; k < 3; ++k) next.u()(k, i) = -st.sample(u.u().row(k));
        }
        v = std::move(next);
    }
    return v;
}

}  // namespace

void PhantomSpec::validate() const {
    if (!dims.valid()) throw InvalidArgument("phantom dims must be >= 1");
    if (blobs < 1) throw InvalidArgument("phantom needs at least one blob");
    if (!contrast.empty() && int(contrast.size()) != blobs) {
        throw InvalidArgument("phantom contrast list must have one entry per blob");
    }
    for (double c : contrast) {
        if (!(c > 0.0)) throw InvalidArgument("phantom blob contrast must be > 0");
    }
    if (!(noise_sigma >= 0.0)) throw InvalidArgument("phantom noise sigma must be >= 0");
    if (!(magnitude >= 0.0)) throw InvalidArgument("phantom magnitude must be >= 0");
    if (!(smoothing >= 0.0)) throw InvalidArgument("phantom smoothing must be >= 0");
    if (!(edge_width > 0.0)) throw InvalidArgument("phantom edge width must be > 0");
    if (deformation == DeformationKind::rigid && rigid_direction.norm() == 0.0) {
        throw InvalidArgument("phantom rigid direction must be nonzero");
    }
}

PhantomSpec PhantomSpec::abdomen_preset() {
    PhantomSpec s;
    s.dims = {48, 48, 48};
    s.blobs = 12;
    s.blob_kind = BlobKind::ellipsoid;
    return s;
}

void to_json(json& j, const PhantomSpec& s) {
    j = json{{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
             {"blobs", s.blobs},
             {"blob_kind", s.blob_kind == BlobKind::sphere ? "sphere" : "ellipsoid"},
             {"contrast", s.contrast},
             {"noise_sigma", s.noise_sigma},
             {"deformation", s.deformation == DeformationKind::rigid ? "rigid" : "smooth"},
             {"magnitude", s.magnitude},
             {"rigid_direction", {s.rigid_direction[0], s.rigid_direction[1], s.rigid_direction[2]}},
             {"smoothing", s.smoothing},
             {"edge_width", s.edge_width},
             {"seed", s.seed}};
}

void from_json(const json& j, PhantomSpec& s) {
    if (!j.is_object()) throw InvalidArgument("phantom spec must be a JSON object");
    static const char* known[] = {"preset",    "dims",      "blobs",           "blob_kind", "contrast", "noise_sigma",
                                  "deformation", "magnitude", "rigid_direction", "smoothing", "edge_width", "seed"};
    for (const auto& [key, value] : j.items()) {
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
            throw InvalidArgument("phantom spec: unknown key \"" + key + "\"");
        }
    }
    try {
        if (j.value("preset", std::string()) == "abdomen") s = PhantomSpec::abdomen_preset();
        if (j.contains("dims")) {
            const auto d = j.at("dims").get<std::vector<int>>();
            if (d.size() != 3) throw InvalidArgument("phantom dims needs 3 entries");
            s.dims = {d[0], d[1], d[2]};
        }
        s.blobs = j.value("blobs", s.blobs);
        if (j.contains("blob_kind")) {
            const auto k = j.at("blob_kind").get<std::string>();
            if (k != "sphere" && k != "ellipsoid") throw InvalidArgument("blob_kind must be sphere or ellipsoid");
            s.blob_kind = k == "sphere" ? BlobKind::sphere : BlobKind::ellipsoid;
        }
        s.contrast = j.value("contrast", s.contrast);
        s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
        if (j.contains("deformation")) {
            const auto k = j.at("deformation").get<std::string>();
            if (k != "rigid" && k != "smooth") throw InvalidArgument("deformation must be rigid or smooth");
            s.deformation = k == "rigid" ? DeformationKind::rigid : DeformationKind::smooth;
        }
        s.magnitude = j.value("magnitude", s.magnitude);
        if (j.contains("rigid_direction")) {
            const auto v = j.at("rigid_direction").get<std::vector<double>>();
            if (v.size() != 3) throw InvalidArgument("rigid_direction needs 3 entries");
            s.rigid_direction = {v[0], v[1], v[2]};
        }
        s.smoothing = j.value("smoothing", s.smoothing);
        s.edge_width = j.value("edge_width", s.edge_width);
        s.seed = j.value("seed", s.seed);
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("phantom spec: ") + e.what());
    }
}

PhantomCase generate(const PhantomSpec& spec) {
    spec.validate();
    std::mt19937_64 geometry_rng(spec.seed);
    std::mt19937_64 field_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    std::mt19937_64 noise_rng(spec.seed ^ 0xc2b2ae3d27d4eb4fULL);

    const Scene scene = place_blobs(spec, geometry_rng);
    const Dims& d = spec.dims;

    PhantomCase out;
    out.truth = make_truth(spec, field_rng);
    const DisplacementField inverse = out.truth.u().isZero(0.0) ? DisplacementField(d) : invert(out.truth);

    Volume::Array fixed(d.size());
    Volume::Array moving(d.size());
    LabelVolume::Array fixed_labels(d.size());
    LabelVolume::Array moving_labels(d.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        const Eigen::Vector3d p = voxel_point(d, i);
        const Eigen::Vector3d q = p + inverse.u().col(i);
        fixed[i] = scene.intensity(p);
        fixed_labels[i] = scene.label(p);
        moving[i] = scene.intensity(q);
        moving_labels[i] = scene.label(q);
    }
    if (spec.noise_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        for (Eigen::Index i = 0; i < d.size(); ++i) fixed[i] += noise(noise_rng);
        for (Eigen::Index i = 0; i < d.size(); ++i) moving[i] += noise(noise_rng);
    }
    out.fixed = Volume(d, Spacing::Ones(), std::move(fixed));
    out.moving = Volume(d, Spacing::Ones(), std::move(moving));
    out.fixed_labels = LabelVolume(d, Spacing::Ones(), std::move(fixed_labels), spec.blobs);
    out.moving_labels = LabelVolume(d, Spacing::Ones(), std::move(moving_labels), spec.blobs);
    return out;
}

}  // namespace protoreg
