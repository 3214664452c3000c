#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include <Eigen/Core>

#include "protoreg/volume.hpp"

namespace protoreg {

/// Per-voxel displacement u in voxel units; the transform is phi(p) = p + u(p).
template <typename Scalar>
class BasicField {
public:
    using Matrix = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;

    BasicField() = default;

    BasicField(Dims dims, Spacing spacing = Spacing::Ones())
        : dims_(dims), spacing_(spacing), u_(Matrix::Zero(3, dims.size())) {
        if (!dims_.valid()) throw InvalidArgument("field dims must be >= 1");
    }

    BasicField(Dims dims, Spacing spacing, Matrix u)
        : dims_(dims), spacing_(spacing), u_(std::move(u)) {
        if (!dims_.valid()) throw InvalidArgument("field dims must be >= 1");
        if (u_.cols() != dims_.size()) throw InvalidArgument("field data does not match dims");
    }

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    const Matrix& u() const { return u_; }
    Matrix& u() { return u_; }

    auto at(int x, int y, int z) const { return u_.col(dims_.index(x, y, z)); }
    auto at(int x, int y, int z) { return u_.col(dims_.index(x, y, z)); }

    bool all_finite() const { return u_.allFinite(); }

private:
    Dims dims_{};
    Spacing spacing_ = Spacing::Ones();
    Matrix u_ = Matrix::Zero(3, 1);
};

using DisplacementField = BasicField<double>;

/// Eight-corner trilinear stencil at a continuous point, clamp-to-edge.
///
/// `dweight[a]` holds d(weight)/d(point[a]). Derivatives along an axis are zero where the
/// point was clamped on that axis (outside [0, n-1]) or where the axis has extent 1.
struct TrilinearStencil {
    std::array<Eigen::Index, 8> index{};
    std::array<double, 8> weight{};
    std::array<std::array<double, 8>, 3> dweight{};

    TrilinearStencil(const Dims& dims, const Eigen::Vector3d& p) {
        int lo[3];
        int hi[3];
        double t[3];
        double dt[3];
        for (int a = 0; a < 3; ++a) {
            const int n = dims[a];
            const double c = p[a];
            if (n == 1) {
                lo[a] = hi[a] = 0;
                t[a] = 0.0;
                dt[a] = 0.0;
                continue;
            }
            const double clamped = std::clamp(c, 0.0, double(n - 1));
            dt[a] = (c < 0.0 || c > double(n - 1)) ? 0.0 : 1.0;
            int i0 = int(std::floor(clamped));
            if (i0 >= n - 1) i0 = n - 2;
            lo[a] = i0;
            hi[a] = i0 + 1;
            t[a] = clamped - i0;
        }
        for (int corner = 0; corner < 8; ++corner) {
            const int bx = corner & 1;
            const int by = (corner >> 1) & 1;
            const int bz = (corner >> 2) & 1;
            const double wx = bx ? t[0] : 1.0 - t[0];
            const double wy = by ? t[1] : 1.0 - t[1];
            const double wz = bz ? t[2] : 1.0 - t[2];
            index[corner] = dims.index(bx ? hi[0] : lo[0], by ? hi[1] : lo[1], bz ? hi[2] : lo[2]);
            weight[corner] = wx * wy * wz;
            dweight[0][corner] = dt[0] * (bx ? 1.0 : -1.0) * wy * wz;
            dweight[1][corner] = dt[1] * (by ? 1.0 : -1.0) * wx * wz;
            dweight[2][corner] = dt[2] * (bz ? 1.0 : -1.0) * wx * wy;
        }
    }

    template <typename Derived>
    double sample(const Eigen::DenseBase<Derived>& data) const {
        double v = 0.0;
        for (int c = 0; c < 8; ++c) v += weight[c] * double(data[index[c]]);
        return v;
    }

    template <typename Derived>
    Eigen::Vector3d gradient(const Eigen::DenseBase<Derived>& data) const {
        Eigen::Vector3d g = Eigen::Vector3d::Zero();
        for (int c = 0; c < 8; ++c) {
            const double v = double(data[index[c]]);
            g[0] += dweight[0][c] * v;
            g[1] += dweight[1][c] * v;
            g[2] += dweight[2][c] * v;
        }
        return g;
    }
};

inline Eigen::Vector3d voxel_point(const Dims& d, Eigen::Index i) {
    return voxel_of(d, i).cast<double>();
}

template <typename Scalar>
double trilinear_sample(const BasicVolume<Scalar>& vol, const Eigen::Vector3d& point) {
    return TrilinearStencil(vol.dims(), point).sample(vol.data());
}

/// output(p) = vol(p + u(p)).
template <typename Scalar, typename FieldScalar>
BasicVolume<Scalar> warp_volume(const BasicVolume<Scalar>& vol, const BasicField<FieldScalar>& field) {
    require_same_dims(vol.dims(), field.dims(), "warp_volume");
    const Dims& d = vol.dims();
    typename BasicVolume<Scalar>::Array out(d.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        const Eigen::Vector3d p = voxel_point(d, i) + field.u().col(i).template cast<double>();
        out[i] = Scalar(TrilinearStencil(d, p).sample(vol.data()));
    }
    return BasicVolume<Scalar>(d, vol.spacing(), std::move(out));
}

/// Soft warp of every channel; values stay in [0, 1].
template <typename FieldScalar>
OneHotMask warp_onehot(const OneHotMask& mask, const BasicField<FieldScalar>& field) {
    require_same_dims(mask.dims(), field.dims(), "warp_onehot");
    const Dims& d = mask.dims();
    OneHotMask out(d, mask.spacing(), mask.channels());
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        const Eigen::Vector3d p = voxel_point(d, i) + field.u().col(i).template cast<double>();
        const TrilinearStencil st(d, p);
        for (int c = 0; c < mask.channels(); ++c) {
            out.data()(i, c) = std::clamp(st.sample(mask.data().col(c)), 0.0, 1.0);
        }
    }
    return out;
}

template <typename Scalar, typename Tag, typename FieldScalar>
BasicChannels<Scalar, Tag> warp_channels(const BasicChannels<Scalar, Tag>& src,
                                         const BasicField<FieldScalar>& field) {
    require_same_dims(src.dims(), field.dims(), "warp_channels");
    const Dims& d = src.dims();
    BasicChannels<Scalar, Tag> out(d, src.spacing(), src.channels());
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        const Eigen::Vector3d p = voxel_point(d, i) + field.u().col(i).template cast<double>();
        const TrilinearStencil st(d, p);
        for (int c = 0; c < src.channels(); ++c) out.data()(i, c) = Scalar(st.sample(src.data().col(c)));
    }
    return out;
}

/// Fine voxel x sits at coarse coordinate (x - 0.5) / 2 on every halved axis (box-filter
/// centres); vectors are rescaled by 2 on those axes. `fine_dims.halved()` must equal the
/// coarse dims.
DisplacementField upsample_field(const DisplacementField& coarse, const Dims& fine_dims,
                                 const Spacing& fine_spacing);

/// Additive composition: u_out = u_base + u_delta.
template <typename Scalar>
BasicField<Scalar> superpose(const BasicField<Scalar>& base, const BasicField<Scalar>& delta) {
    require_same_dims(base.dims(), delta.dims(), "superpose");
    return BasicField<Scalar>(base.dims(), base.spacing(), base.u() + delta.u());
}

/// det(I + grad u) per voxel; central differences inside, one-sided at borders.
Volume jacobian_determinant(const DisplacementField& field);

struct LogJacobianStats {
    double sdlogj = 0.0;
    Eigen::Index excluded = 0;  // voxels with det <= 1e-6
};

/// Population standard deviation of log(det J) over voxels with det > 1e-6.
LogJacobianStats sdlogj(const DisplacementField& field);

}  // namespace protoreg
