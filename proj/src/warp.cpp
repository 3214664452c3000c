#include "protoreg/warp.hpp"

#include <Eigen/LU>

namespace protoreg {

DisplacementField upsample_field(const DisplacementField& coarse, const Dims& fine_dims,
                                 const Spacing& fine_spacing) {
    if (fine_dims.halved() != coarse.dims()) {
        throw InvalidArgument("upsample_field: target " + to_string(fine_dims) +
                              " does not halve to " + to_string(coarse.dims()));
    }
    Eigen::Vector3d scale;
    for (int a = 0; a < 3; ++a) scale[a] = fine_dims[a] > 1 ? 2.0 : 1.0;

    DisplacementField fine(fine_dims, fine_spacing);
    const Dims& cd = coarse.dims();
    for (Eigen::Index i = 0; i < fine_dims.size(); ++i) {
        const Eigen::Vector3d x = voxel_point(fine_dims, i);
        Eigen::Vector3d c;
        for (int a = 0; a < 3; ++a) c[a] = fine_dims[a] > 1 ? (x[a] - 0.5) / 2.0 : 0.0;
        const TrilinearStencil st(cd, c);
        for (int k = 0; k < 3; ++k) {
            fine.u()(k, i) = scale[k] * st.sample(coarse.u().row(k));
        }
    }
    return fine;
}

namespace {

// d u_k / d x_axis at voxel (x,y,z).
double partial(const DisplacementField& f, int k, int axis, int x, int y, int z) {
    const Dims& d = f.dims();
    const int n = d[axis];
    if (n == 1) return 0.0;
    int pos[3] = {x, y, z};
    const int c = pos[axis];
    int lo = c - 1;
    int hi = c + 1;
    double h = 2.0;
    if (c == 0) {
        lo = 0;
        hi = 1;
        h = 1.0;
    } else if (c == n - 1) {
        lo = n - 2;
        hi = n - 1;
        h = 1.0;
    }
    pos[axis] = hi;
    const double vhi = f.u()(k, d.index(pos[0], pos[1], pos[2]));
    pos[axis] = lo;
    const double vlo = f.u()(k, d.index(pos[0], pos[1], pos[2]));
    return (vhi - vlo) / h;
}

}  // namespace

Volume jacobian_determinant(const DisplacementField& field) {
    const Dims& d = field.dims();
    Volume det(d, field.spacing());
    for (int z = 0; z < d.nz; ++z) {
        for (int y = 0; y < d.ny; ++y) {
            for (int x = 0; x < d.nx; ++x) {
                Eigen::Matrix3d j = Eigen::Matrix3d::Identity();
                for (int k = 0; k < 3; ++k) {
                    for (int a = 0; a < 3; ++a) j(k, a) += partial(field, k, a, x, y, z);
                }
                det(x, y, z) = j.determinant();
            }
        }
    }
    return det;
}

LogJacobianStats sdlogj(const DisplacementField& field) {
    constexpr double kMinDet = 1e-6;
    const Volume det = jacobian_determinant(field);
    LogJacobianStats stats;
    std::vector<double> logs;
    logs.reserve(std::size_t(det.data().size()));
    for (Eigen::Index i = 0; i < det.data().size(); ++i) {
        const double v = det.data()[i];
        if (v <= kMinDet) {
            ++stats.excluded;
            continue;
        }
        logs.push_back(std::log(v));
    }
    if (logs.empty()) return stats;
    const Eigen::Map<const Eigen::ArrayXd> l(logs.data(), Eigen::Index(logs.size()));
    const double mean = l.mean();
    stats.sdlogj = std::sqrt((l - mean).square().mean());
    return stats;
}

}  // namespace protoreg
