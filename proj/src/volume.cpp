#include "protoreg/volume.hpp"

namespace protoreg {

std::string to_string(const Dims& d) {
    return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

LabelVolume::LabelVolume(Dims dims, Spacing spacing, Array labels, int num_classes)
    : dims_(dims), spacing_(spacing), labels_(std::move(labels)), num_classes_(num_classes) {
    if (!dims_.valid()) throw InvalidArgument("label dims must be >= 1, got " + to_string(dims_));
    if ((spacing_.array() <= 0.0).any()) throw InvalidArgument("label spacing must be > 0");
    if (labels_.size() != dims_.size()) {
        throw InvalidArgument("label data length does not match dims " + to_string(dims_));
    }
    if (num_classes_ < 0) throw InvalidArgument("num_classes must be >= 0");
    if (labels_.size() > 0 && (labels_.minCoeff() < 0 || labels_.maxCoeff() > num_classes_)) {
        throw InvalidArgument("label values must lie in [0, " + std::to_string(num_classes_) + "]");
    }
}

LabelVolume::LabelVolume(Dims dims, Spacing spacing, Array labels)
    : LabelVolume(dims, spacing, labels, labels.size() ? int(std::max(0, labels.maxCoeff())) : 0) {}

OneHotMask one_hot(const LabelVolume& labels) {
    OneHotMask mask(labels.dims(), labels.spacing(), labels.num_classes());
    const auto& l = labels.labels();
    for (Eigen::Index i = 0; i < l.size(); ++i) {
        if (l[i] > 0) mask.data()(i, l[i] - 1) = 1.0;
    }
    return mask;
}

LabelVolume labels_from_onehot(const OneHotMask& mask, double threshold) {
    LabelVolume::Array out = LabelVolume::Array::Zero(mask.dims().size());
    const auto& d = mask.data();
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        if (d.cols() == 0) break;
        Eigen::Index best = 0;
        const double v = d.row(i).maxCoeff(&best);
        if (v >= threshold) out[i] = std::int32_t(best + 1);
    }
    return LabelVolume(mask.dims(), mask.spacing(), std::move(out), mask.channels());
}

void check_pyramid_levels(const Dims& dims, int levels) {
    if (levels < 1) throw InvalidArgument("pyramid needs at least one level");
    Dims d = dims;
    for (int i = 1; i < levels; ++i) {
        const Dims next = d.halved();
        for (int a = 0; a < 3; ++a) {
            if (d[a] > 1 && next[a] < 2) {
                throw InvalidArgument("pyramid with " + std::to_string(levels) + " levels reduces " +
                                      to_string(dims) + " below 2 voxels on an axis");
            }
        }
        d = next;
    }
}

}  // namespace protoreg
