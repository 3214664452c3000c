#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "protoreg/errors.hpp"

namespace protoreg {

// Voxel counts per axis. Linear index is x-fastest, z-slowest.
struct Dims {
    int nx = 1;
    int ny = 1;
    int nz = 1;

    Eigen::Index size() const { return Eigen::Index(nx) * ny * nz; }
    Eigen::Index index(int x, int y, int z) const { return (Eigen::Index(z) * ny + y) * nx + x; }
    int operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
    int& operator[](int axis) { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
    bool valid() const { return nx >= 1 && ny >= 1 && nz >= 1; }
    int min_extent() const { return std::min(nx, std::min(ny, nz)); }

    // Ceil-halving; axes of extent 1 pass through.
    Dims halved() const {
        auto h = [](int n) { return n == 1 ? 1 : (n + 1) / 2; };
        return {h(nx), h(ny), h(nz)};
    }

    friend bool operator==(const Dims& a, const Dims& b) {
        return a.nx == b.nx && a.ny == b.ny && a.nz == b.nz;
    }
    friend bool operator!=(const Dims& a, const Dims& b) { return !(a == b); }
};

std::string to_string(const Dims& d);

using Spacing = Eigen::Vector3d;

// Decompose a linear index back into (x, y, z).
inline Eigen::Vector3i voxel_of(const Dims& d, Eigen::Index i) {
    const int x = int(i % d.nx);
    const int y = int((i / d.nx) % d.ny);
    const int z = int(i / (Eigen::Index(d.nx) * d.ny));
    return {x, y, z};
}

inline void require_same_dims(const Dims& a, const Dims& b, const char* what) {
    if (a != b) {
        throw InvalidArgument(std::string(what) + ": dims mismatch " + to_string(a) + " vs " +
                              to_string(b));
    }
}

/// Scalar 3D intensity grid.
template <typename Scalar>
class BasicVolume {
public:
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

    BasicVolume() = default;

    BasicVolume(Dims dims, Spacing spacing = Spacing::Ones(), Scalar fill = Scalar(0))
        : dims_(dims), spacing_(spacing) {
        check_header();
        data_ = Array::Constant(dims_.size(), fill);
    }

    BasicVolume(Dims dims, Spacing spacing, Array data)
        : dims_(dims), spacing_(spacing), data_(std::move(data)) {
        check_header();
        if (data_.size() != dims_.size()) {
            throw InvalidArgument("volume data length does not match dims " + to_string(dims_));
        }
    }

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    const Array& data() const { return data_; }
    Array& data() { return data_; }

    Scalar operator()(int x, int y, int z) const { return data_[dims_.index(x, y, z)]; }
    Scalar& operator()(int x, int y, int z) { return data_[dims_.index(x, y, z)]; }

    bool all_finite() const { return data_.isFinite().all(); }

    template <typename Other>
    BasicVolume<Other> cast() const {
        return BasicVolume<Other>(dims_, spacing_, data_.template cast<Other>());
    }

private:
    void check_header() const {
        if (!dims_.valid()) throw InvalidArgument("volume dims must be >= 1, got " + to_string(dims_));
        if ((spacing_.array() <= 0.0).any()) throw InvalidArgument("volume spacing must be > 0");
    }

    Dims dims_{};
    Spacing spacing_ = Spacing::Ones();
    Array data_ = Array::Zero(1);
};

using Volume = BasicVolume<double>;
using Volumef = BasicVolume<float>;

/// Integer anatomical labels; 0 is background, classes are 1..num_classes.
class LabelVolume {
public:
    using Array = Eigen::Array<std::int32_t, Eigen::Dynamic, 1>;

    LabelVolume() = default;
    LabelVolume(Dims dims, Spacing spacing, Array labels, int num_classes);
    // num_classes inferred as the max label.
    LabelVolume(Dims dims, Spacing spacing, Array labels);

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    const Array& labels() const { return labels_; }
    int num_classes() const { return num_classes_; }

    std::int32_t operator()(int x, int y, int z) const { return labels_[dims_.index(x, y, z)]; }

private:
    Dims dims_{};
    Spacing spacing_ = Spacing::Ones();
    Array labels_ = Array::Zero(1);
    int num_classes_ = 0;
};

struct MaskTag {};
struct FeatureTag {};

/// Per-voxel multi-channel data stored as an (voxels x channels) column-major array,
/// so each channel is contiguous.
template <typename Scalar, typename Tag>
class BasicChannels {
public:
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    BasicChannels() = default;

    BasicChannels(Dims dims, Spacing spacing, int channels)
        : dims_(dims), spacing_(spacing), data_(Array::Zero(dims.size(), channels)) {
        if (!dims_.valid()) throw InvalidArgument("channel volume dims must be >= 1");
    }

    BasicChannels(Dims dims, Spacing spacing, Array data)
        : dims_(dims), spacing_(spacing), data_(std::move(data)) {
        if (!dims_.valid()) throw InvalidArgument("channel volume dims must be >= 1");
        if (data_.rows() != dims_.size()) {
            throw InvalidArgument("channel data rows do not match dims " + to_string(dims_));
        }
    }

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    int channels() const { return int(data_.cols()); }
    const Array& data() const { return data_; }
    Array& data() { return data_; }

    auto channel(int c) const { return data_.col(c); }
    auto channel(int c) { return data_.col(c); }

    BasicVolume<Scalar> channel_volume(int c) const {
        return BasicVolume<Scalar>(dims_, spacing_, typename BasicVolume<Scalar>::Array(data_.col(c)));
    }

private:
    Dims dims_{};
    Spacing spacing_ = Spacing::Ones();
    Array data_;
};

/// K foreground channels, background has none. Hard masks are {0,1}; warped masks are soft.
using OneHotMask = BasicChannels<double, MaskTag>;
/// C feature channels per voxel.
using FeatureVolume = BasicChannels<double, FeatureTag>;

OneHotMask one_hot(const LabelVolume& labels);

// Argmax over channels; voxels whose best channel is below `threshold` become background.
LabelVolume labels_from_onehot(const OneHotMask& mask, double threshold = 0.5);

namespace detail {

template <typename Derived>
Eigen::Array<typename Derived::Scalar, Eigen::Dynamic, 1>
box_downsample(const Dims& d, const Eigen::ArrayBase<Derived>& src) {
    using S = typename Derived::Scalar;
    const Dims out = d.halved();
    Eigen::Array<S, Eigen::Dynamic, 1> dst(out.size());
    const int fx = d.nx == 1 ? 1 : 2;
    const int fy = d.ny == 1 ? 1 : 2;
    const int fz = d.nz == 1 ? 1 : 2;
    for (int z = 0; z < out.nz; ++z) {
        for (int y = 0; y < out.ny; ++y) {
            for (int x = 0; x < out.nx; ++x) {
                S sum = 0;
                int count = 0;
                for (int dz = 0; dz < fz; ++dz) {
                    const int sz = z * fz + dz;
                    if (sz >= d.nz) continue;
                    for (int dy = 0; dy < fy; ++dy) {
                        const int sy = y * fy + dy;
                        if (sy >= d.ny) continue;
                        for (int dx = 0; dx < fx; ++dx) {
                            const int sx = x * fx + dx;
                            if (sx >= d.nx) continue;
                            sum += src[d.index(sx, sy, sz)];
                            ++count;
                        }
                    }
                }
                dst[out.index(x, y, z)] = sum / S(count);
            }
        }
    }
    return dst;
}

inline Spacing halved_spacing(const Dims& d, const Spacing& s) {
    Spacing out = s;
    for (int a = 0; a < 3; ++a) {
        if (d[a] > 1) out[a] *= 2.0;
    }
    return out;
}

}  // namespace detail

/// Factor-2 box-filter downsampling (ceil division per axis).
template <typename Scalar>
BasicVolume<Scalar> downsample(const BasicVolume<Scalar>& vol) {
    return BasicVolume<Scalar>(vol.dims().halved(), detail::halved_spacing(vol.dims(), vol.spacing()),
                               detail::box_downsample(vol.dims(), vol.data()));
}

template <typename Scalar, typename Tag>
BasicChannels<Scalar, Tag> downsample(const BasicChannels<Scalar, Tag>& src) {
    const Dims out = src.dims().halved();
    typename BasicChannels<Scalar, Tag>::Array data(out.size(), src.channels());
    for (int c = 0; c < src.channels(); ++c) {
        data.col(c) = detail::box_downsample(src.dims(), src.data().col(c));
    }
    return BasicChannels<Scalar, Tag>(out, detail::halved_spacing(src.dims(), src.spacing()),
                                      std::move(data));
}

/// Level 0 is full resolution; level i+1 = downsample(level i).
template <typename T>
struct Pyramid {
    std::vector<T> levels;

    int size() const { return int(levels.size()); }
    const T& operator[](int i) const { return levels.at(std::size_t(i)); }
    const T& coarsest() const { return levels.back(); }
};

// Throws InvalidArgument when `levels` would halve a non-degenerate axis below 2.
void check_pyramid_levels(const Dims& dims, int levels);

template <typename T>
Pyramid<T> build_pyramid(const T& base, int levels) {
    check_pyramid_levels(base.dims(), levels);
    Pyramid<T> p;
    p.levels.reserve(std::size_t(levels));
    p.levels.push_back(base);
    for (int i = 1; i < levels; ++i) p.levels.push_back(downsample(p.levels.back()));
    return p;
}

}  // namespace protoreg
