#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "protoreg/losses.hpp"
#include "protoreg/volume.hpp"
#include "protoreg/warp.hpp"

namespace testing {

using namespace protoreg;

inline Volume random_volume(const Dims& d, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Volume v(d);
    for (Eigen::Index i = 0; i < d.size(); ++i) v.data()[i] = u(rng);
    return v;
}

inline DisplacementField random_field(const Dims& d, std::mt19937_64& rng, double amplitude) {
    std::uniform_real_distribution<double> u(-amplitude, amplitude);
    DisplacementField f(d);
    for (Eigen::Index i = 0; i < d.size(); ++i)
        for (int k = 0; k < 3; ++k) f.u()(k, i) = u(rng);
    return f;
}

inline LabelVolume random_labels(const Dims& d, int classes, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> u(0, classes);
    LabelVolume::Array a(d.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) a[i] = u(rng);
    return LabelVolume(d, Spacing::Ones(), a, classes);
}

inline OneHotMask random_soft_mask(const Dims& d, int classes, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    OneHotMask m(d, Spacing::Ones(), classes);
    for (Eigen::Index i = 0; i < d.size(); ++i)
        for (int k = 0; k < classes; ++k) m.data()(i, k) = u(rng);
    return m;
}

inline FeatureVolume random_features(const Dims& d, int channels, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    FeatureVolume f(d, Spacing::Ones(), channels);
    for (Eigen::Index i = 0; i < d.size(); ++i)
        for (int c = 0; c < channels; ++c) f.data()(i, c) = n(rng);
    return f;
}

inline ContourPointSet random_points(int n, std::mt19937_64& rng, double extent = 5.0) {
    std::uniform_real_distribution<double> u(0.0, extent);
    ContourPointSet s;
    s.label = 1;
    s.points.resize(3, n);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) s.points(k, i) = u(rng);
    return s;
}

// Labels with a box per class: class k occupies [lo_k, hi_k) on every axis.
inline LabelVolume box_labels(const Dims& d, const std::vector<std::array<int, 6>>& boxes) {
    LabelVolume::Array a = LabelVolume::Array::Zero(d.size());
    for (std::size_t k = 0; k < boxes.size(); ++k) {
        const auto& b = boxes[k];
        for (int z = b[4]; z < b[5]; ++z)
            for (int y = b[2]; y < b[3]; ++y)
                for (int x = b[0]; x < b[1]; ++x) a[d.index(x, y, z)] = int(k + 1);
    }
    return LabelVolume(d, Spacing::Ones(), a, int(boxes.size()));
}

inline double rel_diff(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("protoreg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace testing
