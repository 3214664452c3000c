#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "protoreg/volume.hpp"
#include "protoreg/warp.hpp"

namespace protoreg {

enum class BlobKind { sphere, ellipsoid };
enum class DeformationKind { rigid, smooth };

struct PhantomSpec {
    Dims dims{32, 32, 32};
    int blobs = 3;
    BlobKind blob_kind = BlobKind::sphere;
    std::vector<double> contrast;  // intensity per blob; empty = evenly spaced in [0.4, 1.0]
    double noise_sigma = 0.02;
    DeformationKind deformation = DeformationKind::smooth;
    double magnitude = 3.0;                             // max |u| in voxels
    Eigen::Vector3d rigid_direction = Eigen::Vector3d::UnitX();  // scaled to `magnitude`
    double smoothing = 10.0;                            // Gaussian sigma of the random field, voxels
    double edge_width = 0.5;                            // intensity falloff across blob borders, voxels
    std::uint64_t seed = 0;

    void validate() const;
    // Twelve smaller blobs, one per abdominal organ class.
    static PhantomSpec abdomen_preset();
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

struct PhantomCase {
    Volume fixed;
    Volume moving;
    LabelVolume fixed_labels;
    LabelVolume moving_labels;
    // Forward field for moving -> fixed: warp_volume(moving, truth) ~ fixed.
    DisplacementField truth;
};

PhantomCase generate(const PhantomSpec& spec);

}  // namespace protoreg
