#pragma once

#include <filesystem>
#include <string>

#include "protoreg/volume.hpp"
#include "protoreg/warp.hpp"

namespace protoreg {

// Raw format: `<base>.f32raw` (little-endian float32, x-fastest) plus a `<base>.json` sidecar
//   {"dims":[nx,ny,nz], "spacing":[sx,sy,sz], "kind":"volume"|"labels"|"field", ...}
// Labels add "num_classes"; fields add "units":"voxels" and store the three components
// interleaved per voxel.
//
// NIfTI-1 subset: single-file "n+1" (or "ni1" with a sibling .img), uint8/int16/float32,
// optional gzip. Only dims and pixdim are honoured; orientation is ignored with a warning.
//
// Paths may name either file of a raw pair or omit the extension.

std::filesystem::path raw_base(const std::filesystem::path& path);
bool is_nifti_path(const std::filesystem::path& path);

Volume read_volume(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);
DisplacementField read_field(const std::filesystem::path& path);

template <typename Scalar>
void write_volume(const BasicVolume<Scalar>& vol, const std::filesystem::path& path);
void write_labels(const LabelVolume& labels, const std::filesystem::path& path);
void write_field(const DisplacementField& field, const std::filesystem::path& path);

extern template void write_volume(const BasicVolume<double>&, const std::filesystem::path&);
extern template void write_volume(const BasicVolume<float>&, const std::filesystem::path&);

}  // namespace protoreg
