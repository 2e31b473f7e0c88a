#pragma once

#include <string>

#include "modaseg/volume.hpp"

namespace modaseg {

/// NIfTI-1 subset: little-endian .nii / .nii.gz, 3 spatial dimensions,
/// datatypes uint8 / int16 / float32, spacing from pixdim[1..3],
/// scl_slope / scl_inter applied on read. Volumes are kept in stored-axis
/// order; no affine reorientation.
Volume load_volume(const std::string& path);

/// As load_volume but validates the label alphabet {0,1,2}.
LabelMap load_labelmap(const std::string& path);

/// float32 on disk.
void save_volume(const Volume& v, const std::string& path);

/// uint8 on disk.
void save_labelmap(const LabelMap& l, const std::string& path);

}  // namespace modaseg
