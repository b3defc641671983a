#pragma once

// Dense 3D grids with physical spacing, intensity preprocessing, random
// patch cropping, and a small self-describing binary file format.
//
// Axis conventions: (h, w, s). h is the lateral axis (left side of the body
// occupies low h), s is the superior-inferior axis (superior = high s).
// Linear storage is row-major with s fastest: index = (h*W + w)*S + s.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rtflow/common.hpp"
#include "rtflow/jsonutil.hpp"

namespace rtflow {

// What the stored numbers mean. Hounsfield volumes are clipped+rescaled by
// preprocessing; normalized volumes pass through unchanged, which is what
// makes preprocessing idempotent. Label grids hold {0,1} masks.
enum class VoxelUnit : std::uint8_t {
  kHounsfield = 0,
  kNormalized = 1,
  kLabel = 2,
};

template <typename T>
struct Grid3 {
  Dims3 dims;
  Spacing3 spacing;
  VoxelUnit unit = VoxelUnit::kHounsfield;
  std::vector<T> data;  // dims.count() elements, s fastest

  static Grid3 zeros(Dims3 d, Spacing3 sp, VoxelUnit u) {
    Grid3 g;
    g.dims = d;
    g.spacing = sp;
    g.unit = u;
    g.data.assign(static_cast<std::size_t>(d.count()), T(0));
    return g;
  }

  T& at(int h, int w, int s) { return data[linear_index(dims, h, w, s)]; }
  const T& at(int h, int w, int s) const {
    return data[linear_index(dims, h, w, s)];
  }

  template <typename U>
  bool same_shape(const Grid3<U>& o) const {
    return dims == o.dims && spacing == o.spacing;
  }
};

using VolumeGrid = Grid3<float>;
using MaskGrid = Grid3<std::uint8_t>;

struct PreprocessConfig {
  double clip_lo_hu = -1000.0;
  double clip_hi_hu = 1000.0;
  Spacing3 target_spacing{1.0, 1.0, 3.0};

  Json to_json() const {
    return Json{{"clip_lo_hu", clip_lo_hu},
                {"clip_hi_hu", clip_hi_hu},
                {"target_spacing",
                 {target_spacing.h, target_spacing.w, target_spacing.s}}};
  }
  static PreprocessConfig from_json(const Json& j) {
    PreprocessConfig c;
    c.clip_lo_hu = j.at("clip_lo_hu").get<double>();
    c.clip_hi_hu = j.at("clip_hi_hu").get<double>();
    c.target_spacing = Spacing3{j.at("target_spacing").at(0).get<double>(),
                                j.at("target_spacing").at(1).get<double>(),
                                j.at("target_spacing").at(2).get<double>()};
    return c;
  }
};

// Clip to [clip_lo_hu, clip_hi_hu], rescale linearly to [0,1], and resample
// to the target spacing (trilinear). Already-normalized volumes skip the
// intensity step, and resampling to the current spacing is an exact copy, so
// applying this twice equals applying it once, bit for bit.
VolumeGrid preprocess_volume(const VolumeGrid& in, const PreprocessConfig& cfg);

// Nearest-neighbour resample of a label grid to the target spacing.
MaskGrid preprocess_mask(const MaskGrid& in, const PreprocessConfig& cfg);

// Trilinear / nearest resampling primitives (exposed for tests).
VolumeGrid resample_trilinear(const VolumeGrid& in, Spacing3 target);
MaskGrid resample_nearest(const MaskGrid& in, Spacing3 target);

// Random patch crop of matching volume/mask pair. The patch centre is drawn
// uniformly from the body bounding box (union of the mask's bounding box and
// a low-intensity tissue threshold), then clamped so the patch fits. Throws
// InvalidInput if the requested patch exceeds the volume. Deterministic in
// `seed`. When `origin` is given, it receives the crop's starting voxel in
// the source volume (needed to keep absolute coordinates attached to crops).
std::pair<VolumeGrid, MaskGrid> crop_patch(const VolumeGrid& vol,
                                           const MaskGrid& mask, Dims3 patch,
                                           std::uint64_t seed,
                                           Dims3* origin = nullptr);

// Inclusive voxel bounding box; `empty` when no voxel passes.
struct VoxelBox {
  int lo_h = 0, lo_w = 0, lo_s = 0;
  int hi_h = -1, hi_w = -1, hi_s = -1;
  bool empty = true;
};
VoxelBox mask_bounding_box(const MaskGrid& mask);
VoxelBox body_bounding_box(const VolumeGrid& vol, const MaskGrid& mask);

// ------------------------------------------------------------------- file IO
//
// Layout (all little-endian):
//   bytes  0..11  magic "RTFLOWVOLUME"
//   bytes 12..13  u16 format version (currently 1)
//   byte  14      payload kind: 0 = f32 Hounsfield, 1 = f32 normalized,
//                 2 = u8 label
//   byte  15      reserved (0)
//   bytes 16..27  dims h, w, s as 3 x u32
//   bytes 28..39  spacing h, w, s as 3 x f32
//   bytes 40..    payload, dims.count() elements, s fastest

void save_volume(const std::string& path, const VolumeGrid& vol);
void save_mask(const std::string& path, const MaskGrid& mask);
VolumeGrid load_volume(const std::string& path);
MaskGrid load_mask(const std::string& path);

}  // namespace rtflow
