#include "rtflow/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "rtflow/rng.hpp"

namespace rtflow {

namespace {

void check_grid_basics(Dims3 d, std::size_t data_size, const char* who) {
  if (d.h <= 0 || d.w <= 0 || d.s <= 0)
    throw InvalidInput(std::string(who) + ": dims must be positive");
  if (data_size != static_cast<std::size_t>(d.count()))
    throw InvalidInput(std::string(who) + ": data size does not match dims");
}

int out_extent(int n_in, double sp_in, double sp_out) {
  return std::max(1, static_cast<int>(std::lround(n_in * sp_in / sp_out)));
}

}  // namespace

VolumeGrid resample_trilinear(const VolumeGrid& in, Spacing3 target) {
  check_grid_basics(in.dims, in.data.size(), "resample_trilinear");
  if (target.h <= 0 || target.w <= 0 || target.s <= 0)
    throw ConfigError("resample_trilinear: target spacing must be positive");
  if (in.spacing == target) return in;  // exact pass-through

  VolumeGrid out = VolumeGrid::zeros(
      Dims3{out_extent(in.dims.h, in.spacing.h, target.h),
            out_extent(in.dims.w, in.spacing.w, target.w),
            out_extent(in.dims.s, in.spacing.s, target.s)},
      target, in.unit);

  // Voxel-centre mapping: output centre (i+0.5)*sp_out lands at input index
  // (i+0.5)*sp_out/sp_in - 0.5; borders clamp.
  auto prep_axis = [](int n_out, double sp_out, double sp_in, int n_in,
                      std::vector<int>& i0, std::vector<int>& i1,
                      std::vector<double>& f) {
    i0.resize(n_out);
    i1.resize(n_out);
    f.resize(n_out);
    for (int i = 0; i < n_out; ++i) {
      const double x = (i + 0.5) * sp_out / sp_in - 0.5;
      int lo = static_cast<int>(std::floor(x));
      double fr = x - lo;
      if (lo < 0) { lo = 0; fr = 0.0; }
      if (lo > n_in - 1) { lo = n_in - 1; fr = 0.0; }
      i0[i] = lo;
      i1[i] = std::min(lo + 1, n_in - 1);
      f[i] = fr;
    }
  };

  std::vector<int> h0, h1, w0, w1, s0, s1;
  std::vector<double> fh, fw, fs;
  prep_axis(out.dims.h, target.h, in.spacing.h, in.dims.h, h0, h1, fh);
  prep_axis(out.dims.w, target.w, in.spacing.w, in.dims.w, w0, w1, fw);
  prep_axis(out.dims.s, target.s, in.spacing.s, in.dims.s, s0, s1, fs);

  for (int h = 0; h < out.dims.h; ++h)
    for (int w = 0; w < out.dims.w; ++w)
      for (int s = 0; s < out.dims.s; ++s) {
        auto v = [&](int hh, int ww, int ss) {
          return static_cast<double>(in.at(hh, ww, ss));
        };
        const double c00 = v(h0[h], w0[w], s0[s]) * (1 - fs[s]) + v(h0[h], w0[w], s1[s]) * fs[s];
        const double c01 = v(h0[h], w1[w], s0[s]) * (1 - fs[s]) + v(h0[h], w1[w], s1[s]) * fs[s];
        const double c10 = v(h1[h], w0[w], s0[s]) * (1 - fs[s]) + v(h1[h], w0[w], s1[s]) * fs[s];
        const double c11 = v(h1[h], w1[w], s0[s]) * (1 - fs[s]) + v(h1[h], w1[w], s1[s]) * fs[s];
        const double c0 = c00 * (1 - fw[w]) + c01 * fw[w];
        const double c1 = c10 * (1 - fw[w]) + c11 * fw[w];
        out.at(h, w, s) = static_cast<float>(c0 * (1 - fh[h]) + c1 * fh[h]);
      }
  return out;
}

MaskGrid resample_nearest(const MaskGrid& in, Spacing3 target) {
  check_grid_basics(in.dims, in.data.size(), "resample_nearest");
  if (target.h <= 0 || target.w <= 0 || target.s <= 0)
    throw ConfigError("resample_nearest: target spacing must be positive");
  if (in.spacing == target) return in;

  MaskGrid out = MaskGrid::zeros(
      Dims3{out_extent(in.dims.h, in.spacing.h, target.h),
            out_extent(in.dims.w, in.spacing.w, target.w),
            out_extent(in.dims.s, in.spacing.s, target.s)},
      target, VoxelUnit::kLabel);

  auto nearest = [](int i, double sp_out, double sp_in, int n_in) {
    const double x = (i + 0.5) * sp_out / sp_in - 0.5;
    return std::clamp(static_cast<int>(std::lround(x)), 0, n_in - 1);
  };
  for (int h = 0; h < out.dims.h; ++h) {
    const int hh = nearest(h, target.h, in.spacing.h, in.dims.h);
    for (int w = 0; w < out.dims.w; ++w) {
      const int ww = nearest(w, target.w, in.spacing.w, in.dims.w);
      for (int s = 0; s < out.dims.s; ++s)
        out.at(h, w, s) = in.at(hh, ww, nearest(s, target.s, in.spacing.s, in.dims.s));
    }
  }
  return out;
}

VolumeGrid preprocess_volume(const VolumeGrid& in, const PreprocessConfig& cfg) {
  check_grid_basics(in.dims, in.data.size(), "preprocess_volume");
  if (in.unit == VoxelUnit::kLabel)
    throw InvalidInput("preprocess_volume: got a label grid");
  if (cfg.clip_lo_hu >= cfg.clip_hi_hu)
    throw ConfigError("preprocess_volume: clip_lo_hu must be below clip_hi_hu");

  VolumeGrid staged = in;
  if (in.unit == VoxelUnit::kHounsfield) {
    const double lo = cfg.clip_lo_hu, span = cfg.clip_hi_hu - cfg.clip_lo_hu;
    for (float& v : staged.data) {
      const double c = std::clamp(static_cast<double>(v), lo, cfg.clip_hi_hu);
      v = static_cast<float>((c - lo) / span);
    }
    staged.unit = VoxelUnit::kNormalized;
  }
  // Already-normalized input: intensity step intentionally skipped; combined
  // with exact pass-through resampling this makes the function idempotent.
  return resample_trilinear(staged, cfg.target_spacing);
}

MaskGrid preprocess_mask(const MaskGrid& in, const PreprocessConfig& cfg) {
  check_grid_basics(in.dims, in.data.size(), "preprocess_mask");
  if (in.unit != VoxelUnit::kLabel)
    throw InvalidInput("preprocess_mask: expected a label grid");
  for (std::uint8_t v : in.data)
    if (v > 1) throw InvalidInput("preprocess_mask: mask values must be 0 or 1");
  return resample_nearest(in, cfg.target_spacing);
}

VoxelBox mask_bounding_box(const MaskGrid& mask) {
  VoxelBox b;
  for (int h = 0; h < mask.dims.h; ++h)
    for (int w = 0; w < mask.dims.w; ++w)
      for (int s = 0; s < mask.dims.s; ++s) {
        if (!mask.at(h, w, s)) continue;
        if (b.empty) {
          b = VoxelBox{h, w, s, h, w, s, false};
        } else {
          b.lo_h = std::min(b.lo_h, h);
          b.lo_w = std::min(b.lo_w, w);
          b.lo_s = std::min(b.lo_s, s);
          b.hi_h = std::max(b.hi_h, h);
          b.hi_w = std::max(b.hi_w, w);
          b.hi_s = std::max(b.hi_s, s);
        }
      }
  return b;
}

VoxelBox body_bounding_box(const VolumeGrid& vol, const MaskGrid& mask) {
  // Tissue threshold: -700 HU, or its image 0.15 after [-1000,1000] -> [0,1].
  const float thr = vol.unit == VoxelUnit::kHounsfield ? -700.0f : 0.15f;
  VoxelBox b = mask_bounding_box(mask);
  for (int h = 0; h < vol.dims.h; ++h)
    for (int w = 0; w < vol.dims.w; ++w)
      for (int s = 0; s < vol.dims.s; ++s) {
        if (vol.at(h, w, s) < thr) continue;
        if (b.empty) {
          b = VoxelBox{h, w, s, h, w, s, false};
        } else {
          b.lo_h = std::min(b.lo_h, h);
          b.lo_w = std::min(b.lo_w, w);
          b.lo_s = std::min(b.lo_s, s);
          b.hi_h = std::max(b.hi_h, h);
          b.hi_w = std::max(b.hi_w, w);
          b.hi_s = std::max(b.hi_s, s);
        }
      }
  return b;
}

std::pair<VolumeGrid, MaskGrid> crop_patch(const VolumeGrid& vol,
                                           const MaskGrid& mask, Dims3 patch,
                                           std::uint64_t seed, Dims3* origin) {
  check_grid_basics(vol.dims, vol.data.size(), "crop_patch");
  if (!vol.same_shape(mask))
    throw InvalidInput("crop_patch: volume and mask shapes differ");
  if (patch.h <= 0 || patch.w <= 0 || patch.s <= 0)
    throw InvalidInput("crop_patch: patch dims must be positive");
  if (patch.h > vol.dims.h || patch.w > vol.dims.w || patch.s > vol.dims.s)
    throw InvalidInput("crop_patch: patch exceeds volume extent");

  VoxelBox box = body_bounding_box(vol, mask);
  if (box.empty)
    box = VoxelBox{0, 0, 0, vol.dims.h - 1, vol.dims.w - 1, vol.dims.s - 1, false};

  RngStream rng(seed);
  auto pick_start = [&](int lo, int hi, int extent, int dim) {
    const int c = lo + static_cast<int>(rng.index(static_cast<std::uint64_t>(hi - lo + 1)));
    return std::clamp(c - extent / 2, 0, dim - extent);
  };
  const int sh = pick_start(box.lo_h, box.hi_h, patch.h, vol.dims.h);
  const int sw = pick_start(box.lo_w, box.hi_w, patch.w, vol.dims.w);
  const int ss = pick_start(box.lo_s, box.hi_s, patch.s, vol.dims.s);
  if (origin) *origin = Dims3{sh, sw, ss};

  VolumeGrid pv = VolumeGrid::zeros(patch, vol.spacing, vol.unit);
  MaskGrid pm = MaskGrid::zeros(patch, mask.spacing, VoxelUnit::kLabel);
  for (int h = 0; h < patch.h; ++h)
    for (int w = 0; w < patch.w; ++w)
      for (int s = 0; s < patch.s; ++s) {
        pv.at(h, w, s) = vol.at(sh + h, sw + w, ss + s);
        pm.at(h, w, s) = mask.at(sh + h, sw + w, ss + s);
      }
  return {std::move(pv), std::move(pm)};
}

// ------------------------------------------------------------------- file IO

namespace {

constexpr char kMagic[12] = {'R', 'T', 'F', 'L', 'O', 'W',
                             'V', 'O', 'L', 'U', 'M', 'E'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& b, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(b, v);
}

std::uint16_t get_u16(const std::string& b, std::size_t off) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[off]) |
                                    (static_cast<unsigned char>(b[off + 1]) << 8));
}
std::uint32_t get_u32(const std::string& b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + i])) << (8 * i);
  return v;
}
float get_f32(const std::string& b, std::size_t off) {
  const std::uint32_t v = get_u32(b, off);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

std::string header_bytes(Dims3 dims, Spacing3 sp, std::uint8_t kind) {
  std::string b;
  b.reserve(40);
  b.append(kMagic, 12);
  put_u16(b, kVersion);
  b.push_back(static_cast<char>(kind));
  b.push_back(0);  // reserved
  put_u32(b, static_cast<std::uint32_t>(dims.h));
  put_u32(b, static_cast<std::uint32_t>(dims.w));
  put_u32(b, static_cast<std::uint32_t>(dims.s));
  put_f32(b, static_cast<float>(sp.h));
  put_f32(b, static_cast<float>(sp.w));
  put_f32(b, static_cast<float>(sp.s));
  return b;
}

struct ParsedHeader {
  Dims3 dims;
  Spacing3 spacing;
  std::uint8_t kind;
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InvalidInput("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

ParsedHeader parse_header(const std::string& b, const std::string& path) {
  if (b.size() < 40 || std::memcmp(b.data(), kMagic, 12) != 0)
    throw ValidationError("'" + path + "' is not a volume file");
  if (get_u16(b, 12) != kVersion)
    throw ValidationError("'" + path + "': unsupported format version");
  ParsedHeader h;
  h.kind = static_cast<std::uint8_t>(b[14]);
  h.dims = Dims3{static_cast<int>(get_u32(b, 16)),
                 static_cast<int>(get_u32(b, 20)),
                 static_cast<int>(get_u32(b, 24))};
  h.spacing = Spacing3{get_f32(b, 28), get_f32(b, 32), get_f32(b, 36)};
  if (h.dims.h <= 0 || h.dims.w <= 0 || h.dims.s <= 0)
    throw ValidationError("'" + path + "': non-positive dims");
  return h;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InvalidInput("cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("short write to '" + path + "'");
}

}  // namespace

void save_volume(const std::string& path, const VolumeGrid& vol) {
  check_grid_basics(vol.dims, vol.data.size(), "save_volume");
  if (vol.unit == VoxelUnit::kLabel)
    throw InvalidInput("save_volume: got a label grid, use save_mask");
  std::string b = header_bytes(vol.dims, vol.spacing,
                               static_cast<std::uint8_t>(vol.unit));
  b.reserve(b.size() + vol.data.size() * 4);
  for (float v : vol.data) put_f32(b, v);
  write_file(path, b);
}

void save_mask(const std::string& path, const MaskGrid& mask) {
  check_grid_basics(mask.dims, mask.data.size(), "save_mask");
  for (std::uint8_t v : mask.data)
    if (v > 1) throw InvalidInput("save_mask: mask values must be 0 or 1");
  std::string b = header_bytes(mask.dims, mask.spacing,
                               static_cast<std::uint8_t>(VoxelUnit::kLabel));
  b.append(reinterpret_cast<const char*>(mask.data.data()), mask.data.size());
  write_file(path, b);
}

VolumeGrid load_volume(const std::string& path) {
  const std::string b = read_file(path);
  const ParsedHeader h = parse_header(b, path);
  if (h.kind != 0 && h.kind != 1)
    throw ValidationError("'" + path + "': not an intensity volume");
  const std::size_t n = static_cast<std::size_t>(h.dims.count());
  if (b.size() != 40 + n * 4)
    throw ValidationError("'" + path + "': payload size mismatch");
  VolumeGrid out;
  out.dims = h.dims;
  out.spacing = h.spacing;
  out.unit = static_cast<VoxelUnit>(h.kind);
  out.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = get_f32(b, 40 + i * 4);
  return out;
}

MaskGrid load_mask(const std::string& path) {
  const std::string b = read_file(path);
  const ParsedHeader h = parse_header(b, path);
  if (h.kind != 2) throw ValidationError("'" + path + "': not a label volume");
  const std::size_t n = static_cast<std::size_t>(h.dims.count());
  if (b.size() != 40 + n)
    throw ValidationError("'" + path + "': payload size mismatch");
  MaskGrid out;
  out.dims = h.dims;
  out.spacing = h.spacing;
  out.unit = VoxelUnit::kLabel;
  out.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t v = static_cast<std::uint8_t>(b[40 + i]);
    if (v > 1) throw ValidationError("'" + path + "': mask values must be 0 or 1");
    out.data[i] = v;
  }
  return out;
}

}  // namespace rtflow
