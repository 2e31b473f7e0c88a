#include "modaseg/nifti_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace modaseg {

namespace {

// nifti_1_header, fixed 348-byte layout (little-endian on disk).
#pragma pack(push, 1)
struct NiftiHeader {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "nifti header layout");

constexpr int16_t DT_UINT8 = 2;
constexpr int16_t DT_INT16 = 4;
constexpr int16_t DT_FLOAT32 = 16;

class GzReader {
 public:
  explicit GzReader(const std::string& path) : f_(gzopen(path.c_str(), "rb")) {
    if (!f_) throw std::runtime_error("cannot open " + path);
  }
  ~GzReader() {
    if (f_) gzclose(f_);
  }
  void read(void* dst, std::size_t n) {
    if (gzread(f_, dst, static_cast<unsigned>(n)) != static_cast<int>(n))
      throw std::runtime_error("truncated or corrupt NIfTI file");
  }
  void skip(std::size_t n) {
    std::vector<char> buf(n);
    read(buf.data(), n);
  }

 private:
  gzFile f_;
};

class GzWriter {
 public:
  GzWriter(const std::string& path, bool compressed)
      : f_(gzopen(path.c_str(), compressed ? "wb6" : "wT")) {
    if (!f_) throw std::runtime_error("cannot write " + path);
  }
  ~GzWriter() {
    if (f_) gzclose(f_);
  }
  void write(const void* src, std::size_t n) {
    if (gzwrite(f_, src, static_cast<unsigned>(n)) != static_cast<int>(n))
      throw std::runtime_error("short write");
  }

 private:
  gzFile f_;
};

bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() &&
         s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

struct RawImage {
  Shape3 shape;
  Vec3 spacing;
  Vec3 origin;
  std::vector<float> data;  // scl applied
};

RawImage read_nifti(const std::string& path) {
  GzReader in(path);
  NiftiHeader h{};
  in.read(&h, sizeof(h));
  if (h.sizeof_hdr != 348 ||
      !(std::strncmp(h.magic, "n+1", 3) == 0 || std::strncmp(h.magic, "ni1", 3) == 0))
    throw std::runtime_error(path + ": corrupt NIfTI-1 header");
  int ndim = h.dim[0];
  // trailing singleton dims are tolerated
  for (int d = ndim; d > 3; --d) {
    if (h.dim[d] > 1) throw std::runtime_error(path + ": expected 3 spatial dimensions");
    ndim = d - 1;
  }
  if (ndim != 3) throw std::runtime_error(path + ": expected 3 spatial dimensions");
  if (h.dim[1] <= 0 || h.dim[2] <= 0 || h.dim[3] <= 0)
    throw std::runtime_error(path + ": degenerate image dimensions");
  if (h.datatype != DT_UINT8 && h.datatype != DT_INT16 && h.datatype != DT_FLOAT32)
    throw std::runtime_error(path + ": unsupported NIfTI datatype " +
                             std::to_string(h.datatype));

  RawImage img;
  img.shape = {h.dim[1], h.dim[2], h.dim[3]};
  img.spacing = {h.pixdim[1], h.pixdim[2], h.pixdim[3]};
  for (double s : img.spacing)
    if (!(s > 0.0)) throw std::runtime_error(path + ": non-positive pixdim");
  img.origin = {h.qoffset_x, h.qoffset_y, h.qoffset_z};

  std::size_t n = std::size_t(h.dim[1]) * h.dim[2] * h.dim[3];
  std::size_t offset = static_cast<std::size_t>(h.vox_offset);
  if (offset > sizeof(h)) in.skip(offset - sizeof(h));

  float slope = (h.scl_slope == 0.0f) ? 1.0f : h.scl_slope;
  float inter = h.scl_inter;
  img.data.resize(n);
  if (h.datatype == DT_FLOAT32) {
    in.read(img.data.data(), n * sizeof(float));
  } else if (h.datatype == DT_INT16) {
    std::vector<int16_t> raw(n);
    in.read(raw.data(), n * sizeof(int16_t));
    for (std::size_t i = 0; i < n; ++i) img.data[i] = raw[i];
  } else {
    std::vector<uint8_t> raw(n);
    in.read(raw.data(), n);
    for (std::size_t i = 0; i < n; ++i) img.data[i] = raw[i];
  }
  if (slope != 1.0f || inter != 0.0f)
    for (float& v : img.data) v = v * slope + inter;
  return img;
}

NiftiHeader make_header(const Shape3& sh, const Vec3& sp, const Vec3& org,
                        int16_t datatype, int16_t bitpix) {
  NiftiHeader h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = int16_t(sh[0]);
  h.dim[2] = int16_t(sh[1]);
  h.dim[3] = int16_t(sh[2]);
  for (int d = 4; d < 8; ++d) h.dim[d] = 1;
  h.datatype = datatype;
  h.bitpix = bitpix;
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = float(sp[0]);
  h.pixdim[2] = float(sp[1]);
  h.pixdim[3] = float(sp[2]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // NIFTI_UNITS_MM
  h.qform_code = 1;
  h.qoffset_x = float(org[0]);
  h.qoffset_y = float(org[1]);
  h.qoffset_z = float(org[2]);
  h.quatern_b = h.quatern_c = h.quatern_d = 0.0f;  // identity orientation
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

void write_nifti(const std::string& path, const NiftiHeader& h,
                 const void* payload, std::size_t nbytes) {
  if (h.dim[1] > 0x7fff || h.dim[2] > 0x7fff || h.dim[3] > 0x7fff)
    throw std::runtime_error("image too large for NIfTI-1 int16 dims");
  GzWriter out(path, ends_with(path, ".gz"));
  out.write(&h, sizeof(h));
  const char pad[4] = {0, 0, 0, 0};
  out.write(pad, 4);  // vox_offset 352
  out.write(payload, nbytes);
}

}  // namespace

Volume load_volume(const std::string& path) {
  RawImage img = read_nifti(path);
  Volume v;
  v.shape = img.shape;
  v.spacing = img.spacing;
  v.origin = img.origin;
  v.data = std::move(img.data);
  v.validate();
  return v;
}

LabelMap load_labelmap(const std::string& path) {
  RawImage img = read_nifti(path);
  LabelMap l;
  l.shape = img.shape;
  l.spacing = img.spacing;
  l.origin = img.origin;
  l.data.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    float v = img.data[i];
    long r = std::lround(v);
    if (std::fabs(v - r) > 1e-4 || r < 0 || r > 2)
      throw std::runtime_error(path + ": label value " + std::to_string(v) +
                               " outside {0,1,2}");
    l.data[i] = static_cast<uint8_t>(r);
  }
  return l;
}

void save_volume(const Volume& v, const std::string& path) {
  v.validate();
  NiftiHeader h = make_header(v.shape, v.spacing, v.origin, DT_FLOAT32, 32);
  write_nifti(path, h, v.data.data(), v.data.size() * sizeof(float));
}

void save_labelmap(const LabelMap& l, const std::string& path) {
  l.validate();
  NiftiHeader h = make_header(l.shape, l.spacing, l.origin, DT_UINT8, 8);
  write_nifti(path, h, l.data.data(), l.data.size());
}

}  // namespace modaseg
