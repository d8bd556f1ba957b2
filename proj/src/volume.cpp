#include "qup/volume.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

namespace qup {

using json = nlohmann::json;
namespace fs = std::filesystem;

Dims parse_dims(const std::string& text) {
  static const std::regex pattern(R"(^\s*(\d+)\s*x\s*(\d+)\s*x\s*(\d+)\s*$)");
  std::smatch m;
  if (!std::regex_match(text, m, pattern)) {
    throw ValidationError("shape must look like 64x64x9, got '" + text + "'");
  }
  Dims d{std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3])};
  if (d.nx <= 0 || d.ny <= 0 || d.nz <= 0) throw ValidationError("shape must be positive");
  return d;
}

std::string to_string(const Dims& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

void DWIVolume::validate() const {
  if (data.size() != dims.voxels()) {
    throw ValidationError("volume: data size does not match dims " + to_string(dims));
  }
  if (bvalue > 0.0 && !is_unit(direction)) {
    throw ValidationError("volume: direction " + format_vec(direction) + " is not unit norm");
  }
  for (double v : data) {
    if (!(v >= 0.0)) throw ValidationError("volume: negative or NaN intensity");
  }
}

DWISlice extract_slice(const DWIVolume& vol, int z) {
  if (z < 0 || z >= vol.dims.nz) throw ValidationError("extract_slice: z out of range");
  DWISlice s;
  s.height = vol.dims.ny;
  s.width = vol.dims.nx;
  s.slice_index = z;
  const std::size_t n = vol.dims.slice_pixels();
  s.pixels.assign(vol.data.begin() + static_cast<std::ptrdiff_t>(n * z),
                  vol.data.begin() + static_cast<std::ptrdiff_t>(n * (z + 1)));
  return s;
}

void insert_slice(DWIVolume& vol, const DWISlice& slice) {
  if (slice.height != vol.dims.ny || slice.width != vol.dims.nx) {
    throw ValidationError("insert_slice: slice shape does not match volume");
  }
  if (slice.slice_index < 0 || slice.slice_index >= vol.dims.nz) {
    throw ValidationError("insert_slice: slice index out of range");
  }
  std::copy(slice.pixels.begin(), slice.pixels.end(),
            vol.data.begin() + static_cast<std::ptrdiff_t>(vol.dims.slice_pixels() *
                                                           slice.slice_index));
}

qspace::GradientScheme DwiSet::scheme() const {
  qspace::GradientScheme s;
  for (const auto& v : dwi) {
    s.directions.push_back(v.direction);
    s.bvalues.push_back(v.bvalue);
  }
  return s;
}

Dims DwiSet::dims() const {
  if (!dwi.empty()) return dwi.front().dims;
  if (!b0.empty()) return b0.front().dims;
  return {};
}

void DwiSet::validate() const {
  const Dims d = dims();
  for (const auto* group : {&b0, &dwi}) {
    for (const auto& v : *group) {
      v.validate();
      if (!(v.dims == d)) throw ValidationError("dwi set: volumes have mismatched dims");
    }
  }
  for (const auto& v : dwi) {
    if (!(v.bvalue > 0.0)) throw ValidationError("dwi set: diffusion volume with b = 0");
  }
}

namespace {

fs::path with_ext(const fs::path& stem, const char* ext) {
  fs::path p = stem;
  p += ext;
  return p;
}

}  // namespace

void write_volume(const fs::path& stem, const DWIVolume& vol) {
  vol.validate();
  {
    std::ofstream out(with_ext(stem, ".bin"), std::ios::binary);
    if (!out) throw FormatError("cannot write " + with_ext(stem, ".bin").string());
    std::vector<char> buf(vol.data.size() * 4);
    for (std::size_t i = 0; i < vol.data.size(); ++i) {
      auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(vol.data[i]));
      for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  json j;
  j["dims"] = {vol.dims.nx, vol.dims.ny, vol.dims.nz};
  j["voxel_size"] = vol.voxel_size;
  j["bvalue"] = vol.bvalue;
  j["direction"] = {vol.direction.x(), vol.direction.y(), vol.direction.z()};
  j["dtype"] = "f32le";
  j["source"] = vol.source;
  std::ofstream side(with_ext(stem, ".json"));
  if (!side) throw FormatError("cannot write " + with_ext(stem, ".json").string());
  side << j.dump(2) << '\n';
}

DWIVolume read_volume(const fs::path& stem) {
  std::ifstream side(with_ext(stem, ".json"));
  if (!side) throw FormatError("cannot open " + with_ext(stem, ".json").string());
  json j;
  try {
    side >> j;
  } catch (const json::exception& e) {
    throw FormatError(with_ext(stem, ".json").string() + ": " + e.what());
  }
  if (j.value("dtype", std::string{}) != "f32le") {
    throw FormatError(with_ext(stem, ".json").string() + ": dtype must be f32le");
  }
  DWIVolume vol;
  try {
    const auto dims = j.at("dims").get<std::vector<int>>();
    if (dims.size() != 3) throw FormatError("dims must have three entries");
    vol.dims = {dims[0], dims[1], dims[2]};
    vol.voxel_size = j.at("voxel_size").get<std::array<double, 3>>();
    vol.bvalue = j.at("bvalue").get<double>();
    const auto dir = j.at("direction").get<std::vector<double>>();
    if (dir.size() != 3) throw FormatError("direction must have three entries");
    vol.direction = Vec3(dir[0], dir[1], dir[2]);
    vol.source = j.value("source", std::string{"acquired"});
  } catch (const json::exception& e) {
    throw FormatError(with_ext(stem, ".json").string() + ": " + e.what());
  }
  std::ifstream in(with_ext(stem, ".bin"), std::ios::binary);
  if (!in) throw FormatError("cannot open " + with_ext(stem, ".bin").string());
  std::vector<unsigned char> buf(vol.dims.voxels() * 4);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()) || in.peek() != EOF) {
    throw FormatError(with_ext(stem, ".bin").string() + ": size does not match dims");
  }
  vol.data.resize(vol.dims.voxels());
  for (std::size_t i = 0; i < vol.data.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[4 * i + b]) << (8 * b);
    vol.data[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  vol.validate();
  return vol;
}

namespace {
std::string numbered(const char* prefix, std::size_t i) {
  std::ostringstream os;
  os << prefix << '_';
  os.width(3);
  os.fill('0');
  os << i;
  return os.str();
}
}  // namespace

void write_dwi_set(const fs::path& dir, const DwiSet& set) {
  set.validate();
  fs::create_directories(dir);
  for (std::size_t i = 0; i < set.b0.size(); ++i) write_volume(dir / numbered("b0", i), set.b0[i]);
  for (std::size_t i = 0; i < set.dwi.size(); ++i) {
    write_volume(dir / numbered("dwi", i), set.dwi[i]);
  }
  auto scheme = set.scheme();
  qspace::write_bvals(dir / "bvals", scheme.bvalues);
  qspace::write_bvecs(dir / "bvecs", scheme.directions);
}

DwiSet read_dwi_set(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
  DwiSet set;
  for (std::size_t i = 0; fs::exists(dir / (numbered("b0", i) + ".json")); ++i) {
    set.b0.push_back(read_volume(dir / numbered("b0", i)));
  }
  for (std::size_t i = 0; fs::exists(dir / (numbered("dwi", i) + ".json")); ++i) {
    set.dwi.push_back(read_volume(dir / numbered("dwi", i)));
  }
  if (set.dwi.empty()) throw FormatError(dir.string() + ": no dwi_NNN volumes found");
  set.validate();
  return set;
}

}  // namespace qup
