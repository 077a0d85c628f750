#include "dist/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numbers>
#include <sstream>

#include "dist/errors.hpp"
#include "dist/parallel.hpp"

namespace dist {

using nlohmann::json;

namespace {

constexpr char kVolumeMagic[8] = {'D', 'I', 'S', 'T', 'V', 'O', 'L', '1'};

std::uint64_t fnv1a(const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little) {
    throw InputError("volume io: only little-endian hosts are supported");
  }
}

std::string fmt(double v) {
  char buf[40];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw InputError("fmt: number conversion failed");
  return std::string(buf, p);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw InputError("malformed number '" + s + "'");
  }
  return v;
}

// token-based reader with required-literal checks
class TokenReader {
 public:
  explicit TokenReader(const fs::path& path) : in_(path), path_(path.string()) {
    if (!in_) throw InputError("cannot open " + path_);
  }

  std::string next() {
    std::string tok;
    if (!(in_ >> tok)) throw InputError(path_ + ": unexpected end of file");
    return tok;
  }

  void expect(const std::string& literal) {
    const std::string tok = next();
    if (tok != literal) {
      throw InputError(path_ + ": expected '" + literal + "', got '" + tok + "'");
    }
  }

  long next_int() {
    const std::string tok = next();
    long v = 0;
    const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size()) {
      throw InputError(path_ + ": malformed integer '" + tok + "'");
    }
    return v;
  }

  double next_double() { return parse_double(next()); }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

void write_volume(const fs::path& path, const Volume& volume) {
  require_little_endian();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out.write(kVolumeMagic, sizeof(kVolumeMagic));
  const std::uint32_t header[4] = {
      static_cast<std::uint32_t>(volume.dims[0]), static_cast<std::uint32_t>(volume.dims[1]),
      static_cast<std::uint32_t>(volume.dims[2]), static_cast<std::uint32_t>(volume.channels)};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  const std::uint64_t checksum = fnv1a(volume.data.data(), volume.data.size() * sizeof(float));
  out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
  out.write(reinterpret_cast<const char*>(volume.data.data()),
            static_cast<std::streamsize>(volume.data.size() * sizeof(float)));
  if (!out) throw InputError("write failed for " + path.string());
}

Volume read_volume(const fs::path& path) {
  require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open volume " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kVolumeMagic, sizeof(magic)) != 0) {
    throw InputError("bad magic in volume " + path.string());
  }
  std::uint32_t header[4];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  std::uint64_t checksum = 0;
  in.read(reinterpret_cast<char*>(&checksum), sizeof(checksum));
  if (!in) throw InputError("truncated volume header in " + path.string());

  Volume volume;
  volume.dims = Eigen::Vector3i(static_cast<int>(header[0]), static_cast<int>(header[1]),
                                static_cast<int>(header[2]));
  volume.channels = static_cast<int>(header[3]);
  const size_t count = static_cast<size_t>(header[0]) * header[1] * header[2] * header[3];
  volume.data.resize(count);
  in.read(reinterpret_cast<char*>(volume.data.data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(count * sizeof(float))) {
    throw InputError("volume payload shorter than header dims in " + path.string());
  }
  if (fnv1a(volume.data.data(), count * sizeof(float)) != checksum) {
    throw InputError("checksum failure in volume " + path.string());
  }
  return volume;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  json j;
  j["dims"] = {manifest.dims[0], manifest.dims[1], manifest.dims[2]};
  j["voxel_size"] = {manifest.voxel_size[0], manifest.voxel_size[1], manifest.voxel_size[2]};
  j["origin"] = {manifest.origin[0], manifest.origin[1], manifest.origin[2]};
  j["b_value"] = manifest.b_value;
  j["n_b0"] = manifest.n_b0;
  json grads = json::array();
  for (const Vec3& g : manifest.gradients) grads.push_back({g[0], g[1], g[2]});
  j["gradients"] = std::move(grads);
  j["dwi_path"] = manifest.dwi_path;
  j["b0_path"] = manifest.b0_path;
  if (!manifest.mask_path.empty()) j["mask_path"] = manifest.mask_path;
  if (!manifest.truth_path.empty()) j["truth_path"] = manifest.truth_path;
  j["endianness"] = manifest.endianness;

  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InputError("manifest parse error in " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    for (int a = 0; a < 3; ++a) {
      m.dims[a] = j.at("dims").at(a).get<int>();
      m.voxel_size[a] = j.at("voxel_size").at(a).get<double>();
      m.origin[a] = j.at("origin").at(a).get<double>();
    }
    m.b_value = j.at("b_value").get<double>();
    m.n_b0 = j.at("n_b0").get<int>();
    for (const auto& g : j.at("gradients")) {
      m.gradients.emplace_back(g.at(0).get<double>(), g.at(1).get<double>(),
                               g.at(2).get<double>());
    }
    m.dwi_path = j.at("dwi_path").get<std::string>();
    m.b0_path = j.at("b0_path").get<std::string>();
    if (j.contains("mask_path")) m.mask_path = j["mask_path"].get<std::string>();
    if (j.contains("truth_path")) m.truth_path = j["truth_path"].get<std::string>();
    m.endianness = j.value("endianness", std::string("little"));
  } catch (const json::exception& e) {
    throw InputError("manifest field error in " + path.string() + ": " + e.what());
  }
  if (m.endianness != "little") {
    throw InputError("manifest declares unsupported endianness '" + m.endianness + "'");
  }
  return m;
}

LoadedDataset read_dataset(const fs::path& manifest_path) {
  const DatasetManifest manifest = read_manifest(manifest_path);
  const fs::path dir = manifest_path.parent_path();

  LoadedDataset data;
  data.grid.dims = manifest.dims;
  data.grid.voxel_size = manifest.voxel_size;
  data.grid.origin = manifest.origin;
  data.scheme.b_value = manifest.b_value;
  data.scheme.n_b0 = manifest.n_b0;
  for (size_t i = 0; i < manifest.gradients.size(); ++i) {
    Vec3 g = manifest.gradients[i];
    const double norm = g.norm();
    if (std::abs(norm - 1.0) > 1e-6) {
      throw InputError("gradient " + std::to_string(i) + " is not unit norm (" + fmt(norm) + ")");
    }
    if (std::abs(norm - 1.0) > 1e-12) {
      data.warnings.push_back("gradient " + std::to_string(i) + " renormalized from norm " +
                              fmt(norm));
      g /= norm;
    }
    data.scheme.directions.push_back(g);
  }
  data.scheme.validate();

  data.dwi = read_volume(dir / manifest.dwi_path);
  if (data.dwi.dims != manifest.dims) {
    throw InputError("dimension mismatch between manifest and dwi volume");
  }
  if (data.dwi.channels != static_cast<int>(manifest.gradients.size())) {
    throw InputError("dwi channel count does not match the gradient table");
  }
  data.b0 = read_volume(dir / manifest.b0_path);
  if (data.b0.dims != manifest.dims) {
    throw InputError("dimension mismatch between manifest and b0 volume");
  }
  if (data.b0.channels != manifest.n_b0) {
    throw InputError("b0 channel count does not match n_b0");
  }

  const int n = data.grid.num_voxels();
  if (!manifest.mask_path.empty()) {
    const Volume mask = read_volume(dir / manifest.mask_path);
    if (mask.dims != manifest.dims || mask.channels != 1) {
      throw InputError("dimension mismatch between manifest and mask volume");
    }
    for (int v = 0; v < n; ++v) {
      if (mask.data[v] > 0.5f) data.mask.push_back(v);
    }
  } else {
    data.mask.resize(n);
    for (int v = 0; v < n; ++v) data.mask[v] = v;
  }

  if (!manifest.truth_path.empty()) {
    auto [field, counts] = read_field(dir / manifest.truth_path, data.grid);
    data.truth = std::move(field);
    data.truth_counts = std::move(counts);
  }
  return data;
}

void write_dataset(const fs::path& dir, const Dataset& data, const PhantomSpec& spec) {
  fs::create_directories(dir);
  const int n = data.grid.num_voxels();
  const int m = data.scheme.size();

  Volume dwi;
  dwi.dims = data.grid.dims;
  dwi.channels = m;
  dwi.data.resize(static_cast<size_t>(n) * m);
  Volume b0;
  b0.dims = data.grid.dims;
  b0.channels = data.scheme.n_b0;
  b0.data.resize(static_cast<size_t>(n) * data.scheme.n_b0);
  for (int v = 0; v < n; ++v) {
    const Eigen::Vector3i idx = data.grid.unlinear(v);
    for (int c = 0; c < m; ++c) {
      dwi.at(idx[0], idx[1], idx[2], c) = static_cast<float>(data.dwi[v][c]);
    }
    for (int c = 0; c < data.scheme.n_b0; ++c) {
      b0.at(idx[0], idx[1], idx[2], c) = static_cast<float>(data.b0[v][c]);
    }
  }
  write_volume(dir / "dwi.vol", dwi);
  write_volume(dir / "b0.vol", b0);
  write_field(dir / "truth.txt", data.truth, data.grid);

  DatasetManifest manifest;
  manifest.dims = data.grid.dims;
  manifest.voxel_size = data.grid.voxel_size;
  manifest.origin = data.grid.origin;
  manifest.b_value = data.scheme.b_value;
  manifest.n_b0 = data.scheme.n_b0;
  manifest.gradients = data.scheme.directions;
  manifest.dwi_path = "dwi.vol";
  manifest.b0_path = "b0.vol";
  manifest.truth_path = "truth.txt";
  (void)spec;
  write_manifest(dir / "manifest.json", manifest);
}

void write_field(const fs::path& path, const DirectionField& field, const VoxelGrid& grid) {
  std::map<int, std::vector<const FieldEntry*>> by_voxel;
  for (const FieldEntry& e : field.entries) by_voxel[e.linear_voxel].push_back(&e);
  for (int v : field.isotropic_voxels) by_voxel.try_emplace(v);

  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out << "DISTFLD 1\n";
  out << "dims " << grid.dims[0] << " " << grid.dims[1] << " " << grid.dims[2] << "\n";
  out << "voxels " << by_voxel.size() << "\n";
  for (const auto& [v, entries] : by_voxel) {
    const Eigen::Vector3i idx = grid.unlinear(v);
    out << "v " << idx[0] << " " << idx[1] << " " << idx[2] << " " << entries.size() << "\n";
    for (const FieldEntry* e : entries) {
      out << "a " << fmt(e->axis[0]) << " " << fmt(e->axis[1]) << " " << fmt(e->axis[2]) << "\n";
    }
  }
}

std::pair<DirectionField, std::vector<int>> read_field(const fs::path& path,
                                                       const VoxelGrid& grid) {
  TokenReader reader(path);
  reader.expect("DISTFLD");
  reader.expect("1");
  reader.expect("dims");
  for (int a = 0; a < 3; ++a) {
    if (reader.next_int() != grid.dims[a]) {
      throw InputError(path.string() + ": field dims do not match the manifest grid");
    }
  }
  reader.expect("voxels");
  const long count = reader.next_int();

  DirectionField field;
  std::vector<int> counts(grid.num_voxels(), 0);
  for (long r = 0; r < count; ++r) {
    reader.expect("v");
    Eigen::Vector3i idx;
    idx[0] = static_cast<int>(reader.next_int());
    idx[1] = static_cast<int>(reader.next_int());
    idx[2] = static_cast<int>(reader.next_int());
    if (!grid.contains(idx)) throw InputError(path.string() + ": voxel index out of range");
    const long k = reader.next_int();
    const int linear = grid.linear(idx);
    counts[linear] = static_cast<int>(k);
    if (k == 0) field.isotropic_voxels.push_back(linear);
    for (long i = 0; i < k; ++i) {
      reader.expect("a");
      const double x = reader.next_double();
      const double y = reader.next_double();
      const double z = reader.next_double();
      FieldEntry e;
      e.pos = grid.center(idx);
      e.voxel = idx;
      e.linear_voxel = linear;
      e.axis = Axis(x, y, z);
      field.entries.push_back(e);
    }
  }
  return {std::move(field), std::move(counts)};
}

void write_estimates(const fs::path& path, const std::vector<VoxelEstimate>& estimates,
                     const VoxelGrid& grid) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out << "DISTEST 1\n";
  out << "dims " << grid.dims[0] << " " << grid.dims[1] << " " << grid.dims[2] << "\n";
  out << "voxels " << estimates.size() << "\n";
  for (const VoxelEstimate& e : estimates) {
    int flags = 0;
    for (const FitRecord& r : e.trace.records) {
      if (!r.converged) flags |= 1;
    }
    out << "v " << e.voxel[0] << " " << e.voxel[1] << " " << e.voxel[2] << " "
        << e.model.num_directions() << " " << fmt(e.fa_screen) << " "
        << fmt(e.model.isotropic_tau) << " " << flags << "\n";
    for (const TensorComponent& c : e.model.components) {
      out << "d " << fmt(c.tau) << " " << fmt(c.alpha) << " " << fmt(c.axis[0]) << " "
          << fmt(c.axis[1]) << " " << fmt(c.axis[2]) << "\n";
    }
  }
}

std::vector<VoxelEstimate> read_estimates(const fs::path& path, const VoxelGrid& grid) {
  TokenReader reader(path);
  reader.expect("DISTEST");
  reader.expect("1");
  reader.expect("dims");
  for (int a = 0; a < 3; ++a) {
    if (reader.next_int() != grid.dims[a]) {
      throw InputError(path.string() + ": estimate dims do not match the manifest grid");
    }
  }
  reader.expect("voxels");
  const long count = reader.next_int();
  std::vector<VoxelEstimate> out;
  out.reserve(count);
  for (long r = 0; r < count; ++r) {
    reader.expect("v");
    VoxelEstimate e;
    e.voxel[0] = static_cast<int>(reader.next_int());
    e.voxel[1] = static_cast<int>(reader.next_int());
    e.voxel[2] = static_cast<int>(reader.next_int());
    if (!grid.contains(e.voxel)) throw InputError(path.string() + ": voxel index out of range");
    e.pos = grid.center(e.voxel);
    const long j = reader.next_int();
    e.fa_screen = reader.next_double();
    e.model.isotropic_tau = reader.next_double();
    reader.next_int();  // flags; trace itself is not serialized
    for (long d = 0; d < j; ++d) {
      reader.expect("d");
      TensorComponent c;
      c.tau = reader.next_double();
      c.alpha = reader.next_double();
      const double x = reader.next_double();
      const double y = reader.next_double();
      const double z = reader.next_double();
      c.axis = Axis(x, y, z);
      e.model.components.push_back(c);
    }
    e.trace.chosen = e.model.num_directions();
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

StopReason parse_reason(const std::string& s) {
  if (s == "out_of_volume") return StopReason::out_of_volume;
  if (s == "gate_fail") return StopReason::gate_fail;
  if (s == "isotropic") return StopReason::isotropic;
  if (s == "step_cap") return StopReason::step_cap;
  throw InputError("unknown termination reason '" + s + "'");
}

}  // namespace

void write_tracts(const fs::path& path, const std::vector<Tract>& tracts) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out << "DISTTRK 1\n";
  out << "tracts " << tracts.size() << "\n";
  for (const Tract& t : tracts) {
    out << "t " << t.seed[0] << " " << t.seed[1] << " " << t.seed[2] << " " << t.points.size()
        << " " << to_string(t.begin_reason) << " " << to_string(t.end_reason) << "\n";
    for (const Vec3& p : t.points) {
      out << "p " << fmt(p[0]) << " " << fmt(p[1]) << " " << fmt(p[2]) << "\n";
    }
    const auto rgb = tract_rgb(t);
    for (size_t i = 0; i < t.directions.size(); ++i) {
      out << "s " << fmt(t.directions[i][0]) << " " << fmt(t.directions[i][1]) << " "
          << fmt(t.directions[i][2]) << " " << fmt(rgb[i][0]) << " " << fmt(rgb[i][1]) << " "
          << fmt(rgb[i][2]) << "\n";
    }
  }
}

std::vector<Tract> read_tracts(const fs::path& path) {
  TokenReader reader(path);
  reader.expect("DISTTRK");
  reader.expect("1");
  reader.expect("tracts");
  const long count = reader.next_int();
  std::vector<Tract> out;
  out.reserve(count);
  for (long r = 0; r < count; ++r) {
    reader.expect("t");
    Tract t;
    t.seed[0] = static_cast<int>(reader.next_int());
    t.seed[1] = static_cast<int>(reader.next_int());
    t.seed[2] = static_cast<int>(reader.next_int());
    const long npoints = reader.next_int();
    t.begin_reason = parse_reason(reader.next());
    t.end_reason = parse_reason(reader.next());
    for (long i = 0; i < npoints; ++i) {
      reader.expect("p");
      const double x = reader.next_double();
      const double y = reader.next_double();
      const double z = reader.next_double();
      t.points.emplace_back(x, y, z);
    }
    for (long i = 0; i + 1 < npoints; ++i) {
      reader.expect("s");
      const double x = reader.next_double();
      const double y = reader.next_double();
      const double z = reader.next_double();
      t.directions.emplace_back(Vec3(x, y, z));
      reader.next_double();
      reader.next_double();
      reader.next_double();
    }
    out.push_back(std::move(t));
  }
  return out;
}

void write_eval_report(const fs::path& path, const EvalReport& report) {
  json j;
  json confusion = json::array();
  for (const auto& row : report.confusion) {
    confusion.push_back({row[0], row[1], row[2], row[3], row[4]});
  }
  j["confusion_true_by_estimated"] = std::move(confusion);
  j["voxels"] = report.voxels;
  j["matched_directions"] = report.matched_errors_deg.size();
  j["mean_error_deg"] = report.mean_error_deg;
  j["median_error_deg"] = report.median_error_deg;
  j["misses"] = report.misses;
  j["extras"] = report.extras;
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
}

PlaneSpec parse_plane(const std::string& text) {
  if (text.size() < 3 || text[1] != '=') throw InputError("plane spec must look like z=12");
  PlaneSpec plane;
  switch (text[0]) {
    case 'x': plane.axis = 0; break;
    case 'y': plane.axis = 1; break;
    case 'z': plane.axis = 2; break;
    default: throw InputError("plane axis must be x, y or z");
  }
  plane.index = static_cast<int>(parse_double(text.substr(2)));
  return plane;
}

void emit_plot_directions(const fs::path& path, const DirectionField& field,
                          const VoxelGrid& grid, const PlaneSpec& plane) {
  if (plane.index < 0 || plane.index >= grid.dims[plane.axis]) {
    throw std::invalid_argument("emit_plot_directions: plane outside the volume");
  }
  const int a0 = (plane.axis + 1) % 3;
  const int a1 = (plane.axis + 2) % 3;
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");

  std::map<int, int> cluster_counter;
  for (const FieldEntry& e : field.entries) {
    const int cluster = cluster_counter[e.linear_voxel]++;
    if (e.voxel[plane.axis] != plane.index) continue;
    out << fmt(e.pos[a0]) << "\t" << fmt(e.pos[a1]) << "\t" << fmt(e.axis[a0]) << "\t"
        << fmt(e.axis[a1]) << "\t" << cluster << "\n";
  }
}

void emit_plot_tracts(const fs::path& path, const std::vector<Tract>& tracts) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  for (size_t id = 0; id < tracts.size(); ++id) {
    const Tract& t = tracts[id];
    const auto rgb = tract_rgb(t);
    for (size_t i = 0; i + 1 < t.points.size(); ++i) {
      out << id << "\t" << fmt(t.points[i][0]) << "\t" << fmt(t.points[i][1]) << "\t"
          << fmt(t.points[i][2]) << "\t" << fmt(t.points[i + 1][0]) << "\t"
          << fmt(t.points[i + 1][1]) << "\t" << fmt(t.points[i + 1][2]) << "\t" << fmt(rgb[i][0])
          << "\t" << fmt(rgb[i][1]) << "\t" << fmt(rgb[i][2]) << "\n";
    }
  }
}

PipelineStage parse_stage(const std::string& text) {
  if (text == "sigma") return PipelineStage::sigma;
  if (text == "fit") return PipelineStage::fit;
  if (text == "smooth") return PipelineStage::smooth;
  if (text == "track") return PipelineStage::track;
  if (text == "eval") return PipelineStage::eval;
  if (text == "all") return PipelineStage::all;
  throw InputError("unknown stage '" + text + "'");
}

namespace {

CvMode parse_cv_mode(const std::string& text) {
  if (text == "none") return CvMode::none;
  if (text == "ocv") return CvMode::ocv;
  if (text == "mcv") return CvMode::mcv;
  if (text == "tcv") return CvMode::tcv;
  throw InputError("unknown cv mode '" + text + "'");
}

const char* cv_mode_name(CvMode mode) {
  switch (mode) {
    case CvMode::none: return "none";
    case CvMode::ocv: return "ocv";
    case CvMode::mcv: return "mcv";
    case CvMode::tcv: return "tcv";
  }
  return "none";
}

const char* stage_name(PipelineStage stage) {
  switch (stage) {
    case PipelineStage::sigma: return "sigma";
    case PipelineStage::fit: return "fit";
    case PipelineStage::smooth: return "smooth";
    case PipelineStage::track: return "track";
    case PipelineStage::eval: return "eval";
    case PipelineStage::all: return "all";
  }
  return "all";
}

json config_to_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["longest"] = c.longest;
  j["stage"] = stage_name(c.stage);
  j["fit"] = {{"grid_level", c.fit.grid_level},
              {"alpha_tilde_b", c.fit.alpha_tilde_b},
              {"i_max", c.fit.i_max},
              {"fa_threshold", c.fit.fa_threshold},
              {"merge_angle_deg", c.fit.merge_angle_deg},
              {"grad_tol", c.fit.grad_tol},
              {"max_iterations", c.fit.max_iterations},
              {"support_rel_threshold", c.fit.support_rel_threshold}};
  j["smoothing"] = {{"h", c.smoothing.h},
                    {"cv", cv_mode_name(c.smoothing.cv)},
                    {"h_grid", c.smoothing.h_grid},
                    {"weight_threshold", c.smoothing.weight_threshold},
                    {"k_max", c.smoothing.k_max},
                    {"silhouette_floor", c.smoothing.silhouette_floor}};
  j["tracking"] = {{"angle_gate_deg", c.tracking.angle_gate * 180.0 / std::numbers::pi},
                   {"max_skip", c.tracking.max_skip},
                   {"min_tract_len_mm", c.tracking.min_tract_len_mm},
                   {"step_cap", c.tracking.step_cap}};
  return j;
}

}  // namespace

PipelineConfig read_config(const fs::path& path, PipelineConfig base) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InputError("config parse error in " + path.string() + ": " + e.what());
  }
  try {
    base.seed = j.value("seed", base.seed);
    base.threads = j.value("threads", base.threads);
    base.longest = j.value("longest", base.longest);
    if (j.contains("stage")) base.stage = parse_stage(j["stage"].get<std::string>());
    if (j.contains("fit")) {
      const json& f = j["fit"];
      base.fit.grid_level = f.value("grid_level", base.fit.grid_level);
      base.fit.alpha_tilde_b = f.value("alpha_tilde_b", base.fit.alpha_tilde_b);
      base.fit.i_max = f.value("i_max", base.fit.i_max);
      base.fit.fa_threshold = f.value("fa_threshold", base.fit.fa_threshold);
      base.fit.merge_angle_deg = f.value("merge_angle_deg", base.fit.merge_angle_deg);
      base.fit.grad_tol = f.value("grad_tol", base.fit.grad_tol);
      base.fit.max_iterations = f.value("max_iterations", base.fit.max_iterations);
      base.fit.support_rel_threshold =
          f.value("support_rel_threshold", base.fit.support_rel_threshold);
    }
    if (j.contains("smoothing")) {
      const json& s = j["smoothing"];
      base.smoothing.h = s.value("h", base.smoothing.h);
      if (s.contains("cv")) base.smoothing.cv = parse_cv_mode(s["cv"].get<std::string>());
      if (s.contains("h_grid")) {
        base.smoothing.h_grid = s["h_grid"].get<std::vector<double>>();
      }
      base.smoothing.weight_threshold =
          s.value("weight_threshold", base.smoothing.weight_threshold);
      base.smoothing.k_max = s.value("k_max", base.smoothing.k_max);
      base.smoothing.silhouette_floor =
          s.value("silhouette_floor", base.smoothing.silhouette_floor);
    }
    if (j.contains("tracking")) {
      const json& t = j["tracking"];
      if (t.contains("angle_gate_deg")) {
        base.tracking.angle_gate = t["angle_gate_deg"].get<double>() * std::numbers::pi / 180.0;
      }
      base.tracking.max_skip = t.value("max_skip", base.tracking.max_skip);
      base.tracking.min_tract_len_mm =
          t.value("min_tract_len_mm", base.tracking.min_tract_len_mm);
      base.tracking.step_cap = t.value("step_cap", base.tracking.step_cap);
    }
  } catch (const json::exception& e) {
    throw InputError("config field error in " + path.string() + ": " + e.what());
  }
  return base;
}

namespace {

std::vector<double> default_h_grid(const VoxelGrid& grid) {
  const double vs = grid.voxel_size.mean();
  const double lo = 0.5 * vs, hi = 4.0 * vs;
  std::vector<double> h(8);
  for (int i = 0; i < 8; ++i) {
    h[i] = lo * std::pow(hi / lo, i / 7.0);
  }
  return h;
}

}  // namespace

PipelineResult run_pipeline(const fs::path& manifest_path, const PipelineConfig& config,
                            const fs::path& out_dir) {
  fs::create_directories(out_dir);
  PipelineResult result;
  std::vector<fs::path> created;
  auto track_artifact = [&](const fs::path& p) {
    created.push_back(p);
    result.artifacts.push_back(p);
    return p;
  };
  auto cleanup = [&]() {
    for (const fs::path& p : created) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  };

  std::string stage = "load";
  try {
    const LoadedDataset data = read_dataset(manifest_path);
    const int n = data.grid.num_voxels();

    // --- sigma: per-voxel (S0, sigma) from the b0 replicates, pooled median
    stage = "sigma";
    std::vector<double> s0_hat(n, 0.0), sigma_hat(n, 0.0);
    std::vector<double> masked_sigmas;
    for (int v : data.mask) {
      const Eigen::Vector3i idx = data.grid.unlinear(v);
      std::vector<double> reps(data.b0.channels);
      for (int c = 0; c < data.b0.channels; ++c) {
        reps[c] = data.b0.at(idx[0], idx[1], idx[2], c);
      }
      const auto [s0, sg] = estimate_s0_sigma(reps);
      s0_hat[v] = s0;
      sigma_hat[v] = sg;
      masked_sigmas.push_back(sg);
    }
    result.pooled_sigma = pool_sigma(masked_sigmas);
    {
      Volume vol;
      vol.dims = data.grid.dims;
      vol.channels = 2;
      vol.data.resize(static_cast<size_t>(n) * 2);
      for (int v = 0; v < n; ++v) {
        const Eigen::Vector3i idx = data.grid.unlinear(v);
        vol.at(idx[0], idx[1], idx[2], 0) = static_cast<float>(s0_hat[v]);
        vol.at(idx[0], idx[1], idx[2], 1) = static_cast<float>(sigma_hat[v]);
      }
      write_volume(track_artifact(out_dir / "s0_sigma.vol"), vol);
    }
    if (config.stage == PipelineStage::sigma) return result;

    // --- fit: voxel-wise estimation over the mask
    stage = "fit";
    const std::vector<Axis> grid_axes = icosphere_axes(config.fit.grid_level);
    std::vector<VoxelEstimate> estimates(data.mask.size());
    parallel_for(static_cast<int>(data.mask.size()), config.threads, [&](int i) {
      const int v = data.mask[i];
      const Eigen::Vector3i idx = data.grid.unlinear(v);
      VoxelSignal voxel;
      voxel.intensities.resize(data.scheme.size());
      for (int c = 0; c < data.scheme.size(); ++c) {
        voxel.intensities[c] = data.dwi.at(idx[0], idx[1], idx[2], c);
      }
      voxel.s0 = std::max(s0_hat[v], 1e-6);
      voxel.sigma = result.pooled_sigma;
      voxel.voxel = idx;
      voxel.pos = data.grid.center(idx);
      estimates[i] = estimate_voxel(voxel, data.scheme, config.fit, grid_axes);
    });
    result.fitted_voxels = static_cast<int>(estimates.size());
    write_estimates(track_artifact(out_dir / "estimates.txt"), estimates, data.grid);

    DirectionField voxelwise;
    std::vector<int> est_counts(n, 0);
    for (const VoxelEstimate& e : estimates) {
      const int linear = data.grid.linear(e.voxel);
      est_counts[linear] = e.model.num_directions();
      if (e.model.components.empty()) {
        voxelwise.isotropic_voxels.push_back(linear);
        continue;
      }
      for (const TensorComponent& c : e.model.components) {
        FieldEntry entry;
        entry.pos = e.pos;
        entry.voxel = e.voxel;
        entry.linear_voxel = linear;
        entry.axis = c.axis;
        entry.source = EntrySource::voxelwise;
        voxelwise.entries.push_back(entry);
      }
    }
    write_field(track_artifact(out_dir / "field_voxelwise.txt"), voxelwise, data.grid);
    if (config.stage == PipelineStage::fit) return result;

    // --- smooth
    stage = "smooth";
    SmoothingConfig smoothing = config.smoothing;
    if (smoothing.h_grid.empty()) smoothing.h_grid = default_h_grid(data.grid);
    if (smoothing.cv != CvMode::none && voxelwise.by_voxel().size() >= 2) {
      const CvResult cv = cv_bandwidth(voxelwise, smoothing.h_grid, smoothing.cv, smoothing);
      smoothing.h = cv.h;
      result.cv_h = cv.h;
    } else {
      result.cv_h = smoothing.h;
    }
    const DirectionField smoothed = smooth_field(voxelwise, smoothing);
    std::vector<int> smoothed_counts(n, 0);
    for (const FieldEntry& e : smoothed.entries) smoothed_counts[e.linear_voxel]++;
    write_field(track_artifact(out_dir / "field_smoothed.txt"), smoothed, data.grid);
    if (config.stage == PipelineStage::smooth) return result;

    // --- track
    stage = "track";
    std::vector<Tract> tracts = track_all(smoothed, data.grid, config.tracking);
    if (config.longest > 0 && static_cast<int>(tracts.size()) > config.longest) {
      tracts.resize(config.longest);
    }
    result.tract_count = static_cast<int>(tracts.size());
    write_tracts(track_artifact(out_dir / "tracts.txt"), tracts);
    emit_plot_tracts(track_artifact(out_dir / "plot_tracts.tsv"), tracts);
    if (config.stage == PipelineStage::track) return result;

    // --- eval + plot data
    stage = "eval";
    if (data.truth.has_value()) {
      const EvalReport report =
          evaluate_field(smoothed, smoothed_counts, *data.truth, data.truth_counts, data.grid);
      write_eval_report(track_artifact(out_dir / "eval.json"), report);
    }
    PlaneSpec plane;
    plane.axis = 2;
    plane.index = data.grid.dims[2] / 2;
    emit_plot_directions(track_artifact(out_dir / "plot_directions.tsv"), smoothed, data.grid,
                         plane);

    stage = "log";
    json log;
    log["manifest"] = manifest_path.string();
    log["config"] = config_to_json(config);
    log["pooled_sigma"] = result.pooled_sigma;
    log["cv_h"] = result.cv_h;
    log["fitted_voxels"] = result.fitted_voxels;
    log["tract_count"] = result.tract_count;
    log["warnings"] = data.warnings;
    std::ofstream log_out(track_artifact(out_dir / "run_log.json"));
    log_out << log.dump(2) << "\n";
    return result;
  } catch (const InputError& e) {
    cleanup();
    throw InputError("stage " + stage + ": " + e.what());
  } catch (const ConvergenceError& e) {
    cleanup();
    throw ConvergenceError("stage " + stage + ": " + e.what(), e.last_iterate, e.iterations);
  } catch (const std::invalid_argument& e) {
    cleanup();
    throw std::invalid_argument("stage " + stage + ": " + e.what());
  } catch (const std::exception& e) {
    cleanup();
    throw std::runtime_error("stage " + stage + ": " + e.what());
  }
}

}  // namespace dist
