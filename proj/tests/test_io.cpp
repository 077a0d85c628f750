#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dist/io.hpp"
#include "test_util.hpp"

using namespace dist;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dist_io_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static inline int counter = 0;
};

Volume small_volume() {
  Volume v;
  v.dims = Eigen::Vector3i(3, 2, 2);
  v.channels = 4;
  v.data.resize(3 * 2 * 2 * 4);
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = 0.5f * static_cast<float>(i) - 3.0f;
  return v;
}

}  // namespace

TEST_SUITE_BEGIN("io");

TEST_CASE("volume round trip and corruption") {
  TempDir tmp;
  const Volume v = small_volume();
  const fs::path p = tmp.path / "vol.vol";
  write_volume(p, v);

  SUBCASE("round trip is exact") {
    const Volume r = read_volume(p);
    CHECK(r.dims == v.dims);
    CHECK(r.channels == v.channels);
    CHECK(r.data == v.data);
  }
  SUBCASE("bad magic is rejected") {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("WRONGMAG", 8);
    f.close();
    CHECK_THROWS_WITH_AS(read_volume(p), doctest::Contains("bad magic"), InputError);
  }
  SUBCASE("payload corruption fails the checksum") {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(32 + 11);
    const char junk = 0x5a;
    f.write(&junk, 1);
    f.close();
    CHECK_THROWS_WITH_AS(read_volume(p), doctest::Contains("checksum"), InputError);
  }
  SUBCASE("truncated payload is a distinct error") {
    fs::resize_file(p, fs::file_size(p) - 8);
    CHECK_THROWS_WITH_AS(read_volume(p), doctest::Contains("shorter"), InputError);
  }
}

TEST_CASE("dataset write and read") {
  TempDir tmp;
  const PhantomSpec spec = make_phantom("P3", 5);
  const Dataset data = generate(spec);
  write_dataset(tmp.path, data, spec);

  SUBCASE("round trip preserves intensities and truth") {
    const LoadedDataset loaded = read_dataset(tmp.path / "manifest.json");
    CHECK(loaded.grid.dims == data.grid.dims);
    CHECK(loaded.scheme.size() == data.scheme.size());
    CHECK(loaded.warnings.empty());
    for (int v : {0, 100, 300}) {
      const Eigen::Vector3i idx = loaded.grid.unlinear(v);
      for (int c = 0; c < loaded.scheme.size(); ++c) {
        CHECK(loaded.dwi.at(idx[0], idx[1], idx[2], c) ==
              static_cast<float>(data.dwi[v][c]));
      }
    }
    REQUIRE(loaded.truth.has_value());
    CHECK(loaded.truth->entries.size() == data.truth.entries.size());
    CHECK(loaded.truth_counts.size() == static_cast<size_t>(data.grid.num_voxels()));
    CHECK(loaded.mask.size() == static_cast<size_t>(data.grid.num_voxels()));
  }

  SUBCASE("dimension mismatch is a distinct error") {
    DatasetManifest manifest = read_manifest(tmp.path / "manifest.json");
    manifest.dims[0] += 1;
    write_manifest(tmp.path / "manifest.json", manifest);
    CHECK_THROWS_WITH_AS(read_dataset(tmp.path / "manifest.json"),
                         doctest::Contains("dimension mismatch"), InputError);
  }

  SUBCASE("slightly non-unit gradient is renormalized with a warning") {
    DatasetManifest manifest = read_manifest(tmp.path / "manifest.json");
    manifest.gradients[4] *= 1.0 - 4e-7;
    write_manifest(tmp.path / "manifest.json", manifest);
    const LoadedDataset loaded = read_dataset(tmp.path / "manifest.json");
    REQUIRE(loaded.warnings.size() == 1);
    CHECK(loaded.warnings[0].find("renormalized") != std::string::npos);
    CHECK(std::abs(loaded.scheme.directions[4].norm() - 1.0) < 1e-12);
  }

  SUBCASE("badly non-unit gradient is rejected") {
    DatasetManifest manifest = read_manifest(tmp.path / "manifest.json");
    manifest.gradients[4] *= 0.9;
    write_manifest(tmp.path / "manifest.json", manifest);
    CHECK_THROWS_WITH_AS(read_dataset(tmp.path / "manifest.json"),
                         doctest::Contains("not unit norm"), InputError);
  }
}

TEST_CASE("field file round trip") {
  TempDir tmp;
  VoxelGrid grid;
  grid.dims = Eigen::Vector3i(4, 3, 2);
  grid.voxel_size = Vec3(2, 2, 2);
  Rng rng(121);
  DirectionField field;
  for (int v = 0; v < grid.num_voxels(); v += 2) {
    const int count = static_cast<int>(rng.uniform_index(3));
    if (count == 0) {
      field.isotropic_voxels.push_back(v);
      continue;
    }
    for (int d = 0; d < count; ++d) {
      FieldEntry e;
      e.voxel = grid.unlinear(v);
      e.linear_voxel = v;
      e.pos = grid.center(e.voxel);
      e.axis = test::random_axis(rng);
      field.entries.push_back(e);
    }
  }
  const fs::path p = tmp.path / "field.txt";
  write_field(p, field, grid);
  const auto [loaded, counts] = read_field(p, grid);
  REQUIRE(loaded.entries.size() == field.entries.size());
  for (size_t i = 0; i < field.entries.size(); ++i) {
    CHECK(loaded.entries[i].axis == field.entries[i].axis);  // bit-exact after round trip
    CHECK(loaded.entries[i].linear_voxel == field.entries[i].linear_voxel);
  }
  CHECK(loaded.isotropic_voxels == field.isotropic_voxels);
}

TEST_CASE("estimate file round trip") {
  TempDir tmp;
  VoxelGrid grid;
  grid.dims = Eigen::Vector3i(3, 3, 1);
  Rng rng(122);
  std::vector<VoxelEstimate> estimates;
  for (int v = 0; v < 6; ++v) {
    VoxelEstimate e;
    e.voxel = grid.unlinear(v);
    e.pos = grid.center(e.voxel);
    e.fa_screen = rng.uniform(0.0, 1.0);
    e.model.isotropic_tau = rng.uniform(0.3, 0.8);
    const int j = static_cast<int>(rng.uniform_index(3));
    for (int d = 0; d < j; ++d) {
      TensorComponent c;
      c.tau = rng.uniform(0.1, 0.5);
      c.alpha = rng.uniform(1e-4, 3e-3);
      c.axis = test::random_axis(rng);
      e.model.components.push_back(c);
    }
    e.model.canonicalize();
    e.trace.chosen = j;
    estimates.push_back(e);
  }
  const fs::path p = tmp.path / "estimates.txt";
  write_estimates(p, estimates, grid);
  const auto loaded = read_estimates(p, grid);
  REQUIRE(loaded.size() == estimates.size());
  for (size_t i = 0; i < estimates.size(); ++i) {
    CHECK(loaded[i].fa_screen == estimates[i].fa_screen);
    CHECK(loaded[i].model.isotropic_tau == estimates[i].model.isotropic_tau);
    REQUIRE(loaded[i].model.num_directions() == estimates[i].model.num_directions());
    for (int d = 0; d < estimates[i].model.num_directions(); ++d) {
      CHECK(loaded[i].model.components[d].tau == estimates[i].model.components[d].tau);
      CHECK(loaded[i].model.components[d].alpha == estimates[i].model.components[d].alpha);
      CHECK(loaded[i].model.components[d].axis == estimates[i].model.components[d].axis);
    }
  }
}

TEST_CASE("tract file round trip") {
  TempDir tmp;
  Rng rng(123);
  std::vector<Tract> tracts;
  for (int t = 0; t < 4; ++t) {
    Tract tr;
    tr.seed = Eigen::Vector3i(t, 2 * t, 0);
    const int n = 2 + static_cast<int>(rng.uniform_index(5));
    for (int i = 0; i < n; ++i) {
      tr.points.emplace_back(rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 4));
    }
    for (int i = 0; i + 1 < n; ++i) tr.directions.push_back(test::random_axis(rng));
    tr.begin_reason = StopReason::gate_fail;
    tr.end_reason = StopReason::out_of_volume;
    tracts.push_back(tr);
  }
  const fs::path p = tmp.path / "tracts.txt";
  write_tracts(p, tracts);
  const auto loaded = read_tracts(p);
  REQUIRE(loaded.size() == tracts.size());
  for (size_t t = 0; t < tracts.size(); ++t) {
    CHECK(loaded[t].seed == tracts[t].seed);
    CHECK(loaded[t].begin_reason == tracts[t].begin_reason);
    CHECK(loaded[t].end_reason == tracts[t].end_reason);
    REQUIRE(loaded[t].points.size() == tracts[t].points.size());
    for (size_t i = 0; i < tracts[t].points.size(); ++i) {
      CHECK(loaded[t].points[i] == tracts[t].points[i]);
    }
    for (size_t i = 0; i < tracts[t].directions.size(); ++i) {
      CHECK(loaded[t].directions[i] == tracts[t].directions[i]);
    }
  }
}

TEST_CASE("plot emission") {
  TempDir tmp;
  VoxelGrid grid;
  grid.dims = Eigen::Vector3i(4, 4, 3);
  grid.voxel_size = Vec3(2, 2, 2);
  DirectionField field;
  for (int x = 0; x < 4; ++x) {
    FieldEntry e;
    e.voxel = Eigen::Vector3i(x, 1, 1);
    e.linear_voxel = grid.linear(e.voxel);
    e.pos = grid.center(e.voxel);
    e.axis = Axis(1, 0, 0);
    field.entries.push_back(e);
  }
  SUBCASE("single-fiber slab emits parallel segments") {
    const fs::path p = tmp.path / "plot.tsv";
    emit_plot_directions(p, field, grid, parse_plane("z=1"));
    std::ifstream in(p);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
      CHECK(line.find("\t1\t0\t0") != std::string::npos);  // dx=1 dy=0 cluster 0
      rows++;
    }
    CHECK(rows == 4);
  }
  SUBCASE("empty plane emits no rows") {
    const fs::path p = tmp.path / "plot2.tsv";
    emit_plot_directions(p, field, grid, parse_plane("z=2"));
    std::ifstream in(p);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) rows++;
    CHECK(rows == 0);
  }
  SUBCASE("plane outside the volume is an error") {
    CHECK_THROWS_AS(emit_plot_directions(tmp.path / "x.tsv", field, grid, parse_plane("z=7")),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_plane("w=1"), InputError);
  }
}

TEST_CASE("mask restricts the pipeline and empty regions stay valid") {
  TempDir tmp;
  const PhantomSpec spec = make_phantom("P3", 9);
  const Dataset data = generate(spec);
  write_dataset(tmp.path, data, spec);

  // mask covering only an isotropic corner of the volume
  Volume mask;
  mask.dims = data.grid.dims;
  mask.channels = 1;
  mask.data.assign(static_cast<size_t>(data.grid.num_voxels()), 0.0f);
  int masked = 0;
  for (int z = 0; z < data.grid.dims[2]; ++z) {
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 3; ++x) {
        mask.at(x, y, z, 0) = 1.0f;
        ++masked;
      }
    }
  }
  write_volume(tmp.path / "mask.vol", mask);
  DatasetManifest manifest = read_manifest(tmp.path / "manifest.json");
  manifest.mask_path = "mask.vol";
  write_manifest(tmp.path / "manifest.json", manifest);

  const LoadedDataset loaded = read_dataset(tmp.path / "manifest.json");
  CHECK(static_cast<int>(loaded.mask.size()) == masked);

  PipelineConfig cfg;
  cfg.smoothing.cv = CvMode::none;
  const PipelineResult result = run_pipeline(tmp.path / "manifest.json", cfg, tmp.path / "out");
  CHECK(result.fitted_voxels == masked);
  CHECK(result.tract_count == 0);  // nothing anisotropic inside the mask
  const auto tracts = read_tracts(tmp.path / "out" / "tracts.txt");
  CHECK(tracts.empty());
  CHECK(fs::exists(tmp.path / "out" / "eval.json"));
}

TEST_CASE("stage failures are tagged and partial artifacts removed") {
  TempDir tmp;
  const PhantomSpec spec = make_phantom("P6", 10);
  const Dataset data = generate(spec);
  write_dataset(tmp.path, data, spec);

  // estimates.txt pre-created as a directory makes the fit stage fail after
  // the sigma stage already wrote its artifact
  fs::create_directories(tmp.path / "out" / "estimates.txt");
  PipelineConfig cfg;
  CHECK_THROWS_WITH_AS(run_pipeline(tmp.path / "manifest.json", cfg, tmp.path / "out"),
                       doctest::Contains("stage fit"), InputError);
  CHECK_FALSE(fs::exists(tmp.path / "out" / "s0_sigma.vol"));
}

TEST_CASE("config file") {
  TempDir tmp;
  const fs::path p = tmp.path / "config.json";
  {
    std::ofstream out(p);
    out << R"({
      "seed": 99,
      "fit": {"grid_level": 1, "fa_threshold": 0.2},
      "smoothing": {"cv": "mcv", "h": 3.5},
      "tracking": {"angle_gate_deg": 45.0, "max_skip": 2},
      "longest": 900
    })";
  }
  const PipelineConfig cfg = read_config(p);
  CHECK(cfg.seed == 99);
  CHECK(cfg.fit.grid_level == 1);
  CHECK(cfg.fit.fa_threshold == 0.2);
  CHECK(cfg.fit.i_max == 4);  // untouched default
  CHECK(cfg.smoothing.cv == CvMode::mcv);
  CHECK(cfg.smoothing.h == 3.5);
  CHECK(cfg.tracking.angle_gate == doctest::Approx(45.0 * std::numbers::pi / 180.0));
  CHECK(cfg.tracking.max_skip == 2);
  CHECK(cfg.longest == 900);

  std::ofstream(tmp.path / "bad.json") << "{ not json";
  CHECK_THROWS_AS(read_config(tmp.path / "bad.json"), InputError);
}

TEST_SUITE_END();
