#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "coopdet/hash.hpp"
#include "coopdet/render.hpp"
#include "coopdet/scene.hpp"

#include <nlohmann/json.hpp>

namespace coopdet {

static_assert(std::endian::native == std::endian::little,
              "record format assumes a little-endian host");

inline constexpr int kDatasetFormatVersion = 1;
inline constexpr std::uint32_t kRecordMagic = 0x31524443u;  // "CDR1"

// Desk-scale defaults (the reference corpus is 10x smaller than the full
// 50,000 / 10,000 split sizes).
inline constexpr int kDefaultTrainScenes = 5000;
inline constexpr int kDefaultValScenes = 1000;

// One generative record: everything needed to reproduce the scene, the agent
// poses, and (deterministically) every observation raster. Rasters are
// re-rendered on demand rather than stored.
struct SceneRecord {
  WorldScene scene;
  std::vector<AgentPose> poses;
  std::uint64_t render_seed = 0;
  int n_frames = 0;  // 0 = static scene; >= 2 = temporal sequence

  bool operator==(const SceneRecord& o) const {
    if (scene.scene_id != o.scene.scene_id || scene.rng_seed != o.scene.rng_seed ||
        scene.arena_size != o.scene.arena_size ||
        scene.objects.size() != o.scene.objects.size() ||
        poses.size() != o.poses.size() || render_seed != o.render_seed ||
        n_frames != o.n_frames)
      return false;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      const auto &a = scene.objects[i], &b = o.scene.objects[i];
      if (a.class_id != b.class_id || a.box.cx != b.box.cx ||
          a.box.cy != b.box.cy || a.box.w != b.box.w || a.box.h != b.box.h)
        return false;
    }
    for (std::size_t i = 0; i < poses.size(); ++i) {
      const auto &a = poses[i], &b = o.poses[i];
      if (a.position.x != b.position.x || a.position.y != b.position.y ||
          a.heading != b.heading || a.velocity.x != b.velocity.x ||
          a.velocity.y != b.velocity.y)
        return false;
    }
    return true;
  }
};

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  std::string split;
  std::string type = "scenes";  // or "sequences"
  int count = 0;
  int n_agents = 0;
  int n_frames = 0;
  std::uint64_t seed = 0;
  GenConfig gen;
  RenderConfig render;
  std::vector<std::pair<std::string, std::uint64_t>> records;  // file, checksum
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SceneRecord> records;

  int size() const { return static_cast<int>(records.size()); }

  ObservationRaster observation(int rec, int agent) const {
    const auto& r = records[static_cast<std::size_t>(rec)];
    return render_observation(r.scene, r.poses[static_cast<std::size_t>(agent)],
                              manifest.render,
                              mix64(r.render_seed, 0, static_cast<std::uint64_t>(agent)));
  }

  std::vector<ObservationRaster> observations(int rec, int n_agents) const {
    std::vector<ObservationRaster> out;
    for (int a = 0; a < n_agents; ++a) out.push_back(observation(rec, a));
    return out;
  }

  SequenceLog sequence(int rec) const {
    const auto& r = records[static_cast<std::size_t>(rec)];
    check(r.n_frames >= 2, "sequence: record is not a sequence");
    return advance_sequence(r.scene, r.poses, r.n_frames, r.render_seed,
                            manifest.render);
  }
};

// --------------------------------------------------------------------------
// Binary record serialization
// --------------------------------------------------------------------------

namespace detail {

struct ByteWriter {
  std::vector<std::uint8_t> buf;
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
  }
};

struct ByteReader {
  const std::uint8_t* p;
  const std::uint8_t* end;
  template <typename T>
  T get() {
    if (p + sizeof(T) > end) throw LoadError("record truncated");
    T v;
    std::memcpy(&v, p, sizeof(T));
    p += sizeof(T);
    return v;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_record(const SceneRecord& r) {
  detail::ByteWriter w;
  w.put<std::uint32_t>(kRecordMagic);
  w.put<std::uint16_t>(kDatasetFormatVersion);
  w.put<std::uint8_t>(r.n_frames > 0 ? 1 : 0);
  w.put<std::int64_t>(r.scene.scene_id);
  w.put<std::uint64_t>(r.scene.rng_seed);
  w.put<double>(r.scene.arena_size);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(r.scene.objects.size()));
  for (const auto& o : r.scene.objects) {
    w.put<std::int32_t>(o.class_id);
    w.put<double>(o.box.cx);
    w.put<double>(o.box.cy);
    w.put<double>(o.box.w);
    w.put<double>(o.box.h);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(r.poses.size()));
  for (const auto& p : r.poses) {
    w.put<double>(p.position.x);
    w.put<double>(p.position.y);
    w.put<double>(p.heading);
    w.put<double>(p.velocity.x);
    w.put<double>(p.velocity.y);
  }
  w.put<std::uint64_t>(r.render_seed);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(r.n_frames));
  return std::move(w.buf);
}

inline SceneRecord parse_record(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader rd{bytes.data(), bytes.data() + bytes.size()};
  if (rd.get<std::uint32_t>() != kRecordMagic)
    throw LoadError("record: bad magic");
  const auto ver = rd.get<std::uint16_t>();
  if (ver != kDatasetFormatVersion)
    throw LoadError("record: unsupported format version " + std::to_string(ver));
  rd.get<std::uint8_t>();  // type tag, implied by n_frames
  SceneRecord r;
  r.scene.scene_id = rd.get<std::int64_t>();
  r.scene.rng_seed = rd.get<std::uint64_t>();
  r.scene.arena_size = rd.get<double>();
  const auto n_obj = rd.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_obj; ++i) {
    GroundTruthBox o;
    o.class_id = rd.get<std::int32_t>();
    o.box.cx = rd.get<double>();
    o.box.cy = rd.get<double>();
    o.box.w = rd.get<double>();
    o.box.h = rd.get<double>();
    r.scene.objects.push_back(o);
  }
  const auto n_poses = rd.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_poses; ++i) {
    AgentPose p;
    p.position.x = rd.get<double>();
    p.position.y = rd.get<double>();
    p.heading = rd.get<double>();
    p.velocity.x = rd.get<double>();
    p.velocity.y = rd.get<double>();
    r.poses.push_back(p);
  }
  r.render_seed = rd.get<std::uint64_t>();
  r.n_frames = static_cast<int>(rd.get<std::uint32_t>());
  return r;
}

// --------------------------------------------------------------------------
// Manifest + directory IO
// --------------------------------------------------------------------------

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["split"] = m.split;
  j["type"] = m.type;
  j["count"] = m.count;
  j["n_agents"] = m.n_agents;
  j["n_frames"] = m.n_frames;
  j["seed"] = m.seed;
  j["gen"] = {{"min_objects", m.gen.min_objects},
              {"max_objects", m.gen.max_objects},
              {"size_range", m.gen.size_range},
              {"max_attempts", m.gen.max_attempts}};
  j["render"] = {{"raster_n", m.render.raster_n},
                 {"extent", m.render.extent},
                 {"sensing_radius", m.render.sensing_radius},
                 {"dropout", m.render.dropout},
                 {"noise", m.render.noise}};
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& [file, sum] : m.records)
    recs.push_back({{"file", file}, {"checksum", hex64(sum)}});
  j["records"] = recs;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kDatasetFormatVersion)
    throw LoadError("manifest: unsupported format version " +
                    std::to_string(m.format_version));
  m.split = j.at("split").get<std::string>();
  m.type = j.at("type").get<std::string>();
  m.count = j.at("count").get<int>();
  m.n_agents = j.at("n_agents").get<int>();
  m.n_frames = j.at("n_frames").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  const auto& gj = j.at("gen");
  m.gen.min_objects = gj.at("min_objects").get<int>();
  m.gen.max_objects = gj.at("max_objects").get<int>();
  m.gen.size_range = gj.at("size_range").get<std::array<std::array<double, 2>, kNumClasses>>();
  m.gen.max_attempts = gj.at("max_attempts").get<int>();
  const auto& rj = j.at("render");
  m.render.raster_n = rj.at("raster_n").get<int>();
  m.render.extent = rj.at("extent").get<double>();
  m.render.sensing_radius = rj.at("sensing_radius").get<double>();
  m.render.dropout = rj.at("dropout").get<double>();
  m.render.noise = rj.at("noise").get<double>();
  for (const auto& rec : j.at("records")) {
    const std::string hexsum = rec.at("checksum").get<std::string>();
    m.records.emplace_back(rec.at("file").get<std::string>(),
                           std::stoull(hexsum, nullptr, 16));
  }
  return m;
}

inline DatasetManifest write_dataset(const Dataset& ds,
                                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  DatasetManifest m = ds.manifest;
  m.records.clear();
  char name[32];
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    std::snprintf(name, sizeof(name), "scene_%06zu.bin", i);
    const auto bytes = serialize_record(ds.records[i]);
    std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
    check(f.good(), "write_dataset: cannot open " + (dir / name).string());
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    check(f.good(), "write_dataset: write failed");
    m.records.emplace_back(name, fnv1a64(bytes.data(), bytes.size()));
  }
  m.count = static_cast<int>(ds.records.size());
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  check(mf.good(), "write_dataset: cannot open manifest");
  mf << manifest_to_json(m).dump(2) << "\n";
  return m;
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf.good()) throw LoadError("read_dataset: missing manifest in " + dir.string());
  nlohmann::json j;
  try {
    mf >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("read_dataset: bad manifest: ") + e.what());
  }
  Dataset ds;
  ds.manifest = manifest_from_json(j);
  for (const auto& [file, sum] : ds.manifest.records) {
    std::ifstream f(dir / file, std::ios::binary);
    if (!f.good()) throw LoadError("read_dataset: missing record " + file);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (fnv1a64(bytes.data(), bytes.size()) != sum)
      throw LoadError("read_dataset: checksum mismatch for " + file);
    ds.records.push_back(parse_record(bytes));
  }
  return ds;
}

// --------------------------------------------------------------------------
// Generation front end
// --------------------------------------------------------------------------

struct DatasetSpec {
  std::string split = "train";
  int count = kDefaultTrainScenes;
  int n_agents = 6;
  std::uint64_t seed = 1;
  bool sequences = false;
  int n_frames = kDefaultSequenceFrames;
  GenConfig gen;
  RenderConfig render;
};

inline Dataset make_dataset(const DatasetSpec& spec) {
  Dataset ds;
  ds.manifest.split = spec.split;
  ds.manifest.type = spec.sequences ? "sequences" : "scenes";
  ds.manifest.count = spec.count;
  ds.manifest.n_agents = spec.n_agents;
  ds.manifest.n_frames = spec.sequences ? spec.n_frames : 0;
  ds.manifest.seed = spec.seed;
  ds.manifest.gen = spec.gen;
  ds.manifest.render = spec.render;
  const std::uint64_t split_seed = mix64(spec.seed, fnv1a64(spec.split));
  for (int i = 0; i < spec.count; ++i) {
    SceneRecord rec;
    const std::uint64_t s = mix64(split_seed, static_cast<std::uint64_t>(i));
    rec.scene = generate_scene(s, spec.gen);
    rec.scene.scene_id = i;
    rec.poses = sample_agent_poses(rec.scene, spec.n_agents, mix64(s, 1));
    if (spec.sequences) {
      assign_velocities(rec.poses, mix64(s, 2));
      rec.n_frames = spec.n_frames;
    }
    rec.render_seed = mix64(s, 3);
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace coopdet
