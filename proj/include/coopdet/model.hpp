#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "coopdet/hash.hpp"
#include "coopdet/rng.hpp"
#include "coopdet/tensor.hpp"

namespace coopdet {

enum class FusionVariant { kMeanPool, kGnnMean, kGnnMedian, kGnnSoftMedian };

inline const char* fusion_name(FusionVariant v) {
  switch (v) {
    case FusionVariant::kMeanPool: return "mean-pool";
    case FusionVariant::kGnnMean: return "gnn-mean";
    case FusionVariant::kGnnMedian: return "gnn-median";
    case FusionVariant::kGnnSoftMedian: return "gnn-softmedian";
  }
  return "?";
}

inline FusionVariant fusion_from_name(const std::string& s) {
  if (s == "mean-pool") return FusionVariant::kMeanPool;
  if (s == "gnn-mean") return FusionVariant::kGnnMean;
  if (s == "gnn-median") return FusionVariant::kGnnMedian;
  if (s == "gnn-softmedian") return FusionVariant::kGnnSoftMedian;
  throw ArgumentError("unknown fusion variant: " + s);
}

struct ArchConfig {
  int c_in = 2;
  int h_in = 32;
  int c_f = 16;
  int h_f = 16;
  int num_classes = 3;  // background class index == num_classes
  FusionVariant fusion = FusionVariant::kGnnMean;
  int gnn_rounds = 2;
  double softmed_temp = 0.1;
  double window_extent = 24.0;

  int head_channels() const { return num_classes + 1 + 4; }

  std::string canonical() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "cin=%d;hin=%d;cf=%d;hf=%d;k=%d;fusion=%s;rounds=%d;"
                  "temp=%.6f;extent=%.3f",
                  c_in, h_in, c_f, h_f, num_classes, fusion_name(fusion),
                  gnn_rounds, softmed_temp, window_extent);
    return buf;
  }

  std::uint64_t hash() const { return fnv1a64(canonical()); }

  bool operator==(const ArchConfig&) const = default;
};

// A flat named-tensor store. Order is fixed by the architecture so that
// optimizer state and checkpoints stay aligned.
struct ModelParams {
  ArchConfig arch;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::uint64_t arch_hash() const { return arch.hash(); }

  int index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    throw ArchitectureError("unknown parameter: " + name);
  }

  const Tensor& t(const std::string& name) const {
    return tensors[static_cast<std::size_t>(index(name))];
  }
  Tensor& t(const std::string& name) {
    return tensors[static_cast<std::size_t>(index(name))];
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.all_finite()) return false;
    return true;
  }
};

namespace detail {

inline void add_conv(ModelParams& p, const std::string& name, int co, int ci,
                     int k, Rng& rng, double bias_fill = 0.0) {
  Tensor w({co, ci, k, k});
  const double stddev = std::sqrt(2.0 / (ci * k * k));
  for (auto& x : w.v) x = rng.normal(0.0, stddev);
  p.names.push_back(name + ".w");
  p.tensors.push_back(std::move(w));
  p.names.push_back(name + ".b");
  p.tensors.push_back(Tensor::full({co}, bias_fill));
}

}  // namespace detail

inline ModelParams init_model(const ArchConfig& arch, std::uint64_t seed) {
  ModelParams p;
  p.arch = arch;
  Rng rng(mix64(seed, 0x90de1ULL));
  detail::add_conv(p, "enc.conv1", arch.c_f, arch.c_in, 3, rng);
  detail::add_conv(p, "enc.conv2", arch.c_f, arch.c_f, 3, rng);
  detail::add_conv(p, "enc.conv3", arch.c_f, arch.c_f, 3, rng);
  if (arch.fusion == FusionVariant::kMeanPool) {
    detail::add_conv(p, "fus.post1", arch.c_f, arch.c_f, 3, rng);
    detail::add_conv(p, "fus.post2", arch.c_f, arch.c_f, 3, rng);
  } else {
    detail::add_conv(p, "fus.msg", arch.c_f, 2 * arch.c_f, 3, rng);
    detail::add_conv(p, "fus.out", arch.c_f, arch.c_f, 3, rng);
  }
  detail::add_conv(p, "head.conv1", arch.c_f, arch.c_f, 3, rng);
  detail::add_conv(p, "head.conv2", arch.head_channels(), arch.c_f, 3, rng);
  // Start with a confident-background prior so early training is not swamped
  // by false positives.
  p.t("head.conv2.b")[static_cast<std::size_t>(arch.num_classes)] = 2.0;
  return p;
}

// --------------------------------------------------------------------------
// Checkpoint IO (versioned binary, refuses architecture mismatches)
// --------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointMagic = 0x504d4443u;  // "CDMP"
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void save_checkpoint(const ModelParams& p,
                            const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(f.good(), "save_checkpoint: cannot open " + path.string());
  auto put = [&f](const void* d, std::size_t n) {
    f.write(static_cast<const char*>(d), static_cast<std::streamsize>(n));
  };
  auto put_u32 = [&](std::uint32_t v) { put(&v, 4); };
  auto put_u16 = [&](std::uint16_t v) { put(&v, 2); };
  auto put_u64 = [&](std::uint64_t v) { put(&v, 8); };
  auto put_f64 = [&](double v) { put(&v, 8); };
  put_u32(kCheckpointMagic);
  put_u16(kCheckpointVersion);
  put_u64(p.arch_hash());
  put_u32(static_cast<std::uint32_t>(p.arch.c_in));
  put_u32(static_cast<std::uint32_t>(p.arch.h_in));
  put_u32(static_cast<std::uint32_t>(p.arch.c_f));
  put_u32(static_cast<std::uint32_t>(p.arch.h_f));
  put_u32(static_cast<std::uint32_t>(p.arch.num_classes));
  put_u32(static_cast<std::uint32_t>(p.arch.fusion));
  put_u32(static_cast<std::uint32_t>(p.arch.gnn_rounds));
  put_f64(p.arch.softmed_temp);
  put_f64(p.arch.window_extent);
  put_u32(static_cast<std::uint32_t>(p.tensors.size()));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const auto& name = p.names[i];
    put_u32(static_cast<std::uint32_t>(name.size()));
    put(name.data(), name.size());
    const auto& t = p.tensors[i];
    put_u32(static_cast<std::uint32_t>(t.dims.size()));
    for (int d : t.dims) put_u32(static_cast<std::uint32_t>(d));
    put(t.v.data(), t.v.size() * sizeof(double));
  }
  check(f.good(), "save_checkpoint: write failed");
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw LoadError("load_checkpoint: cannot open " + path.string());
  auto get = [&f](void* d, std::size_t n) {
    f.read(static_cast<char*>(d), static_cast<std::streamsize>(n));
    if (!f.good()) throw LoadError("load_checkpoint: truncated file");
  };
  auto get_u32 = [&] { std::uint32_t v; get(&v, 4); return v; };
  auto get_u16 = [&] { std::uint16_t v; get(&v, 2); return v; };
  auto get_u64 = [&] { std::uint64_t v; get(&v, 8); return v; };
  auto get_f64 = [&] { double v; get(&v, 8); return v; };
  if (get_u32() != kCheckpointMagic) throw LoadError("load_checkpoint: bad magic");
  const auto ver = get_u16();
  if (ver != kCheckpointVersion)
    throw LoadError("load_checkpoint: unsupported version " + std::to_string(ver));
  const std::uint64_t stored_hash = get_u64();
  ModelParams p;
  p.arch.c_in = static_cast<int>(get_u32());
  p.arch.h_in = static_cast<int>(get_u32());
  p.arch.c_f = static_cast<int>(get_u32());
  p.arch.h_f = static_cast<int>(get_u32());
  p.arch.num_classes = static_cast<int>(get_u32());
  p.arch.fusion = static_cast<FusionVariant>(get_u32());
  p.arch.gnn_rounds = static_cast<int>(get_u32());
  p.arch.softmed_temp = get_f64();
  p.arch.window_extent = get_f64();
  if (p.arch_hash() != stored_hash)
    throw LoadError("load_checkpoint: architecture hash mismatch");
  const auto n_tensors = get_u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const auto name_len = get_u32();
    std::string name(name_len, '\0');
    get(name.data(), name_len);
    const auto ndims = get_u32();
    std::vector<int> dims;
    for (std::uint32_t d = 0; d < ndims; ++d)
      dims.push_back(static_cast<int>(get_u32()));
    Tensor t(dims);
    get(t.v.data(), t.v.size() * sizeof(double));
    p.names.push_back(std::move(name));
    p.tensors.push_back(std::move(t));
  }
  return p;
}

}  // namespace coopdet
