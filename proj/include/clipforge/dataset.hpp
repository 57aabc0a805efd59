#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "clipforge/clip.hpp"

namespace clipforge::dataset {

/// Class order is fixed so that index 1 is the positive (Violence) class
/// everywhere: confusion matrices, thresholds, probabilities.
inline constexpr std::array<std::string_view, 2> kClasses = {"NonViolence", "Violence"};
inline constexpr int kNumClasses = static_cast<int>(kClasses.size());
inline constexpr int kPositiveClass = 1;

std::string_view class_name(int class_index);
int class_index(std::string_view name);
std::array<float, kNumClasses> one_hot(int class_index);

enum class Split { train, val, test };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct ManifestEntry {
  std::string clip_id;
  std::filesystem::path path;
  int label = 0;
  std::optional<Split> split;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct SkippedFile {
  std::filesystem::path path;
  std::string reason;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  std::vector<SkippedFile> skipped;

  std::vector<const ManifestEntry*> in_split(Split s) const;
};

inline constexpr std::array<double, 3> kDefaultFractions = {0.72, 0.08, 0.20};

bool is_video_extension(const std::filesystem::path& p);

/// One entry per video file directly inside <root>/<class name>/, in
/// lexicographic order. Non-video files are skipped and reported.
DatasetManifest build_manifest(const std::filesystem::path& root);

/// Stratified seeded split: per class, shuffle then take round(f0 * n)
/// for train, round(f1 * n) for val and the rest for test.
DatasetManifest split_manifest(const DatasetManifest& manifest,
                               std::array<double, 3> fractions, std::uint64_t seed);

/// JSON lines, one entry per line.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

// Clip archive layout (all integers little-endian):
//   0   char[4]  "CLPA"
//   4   u32      version (1)
//   8   u32      clip count N
//   12  u32[4]   shape (16, 64, 64, 3)
//   28  u8[N]    class index per clip
//   28+N         N clips of f32 little-endian, row-major (T, H, W, C)
inline constexpr std::uint32_t kArchiveVersion = 1;

struct LabeledClips {
  std::vector<ClipTensor> clips;
  std::vector<int> labels;
};

void write_archive(const std::vector<ClipTensor>& clips, const std::vector<int>& labels,
                   const std::filesystem::path& path);
LabeledClips read_archive(const std::filesystem::path& path);

/// Decodes every entry of `split` into a uniformly sampled clip, in
/// manifest order.
LabeledClips load_clips(const DatasetManifest& manifest, Split split);

}  // namespace clipforge::dataset
