#include "clipforge/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "clipforge/binary_io.hpp"
#include "clipforge/media.hpp"
#include "clipforge/error.hpp"
#include "clipforge/rng.hpp"

namespace clipforge::dataset {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view class_name(int class_index) {
  if (class_index < 0 || class_index >= kNumClasses) {
    throw Error(Errc::bad_label, "class index " + std::to_string(class_index));
  }
  return kClasses[static_cast<std::size_t>(class_index)];
}

int class_index(std::string_view name) {
  for (int i = 0; i < kNumClasses; ++i) {
    if (kClasses[static_cast<std::size_t>(i)] == name) return i;
  }
  throw Error(Errc::bad_label, "unknown class '" + std::string(name) + "'");
}

std::array<float, kNumClasses> one_hot(int index) {
  class_name(index);
  std::array<float, kNumClasses> v{};
  v[static_cast<std::size_t>(index)] = 1.0f;
  return v;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw Error(Errc::invalid_argument, "unknown split '" + std::string(s) + "'");
}

std::vector<const ManifestEntry*> DatasetManifest::in_split(Split s) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == s) out.push_back(&e);
  }
  return out;
}

bool is_video_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  static const std::array<std::string_view, 11> kExts = {
      ".mp4", ".avi", ".mkv", ".mov", ".webm", ".mpg", ".mpeg", ".m4v", ".wmv", ".flv", ".3gp"};
  return std::find(kExts.begin(), kExts.end(), ext) != kExts.end();
}

DatasetManifest build_manifest(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error(Errc::missing_file, root.string());
  DatasetManifest manifest;
  for (int label = 0; label < kNumClasses; ++label) {
    const fs::path dir = root / std::string(kClasses[static_cast<std::size_t>(label)]);
    if (!fs::is_directory(dir)) throw Error(Errc::missing_class_dir, dir.string());
    std::vector<fs::path> files;
    for (const auto& de : fs::directory_iterator(dir)) {
      if (de.is_regular_file()) {
        files.push_back(de.path());
      } else {
        manifest.skipped.push_back({de.path(), "not a regular file"});
      }
    }
    std::sort(files.begin(), files.end());
    std::size_t usable = 0;
    for (const auto& f : files) {
      if (!is_video_extension(f)) {
        manifest.skipped.push_back({f, "not a video extension"});
        continue;
      }
      ManifestEntry e;
      e.clip_id = std::string(kClasses[static_cast<std::size_t>(label)]) + "/" +
                  f.filename().string();
      e.path = f;
      e.label = label;
      manifest.entries.push_back(std::move(e));
      ++usable;
    }
    if (usable == 0) throw Error(Errc::empty_class_dir, dir.string());
  }
  for (const auto& de : fs::directory_iterator(root)) {
    const auto name = de.path().filename().string();
    if (std::find(kClasses.begin(), kClasses.end(), name) == kClasses.end()) {
      manifest.skipped.push_back({de.path(), "not a class directory"});
    }
  }
  return manifest;
}

DatasetManifest split_manifest(const DatasetManifest& manifest, std::array<double, 3> fractions,
                               std::uint64_t seed) {
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9) {
    throw Error(Errc::invalid_argument, "split fractions must sum to 1");
  }
  for (double f : fractions) {
    if (f < 0.0) throw Error(Errc::invalid_argument, "split fractions must be nonnegative");
  }
  DatasetManifest out = manifest;
  out.seed = seed;
  Rng rng(seed);
  for (int label = 0; label < kNumClasses; ++label) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < out.entries.size(); ++i) {
      if (out.entries[i].label == label) members.push_back(i);
    }
    const std::size_t n = members.size();
    if (n < 5) {
      throw Error(Errc::too_few_samples, std::string(class_name(label)) + " has " +
                                             std::to_string(n) + " clips, need at least 5");
    }
    rng.shuffle(std::span<std::size_t>(members));
    const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(fractions[0] * n)));
    const auto n_val =
        std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
    for (std::size_t k = 0; k < n; ++k) {
      auto& e = out.entries[members[k]];
      e.split = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
    }
  }
  return out;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
  for (const auto& e : manifest.entries) {
    json j = {{"clip_id", e.clip_id},
              {"path", e.path.string()},
              {"label", e.label},
              {"class_name", class_name(e.label)},
              {"split", e.split ? json(to_string(*e.split)) : json(nullptr)},
              {"seed", manifest.seed}};
    out << j.dump() << '\n';
  }
  if (!out) throw Error(Errc::io_error, "write failed for " + path.string());
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, path.string());
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ManifestEntry e;
      e.clip_id = j.at("clip_id").get<std::string>();
      e.path = j.at("path").get<std::string>();
      e.label = j.at("label").get<int>();
      class_name(e.label);
      if (j.contains("split") && !j.at("split").is_null()) {
        e.split = parse_split(j.at("split").get<std::string>());
      }
      if (j.contains("seed")) m.seed = j.at("seed").get<std::uint64_t>();
      if (!seen.emplace(e.clip_id, lineno).second) {
        throw Error(Errc::invalid_argument, "duplicate clip_id " + e.clip_id);
      }
      m.entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw Error(Errc::invalid_argument,
                  path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

void write_archive(const std::vector<ClipTensor>& clips, const std::vector<int>& labels,
                   const fs::path& path) {
  if (clips.size() != labels.size()) {
    throw Error(Errc::length_mismatch, "clips and labels differ in length");
  }
  for (const auto& c : clips) check_clip_contract(c);
  for (int l : labels) class_name(l);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
  out.write("CLPA", 4);
  detail::put_u32(out, kArchiveVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(clips.size()));
  for (int d : {kSequenceLength, kImageHeight, kImageWidth, kChannels}) {
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (int l : labels) out.put(static_cast<char>(l));
  for (const auto& c : clips) detail::put_f32_array(out, c.data);
  if (!out) throw Error(Errc::io_error, "write failed for " + path.string());
}

LabeledClips read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::missing_file, path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "CLPA") {
    throw Error(Errc::bad_magic, path.string());
  }
  std::uint32_t version = 0, count = 0;
  std::uint32_t shape[4];
  if (!detail::get_u32(in, version)) throw Error(Errc::truncated_payload, "header");
  if (version != kArchiveVersion) {
    throw Error(Errc::version_mismatch, "archive version " + std::to_string(version));
  }
  if (!detail::get_u32(in, count)) throw Error(Errc::truncated_payload, "header");
  for (auto& d : shape) {
    if (!detail::get_u32(in, d)) throw Error(Errc::truncated_payload, "header");
  }
  if (shape[0] != kSequenceLength || shape[1] != kImageHeight || shape[2] != kImageWidth ||
      shape[3] != kChannels) {
    throw Error(Errc::shape_mismatch, "archive clip shape differs from (16, 64, 64, 3)");
  }
  const std::uintmax_t header = 28 + static_cast<std::uintmax_t>(count);
  const std::uintmax_t expected = header + static_cast<std::uintmax_t>(count) * kClipElements * 4;
  const auto actual = fs::file_size(path);
  if (actual != expected) {
    throw Error(Errc::truncated_payload, path.string() + " has " + std::to_string(actual) +
                                             " bytes, header implies " + std::to_string(expected));
  }
  LabeledClips out;
  out.labels.resize(count);
  for (auto& l : out.labels) {
    const int c = in.get();
    l = c;
    class_name(l);
  }
  out.clips.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ClipTensor clip = ClipTensor::zeros();
    if (!detail::get_f32_array(in, clip.data)) throw Error(Errc::truncated_payload, "payload");
    out.clips.push_back(std::move(clip));
  }
  return out;
}

}  // namespace clipforge::dataset

namespace clipforge::dataset {

LabeledClips load_clips(const DatasetManifest& manifest, Split split) {
  LabeledClips out;
  for (const auto* e : manifest.in_split(split)) {
    out.clips.push_back(media::sample_clip_uniform(media::probe_video(e->path)));
    out.clips.back().origin.source_id = e->clip_id;
    out.labels.push_back(e->label);
  }
  return out;
}

}  // namespace clipforge::dataset
