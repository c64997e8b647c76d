#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icetrack/errors.hpp"
#include "icetrack/geometry.hpp"
#include "icetrack/png_io.hpp"
#include "icetrack/simulator.hpp"

namespace icetrack {

using Vec6 = Eigen::Matrix<double, 6, 1>;

struct FrameRecord {
  std::string sequence_id;
  int frame_index = 0;
  std::filesystem::path image_path;
  AnnotationRecord annotation;
};

struct SequenceRecord {
  std::string id;
  std::string split;
  std::vector<FrameRecord> frames;
};

// One model sample: N contiguous visible frames; the prior state belongs to
// the second-to-last frame, the target to the last.
struct SequenceWindow {
  const SequenceRecord* sequence = nullptr;
  int start = 0;
  int n = 0;

  const FrameRecord& frame(int k) const { return sequence->frames[std::size_t(start + k)]; }
  const AnnotationRecord& prior() const { return frame(n - 2).annotation; }
  const AnnotationRecord& target() const { return frame(n - 1).annotation; }
  int target_frame_index() const { return frame(n - 1).frame_index; }
};

// Sliding windows of stride 1; windows touching an invisible frame are dropped.
inline std::vector<SequenceWindow> window(const SequenceRecord& seq, int n) {
  if (n < 2) throw ConfigError("window length must be >= 2");
  if (int(seq.frames.size()) < n)
    throw TooShort("sequence '" + seq.id + "' has " + std::to_string(seq.frames.size()) +
                   " frames, need " + std::to_string(n));
  std::vector<SequenceWindow> out;
  for (int s = 0; s + n <= int(seq.frames.size()); ++s) {
    bool ok = true;
    for (int k = 0; k < n; ++k)
      if (!seq.frames[std::size_t(s + k)].annotation.visible) {
        ok = false;
        break;
      }
    if (ok) out.push_back({&seq, s, n});
  }
  return out;
}

// Regression target layout: [box(4) mapped [0,1]->[-1,1], entry/90, rot/180].
inline Vec6 normalize_state(const BoundingBox& box, const IncidentAngle& angle) {
  Vec6 v;
  v << 2.0 * box.x_min - 1.0, 2.0 * box.y_min - 1.0, 2.0 * box.x_max - 1.0, 2.0 * box.y_max - 1.0,
      angle.entry_deg / 90.0, angle.rot_deg / 180.0;
  return v;
}

// Project a model-estimated state onto the valid normalized domain (box
// corners ordered and clamped, angles in range); used before an estimate
// is fed back as the next prior.
inline Vec6 clamp_state(Vec6 s) {
  if (s[0] > s[2]) std::swap(s[0], s[2]);
  if (s[1] > s[3]) std::swap(s[1], s[3]);
  for (int d = 0; d < 5; ++d) s[d] = std::clamp(s[d], -1.0, 1.0);
  s[5] = wrap_deg(s[5] * 180.0) / 180.0;
  return s;
}

inline std::pair<BoundingBox, IncidentAngle> denormalize_state(const Vec6& v) {
  BoundingBox box;
  box.x_min = (v[0] + 1.0) / 2.0;
  box.y_min = (v[1] + 1.0) / 2.0;
  box.x_max = (v[2] + 1.0) / 2.0;
  box.y_max = (v[3] + 1.0) / 2.0;
  IncidentAngle angle;
  angle.entry_deg = v[4] * 90.0;
  angle.rot_deg = v[5] * 180.0;
  return {box, angle};
}

struct SplitManifestEntry {
  std::string name;
  int count = 0;
  int frames_per_sequence = 0;
  std::uint64_t seed_base = 0;
  std::uint64_t background_seed_base = 0;
  std::string background_pool;
  std::vector<std::string> sequence_ids;
};

struct SplitManifest {
  int format_version = 1;
  std::uint64_t seed = 0;
  std::string config_hash;
  int image_width = 0;
  int image_height = 0;
  FanGeometry fan;
  std::vector<SplitManifestEntry> splits;

  const SplitManifestEntry& split(const std::string& name) const {
    for (const auto& s : splits)
      if (s.name == name) return s;
    throw ConfigError("manifest has no split '" + name + "'");
  }
};

inline SplitManifest load_manifest(const std::filesystem::path& root) {
  const auto path = root / "manifest";
  std::ifstream in(path);
  if (!in) throw MissingFile("missing manifest: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ShapeMismatch("manifest parse error: " + std::string(e.what()));
  }
  SplitManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != 1)
    throw ShapeMismatch("unsupported manifest format_version " +
                        std::to_string(m.format_version));
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.image_width = j.at("image").at("width").get<int>();
  m.image_height = j.at("image").at("height").get<int>();
  m.fan.image_width = m.image_width;
  m.fan.image_height = m.image_height;
  m.fan.angular_span_deg = j.at("fan").at("angular_span_deg").get<double>();
  m.fan.max_depth_mm = j.at("fan").at("max_depth_mm").get<double>();
  m.fan.mm_per_px = j.at("fan").at("mm_per_px").get<double>();
  for (const auto& js : j.at("splits")) {
    SplitManifestEntry e;
    e.name = js.at("name").get<std::string>();
    e.count = js.at("count").get<int>();
    e.frames_per_sequence = js.at("frames_per_sequence").get<int>();
    e.seed_base = js.at("seed_base").get<std::uint64_t>();
    e.background_seed_base = js.at("background_seed_base").get<std::uint64_t>();
    e.background_pool = js.value("background_pool", "");
    for (const auto& id : js.at("sequence_ids")) e.sequence_ids.push_back(id.get<std::string>());
    m.splits.push_back(e);
  }
  return m;
}

inline SequenceRecord load_sequence(const std::filesystem::path& root, const std::string& split,
                                    const std::string& id) {
  SequenceRecord seq;
  seq.id = id;
  seq.split = split;
  const auto dir = root / split / id;
  const auto ann_path = dir / "annotations.jsonl";
  std::ifstream in(ann_path);
  if (!in) throw MissingFile("missing annotations: " + ann_path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw ShapeMismatch(ann_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    FrameRecord fr;
    fr.sequence_id = id;
    fr.annotation = detail::annotation_from_json(j);
    fr.frame_index = fr.annotation.frame_index;
    fr.image_path = dir / ("frame_" + std::to_string(fr.frame_index) + ".png");
    seq.frames.push_back(std::move(fr));
  }
  for (std::size_t i = 1; i < seq.frames.size(); ++i)
    if (seq.frames[i].frame_index <= seq.frames[i - 1].frame_index)
      throw ShapeMismatch("non-increasing frame_index in " + ann_path.string());
  return seq;
}

// Verifies counts, split disjointness, file presence and image shapes.
// Pure read; throws SplitOverlap / MissingFile / ShapeMismatch naming the
// offending entry.
inline SplitManifest verify_integrity(const std::filesystem::path& root) {
  const SplitManifest m = load_manifest(root);

  std::map<std::string, std::string> seen;  // id -> split
  for (const auto& split : m.splits) {
    if (int(split.sequence_ids.size()) != split.count)
      throw ShapeMismatch("split '" + split.name + "' lists " +
                          std::to_string(split.sequence_ids.size()) + " ids but count is " +
                          std::to_string(split.count));
    for (const auto& id : split.sequence_ids) {
      const auto [it, inserted] = seen.emplace(id, split.name);
      if (!inserted)
        throw SplitOverlap("sequence id '" + id + "' appears in splits '" + it->second +
                           "' and '" + split.name + "'");
    }
  }

  const auto& train = m.split("train");
  const auto& test = m.split("test");
  const auto ranges_overlap = [](std::uint64_t a0, int an, std::uint64_t b0, int bn) {
    return a0 < b0 + std::uint64_t(bn) && b0 < a0 + std::uint64_t(an);
  };
  if (ranges_overlap(train.seed_base, train.count, test.seed_base, test.count))
    throw SplitOverlap("train/test trajectory seed ranges intersect in manifest");
  if (!train.background_pool.empty() && train.background_pool == test.background_pool)
    throw SplitOverlap("train and test share background pool '" + train.background_pool + "'");
  if (train.background_pool.empty() &&
      ranges_overlap(train.background_seed_base, train.count, test.background_seed_base,
                     test.count))
    throw SplitOverlap("train/test background seed ranges intersect in manifest");

  for (const auto& split : m.splits) {
    for (const auto& id : split.sequence_ids) {
      const SequenceRecord seq = load_sequence(root, split.name, id);
      if (int(seq.frames.size()) != split.frames_per_sequence)
        throw ShapeMismatch("sequence '" + id + "' has " + std::to_string(seq.frames.size()) +
                            " annotation records, manifest says " +
                            std::to_string(split.frames_per_sequence));
      for (const auto& fr : seq.frames) {
        if (!std::filesystem::exists(fr.image_path))
          throw MissingFile("missing frame image: " + fr.image_path.string());
        const auto [w, h] = read_png_size(fr.image_path.string());
        if (w != m.image_width || h != m.image_height)
          throw ShapeMismatch("image '" + fr.image_path.string() + "' is " + std::to_string(w) +
                              "x" + std::to_string(h) + ", manifest says " +
                              std::to_string(m.image_width) + "x" +
                              std::to_string(m.image_height));
        if (fr.annotation.visible && !fr.annotation.box.valid())
          throw ShapeMismatch("invalid visible box in sequence '" + id + "' frame " +
                              std::to_string(fr.frame_index));
      }
    }
  }
  return m;
}

// Loaded dataset view; sequences are read eagerly, images on demand.
class DatasetView {
 public:
  explicit DatasetView(std::filesystem::path root)
      : root_(std::move(root)), manifest_(load_manifest(root_)) {}

  const SplitManifest& manifest() const { return manifest_; }
  const std::filesystem::path& root() const { return root_; }

  std::vector<SequenceRecord> load_split(const std::string& name) const {
    std::vector<SequenceRecord> out;
    for (const auto& id : manifest_.split(name).sequence_ids)
      out.push_back(load_sequence(root_, name, id));
    return out;
  }

 private:
  std::filesystem::path root_;
  SplitManifest manifest_;
};

// Loads frame images resized to the encoder input, caching by path.
class FrameCache {
 public:
  explicit FrameCache(int target_size) : target_(target_size) {}

  const Eigen::MatrixXd& get(const std::filesystem::path& path) {
    const std::string key = path.string();
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const ImageF img = resize_area(read_png_gray8(key), target_, target_);
    Eigen::MatrixXd m(target_, target_);
    for (int y = 0; y < target_; ++y)
      for (int x = 0; x < target_; ++x) m(y, x) = img.at(x, y);
    return cache_.emplace(key, std::move(m)).first->second;
  }

  int target_size() const { return target_; }
  void clear() { cache_.clear(); }

 private:
  int target_;
  std::map<std::string, Eigen::MatrixXd> cache_;
};

// Materialized model input.
struct WindowTensors {
  std::vector<Eigen::MatrixXd> images;  // n matrices, input_size x input_size
  Vec6 prior = Vec6::Zero();
  Vec6 target = Vec6::Zero();
  std::string sequence_id;
  int target_frame_index = 0;
};

inline WindowTensors materialize(const SequenceWindow& w, FrameCache& cache) {
  WindowTensors t;
  t.sequence_id = w.sequence->id;
  t.target_frame_index = w.target_frame_index();
  for (int k = 0; k < w.n; ++k) t.images.push_back(cache.get(w.frame(k).image_path));
  t.prior = normalize_state(w.prior().box, w.prior().angle);
  t.target = normalize_state(w.target().box, w.target().angle);
  return t;
}

}  // namespace icetrack
