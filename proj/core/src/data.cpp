#include "angio/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "angio/error.hpp"
#include "angio/image.hpp"

namespace angio {

using nlohmann::json;

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::arterial: return "arterial";
    case Phase::venous: return "venous";
    case Phase::late: return "late";
  }
  return "?";
}

Phase phase_from_string(const std::string& s) {
  if (s == "arterial") return Phase::arterial;
  if (s == "venous") return Phase::venous;
  if (s == "late") return Phase::late;
  throw Error("parse", "unknown phase tag: " + s);
}

std::vector<int> AngioVideo::phase_extent() const {
  std::vector<int> n(3, 0);
  for (Phase p : phase_tags) n[static_cast<std::size_t>(p)]++;
  return n;
}

void validate_video(const AngioVideo& v, bool sampled) {
  require(!v.frames.empty(), "video", "video has no frames");
  require(v.phase_tags.size() == v.frames.size(), "video",
          "phase tag count does not match frame count");
  const int h = v.frames[0].dim(0), w = v.frames[0].dim(1);
  for (const Tensor& f : v.frames) {
    require(f.ndim() == 2 && f.dim(0) == h && f.dim(1) == w, "video",
            "frames have inconsistent shapes");
  }
  for (std::size_t i = 1; i < v.phase_tags.size(); ++i)
    require(static_cast<int>(v.phase_tags[i]) >= static_cast<int>(v.phase_tags[i - 1]), "video",
            "phase tags must be nondecreasing (arterial, venous, late)");
  if (!v.timestamps.empty()) {
    require(v.timestamps.size() == v.frames.size(), "video",
            "timestamp count does not match frame count");
    for (std::size_t i = 0; i < v.timestamps.size(); ++i) {
      require(v.timestamps[i] >= 0.0, "video", "timestamps must be nonnegative");
      if (i) require(v.timestamps[i] >= v.timestamps[i - 1], "video",
                     "timestamps must be monotone");
    }
  }
  if (sampled)
    require(v.frame_count() == 12, "video", "sampled video must have exactly 12 frames");
  else
    require(v.frame_count() >= 3, "video", "raw video must have at least 3 frames");
}

// --------------------------------------------------------------- manifest

namespace {

ManifestRecord record_from_json(const json& j, int line_no) {
  static const std::set<std::string> known = {"source_path", "target_frame_paths",
                                              "phase_tags", "patient_id", "split"};
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) != 0, "parse",
            "manifest line " + std::to_string(line_no) + ": unknown key '" + it.key() + "'");
  ManifestRecord r;
  try {
    r.source_path = j.at("source_path").get<std::string>();
    r.target_frame_paths = j.at("target_frame_paths").get<std::vector<std::string>>();
    for (const auto& t : j.at("phase_tags"))
      r.phase_tags.push_back(phase_from_string(t.get<std::string>()));
    r.patient_id = j.at("patient_id").get<std::string>();
    r.split = j.at("split").get<std::string>();
  } catch (const json::exception& e) {
    throw Error("parse", "manifest line " + std::to_string(line_no) + ": " + e.what());
  }
  require(!r.patient_id.empty(), "parse",
          "manifest line " + std::to_string(line_no) + ": empty patient_id");
  require(!r.split.empty(), "parse",
          "manifest line " + std::to_string(line_no) + ": empty split");
  require(r.phase_tags.size() == r.target_frame_paths.size(), "parse",
          "manifest line " + std::to_string(line_no) + ": phase_tags/frames length mismatch");
  for (std::size_t i = 1; i < r.phase_tags.size(); ++i)
    require(static_cast<int>(r.phase_tags[i]) >= static_cast<int>(r.phase_tags[i - 1]), "parse",
            "manifest line " + std::to_string(line_no) + ": phase tags out of order");
  return r;
}

json record_to_json(const ManifestRecord& r) {
  json j;
  j["source_path"] = r.source_path;
  j["target_frame_paths"] = r.target_frame_paths;
  json tags = json::array();
  for (Phase p : r.phase_tags) tags.push_back(phase_name(p));
  j["phase_tags"] = tags;
  j["patient_id"] = r.patient_id;
  j["split"] = r.split;
  return j;
}

}  // namespace

std::vector<std::string> DatasetManifest::split_names() const {
  std::set<std::string> names;
  for (const auto& r : records) names.insert(r.split);
  return {names.begin(), names.end()};
}

std::vector<const ManifestRecord*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records)
    if (r.split == name) out.push_back(&r);
  return out;
}

DatasetManifest load_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  require(in.good(), "missing_file", "cannot open manifest: " + file.string());
  DatasetManifest m;
  m.root = file.has_parent_path() ? file.parent_path() : std::filesystem::path(".");

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("parse", "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    m.records.push_back(record_from_json(j, line_no));
  }
  require(!m.records.empty(), "parse", "manifest is empty: " + file.string());

  // Patient-level split hygiene.
  std::map<std::string, std::string> patient_split;
  for (const auto& r : m.records) {
    auto [it, inserted] = patient_split.emplace(r.patient_id, r.split);
    require(inserted || it->second == r.split, "patient_leakage",
            "patient leakage: patient '" + r.patient_id + "' appears in splits '" +
                it->second + "' and '" + r.split + "'");
  }

  // Every referenced path must resolve.
  for (const auto& r : m.records) {
    const auto src = m.root / r.source_path;
    require(std::filesystem::exists(src), "missing_file",
            "manifest references missing file: " + src.string());
    for (const auto& fp : r.target_frame_paths) {
      const auto p = m.root / fp;
      require(std::filesystem::exists(p), "missing_file",
              "manifest references missing file: " + p.string());
    }
  }
  return m;
}

void save_manifest(const std::filesystem::path& file, const DatasetManifest& m) {
  std::ofstream out(file);
  require(out.good(), "io", "cannot write manifest: " + file.string());
  for (const auto& r : m.records) out << record_to_json(r).dump() << "\n";
  require(out.good(), "io", "manifest write failed: " + file.string());
}

PairedSample load_sample(const DatasetManifest& m, const ManifestRecord& rec, int resolution) {
  PairedSample s;
  s.patient_id = rec.patient_id;
  s.source.patient_id = rec.patient_id;
  s.source.pixels = pnm::read_color(m.root / rec.source_path);
  s.target.phase_tags = rec.phase_tags;
  for (const auto& fp : rec.target_frame_paths)
    s.target.frames.push_back(pnm::read_gray(m.root / fp));

  const auto lesion_path = (m.root / rec.source_path).parent_path() / "lesion_truth.pbm";
  if (std::filesystem::exists(lesion_path)) s.lesion_truth = pnm::read_bitmap(lesion_path);

  if (resolution > 0) {
    s.source.pixels = resize_bilinear(s.source.pixels, resolution, resolution);
    for (auto& f : s.target.frames) f = resize_bilinear(f, resolution, resolution);
    if (s.lesion_truth) {
      Tensor r = resize_bilinear(*s.lesion_truth, resolution, resolution);
      for (auto& x : r.v) x = x >= 0.5 ? 1.0 : 0.0;
      s.lesion_truth = std::move(r);
    }
  }
  validate_video(s.target);
  return s;
}

ManifestRecord save_sample(const std::filesystem::path& dir, const PairedSample& sample,
                           const std::string& split, int bit_depth) {
  std::filesystem::create_directories(dir / "frames");
  pnm::write_color(dir / "source.ppm", sample.source.pixels, bit_depth);
  if (sample.lesion_truth) pnm::write_bitmap(dir / "lesion_truth.pbm", *sample.lesion_truth);

  ManifestRecord rec;
  rec.patient_id = sample.patient_id;
  rec.split = split;
  rec.source_path = (dir.filename() / "source.ppm").string();
  json index;
  index["frames"] = json::array();
  for (int i = 0; i < sample.target.frame_count(); ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "%03d.pgm", i);
    pnm::write_gray(dir / "frames" / name, sample.target.frames[static_cast<std::size_t>(i)],
                    bit_depth);
    rec.target_frame_paths.push_back((dir.filename() / "frames" / name).string());
    index["frames"].push_back(std::string("frames/") + name);
  }
  rec.phase_tags = sample.target.phase_tags;
  json tags = json::array();
  for (Phase p : sample.target.phase_tags) tags.push_back(phase_name(p));
  index["phase_tags"] = tags;
  if (!sample.target.timestamps.empty()) index["timestamps"] = sample.target.timestamps;

  std::ofstream out(dir / "index.json");
  require(out.good(), "io", "cannot write video index under " + dir.string());
  out << index.dump(2) << "\n";
  return rec;
}

AngioVideo load_video(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  require(in.good(), "missing_file", "cannot open video index: " + (dir / "index.json").string());
  json index;
  try {
    in >> index;
  } catch (const json::exception& e) {
    throw Error("parse", std::string("video index: ") + e.what());
  }
  AngioVideo v;
  for (const auto& f : index.at("frames"))
    v.frames.push_back(pnm::read_gray(dir / f.get<std::string>()));
  for (const auto& t : index.at("phase_tags"))
    v.phase_tags.push_back(phase_from_string(t.get<std::string>()));
  if (index.contains("timestamps"))
    v.timestamps = index.at("timestamps").get<std::vector<double>>();
  validate_video(v);
  return v;
}

// ---------------------------------------------------------- phase sampling

std::vector<int> evenly_spaced_indices(int length, int k) {
  require(length >= 1 && k >= 1, "sampling", "need positive length and k");
  std::vector<int> idx(static_cast<std::size_t>(k));
  if (k == 1) {
    idx[0] = static_cast<int>(std::llround((length - 1) / 2.0));
    return idx;
  }
  for (int i = 0; i < k; ++i)
    idx[static_cast<std::size_t>(i)] =
        static_cast<int>(std::llround(static_cast<double>(i) * (length - 1) / (k - 1)));
  return idx;
}

AngioVideo sample_phase_frames(const AngioVideo& video, int per_phase) {
  require(per_phase >= 1, "sampling", "per_phase must be >= 1");
  validate_video(video);
  const auto extent = video.phase_extent();
  for (int p = 0; p < 3; ++p)
    require(extent[static_cast<std::size_t>(p)] > 0, "sampling",
            std::string("phase with zero frames: ") + phase_name(static_cast<Phase>(p)));

  AngioVideo out;
  int base = 0;
  for (int p = 0; p < 3; ++p) {
    const int n = extent[static_cast<std::size_t>(p)];
    for (int i : evenly_spaced_indices(n, per_phase)) {
      const std::size_t src = static_cast<std::size_t>(base + i);
      out.frames.push_back(video.frames[src]);
      out.phase_tags.push_back(video.phase_tags[src]);
      if (!video.timestamps.empty()) out.timestamps.push_back(video.timestamps[src]);
    }
    base += n;
  }
  return out;
}

AngioVideo assign_phases_from_timestamps(const AngioVideo& video, double arterial_end,
                                         double venous_end) {
  require(!video.timestamps.empty() && video.timestamps.size() == video.frames.size(),
          "sampling", "phase assignment needs one timestamp per frame");
  require(arterial_end < venous_end, "sampling", "phase cutoffs out of order");
  AngioVideo out = video;
  out.phase_tags.clear();
  for (double t : video.timestamps) {
    out.phase_tags.push_back(t < arterial_end   ? Phase::arterial
                             : t < venous_end ? Phase::venous
                                              : Phase::late);
  }
  return out;
}

Tensor normalize_frame(const std::vector<std::uint32_t>& raw, int h, int w, int bit_depth) {
  require(bit_depth == 8 || bit_depth == 16, "normalize", "bit_depth must be 8 or 16");
  require(static_cast<std::size_t>(h) * w == raw.size(), "shape",
          "normalize_frame: size mismatch");
  const std::uint32_t maxval = bit_depth == 8 ? 255u : 65535u;
  Tensor out({h, w});
  for (std::size_t i = 0; i < raw.size(); ++i) {
    require(raw[i] <= maxval, "normalize",
            "sample value " + std::to_string(raw[i]) + " exceeds " +
                std::to_string(bit_depth) + "-bit range");
    out.v[i] = static_cast<double>(raw[i]) / maxval;
  }
  return out;
}

}  // namespace angio
