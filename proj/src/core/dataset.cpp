#include "core/dataset.hpp"

#include <set>

#include <json.hpp>

#include "core/error.hpp"
#include "core/synth_data.hpp"
#include "core/tensor_io.hpp"

namespace ulfb::data {

using nlohmann::ordered_json;

std::string to_string(Cohort c) {
  switch (c) {
    case Cohort::SourcePool: return "source_pool";
    case Cohort::TargetPool: return "target_pool";
    case Cohort::PairedTest: return "paired_test";
  }
  return "unknown";
}

Cohort cohort_from_string(const std::string& s) {
  if (s == "source_pool") return Cohort::SourcePool;
  if (s == "target_pool") return Cohort::TargetPool;
  if (s == "paired_test") return Cohort::PairedTest;
  fail(ErrorCode::InvalidConfig, "unknown cohort '" + s + "'");
}

std::size_t DatasetManifest::subject_count() const {
  std::size_t n = 0;
  for (const auto& [_, subjects] : cohorts) n += subjects.size();
  return n;
}

void check_disjoint(const DatasetManifest& m) {
  std::set<std::string> seen;
  for (const auto& [cohort, subjects] : m.cohorts) {
    for (const auto& s : subjects) {
      require(seen.insert(s.subject_id).second, ErrorCode::SplitLeakage,
              "subject '" + s.subject_id + "' appears more than once (cohort " + to_string(cohort) + ")");
    }
  }
}

std::string manifest_to_json(const DatasetManifest& m) {
  ordered_json j;
  j["version"] = m.version;
  j["resolution"] = {m.height, m.width};
  j["dtype"] = "float32";
  j["byte_order"] = "little";
  j["layout"] = "slices x height x width, row-major, header-free";
  ordered_json cohorts = ordered_json::object();
  for (const auto& [cohort, subjects] : m.cohorts) {
    ordered_json list = ordered_json::array();
    for (const auto& s : subjects) {
      ordered_json files;
      files["t1"] = s.files.t1;
      files["t2"] = s.files.t2;
      if (s.files.t1_clean) files["t1_clean"] = *s.files.t1_clean;
      if (s.files.t2_clean) files["t2_clean"] = *s.files.t2_clean;
      list.push_back({{"subject_id", s.subject_id}, {"slices", s.slices}, {"shape", {s.slices, m.height, m.width}},
                      {"files", files}});
    }
    cohorts[to_string(cohort)] = list;
  }
  j["cohorts"] = cohorts;
  j["seeds"] = {{"base", m.seed}};
  j["degradation"] = ordered_json::parse(m.degradation_json);
  return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text, const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  try {
    auto j = ordered_json::parse(text);
    m.version = j.at("version").get<int>();
    require(m.version == DatasetManifest::kVersion, ErrorCode::InvalidConfig,
            "unsupported manifest version " + std::to_string(m.version));
    m.height = j.at("resolution").at(0).get<int>();
    m.width = j.at("resolution").at(1).get<int>();
    m.seed = j.at("seeds").at("base").get<std::uint64_t>();
    if (j.contains("degradation")) m.degradation_json = j["degradation"].dump();
    for (const auto& [name, list] : j.at("cohorts").items()) {
      auto& out = m.cohorts[cohort_from_string(name)];
      for (const auto& s : list) {
        SubjectEntry e;
        e.subject_id = s.at("subject_id").get<std::string>();
        e.slices = s.at("slices").get<int>();
        const auto& f = s.at("files");
        e.files.t1 = f.at("t1").get<std::string>();
        e.files.t2 = f.at("t2").get<std::string>();
        if (f.contains("t1_clean")) e.files.t1_clean = f["t1_clean"].get<std::string>();
        if (f.contains("t2_clean")) e.files.t2_clean = f["t2_clean"].get<std::string>();
        out.push_back(std::move(e));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("malformed manifest: ") + e.what());
  }
  check_disjoint(m);
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  io::write_text(path, manifest_to_json(m));
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  return manifest_from_json(io::read_text(path), path.parent_path());
}

SliceSet SliceSet::select(const std::vector<int64_t>& rows) const {
  SliceSet out;
  out.images = images.index_select(0, torch::tensor(rows, torch::kLong));
  for (auto r : rows) {
    out.cohorts.push_back(cohorts[r]);
    out.subjects.push_back(subjects[r]);
    out.slice_index.push_back(slice_index[r]);
  }
  return out;
}

SliceSet load_cohort(const DatasetManifest& m, Cohort c, Variant v) {
  require(m.has(c), ErrorCode::MissingCohort, "manifest has no cohort '" + to_string(c) + "'");
  std::vector<torch::Tensor> images;
  SliceSet out;
  for (const auto& s : m.cohorts.at(c)) {
    std::string t1 = s.files.t1, t2 = s.files.t2;
    if (v == Variant::Clean) {
      require(s.files.t1_clean && s.files.t2_clean, ErrorCode::IncompleteCohort,
              "subject '" + s.subject_id + "' has no clean reference");
      t1 = *s.files.t1_clean;
      t2 = *s.files.t2_clean;
    }
    const std::vector<int64_t> shape{s.slices, m.height, m.width};
    auto a = io::read_f32(m.root / t1, shape);
    auto b = io::read_f32(m.root / t2, shape);
    for (int k = 0; k < s.slices; ++k) {
      images.push_back(synth::compose_channels(a[k], b[k]));
      out.cohorts.push_back(c);
      out.subjects.push_back(s.subject_id);
      out.slice_index.push_back(k);
    }
  }
  out.images = torch::stack(images);
  return out;
}

SliceSet concat(const std::vector<SliceSet>& parts) {
  SliceSet out;
  std::vector<torch::Tensor> images;
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    images.push_back(p.images);
    out.cohorts.insert(out.cohorts.end(), p.cohorts.begin(), p.cohorts.end());
    out.subjects.insert(out.subjects.end(), p.subjects.begin(), p.subjects.end());
    out.slice_index.insert(out.slice_index.end(), p.slice_index.begin(), p.slice_index.end());
  }
  if (!images.empty()) out.images = torch::cat(images);
  return out;
}

}  // namespace ulfb::data
