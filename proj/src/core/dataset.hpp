#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace ulfb::data {

enum class Cohort { SourcePool, TargetPool, PairedTest };

std::string to_string(Cohort c);
Cohort cohort_from_string(const std::string& s);

struct SubjectFiles {
  std::string t1, t2;
  std::optional<std::string> t1_clean, t2_clean;
};

struct SubjectEntry {
  std::string subject_id;
  int slices = 0;
  SubjectFiles files;  // relative to the manifest directory
};

/// JSON-described cohorts of raw float32 slice files.
struct DatasetManifest {
  static constexpr int kVersion = 1;

  int version = kVersion;
  int height = 0, width = 0;
  std::map<Cohort, std::vector<SubjectEntry>> cohorts;
  std::uint64_t seed = 0;
  std::string degradation_json = "{}";
  std::filesystem::path root;  // directory holding the manifest; not serialized

  bool has(Cohort c) const { return cohorts.count(c) && !cohorts.at(c).empty(); }
  std::size_t subject_count() const;
};

/// Throws SplitLeakage when any subject id appears in more than one cohort
/// (or twice within one).
void check_disjoint(const DatasetManifest& m);

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text, const std::filesystem::path& root);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Slices as 3-channel images [N,3,H,W] with cohort/subject tags per slice.
struct SliceSet {
  torch::Tensor images;
  std::vector<Cohort> cohorts;
  std::vector<std::string> subjects;
  std::vector<int> slice_index;

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  SliceSet select(const std::vector<int64_t>& rows) const;
};

enum class Variant { Acquired, Clean };

/// Loads every slice of a cohort. `Variant::Clean` requires clean references
/// (IncompleteCohort otherwise).
SliceSet load_cohort(const DatasetManifest& m, Cohort c, Variant v = Variant::Acquired);

SliceSet concat(const std::vector<SliceSet>& parts);

}  // namespace ulfb::data
