#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bitbudget/allocator.hpp"
#include "bitbudget/baselines.hpp"
#include "bitbudget/masks.hpp"
#include "bitbudget/model.hpp"
#include "bitbudget/quantizer.hpp"

namespace bitbudget {

inline constexpr const char* kToolVersion = "bitbudget 0.1.0";

// Single-file binary container: 8-byte magic, u32 version, u32 section count,
// then (u32 name length, name, u64 payload length, payload) per section.
// All integers and floats little-endian; floats are 64-bit.
struct Section {
  std::string name;
  std::vector<std::uint8_t> payload;
};

void write_container(const std::string& path, const std::vector<Section>& sections);
std::vector<Section> read_container(const std::string& path);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

std::string hash_hex64(std::uint64_t h);
std::string hash_file(const std::string& path);  // FNV-1a of the raw bytes

// ---- model and candidate pool containers ----

void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

void save_pool(const std::string& path, const CandidatePool& pool);
CandidatePool load_pool(const std::string& path, const ModelSpec& expected_spec);

// ---- line-oriented text artifacts ----

void save_scores(const std::string& path, const SoftScores& scores);
SoftScores load_scores(const std::string& path, const ModelSpec& spec);

void save_assignment(const std::string& path, const DiscreteAssignment& assignment,
                     const std::string& spec_hash, double b_target);
struct LoadedAssignment {
  DiscreteAssignment assignment;
  std::string spec_hash;
  double b_target = 0.0;
};
LoadedAssignment load_assignment(const std::string& path);

void save_traces(const std::string& path, const TraceEstimate& traces,
                 const std::string& spec_hash);
TraceEstimate load_traces(const std::string& path, const ModelSpec& spec);

// ---- run manifest ----

struct ManifestEntry {
  std::string name;
  std::string hash;
  std::uint64_t bytes = 0;
};

struct RunManifest {
  std::string tool_version;
  std::string config_hash;
  std::int64_t created_unix = 0;
  std::vector<ManifestEntry> files;
};

std::string manifest_path(const std::string& dir);
bool manifest_exists(const std::string& dir);
RunManifest read_manifest(const std::string& dir);
void write_manifest(const std::string& dir, const RunManifest& manifest);

// Adds or replaces the entry for `filename` (relative to dir) with its
// current content hash.
void manifest_record(RunManifest& manifest, const std::string& dir, const std::string& filename);

// Throws IntegrityError when dir/filename does not match the manifest entry.
// Files not listed in the manifest (or a missing manifest) pass untouched.
void verify_file_integrity(const std::string& path);

// Verify every file recorded in the manifest. Returns the verified names.
std::vector<std::string> verify_manifest(const std::string& dir);

}  // namespace bitbudget
