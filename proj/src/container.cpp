#include "bitbudget/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "bitbudget/errors.hpp"
#include "bitbudget/rng.hpp"

namespace fs = std::filesystem;

namespace bitbudget {

namespace {

constexpr char kMagic[8] = {'B', 'B', 'C', 'T', 'N', 'R', '0', '1'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::vector<std::uint8_t> read_all_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  in.seekg(0, std::ios::end);
  const std::streamoff len = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
  if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!in) throw std::runtime_error("short read: " + path);
  return bytes;
}

std::vector<std::uint8_t> text_payload(const std::string& s) {
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

std::string payload_text(const std::vector<std::uint8_t>& p) {
  return std::string(p.begin(), p.end());
}

const Section& find_section(const std::vector<Section>& sections, const std::string& name) {
  for (const Section& s : sections)
    if (s.name == name) return s;
  throw IntegrityError("container is missing section: " + name);
}

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_container(const std::string& path, const std::vector<Section>& sections) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 8);
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(sections.size()));
  for (const Section& s : sections) {
    put_u32(out, static_cast<std::uint32_t>(s.name.size()));
    out.insert(out.end(), s.name.begin(), s.name.end());
    put_u64(out, s.payload.size());
    out.insert(out.end(), s.payload.begin(), s.payload.end());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write file: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<Section> read_container(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_all_bytes(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw IntegrityError("bad container magic: " + path);
  const std::uint32_t version = get_u32(bytes.data() + 8);
  if (version != kFormatVersion)
    throw IntegrityError("unsupported container version " + std::to_string(version));
  const std::uint32_t count = get_u32(bytes.data() + 12);
  std::size_t off = 16;
  std::vector<Section> sections;
  sections.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    if (off + 4 > bytes.size()) throw IntegrityError("truncated container: " + path);
    const std::uint32_t name_len = get_u32(bytes.data() + off);
    off += 4;
    if (off + name_len + 8 > bytes.size()) throw IntegrityError("truncated container: " + path);
    Section s;
    s.name.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                  bytes.begin() + static_cast<std::ptrdiff_t>(off + name_len));
    off += name_len;
    const std::uint64_t plen = get_u64(bytes.data() + off);
    off += 8;
    if (off + plen > bytes.size()) throw IntegrityError("truncated container: " + path);
    s.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                     bytes.begin() + static_cast<std::ptrdiff_t>(off + plen));
    off += plen;
    sections.push_back(std::move(s));
  }
  if (off != bytes.size())
    throw IntegrityError("trailing bytes after section table: " + path);
  return sections;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  std::vector<std::uint8_t> out;
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::int64_t d : t.shape()) put_u64(out, static_cast<std::uint64_t>(d));
  for (std::int64_t i = 0; i < t.size(); ++i)
    put_u64(out, std::bit_cast<std::uint64_t>(t[i]));
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw IntegrityError("tensor payload too short");
  const std::uint32_t rank = get_u32(bytes.data());
  std::size_t off = 4;
  std::vector<std::int64_t> shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    if (off + 8 > bytes.size()) throw IntegrityError("tensor payload truncated");
    shape[i] = static_cast<std::int64_t>(get_u64(bytes.data() + off));
    off += 8;
  }
  const std::int64_t n = shape_size(shape);
  if (off + 8 * static_cast<std::size_t>(n) != bytes.size())
    throw IntegrityError("tensor payload length mismatch");
  std::vector<double> data(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    data[static_cast<std::size_t>(i)] = std::bit_cast<double>(get_u64(bytes.data() + off));
    off += 8;
  }
  return Tensor(std::move(shape), std::move(data));
}

std::string hash_hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string hash_file(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_all_bytes(path);
  return hash_hex64(fnv1a64(bytes.data(), bytes.size()));
}

// ---- model ----

namespace {

ModelSpec parse_spec_text(const std::string& text) {
  ModelSpec spec;
  spec.module_scales.clear();
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "num_layers") spec.num_layers = std::stoi(val);
    else if (key == "hidden_dim") spec.hidden_dim = std::stoi(val);
    else if (key == "num_heads") spec.num_heads = std::stoi(val);
    else if (key == "ffn_dim") spec.ffn_dim = std::stoi(val);
    else if (key == "vocab_size") spec.vocab_size = std::stoi(val);
    else if (key == "max_seq_len") spec.max_seq_len = std::stoi(val);
    else if (key == "seed") spec.seed = std::stoull(val);
    else if (key == "module_scale") {
      const std::size_t c1 = val.find(':');
      const std::size_t c2 = val.find(':', c1 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos)
        throw IntegrityError("bad module_scale entry: " + val);
      ModuleScale s;
      s.layer = std::stoi(val.substr(0, c1));
      s.proj = projection_from_name(val.substr(c1 + 1, c2 - c1 - 1));
      s.multiplier = std::stod(val.substr(c2 + 1));
      spec.module_scales.push_back(s);
    } else {
      throw IntegrityError("unknown spec key: " + key);
    }
  }
  return spec;
}

}  // namespace

void save_model(const std::string& path, const Model& model) {
  std::vector<Section> sections;
  sections.push_back({"spec", text_payload(model.spec.canonical_text())});
  sections.push_back({"tok_embed", encode_tensor(model.tok_embed)});
  sections.push_back({"pos_embed", encode_tensor(model.pos_embed)});
  sections.push_back({"final_norm_gain", encode_tensor(model.final_norm_gain)});
  sections.push_back({"output_head", encode_tensor(model.output_head)});
  for (int l = 1; l <= model.spec.num_layers; ++l) {
    sections.push_back({"attn_norm_gain." + std::to_string(l),
                        encode_tensor(model.attn_norm_gain[static_cast<std::size_t>(l - 1)])});
    sections.push_back({"mlp_norm_gain." + std::to_string(l),
                        encode_tensor(model.mlp_norm_gain[static_cast<std::size_t>(l - 1)])});
  }
  for (const ModuleId& m : model.spec.modules())
    sections.push_back({"weight." + module_name(m), encode_tensor(model.module_weight(m))});
  write_container(path, sections);
}

Model load_model(const std::string& path) {
  verify_file_integrity(path);
  const std::vector<Section> sections = read_container(path);
  Model model;
  model.spec = parse_spec_text(payload_text(find_section(sections, "spec").payload));
  model.spec.validate();
  model.tok_embed = decode_tensor(find_section(sections, "tok_embed").payload);
  model.pos_embed = decode_tensor(find_section(sections, "pos_embed").payload);
  model.final_norm_gain = decode_tensor(find_section(sections, "final_norm_gain").payload);
  model.output_head = decode_tensor(find_section(sections, "output_head").payload);
  for (int l = 1; l <= model.spec.num_layers; ++l) {
    model.attn_norm_gain.push_back(
        decode_tensor(find_section(sections, "attn_norm_gain." + std::to_string(l)).payload));
    model.mlp_norm_gain.push_back(
        decode_tensor(find_section(sections, "mlp_norm_gain." + std::to_string(l)).payload));
  }
  for (const ModuleId& m : model.spec.modules())
    model.module_weights.push_back(
        decode_tensor(find_section(sections, "weight." + module_name(m)).payload));
  return model;
}

// ---- pool ----

void save_pool(const std::string& path, const CandidatePool& pool) {
  std::ostringstream header;
  header << "spec_hash=" << pool.spec().hash_hex() << "\nbits=";
  for (std::size_t i = 0; i < pool.bitset().bits.size(); ++i)
    header << (i ? "," : "") << pool.bitset().bits[i];
  header << "\ngroup_size=" << pool.group_size() << "\n";

  std::vector<Section> sections;
  sections.push_back({"pool_header", text_payload(header.str())});
  // Declaration order: modules lexicographic; per module the full-precision
  // reference first, then candidates by ascending bit-width.
  for (const ModuleId& m : pool.spec().modules()) {
    sections.push_back({module_name(m) + ".fp", encode_tensor(pool.reference(m))});
    for (int b : pool.bitset().bits)
      sections.push_back(
          {module_name(m) + ".b" + std::to_string(b), encode_tensor(pool.candidate(m, b))});
  }
  write_container(path, sections);
}

CandidatePool load_pool(const std::string& path, const ModelSpec& expected_spec) {
  verify_file_integrity(path);
  const std::vector<Section> sections = read_container(path);
  const std::string header = payload_text(find_section(sections, "pool_header").payload);

  std::string spec_hash;
  BitWidthSet bitset;
  bitset.bits.clear();
  int group_size = 0;
  std::istringstream in(header);
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "spec_hash") spec_hash = val;
    else if (key == "group_size") group_size = std::stoi(val);
    else if (key == "bits") {
      std::istringstream bs(val);
      std::string tok;
      while (std::getline(bs, tok, ',')) bitset.bits.push_back(std::stoi(tok));
    }
  }
  if (spec_hash != expected_spec.hash_hex())
    throw IntegrityError("pool spec hash mismatch: expected " + expected_spec.hash_hex() +
                         ", found " + spec_hash);
  bitset.validate();

  std::vector<Tensor> refs, cands;
  for (const ModuleId& m : expected_spec.modules()) {
    refs.push_back(decode_tensor(find_section(sections, module_name(m) + ".fp").payload));
    for (int b : bitset.bits)
      cands.push_back(decode_tensor(
          find_section(sections, module_name(m) + ".b" + std::to_string(b)).payload));
  }
  return CandidatePool(expected_spec, bitset, group_size, std::move(refs), std::move(cands));
}

// ---- scores ----

void save_scores(const std::string& path, const SoftScores& scores) {
  scores.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << "spec_hash " << scores.spec_hash << "\n";
  out << "bits";
  for (int b : scores.bits) out << " " << b;
  out << "\n";
  out << "b_target " << format_g17(scores.budget_target) << "\n";
  out << "steps " << scores.steps << "\n";
  out << "seed " << scores.seed << "\n";
  out << "mode " << constraint_mode_name(scores.mode) << "\n";
  const std::size_t k = scores.bits.size();
  for (std::size_t i = 0; i < scores.modules.size(); ++i) {
    const ModuleId& m = scores.modules[i];
    out << m.layer << " " << projection_name(m.proj);
    double eb = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double s = scores.scores[static_cast<std::int64_t>(i * k + j)];
      eb += static_cast<double>(scores.bits[j]) * s;
      out << " " << format_g17(s);
    }
    out << " " << format_g17(eb) << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

SoftScores load_scores(const std::string& path, const ModelSpec& spec) {
  verify_file_integrity(path);
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  SoftScores s;
  std::string key;
  in >> key >> s.spec_hash;
  if (key != "spec_hash") throw IntegrityError("bad scores header: " + path);
  if (s.spec_hash != spec.hash_hex())
    throw IntegrityError("scores spec hash mismatch: expected " + spec.hash_hex());
  in >> key;
  if (key != "bits") throw IntegrityError("bad scores header: " + path);
  std::string rest;
  std::getline(in, rest);
  {
    std::istringstream bs(rest);
    int b;
    while (bs >> b) s.bits.push_back(b);
  }
  std::string mode_name;
  in >> key >> s.budget_target;
  in >> key >> s.steps;
  in >> key >> s.seed;
  in >> key >> mode_name;
  s.mode = constraint_mode_from_name(mode_name);

  s.modules = spec.modules();
  for (const ModuleId& m : s.modules) s.param_counts.push_back(spec.module_param_count(m));
  s.scores = Tensor({static_cast<std::int64_t>(s.modules.size()),
                     static_cast<std::int64_t>(s.bits.size())});
  for (std::size_t i = 0; i < s.modules.size(); ++i) {
    int layer;
    std::string proj;
    in >> layer >> proj;
    if (!in) throw IntegrityError("scores file truncated: " + path);
    if (layer != s.modules[i].layer || proj != projection_name(s.modules[i].proj))
      throw IntegrityError("scores row order mismatch at line " + std::to_string(i));
    for (std::size_t j = 0; j < s.bits.size(); ++j)
      in >> s.scores[static_cast<std::int64_t>(i * s.bits.size() + j)];
    double eb;
    in >> eb;  // redundant column, recomputed below
  }
  s.expected_avg_bits = expected_avg_bits(s.scores, s.param_counts, s.bits);
  s.validate();
  return s;
}

// ---- assignment ----

void save_assignment(const std::string& path, const DiscreteAssignment& assignment,
                     const std::string& spec_hash, double b_target) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << "spec_hash " << spec_hash << "\n";
  out << "b_target " << format_g17(b_target) << "\n";
  out << "solver " << solver_kind_name(assignment.solver) << "\n";
  out << "optimal " << (assignment.optimal ? 1 : 0) << "\n";
  out << "objective " << format_g17(assignment.objective_value) << "\n";
  out << "realized_avg_bits " << format_g17(assignment.realized_avg_bits) << "\n";
  for (std::size_t i = 0; i < assignment.modules.size(); ++i)
    out << assignment.modules[i].layer << " " << projection_name(assignment.modules[i].proj)
        << " " << assignment.chosen_bits[i] << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

LoadedAssignment load_assignment(const std::string& path) {
  verify_file_integrity(path);
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  LoadedAssignment out;
  std::string key, solver_name;
  int optimal = 0;
  in >> key >> out.spec_hash;
  in >> key >> out.b_target;
  in >> key >> solver_name;
  in >> key >> optimal;
  in >> key >> out.assignment.objective_value;
  in >> key >> out.assignment.realized_avg_bits;
  out.assignment.solver = solver_kind_from_name(solver_name);
  out.assignment.optimal = optimal != 0;
  int layer;
  std::string proj;
  int bits;
  while (in >> layer >> proj >> bits) {
    out.assignment.modules.push_back(ModuleId{layer, projection_from_name(proj)});
    out.assignment.chosen_bits.push_back(bits);
  }
  return out;
}

// ---- traces ----

void save_traces(const std::string& path, const TraceEstimate& traces,
                 const std::string& spec_hash) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << "spec_hash " << spec_hash << "\n";
  out << "num_probes " << traces.num_probes << "\n";
  out << "probe_seed " << traces.probe_seed << "\n";
  for (std::size_t i = 0; i < traces.modules.size(); ++i)
    out << traces.modules[i].layer << " " << projection_name(traces.modules[i].proj) << " "
        << format_g17(traces.trace[i]) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

TraceEstimate load_traces(const std::string& path, const ModelSpec& spec) {
  verify_file_integrity(path);
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  TraceEstimate t;
  std::string key, spec_hash;
  in >> key >> spec_hash;
  if (spec_hash != spec.hash_hex()) throw IntegrityError("trace spec hash mismatch");
  in >> key >> t.num_probes;
  in >> key >> t.probe_seed;
  int layer;
  std::string proj;
  double val;
  while (in >> layer >> proj >> val) {
    t.modules.push_back(ModuleId{layer, projection_from_name(proj)});
    t.trace.push_back(val);
  }
  return t;
}

// ---- manifest ----

std::string manifest_path(const std::string& dir) { return (fs::path(dir) / "manifest.json").string(); }

bool manifest_exists(const std::string& dir) { return fs::exists(manifest_path(dir)); }

RunManifest read_manifest(const std::string& dir) {
  std::ifstream in(manifest_path(dir));
  if (!in) throw std::runtime_error("cannot open manifest in " + dir);
  nlohmann::json j;
  in >> j;
  RunManifest m;
  m.tool_version = j.value("tool_version", "");
  m.config_hash = j.value("config_hash", "");
  m.created_unix = j.value("created_unix", std::int64_t{0});
  for (const auto& f : j.value("files", nlohmann::json::array())) {
    ManifestEntry e;
    e.name = f.at("name").get<std::string>();
    e.hash = f.at("fnv1a64").get<std::string>();
    e.bytes = f.at("bytes").get<std::uint64_t>();
    m.files.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const std::string& dir, const RunManifest& manifest) {
  nlohmann::json j;
  j["tool_version"] = manifest.tool_version;
  j["config_hash"] = manifest.config_hash;
  j["created_unix"] = manifest.created_unix;
  j["files"] = nlohmann::json::array();
  for (const ManifestEntry& e : manifest.files)
    j["files"].push_back({{"name", e.name}, {"fnv1a64", e.hash}, {"bytes", e.bytes}});
  std::ofstream out(manifest_path(dir), std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
  out << j.dump(2) << "\n";
}

void manifest_record(RunManifest& manifest, const std::string& dir, const std::string& filename) {
  const std::string full = (fs::path(dir) / filename).string();
  ManifestEntry e;
  e.name = filename;
  e.hash = hash_file(full);
  e.bytes = static_cast<std::uint64_t>(fs::file_size(full));
  for (ManifestEntry& old : manifest.files)
    if (old.name == filename) {
      old = e;
      return;
    }
  manifest.files.push_back(std::move(e));
}

void verify_file_integrity(const std::string& path) {
  const fs::path p(path);
  const std::string dir = p.parent_path().string().empty() ? "." : p.parent_path().string();
  if (!manifest_exists(dir)) return;
  const RunManifest m = read_manifest(dir);
  const std::string name = p.filename().string();
  for (const ManifestEntry& e : m.files) {
    if (e.name != name) continue;
    const std::string actual = hash_file(path);
    if (actual != e.hash)
      throw IntegrityError("hash mismatch for " + path + ": manifest " + e.hash + ", actual " +
                           actual);
    return;
  }
}

std::vector<std::string> verify_manifest(const std::string& dir) {
  const RunManifest m = read_manifest(dir);
  std::vector<std::string> names;
  for (const ManifestEntry& e : m.files) {
    const std::string full = (fs::path(dir) / e.name).string();
    if (!fs::exists(full)) throw IntegrityError("manifest file missing: " + full);
    const std::string actual = hash_file(full);
    if (actual != e.hash)
      throw IntegrityError("hash mismatch for " + full + ": manifest " + e.hash + ", actual " +
                           actual);
    names.push_back(e.name);
  }
  return names;
}

}  // namespace bitbudget
