#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <doctest.h>

#include "bitbudget/container.hpp"
#include "bitbudget/errors.hpp"
#include "test_util.hpp"

using namespace bitbudget;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelSpec tiny_spec() {
  ModelSpec s;
  s.num_layers = 2;
  s.hidden_dim = 8;
  s.num_heads = 2;
  s.ffn_dim = 12;
  s.vocab_size = 16;
  s.max_seq_len = 8;
  s.seed = 77;
  s.module_scales.push_back({1, Projection::up, 4.0});
  return s;
}

}  // namespace

TEST_CASE("tensor encoding round-trips bit-exactly") {
  Rng rng(1);
  Tensor t = testutil::random_tensor({3, 5}, rng, 1e8);
  t[0] = 0.1;           // not exactly representable in decimal
  t[1] = -0.0;          // signed zero
  t[2] = 1e-300;        // subnormal territory
  const Tensor back = decode_tensor(encode_tensor(t));
  CHECK(back.shape() == t.shape());
  for (std::int64_t i = 0; i < t.size(); ++i)
    CHECK(std::memcmp(&back.values()[static_cast<std::size_t>(i)],
                      &t.values()[static_cast<std::size_t>(i)], sizeof(double)) == 0);
}

TEST_CASE("container: sections, trailing-byte detection, declared sizes") {
  const fs::path dir = fresh_dir("bitbudget_container_test");
  const std::string path = (dir / "c.bin").string();
  std::vector<Section> sections;
  sections.push_back({"alpha", {1, 2, 3}});
  sections.push_back({"beta", std::vector<std::uint8_t>(100, 7)});
  write_container(path, sections);

  const std::vector<Section> back = read_container(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "alpha");
  CHECK(back[1].payload.size() == 100);

  // On-disk size equals the header-declared layout exactly.
  std::uintmax_t expect = 16;  // magic + version + count
  for (const Section& s : sections) expect += 4 + s.name.size() + 8 + s.payload.size();
  CHECK(fs::file_size(path) == expect);

  // Trailing garbage is rejected.
  {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    f.put('x');
  }
  CHECK_THROWS_AS(read_container(path), IntegrityError);

  // Bad magic is rejected.
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << "NOTMAGIC and more";
  }
  CHECK_THROWS_AS(read_container(path), IntegrityError);
}

TEST_CASE("model container round trip") {
  const fs::path dir = fresh_dir("bitbudget_model_test");
  const ModelSpec spec = tiny_spec();
  const Model model = build_model(spec);
  const std::string path = (dir / "model.bin").string();
  save_model(path, model);
  const Model back = load_model(path);
  CHECK(back.spec.hash_hex() == spec.hash_hex());
  CHECK(back.spec.module_scales.size() == 1);
  for (std::size_t i = 0; i < model.module_weights.size(); ++i)
    for (std::int64_t j = 0; j < model.module_weights[i].size(); ++j)
      CHECK(back.module_weights[i][j] == model.module_weights[i][j]);
  for (std::int64_t j = 0; j < model.pos_embed.size(); ++j)
    CHECK(back.pos_embed[j] == model.pos_embed[j]);
}

TEST_CASE("pool container round trip and spec-hash check") {
  const fs::path dir = fresh_dir("bitbudget_pool_test");
  const ModelSpec spec = tiny_spec();
  const Model model = build_model(spec);
  BitWidthSet bits;
  const CandidatePool pool = build_pool(model, bits, 4);
  const std::string path = (dir / "pool.bin").string();
  save_pool(path, pool);
  const CandidatePool back = load_pool(path, spec);
  CHECK(back.group_size() == 4);
  for (const ModuleId& m : spec.modules())
    for (int b : bits.bits) {
      const Tensor& x = pool.candidate(m, b);
      const Tensor& y = back.candidate(m, b);
      for (std::int64_t i = 0; i < x.size(); ++i) CHECK(x[i] == y[i]);
    }

  ModelSpec other = spec;
  other.seed = 78;
  CHECK_THROWS_AS(load_pool(path, other), IntegrityError);
}

TEST_CASE("manifest detects corruption on later reads") {
  const fs::path dir = fresh_dir("bitbudget_manifest_test");
  const ModelSpec spec = tiny_spec();
  const Model model = build_model(spec);
  BitWidthSet bits;
  const CandidatePool pool = build_pool(model, bits, 4);
  const std::string pool_path = (dir / "pool.bin").string();
  save_pool(pool_path, pool);

  RunManifest manifest;
  manifest.tool_version = kToolVersion;
  manifest.config_hash = "deadbeef";
  manifest.created_unix = 1;
  manifest_record(manifest, dir.string(), "pool.bin");
  write_manifest(dir.string(), manifest);

  CHECK_NOTHROW(load_pool(pool_path, spec));
  CHECK(verify_manifest(dir.string()) == std::vector<std::string>{"pool.bin"});

  // Flip one payload byte: the manifest hash must catch it.
  {
    std::fstream f(pool_path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(200);
    f.put('\x5a');
  }
  CHECK_THROWS_AS(load_pool(pool_path, spec), IntegrityError);
  CHECK_THROWS_AS(verify_manifest(dir.string()), IntegrityError);
}

TEST_CASE("scores file round trip is exact") {
  const fs::path dir = fresh_dir("bitbudget_scores_test");
  const ModelSpec spec = tiny_spec();
  SoftScores s;
  s.spec_hash = spec.hash_hex();
  s.modules = spec.modules();
  s.bits = {2, 3, 4};
  s.scores = Tensor({static_cast<std::int64_t>(s.modules.size()), 3});
  Rng rng(17);
  for (std::int64_t r = 0; r < s.scores.dim(0); ++r) {
    double sum = 0.0;
    for (int b = 0; b < 3; ++b) {
      s.scores[r * 3 + b] = rng.next_uniform_open();
      sum += s.scores[r * 3 + b];
    }
    for (int b = 0; b < 3; ++b) s.scores[r * 3 + b] /= sum;
  }
  for (const ModuleId& m : s.modules) s.param_counts.push_back(spec.module_param_count(m));
  s.expected_avg_bits = expected_avg_bits(s.scores, s.param_counts, s.bits);
  s.budget_target = 3.0;
  s.steps = 11;
  s.seed = 5;
  s.mode = ConstraintMode::multiplicative_penalty;

  const std::string path = (dir / "scores.txt").string();
  save_scores(path, s);
  const SoftScores back = load_scores(path, spec);
  CHECK(back.mode == s.mode);
  CHECK(back.steps == 11);
  CHECK(back.budget_target == 3.0);
  for (std::int64_t i = 0; i < s.scores.size(); ++i) CHECK(back.scores[i] == s.scores[i]);
  CHECK(back.expected_avg_bits == s.expected_avg_bits);

  ModelSpec other = spec;
  other.seed = 123;
  CHECK_THROWS_AS(load_scores(path, other), IntegrityError);
}

TEST_CASE("assignment file round trip") {
  const fs::path dir = fresh_dir("bitbudget_assign_test");
  const ModelSpec spec = tiny_spec();
  DiscreteAssignment a;
  a.modules = spec.modules();
  for (std::size_t i = 0; i < a.modules.size(); ++i) a.chosen_bits.push_back(2 + static_cast<int>(i % 3));
  a.realized_avg_bits = 2.987654321012345;
  a.objective_value = 0.123456789012345678;
  a.solver = SolverKind::branch_and_bound;
  a.optimal = true;

  const std::string path = (dir / "assignment.txt").string();
  save_assignment(path, a, spec.hash_hex(), 3.0);
  const LoadedAssignment back = load_assignment(path);
  CHECK(back.spec_hash == spec.hash_hex());
  CHECK(back.b_target == 3.0);
  CHECK(back.assignment.chosen_bits == a.chosen_bits);
  CHECK(back.assignment.objective_value == a.objective_value);
  CHECK(back.assignment.realized_avg_bits == a.realized_avg_bits);
  CHECK(back.assignment.solver == SolverKind::branch_and_bound);
  CHECK(back.assignment.optimal);
}

TEST_CASE("trace table round trip") {
  const fs::path dir = fresh_dir("bitbudget_traces_test");
  const ModelSpec spec = tiny_spec();
  TraceEstimate t;
  t.modules = spec.modules();
  Rng rng(3);
  for (std::size_t i = 0; i < t.modules.size(); ++i) t.trace.push_back(rng.next_uniform_open());
  t.num_probes = 9;
  t.probe_seed = 1234;
  const std::string path = (dir / "traces.txt").string();
  save_traces(path, t, spec.hash_hex());
  const TraceEstimate back = load_traces(path, spec);
  CHECK(back.num_probes == 9);
  CHECK(back.probe_seed == 1234);
  CHECK(back.modules == t.modules);
  for (std::size_t i = 0; i < t.trace.size(); ++i) CHECK(back.trace[i] == t.trace[i]);
}
