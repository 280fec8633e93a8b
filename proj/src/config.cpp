#include "bitbudget/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "bitbudget/container.hpp"
#include "bitbudget/rng.hpp"

namespace bitbudget {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, sep)) out.push_back(trim(tok));
  return out;
}

std::vector<ModuleScale> parse_module_scales(const std::string& value) {
  std::vector<ModuleScale> out;
  if (trim(value).empty()) return out;
  for (const std::string& item : split(value, ',')) {
    const std::vector<std::string> parts = split(item, ':');
    if (parts.size() != 3)
      throw std::invalid_argument("module_scales entries must be layer:proj:multiplier");
    ModuleScale s;
    s.layer = std::stoi(parts[0]);
    s.proj = projection_from_name(parts[1]);
    s.multiplier = std::stod(parts[2]);
    out.push_back(s);
  }
  return out;
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + " is not key=value");
    cfg.set_key(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::set_key(const std::string& key, const std::string& value) {
  if (key == "num_layers") num_layers = std::stoi(value);
  else if (key == "hidden_dim") hidden_dim = std::stoi(value);
  else if (key == "num_heads") num_heads = std::stoi(value);
  else if (key == "ffn_dim") ffn_dim = std::stoi(value);
  else if (key == "vocab_size") vocab_size = std::stoi(value);
  else if (key == "max_seq_len") max_seq_len = std::stoi(value);
  else if (key == "model_seed") model_seed = std::stoull(value);
  else if (key == "module_scales") module_scales = parse_module_scales(value);
  else if (key == "num_sequences") num_sequences = std::stoi(value);
  else if (key == "seq_len") seq_len = std::stoi(value);
  else if (key == "data_seed") data_seed = std::stoull(value);
  else if (key == "source") source = value;
  else if (key == "holdout_fraction") holdout_fraction = std::stod(value);
  else if (key == "calibration_file") calibration_file = value;
  else if (key == "bits") {
    bits.clear();
    for (const std::string& b : split(value, ',')) bits.push_back(std::stoi(b));
  } else if (key == "group_size") group_size = std::stoi(value);
  else if (key == "steps") steps = std::stoi(value);
  else if (key == "batch_size") batch_size = std::stoi(value);
  else if (key == "lr") lr = std::stod(value);
  else if (key == "dual_lr") dual_lr = std::stod(value);
  else if (key == "lambda2_init") lambda2_init = std::stod(value);
  else if (key == "tau") tau = std::stod(value);
  else if (key == "momentum") momentum = std::stod(value);
  else if (key == "train_seed") train_seed = std::stoull(value);
  else if (key == "b_target") b_target = std::stod(value);
  else if (key == "mode") mode = value;
  else if (key == "relaxation") relaxation = value;
  else if (key == "extraction") extraction = value;
  else if (key == "solver") solver = value;
  else if (key == "budgets") {
    budgets.clear();
    for (const std::string& b : split(value, ',')) budgets.push_back(std::stod(b));
  } else if (key == "trace_probes") trace_probes = std::stoi(value);
  else if (key == "trace_seed") trace_seed = std::stoull(value);
  else if (key == "out") out = value;
  else throw std::invalid_argument("unknown config key: " + key);
}

void RunConfig::validate() const {
  model_spec().validate();
  calibration_config().validate();
  bitset().validate();
  if (group_size < 1) throw std::invalid_argument("group_size must be >= 1");
  if (seq_len > max_seq_len) throw std::invalid_argument("seq_len exceeds max_seq_len");
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
  const BitWidthSet bs = bitset();
  if (b_target < bs.min_bits() || b_target > bs.max_bits())
    throw std::invalid_argument("b_target outside the candidate bit range");
  constraint_mode_from_name(mode);
  relaxation_mode_from_name(relaxation);
  score_extraction_from_name(extraction);
  solver_kind_from_name(solver);
  calibration_source_from_name(source);
  if (trace_probes < 1) throw std::invalid_argument("trace_probes must be >= 1");
  if (out.empty()) throw std::invalid_argument("out directory must be set");
}

std::string RunConfig::canonical_text() const {
  std::ostringstream os;
  os << "num_layers=" << num_layers << "\nhidden_dim=" << hidden_dim << "\nnum_heads="
     << num_heads << "\nffn_dim=" << ffn_dim << "\nvocab_size=" << vocab_size
     << "\nmax_seq_len=" << max_seq_len << "\nmodel_seed=" << model_seed << "\nmodule_scales=";
  for (std::size_t i = 0; i < module_scales.size(); ++i)
    os << (i ? "," : "") << module_scales[i].layer << ":" << projection_name(module_scales[i].proj)
       << ":" << module_scales[i].multiplier;
  os << "\nnum_sequences=" << num_sequences << "\nseq_len=" << seq_len << "\ndata_seed="
     << data_seed << "\nsource=" << source << "\nholdout_fraction=" << holdout_fraction
     << "\ncalibration_file=" << calibration_file << "\nbits=";
  for (std::size_t i = 0; i < bits.size(); ++i) os << (i ? "," : "") << bits[i];
  os << "\ngroup_size=" << group_size << "\nsteps=" << steps << "\nbatch_size=" << batch_size
     << "\nlr=" << lr << "\ndual_lr=" << effective_dual_lr() << "\nlambda2_init=" << lambda2_init << "\ntau=" << tau << "\nmomentum="
     << momentum << "\ntrain_seed=" << train_seed << "\nb_target=" << b_target << "\nmode="
     << mode << "\nrelaxation=" << relaxation << "\nextraction=" << extraction << "\nsolver="
     << solver << "\nbudgets=";
  const std::vector<double> eb = effective_budgets();
  for (std::size_t i = 0; i < eb.size(); ++i) os << (i ? "," : "") << eb[i];
  os << "\ntrace_probes=" << trace_probes << "\ntrace_seed=" << trace_seed << "\n";
  return os.str();
}

std::string RunConfig::hash_hex() const {
  return hash_hex64(fnv1a64(canonical_text()));
}

ModelSpec RunConfig::model_spec() const {
  ModelSpec s;
  s.num_layers = num_layers;
  s.hidden_dim = hidden_dim;
  s.num_heads = num_heads;
  s.ffn_dim = ffn_dim;
  s.vocab_size = vocab_size;
  s.max_seq_len = max_seq_len;
  s.seed = model_seed;
  s.module_scales = module_scales;
  return s;
}

CalibrationConfig RunConfig::calibration_config() const {
  CalibrationConfig c;
  c.num_sequences = num_sequences;
  c.seq_len = seq_len;
  c.vocab_size = vocab_size;
  c.seed = data_seed;
  c.source = calibration_source_from_name(source);
  c.holdout_fraction = holdout_fraction;
  c.file_path = calibration_file;
  return c;
}

BitWidthSet RunConfig::bitset() const {
  BitWidthSet b;
  b.bits = bits;
  return b;
}

Stage1Config RunConfig::stage1_config() const {
  Stage1Config c;
  c.steps = steps;
  c.batch_size = batch_size;
  c.lr = lr;
  c.dual_lr = effective_dual_lr();
  c.lambda2_init = lambda2_init;
  c.tau = tau;
  c.momentum = momentum;
  c.seed = train_seed;
  c.b_target = b_target;
  c.mode = constraint_mode_from_name(mode);
  c.relaxation = relaxation_mode_from_name(relaxation);
  c.extraction = score_extraction_from_name(extraction);
  return c;
}

SolverKind RunConfig::solver_kind() const { return solver_kind_from_name(solver); }

}  // namespace bitbudget
