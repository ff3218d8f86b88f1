// SPDX-License-Identifier: Apache-2.0

#include "advrobust/runner.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "advrobust/report.hpp"

namespace advrobust {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Protocol protocol) {
  switch (protocol) {
    case Protocol::kInjectionAttack: return "injection_attack";
    case Protocol::kKSweep: return "k_sweep";
    case Protocol::kMcqEval: return "mcq_eval";
    case Protocol::kDescribeClassify: return "describe_classify";
  }
  return "unknown";
}

Protocol parse_protocol(std::string_view text) {
  for (auto p : {Protocol::kInjectionAttack, Protocol::kKSweep, Protocol::kMcqEval,
                 Protocol::kDescribeClassify}) {
    if (to_string(p) == text) return p;
  }
  throw InvariantError("unknown protocol '" + std::string(text) + "'");
}

std::string_view to_string(AttackVariation v) {
  switch (v) {
    case AttackVariation::kColor: return "color";
    case AttackVariation::kShape: return "shape";
    case AttackVariation::kTexture: return "texture";
  }
  return "unknown";
}

AttackVariation parse_variation(std::string_view text) {
  for (auto v : {AttackVariation::kColor, AttackVariation::kShape,
                 AttackVariation::kTexture}) {
    if (to_string(v) == text) return v;
  }
  throw InvariantError("attack_variation must be color, shape or texture");
}

PromptSpec PromptTemplate::instantiate(int repeat_count, std::string target) const {
  PromptSpec spec;
  spec.base_prompt = base_prompt;
  spec.security_spec = security_spec;
  spec.repeat_segment = repeat_segment;
  spec.repeat_count = repeat_count;
  spec.prefill = prefill;
  spec.target = std::move(target);
  return spec;
}

void validate_item_id(std::string_view item_id) {
  if (item_id.empty() || item_id.front() == '.') {
    throw InvariantError("item_id '" + std::string(item_id) +
                         "' must be non-empty and not start with '.'");
  }
  for (char ch : item_id) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                    (ch >= '0' && ch <= '9') || ch == '.' || ch == '_' || ch == '-';
    if (!ok) {
      throw InvariantError("item_id '" + std::string(item_id) +
                           "' may only contain [A-Za-z0-9._-]");
    }
  }
}

namespace {

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvariantError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  return p.is_absolute() ? p : base / p;
}

// Numbers, or "a/b" strings such as "16/255".
double parse_budget(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto text = j.get<std::string>();
    auto slash = text.find('/');
    try {
      if (slash == std::string::npos) return std::stod(text);
      return std::stod(text.substr(0, slash)) / std::stod(text.substr(slash + 1));
    } catch (const std::exception&) {
    }
  }
  throw InvariantError("malformed budget " + j.dump());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (!t.empty()) lines.emplace_back(t);
  }
  return lines;
}

}  // namespace

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvariantError("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw InvariantError("manifest " + path.string() + " does not parse: " + e.what());
  }
  const fs::path base = path.parent_path();
  DatasetManifest manifest;
  std::set<std::string> seen;
  for (const auto& e : doc.at("entries")) {
    ManifestEntry entry;
    entry.item_id = e.at("item_id").get<std::string>();
    validate_item_id(entry.item_id);
    if (!seen.insert(entry.item_id).second) {
      throw InvariantError("duplicate item_id '" + entry.item_id + "' in manifest");
    }
    entry.clean_image = resolve(base, e.at("clean_image").get<std::string>());
    if (e.contains("adversarial_image") && !e.at("adversarial_image").is_null()) {
      entry.adversarial_image =
          resolve(base, e.at("adversarial_image").get<std::string>());
    }
    entry.true_label = e.value("true_label", std::string{});
    if (e.contains("attack_variation") && !e.at("attack_variation").is_null()) {
      entry.attack_variation =
          parse_variation(e.at("attack_variation").get<std::string>());
    }
    if (e.contains("target") && !e.at("target").is_null()) {
      entry.target = e.at("target").get<std::string>();
    }
    for (const auto* p : {&entry.clean_image}) {
      if (!fs::exists(*p)) throw InvariantError("missing image " + p->string());
    }
    if (entry.adversarial_image && !fs::exists(*entry.adversarial_image)) {
      throw InvariantError("missing image " + entry.adversarial_image->string());
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

AttackConfig attack_preset(Protocol protocol) {
  AttackConfig c;
  c.step_size = 0.1;
  if (protocol == Protocol::kInjectionAttack) {
    c.epsilon = 16.0 / 255.0;
    c.max_steps = 300;
    c.early_stop = false;
  } else {
    c.epsilon = 64.0 / 255.0;
    c.max_steps = 100;
    c.early_stop = true;
  }
  return c;
}

namespace {

AttackConfig parse_attack(const json& j, Protocol protocol) {
  AttackConfig c = attack_preset(protocol);
  if (j.is_null()) return c;
  if (j.contains("epsilon")) c.epsilon = parse_budget(j.at("epsilon"));
  if (j.contains("step_size")) c.step_size = parse_budget(j.at("step_size"));
  if (j.contains("max_steps")) c.max_steps = j.at("max_steps").get<int>();
  if (j.contains("norm")) c.norm = parse_norm(j.at("norm").get<std::string>());
  if (j.contains("success_match")) {
    c.success_match = parse_success_match(j.at("success_match").get<std::string>());
  }
  if (j.contains("window_radius")) c.window_radius = j.at("window_radius").get<int>();
  if (j.contains("update_rule")) {
    c.update_rule = parse_update_rule(j.at("update_rule").get<std::string>());
  }
  if (j.contains("early_stop")) c.early_stop = j.at("early_stop").get<bool>();
  if (j.contains("max_new_tokens")) c.max_new_tokens = j.at("max_new_tokens").get<int>();
  return validate_config(c);
}

// Each field may be given inline or as "<field>_file" (plain text, one
// trailing newline dropped).
std::string template_field(const json& j, const std::string& field,
                           const fs::path& base) {
  if (j.contains(field)) return j.at(field).get<std::string>();
  const std::string file_key = field + "_file";
  if (j.contains(file_key)) {
    auto text = read_text_file(resolve(base, j.at(file_key).get<std::string>()));
    if (!text.empty() && text.back() == '\n') text.pop_back();
    return text;
  }
  return {};
}

PromptTemplate parse_template(const json& j, const fs::path& base) {
  PromptTemplate t;
  t.base_prompt = template_field(j, "base_prompt", base);
  t.security_spec = template_field(j, "security_spec", base);
  t.repeat_segment = template_field(j, "repeat_segment", base);
  t.prefill = template_field(j, "prefill", base);
  return t;
}

json template_json(const PromptTemplate& t) {
  return {{"base_prompt", t.base_prompt},
          {"security_spec", t.security_spec},
          {"repeat_segment", t.repeat_segment},
          {"prefill", t.prefill}};
}

std::string file_digest(const fs::path& path) {
  return sha256_hex(read_text_file(path));
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& doc, const fs::path& base_dir) {
  ExperimentConfig c;
  c.base_dir = base_dir;
  c.schema_version = doc.value("schema_version", kConfigSchemaVersion);
  if (c.schema_version != kConfigSchemaVersion) {
    throw InvariantError("unsupported schema_version " +
                         std::to_string(c.schema_version));
  }
  c.protocol = parse_protocol(doc.at("protocol").get<std::string>());
  if (doc.contains("adapter")) c.adapter = doc.at("adapter");
  c.model_label = doc.value("model_label", c.adapter.is_object()
                                               ? c.adapter.value("name", std::string{})
                                               : std::string{});
  c.attack = parse_attack(doc.value("attack", json()), c.protocol);

  if (doc.contains("prompt")) {
    c.prompt = parse_template(doc.at("prompt"), base_dir);
  } else if (c.protocol == Protocol::kInjectionAttack) {
    auto spec = fixtures::injection_prompt_spec(true);
    c.prompt = {spec.base_prompt, spec.security_spec, "", spec.prefill};
  }
  if (doc.contains("prompts_by_variation")) {
    for (const auto& [key, value] : doc.at("prompts_by_variation").items()) {
      parse_variation(key);
      c.prompts_by_variation[key] = parse_template(value, base_dir);
    }
  }
  if (doc.contains("k_values")) c.k_values = doc.at("k_values").get<std::vector<int>>();
  for (int k : c.k_values) {
    if (k < 0) throw InvariantError("K values must be >= 0");
  }
  if (doc.contains("epsilon_values")) {
    for (const auto& e : doc.at("epsilon_values")) {
      c.epsilon_values.push_back(parse_budget(e));
    }
  }
  if (c.epsilon_values.empty()) c.epsilon_values.push_back(c.attack.epsilon);
  for (double e : c.epsilon_values) {
    AttackConfig probe = c.attack;
    probe.epsilon = e;
    validate_config(probe);
  }
  if (doc.contains("checkpoints")) {
    c.checkpoints = doc.at("checkpoints").get<std::vector<int>>();
  }
  if (doc.contains("manifest")) {
    c.manifest = resolve(base_dir, doc.at("manifest").get<std::string>());
  }
  c.replicates = doc.value("replicates", 1);
  if (c.replicates < 1) throw InvariantError("replicates must be >= 1");
  c.output_dir = resolve(base_dir, doc.value("output_dir", std::string("out")));
  c.seed = doc.value("seed", std::uint64_t{0});
  c.workers = std::max(1, doc.value("workers", 1));

  if (doc.contains("mcq")) {
    const auto& m = doc.at("mcq");
    c.mcq.n_options = m.value("n_options", 30);
    if (m.contains("label_pool")) {
      c.mcq.label_pool = resolve(base_dir, m.at("label_pool").get<std::string>());
    }
    c.mcq.tmpl = parse_mcq_template(m.value("template", std::string("standard")));
    c.mcq.nocot_max_tokens = m.value("nocot_max_tokens", kNoCotMaxTokens);
    c.mcq.cot_max_tokens = m.value("cot_max_tokens", kCotMaxTokens);
  }
  if (doc.contains("describe")) {
    const auto& d = doc.at("describe");
    c.describe.describer = d.at("describer");
    c.describe.classifier = d.at("classifier");
    if (d.contains("classifier_high")) c.describe.classifier_high = d.at("classifier_high");
    c.describe.describe_prompt = template_field(d, "describe_prompt", base_dir);
    if (d.contains("labels")) {
      c.describe.labels = resolve(base_dir, d.at("labels").get<std::string>());
    }
    c.describe.describe_max_tokens = d.value("describe_max_tokens", kCotMaxTokens);
    c.describe.classify_max_tokens = d.value("classify_max_tokens", 20);
    if (c.model_label.empty()) {
      c.model_label = c.describe.describer.value("name", std::string{});
    }
  }

  switch (c.protocol) {
    case Protocol::kKSweep:
      if (c.k_values.empty()) throw InvariantError("k_values must be non-empty for k_sweep");
      [[fallthrough]];
    case Protocol::kInjectionAttack:
    case Protocol::kMcqEval:
      if (!c.adapter.is_object()) throw InvariantError("adapter description missing");
      break;
    case Protocol::kDescribeClassify:
      if (!doc.contains("describe")) throw InvariantError("describe section missing");
      if (c.describe.describe_prompt.empty()) {
        throw InvariantError("describe.describe_prompt must be non-empty");
      }
      break;
  }
  if (c.manifest.empty()) throw InvariantError("manifest path missing");
  // Parsing validates existence and ids up front.
  DatasetManifest::load(c.manifest);
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvariantError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw InvariantError("config " + path.string() + " does not parse: " + e.what());
  }
  return parse_experiment_config(doc, path.parent_path());
}

json canonical_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["protocol"] = to_string(c.protocol);
  j["adapter"] = c.adapter;
  j["model_label"] = c.model_label;
  j["attack"] = serialize(c.attack);
  j["prompt"] = template_json(c.prompt);
  json by_variation = json::object();
  for (const auto& [k, v] : c.prompts_by_variation) by_variation[k] = template_json(v);
  j["prompts_by_variation"] = by_variation;
  j["k_values"] = c.k_values;
  j["epsilon_values"] = c.epsilon_values;
  j["checkpoints"] = c.checkpoints;
  j["manifest_sha256"] = file_digest(c.manifest);
  j["replicates"] = c.replicates;
  j["seed"] = c.seed;
  j["mcq"] = {{"n_options", c.mcq.n_options},
              {"label_pool_sha256",
               c.mcq.label_pool ? file_digest(*c.mcq.label_pool) : std::string("builtin")},
              {"template", to_string(c.mcq.tmpl)},
              {"nocot_max_tokens", c.mcq.nocot_max_tokens},
              {"cot_max_tokens", c.mcq.cot_max_tokens}};
  j["describe"] = {{"describer", c.describe.describer},
                   {"classifier", c.describe.classifier},
                   {"classifier_high", c.describe.classifier_high.value_or(json())},
                   {"describe_prompt", c.describe.describe_prompt},
                   {"labels_sha256", c.describe.labels ? file_digest(*c.describe.labels)
                                                       : std::string("builtin")},
                   {"describe_max_tokens", c.describe.describe_max_tokens},
                   {"classify_max_tokens", c.describe.classify_max_tokens}};
  return j;
}

std::string run_hash(const ExperimentConfig& config) {
  return sha256_hex(canonical_json(config).dump());
}

// ---------------------------------------------------------------------------
// Images

Image load_image(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvariantError("cannot open image " + path.string());
  json j = json::parse(in);
  ImageShape shape{j.at("channels").get<std::size_t>(), j.at("height").get<std::size_t>(),
                   j.at("width").get<std::size_t>()};
  return Image(shape, j.at("pixels").get<std::vector<double>>());
}

void save_image(const Image& image, const fs::path& path) {
  json j;
  j["channels"] = image.shape().channels;
  j["height"] = image.shape().height;
  j["width"] = image.shape().width;
  j["pixels"] = std::vector<double>(image.pixels().begin(), image.pixels().end());
  write_file_atomic(path, j.dump() + "\n");
}

// ---------------------------------------------------------------------------
// Persistence

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

json to_json(const TraceHeader& h) {
  json j;
  j["type"] = "header";
  j["protocol"] = to_string(h.protocol);
  j["model"] = h.model;
  j["item_id"] = h.item_id;
  j["variation"] = h.variation ? json(to_string(*h.variation)) : json();
  j["K"] = h.repeat_count;
  j["epsilon"] = h.epsilon;
  j["replicate"] = h.replicate;
  j["security_spec"] = h.security_spec;
  j["run_hash"] = h.run_hash;
  j["config_hash"] = h.config_hash;
  j["seed"] = h.seed;
  j["config"] = serialize(h.config);
  j["spec"] = serialize(h.spec);
  return j;
}

TraceHeader trace_header_from_json(const json& j) {
  if (j.value("type", std::string{}) != "header") {
    throw InvariantError("trace file does not start with a header line");
  }
  TraceHeader h;
  h.protocol = parse_protocol(j.at("protocol").get<std::string>());
  h.model = j.at("model").get<std::string>();
  h.item_id = j.at("item_id").get<std::string>();
  if (!j.at("variation").is_null()) {
    h.variation = parse_variation(j.at("variation").get<std::string>());
  }
  h.repeat_count = j.at("K").get<int>();
  h.epsilon = j.at("epsilon").get<double>();
  h.replicate = j.at("replicate").get<int>();
  h.security_spec = j.at("security_spec").get<bool>();
  h.run_hash = j.at("run_hash").get<std::string>();
  h.config_hash = j.at("config_hash").get<std::string>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.config = parse_attack_config(j.at("config").get<std::string>());
  h.spec = parse_prompt_spec(j.at("spec").get<std::string>());
  return h;
}

namespace {

std::string step_line(const TraceRecord& r) {
  json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["success"] = r.success;
  j["linf_dev"] = r.linf_dev;
  return j.dump();
}

std::string summary_line(const AttackTrace& trace) {
  json j;
  j["type"] = "summary";
  j["initial_loss"] = trace.initial_loss;
  j["success_step"] = trace.success_step ? json(*trace.success_step) : json();
  j["diagnostic"] = trace.diagnostic ? json(*trace.diagnostic) : json();
  return j.dump();
}

}  // namespace

void write_trace_file(const fs::path& path, const TraceFile& file) {
  std::string out = to_json(file.header).dump() + "\n";
  for (const auto& r : file.trace.records) out += step_line(r) + "\n";
  out += summary_line(file.trace) + "\n";
  write_file_atomic(path, out);
}

TraceFile read_trace_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvariantError("cannot open trace " + path.string());
  TraceFile file;
  std::string line;
  if (!std::getline(in, line)) throw InvariantError("empty trace " + path.string());
  file.header = trace_header_from_json(json::parse(line));
  file.trace.config_hash = file.header.config_hash;
  bool saw_summary = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    if (j.contains("type")) {
      if (j.at("type") == "summary") {
        saw_summary = true;
        file.trace.initial_loss = j.at("initial_loss").get<double>();
        if (!j.at("diagnostic").is_null()) {
          file.trace.diagnostic = j.at("diagnostic").get<std::string>();
        }
      }
      continue;
    }
    TraceRecord r;
    r.step = j.at("step").get<int>();
    r.loss = j.at("loss").get<double>();
    r.success = j.at("success").get<bool>();
    r.linf_dev = j.at("linf_dev").get<double>();
    file.trace.records.push_back(r);
  }
  if (!saw_summary) throw InvariantError("trace " + path.string() + " is incomplete");
  file.trace.success_step = first_success_step(file.trace.records);
  return file;
}

json to_json(const EvalRecord& r) {
  json j;
  j["item_id"] = r.item_id;
  j["condition"] = {{"data", r.data_condition}, {"compute", r.compute_condition}};
  j["raw_output"] = r.raw_output;
  j["parsed"] = r.parsed;
  j["correct"] = r.correct;
  j["model"] = r.model;
  j["true_label"] = r.true_label;
  j["config_hash"] = r.config_hash;
  j["seed"] = r.seed;
  if (r.error) j["error"] = *r.error;
  return j;
}

EvalRecord eval_record_from_json(const json& j) {
  EvalRecord r;
  r.item_id = j.at("item_id").get<std::string>();
  r.data_condition = j.at("condition").at("data").get<std::string>();
  r.compute_condition = j.at("condition").at("compute").get<std::string>();
  r.raw_output = j.at("raw_output").get<std::string>();
  r.parsed = j.at("parsed");
  r.correct = j.at("correct").get<bool>();
  r.model = j.value("model", std::string{});
  r.true_label = j.value("true_label", std::string{});
  r.config_hash = j.value("config_hash", std::string{});
  r.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("error")) r.error = j.at("error").get<std::string>();
  return r;
}

std::vector<EvalRecord> read_eval_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvariantError("cannot open records " + path.string());
  std::vector<EvalRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(eval_record_from_json(json::parse(line)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cell execution

namespace {

using AdapterSet = std::vector<std::unique_ptr<ModelAdapter>>;

struct Cell {
  fs::path output;
  /// True when `output` already holds this cell's finished result.
  std::function<bool()> done;
  std::function<void(AdapterSet&)> compute;
};

const AdapterRegistry& registry_of(const RunOptions& options) {
  static const AdapterRegistry builtins = AdapterRegistry::with_builtins();
  return options.registry ? *options.registry : builtins;
}

struct EffectiveRun {
  ExperimentConfig config;
  std::string hash;
};

EffectiveRun effective(const ExperimentConfig& config, const RunOptions& options) {
  EffectiveRun run{config, {}};
  if (options.seed_override) run.config.seed = *options.seed_override;
  if (options.out_override) run.config.output_dir = *options.out_override;
  run.hash = run_hash(run.config);
  return run;
}

void remove_stale_temporaries(const fs::path& dir) {
  if (!fs::exists(dir)) return;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".tmp") {
      fs::remove(entry.path());
    }
  }
}

void prepare_output(const EffectiveRun& run) {
  fs::create_directories(run.config.output_dir);
  remove_stale_temporaries(run.config.output_dir);
  json run_file = canonical_json(run.config);
  run_file["run_hash"] = run.hash;
  write_file_atomic(run.config.output_dir / "run.json", run_file.dump(2) + "\n");
}

RunSummary execute(std::vector<Cell>& cells, const RunOptions& options,
                   int workers, const std::function<AdapterSet()>& make_adapters) {
  RunSummary summary;
  summary.cells_total = static_cast<int>(cells.size());

  std::vector<Cell*> pending;
  for (auto& cell : cells) {
    bool done = false;
    if (options.resume) {
      try {
        done = cell.done();
      } catch (const std::exception&) {
        done = false;
      }
    }
    if (done) {
      ++summary.cells_skipped;
    } else {
      pending.push_back(&cell);
    }
  }
  if (options.max_cells && static_cast<int>(pending.size()) > *options.max_cells) {
    pending.resize(static_cast<std::size_t>(std::max(0, *options.max_cells)));
  }
  if (pending.empty()) return summary;

  std::atomic<std::size_t> next{0};
  std::atomic<int> ran{0};
  std::mutex error_mutex;
  std::vector<std::pair<std::size_t, std::string>> errors;

  auto worker = [&] {
    AdapterSet adapters;
    try {
      adapters = make_adapters();
    } catch (const std::exception& e) {
      std::lock_guard lock(error_mutex);
      errors.emplace_back(0, std::string("adapter load failure: ") + e.what());
      return;
    }
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      try {
        pending[i]->compute(adapters);
        ++ran;
      } catch (const std::exception& e) {
        std::lock_guard lock(error_mutex);
        errors.emplace_back(i, pending[i]->output.filename().string() + ": " + e.what());
      }
    }
  };

  const int n = std::clamp(workers, 1, static_cast<int>(pending.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < n; ++w) pool.emplace_back(worker);
  }
  std::sort(errors.begin(), errors.end());
  for (auto& [index, message] : errors) summary.errors.push_back(std::move(message));
  summary.cells_run = ran;
  return summary;
}

std::string budget_token(double epsilon) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", epsilon * 255.0);
  return buf;
}

std::string real_token(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

bool trace_done(const fs::path& path, const std::string& run_hash,
                const std::string& cell_hash) {
  if (!fs::exists(path)) return false;
  auto file = read_trace_file(path);
  return file.header.run_hash == run_hash && file.header.config_hash == cell_hash;
}

struct AttackCell {
  TraceHeader header;
  fs::path image;
};

void add_attack_cell(std::vector<Cell>& cells, const AttackCell& spec,
                     const fs::path& output) {
  cells.push_back(Cell{
      output,
      [output, run = spec.header.run_hash, hash = spec.header.config_hash] {
        return trace_done(output, run, hash);
      },
      [spec, output](AdapterSet& adapters) {
        const Image clean = load_image(spec.image);
        TraceFile file{spec.header, {}};
        // Step lines are streamed into the buffer as the attack runs; the
        // buffer only reaches disk through an atomic rename.
        std::string body;
        file.trace = pgd_attack(*adapters.front(), clean, spec.header.spec,
                                spec.header.config,
                                [&body](const TraceRecord& r, const Image&) {
                                  body += step_line(r) + "\n";
                                });
        std::string out = to_json(file.header).dump() + "\n" + body +
                          summary_line(file.trace) + "\n";
        write_file_atomic(output, out);
      }});
}

std::function<AdapterSet()> single_adapter(const ExperimentConfig& config,
                                           const RunOptions& options) {
  return [&config, &options] {
    AdapterSet set;
    set.push_back(registry_of(options).create(config.adapter, config.base_dir));
    if (!set.front()->capabilities().supports_generation) {
      throw AdapterError(set.front()->name() + " cannot generate text");
    }
    return set;
  };
}

const PromptTemplate& template_for(const ExperimentConfig& config,
                                   const ManifestEntry& entry) {
  if (entry.attack_variation) {
    auto it = config.prompts_by_variation.find(std::string(to_string(*entry.attack_variation)));
    if (it != config.prompts_by_variation.end()) return it->second;
  }
  return config.prompt;
}

}  // namespace

RunSummary run_k_sweep(const ExperimentConfig& config, const RunOptions& options) {
  if (config.protocol != Protocol::kKSweep) throw InvariantError("protocol is not k_sweep");
  const auto run = effective(config, options);
  const auto& c = run.config;
  const auto manifest = DatasetManifest::load(c.manifest);
  prepare_output(run);

  std::vector<Cell> cells;
  for (const auto& entry : manifest.entries) {
    if (!entry.target) {
      throw InvariantError("manifest entry '" + entry.item_id + "' has no target");
    }
    const std::string variation =
        entry.attack_variation ? std::string(to_string(*entry.attack_variation)) : "none";
    for (double epsilon : c.epsilon_values) {
      for (int k : c.k_values) {
        for (int rep = 0; rep < c.replicates; ++rep) {
          AttackCell cell;
          auto& h = cell.header;
          h.protocol = c.protocol;
          h.model = c.model_label;
          h.item_id = entry.item_id;
          h.variation = entry.attack_variation;
          h.repeat_count = k;
          h.epsilon = epsilon;
          h.replicate = rep;
          h.spec = template_for(c, entry).instantiate(k, *entry.target);
          h.security_spec = !h.spec.security_spec.empty();
          h.run_hash = run.hash;
          h.seed = derive_seed("k_sweep|" + std::to_string(c.seed) + "|" + entry.item_id +
                               "|" + std::to_string(k) + "|" + real_token(epsilon) + "|" +
                               std::to_string(rep));
          h.config = c.attack;
          h.config.epsilon = epsilon;
          h.config.seed = h.seed;
          h.config_hash = config_hash(h.config, h.spec);
          cell.image = entry.clean_image;
          add_attack_cell(cells, cell,
                          c.output_dir / "traces" /
                              (entry.item_id + "__" + variation + "__K" + std::to_string(k) +
                               "__eps" + budget_token(epsilon) + "__r" +
                               std::to_string(rep) + ".jsonl"));
        }
      }
    }
  }
  return execute(cells, options, c.workers, single_adapter(c, options));
}

RunSummary run_injection_attack(const ExperimentConfig& config, const RunOptions& options) {
  if (config.protocol != Protocol::kInjectionAttack) {
    throw InvariantError("protocol is not injection_attack");
  }
  const auto run = effective(config, options);
  const auto& c = run.config;
  const auto manifest = DatasetManifest::load(c.manifest);
  prepare_output(run);

  const int k = c.k_values.empty() ? 0 : c.k_values.front();
  std::vector<Cell> cells;
  for (const auto& entry : manifest.entries) {
    const std::string target =
        entry.target ? *entry.target : std::string(fixtures::injection_target());
    for (bool with_spec : {false, true}) {
      for (int rep = 0; rep < c.replicates; ++rep) {
        AttackCell cell;
        auto& h = cell.header;
        h.protocol = c.protocol;
        h.model = c.model_label;
        h.item_id = entry.item_id;
        h.variation = entry.attack_variation;
        h.epsilon = c.attack.epsilon;
        h.replicate = rep;
        PromptTemplate tmpl = template_for(c, entry);
        if (!with_spec) {
          tmpl.security_spec.clear();
          tmpl.repeat_segment.clear();
        }
        h.repeat_count = with_spec ? k : 0;
        h.spec = tmpl.instantiate(h.repeat_count, target);
        h.security_spec = with_spec;
        h.run_hash = run.hash;
        h.seed = derive_seed("injection_attack|" + std::to_string(c.seed) + "|" +
                             entry.item_id + "|" + (with_spec ? "spec" : "nospec") + "|" +
                             std::to_string(rep));
        h.config = c.attack;
        h.config.seed = h.seed;
        h.config_hash = config_hash(h.config, h.spec);
        cell.image = entry.clean_image;
        add_attack_cell(cells, cell,
                        c.output_dir / "traces" /
                            (entry.item_id + "__spec" + (with_spec ? "on" : "off") + "__r" +
                             std::to_string(rep) + ".jsonl"));
      }
    }
  }
  auto summary = execute(cells, options, c.workers, single_adapter(c, options));
  if (summary.complete()) {
    std::vector<TraceFile> traces;
    for (const auto& cell : cells) traces.push_back(read_trace_file(cell.output));
    const auto table = injection_summary(traces, c.checkpoints, c.attack.window_radius);
    write_file_atomic(c.output_dir / "injection_summary.csv", to_csv(table));
  }
  return summary;
}

namespace {

std::vector<std::string> label_list(const std::optional<fs::path>& path) {
  if (!path) {
    auto builtin = fixtures::classification_labels();
    return {builtin.begin(), builtin.end()};
  }
  return read_lines(*path);
}

bool records_done(const fs::path& path, const std::string& hash) {
  if (!fs::exists(path)) return false;
  auto records = read_eval_records(path);
  if (records.empty()) return false;
  return std::all_of(records.begin(), records.end(),
                     [&](const EvalRecord& r) { return r.config_hash == hash; });
}

std::string records_text(const std::vector<EvalRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

// Concatenates per-item files in manifest order.
void merge_records(const ExperimentConfig& c, const DatasetManifest& manifest) {
  std::string out;
  for (const auto& entry : manifest.entries) {
    out += read_text_file(c.output_dir / "records" / (entry.item_id + ".jsonl"));
  }
  write_file_atomic(c.output_dir / "records.jsonl", out);
}

std::vector<std::pair<std::string, fs::path>> data_conditions(const ManifestEntry& entry) {
  std::vector<std::pair<std::string, fs::path>> out{{"clean", entry.clean_image}};
  if (entry.adversarial_image) out.emplace_back("adv", *entry.adversarial_image);
  return out;
}

}  // namespace

RunSummary run_mcq_eval(const ExperimentConfig& config, const RunOptions& options) {
  if (config.protocol != Protocol::kMcqEval) throw InvariantError("protocol is not mcq_eval");
  const auto run = effective(config, options);
  const auto& c = run.config;
  const auto manifest = DatasetManifest::load(c.manifest);
  const auto pool = label_list(c.mcq.label_pool);
  prepare_output(run);

  std::vector<Cell> cells;
  for (const auto& entry : manifest.entries) {
    const fs::path output = c.output_dir / "records" / (entry.item_id + ".jsonl");
    cells.push_back(Cell{
        output, [output, hash = run.hash] { return records_done(output, hash); },
        [&c, &pool, entry, output, hash = run.hash](AdapterSet& adapters) {
          const std::uint64_t seed =
              derive_seed("mcq_eval|" + std::to_string(c.seed) + "|" + entry.item_id);
          MCQItem item = build_mcq(entry.true_label, pool, c.mcq.n_options, seed);
          item.item_id = entry.item_id;
          item.image_ref = entry.clean_image.filename().string();
          std::vector<EvalRecord> records;
          for (const auto& [data, image_path] : data_conditions(entry)) {
            const Image image = load_image(image_path);
            for (bool cot : {false, true}) {
              EvalRecord r;
              r.item_id = entry.item_id;
              r.data_condition = data;
              r.compute_condition = cot ? "cot" : "nocot";
              r.model = c.model_label;
              r.true_label = entry.true_label;
              r.config_hash = hash;
              r.seed = seed;
              r.parsed = nullptr;
              try {
                PromptSpec spec;
                spec.base_prompt = render_mcq_prompt(item, cot, c.mcq.tmpl);
                r.raw_output = adapters.front()->generate(
                    image, spec, cot ? c.mcq.cot_max_tokens : c.mcq.nocot_max_tokens);
                auto parsed = parse_answer(r.raw_output, cot, c.mcq.n_options);
                if (parsed.ok()) {
                  r.parsed = *parsed.index;
                  r.correct = item.options[static_cast<std::size_t>(*parsed.index - 1)] ==
                              item.true_label;
                } else {
                  r.error = "parse failure: " + parsed.failure;
                }
              } catch (const std::exception& e) {
                r.error = std::string("generation failure: ") + e.what();
              }
              records.push_back(std::move(r));
            }
          }
          write_file_atomic(output, records_text(records));
        }});
  }
  auto summary = execute(cells, options, c.workers, single_adapter(c, options));
  if (summary.complete()) merge_records(c, manifest);
  return summary;
}

RunSummary run_describe_classify(const ExperimentConfig& config, const RunOptions& options) {
  if (config.protocol != Protocol::kDescribeClassify) {
    throw InvariantError("protocol is not describe_classify");
  }
  const auto run = effective(config, options);
  const auto& c = run.config;
  const auto manifest = DatasetManifest::load(c.manifest);
  const auto labels = label_list(c.describe.labels);
  prepare_output(run);

  std::vector<Cell> cells;
  for (const auto& entry : manifest.entries) {
    const fs::path output = c.output_dir / "records" / (entry.item_id + ".jsonl");
    cells.push_back(Cell{
        output, [output, hash = run.hash] { return records_done(output, hash); },
        [&c, &labels, entry, output, hash = run.hash](AdapterSet& adapters) {
          const std::uint64_t seed =
              derive_seed("describe_classify|" + std::to_string(c.seed) + "|" + entry.item_id);
          std::vector<EvalRecord> records;
          for (const auto& [data, image_path] : data_conditions(entry)) {
            std::optional<std::string> description;
            std::string stage_error;
            try {
              PromptSpec describe;
              describe.base_prompt = c.describe.describe_prompt;
              description = adapters[0]->generate(load_image(image_path), describe,
                                                  c.describe.describe_max_tokens);
            } catch (const std::exception& e) {
              stage_error = std::string("describe failure: ") + e.what();
            }
            for (std::size_t slot = 1; slot < adapters.size(); ++slot) {
              EvalRecord r;
              r.item_id = entry.item_id;
              r.data_condition = data;
              r.compute_condition = slot == 1 ? "nocot" : "cot";
              r.model = c.model_label;
              r.true_label = entry.true_label;
              r.config_hash = hash;
              r.seed = seed;
              r.parsed = nullptr;
              if (!description) {
                r.error = stage_error;
                records.push_back(std::move(r));
                continue;
              }
              try {
                PromptSpec classify;
                classify.base_prompt = render_classification_prompt(*description, labels);
                r.raw_output = adapters[slot]->generate(Image{}, classify,
                                                        c.describe.classify_max_tokens);
                if (auto match = match_label(r.raw_output, labels)) {
                  r.parsed = *match;
                  r.correct = match_label(entry.true_label, std::span(&*match, 1)).has_value();
                } else {
                  r.error = "parse failure: output is not in the label set";
                }
              } catch (const std::exception& e) {
                r.error = std::string("classify failure: ") + e.what();
              }
              records.push_back(std::move(r));
            }
          }
          write_file_atomic(output, records_text(records));
        }});
  }
  auto make = [&c, &options] {
    const auto& registry = registry_of(options);
    AdapterSet set;
    set.push_back(registry.create(c.describe.describer, c.base_dir));
    set.push_back(registry.create(c.describe.classifier, c.base_dir));
    if (c.describe.classifier_high) {
      set.push_back(registry.create(*c.describe.classifier_high, c.base_dir));
    }
    return set;
  };
  auto summary = execute(cells, options, c.workers, make);
  if (summary.complete()) merge_records(c, manifest);
  return summary;
}

RunSummary run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  switch (config.protocol) {
    case Protocol::kInjectionAttack: return run_injection_attack(config, options);
    case Protocol::kKSweep: return run_k_sweep(config, options);
    case Protocol::kMcqEval: return run_mcq_eval(config, options);
    case Protocol::kDescribeClassify: return run_describe_classify(config, options);
  }
  throw InvariantError("unknown protocol");
}

}  // namespace advrobust
