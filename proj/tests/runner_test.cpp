// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "advrobust/runner.hpp"
#include "test_support.hpp"
#include "workspace.hpp"

namespace advrobust {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using testing::attack_workspace;
using testing::k_sweep_document;
using testing::parse_in;
using testing::snapshot;

TEST(Config, ParsesBudgetsAndDefaults) {
  auto ws = attack_workspace("cfg_defaults", 1, {});
  auto c = parse_in(ws, k_sweep_document(ws));
  EXPECT_EQ(c.protocol, Protocol::kKSweep);
  EXPECT_DOUBLE_EQ(c.attack.epsilon, 64.0 / 255.0);
  EXPECT_EQ(c.epsilon_values, std::vector<double>{64.0 / 255.0});
  EXPECT_TRUE(c.attack.early_stop);
  EXPECT_EQ(c.output_dir, ws.root / "out");

  auto injection = json{{"protocol", "injection_attack"},
                        {"adapter", {{"name", "toy"}, {"model", ws.toy_model}}},
                        {"manifest", "manifest.json"}};
  auto ic = parse_in(ws, injection);
  EXPECT_DOUBLE_EQ(ic.attack.epsilon, 16.0 / 255.0);
  EXPECT_DOUBLE_EQ(ic.attack.step_size, 0.1);
  EXPECT_EQ(ic.attack.max_steps, 300);
  EXPECT_EQ(ic.prompt.security_spec, fixtures::injection_security_spec());
  EXPECT_EQ(ic.prompt.prefill, fixtures::injection_prefill());
}

TEST(Config, ReadsPromptFieldsFromFiles) {
  auto ws = attack_workspace("cfg_files", 1, {});
  testing::write_file(ws.root / "spec.txt", "Be careful. \n");
  auto doc = k_sweep_document(ws);
  doc["prompt"] = {{"base_prompt", "Name it. "}, {"security_spec_file", "spec.txt"}};
  EXPECT_EQ(parse_in(ws, doc).prompt.security_spec, "Be careful. ");
}

TEST(Config, RejectsInvalidDocuments) {
  auto ws = attack_workspace("cfg_bad", 1, {});
  auto doc = k_sweep_document(ws);
  doc["k_values"] = json::array();
  EXPECT_THROW(parse_in(ws, doc), InvariantError);
  doc = k_sweep_document(ws);
  doc["manifest"] = "missing.json";
  EXPECT_ANY_THROW(parse_in(ws, doc));
  doc = k_sweep_document(ws);
  doc["schema_version"] = 2;
  EXPECT_THROW(parse_in(ws, doc), InvariantError);
  doc = k_sweep_document(ws);
  doc["attack"]["epsilon"] = -1;
  EXPECT_THROW(parse_in(ws, doc), InvariantError);
}

TEST(Manifest, RejectsDuplicateIdsAndMissingFiles) {
  auto ws = attack_workspace("manifest_bad", 1, {});
  testing::write_file(ws.manifest,
                      R"({"entries":[{"item_id":"a","clean_image":"images/img0.json"},)"
                      R"({"item_id":"a","clean_image":"images/img0.json"}]})");
  EXPECT_THROW(DatasetManifest::load(ws.manifest), InvariantError);
  testing::write_file(ws.manifest, R"({"entries":[{"item_id":"a","clean_image":"nope.json"}]})");
  EXPECT_THROW(DatasetManifest::load(ws.manifest), InvariantError);
  EXPECT_THROW(validate_item_id("../escape"), InvariantError);
  EXPECT_THROW(validate_item_id(".hidden"), InvariantError);
  EXPECT_NO_THROW(validate_item_id("ball_01.color-v2"));
}

TEST(ConfigHash, DiffersWhenAnyResultFieldChanges) {
  auto ws = attack_workspace("run_hash", 1, {});
  auto base = parse_in(ws, k_sweep_document(ws));
  auto moved = base;
  moved.output_dir = "/elsewhere";
  moved.workers = 8;
  EXPECT_EQ(run_hash(base), run_hash(moved));
  auto reseeded = base;
  reseeded.seed = 8;
  EXPECT_NE(run_hash(base), run_hash(reseeded));
}

TEST(KSweep, ProducesOneTracePerCell) {
  auto ws = attack_workspace("ksweep_grid", 4, {"color", "shape", "texture"});
  auto config = parse_in(ws, k_sweep_document(ws));
  auto summary = run_k_sweep(config);
  EXPECT_TRUE(summary.errors.empty());
  EXPECT_EQ(summary.cells_total, 48);
  EXPECT_EQ(summary.cells_run, 48);

  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(config.output_dir / "traces")) {
    names.insert(e.path().filename().string());
  }
  EXPECT_EQ(names.size(), 48u);
  EXPECT_TRUE(names.contains("img2_texture__texture__K3__eps64__r0.jsonl"));

  auto file = read_trace_file(config.output_dir / "traces" / "img3_shape__shape__K5__eps64__r0.jsonl");
  EXPECT_EQ(file.header.repeat_count, 5);
  EXPECT_EQ(file.header.spec.repeat_count, 5);
  EXPECT_EQ(file.header.config_hash, config_hash(file.header.config, file.header.spec));
  EXPECT_EQ(file.header.seed, file.header.config.seed);
  EXPECT_NO_THROW(validate_trace(file.trace, file.header.epsilon));
  ASSERT_TRUE(file.trace.success_step.has_value());
  EXPECT_EQ(file.trace.records.size(), static_cast<std::size_t>(*file.trace.success_step));
}

TEST(KSweep, TraceFileStartsWithHeaderThenSteps) {
  auto ws = attack_workspace("ksweep_format", 1, {});
  auto doc = k_sweep_document(ws);
  doc["k_values"] = {0};
  auto config = parse_in(ws, doc);
  run_k_sweep(config);
  const auto text = testing::read_file(config.output_dir / "traces" / "img0__none__K0__eps64__r0.jsonl");
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(json::parse(line).at("type"), "header");
  std::getline(in, line);
  auto step = json::parse(line);
  EXPECT_EQ(step.at("step"), 1);
  for (const char* key : {"loss", "success", "linf_dev"}) EXPECT_TRUE(step.contains(key));
}

TEST(KSweep, SameSeedReproducesBytes) {
  auto ws = attack_workspace("ksweep_repro", 2, {"color"});
  auto doc = k_sweep_document(ws);
  doc["replicates"] = 2;
  auto config = parse_in(ws, doc);
  RunOptions a, b;
  a.out_override = ws.root / "a";
  b.out_override = ws.root / "b";
  run_k_sweep(config, a);
  auto parallel = config;
  parallel.workers = 4;
  run_k_sweep(parallel, b);
  EXPECT_EQ(snapshot(ws.root / "a"), snapshot(ws.root / "b"));

  RunOptions c;
  c.out_override = ws.root / "c";
  c.seed_override = 99;
  run_k_sweep(config, c);
  EXPECT_NE(snapshot(ws.root / "a"), snapshot(ws.root / "c"));
}

TEST(KSweep, ResumedRunMatchesUninterruptedRun) {
  auto ws = attack_workspace("ksweep_resume", 2, {"shape"});
  auto config = parse_in(ws, k_sweep_document(ws));
  RunOptions full;
  full.out_override = ws.root / "full";
  run_k_sweep(config, full);

  RunOptions partial;
  partial.out_override = ws.root / "partial";
  partial.max_cells = 3;
  auto first = run_k_sweep(config, partial);
  EXPECT_EQ(first.cells_run, 3);
  EXPECT_FALSE(first.complete());
  // A leftover temporary from a crash is cleaned up on restart.
  testing::write_file(ws.root / "partial" / "traces" / "torn.jsonl.tmp", "{");
  partial.max_cells.reset();
  partial.resume = true;
  auto second = run_k_sweep(config, partial);
  EXPECT_EQ(second.cells_skipped, 3);
  EXPECT_EQ(second.cells_run, 5);
  EXPECT_TRUE(second.complete());
  EXPECT_EQ(snapshot(ws.root / "full"), snapshot(ws.root / "partial"));
}

TEST(KSweep, ResumeRecomputesCellsFromAnotherConfig) {
  auto ws = attack_workspace("ksweep_stale", 1, {});
  auto config = parse_in(ws, k_sweep_document(ws));
  run_k_sweep(config);
  auto changed = config;
  changed.attack.step_size = 0.02;
  RunOptions resume;
  resume.resume = true;
  auto summary = run_k_sweep(changed, resume);
  EXPECT_EQ(summary.cells_skipped, 0);
  EXPECT_EQ(summary.cells_run, 4);
}

TEST(KSweep, AdapterFailureIsReported) {
  auto ws = attack_workspace("ksweep_adapter", 1, {});
  auto doc = k_sweep_document(ws);
  doc["adapter"] = {{"name", "llava"}};
  auto summary = run_k_sweep(parse_in(ws, doc));
  ASSERT_FALSE(summary.errors.empty());
  EXPECT_NE(summary.errors.front().find("adapter load failure"), std::string::npos);
}

TEST(InjectionAttack, SpecToggleOnlyChangesPrompt) {
  auto ws = attack_workspace("injection", 1, {});
  // The injection target must be scoreable by the toy vocabulary.
  auto doc = json{{"protocol", "injection_attack"},
                  {"adapter", {{"name", "toy"}, {"model", ws.toy_model}}},
                  {"attack", {{"max_steps", 120}, {"step_size", 0.001}, {"epsilon", 0.01}}},
                  {"checkpoints", {100, 120}},
                  {"replicates", 2},
                  {"manifest", "manifest.json"}};
  auto config = parse_in(ws, doc);
  auto summary = run_injection_attack(config);
  EXPECT_TRUE(summary.errors.empty());
  EXPECT_EQ(summary.cells_total, 4);
  auto on = read_trace_file(config.output_dir / "traces" / "img0__specon__r0.jsonl");
  auto off = read_trace_file(config.output_dir / "traces" / "img0__specoff__r0.jsonl");
  EXPECT_TRUE(on.header.security_spec);
  EXPECT_FALSE(off.header.security_spec);
  EXPECT_EQ(on.header.config.epsilon, off.header.config.epsilon);
  EXPECT_EQ(on.header.spec.prefill, off.header.spec.prefill);
  EXPECT_NE(on.header.spec.security_spec, off.header.spec.security_spec);
  EXPECT_NE(on.header.config_hash, off.header.config_hash);
  EXPECT_TRUE(fs::exists(config.output_dir / "injection_summary.csv"));
}

testing::Workspace mcq_workspace(const std::string& name, int n_images) {
  auto ws = attack_workspace(name, n_images, {}, /*adversarial=*/true);
  std::string pool;
  for (int i = 0; i < 1000; ++i) pool += "label" + std::to_string(i) + "\n";
  testing::write_file(ws.root / "pool.txt", pool);
  return ws;
}

json mcq_document(const testing::Workspace& ws, const std::string& output) {
  return {{"protocol", "mcq_eval"},
          {"adapter", {{"name", "constant"}, {"output", output}}},
          {"model_label", "always-" + output},
          {"mcq", {{"n_options", 30}, {"label_pool", "pool.txt"}}},
          {"manifest", "manifest.json"},
          {"seed", 3}};
}

TEST(McqEval, WritesFourRecordsPerImage) {
  auto ws = mcq_workspace("mcq_grid", 200);
  auto config = parse_in(ws, mcq_document(ws, "1"));
  config.workers = 4;
  auto summary = run_mcq_eval(config);
  EXPECT_TRUE(summary.errors.empty());
  auto records = read_eval_records(config.output_dir / "records.jsonl");
  ASSERT_EQ(records.size(), 800u);
  std::map<std::pair<std::string, std::string>, int> conditions;
  for (const auto& r : records) ++conditions[{r.data_condition, r.compute_condition}];
  EXPECT_EQ(conditions.size(), 4u);
  for (const auto& [key, count] : conditions) EXPECT_EQ(count, 200);
  EXPECT_EQ(records.front().item_id, "img0");
  EXPECT_EQ(records.back().item_id, "img199");
}

TEST(McqEval, ConstantFirstOptionMatchesRecount) {
  auto ws = mcq_workspace("mcq_recount", 200);
  // Parses as option 1 with and without the CoT answer marker.
  auto config = parse_in(ws, mcq_document(ws, "Answer: 1"));
  run_mcq_eval(config);
  const auto records = read_eval_records(config.output_dir / "records.jsonl");

  // Recount: rebuild every item from its persisted seed and check whether
  // the true label sits in slot 1.
  const auto pool_lines = [&] {
    std::vector<std::string> out;
    std::istringstream in(testing::read_file(ws.root / "pool.txt"));
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
  }();
  int expected = 0, observed = 0;
  for (const auto& r : records) {
    ASSERT_EQ(r.parsed, 1);
    const auto item = build_mcq(r.true_label, pool_lines, 30, r.seed);
    expected += item.options.front() == r.true_label;
    observed += r.correct;
  }
  EXPECT_EQ(observed, expected);
  // Four records share each item, so the rate is ~1/30 over 200 draws.
  EXPECT_GT(observed, 0);
  EXPECT_LT(observed, 4 * 30);
}

TEST(McqEval, MalformedOutputsAreScoredWrongWithoutAborting) {
  auto ws = mcq_workspace("mcq_malformed", 3);
  auto config = parse_in(ws, mcq_document(ws, "I cannot tell"));
  auto summary = run_mcq_eval(config);
  EXPECT_TRUE(summary.errors.empty());
  for (const auto& r : read_eval_records(config.output_dir / "records.jsonl")) {
    EXPECT_FALSE(r.correct);
    EXPECT_TRUE(r.parsed.is_null());
    ASSERT_TRUE(r.error.has_value());
    EXPECT_NE(r.error->find("parse failure"), std::string::npos);
  }
}

TEST(McqEval, FullPoolQuestionsAreSupported) {
  auto ws = mcq_workspace("mcq_full", 2);
  auto doc = mcq_document(ws, "Answer: 1000");
  doc["mcq"] = {{"n_options", 1000}, {"label_pool", "pool.txt"}, {"template", "large_scale"}};
  auto config = parse_in(ws, doc);
  EXPECT_TRUE(run_mcq_eval(config).errors.empty());
  for (const auto& r : read_eval_records(config.output_dir / "records.jsonl")) {
    EXPECT_EQ(r.parsed, 1000);
  }
}

TEST(McqEval, ResumeAndReproduce) {
  auto ws = mcq_workspace("mcq_resume", 6);
  auto config = parse_in(ws, mcq_document(ws, "2"));
  RunOptions full, partial;
  full.out_override = ws.root / "full";
  partial.out_override = ws.root / "partial";
  partial.max_cells = 2;
  run_mcq_eval(config, full);
  EXPECT_FALSE(run_mcq_eval(config, partial).complete());
  EXPECT_FALSE(fs::exists(ws.root / "partial" / "records.jsonl"));
  partial.max_cells.reset();
  partial.resume = true;
  auto summary = run_mcq_eval(config, partial);
  EXPECT_EQ(summary.cells_skipped, 2);
  EXPECT_EQ(snapshot(ws.root / "full"), snapshot(ws.root / "partial"));
}

testing::Workspace describe_workspace(const std::string& name) {
  auto ws = attack_workspace(name, 2, {}, /*adversarial=*/true);
  // img0 is a drake, img1 a yurt; the classifier always answers "drake".
  auto manifest = json::parse(testing::read_file(ws.manifest));
  manifest["entries"][0]["true_label"] = "drake";
  manifest["entries"][1]["true_label"] = "yurt";
  testing::write_file(ws.manifest, manifest.dump());
  return ws;
}

json describe_document(const std::string& classifier_output) {
  return {{"protocol", "describe_classify"},
          {"describe",
           {{"describer", {{"name", "constant"}, {"output", "A duck on a pond."}}},
            {"classifier", {{"name", "constant"}, {"output", classifier_output}}},
            {"describe_prompt", "Describe the image in detail."}}},
          {"manifest", "manifest.json"},
          {"seed", 1}};
}

TEST(DescribeClassify, ScoresMatchedLabels) {
  auto ws = describe_workspace("describe_match");
  auto config = parse_in(ws, describe_document(" Drake\n"));
  auto summary = run_describe_classify(config);
  EXPECT_TRUE(summary.errors.empty());
  auto records = read_eval_records(config.output_dir / "records.jsonl");
  ASSERT_EQ(records.size(), 4u);
  for (const auto& r : records) {
    EXPECT_EQ(r.parsed, "drake");
    EXPECT_EQ(r.compute_condition, "nocot");
    EXPECT_EQ(r.correct, r.true_label == "drake");
  }
}

TEST(DescribeClassify, UnknownLabelIsParseFailure) {
  auto ws = describe_workspace("describe_unknown");
  auto config = parse_in(ws, describe_document("duck"));
  run_describe_classify(config);
  for (const auto& r : read_eval_records(config.output_dir / "records.jsonl")) {
    EXPECT_FALSE(r.correct);
    EXPECT_TRUE(r.parsed.is_null());
    EXPECT_TRUE(r.error.has_value());
  }
}

// Forwards to an adapter owned by the test, so it outlives the run.
class Borrowed final : public ModelAdapter {
 public:
  explicit Borrowed(ModelAdapter& inner) : inner_(inner) {}
  std::string name() const override { return inner_.name(); }
  AdapterCapabilities capabilities() const override { return inner_.capabilities(); }
  std::string generate(const Image& x, const PromptSpec& s, int n, Decoding d) override {
    return inner_.generate(x, s, n, d);
  }

 private:
  ModelAdapter& inner_;
};

TEST(DescribeClassify, ReplayedClassifierReproducesRecords) {
  auto ws = describe_workspace("describe_replay");
  // Record a live run, then replay it offline.
  RecordingAdapter recorder(std::make_unique<ConstantAdapter>("yurt"));
  AdapterRegistry registry = AdapterRegistry::with_builtins();
  registry.add("recorded", [&recorder](const json&, const fs::path&) {
    return std::unique_ptr<ModelAdapter>(std::make_unique<Borrowed>(recorder));
  });
  auto doc = describe_document("unused");
  doc["describe"]["classifier"] = {{"name", "recorded"}};
  auto config = parse_in(ws, doc);
  RunOptions options;
  options.registry = &registry;
  options.out_override = ws.root / "live";
  run_describe_classify(config, options);
  recorder.save(ws.root / "responses.jsonl");

  doc["describe"]["classifier"] = {{"name", "replay"}, {"responses", "responses.jsonl"}};
  auto replay = parse_in(ws, doc);
  RunOptions replay_options;
  replay_options.out_override = ws.root / "replay";
  EXPECT_TRUE(run_describe_classify(replay, replay_options).errors.empty());
  auto a = read_eval_records(ws.root / "live" / "records.jsonl");
  auto b = read_eval_records(ws.root / "replay" / "records.jsonl");
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].raw_output, b[i].raw_output);
    EXPECT_EQ(a[i].correct, b[i].correct);
  }
}

TEST(DescribeClassify, SecondClassifierIsTheCotCondition) {
  auto ws = describe_workspace("describe_high");
  auto doc = describe_document("yurt");
  doc["describe"]["classifier_high"] = {{"name", "constant"}, {"output", "drake"}};
  auto config = parse_in(ws, doc);
  run_describe_classify(config);
  auto records = read_eval_records(config.output_dir / "records.jsonl");
  ASSERT_EQ(records.size(), 8u);
  for (const auto& r : records) {
    EXPECT_EQ(r.parsed, r.compute_condition == "cot" ? "drake" : "yurt");
  }
}

TEST(Images, RoundTrip) {
  auto dir = testing::scratch_dir("image_io");
  std::mt19937_64 rng(1);
  auto image = testing::random_image(rng, ImageShape{3, 2, 2});
  save_image(image, dir / "x.json");
  EXPECT_EQ(load_image(dir / "x.json"), image);
}

}  // namespace
}  // namespace advrobust
