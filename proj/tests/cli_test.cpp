// SPDX-License-Identifier: Apache-2.0
//
// Drives the command-line tool against the demo configs.

#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "test_support.hpp"

namespace advrobust {
namespace {

namespace fs = std::filesystem;

int run(const std::string& args) {
  const std::string command = std::string(CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string demo(const std::string& name) {
  return std::string(FIXTURE_DIR) + "/demo/" + name;
}

TEST(Cli, RunsEveryProtocolAndReports) {
  const auto out = testing::scratch_dir("cli");
  EXPECT_EQ(run("attack run --config " + demo("k_sweep.json") + " --out " + (out / "k").string()), 0);
  EXPECT_EQ(run("attack run --config " + demo("injection.json") + " --out " + (out / "i").string()), 0);
  EXPECT_EQ(run("mcq run --config " + demo("mcq.json") + " --out " + (out / "m").string()), 0);
  EXPECT_EQ(run("describe-classify run --config " + demo("describe_classify.json") + " --out " +
                (out / "d").string()),
            0);
  EXPECT_EQ(run("report tables --in " + out.string() + " --out " + (out / "tables").string()), 0);
  for (const char* f : {"steps_vs_k.csv", "injection_summary.csv", "accuracy.csv"}) {
    EXPECT_TRUE(fs::exists(out / "tables" / f)) << f;
  }
  EXPECT_EQ(run("report plots --in " + (out / "k").string() + " --out " + (out / "plots").string() +
                " --format png"),
            0);
  EXPECT_TRUE(fs::exists(out / "plots" / "steps_vs_k_series.csv"));
}

TEST(Cli, ResumeAndSeedOverride) {
  const auto out = testing::scratch_dir("cli_resume");
  const auto base = "attack run --config " + demo("k_sweep.json") + " --out ";
  ASSERT_EQ(run(base + (out / "a").string()), 0);
  const auto before = testing::snapshot(out / "a");
  ASSERT_EQ(run(base + (out / "a").string() + " --resume"), 0);
  EXPECT_EQ(testing::snapshot(out / "a"), before);
  ASSERT_EQ(run(base + (out / "b").string() + " --seed 5"), 0);
  EXPECT_NE(testing::read_file(out / "a" / "run.json"), testing::read_file(out / "b" / "run.json"));
}

TEST(Cli, RejectsMismatchedProtocolAndBadArguments) {
  const auto out = testing::scratch_dir("cli_bad");
  EXPECT_EQ(run("mcq run --config " + demo("k_sweep.json") + " --out " + out.string()), 2);
  EXPECT_NE(run("attack run --config " + demo("missing.json")), 0);
  EXPECT_NE(run("report plots --in " + out.string() + " --out " + out.string() + " --format gif"), 0);
  EXPECT_NE(run(""), 0);
}

}  // namespace
}  // namespace advrobust
