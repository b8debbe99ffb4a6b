// Exit codes of the command-line tool, checked through the shell.
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "trajcal/pipeline.hpp"

using namespace trajcal;

namespace {

const fs::path kCli = TRAJCAL_CLI_PATH;

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = kCli.string() + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("trajcal_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Cli, ConfigTemplateExitsZeroAndParses) {
  const fs::path d = scratch("template");
  ASSERT_EQ(run("config-template", d / "out.ini"), 0);
  EXPECT_NO_THROW(load_config(d / "out.ini").validate());
}

TEST(Cli, ZeroPenetrationExitsThree) {
  const fs::path d = scratch("zero_pen");
  write_file_atomic(d / "c.ini", "[ingest]\npenetration = 0\n");
  EXPECT_EQ(run("ingest --config " + (d / "c.ini").string(), d / "log"), 3);
  EXPECT_NE(read_file(d / "log").find("penetration"), std::string::npos);
}

TEST(Cli, MissingConfigAndUnknownKeyExitThree) {
  const fs::path d = scratch("bad_cfg");
  EXPECT_EQ(run("ingest --config " + (d / "absent.ini").string(), d / "log"), 3);
  write_file_atomic(d / "c.ini", "[run]\nsede = 4\n");
  EXPECT_EQ(run("ingest --config " + (d / "c.ini").string(), d / "log"), 3);
}

TEST(Cli, ReportBeforeFlowEstimateExitsTwo) {
  const fs::path d = scratch("order");
  ASSERT_EQ(run("generate " + (d / "scen").string() + " --days 1", d / "gen.log"), 0) << read_file(d / "gen.log");
  const std::string cfg = " --config " + (d / "scen" / "config.ini").string() + " --out " + (d / "run").string();
  ASSERT_EQ(run("ingest" + cfg, d / "a.log"), 0) << read_file(d / "a.log");
  ASSERT_EQ(run("cluster" + cfg, d / "b.log"), 0) << read_file(d / "b.log");
  EXPECT_EQ(run("report" + cfg, d / "c.log"), 2);
  const std::string msg = read_file(d / "c.log");
  EXPECT_NE(msg.find("flow_diagnostics.csv"), std::string::npos) << msg;
  EXPECT_NE(msg.find("estimate-flow"), std::string::npos) << msg;
}

TEST(Cli, UsageErrorIsNonZero) {
  const fs::path d = scratch("usage");
  EXPECT_NE(run("", d / "log"), 0);
  EXPECT_NE(run("no-such-stage", d / "log"), 0);
}
