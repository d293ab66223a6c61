#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

Run run(const std::string& args) {
  const std::string cmd = args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string cli(const std::string& args) { return std::string(CLUSTCAL_CLI_PATH) + " " + args; }
std::string demo(const std::string& args) { return std::string(CLUSTCAL_DEMO_PATH) + " " + args; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Value printed after `key=` on the first line containing it.
double field(const std::string& out, const std::string& key) {
  const auto pos = out.find(key + "=");
  if (pos == std::string::npos) throw std::runtime_error("missing " + key + " in output:\n" + out);
  return std::stod(out.substr(pos + key.size() + 1));
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("clustcal_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string make_data(const std::string& name, const std::string& args) {
    const auto r = run(demo(args + " --out " + path(name)));
    EXPECT_EQ(r.code, 0) << r.output;
    return path(name);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, CalibrateWritesCurveAndPlot) {
  const auto data = make_data("d.csv", "--preset P2 --clusters 8 --per-cluster 400 --seed 3");
  const auto r = run(cli("calibrate --input " + data + " --method 2mac-splines --grid 100 --out " +
                         path("curve.json") + " --plot " + path("c.svg")));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("N=3200 J=8"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("ICC="), std::string::npos);

  const auto j = nlohmann::json::parse(slurp(path("curve.json")));
  ASSERT_EQ(j.at("grid").size(), 100u);
  EXPECT_DOUBLE_EQ(j["grid"][0].get<double>(), 0.01);
  EXPECT_DOUBLE_EQ(j["grid"][99].get<double>(), 0.99);

  const auto svg = slurp(path("c.svg"));
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST_F(Cli, CsvOutputHasHeaderAndOneRowPerGridPoint) {
  const auto data = make_data("d.csv", "--preset P1 --clusters 6 --per-cluster 300 --seed 5");
  const auto r = run(cli("calibrate --input " + data + " --method flexible-rcs --grid 25 --out " + path("c.csv")));
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream in(slurp(path("c.csv")));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("grid,estimate", 0), 0u) << line;
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 25);
}

TEST_F(Cli, GroupedDefaultsToTenGroups) {
  const auto data = make_data("d.csv", "--preset P2 --clusters 8 --per-cluster 400 --seed 3");
  const auto r = run(cli("calibrate --input " + data + " --method cgc-grouped --out " + path("g.csv")));
  ASSERT_EQ(r.code, 0) << r.output;
  int groups = 0;
  std::istringstream in(r.output);
  for (std::string line; std::getline(in, line);)
    if (line.rfind("group ", 0) == 0) ++groups;
  EXPECT_EQ(groups, 10);
}

TEST_F(Cli, UnknownMethodIsUsageErrorListingMethods) {
  const auto data = make_data("d.csv", "--clusters 3 --per-cluster 50");
  const auto r = run(cli("calibrate --input " + data + " --method bogus"));
  EXPECT_EQ(r.code, 2);
  for (const char* m : {"flexible-rcs", "flexible-loess", "cgc-grouped", "cgc-interval", "2mac-splines", "2mac-loess",
                        "mixc-intercept", "mixc-slope"})
    EXPECT_NE(r.output.find(m), std::string::npos) << m;
}

TEST_F(Cli, MissingInputIsUsageError) {
  EXPECT_EQ(run(cli("calibrate --input " + path("nope.csv") + " --method flexible-rcs")).code, 2);
  EXPECT_EQ(run(cli("icc --input " + path("nope.csv"))).code, 2);
}

TEST_F(Cli, MissingRequiredOptionIsUsageError) {
  EXPECT_EQ(run(cli("icc")).code, 2);
  EXPECT_EQ(run(cli("frobnicate")).code, 2);
}

TEST_F(Cli, IccNearZeroForHomogeneousClusters) {
  const auto data = make_data("h.csv", "--preset P2 --clusters 50 --per-cluster 2000 --sigma-u2 0 --seed 11");
  const auto r = run(cli("icc --input " + data));
  ASSERT_EQ(r.code, 0) << r.output;
  const double icc = field(r.output, "ICC");
  EXPECT_GE(icc, 0.0);
  EXPECT_LE(icc, 0.010);
}

TEST_F(Cli, IccForModerateHeterogeneity) {
  const auto data = make_data("p3.csv", "--preset P3 --clusters 50 --per-cluster 2000 --seed 4");
  const auto r = run(cli("icc --input " + data));
  ASSERT_EQ(r.code, 0) << r.output;
  const double icc = field(r.output, "ICC");
  EXPECT_GE(icc, 0.03);
  EXPECT_LE(icc, 0.08);
  EXPECT_GT(field(r.output, "sigma_u2"), 0.0);
}

TEST_F(Cli, IccNeedsTwoClusters) {
  const auto data = make_data("one.csv", "--clusters 1 --per-cluster 500");
  const auto r = run(cli("icc --input " + data));
  EXPECT_EQ(r.code, 1) << r.output;
}

TEST_F(Cli, InvalidPresetIsUsageError) {
  const auto r = run(cli("simulate --preset P9 --out-prefix " + path("s")));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("P9"), std::string::npos);
}

TEST_F(Cli, SimulateIsReproducibleAndWritesBothReports) {
  const std::string args = "simulate --preset P4 --reps 2 --centers 10 --epc 50 --val-per-cluster 100 --seed 3";
  const auto a = run(cli(args + " --out-prefix " + path("a")));
  const auto b = run(cli(args + " --threads 2 --out-prefix " + path("b")));
  ASSERT_EQ(a.code, 0) << a.output;
  ASSERT_EQ(b.code, 0) << b.output;

  const auto csv = slurp(path("a.csv"));
  EXPECT_EQ(csv.rfind("rep,method,msce_x100,coverage,failed\n", 0), 0u);
  EXPECT_EQ(csv, slurp(path("b.csv")));
  EXPECT_EQ(slurp(path("a.json")), slurp(path("b.json")));
  EXPECT_TRUE(nlohmann::json::accept(slurp(path("a.json"))));
}

TEST_F(Cli, SimulateFromConfigMatchesFlags) {
  const auto a = run(cli("simulate --preset P4 --reps 1 --centers 10 --epc 50 --val-per-cluster 100 --seed 9 "
                         "--out-prefix " +
                         path("a")));
  ASSERT_EQ(a.code, 0) << a.output;
  const auto scenario = nlohmann::json::parse(slurp(path("a.json"))).at("scenario");
  std::ofstream(path("cfg.json")) << scenario.dump(2);
  const auto b = run(cli("simulate --config " + path("cfg.json") + " --out-prefix " + path("b")));
  ASSERT_EQ(b.code, 0) << b.output;
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
}
