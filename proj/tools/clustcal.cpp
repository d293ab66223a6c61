// clustcal: calibration curves for clustered prediction data.
//
//   clustcal calibrate --input data.csv --method 2mac-splines --out curve.json --plot curve.svg
//   clustcal simulate  --preset P4 --epc 200 --centers 30 --reps 25 --seed 7
//   clustcal icc       --input data.csv
//
// Exit codes: 0 success, 1 computation error, 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clustcal/calib.hpp"
#include "clustcal/dataio.hpp"
#include "clustcal/sim.hpp"

namespace {

using namespace clustcal;

constexpr int kOk = 0;
constexpr int kComputation = 1;
constexpr int kUsage = 2;

/// Usage or configuration problem (exit code 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::vector<std::string>& calibration_methods() {
  static const std::vector<std::string> m{"flexible-rcs",  "flexible-loess", "cgc-grouped",    "cgc-interval",
                                          "2mac-splines",  "2mac-loess",     "mixc-intercept", "mixc-slope"};
  return m;
}

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : sep) + s;
  return out;
}

void warn(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  out << content;
  if (!out) throw Error(ErrorKind::io, "failed writing '" + path + "'");
}

LoadResult read_input(const std::string& path, const ColumnMap& cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open input file '" + path + "'");
  return load_dataset(in, cols);
}

ExportFormat format_for(const std::string& path, const std::string& requested) {
  if (requested == "csv") return ExportFormat::csv;
  if (requested == "json") return ExportFormat::json;
  if (!requested.empty()) throw UsageError("--format must be csv or json");
  const auto ext = std::filesystem::path(path).extension().string();
  if (ext == ".csv") return ExportFormat::csv;
  if (ext == ".json") return ExportFormat::json;
  throw UsageError("cannot infer output format from '" + path + "'; use --format csv|json");
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateArgs {
  std::string input;
  std::string method;
  ColumnMap cols;
  std::size_t grid = 100;
  std::size_t groups = 10;
  int knots = 0;
  double span = kMissing;
  std::string ci = "normal";
  std::string pi = "t";
  double level = 0.95;
  bool trim = false;
  std::uint64_t seed = 1;
  std::size_t samples = 10000;
  std::string out;
  std::string format;
  std::string plot;
};

int cmd_calibrate(const CalibrateArgs& a) {
  const auto& methods = calibration_methods();
  if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) {
    throw UsageError("unknown method '" + a.method + "'; valid methods: " + join(methods, ", "));
  }
  if (a.grid < 2) throw UsageError("--grid needs at least 2 points");
  if (!(a.level > 0.0 && a.level < 1.0)) throw UsageError("--level must lie in (0,1)");
  std::optional<ExportFormat> fmt;
  if (!a.out.empty()) fmt = format_for(a.out, a.format);

  std::printf("# clustcal calibrate\n# input=%s method=%s grid=%zu groups=%zu knots=%s span=%s ci=%s pi=%s level=%g "
              "trim=%s samples=%zu seed=%llu\n",
              a.input.c_str(), a.method.c_str(), a.grid, a.groups, a.knots == 0 ? "auto" : std::to_string(a.knots).c_str(),
              is_missing(a.span) ? "aicc" : format("%g", a.span).c_str(), a.ci.c_str(), a.pi.c_str(), a.level,
              a.trim ? "true" : "false", a.samples, static_cast<unsigned long long>(a.seed));

  const auto loaded = read_input(a.input, a.cols);
  warn(loaded.warnings);
  const auto& ds = loaded.dataset;
  std::printf("N=%zu J=%zu\n", ds.size(), ds.n_clusters());
  if (ds.n_clusters() >= 2) {
    try {
      const auto ic = icc(ds);
      std::printf("ICC=%.3f sigma_u2=%.4f\n", ic.icc, ic.sigma_u2);
      warn(ic.warnings);
    } catch (const Error& e) {
      std::cerr << "warning: ICC not available: " << e.what() << "\n";
    }
  }

  const Grid grid(a.grid);
  CurveExport curve;
  PlotSpec plot;
  std::vector<std::string> warnings;
  if (a.method == "flexible-rcs" || a.method == "flexible-loess") {
    const Smoother s = a.method == "flexible-rcs" ? Smoother::rcs(a.knots == 0 ? 3 : a.knots) : Smoother::loess(a.span);
    const auto c = standard_flexible(ds, s, grid, a.level);
    warnings = c.warnings;
    curve = c.to_export();
  } else if (a.method == "cgc-grouped" || a.method == "cgc-interval") {
    const auto g = cgc(ds, a.groups, a.method == "cgc-grouped" ? GroupingMode::grouped : GroupingMode::interval, a.level);
    warnings = g.warnings;
    curve = g.to_export();
    plot.markers = true;
    for (const auto& p : g.points) {
      std::printf("group %zu: x=%.4f y=%.4f ci=[%.4f, %.4f] pi=[%.4f, %.4f] clusters=%zu\n", p.group + 1, p.x, p.y,
                  p.ci_y.lo, p.ci_y.hi, p.pi_y.lo, p.pi_y.hi, p.k);
    }
  } else if (a.method == "2mac-splines" || a.method == "2mac-loess") {
    TwoStageOptions opt;
    opt.smoother = a.method == "2mac-splines" ? Smoother::rcs(a.knots) : Smoother::loess(a.span);
    if (a.ci == "normal") {
      opt.ci_method = CiMethod::normal;
    } else if (a.ci == "hksj") {
      opt.ci_method = CiMethod::hksj;
    } else {
      throw UsageError("--ci must be normal or hksj");
    }
    if (a.pi == "t") {
      opt.pi_method = PiMethod::t_based;
    } else if (a.pi == "normal") {
      opt.pi_method = PiMethod::normal;
    } else if (a.pi == "none") {
      opt.pi_method = PiMethod::none;
    } else {
      throw UsageError("--pi must be t, normal or none");
    }
    opt.level = a.level;
    opt.trim_to_cluster_range = a.trim;
    const auto c = two_stage_ma(ds, opt, grid);
    warnings = c.warnings;
    curve = c.to_export();
  } else {
    MixcOptions opt;
    opt.variant = a.method == "mixc-slope" ? GlmmVariant::slope : GlmmVariant::intercept;
    opt.n_samples = a.samples;
    opt.seed = a.seed;
    opt.level = a.level;
    const auto c = mixc(ds, opt, grid);
    warnings = c.warnings;
    curve = c.to_export(a.seed);
  }
  warn(warnings);

  if (fmt) {
    write_file(a.out, export_curve(curve, *fmt));
    std::printf("wrote %s\n", a.out.c_str());
  }
  if (!a.plot.empty()) {
    plot.title = a.method;
    write_file(a.plot, render_svg(curve, plot, ds.records()));
    std::printf("wrote %s\n", a.plot.c_str());
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string config;
  std::string preset;
  std::optional<double> epc;
  std::optional<std::size_t> centers;
  std::optional<std::size_t> reps;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> val_per_cluster;
  bool full_scale = false;
  unsigned threads = 1;
  std::string out_prefix = "sim_report";
};

int cmd_simulate(const SimulateArgs& a) {
  sim::Scenario sc;
  try {
    if (!a.config.empty()) {
      std::ifstream in(a.config);
      if (!in) throw UsageError("cannot open config file '" + a.config + "'");
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("config file is not valid JSON: ") + e.what());
      }
      sc = sim::scenario_from_json(j);
    }
    if (!a.preset.empty()) sc.superpop = sim::preset(a.preset);
    if (a.full_scale) sc.set_full_scale();
    if (a.epc) sc.epc = *a.epc;
    if (a.centers) sc.dev_clusters = *a.centers;
    if (a.reps) sc.reps = *a.reps;
    if (a.seed) sc.seed = *a.seed;
    if (a.val_per_cluster) sc.val_total = *a.val_per_cluster * sc.val_clusters;
    sc.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }

  std::printf("# clustcal simulate\n# superpopulation=%s beta0=%g beta1=%g sigma_u2=%g population_seed=%llu\n"
              "# epc=%g centers=%zu reps=%zu seed=%llu validation=%zux%zu threads=%u methods=%s\n",
              sc.superpop.label.c_str(), sc.superpop.beta0, sc.superpop.beta1, sc.superpop.sigma_u2,
              static_cast<unsigned long long>(sc.superpop.seed), sc.epc, sc.dev_clusters, sc.reps,
              static_cast<unsigned long long>(sc.seed), sc.val_clusters, sc.val_total / sc.val_clusters, a.threads,
              join(sc.methods, ",").c_str());
  std::fflush(stdout);

  const auto report = sim::run_scenario(sc, a.threads, [&](const sim::RepResult& r) {
    if (r.failed) {
      std::fprintf(stderr, "rep %zu/%zu failed: %s\n", r.rep + 1, sc.reps, r.failure.c_str());
    } else {
      std::fprintf(stderr, "rep %zu/%zu done\n", r.rep + 1, sc.reps);
    }
  });
  write_file(a.out_prefix + ".csv", report.to_csv());
  write_file(a.out_prefix + ".json", report.to_json());
  std::printf("%-14s %8s %8s %8s %9s\n", "method", "median", "q25", "q75", "coverage");
  for (const auto& m : sc.methods) {
    const auto& s = report.summary.at(m);
    std::printf("%-14s %8.4f %8.4f %8.4f %9s\n", m.c_str(), s.median, s.q25, s.q75,
                is_missing(s.mean_coverage) ? "-" : format("%.3f", s.mean_coverage).c_str());
  }
  std::printf("failed reps: %zu%s\nwrote %s.csv and %s.json\n", report.failed, report.unreliable ? " (UNRELIABLE)" : "",
              a.out_prefix.c_str(), a.out_prefix.c_str());
  if (report.unreliable) std::cerr << "warning: more than 20% of reps failed; report flagged unreliable\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// icc

int cmd_icc(const std::string& input, const ColumnMap& cols) {
  std::printf("# clustcal icc\n# input=%s\n", input.c_str());
  const auto loaded = read_input(input, cols);
  warn(loaded.warnings);
  const auto r = icc(loaded.dataset);
  warn(r.warnings);
  std::printf("N=%zu J=%zu\nICC=%.3f\nsigma_u2=%.6f\n", loaded.dataset.size(), loaded.dataset.n_clusters(), r.icc,
              r.sigma_u2);
  return kOk;
}

void add_columns(CLI::App* cmd, ColumnMap& cols) {
  cmd->add_option("--cluster-col", cols.cluster, "Cluster column name")->capture_default_str();
  cmd->add_option("--outcome-col", cols.outcome, "Outcome column name (0/1)")->capture_default_str();
  cmd->add_option("--risk-col", cols.risk, "Predicted risk column name")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibration curves for clustered prediction data"};
  app.require_subcommand(1);

  CalibrateArgs ca;
  auto* cal = app.add_subcommand("calibrate", "Estimate a calibration curve");
  cal->add_option("--input", ca.input, "Input CSV")->required();
  cal->add_option("--method", ca.method, "One of: " + join(calibration_methods(), ", "))->required();
  add_columns(cal, ca.cols);
  cal->add_option("--grid", ca.grid, "Number of grid points in [0.01, 0.99]")->capture_default_str();
  cal->add_option("--groups", ca.groups, "Groups for CG-C")->capture_default_str();
  cal->add_option("--knots", ca.knots, "Spline knots (0 = choose 3-5 by likelihood ratio)")->capture_default_str();
  cal->add_option("--span", ca.span, "LOESS span (default: AICc selection)");
  cal->add_option("--ci", ca.ci, "2MA-C confidence interval: normal or hksj")->capture_default_str();
  cal->add_option("--pi", ca.pi, "2MA-C prediction interval: t, normal or none")->capture_default_str();
  cal->add_option("--level", ca.level, "Interval level")->capture_default_str();
  cal->add_flag("--trim", ca.trim, "2MA-C: restrict each cluster to its own risk range");
  cal->add_option("--seed", ca.seed, "Seed for simulated prediction bands")->capture_default_str();
  cal->add_option("--samples", ca.samples, "Samples for simulated prediction bands")->capture_default_str();
  cal->add_option("--out", ca.out, "Curve output (.csv or .json)");
  cal->add_option("--format", ca.format, "Output format csv|json (default: from extension)");
  cal->add_option("--plot", ca.plot, "SVG plot output");

  SimulateArgs sa;
  auto* simc = app.add_subcommand("simulate", "Run a simulation scenario");
  simc->add_option("--config", sa.config, "Scenario JSON file");
  simc->add_option("--preset", sa.preset, "Superpopulation preset P1-P4");
  simc->add_option("--epc", sa.epc, "Events per development cluster");
  simc->add_option("--centers", sa.centers, "Development clusters");
  simc->add_option("--reps", sa.reps, "Repetitions");
  simc->add_option("--seed", sa.seed, "Scenario seed");
  simc->add_option("--val-per-cluster", sa.val_per_cluster, "Validation patients per cluster");
  simc->add_flag("--full-scale", sa.full_scale, "100 reps and 100,000 validation patients");
  simc->add_option("--threads", sa.threads, "Worker threads")->capture_default_str();
  simc->add_option("--out-prefix", sa.out_prefix, "Report path prefix (.csv and .json are appended)")->capture_default_str();

  std::string icc_input;
  ColumnMap icc_cols;
  auto* iccc = app.add_subcommand("icc", "Intraclass correlation from a null random-intercept model");
  iccc->add_option("--input", icc_input, "Input CSV")->required();
  add_columns(iccc, icc_cols);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*cal) return cmd_calibrate(ca);
    if (*simc) return cmd_simulate(sa);
    if (*iccc) return cmd_icc(icc_input, icc_cols);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kComputation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kComputation;
  }
  return kUsage;
}
