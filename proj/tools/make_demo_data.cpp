// Writes a clustered validation CSV (cluster,y,p_hat) drawn from a simulated
// superpopulation. The predicted risk is the population model with u = 0, so the
// data are miscalibrated within clusters exactly by the cluster effects.
//
//   make-demo-data --preset P2 --clusters 20 --per-cluster 500 --seed 3 --out demo.csv

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "clustcal/rng.hpp"
#include "clustcal/sim.hpp"

int main(int argc, char** argv) {
  using namespace clustcal;

  CLI::App app{"Generate a demo clustered validation data set"};
  std::string preset = "P2";
  std::size_t clusters = 20;
  std::size_t per_cluster = 500;
  std::uint64_t seed = 1;
  std::optional<double> sigma_u2;
  std::string out;
  app.add_option("--preset", preset, "Superpopulation preset P1-P4")->capture_default_str();
  app.add_option("--clusters", clusters, "Number of clusters")->capture_default_str();
  app.add_option("--per-cluster", per_cluster, "Patients per cluster")->capture_default_str();
  app.add_option("--seed", seed, "Random seed")->capture_default_str();
  app.add_option("--sigma-u2", sigma_u2, "Override the random-intercept variance");
  app.add_option("--out", out, "Output CSV (default: stdout)");
  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = sim::preset(preset);
    if (sigma_u2) cfg.sigma_u2 = *sigma_u2;
    if (clusters < 1 || per_cluster < 1) throw Error(ErrorKind::invalid_argument, "clusters and per-cluster must be positive");

    std::ofstream file;
    if (!out.empty()) {
      file.open(out, std::ios::binary);
      if (!file) throw Error(ErrorKind::io, "cannot write '" + out + "'");
    }
    std::ostream& os = out.empty() ? std::cout : file;
    os << "cluster,y,p_hat\n";
    const double sd = std::sqrt(cfg.sigma_u2);
    for (std::size_t j = 0; j < clusters; ++j) {
      const rng::Stream s(rng::derive(seed, {j}));
      const double u = sd * s.normal(0);
      for (std::size_t i = 0; i < per_cluster; ++i) {
        const double x = s.normal(3 * i + 1);
        const double lp = cfg.beta0 + cfg.beta1 * x;
        const int y = s.uniform(3 * i + 2) < expit(lp + u) ? 1 : 0;
        os << sim::cluster_label(j) << ',' << y << ',' << format("%.8f", expit(lp)) << '\n';
      }
    }
    if (!out.empty()) std::fprintf(stderr, "wrote %zu rows to %s\n", clusters * per_cluster, out.c_str());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
