// Writes the bundled synthetic task (images, manifest, sidecar) to a directory.
#include <iostream>

#include <CLI11.hpp>

#include "rebalance/error.hpp"
#include "rebalance/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate the synthetic starved-class task"};
  rebalance::synthetic::Config cfg;
  std::string out;
  double area = 0.0;
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--seed", cfg.seed, "generator seed");
  app.add_option("--starved-train", cfg.starved_train);
  app.add_option("--large-train", cfg.large_train);
  app.add_option("--starved-test", cfg.starved_test);
  app.add_option("--large-test", cfg.large_test);
  app.add_option("--source-per-category", cfg.source_per_category);
  app.add_option("--test-area-km2", area, "survey area recorded for the test split");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto task = rebalance::synthetic::generate(cfg);
    const auto manifest = rebalance::synthetic::write_task(task, out, cfg.patch, area);
    std::cout << "wrote " << manifest.records.size() << " records to " << out << "/manifest.csv\n";
  } catch (const rebalance::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  }
  return 0;
}
