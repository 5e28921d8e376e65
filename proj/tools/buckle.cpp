// Command-line driver: one subcommand per pipeline stage.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "buckle/error.hpp"
#include "buckle/geometry_io.hpp"
#include "buckle/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kUpstream = 3, kNumerical = 4 };

struct Flags {
  std::string config;
  std::optional<std::string> sub_dataset;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> method;
  std::optional<double> radius;
  std::optional<std::string> density;
  bool augment = false;
  std::optional<int> num_seeds;
  bool quiet = false;
  bool print_config = false;
};

buckle::PipelineConfig resolve(const Flags& f) {
  using namespace buckle;
  PipelineConfig c;
  if (!f.config.empty()) {
    std::string text;
    try {
      text = read_text_file(f.config);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    c = config_from_json(text);
    if (f.sub_dataset) c.sub_dataset = parse_sub_dataset(*f.sub_dataset);
  } else {
    c = PipelineConfig::defaults_for(f.sub_dataset ? parse_sub_dataset(*f.sub_dataset) : SubDataset::Sub1);
  }
  if (f.seed) c.master_seed = *f.seed;
  if (f.out) c.output_dir = *f.out;
  if (f.method) c.method = parse_method(*f.method);
  if (f.radius) c.radius = *f.radius;
  if (f.density) c.density = parse_density(*f.density);
  if (f.augment) c.augment = true;
  if (f.num_seeds) c.num_seeds = *f.num_seeds;
  c.validate();
  return c;
}

int run(buckle::Stage stage, const Flags& f) {
  using namespace buckle;
  try {
    PipelineConfig cfg;
    try {
      cfg = resolve(f);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (f.print_config) {
      std::cout << config_to_json(cfg) << '\n';
      return kOk;
    }
    LogFn log;
    if (!f.quiet) log = [](const std::string& m) { std::cerr << m << std::endl; };
    run_stage(stage, cfg, log);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const UnsupportedRepresentationError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ArgumentError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const UpstreamError& e) {
    std::cerr << "missing or stale input: " << e.what() << '\n';
    return kUpstream;
  } catch (const FormatError& e) {
    std::cerr << "unreadable input: " << e.what() << '\n';
    return kUpstream;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Buckling-direction dataset generation, simulation and GNN classification"};
  app.require_subcommand(1);
  Flags flags;

  const std::pair<buckle::Stage, const char*> stages[] = {
      {buckle::Stage::Generate, "sample column geometries, rasterize them, write the manifest"},
      {buckle::Stage::Simulate, "run the compression solver and label every column"},
      {buckle::Stage::Graphify, "segment, build graphs and normalize features"},
      {buckle::Stage::Train, "train one classifier per ensemble seed"},
      {buckle::Stage::Evaluate, "score every model on the test split"},
      {buckle::Stage::Ensemble, "hard and soft voting report"},
      {buckle::Stage::Calibrate, "reliability diagram, ECE and MCE"},
      {buckle::Stage::Pipeline, "run every stage in order"},
  };
  std::optional<buckle::Stage> chosen;
  for (const auto& [stage, help] : stages) {
    CLI::App* sub = app.add_subcommand(buckle::to_string(stage), help);
    sub->add_option("--config", flags.config, "pipeline config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--sub-dataset", flags.sub_dataset, "sub-dataset 1, 2 or 3")
        ->check(CLI::IsMember({"1", "2", "3"}));
    sub->add_option("--seed", flags.seed, "master seed");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--method", flags.method, "graph construction")->check(CLI::IsMember({"ball", "rag", "exact"}));
    sub->add_option("--radius", flags.radius, "ball-query radius in widths");
    sub->add_option("--density", flags.density, "superpixel density")
        ->check(CLI::IsMember({"sparse", "medium", "dense"}));
    sub->add_flag("--augment", flags.augment, "add X, Y and XY reflections of training columns");
    sub->add_option("--num-seeds", flags.num_seeds, "ensemble size");
    sub->add_flag("-q,--quiet", flags.quiet, "no progress output");
    sub->add_flag("--print-config", flags.print_config, "print the resolved config and exit");
    sub->callback([&chosen, stage = stage] { chosen = stage; });
  }
  app.footer("Threads: BUCKLE_THREADS (default: all cores).\n"
             "Exit codes: 0 ok, 2 config error, 3 missing/stale upstream artifact, 4 numerical failure.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfig;
  }
  return run(*chosen, flags);
}
