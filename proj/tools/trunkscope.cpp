// trunkscope: command-line front end for datasets, probes and experiment batches.
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trunkscope/experiments.hpp"
#include "trunkscope/fixtures.hpp"
#include "trunkscope/io.hpp"

namespace fs = std::filesystem;
using namespace trunkscope;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kNumerical = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool resume = false;
  bool strict = false;
  std::string out;
  std::vector<std::string> only;
};

BatchConfig load(const Common& c) {
  BatchConfig cfg = load_config(c.config);
  cfg.data.seed = resolve_seed(cfg.data.seed, c.seed, std::getenv("TRUNKSCOPE_SEED"));
  if (!c.out.empty()) cfg.data.out = c.out;
  if (c.jobs < 1) throw ConfigError("--jobs", "must be >= 1");
  return cfg;
}

int report(const BatchReport& r, bool strict) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  for (const auto& e : r.experiments) {
    std::cout << e.id << ": " << e.units << " units (" << e.resumed_units << " resumed, " << e.failed_units
              << " failed), " << e.rows << " rows -> " << e.results.string() << "\n";
  }
  if (r.failed_units() > 0) {
    std::cerr << r.failed_units() << " unit(s) failed\n";
    if (strict) return kNumerical;
  }
  return kOk;
}

int run_batch_cmd(const Common& c) {
  const BatchConfig cfg = load(c);
  BatchOptions opt;
  opt.jobs = c.jobs;
  opt.resume = c.resume;
  opt.only = c.only;
  return report(run_batch(cfg, opt), c.strict);
}

int train_probes_cmd(const Common& c) {
  BatchConfig cfg = load(c);
  std::vector<ExperimentSpec> probes;
  for (const auto& e : cfg.experiments)
    if (e.kind == ExperimentKind::probe_train) probes.push_back(e);
  if (probes.empty()) probes.push_back({"probes", ExperimentKind::probe_train, {}});
  cfg.experiments = probes;
  BatchOptions opt;
  opt.jobs = c.jobs;
  opt.resume = c.resume;
  return report(run_batch(cfg, opt), c.strict);
}

int dataset_cmd(const Common& c, bool with_manifest) {
  const BatchConfig cfg = load(c);
  const DatasetFiles f = build_dataset(cfg.data, cfg.data.out, c.jobs, with_manifest);
  std::cout << f.hairpins << " hairpins";
  if (with_manifest) std::cout << ", " << f.targets << " targets, " << f.manifest_rows << " manifest rows";
  std::cout << ", " << f.rejections << " rejections -> " << cfg.data.out.string() << "\n";
  return kOk;
}

int summarize_cmd(const std::vector<std::string>& inputs, const std::string& out) {
  Summary summary;
  for (const auto& path : inputs) accumulate(summary, parse_results_csv(read_file(path)));
  const std::string text = summary_csv(summary);
  if (out.empty()) {
    std::cout << text;
  } else {
    write_file(out, text);
  }
  return kOk;
}

int gen_weights_cmd(const std::string& out, std::uint64_t seed, bool staged) {
  const TrunkWeights w = staged ? staged_weights(TrunkDims{}, seed) : random_weights(TrunkDims{}, seed);
  save_weights(w, out);
  char digest[24];
  std::snprintf(digest, sizeof(digest), "%016llx", static_cast<unsigned long long>(weights_digest(w)));
  std::cout << out << " digest " << digest << "\n";
  return kOk;
}

int gen_fixtures_cmd(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out + ": " + ec.message());
  for (const auto& f : fixtures::corpus()) {
    write_pdb_file(fs::path(out) / f.file_name, {f.structure});
    std::cout << (fs::path(out) / f.file_name).string() << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trunkscope: interventions and probes on a miniature folding trunk"};
  app.require_subcommand(1);
  Common common;

  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", common.config, "batch config (INI)")->required(); };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", common.seed, "overrides the config seed"); };
  auto add_jobs = [&](CLI::App* sub) { sub->add_option("--jobs", common.jobs, "worker threads")->check(CLI::PositiveNumber); };

  auto* run = app.add_subcommand("run", "run the experiments of a config");
  add_config(run);
  add_seed(run);
  add_jobs(run);
  run->add_flag("--resume", common.resume, "skip units already in the journal");
  run->add_flag("--strict", common.strict, "exit 4 when a unit fails numerically");
  run->add_option("--out", common.out, "output directory (overrides data.out)");
  run->add_option("--experiment", common.only, "run only these experiment ids");

  auto* probes = app.add_subcommand("train-probes", "fit distance, identity and charge probes per block");
  add_config(probes);
  add_seed(probes);
  add_jobs(probes);
  probes->add_flag("--resume", common.resume, "skip units already in the journal");
  probes->add_flag("--strict", common.strict, "exit 4 when a unit fails numerically");
  probes->add_option("--out", common.out, "output directory");

  auto* build = app.add_subcommand("build-dataset", "mine hairpins, find target loops and pair donors");
  add_config(build);
  add_seed(build);
  add_jobs(build);
  build->add_option("--out", common.out, "output directory");

  auto* mine = app.add_subcommand("mine-hairpins", "mine hairpin records from a structure directory");
  add_config(mine);
  add_jobs(mine);
  mine->add_option("--out", common.out, "output directory");

  std::vector<std::string> inputs;
  std::string summary_out;
  auto* summarize = app.add_subcommand("summarize", "per-block mean, std and count of result files");
  summarize->add_option("results", inputs, "result CSV files");
  summarize->add_option("--out", summary_out, "summary CSV (default stdout)");

  std::string weights_out;
  std::uint64_t weights_seed = 7;
  bool staged = false;
  auto* gen_w = app.add_subcommand("gen-weights", "write a generated weights file");
  gen_w->add_option("--out", weights_out, "weights file")->required();
  gen_w->add_option("--seed", weights_seed, "generator seed");
  gen_w->add_flag("--staged", staged, "two-stage layout instead of dense random weights");

  std::string fixtures_out;
  auto* gen_f = app.add_subcommand("gen-fixtures", "write the fixture PDB corpus");
  gen_f->add_option("--out", fixtures_out, "directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (run->parsed()) return run_batch_cmd(common);
    if (probes->parsed()) return train_probes_cmd(common);
    if (build->parsed()) return dataset_cmd(common, true);
    if (mine->parsed()) return dataset_cmd(common, false);
    if (summarize->parsed()) return summarize_cmd(inputs, summary_out);
    if (gen_w->parsed()) return gen_weights_cmd(weights_out, weights_seed, staged);
    if (gen_f->parsed()) return gen_fixtures_cmd(fixtures_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
