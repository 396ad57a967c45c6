#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "trunkscope/experiments.hpp"
#include "trunkscope/fixtures.hpp"
#include "trunkscope/io.hpp"

using namespace trunkscope;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = TRUNKSCOPE_FIXTURE_DIR;
const std::string kCli = TRUNKSCOPE_CLI;

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("trunkscope_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Copies the named corpus files into dir/pdb.
fs::path corpus_subset(const fs::path& dir, const std::vector<std::string>& names) {
  const auto pdb = dir / "pdb";
  fs::create_directories(pdb);
  for (const auto& n : names) fs::copy_file(kFixtures / "pdb" / (n + ".pdb"), pdb / (n + ".pdb"));
  return pdb;
}

fs::path write_config(const fs::path& dir, const std::string& body) {
  const auto path = dir / "batch.ini";
  write_file(path, body);
  return path;
}

int cli(const std::string& args) {
  const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::vector<ResultRow> rows_of(const fs::path& csv) { return parse_results_csv(read_file(csv)); }

std::string small_config(const std::string& out, const std::string& experiments) {
  return "[data]\nstructures = pdb\nweights = random:7\nseed = 9\nout = " + out + "\n\n" + experiments;
}

}  // namespace

TEST_CASE("config errors name the offending field") {
  const auto dir = fresh_dir("config");
  corpus_subset(dir, {"hth_alpha"});
  auto field_of = [&](const std::string& text) {
    try {
      parse_config(text, dir);
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  CHECK(field_of("[data]\nstructures = pdb\n[experiment:a]\nkind = full_patch\nblocks = 1\n") == "experiment:a.blocks");
  CHECK(field_of("[data]\nstructures = pdb\n[experiment:a]\nkind = fold_it\n") == "experiment:a.kind");
  CHECK(field_of("[data]\nstructures = pdb\n[experiment:a]\nmask = intra\n") == "experiment:a.kind");
  CHECK(field_of("[data]\nstructures = missing_dir\n") == "data.structures");
  CHECK(field_of("[data]\nstructures = pdb\nweights = nowhere.tsw\n") == "data.weights");
  CHECK(field_of("[data]\nstructures = pdb\nweights = random:x\n") == "data.weights");
  CHECK(field_of("[data]\nstructures = pdb\nrecycles = 4\n") == "data.recycles");
  CHECK(field_of("[data]\nstructures = pdb\nculling = none.csv\n") == "data.culling");
  CHECK(field_of("[data]\nstructures = pdb\n[experiment:a]\nkind = scale_sweep\nfactors = 1,-1\n") ==
        "experiment:a.factors");
  CHECK(field_of("[data]\nstructures = pdb\n[experiment:a]\nkind = single_block_sweep\nblocks = 3-1\n") ==
        "experiment:a.blocks");
  CHECK(field_of("[data]\nstructures = pdb\n[experiment:a]\nkind = contributions\n[experiment:a]\nkind = contributions\n") ==
        "config");
  CHECK(field_of("[experiment:a]\nkind = contributions\n") == "data");
  CHECK(field_of("[data]\nstructures = pdb\n[other]\nx = 1\n") == "other");

  const BatchConfig ok = parse_config(
      "[data]\nstructures = pdb\nseed = 4\n[experiment:sw]\nkind = single_block_sweep\nblocks = 0-2,5\ntracks = z\n"
      "mask = touch\n",
      dir);
  REQUIRE(ok.experiments.size() == 1);
  CHECK(ok.data.seed == 4);
  CHECK(*ok.experiments[0].settings.blocks == std::vector<int>{0, 1, 2, 5});
  CHECK(ok.experiments[0].settings.tracks == std::vector<Track>{Track::z});
  CHECK(ok.experiments[0].settings.touch_mask);

  // Block ranges are checked against the weights before any compute.
  const BatchConfig late = parse_config(
      small_config((dir / "out").string(), "[experiment:sw]\nkind = single_block_sweep\nblocks = 12\n"), dir);
  try {
    run_batch(late);
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "experiment:sw.blocks");
  }
  CHECK_FALSE(fs::exists(dir / "out" / "sw.csv"));
}

TEST_CASE("seed precedence: flag, then environment, then config") {
  CHECK(resolve_seed(9, std::nullopt, nullptr) == 9);
  CHECK(resolve_seed(9, std::nullopt, "") == 9);
  CHECK(resolve_seed(9, std::nullopt, "13") == 13);
  CHECK(resolve_seed(9, 21, "13") == 21);
  CHECK_THROWS_AS(resolve_seed(9, std::nullopt, "x1"), ConfigError);
}

TEST_CASE("results CSV round trip and schema row") {
  ResultRow r;
  r.experiment = "e";
  r.unit = "t@3<-d:A:1";
  r.target = "t";
  r.donor = "d:A:1";
  r.variant = "s";
  r.block = 4;
  r.window = Window{2, 6};
  r.metric = "hbond_fraction";
  r.value = 0.1 + 0.2;
  r.flags = "rg_collapse";
  ResultRow bad = r;
  bad.block.reset();
  bad.window.reset();
  bad.metric = "";
  bad.value = std::nan("");
  bad.error = "numerical";
  const std::string text = results_header() + result_row_csv(r) + result_row_csv(bad);
  CHECK(text.rfind("schema_version,1\n", 0) == 0);
  const auto back = parse_results_csv(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].value == r.value);
  CHECK(back[0].block == 4);
  CHECK(back[0].window == Window{2, 6});
  CHECK(back[0].flags == "rg_collapse");
  CHECK(std::isnan(back[1].value));
  CHECK_FALSE(back[1].block);
  CHECK(back[1].error == "numerical");
  CHECK(parse_results_csv("").empty());
  CHECK_THROWS_AS(parse_results_csv("schema_version,2\n"), ExperimentError);
  CHECK_THROWS_AS(parse_results_csv("experiment,unit\n"), ExperimentError);
}

TEST_CASE("rg filter thresholds") {
  CHECK(rg_check(8.9, 10.0).collapsed);
  CHECK_FALSE(rg_check(9.5, 10.0).collapsed);
  const RgCheck unsteered = rg_check(10.0, 10.0);
  CHECK_FALSE(unsteered.collapsed);
  CHECK(unsteered.ratio == 1.0);
  CHECK_FALSE(rg_check(9.0, 10.0).collapsed);  // exactly 0.9 is kept
  CHECK_THROWS_AS(rg_check(9.0, std::nullopt), ExperimentError);
  CHECK_THROWS_AS(rg_check(9.0, 0.0), ExperimentError);

  std::vector<ResultRow> rows(2);
  rows[0].metric = "hbond_fraction";
  rows[0].value = 0.5;
  rows[1].metric = "rg_ratio";
  rows[1].value = 0.89;
  rg_filter(rows, rg_check(8.9, 10.0));
  CHECK(rows[0].flags == "rg_collapse");
  CHECK(rows[1].flags == "rg_collapse");
  // Flagged rows stay in the raw output but leave the aggregates.
  Summary s;
  accumulate(s, rows);
  CHECK(s.empty());
}

TEST_CASE("summarize: sample std, shards and an external aggregate") {
  std::vector<ResultRow> rows(2);
  for (int i = 0; i < 2; ++i) {
    rows[static_cast<std::size_t>(i)].experiment = "e";
    rows[static_cast<std::size_t>(i)].block = 3;
    rows[static_cast<std::size_t>(i)].metric = "hairpin_formed";
    rows[static_cast<std::size_t>(i)].value = i;
  }
  Summary s;
  accumulate(s, rows);
  REQUIRE(s.size() == 1);
  const Accumulator& a = s.begin()->second;
  CHECK(a.count == 2);
  CHECK(a.mean == 0.5);
  CHECK(a.std_dev() == doctest::Approx(0.7071).epsilon(1e-4));

  // Associativity: merging shard accumulators equals the union.
  const auto all = rows_of(kFixtures / "summary" / "rows20.csv");
  REQUIRE(all.size() == 20);
  Summary whole, left, right;
  accumulate(whole, all);
  accumulate(left, std::vector<ResultRow>(all.begin(), all.begin() + 7));
  accumulate(right, std::vector<ResultRow>(all.begin() + 7, all.end()));
  for (const auto& [k, acc] : right) left[k].merge(acc);
  REQUIRE(left.size() == whole.size());
  for (const auto& [k, acc] : whole) {
    CHECK(left[k].count == acc.count);
    CHECK(left[k].mean == doctest::Approx(acc.mean).epsilon(1e-12));
    if (acc.count > 1) CHECK(left[k].std_dev() == doctest::Approx(acc.std_dev()).epsilon(1e-12));
  }

  // Cross-check against values recomputed outside the library.
  const auto expected = parse_csv(read_file(kFixtures / "summary" / "rows20_expected.csv"));
  REQUIRE(expected.size() == whole.size() + 1);
  for (std::size_t i = 1; i < expected.size(); ++i) {
    const auto& e = expected[i];
    const SummaryKey key{e[0], e[1], e[2], std::stoi(e[3]), std::nullopt};
    REQUIRE(whole.count(key));
    const Accumulator& acc = whole.at(key);
    CHECK(acc.count == std::stol(e[4]));
    CHECK(acc.mean == doctest::Approx(std::stod(e[5])).epsilon(1e-12));
    if (e[6] == "nan") {
      CHECK(std::isnan(acc.std_dev()));
    } else {
      CHECK(acc.std_dev() == doctest::Approx(std::stod(e[6])).epsilon(1e-12));
    }
  }
}

TEST_CASE("summarize command: shards, union and empty input") {
  const auto dir = fresh_dir("summarize");
  const std::string text = read_file(kFixtures / "summary" / "rows20.csv");
  const auto lines = parse_csv(text);
  std::string a = results_header(), b = results_header();
  for (std::size_t i = 2; i < lines.size(); ++i) {
    std::string line;
    for (std::size_t f = 0; f < lines[i].size(); ++f) line += (f ? "," : "") + lines[i][f];
    (i < 9 ? a : b) += line + "\n";
  }
  write_file(dir / "a.csv", a);
  write_file(dir / "b.csv", b);
  REQUIRE(cli("summarize " + (dir / "a.csv").string() + " " + (dir / "b.csv").string() + " --out " +
              (dir / "shards.csv").string()) == 0);
  REQUIRE(cli("summarize " + (kFixtures / "summary" / "rows20.csv").string() + " --out " +
              (dir / "union.csv").string()) == 0);
  CHECK(read_file(dir / "shards.csv") == read_file(dir / "union.csv"));

  write_file(dir / "empty.csv", "");
  REQUIRE(cli("summarize " + (dir / "empty.csv").string() + " --out " + (dir / "e1.csv").string()) == 0);
  CHECK(read_file(dir / "e1.csv") == "experiment,variant,metric,block,window,count,mean,std\n");
  REQUIRE(cli("summarize --out " + (dir / "e2.csv").string()) == 0);
  CHECK(read_file(dir / "e2.csv") == read_file(dir / "e1.csv"));
  CHECK(cli("summarize " + (dir / "missing.csv").string()) == 3);
}

TEST_CASE("self-donor block sweep reproduces the baseline at every block and track") {
  const auto dir = fresh_dir("selfpatch");
  corpus_subset(dir, {"hth_alpha", "hairpin_a"});
  const auto cfg = parse_config(
      small_config("out", "[experiment:self]\nkind = single_block_sweep\nself_donor = true\n"), dir);
  const BatchReport rep = run_batch(cfg);
  REQUIRE(rep.experiments.size() == 1);
  CHECK(rep.failed_units() == 0);
  const auto rows = rows_of(dir / "out" / "self.csv");
  std::map<std::string, double> baseline;
  for (const auto& r : rows)
    if (r.variant == "baseline") baseline[r.metric] = r.value;
  REQUIRE(baseline.size() == 2);
  int checked = 0;
  for (const auto& r : rows) {
    if (r.variant == "baseline") continue;
    CHECK(r.value == baseline.at(r.metric));
    ++checked;
  }
  CHECK(checked == 12 * 2 * 2);
}

TEST_CASE("scale sweep with identity readout is proportional to the factor") {
  const auto dir = fresh_dir("scale");
  corpus_subset(dir, {"hth_alpha", "hairpin_b"});
  const auto cfg = parse_config(small_config("out", "[experiment:sc]\nkind = scale_sweep\nfactors = 0.5,1.0,1.5,2.0\n"
                                                    "tracks = z\n") +
                                    "",
                                dir);
  BatchConfig c = cfg;
  c.data.readout = Readout::identity;
  c.data.decoder_bias = 0.0;
  run_batch(c);
  const auto rows = rows_of(dir / "out" / "sc.csv");
  std::map<std::string, std::map<std::string, double>> by_target;
  for (const auto& r : rows) by_target[r.target][r.variant] = r.value;
  REQUIRE(by_target.size() == 2);
  for (const auto& [t, v] : by_target) {
    const double base = v.at("z:1");
    REQUIRE(base > 0);
    for (const auto& [name, factor] : std::map<std::string, double>{{"z:0.5", 0.5}, {"z:1.5", 1.5}, {"z:2", 2.0}}) {
      CHECK(std::abs(v.at(name) - factor * base) <= 1e-9 * factor * base);
    }
  }
}

TEST_CASE("batches are deterministic, job-count independent and resumable") {
  const auto dir = fresh_dir("determinism");
  corpus_subset(dir, {"hth_alpha", "hairpin_a", "hairpin_b"});
  const std::string experiments =
      "[experiment:sweep]\nkind = single_block_sweep\nblocks = 0,5,11\n\n"
      "[experiment:charge]\nkind = charge_steer\n\n"
      "[experiment:shares]\nkind = contributions\n";
  const auto cfg_path = write_config(dir, small_config("run1", experiments));
  REQUIRE(cli("run --config " + cfg_path.string()) == 0);
  REQUIRE(cli("run --config " + cfg_path.string() + " --out " + (dir / "run2").string() + " --jobs 3") == 0);
  for (const char* id : {"sweep", "charge", "shares"}) {
    const std::string name = std::string(id) + ".csv";
    CHECK(read_file(dir / "run1" / name) == read_file(dir / "run2" / name));
  }
  for (const auto& r : rows_of(dir / "run1" / "sweep.csv")) CHECK(is_known_metric(r.metric));

  // Different seed, different pairing stream: the run still succeeds.
  CHECK(cli("run --config " + cfg_path.string() + " --out " + (dir / "run3").string() + " --seed 4") == 0);

  // Interrupt during the second unit: its rows are partly written, with a
  // torn last line, and only the first unit is journaled.
  fs::copy(dir / "run1", dir / "run4");
  const std::string full = read_file(dir / "run1" / "sweep.csv");
  const auto journal = read_file(dir / "run1" / "sweep.journal");
  const std::string first_unit = journal.substr(0, journal.find('\n'));
  const std::string second_unit = journal.substr(first_unit.size() + 1, journal.find('\n', first_unit.size() + 1) - first_unit.size() - 1);
  const std::size_t second_rows = full.find("," + second_unit + ",");
  REQUIRE(second_rows != std::string::npos);
  write_file(dir / "run4" / "sweep.journal", first_unit + "\n");
  write_file(dir / "run4" / "sweep.csv", full.substr(0, second_rows + 300));
  write_file(dir / "run4" / "charge.journal", "");
  REQUIRE(cli("run --config " + cfg_path.string() + " --out " + (dir / "run4").string() + " --resume") == 0);
  CHECK(read_file(dir / "run4" / "sweep.csv") == full);
  CHECK(read_file(dir / "run4" / "sweep.journal") == journal);
  CHECK(read_file(dir / "run4" / "charge.csv") == read_file(dir / "run1" / "charge.csv"));
}

TEST_CASE("exit codes") {
  const auto dir = fresh_dir("exits");
  corpus_subset(dir, {"hth_beta", "hairpin_a"});
  CHECK(cli("") == 2);
  CHECK(cli("run") == 2);
  CHECK(cli("run --config " + (dir / "absent.ini").string()) == 2);
  CHECK(cli("run --config " + write_config(dir, "[data]\nstructures = nowhere\n").string()) == 2);

  fs::create_directories(dir / "locked");
  write_file(dir / "locked" / "file", "x");
  const auto io_cfg = write_config(dir, small_config("locked/file/out", "[experiment:s]\nkind = contributions\n"));
  CHECK(cli("run --config " + io_cfg.string()) == 3);

  // A touch mask on a long target reaches pairs with no donor counterpart,
  // so every unit fails; --strict turns that into exit 4.
  const auto touch = write_config(dir, small_config("touch", "[experiment:t]\nkind = full_patch\nmask = touch\n"));
  CHECK(cli("run --config " + touch.string()) == 0);
  const auto rows = rows_of(dir / "touch" / "t.csv");
  REQUIRE_FALSE(rows.empty());
  for (const auto& r : rows) CHECK(r.error == "intervention");
  CHECK(cli("run --config " + touch.string() + " --strict") == 4);
  CHECK(cli("run --config " + touch.string() + " --experiment nope") == 2);
}

TEST_CASE("dataset subcommands and generators") {
  const auto dir = fresh_dir("dataset");
  REQUIRE(cli("gen-fixtures --out " + (dir / "pdb").string()) == 0);
  for (const auto& f : fixtures::corpus())
    CHECK(read_file(dir / "pdb" / f.file_name) == read_file(kFixtures / "pdb" / f.file_name));

  const auto cfg = write_config(dir, "[data]\nstructures = pdb\nseed = 9\nout = ds\n");
  REQUIRE(cli("build-dataset --config " + cfg.string()) == 0);
  const auto hairpins = parse_csv(read_file(dir / "ds" / "hairpins.csv"));
  CHECK(hairpins.size() == 1 + 4);
  const auto manifest = parse_manifest_csv(read_file(dir / "ds" / "manifest.csv"));
  CHECK(manifest.size() == 12);
  for (const auto& row : manifest) {
    CHECK(row.region.length() >= 15);
    CHECK(row.region.length() <= 20);
  }
  const auto targets = parse_csv(read_file(dir / "ds" / "targets.csv"));
  CHECK(targets.size() == 1 + 3);

  REQUIRE(cli("mine-hairpins --config " + cfg.string() + " --out " + (dir / "mined").string()) == 0);
  CHECK(read_file(dir / "mined" / "hairpins.csv") == read_file(dir / "ds" / "hairpins.csv"));
  CHECK_FALSE(fs::exists(dir / "mined" / "manifest.csv"));

  REQUIRE(cli("gen-weights --out " + (dir / "w.tsw").string() + " --seed 7") == 0);
  CHECK(weights_digest(load_weights(dir / "w.tsw")) == weights_digest(random_weights(TrunkDims{}, 7)));
  const auto wcfg = write_config(dir, "[data]\nstructures = pdb\nweights = w.tsw\nout = probes_out\n");
  CHECK(parse_config(read_file(wcfg), dir).data.weights == (dir / "w.tsw").string());
}
