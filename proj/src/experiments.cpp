#include "trunkscope/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <future>
#include <memory>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "trunkscope/io.hpp"
#include "trunkscope/probes.hpp"

namespace trunkscope {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kKindNames[] = {
    "full_patch",        "single_block_sweep", "reverse_patch",  "pathway_ablation", "freeze_writein",
    "charge_steer",      "same_charge_steer",  "distance_steer", "scale_sweep",      "redirection",
    "contributions",     "probe_train",        "dataset_build",
};

constexpr std::string_view kResultColumns = "experiment,unit,target,donor,variant,block,window,metric,value,flags,error";
constexpr std::string_view kSummaryColumns = "experiment,variant,metric,block,window,count,mean,std";

std::string fmt_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string short_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", x);
  return buf;
}

std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    const auto piece = trim(s.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

int parse_int(const std::string& field, std::string_view text) {
  int v = 0;
  const auto t = trim(text);
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) throw ConfigError(field, "not an integer: '" + t + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& field, std::string_view text) {
  std::uint64_t v = 0;
  const auto t = trim(text);
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty())
    throw ConfigError(field, "not an unsigned integer: '" + t + "'");
  return v;
}

double parse_double(const std::string& field, std::string_view text) {
  const auto t = trim(text);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(v))
    throw ConfigError(field, "not a finite number: '" + t + "'");
  return v;
}

bool parse_bool(const std::string& field, std::string_view text) {
  const auto t = trim(text);
  if (t == "true" || t == "yes" || t == "1") return true;
  if (t == "false" || t == "no" || t == "0") return false;
  throw ConfigError(field, "not a boolean: '" + t + "'");
}

Track parse_track_field(const std::string& field, std::string_view text) {
  try {
    return parse_track(trim(text));
  } catch (const Error&) {
    throw ConfigError(field, "track must be s or z");
  }
}

// "all", or a comma list of blocks and inclusive ranges a-b.
std::optional<std::vector<int>> parse_blocks(const std::string& field, std::string_view text) {
  if (trim(text) == "all") return std::nullopt;
  std::vector<int> blocks;
  for (const auto& item : split_list(text)) {
    const auto dash = item.find('-', 1);
    if (dash == std::string::npos) {
      blocks.push_back(parse_int(field, item));
      continue;
    }
    const int lo = parse_int(field, item.substr(0, dash));
    const int hi = parse_int(field, item.substr(dash + 1));
    if (hi < lo) throw ConfigError(field, "empty range '" + item + "'");
    for (int b = lo; b <= hi; ++b) blocks.push_back(b);
  }
  if (blocks.empty()) throw ConfigError(field, "no blocks listed");
  std::sort(blocks.begin(), blocks.end());
  blocks.erase(std::unique(blocks.begin(), blocks.end()), blocks.end());
  return blocks;
}

// Keys each kind accepts besides "kind", with kind-specific defaults.
std::map<std::string, std::string> kind_keys(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::full_patch:
      return {{"mask", "intra"}};
    case ExperimentKind::single_block_sweep:
      return {{"blocks", "all"},
              {"tracks", "s,z"},
              {"mask", "intra"},
              {"self_donor", "false"},
              {"require_full_success", "false"}};
    case ExperimentKind::reverse_patch:
      return {{"mode", "full"}, {"blocks", "all"}, {"tracks", "s,z"}, {"mask", "intra"}};
    case ExperimentKind::pathway_ablation:
      return {{"pathway", "seq2pair"}, {"window", "4"},     {"patch_track", "s"},
              {"patch_block", "0"},    {"mask", "intra"},   {"require_full_success", "false"}};
    case ExperimentKind::freeze_writein:
      return {{"freeze_end", "4"}, {"mask", "intra"}};
    case ExperimentKind::charge_steer:
    case ExperimentKind::same_charge_steer:
      return {{"window", "4"}, {"strength", "3"}, {"arm", "7"}, {"direction_block", "0"}};
    case ExperimentKind::distance_steer:
      return {{"window", "3"}, {"strength", "20"}, {"arm", "7"}, {"lambda", "0.001"}};
    case ExperimentKind::scale_sweep:
      return {{"factors", "0,0.25,0.5,0.75,1,1.25,1.5,1.75,2"}, {"tracks", "z,s"}};
    case ExperimentKind::redirection:
      return {{"patch_block", "6"}, {"mask", "intra"}};
    case ExperimentKind::probe_train:
      return {{"blocks", "all"}, {"lambda", "0.001"}};
    case ExperimentKind::contributions:
    case ExperimentKind::dataset_build:
      return {};
  }
  return {};
}

void apply_setting(ExperimentSettings& st, const std::string& key, const std::string& value, const std::string& field) {
  if (key == "blocks") {
    st.blocks = parse_blocks(field, value);
  } else if (key == "tracks") {
    st.tracks.clear();
    for (const auto& t : split_list(value)) st.tracks.push_back(parse_track_field(field, t));
    if (st.tracks.empty()) throw ConfigError(field, "no tracks listed");
  } else if (key == "mask") {
    const auto v = trim(value);
    if (v != "intra" && v != "touch") throw ConfigError(field, "mask must be intra or touch");
    st.touch_mask = v == "touch";
  } else if (key == "self_donor") {
    st.self_donor = parse_bool(field, value);
  } else if (key == "require_full_success") {
    st.require_full_success = parse_bool(field, value);
  } else if (key == "mode") {
    const auto v = trim(value);
    if (v != "full" && v != "sweep") throw ConfigError(field, "mode must be full or sweep");
    st.sweep = v == "sweep";
  } else if (key == "pathway") {
    const auto v = trim(value);
    if (v != "seq2pair" && v != "pair2seq" && v != "triangular")
      throw ConfigError(field, "pathway must be seq2pair, pair2seq or triangular");
    st.pathway = parse_pathway(v);
  } else if (key == "window") {
    st.window = parse_int(field, value);
    if (st.window < 1) throw ConfigError(field, "window must be >= 1");
  } else if (key == "patch_track") {
    st.patch_track = parse_track_field(field, value);
  } else if (key == "patch_block") {
    st.patch_block = parse_int(field, value);
  } else if (key == "freeze_end") {
    st.freeze_end = parse_int(field, value);
    if (st.freeze_end < 1) throw ConfigError(field, "freeze_end must be >= 1");
  } else if (key == "strength") {
    st.strength = parse_double(field, value);
  } else if (key == "arm") {
    st.arm = parse_int(field, value);
    if (st.arm < 1) throw ConfigError(field, "arm must be >= 1");
  } else if (key == "direction_block") {
    st.direction_block = parse_int(field, value);
  } else if (key == "factors") {
    st.factors.clear();
    for (const auto& f : split_list(value)) {
      st.factors.push_back(parse_double(field, f));
      if (st.factors.back() < 0) throw ConfigError(field, "factors must be >= 0");
    }
    if (st.factors.empty()) throw ConfigError(field, "no factors listed");
  } else if (key == "lambda") {
    st.lambda = parse_double(field, value);
    if (st.lambda < 0) throw ConfigError(field, "lambda must be >= 0");
  }
}

fs::path resolve_path(const fs::path& base, const std::string& value) {
  fs::path p(trim(value));
  return p.is_absolute() ? p : base / p;
}

bool is_generator_spec(std::string_view w) { return w.starts_with("random:") || w.starts_with("staged:"); }

void check_block(const std::string& field, int block, int K) {
  if (block < 0 || block >= K) {
    throw ConfigError(field, "block " + std::to_string(block) + " outside [0, " + std::to_string(K) + ")");
  }
}

// Block and window parameters against the loaded weights.
void validate_against(const ExperimentSpec& e, int K) {
  const std::string where = "experiment:" + e.id + ".";
  const ExperimentSettings& st = e.settings;
  if (st.blocks) {
    for (int b : *st.blocks) check_block(where + "blocks", b, K);
  }
  switch (e.kind) {
    case ExperimentKind::pathway_ablation:
      check_block(where + "patch_block", st.patch_block, K);
      if (st.window > K) throw ConfigError(where + "window", "window larger than the block count");
      break;
    case ExperimentKind::redirection:
      check_block(where + "patch_block", st.patch_block, K);
      break;
    case ExperimentKind::freeze_writein:
      if (st.freeze_end > K) throw ConfigError(where + "freeze_end", "beyond the last block");
      break;
    case ExperimentKind::charge_steer:
    case ExperimentKind::same_charge_steer:
      check_block(where + "direction_block", st.direction_block, K);
      [[fallthrough]];
    case ExperimentKind::distance_steer:
      if (st.window > K) throw ConfigError(where + "window", "window larger than the block count");
      break;
    default:
      break;
  }
}

// --- Dataset -----------------------------------------------------------------

std::string structure_key(const Structure& s) { return s.id + ":" + s.chain_id; }

struct Dataset {
  std::vector<Structure> structures;
  std::vector<SecStruct> secondary;
  std::vector<Rejection> rejections;
  std::vector<TargetLoops> targets;  // helical targets, id = structure key
  MineResult mined;
  PairingManifest manifest;
};

Dataset assemble_dataset(const DataConfig& data, int jobs, bool with_manifest) {
  Dataset ds;
  std::vector<std::pair<std::string, std::string>> culling;
  if (data.culling) culling = read_culling_manifest(*data.culling);
  LoadResult loaded = load_structure_dir(data.structures, data.culling ? &culling : nullptr);
  ds.structures = std::move(loaded.structures);
  ds.rejections = std::move(loaded.rejections);
  for (const Structure& s : ds.structures) {
    SecStruct ss;
    try {
      ss = assign_secondary(s);
    } catch (const Error& e) {
      ds.rejections.push_back({"targets", structure_key(s), "secondary_failed", e.what()});
      ss.codes.assign(static_cast<std::size_t>(s.size()), 'L');
    }
    const auto loops = loops_between_helices(ss);
    if (!loops.empty()) ds.targets.push_back({structure_key(s), s.sequence(), loops});
    ds.secondary.push_back(std::move(ss));
  }
  ds.mined = mine_hairpins(ds.structures, data.miner, jobs);
  for (const auto& r : ds.mined.rejections) ds.rejections.push_back(r);
  if (with_manifest && !ds.targets.empty() && !ds.mined.records.empty()) {
    Rng rng(derive_seed(data.seed, 1));
    ds.manifest = pair_donors(ds.targets, ds.mined.records, data.pairing, rng);
    for (const auto& r : ds.manifest.rejections) ds.rejections.push_back(r);
  }
  return ds;
}

std::string targets_csv(const std::vector<TargetLoops>& targets) {
  std::string out = "target_id,loop_begin,loop_end\n";
  for (const auto& t : targets)
    for (const auto& l : t.loops) out += t.id + "," + std::to_string(l.begin) + "," + std::to_string(l.end) + "\n";
  return out;
}

// --- Runtime context ---------------------------------------------------------

struct Entry {
  const Structure* structure = nullptr;
  const SecStruct* secondary = nullptr;
  std::string key;
  std::string sequence;
  TrunkOutput baseline;  // every block captured with tensors
  DecodedStructure decoded;
  double rg = 0.0;
};

struct Context {
  const DataConfig* data = nullptr;
  TrunkWeights weights;
  Dataset dataset;
  std::vector<Entry> entries;
  std::map<std::string, std::size_t> index;
  std::map<std::string, HairpinRecord> donors;
  int jobs = 1;

  int K() const { return weights.dims.K; }
  const Entry& entry(const std::string& key) const {
    const auto it = index.find(key);
    if (it == index.end()) throw ExperimentError("unknown structure '" + key + "'");
    return entries[it->second];
  }
  const HairpinRecord& donor(const std::string& id) const {
    const auto it = donors.find(id);
    if (it == donors.end()) throw ExperimentError("unknown donor '" + id + "'");
    return it->second;
  }
  RunOptions run_options(CapturePlan capture = CapturePlan::none()) const {
    RunOptions o;
    o.recycles = data->recycles;
    o.capture = std::move(capture);
    return o;
  }
  DecodedStructure decode(const TrunkOutput& out, const std::string& sequence) const {
    return decode_structure(out.s, out.z, weights, sequence, data->readout);
  }
};

template <typename F>
void parallel_for(std::size_t n, int jobs, F&& body) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::future<void>> workers;
  for (int w = 0; w < std::min<int>(jobs, static_cast<int>(n)); ++w) {
    workers.push_back(std::async(std::launch::async, [&] {
      for (std::size_t i = next++; i < n; i = next++) body(i);
    }));
  }
  for (auto& f : workers) f.get();
}

std::unique_ptr<Context> make_context(const DataConfig& data, TrunkWeights weights, int jobs) {
  auto ctx = std::make_unique<Context>();
  ctx->data = &data;
  ctx->weights = std::move(weights);
  ctx->jobs = jobs;
  ctx->dataset = assemble_dataset(data, jobs, true);
  const auto& structures = ctx->dataset.structures;
  ctx->entries.resize(structures.size());
  for (std::size_t i = 0; i < structures.size(); ++i) {
    Entry& e = ctx->entries[i];
    e.structure = &structures[i];
    e.secondary = &ctx->dataset.secondary[i];
    e.key = structure_key(structures[i]);
    e.sequence = structures[i].sequence();
    if (!ctx->index.emplace(e.key, i).second) throw ExperimentError("duplicate structure " + e.key);
  }
  const Context& c = *ctx;
  parallel_for(ctx->entries.size(), jobs, [&](std::size_t i) {
    Entry& e = ctx->entries[i];
    e.baseline = run_trunk(e.sequence, c.weights, nullptr, c.run_options(CapturePlan::all(c.K())));
    e.decoded = c.decode(e.baseline, e.sequence);
    e.rg = radius_of_gyration(e.decoded.structure);
  });
  for (const auto& r : ctx->dataset.mined.records) ctx->donors.emplace(r.id(), r);
  return ctx;
}

// --- Units -------------------------------------------------------------------

struct Unit {
  std::string key;
  std::function<std::vector<ResultRow>()> run;
};

struct RowMaker {
  std::string experiment;
  std::string unit;
  std::string target;
  std::string donor;

  ResultRow operator()(std::string variant, std::optional<int> block, std::optional<Window> window,
                       std::string metric, double value) const {
    ResultRow r;
    r.experiment = experiment;
    r.unit = unit;
    r.target = target;
    r.donor = donor;
    r.variant = std::move(variant);
    r.block = block;
    r.window = window;
    r.metric = std::move(metric);
    r.value = value;
    return r;
  }
};

std::vector<int> block_list(const ExperimentSettings& st, int K) {
  if (st.blocks) return *st.blocks;
  std::vector<int> all(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) all[static_cast<std::size_t>(k)] = k;
  return all;
}

std::vector<Window> sliding_windows(int width, int K) {
  std::vector<Window> out;
  for (int b = 0; b + width <= K; ++b) out.push_back({b, b + width});
  return out;
}

std::string loop_key(const std::string& target, IndexRange loop) { return target + "@" + std::to_string(loop.begin); }

// Loop plus up to `arm` residues of each neighbouring segment.
HairpinMotif arms_around(IndexRange loop, int arm, int length) {
  return {{std::max(0, loop.begin - arm), loop.begin}, loop, {loop.end, std::min(length, loop.end + arm)}};
}

// Loop widened on both sides to at least `min_len` residues, within the chain.
IndexRange widened(IndexRange loop, int min_len, int length) {
  IndexRange r = loop;
  while (r.length() < min_len && (r.begin > 0 || r.end < length)) {
    if (r.begin > 0) --r.begin;
    if (r.length() < min_len && r.end < length) ++r.end;
  }
  return r;
}

bool hairpin_formed(const DecodedStructure& d, IndexRange region) {
  return detect_hairpin(assign_secondary(d.structure), region).has_value();
}

bool helix_formed(const DecodedStructure& d, IndexRange region) {
  return assign_secondary(d.structure).fraction('H', region) >= 0.5;
}

// One patching pairing: target, donor run and loop-anchored region.
struct PatchCase {
  const Entry* target = nullptr;
  const Entry* donor = nullptr;
  Alignment align;
  IndexRange region;
  std::string key;
  std::string donor_id;
};

Patch make_patch(const PatchCase& pc, int block, Track track, bool touch) {
  Patch p;
  p.block = block;
  p.track = track;
  const BlockTrace& bt = pc.donor->baseline.trace.at(block);
  if (track == Track::s) {
    p.mask = RegionMask::rows({pc.region});
    p.donor = bt.s;
  } else {
    p.mask = touch ? RegionMask::touch({pc.region}) : RegionMask::intra({pc.region});
    p.donor = bt.z;
  }
  p.donor_length = pc.donor->baseline.trace.length;
  p.align = pc.align;
  p.donor_ref = pc.donor->key;
  return p;
}

InterventionPlan full_plan(const PatchCase& pc, int K, bool touch) {
  InterventionPlan plan;
  for (int k = 0; k < K; ++k) {
    plan.add(make_patch(pc, k, Track::s, touch));
    plan.add(make_patch(pc, k, Track::z, touch));
  }
  return plan;
}

PatchCase manifest_case(const Context& c, const ManifestRow& row) {
  PatchCase pc;
  pc.target = &c.entry(row.target_id);
  const HairpinRecord& d = c.donor(row.donor_id);
  pc.donor = &c.entry(d.source_id + ":" + d.chain);
  pc.align = {row.target_anchor, row.donor_anchor};
  pc.region = row.region;
  pc.key = loop_key(row.target_id, row.target_loop) + "<-" + row.donor_id;
  pc.donor_id = row.donor_id;
  return pc;
}

DecodedStructure run_decoded(const Context& c, const Entry& target, const InterventionPlan& plan,
                             TrunkOutput* keep = nullptr, CapturePlan capture = CapturePlan::none()) {
  TrunkOutput out = run_with_plan(target.sequence, c.weights, plan, c.run_options(std::move(capture)));
  DecodedStructure d = c.decode(out, target.sequence);
  if (keep) *keep = std::move(out);
  return d;
}

using Predicate = bool (*)(const DecodedStructure&, IndexRange);

// Patch sweep over a list of cases (forward or reverse direction).
std::vector<Unit> patch_units(const Context& c, const ExperimentSpec& e, std::vector<PatchCase> cases,
                              Predicate success, const std::string& metric, bool sweep) {
  std::vector<Unit> units;
  for (PatchCase& pc : cases) {
    units.push_back({pc.key, [&c, &e, pc, success, metric, sweep] {
                       const ExperimentSettings& st = e.settings;
                       RowMaker row{e.id, pc.key, pc.target->key, pc.donor_id};
                       std::vector<ResultRow> rows;
                       rows.push_back(row("baseline", std::nullopt, std::nullopt, metric,
                                          success(pc.target->decoded, pc.region) ? 1.0 : 0.0));
                       rows.push_back(row("baseline", std::nullopt, std::nullopt, "mean_ca_dist",
                                          mean_pairwise_ca_distance(pc.target->decoded.structure)));
                       if (!sweep || st.require_full_success) {
                         const DecodedStructure d = run_decoded(c, *pc.target, full_plan(pc, c.K(), st.touch_mask));
                         const bool ok = success(d, pc.region);
                         rows.push_back(row("full", std::nullopt, Window{0, c.K()}, metric, ok ? 1.0 : 0.0));
                         rows.push_back(row("full", std::nullopt, Window{0, c.K()}, "mean_ca_dist",
                                            mean_pairwise_ca_distance(d.structure)));
                         if (!sweep || !ok) return rows;
                       }
                       for (Track t : st.tracks) {
                         for (int k : block_list(st, c.K())) {
                           InterventionPlan plan;
                           plan.add(make_patch(pc, k, t, st.touch_mask));
                           const DecodedStructure d = run_decoded(c, *pc.target, plan);
                           const std::string v(track_name(t));
                           rows.push_back(row(v, k, std::nullopt, metric, success(d, pc.region) ? 1.0 : 0.0));
                           rows.push_back(row(v, k, std::nullopt, "mean_ca_dist", mean_pairwise_ca_distance(d.structure)));
                         }
                       }
                       return rows;
                     }});
  }
  return units;
}

std::vector<PatchCase> forward_cases(const Context& c) {
  std::vector<PatchCase> cases;
  for (const ManifestRow& row : c.dataset.manifest.rows) cases.push_back(manifest_case(c, row));
  return cases;
}

std::vector<PatchCase> self_cases(const Context& c) {
  std::vector<PatchCase> cases;
  for (const TargetLoops& t : c.dataset.targets) {
    const Entry& e = c.entry(t.id);
    for (const IndexRange& loop : t.loops) {
      PatchCase pc;
      pc.target = pc.donor = &e;
      pc.align = {loop.begin, loop.begin};
      pc.region = widened(loop, c.data->pairing.region_min, static_cast<int>(e.sequence.size()));
      pc.key = loop_key(t.id, loop) + "<-self";
      pc.donor_id = "self";
      cases.push_back(pc);
    }
  }
  return cases;
}

// Hairpin sources become targets; helix-loop-helix segments of the
// helical targets become donors, capped at 10 helix residues per side.
std::vector<PatchCase> reverse_cases(const Context& c, std::vector<std::string>& warnings) {
  std::map<std::string, TargetLoops> by_source;
  for (const HairpinRecord& r : c.dataset.mined.records) {
    const std::string key = r.source_id + ":" + r.chain;
    const Entry& e = c.entry(key);
    auto& t = by_source[key];
    t.id = key;
    t.sequence = e.sequence;
    t.loops.push_back(r.motif.loop);
  }
  std::vector<TargetLoops> targets;
  for (auto& [key, t] : by_source) {
    std::sort(t.loops.begin(), t.loops.end(), [](IndexRange a, IndexRange b) { return a.begin < b.begin; });
    targets.push_back(t);
  }
  std::vector<HairpinRecord> donors;
  std::map<std::string, std::string> donor_source;
  for (const TargetLoops& t : c.dataset.targets) {
    const Entry& e = c.entry(t.id);
    const SecStruct& ss = *e.secondary;
    const int L = ss.size();
    for (const IndexRange& loop : t.loops) {
      int b = loop.begin;
      while (b > 0 && ss[b - 1] == 'H' && loop.begin - b < 10) --b;
      int en = loop.end;
      while (en < L && ss[en] == 'H' && en - loop.end < 10) ++en;
      HairpinRecord d;
      d.source_id = e.structure->id;
      d.chain = e.structure->chain_id;
      d.motif = {{b, loop.begin}, loop, {loop.end, en}};
      d.fragment = e.sequence.substr(static_cast<std::size_t>(b), static_cast<std::size_t>(en - b));
      d.flank_before = b;
      d.flank_after = L - en;
      donors.push_back(d);
    }
  }
  std::vector<PatchCase> cases;
  if (targets.empty() || donors.empty()) {
    warnings.push_back("reverse_patch: no hairpin targets or helical donors");
    return cases;
  }
  Rng rng(derive_seed(c.data->seed, 2));
  const PairingManifest m = pair_donors(targets, donors, c.data->pairing, rng);
  for (const auto& w : m.warnings) warnings.push_back("reverse_patch: " + w);
  std::map<std::string, const HairpinRecord*> by_id;
  for (const auto& d : donors) by_id[d.id()] = &d;
  for (const ManifestRow& row : m.rows) {
    const HairpinRecord& d = *by_id.at(row.donor_id);
    PatchCase pc;
    pc.target = &c.entry(row.target_id);
    pc.donor = &c.entry(d.source_id + ":" + d.chain);
    pc.align = {row.target_anchor, row.donor_anchor};
    pc.region = row.region;
    pc.key = loop_key(row.target_id, row.target_loop) + "<-" + row.donor_id;
    pc.donor_id = row.donor_id;
    cases.push_back(pc);
  }
  return cases;
}

std::vector<Unit> ablation_units(const Context& c, const ExperimentSpec& e) {
  std::vector<Unit> units;
  for (const PatchCase& pc : forward_cases(c)) {
    units.push_back({pc.key, [&c, &e, pc] {
                       const ExperimentSettings& st = e.settings;
                       RowMaker row{e.id, pc.key, pc.target->key, pc.donor_id};
                       std::vector<ResultRow> rows;
                       if (st.require_full_success) {
                         const bool ok =
                             hairpin_formed(run_decoded(c, *pc.target, full_plan(pc, c.K(), st.touch_mask)), pc.region);
                         rows.push_back(row("full", std::nullopt, Window{0, c.K()}, "hairpin_formed", ok ? 1.0 : 0.0));
                         if (!ok) return rows;
                       }
                       const Patch patch = make_patch(pc, st.patch_block, st.patch_track, st.touch_mask);
                       InterventionPlan base;
                       base.add(patch);
                       rows.push_back(row("patch_only", st.patch_block, std::nullopt, "hairpin_formed",
                                          hairpin_formed(run_decoded(c, *pc.target, base), pc.region) ? 1.0 : 0.0));
                       const std::string v(pathway_name(st.pathway));
                       for (const Window& w : sliding_windows(st.window, c.K())) {
                         InterventionPlan plan = base;
                         plan.add(AblatePath{st.pathway, w});
                         rows.push_back(row(v, st.patch_block, w, "hairpin_formed",
                                            hairpin_formed(run_decoded(c, *pc.target, plan), pc.region) ? 1.0 : 0.0));
                       }
                       return rows;
                     }});
  }
  return units;
}

// Pair rows of the region in target and donor coordinates.
std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> region_pair_rows(const PatchCase& pc) {
  std::vector<Eigen::Index> t, d;
  const int L = pc.target->baseline.trace.length;
  const int Ld = pc.donor->baseline.trace.length;
  const int off = pc.align.offset();
  for (int i = pc.region.begin; i < pc.region.end; ++i) {
    for (int j = pc.region.begin; j < pc.region.end; ++j) {
      const int di = i + off, dj = j + off;
      if (di < 0 || dj < 0 || di >= Ld || dj >= Ld) continue;
      t.push_back(pair_row(L, i, j));
      d.push_back(pair_row(Ld, di, dj));
    }
  }
  return {t, d};
}

Mat gather(const Mat& z, const std::vector<Eigen::Index>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), z.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = z.row(rows[r]);
  return out;
}

std::vector<Unit> freeze_units(const Context& c, const ExperimentSpec& e) {
  std::vector<Unit> units;
  for (const PatchCase& pc : forward_cases(c)) {
    units.push_back({pc.key, [&c, &e, pc] {
                       const ExperimentSettings& st = e.settings;
                       RowMaker row{e.id, pc.key, pc.target->key, pc.donor_id};
                       const auto [trows, drows] = region_pair_rows(pc);
                       if (trows.empty()) throw ExperimentError("region has no donor counterpart");
                       std::vector<std::pair<std::string, InterventionPlan>> variants(3);
                       variants[0].first = "seq_patch";
                       variants[0].second.add(make_patch(pc, 0, Track::s, st.touch_mask));
                       variants[1].first = "seq_patch_freeze";
                       variants[1].second.add(make_patch(pc, 0, Track::s, st.touch_mask));
                       variants[1].second.add(FreezeSeq2Pair{{0, st.freeze_end}});
                       variants[2].first = "pair_patch";
                       variants[2].second.add(make_patch(pc, 0, Track::z, st.touch_mask));
                       std::vector<ResultRow> rows;
                       for (const auto& [name, plan] : variants) {
                         TrunkOutput out;
                         run_decoded(c, *pc.target, plan, &out, CapturePlan::all(c.K()));
                         for (int k = 0; k < c.K(); ++k) {
                           const double a = interpolation_coefficient(
                               gather(out.trace.at(k).z, trows), gather(pc.target->baseline.trace.at(k).z, trows),
                               gather(pc.donor->baseline.trace.at(k).z, drows));
                           rows.push_back(row(name, k, std::nullopt, "alpha_coeff", a));
                         }
                       }
                       return rows;
                     }});
  }
  return units;
}

Direction charge_direction_at(const Context& c, int block) {
  std::vector<Mat> s;
  std::vector<std::string> seqs;
  for (const TargetLoops& t : c.dataset.targets) {
    const Entry& e = c.entry(t.id);
    s.push_back(e.baseline.trace.at(block).s);
    seqs.push_back(e.sequence);
  }
  if (s.empty()) throw ExperimentError("charge direction: no helical targets");
  Direction d = charge_direction(s, seqs);
  d.block = block;
  d.dataset = "targets";
  return d;
}

struct SteerCase {
  const Entry* target = nullptr;
  HairpinMotif motif;
  std::string key;
  std::string variant;
  std::vector<double> signs;
};

std::vector<SteerCase> loop_steer_cases(const Context& c, int arm) {
  std::vector<SteerCase> out;
  for (const TargetLoops& t : c.dataset.targets) {
    const Entry& e = c.entry(t.id);
    for (const IndexRange& loop : t.loops) {
      out.push_back({&e, arms_around(loop, arm, static_cast<int>(e.sequence.size())), loop_key(t.id, loop), "pos_neg",
                     {1.0, -1.0}});
    }
  }
  return out;
}

std::vector<ResultRow> steer_rows(const Context& c, const RowMaker& row, const Entry& target, const Steer& steer,
                                  const std::string& variant, const std::string& metric,
                                  const std::function<double(const DecodedStructure&)>& measure) {
  InterventionPlan plan;
  plan.add(steer);
  const DecodedStructure d = run_decoded(c, target, plan);
  std::vector<ResultRow> rows;
  rows.push_back(row(variant, std::nullopt, steer.window, metric, measure(d)));
  const RgCheck rg = rg_check(radius_of_gyration(d.structure), target.rg);
  rows.push_back(row(variant, std::nullopt, steer.window, "rg_ratio", rg.ratio));
  rg_filter(rows, rg);
  return rows;
}

std::vector<Unit> charge_units(const Context& c, const ExperimentSpec& e, std::shared_ptr<const Direction> dir) {
  std::vector<Unit> units;
  for (const SteerCase& sc : loop_steer_cases(c, e.settings.arm)) {
    units.push_back({sc.key, [&c, &e, sc, dir] {
                       const ExperimentSettings& st = e.settings;
                       RowMaker row{e.id, sc.key, sc.target->key, ""};
                       auto measure = [&](const DecodedStructure& d) {
                         return cross_strand_hbond_fraction(d.structure, sc.motif);
                       };
                       std::vector<ResultRow> rows;
                       rows.push_back(row("baseline", std::nullopt, std::nullopt, "hbond_fraction",
                                          measure(sc.target->decoded)));
                       for (const Window& w : sliding_windows(st.window, c.K())) {
                         Steer s{w, Track::s, RegionMask::rows({sc.motif.strand1, sc.motif.strand2}), dir->vector,
                                 st.strength, dir->sigma, sc.signs};
                         for (auto& r : steer_rows(c, row, *sc.target, s, sc.variant, "hbond_fraction", measure))
                           rows.push_back(std::move(r));
                       }
                       return rows;
                     }});
  }
  return units;
}

std::vector<Unit> same_charge_units(const Context& c, const ExperimentSpec& e, std::shared_ptr<const Direction> dir) {
  std::vector<SteerCase> cases;
  for (const HairpinRecord& r : c.dataset.mined.records) {
    const Entry& t = c.entry(r.source_id + ":" + r.chain);
    cases.push_back({&t, r.motif, "hairpin:" + r.id(), "pos_pos", {1.0, 1.0}});
    cases.push_back({&t, r.motif, "hairpin:" + r.id(), "neg_neg", {-1.0, -1.0}});
  }
  for (const SteerCase& sc : loop_steer_cases(c, e.settings.arm)) {
    cases.push_back({sc.target, sc.motif, "loop:" + sc.key, "pos_neg", {1.0, -1.0}});
    cases.push_back({sc.target, sc.motif, "loop:" + sc.key, "neg_pos", {-1.0, 1.0}});
  }
  // One unit per motif, both sign patterns inside.
  std::vector<Unit> units;
  for (std::size_t i = 0; i < cases.size(); i += 2) {
    const SteerCase a = cases[i], b = cases[i + 1];
    units.push_back({a.key, [&c, &e, a, b, dir] {
                       const ExperimentSettings& st = e.settings;
                       RowMaker row{e.id, a.key, a.target->key, ""};
                       const double base = mean_facing_ca_distance(a.target->decoded.structure, a.motif);
                       auto measure = [&](const DecodedStructure& d) {
                         return mean_facing_ca_distance(d.structure, a.motif) - base;
                       };
                       std::vector<ResultRow> rows;
                       for (const SteerCase* sc : {&a, &b}) {
                         for (const Window& w : sliding_windows(st.window, c.K())) {
                           Steer s{w, Track::s, RegionMask::rows({sc->motif.strand1, sc->motif.strand2}), dir->vector,
                                   st.strength, dir->sigma, sc->signs};
                           for (auto& r : steer_rows(c, row, *sc->target, s, sc->variant, "cross_dist_change", measure))
                             rows.push_back(std::move(r));
                         }
                       }
                       return rows;
                     }});
  }
  return units;
}

struct DistanceProbeSet {
  std::vector<DistanceProbeFit> fits;  // per block
  std::vector<Direction> directions;
};

std::pair<Mat, Vec> pooled_distance_samples(const Context& c, int block) {
  std::vector<std::pair<Mat, Vec>> parts;
  Eigen::Index n = 0;
  for (const Entry& e : c.entries) {
    parts.push_back(distance_samples(e.baseline.trace.at(block).z, e.baseline.trace.length,
                                     ca_distance_map(*e.structure)));
    n += parts.back().first.rows();
  }
  Mat x(n, c.weights.dims.d_z);
  Vec y(n);
  Eigen::Index at = 0;
  for (const auto& [px, py] : parts) {
    x.middleRows(at, px.rows()) = px;
    y.segment(at, py.size()) = py;
    at += px.rows();
  }
  return {x, y};
}

std::shared_ptr<const DistanceProbeSet> train_distance_probes(const Context& c, double lambda) {
  auto set = std::make_shared<DistanceProbeSet>();
  for (int k = 0; k < c.K(); ++k) {
    const auto [x, y] = pooled_distance_samples(c, k);
    DistanceProbeFit fit = fit_distance_probe(x, y, lambda, derive_seed(c.data->seed, 100 + static_cast<std::uint64_t>(k)));
    fit.model.block = k;
    Direction d;
    const Vec w = fit.model.weights.col(0);
    if (w.norm() == 0.0) throw ExperimentError("distance probe at block " + std::to_string(k) + " has zero weights");
    d.vector = w.normalized();
    d.sigma = projection_sigma(x, d.vector);
    d.block = k;
    d.dataset = "all";
    set->fits.push_back(std::move(fit));
    set->directions.push_back(std::move(d));
  }
  return set;
}

std::vector<Unit> distance_steer_units(const Context& c, const ExperimentSpec& e,
                                       std::shared_ptr<const DistanceProbeSet> probes) {
  std::vector<Unit> units;
  for (const SteerCase& sc : loop_steer_cases(c, e.settings.arm)) {
    units.push_back({sc.key, [&c, &e, sc, probes] {
                       const ExperimentSettings& st = e.settings;
                       RowMaker row{e.id, sc.key, sc.target->key, ""};
                       auto measure = [&](const DecodedStructure& d) {
                         return cross_strand_hbond_fraction(d.structure, sc.motif);
                       };
                       std::vector<ResultRow> rows;
                       rows.push_back(row("baseline", std::nullopt, std::nullopt, "hbond_fraction",
                                          measure(sc.target->decoded)));
                       const auto pairs = facing_pairs(sc.motif);
                       if (pairs.empty()) throw ExperimentError("no cross-strand pairs");
                       for (const Window& w : sliding_windows(st.window, c.K())) {
                         const Direction& d = probes->directions[static_cast<std::size_t>(w.begin)];
                         Steer s{w, Track::z, RegionMask::explicit_pairs(pairs), d.vector, st.strength, d.sigma, {-1.0}};
                         for (auto& r : steer_rows(c, row, *sc.target, s, "toward_contact", "hbond_fraction", measure))
                           rows.push_back(std::move(r));
                       }
                       return rows;
                     }});
  }
  return units;
}

std::vector<Unit> scale_units(const Context& c, const ExperimentSpec& e) {
  std::vector<Unit> units;
  for (const Entry& en : c.entries) {
    const Entry* ep = &en;
    units.push_back({en.key, [&c, &e, ep] {
                       RowMaker row{e.id, ep->key, ep->key, ""};
                       std::vector<ResultRow> rows;
                       for (Track t : e.settings.tracks) {
                         for (double f : e.settings.factors) {
                           Mat s = ep->baseline.s, z = ep->baseline.z;
                           scale_pre_decoder(s, z, Scale{t == Track::z ? ScaleTarget::z_pre_decoder : ScaleTarget::s_pre_decoder, f});
                           const DecodedStructure d = decode_structure(s, z, c.weights, ep->sequence, c.data->readout);
                           rows.push_back(row(std::string(track_name(t)) + ":" + short_double(f), std::nullopt,
                                              std::nullopt, "mean_ca_dist", mean_pairwise_ca_distance(d.structure)));
                         }
                       }
                       return rows;
                     }});
  }
  return units;
}

std::vector<Unit> redirection_units(const Context& c, const ExperimentSpec& e) {
  std::vector<Unit> units;
  for (const PatchCase& pc : forward_cases(c)) {
    units.push_back({pc.key, [&c, &e, pc] {
                       const ExperimentSettings& st = e.settings;
                       RowMaker row{e.id, pc.key, pc.target->key, pc.donor_id};
                       InterventionPlan plan;
                       plan.add(make_patch(pc, st.patch_block, Track::z, st.touch_mask));
                       TrunkOutput out;
                       run_decoded(c, *pc.target, plan, &out, CapturePlan::all(c.K()));
                       const int L = pc.target->baseline.trace.length;
                       const BoolMat target_all = contact_map(*pc.target->structure);
                       const BoolMat donor_all = contact_map(*pc.donor->structure);
                       BoolMat donor_c = BoolMat::Constant(L, L, false), target_c = BoolMat::Constant(L, L, false);
                       const int off = pc.align.offset();
                       for (int i = pc.region.begin; i < pc.region.end; ++i) {
                         for (int j = pc.region.begin; j < pc.region.end; ++j) {
                           if (i == j) continue;
                           target_c(i, j) = target_all(i, j);
                           const int di = i + off, dj = j + off;
                           if (di >= 0 && dj >= 0 && di < donor_all.rows() && dj < donor_all.rows())
                             donor_c(i, j) = donor_all(di, dj);
                         }
                       }
                       std::vector<ResultRow> rows;
                       for (const RedirectionPoint& p : attention_redirection(out.trace, pc.target->baseline.trace,
                                                                              donor_c, target_c)) {
                         if (p.block <= st.patch_block) continue;
                         if (p.donor_pct) rows.push_back(row("donor_contacts", p.block, std::nullopt, "attn_pct_change", *p.donor_pct));
                         if (p.target_pct)
                           rows.push_back(row("target_contacts", p.block, std::nullopt, "attn_pct_change", *p.target_pct));
                       }
                       return rows;
                     }});
  }
  return units;
}

std::vector<Unit> contribution_units(const Context& c, const ExperimentSpec& e) {
  std::vector<Unit> units;
  for (const Entry& en : c.entries) {
    const Entry* ep = &en;
    units.push_back({en.key, [&e, ep] {
                       RowMaker row{e.id, ep->key, ep->key, ""};
                       std::vector<ResultRow> rows;
                       for (const PathwayShares& p : pathway_contributions(ep->baseline.trace)) {
                         rows.push_back(row("raw", p.block, std::nullopt, "share_seq2pair", p.seq2pair));
                         rows.push_back(row("raw", p.block, std::nullopt, "share_pair2seq", p.pair2seq));
                         rows.push_back(row("minmax", p.block, std::nullopt, "share_seq2pair", p.seq2pair_scaled));
                         rows.push_back(row("minmax", p.block, std::nullopt, "share_pair2seq", p.pair2seq_scaled));
                       }
                       return rows;
                     }});
  }
  return units;
}

std::vector<Unit> probe_units(const Context& c, const ExperimentSpec& e, const fs::path& probe_dir) {
  std::vector<Unit> units;
  for (int k : block_list(e.settings, c.K())) {
    const std::string key = "block" + std::to_string(k);
    units.push_back({key, [&c, &e, k, key, probe_dir] {
                       RowMaker row{e.id, key, "", ""};
                       std::vector<ResultRow> rows;
                       const std::string tag = "_b" + std::to_string(k);

                       const auto [x, y] = pooled_distance_samples(c, k);
                       DistanceProbeFit fit =
                           fit_distance_probe(x, y, e.settings.lambda, derive_seed(c.data->seed, 100 + static_cast<std::uint64_t>(k)));
                       fit.model.block = k;
                       rows.push_back(row("train", k, std::nullopt, "r2", fit.r2_defined ? fit.r2_train : std::nan("")));
                       rows.push_back(row("test", k, std::nullopt, "r2", fit.r2_defined ? fit.r2_test : std::nan("")));
                       write_file(probe_dir / ("distance" + tag + ".tsp"), serialize_probe(fit.model));

                       Mat s_rows(0, c.weights.dims.d_s);
                       std::string residues;
                       std::vector<std::pair<std::string, Vec>> series(3);
                       std::vector<Mat> tracks;
                       std::vector<std::string> seqs;
                       for (const Entry& en : c.entries) {
                         const Mat& s = en.baseline.trace.at(k).s;
                         Mat grown(s_rows.rows() + s.rows(), s.cols());
                         grown << s_rows, s;
                         s_rows = std::move(grown);
                         residues += en.sequence;
                         tracks.push_back(s);
                         seqs.push_back(en.sequence);
                       }
                       LogisticConfig lc;
                       lc.max_iters = 500;
                       const IdentityProbeResult id = identity_probe(s_rows, residues, derive_seed(c.data->seed, 300 + static_cast<std::uint64_t>(k)),
                                                                     derive_seed(c.data->seed, 400 + static_cast<std::uint64_t>(k)), lc);
                       rows.push_back(row("identity_probe", k, std::nullopt, "accuracy", id.probe.accuracy));
                       rows.push_back(row("identity_control", k, std::nullopt, "accuracy", id.control.accuracy));
                       rows.push_back(row("identity", k, std::nullopt, "selectivity", id.selectivity));

                       Direction dir = charge_direction(tracks, seqs);
                       dir.block = k;
                       dir.dataset = "all";
                       write_file(probe_dir / ("charge_direction" + tag + ".tsp"), serialize_direction(dir));
                       const Vec proj = s_rows * dir.vector;
                       std::vector<double> pos, neg, neutral;
                       for (std::size_t i = 0; i < residues.size(); ++i) {
                         const int cls = charge_class(residues[i]);
                         (cls > 0 ? pos : cls < 0 ? neg : neutral).push_back(proj(static_cast<Eigen::Index>(i)));
                       }
                       auto to_vec = [](const std::vector<double>& v) {
                         return Vec(Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
                       };
                       series = {{"positive", to_vec(pos)}, {"negative", to_vec(neg)}, {"neutral", to_vec(neutral)}};
                       write_file(probe_dir / ("charge_hist" + tag + ".csv"),
                                  histogram_csv(projection_histogram(series, proj.mean(), dir.sigma)));

                       for (const Entry& en : c.entries) {
                         const BoolMat contacts = contact_map(*en.structure);
                         try {
                           rows.push_back(row("bias", k, std::nullopt, "auc",
                                              bias_contact_auc(en.baseline.trace.at(k), en.baseline.trace.length, contacts, 3)));
                           rows.back().target = en.key;
                         } catch (const ProbeError&) {
                           // single-class contact set
                         }
                       }
                       return rows;
                     }});
  }
  return units;
}

std::string error_code(const std::exception& e) {
  if (dynamic_cast<const NumericsError*>(&e)) return "numerical";
  if (dynamic_cast<const InterventionError*>(&e)) return "intervention";
  if (dynamic_cast<const StructureError*>(&e)) return "structure";
  if (dynamic_cast<const ProbeError*>(&e)) return "probe";
  if (dynamic_cast<const TrunkError*>(&e)) return "trunk";
  return "failed";
}

std::vector<ResultRow> run_unit(const ExperimentSpec& e, const Unit& u) {
  try {
    auto rows = u.run();
    for (auto& r : rows) {
      if (!is_known_metric(r.metric)) throw ExperimentError("metric outside the vocabulary: " + r.metric);
    }
    return rows;
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& ex) {
    ResultRow r;
    r.experiment = e.id;
    r.unit = u.key;
    r.value = std::nan("");
    r.error = error_code(ex);
    return {r};
  }
}

std::vector<std::string> complete_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (true) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) break;
    lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  return lines;
}

ExperimentReport execute(const ExperimentSpec& e, const std::vector<Unit>& units, const fs::path& out_dir,
                         const BatchOptions& options) {
  ExperimentReport rep;
  rep.id = e.id;
  rep.results = out_dir / (e.id + ".csv");
  const fs::path journal = out_dir / (e.id + ".journal");
  rep.units = static_cast<int>(units.size());

  std::set<std::string> done;
  if (options.resume && fs::exists(rep.results) && fs::exists(journal)) {
    for (const auto& k : complete_lines(read_file(journal))) done.insert(k);
    const auto lines = complete_lines(read_file(rep.results));
    if (lines.size() < 2 || lines[0] != "schema_version," + std::to_string(kResultsSchemaVersion) ||
        lines[1] != kResultColumns) {
      throw ConfigError("--resume", rep.results.string() + " is not a results file of this schema");
    }
    std::string kept = results_header();
    for (std::size_t i = 2; i < lines.size(); ++i) {
      const auto f = split_csv_line(lines[i]);
      if (f.size() == 11 && done.count(f[1])) {
        kept += lines[i] + "\n";
        ++rep.rows;
        if (!f[10].empty()) ++rep.failed_units;
      }
    }
    std::string jtext;
    for (const Unit& u : units)
      if (done.count(u.key)) jtext += u.key + "\n";
    write_file(rep.results, kept);
    write_file(journal, jtext);
  } else {
    write_file(rep.results, results_header());
    write_file(journal, "");
  }

  std::vector<const Unit*> pending;
  for (const Unit& u : units) {
    if (done.count(u.key)) {
      ++rep.resumed_units;
    } else {
      pending.push_back(&u);
    }
  }
  std::ofstream res(rep.results, std::ios::binary | std::ios::app);
  std::ofstream jr(journal, std::ios::binary | std::ios::app);
  if (!res || !jr) throw IoError("cannot append to " + rep.results.string());
  const std::size_t width = static_cast<std::size_t>(std::max(1, options.jobs));
  for (std::size_t start = 0; start < pending.size(); start += width) {
    const std::size_t n = std::min(width, pending.size() - start);
    std::vector<std::vector<ResultRow>> out(n);
    parallel_for(n, options.jobs, [&](std::size_t i) { out[i] = run_unit(e, *pending[start + i]); });
    for (std::size_t i = 0; i < n; ++i) {
      std::string block;
      bool failed = false;
      for (const auto& r : out[i]) {
        block += result_row_csv(r);
        failed = failed || !r.error.empty();
      }
      res << block;
      res.flush();
      jr << pending[start + i]->key << '\n';
      jr.flush();
      if (!res || !jr) throw IoError("write failed: " + rep.results.string());
      rep.rows += static_cast<int>(out[i].size());
      if (failed) ++rep.failed_units;
    }
  }
  return rep;
}

}  // namespace

// --- Public ------------------------------------------------------------------

std::string_view experiment_kind_name(ExperimentKind k) { return kKindNames[static_cast<int>(k)]; }

std::optional<ExperimentKind> parse_experiment_kind(std::string_view name) {
  for (std::size_t i = 0; i < std::size(kKindNames); ++i)
    if (kKindNames[i] == name) return static_cast<ExperimentKind>(i);
  return std::nullopt;
}

const std::vector<std::string>& metric_vocabulary() {
  static const std::vector<std::string> v = {
      "hairpin_formed", "hbond_fraction", "alpha_coeff",    "r2",          "auc",
      "mean_ca_dist",   "rg_ratio",       "attn_pct_change", "share_seq2pair", "share_pair2seq",
      "helix_formed",   "cross_dist_change", "accuracy",    "selectivity",
  };
  return v;
}

bool is_known_metric(std::string_view name) {
  const auto& v = metric_vocabulary();
  return std::find(v.begin(), v.end(), name) != v.end();
}

BatchConfig parse_config(std::string_view text, const fs::path& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config", e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  BatchConfig cfg;
  std::set<std::string> ids;
  bool have_data = false;
  for (const auto& [section, node] : tree) {
    if (section == "data") {
      have_data = true;
      DataConfig& d = cfg.data;
      bool have_structures = false;
      for (const auto& [key, value_node] : node) {
        const std::string field = "data." + key;
        const std::string value = trim(value_node.data());
        if (key == "structures") {
          d.structures = resolve_path(base_dir, value);
          if (!fs::is_directory(d.structures)) throw ConfigError(field, "not a directory: " + d.structures.string());
          have_structures = true;
        } else if (key == "culling") {
          d.culling = resolve_path(base_dir, value);
          if (!fs::is_regular_file(*d.culling)) throw ConfigError(field, "no such file: " + d.culling->string());
        } else if (key == "weights") {
          if (is_generator_spec(value)) {
            parse_u64(field, value.substr(7));
            d.weights = value;
          } else {
            const fs::path p = resolve_path(base_dir, value);
            if (!fs::is_regular_file(p)) throw ConfigError(field, "no such file: " + p.string());
            d.weights = p.string();
          }
        } else if (key == "recycles") {
          d.recycles = parse_int(field, value);
          if (d.recycles < 0 || d.recycles > 3) throw ConfigError(field, "recycles must be in [0, 3]");
        } else if (key == "readout") {
          if (value != "softplus" && value != "identity") throw ConfigError(field, "readout must be softplus or identity");
          d.readout = value == "identity" ? Readout::identity : Readout::softplus;
        } else if (key == "decoder_bias") {
          d.decoder_bias = parse_double(field, value);
        } else if (key == "seed") {
          d.seed = parse_u64(field, value);
        } else if (key == "out") {
          d.out = resolve_path(base_dir, value);
        } else if (key == "per_loop") {
          d.pairing.per_loop = parse_int(field, value);
          if (d.pairing.per_loop < 1) throw ConfigError(field, "must be >= 1");
        } else if (key == "region_min") {
          d.pairing.region_min = parse_int(field, value);
        } else if (key == "region_max") {
          d.pairing.region_max = parse_int(field, value);
        } else if (key == "strand_min") {
          d.miner.strand_min = parse_int(field, value);
        } else if (key == "strand_max") {
          d.miner.strand_max = parse_int(field, value);
        } else if (key == "loop_min") {
          d.miner.loop_min = parse_int(field, value);
        } else if (key == "loop_max") {
          d.miner.loop_max = parse_int(field, value);
        } else {
          throw ConfigError(field, "unknown key");
        }
      }
      if (!have_structures) throw ConfigError("data.structures", "required");
      if (d.pairing.region_min < 1 || d.pairing.region_min > d.pairing.region_max)
        throw ConfigError("data.region_min", "need 1 <= region_min <= region_max");
      if (d.miner.strand_min < 1 || d.miner.strand_min > d.miner.strand_max)
        throw ConfigError("data.strand_min", "need 1 <= strand_min <= strand_max");
      if (d.miner.loop_min < 1 || d.miner.loop_min > d.miner.loop_max)
        throw ConfigError("data.loop_min", "need 1 <= loop_min <= loop_max");
    } else if (section.starts_with("experiment:")) {
      ExperimentSpec e;
      e.id = section.substr(11);
      if (e.id.empty() || e.id.find_first_of("/\\ ,") != std::string::npos)
        throw ConfigError(section, "experiment id must be non-empty without '/', '\\', ',' or spaces");
      if (!ids.insert(e.id).second) throw ConfigError(section, "duplicate experiment id");
      const auto kind_text = node.get_optional<std::string>(pt::ptree::path_type("kind", '\0'));
      if (!kind_text) throw ConfigError(section + ".kind", "required");
      const auto kind = parse_experiment_kind(trim(*kind_text));
      if (!kind) throw ConfigError(section + ".kind", "unknown kind '" + trim(*kind_text) + "'");
      e.kind = *kind;
      auto keys = kind_keys(e.kind);
      for (const auto& [key, value_node] : node) {
        if (key == "kind") continue;
        if (!keys.count(key)) {
          throw ConfigError(section + "." + key,
                            "not a parameter of " + std::string(experiment_kind_name(e.kind)));
        }
        keys[key] = value_node.data();
      }
      for (const auto& [key, value] : keys) apply_setting(e.settings, key, value, section + "." + key);
      cfg.experiments.push_back(std::move(e));
    } else {
      throw ConfigError(section, "unknown section");
    }
  }
  if (!have_data) throw ConfigError("data", "section missing");
  return cfg;
}

BatchConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError("--config", e.what());
  }
  return parse_config(text, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

std::uint64_t resolve_seed(std::uint64_t config_seed, std::optional<std::uint64_t> flag_seed, const char* env_value) {
  if (flag_seed) return *flag_seed;
  if (env_value && *env_value) return parse_u64("TRUNKSCOPE_SEED", env_value);
  return config_seed;
}

TrunkWeights resolve_weights(const DataConfig& data) {
  TrunkWeights w;
  if (data.weights.starts_with("random:")) {
    w = random_weights(TrunkDims{}, parse_u64("data.weights", data.weights.substr(7)));
  } else if (data.weights.starts_with("staged:")) {
    w = staged_weights(TrunkDims{}, parse_u64("data.weights", data.weights.substr(7)));
  } else {
    w = load_weights(data.weights);
  }
  if (data.decoder_bias) w.decoder_b(0, 0) = *data.decoder_bias;
  return w;
}

std::string results_header() {
  return "schema_version," + std::to_string(kResultsSchemaVersion) + "\n" + std::string(kResultColumns) + "\n";
}

std::string result_row_csv(const ResultRow& r) {
  std::string out;
  out += csv_safe(r.experiment) + "," + csv_safe(r.unit) + "," + csv_safe(r.target) + "," + csv_safe(r.donor) + "," +
         csv_safe(r.variant) + ",";
  out += (r.block ? std::to_string(*r.block) : std::string()) + ",";
  out += (r.window ? std::to_string(r.window->begin) + "-" + std::to_string(r.window->end) : std::string()) + ",";
  out += csv_safe(r.metric) + "," + fmt_double(r.value) + "," + csv_safe(r.flags) + "," + csv_safe(r.error) + "\n";
  return out;
}

std::vector<ResultRow> parse_results_csv(std::string_view text) {
  std::vector<ResultRow> rows;
  const auto lines = parse_csv(text);
  if (lines.empty()) return rows;
  if (lines[0].size() != 2 || lines[0][0] != "schema_version")
    throw ExperimentError("results: first row must be schema_version");
  if (lines[0][1] != std::to_string(kResultsSchemaVersion))
    throw ExperimentError("results: unsupported schema_version " + lines[0][1]);
  if (lines.size() < 2 || split_csv_line(kResultColumns) != lines[1])
    throw ExperimentError("results: unexpected column header");
  for (std::size_t i = 2; i < lines.size(); ++i) {
    const auto& f = lines[i];
    const std::string where = "results row " + std::to_string(i + 1);
    if (f.size() != 11) throw ExperimentError(where + ": expected 11 fields");
    ResultRow r;
    r.experiment = f[0];
    r.unit = f[1];
    r.target = f[2];
    r.donor = f[3];
    r.variant = f[4];
    try {
      if (!f[5].empty()) r.block = parse_int("block", f[5]);
      if (!f[6].empty()) {
        const auto dash = f[6].find('-');
        if (dash == std::string::npos) throw ConfigError("window", "expected begin-end");
        r.window = Window{parse_int("window", f[6].substr(0, dash)), parse_int("window", f[6].substr(dash + 1))};
      }
    } catch (const ConfigError& e) {
      throw ExperimentError(where + ": " + e.what());
    }
    r.metric = f[7];
    char* end = nullptr;
    r.value = std::strtod(f[8].c_str(), &end);
    if (f[8].empty() || end != f[8].c_str() + f[8].size()) throw ExperimentError(where + ": bad value '" + f[8] + "'");
    r.flags = f[9];
    r.error = f[10];
    rows.push_back(std::move(r));
  }
  return rows;
}

RgCheck rg_check(double rg, std::optional<double> baseline_rg) {
  if (!baseline_rg) throw ExperimentError("rg_filter: missing baseline");
  if (!(*baseline_rg > 0.0)) throw ExperimentError("rg_filter: baseline radius of gyration must be positive");
  RgCheck c;
  c.ratio = rg / *baseline_rg;
  c.collapsed = rg < kRgCollapseRatio * *baseline_rg;
  return c;
}

void rg_filter(std::vector<ResultRow>& rows, const RgCheck& check) {
  if (!check.collapsed) return;
  for (auto& r : rows) r.flags = r.flags.empty() ? "rg_collapse" : r.flags + ";rg_collapse";
}

int BatchReport::failed_units() const {
  int n = 0;
  for (const auto& e : experiments) n += e.failed_units;
  return n;
}

DatasetFiles build_dataset(const DataConfig& data, const fs::path& out_dir, int jobs, bool with_manifest) {
  const Dataset ds = assemble_dataset(data, jobs, with_manifest);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  write_file(out_dir / "hairpins.csv", hairpins_csv(ds.mined.records));
  if (with_manifest) {
    write_file(out_dir / "targets.csv", targets_csv(ds.targets));
    write_file(out_dir / "manifest.csv", manifest_csv(ds.manifest.rows));
  }
  write_file(out_dir / "rejections.csv", rejections_csv(ds.rejections));
  DatasetFiles f;
  f.hairpins = static_cast<int>(ds.mined.records.size());
  f.targets = static_cast<int>(ds.targets.size());
  f.manifest_rows = static_cast<int>(ds.manifest.rows.size());
  f.rejections = static_cast<int>(ds.rejections.size());
  return f;
}

BatchReport run_batch(const BatchConfig& config, const BatchOptions& options) {
  std::vector<const ExperimentSpec*> selected;
  for (const auto& id : options.only) {
    const bool known = std::any_of(config.experiments.begin(), config.experiments.end(),
                                   [&](const ExperimentSpec& e) { return e.id == id; });
    if (!known) throw ConfigError("--experiment", "no experiment '" + id + "' in the config");
  }
  for (const auto& e : config.experiments) {
    if (options.only.empty() || std::find(options.only.begin(), options.only.end(), e.id) != options.only.end())
      selected.push_back(&e);
  }
  TrunkWeights weights = resolve_weights(config.data);
  for (const ExperimentSpec* e : selected) validate_against(*e, weights.dims.K);

  BatchReport report;
  std::error_code ec;
  fs::create_directories(config.data.out, ec);
  if (ec) throw IoError("cannot create " + config.data.out.string() + ": " + ec.message());
  if (selected.empty()) return report;

  const auto ctx = make_context(config.data, std::move(weights), options.jobs);
  const Context& c = *ctx;
  for (const auto& w : c.dataset.manifest.warnings) report.warnings.push_back(w);
  const bool patching_needs_manifest = c.dataset.manifest.rows.empty();

  for (const ExperimentSpec* ep : selected) {
    const ExperimentSpec& e = *ep;
    std::vector<Unit> units;
    switch (e.kind) {
      case ExperimentKind::full_patch:
        units = patch_units(c, e, forward_cases(c), hairpin_formed, "hairpin_formed", false);
        break;
      case ExperimentKind::single_block_sweep:
        units = patch_units(c, e, e.settings.self_donor ? self_cases(c) : forward_cases(c), hairpin_formed,
                            "hairpin_formed", true);
        break;
      case ExperimentKind::reverse_patch:
        units = patch_units(c, e, reverse_cases(c, report.warnings), helix_formed, "helix_formed", e.settings.sweep);
        break;
      case ExperimentKind::pathway_ablation:
        units = ablation_units(c, e);
        break;
      case ExperimentKind::freeze_writein:
        units = freeze_units(c, e);
        break;
      case ExperimentKind::charge_steer:
        units = charge_units(c, e, std::make_shared<const Direction>(charge_direction_at(c, e.settings.direction_block)));
        break;
      case ExperimentKind::same_charge_steer:
        units = same_charge_units(c, e,
                                  std::make_shared<const Direction>(charge_direction_at(c, e.settings.direction_block)));
        break;
      case ExperimentKind::distance_steer:
        units = distance_steer_units(c, e, train_distance_probes(c, e.settings.lambda));
        break;
      case ExperimentKind::scale_sweep:
        units = scale_units(c, e);
        break;
      case ExperimentKind::redirection:
        units = redirection_units(c, e);
        break;
      case ExperimentKind::contributions:
        units = contribution_units(c, e);
        break;
      case ExperimentKind::probe_train: {
        const fs::path dir = config.data.out / e.id;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
        units = probe_units(c, e, dir);
        break;
      }
      case ExperimentKind::dataset_build: {
        const fs::path dir = config.data.out / e.id;
        const DataConfig* data = &config.data;
        const int jobs = options.jobs;
        units.push_back({"dataset", [data, dir, jobs] {
                           build_dataset(*data, dir, jobs, true);
                           return std::vector<ResultRow>{};
                         }});
        break;
      }
    }
    const bool uses_manifest = e.kind == ExperimentKind::full_patch || e.kind == ExperimentKind::pathway_ablation ||
                               e.kind == ExperimentKind::freeze_writein || e.kind == ExperimentKind::redirection ||
                               (e.kind == ExperimentKind::single_block_sweep && !e.settings.self_donor);
    if (uses_manifest && patching_needs_manifest)
      report.warnings.push_back(e.id + ": the pairing manifest is empty");
    report.experiments.push_back(execute(e, units, config.data.out, options));
  }
  return report;
}

void Accumulator::add(double x) {
  ++count;
  const double delta = x - mean;
  mean += delta / static_cast<double>(count);
  m2 += delta * (x - mean);
}

void Accumulator::merge(const Accumulator& o) {
  if (o.count == 0) return;
  if (count == 0) {
    *this = o;
    return;
  }
  const double n = static_cast<double>(count + o.count);
  const double delta = o.mean - mean;
  mean += delta * static_cast<double>(o.count) / n;
  m2 += o.m2 + delta * delta * static_cast<double>(count) * static_cast<double>(o.count) / n;
  count += o.count;
}

double Accumulator::std_dev() const {
  if (count < 2) return std::nan("");
  return std::sqrt(m2 / static_cast<double>(count - 1));
}

void accumulate(Summary& summary, const std::vector<ResultRow>& rows) {
  for (const auto& r : rows) {
    if (!r.error.empty() || !std::isfinite(r.value) || r.metric.empty()) continue;
    if (r.flags.find("rg_collapse") != std::string::npos) continue;
    summary[SummaryKey{r.experiment, r.variant, r.metric, r.block, r.window}].add(r.value);
  }
}

std::string summary_csv(const Summary& summary) {
  std::string out = std::string(kSummaryColumns) + "\n";
  for (const auto& [k, a] : summary) {
    out += k.experiment + "," + k.variant + "," + k.metric + "," + (k.block ? std::to_string(*k.block) : "") + "," +
           (k.window ? std::to_string(k.window->begin) + "-" + std::to_string(k.window->end) : "") + "," +
           std::to_string(a.count) + "," + fmt_double(a.mean) + "," + fmt_double(a.std_dev()) + "\n";
  }
  return out;
}

}  // namespace trunkscope
