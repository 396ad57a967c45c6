#include "trunkscope/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <future>
#include <numeric>
#include <set>

#include "trunkscope/io.hpp"

namespace trunkscope {

namespace {

bool strand_code(char c) {
  return c == 'E' || c == 'B';
}

std::vector<IndexRange> helix_runs(const SecStruct& ss) {
  std::vector<IndexRange> runs;
  for (int i = 0; i < ss.size();) {
    if (ss[i] != 'H') {
      ++i;
      continue;
    }
    int j = i;
    while (j < ss.size() && ss[j] == 'H') ++j;
    runs.push_back({i, j});
    i = j;
  }
  return runs;
}

std::vector<HairpinRecord> mine_one(const Structure& s, const MinerThresholds& t, std::vector<Rejection>& rejections) {
  std::vector<HairpinRecord> out;
  const std::string subject = s.id + ":" + s.chain_id;
  SecStruct ss;
  try {
    ss = assign_secondary(s);
  } catch (const StructureError& e) {
    rejections.push_back({"mine", subject, "secondary_failed", e.what()});
    return out;
  }
  const std::string seq = s.sequence();
  for (const HairpinMotif& m : scan_hairpins(ss, t)) {
    if (!antiparallel(s, m)) {
      rejections.push_back({"mine", subject, "not_antiparallel", "strand1 starts at " + std::to_string(m.strand1.begin)});
      continue;
    }
    HairpinRecord r;
    r.source_id = s.id;
    r.chain = s.chain_id;
    r.motif = m;
    r.fragment = seq.substr(static_cast<std::size_t>(m.span().begin), static_cast<std::size_t>(m.span().length()));
    r.flank_before = m.span().begin;
    r.flank_after = s.size() - m.span().end;
    out.push_back(std::move(r));
  }
  return out;
}

int to_int(const std::string& field, const char* what) {
  int value = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc{} || ptr != field.data() + field.size()) {
    throw PipelineError(std::string("bad integer for ") + what + ": '" + field + "'");
  }
  return value;
}

void check_field(const std::string& field) {
  if (field.find_first_of(",\n\r") != std::string::npos) {
    throw PipelineError("CSV field contains a separator: '" + field + "'");
  }
}

std::string join(std::initializer_list<std::string> fields) {
  std::string out;
  bool first = true;
  for (const auto& f : fields) {
    check_field(f);
    if (!first) out += ',';
    out += f;
    first = false;
  }
  out += '\n';
  return out;
}

std::vector<std::vector<std::string>> csv_body(std::string_view text, std::string_view header, const char* what) {
  auto rows = parse_csv(text);
  const auto expected = split_csv_line(header);
  if (rows.empty() || rows.front() != expected) {
    throw PipelineError(std::string(what) + ": expected header '" + std::string(header) + "'");
  }
  rows.erase(rows.begin());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != expected.size()) {
      throw PipelineError(std::string(what) + ": row " + std::to_string(r + 2) + " has " +
                          std::to_string(rows[r].size()) + " fields, expected " + std::to_string(expected.size()));
    }
  }
  return rows;
}

constexpr std::string_view kHairpinHeader =
    "source_id,chain,strand1_begin,strand1_end,loop_begin,loop_end,strand2_begin,strand2_end,fragment,flank_before,"
    "flank_after";
constexpr std::string_view kManifestHeader =
    "target_id,loop_begin,loop_end,donor_id,target_anchor,donor_anchor,offset,region_begin,region_end";

}  // namespace

std::string HairpinRecord::id() const {
  return source_id + ":" + chain + ":" + std::to_string(motif.strand1.begin);
}

std::vector<HairpinMotif> scan_hairpins(const SecStruct& ss, const MinerThresholds& t) {
  std::vector<HairpinMotif> out;
  const auto runs = strand_runs(ss, {0, ss.size()});
  auto strand_ok = [&](const IndexRange& r) { return r.length() >= t.strand_min && r.length() <= t.strand_max; };
  for (std::size_t k = 0; k + 1 < runs.size(); ++k) {
    const IndexRange loop{runs[k].end, runs[k + 1].begin};
    if (!strand_ok(runs[k]) || !strand_ok(runs[k + 1])) continue;
    if (loop.length() < t.loop_min || loop.length() > t.loop_max) continue;
    bool plain = true;
    for (int i = loop.begin; i < loop.end; ++i) plain = plain && ss[i] != 'H' && !strand_code(ss[i]);
    if (plain) out.push_back({runs[k], loop, runs[k + 1]});
  }
  return out;
}

bool antiparallel(const Structure& s, const HairpinMotif& m) {
  const Vec3 d1 = s.residues[static_cast<std::size_t>(m.strand1.end - 1)].ca() -
                  s.residues[static_cast<std::size_t>(m.strand1.begin)].ca();
  const Vec3 d2 = s.residues[static_cast<std::size_t>(m.strand2.end - 1)].ca() -
                  s.residues[static_cast<std::size_t>(m.strand2.begin)].ca();
  return d1.dot(d2) < 0.0;
}

MineResult mine_hairpins(const std::vector<Structure>& structures, const MinerThresholds& t, int jobs) {
  const std::size_t n = structures.size();
  std::vector<std::vector<HairpinRecord>> records(n);
  std::vector<std::vector<Rejection>> rejections(n);
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), 1, std::max<std::size_t>(n, 1));
  std::vector<std::future<void>> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.push_back(std::async(workers == 1 ? std::launch::deferred : std::launch::async, [&, w] {
      for (std::size_t i = w; i < n; i += workers) records[i] = mine_one(structures[i], t, rejections[i]);
    }));
  }
  for (auto& f : pool) f.get();
  MineResult out;
  for (std::size_t i = 0; i < n; ++i) {
    std::move(records[i].begin(), records[i].end(), std::back_inserter(out.records));
    std::move(rejections[i].begin(), rejections[i].end(), std::back_inserter(out.rejections));
  }
  return out;
}

std::vector<IndexRange> loops_between_helices(const SecStruct& ss, int loop_min, int loop_max, int helix_min) {
  std::vector<IndexRange> out;
  const auto runs = helix_runs(ss);
  for (std::size_t k = 0; k + 1 < runs.size(); ++k) {
    if (runs[k].length() < helix_min || runs[k + 1].length() < helix_min) continue;
    const IndexRange gap{runs[k].end, runs[k + 1].begin};
    if (gap.length() < loop_min || gap.length() > loop_max) continue;
    bool plain = true;
    for (int i = gap.begin; i < gap.end; ++i) plain = plain && !strand_code(ss[i]);
    if (plain) out.push_back(gap);
  }
  return out;
}

std::vector<IndexRange> find_target_loops(const Structure& s) {
  return loops_between_helices(assign_secondary(s));
}

std::pair<std::optional<IndexRange>, std::string> aligned_region(const TargetLoops& target, IndexRange loop,
                                                                 const HairpinRecord& donor, const PairingRules& rules) {
  const int offset = donor.motif.loop.begin - loop.begin;
  const int target_len = static_cast<int>(target.sequence.size());
  // Work in donor coordinates; the region maps to the target by -offset.
  int lo = donor.motif.span().begin;
  int hi = donor.motif.span().end;
  if (hi - lo > rules.region_max) {
    const int excess = hi - lo - rules.region_max;
    lo += excess / 2;
    hi -= excess - excess / 2;
    if (lo >= donor.motif.loop.begin || hi <= donor.motif.loop.end) return {std::nullopt, "loop_too_long"};
  }
  if (hi - lo < rules.region_min) {
    int need = rules.region_min - (hi - lo);
    const int room_before = std::min(lo, lo - offset);
    const int room_after = std::min(donor.chain_length() - hi, target_len - (hi - offset));
    int before = std::clamp(need / 2, 0, std::max(room_before, 0));
    int after = std::clamp(need - before, 0, std::max(room_after, 0));
    before = std::clamp(need - after, 0, std::max(room_before, 0));
    if (before + after < need) return {std::nullopt, "region_too_short"};
    lo -= before;
    hi += after;
  }
  const IndexRange region{lo - offset, hi - offset};
  if (region.begin < 0 || region.end > target_len) return {std::nullopt, "region_outside_target"};
  return {region, ""};
}

PairingManifest pair_donors(const std::vector<TargetLoops>& targets, std::vector<HairpinRecord> donors,
                            const PairingRules& rules, Rng& rng) {
  if (donors.empty()) throw PipelineError("pair_donors: no donors");
  if (rules.per_loop < 1 || rules.region_min > rules.region_max) throw PipelineError("pair_donors: bad rules");
  std::sort(donors.begin(), donors.end(), [](const HairpinRecord& a, const HairpinRecord& b) { return a.id() < b.id(); });
  PairingManifest out;
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(rules.per_loop), donors.size());
  if (take < static_cast<std::size_t>(rules.per_loop)) {
    out.warnings.push_back("only " + std::to_string(donors.size()) + " donors for " + std::to_string(rules.per_loop) +
                           " per loop; sampling all");
  }
  for (const TargetLoops& target : targets) {
    for (const IndexRange& loop : target.loops) {
      std::vector<std::size_t> idx(donors.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t k = 0; k < take; ++k) {
        const std::size_t pick = k + static_cast<std::size_t>(rng.below(idx.size() - k));
        std::swap(idx[k], idx[pick]);
      }
      for (std::size_t k = 0; k < take; ++k) {
        const HairpinRecord& d = donors[idx[k]];
        const auto [region, reason] = aligned_region(target, loop, d, rules);
        const std::string subject = target.id + "@" + std::to_string(loop.begin) + "<-" + d.id();
        if (!region) {
          out.rejections.push_back({"pair", subject, reason, ""});
          continue;
        }
        out.rows.push_back({target.id, loop, d.id(), loop.begin, d.motif.loop.begin, *region});
      }
    }
  }
  return out;
}

GlobalAlignment global_align(std::string_view a, std::string_view b) {
  if (a.empty() || b.empty()) throw PipelineError("global_align: sequences must be non-empty");
  const std::size_t n = a.size(), m = b.size();
  // (score, matches), compared lexicographically.
  using Cell = std::pair<int, int>;
  std::vector<Cell> best((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> Cell& { return best[i * (m + 1) + j]; };
  auto diag = [&](std::size_t i, std::size_t j) {
    const int hit = a[i - 1] == b[j - 1] ? 1 : 0;
    return Cell{at(i - 1, j - 1).first + hit, at(i - 1, j - 1).second + hit};
  };
  auto up = [&](std::size_t i, std::size_t j) { return Cell{at(i - 1, j).first - 1, at(i - 1, j).second}; };
  auto left = [&](std::size_t i, std::size_t j) { return Cell{at(i, j - 1).first - 1, at(i, j - 1).second}; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = {-static_cast<int>(i), 0};
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = {-static_cast<int>(j), 0};
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) at(i, j) = std::max({diag(i, j), up(i, j), left(i, j)});

  GlobalAlignment out;
  out.score = at(n, m).first;
  out.matches = at(n, m).second;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == diag(i, j)) {
      out.a.push_back(a[--i]);
      out.b.push_back(b[--j]);
    } else if (i > 0 && (j == 0 || at(i, j) == up(i, j))) {
      out.a.push_back(a[--i]);
      out.b.push_back('-');
    } else {
      out.a.push_back('-');
      out.b.push_back(b[--j]);
    }
  }
  std::reverse(out.a.begin(), out.a.end());
  std::reverse(out.b.begin(), out.b.end());
  return out;
}

double sequence_identity(std::string_view a, std::string_view b) {
  const GlobalAlignment al = global_align(a, b);
  return static_cast<double>(al.matches) / static_cast<double>(al.a.size());
}

std::vector<HairpinRecord> identity_filter(const std::vector<HairpinRecord>& records, double max_identity,
                                           std::vector<Rejection>* rejections) {
  std::vector<HairpinRecord> kept;
  for (const HairpinRecord& r : records) {
    const HairpinRecord* clash = nullptr;
    double worst = 0.0;
    for (const HairpinRecord& k : kept) {
      const double id = sequence_identity(r.fragment, k.fragment);
      if (id > max_identity) {
        clash = &k;
        worst = id;
        break;
      }
    }
    if (!clash) {
      kept.push_back(r);
    } else if (rejections) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.4f", worst);
      rejections->push_back({"identity", r.id(), "identity_above_threshold", clash->id() + " " + buf});
    }
  }
  return kept;
}

std::vector<std::pair<std::string, std::string>> read_culling_manifest(const std::filesystem::path& path) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& row : csv_body(read_file(path), "id,chain", "culling manifest")) out.emplace_back(row[0], row[1]);
  return out;
}

LoadResult load_structure_dir(const std::filesystem::path& dir,
                              const std::vector<std::pair<std::string, std::string>>* culling) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".pdb") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::set<std::pair<std::string, std::string>> wanted;
  if (culling) wanted.insert(culling->begin(), culling->end());
  LoadResult out;
  for (const auto& f : files) {
    PdbParseResult parsed;
    try {
      parsed = read_pdb_file(f);
    } catch (const PdbParseError& e) {
      out.rejections.push_back({"load", f.filename().string(), "parse_error", e.what()});
      continue;
    }
    for (const auto& w : parsed.warnings) out.rejections.push_back({"load", f.filename().string(), "parse_warning", w});
    for (auto& s : parsed.chains) {
      if (culling && !wanted.count({s.id, s.chain_id})) continue;
      out.structures.push_back(std::move(s));
    }
  }
  return out;
}

std::string hairpins_csv(const std::vector<HairpinRecord>& records) {
  std::string out = std::string(kHairpinHeader) + "\n";
  for (const auto& r : records) {
    const HairpinMotif& m = r.motif;
    out += join({r.source_id, r.chain, std::to_string(m.strand1.begin), std::to_string(m.strand1.end),
                 std::to_string(m.loop.begin), std::to_string(m.loop.end), std::to_string(m.strand2.begin),
                 std::to_string(m.strand2.end), r.fragment, std::to_string(r.flank_before),
                 std::to_string(r.flank_after)});
  }
  return out;
}

std::vector<HairpinRecord> parse_hairpins_csv(std::string_view text) {
  std::vector<HairpinRecord> out;
  for (const auto& f : csv_body(text, kHairpinHeader, "hairpin CSV")) {
    HairpinRecord r;
    r.source_id = f[0];
    r.chain = f[1];
    r.motif = {{to_int(f[2], "strand1_begin"), to_int(f[3], "strand1_end")},
               {to_int(f[4], "loop_begin"), to_int(f[5], "loop_end")},
               {to_int(f[6], "strand2_begin"), to_int(f[7], "strand2_end")}};
    r.fragment = f[8];
    r.flank_before = to_int(f[9], "flank_before");
    r.flank_after = to_int(f[10], "flank_after");
    if (static_cast<int>(r.fragment.size()) != r.motif.span().length()) {
      throw PipelineError("hairpin CSV: fragment length does not match the motif span for " + r.id());
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string manifest_csv(const std::vector<ManifestRow>& rows) {
  std::string out = std::string(kManifestHeader) + "\n";
  for (const auto& r : rows) {
    out += join({r.target_id, std::to_string(r.target_loop.begin), std::to_string(r.target_loop.end), r.donor_id,
                 std::to_string(r.target_anchor), std::to_string(r.donor_anchor), std::to_string(r.offset()),
                 std::to_string(r.region.begin), std::to_string(r.region.end)});
  }
  return out;
}

std::vector<ManifestRow> parse_manifest_csv(std::string_view text) {
  std::vector<ManifestRow> out;
  for (const auto& f : csv_body(text, kManifestHeader, "manifest CSV")) {
    ManifestRow r;
    r.target_id = f[0];
    r.target_loop = {to_int(f[1], "loop_begin"), to_int(f[2], "loop_end")};
    r.donor_id = f[3];
    r.target_anchor = to_int(f[4], "target_anchor");
    r.donor_anchor = to_int(f[5], "donor_anchor");
    if (to_int(f[6], "offset") != r.offset()) throw PipelineError("manifest CSV: offset disagrees with anchors");
    r.region = {to_int(f[7], "region_begin"), to_int(f[8], "region_end")};
    out.push_back(std::move(r));
  }
  return out;
}

std::string rejections_csv(const std::vector<Rejection>& rejections) {
  std::string out = "stage,subject,reason,detail\n";
  for (const auto& r : rejections) {
    std::string detail = r.detail;
    std::replace(detail.begin(), detail.end(), ',', ';');
    std::replace(detail.begin(), detail.end(), '\n', ' ');
    out += join({r.stage, r.subject, r.reason, detail});
  }
  return out;
}

}  // namespace trunkscope
