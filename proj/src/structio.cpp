#include "trunkscope/structio.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "trunkscope/io.hpp"

namespace trunkscope {

namespace {

constexpr std::array<std::string_view, 20> kThreeLetter = {
    "ALA", "CYS", "ASP", "GLU", "PHE", "GLY", "HIS", "ILE", "LYS", "LEU",
    "MET", "ASN", "PRO", "GLN", "ARG", "SER", "THR", "VAL", "TRP", "TYR"};

std::string_view trim(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::string_view field(std::string_view line, std::size_t first_col, std::size_t width) {
  // first_col is 1-based as in the PDB format description.
  const std::size_t begin = first_col - 1;
  if (begin >= line.size()) return {};
  return line.substr(begin, std::min(width, line.size() - begin));
}

double parse_real(std::string_view raw, std::size_t line_no, const char* what) {
  const std::string_view text = trim(raw);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(value)) {
    throw PdbParseError(line_no, std::string("malformed ") + what + " field '" + std::string(raw) + "'");
  }
  return value;
}

int parse_int(std::string_view raw, std::size_t line_no, const char* what) {
  const std::string_view text = trim(raw);
  int value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    throw PdbParseError(line_no, std::string("malformed ") + what + " field '" + std::string(raw) + "'");
  }
  return value;
}

std::optional<BackboneAtom> backbone_atom(std::string_view name) {
  if (name == "N") return BackboneAtom::N;
  if (name == "CA") return BackboneAtom::CA;
  if (name == "C") return BackboneAtom::C;
  if (name == "O") return BackboneAtom::O;
  return std::nullopt;
}

struct AtomCandidate {
  double occupancy;
  char altloc;
  Vec3 xyz;
};

// Highest occupancy first; ties prefer blank, then 'A', then lexicographic.
bool better_candidate(const AtomCandidate& lhs, const AtomCandidate& rhs) {
  if (lhs.occupancy != rhs.occupancy) return lhs.occupancy > rhs.occupancy;
  auto rank = [](char alt) { return std::make_pair(alt == ' ' ? 0 : (alt == 'A' ? 1 : 2), alt); };
  return rank(lhs.altloc) < rank(rhs.altloc);
}

struct PendingResidue {
  int seq_num;
  char icode;
  std::string name;
  std::array<std::vector<AtomCandidate>, 4> atoms;
};

struct PendingChain {
  std::string id;
  std::vector<PendingResidue> residues;
  std::map<std::pair<int, char>, std::size_t> index;
};

}  // namespace

bool is_amino_acid(char letter) {
  return amino_acid_index(letter) >= 0;
}

int amino_acid_index(char letter) {
  const auto pos = kAminoAcids.find(letter);
  return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
}

std::optional<char> one_letter_code(std::string_view residue_name) {
  if (residue_name == "MSE") return 'M';
  for (std::size_t i = 0; i < kThreeLetter.size(); ++i) {
    if (kThreeLetter[i] == residue_name) return kAminoAcids[i];
  }
  return std::nullopt;
}

std::string_view three_letter_code(char letter) {
  const int idx = amino_acid_index(letter);
  if (idx < 0) throw StructureError(std::string("unknown amino acid '") + letter + "'");
  return kThreeLetter[static_cast<std::size_t>(idx)];
}

std::string_view atom_name(BackboneAtom atom) {
  switch (atom) {
    case BackboneAtom::N: return "N";
    case BackboneAtom::CA: return "CA";
    case BackboneAtom::C: return "C";
    case BackboneAtom::O: return "O";
  }
  return "?";
}

const Vec3& Residue::ca() const {
  const auto& a = atom(BackboneAtom::CA);
  if (!a) {
    throw StructureError("residue " + std::to_string(seq_num) + std::string(1, icode) +
                         " has no CA atom");
  }
  return *a;
}

std::string Structure::sequence() const {
  std::string seq;
  seq.reserve(residues.size());
  for (const auto& r : residues) seq.push_back(r.amino_acid);
  return seq;
}

double SecStruct::fraction(char code, IndexRange region) const {
  if (region.empty()) return 0.0;
  int hits = 0;
  for (int i = region.begin; i < region.end; ++i) hits += (*this)[i] == code ? 1 : 0;
  return static_cast<double>(hits) / region.length();
}

PdbParseResult parse_pdb(std::string_view text, const std::string& source_id) {
  PdbParseResult result;
  std::vector<PendingChain> chains;
  std::map<std::string, std::size_t> chain_index;
  int models_seen = 0;
  std::vector<std::string> skipped_names;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t eol = text.find('\n', pos);
    const std::string_view line =
        text.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos);
    pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
    ++line_no;

    const std::string_view record = line.substr(0, std::min<std::size_t>(6, line.size()));
    if (record.starts_with("MODEL")) {
      if (++models_seen > 1) break;
      continue;
    }
    if (record.starts_with("ENDMDL") || trim(record) == "END") break;
    const bool is_atom = record == "ATOM  ";
    const bool is_het = record == "HETATM";
    if (!is_atom && !is_het) continue;

    const std::string res_name{trim(field(line, 18, 3))};
    if (is_het && res_name != "MSE") continue;
    if (trim(line).size() < 54 || line.size() < 54) {
      throw PdbParseError(line_no, "coordinate record shorter than 54 columns");
    }
    const std::string name{trim(field(line, 13, 4))};
    const char altloc = line[16];
    const std::string chain_id(1, line[21]);
    const int seq_num = parse_int(field(line, 23, 4), line_no, "resSeq");
    const char icode = line[26];
    const Vec3 xyz(parse_real(field(line, 31, 8), line_no, "x"),
                   parse_real(field(line, 39, 8), line_no, "y"),
                   parse_real(field(line, 47, 8), line_no, "z"));
    double occupancy = 1.0;
    if (const auto occ = field(line, 55, 6); !trim(occ).empty()) {
      occupancy = parse_real(occ, line_no, "occupancy");
    }

    auto [chain_it, inserted] = chain_index.try_emplace(chain_id, chains.size());
    if (inserted) chains.push_back(PendingChain{chain_id, {}, {}});
    PendingChain& chain = chains[chain_it->second];
    auto [res_it, new_res] = chain.index.try_emplace({seq_num, icode}, chain.residues.size());
    if (new_res) chain.residues.push_back(PendingResidue{seq_num, icode, res_name, {}});
    PendingResidue& residue = chain.residues[res_it->second];
    if (const auto atom = backbone_atom(name)) {
      residue.atoms[static_cast<std::size_t>(*atom)].push_back({occupancy, altloc, xyz});
    }
  }

  for (const auto& pending : chains) {
    Structure s;
    s.id = source_id;
    s.chain_id = pending.id;
    for (const auto& pr : pending.residues) {
      const auto letter = one_letter_code(pr.name);
      const std::string where = "chain " + pending.id + " residue " + pr.name + " " +
                                std::to_string(pr.seq_num) + (pr.icode == ' ' ? "" : std::string(1, pr.icode));
      if (!letter) {
        result.warnings.push_back(where + ": non-standard residue skipped");
        continue;
      }
      Residue r;
      r.seq_num = pr.seq_num;
      r.icode = pr.icode;
      r.amino_acid = *letter;
      for (std::size_t a = 0; a < 4; ++a) {
        if (pr.atoms[a].empty()) continue;
        const auto best = std::min_element(pr.atoms[a].begin(), pr.atoms[a].end(), better_candidate);
        r.atoms[a] = best->xyz;
      }
      if (!r.has(BackboneAtom::CA)) {
        result.warnings.push_back(where + ": no CA atom, residue skipped");
        continue;
      }
      s.residues.push_back(std::move(r));
    }
    if (s.size() < 3) {
      result.warnings.push_back("chain " + pending.id + ": fewer than 3 CA atoms, chain skipped");
      continue;
    }
    result.chains.push_back(std::move(s));
  }
  return result;
}

PdbParseResult read_pdb_file(const std::filesystem::path& path) {
  return parse_pdb(read_file(path), path.stem().string());
}

namespace {

// Coordinate truncated toward zero at 3 decimals, right-aligned in 8 columns.
// The 1e-6 nudge keeps values already on the 0.001 grid from dropping a unit.
std::string pdb_coord(double x) {
  if (!std::isfinite(x) || std::abs(x) >= 10000.0) {
    throw StructureError("coordinate out of PDB range: " + std::to_string(x));
  }
  const long long milli = static_cast<long long>(std::trunc(x * 1000.0 + std::copysign(1e-6, x)));
  const long long mag = milli < 0 ? -milli : milli;
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%s%lld.%03lld", milli < 0 ? "-" : "", mag / 1000, mag % 1000);
  char out[24];
  std::snprintf(out, sizeof(out), "%8s", buf);
  return out;
}

}  // namespace

std::string emit_pdb(const std::vector<Structure>& chains) {
  std::string out;
  char line[96];
  int serial = 1;
  for (const auto& s : chains) {
    const char chain = s.chain_id.empty() ? 'A' : s.chain_id.front();
    for (const auto& r : s.residues) {
      const std::string res_name{three_letter_code(r.amino_acid)};
      for (const auto atom : kBackboneAtoms) {
        const auto& xyz = r.atom(atom);
        if (!xyz) continue;
        const std::string name{atom_name(atom)};
        std::snprintf(line, sizeof(line),
                      "ATOM  %5d  %-3s %3s %c%4d%c   %s%s%s%6.2f%6.2f          %2s  \n",
                      serial++, name.c_str(), res_name.c_str(), chain, r.seq_num, r.icode,
                      pdb_coord((*xyz)(0)).c_str(), pdb_coord((*xyz)(1)).c_str(),
                      pdb_coord((*xyz)(2)).c_str(), 1.0, 0.0, name.substr(0, 1).c_str());
        out += line;
      }
    }
    if (!s.residues.empty()) {
      const auto& last = s.residues.back();
      std::snprintf(line, sizeof(line), "TER   %5d      %3s %c%4d%c\n", serial++,
                    std::string(three_letter_code(last.amino_acid)).c_str(), chain, last.seq_num,
                    last.icode);
      out += line;
    }
  }
  out += "END\n";
  return out;
}

void write_pdb_file(const std::filesystem::path& path, const std::vector<Structure>& chains) {
  write_file(path, emit_pdb(chains));
}

Coords ca_coords(const Structure& s) {
  Coords coords(s.size(), 3);
  for (int i = 0; i < s.size(); ++i) coords.row(i) = s.residues[static_cast<std::size_t>(i)].ca().transpose();
  return coords;
}

Mat ca_distance_map(const Structure& s) {
  const Coords ca = ca_coords(s);
  const int n = s.size();
  Mat d = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      d(i, j) = d(j, i) = (ca.row(i) - ca.row(j)).norm();
    }
  }
  return d;
}

namespace {

bool within(const std::optional<Vec3>& a, const std::optional<Vec3>& b, double cutoff) {
  return a && b && (*a - *b).norm() < cutoff;
}

bool has_hbond(const Structure& s, int donor, int acceptor, double cutoff) {
  if (donor < 0 || acceptor < 0 || donor >= s.size() || acceptor >= s.size()) return false;
  if (std::abs(donor - acceptor) < 2) return false;
  return within(s.residues[static_cast<std::size_t>(donor)].atom(BackboneAtom::N),
                s.residues[static_cast<std::size_t>(acceptor)].atom(BackboneAtom::O), cutoff);
}

}  // namespace

std::vector<HBond> hbonds_backbone(const Structure& s, double cutoff) {
  std::vector<HBond> bonds;
  for (int i = 0; i < s.size(); ++i) {
    for (int j = 0; j < s.size(); ++j) {
      if (has_hbond(s, i, j, cutoff)) bonds.push_back({i, j});
    }
  }
  return bonds;
}

SecStruct assign_secondary(const Structure& s) {
  const int n = s.size();
  int complete = 0;
  for (const auto& r : s.residues) {
    complete += std::all_of(r.atoms.begin(), r.atoms.end(), [](const auto& a) { return a.has_value(); }) ? 1 : 0;
  }
  if (n == 0 || complete * 5 < n * 4) {
    throw StructureError("assign_secondary: backbone atoms missing for more than 20% of residues");
  }

  // co_to_nh(a, b): carbonyl of a accepts from the amide of b.
  BoolMat co_to_nh = BoolMat::Constant(n, n, false);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) co_to_nh(a, b) = has_hbond(s, b, a, kHBondCutoff);
  }
  auto hb = [&](int a, int b) {
    return a >= 0 && b >= 0 && a < n && b < n && co_to_nh(a, b);
  };

  std::string codes(static_cast<std::size_t>(n), 'L');

  enum class Kind { Parallel, Antiparallel };
  struct Bridge {
    int i, j;
    Kind kind;
  };
  std::vector<Bridge> bridges;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 3; j < n; ++j) {
      const bool parallel = (hb(i - 1, j) && hb(j, i + 1)) || (hb(j - 1, i) && hb(i, j + 1));
      const bool antiparallel = (hb(i, j) && hb(j, i)) || (hb(i - 1, j + 1) && hb(j - 1, i + 1));
      if (parallel) bridges.push_back({i, j, Kind::Parallel});
      if (antiparallel) bridges.push_back({i, j, Kind::Antiparallel});
    }
  }
  auto bridged = [&](int i, int j, Kind kind) {
    return std::any_of(bridges.begin(), bridges.end(),
                       [&](const Bridge& b) { return b.i == i && b.j == j && b.kind == kind; });
  };
  for (const auto& b : bridges) {
    const bool laddered = b.kind == Kind::Parallel
                              ? bridged(b.i - 1, b.j - 1, b.kind) || bridged(b.i + 1, b.j + 1, b.kind)
                              : bridged(b.i - 1, b.j + 1, b.kind) || bridged(b.i + 1, b.j - 1, b.kind);
    for (const int r : {b.i, b.j}) {
      char& code = codes[static_cast<std::size_t>(r)];
      if (laddered) {
        code = 'E';
      } else if (code != 'E') {
        code = 'B';
      }
    }
  }

  // Two consecutive i -> i+4 turns make residues i..i+3 helical.
  for (int i = 1; i + 4 < n; ++i) {
    if (hb(i - 1, i + 3) && hb(i, i + 4)) {
      for (int r = i; r < i + 4; ++r) codes[static_cast<std::size_t>(r)] = 'H';
    }
  }
  return SecStruct{codes};
}

std::vector<IndexRange> strand_runs(const SecStruct& ss, IndexRange region) {
  std::vector<IndexRange> runs;
  const int begin = std::max(0, region.begin);
  const int end = std::min(ss.size(), region.end);
  int i = begin;
  while (i < end) {
    if (ss[i] == 'E' || ss[i] == 'B') {
      int j = i;
      while (j < end && (ss[j] == 'E' || ss[j] == 'B')) ++j;
      runs.push_back({i, j});
      i = j;
    } else {
      ++i;
    }
  }
  return runs;
}

std::optional<HairpinMotif> detect_hairpin(const SecStruct& ss, IndexRange region) {
  const auto runs = strand_runs(ss, region);
  for (std::size_t k = 0; k + 1 < runs.size(); ++k) {
    const IndexRange& first = runs[k];
    const IndexRange& second = runs[k + 1];
    const IndexRange loop{first.end, second.begin};
    if (first.length() >= 2 && second.length() >= 2 && loop.length() >= 0 && loop.length() <= 5) {
      return HairpinMotif{first, loop, second};
    }
  }
  return std::nullopt;
}

double radius_of_gyration(const Structure& s) {
  return radius_of_gyration(ca_coords(s));
}

BoolMat contact_map(const Structure& s, double cutoff) {
  const Mat d = ca_distance_map(s);
  const int n = s.size();
  BoolMat contacts = BoolMat::Constant(n, n, false);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      contacts(i, j) = std::abs(i - j) >= 2 && d(i, j) < cutoff;
    }
  }
  return contacts;
}

std::vector<std::pair<int, int>> facing_pairs(const HairpinMotif& motif) {
  std::vector<std::pair<int, int>> pairs;
  const int count = std::min(motif.strand1.length(), motif.strand2.length());
  for (int k = 0; k < count; ++k) pairs.emplace_back(motif.strand1.end - 1 - k, motif.strand2.begin + k);
  return pairs;
}

double cross_strand_hbond_fraction(const Structure& s, const HairpinMotif& motif, double cutoff) {
  const auto pairs = facing_pairs(motif);
  if (pairs.empty()) return 0.0;
  int bonded = 0;
  for (const auto& [i, j] : pairs) {
    bonded += (has_hbond(s, i, j, cutoff) || has_hbond(s, j, i, cutoff)) ? 1 : 0;
  }
  return static_cast<double>(bonded) / static_cast<double>(pairs.size());
}

double mean_facing_ca_distance(const Structure& s, const HairpinMotif& motif) {
  const auto pairs = facing_pairs(motif);
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [i, j] : pairs) {
    total += (s.residues[static_cast<std::size_t>(i)].ca() - s.residues[static_cast<std::size_t>(j)].ca()).norm();
  }
  return total / static_cast<double>(pairs.size());
}

Structure transformed(const Structure& s, const Mat3& rotation, const Vec3& translation) {
  Structure out = s;
  for (auto& r : out.residues) {
    for (auto& a : r.atoms) {
      if (a) a = rotation * *a + translation;
    }
  }
  return out;
}

}  // namespace trunkscope
