// Backbone structures: PDB reading/writing and the geometric metrics used
// to score folding experiments.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "trunkscope/numerics.hpp"

namespace trunkscope {

class StructureError : public Error {
 public:
  using Error::Error;
};

class PdbParseError : public StructureError {
 public:
  PdbParseError(std::size_t line, const std::string& what)
      : StructureError("PDB line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline constexpr std::string_view kAminoAcids = "ACDEFGHIKLMNPQRSTVWY";

bool is_amino_acid(char letter);
// Index of letter in kAminoAcids, or -1.
int amino_acid_index(char letter);
std::optional<char> one_letter_code(std::string_view residue_name);
std::string_view three_letter_code(char letter);

enum class BackboneAtom : std::uint8_t { N = 0, CA = 1, C = 2, O = 3 };
inline constexpr std::array<BackboneAtom, 4> kBackboneAtoms = {
    BackboneAtom::N, BackboneAtom::CA, BackboneAtom::C, BackboneAtom::O};
std::string_view atom_name(BackboneAtom atom);

struct Residue {
  int seq_num = 0;
  char icode = ' ';
  char amino_acid = 'G';
  std::array<std::optional<Vec3>, 4> atoms;

  const std::optional<Vec3>& atom(BackboneAtom a) const {
    return atoms[static_cast<std::size_t>(a)];
  }
  std::optional<Vec3>& atom(BackboneAtom a) { return atoms[static_cast<std::size_t>(a)]; }
  bool has(BackboneAtom a) const { return atom(a).has_value(); }
  const Vec3& ca() const;
};

struct Structure {
  std::string id;
  std::string chain_id = "A";
  std::vector<Residue> residues;

  int size() const { return static_cast<int>(residues.size()); }
  std::string sequence() const;
};

// Half-open residue index range [begin, end).
struct IndexRange {
  int begin = 0;
  int end = 0;

  int length() const { return end - begin; }
  bool contains(int i) const { return i >= begin && i < end; }
  bool empty() const { return end <= begin; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

// Per-residue codes: H helix, E strand, B isolated bridge, L other.
struct SecStruct {
  std::string codes;

  int size() const { return static_cast<int>(codes.size()); }
  char operator[](int i) const { return codes[static_cast<std::size_t>(i)]; }
  double fraction(char code, IndexRange region) const;
};

struct HairpinMotif {
  IndexRange strand1;
  IndexRange loop;
  IndexRange strand2;

  IndexRange span() const { return {strand1.begin, strand2.end}; }
  friend bool operator==(const HairpinMotif&, const HairpinMotif&) = default;
};

struct PdbParseResult {
  std::vector<Structure> chains;
  std::vector<std::string> warnings;
};

// First MODEL only. Alternate locations resolve to the highest occupancy
// (ties: 'A', then lexicographic). HETATM is ignored except MSE, read as M.
PdbParseResult parse_pdb(std::string_view text, const std::string& source_id = "");
PdbParseResult read_pdb_file(const std::filesystem::path& path);
std::string emit_pdb(const std::vector<Structure>& chains);
void write_pdb_file(const std::filesystem::path& path, const std::vector<Structure>& chains);

Coords ca_coords(const Structure& s);
Mat ca_distance_map(const Structure& s);

struct HBond {
  int donor = 0;     // residue contributing N
  int acceptor = 0;  // residue contributing O
  friend bool operator==(const HBond&, const HBond&) = default;
  friend auto operator<=>(const HBond&, const HBond&) = default;
};

inline constexpr double kHBondCutoff = 3.5;
inline constexpr double kContactCutoff = 8.0;

// (i, j) iff |N_i - O_j| < cutoff and |i - j| >= 2. Sorted.
std::vector<HBond> hbonds_backbone(const Structure& s, double cutoff = kHBondCutoff);

SecStruct assign_secondary(const Structure& s);

// Maximal runs of strand codes (E or B).
std::vector<IndexRange> strand_runs(const SecStruct& ss, IndexRange region);
std::optional<HairpinMotif> detect_hairpin(const SecStruct& ss, IndexRange region);

template <typename Derived>
double radius_of_gyration(const Eigen::MatrixBase<Derived>& coords) {
  if (coords.rows() == 0) throw StructureError("radius_of_gyration: no coordinates");
  const Eigen::RowVector3d centroid = coords.colwise().mean();
  return std::sqrt((coords.rowwise() - centroid).rowwise().squaredNorm().mean());
}
double radius_of_gyration(const Structure& s);

BoolMat contact_map(const Structure& s, double cutoff = kContactCutoff);

// Loop-anchored facing pairs: k-th residue before the loop with the k-th
// residue after it, k < min(len1, len2).
std::vector<std::pair<int, int>> facing_pairs(const HairpinMotif& motif);
double cross_strand_hbond_fraction(const Structure& s, const HairpinMotif& motif,
                                   double cutoff = kHBondCutoff);
double mean_facing_ca_distance(const Structure& s, const HairpinMotif& motif);

Structure transformed(const Structure& s, const Mat3& rotation, const Vec3& translation);

}  // namespace trunkscope
