// Hand-built backbone geometries with known secondary structure. The
// formulas are documented in fixtures/README.md.
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trunkscope/structio.hpp"

namespace trunkscope::fixtures {

struct Torsions {
  double phi = -57.8;
  double psi = -47.0;
};

inline constexpr Torsions kAlphaHelix{-57.8, -47.0};
inline constexpr Torsions kBetaStrand{-139.0, 135.0};

// Internal-coordinate (NeRF) chain with ideal bond lengths and angles and
// trans peptides. torsions.size() must equal sequence.size().
Structure build_backbone(std::string_view sequence, std::span<const Torsions> torsions,
                         const std::string& id);

Structure ideal_helix(int length, const std::string& id = "ideal_helix");

// Helices joined by loops, all built from torsions.
Structure helix_turn_helix(const std::vector<int>& helices, const std::vector<int>& loops,
                           const std::string& id = "helix_turn_helix");

// Planar antiparallel meander: strands joined by loops, optional coil
// flanks at both termini. Facing residues next to each loop are H-bonded.
struct SheetSpec {
  std::vector<int> strands;
  std::vector<int> loops;  // strands.size() - 1 entries
  int flank_before = 0;
  int flank_after = 0;
};
Structure planar_sheet(const SheetSpec& spec, const std::string& id);

Structure ideal_hairpin(int strand1, int loop, int strand2, int flank = 0,
                        const std::string& id = "ideal_hairpin");

// Straight strand without a partner; never bridged.
Structure isolated_strand(int length, const std::string& id = "isolated_strand");

struct NamedStructure {
  std::string file_name;
  Structure structure;
};

// The five-file corpus used by the end-to-end experiments.
std::vector<NamedStructure> corpus();

// Format-coverage file: header records, altlocs, insertion codes, side
// chain atoms, MSE, waters and a second model.
std::string excerpt_pdb_text();

}  // namespace trunkscope::fixtures
