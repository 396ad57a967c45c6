#include "trunkscope/fixtures.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

namespace trunkscope::fixtures {

namespace {

constexpr double kBondNCa = 1.458;
constexpr double kBondCaC = 1.525;
constexpr double kBondCN = 1.329;
constexpr double kBondCO = 1.231;
constexpr double kAngleNCaC = 111.2;
constexpr double kAngleCaCN = 116.2;
constexpr double kAngleCNCa = 121.7;
constexpr double kAngleCaCO = 120.5;

// Planar sheet layout.
constexpr double kRise = 3.4;
constexpr double kStrandGap = 5.3;

double rad(double degrees) {
  return degrees * std::numbers::pi / 180.0;
}

// Places d such that |cd| = bond, angle(b, c, d) = angle and the
// torsion a-b-c-d equals torsion (degrees).
Vec3 place(const Vec3& a, const Vec3& b, const Vec3& c, double bond, double angle, double torsion) {
  const Vec3 bc = (c - b).normalized();
  const Vec3 n = (b - a).cross(bc).normalized();
  const Vec3 m = n.cross(bc);
  const double th = rad(angle);
  const double tor = rad(torsion);
  const Vec3 local(-bond * std::cos(th), bond * std::sin(th) * std::cos(tor),
                   bond * std::sin(th) * std::sin(tor));
  return c + local(0) * bc + local(1) * m + local(2) * n;
}

std::string cycled(std::string_view pattern, int length, int phase = 0) {
  std::string out;
  for (int i = 0; i < length; ++i) out.push_back(pattern[static_cast<std::size_t>(i + phase) % pattern.size()]);
  return out;
}

constexpr std::string_view kHelixPattern = "AEELLKKLAEEAKRL";
constexpr std::string_view kStrandPattern = "TVKVEYRVTW";
constexpr std::string_view kLoopPattern = "NGDGS";
constexpr std::string_view kFlankPattern = "SPGAQ";

Residue make_residue(int seq_num, char aa) {
  Residue r;
  r.seq_num = seq_num;
  r.amino_acid = aa;
  return r;
}

}  // namespace

Structure build_backbone(std::string_view sequence, std::span<const Torsions> torsions,
                         const std::string& id) {
  if (sequence.size() != torsions.size()) throw StructureError("build_backbone: torsion count mismatch");
  Structure s;
  s.id = id;
  const int n = static_cast<int>(sequence.size());
  for (int i = 0; i < n; ++i) {
    Residue r = make_residue(i + 1, sequence[static_cast<std::size_t>(i)]);
    if (i == 0) {
      r.atom(BackboneAtom::N) = Vec3(0, 0, 0);
      r.atom(BackboneAtom::CA) = Vec3(kBondNCa, 0, 0);
      r.atom(BackboneAtom::C) =
          Vec3(kBondNCa - kBondCaC * std::cos(rad(kAngleNCaC)), kBondCaC * std::sin(rad(kAngleNCaC)), 0);
    } else {
      const Residue& prev = s.residues.back();
      const Vec3 n_prev = *prev.atom(BackboneAtom::N);
      const Vec3 ca_prev = *prev.atom(BackboneAtom::CA);
      const Vec3 c_prev = *prev.atom(BackboneAtom::C);
      const double psi_prev = torsions[static_cast<std::size_t>(i - 1)].psi;
      const Vec3 n_cur = place(n_prev, ca_prev, c_prev, kBondCN, kAngleCaCN, psi_prev);
      const Vec3 ca_cur = place(ca_prev, c_prev, n_cur, kBondNCa, kAngleCNCa, 180.0);
      const Vec3 c_cur = place(c_prev, n_cur, ca_cur, kBondCaC, kAngleNCaC,
                               torsions[static_cast<std::size_t>(i)].phi);
      r.atom(BackboneAtom::N) = n_cur;
      r.atom(BackboneAtom::CA) = ca_cur;
      r.atom(BackboneAtom::C) = c_cur;
    }
    r.atom(BackboneAtom::O) = place(*r.atom(BackboneAtom::N), *r.atom(BackboneAtom::CA),
                                    *r.atom(BackboneAtom::C), kBondCO, kAngleCaCO,
                                    torsions[static_cast<std::size_t>(i)].psi + 180.0);
    s.residues.push_back(std::move(r));
  }
  return s;
}

Structure ideal_helix(int length, const std::string& id) {
  const std::vector<Torsions> torsions(static_cast<std::size_t>(length), kAlphaHelix);
  return build_backbone(cycled(kHelixPattern, length), torsions, id);
}

Structure helix_turn_helix(const std::vector<int>& helices, const std::vector<int>& loops,
                           const std::string& id) {
  if (helices.empty() || loops.size() + 1 != helices.size()) {
    throw StructureError("helix_turn_helix: need one loop between each pair of helices");
  }
  // Loop torsions alternate a polyproline-like and a bridge-region step.
  constexpr std::array<Torsions, 2> loop_steps = {Torsions{-70.0, 145.0}, Torsions{-90.0, 10.0}};
  std::string sequence;
  std::vector<Torsions> torsions;
  for (std::size_t h = 0; h < helices.size(); ++h) {
    sequence += cycled(kHelixPattern, helices[h], static_cast<int>(3 * h));
    torsions.insert(torsions.end(), static_cast<std::size_t>(helices[h]), kAlphaHelix);
    if (h < loops.size()) {
      sequence += cycled(kLoopPattern, loops[h], static_cast<int>(h));
      for (int k = 0; k < loops[h]; ++k) torsions.push_back(loop_steps[static_cast<std::size_t>(k) % 2]);
    }
  }
  return build_backbone(sequence, torsions, id);
}

Structure planar_sheet(const SheetSpec& spec, const std::string& id) {
  if (spec.strands.empty() || spec.loops.size() + 1 != spec.strands.size()) {
    throw StructureError("planar_sheet: need one loop between each pair of strands");
  }
  Structure s;
  s.id = id;
  int seq_num = 1;

  // Strand residue: CA on the line y = k * gap; N and C along the strand
  // axis, tilted towards side; O continues from C towards side.
  auto strand_residue = [&](double x, double y, double dir, double side, char aa) {
    Residue r = make_residue(seq_num++, aa);
    r.atom(BackboneAtom::CA) = Vec3(x, y, 0);
    r.atom(BackboneAtom::N) = Vec3(x - 1.2 * dir, y + 0.6 * side, 0);
    r.atom(BackboneAtom::C) = Vec3(x + 1.2 * dir, y + 0.6 * side, 0);
    r.atom(BackboneAtom::O) = Vec3(x + 1.2 * dir, y + 1.83 * side, 0);
    s.residues.push_back(std::move(r));
  };
  // Coil residue with N/C/O lifted out of the sheet plane (no H-bonds).
  auto coil_residue = [&](const Vec3& ca, const Vec3& axis, char aa) {
    Residue r = make_residue(seq_num++, aa);
    r.atom(BackboneAtom::CA) = ca;
    r.atom(BackboneAtom::N) = Vec3(ca - 1.0 * axis + Vec3(0, 0, -1.0));
    r.atom(BackboneAtom::C) = Vec3(ca + 1.0 * axis + Vec3(0, 0, 1.1));
    r.atom(BackboneAtom::O) = Vec3(ca + 1.0 * axis + Vec3(0, 0, 2.3));
    s.residues.push_back(std::move(r));
  };

  // Column of the first residue of each strand, and its running direction.
  std::vector<int> start_col(spec.strands.size());
  std::vector<double> dir(spec.strands.size());
  int col = 0;
  for (std::size_t k = 0; k < spec.strands.size(); ++k) {
    dir[k] = k % 2 == 0 ? 1.0 : -1.0;
    start_col[k] = col;
    const int end_col = col + static_cast<int>(dir[k]) * (spec.strands[k] - 1);
    col = end_col;
  }

  const double dir0 = dir.front();
  for (int f = spec.flank_before; f >= 1; --f) {
    const double x = kRise * (start_col.front() - dir0 * f);
    coil_residue(Vec3(x, 0, 0), Vec3(dir0, 0, 0), kFlankPattern[static_cast<std::size_t>(f) % kFlankPattern.size()]);
  }

  for (std::size_t k = 0; k < spec.strands.size(); ++k) {
    const int len = spec.strands[k];
    const double y = kStrandGap * static_cast<double>(k);
    for (int m = 0; m < len; ++m) {
      const int c = start_col[k] + static_cast<int>(dir[k]) * m;
      // Strands after the first point their first residue back at the
      // previous strand; the first strand points its last residue forward.
      double side;
      if (k == 0) {
        side = ((len - 1 - m) % 2 == 0) ? 1.0 : -1.0;
      } else {
        side = (m % 2 == 0) ? -1.0 : 1.0;
      }
      strand_residue(kRise * c, y, dir[k], side,
                     kStrandPattern[static_cast<std::size_t>(m + 3 * static_cast<int>(k)) % kStrandPattern.size()]);
    }
    if (k < spec.loops.size()) {
      const int loop_len = spec.loops[k];
      const int end_col = start_col[k] + static_cast<int>(dir[k]) * (len - 1);
      const double x_end = kRise * end_col;
      const double y_mid = y + 0.5 * kStrandGap;
      const double semi_x = 2.2 + 0.9 * loop_len;
      const double semi_y = 0.5 * kStrandGap;
      for (int m = 0; m < loop_len; ++m) {
        const double theta = -0.5 * std::numbers::pi + std::numbers::pi * (m + 1) / (loop_len + 1);
        const Vec3 ca(x_end + dir[k] * semi_x * std::cos(theta), y_mid + semi_y * std::sin(theta), 0);
        const Vec3 tangent(-dir[k] * std::sin(theta), std::cos(theta), 0);
        coil_residue(ca, tangent, kLoopPattern[static_cast<std::size_t>(m) % kLoopPattern.size()]);
      }
    }
  }

  const std::size_t last = spec.strands.size() - 1;
  const int last_col = start_col[last] + static_cast<int>(dir[last]) * (spec.strands[last] - 1);
  for (int f = 1; f <= spec.flank_after; ++f) {
    const double x = kRise * (last_col + dir[last] * f);
    coil_residue(Vec3(x, kStrandGap * static_cast<double>(last), 0), Vec3(dir[last], 0, 0),
                 kFlankPattern[static_cast<std::size_t>(f + 2) % kFlankPattern.size()]);
  }
  return s;
}

Structure ideal_hairpin(int strand1, int loop, int strand2, int flank, const std::string& id) {
  return planar_sheet(SheetSpec{{strand1, strand2}, {loop}, flank, flank}, id);
}

Structure isolated_strand(int length, const std::string& id) {
  const std::vector<Torsions> torsions(static_cast<std::size_t>(length), kBetaStrand);
  return build_backbone(cycled(kStrandPattern, length), torsions, id);
}

std::vector<NamedStructure> corpus() {
  std::vector<NamedStructure> files;
  files.push_back({"hth_alpha.pdb", helix_turn_helix({12, 12}, {3}, "hth_alpha")});
  files.push_back({"hth_beta.pdb", helix_turn_helix({10, 14, 10}, {2, 3}, "hth_beta")});
  files.push_back({"hairpin_a.pdb", ideal_hairpin(6, 3, 6, 4, "hairpin_a")});
  files.push_back({"hairpin_b.pdb", ideal_hairpin(7, 2, 7, 4, "hairpin_b")});
  files.push_back({"meander.pdb", planar_sheet(SheetSpec{{6, 6, 6}, {2, 2}, 3, 3}, "meander")});
  return files;
}

std::string excerpt_pdb_text() {
  // 39 residues numbered 1..20, 20A, 21..38 (helix, 4-residue loop, helix).
  // Residue 5 carries altloc A/B on CA; residue 12 is MSE.
  Structure chain = helix_turn_helix({18, 17}, {4}, "excerpt");
  std::string text =
      "HEADER    DE NOVO PROTEIN                         01-JAN-26   XTST              \n"
      "TITLE     FORMAT COVERAGE FIXTURE FOR THE BACKBONE READER                      \n"
      "REMARK   2 RESOLUTION.    1.80 ANGSTROMS.                                       \n"
      "SEQRES   1 A   39  ALA GLU GLU LEU LEU LYS LYS LEU ALA GLU GLU ALA LYS          \n"
      "HELIX    1   1 ALA A    1  LEU A   18  1                                  18    \n";
  char line[96];
  int serial = 1;
  auto atom_line = [&](const char* record, const char* name, char alt, const char* res, int seq, char icode,
                       const Vec3& xyz, double occ, const char* element) {
    std::snprintf(line, sizeof(line), "%-6s%5d %-4s%c%3s A%4d%c   %8.3f%8.3f%8.3f%6.2f%6.2f          %2s  \n",
                  record, serial++, name, alt, res, seq, icode, xyz(0), xyz(1), xyz(2), occ, 20.0, element);
    text += line;
  };
  for (int model = 1; model <= 2; ++model) {
    std::snprintf(line, sizeof(line), "MODEL     %4d\n", model);
    text += line;
    const Vec3 shift = model == 1 ? Vec3::Zero() : Vec3(0.5, -0.25, 1.0);
    for (int i = 0; i < chain.size(); ++i) {
      const Residue& r = chain.residues[static_cast<std::size_t>(i)];
      int seq = i < 20 ? i + 1 : i;
      char icode = i == 20 ? 'A' : ' ';
      const bool mse = i == 11;
      const std::string res = mse ? "MSE" : std::string(three_letter_code(r.amino_acid));
      const char* record = mse ? "HETATM" : "ATOM";
      for (const auto atom : kBackboneAtoms) {
        const Vec3 xyz = *r.atom(atom) + shift;
        const std::string name = std::string(" ") + std::string(atom_name(atom));
        const char* element = atom == BackboneAtom::O ? "O" : (atom == BackboneAtom::N ? "N" : "C");
        if (i == 4 && atom == BackboneAtom::CA) {
          atom_line(record, name.c_str(), 'A', res.c_str(), seq, icode, xyz + Vec3(0.3, 0, 0), 0.40, element);
          atom_line(record, name.c_str(), 'B', res.c_str(), seq, icode, xyz, 0.60, element);
        } else {
          atom_line(record, name.c_str(), ' ', res.c_str(), seq, icode, xyz, 1.00, element);
        }
      }
      if (r.amino_acid != 'G') {
        const Vec3 cb = *r.atom(BackboneAtom::CA) + Vec3(0.0, 0.0, 1.53) + shift;
        atom_line(record, " CB", ' ', res.c_str(), seq, icode, cb, 1.00, "C");
      }
    }
    std::snprintf(line, sizeof(line), "TER   %5d      %3s A%4d\n", serial++, "LEU", 38);
    text += line;
    atom_line("HETATM", " O", ' ', "HOH", 101, ' ', Vec3(10.0, 10.0, 10.0) + shift, 1.00, "O");
    atom_line("HETATM", " O", ' ', "HOH", 102, ' ', Vec3(-10.0, 10.0, 10.0) + shift, 1.00, "O");
    text += "ENDMDL\n";
  }
  text += "END\n";
  return text;
}

}  // namespace trunkscope::fixtures
