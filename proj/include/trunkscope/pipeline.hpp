// Dataset curation: hairpin mining, helical target loops, loop-anchored
// donor pairing and sequence-identity filtering.
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trunkscope/rng.hpp"
#include "trunkscope/structio.hpp"

namespace trunkscope {

class PipelineError : public Error {
 public:
  using Error::Error;
};

struct MinerThresholds {
  int strand_min = 5;
  int strand_max = 10;
  int loop_min = 2;
  int loop_max = 5;
};

struct HairpinRecord {
  std::string source_id;
  std::string chain;
  HairpinMotif motif;
  std::string fragment;  // residues of motif.span()
  int flank_before = 0;  // residues before the span in the chain
  int flank_after = 0;

  // source:chain:first-strand-start, unique within a corpus.
  std::string id() const;
  int chain_length() const { return flank_before + motif.span().length() + flank_after; }
};

// Reason-coded skip or discard, kept for the rejection log.
struct Rejection {
  std::string stage;
  std::string subject;
  std::string reason;
  std::string detail;
};

// Strand-loop-strand candidates from the codes alone: consecutive E runs
// within the strand bounds, separated by a loop of non-H/E codes within
// the loop bounds.
std::vector<HairpinMotif> scan_hairpins(const SecStruct& ss, const MinerThresholds& t = {});

// Strand direction vectors (last CA minus first CA) point opposite ways.
bool antiparallel(const Structure& s, const HairpinMotif& motif);

struct MineResult {
  std::vector<HairpinRecord> records;
  std::vector<Rejection> rejections;
};

// Records come out in input order; jobs > 1 spreads structures over threads.
MineResult mine_hairpins(const std::vector<Structure>& structures, const MinerThresholds& t = {}, int jobs = 1);

// Maximal loop runs (no H, E or B) of length 2-5 strictly between two H
// runs of length >= 4.
std::vector<IndexRange> loops_between_helices(const SecStruct& ss, int loop_min = 2, int loop_max = 5,
                                              int helix_min = 4);
std::vector<IndexRange> find_target_loops(const Structure& s);

struct TargetLoops {
  std::string id;
  std::string sequence;
  std::vector<IndexRange> loops;
};

struct PairingRules {
  int per_loop = 10;
  int region_min = 15;
  int region_max = 20;
};

// Target i maps to donor i + (donor_anchor - target_anchor); the anchors
// are the two loop starts.
struct ManifestRow {
  std::string target_id;
  IndexRange target_loop;
  std::string donor_id;
  int target_anchor = 0;
  int donor_anchor = 0;
  IndexRange region;  // patch region in target coordinates

  int offset() const { return donor_anchor - target_anchor; }
  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

struct PairingManifest {
  std::vector<ManifestRow> rows;
  std::vector<Rejection> rejections;
  std::vector<std::string> warnings;
};

// Donor hairpin span placed on the target by loop anchoring, trimmed
// symmetrically from the strand ends above region_max and widened into
// flanking context below region_min. Empty with a reason when it cannot
// fit.
std::pair<std::optional<IndexRange>, std::string> aligned_region(const TargetLoops& target, IndexRange loop,
                                                                 const HairpinRecord& donor, const PairingRules& rules);

// Donors are sorted by id before sampling, so the manifest does not depend
// on input order.
PairingManifest pair_donors(const std::vector<TargetLoops>& targets, std::vector<HairpinRecord> donors,
                            const PairingRules& rules, Rng& rng);

struct GlobalAlignment {
  std::string a;  // gapped, '-' for gaps
  std::string b;
  int score = 0;
  int matches = 0;
};

// Needleman-Wunsch, match +1, mismatch 0, gap -1. Ties in score go to the
// alignment with more matches (highest identity); remaining ties prefer
// diagonal, then a gap in b, then a gap in a, tracing back from the end.
GlobalAlignment global_align(std::string_view a, std::string_view b);
double sequence_identity(std::string_view a, std::string_view b);

// Greedy in input order: a record is kept when its identity with every
// kept record is <= max_identity.
std::vector<HairpinRecord> identity_filter(const std::vector<HairpinRecord>& records, double max_identity,
                                           std::vector<Rejection>* rejections = nullptr);

// Culling manifest: CSV with header "id,chain".
std::vector<std::pair<std::string, std::string>> read_culling_manifest(const std::filesystem::path& path);

struct LoadResult {
  std::vector<Structure> structures;
  std::vector<Rejection> rejections;
};

// Every *.pdb in dir, sorted by file name, first model. With a culling
// list only the listed (id, chain) pairs are kept.
LoadResult load_structure_dir(const std::filesystem::path& dir,
                              const std::vector<std::pair<std::string, std::string>>* culling = nullptr);

std::string hairpins_csv(const std::vector<HairpinRecord>& records);
std::vector<HairpinRecord> parse_hairpins_csv(std::string_view text);
std::string manifest_csv(const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> parse_manifest_csv(std::string_view text);
std::string rejections_csv(const std::vector<Rejection>& rejections);

}  // namespace trunkscope
