// Declarative interventions (patch, ablate, freeze, steer, scale) executed
// through the trunk hook points.
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "trunkscope/trunk.hpp"

namespace trunkscope {

class InterventionError : public Error {
 public:
  using Error::Error;
};

enum class Track { s, z };
std::string_view track_name(Track t);
Track parse_track(std::string_view name);

enum class MaskKind { seq_rows, pair_intra, pair_touch, pair_pairs };
std::string_view mask_kind_name(MaskKind k);

// Region R is the union of `ranges`. Pair masks always cover both (i, j)
// and (j, i).
struct RegionMask {
  MaskKind kind = MaskKind::seq_rows;
  std::vector<IndexRange> ranges;
  std::vector<std::pair<int, int>> pairs;  // pair_pairs only

  static RegionMask rows(std::vector<IndexRange> r) { return {MaskKind::seq_rows, std::move(r), {}}; }
  static RegionMask intra(std::vector<IndexRange> r) { return {MaskKind::pair_intra, std::move(r), {}}; }
  static RegionMask touch(std::vector<IndexRange> r) { return {MaskKind::pair_touch, std::move(r), {}}; }
  static RegionMask explicit_pairs(std::vector<std::pair<int, int>> p) { return {MaskKind::pair_pairs, {}, std::move(p)}; }

  bool in_region(int i) const;
  bool is_pair_mask() const { return kind != MaskKind::seq_rows; }
};

// Sorted row indices for seq_rows masks.
std::vector<int> masked_rows(const RegionMask& mask, int length);
// L x L membership for pair masks.
BoolMat masked_pairs(const RegionMask& mask, int length);
// Number of masked entries (rows or ordered pairs).
int mask_size(const RegionMask& mask, int length);
// Index of the range containing i (for sign maps), or -1.
int range_index(const RegionMask& mask, int i);

struct Window {
  int begin = 0;  // [begin, end) over blocks
  int end = 0;
  bool contains(int block) const { return block >= begin && block < end; }
  bool empty() const { return end <= begin; }
  friend bool operator==(const Window&, const Window&) = default;
};

// Target entry i maps to donor entry i + (donor_anchor - target_anchor).
struct Alignment {
  int target_anchor = 0;
  int donor_anchor = 0;
  int offset() const { return donor_anchor - target_anchor; }
};

struct Patch {
  int block = 0;
  Track track = Track::s;
  RegionMask mask;
  Mat donor;  // donor's full track at `block`: L_d x d_s or (L_d*L_d) x d_z
  int donor_length = 0;
  Alignment align;
  std::string donor_ref;  // run-id reference used by the text form
};

struct AblatePath {
  Pathway path = Pathway::seq2pair;
  Window window;
};

struct FreezeSeq2Pair {
  Window window;
};

struct Steer {
  Window window;
  Track track = Track::s;
  RegionMask mask;
  Vec direction;              // unit norm
  double strength = 0.0;      // in sigma units
  double sigma = 0.0;         // > 0
  std::vector<double> signs;  // per range of the mask, default +1
};

enum class ScaleTarget { z_pre_decoder, s_pre_decoder };

struct Scale {
  ScaleTarget target = ScaleTarget::z_pre_decoder;
  double factor = 1.0;
};

using Directive = std::variant<Patch, AblatePath, FreezeSeq2Pair, Steer, Scale>;

struct InterventionPlan {
  std::vector<Directive> directives;

  bool empty() const { return directives.empty(); }
  InterventionPlan& add(Directive d) {
    directives.push_back(std::move(d));
    return *this;
  }
};

// Replaces masked entries with the aligned donor values. Throws when a
// masked target entry has no donor counterpart.
Mat apply_patch(const Mat& current, int length, const Patch& patch);
// Adds sign * strength * sigma * direction to every masked entry. The sign
// comes from the range holding i (or j when only j is in the region);
// explicit pairs use signs[0].
Mat apply_steer(const Mat& current, int length, const Steer& steer);
bool path_ablated(const InterventionPlan& plan, Pathway path, int block);
void scale_pre_decoder(Mat& s, Mat& z, const Scale& scale);

// Checks windows, blocks, regions, donor shapes and directions against
// the weights and sequence length; throws InterventionError.
void validate_plan(const InterventionPlan& plan, const TrunkDims& dims, int length);

// Executes a plan through the trunk hooks. Patches and steers fire on every
// recycling pass.
class PlanHooks : public TrunkHooks {
 public:
  PlanHooks(const InterventionPlan& plan, int length) : plan_(plan), length_(length) {}
  void post_sequence_update(int pass, int block, Mat& s) override;
  void post_pair_update(int pass, int block, Mat& z) override;
  bool ablated(Pathway path, int pass, int block) const override;
  void pre_decoder(Mat& s, Mat& z) override;

 private:
  void apply(Track track, int block, Mat& values) const;
  const InterventionPlan& plan_;
  int length_;
};

// validate_plan, then run_trunk with PlanHooks.
TrunkOutput run_with_plan(std::string_view sequence, const TrunkWeights& weights, const InterventionPlan& plan,
                          const RunOptions& options = {});

// Text form: one [directive] section per entry, key = value lines. Patch
// donors are written as run-id references and resolved on load.
using DonorResolver = std::function<std::pair<Mat, int>(const std::string& run_id, int block, Track track)>;
std::string plan_to_text(const InterventionPlan& plan);
InterventionPlan plan_from_text(std::string_view text, const DonorResolver& resolve);

}  // namespace trunkscope
