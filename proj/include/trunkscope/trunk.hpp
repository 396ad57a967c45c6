// Miniature two-track folding trunk: embedding, K blocks of
// sequence/pair updates, recycling and a distance-geometry decoder.
//
// The pair track z is stored as an (L*L) x d_z row-major matrix; entry
// (i, j) lives in row i*L + j.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "trunkscope/numerics.hpp"
#include "trunkscope/structio.hpp"

namespace trunkscope {

class TrunkError : public Error {
 public:
  using Error::Error;
};

struct TrunkDims {
  int K = 12;
  int H = 4;
  int d_s = 64;
  int d_z = 32;
  int d = 32;
  int d_h = 16;
  int clip = 32;

  friend bool operator==(const TrunkDims&, const TrunkDims&) = default;
};

inline constexpr int kDefaultMaxLength = 128;

inline Eigen::Index pair_row(int length, int i, int j) {
  return static_cast<Eigen::Index>(i) * length + j;
}

struct BlockWeights {
  // Attention over s with pair bias.
  Mat attn_q, attn_k, attn_v;  // (H*d_h) x d_s
  Mat attn_o;                  // d_s x (H*d_h)
  Mat pair_bias;               // H x d_z  (W_beta)
  // Sequence MLP, hidden 2*d_s.
  Mat seq_mlp_w1, seq_mlp_b1, seq_mlp_w2, seq_mlp_b2;
  // seq2pair.
  Mat s2p_u, s2p_v;  // d x d_s
  Mat s2p_z;         // d_z x 2d
  // Outgoing triangular multiplicative update, hidden width d_z.
  Mat tri_a, tri_a_gate, tri_b, tri_b_gate;  // d_z x d_z
  Mat tri_out;                               // d_z x d_z
  Mat tri_gate;                              // d_z x d_z
  // Pair MLP, hidden 2*d_z.
  Mat pair_mlp_w1, pair_mlp_b1, pair_mlp_w2, pair_mlp_b2;
};

struct TrunkWeights {
  TrunkDims dims;
  Mat embedding;  // 20 x d_s
  Mat relpos;     // (2*clip+1) x d_z
  Mat decoder_w;  // 1 x d_z
  Mat decoder_b;  // 1 x 1
  std::vector<BlockWeights> blocks;
};

// Scaled Gaussian init (std 1/sqrt(fan_in)); tables are unit Gaussian,
// biases zero, decoder bias 1.5.
TrunkWeights random_weights(const TrunkDims& dims, std::uint64_t seed);

// Random weights rearranged into two stages: seq2pair (W_u, W_v) only in
// blocks [0, seq2pair_end) with gain 3, pair bias (W_beta) only in blocks
// [pair2seq_begin, K) with gain 8.
struct StagedLayout {
  int seq2pair_end = 4;
  int pair2seq_begin = 8;
};
TrunkWeights staged_weights(const TrunkDims& dims, std::uint64_t seed, StagedLayout layout = {});

// Every residual-branch matrix zeroed; embedding and decoder kept.
TrunkWeights with_zero_branches(TrunkWeights weights);

// Each tensor with its name and expected shape, in file order.
struct TensorSlot {
  std::string name;
  Mat* value;
  int rows;
  int cols;
};
std::vector<TensorSlot> tensor_slots(TrunkWeights& weights);
std::vector<std::string> tensor_names(const TrunkDims& dims);
// Throws TrunkError naming the first tensor whose shape disagrees with dims.
void validate_weights(const TrunkWeights& weights);

// --- Weight files ("TSW1") -------------------------------------------------

class WeightsFormatError : public TrunkError {
 public:
  using TrunkError::TrunkError;
};
class WeightsTruncatedError : public TrunkError {
 public:
  using TrunkError::TrunkError;
};
class WeightsShapeError : public TrunkError {
 public:
  WeightsShapeError(std::string tensor, const std::string& what)
      : TrunkError("tensor '" + tensor + "': " + what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

inline constexpr std::uint32_t kWeightsVersion = 1;

std::string serialize_weights(const TrunkWeights& weights);
TrunkWeights deserialize_weights(std::string_view bytes);
void save_weights(const TrunkWeights& weights, const std::filesystem::path& path);
TrunkWeights load_weights(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes);
// FNV-1a 64 of the serialized file.
std::uint64_t weights_digest(const TrunkWeights& weights);

// --- Forward pass ----------------------------------------------------------

struct Reps {
  Mat s;  // L x d_s
  Mat z;  // (L*L) x d_z
};

Reps init_reps(std::string_view sequence, const TrunkWeights& weights, int max_length = kDefaultMaxLength);

struct SequenceUpdate {
  Mat s;                       // s after attention and MLP residuals
  Mat bias;                    // (L*L) x H, beta_ijh as added to the logits
  std::vector<Mat> attention;  // H matrices L x L, rows sum to one
  double bias_norm = 0.0;      // |beta|
  double content_norm = 0.0;   // |q.k / sqrt(d_h)| over all heads
};

// Pre-LN multi-head attention with additive pair bias, then the MLP.
SequenceUpdate sequence_update(const Mat& s, const Mat& z, const BlockWeights& bw, const TrunkDims& dims,
                               bool ablate_pair2seq = false);

// W_z phi_ij with phi_ij = [u_i * v_j ; u_i - v_j], u = LN(s) W_u^T.
Mat seq2pair_increment(const Mat& s, const BlockWeights& bw, const TrunkDims& dims);
Mat triangular_increment(const Mat& z, const BlockWeights& bw, const TrunkDims& dims);
Mat pair_mlp_increment(const Mat& z, const BlockWeights& bw);

struct PairUpdate {
  Mat z;
  double seq2pair_norm = 0.0;
  double triangular_norm = 0.0;
};
PairUpdate pair_update(const Mat& s, const Mat& z, const BlockWeights& bw, const TrunkDims& dims,
                       bool ablate_seq2pair = false, bool ablate_triangular = false);

enum class Pathway { seq2pair, pair2seq, triangular };
std::string_view pathway_name(Pathway p);
Pathway parse_pathway(std::string_view name);

// Intervention points. Every callback may modify the values in place.
class TrunkHooks {
 public:
  virtual ~TrunkHooks() = default;
  virtual void pre_block(int /*pass*/, int /*block*/, Mat& /*s*/, Mat& /*z*/) {}
  virtual void post_sequence_update(int /*pass*/, int /*block*/, Mat& /*s*/) {}
  virtual void post_pair_update(int /*pass*/, int /*block*/, Mat& /*z*/) {}
  virtual bool ablated(Pathway /*path*/, int /*pass*/, int /*block*/) const { return false; }
  virtual void pre_decoder(Mat& /*s*/, Mat& /*z*/) {}
};

struct CapturePlan {
  std::set<int> blocks;
  // false: record only the pathway norms.
  bool tensors = true;

  static CapturePlan none() { return {}; }
  static CapturePlan all(int K, bool tensors = true);
  bool wants(int block) const { return blocks.count(block) > 0; }
};

struct BlockTrace {
  int block = 0;
  Mat s;                       // after the sequence update (post hooks)
  Mat z;                       // after the pair update (post hooks)
  Mat bias;                    // (L*L) x H
  std::vector<Mat> attention;  // H x (L x L)
  double bias_norm = 0.0;
  double content_norm = 0.0;
  double seq2pair_norm = 0.0;
  double triangular_norm = 0.0;
  bool has_tensors = false;
};

// Captured blocks of the final recycling pass, in block order.
struct TraceRecord {
  int length = 0;
  std::vector<BlockTrace> blocks;

  const BlockTrace* find(int block) const;
  const BlockTrace& at(int block) const;
};

struct RunOptions {
  int recycles = 0;  // 0..3
  CapturePlan capture;
  int max_length = kDefaultMaxLength;
};

struct TrunkOutput {
  Mat s;
  Mat z;
  TraceRecord trace;
  int passes = 0;
};

// Passes after the first start from s0 + LN(s_prev), z0 + LN(z_prev).
// pre_decoder fires once on the final (s, z).
TrunkOutput run_trunk(std::string_view sequence, const TrunkWeights& weights, TrunkHooks* hooks = nullptr,
                      const RunOptions& options = {});

// One file per captured block and tensor, first line "shape,<dims...>".
void export_trace(const TraceRecord& trace, const std::filesystem::path& dir);

// --- Decoder ---------------------------------------------------------------

enum class Readout { softplus, identity };

struct Embedding {
  Coords coords;
  bool degenerate = false;
};

// Classical MDS: double-centred Gram of squared distances, top three
// eigenpairs with negative eigenvalues clamped to zero.
Embedding embed_distances(const Mat& distances);

// Mean CA virtual torsion over consecutive quadruples; mirrored when negative.
double mean_virtual_torsion(const Coords& ca);

Mat readout_distances(const Mat& z, int length, const TrunkWeights& weights, Readout readout = Readout::softplus);

struct DecodedStructure {
  Structure structure;
  Mat distances;
  bool degenerate = false;
};

// Distance readout from (z_ij + z_ji)/2, MDS, chirality convention, then
// N/C/O placed in the local tangent frame. Sequence letters label residues.
DecodedStructure decode_structure(const Mat& s, const Mat& z, const TrunkWeights& weights,
                                  std::string_view sequence, Readout readout = Readout::softplus);

double mean_pairwise_ca_distance(const Structure& s);

}  // namespace trunkscope
