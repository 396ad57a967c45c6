// Representation analysis over captured traces: directions, linear probes,
// interpolation, contact separation and pathway statistics.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "trunkscope/numerics.hpp"
#include "trunkscope/trunk.hpp"

namespace trunkscope {

class ProbeError : public Error {
 public:
  using Error::Error;
};

struct Direction {
  Vec vector;          // unit norm
  double sigma = 0.0;  // population std of the projections it was fitted on
  int block = -1;
  std::string dataset;
};

// Unit vector along mean(pos) - mean(neg); sigma over all projections.
Direction diff_of_means(const Mat& pos, const Mat& neg);

// Population std of the rows of `samples` projected on `direction`.
double projection_sigma(const Mat& samples, const Vec& direction);

// +1 for K, R, H; -1 for D, E; 0 otherwise.
int charge_class(char amino_acid);

// Difference of means between positive and negative residue rows of s,
// pooled over proteins.
Direction charge_direction(const std::vector<Mat>& s_tracks, const std::vector<std::string>& sequences);

enum class ProbeTask { distance, identity, charge_pos, charge_neg };
std::string_view probe_task_name(ProbeTask t);
ProbeTask parse_probe_task(std::string_view name);

// weights is d x k (one column per output), bias has k entries.
struct ProbeModel {
  ProbeTask task = ProbeTask::distance;
  int block = -1;
  Mat weights;
  Vec bias;

  Mat scores(const Mat& x) const;
};

double r_squared(const Vec& predicted, const Vec& truth);

struct DistanceProbeFit {
  ProbeModel model;
  double r2_train = 0.0;
  double r2_test = 0.0;
  bool r2_defined = true;  // false when the targets are all equal
  int n_train = 0;
  int n_test = 0;
};

// Seeded 80/20 split, ridge on the training part, R^2 on both parts.
DistanceProbeFit fit_distance_probe(const Mat& x, const Vec& distances, double lambda, std::uint64_t seed);

// Rows z_ij with i < j and j - i >= min_separation, paired with CA
// distances.
std::pair<Mat, Vec> distance_samples(const Mat& z, int length, const Mat& ca_distances, int min_separation = 2);

// <z_p - z_t, z_d - z_t> / |z_d - z_t|^2
double interpolation_coefficient(const Mat& z_patched, const Mat& z_target, const Mat& z_donor);

// Mann-Whitney AUC with averaged ties.
double roc_auc(const Vec& scores, const IVec& labels);

// Head-averaged bias of the pairs i < j with j - i >= min_separation as
// scores, contacts as labels.
double bias_contact_auc(const BlockTrace& block, int length, const BoolMat& contacts, int min_separation = 1);

struct PathwayShares {
  int block = 0;
  double seq2pair = 0.0;
  double triangular = 0.0;
  double pair2seq = 0.0;
  double seq2pair_scaled = 0.0;  // min-max normalized over the series
  double pair2seq_scaled = 0.0;
};

std::vector<PathwayShares> pathway_contributions(const TraceRecord& trace);

struct RedirectionPoint {
  int block = 0;
  std::optional<double> donor_pct;  // absent when the set is empty or its baseline is zero
  std::optional<double> target_pct;
};

// Percent change in head-averaged attention over donor-only and
// target-only contacts.
std::vector<RedirectionPoint> attention_redirection(const TraceRecord& patched, const TraceRecord& baseline,
                                                    const BoolMat& donor_contacts, const BoolMat& target_contacts);

double selectivity(double probe_accuracy, double control_accuracy);

// Seeded bijection over the 20 standard residue types, indexed like
// amino_acid_index.
std::array<int, 20> control_permutation(std::uint64_t seed);

struct ClassifierEval {
  ProbeModel model;
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  int n_train = 0;
  int n_test = 0;
};

double balanced_accuracy(const IVec& predicted, const IVec& truth);

// Binary logistic probe on a seeded 80/20 split.
ClassifierEval fit_binary_probe(const Mat& x, const IVec& labels, std::uint64_t seed, const LogisticConfig& config = {});

// One-vs-rest logistic probe over class ids 0..n_classes-1.
ClassifierEval fit_multiclass_probe(const Mat& x, const IVec& labels, int n_classes, std::uint64_t seed,
                                    const LogisticConfig& config = {});

struct IdentityProbeResult {
  ClassifierEval probe;
  ClassifierEval control;
  double selectivity = 0.0;
};

// Residue identity from representation rows; the control task relabels
// residue types through control_permutation(control_seed).
IdentityProbeResult identity_probe(const Mat& x, const std::string& residues, std::uint64_t seed,
                                   std::uint64_t control_seed, const LogisticConfig& config = {});

// Rows z_ij with |i - j| >= min_separation labelled by the charge class
// of residue i (charge_pos: positive vs rest, charge_neg: negative vs rest).
std::pair<Mat, IVec> charge_samples(const Mat& z, const std::string& sequence, ProbeTask task, int min_separation = 4);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  int bins = 64;
  std::vector<std::string> names;
  std::vector<std::vector<int>> counts;  // one per series
};

// Bins over center +- 4 sigma; values outside land in the edge bins.
Histogram projection_histogram(const std::vector<std::pair<std::string, Vec>>& series, double center, double sigma,
                               int bins = 64);
std::string histogram_csv(const Histogram& h);

// TSP1 container for probes and directions.
std::string serialize_probe(const ProbeModel& model);
ProbeModel deserialize_probe(std::string_view bytes);
std::string serialize_direction(const Direction& direction);
Direction deserialize_direction(std::string_view bytes);

}  // namespace trunkscope
