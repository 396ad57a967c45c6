#include "trunkscope/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "trunkscope/io.hpp"
#include "trunkscope/rng.hpp"
#include "trunkscope/structio.hpp"

namespace trunkscope {

namespace {

constexpr std::string_view kProbeMagic = "TSP1";
constexpr std::uint32_t kProbeVersion = 1;
constexpr double kTrainFraction = 0.8;

struct Split {
  std::vector<int> train;
  std::vector<int> test;
};

Split seeded_split(int n, std::uint64_t seed) {
  if (n < 2) throw ProbeError("need at least 2 samples for a train/test split");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  const int n_train = std::clamp(static_cast<int>(std::lround(kTrainFraction * n)), 1, n - 1);
  Split split;
  split.train.assign(order.begin(), order.begin() + n_train);
  split.test.assign(order.begin() + n_train, order.end());
  return split;
}

Mat take_rows(const Mat& x, const std::vector<int>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = x.row(idx[r]);
  return out;
}

template <typename V>
V take(const V& v, const std::vector<int>& idx) {
  V out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t r = 0; r < idx.size(); ++r) out(static_cast<Eigen::Index>(r)) = v(idx[r]);
  return out;
}

IVec argmax_rows(const Mat& scores) {
  IVec out(scores.rows());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    Eigen::Index best = 0;
    scores.row(r).maxCoeff(&best);
    out(r) = static_cast<int>(best);
  }
  return out;
}

double accuracy(const IVec& predicted, const IVec& truth) {
  if (truth.size() == 0) return 0.0;
  return static_cast<double>((predicted.array() == truth.array()).count()) / static_cast<double>(truth.size());
}

double head_mean(const BlockTrace& b, int i, int j) {
  double total = 0.0;
  for (const Mat& a : b.attention) total += a(i, j);
  return total / static_cast<double>(b.attention.size());
}

std::optional<double> percent_change(const BlockTrace& patched, const BlockTrace& base, const BoolMat& set) {
  double sum_p = 0.0, sum_b = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < set.rows(); ++i)
    for (Eigen::Index j = 0; j < set.cols(); ++j) {
      if (!set(i, j)) continue;
      sum_p += head_mean(patched, static_cast<int>(i), static_cast<int>(j));
      sum_b += head_mean(base, static_cast<int>(i), static_cast<int>(j));
      ++n;
    }
  if (n == 0 || sum_b == 0.0) return std::nullopt;
  const double mean_p = sum_p / n, mean_b = sum_b / n;
  return 100.0 * (mean_p - mean_b) / mean_b;
}

void min_max(std::vector<PathwayShares>& rows, double PathwayShares::*src, double PathwayShares::*dst) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : rows) {
    lo = std::min(lo, r.*src);
    hi = std::max(hi, r.*src);
  }
  for (auto& r : rows) r.*dst = hi > lo ? (r.*src - lo) / (hi - lo) : 0.0;
}

double share(double part, double other) {
  const double total = part + other;
  return total > 0.0 ? part / total : 0.0;
}

std::string serialize_record(std::string_view tag, int block, std::string_view dataset, const Mat& payload,
                             const Vec& extra) {
  std::string out;
  out.append(kProbeMagic);
  put_le<std::uint32_t>(out, kProbeVersion);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(tag.size()));
  out.append(tag);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(static_cast<std::int32_t>(block)));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(dataset.size()));
  out.append(dataset);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(payload.rows()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(payload.cols()));
  for (Eigen::Index r = 0; r < payload.rows(); ++r)
    for (Eigen::Index c = 0; c < payload.cols(); ++c) put_f64(out, payload(r, c));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(extra.size()));
  for (Eigen::Index k = 0; k < extra.size(); ++k) put_f64(out, extra(k));
  return out;
}

struct Record {
  std::string tag;
  int block = -1;
  std::string dataset;
  Mat payload;
  Vec extra;
};

Record deserialize_record(std::string_view bytes) {
  ByteReader<ProbeError> in(bytes, "probe file");
  if (in.take(kProbeMagic.size(), "magic") != kProbeMagic) throw ProbeError("bad magic: not a TSP1 probe file");
  const auto version = in.le<std::uint32_t>("version");
  if (version != kProbeVersion) throw ProbeError("unsupported probe file version " + std::to_string(version));
  Record rec;
  rec.tag = std::string(in.take(in.le<std::uint16_t>("tag length"), "tag"));
  rec.block = static_cast<std::int32_t>(in.le<std::uint32_t>("block"));
  rec.dataset = std::string(in.take(in.le<std::uint16_t>("dataset length"), "dataset"));
  const auto rows = in.le<std::uint32_t>("rows");
  const auto cols = in.le<std::uint32_t>("cols");
  if (static_cast<std::uint64_t>(rows) * cols * 8 > in.remaining()) throw ProbeError("probe file truncated in payload");
  rec.payload.resize(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r)
    for (std::uint32_t c = 0; c < cols; ++c) rec.payload(r, c) = in.f64("payload");
  const auto n_extra = in.le<std::uint32_t>("extra count");
  if (static_cast<std::uint64_t>(n_extra) * 8 > in.remaining()) throw ProbeError("probe file truncated in extras");
  rec.extra.resize(n_extra);
  for (std::uint32_t k = 0; k < n_extra; ++k) rec.extra(k) = in.f64("extra");
  if (in.remaining() != 0) throw ProbeError(std::to_string(in.remaining()) + " trailing bytes in probe file");
  return rec;
}

}  // namespace

Direction diff_of_means(const Mat& pos, const Mat& neg) {
  if (pos.rows() == 0 || neg.rows() == 0) throw ProbeError("diff_of_means: both sample sets must be non-empty");
  if (pos.cols() != neg.cols()) throw ProbeError("diff_of_means: sample widths differ");
  const Vec diff = (pos.colwise().mean() - neg.colwise().mean()).transpose();
  const double norm = diff.norm();
  if (!(norm > 0.0)) throw ProbeError("diff_of_means: class means coincide");
  Direction out;
  out.vector = diff / norm;
  Mat all(pos.rows() + neg.rows(), pos.cols());
  all << pos, neg;
  out.sigma = projection_sigma(all, out.vector);
  return out;
}

double projection_sigma(const Mat& samples, const Vec& direction) {
  if (samples.rows() == 0) throw ProbeError("projection_sigma: no samples");
  const Vec p = samples * direction;
  return std::sqrt((p.array() - p.mean()).square().mean());
}

int charge_class(char amino_acid) {
  switch (amino_acid) {
    case 'K':
    case 'R':
    case 'H':
      return 1;
    case 'D':
    case 'E':
      return -1;
    default:
      return 0;
  }
}

Direction charge_direction(const std::vector<Mat>& s_tracks, const std::vector<std::string>& sequences) {
  if (s_tracks.size() != sequences.size()) throw ProbeError("charge_direction: tracks and sequences differ in count");
  std::vector<Eigen::RowVectorXd> pos, neg;
  for (std::size_t p = 0; p < s_tracks.size(); ++p) {
    if (s_tracks[p].rows() != static_cast<Eigen::Index>(sequences[p].size())) {
      throw ProbeError("charge_direction: track " + std::to_string(p) + " does not match its sequence length");
    }
    for (std::size_t i = 0; i < sequences[p].size(); ++i) {
      const int c = charge_class(sequences[p][i]);
      if (c > 0) pos.push_back(s_tracks[p].row(static_cast<Eigen::Index>(i)));
      if (c < 0) neg.push_back(s_tracks[p].row(static_cast<Eigen::Index>(i)));
    }
  }
  auto stack = [](const std::vector<Eigen::RowVectorXd>& rows, Eigen::Index width) {
    Mat m(static_cast<Eigen::Index>(rows.size()), width);
    for (std::size_t r = 0; r < rows.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = rows[r];
    return m;
  };
  const Eigen::Index width = s_tracks.empty() ? 0 : s_tracks.front().cols();
  return diff_of_means(stack(pos, width), stack(neg, width));
}

std::string_view probe_task_name(ProbeTask t) {
  switch (t) {
    case ProbeTask::distance:
      return "distance";
    case ProbeTask::identity:
      return "identity";
    case ProbeTask::charge_pos:
      return "charge_pos";
    case ProbeTask::charge_neg:
      return "charge_neg";
  }
  return "?";
}

ProbeTask parse_probe_task(std::string_view name) {
  for (ProbeTask t : {ProbeTask::distance, ProbeTask::identity, ProbeTask::charge_pos, ProbeTask::charge_neg}) {
    if (probe_task_name(t) == name) return t;
  }
  throw ProbeError("unknown probe task '" + std::string(name) + "'");
}

Mat ProbeModel::scores(const Mat& x) const {
  if (x.cols() != weights.rows()) throw ProbeError("probe expects width " + std::to_string(weights.rows()));
  return (x * weights).rowwise() + bias.transpose();
}

double r_squared(const Vec& predicted, const Vec& truth) {
  const double ss_tot = (truth.array() - truth.mean()).square().sum();
  if (!(ss_tot > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return 1.0 - (predicted - truth).squaredNorm() / ss_tot;
}

DistanceProbeFit fit_distance_probe(const Mat& x, const Vec& distances, double lambda, std::uint64_t seed) {
  if (x.rows() != distances.size()) throw ProbeError("fit_distance_probe: sample and target counts differ");
  if (x.rows() < x.cols() + 1) {
    throw ProbeError("fit_distance_probe: need at least " + std::to_string(x.cols() + 1) + " samples, got " +
                     std::to_string(x.rows()));
  }
  const Split split = seeded_split(static_cast<int>(x.rows()), seed);
  const Mat x_train = take_rows(x, split.train), x_test = take_rows(x, split.test);
  const Vec y_train = take(distances, split.train), y_test = take(distances, split.test);
  const LinearModel lm = ridge_fit(x_train, y_train, {.lambda = lambda, .fit_intercept = true});

  DistanceProbeFit fit;
  fit.model.task = ProbeTask::distance;
  fit.model.weights = lm.w;
  fit.model.bias = Vec::Constant(1, lm.b);
  fit.n_train = static_cast<int>(split.train.size());
  fit.n_test = static_cast<int>(split.test.size());
  fit.r2_defined = distances.maxCoeff() > distances.minCoeff();
  fit.r2_train = r_squared(lm.predict(x_train), y_train);
  fit.r2_test = r_squared(lm.predict(x_test), y_test);
  if (std::isnan(fit.r2_test) || std::isnan(fit.r2_train)) fit.r2_defined = false;
  return fit;
}

std::pair<Mat, Vec> distance_samples(const Mat& z, int length, const Mat& ca_distances, int min_separation) {
  if (z.rows() != static_cast<Eigen::Index>(length) * length) throw ProbeError("distance_samples: z is not L*L rows");
  if (ca_distances.rows() != length || ca_distances.cols() != length) {
    throw ProbeError("distance_samples: distance map is not L x L");
  }
  int n = 0;
  for (int i = 0; i < length; ++i)
    for (int j = i + min_separation; j < length; ++j) ++n;
  Mat x(n, z.cols());
  Vec y(n);
  int r = 0;
  for (int i = 0; i < length; ++i)
    for (int j = i + min_separation; j < length; ++j, ++r) {
      x.row(r) = z.row(pair_row(length, i, j));
      y(r) = ca_distances(i, j);
    }
  return {std::move(x), std::move(y)};
}

double interpolation_coefficient(const Mat& z_patched, const Mat& z_target, const Mat& z_donor) {
  if (z_patched.rows() != z_target.rows() || z_patched.cols() != z_target.cols() ||
      z_donor.rows() != z_target.rows() || z_donor.cols() != z_target.cols()) {
    throw ProbeError("interpolation_coefficient: shapes differ");
  }
  const Mat delta = z_donor - z_target;
  const double denom = delta.squaredNorm();
  if (!(denom > 0.0)) throw ProbeError("interpolation_coefficient: donor equals target");
  return (z_patched - z_target).cwiseProduct(delta).sum() / denom;
}

double roc_auc(const Vec& scores, const IVec& labels) {
  const Eigen::Index n = scores.size();
  if (labels.size() != n) throw ProbeError("roc_auc: scores and labels differ in length");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scores(a) < scores(b); });
  double rank_sum = 0.0;
  double n_pos = 0.0;
  for (Eigen::Index start = 0; start < n;) {
    Eigen::Index stop = start;
    while (stop < n && scores(order[static_cast<std::size_t>(stop)]) == scores(order[static_cast<std::size_t>(start)])) ++stop;
    const double avg_rank = 0.5 * static_cast<double>(start + 1 + stop);
    for (Eigen::Index k = start; k < stop; ++k) {
      const int lab = labels(order[static_cast<std::size_t>(k)]);
      if (lab != 0 && lab != 1) throw ProbeError("roc_auc: labels must be 0 or 1");
      if (lab == 1) {
        rank_sum += avg_rank;
        n_pos += 1.0;
      }
    }
    start = stop;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw ProbeError("roc_auc: both classes must be present");
  const double u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
  return u / (n_pos * n_neg);
}

double bias_contact_auc(const BlockTrace& block, int length, const BoolMat& contacts, int min_separation) {
  if (!block.has_tensors) throw ProbeError("bias_contact_auc: block " + std::to_string(block.block) + " has no tensors");
  std::vector<double> s;
  std::vector<int> l;
  for (int i = 0; i < length; ++i)
    for (int j = i + min_separation; j < length; ++j) {
      s.push_back(block.bias.row(pair_row(length, i, j)).mean());
      l.push_back(contacts(i, j) ? 1 : 0);
    }
  return roc_auc(Eigen::Map<const Vec>(s.data(), static_cast<Eigen::Index>(s.size())),
                 Eigen::Map<const IVec>(l.data(), static_cast<Eigen::Index>(l.size())));
}

std::vector<PathwayShares> pathway_contributions(const TraceRecord& trace) {
  if (trace.blocks.empty()) throw ProbeError("pathway_contributions: trace has no captured blocks");
  std::vector<PathwayShares> rows;
  for (const auto& b : trace.blocks) {
    PathwayShares r;
    r.block = b.block;
    r.seq2pair = share(b.seq2pair_norm, b.triangular_norm);
    r.triangular = 1.0 - r.seq2pair;
    r.pair2seq = share(b.bias_norm, b.content_norm);
    rows.push_back(r);
  }
  min_max(rows, &PathwayShares::seq2pair, &PathwayShares::seq2pair_scaled);
  min_max(rows, &PathwayShares::pair2seq, &PathwayShares::pair2seq_scaled);
  return rows;
}

std::vector<RedirectionPoint> attention_redirection(const TraceRecord& patched, const TraceRecord& baseline,
                                                    const BoolMat& donor_contacts, const BoolMat& target_contacts) {
  if (patched.blocks.size() != baseline.blocks.size() || patched.length != baseline.length) {
    throw ProbeError("attention_redirection: traces cover different blocks or lengths");
  }
  const int L = baseline.length;
  if (donor_contacts.rows() != L || donor_contacts.cols() != L || target_contacts.rows() != L ||
      target_contacts.cols() != L) {
    throw ProbeError("attention_redirection: contact maps must be L x L");
  }
  const BoolMat donor_only = donor_contacts.array() && !target_contacts.array();
  const BoolMat target_only = target_contacts.array() && !donor_contacts.array();
  std::vector<RedirectionPoint> out;
  for (std::size_t k = 0; k < baseline.blocks.size(); ++k) {
    const BlockTrace& p = patched.blocks[k];
    const BlockTrace& b = baseline.blocks[k];
    if (p.block != b.block) throw ProbeError("attention_redirection: block order differs");
    if (!p.has_tensors || !b.has_tensors) {
      throw ProbeError("attention_redirection: block " + std::to_string(b.block) + " has no attention tensors");
    }
    out.push_back({b.block, percent_change(p, b, donor_only), percent_change(p, b, target_only)});
  }
  return out;
}

double selectivity(double probe_accuracy, double control_accuracy) {
  for (double a : {probe_accuracy, control_accuracy}) {
    if (!(a >= 0.0 && a <= 1.0)) throw ProbeError("selectivity: accuracies must lie in [0, 1]");
  }
  return probe_accuracy - control_accuracy;
}

std::array<int, 20> control_permutation(std::uint64_t seed) {
  std::vector<int> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(perm);
  std::array<int, 20> out{};
  std::copy(perm.begin(), perm.end(), out.begin());
  return out;
}

double balanced_accuracy(const IVec& predicted, const IVec& truth) {
  if (predicted.size() != truth.size()) throw ProbeError("balanced_accuracy: length mismatch");
  if (truth.size() == 0) return 0.0;
  const int n_classes = truth.maxCoeff() + 1;
  std::vector<int> hits(static_cast<std::size_t>(n_classes)), totals(static_cast<std::size_t>(n_classes));
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    ++totals[static_cast<std::size_t>(truth(i))];
    if (predicted(i) == truth(i)) ++hits[static_cast<std::size_t>(truth(i))];
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    if (totals[static_cast<std::size_t>(c)] == 0) continue;
    sum += static_cast<double>(hits[static_cast<std::size_t>(c)]) / totals[static_cast<std::size_t>(c)];
    ++present;
  }
  return sum / present;
}

ClassifierEval fit_binary_probe(const Mat& x, const IVec& labels, std::uint64_t seed, const LogisticConfig& config) {
  if (x.rows() != labels.size()) throw ProbeError("fit_binary_probe: sample and label counts differ");
  const Split split = seeded_split(static_cast<int>(x.rows()), seed);
  const IVec y_train = take(labels, split.train);
  if (y_train.minCoeff() == y_train.maxCoeff()) throw ProbeError("fit_binary_probe: training split has one class");
  const LogisticFit lf = logistic_fit(take_rows(x, split.train), y_train, config);
  ClassifierEval eval;
  eval.model.weights = lf.model.w;
  eval.model.bias = Vec::Constant(1, lf.model.b);
  eval.n_train = static_cast<int>(split.train.size());
  eval.n_test = static_cast<int>(split.test.size());
  const Vec logits = eval.model.scores(take_rows(x, split.test)).col(0);
  const IVec predicted = (logits.array() >= 0.0).cast<int>();
  const IVec truth = take(labels, split.test);
  eval.accuracy = accuracy(predicted, truth);
  eval.balanced_accuracy = balanced_accuracy(predicted, truth);
  return eval;
}

ClassifierEval fit_multiclass_probe(const Mat& x, const IVec& labels, int n_classes, std::uint64_t seed,
                                    const LogisticConfig& config) {
  if (x.rows() != labels.size()) throw ProbeError("fit_multiclass_probe: sample and label counts differ");
  if (labels.size() > 0 && (labels.minCoeff() < 0 || labels.maxCoeff() >= n_classes)) {
    throw ProbeError("fit_multiclass_probe: label outside [0, " + std::to_string(n_classes) + ")");
  }
  const Split split = seeded_split(static_cast<int>(x.rows()), seed);
  const Mat x_train = take_rows(x, split.train);
  const IVec y_train = take(labels, split.train);
  if (y_train.minCoeff() == y_train.maxCoeff()) throw ProbeError("fit_multiclass_probe: training split has one class");

  ClassifierEval eval;
  eval.model.weights = Mat::Zero(x.cols(), n_classes);
  eval.model.bias = Vec::Constant(n_classes, -std::numeric_limits<double>::infinity());
  for (int c = 0; c < n_classes; ++c) {
    const IVec binary = (y_train.array() == c).cast<int>();
    if (binary.sum() == 0) continue;
    const LogisticFit lf = logistic_fit(x_train, binary, config);
    eval.model.weights.col(c) = lf.model.w;
    eval.model.bias(c) = lf.model.b;
  }
  eval.n_train = static_cast<int>(split.train.size());
  eval.n_test = static_cast<int>(split.test.size());
  const IVec predicted = argmax_rows(eval.model.scores(take_rows(x, split.test)));
  const IVec truth = take(labels, split.test);
  eval.accuracy = accuracy(predicted, truth);
  eval.balanced_accuracy = balanced_accuracy(predicted, truth);
  return eval;
}

IdentityProbeResult identity_probe(const Mat& x, const std::string& residues, std::uint64_t seed,
                                   std::uint64_t control_seed, const LogisticConfig& config) {
  if (x.rows() != static_cast<Eigen::Index>(residues.size())) throw ProbeError("identity_probe: rows and residues differ");
  const auto perm = control_permutation(control_seed);
  IVec labels(x.rows()), control(x.rows());
  for (std::size_t i = 0; i < residues.size(); ++i) {
    const int idx = amino_acid_index(residues[i]);
    if (idx < 0) throw ProbeError(std::string("identity_probe: non-standard residue '") + residues[i] + "'");
    labels(static_cast<Eigen::Index>(i)) = idx;
    control(static_cast<Eigen::Index>(i)) = perm[static_cast<std::size_t>(idx)];
  }
  IdentityProbeResult out;
  out.probe = fit_multiclass_probe(x, labels, 20, seed, config);
  out.probe.model.task = ProbeTask::identity;
  out.control = fit_multiclass_probe(x, control, 20, seed, config);
  out.control.model.task = ProbeTask::identity;
  out.selectivity = selectivity(out.probe.accuracy, out.control.accuracy);
  return out;
}

std::pair<Mat, IVec> charge_samples(const Mat& z, const std::string& sequence, ProbeTask task, int min_separation) {
  if (task != ProbeTask::charge_pos && task != ProbeTask::charge_neg) {
    throw ProbeError("charge_samples: task must be charge_pos or charge_neg");
  }
  const int L = static_cast<int>(sequence.size());
  if (z.rows() != static_cast<Eigen::Index>(L) * L) throw ProbeError("charge_samples: z is not L*L rows");
  const int want = task == ProbeTask::charge_pos ? 1 : -1;
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j)
      if (std::abs(i - j) >= min_separation) pairs.emplace_back(i, j);
  Mat x(static_cast<Eigen::Index>(pairs.size()), z.cols());
  IVec y(static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t r = 0; r < pairs.size(); ++r) {
    const auto [i, j] = pairs[r];
    x.row(static_cast<Eigen::Index>(r)) = z.row(pair_row(L, i, j));
    y(static_cast<Eigen::Index>(r)) = charge_class(sequence[static_cast<std::size_t>(i)]) == want ? 1 : 0;
  }
  return {std::move(x), std::move(y)};
}

Histogram projection_histogram(const std::vector<std::pair<std::string, Vec>>& series, double center, double sigma,
                               int bins) {
  if (!(sigma > 0.0)) throw ProbeError("projection_histogram: sigma must be > 0");
  if (bins < 1) throw ProbeError("projection_histogram: need at least one bin");
  Histogram h;
  h.lo = center - 4.0 * sigma;
  h.hi = center + 4.0 * sigma;
  h.bins = bins;
  const double width = (h.hi - h.lo) / bins;
  for (const auto& [name, values] : series) {
    h.names.push_back(name);
    std::vector<int> counts(static_cast<std::size_t>(bins), 0);
    for (Eigen::Index k = 0; k < values.size(); ++k) {
      const int b = static_cast<int>(std::clamp(std::floor((values(k) - h.lo) / width), 0.0, bins - 1.0));
      ++counts[static_cast<std::size_t>(b)];
    }
    h.counts.push_back(std::move(counts));
  }
  return h;
}

std::string histogram_csv(const Histogram& h) {
  std::string out = "bin,lo,hi";
  for (const auto& n : h.names) out += "," + n;
  out += '\n';
  const double width = (h.hi - h.lo) / h.bins;
  char buf[64];
  for (int b = 0; b < h.bins; ++b) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g", b, h.lo + b * width, h.lo + (b + 1) * width);
    out += buf;
    for (const auto& c : h.counts) out += "," + std::to_string(c[static_cast<std::size_t>(b)]);
    out += '\n';
  }
  return out;
}

std::string serialize_probe(const ProbeModel& model) {
  if (model.bias.size() != model.weights.cols()) throw ProbeError("serialize_probe: bias and weight columns differ");
  return serialize_record(probe_task_name(model.task), model.block, "", model.weights, model.bias);
}

ProbeModel deserialize_probe(std::string_view bytes) {
  Record rec = deserialize_record(bytes);
  if (rec.tag == "direction") throw ProbeError("file holds a direction, not a probe");
  ProbeModel m;
  m.task = parse_probe_task(rec.tag);
  m.block = rec.block;
  m.weights = std::move(rec.payload);
  m.bias = std::move(rec.extra);
  if (m.bias.size() != m.weights.cols()) throw ProbeError("probe file: bias and weight columns differ");
  return m;
}

std::string serialize_direction(const Direction& direction) {
  return serialize_record("direction", direction.block, direction.dataset, direction.vector,
                          Vec::Constant(1, direction.sigma));
}

Direction deserialize_direction(std::string_view bytes) {
  Record rec = deserialize_record(bytes);
  if (rec.tag != "direction") throw ProbeError("file holds a '" + rec.tag + "' probe, not a direction");
  if (rec.payload.cols() != 1 || rec.extra.size() != 1) throw ProbeError("direction file: malformed payload");
  Direction d;
  d.vector = rec.payload.col(0);
  d.sigma = rec.extra(0);
  d.block = rec.block;
  d.dataset = std::move(rec.dataset);
  return d;
}

}  // namespace trunkscope
