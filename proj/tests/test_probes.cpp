#include <cmath>
#include <set>
#include <string>

#include "doctest.h"
#include "trunkscope/interventions.hpp"
#include "trunkscope/probes.hpp"
#include "trunkscope/rng.hpp"
#include "trunkscope/structio.hpp"

using namespace trunkscope;

namespace {

const TrunkDims kSmall{.K = 4, .H = 2, .d_s = 8, .d_z = 6, .d = 4, .d_h = 4, .clip = 5};

Mat gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

Vec gaussian_vec(Rng& rng, int n) {
  Vec v(n);
  for (int k = 0; k < n; ++k) v(k) = rng.normal();
  return v;
}

// Pair counting over all positive/negative pairs, ties worth one half.
double auc_by_pairs(const Vec& s, const IVec& y) {
  double wins = 0.0, total = 0.0;
  for (Eigen::Index a = 0; a < s.size(); ++a)
    for (Eigen::Index b = 0; b < s.size(); ++b) {
      if (y(a) != 1 || y(b) != 0) continue;
      total += 1.0;
      if (s(a) > s(b)) wins += 1.0;
      else if (s(a) == s(b)) wins += 0.5;
    }
  return wins / total;
}

BlockTrace fake_block(Rng& rng, int block, int L, int H) {
  BlockTrace b;
  b.block = block;
  b.has_tensors = true;
  for (int h = 0; h < H; ++h) b.attention.push_back(gaussian(rng, L, L).cwiseAbs());
  return b;
}

}  // namespace

TEST_CASE("diff_of_means on two points") {
  Mat pos(1, 2), neg(1, 2);
  pos << 1, 0;
  neg << -1, 0;
  const Direction d = diff_of_means(pos, neg);
  CHECK(d.vector(0) == 1.0);
  CHECK(d.vector(1) == 0.0);
  CHECK(d.sigma == 1.0);
  const Direction swapped = diff_of_means(neg, pos);
  CHECK(swapped.vector == -d.vector);
  CHECK(swapped.sigma == d.sigma);
  CHECK_THROWS_AS(diff_of_means(pos, pos), ProbeError);
  CHECK_THROWS_AS(diff_of_means(Mat(0, 2), neg), ProbeError);
}

TEST_CASE("diff_of_means is antisymmetric on random clouds") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat a = gaussian(rng, 30, 5), b = gaussian(rng, 40, 5);
    const Direction ab = diff_of_means(a, b), ba = diff_of_means(b, a);
    CHECK((ab.vector + ba.vector).cwiseAbs().maxCoeff() == 0.0);
    CHECK(std::abs(ab.vector.norm() - 1.0) < 1e-9);
    CHECK(std::abs(ab.sigma - ba.sigma) < 1e-12);
  }
}

TEST_CASE("diff_of_means recovers a planted axis at 5 sigma separation") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    const int d = 32, n = 500;
    const Vec u = gaussian_vec(rng, d).normalized();
    Mat pos = gaussian(rng, n, d), neg = gaussian(rng, n, d);
    pos.rowwise() += (2.5 * u).transpose();
    neg.rowwise() -= (2.5 * u).transpose();
    const Direction dir = diff_of_means(pos, neg);
    CHECK(dir.vector.dot(u) >= 0.99);
  }
}

TEST_CASE("charge_class and charge_direction") {
  CHECK(charge_class('K') == 1);
  CHECK(charge_class('R') == 1);
  CHECK(charge_class('H') == 1);
  CHECK(charge_class('D') == -1);
  CHECK(charge_class('E') == -1);
  CHECK(charge_class('A') == 0);
  Rng rng(2);
  const std::vector<std::string> seqs{"KAEDR", "GHHEL"};
  std::vector<Mat> tracks{gaussian(rng, 5, 3), gaussian(rng, 5, 3)};
  Mat pos(4, 3), neg(3, 3);
  pos << tracks[0].row(0), tracks[0].row(4), tracks[1].row(1), tracks[1].row(2);
  neg << tracks[0].row(2), tracks[0].row(3), tracks[1].row(3);
  const Direction a = charge_direction(tracks, seqs);
  const Direction b = diff_of_means(pos, neg);
  CHECK((a.vector - b.vector).norm() < 1e-15);
  CHECK(a.sigma == doctest::Approx(b.sigma).epsilon(1e-15));
  CHECK_THROWS_AS(charge_direction(tracks, {"KAEDR"}), ProbeError);
}

TEST_CASE("distance probe recovers a noiseless planted map") {
  Rng rng(3);
  const int d = 32, n = 600;
  const Mat x = gaussian(rng, n, d);
  const Vec w = gaussian_vec(rng, d);
  const Vec y = (x * w).array() + 7.0;
  const DistanceProbeFit fit = fit_distance_probe(x, y, 1e-6, 11);
  CHECK(fit.r2_defined);
  CHECK(fit.r2_test >= 0.999);
  CHECK(fit.n_train == 480);
  CHECK(fit.n_test == 120);
  CHECK((fit.model.weights.col(0) - w).cwiseAbs().maxCoeff() < 1e-4);
  CHECK(std::abs(fit.model.bias(0) - 7.0) < 1e-4);
}

TEST_CASE("distance probe on shuffled targets sits at chance") {
  Rng rng(4);
  const int d = 8, n = 2000;
  const Mat x = gaussian(rng, n, d);
  Vec y = (x * gaussian_vec(rng, d)).eval();
  std::vector<double> v(y.data(), y.data() + n);
  rng.shuffle(v);
  y = Eigen::Map<Vec>(v.data(), n);
  const DistanceProbeFit fit = fit_distance_probe(x, y, 1e-3, 5);
  CHECK(std::abs(fit.r2_test) < 0.1);
}

TEST_CASE("distance probe R^2 tracks the analytic noise ceiling") {
  const int d = 32, n = 3000;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(200 + seed);
    const Mat x = gaussian(rng, n, d);
    const Vec w = gaussian_vec(rng, d);
    const double sigma_n = 0.5 * w.norm();
    Vec y = x * w;
    for (int i = 0; i < n; ++i) y(i) += sigma_n * rng.normal();
    // var(d) = |w|^2 + sigma_n^2 for standard normal features.
    const double ceiling = 1.0 - sigma_n * sigma_n / (w.squaredNorm() + sigma_n * sigma_n);
    const DistanceProbeFit fit = fit_distance_probe(x, y, 1e-3, seed);
    CHECK(std::abs(fit.r2_test - ceiling) < 0.05);
  }
}

TEST_CASE("distance probe: training R^2 is at least held-out R^2 at lambda 0") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(300 + seed);
    const int d = 24, n = 60;
    const Mat x = gaussian(rng, n, d);
    Vec y = x * gaussian_vec(rng, d);
    for (int i = 0; i < n; ++i) y(i) += 5.0 * rng.normal();
    const DistanceProbeFit fit = fit_distance_probe(x, y, 0.0, seed);
    CHECK(fit.r2_train >= fit.r2_test);
  }
}

TEST_CASE("distance probe errors and degenerate targets") {
  Rng rng(5);
  CHECK_THROWS_AS(fit_distance_probe(gaussian(rng, 8, 8), Vec::Ones(8), 1e-3, 1), ProbeError);
  const DistanceProbeFit flat = fit_distance_probe(gaussian(rng, 50, 4), Vec::Constant(50, 3.8), 1e-3, 1);
  CHECK_FALSE(flat.r2_defined);
  CHECK(std::isnan(r_squared(Vec::Ones(3), Vec::Constant(3, 2.0))));
}

TEST_CASE("distance_samples keeps i < j with separation at least 2") {
  Rng rng(6);
  const int L = 7;
  const Mat z = gaussian(rng, L * L, 3);
  const Mat dist = gaussian(rng, L, L);
  const auto [x, y] = distance_samples(z, L, dist);
  CHECK(x.rows() == 15);  // (L-2)(L-1)/2
  int r = 0;
  for (int i = 0; i < L; ++i)
    for (int j = i + 2; j < L; ++j, ++r) {
      CHECK(x.row(r) == z.row(pair_row(L, i, j)));
      CHECK(y(r) == dist(i, j));
    }
}

TEST_CASE("interpolation coefficient definitions") {
  Rng rng(7);
  const Mat zt = gaussian(rng, 16, 4), zd = gaussian(rng, 16, 4);
  CHECK(interpolation_coefficient(zt, zt, zd) == 0.0);
  CHECK(interpolation_coefficient(zd, zt, zd) == 1.0);
  CHECK(interpolation_coefficient((0.5 * (zt + zd)).eval(), zt, zd) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(interpolation_coefficient((zt - (zd - zt)).eval(), zt, zd) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK_THROWS_AS(interpolation_coefficient(zd, zt, zt), ProbeError);
  CHECK_THROWS_AS(interpolation_coefficient(Mat::Zero(2, 2), zt, zd), ProbeError);
}

TEST_CASE("interpolation coefficient is invariant to common offsets and scaling") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const Mat zp = gaussian(rng, 10, 3), zt = gaussian(rng, 10, 3), zd = gaussian(rng, 10, 3);
    const Mat off = 5.0 * gaussian(rng, 10, 3);
    const double c = rng.uniform(0.1, 10.0) * (trial % 2 ? -1.0 : 1.0);
    const double a = interpolation_coefficient(zp, zt, zd);
    CHECK(std::abs(interpolation_coefficient((zp + off).eval(), (zt + off).eval(), (zd + off).eval()) - a) < 1e-12);
    CHECK(std::abs(interpolation_coefficient((c * zp).eval(), (c * zt).eval(), (c * zd).eval()) - a) < 1e-12);
  }
}

TEST_CASE("roc_auc basics") {
  Vec s(4);
  s << 0.1, 0.2, 0.8, 0.9;
  IVec y(4);
  y << 0, 0, 1, 1;
  CHECK(roc_auc(s, y) == 1.0);
  CHECK(roc_auc((-s).eval(), y) == 0.0);
  CHECK_THROWS_AS(roc_auc(s, IVec::Zero(4)), ProbeError);

  Rng rng(9);
  const int n = 20000;
  Vec rs(n);
  IVec ry(n);
  for (int i = 0; i < n; ++i) {
    rs(i) = rng.uniform();
    ry(i) = rng.uniform() < 0.3 ? 1 : 0;
  }
  CHECK(std::abs(roc_auc(rs, ry) - 0.5) < 0.02);
}

TEST_CASE("roc_auc with ties matches pair counting") {
  Vec s(6);
  s << 0.5, 0.5, 0.2, 0.9, 0.5, 0.2;
  IVec y(6);
  y << 1, 0, 1, 1, 0, 0;
  // Positives {0.5, 0.2, 0.9} vs negatives {0.5, 0.5, 0.2}: 2 + 0.5 + 3 = 5.5 of 9.
  CHECK(roc_auc(s, y) == 5.5 / 9.0);
  CHECK(roc_auc(s, y) == auc_by_pairs(s, y));

  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(60));
    Vec sc(n);
    IVec lab(n);
    for (int i = 0; i < n; ++i) {
      sc(i) = static_cast<double>(rng.below(6)) * 0.25;
      lab(i) = static_cast<int>(rng.below(2));
    }
    lab(0) = 0;
    lab(1) = 1;
    CHECK(roc_auc(sc, lab) == auc_by_pairs(sc, lab));
    CHECK(roc_auc(sc, lab) + roc_auc((-sc).eval(), lab) == 1.0);
  }
}

TEST_CASE("bias_contact_auc uses head-averaged bias over i < j") {
  Rng rng(11);
  const int L = 6;
  BlockTrace b;
  b.has_tensors = true;
  b.bias = gaussian(rng, L * L, 3);
  BoolMat contacts = BoolMat::Constant(L, L, false);
  contacts(0, 3) = contacts(3, 0) = contacts(1, 5) = contacts(5, 1) = true;
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < L; ++i)
    for (int j = i + 1; j < L; ++j) {
      s.push_back((b.bias(pair_row(L, i, j), 0) + b.bias(pair_row(L, i, j), 1) + b.bias(pair_row(L, i, j), 2)) / 3.0);
      y.push_back(contacts(i, j));
    }
  const double expect = auc_by_pairs(Eigen::Map<Vec>(s.data(), 15), Eigen::Map<IVec>(y.data(), 15));
  CHECK(bias_contact_auc(b, L, contacts) == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("pathway shares: triangular ablation and zero seq2pair") {
  const std::string seq = "MKTAYIAKQRQI";
  TrunkWeights w = random_weights(kSmall, 12);
  InterventionPlan plan;
  plan.add(AblatePath{Pathway::triangular, {0, kSmall.K}});
  RunOptions cap;
  cap.capture = CapturePlan::all(kSmall.K, false);
  for (const auto& r : pathway_contributions(run_with_plan(seq, w, plan, cap).trace)) {
    CHECK(r.seq2pair == 1.0);
    CHECK(r.triangular == 0.0);
  }
  for (auto& b : w.blocks) {
    b.s2p_u.setZero();
    b.s2p_v.setZero();
  }
  for (const auto& r : pathway_contributions(run_trunk(seq, w, nullptr, cap).trace)) {
    CHECK(r.seq2pair == 0.0);
    CHECK(r.triangular == 1.0);
  }
  CHECK_THROWS_AS(pathway_contributions(TraceRecord{}), ProbeError);
}

TEST_CASE("pathway shares on staged weights") {
  const TrunkDims dims{};
  const TrunkWeights w = staged_weights(dims, 13);
  RunOptions cap;
  cap.capture = CapturePlan::all(dims.K, false);
  const auto rows = pathway_contributions(run_trunk("MKTAYIAKQRQISFVKSHFS", w, nullptr, cap).trace);
  REQUIRE(rows.size() == 12);
  double early_s2p = 0, late_s2p = 0, early_p2s = 0, late_p2s = 0;
  for (const auto& r : rows) {
    CHECK(r.seq2pair >= 0.0);
    CHECK(r.seq2pair <= 1.0);
    CHECK(r.pair2seq >= 0.0);
    CHECK(r.pair2seq <= 1.0);
    CHECK(r.seq2pair + r.triangular == 1.0);
    CHECK(r.seq2pair_scaled >= 0.0);
    CHECK(r.seq2pair_scaled <= 1.0);
    if (r.block < 4) early_s2p += r.seq2pair / 4;
    else late_s2p += r.seq2pair / 8;
    if (r.block < 8) early_p2s += r.pair2seq / 8;
    else late_p2s += r.pair2seq / 4;
  }
  for (int k = 4; k < 12; ++k) CHECK(rows[static_cast<std::size_t>(k)].seq2pair == 0.0);
  for (int k = 0; k < 8; ++k) CHECK(rows[static_cast<std::size_t>(k)].pair2seq == 0.0);
  CHECK(early_s2p > late_s2p);
  CHECK(late_p2s > early_p2s);
  for (int k = 0; k < 4; ++k) CHECK(rows[static_cast<std::size_t>(k)].seq2pair > 0.0);
  for (int k = 8; k < 12; ++k) CHECK(rows[static_cast<std::size_t>(k)].pair2seq_scaled > 0.0);
}

TEST_CASE("attention redirection") {
  Rng rng(14);
  const int L = 7, H = 3;
  TraceRecord base{.length = L, .blocks = {fake_block(rng, 0, L, H), fake_block(rng, 1, L, H)}};
  BoolMat donor = BoolMat::Constant(L, L, false), target = BoolMat::Constant(L, L, false);
  donor(0, 4) = donor(4, 0) = donor(1, 6) = donor(6, 1) = true;
  target(2, 5) = target(5, 2) = target(1, 6) = target(6, 1) = true;  // (1,6) is shared and drops out

  for (const auto& p : attention_redirection(base, base, donor, target)) {
    CHECK(*p.donor_pct == 0.0);
    CHECK(*p.target_pct == 0.0);
  }

  TraceRecord doubled = base;
  for (auto& b : doubled.blocks)
    for (auto& a : b.attention)
      for (auto [i, j] : {std::pair{0, 4}, std::pair{4, 0}}) a(i, j) *= 2.0;
  for (const auto& p : attention_redirection(doubled, base, donor, target)) {
    CHECK(*p.donor_pct == doctest::Approx(100.0).epsilon(1e-12));
    CHECK(*p.target_pct == 0.0);
  }

  TraceRecord other{.length = L, .blocks = {fake_block(rng, 0, L, H), fake_block(rng, 1, L, H)}};
  const auto pts = attention_redirection(other, base, donor, target);
  for (std::size_t k = 0; k < 2; ++k) {
    double mp = 0, mb = 0;
    for (auto [i, j] : {std::pair{0, 4}, std::pair{4, 0}})
      for (int h = 0; h < H; ++h) {
        mp += other.blocks[k].attention[static_cast<std::size_t>(h)](i, j) / (2 * H);
        mb += base.blocks[k].attention[static_cast<std::size_t>(h)](i, j) / (2 * H);
      }
    CHECK(*pts[k].donor_pct == doctest::Approx(100.0 * (mp - mb) / mb).epsilon(1e-12));
  }

  const auto absent = attention_redirection(base, base, BoolMat::Constant(L, L, false), target);
  CHECK_FALSE(absent[0].donor_pct.has_value());
  CHECK(absent[0].target_pct.has_value());
  TraceRecord short_trace{.length = L, .blocks = {base.blocks[0]}};
  CHECK_THROWS_AS(attention_redirection(short_trace, base, donor, target), ProbeError);
}

TEST_CASE("selectivity is the raw difference") {
  CHECK(std::round(100.0 * selectivity(0.99, 0.99)) / 100.0 == 0.0);
  CHECK(selectivity(0.18, 0.24) == 0.18 - 0.24);
  CHECK(std::round(100.0 * selectivity(0.18, 0.24)) / 100.0 == -0.06);
  CHECK_THROWS_AS(selectivity(1.2, 0.5), ProbeError);
}

TEST_CASE("control permutation is a seeded bijection") {
  const auto a = control_permutation(3), b = control_permutation(3), c = control_permutation(4);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(std::set<int>(a.begin(), a.end()).size() == 20);
}

TEST_CASE("balanced accuracy") {
  IVec truth(6), pred(6);
  truth << 0, 0, 0, 0, 1, 1;
  pred << 0, 0, 0, 0, 0, 1;
  CHECK(balanced_accuracy(pred, truth) == 0.75);
}

TEST_CASE("binary probe separates a planted class") {
  Rng rng(15);
  const int n = 400, d = 5;
  Mat x = gaussian(rng, n, d);
  IVec y(n);
  for (int i = 0; i < n; ++i) {
    y(i) = i % 3 == 0;
    x(i, 2) += y(i) ? 3.0 : -3.0;
  }
  const ClassifierEval e = fit_binary_probe(x, y, 1);
  CHECK(e.n_test == 80);
  CHECK(e.balanced_accuracy > 0.97);
  CHECK_THROWS_AS(fit_binary_probe(x, IVec::Zero(n), 1), ProbeError);
}

TEST_CASE("identity probe on embedding-like features has zero selectivity") {
  Rng rng(16);
  const int n = 400, d = 24;
  const Mat centers = 4.0 * gaussian(rng, 20, d);
  std::string residues;
  Mat x(n, d);
  for (int i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng.below(20));
    residues.push_back(kAminoAcids[static_cast<std::size_t>(c)]);
    x.row(i) = centers.row(c) + 0.3 * gaussian(rng, 1, d);
  }
  const IdentityProbeResult r = identity_probe(x, residues, 2, 3, {.max_iters = 400, .tol = 1e-6, .l2 = 1e-3});
  CHECK(r.probe.accuracy > 0.95);
  CHECK(r.control.accuracy == r.probe.accuracy);
  CHECK(r.selectivity == 0.0);
  CHECK_THROWS_AS(identity_probe(x, residues.substr(1), 2, 3), ProbeError);
}

TEST_CASE("charge samples follow the pairing rule") {
  Rng rng(17);
  const std::string seq = "KAAADEAAARH";
  const int L = static_cast<int>(seq.size());
  const Mat z = gaussian(rng, L * L, 2);
  const auto [x, y] = charge_samples(z, seq, ProbeTask::charge_pos);
  int n = 0, pos = 0;
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j)
      if (std::abs(i - j) >= 4) {
        CHECK(x.row(n) == z.row(pair_row(L, i, j)));
        CHECK(y(n) == (seq[static_cast<std::size_t>(i)] == 'K' || seq[static_cast<std::size_t>(i)] == 'R' ||
                       seq[static_cast<std::size_t>(i)] == 'H'));
        pos += y(n);
        ++n;
      }
  CHECK(x.rows() == n);
  CHECK(pos > 0);
  const auto neg = charge_samples(z, seq, ProbeTask::charge_neg);
  CHECK(neg.second.sum() > 0);
  CHECK_THROWS_AS(charge_samples(z, seq, ProbeTask::distance), ProbeError);
}

TEST_CASE("projection histogram") {
  Vec a(5);
  a << -10.0, -0.5, 0.0, 0.49, 10.0;
  const Histogram h = projection_histogram({{"pos", a}, {"neg", Vec::Zero(3)}}, 0.0, 1.0);
  CHECK(h.bins == 64);
  CHECK(h.lo == -4.0);
  CHECK(h.hi == 4.0);
  CHECK(h.counts[0][0] == 1);
  CHECK(h.counts[0][63] == 1);
  CHECK(h.counts[0][28] == 1);  // -0.5 starts bin 28
  CHECK(h.counts[0][32] == 1);
  CHECK(h.counts[0][35] == 1);
  CHECK(h.counts[1][32] == 3);
  const std::string csv = histogram_csv(h);
  CHECK(csv.rfind("bin,lo,hi,pos,neg\n0,-4,-3.875,1,0\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 65);
  CHECK_THROWS_AS(projection_histogram({}, 0.0, 0.0), ProbeError);
}

TEST_CASE("TSP1 round trip and errors") {
  Rng rng(18);
  ProbeModel m{.task = ProbeTask::identity, .block = 5, .weights = gaussian(rng, 6, 20), .bias = gaussian_vec(rng, 20)};
  const std::string bytes = serialize_probe(m);
  const ProbeModel back = deserialize_probe(bytes);
  CHECK(back.task == ProbeTask::identity);
  CHECK(back.block == 5);
  CHECK(back.weights == m.weights);
  CHECK(back.bias == m.bias);
  CHECK(bytes.substr(0, 4) == "TSP1");

  Direction d{.vector = gaussian_vec(rng, 8).normalized(), .sigma = 0.37, .block = 2, .dataset = "charge_train"};
  const Direction dback = deserialize_direction(serialize_direction(d));
  CHECK(dback.vector == d.vector);
  CHECK(dback.sigma == 0.37);
  CHECK(dback.block == 2);
  CHECK(dback.dataset == "charge_train");

  CHECK_THROWS_AS(deserialize_direction(bytes), ProbeError);
  CHECK_THROWS_AS(deserialize_probe(serialize_direction(d)), ProbeError);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_probe(bad), ProbeError);
  CHECK_THROWS_AS(deserialize_probe(bytes.substr(0, bytes.size() - 3)), ProbeError);
  CHECK_THROWS_AS(deserialize_probe(bytes + "x"), ProbeError);
  CHECK_THROWS_AS(deserialize_probe(bytes.substr(0, 10)), ProbeError);
}
