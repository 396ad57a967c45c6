#include <cmath>
#include <cstring>
#include <set>
#include <string>

#include "doctest.h"
#include "trunkscope/interventions.hpp"
#include "trunkscope/rng.hpp"

using namespace trunkscope;

namespace {

const TrunkDims kSmall{.K = 4, .H = 2, .d_s = 8, .d_z = 6, .d = 4, .d_h = 4, .clip = 5};

bool bit_equal(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

Mat random_mat(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

Vec unit(Rng& rng, int n) {
  Vec v(n);
  for (int k = 0; k < n; ++k) v(k) = rng.normal();
  return v.normalized();
}

Patch self_patch(const BlockTrace& bt, Track track, RegionMask mask, int length) {
  Patch p;
  p.block = bt.block;
  p.track = track;
  p.mask = std::move(mask);
  p.donor = track == Track::s ? bt.s : bt.z;
  p.donor_length = length;
  return p;
}

}  // namespace

TEST_CASE("apply_patch with donor equal to target is the identity") {
  Rng rng(1);
  const int L = 9;
  const Mat s = random_mat(rng, L, kSmall.d_s);
  const Mat z = random_mat(rng, L * L, kSmall.d_z);
  Patch ps{.block = 0, .track = Track::s, .mask = RegionMask::rows({{2, 6}}), .donor = s, .donor_length = L};
  CHECK(bit_equal(apply_patch(s, L, ps), s));
  Patch pz{.block = 0, .track = Track::z, .mask = RegionMask::touch({{2, 6}}), .donor = z, .donor_length = L};
  CHECK(bit_equal(apply_patch(z, L, pz), z));
}

TEST_CASE("apply_patch of zero rows touches exactly the masked rows") {
  Rng rng(2);
  const int L = 14;
  const Mat s = random_mat(rng, L, kSmall.d_s);
  Patch p{.block = 0, .track = Track::s, .mask = RegionMask::rows({{5, 11}}), .donor = Mat::Zero(L, kSmall.d_s), .donor_length = L};
  const Mat out = apply_patch(s, L, p);
  for (int i = 0; i < L; ++i)
    for (int c = 0; c < kSmall.d_s; ++c) {
      if (i >= 5 && i <= 10) CHECK(out(i, c) == 0.0);
      else CHECK(out(i, c) == s(i, c));
    }
}

TEST_CASE("pair_touch minus pair_intra is the exactly-one set") {
  const int L = 12;
  const std::vector<IndexRange> region{{3, 6}, {8, 10}};
  const BoolMat touch = masked_pairs(RegionMask::touch(region), L);
  const BoolMat intra = masked_pairs(RegionMask::intra(region), L);
  std::set<std::pair<int, int>> diff, oracle;
  auto in_r = [](int i) { return (i >= 3 && i < 6) || (i >= 8 && i < 10); };
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j) {
      if (touch(i, j) && !intra(i, j)) diff.insert({i, j});
      if (intra(i, j)) CHECK(touch(i, j));
      if (in_r(i) != in_r(j)) oracle.insert({i, j});
    }
  CHECK(diff == oracle);
  CHECK(intra == intra.transpose());
  CHECK(touch == touch.transpose());
  CHECK(mask_size(RegionMask::intra(region), L) == 25);
  CHECK(mask_size(RegionMask::explicit_pairs({{1, 4}, {4, 1}, {2, 2}}), L) == 3);
}

TEST_CASE("pair patches cover both orientations and respect the loop-anchored offset") {
  Rng rng(3);
  const int L = 10, Ld = 13;
  const Mat z = random_mat(rng, L * L, kSmall.d_z);
  const Mat donor = random_mat(rng, Ld * Ld, kSmall.d_z);
  Patch p{.block = 0,
          .track = Track::z,
          .mask = RegionMask::explicit_pairs({{2, 5}}),
          .donor = donor,
          .donor_length = Ld,
          .align = {.target_anchor = 4, .donor_anchor = 7}};
  const Mat out = apply_patch(z, L, p);
  CHECK(bit_equal(out.row(pair_row(L, 2, 5)), donor.row(pair_row(Ld, 5, 8))));
  CHECK(bit_equal(out.row(pair_row(L, 5, 2)), donor.row(pair_row(Ld, 8, 5))));
  int changed = 0;
  for (int r = 0; r < L * L; ++r) changed += !bit_equal(out.row(r), z.row(r));
  CHECK(changed == 2);

  p.mask = RegionMask::intra({{6, 9}});  // maps to donor rows 9..11, fits
  CHECK_NOTHROW(apply_patch(z, L, p));
  p.align = {.target_anchor = 4, .donor_anchor = 9};  // 8 + 5 = 13 is out of range
  try {
    apply_patch(z, L, p);
    FAIL("expected a misfit error");
  } catch (const InterventionError& e) {
    const std::string what = e.what();
    CHECK(what.find("target anchor 4") != std::string::npos);
    CHECK(what.find("donor anchor 9") != std::string::npos);
  }
}

TEST_CASE("patches are idempotent and leave unmasked entries untouched") {
  Rng rng(4);
  const int L = 11;
  for (int trial = 0; trial < 20; ++trial) {
    const int a = static_cast<int>(rng.below(L - 2));
    const int b = a + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(L - a - 1)));
    const Mat z = random_mat(rng, L * L, kSmall.d_z);
    const RegionMask mask = trial % 2 ? RegionMask::touch({{a, b}}) : RegionMask::intra({{a, b}});
    Patch p{.block = 0, .track = Track::z, .mask = mask, .donor = random_mat(rng, L * L, kSmall.d_z), .donor_length = L};
    const Mat once = apply_patch(z, L, p);
    CHECK(bit_equal(apply_patch(once, L, p), once));
    const BoolMat m = masked_pairs(mask, L);
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < L; ++j)
        if (!m(i, j)) CHECK(bit_equal(once.row(pair_row(L, i, j)), z.row(pair_row(L, i, j))));
  }
}

TEST_CASE("apply_steer shifts projections by strength times sigma") {
  Rng rng(5);
  const int L = 12;
  const Mat s = random_mat(rng, L, kSmall.d_s);
  const Vec v = unit(rng, kSmall.d_s);
  Steer st{.window = {0, 1}, .track = Track::s, .mask = RegionMask::rows({{1, 4}, {7, 10}}), .direction = v,
           .strength = 3.0, .sigma = 0.7, .signs = {1.0, -1.0}};
  const Mat out = apply_steer(s, L, st);
  for (int i = 0; i < L; ++i) {
    const double shift = (out.row(i) - s.row(i)).dot(v.transpose());
    if (i >= 1 && i < 4) CHECK(std::abs(shift - 2.1) < 1e-12);
    else if (i >= 7 && i < 10) CHECK(std::abs(shift + 2.1) < 1e-12);
    else CHECK(bit_equal(out.row(i), s.row(i)));
  }
  st.strength = 0.0;
  CHECK(bit_equal(apply_steer(s, L, st), s));
  st.strength = 1.0;
  st.sigma = 0.0;
  CHECK_THROWS_AS(apply_steer(s, L, st), InterventionError);
}

TEST_CASE("distance steering along a probe direction matches the closed form") {
  Rng rng(6);
  const int L = 8;
  const Mat z = random_mat(rng, L * L, kSmall.d_z);
  Vec w(kSmall.d_z);
  for (int k = 0; k < kSmall.d_z; ++k) w(k) = rng.normal();
  const double b = 4.2;
  const double sigma = 0.9, alpha = 20.0;
  // Subtracting along w-hat: a negative sign on the single pair.
  Steer st{.window = {0, 1}, .track = Track::z, .mask = RegionMask::explicit_pairs({{1, 5}}),
           .direction = w.normalized(), .strength = alpha, .sigma = sigma, .signs = {-1.0}};
  const Mat out = apply_steer(z, L, st);
  for (auto [i, j] : {std::pair{1, 5}, std::pair{5, 1}}) {
    const double before = z.row(pair_row(L, i, j)).dot(w.transpose()) + b;
    const double after = out.row(pair_row(L, i, j)).dot(w.transpose()) + b;
    const double closed = (z.row(pair_row(L, i, j)) - alpha * sigma * w.normalized().transpose()).dot(w.transpose()) + b;
    CHECK(std::abs(after - closed) < 1e-9);
    CHECK(std::abs((before - after) - alpha * sigma * w.norm()) < 1e-9);
  }
}

TEST_CASE("patch then steer on disjoint masks commutes") {
  Rng rng(7);
  const int L = 10;
  for (int trial = 0; trial < 20; ++trial) {
    const Mat s = random_mat(rng, L, kSmall.d_s);
    const int cut = 2 + static_cast<int>(rng.below(6));
    Patch p{.block = 0, .track = Track::s, .mask = RegionMask::rows({{0, cut}}), .donor = random_mat(rng, L, kSmall.d_s), .donor_length = L};
    Steer st{.window = {0, 1}, .track = Track::s, .mask = RegionMask::rows({{cut, L}}), .direction = unit(rng, kSmall.d_s),
             .strength = rng.uniform(-5, 5), .sigma = rng.uniform(0.1, 2.0), .signs = {}};
    const Mat ab = apply_steer(apply_patch(s, L, p), L, st);
    const Mat ba = apply_patch(apply_steer(s, L, st), L, p);
    CHECK(bit_equal(ab, ba));
  }
}

TEST_CASE("self-patching at every block and both tracks is bit-identical") {
  const TrunkWeights w = random_weights(kSmall, 8);
  const std::string seq = "MKTAYIAKQRQISF";
  const int L = static_cast<int>(seq.size());
  RunOptions cap;
  cap.capture = CapturePlan::all(kSmall.K);
  const TrunkOutput base = run_trunk(seq, w, nullptr, cap);
  for (int k = 0; k < kSmall.K; ++k) {
    for (Track t : {Track::s, Track::z}) {
      InterventionPlan plan;
      const RegionMask mask = t == Track::s ? RegionMask::rows({{0, L}}) : RegionMask::intra({{0, L}});
      plan.add(self_patch(base.trace.at(k), t, mask, L));
      const TrunkOutput out = run_with_plan(seq, w, plan);
      CHECK(bit_equal(out.s, base.s));
      CHECK(bit_equal(out.z, base.z));
    }
  }
  const TrunkOutput empty = run_with_plan(seq, w, InterventionPlan{});
  CHECK(bit_equal(empty.s, base.s));
}

TEST_CASE("ablating pair2seq everywhere equals zero pair-bias weights") {
  const TrunkWeights w = random_weights(kSmall, 9);
  TrunkWeights no_bias = w;
  for (auto& b : no_bias.blocks) b.pair_bias.setZero();
  const std::string seq = "GSHMKLVDE";
  InterventionPlan plan;
  plan.add(AblatePath{Pathway::pair2seq, {0, kSmall.K}});
  const TrunkOutput a = run_with_plan(seq, w, plan);
  const TrunkOutput b = run_trunk(seq, no_bias);
  CHECK(bit_equal(a.s, b.s));
  CHECK(bit_equal(a.z, b.z));

  InterventionPlan empty_window;
  empty_window.add(AblatePath{Pathway::pair2seq, {2, 2}});
  const TrunkOutput c = run_with_plan(seq, w, empty_window);
  const TrunkOutput d = run_trunk(seq, w);
  CHECK(bit_equal(c.z, d.z));
}

TEST_CASE("ablating seq2pair everywhere matches a manual triangular+MLP pipeline") {
  const TrunkWeights w = staged_weights(kSmall, 10, {.seq2pair_end = 2, .pair2seq_begin = 2});
  const std::string seq = "MKTAYIAKQR";
  InterventionPlan plan;
  plan.add(AblatePath{Pathway::seq2pair, {0, kSmall.K}});
  const TrunkOutput out = run_with_plan(seq, w, plan);

  const Reps init = init_reps(seq, w);
  Mat s = init.s, z = init.z;
  for (const auto& bw : w.blocks) {
    s = sequence_update(s, z, bw, kSmall).s;
    z = z + triangular_increment(z, bw, kSmall);
    z = z + pair_mlp_increment(z, bw);
  }
  CHECK(bit_equal(out.z, z));
  CHECK(bit_equal(out.s, s));

  InterventionPlan freeze;
  freeze.add(FreezeSeq2Pair{{0, kSmall.K}});
  CHECK(bit_equal(run_with_plan(seq, w, freeze).z, z));
}

TEST_CASE("triangular ablation removes only the triangular branch") {
  const TrunkWeights w = random_weights(kSmall, 11);
  const std::string seq = "MKTAYIAK";
  InterventionPlan plan;
  plan.add(AblatePath{Pathway::triangular, {1, 2}});
  RunOptions cap;
  cap.capture = CapturePlan::all(kSmall.K, false);
  const TrunkOutput out = run_with_plan(seq, w, plan, cap);
  CHECK(out.trace.at(1).triangular_norm == 0.0);
  CHECK(out.trace.at(0).triangular_norm > 0.0);
  CHECK(out.trace.at(2).triangular_norm > 0.0);
}

TEST_CASE("scale_pre_decoder") {
  TrunkWeights w = random_weights(kSmall, 12);
  w.decoder_b(0, 0) = 0.0;
  const std::string seq = "MKTAYIAKQRQI";
  const TrunkOutput base = run_trunk(seq, w);
  InterventionPlan one;
  one.add(Scale{ScaleTarget::z_pre_decoder, 1.0});
  const TrunkOutput same = run_with_plan(seq, w, one);
  CHECK(bit_equal(same.z, base.z));

  InterventionPlan two;
  two.add(Scale{ScaleTarget::z_pre_decoder, 2.0});
  const TrunkOutput doubled = run_with_plan(seq, w, two);
  CHECK(bit_equal(doubled.s, base.s));
  const double d1 = mean_pairwise_ca_distance(decode_structure(base.s, base.z, w, seq, Readout::identity).structure);
  const double d2 = mean_pairwise_ca_distance(decode_structure(doubled.s, doubled.z, w, seq, Readout::identity).structure);
  CHECK(d2 == 2.0 * d1);

  InterventionPlan zero;
  zero.add(Scale{ScaleTarget::z_pre_decoder, 0.0});
  const TrunkOutput flat = run_with_plan(seq, w, zero);
  CHECK(decode_structure(flat.s, flat.z, w, seq, Readout::identity).degenerate);

  InterventionPlan s_scale;
  s_scale.add(Scale{ScaleTarget::s_pre_decoder, 3.0});
  const TrunkOutput st = run_with_plan(seq, w, s_scale);
  CHECK(bit_equal(st.z, base.z));
  CHECK(bit_equal(st.s, (base.s * 3.0).eval()));
}

TEST_CASE("validate_plan rejects bad plans before any compute") {
  const TrunkWeights w = random_weights(kSmall, 13);
  const std::string seq = "MKTAYIAK";
  auto rejects = [&](Directive d) {
    InterventionPlan p;
    p.add(std::move(d));
    CHECK_THROWS_AS(run_with_plan(seq, w, p), InterventionError);
  };
  rejects(AblatePath{Pathway::seq2pair, {0, kSmall.K + 1}});
  rejects(FreezeSeq2Pair{{-1, 2}});
  rejects(Patch{.block = kSmall.K, .track = Track::s, .mask = RegionMask::rows({{0, 2}}), .donor = Mat::Zero(8, 8), .donor_length = 8});
  rejects(Patch{.block = 0, .track = Track::s, .mask = RegionMask::intra({{0, 2}}), .donor = Mat::Zero(8, 8), .donor_length = 8});
  rejects(Patch{.block = 0, .track = Track::s, .mask = RegionMask::rows({{0, 9}}), .donor = Mat::Zero(9, 8), .donor_length = 9});
  rejects(Patch{.block = 0, .track = Track::s, .mask = RegionMask::rows({{0, 2}}), .donor = Mat::Zero(8, 7), .donor_length = 8});
  Vec v = Vec::Ones(kSmall.d_s);
  rejects(Steer{.window = {0, 1}, .track = Track::s, .mask = RegionMask::rows({{0, 2}}), .direction = v, .strength = 1, .sigma = 1, .signs = {}});
  rejects(Steer{.window = {0, 1}, .track = Track::s, .mask = RegionMask::rows({{0, 2}}), .direction = v.normalized(), .strength = 1, .sigma = 0, .signs = {}});
  rejects(Scale{ScaleTarget::z_pre_decoder, -1.0});
  CHECK_THROWS_AS(parse_pathway("encoder"), TrunkError);
}

TEST_CASE("staged regime: late sequence patches never reach z") {
  const TrunkDims dims{};
  const TrunkWeights w = staged_weights(dims, 21);
  const std::string target = "MKTAYIAKQRQISFVKSHFS";
  const std::string donor = "GSWEVLKDRPTYHNAQECML";
  const int L = static_cast<int>(target.size());
  RunOptions cap;
  cap.capture = CapturePlan::all(dims.K);
  const TrunkOutput base = run_trunk(target, w, nullptr, cap);
  const TrunkOutput don = run_trunk(donor, w, nullptr, cap);
  for (int k = 4; k < dims.K; ++k) {
    InterventionPlan plan;
    Patch p = self_patch(don.trace.at(k), Track::s, RegionMask::rows({{0, L}}), L);
    plan.add(p);
    const TrunkOutput out = run_with_plan(target, w, plan);
    CHECK((out.z - base.z).norm() == 0.0);
    CHECK((out.s - base.s).norm() > 0.0);
  }
  // A sequence patch while seq2pair is still active does reach z.
  InterventionPlan early;
  early.add(self_patch(don.trace.at(2), Track::s, RegionMask::rows({{0, L}}), L));
  CHECK((run_with_plan(target, w, early).z - base.z).norm() > 0.0);
}

TEST_CASE("staged regime: early pair patches leave s untouched until pair2seq turns on") {
  const TrunkDims dims{};
  const TrunkWeights w = staged_weights(dims, 22);
  const std::string target = "MKTAYIAKQRQISFVKSHFS";
  const std::string donor = "GSWEVLKDRPTYHNAQECML";
  const int L = static_cast<int>(target.size());
  RunOptions cap;
  cap.capture = CapturePlan::all(dims.K);
  const TrunkOutput base = run_trunk(target, w, nullptr, cap);
  const TrunkOutput don = run_trunk(donor, w, nullptr, cap);
  for (int k : {0, 3, 7}) {
    InterventionPlan plan;
    plan.add(self_patch(don.trace.at(k), Track::z, RegionMask::intra({{0, L}}), L));
    const TrunkOutput out = run_with_plan(target, w, plan, cap);
    for (int b = 0; b < 8; ++b) CHECK(bit_equal(out.trace.at(b).s, base.trace.at(b).s));
    for (int b = 0; b < 8; ++b) CHECK(out.trace.at(b).bias.isZero(0.0));
    CHECK((out.trace.at(8).s - base.trace.at(8).s).norm() > 0.0);
  }
}

TEST_CASE("plan text round trip") {
  Rng rng(14);
  const int L = 10;
  const Mat donor_s = random_mat(rng, 12, kSmall.d_s);
  InterventionPlan plan;
  plan.add(Patch{.block = 2, .track = Track::s, .mask = RegionMask::rows({{2, 5}, {6, 8}}), .donor = donor_s,
                 .donor_length = 12, .align = {3, 4}, .donor_ref = "donor_run_7"});
  plan.add(AblatePath{Pathway::triangular, {1, 3}});
  plan.add(FreezeSeq2Pair{{0, 2}});
  plan.add(Steer{.window = {0, 4}, .track = Track::z, .mask = RegionMask::explicit_pairs({{1, 6}, {2, 7}}),
                 .direction = unit(rng, kSmall.d_z), .strength = -20, .sigma = 0.123456789012345, .signs = {1.0}});
  plan.add(Scale{ScaleTarget::z_pre_decoder, 1.5});
  const std::string text = plan_to_text(plan);
  int resolved = 0;
  const InterventionPlan back = plan_from_text(text, [&](const std::string& id, int block, Track t) {
    CHECK(id == "donor_run_7");
    CHECK(block == 2);
    CHECK(t == Track::s);
    ++resolved;
    return std::pair<Mat, int>{donor_s, 12};
  });
  CHECK(resolved == 1);
  REQUIRE(back.directives.size() == 5);
  CHECK(plan_to_text(back) == text);
  const auto& st = std::get<Steer>(back.directives[3]);
  CHECK(bit_equal(st.direction, std::get<Steer>(plan.directives[3]).direction));
  CHECK(st.sigma == 0.123456789012345);
  validate_plan(back, kSmall, L);

  CHECK_THROWS_AS(plan_from_text("[directive0]\ntype = warp\n", nullptr), InterventionError);
  CHECK_THROWS_AS(plan_from_text("[directive0]\ntype = ablate\nwindow = 0:2\n", nullptr), InterventionError);
  CHECK_THROWS_AS(plan_from_text("[directive0]\ntype = scale\ntarget = z_pre_decoder\nfactor = two\n", nullptr),
                  InterventionError);
}
