#include "trunkscope/trunk.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <type_traits>

#include "trunkscope/io.hpp"
#include "trunkscope/rng.hpp"

namespace trunkscope {

namespace {

template <typename W, typename F>
void for_each_tensor(W& w, F&& f) {
  const TrunkDims& d = w.dims;
  const int hd = d.H * d.d_h;
  f("embedding", w.embedding, 20, d.d_s);
  f("relpos", w.relpos, 2 * d.clip + 1, d.d_z);
  f("decoder_w", w.decoder_w, 1, d.d_z);
  f("decoder_b", w.decoder_b, 1, 1);
  for (std::size_t k = 0; k < w.blocks.size(); ++k) {
    auto& b = w.blocks[k];
    const std::string p = "block" + std::to_string(k) + ".";
    f(p + "attn_q", b.attn_q, hd, d.d_s);
    f(p + "attn_k", b.attn_k, hd, d.d_s);
    f(p + "attn_v", b.attn_v, hd, d.d_s);
    f(p + "attn_o", b.attn_o, d.d_s, hd);
    f(p + "pair_bias", b.pair_bias, d.H, d.d_z);
    f(p + "seq_mlp_w1", b.seq_mlp_w1, 2 * d.d_s, d.d_s);
    f(p + "seq_mlp_b1", b.seq_mlp_b1, 1, 2 * d.d_s);
    f(p + "seq_mlp_w2", b.seq_mlp_w2, d.d_s, 2 * d.d_s);
    f(p + "seq_mlp_b2", b.seq_mlp_b2, 1, d.d_s);
    f(p + "s2p_u", b.s2p_u, d.d, d.d_s);
    f(p + "s2p_v", b.s2p_v, d.d, d.d_s);
    f(p + "s2p_z", b.s2p_z, d.d_z, 2 * d.d);
    f(p + "tri_a", b.tri_a, d.d_z, d.d_z);
    f(p + "tri_a_gate", b.tri_a_gate, d.d_z, d.d_z);
    f(p + "tri_b", b.tri_b, d.d_z, d.d_z);
    f(p + "tri_b_gate", b.tri_b_gate, d.d_z, d.d_z);
    f(p + "tri_out", b.tri_out, d.d_z, d.d_z);
    f(p + "tri_gate", b.tri_gate, d.d_z, d.d_z);
    f(p + "pair_mlp_w1", b.pair_mlp_w1, 2 * d.d_z, d.d_z);
    f(p + "pair_mlp_b1", b.pair_mlp_b1, 1, 2 * d.d_z);
    f(p + "pair_mlp_w2", b.pair_mlp_w2, d.d_z, 2 * d.d_z);
    f(p + "pair_mlp_b2", b.pair_mlp_b2, 1, d.d_z);
  }
}

void check_dims(const TrunkDims& d) {
  if (d.K < 1 || d.H < 1 || d.d_s < 1 || d.d_z < 1 || d.d < 1 || d.d_h < 1 || d.clip < 1) {
    throw TrunkError("trunk dimensions must all be positive");
  }
}

bool is_bias(const std::string& name) {
  return name.ends_with("_b1") || name.ends_with("_b2") || name == "decoder_b";
}

Mat relu(const Mat& m) {
  return m.cwiseMax(0.0);
}

Mat add_row(Mat m, const Mat& bias) {
  m.rowwise() += bias.row(0);
  return m;
}

Mat sigmoid_of(const Mat& m) {
  return m.unaryExpr([](double x) { return sigmoid(x); });
}

}  // namespace

CapturePlan CapturePlan::all(int K, bool tensors) {
  CapturePlan plan;
  for (int k = 0; k < K; ++k) plan.blocks.insert(k);
  plan.tensors = tensors;
  return plan;
}

std::vector<TensorSlot> tensor_slots(TrunkWeights& weights) {
  std::vector<TensorSlot> slots;
  for_each_tensor(weights, [&](const std::string& name, Mat& m, int r, int c) { slots.push_back({name, &m, r, c}); });
  return slots;
}

std::vector<std::string> tensor_names(const TrunkDims& dims) {
  TrunkWeights shell;
  shell.dims = dims;
  shell.blocks.resize(static_cast<std::size_t>(std::max(dims.K, 0)));
  std::vector<std::string> names;
  for_each_tensor(shell, [&](const std::string& name, Mat&, int, int) { names.push_back(name); });
  return names;
}

void validate_weights(const TrunkWeights& weights) {
  check_dims(weights.dims);
  if (static_cast<int>(weights.blocks.size()) != weights.dims.K) {
    throw WeightsShapeError("block" + std::to_string(std::min<int>(weights.dims.K, static_cast<int>(weights.blocks.size()))),
                            "block count " + std::to_string(weights.blocks.size()) + " != K " +
                                std::to_string(weights.dims.K));
  }
  for_each_tensor(weights, [&](const std::string& name, const Mat& m, int r, int c) {
    if (m.rows() != r || m.cols() != c) {
      throw WeightsShapeError(name, "expected " + std::to_string(r) + "x" + std::to_string(c) + ", got " +
                                        std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
    if (!m.allFinite()) throw WeightsShapeError(name, "non-finite entries");
  });
}

TrunkWeights random_weights(const TrunkDims& dims, std::uint64_t seed) {
  check_dims(dims);
  TrunkWeights w;
  w.dims = dims;
  w.blocks.resize(static_cast<std::size_t>(dims.K));
  Rng rng(seed);
  for_each_tensor(w, [&](const std::string& name, Mat& m, int r, int c) {
    m.resize(r, c);
    if (is_bias(name)) {
      m.setConstant(name == "decoder_b" ? 6.0 : 0.0);
      return;
    }
    const double gain = (name == "embedding" || name == "relpos") ? 1.0 : 1.0 / std::sqrt(static_cast<double>(c));
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = gain * rng.normal();
  });
  return w;
}

TrunkWeights staged_weights(const TrunkDims& dims, std::uint64_t seed, StagedLayout layout) {
  TrunkWeights w = random_weights(dims, seed);
  for (int k = 0; k < dims.K; ++k) {
    auto& b = w.blocks[static_cast<std::size_t>(k)];
    if (k < layout.seq2pair_end) {
      b.s2p_u *= 3.0;
      b.s2p_v *= 3.0;
    } else {
      b.s2p_u.setZero();
      b.s2p_v.setZero();
    }
    if (k >= layout.pair2seq_begin) {
      b.pair_bias *= 8.0;
    } else {
      b.pair_bias.setZero();
    }
  }
  return w;
}

TrunkWeights with_zero_branches(TrunkWeights weights) {
  for (auto& b : weights.blocks) {
    for (Mat* m : {&b.attn_q, &b.attn_k, &b.attn_v, &b.attn_o, &b.pair_bias, &b.seq_mlp_w1, &b.seq_mlp_b1,
                   &b.seq_mlp_w2, &b.seq_mlp_b2, &b.s2p_u, &b.s2p_v, &b.s2p_z, &b.tri_a, &b.tri_a_gate, &b.tri_b,
                   &b.tri_b_gate, &b.tri_out, &b.tri_gate, &b.pair_mlp_w1, &b.pair_mlp_b1, &b.pair_mlp_w2,
                   &b.pair_mlp_b2}) {
      m->setZero();
    }
  }
  return weights;
}

std::string_view pathway_name(Pathway p) {
  switch (p) {
    case Pathway::seq2pair:
      return "seq2pair";
    case Pathway::pair2seq:
      return "pair2seq";
    case Pathway::triangular:
      return "triangular";
  }
  return "?";
}

Pathway parse_pathway(std::string_view name) {
  if (name == "seq2pair") return Pathway::seq2pair;
  if (name == "pair2seq") return Pathway::pair2seq;
  if (name == "triangular") return Pathway::triangular;
  throw TrunkError("unknown pathway '" + std::string(name) + "'");
}

Reps init_reps(std::string_view sequence, const TrunkWeights& weights, int max_length) {
  const int L = static_cast<int>(sequence.size());
  if (L < 2 || L > max_length) {
    throw TrunkError("sequence length " + std::to_string(L) + " outside [2, " + std::to_string(max_length) + "]");
  }
  const TrunkDims& d = weights.dims;
  Reps reps{Mat(L, d.d_s), Mat(static_cast<Eigen::Index>(L) * L, d.d_z)};
  for (int i = 0; i < L; ++i) {
    const int idx = amino_acid_index(sequence[static_cast<std::size_t>(i)]);
    if (idx < 0) {
      throw TrunkError("invalid residue '" + std::string(1, sequence[static_cast<std::size_t>(i)]) +
                       "' at position " + std::to_string(i));
    }
    reps.s.row(i) = weights.embedding.row(idx);
  }
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < L; ++j) {
      const int offset = std::clamp(j - i, -d.clip, d.clip);
      reps.z.row(pair_row(L, i, j)) = weights.relpos.row(offset + d.clip);
    }
  }
  return reps;
}

SequenceUpdate sequence_update(const Mat& s, const Mat& z, const BlockWeights& bw, const TrunkDims& dims,
                               bool ablate_pair2seq) {
  const int L = static_cast<int>(s.rows());
  const Mat sn = layer_norm_rows(s);
  const Mat q = sn * bw.attn_q.transpose();
  const Mat k = sn * bw.attn_k.transpose();
  const Mat v = sn * bw.attn_v.transpose();

  SequenceUpdate out;
  if (ablate_pair2seq) {
    out.bias = Mat::Zero(z.rows(), dims.H);
  } else {
    out.bias = layer_norm_rows(z) * bw.pair_bias.transpose();
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dims.d_h));
  Mat heads(L, dims.H * dims.d_h);
  double content_sq = 0.0;
  out.attention.reserve(static_cast<std::size_t>(dims.H));
  for (int h = 0; h < dims.H; ++h) {
    const auto qh = q.middleCols(h * dims.d_h, dims.d_h);
    const auto kh = k.middleCols(h * dims.d_h, dims.d_h);
    Mat logits = (qh * kh.transpose()) * scale;
    content_sq += logits.squaredNorm();
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < L; ++j) logits(i, j) += out.bias(pair_row(L, i, j), h);
    Mat a = softmax_rows(logits);
    heads.middleCols(h * dims.d_h, dims.d_h) = a * v.middleCols(h * dims.d_h, dims.d_h);
    out.attention.push_back(std::move(a));
  }
  out.bias_norm = out.bias.norm();
  out.content_norm = std::sqrt(content_sq);

  const Mat s1 = s + heads * bw.attn_o.transpose();
  const Mat hidden = relu(add_row(layer_norm_rows(s1) * bw.seq_mlp_w1.transpose(), bw.seq_mlp_b1));
  out.s = s1 + add_row(hidden * bw.seq_mlp_w2.transpose(), bw.seq_mlp_b2);
  return out;
}

Mat seq2pair_increment(const Mat& s, const BlockWeights& bw, const TrunkDims& dims) {
  const int L = static_cast<int>(s.rows());
  const Mat sn = layer_norm_rows(s);
  const Mat u = sn * bw.s2p_u.transpose();
  const Mat v = sn * bw.s2p_v.transpose();
  Mat phi(static_cast<Eigen::Index>(L) * L, 2 * dims.d);
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < L; ++j) {
      const Eigen::Index r = pair_row(L, i, j);
      phi.row(r).head(dims.d) = u.row(i).cwiseProduct(v.row(j));
      phi.row(r).tail(dims.d) = u.row(i) - v.row(j);
    }
  }
  return phi * bw.s2p_z.transpose();
}

Mat triangular_increment(const Mat& z, const BlockWeights& bw, const TrunkDims& dims) {
  const int L = static_cast<int>(std::lround(std::sqrt(static_cast<double>(z.rows()))));
  const Mat zn = layer_norm_rows(z);
  const Mat a = sigmoid_of(zn * bw.tri_a_gate.transpose()).cwiseProduct(zn * bw.tri_a.transpose());
  const Mat b = sigmoid_of(zn * bw.tri_b_gate.transpose()).cwiseProduct(zn * bw.tri_b.transpose());
  Mat x(z.rows(), dims.d_z);
  Mat ac(L, L), bc(L, L);
  for (int c = 0; c < dims.d_z; ++c) {
    for (int i = 0; i < L; ++i)
      for (int k = 0; k < L; ++k) {
        ac(i, k) = a(pair_row(L, i, k), c);
        bc(i, k) = b(pair_row(L, i, k), c);
      }
    const Mat xc = ac * bc.transpose();  // sum_k a_ik b_jk
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < L; ++j) x(pair_row(L, i, j), c) = xc(i, j);
  }
  return sigmoid_of(zn * bw.tri_gate.transpose()).cwiseProduct(layer_norm_rows(x) * bw.tri_out.transpose());
}

Mat pair_mlp_increment(const Mat& z, const BlockWeights& bw) {
  const Mat hidden = relu(add_row(layer_norm_rows(z) * bw.pair_mlp_w1.transpose(), bw.pair_mlp_b1));
  return add_row(hidden * bw.pair_mlp_w2.transpose(), bw.pair_mlp_b2);
}

PairUpdate pair_update(const Mat& s, const Mat& z, const BlockWeights& bw, const TrunkDims& dims,
                       bool ablate_seq2pair, bool ablate_triangular) {
  PairUpdate out;
  out.z = z;
  if (!ablate_seq2pair) {
    const Mat inc = seq2pair_increment(s, bw, dims);
    out.seq2pair_norm = inc.norm();
    out.z += inc;
  }
  if (!ablate_triangular) {
    const Mat inc = triangular_increment(out.z, bw, dims);
    out.triangular_norm = inc.norm();
    out.z += inc;
  }
  out.z += pair_mlp_increment(out.z, bw);
  return out;
}

const BlockTrace* TraceRecord::find(int block) const {
  for (const auto& b : blocks)
    if (b.block == block) return &b;
  return nullptr;
}

const BlockTrace& TraceRecord::at(int block) const {
  const BlockTrace* b = find(block);
  if (!b) throw TrunkError("block " + std::to_string(block) + " was not captured");
  return *b;
}

TrunkOutput run_trunk(std::string_view sequence, const TrunkWeights& weights, TrunkHooks* hooks,
                      const RunOptions& options) {
  if (options.recycles < 0 || options.recycles > 3) {
    throw TrunkError("recycles must be in [0, 3], got " + std::to_string(options.recycles));
  }
  const TrunkDims& dims = weights.dims;
  if (static_cast<int>(weights.blocks.size()) != dims.K) throw TrunkError("weights have wrong block count");
  for (int b : options.capture.blocks) {
    if (b < 0 || b >= dims.K) throw TrunkError("capture block " + std::to_string(b) + " outside [0, K)");
  }
  const Reps init = init_reps(sequence, weights, options.max_length);
  const int L = static_cast<int>(init.s.rows());
  TrunkHooks none;
  TrunkHooks& h = hooks ? *hooks : none;

  TrunkOutput out;
  out.trace.length = L;
  Mat s = init.s;
  Mat z = init.z;
  for (int pass = 0; pass <= options.recycles; ++pass) {
    if (pass > 0) {
      s = init.s + layer_norm_rows(s);
      z = init.z + layer_norm_rows(z);
    }
    const bool last = pass == options.recycles;
    for (int k = 0; k < dims.K; ++k) {
      const BlockWeights& bw = weights.blocks[static_cast<std::size_t>(k)];
      h.pre_block(pass, k, s, z);
      SequenceUpdate su = sequence_update(s, z, bw, dims, h.ablated(Pathway::pair2seq, pass, k));
      s = std::move(su.s);
      h.post_sequence_update(pass, k, s);
      PairUpdate pu = pair_update(s, z, bw, dims, h.ablated(Pathway::seq2pair, pass, k),
                                  h.ablated(Pathway::triangular, pass, k));
      z = std::move(pu.z);
      h.post_pair_update(pass, k, z);
      if (last && options.capture.wants(k)) {
        BlockTrace bt;
        bt.block = k;
        bt.bias_norm = su.bias_norm;
        bt.content_norm = su.content_norm;
        bt.seq2pair_norm = pu.seq2pair_norm;
        bt.triangular_norm = pu.triangular_norm;
        if (options.capture.tensors) {
          bt.s = s;
          bt.z = z;
          bt.bias = std::move(su.bias);
          bt.attention = std::move(su.attention);
          bt.has_tensors = true;
        }
        out.trace.blocks.push_back(std::move(bt));
      }
    }
    ++out.passes;
  }
  h.pre_decoder(s, z);
  out.s = std::move(s);
  out.z = std::move(z);
  return out;
}

namespace {

void write_tensor(const std::filesystem::path& path, const std::vector<int>& shape, const Mat& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "shape";
  for (int d : shape) out << ',' << d;
  out << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(r, c));
      if (c) out << ',';
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace

void export_trace(const TraceRecord& trace, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const int L = trace.length;
  for (const auto& b : trace.blocks) {
    if (!b.has_tensors) continue;
    const std::string p = "block" + std::to_string(b.block) + "_";
    write_tensor(dir / (p + "s.csv"), {L, static_cast<int>(b.s.cols())}, b.s);
    write_tensor(dir / (p + "z.csv"), {L, L, static_cast<int>(b.z.cols())}, b.z);
    write_tensor(dir / (p + "bias.csv"), {L, L, static_cast<int>(b.bias.cols())}, b.bias);
    const int H = static_cast<int>(b.attention.size());
    Mat a(static_cast<Eigen::Index>(H) * L, L);
    for (int h = 0; h < H; ++h) a.middleRows(static_cast<Eigen::Index>(h) * L, L) = b.attention[static_cast<std::size_t>(h)];
    write_tensor(dir / (p + "attention.csv"), {H, L, L}, a);
  }
  std::ofstream norms(dir / "norms.csv");
  if (!norms) throw IoError("cannot write norms.csv in " + dir.string());
  norms << "block,bias_norm,content_norm,seq2pair_norm,triangular_norm\n";
  char buf[160];
  for (const auto& b : trace.blocks) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", b.block, b.bias_norm, b.content_norm,
                  b.seq2pair_norm, b.triangular_norm);
    norms << buf;
  }
}

Embedding embed_distances(const Mat& distances) {
  const int L = static_cast<int>(distances.rows());
  if (L < 3 || distances.cols() != L) throw TrunkError("embed_distances needs a square matrix with L >= 3");
  if (!distances.allFinite()) throw NumericsError("embed_distances: non-finite distances");
  const Mat d2 = distances.cwiseProduct(distances);
  const Vec row_mean = d2.rowwise().mean();
  const double total_mean = row_mean.mean();
  Mat gram(L, L);
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j) gram(i, j) = -0.5 * (d2(i, j) - (row_mean(i) + row_mean(j)) + total_mean);

  Embedding out;
  out.coords = Coords::Zero(L, 3);
  if (d2.maxCoeff() <= 0.0) {
    out.degenerate = true;
    return out;
  }
  const SymEig eig = sym_eig(gram);
  if (eig.values(0) <= 0.0) {
    out.degenerate = true;
    return out;
  }
  for (int k = 0; k < 3; ++k) {
    const double lambda = std::max(eig.values(k), 0.0);
    out.coords.col(k) = eig.vectors.col(k) * std::sqrt(lambda);
  }
  if (mean_virtual_torsion(out.coords) < 0.0) out.coords.col(2) *= -1.0;
  return out;
}

double mean_virtual_torsion(const Coords& ca) {
  const Eigen::Index n = ca.rows();
  if (n < 4) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i + 3 < n; ++i) {
    const Vec3 b1 = (ca.row(i + 1) - ca.row(i)).transpose();
    const Vec3 b2 = (ca.row(i + 2) - ca.row(i + 1)).transpose();
    const Vec3 b3 = (ca.row(i + 3) - ca.row(i + 2)).transpose();
    const Vec3 n1 = b1.cross(b2);
    const Vec3 n2 = b2.cross(b3);
    const double y = b2.norm() * b1.dot(n2);
    const double x = n1.dot(n2);
    total += (x == 0.0 && y == 0.0) ? 0.0 : std::atan2(y, x);
  }
  return total / static_cast<double>(n - 3);
}

Mat readout_distances(const Mat& z, int length, const TrunkWeights& weights, Readout readout) {
  const int L = length;
  if (z.rows() != static_cast<Eigen::Index>(L) * L) throw TrunkError("readout_distances: z has wrong row count");
  const Eigen::RowVectorXd w = weights.decoder_w.row(0);
  const double b = weights.decoder_b(0, 0);
  Mat d = Mat::Zero(L, L);
  for (int i = 0; i < L; ++i) {
    for (int j = i + 1; j < L; ++j) {
      const Eigen::RowVectorXd zbar = (z.row(pair_row(L, i, j)) + z.row(pair_row(L, j, i))) * 0.5;
      const double x = zbar.dot(w) + b;
      d(i, j) = d(j, i) = readout == Readout::softplus ? softplus(x) : x;
    }
  }
  return d;
}

namespace {

Vec3 any_perpendicular(const Vec3& t) {
  const Vec3 trial = std::abs(t.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return (trial - trial.dot(t) * t).normalized();
}

}  // namespace

DecodedStructure decode_structure(const Mat& s, const Mat& z, const TrunkWeights& weights,
                                  std::string_view sequence, Readout readout) {
  const int L = static_cast<int>(s.rows());
  if (L < 3) throw TrunkError("decode_structure needs L >= 3");
  if (static_cast<int>(sequence.size()) != L) throw TrunkError("decode_structure: sequence length mismatch");
  DecodedStructure out;
  out.distances = readout_distances(z, L, weights, readout);
  const Embedding emb = embed_distances(out.distances);
  out.degenerate = emb.degenerate;
  out.structure.id = "decoded";
  const Coords& ca = emb.coords;
  for (int i = 0; i < L; ++i) {
    Residue r;
    r.seq_num = i + 1;
    r.amino_acid = sequence[static_cast<std::size_t>(i)];
    const Vec3 c = ca.row(i).transpose();
    r.atom(BackboneAtom::CA) = c;
    if (emb.degenerate) {
      for (auto atom : {BackboneAtom::N, BackboneAtom::C, BackboneAtom::O}) r.atom(atom) = Vec3::Zero();
    } else {
      const Vec3 prev = ca.row(std::max(i - 1, 0)).transpose();
      const Vec3 next = ca.row(std::min(i + 1, L - 1)).transpose();
      Vec3 t = next - prev;
      t = t.norm() > 0.0 ? Vec3(t.normalized()) : Vec3::UnitX();
      Vec3 n = (2.0 * c - prev - next);
      n -= n.dot(t) * t;
      n = n.norm() > 1e-9 ? Vec3(n.normalized()) : any_perpendicular(t);
      r.atom(BackboneAtom::N) = c - 1.2 * t + 0.6 * n;
      r.atom(BackboneAtom::C) = c + 1.2 * t + 0.6 * n;
      r.atom(BackboneAtom::O) = c + 1.2 * t + 1.83 * n;
    }
    out.structure.residues.push_back(std::move(r));
  }
  return out;
}

double mean_pairwise_ca_distance(const Structure& s) {
  const int n = s.size();
  if (n < 2) throw StructureError("mean_pairwise_ca_distance needs two residues");
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) total += (s.residues[static_cast<std::size_t>(i)].ca() - s.residues[static_cast<std::size_t>(j)].ca()).norm();
  return total / (0.5 * n * (n - 1));
}

}  // namespace trunkscope
