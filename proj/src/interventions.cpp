#include "trunkscope/interventions.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace trunkscope {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string range_text(const IndexRange& r) {
  return "[" + std::to_string(r.begin) + ", " + std::to_string(r.end) + ")";
}

}  // namespace

std::string_view track_name(Track t) {
  return t == Track::s ? "s" : "z";
}

Track parse_track(std::string_view name) {
  if (name == "s") return Track::s;
  if (name == "z") return Track::z;
  throw InterventionError("unknown track '" + std::string(name) + "'");
}

std::string_view mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::seq_rows:
      return "seq_rows";
    case MaskKind::pair_intra:
      return "pair_intra";
    case MaskKind::pair_touch:
      return "pair_touch";
    case MaskKind::pair_pairs:
      return "pair_pairs";
  }
  return "?";
}

bool RegionMask::in_region(int i) const {
  return std::any_of(ranges.begin(), ranges.end(), [i](const IndexRange& r) { return r.contains(i); });
}

int range_index(const RegionMask& mask, int i) {
  for (std::size_t k = 0; k < mask.ranges.size(); ++k)
    if (mask.ranges[k].contains(i)) return static_cast<int>(k);
  return -1;
}

std::vector<int> masked_rows(const RegionMask& mask, int length) {
  if (mask.kind != MaskKind::seq_rows) throw InterventionError("masked_rows needs a seq_rows mask");
  std::vector<int> rows;
  for (int i = 0; i < length; ++i)
    if (mask.in_region(i)) rows.push_back(i);
  return rows;
}

BoolMat masked_pairs(const RegionMask& mask, int length) {
  BoolMat m = BoolMat::Constant(length, length, false);
  switch (mask.kind) {
    case MaskKind::seq_rows:
      throw InterventionError("masked_pairs needs a pair mask");
    case MaskKind::pair_intra:
    case MaskKind::pair_touch:
      for (int i = 0; i < length; ++i)
        for (int j = 0; j < length; ++j) {
          const bool a = mask.in_region(i), b = mask.in_region(j);
          m(i, j) = mask.kind == MaskKind::pair_intra ? (a && b) : (a || b);
        }
      break;
    case MaskKind::pair_pairs:
      for (const auto& [i, j] : mask.pairs) {
        if (i < 0 || j < 0 || i >= length || j >= length) {
          throw InterventionError("pair (" + std::to_string(i) + ", " + std::to_string(j) + ") outside length " +
                                  std::to_string(length));
        }
        m(i, j) = m(j, i) = true;
      }
      break;
  }
  return m;
}

int mask_size(const RegionMask& mask, int length) {
  if (mask.kind == MaskKind::seq_rows) return static_cast<int>(masked_rows(mask, length).size());
  return static_cast<int>(masked_pairs(mask, length).count());
}

Mat apply_patch(const Mat& current, int length, const Patch& patch) {
  const int L = length;
  const int Ld = patch.donor_length;
  const int off = patch.align.offset();
  auto misfit = [&](int i) {
    return InterventionError("patch entry " + std::to_string(i) + " maps to donor index " + std::to_string(i + off) +
                             " outside donor length " + std::to_string(Ld) + " (target anchor " +
                             std::to_string(patch.align.target_anchor) + ", donor anchor " +
                             std::to_string(patch.align.donor_anchor) + ")");
  };
  Mat out = current;
  if (patch.track == Track::s) {
    for (int i : masked_rows(patch.mask, L)) {
      if (i + off < 0 || i + off >= Ld) throw misfit(i);
      out.row(i) = patch.donor.row(i + off);
    }
  } else {
    const BoolMat m = masked_pairs(patch.mask, L);
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < L; ++j) {
        if (!m(i, j)) continue;
        if (i + off < 0 || i + off >= Ld) throw misfit(i);
        if (j + off < 0 || j + off >= Ld) throw misfit(j);
        out.row(pair_row(L, i, j)) = patch.donor.row(pair_row(Ld, i + off, j + off));
      }
  }
  return out;
}

Mat apply_steer(const Mat& current, int length, const Steer& steer) {
  if (!(steer.sigma > 0.0)) throw InterventionError("steer sigma must be measured and positive");
  if (steer.direction.size() != current.cols()) throw InterventionError("steer direction width mismatch");
  const int L = length;
  auto sign_of = [&](int range) {
    if (range < 0 || static_cast<std::size_t>(range) >= steer.signs.size()) return 1.0;
    return steer.signs[static_cast<std::size_t>(range)];
  };
  const Eigen::RowVectorXd delta = steer.strength * steer.sigma * steer.direction.transpose();
  Mat out = current;
  if (steer.strength == 0.0) return out;
  if (steer.track == Track::s) {
    for (int i : masked_rows(steer.mask, L)) out.row(i) += sign_of(range_index(steer.mask, i)) * delta;
  } else {
    const BoolMat m = masked_pairs(steer.mask, L);
    for (int i = 0; i < L; ++i)
      for (int j = 0; j < L; ++j) {
        if (!m(i, j)) continue;
        int range = 0;
        if (steer.mask.kind != MaskKind::pair_pairs) {
          range = range_index(steer.mask, i);
          if (range < 0) range = range_index(steer.mask, j);
        }
        out.row(pair_row(L, i, j)) += sign_of(range) * delta;
      }
  }
  return out;
}

bool path_ablated(const InterventionPlan& plan, Pathway path, int block) {
  for (const auto& d : plan.directives) {
    if (const auto* a = std::get_if<AblatePath>(&d); a && a->path == path && a->window.contains(block)) return true;
    if (const auto* f = std::get_if<FreezeSeq2Pair>(&d); f && path == Pathway::seq2pair && f->window.contains(block)) {
      return true;
    }
  }
  return false;
}

void scale_pre_decoder(Mat& s, Mat& z, const Scale& scale) {
  if (!std::isfinite(scale.factor) || scale.factor < 0.0) throw InterventionError("scale factor must be finite and >= 0");
  if (scale.factor == 1.0) return;
  (scale.target == ScaleTarget::z_pre_decoder ? z : s) *= scale.factor;
}

void validate_plan(const InterventionPlan& plan, const TrunkDims& dims, int length) {
  const int L = length;
  auto check_window = [&](const Window& w, const char* what) {
    if (w.begin < 0 || w.end > dims.K || w.begin > w.end) {
      throw InterventionError(std::string(what) + " window [" + std::to_string(w.begin) + ", " + std::to_string(w.end) +
                              ") outside [0, " + std::to_string(dims.K) + ")");
    }
  };
  auto check_mask = [&](const RegionMask& m, Track track, const char* what) {
    if ((track == Track::s) == m.is_pair_mask()) {
      throw InterventionError(std::string(what) + ": mask kind " + std::string(mask_kind_name(m.kind)) +
                              " does not fit track " + std::string(track_name(track)));
    }
    for (const auto& r : m.ranges) {
      if (r.begin < 0 || r.end > L || r.begin > r.end) {
        throw InterventionError(std::string(what) + ": region " + range_text(r) + " outside length " + std::to_string(L));
      }
    }
    if (m.kind == MaskKind::pair_pairs) masked_pairs(m, L);
  };
  for (std::size_t n = 0; n < plan.directives.size(); ++n) {
    std::visit(overloaded{
                   [&](const Patch& p) {
                     if (p.block < 0 || p.block >= dims.K) {
                       throw InterventionError("patch block " + std::to_string(p.block) + " outside [0, " +
                                               std::to_string(dims.K) + ")");
                     }
                     check_mask(p.mask, p.track, "patch");
                     const int width = p.track == Track::s ? dims.d_s : dims.d_z;
                     const Eigen::Index rows = p.track == Track::s
                                                   ? p.donor_length
                                                   : static_cast<Eigen::Index>(p.donor_length) * p.donor_length;
                     if (p.donor.rows() != rows || p.donor.cols() != width) {
                       throw InterventionError("patch donor shape " + std::to_string(p.donor.rows()) + "x" +
                                               std::to_string(p.donor.cols()) + " does not match donor length " +
                                               std::to_string(p.donor_length));
                     }
                     // Surface alignment misfits before any compute.
                     apply_patch(p.track == Track::s ? Mat::Zero(L, width)
                                                     : Mat::Zero(static_cast<Eigen::Index>(L) * L, width),
                                 L, p);
                   },
                   [&](const AblatePath& a) { check_window(a.window, "ablate"); },
                   [&](const FreezeSeq2Pair& f) { check_window(f.window, "freeze"); },
                   [&](const Steer& s) {
                     check_window(s.window, "steer");
                     check_mask(s.mask, s.track, "steer");
                     const int width = s.track == Track::s ? dims.d_s : dims.d_z;
                     if (s.direction.size() != width) throw InterventionError("steer direction width mismatch");
                     if (std::abs(s.direction.norm() - 1.0) > 1e-9) throw InterventionError("steer direction is not unit norm");
                     if (!(s.sigma > 0.0)) throw InterventionError("steer sigma must be measured and positive");
                     if (!std::isfinite(s.strength)) throw InterventionError("steer strength must be finite");
                   },
                   [&](const Scale& s) {
                     if (!std::isfinite(s.factor) || s.factor < 0.0) {
                       throw InterventionError("scale factor must be finite and >= 0");
                     }
                   },
               },
               plan.directives[n]);
  }
}

void PlanHooks::apply(Track track, int block, Mat& values) const {
  for (const auto& d : plan_.directives) {
    if (const auto* p = std::get_if<Patch>(&d); p && p->track == track && p->block == block) {
      values = apply_patch(values, length_, *p);
    } else if (const auto* s = std::get_if<Steer>(&d); s && s->track == track && s->window.contains(block)) {
      values = apply_steer(values, length_, *s);
    }
  }
}

void PlanHooks::post_sequence_update(int, int block, Mat& s) {
  apply(Track::s, block, s);
}

void PlanHooks::post_pair_update(int, int block, Mat& z) {
  apply(Track::z, block, z);
}

bool PlanHooks::ablated(Pathway path, int, int block) const {
  return path_ablated(plan_, path, block);
}

void PlanHooks::pre_decoder(Mat& s, Mat& z) {
  for (const auto& d : plan_.directives)
    if (const auto* sc = std::get_if<Scale>(&d)) scale_pre_decoder(s, z, *sc);
}

TrunkOutput run_with_plan(std::string_view sequence, const TrunkWeights& weights, const InterventionPlan& plan,
                          const RunOptions& options) {
  const int L = static_cast<int>(sequence.size());
  validate_plan(plan, weights.dims, L);
  PlanHooks hooks(plan, L);
  return run_trunk(sequence, weights, &hooks, options);
}

// --- text form ---------------------------------------------------------------

namespace {

std::string fmt_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string window_text(const Window& w) {
  return std::to_string(w.begin) + ":" + std::to_string(w.end);
}

std::string mask_text(const RegionMask& m) {
  std::string out(mask_kind_name(m.kind));
  out += ' ';
  bool first = true;
  if (m.kind == MaskKind::pair_pairs) {
    for (const auto& [i, j] : m.pairs) {
      out += (first ? "" : ",") + std::to_string(i) + "/" + std::to_string(j);
      first = false;
    }
  } else {
    for (const auto& r : m.ranges) {
      out += (first ? "" : ",") + std::to_string(r.begin) + ":" + std::to_string(r.end);
      first = false;
    }
  }
  return out;
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : text) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

int to_int(std::string_view text, const std::string& field) {
  int value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw InterventionError("bad integer for " + field + ": '" + std::string(text) + "'");
  return value;
}

double to_real(std::string_view text, const std::string& field) {
  double value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw InterventionError("bad number for " + field + ": '" + std::string(text) + "'");
  return value;
}

std::pair<int, int> to_span(std::string_view text, char sep, const std::string& field) {
  const auto parts = split(text, sep);
  if (parts.size() != 2) throw InterventionError("bad span for " + field + ": '" + std::string(text) + "'");
  return {to_int(parts[0], field), to_int(parts[1], field)};
}

Window parse_window(const std::string& text, const std::string& field) {
  const auto [b, e] = to_span(text, ':', field);
  return {b, e};
}

RegionMask parse_mask(const std::string& text, const std::string& field) {
  const auto space = text.find(' ');
  const std::string kind = text.substr(0, space);
  const std::string body = space == std::string::npos ? "" : text.substr(space + 1);
  RegionMask m;
  if (kind == "seq_rows") m.kind = MaskKind::seq_rows;
  else if (kind == "pair_intra") m.kind = MaskKind::pair_intra;
  else if (kind == "pair_touch") m.kind = MaskKind::pair_touch;
  else if (kind == "pair_pairs") m.kind = MaskKind::pair_pairs;
  else throw InterventionError("unknown mask kind '" + kind + "' in " + field);
  if (body.empty()) return m;
  for (const auto& item : split(body, ',')) {
    if (m.kind == MaskKind::pair_pairs) {
      m.pairs.push_back(to_span(item, '/', field));
    } else {
      const auto [b, e] = to_span(item, ':', field);
      m.ranges.push_back({b, e});
    }
  }
  return m;
}

std::vector<double> parse_reals(const std::string& text, const std::string& field) {
  std::vector<double> out;
  if (text.empty()) return out;
  for (const auto& item : split(text, ',')) out.push_back(to_real(item, field));
  return out;
}

}  // namespace

std::string plan_to_text(const InterventionPlan& plan) {
  std::ostringstream out;
  for (std::size_t n = 0; n < plan.directives.size(); ++n) {
    out << "[directive" << n << "]\n";
    std::visit(overloaded{
                   [&](const Patch& p) {
                     if (p.donor_ref.empty()) throw InterventionError("patch has no donor run-id to serialize");
                     out << "type = patch\nblock = " << p.block << "\ntrack = " << track_name(p.track)
                         << "\nmask = " << mask_text(p.mask) << "\ndonor = " << p.donor_ref
                         << "\ntarget_anchor = " << p.align.target_anchor << "\ndonor_anchor = " << p.align.donor_anchor
                         << "\n";
                   },
                   [&](const AblatePath& a) {
                     out << "type = ablate\npath = " << pathway_name(a.path) << "\nwindow = " << window_text(a.window)
                         << "\n";
                   },
                   [&](const FreezeSeq2Pair& f) {
                     out << "type = freeze_seq2pair\nwindow = " << window_text(f.window) << "\n";
                   },
                   [&](const Steer& s) {
                     out << "type = steer\nwindow = " << window_text(s.window) << "\ntrack = " << track_name(s.track)
                         << "\nmask = " << mask_text(s.mask) << "\nstrength = " << fmt_real(s.strength)
                         << "\nsigma = " << fmt_real(s.sigma) << "\nsigns = ";
                     for (std::size_t k = 0; k < s.signs.size(); ++k) out << (k ? "," : "") << fmt_real(s.signs[k]);
                     out << "\ndirection = ";
                     for (Eigen::Index k = 0; k < s.direction.size(); ++k) out << (k ? "," : "") << fmt_real(s.direction(k));
                     out << "\n";
                   },
                   [&](const Scale& s) {
                     out << "type = scale\ntarget = "
                         << (s.target == ScaleTarget::z_pre_decoder ? "z_pre_decoder" : "s_pre_decoder")
                         << "\nfactor = " << fmt_real(s.factor) << "\n";
                   },
               },
               plan.directives[n]);
    out << "\n";
  }
  return out.str();
}

InterventionPlan plan_from_text(std::string_view text, const DonorResolver& resolve) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw InterventionError(std::string("plan text: ") + e.what());
  }
  InterventionPlan plan;
  for (const auto& [section, node] : tree) {
    auto get = [&, &section = section, &node = node](const char* key) {
      const auto v = node.get_optional<std::string>(pt::ptree::path_type(key, '\0'));
      if (!v) throw InterventionError(section + "." + key + " is required");
      return *v;
    };
    const std::string where = section + ".";
    const std::string type = get("type");
    if (type == "patch") {
      Patch p;
      p.block = to_int(get("block"), where + "block");
      p.track = parse_track(get("track"));
      p.mask = parse_mask(get("mask"), where + "mask");
      p.donor_ref = get("donor");
      p.align.target_anchor = to_int(get("target_anchor"), where + "target_anchor");
      p.align.donor_anchor = to_int(get("donor_anchor"), where + "donor_anchor");
      if (!resolve) throw InterventionError("plan has patches but no donor resolver");
      auto [donor, length] = resolve(p.donor_ref, p.block, p.track);
      p.donor = std::move(donor);
      p.donor_length = length;
      plan.add(std::move(p));
    } else if (type == "ablate") {
      plan.add(AblatePath{parse_pathway(get("path")), parse_window(get("window"), where + "window")});
    } else if (type == "freeze_seq2pair") {
      plan.add(FreezeSeq2Pair{parse_window(get("window"), where + "window")});
    } else if (type == "steer") {
      Steer s;
      s.window = parse_window(get("window"), where + "window");
      s.track = parse_track(get("track"));
      s.mask = parse_mask(get("mask"), where + "mask");
      s.strength = to_real(get("strength"), where + "strength");
      s.sigma = to_real(get("sigma"), where + "sigma");
      s.signs = parse_reals(node.get<std::string>("signs", ""), where + "signs");
      const auto dir = parse_reals(get("direction"), where + "direction");
      s.direction = Eigen::Map<const Vec>(dir.data(), static_cast<Eigen::Index>(dir.size()));
      plan.add(std::move(s));
    } else if (type == "scale") {
      const std::string target = get("target");
      Scale s;
      if (target == "z_pre_decoder") s.target = ScaleTarget::z_pre_decoder;
      else if (target == "s_pre_decoder") s.target = ScaleTarget::s_pre_decoder;
      else throw InterventionError("unknown scale target '" + target + "'");
      s.factor = to_real(get("factor"), where + "factor");
      plan.add(s);
    } else {
      throw InterventionError("unknown directive type '" + type + "' in " + section);
    }
  }
  return plan;
}

}  // namespace trunkscope
