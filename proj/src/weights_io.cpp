#include "trunkscope/io.hpp"
#include "trunkscope/trunk.hpp"

namespace trunkscope {

namespace {

constexpr std::string_view kMagic = "TSW1";

class Reader : public ByteReader<WeightsTruncatedError> {
 public:
  explicit Reader(std::string_view bytes) : ByteReader(bytes, "weights file") {}
};

}  // namespace

std::string serialize_weights(const TrunkWeights& weights) {
  validate_weights(weights);
  TrunkWeights& w = const_cast<TrunkWeights&>(weights);
  const auto slots = tensor_slots(w);
  std::string out;
  out.append(kMagic);
  put_le<std::uint32_t>(out, kWeightsVersion);
  const TrunkDims& d = weights.dims;
  for (int v : {d.K, d.H, d.d_s, d.d_z, d.d, d.d_h, d.clip}) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(slots.size()));
  for (const auto& slot : slots) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(slot.name.size()));
    out.append(slot.name);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(slot.value->rows()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(slot.value->cols()));
    for (Eigen::Index r = 0; r < slot.value->rows(); ++r)
      for (Eigen::Index c = 0; c < slot.value->cols(); ++c) put_f64(out, (*slot.value)(r, c));
  }
  return out;
}

TrunkWeights deserialize_weights(std::string_view bytes) {
  Reader in(bytes);
  if (bytes.size() < kMagic.size()) throw WeightsTruncatedError("weights file shorter than its magic");
  if (in.take(kMagic.size(), "magic") != kMagic) throw WeightsFormatError("bad magic: not a TSW1 weights file");
  const auto version = in.le<std::uint32_t>("version");
  if (version != kWeightsVersion) {
    throw WeightsFormatError("unsupported weights version " + std::to_string(version));
  }
  TrunkWeights w;
  TrunkDims& d = w.dims;
  for (int* v : {&d.K, &d.H, &d.d_s, &d.d_z, &d.d, &d.d_h, &d.clip}) {
    *v = static_cast<int>(in.le<std::uint32_t>("header dims"));
  }
  if (d.K < 1 || d.H < 1 || d.d_s < 1 || d.d_z < 1 || d.d < 1 || d.d_h < 1 || d.clip < 1 || d.K > 4096) {
    throw WeightsFormatError("header dimensions out of range");
  }
  const auto count = in.le<std::uint32_t>("tensor count");
  w.blocks.resize(static_cast<std::size_t>(d.K));
  const auto slots = tensor_slots(w);
  const std::size_t total = std::max<std::size_t>(count, slots.size());
  for (std::size_t t = 0; t < total; ++t) {
    if (t >= count) throw WeightsShapeError(slots[t].name, "missing from file (header K=" + std::to_string(d.K) + ")");
    const auto name_len = in.le<std::uint16_t>("tensor name length");
    const std::string name(in.take(name_len, "tensor name"));
    const auto rows = in.le<std::uint32_t>("tensor rows");
    const auto cols = in.le<std::uint32_t>("tensor cols");
    if (t >= slots.size()) throw WeightsShapeError(name, "not expected for header K=" + std::to_string(d.K));
    const TensorSlot& slot = slots[t];
    if (name != slot.name) throw WeightsShapeError(slot.name, "found '" + name + "' in its place");
    if (static_cast<int>(rows) != slot.rows || static_cast<int>(cols) != slot.cols) {
      throw WeightsShapeError(slot.name, "expected " + std::to_string(slot.rows) + "x" + std::to_string(slot.cols) +
                                             ", file has " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    slot.value->resize(slot.rows, slot.cols);
    for (int r = 0; r < slot.rows; ++r)
      for (int c = 0; c < slot.cols; ++c) (*slot.value)(r, c) = in.f64("tensor data");
  }
  if (in.remaining() != 0) throw WeightsFormatError(std::to_string(in.remaining()) + " trailing bytes after tensors");
  return w;
}

void save_weights(const TrunkWeights& weights, const std::filesystem::path& path) {
  write_file(path, serialize_weights(weights));
}

TrunkWeights load_weights(const std::filesystem::path& path) {
  return deserialize_weights(read_file(path));
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t weights_digest(const TrunkWeights& weights) {
  return fnv1a64(serialize_weights(weights));
}

}  // namespace trunkscope
