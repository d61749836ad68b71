#include "demf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <vector>

#include "demf/error.hpp"

namespace demf {

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw CheckpointMismatch(std::string("truncated checkpoint while reading ") + what);
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void write_checkpoint(std::ostream& out, const ParamStore& store) {
  out.write("DEMF", 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  for (const Parameter& p : store.params()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t e : p.tensor.shape()) put_le<std::uint64_t>(out, e);
    for (Real v : p.tensor.data()) {
      put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
    }
  }
  if (!out) throw Error("failed writing checkpoint");
}

void save_checkpoint(const std::string& path, const ParamStore& store) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path);
  write_checkpoint(out, store);
}

void read_checkpoint(std::istream& in, ParamStore& store) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "DEMF", 4) != 0) {
    throw CheckpointMismatch("bad checkpoint magic");
  }
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointMismatch("unsupported checkpoint version " + std::to_string(version));
  }

  std::map<std::string, std::pair<Shape, std::vector<Real>>> records;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto len = get_le<std::uint32_t>(in, "name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointMismatch("truncated parameter name");
    const auto rank = get_le<std::uint32_t>(in, "rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(get_le<std::uint64_t>(in, "extent"));
    std::vector<Real> values(numel_of(shape));
    for (Real& v : values) {
      v = static_cast<Real>(std::bit_cast<double>(get_le<std::uint64_t>(in, "payload")));
    }
    if (!records.emplace(name, std::make_pair(std::move(shape), std::move(values))).second) {
      throw CheckpointMismatch("duplicate parameter '" + name + "' in checkpoint");
    }
  }

  if (records.size() != store.params().size()) {
    throw CheckpointMismatch("checkpoint holds " + std::to_string(records.size()) +
                             " parameters, model has " + std::to_string(store.params().size()));
  }
  for (const Parameter& p : store.params()) {
    auto it = records.find(p.name);
    if (it == records.end()) throw CheckpointMismatch("checkpoint lacks parameter '" + p.name + "'");
    if (it->second.first != p.tensor.shape()) {
      throw CheckpointMismatch("parameter '" + p.name + "' has shape " +
                               shape_to_string(it->second.first) + " in checkpoint, model expects " +
                               shape_to_string(p.tensor.shape()));
    }
  }
  for (const Parameter& p : store.params()) {
    Tensor t = p.tensor;
    const auto& values = records.at(p.name).second;
    std::copy(values.begin(), values.end(), t.data_mut().begin());
  }
}

void load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointMismatch("cannot open checkpoint: " + path);
  read_checkpoint(in, store);
}

}  // namespace demf
