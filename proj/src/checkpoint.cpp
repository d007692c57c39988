#include "volmil/checkpoint.hpp"

#include "volmil/binary_io.hpp"
#include "volmil/rng.hpp"

namespace volmil {

namespace {
constexpr char kMagic[] = "VMILCKPT";
}

Index Checkpoint::parameter_scalars() const {
  Index n = 0;
  for (const TensorRecord& r : records)
    if (r.kind == TensorRecord::Kind::parameter) n += r.value.size();
  return n;
}

const TensorRecord* Checkpoint::find(const std::string& name, TensorRecord::Kind kind) const {
  for (const TensorRecord& r : records)
    if (r.kind == kind && r.name == name) return &r;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& c) {
  const std::string spec = c.spec.dump();
  std::string out(kMagic, 8);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, fnv1a64(spec));
  put_u8(out, 0);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(spec.size()));
  out += spec;
  put_le<std::uint64_t>(out, c.records.size());
  for (const TensorRecord& r : c.records) {
    put_u8(out, static_cast<std::uint8_t>(r.kind));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_u8(out, static_cast<std::uint8_t>(r.value.rank()));
    for (Index d : r.value.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out += encode_f32_le(r.value.data(), r.value.size());
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source) {
  ByteReader in(bytes, source);
  if (in.str(8) != std::string(kMagic, 8)) throw IoError(source + ": not a checkpoint (bad magic)");
  const auto version = in.le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(source + ": unsupported checkpoint version " + std::to_string(version));
  const auto hash = in.le<std::uint64_t>();
  if (in.le<std::uint8_t>() != 0) throw IoError(source + ": unsupported precision code");
  const std::string spec = in.str(in.le<std::uint32_t>());
  if (fnv1a64(spec) != hash) throw IoError(source + ": spec hash mismatch");
  Checkpoint c;
  try {
    c.spec = nlohmann::json::parse(spec);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(source + ": spec is not valid JSON: " + e.what());
  }
  const auto count = in.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord r;
    const auto kind = in.le<std::uint8_t>();
    if (kind > 1) throw IoError(source + ": bad record kind");
    r.kind = static_cast<TensorRecord::Kind>(kind);
    r.name = in.str(in.le<std::uint32_t>());
    Shape shape(in.le<std::uint8_t>());
    for (Index& d : shape) d = static_cast<Index>(in.le<std::uint64_t>());
    r.value = Tensor<float>(shape);
    decode_f32_le(in.str(static_cast<std::size_t>(r.value.size()) * 4), r.value.data(), r.value.size(), source);
    c.records.push_back(std::move(r));
  }
  if (!in.done()) throw IoError(source + ": trailing bytes");
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_binary_file(path, encode_checkpoint(c));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_binary_file(path), path.string());
}

}  // namespace volmil
