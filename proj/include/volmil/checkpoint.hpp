#ifndef VOLMIL_CHECKPOINT_HPP_
#define VOLMIL_CHECKPOINT_HPP_

#include "volmil/errors.hpp"
#include "volmil/parameters.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace volmil {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  enum class Kind : std::uint8_t { parameter = 0, buffer = 1 };
  Kind kind = Kind::parameter;
  std::string name;
  Tensor<float> value;
};

/// Named float32 tensors plus the JSON spec they were built from.
///
/// Layout (little endian): "VMILCKPT", u32 version, u64 FNV-1a of the spec
/// text, u8 precision (0 = float32), u32 spec length, spec text, u64 record
/// count, then per record u8 kind, u32 name length, name, u8 rank, u64 dims,
/// float32 values.
struct Checkpoint {
  nlohmann::json spec;
  std::vector<TensorRecord> records;

  /// Scalars over parameter records.
  Index parameter_scalars() const;
  const TensorRecord* find(const std::string& name, TensorRecord::Kind kind) const;
};

std::string encode_checkpoint(const Checkpoint& c);
/// Throws IoError on bad magic, version, hash or truncation.
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "checkpoint");
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters and buffers whose names start with `prefix`, in store order.
template <typename T>
Checkpoint snapshot(const ParameterStore<T>& store, nlohmann::json spec, std::string_view prefix = "") {
  Checkpoint c;
  c.spec = std::move(spec);
  auto keep = [&](const std::string& n) { return std::string_view(n).substr(0, prefix.size()) == prefix; };
  auto to_float = [](const Tensor<T>& t) {
    Tensor<float> f(t.shape());
    for (Index i = 0; i < t.size(); ++i) f[i] = static_cast<float>(t[i]);
    return f;
  };
  for (const Parameter<T>* p : store.parameters())
    if (keep(p->name)) c.records.push_back({TensorRecord::Kind::parameter, p->name, to_float(p->value)});
  for (const Buffer<T>* b : store.buffers())
    if (keep(b->name)) c.records.push_back({TensorRecord::Kind::buffer, b->name, to_float(b->value)});
  return c;
}

/// Loads every record into the store. Names and shapes must match one to
/// one; the first mismatch is reported and nothing is modified.
template <typename T>
void restore(const Checkpoint& c, ParameterStore<T>& store) {
  std::size_t params = 0, buffers = 0;
  for (const TensorRecord& r : c.records) {
    const bool is_param = r.kind == TensorRecord::Kind::parameter;
    if (is_param ? !store.contains(r.name) : !store.contains_buffer(r.name))
      throw PreconditionError("checkpoint tensor " + r.name + " has no counterpart in the model");
    const Shape& s = is_param ? store.at(r.name).value.shape() : store.buffer(r.name).value.shape();
    if (s != r.value.shape())
      throw PreconditionError("checkpoint tensor " + r.name + " has shape " + shape_string(r.value.shape()) +
                              " but the model expects " + shape_string(s));
    (is_param ? params : buffers) += 1;
  }
  if (params != store.parameters().size() || buffers != store.buffers().size()) {
    for (const Parameter<T>* p : store.parameters())
      if (!c.find(p->name, TensorRecord::Kind::parameter))
        throw PreconditionError("model tensor " + p->name + " missing from checkpoint");
    for (const Buffer<T>* b : store.buffers())
      if (!c.find(b->name, TensorRecord::Kind::buffer))
        throw PreconditionError("model buffer " + b->name + " missing from checkpoint");
  }
  for (const TensorRecord& r : c.records) {
    Tensor<T>& dst = r.kind == TensorRecord::Kind::parameter ? store.at(r.name).value : store.buffer(r.name).value;
    for (Index i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r.value[i]);
  }
}

}  // namespace volmil

#endif  // VOLMIL_CHECKPOINT_HPP_
