// SPDX-License-Identifier: Apache-2.0
#include "layalign/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>
#include <set>

#include "layalign/data.hpp"

namespace layalign {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace {

constexpr char kMagic[8] = {'L', 'A', 'Y', 'A', 'L', 'I', 'G', 'N'};

class Writer {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof v);
  }
  void put_string32(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void put_string64(const std::string& s) {
    put(static_cast<std::uint64_t>(s.size()));
    out_ += s;
  }
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, in_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw InputError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                       std::to_string(pos_));
    }
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.config_digest.size() != 64) throw ContractError("config digest must be 64 characters");
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.put(kCheckpointVersion);
  w.put_string32(ckpt.stage);
  w.put(ckpt.step);
  w.raw(ckpt.config_digest.data(), 64);
  w.put_string64(ckpt.metadata);
  w.put(static_cast<std::uint64_t>(ckpt.tensors.size()));
  std::uint64_t offset = 0;
  std::set<std::string> seen;
  for (const auto& t : ckpt.tensors) {
    if (!seen.insert(t.name).second) throw ContractError("duplicate checkpoint tensor " + t.name);
    if (numel(t.shape) != t.data.size()) {
      throw ContractError("checkpoint tensor " + t.name + " data does not match its shape");
    }
    w.put_string32(t.name);
    w.put(std::uint8_t{0});
    w.put(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.put(static_cast<std::uint64_t>(d));
    w.put(offset);
    offset += t.data.size() * sizeof(float);
  }
  w.put(offset);
  for (const auto& t : ckpt.tensors) w.raw(t.data.data(), t.data.size() * sizeof(float));
  return std::move(w.str());
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
    throw InputError("not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.stage = r.bytes(r.get<std::uint32_t>("stage length"), "stage");
  c.step = r.get<std::uint64_t>("step");
  c.config_digest = r.bytes(64, "config digest");
  c.metadata = r.bytes(r.get<std::uint64_t>("metadata length"), "metadata");
  const auto count = r.get<std::uint64_t>("tensor count");
  if (count > bytes.size()) throw InputError("checkpoint tensor count is implausible");
  std::vector<std::uint64_t> offsets;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.bytes(r.get<std::uint32_t>("tensor name length"), "tensor name");
    if (r.get<std::uint8_t>("dtype") != 0) throw InputError("tensor " + t.name + " has unknown dtype");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw InputError("tensor " + t.name + " has implausible rank");
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint64_t>("dimension"));
    offsets.push_back(r.get<std::uint64_t>("offset"));
    c.tensors.push_back(std::move(t));
  }
  const auto payload = r.get<std::uint64_t>("payload size");
  if (payload != r.remaining()) {
    throw InputError("checkpoint payload is " + std::to_string(r.remaining()) + " bytes, header says " +
                     std::to_string(payload));
  }
  const std::size_t base = r.pos();
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    auto& t = c.tensors[i];
    const std::size_t n = numel(t.shape);
    if (offsets[i] != expected || offsets[i] + n * sizeof(float) > payload) {
      throw InputError("tensor " + t.name + " has an inconsistent payload offset");
    }
    t.data.resize(n);
    std::memcpy(t.data.data(), bytes.data() + base + offsets[i], n * sizeof(float));
    expected += n * sizeof(float);
  }
  if (expected != payload) throw InputError("checkpoint payload has trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return parse_checkpoint(read_file(path));
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

template <class T>
std::vector<CheckpointTensor> capture_tensors(const NamedParams<T>& params) {
  std::vector<CheckpointTensor> out;
  for (const auto& [name, t] : params) {
    CheckpointTensor c;
    c.name = name;
    c.shape = t.shape();
    c.data.reserve(t.numel());
    for (T v : t.data()) c.data.push_back(static_cast<float>(v));
    out.push_back(std::move(c));
  }
  return out;
}

template <class T>
void apply_tensors(const Checkpoint& ckpt, const NamedParams<T>& params, bool exact) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& [name, t] : params) {
    if (!by_name.emplace(name, &t).second) throw ContractError("duplicate parameter " + name);
  }
  std::set<std::string> used;
  for (const auto& c : ckpt.tensors) {
    const auto it = by_name.find(c.name);
    if (it == by_name.end()) throw InputError("checkpoint tensor " + c.name + " matches no parameter");
    if (!used.insert(c.name).second) throw InputError("checkpoint tensor " + c.name + " appears twice");
    if (it->second->shape() != c.shape) {
      throw InputError("checkpoint tensor " + c.name + " has shape " + to_string(c.shape) +
                       ", parameter has " + to_string(it->second->shape()));
    }
  }
  if (exact && used.size() != by_name.size()) {
    std::string missing;
    for (const auto& [name, t] : by_name) {
      if (!used.count(name)) missing += (missing.empty() ? "" : ", ") + name;
    }
    throw InputError("checkpoint lacks parameters: " + missing);
  }
  for (const auto& c : ckpt.tensors) {
    Tensor<T> t = *by_name.at(c.name);
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < c.data.size(); ++i) dst[i] = static_cast<T>(c.data[i]);
  }
}

template std::vector<CheckpointTensor> capture_tensors(const NamedParams<float>&);
template std::vector<CheckpointTensor> capture_tensors(const NamedParams<double>&);
template void apply_tensors(const Checkpoint&, const NamedParams<float>&, bool);
template void apply_tensors(const Checkpoint&, const NamedParams<double>&, bool);

}  // namespace layalign
