#pragma once

// Binary checkpoints.
//
// Layout (little-endian):
//   magic    "GSRCH\0" then u16 version
//   u32      section count
//   table    per section: u16 name length, name bytes, u8 kind, u32 rank, u64 dims[rank], u64 offset, u64 bytes
//   payload  section data at the recorded offsets (from file start)
// Kinds: 0 = f32 array, 1 = f64 array, 2 = text, 3 = u64 scalar.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gsearch/data.hpp"
#include "gsearch/error.hpp"
#include "gsearch/export.hpp"
#include "gsearch/network.hpp"
#include "gsearch/optim.hpp"

namespace gsearch {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[6] = {'G', 'S', 'R', 'C', 'H', '\0'};

struct Checkpoint {
  struct F32 {
    Shape shape;
    std::vector<float> data;
    bool operator==(const F32&) const = default;
  };
  struct F64 {
    Shape shape;
    std::vector<double> data;
    bool operator==(const F64&) const = default;
  };
  using Value = std::variant<F32, F64, std::string, std::uint64_t>;

  std::uint16_t version = kCheckpointVersion;
  std::map<std::string, Value> sections;

  bool has(const std::string& name) const { return sections.count(name) > 0; }

  template <typename V>
  const V& get(const std::string& name) const {
    auto it = sections.find(name);
    if (it == sections.end()) throw FormatError("checkpoint has no section '" + name + "'");
    if (auto* v = std::get_if<V>(&it->second)) return *v;
    throw FormatError("checkpoint section '" + name + "' has an unexpected type");
  }
  const std::string& text(const std::string& name) const { return get<std::string>(name); }
  std::uint64_t u64(const std::string& name) const { return get<std::uint64_t>(name); }

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

template <typename V>
void put(std::string& out, V v) {
  char b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  out.append(b, sizeof(V));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : b_(bytes), path_(std::move(path)) {}
  template <typename V>
  V get() {
    need(sizeof(V), "header");
    V v;
    std::memcpy(&v, b_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string str(std::size_t n) {
    need(n, "header");
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const std::string& what) const {
    if (pos_ + n > b_.size())
      throw FormatError(path_ + ": truncated " + what + " (need " + std::to_string(pos_ + n) + " bytes, file has " +
                        std::to_string(b_.size()) + ")");
  }

 private:
  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  struct Entry {
    std::string name;
    std::uint8_t kind;
    Shape shape;
    std::string payload;
  };
  std::vector<Entry> entries;
  for (auto& [name, value] : ck.sections) {
    Entry e{name, 0, {}, {}};
    if (auto* f = std::get_if<Checkpoint::F32>(&value)) {
      e.kind = 0;
      e.shape = f->shape;
      e.payload.assign(reinterpret_cast<const char*>(f->data.data()), f->data.size() * sizeof(float));
    } else if (auto* d = std::get_if<Checkpoint::F64>(&value)) {
      e.kind = 1;
      e.shape = d->shape;
      e.payload.assign(reinterpret_cast<const char*>(d->data.data()), d->data.size() * sizeof(double));
    } else if (auto* s = std::get_if<std::string>(&value)) {
      e.kind = 2;
      e.payload = *s;
    } else {
      e.kind = 3;
      detail::put(e.payload, std::get<std::uint64_t>(value));
    }
    entries.push_back(std::move(e));
  }
  std::size_t table = sizeof(kCheckpointMagic) + 2 + 4;
  for (auto& e : entries) table += 2 + e.name.size() + 1 + 4 + 8 * e.shape.size() + 8 + 8;
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, ck.version);
  detail::put(out, static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = table;
  for (auto& e : entries) {
    detail::put(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    detail::put(out, e.kind);
    detail::put(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put(out, static_cast<std::uint64_t>(d));
    detail::put(out, offset);
    detail::put(out, static_cast<std::uint64_t>(e.payload.size()));
    offset += e.payload.size();
  }
  for (auto& e : entries) out += e.payload;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  if (bytes.size() < sizeof(kCheckpointMagic) + 2 || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw FormatError(origin + ": not a checkpoint (bad magic); unsupported format or version");
  detail::Reader r(bytes, origin);
  r.str(sizeof(kCheckpointMagic));
  Checkpoint ck;
  ck.version = r.get<std::uint16_t>();
  if (ck.version != kCheckpointVersion)
    throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(ck.version) + " (this reader supports " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    std::string name = r.str(len);
    const auto kind = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const auto offset = r.get<std::uint64_t>();
    const auto size = r.get<std::uint64_t>();
    if (offset + size > bytes.size())
      throw FormatError(origin + ": truncated section '" + name + "' (needs bytes up to " + std::to_string(offset + size) +
                        ", file has " + std::to_string(bytes.size()) + ")");
    const char* p = bytes.data() + offset;
    auto check_len = [&](std::size_t elem) {
      if (size != shape_size(shape) * elem) throw FormatError(origin + ": section '" + name + "' has inconsistent length");
    };
    switch (kind) {
      case 0: {
        check_len(sizeof(float));
        Checkpoint::F32 f{shape, std::vector<float>(shape_size(shape))};
        std::memcpy(f.data.data(), p, size);
        ck.sections[name] = std::move(f);
        break;
      }
      case 1: {
        check_len(sizeof(double));
        Checkpoint::F64 f{shape, std::vector<double>(shape_size(shape))};
        std::memcpy(f.data.data(), p, size);
        ck.sections[name] = std::move(f);
        break;
      }
      case 2:
        ck.sections[name] = std::string(p, size);
        break;
      case 3: {
        if (size != 8) throw FormatError(origin + ": section '" + name + "' has inconsistent length");
        std::uint64_t v;
        std::memcpy(&v, p, 8);
        ck.sections[name] = v;
        break;
      }
      default:
        throw FormatError(origin + ": section '" + name + "' has unknown kind " + std::to_string(kind));
    }
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  const auto bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const auto raw = detail::read_file(path);
  return deserialize_checkpoint(std::string(raw.begin(), raw.end()), path);
}

// ---------------------------------------------------------------------------
// Model conversion

namespace detail {

inline Checkpoint::F32 to_f32(const Tensor<float>& t) { return {t.shape(), {t.data().begin(), t.data().end()}}; }

inline void fill_from(Tensor<float>& t, const Checkpoint& ck, const std::string& name) {
  const auto& f = ck.get<Checkpoint::F32>(name);
  if (f.shape != t.shape())
    throw FormatError("checkpoint section '" + name + "' has shape " + shape_str(f.shape) + ", expected " +
                      shape_str(t.shape()));
  std::copy(f.data.begin(), f.data.end(), t.data().begin());
}

}  // namespace detail

/// Stores the network's weights, running statistics and architecture. Student
/// networks also carry their architecture export so the topology can be rebuilt.
inline void put_network(Checkpoint& ck, const Network<float>& net, const StudentArchitecture* arch = nullptr) {
  ck.sections["meta.arch"] = net.topology.spec.to_string();
  if (arch) ck.sections["meta.student"] = export_arch_string(build_topology(arch->teacher), *arch);
  for (auto& [name, t] : net.named_parameters()) ck.sections["param." + name] = detail::to_f32(t);
  for (auto& [name, t] : net.named_buffers()) ck.sections["buffer." + name] = detail::to_f32(t);
}

/// Topology recorded in a checkpoint (the student topology when one is present).
inline TopologyGraph checkpoint_topology(const Checkpoint& ck) {
  const auto teacher = build_topology(parse_arch_spec(ck.text("meta.arch")));
  if (!ck.has("meta.student")) return teacher;
  return student_topology(teacher, import_arch_string(ck.text("meta.student"))).first;
}

inline std::optional<StudentArchitecture> checkpoint_student(const Checkpoint& ck) {
  if (!ck.has("meta.student")) return std::nullopt;
  return import_arch_string(ck.text("meta.student"));
}

inline Network<float> get_network(const Checkpoint& ck) {
  Network<float> net = init_network<float>(checkpoint_topology(ck), 0);
  for (auto& [name, t] : net.named_parameters()) detail::fill_from(t, ck, "param." + name);
  for (auto& [name, t] : net.named_buffers()) detail::fill_from(t, ck, "buffer." + name);
  return net;
}

inline void put_gates(Checkpoint& ck, const GateSet<float>& gates) {
  ck.sections["meta.gate_sharing"] = std::string(to_string(gates.layout.sharing));
  for (std::size_t v = 0; v < gates.g.size(); ++v) {
    ck.sections["gate." + std::to_string(v)] = detail::to_f32(gates.g[v]);
    ck.sections["alpha." + std::to_string(v)] = Checkpoint::F64{Shape{gates.alpha[v].size()}, gates.alpha[v]};
  }
}

inline bool has_gates(const Checkpoint& ck) { return ck.has("meta.gate_sharing"); }

inline GatedModel<float> get_gated_model(const Checkpoint& ck) {
  if (!has_gates(ck)) throw FormatError("checkpoint holds no gates");
  const auto& s = ck.text("meta.gate_sharing");
  const GateSharing sharing = s == to_string(GateSharing::per_source) ? GateSharing::per_source : GateSharing::per_connection;
  Network<float> net = get_network(ck);
  const auto layout = make_gate_layout(net.topology, sharing);
  std::vector<std::vector<double>> alphas;
  for (std::size_t v = 0; v < layout.vectors.size(); ++v) alphas.push_back(ck.get<Checkpoint::F64>("alpha." + std::to_string(v)).data);
  GatedModel<float> m = attach_gates(net, alphas, sharing);
  for (std::size_t v = 0; v < m.gates.g.size(); ++v) detail::fill_from(m.gates.g[v], ck, "gate." + std::to_string(v));
  return m;
}

inline void put_sgd(Checkpoint& ck, const std::string& prefix, const SgdState<float>& s) {
  ck.sections[prefix + ".hyper"] = Checkpoint::F32{Shape{3}, {s.lr, s.momentum, s.weight_decay}};
  for (std::size_t i = 0; i < s.velocity.size(); ++i)
    ck.sections[prefix + ".velocity." + std::to_string(i)] = Checkpoint::F32{Shape{s.velocity[i].size()}, s.velocity[i]};
  ck.sections[prefix + ".count"] = static_cast<std::uint64_t>(s.velocity.size());
}

inline SgdState<float> get_sgd(const Checkpoint& ck, const std::string& prefix) {
  SgdState<float> s;
  const auto& h = ck.get<Checkpoint::F32>(prefix + ".hyper").data;
  if (h.size() != 3) throw FormatError("checkpoint section '" + prefix + ".hyper' has inconsistent length");
  s.lr = h[0];
  s.momentum = h[1];
  s.weight_decay = h[2];
  const auto n = ck.u64(prefix + ".count");
  for (std::uint64_t i = 0; i < n; ++i) s.velocity.push_back(ck.get<Checkpoint::F32>(prefix + ".velocity." + std::to_string(i)).data);
  return s;
}

inline void put_apg(Checkpoint& ck, const std::string& prefix, const std::vector<ApgState<float>>& states) {
  ck.sections[prefix + ".count"] = static_cast<std::uint64_t>(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& s = states[i];
    const auto p = prefix + "." + std::to_string(i);
    ck.sections[p + ".hyper"] = Checkpoint::F32{Shape{3}, {s.eta, s.mu, s.clamp_nonnegative ? 1.0f : 0.0f}};
    ck.sections[p + ".t"] = static_cast<std::uint64_t>(s.t);
    if (!s.v.empty()) ck.sections[p + ".v"] = Checkpoint::F32{Shape{s.v.size()}, s.v};
  }
}

inline std::vector<ApgState<float>> get_apg(const Checkpoint& ck, const std::string& prefix) {
  std::vector<ApgState<float>> out;
  const auto n = ck.u64(prefix + ".count");
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto p = prefix + "." + std::to_string(i);
    ApgState<float> s;
    const auto& h = ck.get<Checkpoint::F32>(p + ".hyper").data;
    if (h.size() != 3) throw FormatError("checkpoint section '" + p + ".hyper' has inconsistent length");
    s.eta = h[0];
    s.mu = h[1];
    s.clamp_nonnegative = h[2] != 0.0f;
    s.t = static_cast<long>(ck.u64(p + ".t"));
    if (ck.has(p + ".v")) s.v = ck.get<Checkpoint::F32>(p + ".v").data;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace gsearch
