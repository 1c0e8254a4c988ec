#include "d2p/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace d2p {

namespace {

constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }

  std::vector<unsigned char> out;

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
};

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& b) : bytes(b) {}

  std::uint8_t u8() { return need(1)[0]; }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::uint64_t n) {
    const auto* p = need(n);
    return {reinterpret_cast<const char*>(p), static_cast<std::size_t>(n)};
  }
  bool done() const { return pos == bytes.size(); }

 private:
  const unsigned char* need(std::uint64_t n) {
    if (n > bytes.size() - pos) {
      throw DataError("checkpoint truncated at byte " + std::to_string(pos));
    }
    const auto* p = bytes.data() + pos;
    pos += static_cast<std::size_t>(n);
    return p;
  }
  std::uint64_t le(int n) {
    const auto* p = need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;
};

std::string describe(const StoredTensor& t) {
  return "'" + t.name + "' " + shape_str(t.shape) + " " + dtype_name(t.dtype);
}

}  // namespace

Checkpoint capture(const ParameterList& params, std::string manifest) {
  Checkpoint c;
  c.manifest = std::move(manifest);
  for (const auto* p : params) {
    const Tensor& v = p->value();
    c.tensors.push_back({p->name(), v.shape(), v.dtype(), v.to_vector()});
  }
  return c;
}

void restore(const Checkpoint& checkpoint, const ParameterList& params) {
  if (checkpoint.tensors.size() != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(checkpoint.tensors.size()) +
                    " tensors, model has " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const StoredTensor& s = checkpoint.tensors[k];
    Tensor& v = params[k]->value();
    if (s.name != params[k]->name() || s.shape != v.shape() || s.dtype != v.dtype()) {
      throw DataError("checkpoint tensor " + describe(s) + " does not match model parameter '" +
                      params[k]->name() + "' " + shape_str(v.shape()) + " " +
                      dtype_name(v.dtype()));
    }
    dispatch(v.dtype(), [&]<class T>(T) {
      auto w = v.mutable_data<T>();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(s.values[i]);
    });
  }
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.str("D2PC");
  w.u32(kVersion);
  w.u64(c.epoch);
  w.u64(c.cursor);
  w.u64(c.manifest.size());
  w.str(c.manifest);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.values.size() != shape_numel(t.shape)) {
      throw ContractError("checkpoint tensor " + describe(t) + " has " +
                          std::to_string(t.values.size()) + " values");
    }
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.dtype));
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (double x : t.values) {
      if (t.dtype == DType::kF32) {
        w.f32(static_cast<float>(x));
      } else {
        w.f64(x);
      }
    }
  }
  w.u8(c.optimizer ? 1 : 0);
  if (c.optimizer) {
    const AdamState& s = *c.optimizer;
    w.u64(s.step);
    w.u32(static_cast<std::uint32_t>(s.m.size()));
    for (std::size_t k = 0; k < s.m.size(); ++k) {
      w.u64(s.m[k].size());
      for (double x : s.m[k]) w.f64(x);
      for (double x : s.v[k]) w.f64(x);
    }
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  Reader r(bytes);
  if (r.str(4) != "D2PC") throw DataError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw DataError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  Checkpoint c;
  c.epoch = r.u64();
  c.cursor = r.u64();
  c.manifest = r.str(r.u64());
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    StoredTensor t;
    t.name = r.str(r.u32());
    const std::uint32_t dtype = r.u32();
    if (dtype != 1 && dtype != 2) {
      throw DataError("checkpoint tensor '" + t.name + "' has unknown dtype " +
                      std::to_string(dtype));
    }
    t.dtype = static_cast<DType>(dtype);
    const std::uint32_t rank = r.u32();
    for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(r.u64());
    const std::size_t n = shape_numel(t.shape);
    if (n > bytes.size()) throw DataError("checkpoint tensor '" + t.name + "' is truncated");
    t.values.resize(n);
    for (auto& x : t.values) x = t.dtype == DType::kF32 ? r.f32() : r.f64();
    c.tensors.push_back(std::move(t));
  }
  if (r.u8() != 0) {
    AdamState s;
    s.step = r.u64();
    const std::uint32_t pairs = r.u32();
    for (std::uint32_t k = 0; k < pairs; ++k) {
      const std::uint64_t n = r.u64();
      if (n > bytes.size()) throw DataError("checkpoint optimizer state is truncated");
      std::vector<double> m(n), v(n);
      for (auto& x : m) x = r.f64();
      for (auto& x : v) x = r.f64();
      s.m.push_back(std::move(m));
      s.v.push_back(std::move(v));
    }
    c.optimizer = std::move(s);
  }
  if (!r.done()) throw DataError("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(f),
                                         std::istreambuf_iterator<char>()};
  try {
    return decode_checkpoint(bytes);
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) + " in '" + path + "'");
  }
}

Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints) {
  if (checkpoints.empty()) throw ConfigError("no checkpoints to average");
  const Checkpoint& first = checkpoints.front();
  Checkpoint out;
  out.manifest = first.manifest;
  out.tensors = first.tensors;
  for (std::size_t c = 1; c < checkpoints.size(); ++c) {
    const Checkpoint& other = checkpoints[c];
    if (other.manifest != first.manifest) {
      throw DataError("checkpoint " + std::to_string(c) + " was trained with a different configuration");
    }
    if (other.tensors.size() != first.tensors.size()) {
      throw DataError("checkpoint " + std::to_string(c) + " holds " +
                      std::to_string(other.tensors.size()) + " tensors, expected " +
                      std::to_string(first.tensors.size()));
    }
    for (std::size_t k = 0; k < first.tensors.size(); ++k) {
      const StoredTensor& a = first.tensors[k];
      const StoredTensor& b = other.tensors[k];
      if (a.name != b.name || a.shape != b.shape || a.dtype != b.dtype) {
        throw DataError("checkpoint " + std::to_string(c) + " tensor " + describe(b) +
                        " does not match " + describe(a));
      }
      for (std::size_t i = 0; i < b.values.size(); ++i) out.tensors[k].values[i] += b.values[i];
    }
  }
  const double n = static_cast<double>(checkpoints.size());
  for (auto& t : out.tensors) {
    for (auto& x : t.values) {
      x /= n;
      if (t.dtype == DType::kF32) x = static_cast<float>(x);
    }
  }
  return out;
}

}  // namespace d2p
