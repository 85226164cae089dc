#include <nlohmann/json.hpp>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "icsinet/errors.hpp"
#include "icsinet/pipeline.hpp"

namespace icsinet {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'I', 'C', 'S', 'N'};

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

class Cursor {
 public:
  explicit Cursor(const std::string& bytes) : bytes_(bytes) {}

  template <typename V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const char* at(std::size_t p) const { return bytes_.data() + p; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw CorruptionError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(const char* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n)));
}

NamedTensor named(const std::string& name, const Shape& shape, std::span<const float> values) {
  NamedTensor t{name, {}, {values.begin(), values.end()}};
  for (auto d : shape) t.dims.push_back(static_cast<std::uint32_t>(d));
  return t;
}

std::map<std::string, const NamedTensor*> index_tensors(const Checkpoint& ck) {
  std::map<std::string, const NamedTensor*> m;
  for (const auto& t : ck.tensors) m[t.name] = &t;
  return m;
}

const NamedTensor& find(const std::map<std::string, const NamedTensor*>& m, const std::string& name,
                        std::size_t numel) {
  const auto it = m.find(name);
  if (it == m.end()) throw InputError("checkpoint has no tensor '" + name + "'");
  if (it->second->data.size() != numel) {
    throw ShapeError("checkpoint tensor '" + name + "' has " + std::to_string(it->second->data.size()) +
                     " values, model expects " + std::to_string(numel));
  }
  return *it->second;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, ck.version);
  const std::string header =
      json{{"config", json::parse(run_config_to_json(ck.config))}, {"step", ck.step}, {"optim_t", ck.optim_t}}.dump();
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    const std::size_t start = out.size();
    if (t.name.size() > 0xFFFF) throw ContractError("tensor name too long: " + t.name.substr(0, 64));
    std::size_t numel = 1;
    for (auto d : t.dims) numel *= d;
    if (numel != t.data.size()) throw ShapeError("tensor '" + t.name + "' dims do not match its data");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    put<std::uint8_t>(out, 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put<std::uint32_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    put<std::uint32_t>(out, crc(out.data() + start, out.size() - start));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Cursor c(bytes);
  if (c.take(4, "magic") != std::string(kMagic, 4)) throw CorruptionError("not a checkpoint (bad magic)", 0);
  Checkpoint ck;
  const std::size_t version_at = c.pos();
  ck.version = c.get<std::uint32_t>("format version");
  if (ck.version == 0 || ck.version > kCheckpointVersion) {
    throw CorruptionError("unsupported checkpoint format_version " + std::to_string(ck.version) +
                              " (this build reads " + std::to_string(kCheckpointVersion) + ")",
                          version_at);
  }
  const std::size_t len_at = c.pos();
  const auto header_len = c.get<std::uint64_t>("header length");
  if (header_len > c.remaining()) throw CorruptionError("checkpoint truncated inside header", len_at);
  const std::size_t header_at = c.pos();
  const std::string header = c.take(header_len, "header");
  try {
    const json h = json::parse(header);
    ck.config = parse_run_config(h.at("config").dump(), "checkpoint config");
    ck.step = h.at("step").get<std::uint64_t>();
    ck.optim_t = h.at("optim_t").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("bad checkpoint header: ") + e.what(), header_at);
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("bad checkpoint header: ") + e.what(), header_at);
  }
  const auto count = c.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = c.pos();
    NamedTensor t;
    t.name = c.take(c.get<std::uint16_t>("tensor name length"), "tensor name");
    const std::size_t dtype_at = c.pos();
    if (c.get<std::uint8_t>("dtype") != 0) throw CorruptionError("unknown dtype in tensor '" + t.name + "'", dtype_at);
    const auto rank = c.get<std::uint8_t>("rank");
    std::uint64_t numel = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.dims.push_back(c.get<std::uint32_t>("dims"));
      numel *= t.dims.back();
    }
    if (numel * sizeof(float) > c.remaining()) {
      throw CorruptionError("checkpoint truncated inside tensor '" + t.name + "'", c.pos());
    }
    t.data.resize(numel);
    const std::string raw = c.take(numel * sizeof(float), "tensor data");
    std::memcpy(t.data.data(), raw.data(), raw.size());
    const std::uint32_t expect = crc(c.at(start), c.pos() - start);
    const std::size_t crc_at = c.pos();
    if (c.get<std::uint32_t>("checksum") != expect) {
      throw CorruptionError("checksum mismatch in tensor '" + t.name + "'", crc_at);
    }
    ck.tensors.push_back(std::move(t));
  }
  if (c.remaining() != 0) throw CorruptionError("trailing bytes after last tensor", c.pos());
  return ck;
}

void save_checkpoint(const fs::path& path, const Model<float>& model, const OptimState<float>& state,
                     const RunConfig& cfg, std::uint64_t step) {
  Checkpoint ck;
  ck.config = cfg;
  ck.step = step;
  ck.optim_t = state.t;
  const auto params = model.parameters();
  for (const auto& p : params) ck.tensors.push_back(named("param:" + p.name, p.tensor.shape(), p.tensor.data()));
  for (const auto& b : model.buffers()) {
    ck.tensors.push_back(named("buffer:" + b.name, {b.values->size()}, *b.values));
  }
  if (state.initialized() && !state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& shape = params[i].tensor.shape();
      ck.tensors.push_back(named("optim.m:" + params[i].name, shape, state.m[i]));
      ck.tensors.push_back(named("optim.v:" + params[i].name, shape, state.v[i]));
      ck.tensors.push_back(named("optim.g_prev:" + params[i].name, shape, state.g_prev[i]));
    }
  }
  write_file_atomic(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + std::string(e.what()).substr(0, std::string(e.what()).rfind(" at byte")),
                          e.offset());
  }
}

Model<float> restore_model(const Checkpoint& ck) {
  Model<float> model(ck.config.model);
  const auto m = index_tensors(ck);
  for (auto& p : model.parameters()) {
    const auto& t = find(m, "param:" + p.name, p.tensor.numel());
    std::copy(t.data.begin(), t.data.end(), p.tensor.data().begin());
  }
  for (auto& b : model.buffers()) {
    const auto& t = find(m, "buffer:" + b.name, b.values->size());
    std::copy(t.data.begin(), t.data.end(), b.values->begin());
  }
  return model;
}

OptimState<float> restore_optim(const Checkpoint& ck, const Model<float>& model) {
  std::vector<Tensor<float>> tensors;
  const auto params = model.parameters();
  for (const auto& p : params) tensors.push_back(p.tensor);
  auto state = OptimState<float>::init(tensors);
  const auto m = index_tensors(ck);
  if (!m.count("optim.m:" + params.front().name)) return state;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = params[i].tensor.numel();
    state.m[i] = find(m, "optim.m:" + params[i].name, n).data;
    state.v[i] = find(m, "optim.v:" + params[i].name, n).data;
    state.g_prev[i] = find(m, "optim.g_prev:" + params[i].name, n).data;
  }
  state.t = ck.optim_t;
  return state;
}

}  // namespace icsinet
