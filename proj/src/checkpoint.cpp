#include "cmfd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cmfd/config.hpp"

namespace cmfd {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::uint32_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& config, const ParamStore<float>& params) {
  std::vector<std::uint8_t> out{'C', 'M', 'F', 'D'};
  put_u32(out, kCheckpointVersion);
  const std::string cfg = to_json(config).dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (int d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.value.data()) put_f32(out, v);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "CMFD", 4) != 0) throw CheckpointError("bad magic: not a CMFD checkpoint");
  ByteReader r(bytes);
  r.str(4, "magic");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const std::string cfg = r.str(r.u32("config length"), "config");
  try {
    ck.config = model_config_from_json(nlohmann::json::parse(cfg));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("invalid embedded model config: ") + e.what());
  }
  const auto count = r.u32("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = r.str(r.u32("name length"), "name");
    const auto rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw CheckpointError("tensor " + name + " has invalid rank " + std::to_string(rank));
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.u32("shape");
      if (d == 0 || d > (1u << 24)) throw CheckpointError("tensor " + name + " has invalid dimension");
      shape.push_back(static_cast<int>(d));
      n *= d;
      if (n > (1u << 28)) throw CheckpointError("tensor " + name + " is implausibly large");
    }
    Tensor<float> value(shape);
    for (std::size_t i = 0; i < n; ++i) value[i] = r.f32("tensor data");
    ck.tensors.emplace_back(std::move(name), std::move(value));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model) {
  const auto bytes = serialize_checkpoint(model.config(), model.params());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

void load_parameters(Model<float>& model, const Checkpoint& ckpt) {
  auto& store = model.params();
  if (ckpt.tensors.size() != store.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model has " +
                          std::to_string(store.size()) + " parameters");
  }
  for (const auto& [name, value] : ckpt.tensors) {
    auto* p = store.find(name);
    if (!p) throw CheckpointError("checkpoint tensor " + name + " has no matching parameter");
    if (p->value.shape() != value.shape()) {
      throw CheckpointError("shape mismatch for " + name + ": checkpoint " + to_string(value.shape()) + ", model " +
                            to_string(p->value.shape()));
    }
  }
  for (const auto& [name, value] : ckpt.tensors) store.find(name)->value = value;
}

std::unique_ptr<Model<float>> load_model(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  auto model = std::make_unique<Model<float>>(ck.config);
  load_parameters(*model, ck);
  return model;
}

}  // namespace cmfd
