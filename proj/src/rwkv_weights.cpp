#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "contin/error.hpp"
#include "contin/rwkv.hpp"

namespace contin {

namespace {

constexpr char kMagic[4] = {'R', 'W', 'K', 'T'};
constexpr std::uint32_t kContainerVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

int round_rank(double x) { return std::max(32, static_cast<int>(std::lround(x / 32.0)) * 32); }

std::string block(int i, const char* suffix) {
  return "blocks." + std::to_string(i) + "." + suffix;
}

std::string shape_text(const std::vector<std::uint32_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ParseError(std::string("truncated ") + what, pos_);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint32_t le(std::size_t width, const char* what) {
    auto b = take(width, what);
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= std::uint32_t{b[i]} << (8 * i);
    return v;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void put_le(std::vector<std::uint8_t>& out, std::uint32_t v, int width) {
  for (int i = 0; i < width; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> values) {
  for (float f : values) put_le(out, std::bit_cast<std::uint32_t>(f), 4);
}

std::vector<float> get_floats(Reader& in, std::size_t count, const char* what) {
  auto raw = in.take(count * 4, what);
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t{raw[4 * i + b]} << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

}  // namespace

ModelConfig ModelConfig::standard() {
  ModelConfig c;
  const LoraRanks r = default_lora_ranks(c.d_model);
  c.decay_rank = r.decay;
  c.iclr_rank = r.iclr;
  c.value_rank = r.value;
  c.gate_rank = r.gate;
  return c;
}

ModelConfig ModelConfig::micro(int n_layers, int d_model, int d_ffn, int vocab_size, int n_heads,
                               int rank) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.d_ffn = d_ffn;
  c.vocab_size = vocab_size;
  c.n_heads = n_heads;
  c.decay_rank = c.iclr_rank = c.value_rank = c.gate_rank = rank;
  return c;
}

void ModelConfig::validate() const {
  if (n_layers <= 0 || d_model <= 0 || d_ffn <= 0 || vocab_size <= 0 || n_heads <= 0 ||
      decay_rank <= 0 || iclr_rank <= 0 || value_rank <= 0 || gate_rank <= 0) {
    throw WeightError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw WeightError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

LoraRanks default_lora_ranks(int d_model) {
  const double c = d_model;
  return {round_rank(1.8 * std::sqrt(c)), round_rank(1.8 * std::sqrt(c)),
          round_rank(1.3 * std::sqrt(c)), round_rank(0.6 * std::pow(c, 0.8))};
}

TensorLayout::TensorLayout(const ModelConfig& config) : config_(config) {
  config_.validate();
  const auto C = static_cast<std::uint32_t>(config.d_model);
  const auto F = static_cast<std::uint32_t>(config.d_ffn);
  const auto V = static_cast<std::uint32_t>(config.vocab_size);
  const auto H = static_cast<std::uint32_t>(config.n_heads);
  const auto N = C / H;
  const auto Dw = static_cast<std::uint32_t>(config.decay_rank);
  const auto Da = static_cast<std::uint32_t>(config.iclr_rank);
  const auto Dv = static_cast<std::uint32_t>(config.value_rank);
  const auto Dg = static_cast<std::uint32_t>(config.gate_rank);

  emb = add("emb.weight", {V, C});
  ln0_w = add("blocks.0.ln0.weight", {C});
  ln0_b = add("blocks.0.ln0.bias", {C});
  for (int i = 0; i < config.n_layers; ++i) {
    LayerSlots s{};
    s.ln1_w = add(block(i, "ln1.weight"), {C});
    s.ln1_b = add(block(i, "ln1.bias"), {C});
    s.ln2_w = add(block(i, "ln2.weight"), {C});
    s.ln2_b = add(block(i, "ln2.bias"), {C});
    s.x_r = add(block(i, "att.x_r"), {C});
    s.x_w = add(block(i, "att.x_w"), {C});
    s.x_k = add(block(i, "att.x_k"), {C});
    s.x_v = add(block(i, "att.x_v"), {C});
    s.x_a = add(block(i, "att.x_a"), {C});
    s.x_g = add(block(i, "att.x_g"), {C});
    s.w0 = add(block(i, "att.w0"), {C});
    s.w1 = add(block(i, "att.w1"), {C, Dw});
    s.w2 = add(block(i, "att.w2"), {Dw, C});
    s.a0 = add(block(i, "att.a0"), {C});
    s.a1 = add(block(i, "att.a1"), {C, Da});
    s.a2 = add(block(i, "att.a2"), {Da, C});
    s.has_value_mix = i > 0;
    if (s.has_value_mix) {
      s.v0 = add(block(i, "att.v0"), {C});
      s.v1 = add(block(i, "att.v1"), {C, Dv});
      s.v2 = add(block(i, "att.v2"), {Dv, C});
    }
    s.g1 = add(block(i, "att.g1"), {C, Dg});
    s.g2 = add(block(i, "att.g2"), {Dg, C});
    s.k_k = add(block(i, "att.k_k"), {C});
    s.k_a = add(block(i, "att.k_a"), {C});
    s.r_k = add(block(i, "att.r_k"), {H, N});
    s.receptance = add(block(i, "att.receptance.weight"), {C, C});
    s.key = add(block(i, "att.key.weight"), {C, C});
    s.value = add(block(i, "att.value.weight"), {C, C});
    s.output = add(block(i, "att.output.weight"), {C, C});
    s.ln_x_w = add(block(i, "att.ln_x.weight"), {C});
    s.ln_x_b = add(block(i, "att.ln_x.bias"), {C});
    s.ffn_x_k = add(block(i, "ffn.x_k"), {C});
    s.ffn_key = add(block(i, "ffn.key.weight"), {F, C});
    s.ffn_value = add(block(i, "ffn.value.weight"), {C, F});
    layers.push_back(s);
  }
  ln_out_w = add("ln_out.weight", {C});
  ln_out_b = add("ln_out.bias", {C});
  head = add("head.weight", {V, C});
}

std::size_t TensorLayout::add(std::string name, std::vector<std::uint32_t> shape) {
  std::size_t size = 1;
  for (auto d : shape) size *= d;
  const std::size_t offset = total_;
  index_.emplace(name, tensors_.size());
  tensors_.push_back({std::move(name), std::move(shape), offset, size});
  total_ += size;
  return offset;
}

const TensorSpec* TensorLayout::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &tensors_[it->second];
}

std::size_t param_count(const ModelConfig& config) { return TensorLayout(config).total(); }

WeightSet::WeightSet(const ModelConfig& config)
    : layout_(config), values_(layout_.total(), 0.0f) {}

WeightSet::WeightSet(const ModelConfig& config, std::vector<float> values)
    : layout_(config), values_(std::move(values)) {
  if (values_.size() != layout_.total()) {
    throw WeightError("expected " + std::to_string(layout_.total()) + " parameters, got " +
                      std::to_string(values_.size()));
  }
}

std::span<const float> WeightSet::tensor(std::string_view name) const {
  const TensorSpec* spec = layout_.find(name);
  if (!spec) throw WeightError("no tensor named " + std::string(name));
  return std::span<const float>(values_).subspan(spec->offset, spec->size);
}

std::span<float> WeightSet::mutable_tensor(std::string_view name) {
  const TensorSpec* spec = layout_.find(name);
  if (!spec) throw WeightError("no tensor named " + std::string(name));
  return std::span<float>(values_).subspan(spec->offset, spec->size);
}

std::size_t param_count(const WeightSet& weights) { return weights.values().size(); }

std::vector<ContainerTensor> read_container(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  auto magic = in.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw ParseError("magic mismatch", 0);
  const std::size_t version_at = in.offset();
  const std::uint32_t version = in.le(4, "version");
  if (version != kContainerVersion) {
    throw ParseError("unsupported container version " + std::to_string(version), version_at);
  }
  const std::uint32_t count = in.le(4, "tensor count");
  std::vector<ContainerTensor> out;
  for (std::uint32_t t = 0; t < count; ++t) {
    ContainerTensor tensor;
    const std::uint32_t name_len = in.le(2, "name length");
    auto name = in.take(name_len, "tensor name");
    tensor.name.assign(name.begin(), name.end());
    const std::size_t dtype_at = in.offset();
    tensor.dtype = static_cast<std::uint8_t>(in.le(1, "dtype"));
    if (tensor.dtype != kDtypeF32) {
      throw ParseError("tensor " + tensor.name + ": unsupported dtype code " +
                           std::to_string(tensor.dtype),
                       dtype_at);
    }
    const std::uint32_t rank = in.le(1, "rank");
    std::size_t count_elems = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      tensor.shape.push_back(in.le(4, "dimension"));
      count_elems *= tensor.shape.back();
    }
    if (count_elems > bytes.size()) throw ParseError("truncated tensor data", in.offset());
    tensor.data = get_floats(in, count_elems, "tensor data");
    out.push_back(std::move(tensor));
  }
  return out;
}

std::vector<std::uint8_t> serialize_weights(const WeightSet& weights) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le(out, kContainerVersion, 4);
  const auto& tensors = weights.layout().tensors();
  put_le(out, static_cast<std::uint32_t>(tensors.size()), 4);
  for (const TensorSpec& spec : tensors) {
    put_le(out, static_cast<std::uint32_t>(spec.name.size()), 2);
    out.insert(out.end(), spec.name.begin(), spec.name.end());
    out.push_back(kDtypeF32);
    out.push_back(static_cast<std::uint8_t>(spec.shape.size()));
    for (auto d : spec.shape) put_le(out, d, 4);
    put_floats(out, weights.values().subspan(spec.offset, spec.size));
  }
  return out;
}

WeightSet load_weights(std::span<const std::uint8_t> bytes) {
  std::vector<ContainerTensor> tensors = read_container(bytes);

  std::unordered_map<std::string, const ContainerTensor*> by_name;
  for (const ContainerTensor& t : tensors) {
    if (!by_name.emplace(t.name, &t).second) throw WeightError("duplicate tensor " + t.name);
  }
  auto need = [&](const std::string& name) -> const ContainerTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw WeightError("missing tensor " + name);
    return *it->second;
  };
  auto dim = [&](const std::string& name, std::size_t axis) -> int {
    const ContainerTensor& t = need(name);
    if (t.shape.size() <= axis) {
      throw WeightError("tensor " + name + " has shape " + shape_text(t.shape) +
                        ", expected at least rank " + std::to_string(axis + 1));
    }
    return static_cast<int>(t.shape[axis]);
  };

  ModelConfig config;
  config.vocab_size = dim("emb.weight", 0);
  config.d_model = dim("emb.weight", 1);
  int n_layers = 0;
  while (by_name.count(block(n_layers, "ln1.weight"))) ++n_layers;
  if (n_layers == 0) throw WeightError("missing tensor " + block(0, "ln1.weight"));
  config.n_layers = n_layers;
  config.d_ffn = dim(block(0, "ffn.key.weight"), 0);
  config.n_heads = dim(block(0, "att.r_k"), 0);
  config.decay_rank = dim(block(0, "att.w1"), 1);
  config.iclr_rank = dim(block(0, "att.a1"), 1);
  config.gate_rank = dim(block(0, "att.g1"), 1);
  config.value_rank =
      n_layers > 1 ? dim(block(1, "att.v1"), 1) : default_lora_ranks(config.d_model).value;
  try {
    config.validate();
  } catch (const WeightError& e) {
    throw WeightError(std::string("inconsistent tensor shapes: ") + e.what());
  }

  const TensorLayout layout(config);
  std::vector<float> values(layout.total());
  for (const TensorSpec& spec : layout.tensors()) {
    const ContainerTensor& t = need(spec.name);
    if (t.shape != spec.shape) {
      throw WeightError("tensor " + spec.name + " has shape " + shape_text(t.shape) +
                        ", expected " + shape_text(spec.shape));
    }
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      if (!std::isfinite(t.data[i])) {
        throw WeightError("tensor " + spec.name + " has a non-finite value at element " +
                          std::to_string(i));
      }
    }
    std::copy(t.data.begin(), t.data.end(), values.begin() + static_cast<std::ptrdiff_t>(spec.offset));
  }
  if (tensors.size() != layout.tensors().size()) {
    for (const ContainerTensor& t : tensors) {
      if (!layout.find(t.name)) throw WeightError("unexpected tensor " + t.name);
    }
  }
  return WeightSet(config, std::move(values));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

WeightSet load_weights_file(const std::filesystem::path& path) {
  return load_weights(read_file_bytes(path));
}

void save_weights_file(const std::filesystem::path& path, const WeightSet& weights) {
  write_file_bytes(path, serialize_weights(weights));
}

DecoderState init_state(const ModelConfig& config) {
  config.validate();
  DecoderState s;
  s.n_layers = config.n_layers;
  s.d_model = config.d_model;
  s.n_heads = config.n_heads;
  const auto L = static_cast<std::size_t>(config.n_layers);
  const auto C = static_cast<std::size_t>(config.d_model);
  s.att_shift.assign(L * C, 0.0f);
  s.ffn_shift.assign(L * C, 0.0f);
  s.wkv.assign(L * C * static_cast<std::size_t>(config.head_dim()), 0.0f);
  return s;
}

std::vector<std::uint8_t> serialize_state(const DecoderState& state) {
  std::vector<std::uint8_t> out{'R', 'W', 'K', 'S'};
  put_le(out, static_cast<std::uint32_t>(state.n_layers), 4);
  put_le(out, static_cast<std::uint32_t>(state.d_model), 4);
  put_le(out, static_cast<std::uint32_t>(state.n_heads), 4);
  put_floats(out, state.att_shift);
  put_floats(out, state.ffn_shift);
  put_floats(out, state.wkv);
  return out;
}

DecoderState deserialize_state(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  auto magic = in.take(4, "state magic");
  if (!std::equal(magic.begin(), magic.end(), "RWKS")) throw ParseError("state magic mismatch", 0);
  ModelConfig c;
  c.n_layers = static_cast<int>(in.le(4, "state header"));
  c.d_model = static_cast<int>(in.le(4, "state header"));
  c.n_heads = static_cast<int>(in.le(4, "state header"));
  c.validate();
  DecoderState s = init_state(c);
  s.att_shift = get_floats(in, s.att_shift.size(), "state data");
  s.ffn_shift = get_floats(in, s.ffn_shift.size(), "state data");
  s.wkv = get_floats(in, s.wkv.size(), "state data");
  if (in.offset() != bytes.size()) throw ParseError("trailing bytes after state", in.offset());
  return s;
}

}  // namespace contin
