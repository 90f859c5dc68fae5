#pragma once

// Decoder-only RWKV-7 style recurrent language model: parameter layout, the
// "RWKT" weight container, and single-precision forward evaluation in both
// whole-sequence and streaming form.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "contin/remi.hpp"

namespace contin {

struct ModelConfig {
  int n_layers = 12;
  int d_model = 384;
  int d_ffn = 1536;
  int vocab_size = kVocabSize;
  int n_heads = 6;
  // Ranks of the low-rank generators for decay, in-context learning rate,
  // value residual mix, and output gate.
  int decay_rank = 32;
  int iclr_rank = 32;
  int value_rank = 32;
  int gate_rank = 64;

  int head_dim() const { return d_model / n_heads; }

  /// 12 x 384 model with a 1536-wide channel mix, 6 heads of 64.
  static ModelConfig standard();
  /// Small model with every low-rank generator of rank `rank`.
  static ModelConfig micro(int n_layers, int d_model, int d_ffn, int vocab_size, int n_heads,
                           int rank);

  /// Throws WeightError if dimensions are non-positive or d_model % n_heads != 0.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LoraRanks {
  int decay, iclr, value, gate;
};

/// Rank heuristics of the reference implementation for a given width.
LoraRanks default_lora_ranks(int d_model);

struct TensorSpec {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::size_t offset = 0;  // into the flat parameter vector
  std::size_t size = 0;
};

/// Flat offsets of one block's tensors.
struct LayerSlots {
  std::size_t ln1_w, ln1_b, ln2_w, ln2_b;
  std::size_t x_r, x_w, x_k, x_v, x_a, x_g;
  std::size_t w0, w1, w2, a0, a1, a2, v0, v1, v2, g1, g2;
  std::size_t k_k, k_a, r_k;
  std::size_t receptance, key, value, output;
  std::size_t ln_x_w, ln_x_b;
  std::size_t ffn_x_k, ffn_key, ffn_value;
  bool has_value_mix = false;  // false on block 0, which produces the first-layer value
};

/// Tensor schema of a configuration: names, shapes, and placement of every
/// parameter inside one contiguous vector.
class TensorLayout {
 public:
  explicit TensorLayout(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  const TensorSpec* find(std::string_view name) const;
  std::size_t total() const { return total_; }

  std::size_t emb = 0, ln0_w = 0, ln0_b = 0, ln_out_w = 0, ln_out_b = 0, head = 0;
  std::vector<LayerSlots> layers;

 private:
  std::size_t add(std::string name, std::vector<std::uint32_t> shape);

  ModelConfig config_;
  std::vector<TensorSpec> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

/// Parameter count implied by a configuration.
std::size_t param_count(const ModelConfig& config);

/// All learned parameters of a model, single precision, immutable once loaded.
class WeightSet {
 public:
  explicit WeightSet(const ModelConfig& config);  // all zeros
  WeightSet(const ModelConfig& config, std::vector<float> values);

  const ModelConfig& config() const { return layout_.config(); }
  const TensorLayout& layout() const { return layout_; }
  std::span<const float> values() const { return values_; }
  std::span<float> mutable_values() { return values_; }

  /// Throws WeightError for an unknown name.
  std::span<const float> tensor(std::string_view name) const;
  std::span<float> mutable_tensor(std::string_view name);

 private:
  TensorLayout layout_;
  std::vector<float> values_;
};

std::size_t param_count(const WeightSet& weights);

struct ContainerTensor {
  std::string name;
  std::uint8_t dtype = 0;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;
};

/// Raw tensors of an "RWKT" container, in file order, without schema checks.
std::vector<ContainerTensor> read_container(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> serialize_weights(const WeightSet& weights);

/// Parses a container, infers the configuration from tensor shapes, and checks
/// the tensor set against the schema. All values must be finite.
WeightSet load_weights(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
WeightSet load_weights_file(const std::filesystem::path& path);
void save_weights_file(const std::filesystem::path& path, const WeightSet& weights);

/// Recurrent state of one generation stream. Its size depends only on the
/// configuration.
struct DecoderState {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  std::vector<float> att_shift;  // [n_layers, d_model]
  std::vector<float> ffn_shift;  // [n_layers, d_model]
  std::vector<float> wkv;        // [n_layers, n_heads, head_dim, head_dim]

  friend bool operator==(const DecoderState&, const DecoderState&) = default;
};

DecoderState init_state(const ModelConfig& config);
std::vector<std::uint8_t> serialize_state(const DecoderState& state);
DecoderState deserialize_state(std::span<const std::uint8_t> bytes);

using Logits = std::vector<float>;

/// Consumes one token and returns next-token logits, updating `state`.
Logits forward_step(const WeightSet& weights, DecoderState& state, TokenId token);

/// Logits for every position of `tokens`, evaluated layer by layer over the
/// whole sequence from a fresh state.
std::vector<Logits> forward_full(const WeightSet& weights, std::span<const TokenId> tokens);

/// Whole-sequence evaluation over an arbitrary-precision parameter vector laid
/// out per `layout`. forward_full is the float instance.
template <class T>
std::vector<std::vector<T>> forward_sequence(const TensorLayout& layout, std::span<const T> params,
                                             std::span<const TokenId> tokens);

}  // namespace contin
