#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sermoe/nn.hpp"
#include "sermoe/tensor.hpp"

namespace sermoe {

// Turns one [L x d] sequential feature into a fixed-size embedding:
// conv bank -> bidirectional LSTM -> single-head attention with the final
// LSTM state as query. The attention scale is sqrt of the projected
// dimension, i.e. the dimension actually entering the dot product.
struct EncoderStack {
  Conv1DBank conv;
  LSTMStack lstm;
  Tensor w_query;  // [2k x a]
  Tensor w_key;    // [2k x a]
  Tensor w_value;  // [2k x a]
  std::size_t output_dim = 0;
};

struct EncoderDims {
  std::vector<std::size_t> conv_widths{3, 5};
  std::vector<std::size_t> conv_filters{64, 64};
  std::size_t lstm_hidden = 128;
  std::size_t lstm_layers = 1;
  std::size_t attention_dim = 256;
};

EncoderStack make_encoder(std::size_t raw_dim, const EncoderDims& dims,
                          Rng& rng);

enum class FeatureKind { Sequential, Vector };

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::Vector;
  std::size_t raw_dim = 0;
  std::optional<EncoderDims> encoder_dims;  // sequential features only

  // Embedding width this feature contributes before any projection.
  std::size_t encoded_dim() const {
    return kind == FeatureKind::Sequential ? encoder_dims->attention_dim
                                           : raw_dim;
  }
};

// q: [a], keys/values: [L x a]. Weights are softmax(q . K^T / sqrt(a)).
Tensor scaled_dot_attention(const Tensor& q, const Tensor& keys,
                            const Tensor& values);

Tensor encode_sequence(const EncoderStack& enc, const Tensor& z);

// Concatenation in declared feature order; multi-domain variants project to
// a common width first and combine elsewhere.
Tensor assemble_representation(const std::vector<Tensor>& encoded);

}  // namespace sermoe
