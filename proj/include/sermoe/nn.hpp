#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sermoe/rng.hpp"
#include "sermoe/tensor.hpp"

namespace sermoe {

enum class Activation { Identity, ReLU, Tanh, GeLU, Mish };

Activation activation_from_string(const std::string& name);
std::string activation_name(Activation act);
Tensor apply_activation(Activation act, const Tensor& x);

// Glorot-uniform draw in +-sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                      Rng& rng);

struct DenseLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
  Activation activation = Activation::Identity;

  std::size_t in_dim() const { return weight.shape()[0]; }
  std::size_t out_dim() const { return weight.shape()[1]; }
};

DenseLayer make_dense(std::size_t in_dim, std::size_t out_dim, Activation act,
                      Rng& rng);

// x may be [batch x in] or a single [in] row.
Tensor dense_forward(const DenseLayer& layer, const Tensor& x);

// Parallel 1-D convolution branches over the time axis; branch outputs are
// concatenated on the channel axis, so out_dim() is the total filter count.
struct Conv1DBank {
  struct Branch {
    std::size_t width = 0;
    std::size_t filters = 0;
    Tensor weight;  // [width x in_dim x filters]
    Tensor bias;    // [filters]
  };
  std::vector<Branch> branches;
  std::size_t in_dim = 0;

  std::size_t out_dim() const;
};

Conv1DBank make_conv_bank(std::size_t in_dim,
                          const std::vector<std::size_t>& widths,
                          const std::vector<std::size_t>& filters, Rng& rng);

// z: [L x in_dim] -> [L x out_dim], same-padded.
Tensor conv1d_forward(const Conv1DBank& bank, const Tensor& z);

// Gate layout inside the packed [.. x 4k] weights: input, forget, cell, output.
// Forget biases start at 1 so early training does not wash out the cell state.
struct LSTMStack {
  struct Direction {
    Tensor w_input;   // [in x 4k]
    Tensor w_hidden;  // [k x 4k]
    Tensor bias;      // [4k]
  };
  struct Layer {
    Direction forward;
    Direction backward;  // unused when bidirectional is false
  };
  std::vector<Layer> layers;
  std::size_t hidden = 0;
  bool bidirectional = true;

  std::size_t out_dim() const { return bidirectional ? 2 * hidden : hidden; }
};

LSTMStack make_lstm(std::size_t in_dim, std::size_t hidden, std::size_t layers,
                    bool bidirectional, Rng& rng);

struct LSTMOutput {
  Tensor states;  // [L x out_dim], per-step direction concatenation
  Tensor final_state;  // [out_dim], forward final then backward final
};

LSTMOutput lstm_forward(const LSTMStack& stack, const Tensor& z);

struct DropoutSpec {
  double rate = 0.0;  // in [0, 1)
  bool train = false;
};

// Inverted dropout: survivors are scaled by 1/(1-rate) so the expectation is
// preserved; eval mode and rate 0 return the input unchanged.
Tensor dropout_apply(const DropoutSpec& spec, const Tensor& x, Rng& rng);

// Mean over the batch of -log softmax(logits)[label], log-sum-exp stabilized.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

}  // namespace sermoe
