#include "sermoe/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sermoe {

Activation activation_from_string(const std::string& name) {
  if (name == "identity") return Activation::Identity;
  if (name == "relu") return Activation::ReLU;
  if (name == "tanh") return Activation::Tanh;
  if (name == "gelu") return Activation::GeLU;
  if (name == "mish") return Activation::Mish;
  throw std::invalid_argument("activation: unknown tag '" + name + "'");
}

std::string activation_name(Activation act) {
  switch (act) {
    case Activation::Identity: return "identity";
    case Activation::ReLU: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::GeLU: return "gelu";
    case Activation::Mish: return "mish";
  }
  return "identity";
}

Tensor apply_activation(Activation act, const Tensor& x) {
  switch (act) {
    case Activation::Identity: return x;
    case Activation::ReLU: return relu(x);
    case Activation::Tanh: return tanh(x);
    case Activation::GeLU: return gelu(x);
    case Activation::Mish: return mish(x);
  }
  return x;
}

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out,
                      Rng& rng) {
  const double bound =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    values[i] = uniform_real(rng, -bound, bound);
  }
  return Tensor::from_values(std::move(shape), std::move(values), true);
}

DenseLayer make_dense(std::size_t in_dim, std::size_t out_dim, Activation act,
                      Rng& rng) {
  DenseLayer layer;
  layer.weight = glorot_uniform({in_dim, out_dim}, in_dim, out_dim, rng);
  layer.bias = Tensor::zeros({out_dim}, true);
  layer.activation = act;
  return layer;
}

Tensor dense_forward(const DenseLayer& layer, const Tensor& x) {
  const std::size_t cols = x.shape().back();
  if (cols != layer.in_dim()) {
    throw std::invalid_argument("dense: input " + shape_str(x.shape()) +
                                " does not match weight " +
                                shape_str(layer.weight.shape()));
  }
  Tensor pre = add(matmul(x, layer.weight), layer.bias);
  return apply_activation(layer.activation, pre);
}

std::size_t Conv1DBank::out_dim() const {
  std::size_t total = 0;
  for (const auto& branch : branches) {
    total += branch.filters;
  }
  return total;
}

Conv1DBank make_conv_bank(std::size_t in_dim,
                          const std::vector<std::size_t>& widths,
                          const std::vector<std::size_t>& filters, Rng& rng) {
  if (widths.size() != filters.size() || widths.empty()) {
    throw std::invalid_argument("conv bank: widths/filters length mismatch");
  }
  Conv1DBank bank;
  bank.in_dim = in_dim;
  for (std::size_t b = 0; b < widths.size(); ++b) {
    if (widths[b] % 2 == 0) {
      throw std::invalid_argument("conv bank: width must be odd, got " +
                                  std::to_string(widths[b]));
    }
    Conv1DBank::Branch branch;
    branch.width = widths[b];
    branch.filters = filters[b];
    branch.weight = glorot_uniform({widths[b], in_dim, filters[b]},
                                   widths[b] * in_dim, filters[b], rng);
    branch.bias = Tensor::zeros({filters[b]}, true);
    bank.branches.push_back(std::move(branch));
  }
  return bank;
}

Tensor conv1d_forward(const Conv1DBank& bank, const Tensor& z) {
  if (z.rank() != 2 || z.shape()[1] != bank.in_dim) {
    throw std::invalid_argument("conv bank: input " + shape_str(z.shape()) +
                                " does not match in_dim " +
                                std::to_string(bank.in_dim));
  }
  if (z.shape()[0] == 0) {
    throw std::invalid_argument("conv bank: empty sequence");
  }
  std::vector<Tensor> outputs;
  outputs.reserve(bank.branches.size());
  for (const auto& branch : bank.branches) {
    outputs.push_back(add(conv1d(z, branch.weight), branch.bias));
  }
  return outputs.size() == 1 ? outputs[0] : concat(outputs, 1);
}

LSTMStack make_lstm(std::size_t in_dim, std::size_t hidden, std::size_t layers,
                    bool bidirectional, Rng& rng) {
  if (layers == 0 || hidden == 0) {
    throw std::invalid_argument("lstm: layers and hidden must be positive");
  }
  LSTMStack stack;
  stack.hidden = hidden;
  stack.bidirectional = bidirectional;
  auto make_direction = [&](std::size_t input_dim) {
    LSTMStack::Direction dir;
    dir.w_input =
        glorot_uniform({input_dim, 4 * hidden}, input_dim, 4 * hidden, rng);
    dir.w_hidden =
        glorot_uniform({hidden, 4 * hidden}, hidden, 4 * hidden, rng);
    std::vector<double> bias(4 * hidden, 0.0);
    for (std::size_t i = hidden; i < 2 * hidden; ++i) {
      bias[i] = 1.0;  // forget gate
    }
    dir.bias = Tensor::from_values({4 * hidden}, std::move(bias), true);
    return dir;
  };
  std::size_t input_dim = in_dim;
  for (std::size_t l = 0; l < layers; ++l) {
    LSTMStack::Layer layer;
    layer.forward = make_direction(input_dim);
    if (bidirectional) {
      layer.backward = make_direction(input_dim);
    }
    stack.layers.push_back(std::move(layer));
    input_dim = stack.out_dim();
  }
  return stack;
}

namespace {

// Runs one direction over the (possibly reversed) step order; returns the
// per-step hidden states in original time order plus the final state.
struct DirectionOutput {
  std::vector<Tensor> steps;
  Tensor final_state;
};

DirectionOutput run_direction(const LSTMStack::Direction& dir,
                              const std::vector<Tensor>& inputs,
                              std::size_t hidden, bool reversed) {
  const std::size_t len = inputs.size();
  DirectionOutput out;
  out.steps.resize(len);
  Tensor h = Tensor::zeros({hidden});
  Tensor c = Tensor::zeros({hidden});
  for (std::size_t step = 0; step < len; ++step) {
    const std::size_t t = reversed ? len - 1 - step : step;
    Tensor gates = add(add(matmul(inputs[t], dir.w_input),
                           matmul(h, dir.w_hidden)),
                       dir.bias);
    Tensor i_gate = sigmoid(slice(gates, 0, 0, hidden));
    Tensor f_gate = sigmoid(slice(gates, 0, hidden, hidden));
    Tensor g_gate = tanh(slice(gates, 0, 2 * hidden, hidden));
    Tensor o_gate = sigmoid(slice(gates, 0, 3 * hidden, hidden));
    c = add(mul(f_gate, c), mul(i_gate, g_gate));
    h = mul(o_gate, tanh(c));
    out.steps[t] = h;
  }
  out.final_state = h;
  return out;
}

}  // namespace

LSTMOutput lstm_forward(const LSTMStack& stack, const Tensor& z) {
  if (z.rank() != 2) {
    throw std::invalid_argument("lstm: expected [L x d], got " +
                                shape_str(z.shape()));
  }
  const std::size_t len = z.shape()[0];
  if (len == 0) {
    throw std::invalid_argument("lstm: empty sequence");
  }

  std::vector<Tensor> rows(len);
  for (std::size_t t = 0; t < len; ++t) {
    rows[t] = reshape(slice(z, 0, t, 1), {z.shape()[1]});
  }

  Tensor final_state;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const auto& layer = stack.layers[l];
    DirectionOutput fwd = run_direction(layer.forward, rows, stack.hidden, false);
    if (stack.bidirectional) {
      DirectionOutput bwd =
          run_direction(layer.backward, rows, stack.hidden, true);
      for (std::size_t t = 0; t < len; ++t) {
        rows[t] = concat({fwd.steps[t], bwd.steps[t]}, 0);
      }
      final_state = concat({fwd.final_state, bwd.final_state}, 0);
    } else {
      rows = fwd.steps;
      final_state = fwd.final_state;
    }
  }

  std::vector<Tensor> as_rows(len);
  for (std::size_t t = 0; t < len; ++t) {
    as_rows[t] = reshape(rows[t], {1, stack.out_dim()});
  }
  LSTMOutput out;
  out.states = len == 1 ? as_rows[0] : concat(as_rows, 0);
  out.final_state = final_state;
  return out;
}

Tensor dropout_apply(const DropoutSpec& spec, const Tensor& x, Rng& rng) {
  if (spec.rate < 0.0 || spec.rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0, 1), got " +
                                std::to_string(spec.rate));
  }
  if (!spec.train || spec.rate == 0.0) {
    return x;
  }
  const double keep = 1.0 - spec.rate;
  std::vector<double> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = uniform_real(rng, 0.0, 1.0) < spec.rate ? 0.0 : 1.0 / keep;
  }
  return mul(x, constant(x.shape(), std::move(mask)));
}

Tensor cross_entropy(const Tensor& logits,
                     const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("cross_entropy: expected [batch x classes], got " +
                                shape_str(logits.shape()));
  }
  const std::size_t batch = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  if (labels.size() != batch) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(batch) +
                                " rows vs " + std::to_string(labels.size()) +
                                " labels");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw std::invalid_argument("cross_entropy: label " +
                                  std::to_string(labels[b]) +
                                  " out of range for " +
                                  std::to_string(classes) + " classes");
    }
  }

  // Fused node: forward uses the log-sum-exp trick, backward is the closed
  // form (softmax - onehot) / batch.
  const auto& lv = logits.values();
  std::vector<double> softmax_cache(lv.size());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * classes;
    double mx = lv[base];
    for (std::size_t j = 1; j < classes; ++j) {
      mx = std::max(mx, lv[base + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      softmax_cache[base + j] = std::exp(lv[base + j] - mx);
      z += softmax_cache[base + j];
    }
    for (std::size_t j = 0; j < classes; ++j) {
      softmax_cache[base + j] /= z;
    }
    total += std::log(z) + mx - lv[base + labels[b]];
  }
  const double loss = total / static_cast<double>(batch);

  return make_op_tensor(
      "cross_entropy", Shape{}, {loss}, {logits},
      [batch, classes, labels, softmax_cache](TensorNode& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) {
          return;
        }
        const double g = node.grad[0] / static_cast<double>(batch);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = b * classes;
          for (std::size_t j = 0; j < classes; ++j) {
            const double onehot = labels[b] == j ? 1.0 : 0.0;
            p.add_grad(base + j, g * (softmax_cache[base + j] - onehot));
          }
        }
      });
}

}  // namespace sermoe
