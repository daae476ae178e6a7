#include "sermoe/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace sermoe {

EncoderStack make_encoder(std::size_t raw_dim, const EncoderDims& dims,
                          Rng& rng) {
  EncoderStack enc;
  enc.conv = make_conv_bank(raw_dim, dims.conv_widths, dims.conv_filters, rng);
  enc.lstm = make_lstm(enc.conv.out_dim(), dims.lstm_hidden, dims.lstm_layers,
                       /*bidirectional=*/true, rng);
  const std::size_t state_dim = enc.lstm.out_dim();
  enc.w_query =
      glorot_uniform({state_dim, dims.attention_dim}, state_dim,
                     dims.attention_dim, rng);
  enc.w_key = glorot_uniform({state_dim, dims.attention_dim}, state_dim,
                             dims.attention_dim, rng);
  enc.w_value = glorot_uniform({state_dim, dims.attention_dim}, state_dim,
                               dims.attention_dim, rng);
  enc.output_dim = dims.attention_dim;
  return enc;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& keys,
                            const Tensor& values) {
  if (q.rank() != 1 || keys.rank() != 2 || values.rank() != 2 ||
      keys.shape()[1] != q.shape()[0] || keys.shape() != values.shape()) {
    throw std::invalid_argument(
        "attention: incompatible shapes q=" + shape_str(q.shape()) +
        " keys=" + shape_str(keys.shape()) +
        " values=" + shape_str(values.shape()));
  }
  const double scale =
      1.0 / std::sqrt(static_cast<double>(q.shape()[0]));
  Tensor logits = mul(matmul(keys, q), Tensor::scalar(scale));
  Tensor weights = softmax(logits);  // [L]
  return matmul(weights, values);    // [a]
}

Tensor encode_sequence(const EncoderStack& enc, const Tensor& z) {
  if (z.rank() != 2 || z.shape()[0] == 0) {
    throw std::invalid_argument("encode_sequence: expected nonempty [L x d], got " +
                                shape_str(z.shape()));
  }
  Tensor z_conv = conv1d_forward(enc.conv, z);
  LSTMOutput lstm_out = lstm_forward(enc.lstm, z_conv);
  Tensor query = matmul(lstm_out.final_state, enc.w_query);
  Tensor keys = matmul(lstm_out.states, enc.w_key);
  Tensor values = matmul(lstm_out.states, enc.w_value);
  return scaled_dot_attention(query, keys, values);
}

Tensor assemble_representation(const std::vector<Tensor>& encoded) {
  if (encoded.empty()) {
    throw std::invalid_argument("assemble_representation: no features");
  }
  if (encoded.size() == 1) {
    return encoded[0];
  }
  return concat(encoded, 0);
}

}  // namespace sermoe
