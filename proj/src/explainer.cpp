#include "bcos/explainer.hpp"

#include <algorithm>
#include <cmath>

namespace bcos {

namespace {

template <typename T>
Tensor<T> as_batch(const ModelGraph<T>& model, const Tensor<T>& x) {
  const std::size_t item_rank = model.flat_input() ? 1 : 3;
  if (x.rank() == item_rank) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return x.reshaped(s);
  }
  if (x.rank() == item_rank + 1 && x.dim(0) == 1) return x;
  throw Error(ErrorCode::ShapeMismatch, "explanations take a single item, got " + shape_str(x.shape()));
}

template <typename T>
Shape item_shape(const Tensor<T>& batch) {
  return Shape(batch.shape().begin() + 1, batch.shape().end());
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> dynamic_rows(const ModelGraph<T>& model, const Tensor<T>& x,
                                    const std::vector<std::size_t>& classes, Tensor<T>* logits) {
  const Tensor<T> batch = as_batch(model, x);
  const auto fwd = forward(model, batch, Mode::Eval, true);
  const std::size_t n_out = fwd.logits.size();
  std::vector<Tensor<T>> rows;
  for (std::size_t k : classes) {
    if (k >= n_out) throw Error(ErrorCode::IndexOutOfRange, "class " + std::to_string(k) + " out of range");
    Tensor<T> onehot({1, n_out});
    onehot[k] = T{1};
    rows.push_back(replay_backward(model, *fwd.record, onehot).reshaped(item_shape(batch)));
  }
  if (logits) *logits = fwd.logits.reshaped({n_out});
  return rows;
}

template <typename T>
Tensor<T> dynamic_row(const ModelGraph<T>& model, const Tensor<T>& x, std::size_t class_k) {
  return std::move(dynamic_rows(model, x, {class_k}).front());
}

// ---------------------------------------------------------------------------
// Dense oracle: one explicit [out, in] matrix per layer for a single item.

namespace {

std::size_t numel_item(const Shape& s) { return shape_numel(s) / s[0]; }

template <typename T>
Tensor<T> linear_like_matrix(const LayerSpec<T>& l, const LayerRecord<T>& rec) {
  const std::size_t in = numel_item(rec.input_shape), out = numel_item(rec.output_shape);
  const std::size_t f = l.weight.dim(0), klen = l.weight.size() / f;
  // Row-normalized copy for the unit-norm ablation, computed here directly.
  Tensor<T> w = l.weight;
  if (l.unit_norm_weights) {
    for (std::size_t r = 0; r < f; ++r) {
      T n{0};
      for (std::size_t j = 0; j < klen; ++j) n += w[r * klen + j] * w[r * klen + j];
      n = std::sqrt(n);
      if (n > T{0})
        for (std::size_t j = 0; j < klen; ++j) w[r * klen + j] /= n;
    }
  }
  const auto scale = [&](std::size_t r, std::size_t pos, std::size_t positions) {
    return l.is_bcos() ? rec.scale[r * positions + pos] : T{1};
  };
  Tensor<T> m({out, in});
  if (!l.is_conv()) {
    for (std::size_t r = 0; r < f; ++r)
      for (std::size_t j = 0; j < in; ++j) m[r * in + j] = scale(r, 0, 1) * w[r * in + j];
    return m;
  }
  const std::size_t c = l.weight.dim(1), kh = l.weight.dim(2), kw = l.weight.dim(3);
  const std::size_t h = rec.input_shape[2], wd = rec.input_shape[3];
  const std::size_t oh = rec.output_shape[2], ow = rec.output_shape[3];
  for (std::size_t r = 0; r < f; ++r)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t pos = oy * ow + ox;
        const std::size_t row = (r * oh + oy) * ow + ox;
        const T s = scale(r, pos, oh * ow);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long iy = static_cast<long>(oy * l.stride + ky) - static_cast<long>(l.padding);
              const long ix = static_cast<long>(ox * l.stride + kx) - static_cast<long>(l.padding);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
              const std::size_t col = (ch * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix);
              m[row * in + col] += s * w[((r * c + ch) * kh + ky) * kw + kx];
            }
      }
  return m;
}

template <typename T>
Tensor<T> layer_matrix(const LayerSpec<T>& l, const LayerRecord<T>& rec);

template <typename T>
Tensor<T> sequence_matrix(const std::vector<LayerSpec<T>>& layers, const std::vector<LayerRecord<T>>& recs,
                          std::size_t in) {
  Tensor<T> acc = Tensor<T>::identity(in);
  for (std::size_t i = 0; i < layers.size(); ++i) acc = matmul(layer_matrix(layers[i], recs[i]), acc);
  return acc;
}

template <typename T>
Tensor<T> layer_matrix(const LayerSpec<T>& l, const LayerRecord<T>& rec) {
  const std::size_t in = numel_item(rec.input_shape), out = numel_item(rec.output_shape);
  if (l.is_linear_like()) return linear_like_matrix(l, rec);
  Tensor<T> m({out, in});
  switch (l.kind) {
    case LayerKind::ReLU:
    case LayerKind::MaxOut:
      if (l.branches.empty()) {
        for (std::size_t i = 0; i < in; ++i) m[i * in + i] = rec.selection[i] ? T{1} : T{0};
      } else {
        for (std::size_t r = 0; r < out; ++r) {
          const auto& b = l.branches[rec.selection[r]];
          for (std::size_t j = 0; j < in; ++j) m[r * in + j] = b[r * in + j];
        }
      }
      return m;
    case LayerKind::BatchNormCentered:
    case LayerKind::BatchNormUncentered: {
      const std::size_t c = rec.input_shape[1], plane = in / c;
      for (std::size_t i = 0; i < in; ++i) {
        const std::size_t ch = i / plane;
        m[i * in + i] = l.bn_scale[ch] * rec.bn_inv_std[ch];
      }
      return m;
    }
    case LayerKind::AvgPool:
    case LayerKind::MaxPool: {
      const std::size_t c = rec.input_shape[1], h = rec.input_shape[2], w = rec.input_shape[3];
      const std::size_t oh = rec.output_shape[2], ow = rec.output_shape[3], k = l.pool_size;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::size_t row = (ch * oh + oy) * ow + ox;
            if (l.kind == LayerKind::MaxPool) {
              m[row * in + ch * h * w + rec.selection[row]] = T{1};
              continue;
            }
            for (std::size_t dy = 0; dy < k; ++dy)
              for (std::size_t dx = 0; dx < k; ++dx)
                m[row * in + (ch * h + oy * k + dy) * w + ox * k + dx] = T{1} / static_cast<T>(k * k);
          }
      return m;
    }
    case LayerKind::GlobalAvgPool: {
      const std::size_t plane = in / out;
      for (std::size_t r = 0; r < out; ++r)
        for (std::size_t j = 0; j < plane; ++j) m[r * in + r * plane + j] = T{1} / static_cast<T>(plane);
      return m;
    }
    case LayerKind::Residual: {
      Tensor<T> body = sequence_matrix(l.body, rec.body, in);
      for (std::size_t i = 0; i < in; ++i) body[i * in + i] += T{1};
      return body;
    }
    case LayerKind::Flatten:
    case LayerKind::LogitBias:
      return Tensor<T>::identity(in);
    default:
      break;
  }
  throw Error(ErrorCode::UnsupportedLayer, "no dense factor for " + std::string(to_string(l.kind)));
}

}  // namespace

template <typename T>
Tensor<T> dense_dynamic_matrix(const ModelGraph<T>& model, const Tensor<T>& x) {
  const Tensor<T> batch = as_batch(model, x);
  const std::size_t in = numel_item(batch.shape());
  if (in > kDenseInputLimit) {
    throw Error(ErrorCode::TooLarge, "dense W(x) limited to " + std::to_string(kDenseInputLimit) + " inputs, got " +
                                         std::to_string(in));
  }
  const auto fwd = forward(model, batch, Mode::Eval, true);
  return sequence_matrix(model.layers, fwd.record->layers, in);
}

// ---------------------------------------------------------------------------

template <typename T>
AttributionMap<T> attribution_from_row(const Tensor<T>& row, const Tensor<T>& x, T logit, EnergyMode energy) {
  if (row.size() != x.size()) throw Error(ErrorCode::ShapeMismatch, "row and input sizes differ");
  AttributionMap<T> a;
  a.signed_map = hadamard(row, x.reshaped(row.shape()));
  a.logit = logit;
  T total{0};
  for (T v : a.signed_map.values()) total += v;
  a.residual = logit - total;

  const bool image = row.rank() == 3;
  const std::size_t channels = image ? row.dim(0) : 1;
  const Shape plane_shape = image ? Shape{row.dim(1), row.dim(2)} : row.shape();
  const std::size_t plane = shape_numel(plane_shape);
  a.collapsed = Tensor<T>(plane_shape);
  a.positive_energy = Tensor<T>(plane_shape);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      const T v = a.signed_map[c * plane + i];
      a.collapsed[i] += v;
      if (energy == EnergyMode::ClampThenSum) a.positive_energy[i] += std::max(v, T{0});
    }
  if (energy == EnergyMode::SumThenClamp)
    for (std::size_t i = 0; i < plane; ++i) a.positive_energy[i] = std::max(a.collapsed[i], T{0});
  return a;
}

template <typename T>
AttributionMap<T> contribution_map(const ModelGraph<T>& model, const Tensor<T>& x, std::size_t class_k,
                                   EnergyMode energy) {
  Tensor<T> logits;
  auto rows = dynamic_rows(model, x, {class_k}, &logits);
  return attribution_from_row(rows.front(), x, logits[class_k], energy);
}

double percentile_of(std::vector<double> values, double pct) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

template <typename T>
ColorExplanation<T> render_color(const Tensor<T>& row6, double percentile) {
  if (row6.rank() != 3 || row6.dim(0) != 6) {
    throw Error(ErrorCode::WrongChannelCount, "color rendering needs a [6,H,W] row, got " + shape_str(row6.shape()));
  }
  const std::size_t h = row6.dim(1), w = row6.dim(2), plane = h * w;
  ColorExplanation<T> out{Tensor<T>({4, h, w})};
  std::vector<double> norms(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    double sq = 0;
    for (std::size_t c = 0; c < 6; ++c) sq += static_cast<double>(row6[c * plane + i]) * row6[c * plane + i];
    norms[i] = std::sqrt(sq);
    for (std::size_t s = 0; s < 3; ++s) {
      const T a = std::max(row6[s * plane + i], T{0});
      const T abar = std::max(row6[(s + 3) * plane + i], T{0});
      out.rgba[s * plane + i] = (a + abar) > T{0} ? a / (a + abar) : T(0.5);
    }
  }
  const double ref = percentile_of(norms, percentile);
  for (std::size_t i = 0; i < plane; ++i) {
    out.rgba[3 * plane + i] = ref > 0 ? static_cast<T>(std::clamp(norms[i] / ref, 0.0, 1.0)) : T{0};
  }
  return out;
}

template <typename T>
std::string encode_ppm(const ColorExplanation<T>& image) {
  const std::size_t h = image.rgba.dim(1), w = image.rgba.dim(2), plane = h * w;
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + 3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const double alpha = std::clamp(static_cast<double>(image.rgba[3 * plane + i]), 0.0, 1.0);
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(image.rgba[c * plane + i]), 0.0, 1.0);
      const double over_white = alpha * v + (1.0 - alpha);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(over_white * 255.0))));
    }
  }
  return out;
}

#define BCOS_EXPLAINER_INSTANTIATE(T)                                                                             \
  template Tensor<T> dynamic_row(const ModelGraph<T>&, const Tensor<T>&, std::size_t);                            \
  template std::vector<Tensor<T>> dynamic_rows(const ModelGraph<T>&, const Tensor<T>&,                           \
                                               const std::vector<std::size_t>&, Tensor<T>*);                     \
  template Tensor<T> dense_dynamic_matrix(const ModelGraph<T>&, const Tensor<T>&);                                \
  template AttributionMap<T> contribution_map(const ModelGraph<T>&, const Tensor<T>&, std::size_t, EnergyMode);   \
  template AttributionMap<T> attribution_from_row(const Tensor<T>&, const Tensor<T>&, T, EnergyMode);             \
  template ColorExplanation<T> render_color(const Tensor<T>&, double);                                            \
  template std::string encode_ppm(const ColorExplanation<T>&);

BCOS_EXPLAINER_INSTANTIATE(float)
BCOS_EXPLAINER_INSTANTIATE(double)

}  // namespace bcos
