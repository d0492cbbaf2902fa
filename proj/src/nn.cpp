#include "bcos/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace bcos {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 14> kKindNames{{
    {LayerKind::Linear, "Linear"},
    {LayerKind::Conv2d, "Conv2d"},
    {LayerKind::BcosLinear, "BcosLinear"},
    {LayerKind::BcosConv2d, "BcosConv2d"},
    {LayerKind::ReLU, "ReLU"},
    {LayerKind::MaxOut, "MaxOut"},
    {LayerKind::BatchNormUncentered, "BatchNormUncentered"},
    {LayerKind::BatchNormCentered, "BatchNormCentered"},
    {LayerKind::AvgPool, "AvgPool"},
    {LayerKind::MaxPool, "MaxPool"},
    {LayerKind::GlobalAvgPool, "GlobalAvgPool"},
    {LayerKind::Flatten, "Flatten"},
    {LayerKind::Residual, "Residual"},
    {LayerKind::LogitBias, "LogitBias"},
}};

}  // namespace

std::string_view to_string(LayerKind kind) noexcept {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "Unknown";
}

std::optional<LayerKind> layer_kind_from_string(std::string_view name) noexcept {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  return std::nullopt;
}

std::string_view to_string(GapOrder order) noexcept {
  return order == GapOrder::ClassifierThenPool ? "classifier_then_pool" : "pool_then_classifier";
}

std::optional<GapOrder> gap_order_from_string(std::string_view name) noexcept {
  if (name == "classifier_then_pool") return GapOrder::ClassifierThenPool;
  if (name == "pool_then_classifier") return GapOrder::PoolThenClassifier;
  return std::nullopt;
}

template <typename T>
Shape ModelGraph<T>::input_shape(std::size_t batch) const {
  if (flat_input()) return {batch, input_channels};
  return {batch, input_channels, input_height, input_width};
}

namespace {

[[noreturn]] void shape_error(std::string_view what, const Shape& got) {
  throw Error(ErrorCode::ShapeMismatch, std::string(what) + ", got input " + shape_str(got));
}

std::size_t trailing(const Shape& s, std::size_t from) {
  std::size_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
  return n;
}

// ---------------------------------------------------------------------------
// Linear-like layers share one column formulation: weights [F, K] applied to
// columns [K, M]. Dense layers use M = N (one column per item), convolutions
// M = N * H' * W' via im2col.

template <typename T>
ConvGeometry conv_geometry(const LayerSpec<T>& layer, const Shape& in) {
  return ConvGeometry{in[1], in[2], in[3], layer.weight.dim(2), layer.weight.dim(3), layer.stride, layer.padding};
}

template <typename T>
Tensor<T> weight_matrix(const LayerSpec<T>& layer) {
  const std::size_t f = layer.weight.dim(0);
  Tensor<T> w = layer.weight.reshaped({f, layer.weight.size() / f});
  if (!layer.unit_norm_weights) return w;
  const std::size_t k = w.dim(1);
  for (std::size_t r = 0; r < f; ++r) {
    T* row = w.data() + r * k;
    T n{0};
    for (std::size_t i = 0; i < k; ++i) n += row[i] * row[i];
    n = std::sqrt(n);
    if (n > T{0})
      for (std::size_t i = 0; i < k; ++i) row[i] /= n;
  }
  return w;
}

template <typename T>
Tensor<T> to_columns(const LayerSpec<T>& layer, const Tensor<T>& x) {
  if (layer.is_conv()) return im2col(x, conv_geometry(layer, x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> cols({d, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) cols[j * n + i] = x[i * d + j];
  return cols;
}

// [F, N*P] -> [N, F, P...] (or [N, F] for dense layers)
template <typename T>
Tensor<T> columns_to_activation(const Tensor<T>& fm, const Shape& out_shape) {
  const std::size_t n = out_shape[0], f = out_shape[1];
  const std::size_t p = trailing(out_shape, 2);
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < f; ++r)
      std::copy_n(fm.data() + r * n * p + i * p, p, out.data() + (i * f + r) * p);
  return out;
}

template <typename T>
Tensor<T> activation_to_columns(const Tensor<T>& act) {
  const std::size_t n = act.dim(0), f = act.dim(1);
  const std::size_t p = trailing(act.shape(), 2);
  Tensor<T> fm({f, n * p});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < f; ++r)
      std::copy_n(act.data() + (i * f + r) * p, p, fm.data() + r * n * p + i * p);
  return fm;
}

template <typename T>
Tensor<T> columns_to_input(const LayerSpec<T>& layer, const Tensor<T>& dcols, const Shape& in) {
  if (layer.is_conv()) return col2im(dcols, in[0], conv_geometry(layer, in));
  const std::size_t d = dcols.dim(0), n = dcols.dim(1);
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = dcols[j * n + i];
  return out;
}

template <typename T>
Tensor<T> row_norms(const Tensor<T>& w) {
  const std::size_t f = w.dim(0), k = w.dim(1);
  Tensor<T> out({f});
  for (std::size_t r = 0; r < f; ++r) {
    T acc{0};
    for (std::size_t i = 0; i < k; ++i) acc += w[r * k + i] * w[r * k + i];
    out[r] = std::sqrt(acc);
  }
  return out;
}

template <typename T>
Tensor<T> column_norms(const Tensor<T>& cols) {
  const std::size_t k = cols.dim(0), m = cols.dim(1);
  Tensor<T> out({m});
  for (std::size_t r = 0; r < k; ++r) {
    const T* row = cols.data() + r * m;
    for (std::size_t i = 0; i < m; ++i) out[i] += row[i] * row[i];
  }
  for (auto& v : out.values()) v = std::sqrt(v);
  return out;
}

template <typename T>
T cos_power(T c, T exponent_minus_one) {
  const T a = std::abs(c);
  if (exponent_minus_one == T{0}) return T{1};
  if (exponent_minus_one == T{1}) return a;
  return std::pow(a, exponent_minus_one);
}

// Fills rec.{cols, preactivation, cosine, scale, input_norm, weight_norm}
// and returns [F, M] outputs including bias.
template <typename T>
Tensor<T> linear_core_forward(const LayerSpec<T>& layer, const Tensor<T>& w, Tensor<T> cols, LayerRecord<T>& rec) {
  Tensor<T> z = matmul(w, cols);
  const std::size_t f = z.dim(0), m = z.dim(1);
  Tensor<T> out;
  if (layer.is_bcos()) {
    const T eps = T(kCosEps);
    const T bm1 = layer.b_exponent - T{1};
    rec.input_norm = column_norms(cols);
    rec.weight_norm = row_norms(w);
    rec.cosine = Tensor<T>({f, m});
    rec.scale = Tensor<T>({f, m});
    out = Tensor<T>({f, m});
    for (std::size_t r = 0; r < f; ++r) {
      const T nw = rec.weight_norm[r];
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t idx = r * m + i;
        const T c = z[idx] / (nw * rec.input_norm[i] + eps);
        const T s = cos_power(c, bm1);
        rec.cosine[idx] = c;
        rec.scale[idx] = s;
        out[idx] = s * z[idx];
      }
    }
  } else {
    out = z;
  }
  if (layer.has_bias()) {
    for (std::size_t r = 0; r < f; ++r) {
      const T b = layer.bias[r];
      for (std::size_t i = 0; i < m; ++i) out[r * m + i] += b;
    }
  }
  rec.cols = std::move(cols);
  rec.preactivation = std::move(z);
  return out;
}

template <typename T>
struct CoreGrads {
  Tensor<T> dcols;
  Tensor<T> dw;
  Tensor<T> dbias;
  T db_exponent = T{0};
};

// g is the upstream gradient in [F, M] layout.
template <typename T>
CoreGrads<T> linear_core_backward(const LayerSpec<T>& layer, const Tensor<T>& w, const LayerRecord<T>& rec,
                                  const Tensor<T>& g) {
  const std::size_t f = g.dim(0), m = g.dim(1);
  CoreGrads<T> out;
  Tensor<T> g1 = g;
  if (layer.is_bcos()) {
    const T b = layer.b_exponent;
    for (std::size_t i = 0; i < g1.size(); ++i) g1[i] *= b * rec.scale[i];
  }
  out.dw = matmul(g1, rec.cols, Transpose::No, Transpose::Yes);
  out.dcols = matmul(w, g1, Transpose::Yes, Transpose::No);
  if (layer.is_bcos()) {
    const T bm1 = layer.b_exponent - T{1};
    const T eps = T(kCosEps);
    const std::size_t k = w.dim(1);
    std::vector<T> row_coef(f, T{0});
    std::vector<T> col_coef(m, T{0});
    T db{0};
    for (std::size_t r = 0; r < f; ++r) {
      const T nw = rec.weight_norm[r];
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t idx = r * m + i;
        const T gs = g[idx] * rec.scale[idx];
        const T c = rec.cosine[idx];
        if (std::abs(c) > eps) db += gs * rec.preactivation[idx] * std::log(std::abs(c));
        if (bm1 == T{0}) continue;
        const T q = gs * bm1 * c;
        const T nx = rec.input_norm[i];
        if (nw > T{0}) row_coef[r] += q * nx / nw;
        if (nx > T{0}) col_coef[i] += q * nw / nx;
      }
    }
    out.db_exponent = db;
    if (bm1 != T{0}) {
      for (std::size_t r = 0; r < f; ++r)
        for (std::size_t j = 0; j < k; ++j) out.dw[r * k + j] -= row_coef[r] * w[r * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        const T* col_row = rec.cols.data() + j * m;
        T* d_row = out.dcols.data() + j * m;
        for (std::size_t i = 0; i < m; ++i) d_row[i] -= col_coef[i] * col_row[i];
      }
    }
  }
  if (layer.has_bias()) {
    out.dbias = Tensor<T>({f});
    for (std::size_t r = 0; r < f; ++r) {
      T acc{0};
      for (std::size_t i = 0; i < m; ++i) acc += g[r * m + i];
      out.dbias[r] = acc;
    }
  }
  return out;
}

// Maps a gradient w.r.t. row-normalized weights back to the raw weights.
template <typename T>
Tensor<T> unit_norm_backward(const Tensor<T>& raw, const Tensor<T>& normalized, const Tensor<T>& d_normalized) {
  const std::size_t f = raw.dim(0), k = raw.size() / f;
  Tensor<T> out(raw.shape());
  for (std::size_t r = 0; r < f; ++r) {
    T n{0}, proj{0};
    for (std::size_t j = 0; j < k; ++j) {
      n += raw[r * k + j] * raw[r * k + j];
      proj += normalized[r * k + j] * d_normalized[r * k + j];
    }
    n = std::sqrt(n);
    if (n == T{0}) continue;
    for (std::size_t j = 0; j < k; ++j) {
      out[r * k + j] = (d_normalized[r * k + j] - normalized[r * k + j] * proj) / n;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// BatchNorm over channel axis 1.

template <typename T>
Tensor<T> batchnorm_core(const LayerSpec<T>& layer, const Tensor<T>& x, Mode mode, LayerRecord<T>& rec) {
  const bool centered = layer.kind == LayerKind::BatchNormCentered;
  const std::size_t n = x.dim(0), c = x.dim(1), p = trailing(x.shape(), 2);
  const T count = static_cast<T>(n * p);
  rec.bn_mode = mode;
  rec.bn_inv_std = Tensor<T>({c});
  Tensor<T> mean({c});
  if (mode == Mode::Train) {
    rec.bn_batch_stat = Tensor<T>({c});
    if (centered) rec.bn_batch_mean = Tensor<T>({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
      T mu{0};
      if (centered) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < p; ++j) mu += x[(i * c + ch) * p + j];
        mu /= count;
      }
      T stat{0};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) {
          const T d = x[(i * c + ch) * p + j] - mu;
          stat += d * d;
        }
      stat /= count;
      mean[ch] = mu;
      if (centered) rec.bn_batch_mean[ch] = mu;
      rec.bn_batch_stat[ch] = stat;
      rec.bn_inv_std[ch] = T{1} / std::sqrt(stat + layer.bn_eps);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T stat = centered ? layer.running_var[ch] : layer.running_sq[ch];
      mean[ch] = centered ? layer.running_mean[ch] : T{0};
      rec.bn_inv_std[ch] = T{1} / std::sqrt(stat + layer.bn_eps);
    }
  }
  rec.bn_normalized = Tensor<T>(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T a = layer.bn_scale[ch];
      const T b = layer.has_bias() ? layer.bias[ch] : T{0};
      const T inv = rec.bn_inv_std[ch];
      for (std::size_t j = 0; j < p; ++j) {
        const std::size_t idx = (i * c + ch) * p + j;
        const T yhat = (x[idx] - mean[ch]) * inv;
        rec.bn_normalized[idx] = yhat;
        out[idx] = a * yhat + b;
      }
    }
  return out;
}

template <typename T>
Tensor<T> batchnorm_backward(const LayerSpec<T>& layer, const LayerRecord<T>& rec, const Tensor<T>& g,
                             LayerGrad<T>& grad) {
  const bool centered = layer.kind == LayerKind::BatchNormCentered;
  const Shape& s = rec.input_shape;
  const std::size_t n = s[0], c = s[1], p = trailing(s, 2);
  const T count = static_cast<T>(n * p);
  grad.bn_scale = Tensor<T>({c});
  if (layer.has_bias()) grad.bias = Tensor<T>({c});
  Tensor<T> dx(s);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T a = layer.bn_scale[ch];
    const T inv = rec.bn_inv_std[ch];
    T sum_g{0}, sum_gy{0};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        const std::size_t idx = (i * c + ch) * p + j;
        sum_g += g[idx];
        sum_gy += g[idx] * rec.bn_normalized[idx];
      }
    grad.bn_scale[ch] = sum_gy;
    if (layer.has_bias()) grad.bias[ch] = sum_g;
    // With dyhat = a * g: mean(dyhat) and mean(dyhat * yhat).
    const T mean_d = a * sum_g / count;
    const T mean_dy = a * sum_gy / count;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p; ++j) {
        const std::size_t idx = (i * c + ch) * p + j;
        const T dyhat = a * g[idx];
        if (rec.bn_mode == Mode::Eval) {
          dx[idx] = dyhat * inv;
        } else if (centered) {
          dx[idx] = inv * (dyhat - mean_d - rec.bn_normalized[idx] * mean_dy);
        } else {
          dx[idx] = inv * (dyhat - rec.bn_normalized[idx] * mean_dy);
        }
      }
  }
  return dx;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pool_forward(const LayerSpec<T>& layer, const Tensor<T>& x, LayerRecord<T>& rec) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), k = layer.pool_size;
  const std::size_t oh = h / k, ow = w / k;
  Tensor<T> out({n, c, oh, ow});
  const bool is_max = layer.kind == LayerKind::MaxPool;
  if (is_max) rec.selection.assign(out.size(), 0);
  const T inv = T{1} / static_cast<T>(k * k);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t o = (plane * oh + oy) * ow + ox;
        if (is_max) {
          std::size_t best = oy * k * w + ox * k;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) {
              const std::size_t idx = (oy * k + dy) * w + ox * k + dx;
              if (src[idx] > src[best]) best = idx;
            }
          rec.selection[o] = static_cast<std::uint32_t>(best);
          out[o] = src[best];
        } else {
          T acc{0};
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) acc += src[(oy * k + dy) * w + ox * k + dx];
          out[o] = acc * inv;
        }
      }
  }
  return out;
}

template <typename T>
Tensor<T> pool_backward(const LayerSpec<T>& layer, const LayerRecord<T>& rec, const Tensor<T>& g) {
  const Shape& s = rec.input_shape;
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3], k = layer.pool_size;
  const std::size_t oh = h / k, ow = w / k;
  Tensor<T> dx(s);
  const T inv = T{1} / static_cast<T>(k * k);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    T* dst = dx.data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t o = (plane * oh + oy) * ow + ox;
        if (layer.kind == LayerKind::MaxPool) {
          dst[rec.selection[o]] += g[o];
        } else {
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t ddx = 0; ddx < k; ++ddx) dst[(oy * k + dy) * w + ox * k + ddx] += g[o] * inv;
        }
      }
  }
  return dx;
}

template <typename T>
Tensor<T> maxout_explicit_forward(const LayerSpec<T>& layer, const Tensor<T>& x, LayerRecord<T>& rec) {
  const std::size_t n = x.dim(0);
  const std::size_t f = layer.branches.front().dim(0);
  Tensor<T> out({n, f});
  rec.selection.assign(n * f, 0);
  for (std::size_t b = 0; b < layer.branches.size(); ++b) {
    const Tensor<T> z = matmul(x, layer.branches[b], Transpose::No, Transpose::Yes);
    for (std::size_t i = 0; i < n * f; ++i) {
      if (b == 0 || z[i] > out[i]) {
        out[i] = z[i];
        rec.selection[i] = static_cast<std::uint32_t>(b);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch

template <typename T>
Tensor<T> forward_sequence(const std::vector<LayerSpec<T>>& layers, Tensor<T> x, Mode mode, bool capture,
                           std::vector<LayerRecord<T>>* records, const std::string& prefix);

template <typename T>
Tensor<T> forward_layer(const LayerSpec<T>& layer, const Tensor<T>& x, Mode mode, bool capture,
                        LayerRecord<T>& rec, const std::string& where) {
  rec.input_shape = x.shape();
  switch (layer.kind) {
    case LayerKind::Linear:
    case LayerKind::Conv2d:
    case LayerKind::BcosLinear:
    case LayerKind::BcosConv2d: {
      Tensor<T> w = weight_matrix(layer);
      Tensor<T> fm = linear_core_forward(layer, w, to_columns(layer, x), rec);
      if (layer.unit_norm_weights) rec.effective_weight = std::move(w);
      Shape out_shape{x.dim(0), layer.weight.dim(0)};
      if (layer.is_conv()) {
        const auto g = conv_geometry(layer, x.shape());
        out_shape.push_back(g.out_height());
        out_shape.push_back(g.out_width());
      }
      return columns_to_activation(fm, out_shape);
    }
    case LayerKind::ReLU:
      if (!layer.branches.empty()) break;
      [[fallthrough]];
    case LayerKind::MaxOut: {
      if (!layer.branches.empty()) {
        if (capture) rec.input = x;
        return maxout_explicit_forward(layer, x, rec);
      }
      Tensor<T> out = x;
      rec.selection.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const bool on = x[i] > T{0};
        rec.selection[i] = on;
        if (!on) out[i] = T{0};
      }
      return out;
    }
    case LayerKind::BatchNormUncentered:
    case LayerKind::BatchNormCentered:
      return batchnorm_core(layer, x, mode, rec);
    case LayerKind::AvgPool:
    case LayerKind::MaxPool:
      return pool_forward(layer, x, rec);
    case LayerKind::GlobalAvgPool: {
      const std::size_t n = x.dim(0), c = x.dim(1), p = trailing(x.shape(), 2);
      Tensor<T> out({n, c});
      for (std::size_t i = 0; i < n * c; ++i) {
        T acc{0};
        for (std::size_t j = 0; j < p; ++j) acc += x[i * p + j];
        out[i] = acc / static_cast<T>(p);
      }
      return out;
    }
    case LayerKind::Flatten:
      return x.reshaped({x.dim(0), x.size() / x.dim(0)});
    case LayerKind::Residual: {
      Tensor<T> branch = forward_sequence(layer.body, x, mode, capture, &rec.body, where + ".body");
      branch += x;
      return branch;
    }
    case LayerKind::LogitBias: {
      Tensor<T> out = x;
      for (auto& v : out.values()) v += layer.logit_bias;
      return out;
    }
  }
  throw Error(ErrorCode::UnsupportedLayer, "ReLU layers take no branches");
}

template <typename T>
Tensor<T> forward_sequence(const std::vector<LayerSpec<T>>& layers, Tensor<T> x, Mode mode, bool capture,
                           std::vector<LayerRecord<T>>* records, const std::string& prefix) {
  if (records) records->clear();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = prefix + std::to_string(i);
    LayerRecord<T> rec;
    Tensor<T> y = forward_layer(layers[i], x, mode, capture, rec, where + ".");
    if (!all_finite<T>(y.values())) {
      throw Error(ErrorCode::NonFiniteActivation,
                  "layer " + where + " (" + std::string(to_string(layers[i].kind)) + ") produced a non-finite value");
    }
    rec.output_shape = y.shape();
    if (records) records->push_back(std::move(rec));
    x = std::move(y);
  }
  return x;
}

template <typename T>
Tensor<T> backward_sequence(const std::vector<LayerSpec<T>>& layers, const std::vector<LayerRecord<T>>& records,
                            Tensor<T> g, std::vector<LayerGrad<T>>& grads);

template <typename T>
Tensor<T> backward_layer(const LayerSpec<T>& layer, const LayerRecord<T>& rec, const Tensor<T>& g,
                         LayerGrad<T>& grad) {
  switch (layer.kind) {
    case LayerKind::Linear:
    case LayerKind::Conv2d:
    case LayerKind::BcosLinear:
    case LayerKind::BcosConv2d: {
      const Tensor<T> w = layer.unit_norm_weights ? rec.effective_weight : weight_matrix(layer);
      auto core = linear_core_backward(layer, w, rec, activation_to_columns(g));
      grad.weight = layer.unit_norm_weights ? unit_norm_backward(layer.weight, w, core.dw)
                                            : std::move(core.dw);
      grad.weight = std::move(grad.weight).reshaped(layer.weight.shape());
      grad.bias = std::move(core.dbias);
      grad.b_exponent = core.db_exponent;
      return columns_to_input(layer, core.dcols, rec.input_shape);
    }
    case LayerKind::ReLU:
    case LayerKind::MaxOut: {
      if (!layer.branches.empty()) {
        const std::size_t n = rec.input_shape[0], d = rec.input_shape[1];
        const std::size_t f = layer.branches.front().dim(0);
        Tensor<T> dx({n, d});
        grad.branches.assign(layer.branches.size(), Tensor<T>());
        for (std::size_t b = 0; b < layer.branches.size(); ++b) grad.branches[b] = Tensor<T>(layer.branches[b].shape());
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t r = 0; r < f; ++r) {
            const std::size_t b = rec.selection[i * f + r];
            const T gv = g[i * f + r];
            const T* wrow = layer.branches[b].data() + r * d;
            T* dwrow = grad.branches[b].data() + r * d;
            for (std::size_t j = 0; j < d; ++j) {
              dx[i * d + j] += gv * wrow[j];
              dwrow[j] += gv * rec.input[i * d + j];
            }
          }
        return dx;
      }
      Tensor<T> dx = g;
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (!rec.selection[i]) dx[i] = T{0};
      return dx;
    }
    case LayerKind::BatchNormUncentered:
    case LayerKind::BatchNormCentered:
      return batchnorm_backward(layer, rec, g, grad);
    case LayerKind::AvgPool:
    case LayerKind::MaxPool:
      return pool_backward(layer, rec, g);
    case LayerKind::GlobalAvgPool: {
      Tensor<T> dx(rec.input_shape);
      const std::size_t p = trailing(rec.input_shape, 2);
      const T inv = T{1} / static_cast<T>(p);
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < p; ++j) dx[i * p + j] = g[i] * inv;
      return dx;
    }
    case LayerKind::Flatten:
      return g.reshaped(rec.input_shape);
    case LayerKind::Residual: {
      Tensor<T> dx = backward_sequence(layer.body, rec.body, g, grad.body);
      dx += g;
      return dx;
    }
    case LayerKind::LogitBias:
      return g;
  }
  return g;
}

template <typename T>
Tensor<T> backward_sequence(const std::vector<LayerSpec<T>>& layers, const std::vector<LayerRecord<T>>& records,
                            Tensor<T> g, std::vector<LayerGrad<T>>& grads) {
  if (records.size() != layers.size()) {
    throw Error(ErrorCode::ShapeMismatch, "record does not match the model's layer count");
  }
  grads.assign(layers.size(), LayerGrad<T>{});
  for (std::size_t i = layers.size(); i-- > 0;) g = backward_layer(layers[i], records[i], g, grads[i]);
  return g;
}

// Frozen-factor replay: each layer acts as the fixed linear map recorded in
// the forward pass; biases and shifts drop out.
template <typename T>
Tensor<T> replay_sequence(const std::vector<LayerSpec<T>>& layers, const std::vector<LayerRecord<T>>& records,
                          Tensor<T> g);

template <typename T>
Tensor<T> replay_layer(const LayerSpec<T>& layer, const LayerRecord<T>& rec, const Tensor<T>& g) {
  switch (layer.kind) {
    case LayerKind::Linear:
    case LayerKind::Conv2d:
    case LayerKind::BcosLinear:
    case LayerKind::BcosConv2d: {
      const Tensor<T> w = layer.unit_norm_weights ? rec.effective_weight : weight_matrix(layer);
      Tensor<T> fm = activation_to_columns(g);
      if (layer.is_bcos())
        for (std::size_t i = 0; i < fm.size(); ++i) fm[i] *= rec.scale[i];
      return columns_to_input(layer, matmul(w, fm, Transpose::Yes, Transpose::No), rec.input_shape);
    }
    case LayerKind::BatchNormUncentered:
    case LayerKind::BatchNormCentered: {
      Tensor<T> dx = g;
      const std::size_t c = rec.input_shape[1], p = trailing(rec.input_shape, 2);
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const std::size_t ch = (i / p) % c;
        dx[i] *= layer.bn_scale[ch] * rec.bn_inv_std[ch];
      }
      return dx;
    }
    case LayerKind::Residual: {
      Tensor<T> dx = replay_sequence(layer.body, rec.body, g);
      dx += g;
      return dx;
    }
    default: {
      // Gates, pools and reshapes carry no parameters; their backward is
      // already the frozen linear map.
      LayerGrad<T> unused;
      return backward_layer(layer, rec, g, unused);
    }
  }
}

template <typename T>
Tensor<T> replay_sequence(const std::vector<LayerSpec<T>>& layers, const std::vector<LayerRecord<T>>& records,
                          Tensor<T> g) {
  if (records.size() != layers.size()) {
    throw Error(ErrorCode::ShapeMismatch, "record does not match the model's layer count");
  }
  for (std::size_t i = layers.size(); i-- > 0;) g = replay_layer(layers[i], records[i], g);
  return g;
}

template <typename T>
void update_stats_sequence(std::vector<LayerSpec<T>>& layers, const std::vector<LayerRecord<T>>& records) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& layer = layers[i];
    const auto& rec = records[i];
    if (layer.kind == LayerKind::Residual) {
      update_stats_sequence(layer.body, rec.body);
      continue;
    }
    if (!layer.is_batchnorm() || rec.bn_mode != Mode::Train) continue;
    const T m = layer.bn_momentum;
    const std::size_t c = layer.bn_scale.size();
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (layer.kind == LayerKind::BatchNormCentered) {
        layer.running_mean[ch] = (T{1} - m) * layer.running_mean[ch] + m * rec.bn_batch_mean[ch];
        layer.running_var[ch] = (T{1} - m) * layer.running_var[ch] + m * rec.bn_batch_stat[ch];
      } else {
        layer.running_sq[ch] = (T{1} - m) * layer.running_sq[ch] + m * rec.bn_batch_stat[ch];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Shape inference

template <typename T>
Shape infer_sequence(const std::vector<LayerSpec<T>>& layers, Shape s, const std::string& prefix);

template <typename T>
Shape infer_layer(const LayerSpec<T>& layer, const Shape& s, const std::string& where) {
  const auto fail = [&](std::string_view what) {
    shape_error("layer " + where + " (" + std::string(to_string(layer.kind)) + "): " + std::string(what), s);
  };
  switch (layer.kind) {
    case LayerKind::Linear:
    case LayerKind::BcosLinear:
      if (layer.weight.rank() != 2) fail("weight must be [out, in]");
      if (s.size() != 2 || s[1] != layer.weight.dim(1)) fail("expects [N, " + std::to_string(layer.weight.dim(1)) + "]");
      if (layer.has_bias() && layer.bias.size() != layer.weight.dim(0)) fail("bias length");
      return {s[0], layer.weight.dim(0)};
    case LayerKind::Conv2d:
    case LayerKind::BcosConv2d: {
      if (layer.weight.rank() != 4) fail("weight must be [F, C, kh, kw]");
      if (s.size() != 4 || s[1] != layer.weight.dim(1)) fail("channel count");
      if (layer.has_bias() && layer.bias.size() != layer.weight.dim(0)) fail("bias length");
      if (layer.stride == 0) fail("stride must be >= 1");
      const auto g = conv_geometry(layer, s);
      return {s[0], layer.weight.dim(0), g.out_height(), g.out_width()};
    }
    case LayerKind::ReLU:
    case LayerKind::MaxOut:
      if (layer.branches.empty()) return s;
      if (s.size() != 2) fail("explicit MaxOut expects a flat input");
      for (const auto& b : layer.branches)
        if (b.rank() != 2 || b.dim(1) != s[1] || b.dim(0) != layer.branches.front().dim(0)) fail("branch shape");
      return {s[0], layer.branches.front().dim(0)};
    case LayerKind::BatchNormUncentered:
    case LayerKind::BatchNormCentered: {
      if (s.size() < 2 || layer.bn_scale.size() != s[1]) fail("channel count");
      if (layer.has_bias() && layer.bias.size() != s[1]) fail("shift length");
      const auto& stat = layer.kind == LayerKind::BatchNormCentered ? layer.running_var : layer.running_sq;
      if (stat.size() != s[1]) fail("running statistics length");
      if (layer.kind == LayerKind::BatchNormCentered && layer.running_mean.size() != s[1]) fail("running mean length");
      return s;
    }
    case LayerKind::AvgPool:
    case LayerKind::MaxPool:
      if (s.size() != 4 || layer.pool_size == 0 || s[2] < layer.pool_size || s[3] < layer.pool_size) {
        fail("pool window exceeds input");
      }
      return {s[0], s[1], s[2] / layer.pool_size, s[3] / layer.pool_size};
    case LayerKind::GlobalAvgPool:
      if (s.size() != 4) fail("expects [N, C, H, W]");
      return {s[0], s[1]};
    case LayerKind::Flatten:
      return {s[0], trailing(s, 1)};
    case LayerKind::Residual: {
      const Shape out = infer_sequence(layer.body, s, where + ".body.");
      if (out != s) fail("residual body must preserve shape");
      return s;
    }
    case LayerKind::LogitBias:
      return s;
  }
  return s;
}

template <typename T>
Shape infer_sequence(const std::vector<LayerSpec<T>>& layers, Shape s, const std::string& prefix) {
  for (std::size_t i = 0; i < layers.size(); ++i) s = infer_layer(layers[i], s, prefix + std::to_string(i));
  return s;
}

template <typename T>
void check_input(const ModelGraph<T>& model, const Tensor<T>& input) {
  const Shape& s = input.shape();
  const bool ok = model.flat_input() ? (s.size() == 2 && s[1] == model.input_channels)
                                     : (s.size() == 4 && s[1] == model.input_channels);
  if (!ok) {
    throw Error(ErrorCode::ShapeMismatch, "model expects " + shape_str(model.input_shape(1)) +
                                              "-shaped items, got input " + shape_str(s));
  }
}

}  // namespace

template <typename T>
Shape infer_output_shape(const ModelGraph<T>& model, const Shape& input_shape) {
  return infer_sequence(model.layers, input_shape, "");
}

template <typename T>
void validate(const ModelGraph<T>& model) {
  if (model.input_channels == 0) throw Error(ErrorCode::ShapeMismatch, "input_channels must be positive");
  if (model.flat_input() != (model.input_width == 0)) {
    throw Error(ErrorCode::ShapeMismatch, "input height and width must both be set or both be zero");
  }
  std::size_t logit_bias_count = 0;
  visit_layers(model.layers, [&](const LayerSpec<T>& l) {
    if (l.is_bcos() && !(l.b_exponent >= T{1})) throw Error(ErrorCode::InvalidConfig, "B-cos layer with B < 1");
    if (l.is_batchnorm() && !(l.bn_eps > T{0})) throw Error(ErrorCode::InvalidConfig, "BatchNorm eps must be > 0");
    if (l.kind == LayerKind::LogitBias) ++logit_bias_count;
  });
  if (logit_bias_count > 1 ||
      (logit_bias_count == 1 && model.layers.back().kind != LayerKind::LogitBias)) {
    throw Error(ErrorCode::InvalidConfig, "at most one LogitBias layer, and only as the last layer");
  }
  const Shape out = infer_output_shape(model, model.input_shape(1));
  if (out != Shape{1, model.class_count}) {
    throw Error(ErrorCode::ShapeMismatch, "model produces " + shape_str(out) + " but class_count is " +
                                              std::to_string(model.class_count));
  }
}

template <typename T>
ForwardResult<T> forward(const ModelGraph<T>& model, const Tensor<T>& input, Mode mode, bool capture) {
  check_input(model, input);
  ForwardResult<T> result;
  if (capture) {
    DynamicLinearRecord<T> record;
    record.input_shape = input.shape();
    result.logits = forward_sequence(model.layers, input, mode, true, &record.layers, "");
    result.record = std::move(record);
  } else {
    result.logits = forward_sequence<T>(model.layers, input, mode, false, nullptr, "");
  }
  return result;
}

template <typename T>
void update_running_stats(ModelGraph<T>& model, const DynamicLinearRecord<T>& record) {
  update_stats_sequence(model.layers, record.layers);
}

template <typename T>
ModelGrad<T> backward(const ModelGraph<T>& model, const DynamicLinearRecord<T>& record, const Tensor<T>& grad_logits) {
  ModelGrad<T> out;
  out.input = backward_sequence(model.layers, record.layers, grad_logits, out.layers);
  return out;
}

template <typename T>
Tensor<T> replay_backward(const ModelGraph<T>& model, const DynamicLinearRecord<T>& record,
                          const Tensor<T>& grad_logits) {
  return replay_sequence(model.layers, record.layers, grad_logits);
}

// ---------------------------------------------------------------------------
// Single-layer operations

namespace {

template <typename T>
void require_finite(const Tensor<T>& t, std::string_view what) {
  if (!all_finite<T>(t.values())) throw Error(ErrorCode::NonFiniteInput, std::string(what) + " contains NaN or Inf");
}

template <typename T>
LayerSpec<T> vector_bcos_layer(const Tensor<T>& x, const Tensor<T>& w, T b_exponent) {
  if (x.rank() != 1) throw Error(ErrorCode::ShapeMismatch, "bcos: x must be a vector");
  Tensor<T> w2 = w.rank() == 1 ? w.reshaped({1, w.size()}) : w;
  if (w2.rank() != 2 || w2.dim(1) != x.size()) {
    throw Error(ErrorCode::ShapeMismatch, "bcos: weight " + shape_str(w.shape()) + " vs x " + shape_str(x.shape()));
  }
  if (!(b_exponent >= T{1})) throw Error(ErrorCode::InvalidConfig, "bcos: B must be >= 1");
  return bcos_linear_layer(std::move(w2), b_exponent);
}

}  // namespace

template <typename T>
Tensor<T> bcos_forward(const Tensor<T>& x, const Tensor<T>& w, T b_exponent, T eps) {
  require_finite(x, "x");
  require_finite(w, "w");
  const auto layer = vector_bcos_layer(x, w, b_exponent);
  const std::size_t f = layer.weight.dim(0);
  Tensor<T> z = matmul(layer.weight, x.reshaped({x.size(), 1}));
  const T nx = std::sqrt(dot<T>(x.values(), x.values()));
  Tensor<T> out({f});
  for (std::size_t r = 0; r < f; ++r) {
    const std::span<const T> row(layer.weight.data() + r * x.size(), x.size());
    const T nw = std::sqrt(dot<T>(row, row));
    const T c = z[r] / (nw * nx + eps);
    out[r] = cos_power(c, b_exponent - T{1}) * z[r];
  }
  return out;
}

template <typename T>
BcosGradients<T> bcos_backward(const Tensor<T>& x, const Tensor<T>& w, T b_exponent, const Tensor<T>& upstream) {
  auto layer = vector_bcos_layer(x, w, b_exponent);
  LayerRecord<T> rec;
  rec.input_shape = {1, x.size()};
  const Tensor<T> w2 = layer.weight;
  linear_core_forward(layer, w2, x.reshaped({x.size(), 1}), rec);
  if (upstream.size() != w2.dim(0)) throw Error(ErrorCode::ShapeMismatch, "bcos_backward: upstream length");
  const auto core = linear_core_backward(layer, w2, rec, upstream.reshaped({upstream.size(), 1}));
  BcosGradients<T> out;
  out.grad_x = core.dcols.reshaped({x.size()});
  out.grad_w = core.dw.reshaped(w.shape());
  out.grad_b = core.db_exponent;
  return out;
}

template <typename T>
MaxOutResult<T> maxout_forward(const Tensor<T>& x, const std::vector<Tensor<T>>& branches) {
  if (branches.empty()) throw Error(ErrorCode::InvalidConfig, "MaxOut needs at least one branch");
  const bool single = x.rank() == 1;
  const Tensor<T> x2 = single ? x.reshaped({1, x.size()}) : x;
  LayerSpec<T> layer = maxout_layer(branches);
  infer_layer(layer, x2.shape(), "maxout");
  LayerRecord<T> rec;
  MaxOutResult<T> out;
  out.output = maxout_explicit_forward(layer, x2, rec);
  if (single) out.output = std::move(out.output).reshaped({out.output.size()});
  out.argmax = std::move(rec.selection);
  return out;
}

template <typename T>
Tensor<T> batchnorm_uncentered_forward(const Tensor<T>& y, const Tensor<T>& alpha, const Tensor<T>& beta, T eps,
                                       Mode mode, const Tensor<T>& running_sq) {
  if (y.rank() < 2 || alpha.size() != y.dim(1)) {
    throw Error(ErrorCode::ShapeMismatch, "batchnorm: alpha must match channel axis 1 of " + shape_str(y.shape()));
  }
  LayerSpec<T> layer = batchnorm_layer<T>(y.dim(1), false, !beta.empty());
  layer.bn_scale = alpha;
  if (!beta.empty()) layer.bias = beta;
  layer.bn_eps = eps;
  if (mode == Mode::Eval) {
    if (running_sq.size() != y.dim(1)) throw Error(ErrorCode::ShapeMismatch, "batchnorm: running statistic length");
    layer.running_sq = running_sq;
  }
  LayerRecord<T> rec;
  return batchnorm_core(layer, y, mode, rec);
}

// ---------------------------------------------------------------------------
// Constructors

template <typename T>
LayerSpec<T> linear_layer(Tensor<T> weight, Tensor<T> bias) {
  LayerSpec<T> l;
  l.kind = LayerKind::Linear;
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  return l;
}

template <typename T>
LayerSpec<T> conv_layer(Tensor<T> weight, Tensor<T> bias, std::size_t stride, std::size_t padding) {
  LayerSpec<T> l;
  l.kind = LayerKind::Conv2d;
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  l.stride = stride;
  l.padding = padding;
  return l;
}

template <typename T>
LayerSpec<T> bcos_linear_layer(Tensor<T> weight, T b_exponent, Tensor<T> bias) {
  LayerSpec<T> l = linear_layer(std::move(weight), std::move(bias));
  l.kind = LayerKind::BcosLinear;
  l.b_exponent = b_exponent;
  return l;
}

template <typename T>
LayerSpec<T> bcos_conv_layer(Tensor<T> weight, T b_exponent, Tensor<T> bias, std::size_t stride,
                             std::size_t padding) {
  LayerSpec<T> l = conv_layer(std::move(weight), std::move(bias), stride, padding);
  l.kind = LayerKind::BcosConv2d;
  l.b_exponent = b_exponent;
  return l;
}

template <typename T>
LayerSpec<T> batchnorm_layer(std::size_t channels, bool centered, bool with_shift) {
  LayerSpec<T> l;
  l.kind = centered ? LayerKind::BatchNormCentered : LayerKind::BatchNormUncentered;
  l.bn_scale = Tensor<T>::full({channels}, T{1});
  if (with_shift) l.bias = Tensor<T>({channels});
  if (centered) {
    l.running_mean = Tensor<T>({channels});
    l.running_var = Tensor<T>::full({channels}, T{1});
  } else {
    l.running_sq = Tensor<T>::full({channels}, T{1});
  }
  return l;
}

template <typename T>
LayerSpec<T> simple_layer(LayerKind kind) {
  LayerSpec<T> l;
  l.kind = kind;
  return l;
}

template <typename T>
LayerSpec<T> pool_layer(LayerKind kind, std::size_t size) {
  LayerSpec<T> l;
  l.kind = kind;
  l.pool_size = size;
  return l;
}

template <typename T>
LayerSpec<T> maxout_layer(std::vector<Tensor<T>> branches) {
  LayerSpec<T> l;
  l.kind = LayerKind::MaxOut;
  l.branches = std::move(branches);
  return l;
}

template <typename T>
LayerSpec<T> residual_layer(std::vector<LayerSpec<T>> body) {
  LayerSpec<T> l;
  l.kind = LayerKind::Residual;
  l.body = std::move(body);
  return l;
}

template <typename T>
LayerSpec<T> logit_bias_layer(T value) {
  LayerSpec<T> l;
  l.kind = LayerKind::LogitBias;
  l.logit_bias = value;
  return l;
}

#define BCOS_NN_INSTANTIATE(T)                                                                              \
  template struct ModelGraph<T>;                                                                            \
  template void validate(const ModelGraph<T>&);                                                             \
  template Shape infer_output_shape(const ModelGraph<T>&, const Shape&);                                    \
  template ForwardResult<T> forward(const ModelGraph<T>&, const Tensor<T>&, Mode, bool);                    \
  template void update_running_stats(ModelGraph<T>&, const DynamicLinearRecord<T>&);                        \
  template ModelGrad<T> backward(const ModelGraph<T>&, const DynamicLinearRecord<T>&, const Tensor<T>&);    \
  template Tensor<T> replay_backward(const ModelGraph<T>&, const DynamicLinearRecord<T>&, const Tensor<T>&); \
  template Tensor<T> bcos_forward(const Tensor<T>&, const Tensor<T>&, T, T);                                \
  template BcosGradients<T> bcos_backward(const Tensor<T>&, const Tensor<T>&, T, const Tensor<T>&);         \
  template MaxOutResult<T> maxout_forward(const Tensor<T>&, const std::vector<Tensor<T>>&);                 \
  template Tensor<T> batchnorm_uncentered_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,  \
                                                  Mode, const Tensor<T>&);                                  \
  template LayerSpec<T> linear_layer(Tensor<T>, Tensor<T>);                                                 \
  template LayerSpec<T> conv_layer(Tensor<T>, Tensor<T>, std::size_t, std::size_t);                         \
  template LayerSpec<T> bcos_linear_layer(Tensor<T>, T, Tensor<T>);                                         \
  template LayerSpec<T> bcos_conv_layer(Tensor<T>, T, Tensor<T>, std::size_t, std::size_t);                 \
  template LayerSpec<T> batchnorm_layer(std::size_t, bool, bool);                                           \
  template LayerSpec<T> simple_layer(LayerKind);                                                            \
  template LayerSpec<T> pool_layer(LayerKind, std::size_t);                                                 \
  template LayerSpec<T> maxout_layer(std::vector<Tensor<T>>);                                               \
  template LayerSpec<T> residual_layer(std::vector<LayerSpec<T>>);                                          \
  template LayerSpec<T> logit_bias_layer(T);

BCOS_NN_INSTANTIATE(float)
BCOS_NN_INSTANTIATE(double)

#undef BCOS_NN_INSTANTIATE

}  // namespace bcos
