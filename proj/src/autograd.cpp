#include "canids/autograd.hpp"

#include <algorithm>

namespace canids::autograd {

namespace {

// c[m,n] += a[m,k] * b[k,n]
template <class T>
void matmul_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      T av = arow[kk];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <class T>
void matmul_at_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    const T* brow = b + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      T av = arow[kk];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
template <class T>
void matmul_bt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * n;
    T* crow = c + static_cast<std::size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T* brow = b + static_cast<std::size_t>(kk) * n;
      T sum = T(0);
      for (int j = 0; j < n; ++j) sum += arow[j] * brow[j];
      crow[kk] += sum;
    }
  }
}

template <class T>
constexpr T kProbClamp = T(1e-7);

template <class T>
T clamp_prob(T p) {
  return std::min(std::max(p, kProbClamp<T>), T(1) - kProbClamp<T>);
}

}  // namespace

template <class T>
typename Graph<T>::Id Graph<T>::dense(Id x, Id w, Id b) {
  const Tensor<T>& xv = value(x);
  const Tensor<T>& wv = value(w);
  const Tensor<T>& bv = value(b);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != wv.dim(0) ||
      wv.dim(1) != bv.dim(0))
    throw ShapeError("dense", "incompatible shapes x=" + shape_str(xv.shape) +
                                  " w=" + shape_str(wv.shape) + " b=" + shape_str(bv.shape));
  int m = xv.dim(0), k = xv.dim(1), n = wv.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  matmul_acc(xv.v.data(), wv.v.data(), out.v.data(), m, k, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.v[static_cast<std::size_t>(i) * n + static_cast<std::size_t>(j)] +=
          bv.v[static_cast<std::size_t>(j)];

  bool needs = wants(x) || wants(w) || wants(b);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, w, b, out_id, m, k, n](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      if (g.wants(x)) {
        Tensor<T>& dx = g.grad_buffer(x);
        matmul_bt_acc(dy.v.data(), g.value(w).v.data(), dx.v.data(), m, k, n);
      }
      if (g.wants(w)) {
        Tensor<T>& dw = g.grad_buffer(w);
        matmul_at_acc(g.value(x).v.data(), dy.v.data(), dw.v.data(), m, k, n);
      }
      if (g.wants(b)) {
        Tensor<T>& db = g.grad_buffer(b);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            db.v[static_cast<std::size_t>(j)] +=
                dy.v[static_cast<std::size_t>(i) * n + static_cast<std::size_t>(j)];
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::relu(Id x) {
  Tensor<T> out = value(x);
  for (auto& v : out.v) v = v > T(0) ? v : T(0);
  bool needs = wants(x);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, out_id](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      const Tensor<T>& xv = g.value(x);
      Tensor<T>& dx = g.grad_buffer(x);
      for (std::size_t i = 0; i < dx.v.size(); ++i)
        if (xv.v[i] > T(0)) dx.v[i] += dy.v[i];
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::tanh_op(Id x) {
  Tensor<T> out = value(x);
  for (auto& v : out.v) v = std::tanh(v);
  bool needs = wants(x);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, out_id](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      const Tensor<T>& yv = g.value(out_id);
      Tensor<T>& dx = g.grad_buffer(x);
      for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i] * (T(1) - yv.v[i] * yv.v[i]);
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::sigmoid(Id x) {
  Tensor<T> out = value(x);
  for (auto& v : out.v) v = T(1) / (T(1) + std::exp(-v));
  bool needs = wants(x);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, out_id](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      const Tensor<T>& yv = g.value(out_id);
      Tensor<T>& dx = g.grad_buffer(x);
      for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i] * yv.v[i] * (T(1) - yv.v[i]);
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::softmax(Id x) {
  const Tensor<T>& xv = value(x);
  if (xv.rank() < 1) throw ShapeError("softmax", "rank-0 input");
  int cols = xv.shape.back();
  auto rows = static_cast<std::size_t>(xv.numel() / cols);
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.v.data() + r * static_cast<std::size_t>(cols);
    T max = row[0];
    for (int j = 1; j < cols; ++j) max = std::max(max, row[j]);
    T sum = T(0);
    for (int j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - max);
      sum += row[j];
    }
    for (int j = 0; j < cols; ++j) row[j] /= sum;
  }
  bool needs = wants(x);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, out_id, cols, rows](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      const Tensor<T>& yv = g.value(out_id);
      Tensor<T>& dx = g.grad_buffer(x);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = yv.v.data() + r * static_cast<std::size_t>(cols);
        const T* d = dy.v.data() + r * static_cast<std::size_t>(cols);
        T* out_row = dx.v.data() + r * static_cast<std::size_t>(cols);
        T dot = T(0);
        for (int j = 0; j < cols; ++j) dot += d[j] * y[j];
        for (int j = 0; j < cols; ++j) out_row[j] += y[j] * (d[j] - dot);
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::layer_norm(Id x, Id gain, Id bias) {
  const Tensor<T>& xv = value(x);
  const Tensor<T>& gv = value(gain);
  const Tensor<T>& bv = value(bias);
  if (xv.rank() < 1 || gv.rank() != 1 || bv.rank() != 1 || gv.dim(0) != xv.shape.back() ||
      bv.dim(0) != xv.shape.back())
    throw ShapeError("layer_normalize", "incompatible shapes x=" + shape_str(xv.shape) +
                                            " gain=" + shape_str(gv.shape) +
                                            " bias=" + shape_str(bv.shape));
  const T eps = T(1e-5);
  int f = xv.shape.back();
  auto rows = static_cast<std::size_t>(xv.numel() / f);
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  // cache per-row mean and inverse stddev for backward
  auto stats = std::make_shared<std::vector<T>>(rows * 2);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.v.data() + r * static_cast<std::size_t>(f);
    T mean = T(0);
    for (int j = 0; j < f; ++j) mean += row[j];
    mean /= static_cast<T>(f);
    T var = T(0);
    for (int j = 0; j < f; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(f);
    T inv = T(1) / std::sqrt(var + eps);
    (*stats)[r * 2] = mean;
    (*stats)[r * 2 + 1] = inv;
    T* o = out.v.data() + r * static_cast<std::size_t>(f);
    for (int j = 0; j < f; ++j)
      o[j] = (row[j] - mean) * inv * gv.v[static_cast<std::size_t>(j)] + bv.v[static_cast<std::size_t>(j)];
  }
  bool needs = wants(x) || wants(gain) || wants(bias);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, gain, bias, out_id, f, rows, stats](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      const Tensor<T>& xv2 = g.value(x);
      const Tensor<T>& gv2 = g.value(gain);
      for (std::size_t r = 0; r < rows; ++r) {
        const T mean = (*stats)[r * 2];
        const T inv = (*stats)[r * 2 + 1];
        const T* row = xv2.v.data() + r * static_cast<std::size_t>(f);
        const T* d = dy.v.data() + r * static_cast<std::size_t>(f);
        if (g.wants(gain)) {
          Tensor<T>& dg = g.grad_buffer(gain);
          for (int j = 0; j < f; ++j)
            dg.v[static_cast<std::size_t>(j)] += d[j] * (row[j] - mean) * inv;
        }
        if (g.wants(bias)) {
          Tensor<T>& db = g.grad_buffer(bias);
          for (int j = 0; j < f; ++j) db.v[static_cast<std::size_t>(j)] += d[j];
        }
        if (g.wants(x)) {
          Tensor<T>& dx = g.grad_buffer(x);
          T* dxr = dx.v.data() + r * static_cast<std::size_t>(f);
          // dxhat_j = dy_j * gain_j; fold the mean/variance terms
          T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
          for (int j = 0; j < f; ++j) {
            T xhat = (row[j] - mean) * inv;
            T dxhat = d[j] * gv2.v[static_cast<std::size_t>(j)];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          for (int j = 0; j < f; ++j) {
            T xhat = (row[j] - mean) * inv;
            T dxhat = d[j] * gv2.v[static_cast<std::size_t>(j)];
            dxr[j] += inv * (dxhat - sum_dxhat / static_cast<T>(f) -
                             xhat * sum_dxhat_xhat / static_cast<T>(f));
          }
        }
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::dropout(Id x, double rate, bool train, std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout", "rate must be in [0, 1)");
  if (!train || rate == 0.0) {
    // inference mode is the identity
    Tensor<T> out = value(x);
    bool needs = wants(x);
    Id out_id = push(std::move(out), needs, {});
    if (needs) {
      node(out_id).back = [x, out_id](Graph& g) {
        const Tensor<T>& dy = g.node(out_id).grad;
        Tensor<T>& dx = g.grad_buffer(x);
        for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i];
      };
    }
    return out_id;
  }
  Tensor<T> out = value(x);
  T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Rng rng(seed);
  for (auto& v : out.v) v = rng.uniform() < rate ? T(0) : v * keep_scale;
  bool needs = wants(x);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, out_id, rate, seed, keep_scale](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      Tensor<T>& dx = g.grad_buffer(x);
      Rng rng2(seed);  // regenerate the identical mask
      for (std::size_t i = 0; i < dx.v.size(); ++i)
        dx.v[i] += rng2.uniform() < rate ? T(0) : dy.v[i] * keep_scale;
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::conv2d(Id x, Id kernels, Id bias, int stride, int pad) {
  const Tensor<T>& xv = value(x);
  const Tensor<T>& kv = value(kernels);
  const Tensor<T>& bv = value(bias);
  if (xv.rank() != 4 || kv.rank() != 4 || bv.rank() != 1 || kv.dim(1) != xv.dim(1) ||
      bv.dim(0) != kv.dim(0) || stride < 1 || pad < 0)
    throw ShapeError("conv2d", "incompatible shapes x=" + shape_str(xv.shape) +
                                   " kernels=" + shape_str(kv.shape) + " bias=" + shape_str(bv.shape));
  int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int OC = kv.dim(0), KH = kv.dim(2), KW = kv.dim(3);
  int OH = (H + 2 * pad - KH) / stride + 1;
  int OW = (W + 2 * pad - KW) / stride + 1;
  if (OH < 1 || OW < 1)
    throw ShapeError("conv2d", "kernel " + shape_str(kv.shape) + " too large for input " +
                                   shape_str(xv.shape));
  Tensor<T> out = Tensor<T>::zeros({B, OC, OH, OW});

  const T* xp = xv.v.data();
  const T* kp = kv.v.data();
  T* op = out.v.data();
  auto xat = [&](int b, int c, int y, int xx) {
    return xp[((static_cast<std::size_t>(b) * C + c) * H + y) * W + xx];
  };
  parallel_for(static_cast<std::int64_t>(B) * OC, [&](std::int64_t idx) {
    int b = static_cast<int>(idx / OC);
    int oc = static_cast<int>(idx % OC);
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        T sum = bv.v[static_cast<std::size_t>(oc)];
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < KH; ++ky) {
            int y = oy * stride - pad + ky;
            if (y < 0 || y >= H) continue;
            for (int kx = 0; kx < KW; ++kx) {
              int xx = ox * stride - pad + kx;
              if (xx < 0 || xx >= W) continue;
              sum += xat(b, c, y, xx) *
                     kp[((static_cast<std::size_t>(oc) * C + c) * KH + ky) * KW + kx];
            }
          }
        op[((static_cast<std::size_t>(b) * OC + oc) * OH + oy) * OW + ox] = sum;
      }
    }
  });

  bool needs = wants(x) || wants(kernels) || wants(bias);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, kernels, bias, out_id, B, C, H, W, OC, KH, KW, OH, OW, stride,
                         pad](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      const T* dyp = dy.v.data();
      auto dyat = [&](int b, int oc, int oy, int ox) {
        return dyp[((static_cast<std::size_t>(b) * OC + oc) * OH + oy) * OW + ox];
      };
      if (g.wants(bias)) {
        Tensor<T>& db = g.grad_buffer(bias);
        for (int oc = 0; oc < OC; ++oc) {
          T sum = T(0);
          for (int b = 0; b < B; ++b)
            for (int oy = 0; oy < OH; ++oy)
              for (int ox = 0; ox < OW; ++ox) sum += dyat(b, oc, oy, ox);
          db.v[static_cast<std::size_t>(oc)] += sum;
        }
      }
      if (g.wants(kernels)) {
        const T* xp2 = g.value(x).v.data();
        Tensor<T>& dk = g.grad_buffer(kernels);
        T* dkp = dk.v.data();
        parallel_for(static_cast<std::int64_t>(OC) * C, [&](std::int64_t idx) {
          int oc = static_cast<int>(idx / C);
          int c = static_cast<int>(idx % C);
          for (int ky = 0; ky < KH; ++ky)
            for (int kx = 0; kx < KW; ++kx) {
              T sum = T(0);
              for (int b = 0; b < B; ++b)
                for (int oy = 0; oy < OH; ++oy) {
                  int y = oy * stride - pad + ky;
                  if (y < 0 || y >= H) continue;
                  for (int ox = 0; ox < OW; ++ox) {
                    int xx = ox * stride - pad + kx;
                    if (xx < 0 || xx >= W) continue;
                    sum += xp2[((static_cast<std::size_t>(b) * C + c) * H + y) * W + xx] *
                           dyat(b, oc, oy, ox);
                  }
                }
              dkp[((static_cast<std::size_t>(oc) * C + c) * KH + ky) * KW + kx] += sum;
            }
        });
      }
      if (g.wants(x)) {
        const T* kp2 = g.value(kernels).v.data();
        Tensor<T>& dx = g.grad_buffer(x);
        T* dxp = dx.v.data();
        parallel_for(static_cast<std::int64_t>(B) * C, [&](std::int64_t idx) {
          int b = static_cast<int>(idx / C);
          int c = static_cast<int>(idx % C);
          for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
              T sum = T(0);
              for (int oc = 0; oc < OC; ++oc)
                for (int ky = 0; ky < KH; ++ky) {
                  int num_y = y + pad - ky;
                  if (num_y < 0 || num_y % stride) continue;
                  int oy = num_y / stride;
                  if (oy >= OH) continue;
                  for (int kx = 0; kx < KW; ++kx) {
                    int num_x = xx + pad - kx;
                    if (num_x < 0 || num_x % stride) continue;
                    int ox = num_x / stride;
                    if (ox >= OW) continue;
                    sum += dyat(b, oc, oy, ox) *
                           kp2[((static_cast<std::size_t>(oc) * C + c) * KH + ky) * KW + kx];
                  }
                }
              dxp[((static_cast<std::size_t>(b) * C + c) * H + y) * W + xx] += sum;
            }
        });
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::avg_pool(Id x, int window, int stride) {
  const Tensor<T>& xv = value(x);
  if (xv.rank() != 4 || window < 1 || stride < 1)
    throw ShapeError("avg_pool", "expected [B,C,H,W] input, got " + shape_str(xv.shape));
  int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int OH = (H - window) / stride + 1;
  int OW = (W - window) / stride + 1;
  if (OH < 1 || OW < 1)
    throw ShapeError("avg_pool", "window " + std::to_string(window) + " too large for input " +
                                     shape_str(xv.shape));
  Tensor<T> out = Tensor<T>::zeros({B, C, OH, OW});
  T inv = T(1) / static_cast<T>(window * window);
  const T* xp = xv.v.data();
  T* op = out.v.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          T sum = T(0);
          for (int ky = 0; ky < window; ++ky)
            for (int kx = 0; kx < window; ++kx)
              sum += xp[((static_cast<std::size_t>(b) * C + c) * H + oy * stride + ky) * W +
                        ox * stride + kx];
          op[((static_cast<std::size_t>(b) * C + c) * OH + oy) * OW + ox] = sum * inv;
        }
  bool needs = wants(x);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, out_id, B, C, H, W, OH, OW, window, stride, inv](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      Tensor<T>& dx = g.grad_buffer(x);
      const T* dyp = dy.v.data();
      T* dxp = dx.v.data();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
              T d = dyp[((static_cast<std::size_t>(b) * C + c) * OH + oy) * OW + ox] * inv;
              for (int ky = 0; ky < window; ++ky)
                for (int kx = 0; kx < window; ++kx)
                  dxp[((static_cast<std::size_t>(b) * C + c) * H + oy * stride + ky) * W +
                      ox * stride + kx] += d;
            }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::lstm_layer(Id seq, Id wx, Id wh, Id b) {
  const Tensor<T>& xv = value(seq);
  const Tensor<T>& wxv = value(wx);
  const Tensor<T>& whv = value(wh);
  const Tensor<T>& bv = value(b);
  if (xv.rank() != 3 || wxv.rank() != 2 || whv.rank() != 2 || bv.rank() != 1)
    throw ShapeError("lstm_layer", "expected seq=[B,L,I] wx=[I,4H] wh=[H,4H] b=[4H]; got seq=" +
                                       shape_str(xv.shape) + " wx=" + shape_str(wxv.shape));
  int B = xv.dim(0), L = xv.dim(1), I = xv.dim(2);
  if (wxv.dim(0) != I || wxv.dim(1) % 4 != 0)
    throw ShapeError("lstm_layer", "wx shape " + shape_str(wxv.shape) + " does not match input " +
                                       shape_str(xv.shape));
  int H = wxv.dim(1) / 4;
  if (whv.dim(0) != H || whv.dim(1) != 4 * H || bv.dim(0) != 4 * H)
    throw ShapeError("lstm_layer", "recurrent shapes do not match hidden size " + std::to_string(H));

  struct Saved {
    std::vector<T> gates;  // [L,B,4H] post-activation (i,f,g,o)
    std::vector<T> cells;  // [L,B,H]
    std::vector<T> tanhc;  // [L,B,H]
  };
  auto saved = std::make_shared<Saved>();
  auto lbh = static_cast<std::size_t>(L) * B * H;
  saved->gates.resize(lbh * 4);
  saved->cells.resize(lbh);
  saved->tanhc.resize(lbh);

  Tensor<T> out = Tensor<T>::zeros({B, L, H});
  std::vector<T> h_prev(static_cast<std::size_t>(B) * H, T(0));
  std::vector<T> c_prev(static_cast<std::size_t>(B) * H, T(0));
  std::vector<T> z(static_cast<std::size_t>(B) * 4 * H);
  std::vector<T> x_t(static_cast<std::size_t>(B) * I);

  for (int t = 0; t < L; ++t) {
    for (int bb = 0; bb < B; ++bb)
      std::copy_n(xv.v.data() + (static_cast<std::size_t>(bb) * L + t) * I, I,
                  x_t.data() + static_cast<std::size_t>(bb) * I);
    for (int bb = 0; bb < B; ++bb)
      std::copy_n(bv.v.data(), 4 * H, z.data() + static_cast<std::size_t>(bb) * 4 * H);
    matmul_acc(x_t.data(), wxv.v.data(), z.data(), B, I, 4 * H);
    matmul_acc(h_prev.data(), whv.v.data(), z.data(), B, H, 4 * H);
    for (int bb = 0; bb < B; ++bb) {
      const T* zr = z.data() + static_cast<std::size_t>(bb) * 4 * H;
      std::size_t base = (static_cast<std::size_t>(t) * B + bb) * H;
      T* gate = saved->gates.data() + base * 4;
      for (int j = 0; j < H; ++j) {
        T ig = T(1) / (T(1) + std::exp(-zr[j]));
        T fg = T(1) / (T(1) + std::exp(-zr[H + j]));
        T gg = std::tanh(zr[2 * H + j]);
        T og = T(1) / (T(1) + std::exp(-zr[3 * H + j]));
        gate[j] = ig;
        gate[H + j] = fg;
        gate[2 * H + j] = gg;
        gate[3 * H + j] = og;
        T c = fg * c_prev[static_cast<std::size_t>(bb) * H + j] + ig * gg;
        T tc = std::tanh(c);
        saved->cells[base + static_cast<std::size_t>(j)] = c;
        saved->tanhc[base + static_cast<std::size_t>(j)] = tc;
        T h = og * tc;
        h_prev[static_cast<std::size_t>(bb) * H + j] = h;
        c_prev[static_cast<std::size_t>(bb) * H + j] = c;
        out.v[(static_cast<std::size_t>(bb) * L + t) * H + static_cast<std::size_t>(j)] = h;
      }
    }
  }

  bool needs = wants(seq) || wants(wx) || wants(wh) || wants(b);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [seq, wx, wh, b, out_id, B, L, I, H, saved](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      const Tensor<T>& xv2 = g.value(seq);
      const Tensor<T>& wxv2 = g.value(wx);
      const Tensor<T>& whv2 = g.value(wh);
      std::vector<T> dh(static_cast<std::size_t>(B) * H, T(0));
      std::vector<T> dc(static_cast<std::size_t>(B) * H, T(0));
      std::vector<T> dz(static_cast<std::size_t>(B) * 4 * H);
      std::vector<T> x_t(static_cast<std::size_t>(B) * I);
      std::vector<T> h_prev_t(static_cast<std::size_t>(B) * H);
      std::vector<T> dwx_local(g.wants(wx) ? wxv2.v.size() : 0, T(0));
      std::vector<T> dwh_local(g.wants(wh) ? whv2.v.size() : 0, T(0));
      std::vector<T> db_local(g.wants(b) ? static_cast<std::size_t>(4 * H) : 0, T(0));

      for (int t = L - 1; t >= 0; --t) {
        for (int bb = 0; bb < B; ++bb) {
          std::size_t base = (static_cast<std::size_t>(t) * B + bb) * H;
          const T* gate = saved->gates.data() + base * 4;
          for (int j = 0; j < H; ++j) {
            std::size_t hj = static_cast<std::size_t>(bb) * H + static_cast<std::size_t>(j);
            T dht = dy.v[(static_cast<std::size_t>(bb) * L + t) * H + static_cast<std::size_t>(j)] +
                    dh[hj];
            T ig = gate[j], fg = gate[H + j], gg = gate[2 * H + j], og = gate[3 * H + j];
            T tc = saved->tanhc[base + static_cast<std::size_t>(j)];
            T dct = dht * og * (T(1) - tc * tc) + dc[hj];
            T c_prev_v = t > 0 ? saved->cells[(static_cast<std::size_t>(t - 1) * B + bb) * H +
                                              static_cast<std::size_t>(j)]
                               : T(0);
            T* dzr = dz.data() + static_cast<std::size_t>(bb) * 4 * H;
            dzr[j] = dct * gg * ig * (T(1) - ig);                    // input gate
            dzr[H + j] = dct * c_prev_v * fg * (T(1) - fg);          // forget gate
            dzr[2 * H + j] = dct * ig * (T(1) - gg * gg);            // cell candidate
            dzr[3 * H + j] = dht * tc * og * (T(1) - og);            // output gate
            dc[hj] = dct * fg;
            dh[hj] = T(0);  // recomputed below from dz * wh^T
          }
        }
        for (int bb = 0; bb < B; ++bb)
          std::copy_n(xv2.v.data() + (static_cast<std::size_t>(bb) * L + t) * I, I,
                      x_t.data() + static_cast<std::size_t>(bb) * I);
        // recover h_{t-1} from saved activations (o * tanh(c))
        if (t > 0) {
          for (int bb = 0; bb < B; ++bb) {
            std::size_t base_prev = (static_cast<std::size_t>(t - 1) * B + bb) * H;
            const T* gate_prev = saved->gates.data() + base_prev * 4;
            for (int j = 0; j < H; ++j)
              h_prev_t[static_cast<std::size_t>(bb) * H + static_cast<std::size_t>(j)] =
                  gate_prev[3 * H + j] * saved->tanhc[base_prev + static_cast<std::size_t>(j)];
          }
        } else {
          std::fill(h_prev_t.begin(), h_prev_t.end(), T(0));
        }

        if (!dwx_local.empty()) matmul_at_acc(x_t.data(), dz.data(), dwx_local.data(), B, I, 4 * H);
        if (!dwh_local.empty())
          matmul_at_acc(h_prev_t.data(), dz.data(), dwh_local.data(), B, H, 4 * H);
        if (!db_local.empty())
          for (int bb = 0; bb < B; ++bb)
            for (int j = 0; j < 4 * H; ++j)
              db_local[static_cast<std::size_t>(j)] += dz[static_cast<std::size_t>(bb) * 4 * H + j];
        if (g.wants(seq)) {
          Tensor<T>& dxg = g.grad_buffer(seq);
          for (int bb = 0; bb < B; ++bb) {
            T* dst = dxg.v.data() + (static_cast<std::size_t>(bb) * L + t) * I;
            const T* dzr = dz.data() + static_cast<std::size_t>(bb) * 4 * H;
            matmul_bt_acc(dzr, wxv2.v.data(), dst, 1, I, 4 * H);
          }
        }
        // dh_{t-1} = dz * wh^T
        matmul_bt_acc(dz.data(), whv2.v.data(), dh.data(), B, H, 4 * H);
      }
      if (!dwx_local.empty()) {
        Tensor<T>& dst = g.grad_buffer(wx);
        for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += dwx_local[i];
      }
      if (!dwh_local.empty()) {
        Tensor<T>& dst = g.grad_buffer(wh);
        for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += dwh_local[i];
      }
      if (!db_local.empty()) {
        Tensor<T>& dst = g.grad_buffer(b);
        for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += db_local[i];
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::reshape(Id x, Shape shape) {
  const Tensor<T>& xv = value(x);
  if (shape_numel(shape) != xv.numel())
    throw ShapeError("reshape", "cannot reshape " + shape_str(xv.shape) + " to " + shape_str(shape));
  Tensor<T> out;
  out.shape = std::move(shape);
  out.v = xv.v;
  bool needs = wants(x);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, out_id](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      Tensor<T>& dx = g.grad_buffer(x);
      for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i];
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::last_step(Id seq) {
  const Tensor<T>& xv = value(seq);
  if (xv.rank() != 3) throw ShapeError("last_step", "expected [B,L,H], got " + shape_str(xv.shape));
  int B = xv.dim(0), L = xv.dim(1), H = xv.dim(2);
  Tensor<T> out = Tensor<T>::zeros({B, H});
  for (int b = 0; b < B; ++b)
    std::copy_n(xv.v.data() + (static_cast<std::size_t>(b) * L + L - 1) * H, H,
                out.v.data() + static_cast<std::size_t>(b) * H);
  bool needs = wants(seq);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [seq, out_id, B, L, H](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      Tensor<T>& dx = g.grad_buffer(seq);
      for (int b = 0; b < B; ++b) {
        T* dst = dx.v.data() + (static_cast<std::size_t>(b) * L + L - 1) * H;
        const T* src = dy.v.data() + static_cast<std::size_t>(b) * H;
        for (int j = 0; j < H; ++j) dst[j] += src[j];
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::concat_channels(std::span<const Id> xs) {
  if (xs.empty()) throw ShapeError("concat", "no inputs");
  const Tensor<T>& first = value(xs[0]);
  if (first.rank() != 4) throw ShapeError("concat", "expected [B,C,H,W] inputs");
  int B = first.dim(0), H = first.dim(2), W = first.dim(3);
  int total_c = 0;
  bool needs = false;
  for (Id id : xs) {
    const Tensor<T>& t = value(id);
    if (t.rank() != 4 || t.dim(0) != B || t.dim(2) != H || t.dim(3) != W)
      throw ShapeError("concat", "mismatched input " + shape_str(t.shape));
    total_c += t.dim(1);
    needs = needs || wants(id);
  }
  Tensor<T> out = Tensor<T>::zeros({B, total_c, H, W});
  auto plane = static_cast<std::size_t>(H) * W;
  std::vector<Id> inputs(xs.begin(), xs.end());
  {
    int c_off = 0;
    for (Id id : inputs) {
      const Tensor<T>& t = value(id);
      int c_n = t.dim(1);
      for (int b = 0; b < B; ++b)
        std::copy_n(t.v.data() + static_cast<std::size_t>(b) * c_n * plane, static_cast<std::size_t>(c_n) * plane,
                    out.v.data() + (static_cast<std::size_t>(b) * total_c + c_off) * plane);
      c_off += c_n;
    }
  }
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [inputs, out_id, B, total_c, plane](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      int c_off = 0;
      for (Id id : inputs) {
        int c_n = g.value(id).dim(1);
        if (g.wants(id)) {
          Tensor<T>& dx = g.grad_buffer(id);
          for (int b = 0; b < B; ++b) {
            const T* src = dy.v.data() + (static_cast<std::size_t>(b) * total_c + c_off) * plane;
            T* dst = dx.v.data() + static_cast<std::size_t>(b) * c_n * plane;
            for (std::size_t i = 0; i < static_cast<std::size_t>(c_n) * plane; ++i) dst[i] += src[i];
          }
        }
        c_off += c_n;
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::add(Id x, Id y) {
  const Tensor<T>& xv = value(x);
  const Tensor<T>& yv = value(y);
  if (xv.shape != yv.shape)
    throw ShapeError("add", "shape mismatch " + shape_str(xv.shape) + " vs " + shape_str(yv.shape));
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += yv.v[i];
  bool needs = wants(x) || wants(y);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, y, out_id](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      if (g.wants(x)) {
        Tensor<T>& dx = g.grad_buffer(x);
        for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i];
      }
      if (g.wants(y)) {
        Tensor<T>& dyo = g.grad_buffer(y);
        for (std::size_t i = 0; i < dyo.v.size(); ++i) dyo.v[i] += dy.v[i];
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::scale(Id x, T factor) {
  Tensor<T> out = value(x);
  for (auto& v : out.v) v *= factor;
  bool needs = wants(x);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [x, out_id, factor](Graph& g) {
      const Tensor<T>& dy = g.node(out_id).grad;
      Tensor<T>& dx = g.grad_buffer(x);
      for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i] * factor;
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::sparse_categorical_crossentropy(Id probabilities,
                                                                std::vector<int> class_indices) {
  const Tensor<T>& pv = value(probabilities);
  if (pv.rank() != 2)
    throw ShapeError("sparse_categorical_crossentropy", "expected [B,C] probabilities, got " +
                                                            shape_str(pv.shape));
  int B = pv.dim(0), C = pv.dim(1);
  if (static_cast<int>(class_indices.size()) != B)
    throw ShapeError("sparse_categorical_crossentropy", "label count " +
                                                            std::to_string(class_indices.size()) +
                                                            " does not match batch " + std::to_string(B));
  for (int cls : class_indices)
    if (cls < 0 || cls >= C)
      throw ShapeError("sparse_categorical_crossentropy",
                       "class index " + std::to_string(cls) + " out of range [0," + std::to_string(C) + ")");
  double total = 0.0;
  for (int i = 0; i < B; ++i) {
    T p = clamp_prob(pv.v[static_cast<std::size_t>(i) * C + class_indices[static_cast<std::size_t>(i)]]);
    total += -std::log(static_cast<double>(p));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / B));
  bool needs = wants(probabilities);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    auto labels = std::make_shared<std::vector<int>>(std::move(class_indices));
    node(out_id).back = [probabilities, out_id, B, C, labels](Graph& g) {
      T gout = g.node(out_id).grad.v[0];
      const Tensor<T>& pv2 = g.value(probabilities);
      Tensor<T>& dp = g.grad_buffer(probabilities);
      for (int i = 0; i < B; ++i) {
        std::size_t idx = static_cast<std::size_t>(i) * C +
                          static_cast<std::size_t>((*labels)[static_cast<std::size_t>(i)]);
        T p = pv2.v[idx];
        if (p < kProbClamp<T> || p > T(1) - kProbClamp<T>) continue;  // clamped region
        dp.v[idx] += gout * (-T(1) / p) / static_cast<T>(B);
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::binary_crossentropy(Id predicted, Id targets) {
  const Tensor<T>& pv = value(predicted);
  const Tensor<T>& tv = value(targets);
  if (pv.shape != tv.shape)
    throw ShapeError("binary_crossentropy", "shape mismatch " + shape_str(pv.shape) + " vs " +
                                                shape_str(tv.shape));
  auto n = static_cast<std::size_t>(pv.numel());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = static_cast<double>(clamp_prob(pv.v[i]));
    double t = static_cast<double>(tv.v[i]);
    total += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
  bool needs = wants(predicted) || wants(targets);
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [predicted, targets, out_id, n](Graph& g) {
      T gout = g.node(out_id).grad.v[0];
      const Tensor<T>& pv2 = g.value(predicted);
      const Tensor<T>& tv2 = g.value(targets);
      T inv_n = T(1) / static_cast<T>(n);
      if (g.wants(predicted)) {
        Tensor<T>& dp = g.grad_buffer(predicted);
        for (std::size_t i = 0; i < n; ++i) {
          T p = pv2.v[i];
          if (p < kProbClamp<T> || p > T(1) - kProbClamp<T>) continue;
          T t = tv2.v[i];
          dp.v[i] += gout * inv_n * (-t / p + (T(1) - t) / (T(1) - p));
        }
      }
      if (g.wants(targets)) {
        Tensor<T>& dt = g.grad_buffer(targets);
        for (std::size_t i = 0; i < n; ++i) {
          T p = clamp_prob(pv2.v[i]);
          dt.v[i] += gout * inv_n * (std::log(T(1) - p) - std::log(p));
        }
      }
    };
  }
  return out_id;
}

template <class T>
typename Graph<T>::Id Graph<T>::l2_penalty(std::span<const Id> weights, T coefficient) {
  double total = 0.0;
  bool needs = false;
  for (Id id : weights) {
    for (T w : value(id).v) total += static_cast<double>(w) * static_cast<double>(w);
    needs = needs || wants(id);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total * static_cast<double>(coefficient)));
  std::vector<Id> ws(weights.begin(), weights.end());
  Id out_id = push(std::move(out), needs, {});
  if (needs) {
    node(out_id).back = [ws, out_id, coefficient](Graph& g) {
      T gout = g.node(out_id).grad.v[0];
      for (Id id : ws) {
        if (!g.wants(id)) continue;
        const Tensor<T>& wv = g.value(id);
        Tensor<T>& dw = g.grad_buffer(id);
        for (std::size_t i = 0; i < dw.v.size(); ++i)
          dw.v[i] += gout * T(2) * coefficient * wv.v[i];
      }
    };
  }
  return out_id;
}

template <class T>
void Graph<T>::backward(Id loss) {
  Node& loss_node = node(loss);
  if (loss_node.value.numel() != 1)
    throw ShapeError("backward", "loss must be scalar, got " + shape_str(loss_node.value.shape));
  grad_buffer(loss).v[0] = T(1);
  for (Id id = loss; id >= 0; --id) {
    Node& n = node(id);
    if (n.grad.v.empty() || !n.back) continue;
    n.back(*this);
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace canids::autograd
