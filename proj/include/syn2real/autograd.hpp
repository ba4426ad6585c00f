#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "syn2real/errors.hpp"
#include "syn2real/tensor.hpp"

namespace s2r {

// Reverse-mode tape over TensorT<T>. A Graph is built per training step and
// discarded; parameters live outside and are bound via param(), which routes
// their gradients back after backward(). Templated on the scalar type so the
// same code runs in float for training and double for finite-difference
// checks.
template <typename T>
class Graph {
 public:
  using Tensor = TensorT<T>;
  template <typename U>
  using RMat = Eigen::Matrix<U, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Mat = RMat<T>;
  using MapMat = Eigen::Map<Mat>;
  using MapConst = Eigen::Map<const Mat>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  int constant(Tensor v) {
    nodes_.push_back(Node{std::move(v), Tensor{}, false, nullptr});
    return int(nodes_.size()) - 1;
  }

  int scalar(T v) { return constant(Tensor({1}, v)); }

  // Binds an external parameter; gradients accumulate into grad_sink after
  // backward(). Repeated binds of the same tensor return the same node.
  int param(Tensor& value, Tensor& grad_sink) {
    auto it = param_cache_.find(&value);
    if (it != param_cache_.end()) return it->second;
    nodes_.push_back(Node{value, Tensor{}, true, nullptr});
    const int id = int(nodes_.size()) - 1;
    param_cache_[&value] = id;
    bindings_.push_back(Binding{id, &grad_sink});
    return id;
  }

  const Tensor& value(int id) const { return nodes_[size_t(id)].value; }
  T scalar_value(int id) const { return nodes_[size_t(id)].value[0]; }

  bool requires_grad(int id) const { return nodes_[size_t(id)].requires_grad; }

  // ---- elementwise / structural ops ----

  int add(int a, int b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb)) throw ShapeError("add: shape mismatch");
    Tensor out = va;
    out.axpy(T(1), vb);
    return make(std::move(out), {a, b}, [this, a, b](const Tensor& g) {
      accum(a, g);
      accum(b, g);
    });
  }

  int relu(int x) {
    Tensor out = value(x);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return make(std::move(out), {x}, [this, x](const Tensor& g) {
      const Tensor& vx = value(x);
      Tensor gx = Tensor::zeros_like(vx);
      for (std::int64_t i = 0; i < vx.numel(); ++i)
        gx[i] = vx[i] > T(0) ? g[i] : T(0);
      accum_move(x, std::move(gx));
    });
  }

  int leaky_relu(int x, T slope) {
    Tensor out = value(x);
    for (auto& v : out.data) v = v > T(0) ? v : slope * v;
    return make(std::move(out), {x}, [this, x, slope](const Tensor& g) {
      const Tensor& vx = value(x);
      Tensor gx = Tensor::zeros_like(vx);
      for (std::int64_t i = 0; i < vx.numel(); ++i)
        gx[i] = (vx[i] > T(0) ? T(1) : slope) * g[i];
      accum_move(x, std::move(gx));
    });
  }

  // (tanh(x)+1)/2: bounded output in (0,1) for the generator head.
  int tanh01(int x) {
    Tensor out = value(x);
    for (auto& v : out.data) v = (std::tanh(v) + T(1)) / T(2);
    const int id = make_deferred({x});
    nodes_[size_t(id)].value = std::move(out);
    set_backward(id, [this, x, id](const Tensor& g) {
      const Tensor& y = value(id);
      Tensor gx = Tensor::zeros_like(y);
      for (std::int64_t i = 0; i < y.numel(); ++i)
        gx[i] = T(2) * y[i] * (T(1) - y[i]) * g[i];
      accum_move(x, std::move(gx));
    });
    return id;
  }

  int concat_channels(int a, int b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.ndim() != 4 || vb.ndim() != 4 || va.dim(0) != vb.dim(0) ||
        va.dim(2) != vb.dim(2) || va.dim(3) != vb.dim(3)) {
      throw ShapeError("concat_channels: incompatible shapes");
    }
    const int n = va.dim(0), ca = va.dim(1), cb = vb.dim(1);
    const int hw = va.dim(2) * va.dim(3);
    Tensor out({n, ca + cb, va.dim(2), va.dim(3)});
    for (int i = 0; i < n; ++i) {
      std::copy_n(&va.data[size_t(std::int64_t(i) * ca * hw)],
                  size_t(std::int64_t(ca) * hw),
                  &out.data[size_t(std::int64_t(i) * (ca + cb) * hw)]);
      std::copy_n(&vb.data[size_t(std::int64_t(i) * cb * hw)],
                  size_t(std::int64_t(cb) * hw),
                  &out.data[size_t((std::int64_t(i) * (ca + cb) + ca) * hw)]);
    }
    return make(std::move(out), {a, b},
                [this, a, b, n, ca, cb, hw](const Tensor& g) {
                  Tensor ga = Tensor::zeros_like(value(a));
                  Tensor gb = Tensor::zeros_like(value(b));
                  for (int i = 0; i < n; ++i) {
                    std::copy_n(
                        &g.data[size_t(std::int64_t(i) * (ca + cb) * hw)],
                        size_t(std::int64_t(ca) * hw),
                        &ga.data[size_t(std::int64_t(i) * ca * hw)]);
                    std::copy_n(
                        &g.data[size_t((std::int64_t(i) * (ca + cb) + ca) * hw)],
                        size_t(std::int64_t(cb) * hw),
                        &gb.data[size_t(std::int64_t(i) * cb * hw)]);
                  }
                  accum_move(a, std::move(ga));
                  accum_move(b, std::move(gb));
                });
  }

  int upsample_nearest2(int x) {
    const Tensor& vx = value(x);
    if (vx.ndim() != 4) throw ShapeError("upsample_nearest2: need NCHW");
    const int n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
    Tensor out({n, c, 2 * h, 2 * w});
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            const T v = vx.at4(i, ch, y, xx);
            out.at4(i, ch, 2 * y, 2 * xx) = v;
            out.at4(i, ch, 2 * y, 2 * xx + 1) = v;
            out.at4(i, ch, 2 * y + 1, 2 * xx) = v;
            out.at4(i, ch, 2 * y + 1, 2 * xx + 1) = v;
          }
    return make(std::move(out), {x}, [this, x, n, c, h, w](const Tensor& g) {
      Tensor gx({std::vector<int>{n, c, h, w}});
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
              gx.at4(i, ch, y, xx) = g.at4(i, ch, 2 * y, 2 * xx) +
                                     g.at4(i, ch, 2 * y, 2 * xx + 1) +
                                     g.at4(i, ch, 2 * y + 1, 2 * xx) +
                                     g.at4(i, ch, 2 * y + 1, 2 * xx + 1);
            }
      accum_move(x, std::move(gx));
    });
  }

  // ---- convolution ----

  int conv2d(int x, int w, int b, int stride, int pad) {
    const Tensor& vx = value(x);
    const Tensor& vw = value(w);
    const Tensor& vb = value(b);
    if (vx.ndim() != 4 || vw.ndim() != 4)
      throw ShapeError("conv2d: need NCHW input and FCkk weights");
    const int n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), wdt = vx.dim(3);
    const int f = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    if (vw.dim(1) != c) throw ShapeError("conv2d: channel mismatch");
    if (vb.numel() != f) throw ShapeError("conv2d: bias size mismatch");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wdt + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input too small");
    const int ck = c * kh * kw;
    const std::int64_t hw_o = std::int64_t(ho) * wo;

    auto col = std::make_shared<std::vector<T>>(size_t(n) * ck * hw_o);
    Tensor out({n, f, ho, wo});

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < n; ++i) {
      T* col_i = col->data() + std::int64_t(i) * ck * hw_o;
      im2col(&vx.data[size_t(std::int64_t(i) * c * h * wdt)], c, h, wdt, kh,
             kw, stride, pad, ho, wo, col_i);
      MapConst wm(vw.data.data(), f, ck);
      MapConst cm(col_i, ck, hw_o);
      MapMat om(&out.data[size_t(std::int64_t(i) * f * hw_o)], f, hw_o);
      om.noalias() = wm * cm;
      for (int ff = 0; ff < f; ++ff) om.row(ff).array() += vb[ff];
    }

    const bool need_w = requires_grad(w) || requires_grad(b);
    const bool need_x = requires_grad(x);
    // col buffer is only needed for the weight gradient.
    std::shared_ptr<std::vector<T>> col_keep = need_w ? col : nullptr;
    return make(
        std::move(out), {x, w, b},
        [this, x, w, b, n, c, h, wdt, f, kh, kw, stride, pad, ho, wo, ck,
         hw_o, col_keep, need_w, need_x](const Tensor& g) {
          const Tensor& vw2 = value(w);
          if (need_w) {
            Tensor gw(std::vector<int>{f, c, kh, kw});
            Tensor gb(std::vector<int>{f});
            const int nt =
#ifdef _OPENMP
                std::min(omp_get_max_threads(), n);
#else
                1;
#endif
            std::vector<Tensor> gw_loc(size_t(nt),
                                       Tensor(std::vector<int>{f, c, kh, kw}));
            std::vector<Tensor> gb_loc(size_t(nt), Tensor(std::vector<int>{f}));
#ifdef _OPENMP
#pragma omp parallel num_threads(nt)
#endif
            {
#ifdef _OPENMP
              const int tid = omp_get_thread_num();
#else
              const int tid = 0;
#endif
#ifdef _OPENMP
#pragma omp for schedule(static)
#endif
              for (int i = 0; i < n; ++i) {
                const T* col_i = col_keep->data() + std::int64_t(i) * ck * hw_o;
                MapConst gm(&g.data[size_t(std::int64_t(i) * f * hw_o)], f,
                            hw_o);
                MapConst cm(col_i, ck, hw_o);
                MapMat gwm(gw_loc[size_t(tid)].data.data(), f, ck);
                gwm.noalias() += gm * cm.transpose();
                for (int ff = 0; ff < f; ++ff)
                  gb_loc[size_t(tid)][ff] += gm.row(ff).sum();
              }
            }
            for (int t = 0; t < nt; ++t) {
              gw.axpy(T(1), gw_loc[size_t(t)]);
              gb.axpy(T(1), gb_loc[size_t(t)]);
            }
            accum_move(w, std::move(gw));
            accum_move(b, std::move(gb));
          }
          if (need_x) {
            Tensor gx(std::vector<int>{n, c, h, wdt});
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int i = 0; i < n; ++i) {
              std::vector<T> dcol(size_t(ck) * hw_o);
              MapConst wm(vw2.data.data(), f, ck);
              MapConst gm(&g.data[size_t(std::int64_t(i) * f * hw_o)], f, hw_o);
              MapMat dm(dcol.data(), ck, hw_o);
              dm.noalias() = wm.transpose() * gm;
              col2im(dcol.data(), c, h, wdt, kh, kw, stride, pad, ho, wo,
                     &gx.data[size_t(std::int64_t(i) * c * h * wdt)]);
            }
            accum_move(x, std::move(gx));
          }
        });
  }

  // ---- normalization ----

  int instance_norm(int x, int gamma, int beta, T eps = T(1e-5)) {
    const Tensor& vx = value(x);
    if (vx.ndim() != 4) throw ShapeError("instance_norm: need NCHW");
    const int n = vx.dim(0), c = vx.dim(1);
    const std::int64_t m = std::int64_t(vx.dim(2)) * vx.dim(3);
    if (value(gamma).numel() != c || value(beta).numel() != c)
      throw ShapeError("instance_norm: affine size mismatch");

    auto xhat = std::make_shared<Tensor>(vx.dims);
    auto invstd = std::make_shared<Tensor>(std::vector<int>{n, c});
    Tensor out(vx.dims);
    const Tensor& vg = value(gamma);
    const Tensor& vbt = value(beta);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* px = &vx.data[size_t((std::int64_t(i) * c + ch) * m)];
        T* ph = &xhat->data[size_t((std::int64_t(i) * c + ch) * m)];
        T* po = &out.data[size_t((std::int64_t(i) * c + ch) * m)];
        T mu = T(0);
        for (std::int64_t j = 0; j < m; ++j) mu += px[j];
        mu /= T(m);
        T var = T(0);
        for (std::int64_t j = 0; j < m; ++j) {
          const T d = px[j] - mu;
          var += d * d;
        }
        var /= T(m);
        const T is = T(1) / std::sqrt(var + eps);
        invstd->at2(i, ch) = is;
        for (std::int64_t j = 0; j < m; ++j) {
          ph[j] = (px[j] - mu) * is;
          po[j] = vg[ch] * ph[j] + vbt[ch];
        }
      }
    return make(
        std::move(out), {x, gamma, beta},
        [this, x, gamma, beta, n, c, m, xhat, invstd](const Tensor& g) {
          const Tensor& vg2 = value(gamma);
          Tensor gx(xhat->dims);
          Tensor gg(std::vector<int>{c});
          Tensor gb(std::vector<int>{c});
          for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
              const T* ph = &xhat->data[size_t((std::int64_t(i) * c + ch) * m)];
              const T* pg = &g.data[size_t((std::int64_t(i) * c + ch) * m)];
              T* pgx = &gx.data[size_t((std::int64_t(i) * c + ch) * m)];
              T sum_dy = T(0), sum_dyxh = T(0);
              for (std::int64_t j = 0; j < m; ++j) {
                sum_dy += pg[j];
                sum_dyxh += pg[j] * ph[j];
              }
              gg[ch] += sum_dyxh;
              gb[ch] += sum_dy;
              const T is = invstd->at2(i, ch);
              const T k = vg2[ch] * is / T(m);
              for (std::int64_t j = 0; j < m; ++j) {
                pgx[j] = k * (T(m) * pg[j] - sum_dy - ph[j] * sum_dyxh);
              }
            }
          accum_move(x, std::move(gx));
          accum_move(gamma, std::move(gg));
          accum_move(beta, std::move(gb));
        });
  }

  // ---- embedding path ----

  // Gathers feature vectors at shared spatial locations: {N,C,H,W} ->
  // {N,L,C}. Locations are flat h*W+w indices, identical across the batch.
  int gather_locations(int x, std::vector<int> locs) {
    const Tensor& vx = value(x);
    if (vx.ndim() != 4) throw ShapeError("gather_locations: need NCHW");
    const int n = vx.dim(0), c = vx.dim(1);
    const std::int64_t hw = std::int64_t(vx.dim(2)) * vx.dim(3);
    for (int l : locs)
      if (l < 0 || l >= hw) throw IndexError("gather_locations: out of range");
    const int L = int(locs.size());
    Tensor out({n, L, c});
    for (int i = 0; i < n; ++i)
      for (int l = 0; l < L; ++l)
        for (int ch = 0; ch < c; ++ch)
          out.at3(i, l, ch) = vx.data[size_t((std::int64_t(i) * c + ch) * hw +
                                             locs[size_t(l)])];
    auto locs_p = std::make_shared<std::vector<int>>(std::move(locs));
    return make(std::move(out), {x},
                [this, x, n, c, hw, L, locs_p](const Tensor& g) {
                  Tensor gx = Tensor::zeros_like(value(x));
                  for (int i = 0; i < n; ++i)
                    for (int l = 0; l < L; ++l)
                      for (int ch = 0; ch < c; ++ch)
                        gx.data[size_t((std::int64_t(i) * c + ch) * hw +
                                       (*locs_p)[size_t(l)])] +=
                            g.at3(i, l, ch);
                  accum_move(x, std::move(gx));
                });
  }

  // Row-wise affine map on the last dimension: {...,Ci} x {Co,Ci} -> {...,Co}.
  int linear(int x, int w, int b) {
    const Tensor& vx = value(x);
    const Tensor& vw = value(w);
    const Tensor& vb = value(b);
    if (vw.ndim() != 2) throw ShapeError("linear: weight must be 2-d");
    const int ci = vw.dim(1), co = vw.dim(0);
    if (vx.dim(vx.ndim() - 1) != ci) throw ShapeError("linear: input dim");
    if (vb.numel() != co) throw ShapeError("linear: bias dim");
    const std::int64_t rows = vx.numel() / ci;
    std::vector<int> odims = vx.dims;
    odims.back() = co;
    Tensor out(odims);
    MapConst xm(vx.data.data(), rows, ci);
    MapConst wm(vw.data.data(), co, ci);
    MapMat om(out.data.data(), rows, co);
    om.noalias() = xm * wm.transpose();
    for (std::int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < co; ++j) om(r, j) += vb[j];
    return make(std::move(out), {x, w, b},
                [this, x, w, b, rows, ci, co](const Tensor& g) {
                  const Tensor& vx2 = value(x);
                  const Tensor& vw2 = value(w);
                  MapConst gm(g.data.data(), rows, co);
                  if (requires_grad(x)) {
                    Tensor gx(vx2.dims);
                    MapMat gxm(gx.data.data(), rows, ci);
                    MapConst wm2(vw2.data.data(), co, ci);
                    gxm.noalias() = gm * wm2;
                    accum_move(x, std::move(gx));
                  }
                  Tensor gw(std::vector<int>{co, ci});
                  MapMat gwm(gw.data.data(), co, ci);
                  MapConst xm2(vx2.data.data(), rows, ci);
                  gwm.noalias() = gm.transpose() * xm2;
                  accum_move(w, std::move(gw));
                  Tensor gb(std::vector<int>{co});
                  for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < co; ++j) gb[j] += gm(r, j);
                  accum_move(b, std::move(gb));
                });
  }

  // Normalizes the last dimension to (near) unit L2 norm.
  int l2_normalize_rows(int x, T eps = T(1e-6)) {
    const Tensor& vx = value(x);
    const int c = vx.dim(vx.ndim() - 1);
    const std::int64_t rows = vx.numel() / c;
    Tensor out(vx.dims);
    auto norms = std::make_shared<std::vector<T>>(size_t(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* px = &vx.data[size_t(r * c)];
      T s = eps * eps;
      for (int j = 0; j < c; ++j) s += px[j] * px[j];
      s = std::sqrt(s);
      (*norms)[size_t(r)] = s;
      for (int j = 0; j < c; ++j) out.data[size_t(r * c + j)] = px[j] / s;
    }
    const int id = make_deferred({x});
    nodes_[size_t(id)].value = std::move(out);
    set_backward(id, [this, x, id, rows, c, norms](const Tensor& g) {
      const Tensor& y = value(id);
      Tensor gx(y.dims);
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* py = &y.data[size_t(r * c)];
        const T* pg = &g.data[size_t(r * c)];
        T dot = T(0);
        for (int j = 0; j < c; ++j) dot += py[j] * pg[j];
        const T inv = T(1) / (*norms)[size_t(r)];
        for (int j = 0; j < c; ++j)
          gx.data[size_t(r * c + j)] = (pg[j] - py[j] * dot) * inv;
      }
      accum_move(x, std::move(gx));
    });
    return id;
  }

  // ---- losses ----

  // Contrastive cross-entropy over position-matched embeddings. q and k are
  // {N,L,C}; for each (n,i) the logits over k_{n,j} are cosine/tau with the
  // positive at j=i. Returns the mean over (n,i).
  int nce_cross_entropy(int q, int k, T tau) {
    const Tensor& vq = value(q);
    const Tensor& vk = value(k);
    if (vq.ndim() != 3 || !vq.same_shape(vk))
      throw ShapeError("nce_cross_entropy: need matching {N,L,C}");
    if (tau <= T(0)) throw ConfigError("nce_cross_entropy: tau must be > 0");
    const int n = vq.dim(0), L = vq.dim(1), c = vq.dim(2);
    if (L < 2) throw ConfigError("nce_cross_entropy: need at least 2 locations");
    auto probs = std::make_shared<Tensor>(std::vector<int>{n, L, L});
    T loss = T(0);
    for (int i = 0; i < n; ++i) {
      MapConst qm(&vq.data[size_t(std::int64_t(i) * L * c)], L, c);
      MapConst km(&vk.data[size_t(std::int64_t(i) * L * c)], L, c);
      Mat logits = (qm * km.transpose()) / tau;
      for (int r = 0; r < L; ++r) {
        const T mx = logits.row(r).maxCoeff();
        T sum = T(0);
        for (int j = 0; j < L; ++j) sum += std::exp(logits(r, j) - mx);
        const T lse = mx + std::log(sum);
        loss += lse - logits(r, r);
        for (int j = 0; j < L; ++j)
          probs->at3(i, r, j) = std::exp(logits(r, j) - lse);
      }
    }
    loss /= T(n) * T(L);
    return make(Tensor({1}, loss), {q, k},
                [this, q, k, tau, n, L, c, probs](const Tensor& g) {
                  const T scale = g[0] / (T(n) * T(L));
                  const Tensor& vq2 = value(q);
                  const Tensor& vk2 = value(k);
                  Tensor gq(vq2.dims);
                  Tensor gk(vk2.dims);
                  for (int i = 0; i < n; ++i) {
                    MapConst qm(&vq2.data[size_t(std::int64_t(i) * L * c)], L, c);
                    MapConst km(&vk2.data[size_t(std::int64_t(i) * L * c)], L, c);
                    Mat dlog(L, L);
                    for (int r = 0; r < L; ++r)
                      for (int j = 0; j < L; ++j)
                        dlog(r, j) = (probs->at3(i, r, j) - (r == j ? T(1) : T(0))) *
                                     scale / tau;
                    MapMat gqm(&gq.data[size_t(std::int64_t(i) * L * c)], L, c);
                    MapMat gkm(&gk.data[size_t(std::int64_t(i) * L * c)], L, c);
                    gqm.noalias() = dlog * km;
                    gkm.noalias() = dlog.transpose() * qm;
                  }
                  accum_move(q, std::move(gq));
                  accum_move(k, std::move(gk));
                });
  }

  // mean((x - c)^2), the least-squares GAN building block.
  int mse_to_constant(int x, T target) {
    const Tensor& vx = value(x);
    if (vx.numel() == 0) throw ShapeError("mse_to_constant: empty input");
    T acc = T(0);
    for (T v : vx.data) acc += (v - target) * (v - target);
    acc /= T(vx.numel());
    return make(Tensor({1}, acc), {x}, [this, x, target](const Tensor& g) {
      const Tensor& vx2 = value(x);
      Tensor gx(vx2.dims);
      const T k = T(2) * g[0] / T(vx2.numel());
      for (std::int64_t i = 0; i < vx2.numel(); ++i)
        gx[i] = k * (vx2[i] - target);
      accum_move(x, std::move(gx));
    });
  }

  // mean(softplus(sign * x)); sign=+1 penalizes positive logits, -1 negative.
  int mean_softplus(int x, T sign) {
    const Tensor& vx = value(x);
    if (vx.numel() == 0) throw ShapeError("mean_softplus: empty input");
    T acc = T(0);
    for (T v : vx.data) acc += softplus(sign * v);
    acc /= T(vx.numel());
    return make(Tensor({1}, acc), {x}, [this, x, sign](const Tensor& g) {
      const Tensor& vx2 = value(x);
      Tensor gx(vx2.dims);
      const T k = g[0] / T(vx2.numel());
      for (std::int64_t i = 0; i < vx2.numel(); ++i)
        gx[i] = k * sign * sigmoid(sign * vx2[i]);
      accum_move(x, std::move(gx));
    });
  }

  // Pixelwise softmax cross-entropy for segmentation: logits {N,C,H,W},
  // labels {N,H,W} int; mean over all pixels.
  int softmax_cross_entropy_2d(int logits, const LabelMap& labels) {
    const Tensor& vl = value(logits);
    if (vl.ndim() != 4) throw ShapeError("softmax_ce: need NCHW logits");
    const int n = vl.dim(0), c = vl.dim(1), h = vl.dim(2), w = vl.dim(3);
    if (labels.dims != std::vector<int>{n, h, w})
      throw ShapeError("softmax_ce: label shape mismatch");
    const std::int64_t hw = std::int64_t(h) * w;
    auto probs = std::make_shared<Tensor>(vl.dims);
    auto lab = std::make_shared<LabelMap>(labels);
    T loss = T(0);
    for (int i = 0; i < n; ++i)
      for (std::int64_t p = 0; p < hw; ++p) {
        T mx = vl.data[size_t((std::int64_t(i) * c) * hw + p)];
        for (int ch = 1; ch < c; ++ch)
          mx = std::max(mx, vl.data[size_t((std::int64_t(i) * c + ch) * hw + p)]);
        T sum = T(0);
        for (int ch = 0; ch < c; ++ch)
          sum += std::exp(vl.data[size_t((std::int64_t(i) * c + ch) * hw + p)] - mx);
        const T lse = mx + std::log(sum);
        const int y = int(lab->data[size_t(std::int64_t(i) * hw + p)]);
        if (y < 0 || y >= c) throw FormatError("softmax_ce: label out of range");
        loss += lse - vl.data[size_t((std::int64_t(i) * c + y) * hw + p)];
        for (int ch = 0; ch < c; ++ch)
          probs->data[size_t((std::int64_t(i) * c + ch) * hw + p)] =
              std::exp(vl.data[size_t((std::int64_t(i) * c + ch) * hw + p)] - lse);
      }
    loss /= T(n) * T(hw);
    return make(Tensor({1}, loss), {logits},
                [this, logits, n, c, hw, probs, lab](const Tensor& g) {
                  Tensor gx(probs->dims);
                  const T k = g[0] / (T(n) * T(hw));
                  for (int i = 0; i < n; ++i)
                    for (std::int64_t p = 0; p < hw; ++p) {
                      const int y = int(lab->data[size_t(std::int64_t(i) * hw + p)]);
                      for (int ch = 0; ch < c; ++ch) {
                        const std::int64_t off =
                            (std::int64_t(i) * c + ch) * hw + p;
                        gx.data[size_t(off)] =
                            k * (probs->data[size_t(off)] -
                                 (ch == y ? T(1) : T(0)));
                      }
                    }
                  accum_move(logits, std::move(gx));
                });
  }

  // Weighted sum of scalar nodes.
  int weighted_sum(const std::vector<int>& xs, const std::vector<T>& coeffs) {
    if (xs.size() != coeffs.size() || xs.empty())
      throw ShapeError("weighted_sum: arity mismatch");
    T acc = T(0);
    for (size_t i = 0; i < xs.size(); ++i) acc += coeffs[i] * scalar_value(xs[i]);
    auto xs_p = std::make_shared<std::vector<int>>(xs);
    auto c_p = std::make_shared<std::vector<T>>(coeffs);
    return make(Tensor({1}, acc), xs, [this, xs_p, c_p](const Tensor& g) {
      for (size_t i = 0; i < xs_p->size(); ++i) {
        Tensor gi({1}, g[0] * (*c_p)[i]);
        accum_move((*xs_p)[i], std::move(gi));
      }
    });
  }

  // Detached copy: value flows, gradient does not.
  int stop_gradient(int x) { return constant(value(x)); }

  // ---- backward ----

  void backward(int root) {
    if (value(root).numel() != 1)
      throw ShapeError("backward: root must be scalar");
    ensure_grad(root).fill(T(1));
    for (int i = root; i >= 0; --i) {
      Node& nd = nodes_[size_t(i)];
      if (nd.backward && nd.grad.numel() > 0) nd.backward(nd.grad);
    }
    for (const Binding& b : bindings_) {
      const Node& nd = nodes_[size_t(b.node)];
      if (nd.grad.numel() > 0) b.grad_sink->axpy(T(1), nd.grad);
    }
  }

  const Tensor& grad(int id) const { return nodes_[size_t(id)].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(const Tensor&)> backward;
  };
  struct Binding {
    int node;
    Tensor* grad_sink;
  };

  static T softplus(T z) {
    if (z > T(20)) return z;
    if (z < T(-20)) return std::exp(z);
    return std::log1p(std::exp(z));
  }
  static T sigmoid(T z) { return T(1) / (T(1) + std::exp(-z)); }

  int make(Tensor value, const std::vector<int>& parents,
           std::function<void(const Tensor&)> bw) {
    bool rq = false;
    for (int p : parents) rq = rq || nodes_[size_t(p)].requires_grad;
    nodes_.push_back(Node{std::move(value), Tensor{}, rq,
                          rq ? std::move(bw) : nullptr});
    return int(nodes_.size()) - 1;
  }

  int make_deferred(const std::vector<int>& parents) {
    bool rq = false;
    for (int p : parents) rq = rq || nodes_[size_t(p)].requires_grad;
    nodes_.push_back(Node{Tensor{}, Tensor{}, rq, nullptr});
    return int(nodes_.size()) - 1;
  }

  void set_backward(int id, std::function<void(const Tensor&)> bw) {
    if (nodes_[size_t(id)].requires_grad)
      nodes_[size_t(id)].backward = std::move(bw);
  }

  Tensor& ensure_grad(int id) {
    Node& nd = nodes_[size_t(id)];
    if (nd.grad.numel() == 0) nd.grad = Tensor(nd.value.dims);
    return nd.grad;
  }

  void accum(int id, const Tensor& g) {
    if (!nodes_[size_t(id)].requires_grad) return;
    ensure_grad(id).axpy(T(1), g);
  }

  void accum_move(int id, Tensor&& g) {
    Node& nd = nodes_[size_t(id)];
    if (!nd.requires_grad) return;
    if (nd.grad.numel() == 0) {
      nd.grad = std::move(g);
    } else {
      nd.grad.axpy(T(1), g);
    }
  }

  static void im2col(const T* img, int c, int h, int w, int kh, int kw,
                     int stride, int pad, int ho, int wo, T* col) {
    const std::int64_t hw_o = std::int64_t(ho) * wo;
    for (int ch = 0; ch < c; ++ch)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          T* dst = col + (std::int64_t(ch) * kh * kw + ki * kw + kj) * hw_o;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= h) {
              std::fill_n(dst + std::int64_t(oy) * wo, wo, T(0));
              continue;
            }
            const T* src = img + (std::int64_t(ch) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kj;
              dst[std::int64_t(oy) * wo + ox] =
                  (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
  }

  static void col2im(const T* col, int c, int h, int w, int kh, int kw,
                     int stride, int pad, int ho, int wo, T* img) {
    std::fill_n(img, std::int64_t(c) * h * w, T(0));
    const std::int64_t hw_o = std::int64_t(ho) * wo;
    for (int ch = 0; ch < c; ++ch)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          const T* src = col + (std::int64_t(ch) * kh * kw + ki * kw + kj) * hw_o;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= h) continue;
            T* dst = img + (std::int64_t(ch) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kj;
              if (ix >= 0 && ix < w) dst[ix] += src[std::int64_t(oy) * wo + ox];
            }
          }
        }
  }

  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;
  std::map<Tensor*, int> param_cache_;
};

}  // namespace s2r
