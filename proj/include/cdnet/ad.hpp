#pragma once

// Reverse-mode tape over dense tensors. Ops are tensor-granular; the tape
// linearizes arbitrary compositions (including the per-date encoder reuse
// and the LSTM unroll) so one backward() pass yields every parameter
// gradient. Templated on the scalar type so tests can run the whole network
// in double for tight finite-difference comparisons.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "cdnet/common.hpp"
#include "cdnet/gemm.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet::ad {

template <typename T>
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  int add_input(TensorT<T> t, bool requires_grad) {
    nodes_.push_back(Node{std::move(t), {}, requires_grad && grad_enabled_, nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const TensorT<T>& val(int i) const { return nodes_[static_cast<size_t>(i)].val; }
  TensorT<T>& val_mut(int i) { return nodes_[static_cast<size_t>(i)].val; }

  bool requires_grad(int i) const { return nodes_[static_cast<size_t>(i)].requires_grad; }

  // gradient buffer, zero-allocated on first touch
  TensorT<T>& grad(int i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.v.empty()) n.grad = TensorT<T>(n.val.shape);
    return n.grad;
  }

  bool has_grad(int i) const { return !nodes_[static_cast<size_t>(i)].grad.v.empty(); }

  void backward(int loss_node) {
    check(grad_enabled_, ErrKind::runtime, "backward on a no-grad graph");
    check(val(loss_node).count() == 1, ErrKind::runtime, "backward needs a scalar loss");
    grad(loss_node).v[0] = T(1);
    for (int i = loss_node; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.backward || n.grad.v.empty()) continue;
      n.backward(*this);
      n.grad = TensorT<T>();  // consumed; parameters keep theirs (no backward fn)
    }
  }

  // ---------------------------------------------------------------------
  // ops

  int conv2d(int x, int w, int b, int pad) {
    const auto& xv = val(x);
    const auto& wv = val(w);
    const int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    check(wv.dim(1) == Cin, ErrKind::runtime, "conv2d: channel mismatch");

    TensorT<T> out({N, Cout, H, W});
    const int K = Cin * kh * kw;
    const int HW = H * W;
    std::vector<T> col;
    const bool pointwise = (kh == 1 && kw == 1 && pad == 0);
    if (!pointwise) col.resize(static_cast<size_t>(K) * HW);
    for (int n = 0; n < N; ++n) {
      const T* xp = xv.data() + static_cast<size_t>(n) * Cin * HW;
      const T* colp = xp;
      if (!pointwise) {
        im2col(xp, Cin, H, W, kh, kw, pad, col.data());
        colp = col.data();
      }
      gemm_nn(Cout, HW, K, wv.data(), colp, out.data() + static_cast<size_t>(n) * Cout * HW);
    }
    if (b >= 0) {
      const auto& bv = val(b);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < Cout; ++c) {
          T* o = out.data() + (static_cast<size_t>(n) * Cout + c) * HW;
          const T bias = bv.v[static_cast<size_t>(c)];
          for (int i = 0; i < HW; ++i) o[i] += bias;
        }
    }

    int y = make_node(std::move(out), {x, w, b});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        const auto& xv2 = g.val(x);
        const auto& wv2 = g.val(w);
        const int K2 = Cin * kh * kw;
        std::vector<T> col2, dcol;
        if (!pointwise) {
          col2.resize(static_cast<size_t>(K2) * HW);
          dcol.resize(static_cast<size_t>(K2) * HW);
        }
        const bool need_dx = g.requires_grad(x);
        const bool need_dw = g.requires_grad(w);
        for (int n = 0; n < N; ++n) {
          const T* gyp = gy.data() + static_cast<size_t>(n) * Cout * HW;
          const T* xp = xv2.data() + static_cast<size_t>(n) * Cin * HW;
          if (need_dw) {
            const T* colp = xp;
            if (!pointwise) {
              im2col(xp, Cin, H, W, kh, kw, pad, col2.data());
              colp = col2.data();
            }
            gemm_nt(Cout, K2, HW, gyp, colp, g.grad(w).data(), /*accumulate=*/true);
          }
          if (need_dx) {
            T* dxp = g.grad(x).data() + static_cast<size_t>(n) * Cin * HW;
            if (pointwise) {
              gemm_tn(Cout, HW, K2, wv2.data(), gyp, dxp, /*accumulate=*/true);
            } else {
              gemm_tn(Cout, HW, K2, wv2.data(), gyp, dcol.data());
              col2im(dcol.data(), Cin, H, W, kh, kw, pad, dxp);
            }
          }
        }
        if (b >= 0 && g.requires_grad(b)) {
          auto& gb = g.grad(b);
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < Cout; ++c) {
              const T* gyp = gy.data() + (static_cast<size_t>(n) * Cout + c) * HW;
              T acc = T(0);
              for (int i = 0; i < HW; ++i) acc += gyp[i];
              gb.v[static_cast<size_t>(c)] += acc;
            }
        }
      };
    }
    return y;
  }

  // Batch norm over (N, H, W) per channel. Mutable running stats live
  // outside the graph; pass update_running=false to keep the forward pure.
  int batchnorm(int x, int gamma, int beta, TensorT<T>* running_mean, TensorT<T>* running_var,
                bool train, bool update_running, T momentum, T eps) {
    const auto& xv = val(x);
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const size_t HW = static_cast<size_t>(H) * W;
    const T count = static_cast<T>(N) * static_cast<T>(HW);

    std::vector<T> mu(static_cast<size_t>(C)), inv_std(static_cast<size_t>(C));
    if (train) {
      for (int c = 0; c < C; ++c) {
        double sum = 0.0, sumsq = 0.0;  // stats in double: large N*H*W reductions
        for (int n = 0; n < N; ++n) {
          const T* p = xv.data() + (static_cast<size_t>(n) * C + c) * HW;
          for (size_t i = 0; i < HW; ++i) {
            sum += static_cast<double>(p[i]);
            sumsq += static_cast<double>(p[i]) * static_cast<double>(p[i]);
          }
        }
        T m = static_cast<T>(sum / static_cast<double>(count));
        T var = static_cast<T>(sumsq / static_cast<double>(count) -
                               (sum / static_cast<double>(count)) * (sum / static_cast<double>(count)));
        if (var < T(0)) var = T(0);
        mu[static_cast<size_t>(c)] = m;
        inv_std[static_cast<size_t>(c)] = T(1) / std::sqrt(var + eps);
        if (update_running) {
          running_mean->v[static_cast<size_t>(c)] =
              (T(1) - momentum) * running_mean->v[static_cast<size_t>(c)] + momentum * m;
          running_var->v[static_cast<size_t>(c)] =
              (T(1) - momentum) * running_var->v[static_cast<size_t>(c)] + momentum * var;
        }
      }
    } else {
      for (int c = 0; c < C; ++c) {
        mu[static_cast<size_t>(c)] = running_mean->v[static_cast<size_t>(c)];
        inv_std[static_cast<size_t>(c)] =
            T(1) / std::sqrt(running_var->v[static_cast<size_t>(c)] + eps);
      }
    }

    const auto& gv = val(gamma);
    const auto& bv = val(beta);
    TensorT<T> out(xv.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* p = xv.data() + (static_cast<size_t>(n) * C + c) * HW;
        T* o = out.data() + (static_cast<size_t>(n) * C + c) * HW;
        const T a = gv.v[static_cast<size_t>(c)] * inv_std[static_cast<size_t>(c)];
        const T sh = bv.v[static_cast<size_t>(c)] - a * mu[static_cast<size_t>(c)];
        for (size_t i = 0; i < HW; ++i) o[i] = a * p[i] + sh;
      }

    int y = make_node(std::move(out), {x, gamma, beta});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=, mu = std::move(mu),
                                                 inv_std = std::move(inv_std)](Graph& g) {
        const auto& gy = g.grad(y);
        const auto& xv2 = g.val(x);
        const auto& gv2 = g.val(gamma);
        for (int c = 0; c < C; ++c) {
          const T m = mu[static_cast<size_t>(c)];
          const T is = inv_std[static_cast<size_t>(c)];
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (int n = 0; n < N; ++n) {
            const T* dyp = gy.data() + (static_cast<size_t>(n) * C + c) * HW;
            const T* xp = xv2.data() + (static_cast<size_t>(n) * C + c) * HW;
            for (size_t i = 0; i < HW; ++i) {
              sum_dy += dyp[i];
              sum_dy_xhat += dyp[i] * (xp[i] - m) * is;
            }
          }
          if (g.requires_grad(gamma)) g.grad(gamma).v[static_cast<size_t>(c)] += sum_dy_xhat;
          if (g.requires_grad(beta)) g.grad(beta).v[static_cast<size_t>(c)] += sum_dy;
          if (g.requires_grad(x)) {
            auto& gx = g.grad(x);
            const T gam = gv2.v[static_cast<size_t>(c)];
            if (train) {
              const T inv_count = T(1) / count;
              for (int n = 0; n < N; ++n) {
                const T* dyp = gy.data() + (static_cast<size_t>(n) * C + c) * HW;
                const T* xp = xv2.data() + (static_cast<size_t>(n) * C + c) * HW;
                T* gxp = gx.data() + (static_cast<size_t>(n) * C + c) * HW;
                for (size_t i = 0; i < HW; ++i) {
                  const T xhat = (xp[i] - m) * is;
                  gxp[i] += gam * is * (dyp[i] - inv_count * (sum_dy + xhat * sum_dy_xhat));
                }
              }
            } else {
              for (int n = 0; n < N; ++n) {
                const T* dyp = gy.data() + (static_cast<size_t>(n) * C + c) * HW;
                T* gxp = gx.data() + (static_cast<size_t>(n) * C + c) * HW;
                for (size_t i = 0; i < HW; ++i) gxp[i] += gam * is * dyp[i];
              }
            }
          }
        }
      };
    }
    return y;
  }

  int relu(int x) {
    const auto& xv = val(x);
    TensorT<T> out(xv.shape);
    for (size_t i = 0; i < xv.count(); ++i) out.v[i] = xv.v[i] > T(0) ? xv.v[i] : T(0);
    int y = make_node(std::move(out), {x});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        const auto& yv = g.val(y);
        auto& gx = g.grad(x);
        for (size_t i = 0; i < gy.count(); ++i)
          if (yv.v[i] > T(0)) gx.v[i] += gy.v[i];
      };
    }
    return y;
  }

  int maxpool2(int x) {
    const auto& xv = val(x);
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    check(H % 2 == 0 && W % 2 == 0, ErrKind::runtime, "maxpool2 needs even spatial dims");
    const int Ho = H / 2, Wo = W / 2;
    TensorT<T> out({N, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<uint8_t>>(out.count());
    size_t o = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* p = xv.data() + (static_cast<size_t>(n) * C + c) * H * W;
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j) {
            const int r = 2 * i, s = 2 * j;
            T best = p[r * W + s];
            uint8_t bi = 0;
            const T cands[3] = {p[r * W + s + 1], p[(r + 1) * W + s], p[(r + 1) * W + s + 1]};
            for (uint8_t k = 0; k < 3; ++k)
              if (cands[k] > best) {
                best = cands[k];
                bi = static_cast<uint8_t>(k + 1);
              }
            out.v[o] = best;
            (*arg)[o] = bi;
            ++o;
          }
      }
    int y = make_node(std::move(out), {x});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        auto& gx = g.grad(x);
        size_t o2 = 0;
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            T* gp = gx.data() + (static_cast<size_t>(n) * C + c) * H * W;
            for (int i = 0; i < Ho; ++i)
              for (int j = 0; j < Wo; ++j) {
                const uint8_t a = (*arg)[o2];
                const int r = 2 * i + (a >> 1), s = 2 * j + (a & 1);
                gp[r * W + s] += gy.v[o2];
                ++o2;
              }
          }
      };
    }
    return y;
  }

  int upsample2(int x) {  // nearest neighbor, factor 2
    const auto& xv = val(x);
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    TensorT<T> out({N, C, H * 2, W * 2});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* p = xv.data() + (static_cast<size_t>(n) * C + c) * H * W;
        T* q = out.data() + (static_cast<size_t>(n) * C + c) * H * W * 4;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const T v = p[i * W + j];
            q[(2 * i) * 2 * W + 2 * j] = v;
            q[(2 * i) * 2 * W + 2 * j + 1] = v;
            q[(2 * i + 1) * 2 * W + 2 * j] = v;
            q[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
          }
      }
    int y = make_node(std::move(out), {x});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        auto& gx = g.grad(x);
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const T* q = gy.data() + (static_cast<size_t>(n) * C + c) * H * W * 4;
            T* p = gx.data() + (static_cast<size_t>(n) * C + c) * H * W;
            for (int i = 0; i < H; ++i)
              for (int j = 0; j < W; ++j)
                p[i * W + j] += q[(2 * i) * 2 * W + 2 * j] + q[(2 * i) * 2 * W + 2 * j + 1] +
                                q[(2 * i + 1) * 2 * W + 2 * j] + q[(2 * i + 1) * 2 * W + 2 * j + 1];
          }
      };
    }
    return y;
  }

  int concat_channels(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
    check(bv.dim(0) == N && bv.dim(2) == H && bv.dim(3) == W, ErrKind::runtime,
          "concat: shape mismatch");
    const size_t HW = static_cast<size_t>(H) * W;
    TensorT<T> out({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
      std::copy_n(av.data() + static_cast<size_t>(n) * Ca * HW, Ca * HW,
                  out.data() + static_cast<size_t>(n) * (Ca + Cb) * HW);
      std::copy_n(bv.data() + static_cast<size_t>(n) * Cb * HW, Cb * HW,
                  out.data() + static_cast<size_t>(n) * (Ca + Cb) * HW + Ca * HW);
    }
    int y = make_node(std::move(out), {a, b});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        for (int n = 0; n < N; ++n) {
          if (g.requires_grad(a)) {
            T* ga = g.grad(a).data() + static_cast<size_t>(n) * Ca * HW;
            const T* s = gy.data() + static_cast<size_t>(n) * (Ca + Cb) * HW;
            for (size_t i = 0; i < Ca * HW; ++i) ga[i] += s[i];
          }
          if (g.requires_grad(b)) {
            T* gb = g.grad(b).data() + static_cast<size_t>(n) * Cb * HW;
            const T* s = gy.data() + static_cast<size_t>(n) * (Ca + Cb) * HW + Ca * HW;
            for (size_t i = 0; i < Cb * HW; ++i) gb[i] += s[i];
          }
        }
      };
    }
    return y;
  }

  int slice_channels(int x, int c0, int c1) {
    const auto& xv = val(x);
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    check(c0 >= 0 && c1 <= C && c0 < c1, ErrKind::runtime, "slice: bad channel range");
    const size_t HW = static_cast<size_t>(H) * W;
    const int Cs = c1 - c0;
    TensorT<T> out({N, Cs, H, W});
    for (int n = 0; n < N; ++n)
      std::copy_n(xv.data() + (static_cast<size_t>(n) * C + c0) * HW, Cs * HW,
                  out.data() + static_cast<size_t>(n) * Cs * HW);
    int y = make_node(std::move(out), {x});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        auto& gx = g.grad(x);
        for (int n = 0; n < N; ++n) {
          T* d = gx.data() + (static_cast<size_t>(n) * C + c0) * HW;
          const T* s = gy.data() + static_cast<size_t>(n) * Cs * HW;
          for (size_t i = 0; i < Cs * HW; ++i) d[i] += s[i];
        }
      };
    }
    return y;
  }

  // x is (N*T, C, H, W) laid out sample-major; returns date t as (N, C, H, W)
  int time_slice(int x, int num_samples, int num_dates, int t) {
    const auto& xv = val(x);
    const int C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    check(xv.dim(0) == num_samples * num_dates, ErrKind::runtime, "time_slice: bad layout");
    const size_t CHW = static_cast<size_t>(C) * H * W;
    TensorT<T> out({num_samples, C, H, W});
    for (int n = 0; n < num_samples; ++n)
      std::copy_n(xv.data() + (static_cast<size_t>(n) * num_dates + t) * CHW, CHW,
                  out.data() + static_cast<size_t>(n) * CHW);
    int y = make_node(std::move(out), {x});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        auto& gx = g.grad(x);
        for (int n = 0; n < num_samples; ++n) {
          T* d = gx.data() + (static_cast<size_t>(n) * num_dates + t) * CHW;
          const T* s = gy.data() + static_cast<size_t>(n) * CHW;
          for (size_t i = 0; i < CHW; ++i) d[i] += s[i];
        }
      };
    }
    return y;
  }

  int add(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    check(av.shape == bv.shape, ErrKind::runtime, "add: shape mismatch");
    TensorT<T> out(av.shape);
    for (size_t i = 0; i < out.count(); ++i) out.v[i] = av.v[i] + bv.v[i];
    int y = make_node(std::move(out), {a, b});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        if (g.requires_grad(a)) {
          auto& ga = g.grad(a);
          for (size_t i = 0; i < gy.count(); ++i) ga.v[i] += gy.v[i];
        }
        if (g.requires_grad(b)) {
          auto& gb = g.grad(b);
          for (size_t i = 0; i < gy.count(); ++i) gb.v[i] += gy.v[i];
        }
      };
    }
    return y;
  }

  int hadamard(int a, int b) {
    const auto& av = val(a);
    const auto& bv = val(b);
    check(av.shape == bv.shape, ErrKind::runtime, "hadamard: shape mismatch");
    TensorT<T> out(av.shape);
    for (size_t i = 0; i < out.count(); ++i) out.v[i] = av.v[i] * bv.v[i];
    int y = make_node(std::move(out), {a, b});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        const auto& av2 = g.val(a);
        const auto& bv2 = g.val(b);
        if (g.requires_grad(a)) {
          auto& ga = g.grad(a);
          for (size_t i = 0; i < gy.count(); ++i) ga.v[i] += gy.v[i] * bv2.v[i];
        }
        if (g.requires_grad(b)) {
          auto& gb = g.grad(b);
          for (size_t i = 0; i < gy.count(); ++i) gb.v[i] += gy.v[i] * av2.v[i];
        }
      };
    }
    return y;
  }

  int sigmoid(int x) {
    const auto& xv = val(x);
    TensorT<T> out(xv.shape);
    for (size_t i = 0; i < out.count(); ++i) out.v[i] = T(1) / (T(1) + std::exp(-xv.v[i]));
    int y = make_node(std::move(out), {x});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        const auto& yv = g.val(y);
        auto& gx = g.grad(x);
        for (size_t i = 0; i < gy.count(); ++i) gx.v[i] += gy.v[i] * yv.v[i] * (T(1) - yv.v[i]);
      };
    }
    return y;
  }

  int tanh_op(int x) {
    const auto& xv = val(x);
    TensorT<T> out(xv.shape);
    for (size_t i = 0; i < out.count(); ++i) out.v[i] = std::tanh(xv.v[i]);
    int y = make_node(std::move(out), {x});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        const auto& yv = g.val(y);
        auto& gx = g.grad(x);
        for (size_t i = 0; i < gy.count(); ++i) gx.v[i] += gy.v[i] * (T(1) - yv.v[i] * yv.v[i]);
      };
    }
    return y;
  }

  // per-pixel softmax over the channel axis
  int softmax_channels(int x) {
    const auto& xv = val(x);
    const int N = xv.dim(0), K = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const size_t HW = static_cast<size_t>(H) * W;
    TensorT<T> out(xv.shape);
    for (int n = 0; n < N; ++n)
      for (size_t p = 0; p < HW; ++p) {
        T mx = xv.v[static_cast<size_t>(n) * K * HW + p];
        for (int k = 1; k < K; ++k)
          mx = std::max(mx, xv.v[(static_cast<size_t>(n) * K + k) * HW + p]);
        T denom = T(0);
        for (int k = 0; k < K; ++k) {
          T e = std::exp(xv.v[(static_cast<size_t>(n) * K + k) * HW + p] - mx);
          out.v[(static_cast<size_t>(n) * K + k) * HW + p] = e;
          denom += e;
        }
        for (int k = 0; k < K; ++k) out.v[(static_cast<size_t>(n) * K + k) * HW + p] /= denom;
      }
    int y = make_node(std::move(out), {x});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward = [=](Graph& g) {
        const auto& gy = g.grad(y);
        const auto& yv = g.val(y);
        auto& gx = g.grad(x);
        for (int n = 0; n < N; ++n)
          for (size_t p = 0; p < HW; ++p) {
            T dot = T(0);
            for (int k = 0; k < K; ++k) {
              const size_t idx = (static_cast<size_t>(n) * K + k) * HW + p;
              dot += gy.v[idx] * yv.v[idx];
            }
            for (int k = 0; k < K; ++k) {
              const size_t idx = (static_cast<size_t>(n) * K + k) * HW + p;
              gx.v[idx] += yv.v[idx] * (gy.v[idx] - dot);
            }
          }
      };
    }
    return y;
  }

  // mean over pixels of w[y] * (-log softmax(logits)[y]); scalar output
  int softmax_xent_weighted(int logits, std::vector<uint8_t> labels, std::vector<T> class_weights) {
    const auto& xv = val(logits);
    const int N = xv.dim(0), K = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const size_t HW = static_cast<size_t>(H) * W;
    check(labels.size() == static_cast<size_t>(N) * HW, ErrKind::runtime, "loss: label count");
    check(class_weights.size() == static_cast<size_t>(K), ErrKind::runtime, "loss: weight count");

    auto probs = std::make_shared<TensorT<T>>(xv.shape);
    const T inv_npix = T(1) / (static_cast<T>(N) * static_cast<T>(HW));
    double loss = 0.0;  // pixel sum in double regardless of T
    for (int n = 0; n < N; ++n)
      for (size_t p = 0; p < HW; ++p) {
        T mx = xv.v[static_cast<size_t>(n) * K * HW + p];
        for (int k = 1; k < K; ++k)
          mx = std::max(mx, xv.v[(static_cast<size_t>(n) * K + k) * HW + p]);
        T denom = T(0);
        for (int k = 0; k < K; ++k) {
          T e = std::exp(xv.v[(static_cast<size_t>(n) * K + k) * HW + p] - mx);
          probs->v[(static_cast<size_t>(n) * K + k) * HW + p] = e;
          denom += e;
        }
        const T log_denom = std::log(denom);
        const uint8_t yl = labels[static_cast<size_t>(n) * HW + p];
        for (int k = 0; k < K; ++k) probs->v[(static_cast<size_t>(n) * K + k) * HW + p] /= denom;
        const T logit_y = xv.v[(static_cast<size_t>(n) * K + yl) * HW + p] - mx;
        loss += static_cast<double>(class_weights[yl]) * static_cast<double>(log_denom - logit_y);
      }
    TensorT<T> out({1});
    out.v[0] = static_cast<T>(loss * static_cast<double>(inv_npix));

    int y = make_node(std::move(out), {logits});
    if (node_grad(y)) {
      nodes_[static_cast<size_t>(y)].backward =
          [=, labels = std::move(labels), class_weights = std::move(class_weights)](Graph& g) {
            const T seed = g.grad(y).v[0];
            auto& gx = g.grad(logits);
            for (int n = 0; n < N; ++n)
              for (size_t p = 0; p < HW; ++p) {
                const uint8_t yl = labels[static_cast<size_t>(n) * HW + p];
                const T wl = class_weights[yl] * inv_npix * seed;
                for (int k = 0; k < K; ++k) {
                  const size_t idx = (static_cast<size_t>(n) * K + k) * HW + p;
                  gx.v[idx] += wl * (probs->v[idx] - (k == yl ? T(1) : T(0)));
                }
              }
          };
    }
    return y;
  }

 private:
  struct Node {
    TensorT<T> val;
    TensorT<T> grad;
    bool requires_grad = false;
    std::function<void(Graph&)> backward;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;

  int make_node(TensorT<T> val, std::initializer_list<int> parents) {
    bool rg = false;
    if (grad_enabled_)
      for (int p : parents)
        if (p >= 0 && nodes_[static_cast<size_t>(p)].requires_grad) rg = true;
    nodes_.push_back(Node{std::move(val), {}, rg, nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // whether a freshly made node should record a backward closure
  bool node_grad(int y) const { return grad_enabled_ && nodes_[static_cast<size_t>(y)].requires_grad; }

  static void im2col(const T* x, int C, int H, int W, int kh, int kw, int pad, T* col) {
    const int HW = H * W;
    size_t row = 0;
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < kh; ++dy)
        for (int dx = 0; dx < kw; ++dx, ++row) {
          T* dst = col + row * HW;
          const T* src = x + static_cast<size_t>(c) * HW;
          for (int y = 0; y < H; ++y) {
            const int sy = y + dy - pad;
            if (sy < 0 || sy >= H) {
              for (int xx = 0; xx < W; ++xx) dst[y * W + xx] = T(0);
              continue;
            }
            const int shift = dx - pad;
            const int x_lo = std::max(0, -shift);
            const int x_hi = std::min(W, W - shift);
            for (int xx = 0; xx < x_lo; ++xx) dst[y * W + xx] = T(0);
            for (int xx = x_lo; xx < x_hi; ++xx) dst[y * W + xx] = src[sy * W + xx + shift];
            for (int xx = x_hi; xx < W; ++xx) dst[y * W + xx] = T(0);
          }
        }
  }

  static void col2im(const T* col, int C, int H, int W, int kh, int kw, int pad, T* dx) {
    const int HW = H * W;
    size_t row = 0;
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < kh; ++dy)
        for (int dx_ = 0; dx_ < kw; ++dx_, ++row) {
          const T* src = col + row * HW;
          T* dst = dx + static_cast<size_t>(c) * HW;
          for (int y = 0; y < H; ++y) {
            const int sy = y + dy - pad;
            if (sy < 0 || sy >= H) continue;
            const int shift = dx_ - pad;
            const int x_lo = std::max(0, -shift);
            const int x_hi = std::min(W, W - shift);
            for (int xx = x_lo; xx < x_hi; ++xx) dst[sy * W + xx + shift] += src[y * W + xx];
          }
        }
  }
};

}  // namespace cdnet::ad
