#include "ens/graph.hpp"

#include <algorithm>
#include <cmath>

namespace ens {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_bwd(double x) {
  double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  return phi + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

double sigmoid_fwd(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double softplus_fwd(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

}  // namespace

Value Graph::emit(Tensor value, std::vector<int> inputs,
                  std::function<void(Graph&, int)> backward) {
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  for (int i : n.inputs)
    if (nodes_[i].requires_grad) n.requires_grad = true;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape[0], n.value.shape[1], n.value.shape[2], n.value.shape[3]);
  return n.grad;
}

Value Graph::param(Tensor& t) {
  auto it = param_ids_.find(&t);
  if (it != param_ids_.end()) return Value{this, it->second};
  Node n;
  n.value = t;
  n.param_src = &t;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  param_ids_[&t] = id;
  return Value{this, id};
}

Value Graph::input(const Tensor& t, bool requires_grad) {
  Node n;
  n.value = t;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Graph::grad_of(const Tensor& param) const {
  auto it = param_ids_.find(&param);
  if (it == param_ids_.end())
    throw ContractError("grad_of: tensor is not a parameter of this graph");
  return nodes_[it->second].grad;
}

// ---------------------------------------------------------------------------
// elementwise

Value Graph::add(Value a, Value b) {
  const Tensor& x = nodes_[a.id].value;
  const Tensor& y = nodes_[b.id].value;
  require_same_shape(x, y, "add");
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += y.data[i];
  return emit(std::move(out), {a.id, b.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    for (int in : n.inputs) {
      if (!g.nodes_[in].requires_grad) continue;
      Tensor& gi = g.grad_buf(in);
      for (std::size_t i = 0; i < gi.numel(); ++i) gi.data[i] += n.grad.data[i];
    }
  });
}

Value Graph::sub(Value a, Value b) {
  const Tensor& x = nodes_[a.id].value;
  const Tensor& y = nodes_[b.id].value;
  require_same_shape(x, y, "sub");
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= y.data[i];
  return emit(std::move(out), {a.id, b.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (g.nodes_[n.inputs[0]].requires_grad) {
      Tensor& ga = g.grad_buf(n.inputs[0]);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += n.grad.data[i];
    }
    if (g.nodes_[n.inputs[1]].requires_grad) {
      Tensor& gb = g.grad_buf(n.inputs[1]);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] -= n.grad.data[i];
    }
  });
}

Value Graph::hadamard(Value a, Value b) {
  const Tensor& x = nodes_[a.id].value;
  const Tensor& y = nodes_[b.id].value;
  require_same_shape(x, y, "hadamard");
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= y.data[i];
  return emit(std::move(out), {a.id, b.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    const Tensor& y = g.nodes_[n.inputs[1]].value;
    if (g.nodes_[n.inputs[0]].requires_grad) {
      Tensor& ga = g.grad_buf(n.inputs[0]);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += n.grad.data[i] * y.data[i];
    }
    if (g.nodes_[n.inputs[1]].requires_grad) {
      Tensor& gb = g.grad_buf(n.inputs[1]);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] += n.grad.data[i] * x.data[i];
    }
  });
}

Value Graph::scale(Value a, double s) {
  Tensor out = nodes_[a.id].value;
  for (double& v : out.data) v *= s;
  return emit(std::move(out), {a.id}, [s](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += s * n.grad.data[i];
  });
}

Value Graph::gelu(Value a) {
  Tensor out = nodes_[a.id].value;
  for (double& v : out.data) v = gelu_fwd(v);
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i)
      ga.data[i] += n.grad.data[i] * gelu_bwd(x.data[i]);
  });
}

Value Graph::silu(Value a) {
  Tensor out = nodes_[a.id].value;
  for (double& v : out.data) v = v * sigmoid_fwd(v);
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      double s = sigmoid_fwd(x.data[i]);
      ga.data[i] += n.grad.data[i] * s * (1.0 + x.data[i] * (1.0 - s));
    }
  });
}

Value Graph::sigmoid(Value a) {
  Tensor out = nodes_[a.id].value;
  for (double& v : out.data) v = sigmoid_fwd(v);
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    const Tensor& y = n.value;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i)
      ga.data[i] += n.grad.data[i] * y.data[i] * (1.0 - y.data[i]);
  });
}

Value Graph::softplus(Value a) {
  Tensor out = nodes_[a.id].value;
  for (double& v : out.data) v = softplus_fwd(v);
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i)
      ga.data[i] += n.grad.data[i] * sigmoid_fwd(x.data[i]);
  });
}

Value Graph::abs(Value a) {
  Tensor out = nodes_[a.id].value;
  for (double& v : out.data) v = std::fabs(v);
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      double s = x.data[i] > 0 ? 1.0 : (x.data[i] < 0 ? -1.0 : 0.0);
      ga.data[i] += n.grad.data[i] * s;
    }
  });
}

Value Graph::mul_bcast(Value a, Value b) {
  const Tensor& x = nodes_[a.id].value;
  const Tensor& y = nodes_[b.id].value;
  if (y.h() != 1 || y.w() != 1 || (y.n() != 1 && y.n() != x.n()) ||
      (y.c() != 1 && y.c() != x.c()))
    throw DimensionError("mul_bcast: incompatible shapes " + x.shape_str() + " vs " +
                         y.shape_str());
  const int N = x.n(), C = x.c(), HW = x.h() * x.w();
  Tensor out = x;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double f = y.at(y.n() == 1 ? 0 : n, y.c() == 1 ? 0 : c, 0, 0);
      double* o = &out.data[(static_cast<std::size_t>(n) * C + c) * HW];
      for (int i = 0; i < HW; ++i) o[i] *= f;
    }
  return emit(std::move(out), {a.id, b.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    const Tensor& y = g.nodes_[n.inputs[1]].value;
    const int N = x.n(), C = x.c(), HW = x.h() * x.w();
    if (g.nodes_[n.inputs[0]].requires_grad) {
      Tensor& ga = g.grad_buf(n.inputs[0]);
      for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c) {
          double f = y.at(y.n() == 1 ? 0 : nn, y.c() == 1 ? 0 : c, 0, 0);
          std::size_t base = (static_cast<std::size_t>(nn) * C + c) * HW;
          for (int i = 0; i < HW; ++i) ga.data[base + i] += f * n.grad.data[base + i];
        }
    }
    if (g.nodes_[n.inputs[1]].requires_grad) {
      Tensor& gb = g.grad_buf(n.inputs[1]);
      for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c) {
          std::size_t base = (static_cast<std::size_t>(nn) * C + c) * HW;
          double acc = 0.0;
          for (int i = 0; i < HW; ++i) acc += x.data[base + i] * n.grad.data[base + i];
          gb.at(y.n() == 1 ? 0 : nn, y.c() == 1 ? 0 : c, 0, 0) += acc;
        }
    }
  });
}

Value Graph::add_bcast(Value a, Value b) {
  const Tensor& x = nodes_[a.id].value;
  const Tensor& y = nodes_[b.id].value;
  if (y.h() != 1 || y.w() != 1 || (y.n() != 1 && y.n() != x.n()) ||
      (y.c() != 1 && y.c() != x.c()))
    throw DimensionError("add_bcast: incompatible shapes " + x.shape_str() + " vs " +
                         y.shape_str());
  const int N = x.n(), C = x.c(), HW = x.h() * x.w();
  Tensor out = x;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double f = y.at(y.n() == 1 ? 0 : n, y.c() == 1 ? 0 : c, 0, 0);
      double* o = &out.data[(static_cast<std::size_t>(n) * C + c) * HW];
      for (int i = 0; i < HW; ++i) o[i] += f;
    }
  return emit(std::move(out), {a.id, b.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    const Tensor& y = g.nodes_[n.inputs[1]].value;
    const int N = x.n(), C = x.c(), HW = x.h() * x.w();
    if (g.nodes_[n.inputs[0]].requires_grad) {
      Tensor& ga = g.grad_buf(n.inputs[0]);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += n.grad.data[i];
    }
    if (g.nodes_[n.inputs[1]].requires_grad) {
      Tensor& gb = g.grad_buf(n.inputs[1]);
      for (int nn = 0; nn < N; ++nn)
        for (int c = 0; c < C; ++c) {
          std::size_t base = (static_cast<std::size_t>(nn) * C + c) * HW;
          double acc = 0.0;
          for (int i = 0; i < HW; ++i) acc += n.grad.data[base + i];
          gb.at(y.n() == 1 ? 0 : nn, y.c() == 1 ? 0 : c, 0, 0) += acc;
        }
    }
  });
}

Value Graph::reverse_lastaxis(Value a) {
  const Tensor& x = nodes_[a.id].value;
  const int W = x.w();
  const std::size_t rows = x.numel() / W;
  Tensor out = x;
  for (std::size_t r = 0; r < rows; ++r)
    std::reverse(out.data.begin() + r * W, out.data.begin() + (r + 1) * W);
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    const int W = ga.w();
    const std::size_t rows = ga.numel() / W;
    for (std::size_t r = 0; r < rows; ++r)
      for (int i = 0; i < W; ++i) ga.data[r * W + i] += n.grad.data[r * W + (W - 1 - i)];
  });
}

// ---------------------------------------------------------------------------
// reductions

Value Graph::sum(Value a) {
  const Tensor& x = nodes_[a.id].value;
  double acc = 0.0;
  for (double v : x.data) acc += v;
  return emit(Tensor::scalar(acc), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    double gy = n.grad.data[0];
    for (double& v : ga.data) v += gy;
  });
}

Value Graph::mean(Value a) {
  const Tensor& x = nodes_[a.id].value;
  double acc = 0.0;
  for (double v : x.data) acc += v;
  double inv = 1.0 / static_cast<double>(x.numel());
  return emit(Tensor::scalar(acc * inv), {a.id}, [inv](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    double gy = n.grad.data[0] * inv;
    for (double& v : ga.data) v += gy;
  });
}

Value Graph::global_avg_pool(Value a) {
  const Tensor& x = nodes_[a.id].value;
  const int N = x.n(), C = x.c(), HW = x.h() * x.w();
  Tensor out(N, C, 1, 1);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = &x.data[(static_cast<std::size_t>(n) * C + c) * HW];
      double acc = 0.0;
      for (int i = 0; i < HW; ++i) acc += p[i];
      out.at(n, c, 0, 0) = acc / HW;
    }
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    const int N = x.n(), C = x.c(), HW = x.h() * x.w();
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (int nn = 0; nn < N; ++nn)
      for (int c = 0; c < C; ++c) {
        double gy = n.grad.at(nn, c, 0, 0) / HW;
        double* p = &ga.data[(static_cast<std::size_t>(nn) * C + c) * HW];
        for (int i = 0; i < HW; ++i) p[i] += gy;
      }
  });
}

Value Graph::softmax_lastaxis(Value a) {
  const Tensor& x = nodes_[a.id].value;
  const int W = x.w();
  const std::size_t rows = x.numel() / W;
  Tensor out = x;
  for (std::size_t r = 0; r < rows; ++r) {
    double* p = &out.data[r * W];
    double mx = p[0];
    for (int i = 1; i < W; ++i) mx = std::max(mx, p[i]);
    double z = 0.0;
    for (int i = 0; i < W; ++i) {
      p[i] = std::exp(p[i] - mx);
      z += p[i];
    }
    for (int i = 0; i < W; ++i) p[i] /= z;
  }
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    const Tensor& y = n.value;
    const int W = y.w();
    const std::size_t rows = y.numel() / W;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yp = &y.data[r * W];
      const double* gy = &n.grad.data[r * W];
      double dot = 0.0;
      for (int i = 0; i < W; ++i) dot += yp[i] * gy[i];
      double* gp = &ga.data[r * W];
      for (int i = 0; i < W; ++i) gp[i] += yp[i] * (gy[i] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra / conv

Value Graph::matmul(Value a, Value b) {
  const Tensor& x = nodes_[a.id].value;
  const Tensor& y = nodes_[b.id].value;
  if (x.n() != y.n() || x.c() != y.c() || x.w() != y.h())
    throw DimensionError("matmul: incompatible shapes " + x.shape_str() + " vs " +
                         y.shape_str());
  const int B = x.n() * x.c(), R = x.h(), K = x.w(), C = y.w();
  Tensor out(x.n(), x.c(), R, C);
  for (int bb = 0; bb < B; ++bb) {
    const double* xp = &x.data[static_cast<std::size_t>(bb) * R * K];
    const double* yp = &y.data[static_cast<std::size_t>(bb) * K * C];
    double* op = &out.data[static_cast<std::size_t>(bb) * R * C];
    for (int r = 0; r < R; ++r)
      for (int k = 0; k < K; ++k) {
        double xv = xp[r * K + k];
        if (xv == 0.0) continue;
        const double* yr = &yp[k * C];
        double* orow = &op[r * C];
        for (int c = 0; c < C; ++c) orow[c] += xv * yr[c];
      }
  }
  return emit(std::move(out), {a.id, b.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    const Tensor& y = g.nodes_[n.inputs[1]].value;
    const int B = x.n() * x.c(), R = x.h(), K = x.w(), C = y.w();
    if (g.nodes_[n.inputs[0]].requires_grad) {
      Tensor& gx = g.grad_buf(n.inputs[0]);
      for (int bb = 0; bb < B; ++bb) {
        const double* gy = &n.grad.data[static_cast<std::size_t>(bb) * R * C];
        const double* yp = &y.data[static_cast<std::size_t>(bb) * K * C];
        double* gp = &gx.data[static_cast<std::size_t>(bb) * R * K];
        for (int r = 0; r < R; ++r)
          for (int k = 0; k < K; ++k) {
            double acc = 0.0;
            const double* gyr = &gy[r * C];
            const double* yr = &yp[k * C];
            for (int c = 0; c < C; ++c) acc += gyr[c] * yr[c];
            gp[r * K + k] += acc;
          }
      }
    }
    if (g.nodes_[n.inputs[1]].requires_grad) {
      Tensor& gyb = g.grad_buf(n.inputs[1]);
      for (int bb = 0; bb < B; ++bb) {
        const double* gy = &n.grad.data[static_cast<std::size_t>(bb) * R * C];
        const double* xp = &x.data[static_cast<std::size_t>(bb) * R * K];
        double* gp = &gyb.data[static_cast<std::size_t>(bb) * K * C];
        for (int r = 0; r < R; ++r)
          for (int k = 0; k < K; ++k) {
            double xv = xp[r * K + k];
            if (xv == 0.0) continue;
            const double* gyr = &gy[r * C];
            double* gr = &gp[k * C];
            for (int c = 0; c < C; ++c) gr[c] += xv * gyr[c];
          }
      }
    }
  });
}

Value Graph::transpose_hw(Value a) {
  const Tensor& x = nodes_[a.id].value;
  const int B = x.n() * x.c(), R = x.h(), C = x.w();
  Tensor out(x.n(), x.c(), C, R);
  for (int bb = 0; bb < B; ++bb)
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c)
        out.data[(static_cast<std::size_t>(bb) * C + c) * R + r] =
            x.data[(static_cast<std::size_t>(bb) * R + r) * C + c];
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    const int B = x.n() * x.c(), R = x.h(), C = x.w();
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (int bb = 0; bb < B; ++bb)
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
          ga.data[(static_cast<std::size_t>(bb) * R + r) * C + c] +=
              n.grad.data[(static_cast<std::size_t>(bb) * C + c) * R + r];
  });
}

Value Graph::conv_1x1(Value x, Value w, Value b) {
  const Tensor& xv = nodes_[x.id].value;
  const Tensor& wv = nodes_[w.id].value;
  const Tensor& bv = nodes_[b.id].value;
  if (wv.c() != xv.c() || wv.h() != 1 || wv.w() != 1)
    throw DimensionError("conv_1x1: weight " + wv.shape_str() + " does not match input " +
                         xv.shape_str());
  if (bv.n() != 1 || bv.c() != wv.n() || bv.h() != 1 || bv.w() != 1)
    throw DimensionError("conv_1x1: bias " + bv.shape_str() + " does not match weight " +
                         wv.shape_str());
  const int N = xv.n(), CI = xv.c(), CO = wv.n(), HW = xv.h() * xv.w();
  Tensor out(N, CO, xv.h(), xv.w());
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < CO; ++o) {
      double* op = &out.data[(static_cast<std::size_t>(n) * CO + o) * HW];
      double bias = bv.data[o];
      for (int i = 0; i < HW; ++i) op[i] = bias;
      for (int ci = 0; ci < CI; ++ci) {
        double wv_ = wv.data[static_cast<std::size_t>(o) * CI + ci];
        if (wv_ == 0.0) continue;
        const double* xp = &xv.data[(static_cast<std::size_t>(n) * CI + ci) * HW];
        for (int i = 0; i < HW; ++i) op[i] += wv_ * xp[i];
      }
    }
  return emit(std::move(out), {x.id, w.id, b.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    const Tensor& xv = g.nodes_[n.inputs[0]].value;
    const Tensor& wv = g.nodes_[n.inputs[1]].value;
    const int N = xv.n(), CI = xv.c(), CO = wv.n(), HW = xv.h() * xv.w();
    if (g.nodes_[n.inputs[0]].requires_grad) {
      Tensor& gx = g.grad_buf(n.inputs[0]);
      for (int nn = 0; nn < N; ++nn)
        for (int o = 0; o < CO; ++o) {
          const double* gy = &n.grad.data[(static_cast<std::size_t>(nn) * CO + o) * HW];
          for (int ci = 0; ci < CI; ++ci) {
            double wv_ = wv.data[static_cast<std::size_t>(o) * CI + ci];
            if (wv_ == 0.0) continue;
            double* gp = &gx.data[(static_cast<std::size_t>(nn) * CI + ci) * HW];
            for (int i = 0; i < HW; ++i) gp[i] += wv_ * gy[i];
          }
        }
    }
    if (g.nodes_[n.inputs[1]].requires_grad) {
      Tensor& gw = g.grad_buf(n.inputs[1]);
      for (int nn = 0; nn < N; ++nn)
        for (int o = 0; o < CO; ++o) {
          const double* gy = &n.grad.data[(static_cast<std::size_t>(nn) * CO + o) * HW];
          for (int ci = 0; ci < CI; ++ci) {
            const double* xp = &xv.data[(static_cast<std::size_t>(nn) * CI + ci) * HW];
            double acc = 0.0;
            for (int i = 0; i < HW; ++i) acc += gy[i] * xp[i];
            gw.data[static_cast<std::size_t>(o) * CI + ci] += acc;
          }
        }
    }
    if (g.nodes_[n.inputs[2]].requires_grad) {
      Tensor& gb = g.grad_buf(n.inputs[2]);
      for (int nn = 0; nn < N; ++nn)
        for (int o = 0; o < CO; ++o) {
          const double* gy = &n.grad.data[(static_cast<std::size_t>(nn) * CO + o) * HW];
          double acc = 0.0;
          for (int i = 0; i < HW; ++i) acc += gy[i];
          gb.data[o] += acc;
        }
    }
  });
}

Value Graph::depthwise_conv_3x3(Value x, Value w, Value b) {
  const Tensor& xv = nodes_[x.id].value;
  const Tensor& wv = nodes_[w.id].value;
  const Tensor& bv = nodes_[b.id].value;
  if (wv.n() != xv.c() || wv.c() != 1 || wv.h() != 3 || wv.w() != 3)
    throw DimensionError("depthwise_conv_3x3: weight " + wv.shape_str() +
                         " does not match input " + xv.shape_str());
  if (bv.c() != xv.c() || bv.n() != 1 || bv.h() != 1 || bv.w() != 1)
    throw DimensionError("depthwise_conv_3x3: bias " + bv.shape_str() +
                         " does not match input " + xv.shape_str());
  const int N = xv.n(), C = xv.c(), H = xv.h(), W = xv.w();
  Tensor out(N, C, H, W);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* xp = &xv.data[(static_cast<std::size_t>(n) * C + c) * H * W];
      const double* k = &wv.data[static_cast<std::size_t>(c) * 9];
      double* op = &out.data[(static_cast<std::size_t>(n) * C + c) * H * W];
      double bias = bv.data[c];
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          double acc = bias;
          for (int dy = -1; dy <= 1; ++dy) {
            int yy = y + dy;
            if (yy < 0 || yy >= H) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              int xw = xx + dx;
              if (xw < 0 || xw >= W) continue;
              acc += k[(dy + 1) * 3 + (dx + 1)] * xp[yy * W + xw];
            }
          }
          op[y * W + xx] = acc;
        }
    }
  return emit(std::move(out), {x.id, w.id, b.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    const Tensor& xv = g.nodes_[n.inputs[0]].value;
    const Tensor& wv = g.nodes_[n.inputs[1]].value;
    const int N = xv.n(), C = xv.c(), H = xv.h(), W = xv.w();
    bool need_x = g.nodes_[n.inputs[0]].requires_grad;
    bool need_w = g.nodes_[n.inputs[1]].requires_grad;
    bool need_b = g.nodes_[n.inputs[2]].requires_grad;
    for (int nn = 0; nn < N; ++nn)
      for (int c = 0; c < C; ++c) {
        const double* gy = &n.grad.data[(static_cast<std::size_t>(nn) * C + c) * H * W];
        const double* xp = &xv.data[(static_cast<std::size_t>(nn) * C + c) * H * W];
        const double* k = &wv.data[static_cast<std::size_t>(c) * 9];
        double* gxp = need_x ? &g.grad_buf(n.inputs[0])
                                    .data[(static_cast<std::size_t>(nn) * C + c) * H * W]
                             : nullptr;
        double* gwp = need_w ? &g.grad_buf(n.inputs[1]).data[static_cast<std::size_t>(c) * 9]
                             : nullptr;
        double gb_acc = 0.0;
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx) {
            double gyv = gy[y * W + xx];
            if (need_b) gb_acc += gyv;
            if (gyv == 0.0) continue;
            for (int dy = -1; dy <= 1; ++dy) {
              int yy = y + dy;
              if (yy < 0 || yy >= H) continue;
              for (int dx = -1; dx <= 1; ++dx) {
                int xw = xx + dx;
                if (xw < 0 || xw >= W) continue;
                int ki = (dy + 1) * 3 + (dx + 1);
                if (need_x) gxp[yy * W + xw] += k[ki] * gyv;
                if (need_w) gwp[ki] += xp[yy * W + xw] * gyv;
              }
            }
          }
        if (need_b) g.grad_buf(n.inputs[2]).data[c] += gb_acc;
      }
  });
}

Value Graph::layer_norm(Value x, Value gamma, Value beta, double eps) {
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  const Tensor& xv = nodes_[x.id].value;
  const Tensor& gv = nodes_[gamma.id].value;
  const Tensor& bv = nodes_[beta.id].value;
  if (gv.c() != xv.c() || bv.c() != xv.c())
    throw DimensionError("layer_norm: affine params " + gv.shape_str() +
                         " do not match input " + xv.shape_str());
  const int N = xv.n(), C = xv.c(), H = xv.h(), W = xv.w();
  const int HW = H * W;
  Tensor out(N, C, H, W);
  // Per-position inverse stddev, saved for the backward pass.
  auto saved = std::make_shared<Tensor>(N, 2, H, W);  // ch0 = mean, ch1 = inv_std
  for (int n = 0; n < N; ++n)
    for (int p = 0; p < HW; ++p) {
      double mu = 0.0;
      for (int c = 0; c < C; ++c) mu += xv.data[(static_cast<std::size_t>(n) * C + c) * HW + p];
      mu /= C;
      double var = 0.0;
      for (int c = 0; c < C; ++c) {
        double d = xv.data[(static_cast<std::size_t>(n) * C + c) * HW + p] - mu;
        var += d * d;
      }
      var /= C;
      double inv = 1.0 / std::sqrt(var + eps);
      saved->data[(static_cast<std::size_t>(n) * 2 + 0) * HW + p] = mu;
      saved->data[(static_cast<std::size_t>(n) * 2 + 1) * HW + p] = inv;
      for (int c = 0; c < C; ++c) {
        double xh = (xv.data[(static_cast<std::size_t>(n) * C + c) * HW + p] - mu) * inv;
        out.data[(static_cast<std::size_t>(n) * C + c) * HW + p] = gv.data[c] * xh + bv.data[c];
      }
    }
  return emit(std::move(out), {x.id, gamma.id, beta.id}, [saved](Graph& g, int id) {
    Node& n = g.nodes_[id];
    const Tensor& xv = g.nodes_[n.inputs[0]].value;
    const Tensor& gv = g.nodes_[n.inputs[1]].value;
    const int N = xv.n(), C = xv.c(), HW = xv.h() * xv.w();
    bool need_x = g.nodes_[n.inputs[0]].requires_grad;
    bool need_g = g.nodes_[n.inputs[1]].requires_grad;
    bool need_b = g.nodes_[n.inputs[2]].requires_grad;
    for (int nn = 0; nn < N; ++nn)
      for (int p = 0; p < HW; ++p) {
        double mu = saved->data[(static_cast<std::size_t>(nn) * 2 + 0) * HW + p];
        double inv = saved->data[(static_cast<std::size_t>(nn) * 2 + 1) * HW + p];
        double m1 = 0.0, m2 = 0.0;
        for (int c = 0; c < C; ++c) {
          std::size_t i = (static_cast<std::size_t>(nn) * C + c) * HW + p;
          double xh = (xv.data[i] - mu) * inv;
          double gd = n.grad.data[i] * gv.data[c];
          m1 += gd;
          m2 += gd * xh;
          if (need_g) g.grad_buf(n.inputs[1]).data[c] += n.grad.data[i] * xh;
          if (need_b) g.grad_buf(n.inputs[2]).data[c] += n.grad.data[i];
        }
        if (!need_x) continue;
        m1 /= C;
        m2 /= C;
        Tensor& gx = g.grad_buf(n.inputs[0]);
        for (int c = 0; c < C; ++c) {
          std::size_t i = (static_cast<std::size_t>(nn) * C + c) * HW + p;
          double xh = (xv.data[i] - mu) * inv;
          gx.data[i] += inv * (n.grad.data[i] * gv.data[c] - m1 - xh * m2);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// structure

Value Graph::reshape(Value a, std::array<int, 4> shape) {
  const Tensor& x = nodes_[a.id].value;
  std::size_t m = static_cast<std::size_t>(shape[0]) * shape[1] * shape[2] * shape[3];
  if (m != x.numel())
    throw DimensionError("reshape: element count mismatch " + x.shape_str());
  Tensor out = x;
  out.shape = shape;
  return emit(std::move(out), {a.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += n.grad.data[i];
  });
}

namespace {

// Index correspondence between a high-resolution tensor (n,c,H,W) and its
// unshuffled counterpart (n, c*r*r, H/r, W/r). The low-res channel index
// encodes the (dy,dx) sub-pixel offset in row-major order.
template <typename Fn>
void for_each_shuffle_pair(const std::array<int, 4>& hi_shape, int r, Fn&& fn) {
  const int N = hi_shape[0], C = hi_shape[1], H = hi_shape[2], W = hi_shape[3];
  const int HO = H / r, WO = W / r;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          int co = c * r * r + (y % r) * r + (xx % r);
          std::size_t hi = ((static_cast<std::size_t>(n) * C + c) * H + y) * W + xx;
          std::size_t lo =
              ((static_cast<std::size_t>(n) * C * r * r + co) * HO + y / r) * WO + xx / r;
          fn(hi, lo);
        }
}

}  // namespace

Value Graph::pixel_unshuffle(Value a, int r) {
  const Tensor& x = nodes_[a.id].value;
  if (x.h() % r != 0 || x.w() % r != 0)
    throw DimensionError("pixel_unshuffle: spatial dims of " + x.shape_str() +
                         " not divisible by " + std::to_string(r));
  Tensor out(x.n(), x.c() * r * r, x.h() / r, x.w() / r);
  for_each_shuffle_pair(x.shape, r,
                        [&](std::size_t hi, std::size_t lo) { out.data[lo] = x.data[hi]; });
  return emit(std::move(out), {a.id}, [r](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for_each_shuffle_pair(ga.shape, r, [&](std::size_t hi, std::size_t lo) {
      ga.data[hi] += n.grad.data[lo];
    });
  });
}

Value Graph::pixel_shuffle(Value a, int r) {
  const Tensor& x = nodes_[a.id].value;
  if (x.c() % (r * r) != 0)
    throw DimensionError("pixel_shuffle: channels of " + x.shape_str() +
                         " not divisible by " + std::to_string(r * r));
  const int N = x.n(), C = x.c() / (r * r), H = x.h() * r, W = x.w() * r;
  Tensor out(N, C, H, W);
  for_each_shuffle_pair(out.shape, r,
                        [&](std::size_t hi, std::size_t lo) { out.data[hi] = x.data[lo]; });
  return emit(std::move(out), {a.id}, [r](Graph& g, int id) {
    Node& n = g.nodes_[id];
    if (!g.nodes_[n.inputs[0]].requires_grad) return;
    Tensor& ga = g.grad_buf(n.inputs[0]);
    for_each_shuffle_pair(n.grad.shape, r, [&](std::size_t hi, std::size_t lo) {
      ga.data[lo] += n.grad.data[hi];
    });
  });
}

Value Graph::concat_channels(Value a, Value b) {
  const Tensor& x = nodes_[a.id].value;
  const Tensor& y = nodes_[b.id].value;
  if (x.n() != y.n() || x.h() != y.h() || x.w() != y.w())
    throw DimensionError("concat_channels: incompatible shapes " + x.shape_str() + " vs " +
                         y.shape_str());
  const int N = x.n(), CA = x.c(), CB = y.c(), HW = x.h() * x.w();
  Tensor out(N, CA + CB, x.h(), x.w());
  for (int n = 0; n < N; ++n) {
    std::copy_n(&x.data[static_cast<std::size_t>(n) * CA * HW], static_cast<std::size_t>(CA) * HW,
                &out.data[static_cast<std::size_t>(n) * (CA + CB) * HW]);
    std::copy_n(&y.data[static_cast<std::size_t>(n) * CB * HW], static_cast<std::size_t>(CB) * HW,
                &out.data[(static_cast<std::size_t>(n) * (CA + CB) + CA) * HW]);
  }
  return emit(std::move(out), {a.id, b.id}, [](Graph& g, int id) {
    Node& n = g.nodes_[id];
    const Tensor& x = g.nodes_[n.inputs[0]].value;
    const Tensor& y = g.nodes_[n.inputs[1]].value;
    const int N = x.n(), CA = x.c(), CB = y.c(), HW = x.h() * x.w();
    for (int nn = 0; nn < N; ++nn) {
      if (g.nodes_[n.inputs[0]].requires_grad) {
        Tensor& ga = g.grad_buf(n.inputs[0]);
        const double* gp = &n.grad.data[static_cast<std::size_t>(nn) * (CA + CB) * HW];
        double* ap = &ga.data[static_cast<std::size_t>(nn) * CA * HW];
        for (std::size_t i = 0; i < static_cast<std::size_t>(CA) * HW; ++i) ap[i] += gp[i];
      }
      if (g.nodes_[n.inputs[1]].requires_grad) {
        Tensor& gb = g.grad_buf(n.inputs[1]);
        const double* gp = &n.grad.data[(static_cast<std::size_t>(nn) * (CA + CB) + CA) * HW];
        double* bp = &gb.data[static_cast<std::size_t>(nn) * CB * HW];
        for (std::size_t i = 0; i < static_cast<std::size_t>(CB) * HW; ++i) bp[i] += gp[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// selective scan

Value Graph::selective_scan(Value x, Value delta, Value a_diag, Value b_seq, Value c_seq) {
  const Tensor& xv = nodes_[x.id].value;
  const Tensor& dv = nodes_[delta.id].value;
  const Tensor& av = nodes_[a_diag.id].value;
  const Tensor& bv = nodes_[b_seq.id].value;
  const Tensor& cv = nodes_[c_seq.id].value;
  const int N = xv.n(), D = xv.c(), L = xv.w(), S = av.c();
  if (xv.h() != 1 || !dv.same_shape(xv))
    throw DimensionError("selective_scan: x/delta must be (n,d,1,L), got " + xv.shape_str() +
                         " and " + dv.shape_str());
  if (av.n() != D || av.h() != 1 || av.w() != 1)
    throw DimensionError("selective_scan: A must be (d,s,1,1), got " + av.shape_str());
  if (bv.n() != N || bv.c() != S || bv.h() != 1 || bv.w() != L || !cv.same_shape(bv))
    throw DimensionError("selective_scan: B/C must be (n,s,1,L), got " + bv.shape_str() +
                         " and " + cv.shape_str());
  for (double v : dv.data)
    if (!(v > 0.0)) throw ContractError("selective_scan: delta must be positive");

  Tensor out(N, D, 1, L);
  // Full state trajectory, needed by the adjoint recurrence.
  auto hsaved = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(N) * D * S * L, 0.0);
  std::vector<double> h(S);
  for (int n = 0; n < N; ++n)
    for (int d = 0; d < D; ++d) {
      std::fill(h.begin(), h.end(), 0.0);
      const double* xp = &xv.data[(static_cast<std::size_t>(n) * D + d) * L];
      const double* dp = &dv.data[(static_cast<std::size_t>(n) * D + d) * L];
      const double* ap = &av.data[static_cast<std::size_t>(d) * S];
      double* hp = &(*hsaved)[(static_cast<std::size_t>(n) * D + d) * S * L];
      double* op = &out.data[(static_cast<std::size_t>(n) * D + d) * L];
      for (int t = 0; t < L; ++t) {
        double dt = dp[t], xt = xp[t], y = 0.0;
        for (int s = 0; s < S; ++s) {
          double a = std::exp(dt * ap[s]);
          double bt = bv.data[(static_cast<std::size_t>(n) * S + s) * L + t];
          h[s] = a * h[s] + dt * bt * xt;
          hp[static_cast<std::size_t>(s) * L + t] = h[s];
          y += cv.data[(static_cast<std::size_t>(n) * S + s) * L + t] * h[s];
        }
        op[t] = y;
      }
    }

  return emit(std::move(out), {x.id, delta.id, a_diag.id, b_seq.id, c_seq.id},
              [hsaved](Graph& g, int id) {
    Node& n = g.nodes_[id];
    const Tensor& xv = g.nodes_[n.inputs[0]].value;
    const Tensor& dv = g.nodes_[n.inputs[1]].value;
    const Tensor& av = g.nodes_[n.inputs[2]].value;
    const Tensor& bv = g.nodes_[n.inputs[3]].value;
    const Tensor& cv = g.nodes_[n.inputs[4]].value;
    const int N = xv.n(), D = xv.c(), L = xv.w(), S = av.c();
    bool need[5];
    for (int i = 0; i < 5; ++i) need[i] = g.nodes_[n.inputs[i]].requires_grad;
    Tensor* gx = need[0] ? &g.grad_buf(n.inputs[0]) : nullptr;
    Tensor* gd = need[1] ? &g.grad_buf(n.inputs[1]) : nullptr;
    Tensor* ga = need[2] ? &g.grad_buf(n.inputs[2]) : nullptr;
    Tensor* gb = need[3] ? &g.grad_buf(n.inputs[3]) : nullptr;
    Tensor* gc = need[4] ? &g.grad_buf(n.inputs[4]) : nullptr;
    std::vector<double> gh(S);
    for (int nn = 0; nn < N; ++nn)
      for (int d = 0; d < D; ++d) {
        std::fill(gh.begin(), gh.end(), 0.0);
        const double* xp = &xv.data[(static_cast<std::size_t>(nn) * D + d) * L];
        const double* dp = &dv.data[(static_cast<std::size_t>(nn) * D + d) * L];
        const double* ap = &av.data[static_cast<std::size_t>(d) * S];
        const double* hp = &(*hsaved)[(static_cast<std::size_t>(nn) * D + d) * S * L];
        const double* gy = &n.grad.data[(static_cast<std::size_t>(nn) * D + d) * L];
        for (int t = L - 1; t >= 0; --t) {
          double dt = dp[t], xt = xp[t];
          double gdt = 0.0, gxt = 0.0;
          for (int s = 0; s < S; ++s) {
            std::size_t bi = (static_cast<std::size_t>(nn) * S + s) * L + t;
            double ht = hp[static_cast<std::size_t>(s) * L + t];
            gh[s] += cv.data[bi] * gy[t];
            if (need[4]) gc->data[bi] += gy[t] * ht;
            double a = std::exp(dt * ap[s]);
            double hprev = t > 0 ? hp[static_cast<std::size_t>(s) * L + t - 1] : 0.0;
            double bt = bv.data[bi];
            if (need[2]) ga->data[static_cast<std::size_t>(d) * S + s] += gh[s] * hprev * a * dt;
            gdt += gh[s] * (hprev * a * ap[s] + bt * xt);
            if (need[3]) gb->data[bi] += gh[s] * dt * xt;
            gxt += gh[s] * dt * bt;
            gh[s] *= a;  // propagate to t-1
          }
          if (need[1]) gd->data[(static_cast<std::size_t>(nn) * D + d) * L + t] += gdt;
          if (need[0]) gx->data[(static_cast<std::size_t>(nn) * D + d) * L + t] += gxt;
        }
      }
  });
}

// ---------------------------------------------------------------------------

void Graph::backward(Value loss) {
  if (nodes_[loss.id].value.numel() != 1)
    throw ContractError("backward: loss must be scalar, got " +
                        nodes_[loss.id].value.shape_str());
  grad_buf(loss.id).data[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.numel() == 0) continue;
    n.backward(*this, i);
  }
  // Ensure all reachable parameter leaves report a zero gradient rather than
  // an empty one.
  for (auto& [src, id] : param_ids_) (void)grad_buf(id);
}

double finite_difference_check(const std::function<Value(Graph&)>& f,
                               const std::vector<Tensor*>& params, double step,
                               int max_coords, std::uint64_t seed) {
  if (!(step > 0.0)) throw ContractError("finite_difference_check: step must be positive");
  Graph g;
  Value loss = f(g);
  g.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) analytic.push_back(g.grad_of(*p));

  double max_err = 0.0;
  Rng rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* p = params[pi];
    std::vector<std::size_t> coords;
    if (max_coords > 0 && p->numel() > static_cast<std::size_t>(max_coords)) {
      for (int k = 0; k < max_coords; ++k) coords.push_back(rng.uniform_int(p->numel()));
    } else {
      coords.resize(p->numel());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    }
    for (std::size_t i : coords) {
      double orig = p->data[i];
      p->data[i] = orig + step;
      Graph gp;
      double fp = gp.value(f(gp)).data[0];
      p->data[i] = orig - step;
      Graph gm;
      double fm = gm.value(f(gm)).data[0];
      p->data[i] = orig;
      double numeric = (fp - fm) / (2.0 * step);
      double a = analytic[pi].data[i];
      double err = std::fabs(a - numeric) / (std::fabs(a) + step);
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace ens
