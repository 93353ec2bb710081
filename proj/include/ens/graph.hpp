#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "ens/tensor.hpp"

namespace ens {

class Graph;

// Lightweight handle into a Graph's tape.
struct Value {
  Graph* g = nullptr;
  int id = -1;
};

// Reverse-mode tape. Nodes are appended in execution order, so the record is
// topologically sorted by construction; backward() walks it in reverse.
class Graph {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    std::function<void(Graph&, int)> backward;  // empty for leaves
    const Tensor* param_src = nullptr;          // set for parameter leaves
    bool requires_grad = false;
  };

  // Parameter leaf: gradient is accumulated and retrievable via grad_of().
  // Leafing the same storage twice returns the same node.
  Value param(Tensor& t);

  // Data leaf. requires_grad=true makes the input itself differentiable
  // (used by the ERF probe).
  Value input(const Tensor& t, bool requires_grad = false);

  const Tensor& value(Value v) const { return nodes_[v.id].value; }
  const Tensor& grad(Value v) const { return nodes_[v.id].grad; }

  // Gradient of a parameter leaf, addressed by its storage.
  const Tensor& grad_of(const Tensor& param) const;
  bool has_param(const Tensor& param) const {
    return param_ids_.count(&param) > 0;
  }

  std::size_t size() const { return nodes_.size(); }

  // --- elementwise / arithmetic ---
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value hadamard(Value a, Value b);
  Value scale(Value a, double s);
  Value gelu(Value a);
  Value silu(Value a);
  Value sigmoid(Value a);
  Value softplus(Value a);
  Value abs(Value a);

  // Multiply/add with broadcast: b must be (1|n, 1|c, 1, 1) against a = (n,c,h,w).
  Value mul_bcast(Value a, Value b);
  Value add_bcast(Value a, Value b);

  // Reverse along the innermost axis (self-inverse permutation).
  Value reverse_lastaxis(Value a);

  // --- reductions ---
  Value sum(Value a);   // -> (1,1,1,1)
  Value mean(Value a);  // -> (1,1,1,1)
  Value global_avg_pool(Value a);  // (n,c,h,w) -> (n,c,1,1)
  Value softmax_lastaxis(Value a);

  // --- linear algebra / conv ---
  // a: (n,g,r,k), b: (n,g,k,c) -> (n,g,r,c)
  Value matmul(Value a, Value b);
  Value transpose_hw(Value a);
  Value conv_1x1(Value x, Value w, Value b);       // w: (co,ci,1,1), b: (1,co,1,1)
  Value depthwise_conv_3x3(Value x, Value w, Value b);  // w: (c,1,3,3), pad 1
  Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-6);

  // --- structure ---
  Value reshape(Value a, std::array<int, 4> shape);
  Value pixel_unshuffle(Value a, int r = 2);
  Value pixel_shuffle(Value a, int r = 2);
  Value concat_channels(Value a, Value b);

  // Zero-order-hold selective scan.
  //   x, delta: (n,d,1,L); a_diag: (d,s,1,1); b_seq, c_seq: (n,s,1,L)
  // h_t = exp(delta_t * A) (.) h_{t-1} + delta_t * B_t * x_t,  y_t = C_t . h_t
  Value selective_scan(Value x, Value delta, Value a_diag, Value b_seq, Value c_seq);

  // Reverse-mode sweep from a scalar loss node.
  void backward(Value loss);

 private:
  Value emit(Tensor value, std::vector<int> inputs,
             std::function<void(Graph&, int)> backward);
  Tensor& grad_buf(int id);

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, int> param_ids_;
};

// Max relative error between analytic gradients and central finite
// differences over the given parameters. `f` must rebuild the computation on
// a fresh graph each call and return the scalar loss node; the parameters it
// reads are the listed storages. If max_coords > 0, only that many randomly
// chosen coordinates per parameter are probed (seeded, deterministic).
double finite_difference_check(const std::function<Value(Graph&)>& f,
                               const std::vector<Tensor*>& params,
                               double step = 1e-4, int max_coords = 0,
                               std::uint64_t seed = 0);

}  // namespace ens
