#pragma once

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "angio/tensor.hpp"

namespace angio::nn {

// Named parameter blobs. Keys are module paths ("gen.enc.0.w"); the same keys
// appear in checkpoints and gradient maps.
struct ParamStore {
  std::map<std::string, Tensor> t;

  bool has(const std::string& name) const { return t.count(name) != 0; }
  Tensor& get(const std::string& name) {
    auto it = t.find(name);
    require(it != t.end(), "param", "unknown parameter " + name);
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = t.find(name);
    require(it != t.end(), "param", "unknown parameter " + name);
    return it->second;
  }
  Tensor& create(const std::string& name, Tensor init) {
    require(!has(name), "param", "duplicate parameter " + name);
    return t.emplace(name, std::move(init)).first->second;
  }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& kv : t) n += kv.second.numel();
    return n;
  }
  // Content fingerprint over names and raw values. Used by freeze contracts.
  std::uint64_t fingerprint() const;
};

using GradMap = std::map<std::string, Tensor>;

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. One tape per optimisation step (define-by-run); ops
// append nodes, backward() sweeps in reverse creation order. Single-threaded
// and allocation-order deterministic.
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var leaf(Tensor t, bool needs_grad = false);
  Var constant(Tensor t) { return leaf(std::move(t), false); }
  Var constant_scalar(double x) { return leaf(Tensor::scalar(x), false); }

  // Binds a parameter into the graph. Bindings are remembered so gradients
  // can be collected by name after backward(); the store itself is read-only.
  Var param(const ParamStore& store, const std::string& name, bool trainable = true);

  const Tensor& val(Var x) const { return nodes_[static_cast<std::size_t>(x.id)].value; }
  const Tensor& grad(Var x) const;
  bool needs_grad(Var x) const { return nodes_[static_cast<std::size_t>(x.id)].needs; }

  void backward(Var loss);
  // Adds this tape's parameter gradients into `out` (accumulating across
  // tapes/positions).
  void accumulate_param_grads(GradMap& out) const;

  std::size_t size() const { return nodes_.size(); }

  // --- op plumbing (used by the free-function ops) ---
  int push(Tensor value, bool needs, BackFn back);
  Tensor& grad_buffer(int id);       // lazily allocated, zero-initialised
  const Tensor& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool node_needs(int id) const { return nodes_[static_cast<std::size_t>(id)].needs; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched
    bool needs = false;
    BackFn back;
  };
  // deque keeps value/grad references stable while ops keep pushing nodes
  std::deque<Node> nodes_;
  std::vector<std::pair<std::string, int>> bindings_;
  bool grad_enabled_ = true;
  bool ran_backward_ = false;
};

// ---- elementwise / scalar ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var smul(Var a, double s);
Var sadd(Var a, double s);
Var scale_by(Var a, Var scalar);  // tensor * {1}-shaped scalar var
Var square(Var a);
Var vabs(Var a);
Var leaky_relu(Var a, double slope);
inline Var relu(Var a) { return leaky_relu(a, 0.0); }
Var sigmoid(Var a);
Var vtanh(Var a);

// ---- reductions ----
Var sum_all(Var a);   // -> {1}
Var mean_all(Var a);  // -> {1}

// ---- shape / structure ----
Var concat_channels(const std::vector<Var>& parts);  // {Ci,H,W} -> {sum Ci,H,W}
Var global_avg_pool(Var a);                          // {C,H,W} -> {C}
Var upsample_nearest2x(Var a);                       // {C,H,W} -> {C,2H,2W}
Var avg_pool2x(Var a);                               // {C,H,W} -> {C,H/2,W/2}
Var gather_locations(Var feat, std::vector<int> flat_spatial);  // {C,H,W} -> {N,C}

// ---- linear algebra ----
Var matmul(Var a, Var b);     // {M,K}x{K,N} -> {M,N}
Var matmul_nt(Var a, Var b);  // {M,K}x{N,K} -> {M,N} (B transposed)
Var add_bias_rows(Var a, Var b);  // {M,N} + {N}
Var l2_normalize_rows(Var a, double eps = 1e-10);  // {N,C}
Var softmax(Var a);                                // {N}

// ---- conv stack ----
Var conv2d(Var x, Var w, Var b, int stride, int pad);  // x{C,H,W}, w{O,C,K,K}, b{O}
Var instance_norm(Var x, double eps = 1e-5);           // {C,H,W}, no affine

// ---- losses (fused, numerically stable) ----
// InfoNCE over a similarity matrix: row i is the query, diagonal is the
// positive. Per-row terms are multiplied by weights[i] and averaged.
Var info_nce(Var sims, double temperature, Var weights);
// Softmax cross-entropy with dense target rows, mean over rows.
Var softmax_cross_entropy(Var logits, Var targets);
// Sigmoid BCE with optional per-element weights, mean over elements.
Var bce_with_logits(Var logits, Var targets);
Var bce_with_logits_weighted(Var logits, Var targets, Var weights);

// Central finite-difference gradient check of `f` w.r.t. each listed input.
// Returns the maximum relative error over all checked elements.
double gradcheck(
    const std::function<Var(Tape&, const std::vector<Var>&)>& f,
    const std::vector<Tensor>& inputs, double h = 1e-5);

}  // namespace angio::nn
