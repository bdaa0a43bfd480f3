#include "angio/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

namespace angio::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::uint64_t ParamStore::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, tensor] : t) {
    h = fnv1a(name, h);
    h = fnv1a(tensor.v.data(), tensor.v.size() * sizeof(double), h);
  }
  return h;
}

Var Tape::leaf(Tensor t, bool needs_grad) {
  int id = push(std::move(t), needs_grad && grad_enabled_, nullptr);
  return Var{this, id};
}

Var Tape::param(const ParamStore& store, const std::string& name, bool trainable) {
  Var v = leaf(store.get(name), trainable);
  if (trainable && grad_enabled_) bindings_.emplace_back(name, v.id);
  return v;
}

int Tape::push(Tensor value, bool needs, BackFn back) {
  Node n;
  n.value = std::move(value);
  n.needs = needs && grad_enabled_;
  if (n.needs) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.v.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

const Tensor& Tape::grad(Var x) const {
  const Node& n = nodes_[static_cast<std::size_t>(x.id)];
  require(!n.grad.v.empty(), "autodiff", "gradient not computed for this node");
  return n.grad;
}

void Tape::backward(Var loss) {
  require(grad_enabled_, "autodiff", "backward on a no-grad tape");
  require(val(loss).numel() == 1, "autodiff", "backward target must be scalar");
  grad_buffer(loss.id).v[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs || !n.back || n.grad.v.empty()) continue;
    n.back(*this, i);
  }
  ran_backward_ = true;
}

void Tape::accumulate_param_grads(GradMap& out) const {
  require(ran_backward_, "autodiff", "collecting gradients before backward");
  for (const auto& [name, id] : bindings_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.v.empty()) continue;  // parameter unused by the loss
    auto it = out.find(name);
    if (it == out.end()) {
      out.emplace(name, n.grad);
    } else {
      for (std::size_t k = 0; k < n.grad.v.size(); ++k) it->second.v[k] += n.grad.v[k];
    }
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  require(a.tape == b.tape, "autodiff", "ops across different tapes");
  return *a.tape;
}

bool any_needs(Tape& t, std::initializer_list<Var> vs) {
  if (!t.grad_enabled()) return false;
  for (Var v : vs)
    if (t.node_needs(v.id)) return true;
  return false;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(t.val(a), t.val(b), "add");
  Tensor out = t.val(a);
  const Tensor& bv = t.val(b);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
  int ai = a.id, bi = b.id;
  int id = t.push(std::move(out), any_needs(t, {a, b}), [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.node_needs(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
    }
    if (tp.node_needs(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i];
    }
  });
  return Var{&t, id};
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(t.val(a), t.val(b), "sub");
  Tensor out = t.val(a);
  const Tensor& bv = t.val(b);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv.v[i];
  int ai = a.id, bi = b.id;
  int id = t.push(std::move(out), any_needs(t, {a, b}), [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.node_needs(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
    }
    if (tp.node_needs(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.v.size(); ++i) gb.v[i] -= g.v[i];
    }
  });
  return Var{&t, id};
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(t.val(a), t.val(b), "mul");
  Tensor out = t.val(a);
  const Tensor& bv = t.val(b);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv.v[i];
  int ai = a.id, bi = b.id;
  int id = t.push(std::move(out), any_needs(t, {a, b}), [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& av = tp.value_of(ai);
    const Tensor& bv2 = tp.value_of(bi);
    if (tp.node_needs(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * bv2.v[i];
    }
    if (tp.node_needs(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i] * av.v[i];
    }
  });
  return Var{&t, id};
}

Var smul(Var a, double s) {
  Tape& t = *a.tape;
  Tensor out = t.val(a);
  for (auto& x : out.v) x *= s;
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai, s](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * s;
  });
  return Var{&t, id};
}

Var sadd(Var a, double s) {
  Tape& t = *a.tape;
  Tensor out = t.val(a);
  for (auto& x : out.v) x += s;
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
  });
  return Var{&t, id};
}

Var scale_by(Var a, Var scalar) {
  Tape& t = same_tape(a, scalar);
  require(t.val(scalar).numel() == 1, "shape", "scale_by expects a {1} scalar var");
  const double s = t.val(scalar).v[0];
  Tensor out = t.val(a);
  for (auto& x : out.v) x *= s;
  int ai = a.id, si = scalar.id;
  int id = t.push(std::move(out), any_needs(t, {a, scalar}), [ai, si](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    const double sv = tp.value_of(si).v[0];
    const Tensor& av = tp.value_of(ai);
    if (tp.node_needs(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * sv;
    }
    if (tp.node_needs(si)) {
      double dot = 0.0;
      for (std::size_t i = 0; i < g.v.size(); ++i) dot += g.v[i] * av.v[i];
      tp.grad_buffer(si).v[0] += dot;
    }
  });
  return Var{&t, id};
}

Var square(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.val(a);
  for (auto& x : out.v) x *= x;
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& av = tp.value_of(ai);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += 2.0 * av.v[i] * g.v[i];
  });
  return Var{&t, id};
}

Var vabs(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.val(a);
  for (auto& x : out.v) x = std::abs(x);
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& av = tp.value_of(ai);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i) {
      const double s = av.v[i] > 0.0 ? 1.0 : (av.v[i] < 0.0 ? -1.0 : 0.0);
      ga.v[i] += g.v[i] * s;
    }
  });
  return Var{&t, id};
}

Var leaky_relu(Var a, double slope) {
  Tape& t = *a.tape;
  Tensor out = t.val(a);
  for (auto& x : out.v) x = x > 0.0 ? x : slope * x;
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai, slope](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& av = tp.value_of(ai);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i)
      ga.v[i] += g.v[i] * (av.v[i] > 0.0 ? 1.0 : slope);
  });
  return Var{&t, id};
}

Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.val(a);
  for (auto& x : out.v) {
    if (x >= 0.0) {
      x = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      x = e / (1.0 + e);
    }
  }
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& y = tp.value_of(self);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i)
      ga.v[i] += g.v[i] * y.v[i] * (1.0 - y.v[i]);
  });
  return Var{&t, id};
}

Var vtanh(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.val(a);
  for (auto& x : out.v) x = std::tanh(x);
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& y = tp.value_of(self);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.v.size(); ++i)
      ga.v[i] += g.v[i] * (1.0 - y.v[i] * y.v[i]);
  });
  return Var{&t, id};
}

// ---------------------------------------------------------------- reductions

Var sum_all(Var a) {
  Tape& t = *a.tape;
  Tensor out = Tensor::scalar(t.val(a).sum());
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai](Tape& tp, int self) {
    const double g = tp.grad_buffer(self).v[0];
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (auto& x : ga.v) x += g;
  });
  return Var{&t, id};
}

Var mean_all(Var a) {
  Tape& t = *a.tape;
  const double n = static_cast<double>(t.val(a).numel());
  Tensor out = Tensor::scalar(t.val(a).sum() / n);
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai, n](Tape& tp, int self) {
    const double g = tp.grad_buffer(self).v[0] / n;
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (auto& x : ga.v) x += g;
  });
  return Var{&t, id};
}

// ---------------------------------------------------------------- structure

Var concat_channels(const std::vector<Var>& parts) {
  require(!parts.empty(), "autodiff", "concat of zero tensors");
  Tape& t = *parts[0].tape;
  const int h = t.val(parts[0]).dim(1);
  const int w = t.val(parts[0]).dim(2);
  int ctot = 0;
  bool needs = false;
  for (Var p : parts) {
    const Tensor& pv = t.val(p);
    require(pv.ndim() == 3 && pv.dim(1) == h && pv.dim(2) == w, "shape",
            "concat_channels: incompatible spatial dims");
    ctot += pv.dim(0);
    needs = needs || (t.grad_enabled() && t.node_needs(p.id));
  }
  Tensor out({ctot, h, w});
  std::size_t off = 0;
  std::vector<int> ids;
  for (Var p : parts) {
    const Tensor& pv = t.val(p);
    std::memcpy(out.v.data() + off, pv.v.data(), pv.v.size() * sizeof(double));
    off += pv.v.size();
    ids.push_back(p.id);
  }
  int id = t.push(std::move(out), needs, [ids](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    std::size_t off2 = 0;
    for (int pid : ids) {
      const std::size_t n = tp.value_of(pid).v.size();
      if (tp.node_needs(pid)) {
        Tensor& gp = tp.grad_buffer(pid);
        for (std::size_t i = 0; i < n; ++i) gp.v[i] += g.v[off2 + i];
      }
      off2 += n;
    }
  });
  return Var{&t, id};
}

Var global_avg_pool(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  require(x.ndim() == 3, "shape", "global_avg_pool expects {C,H,W}");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out({c});
  for (int ci = 0; ci < c; ++ci) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += x.v[ci * hw + i];
    out.v[static_cast<std::size_t>(ci)] = s / static_cast<double>(hw);
  }
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai, c, hw](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (int ci = 0; ci < c; ++ci) {
      const double gv = g.v[static_cast<std::size_t>(ci)] / static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) ga.v[ci * hw + i] += gv;
    }
  });
  return Var{&t, id};
}

Var upsample_nearest2x(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  require(x.ndim() == 3, "shape", "upsample expects {C,H,W}");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out.v[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx] =
            x.v[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2];
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai, c, h, w](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          ga.v[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2] +=
              g.v[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx];
  });
  return Var{&t, id};
}

Var avg_pool2x(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  require(x.ndim() == 3 && x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0, "shape",
          "avg_pool2x expects even {C,H,W}");
  const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  Tensor out({c, h, w});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double s = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            s += x.v[(static_cast<std::size_t>(ci) * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx];
        out.v[(static_cast<std::size_t>(ci) * h + y) * w + xx] = s / 4.0;
      }
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai, c, h, w](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double gv = g.v[(static_cast<std::size_t>(ci) * h + y) * w + xx] / 4.0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              ga.v[(static_cast<std::size_t>(ci) * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx] += gv;
        }
  });
  return Var{&t, id};
}

Var gather_locations(Var feat, std::vector<int> flat_spatial) {
  Tape& t = *feat.tape;
  const Tensor& x = t.val(feat);
  require(x.ndim() == 3, "shape", "gather_locations expects {C,H,W}");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  const int n = static_cast<int>(flat_spatial.size());
  for (int idx : flat_spatial)
    require(idx >= 0 && static_cast<std::size_t>(idx) < hw, "autodiff",
            "gather location out of range");
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < c; ++ci)
      out.v[static_cast<std::size_t>(i) * c + ci] =
          x.v[ci * hw + static_cast<std::size_t>(flat_spatial[static_cast<std::size_t>(i)])];
  int fi = feat.id;
  int id = t.push(std::move(out), any_needs(t, {feat}),
                  [fi, c, hw, locs = std::move(flat_spatial)](Tape& tp, int self) {
                    const Tensor& g = tp.grad_buffer(self);
                    if (!tp.node_needs(fi)) return;
                    Tensor& gf = tp.grad_buffer(fi);
                    const int n2 = static_cast<int>(locs.size());
                    for (int i = 0; i < n2; ++i)
                      for (int ci = 0; ci < c; ++ci)
                        gf.v[ci * hw + static_cast<std::size_t>(locs[static_cast<std::size_t>(i)])] +=
                            g.v[static_cast<std::size_t>(i) * c + ci];
                  });
  return Var{&t, id};
}

// ------------------------------------------------------------ linear algebra

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(0), "shape",
          "matmul: " + av.shape_str() + " x " + bv.shape_str());
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  MapMat(out.v.data(), m, n) = CMapMat(av.v.data(), m, k) * CMapMat(bv.v.data(), k, n);
  int ai = a.id, bi = b.id;
  int id = t.push(std::move(out), any_needs(t, {a, b}), [ai, bi, m, k, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    CMapMat gm(g.v.data(), m, n);
    if (tp.node_needs(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      MapMat(ga.v.data(), m, k).noalias() +=
          gm * CMapMat(tp.value_of(bi).v.data(), k, n).transpose();
    }
    if (tp.node_needs(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      MapMat(gb.v.data(), k, n).noalias() +=
          CMapMat(tp.value_of(ai).v.data(), m, k).transpose() * gm;
    }
  });
  return Var{&t, id};
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(1), "shape",
          "matmul_nt: " + av.shape_str() + " x " + bv.shape_str() + "^T");
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor out({m, n});
  MapMat(out.v.data(), m, n) =
      CMapMat(av.v.data(), m, k) * CMapMat(bv.v.data(), n, k).transpose();
  int ai = a.id, bi = b.id;
  int id = t.push(std::move(out), any_needs(t, {a, b}), [ai, bi, m, k, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    CMapMat gm(g.v.data(), m, n);
    if (tp.node_needs(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      MapMat(ga.v.data(), m, k).noalias() += gm * CMapMat(tp.value_of(bi).v.data(), n, k);
    }
    if (tp.node_needs(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      MapMat(gb.v.data(), n, k).noalias() +=
          gm.transpose() * CMapMat(tp.value_of(ai).v.data(), m, k);
    }
  });
  return Var{&t, id};
}

Var add_bias_rows(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require(av.ndim() == 2 && bv.ndim() == 1 && av.dim(1) == bv.dim(0), "shape",
          "add_bias_rows: " + av.shape_str() + " + " + bv.shape_str());
  const int m = av.dim(0), n = av.dim(1);
  Tensor out = av;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.v[static_cast<std::size_t>(i) * n + j] += bv.v[static_cast<std::size_t>(j)];
  int ai = a.id, bi = b.id;
  int id = t.push(std::move(out), any_needs(t, {a, b}), [ai, bi, m, n](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.node_needs(ai)) {
      Tensor& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
    }
    if (tp.node_needs(bi)) {
      Tensor& gb = tp.grad_buffer(bi);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          gb.v[static_cast<std::size_t>(j)] += g.v[static_cast<std::size_t>(i) * n + j];
    }
  });
  return Var{&t, id};
}

Var l2_normalize_rows(Var a, double eps) {
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  require(x.ndim() == 2, "shape", "l2_normalize_rows expects {N,C}");
  const int n = x.dim(0), c = x.dim(1);
  Tensor out({n, c});
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      const double xv = x.v[static_cast<std::size_t>(i) * c + j];
      s += xv * xv;
    }
    const double nrm = std::max(std::sqrt(s), eps);
    norms[static_cast<std::size_t>(i)] = nrm;
    for (int j = 0; j < c; ++j)
      out.v[static_cast<std::size_t>(i) * c + j] = x.v[static_cast<std::size_t>(i) * c + j] / nrm;
  }
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}),
                  [ai, n, c, norms = std::move(norms)](Tape& tp, int self) {
                    const Tensor& g = tp.grad_buffer(self);
                    const Tensor& y = tp.value_of(self);
                    if (!tp.node_needs(ai)) return;
                    Tensor& ga = tp.grad_buffer(ai);
                    for (int i = 0; i < n; ++i) {
                      double dot = 0.0;
                      for (int j = 0; j < c; ++j)
                        dot += y.v[static_cast<std::size_t>(i) * c + j] *
                               g.v[static_cast<std::size_t>(i) * c + j];
                      const double inv = 1.0 / norms[static_cast<std::size_t>(i)];
                      for (int j = 0; j < c; ++j)
                        ga.v[static_cast<std::size_t>(i) * c + j] +=
                            inv * (g.v[static_cast<std::size_t>(i) * c + j] -
                                   y.v[static_cast<std::size_t>(i) * c + j] * dot);
                    }
                  });
  return Var{&t, id};
}

Var softmax(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.val(a);
  require(x.ndim() == 1, "shape", "softmax expects {N}");
  Tensor out = x;
  const double mx = x.max();
  double z = 0.0;
  for (auto& v : out.v) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : out.v) v /= z;
  int ai = a.id;
  int id = t.push(std::move(out), any_needs(t, {a}), [ai](Tape& tp, int self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& y = tp.value_of(self);
    if (!tp.node_needs(ai)) return;
    Tensor& ga = tp.grad_buffer(ai);
    double dot = 0.0;
    for (std::size_t i = 0; i < g.v.size(); ++i) dot += g.v[i] * y.v[i];
    for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += y.v[i] * (g.v[i] - dot);
  });
  return Var{&t, id};
}

// ------------------------------------------------------------------ conv2d

namespace {

void im2col(const Tensor& x, int k, int stride, int pad, int oh, int ow,
            std::vector<double>& cols) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  cols.assign(static_cast<std::size_t>(c) * k * k * oh * ow, 0.0);
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const std::size_t row = (static_cast<std::size_t>(ci) * k + ki) * k + kj;
        double* dst = cols.data() + row * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          const double* src = x.v.data() + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kj - pad;
            if (ix < 0 || ix >= w) continue;
            dst[static_cast<std::size_t>(oy) * ow + ox] = src[ix];
          }
        }
      }
}

void col2im_accumulate(const std::vector<double>& cols, int c, int h, int w, int k,
                       int stride, int pad, int oh, int ow, Tensor& dx) {
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const std::size_t row = (static_cast<std::size_t>(ci) * k + ki) * k + kj;
        const double* src = cols.data() + row * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          double* dst = dx.v.data() + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kj - pad;
            if (ix < 0 || ix >= w) continue;
            dst[ix] += src[static_cast<std::size_t>(oy) * ow + ox];
          }
        }
      }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  const Tensor& bv = t.val(b);
  require(xv.ndim() == 3 && wv.ndim() == 4, "shape", "conv2d expects x{C,H,W}, w{O,C,K,K}");
  require(wv.dim(1) == xv.dim(0), "shape",
          "conv2d channel mismatch: x" + xv.shape_str() + " w" + wv.shape_str());
  require(wv.dim(2) == wv.dim(3), "shape", "conv2d expects square kernels");
  const int c = xv.dim(0), h = xv.dim(1), ww = xv.dim(2);
  const int o = wv.dim(0), k = wv.dim(2);
  require(bv.ndim() == 1 && bv.dim(0) == o, "shape", "conv2d bias mismatch");
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (ww + 2 * pad - k) / stride + 1;
  require(oh > 0 && ow > 0, "shape", "conv2d output would be empty");

  auto cols = std::make_shared<std::vector<double>>();
  im2col(xv, k, stride, pad, oh, ow, *cols);
  const int ckk = c * k * k;
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;

  Tensor out({o, oh, ow});
  MapMat(out.v.data(), o, static_cast<int>(ohw)) =
      CMapMat(wv.v.data(), o, ckk) * CMapMat(cols->data(), ckk, static_cast<int>(ohw));
  for (int oi = 0; oi < o; ++oi) {
    const double bb = bv.v[static_cast<std::size_t>(oi)];
    for (std::size_t i = 0; i < ohw; ++i) out.v[oi * ohw + i] += bb;
  }

  const bool needs = any_needs(t, {x, w, b});
  if (!needs) cols.reset();  // forward-only tapes keep no column buffers
  int xi = x.id, wi = w.id, bi = b.id;
  int id = t.push(std::move(out), needs,
                  [xi, wi, bi, stride, pad, c, h, ww, o, k, oh, ow,
                   cols = std::move(cols)](Tape& tp, int self) {
                    const Tensor& g = tp.grad_buffer(self);
                    const Tensor& wv2 = tp.value_of(wi);
                    const int ckk2 = c * k * k;
                    const std::size_t ohw2 = static_cast<std::size_t>(oh) * ow;
                    CMapMat gm(g.v.data(), o, static_cast<int>(ohw2));

                    if (tp.node_needs(wi)) {
                      Tensor& gw = tp.grad_buffer(wi);
                      MapMat(gw.v.data(), o, ckk2).noalias() +=
                          gm * CMapMat(cols->data(), ckk2, static_cast<int>(ohw2)).transpose();
                    }
                    if (tp.node_needs(bi)) {
                      Tensor& gb = tp.grad_buffer(bi);
                      for (int oi = 0; oi < o; ++oi) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < ohw2; ++i) s += g.v[oi * ohw2 + i];
                        gb.v[static_cast<std::size_t>(oi)] += s;
                      }
                    }
                    if (tp.node_needs(xi)) {
                      std::vector<double> dcols(static_cast<std::size_t>(ckk2) * ohw2);
                      MapMat(dcols.data(), ckk2, static_cast<int>(ohw2)).noalias() =
                          CMapMat(wv2.v.data(), o, ckk2).transpose() * gm;
                      Tensor& gx = tp.grad_buffer(xi);
                      col2im_accumulate(dcols, c, h, ww, k, stride, pad, oh, ow, gx);
                    }
                  });
  return Var{&t, id};
}

Var instance_norm(Var x, double eps) {
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  require(xv.ndim() == 3, "shape", "instance_norm expects {C,H,W}");
  const int c = xv.dim(0);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out(xv.shape);
  std::vector<double> inv_std(static_cast<std::size_t>(c));
  for (int ci = 0; ci < c; ++ci) {
    const double* src = xv.v.data() + ci * hw;
    double mu = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mu += src[i];
    mu /= static_cast<double>(hw);
    double var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double d = src[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(hw);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(ci)] = inv;
    double* dst = out.v.data() + ci * hw;
    for (std::size_t i = 0; i < hw; ++i) dst[i] = (src[i] - mu) * inv;
  }
  int xi = x.id;
  int id = t.push(std::move(out), any_needs(t, {x}),
                  [xi, c, hw, inv_std = std::move(inv_std)](Tape& tp, int self) {
                    const Tensor& g = tp.grad_buffer(self);
                    const Tensor& y = tp.value_of(self);
                    if (!tp.node_needs(xi)) return;
                    Tensor& gx = tp.grad_buffer(xi);
                    for (int ci = 0; ci < c; ++ci) {
                      const double* gp = g.v.data() + ci * hw;
                      const double* yp = y.v.data() + ci * hw;
                      double mean_g = 0.0, mean_gy = 0.0;
                      for (std::size_t i = 0; i < hw; ++i) {
                        mean_g += gp[i];
                        mean_gy += gp[i] * yp[i];
                      }
                      mean_g /= static_cast<double>(hw);
                      mean_gy /= static_cast<double>(hw);
                      const double inv = inv_std[static_cast<std::size_t>(ci)];
                      double* dst = gx.v.data() + ci * hw;
                      for (std::size_t i = 0; i < hw; ++i)
                        dst[i] += inv * (gp[i] - mean_g - yp[i] * mean_gy);
                    }
                  });
  return Var{&t, id};
}

// ------------------------------------------------------------------ losses

Var info_nce(Var sims, double temperature, Var weights) {
  Tape& t = same_tape(sims, weights);
  const Tensor& s = t.val(sims);
  const Tensor& w = t.val(weights);
  require(s.ndim() == 2 && s.dim(0) == s.dim(1), "shape", "info_nce expects square sims");
  const int n = s.dim(0);
  require(w.ndim() == 1 && w.dim(0) == n, "shape", "info_nce weights mismatch");
  require(n >= 2, "patchnce", "need at least 2 sampled locations for negatives");
  require(temperature > 0.0, "patchnce", "temperature must be positive");

  // Stable per-row -log softmax at the diagonal.
  std::vector<double> row_loss(static_cast<std::size_t>(n));
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = s.v.data() + static_cast<std::size_t>(i) * n;
    double mx = row[0] / temperature;
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j] / temperature);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(row[j] / temperature - mx);
    const double lse = mx + std::log(z);
    row_loss[static_cast<std::size_t>(i)] = lse - row[i] / temperature;
    total += w.v[static_cast<std::size_t>(i)] * row_loss[static_cast<std::size_t>(i)];
  }
  Tensor out = Tensor::scalar(total / n);

  int si = sims.id, wi = weights.id;
  int id = t.push(std::move(out), any_needs(t, {sims, weights}),
                  [si, wi, n, temperature, row_loss = std::move(row_loss)](Tape& tp, int self) {
                    const double g = tp.grad_buffer(self).v[0];
                    const Tensor& s2 = tp.value_of(si);
                    const Tensor& w2 = tp.value_of(wi);
                    if (tp.node_needs(si)) {
                      Tensor& gs = tp.grad_buffer(si);
                      for (int i = 0; i < n; ++i) {
                        const double* row = s2.v.data() + static_cast<std::size_t>(i) * n;
                        double mx = row[0] / temperature;
                        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j] / temperature);
                        double z = 0.0;
                        for (int j = 0; j < n; ++j) z += std::exp(row[j] / temperature - mx);
                        const double scale = g * w2.v[static_cast<std::size_t>(i)] /
                                             (static_cast<double>(n) * temperature);
                        for (int j = 0; j < n; ++j) {
                          const double p = std::exp(row[j] / temperature - mx) / z;
                          gs.v[static_cast<std::size_t>(i) * n + j] +=
                              scale * (p - (i == j ? 1.0 : 0.0));
                        }
                      }
                    }
                    if (tp.node_needs(wi)) {
                      Tensor& gw = tp.grad_buffer(wi);
                      for (int i = 0; i < n; ++i)
                        gw.v[static_cast<std::size_t>(i)] +=
                            g * row_loss[static_cast<std::size_t>(i)] / n;
                    }
                  });
  return Var{&t, id};
}

Var softmax_cross_entropy(Var logits, Var targets) {
  Tape& t = same_tape(logits, targets);
  const Tensor& l = t.val(logits);
  const Tensor& y = t.val(targets);
  check_same_shape(l, y, "softmax_cross_entropy");
  require(l.ndim() == 2, "shape", "softmax_cross_entropy expects {B,C}");
  const int b = l.dim(0), c = l.dim(1);
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    const double* row = l.v.data() + static_cast<std::size_t>(i) * c;
    const double* ty = y.v.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < c; ++j) total += ty[j] * (lse - row[j]);
  }
  Tensor out = Tensor::scalar(total / b);
  int li = logits.id, yi = targets.id;
  int id = t.push(std::move(out), any_needs(t, {logits, targets}),
                  [li, yi, b, c](Tape& tp, int self) {
                    const double g = tp.grad_buffer(self).v[0] / b;
                    const Tensor& l2 = tp.value_of(li);
                    const Tensor& y2 = tp.value_of(yi);
                    if (!tp.node_needs(li)) return;
                    Tensor& gl = tp.grad_buffer(li);
                    for (int i = 0; i < b; ++i) {
                      const double* row = l2.v.data() + static_cast<std::size_t>(i) * c;
                      const double* ty = y2.v.data() + static_cast<std::size_t>(i) * c;
                      double mx = row[0];
                      for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                      double z = 0.0;
                      for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
                      double tsum = 0.0;
                      for (int j = 0; j < c; ++j) tsum += ty[j];
                      for (int j = 0; j < c; ++j) {
                        const double p = std::exp(row[j] - mx) / z;
                        gl.v[static_cast<std::size_t>(i) * c + j] += g * (tsum * p - ty[j]);
                      }
                    }
                  });
  return Var{&t, id};
}

namespace {

Var bce_impl(Var logits, Var targets, Var* weights) {
  Tape& t = same_tape(logits, targets);
  const Tensor& z = t.val(logits);
  const Tensor& y = t.val(targets);
  check_same_shape(z, y, "bce_with_logits");
  if (weights) check_same_shape(z, t.val(*weights), "bce_with_logits weights");
  const std::size_t n = z.v.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double zz = z.v[i];
    const double elem = std::max(zz, 0.0) - zz * y.v[i] + std::log1p(std::exp(-std::abs(zz)));
    total += weights ? t.val(*weights).v[i] * elem : elem;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  int zi = logits.id, yi = targets.id, wi = weights ? weights->id : -1;
  bool needs = weights ? any_needs(t, {logits, targets, *weights})
                       : any_needs(t, {logits, targets});
  int id = t.push(std::move(out), needs, [zi, yi, wi, n](Tape& tp, int self) {
    const double g = tp.grad_buffer(self).v[0] / static_cast<double>(n);
    const Tensor& z2 = tp.value_of(zi);
    const Tensor& y2 = tp.value_of(yi);
    if (tp.node_needs(zi)) {
      Tensor& gz = tp.grad_buffer(zi);
      for (std::size_t i = 0; i < n; ++i) {
        const double zz = z2.v[i];
        const double sig = zz >= 0.0 ? 1.0 / (1.0 + std::exp(-zz))
                                     : std::exp(zz) / (1.0 + std::exp(zz));
        const double wv = wi >= 0 ? tp.value_of(wi).v[i] : 1.0;
        gz.v[i] += g * wv * (sig - y2.v[i]);
      }
    }
    if (wi >= 0 && tp.node_needs(wi)) {
      Tensor& gw = tp.grad_buffer(wi);
      for (std::size_t i = 0; i < n; ++i) {
        const double zz = z2.v[i];
        const double elem =
            std::max(zz, 0.0) - zz * y2.v[i] + std::log1p(std::exp(-std::abs(zz)));
        gw.v[i] += g * elem;
      }
    }
  });
  return Var{&t, id};
}

}  // namespace

Var bce_with_logits(Var logits, Var targets) { return bce_impl(logits, targets, nullptr); }

Var bce_with_logits_weighted(Var logits, Var targets, Var weights) {
  return bce_impl(logits, targets, &weights);
}

// ---------------------------------------------------------------- gradcheck

double gradcheck(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                 const std::vector<Tensor>& inputs, double h) {
  // Analytic pass.
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& in : inputs) vars.push_back(tape.leaf(in, true));
    Var loss = f(tape, vars);
    tape.backward(loss);
    for (Var v : vars) analytic.push_back(tape.grad(v));
  }

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const Tensor& in : xs) vars.push_back(tape.leaf(in, false));
    return tape.val(f(tape, vars)).v[0];
  };

  std::vector<Tensor> numeric = inputs;
  std::vector<Tensor> probe = inputs;
  double scale = 0.0;  // dominant gradient magnitude across all inputs
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].v.size(); ++i) {
      const double x0 = probe[t].v[i];
      const double step = h * std::max(1.0, std::abs(x0));
      probe[t].v[i] = x0 + step;
      const double fp = eval(probe);
      probe[t].v[i] = x0 - step;
      const double fm = eval(probe);
      probe[t].v[i] = x0;
      numeric[t].v[i] = (fp - fm) / (2.0 * step);
      scale = std::max({scale, std::abs(analytic[t].v[i]), std::abs(numeric[t].v[i])});
    }
  }
  // per-element relative error with a floor at 1% of the dominant gradient
  // component, so rounding noise on saturated near-zero entries does not
  // drown the measurement
  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].v.size(); ++i) {
      const double a = analytic[t].v[i];
      const double n = numeric[t].v[i];
      const double denom = std::max({1e-8, std::abs(a) + std::abs(n), 0.01 * scale});
      worst = std::max(worst, std::abs(a - n) / denom);
    }
  }
  return worst;
}

}  // namespace angio::nn
