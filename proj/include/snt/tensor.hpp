#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "snt/error.hpp"

namespace snt {

// NCHW shape. Vectors (biases, gates) are carried as degenerate 4-d
// tensors, e.g. a per-channel bias is (1,C,1,1).
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

// Thread-local autograd switch. Forward passes under NoGradGuard build no
// graph, which keeps evaluation memory flat.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  bool prev_;
};

namespace testing {
// Fault-injection hook for the gradcheck negative control: when set, one
// backward path is deliberately perturbed so the checker must report failure.
inline bool& corrupt_backward() {
  thread_local bool f = false;
  return f;
}
}  // namespace testing

template <class T>
class TensorT;

template <class T>
struct OpNodeT {
  const char* op = "";
  std::vector<TensorT<T>> inputs;
  // Reads out's gradient buffer and accumulates into the inputs' buffers.
  std::function<void(const TensorT<T>& out)> backward;
};

template <class T>
struct TensorImplT {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<OpNodeT<T>> node;
};

template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape s, bool requires_grad = false) {
    TensorT t;
    t.impl_ = std::make_shared<TensorImplT<T>>();
    t.impl_->shape = s;
    t.impl_->data.assign(static_cast<std::size_t>(s.numel()), T(0));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorT full(Shape s, T value, bool requires_grad = false) {
    TensorT t = zeros(s, requires_grad);
    for (auto& v : t.impl_->data) v = value;
    return t;
  }

  static TensorT from_vector(Shape s, std::vector<T> values, bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != s.numel()) {
      throw ConfigError("tensor data length " + std::to_string(values.size()) +
                        " does not match shape " + s.str());
    }
    TensorT t;
    t.impl_ = std::make_shared<TensorImplT<T>>();
    t.impl_->shape = s;
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(T value) { return full(Shape{1, 1, 1, 1}, value); }

  bool valid() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t numel() const { return impl_->shape.numel(); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& vec() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T& at(int n, int c, int h, int w) { return impl_->data[offset(n, c, h, w)]; }
  T at(int n, int c, int h, int w) const { return impl_->data[offset(n, c, h, w)]; }

  T item() const {
    if (numel() != 1) throw ConfigError("item() requires a scalar tensor, got " + shape().str());
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rq) { impl_->requires_grad = rq; }

  bool has_grad() const { return !impl_->grad.empty(); }
  T* grad() { return ensure_grad(); }
  const std::vector<T>& grad_vec() const { return impl_->grad; }

  T* ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad.data();
  }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  void accumulate_grad(const T* g) {
    T* dst = ensure_grad();
    const std::size_t sz = impl_->data.size();
    for (std::size_t i = 0; i < sz; ++i) dst[i] += g[i];
  }

  std::shared_ptr<OpNodeT<T>>& node() { return impl_->node; }
  const std::shared_ptr<OpNodeT<T>>& node() const { return impl_->node; }

  TensorT detached() const {
    TensorT t;
    t.impl_ = std::make_shared<TensorImplT<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = false;
    return t;
  }

  // Reverse sweep from a scalar root. Gradients accumulate until cleared.
  void backward() {
    if (numel() != 1) {
      throw ConfigError("backward() requires a scalar root, got shape " + shape().str());
    }
    if (!impl_->requires_grad) return;

    std::vector<TensorT> topo;
    std::unordered_set<const TensorImplT<T>*> visited;
    build_topo(*this, visited, topo);

    // Intermediate gradients are per-pass scratch; only leaves (parameters,
    // inputs) accumulate across repeated backward calls.
    for (auto& t : topo) {
      if (t.node()) t.zero_grad();
    }
    ensure_grad()[0] += T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      auto& node = it->node();
      if (node && node->backward) node->backward(*it);
    }
  }

  const TensorImplT<T>* key() const { return impl_.get(); }

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    const Shape& s = impl_->shape;
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
  }

  static void build_topo(const TensorT& root, std::unordered_set<const TensorImplT<T>*>& visited,
                         std::vector<TensorT>& topo) {
    // Iterative post-order DFS; graphs can be deep for tall trees.
    struct Frame {
      TensorT t;
      std::size_t next_input = 0;
    };
    std::vector<Frame> stack;
    if (visited.insert(root.key()).second) stack.push_back({root, 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      auto& node = f.t.node();
      if (!node || f.next_input >= node->inputs.size()) {
        topo.push_back(f.t);
        stack.pop_back();
        continue;
      }
      TensorT child = node->inputs[f.next_input++];
      if (child.valid() && visited.insert(child.key()).second) {
        stack.push_back({child, 0});
      }
    }
  }

  std::shared_ptr<TensorImplT<T>> impl_;
};

namespace detail {

template <class T>
bool track_grad(std::initializer_list<TensorT<T>> inputs) {
  if (!GradMode::enabled()) return false;
  for (const auto& t : inputs) {
    if (t.valid() && t.requires_grad()) return true;
  }
  return false;
}

template <class T>
void attach(TensorT<T>& out, const char* op, std::vector<TensorT<T>> inputs,
            std::function<void(const TensorT<T>&)> backward) {
  out.set_requires_grad(true);
  auto node = std::make_shared<OpNodeT<T>>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.node() = node;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw ConfigError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const std::int64_t sz = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = pa[i] + pb[i];
  if (detail::track_grad<T>({a, b})) {
    TensorT<T> ac = a, bc = b;
    detail::attach<T>(out, "add", {a, b}, [ac, bc](const TensorT<T>& o) mutable {
      const std::vector<T>& g = o.grad_vec();
      if (ac.requires_grad()) ac.accumulate_grad(g.data());
      if (bc.requires_grad()) bc.accumulate_grad(g.data());
    });
  }
  return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw ConfigError("mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const std::int64_t sz = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = pa[i] * pb[i];
  if (detail::track_grad<T>({a, b})) {
    TensorT<T> ac = a, bc = b;
    detail::attach<T>(out, "mul", {a, b}, [ac, bc](const TensorT<T>& o) mutable {
      const std::vector<T>& g = o.grad_vec();
      const std::int64_t sz = o.numel();
      if (ac.requires_grad()) {
        T* ga = ac.ensure_grad();
        const T* pb = bc.data();
        for (std::int64_t i = 0; i < sz; ++i) ga[i] += pb[i] * g[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.ensure_grad();
        const T* pa = ac.data();
        for (std::int64_t i = 0; i < sz; ++i) gb[i] += pa[i] * g[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const std::int64_t sz = a.numel();
  const T* pa = a.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = pa[i] * s;
  if (detail::track_grad<T>({a})) {
    TensorT<T> ac = a;
    detail::attach<T>(out, "scale", {a}, [ac, s](const TensorT<T>& o) mutable {
      if (!ac.requires_grad()) return;
      const std::vector<T>& g = o.grad_vec();
      T* ga = ac.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const std::int64_t sz = x.numel();
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  if (detail::track_grad<T>({x})) {
    TensorT<T> xc = x;
    detail::attach<T>(out, "relu", {x}, [xc](const TensorT<T>& o) mutable {
      if (!xc.requires_grad()) return;
      const std::vector<T>& g = o.grad_vec();
      const T* px = xc.data();
      T* gx = xc.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (px[i] > T(0)) gx[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  const std::int64_t sz = x.numel();
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = T(1) / (T(1) + std::exp(-px[i]));
  if (detail::track_grad<T>({x})) {
    TensorT<T> xc = x;
    TensorT<T> saved = out;  // value needed for the derivative
    detail::attach<T>(out, "sigmoid", {x}, [xc, saved](const TensorT<T>& o) mutable {
      if (!xc.requires_grad()) return;
      const std::vector<T>& g = o.grad_vec();
      const T* ps = saved.data();
      T* gx = xc.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += ps[i] * (T(1) - ps[i]) * g[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> sum(const TensorT<T>& x) {
  T acc = T(0);
  const T* px = x.data();
  const std::int64_t sz = x.numel();
  for (std::int64_t i = 0; i < sz; ++i) acc += px[i];
  TensorT<T> out = TensorT<T>::scalar(acc);
  if (detail::track_grad<T>({x})) {
    TensorT<T> xc = x;
    detail::attach<T>(out, "sum", {x}, [xc](const TensorT<T>& o) mutable {
      if (!xc.requires_grad()) return;
      const T g = o.grad_vec()[0];
      T* gx = xc.ensure_grad();
      const std::int64_t sz = xc.numel();
      for (std::int64_t i = 0; i < sz; ++i) gx[i] += g;
    });
  }
  return out;
}

// Per-channel gate: out[n,c,h,w] = x[n,c,h,w] * gate[n,c,0,0].
template <class T>
TensorT<T> mul_channel_gate(const TensorT<T>& x, const TensorT<T>& gate) {
  const Shape xs = x.shape();
  const Shape gs = gate.shape();
  if (gs.n != xs.n || gs.c != xs.c || gs.h != 1 || gs.w != 1) {
    throw ConfigError("mul_channel_gate: gate shape " + gs.str() + " does not match input " +
                      xs.str());
  }
  TensorT<T> out = TensorT<T>::zeros(xs);
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const T* px = x.data();
  const T* pg = gate.data();
  T* po = out.data();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const T g = pg[n * xs.c + c];
      const std::int64_t base = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) po[base + i] = px[base + i] * g;
    }
  }
  if (detail::track_grad<T>({x, gate})) {
    TensorT<T> xc = x, gc = gate;
    detail::attach<T>(out, "mul_channel_gate", {x, gate}, [xc, gc, xs, plane](const TensorT<T>& o) mutable {
      const std::vector<T>& g = o.grad_vec();
      if (xc.requires_grad()) {
        T* gx = xc.ensure_grad();
        const T* pg = gc.data();
        for (int n = 0; n < xs.n; ++n) {
          for (int c = 0; c < xs.c; ++c) {
            const T gv = pg[n * xs.c + c];
            const std::int64_t base = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += gv * g[base + i];
          }
        }
      }
      if (gc.requires_grad()) {
        T* gg = gc.ensure_grad();
        const T* px = xc.data();
        for (int n = 0; n < xs.n; ++n) {
          for (int c = 0; c < xs.c; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
            T acc = T(0);
            for (std::int64_t i = 0; i < plane; ++i) acc += px[base + i] * g[base + i];
            gg[n * xs.c + c] += acc;
          }
        }
      }
    });
  }
  return out;
}

// Spatial mask broadcast over channels: out[n,c,h,w] = x[n,c,h,w] * m[n,0,h,w].
template <class T>
TensorT<T> mul_mask(const TensorT<T>& x, const TensorT<T>& mask) {
  const Shape xs = x.shape();
  const Shape ms = mask.shape();
  if (ms.n != xs.n || ms.c != 1 || ms.h != xs.h || ms.w != xs.w) {
    throw ConfigError("mul_mask: mask shape " + ms.str() + " does not match input " + xs.str());
  }
  TensorT<T> out = TensorT<T>::zeros(xs);
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const T* px = x.data();
  const T* pm = mask.data();
  T* po = out.data();
  for (int n = 0; n < xs.n; ++n) {
    const T* mplane = pm + n * plane;
    for (int c = 0; c < xs.c; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) po[base + i] = px[base + i] * mplane[i];
    }
  }
  if (detail::track_grad<T>({x, mask})) {
    TensorT<T> xc = x, mc = mask;
    detail::attach<T>(out, "mul_mask", {x, mask}, [xc, mc, xs, plane](const TensorT<T>& o) mutable {
      const std::vector<T>& g = o.grad_vec();
      if (xc.requires_grad()) {
        T* gx = xc.ensure_grad();
        const T* pm = mc.data();
        for (int n = 0; n < xs.n; ++n) {
          const T* mplane = pm + n * plane;
          for (int c = 0; c < xs.c; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += mplane[i] * g[base + i];
          }
        }
      }
      if (mc.requires_grad()) {
        T* gm = mc.ensure_grad();
        const T* px = xc.data();
        for (int n = 0; n < xs.n; ++n) {
          T* gplane = gm + n * plane;
          for (int c = 0; c < xs.c; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) gplane[i] += px[base + i] * g[base + i];
          }
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_channels(const TensorT<T>& x, int c0, int c1) {
  const Shape xs = x.shape();
  if (c0 < 0 || c1 > xs.c || c0 >= c1) {
    throw ConfigError("slice_channels: invalid range [" + std::to_string(c0) + "," +
                      std::to_string(c1) + ") for " + xs.str());
  }
  const Shape os{xs.n, c1 - c0, xs.h, xs.w};
  TensorT<T> out = TensorT<T>::zeros(os);
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const T* px = x.data();
  T* po = out.data();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = c0; c < c1; ++c) {
      const T* src = px + ((static_cast<std::int64_t>(n) * xs.c + c) * plane);
      T* dst = po + ((static_cast<std::int64_t>(n) * os.c + (c - c0)) * plane);
      std::copy(src, src + plane, dst);
    }
  }
  if (detail::track_grad<T>({x})) {
    TensorT<T> xc = x;
    detail::attach<T>(out, "slice_channels", {x}, [xc, c0, c1, xs, os, plane](const TensorT<T>& o) mutable {
      if (!xc.requires_grad()) return;
      const std::vector<T>& g = o.grad_vec();
      T* gx = xc.ensure_grad();
      for (int n = 0; n < xs.n; ++n) {
        for (int c = c0; c < c1; ++c) {
          const T* src = g.data() + ((static_cast<std::int64_t>(n) * os.c + (c - c0)) * plane);
          T* dst = gx + ((static_cast<std::int64_t>(n) * xs.c + c) * plane);
          for (std::int64_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_channels: empty input list");
  const Shape first = parts[0].shape();
  int total_c = 0;
  for (const auto& p : parts) {
    const Shape ps = p.shape();
    if (ps.n != first.n || ps.h != first.h || ps.w != first.w) {
      throw ConfigError("concat_channels: incompatible shapes " + first.str() + " vs " + ps.str());
    }
    total_c += ps.c;
  }
  const Shape os{first.n, total_c, first.h, first.w};
  TensorT<T> out = TensorT<T>::zeros(os);
  const std::int64_t plane = static_cast<std::int64_t>(first.h) * first.w;
  T* po = out.data();
  int c_base = 0;
  for (const auto& p : parts) {
    const Shape ps = p.shape();
    const T* src = p.data();
    for (int n = 0; n < ps.n; ++n) {
      for (int c = 0; c < ps.c; ++c) {
        const T* s = src + ((static_cast<std::int64_t>(n) * ps.c + c) * plane);
        T* d = po + ((static_cast<std::int64_t>(n) * os.c + c_base + c) * plane);
        std::copy(s, s + plane, d);
      }
    }
    c_base += ps.c;
  }
  bool track = false;
  if (GradMode::enabled()) {
    for (const auto& p : parts) track = track || p.requires_grad();
  }
  if (track) {
    std::vector<TensorT<T>> inputs = parts;
    detail::attach<T>(out, "concat_channels", inputs, [inputs, os, plane](const TensorT<T>& o) mutable {
      const std::vector<T>& g = o.grad_vec();
      int c_base = 0;
      for (auto& p : inputs) {
        const Shape ps = p.shape();
        if (p.requires_grad()) {
          T* gp = p.ensure_grad();
          for (int n = 0; n < ps.n; ++n) {
            for (int c = 0; c < ps.c; ++c) {
              const T* s = g.data() + ((static_cast<std::int64_t>(n) * os.c + c_base + c) * plane);
              T* d = gp + ((static_cast<std::int64_t>(n) * ps.c + c) * plane);
              for (std::int64_t i = 0; i < plane; ++i) d[i] += s[i];
            }
          }
        }
        c_base += ps.c;
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  const Shape xs = x.shape();
  TensorT<T> out = TensorT<T>::zeros(Shape{xs.n, xs.c, 1, 1});
  const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
  const T inv = T(1) / static_cast<T>(plane);
  const T* px = x.data();
  T* po = out.data();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
      T acc = T(0);
      for (std::int64_t i = 0; i < plane; ++i) acc += px[base + i];
      po[n * xs.c + c] = acc * inv;
    }
  }
  if (detail::track_grad<T>({x})) {
    TensorT<T> xc = x;
    detail::attach<T>(out, "global_avg_pool", {x}, [xc, xs, plane, inv](const TensorT<T>& o) mutable {
      if (!xc.requires_grad()) return;
      const std::vector<T>& g = o.grad_vec();
      T* gx = xc.ensure_grad();
      for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
          const T gv = g[n * xs.c + c] * inv;
          const std::int64_t base = (static_cast<std::int64_t>(n) * xs.c + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += gv;
        }
      }
    });
  }
  return out;
}

template <class T>
bool all_finite(const TensorT<T>& x) {
  const T* p = x.data();
  const std::int64_t sz = x.numel();
  for (std::int64_t i = 0; i < sz; ++i) {
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  }
  return true;
}

template <class T>
void check_finite(const TensorT<T>& x, const std::string& where) {
  if (!all_finite(x)) throw NumericError("non-finite value detected in " + where);
}

using Tensor = TensorT<float>;

}  // namespace snt
