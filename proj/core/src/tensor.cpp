#include "sherbet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace sherbet {

namespace {

constexpr double kBceClamp = 1e-12;
// Floor for the conformal factors 1 - |x|^2; points are projected to
// norm <= 1 - 1e-5 upstream, so this only guards against rounding.
constexpr double kBallFloor = 1e-10;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
  }
}

}  // namespace

Tensor::Tensor(int rows, int cols, double fill)
    : rows_(rows), cols_(cols), v_(static_cast<std::size_t>(rows) * cols, fill) {}

Tensor::Tensor(int rows, int cols, std::vector<double> values)
    : rows_(rows), cols_(cols), v_(std::move(values)) {
  if (static_cast<std::int64_t>(v_.size()) != size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "tensor init: " + shape_str() + " needs " + std::to_string(size()) +
                    " values, got " + std::to_string(v_.size()));
  }
}

Tensor Tensor::from(std::initializer_list<std::initializer_list<double>> rows) {
  int r = static_cast<int>(rows.size());
  int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
  Tensor t(r, c);
  int i = 0;
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) {
      throw Error(ErrorCode::ShapeMismatch, "ragged initializer list");
    }
    int j = 0;
    for (double x : row) t.at(i, j++) = x;
    ++i;
  }
  return t;
}

Tensor Tensor::row_vector(std::vector<double> values) {
  int n = static_cast<int>(values.size());
  return Tensor(1, n, std::move(values));
}

Tensor Tensor::col_vector(std::vector<double> values) {
  int n = static_cast<int>(values.size());
  return Tensor(n, 1, std::move(values));
}

Tensor Tensor::identity(int n) {
  Tensor t(n, n);
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::string Tensor::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Tensor::fill(double x) { std::fill(v_.begin(), v_.end(), x); }

double Tensor::squared_norm() const {
  double s = 0.0;
  for (double x : v_) s += x * x;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : v_) m = std::max(m, std::abs(x));
  return m;
}

bool Tensor::all_finite() const {
  for (double x : v_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::ShapeMismatch,
                "matmul: " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor out(a.rows(), b.cols());
  const int r = a.rows(), k = a.cols(), c = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i) {
    const double* arow = pa + static_cast<std::size_t>(i) * k;
    double* orow = po + static_cast<std::size_t>(i) * c;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = pb + static_cast<std::size_t>(l) * c;
      for (int j = 0; j < c; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// ---- Value / Tape ----

const Tensor& Value::val() const {
  return tape_->value(*this);
}

double Value::scalar() const {
  const Tensor& v = val();
  if (v.rows() != 1 || v.cols() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "scalar() on " + v.shape_str());
  }
  return v.at(0, 0);
}

int Tape::add_node(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Value Tape::param(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  int id = add_node(std::move(n));
  return Value(this, id);
}

Value Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = false;
  int id = add_node(std::move(n));
  return Value(this, id);
}

const Tensor& Tape::value(Value v) const { return node(v.id()).value; }

const Tensor& Tape::grad(Value v) const {
  const Node& n = node(v.id());
  if (n.grad.size() == 0) {
    static thread_local Tensor zero;
    zero = Tensor(n.value.rows(), n.value.cols());
    return zero;
  }
  return n.grad;
}

void Tape::backward(Value loss) {
  if (backward_done_) {
    throw Error(ErrorCode::ShapeMismatch, "backward() may run once per tape");
  }
  backward_done_ = true;
  Node& ln = node(loss.id());
  if (ln.value.rows() != 1 || ln.value.cols() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "backward from non-scalar " + ln.value.shape_str());
  }
  ln.grad = Tensor(1, 1, 1.0);
  ln.touched = true;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = node(id);
    if (!n.touched || !n.requires_grad || !n.backward) continue;
    n.backward(*this, id);
  }
}

Tensor& TapeOps::grad_buffer(Tape& t, int id) {
  Tape::Node& n = t.node(id);
  if (n.grad.size() == 0) n.grad = Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

const Tensor& TapeOps::value_of(Tape& t, int id) { return t.node(id).value; }

bool TapeOps::requires_grad(Tape& t, int id) { return t.node(id).requires_grad; }

void TapeOps::mark_touched(Tape& t, int id) { t.node(id).touched = true; }

Value make_node(Tape& tape, Tensor value, std::vector<int> inputs,
                std::function<void(Tape&, int)> backward) {
  Tape::Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  for (int in : n.inputs) {
    if (tape.node(in).requires_grad) {
      n.requires_grad = true;
      break;
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  int id = tape.add_node(std::move(n));
  return Value(&tape, id);
}

namespace {

// Propagates grad to input `in` via `fn(input_grad_buffer, own_grad)`.
template <typename Fn>
void backprop_to(Tape& t, int in, const Tensor& own_grad, Fn&& fn) {
  if (!TapeOps::requires_grad(t, in)) return;
  TapeOps::mark_touched(t, in);
  fn(TapeOps::grad_buffer(t, in), own_grad);
}

const Tensor& own_grad(Tape& t, int id) { return TapeOps::grad_buffer(t, id); }

void require_same_tape(Value a, Value b, const char* op) {
  if (a.tape() != b.tape()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": values from different tapes");
  }
}

}  // namespace

Value matmul(Value a, Value b) {
  require_same_tape(a, b, "matmul");
  Tensor out = matmul(a.val(), b.val());
  int ia = a.id(), ib = b.id();
  return make_node(*a.tape(), std::move(out), {ia, ib}, [ia, ib](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    const Tensor& av = TapeOps::value_of(t, ia);
    const Tensor& bv = TapeOps::value_of(t, ib);
    backprop_to(t, ia, g, [&](Tensor& ga, const Tensor& gg) {
      Tensor d = matmul(gg, transpose(bv));
      for (std::int64_t i = 0; i < d.size(); ++i) ga.data()[i] += d.data()[i];
    });
    backprop_to(t, ib, g, [&](Tensor& gb, const Tensor& gg) {
      Tensor d = matmul(transpose(av), gg);
      for (std::int64_t i = 0; i < d.size(); ++i) gb.data()[i] += d.data()[i];
    });
  });
}

Value add(Value a, Value b) {
  require_same_tape(a, b, "add");
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  bool broadcast_b = !av.same_shape(bv) && bv.rows() == 1 && bv.cols() == av.cols();
  bool broadcast_a = !av.same_shape(bv) && !broadcast_b && av.rows() == 1 && av.cols() == bv.cols();
  if (!av.same_shape(bv) && !broadcast_a && !broadcast_b) {
    throw Error(ErrorCode::ShapeMismatch, "add: " + av.shape_str() + " vs " + bv.shape_str());
  }
  const Tensor& big = broadcast_a ? bv : av;
  const Tensor& small = broadcast_a ? av : bv;
  Tensor out = big;
  if (broadcast_a || broadcast_b) {
    for (int i = 0; i < out.rows(); ++i)
      for (int j = 0; j < out.cols(); ++j) out.at(i, j) += small.at(0, j);
  } else {
    for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] += bv.data()[i];
  }
  int ia = a.id(), ib = b.id();
  bool a_is_row = broadcast_a;
  bool b_is_row = broadcast_b;
  return make_node(*a.tape(), std::move(out), {ia, ib},
                   [ia, ib, a_is_row, b_is_row](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    auto scatter = [&](int in, bool as_row) {
      backprop_to(t, in, g, [&](Tensor& gi, const Tensor& gg) {
        if (as_row) {
          for (int i = 0; i < gg.rows(); ++i)
            for (int j = 0; j < gg.cols(); ++j) gi.at(0, j) += gg.at(i, j);
        } else {
          for (std::int64_t i = 0; i < gg.size(); ++i) gi.data()[i] += gg.data()[i];
        }
      });
    };
    scatter(ia, a_is_row);
    scatter(ib, b_is_row);
  });
}

Value sub(Value a, Value b) {
  require_same_tape(a, b, "sub");
  check_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] -= b.val().data()[i];
  int ia = a.id(), ib = b.id();
  return make_node(*a.tape(), std::move(out), {ia, ib}, [ia, ib](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [](Tensor& gi, const Tensor& gg) {
      for (std::int64_t i = 0; i < gg.size(); ++i) gi.data()[i] += gg.data()[i];
    });
    backprop_to(t, ib, g, [](Tensor& gi, const Tensor& gg) {
      for (std::int64_t i = 0; i < gg.size(); ++i) gi.data()[i] -= gg.data()[i];
    });
  });
}

Value hadamard(Value a, Value b) {
  require_same_tape(a, b, "hadamard");
  check_same_shape(a.val(), b.val(), "hadamard");
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] *= b.val().data()[i];
  int ia = a.id(), ib = b.id();
  return make_node(*a.tape(), std::move(out), {ia, ib}, [ia, ib](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    const Tensor& av = TapeOps::value_of(t, ia);
    const Tensor& bv = TapeOps::value_of(t, ib);
    backprop_to(t, ia, g, [&](Tensor& gi, const Tensor& gg) {
      for (std::int64_t i = 0; i < gg.size(); ++i) gi.data()[i] += gg.data()[i] * bv.data()[i];
    });
    backprop_to(t, ib, g, [&](Tensor& gi, const Tensor& gg) {
      for (std::int64_t i = 0; i < gg.size(); ++i) gi.data()[i] += gg.data()[i] * av.data()[i];
    });
  });
}

Value scale(Value a, double s) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] *= s;
  int ia = a.id();
  return make_node(*a.tape(), std::move(out), {ia}, [ia, s](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [s](Tensor& gi, const Tensor& gg) {
      for (std::int64_t i = 0; i < gg.size(); ++i) gi.data()[i] += s * gg.data()[i];
    });
  });
}

Value row_scale(Value a, Value col) {
  require_same_tape(a, col, "row_scale");
  const Tensor& av = a.val();
  const Tensor& cv = col.val();
  if (cv.cols() != 1 || cv.rows() != av.rows()) {
    throw Error(ErrorCode::ShapeMismatch,
                "row_scale: " + av.shape_str() + " vs " + cv.shape_str());
  }
  Tensor out = av;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out.at(i, j) *= cv.at(i, 0);
  int ia = a.id(), ic = col.id();
  return make_node(*a.tape(), std::move(out), {ia, ic}, [ia, ic](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    const Tensor& av2 = TapeOps::value_of(t, ia);
    const Tensor& cv2 = TapeOps::value_of(t, ic);
    backprop_to(t, ia, g, [&](Tensor& gi, const Tensor& gg) {
      for (int i = 0; i < gg.rows(); ++i)
        for (int j = 0; j < gg.cols(); ++j) gi.at(i, j) += gg.at(i, j) * cv2.at(i, 0);
    });
    backprop_to(t, ic, g, [&](Tensor& gi, const Tensor& gg) {
      for (int i = 0; i < gg.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < gg.cols(); ++j) s += gg.at(i, j) * av2.at(i, j);
        gi.at(i, 0) += s;
      }
    });
  });
}

Value transpose(Value a) {
  int ia = a.id();
  return make_node(*a.tape(), transpose(a.val()), {ia}, [ia](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [](Tensor& gi, const Tensor& gg) {
      for (int i = 0; i < gg.rows(); ++i)
        for (int j = 0; j < gg.cols(); ++j) gi.at(j, i) += gg.at(i, j);
    });
  });
}

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Fwd, typename Dfn>
Value elementwise(Value a, Fwd fwd, Dfn dfn) {
  Tensor out = a.val();
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] = fwd(out.data()[i]);
  int ia = a.id();
  Tensor saved = out;  // derivative below reads the forward output
  return make_node(*a.tape(), std::move(out), {ia},
                   [ia, saved = std::move(saved), dfn](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    const Tensor& xin = TapeOps::value_of(t, ia);
    backprop_to(t, ia, g, [&](Tensor& gi, const Tensor& gg) {
      for (std::int64_t i = 0; i < gg.size(); ++i)
        gi.data()[i] += gg.data()[i] * dfn(xin.data()[i], saved.data()[i]);
    });
  });
}

}  // namespace

Value sigmoid(Value a) {
  return elementwise(a, [](double x) { return stable_sigmoid(x); },
                     [](double, double y) { return y * (1.0 - y); });
}

Value tanh_op(Value a) {
  return elementwise(a, [](double x) { return std::tanh(x); },
                     [](double, double y) { return 1.0 - y * y; });
}

Value relu(Value a) {
  return elementwise(a, [](double x) { return x > 0.0 ? x : 0.0; },
                     [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Value leaky_relu(Value a, double negative_slope) {
  return elementwise(a, [negative_slope](double x) { return x > 0.0 ? x : negative_slope * x; },
                     [negative_slope](double x, double) { return x > 0.0 ? 1.0 : negative_slope; });
}

namespace {

// axis 0 = softmax down each column, axis 1 = softmax along each row.
Value softmax_axis(Value a, int axis) {
  const Tensor& av = a.val();
  Tensor out(av.rows(), av.cols());
  int outer = axis == 1 ? av.rows() : av.cols();
  int inner = axis == 1 ? av.cols() : av.rows();
  auto get = [&](const Tensor& t, int o, int i) { return axis == 1 ? t.at(o, i) : t.at(i, o); };
  auto set = [&](Tensor& t, int o, int i, double x) {
    if (axis == 1) t.at(o, i) = x; else t.at(i, o) = x;
  };
  for (int o = 0; o < outer; ++o) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < inner; ++i) mx = std::max(mx, get(av, o, i));
    double z = 0.0;
    for (int i = 0; i < inner; ++i) z += std::exp(get(av, o, i) - mx);
    for (int i = 0; i < inner; ++i) set(out, o, i, std::exp(get(av, o, i) - mx) / z);
  }
  int ia = a.id();
  Tensor saved = out;
  return make_node(*a.tape(), std::move(out), {ia},
                   [ia, axis, saved = std::move(saved)](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [&](Tensor& gi, const Tensor& gg) {
      int outer = axis == 1 ? gg.rows() : gg.cols();
      int inner = axis == 1 ? gg.cols() : gg.rows();
      auto get = [&](const Tensor& tt, int o, int i) {
        return axis == 1 ? tt.at(o, i) : tt.at(i, o);
      };
      auto acc = [&](Tensor& tt, int o, int i, double x) {
        if (axis == 1) tt.at(o, i) += x; else tt.at(i, o) += x;
      };
      for (int o = 0; o < outer; ++o) {
        double dot = 0.0;
        for (int i = 0; i < inner; ++i) dot += get(gg, o, i) * get(saved, o, i);
        for (int i = 0; i < inner; ++i)
          acc(gi, o, i, get(saved, o, i) * (get(gg, o, i) - dot));
      }
    });
  });
}

}  // namespace

Value row_softmax(Value a) { return softmax_axis(a, 1); }
Value col_softmax(Value a) { return softmax_axis(a, 0); }

Value gather_rows(Value a, std::vector<int> idx) {
  const Tensor& av = a.val();
  Tensor out(static_cast<int>(idx.size()), av.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= av.rows()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "gather_rows: index " + std::to_string(idx[k]) + " out of " + av.shape_str());
    }
    for (int j = 0; j < av.cols(); ++j) out.at(static_cast<int>(k), j) = av.at(idx[k], j);
  }
  int ia = a.id();
  return make_node(*a.tape(), std::move(out), {ia},
                   [ia, idx = std::move(idx)](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [&](Tensor& gi, const Tensor& gg) {
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (int j = 0; j < gg.cols(); ++j) gi.at(idx[k], j) += gg.at(static_cast<int>(k), j);
    });
  });
}

Value gather_cols(Value a, std::vector<int> idx) {
  const Tensor& av = a.val();
  Tensor out(av.rows(), static_cast<int>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= av.cols()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "gather_cols: index " + std::to_string(idx[k]) + " out of " + av.shape_str());
    }
    for (int i = 0; i < av.rows(); ++i) out.at(i, static_cast<int>(k)) = av.at(i, idx[k]);
  }
  int ia = a.id();
  return make_node(*a.tape(), std::move(out), {ia},
                   [ia, idx = std::move(idx)](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [&](Tensor& gi, const Tensor& gg) {
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (int i = 0; i < gg.rows(); ++i) gi.at(i, idx[k]) += gg.at(i, static_cast<int>(k));
    });
  });
}

Value concat_rows(const std::vector<Value>& parts) {
  if (parts.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "concat_rows: empty part list");
  }
  int cols = parts[0].cols();
  int rows = 0;
  for (const Value& p : parts) {
    require_same_tape(parts[0], p, "concat_rows");
    if (p.cols() != cols) {
      throw Error(ErrorCode::ShapeMismatch,
                  "concat_rows: " + parts[0].val().shape_str() + " vs " + p.val().shape_str());
    }
    rows += p.rows();
  }
  Tensor out(rows, cols);
  std::vector<int> ids;
  std::vector<int> offsets;
  int at = 0;
  for (const Value& p : parts) {
    ids.push_back(p.id());
    offsets.push_back(at);
    const Tensor& pv = p.val();
    for (int i = 0; i < pv.rows(); ++i)
      for (int j = 0; j < cols; ++j) out.at(at + i, j) = pv.at(i, j);
    at += pv.rows();
  }
  return make_node(*parts[0].tape(), std::move(out), ids,
                   [ids, offsets](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      int rows_k = TapeOps::value_of(t, ids[k]).rows();
      int off = offsets[k];
      backprop_to(t, ids[k], g, [&](Tensor& gi, const Tensor& gg) {
        for (int i = 0; i < rows_k; ++i)
          for (int j = 0; j < gg.cols(); ++j) gi.at(i, j) += gg.at(off + i, j);
      });
    }
  });
}

Value reshape(Value a, int rows, int cols) {
  const Tensor& av = a.val();
  if (static_cast<std::int64_t>(rows) * cols != av.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "reshape: " + av.shape_str() + " to " + std::to_string(rows) + "x" +
                    std::to_string(cols));
  }
  Tensor out(rows, cols, av.values());
  int ia = a.id();
  return make_node(*a.tape(), std::move(out), {ia}, [ia](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [](Tensor& gi, const Tensor& gg) {
      for (std::int64_t i = 0; i < gg.size(); ++i) gi.data()[i] += gg.data()[i];
    });
  });
}

Value sum_all(Value a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.val().size(); ++i) s += a.val().data()[i];
  int ia = a.id();
  return make_node(*a.tape(), Tensor(1, 1, s), {ia}, [ia](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [](Tensor& gi, const Tensor& gg) {
      double s = gg.at(0, 0);
      for (std::int64_t i = 0; i < gi.size(); ++i) gi.data()[i] += s;
    });
  });
}

Value mean_all(Value a) {
  std::int64_t n = a.val().size();
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Value sum_rows(Value a) {
  const Tensor& av = a.val();
  Tensor out(1, av.cols());
  for (int i = 0; i < av.rows(); ++i)
    for (int j = 0; j < av.cols(); ++j) out.at(0, j) += av.at(i, j);
  int ia = a.id();
  return make_node(*a.tape(), std::move(out), {ia}, [ia](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [](Tensor& gi, const Tensor& gg) {
      for (int i = 0; i < gi.rows(); ++i)
        for (int j = 0; j < gi.cols(); ++j) gi.at(i, j) += gg.at(0, j);
    });
  });
}

Value row_logsumexp(Value a) {
  const Tensor& av = a.val();
  Tensor out(av.rows(), 1);
  Tensor soft(av.rows(), av.cols());
  for (int i = 0; i < av.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < av.cols(); ++j) mx = std::max(mx, av.at(i, j));
    double z = 0.0;
    for (int j = 0; j < av.cols(); ++j) z += std::exp(av.at(i, j) - mx);
    out.at(i, 0) = mx + std::log(z);
    for (int j = 0; j < av.cols(); ++j) soft.at(i, j) = std::exp(av.at(i, j) - mx) / z;
  }
  int ia = a.id();
  return make_node(*a.tape(), std::move(out), {ia},
                   [ia, soft = std::move(soft)](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [&](Tensor& gi, const Tensor& gg) {
      for (int i = 0; i < gi.rows(); ++i)
        for (int j = 0; j < gi.cols(); ++j) gi.at(i, j) += gg.at(i, 0) * soft.at(i, j);
    });
  });
}

Value dropout(Value a, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return a;
  if (rate >= 1.0) {
    throw Error(ErrorCode::ConfigError, "dropout rate must be < 1, got " + std::to_string(rate));
  }
  const Tensor& av = a.val();
  Tensor mask(av.rows(), av.cols());
  double keep = 1.0 - rate;
  for (std::int64_t i = 0; i < mask.size(); ++i)
    mask.data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  Tensor out = av;
  for (std::int64_t i = 0; i < out.size(); ++i) out.data()[i] *= mask.data()[i];
  int ia = a.id();
  return make_node(*a.tape(), std::move(out), {ia},
                   [ia, mask = std::move(mask)](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    backprop_to(t, ia, g, [&](Tensor& gi, const Tensor& gg) {
      for (std::int64_t i = 0; i < gg.size(); ++i) gi.data()[i] += gg.data()[i] * mask.data()[i];
    });
  });
}

Value bce_sum(Value probs, const Tensor& targets) {
  const Tensor& pv = probs.val();
  check_same_shape(pv, targets, "bce_sum");
  double loss = 0.0;
  for (std::int64_t i = 0; i < pv.size(); ++i) {
    double p = std::clamp(pv.data()[i], kBceClamp, 1.0 - kBceClamp);
    double y = targets.data()[i];
    loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  int ip = probs.id();
  return make_node(*probs.tape(), Tensor(1, 1, loss), {ip},
                   [ip, targets](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    const Tensor& pv2 = TapeOps::value_of(t, ip);
    backprop_to(t, ip, g, [&](Tensor& gi, const Tensor& gg) {
      double s = gg.at(0, 0);
      for (std::int64_t i = 0; i < gi.size(); ++i) {
        double p = std::clamp(pv2.data()[i], kBceClamp, 1.0 - kBceClamp);
        double y = targets.data()[i];
        gi.data()[i] += s * (p - y) / (p * (1.0 - p));
      }
    });
  });
}

namespace {

struct RowDistParts {
  double uu, vv, uv, alpha, beta, gamma;
};

RowDistParts rowdist_parts(const Tensor& x, const Tensor& y, int row) {
  RowDistParts p{};
  for (int j = 0; j < x.cols(); ++j) {
    double u = x.at(row, j), v = y.at(row, j);
    p.uu += u * u;
    p.vv += v * v;
    p.uv += u * v;
  }
  p.alpha = std::max(1.0 - p.uu, kBallFloor);
  p.beta = std::max(1.0 - p.vv, kBallFloor);
  double diff = p.uu - 2.0 * p.uv + p.vv;
  p.gamma = std::max(1.0 + 2.0 * diff / (p.alpha * p.beta), 1.0);
  return p;
}

}  // namespace

Value poincare_rowdist(Value x, Value y) {
  require_same_tape(x, y, "poincare_rowdist");
  const Tensor& xv = x.val();
  const Tensor& yv = y.val();
  check_same_shape(xv, yv, "poincare_rowdist");
  Tensor out(xv.rows(), 1);
  for (int i = 0; i < xv.rows(); ++i) {
    RowDistParts p = rowdist_parts(xv, yv, i);
    out.at(i, 0) = std::acosh(p.gamma);
  }
  int ix = x.id(), iy = y.id();
  return make_node(*x.tape(), std::move(out), {ix, iy}, [ix, iy](Tape& t, int id) {
    const Tensor& g = own_grad(t, id);
    const Tensor& xv2 = TapeOps::value_of(t, ix);
    const Tensor& yv2 = TapeOps::value_of(t, iy);
    auto scatter = [&](int in, bool wrt_x) {
      backprop_to(t, in, g, [&](Tensor& gi, const Tensor& gg) {
        for (int i = 0; i < xv2.rows(); ++i) {
          double go = gg.at(i, 0);
          if (go == 0.0) continue;
          RowDistParts p = rowdist_parts(xv2, yv2, i);
          double root = std::sqrt(p.gamma * p.gamma - 1.0);
          if (root == 0.0) continue;  // coincident points: subgradient 0
          if (wrt_x) {
            double c = 4.0 / (p.beta * root);
            double cu = c * (p.vv - 2.0 * p.uv + 1.0) / (p.alpha * p.alpha);
            double cv = -c / p.alpha;
            for (int j = 0; j < gi.cols(); ++j)
              gi.at(i, j) += go * (cu * xv2.at(i, j) + cv * yv2.at(i, j));
          } else {
            double c = 4.0 / (p.alpha * root);
            double cv = c * (p.uu - 2.0 * p.uv + 1.0) / (p.beta * p.beta);
            double cu = -c / p.beta;
            for (int j = 0; j < gi.cols(); ++j)
              gi.at(i, j) += go * (cv * yv2.at(i, j) + cu * xv2.at(i, j));
          }
        }
      });
    };
    scatter(ix, true);
    scatter(iy, false);
  });
}

// ---- ParamStore / TapeParams / grad_check ----

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  auto [it, inserted] = values_.emplace(name, std::move(init));
  if (!inserted) {
    throw Error(ErrorCode::ConfigError, "duplicate parameter '" + name + "'");
  }
  order_.push_back(name);
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) {
    throw Error(ErrorCode::ConfigError, "unknown parameter '" + name + "'");
  }
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) {
    throw Error(ErrorCode::ConfigError, "unknown parameter '" + name + "'");
  }
  return it->second;
}

bool ParamStore::has(const std::string& name) const { return values_.count(name) != 0; }

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [k, v] : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

TapeParams::TapeParams(Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {
  for (const std::string& name : store.names()) {
    registered_.emplace(name, tape.param(store.get(name)));
  }
}

Value TapeParams::operator[](const std::string& name) const {
  auto it = registered_.find(name);
  if (it == registered_.end()) {
    throw Error(ErrorCode::ConfigError, "parameter '" + name + "' not on tape");
  }
  return it->second;
}

std::map<std::string, Tensor> TapeParams::grads() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, value] : registered_) out.emplace(name, tape_->grad(value));
  return out;
}

GradCheckReport grad_check(const std::function<Value(Tape&, TapeParams&)>& build,
                           ParamStore& params, double step) {
  std::map<std::string, Tensor> analytic;
  {
    Tape tape;
    TapeParams tp(tape, params);
    Value loss = build(tape, tp);
    tape.backward(loss);
    analytic = tp.grads();
  }
  auto eval = [&]() {
    Tape tape;
    TapeParams tp(tape, params);
    return build(tape, tp).scalar();
  };
  GradCheckReport report;
  for (const std::string& name : params.names()) {
    Tensor& p = params.get(name);
    const Tensor& g = analytic.at(name);
    for (std::int64_t i = 0; i < p.size(); ++i) {
      double orig = p.data()[i];
      p.data()[i] = orig + step;
      double up = eval();
      p.data()[i] = orig - step;
      double down = eval();
      p.data()[i] = orig;
      double fd = (up - down) / (2.0 * step);
      double ref = std::max({std::abs(fd), std::abs(g.data()[i]), 1e-6});
      double rel = std::abs(fd - g.data()[i]) / ref;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_index = static_cast<int>(i);
      }
    }
  }
  return report;
}

}  // namespace sherbet
