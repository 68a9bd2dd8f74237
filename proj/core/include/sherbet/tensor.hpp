#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

#include "sherbet/error.hpp"
#include "sherbet/rng.hpp"

namespace sherbet {

// Dense row-major matrix of doubles. Vectors are 1xN or Nx1 tensors.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols, double fill = 0.0);
  Tensor(int rows, int cols, std::vector<double> values);

  static Tensor from(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row_vector(std::vector<double> values);
  static Tensor col_vector(std::vector<double> values);
  static Tensor identity(int n);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::int64_t size() const { return static_cast<std::int64_t>(rows_) * cols_; }

  double& at(int r, int c) { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
  double at(int r, int c) const { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const;

  void fill(double x);
  double squared_norm() const;
  double max_abs() const;
  bool all_finite() const;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> v_;
};

// Plain (non-tape) dense kernels, shared by forward ops and test oracles.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

class Tape;

// Handle to a node on a tape. Cheap to copy; invalidated when the tape dies.
class Value {
 public:
  Value() = default;
  const Tensor& val() const;
  int rows() const { return val().rows(); }
  int cols() const { return val().cols(); }
  double scalar() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Value(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in construction order, which is a
// topological order, so one reverse sweep visits each node exactly once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value param(Tensor value);     // leaf that receives gradient
  Value constant(Tensor value);  // leaf without gradient

  // Backpropagate from a 1x1 loss node. May be called once per tape.
  void backward(Value loss);

  const Tensor& value(Value v) const;
  const Tensor& grad(Value v) const;  // all-zero if the loss does not reach v

  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend Value make_node(Tape& tape, Tensor value, std::vector<int> inputs,
                         std::function<void(Tape&, int)> backward);
  friend class ValueAccess;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool touched = false;  // gradient reached this node during backward
    std::vector<int> inputs;
    std::function<void(Tape&, int)> backward;  // (tape, own id)
  };

  int add_node(Node n);
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;

  friend class TapeOps;
};

// Gradient accumulation helper used by op backward closures.
class TapeOps {
 public:
  static Tensor& grad_buffer(Tape& t, int id);
  static const Tensor& value_of(Tape& t, int id);
  static bool requires_grad(Tape& t, int id);
  static void mark_touched(Tape& t, int id);
};

Value make_node(Tape& tape, Tensor value, std::vector<int> inputs,
                std::function<void(Tape&, int)> backward);

// ---- primitives ----
Value matmul(Value a, Value b);
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value hadamard(Value a, Value b);
Value scale(Value a, double s);
// Multiplies row i of `a` by scalar column entry col(i,0).
Value row_scale(Value a, Value col);
Value transpose(Value a);
Value sigmoid(Value a);
Value tanh_op(Value a);
Value relu(Value a);
Value leaky_relu(Value a, double negative_slope = 0.01);
Value row_softmax(Value a);
Value col_softmax(Value a);
Value gather_rows(Value a, std::vector<int> idx);
Value gather_cols(Value a, std::vector<int> idx);
Value concat_rows(const std::vector<Value>& parts);
Value reshape(Value a, int rows, int cols);
Value sum_all(Value a);    // 1x1
Value mean_all(Value a);   // 1x1
Value sum_rows(Value a);   // 1 x cols
Value row_logsumexp(Value a);  // rows x 1
// Inverted dropout: scales kept entries by 1/(1-rate) when training.
Value dropout(Value a, double rate, Rng& rng, bool training);
// Sum of elementwise binary cross-entropy against constant targets in {0,1};
// probabilities are clamped to [1e-12, 1 - 1e-12].
Value bce_sum(Value probs, const Tensor& targets);
// Row-wise Poincare distances d(x_i, y_i) between matching rows; Nx1 output.
Value poincare_rowdist(Value x, Value y);

// ---- parameters ----

// Named tensors in insertion order (deterministic iteration for optimizers).
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::size_t total_elements() const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, Tensor> values_;
};

// Registers every parameter of a store on a tape; build functions look the
// registered Values up by name.
class TapeParams {
 public:
  TapeParams(Tape& tape, ParamStore& store);
  Value operator[](const std::string& name) const;
  const std::vector<std::string>& names() const { return store_->names(); }
  // Gradients after backward, keyed like the store.
  std::map<std::string, Tensor> grads() const;

 private:
  Tape* tape_;
  ParamStore* store_;
  std::map<std::string, Value> registered_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
};

// Compares tape gradients of a scalar-valued builder against central finite
// differences over every element of every parameter in the store.
GradCheckReport grad_check(const std::function<Value(Tape&, TapeParams&)>& build,
                           ParamStore& params, double step = 1e-5);

}  // namespace sherbet
