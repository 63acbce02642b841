#pragma once

// Reverse-mode autodiff over dense matrices. One Tape records a single
// forward evaluation; backward() walks the op list in reverse. All values are
// B x k matrices with rows as the batch, which keeps every op a handful of
// GEMMs or elementwise kernels. This deliberately covers only the op set the
// models need, not arbitrary programs.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace vcnode::approx {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
class Tape {
 public:
  using NodeId = std::int32_t;

  NodeId constant(Mat<S> v) { return push(std::move(v), false); }
  NodeId leaf(Mat<S> v) { return push(std::move(v), true); }

  const Mat<S>& value(NodeId id) const { return nodes_[check(id)].value; }
  const Mat<S>& grad(NodeId id) const { return nodes_[check(id)].grad; }
  std::size_t size() const { return nodes_.size(); }

  // --- arithmetic ---------------------------------------------------------

  NodeId add(NodeId a, NodeId b) {
    same_shape(a, b, "add");
    NodeId id = push(value(a) + value(b), track(a, b));
    if (tracked(id)) set_back(id, [a, b, id](Tape& t) {
      const Mat<S>& g = t.nodes_[id].grad;
      t.accum(a, g);
      t.accum(b, g);
    });
    return id;
  }

  NodeId sub(NodeId a, NodeId b) {
    same_shape(a, b, "sub");
    NodeId id = push(value(a) - value(b), track(a, b));
    if (tracked(id)) set_back(id, [a, b, id](Tape& t) {
      const Mat<S>& g = t.nodes_[id].grad;
      t.accum(a, g);
      t.accum_neg(b, g);
    });
    return id;
  }

  NodeId hadamard(NodeId a, NodeId b) {
    same_shape(a, b, "hadamard");
    NodeId id = push(value(a).cwiseProduct(value(b)), track(a, b));
    if (tracked(id)) set_back(id, [a, b, id](Tape& t) {
      const Mat<S>& g = t.nodes_[id].grad;
      t.accum(a, g.cwiseProduct(t.value(b)));
      t.accum(b, g.cwiseProduct(t.value(a)));
    });
    return id;
  }

  NodeId scale(NodeId a, S c) {
    NodeId id = push(value(a) * c, track(a));
    if (tracked(id)) set_back(id, [a, c, id](Tape& t) { t.accum(a, t.nodes_[id].grad * c); });
    return id;
  }

  NodeId add_scalar(NodeId a, S c) {
    NodeId id = push((value(a).array() + c).matrix(), track(a));
    if (tracked(id)) set_back(id, [a, id](Tape& t) { t.accum(a, t.nodes_[id].grad); });
    return id;
  }

  NodeId matmul(NodeId a, NodeId b) {
    if (value(a).cols() != value(b).rows()) throw std::invalid_argument("matmul: shape");
    NodeId id = push(value(a) * value(b), track(a, b));
    if (tracked(id)) set_back(id, [a, b, id](Tape& t) {
      const Mat<S>& g = t.nodes_[id].grad;
      t.accum(a, g * t.value(b).transpose());
      t.accum(b, t.value(a).transpose() * g);
    });
    return id;
  }

  // x + broadcast of a 1 x n row (bias).
  NodeId add_rowvec(NodeId a, NodeId row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols())
      throw std::invalid_argument("add_rowvec: shape");
    NodeId id = push(value(a).rowwise() + value(row).row(0), track(a, row));
    if (tracked(id)) set_back(id, [a, row, id](Tape& t) {
      const Mat<S>& g = t.nodes_[id].grad;
      t.accum(a, g);
      t.accum(row, g.colwise().sum());
    });
    return id;
  }

  NodeId affine(NodeId x, NodeId w, NodeId b) { return add_rowvec(matmul(x, w), b); }

  // Rows scaled by a fixed per-row mask (not differentiated w.r.t. the mask).
  NodeId scale_rows(NodeId a, const Vec<S>& mask) {
    if (mask.size() != value(a).rows()) throw std::invalid_argument("scale_rows: shape");
    NodeId id = push(mask.asDiagonal() * value(a), track(a));
    if (tracked(id)) set_back(id, [a, mask, id](Tape& t) {
      t.accum(a, mask.asDiagonal() * t.nodes_[id].grad);
    });
    return id;
  }

  // --- nonlinearities ------------------------------------------------------

  NodeId relu(NodeId a) {
    NodeId id = push(value(a).cwiseMax(S(0)), track(a));
    if (record_relu_signs_)
      for (Eigen::Index i = 0; i < value(a).size(); ++i)
        relu_signs_.push_back(value(a).data()[i] > S(0) ? 1 : 0);
    if (tracked(id)) set_back(id, [a, id](Tape& t) {
      const Mat<S> m = (t.value(a).array() > S(0)).template cast<S>().matrix();
      t.accum(a, t.nodes_[id].grad.cwiseProduct(m));
    });
    return id;
  }

  NodeId tanh_(NodeId a) {
    NodeId id = push(value(a).array().tanh().matrix(), track(a));
    if (tracked(id)) set_back(id, [a, id](Tape& t) {
      const Mat<S>& y = t.value(id);
      t.accum(a, (t.nodes_[id].grad.array() * (S(1) - y.array().square())).matrix());
    });
    return id;
  }

  NodeId sigmoid(NodeId a) {
    NodeId id = push(((value(a).array() * S(-1)).exp() + S(1)).inverse().matrix(), track(a));
    if (tracked(id)) set_back(id, [a, id](Tape& t) {
      const Mat<S>& y = t.value(id);
      t.accum(a, (t.nodes_[id].grad.array() * y.array() * (S(1) - y.array())).matrix());
    });
    return id;
  }

  NodeId exp_(NodeId a) {
    NodeId id = push(value(a).array().exp().matrix(), track(a));
    if (tracked(id)) set_back(id, [a, id](Tape& t) {
      t.accum(a, t.nodes_[id].grad.cwiseProduct(t.value(id)));
    });
    return id;
  }

  NodeId square(NodeId a) {
    NodeId id = push(value(a).array().square().matrix(), track(a));
    if (tracked(id)) set_back(id, [a, id](Tape& t) {
      t.accum(a, S(2) * t.nodes_[id].grad.cwiseProduct(t.value(a)));
    });
    return id;
  }

  // Hard clamp; gradient passes only inside the interval.
  NodeId clamp(NodeId a, S lo, S hi) {
    NodeId id = push(value(a).cwiseMax(lo).cwiseMin(hi), track(a));
    if (tracked(id)) set_back(id, [a, lo, hi, id](Tape& t) {
      const auto& x = t.value(a).array();
      const Mat<S> inside = ((x > lo) && (x < hi)).template cast<S>().matrix();
      t.accum(a, t.nodes_[id].grad.cwiseProduct(inside));
    });
    return id;
  }

  // --- reductions and reshapes ---------------------------------------------

  NodeId sum(NodeId a) {
    Mat<S> v(1, 1);
    v(0, 0) = value(a).sum();
    NodeId id = push(std::move(v), track(a));
    if (tracked(id)) set_back(id, [a, id](Tape& t) {
      const S g = t.nodes_[id].grad(0, 0);
      auto& ga = t.grad_ref(a);
      ga.array() += g;
    });
    return id;
  }

  NodeId rows(NodeId a, Eigen::Index r0, Eigen::Index n) {
    if (r0 < 0 || r0 + n > value(a).rows()) throw std::invalid_argument("rows: range");
    NodeId id = push(value(a).middleRows(r0, n), track(a));
    if (tracked(id)) set_back(id, [a, r0, n, id](Tape& t) {
      t.grad_ref(a).middleRows(r0, n) += t.nodes_[id].grad;
    });
    return id;
  }

  NodeId cols(NodeId a, Eigen::Index c0, Eigen::Index n) {
    if (c0 < 0 || c0 + n > value(a).cols()) throw std::invalid_argument("cols: range");
    NodeId id = push(value(a).middleCols(c0, n), track(a));
    if (tracked(id)) set_back(id, [a, c0, n, id](Tape& t) {
      t.grad_ref(a).middleCols(c0, n) += t.nodes_[id].grad;
    });
    return id;
  }

  NodeId hcat(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("hcat: empty");
    Eigen::Index rows_n = value(parts[0]).rows(), cols_n = 0;
    bool tr = false;
    for (NodeId p : parts) {
      if (value(p).rows() != rows_n) throw std::invalid_argument("hcat: rows");
      cols_n += value(p).cols();
      tr = tr || tracked(p);
    }
    Mat<S> v(rows_n, cols_n);
    Eigen::Index at = 0;
    for (NodeId p : parts) {
      v.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
    }
    NodeId id = push(std::move(v), tr);
    if (tr) set_back(id, [parts, id](Tape& t) {
      Eigen::Index at2 = 0;
      for (NodeId p : parts) {
        const Eigen::Index w = t.value(p).cols();
        t.accum(p, t.nodes_[id].grad.middleCols(at2, w));
        at2 += w;
      }
    });
    return id;
  }

  NodeId vcat(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("vcat: empty");
    Eigen::Index cols_n = value(parts[0]).cols(), rows_n = 0;
    bool tr = false;
    for (NodeId p : parts) {
      if (value(p).cols() != cols_n) throw std::invalid_argument("vcat: cols");
      rows_n += value(p).rows();
      tr = tr || tracked(p);
    }
    Mat<S> v(rows_n, cols_n);
    Eigen::Index at = 0;
    for (NodeId p : parts) {
      v.middleRows(at, value(p).rows()) = value(p);
      at += value(p).rows();
    }
    NodeId id = push(std::move(v), tr);
    if (tr) set_back(id, [parts, id](Tape& t) {
      Eigen::Index at2 = 0;
      for (NodeId p : parts) {
        const Eigen::Index h = t.value(p).rows();
        t.accum(p, t.nodes_[id].grad.middleRows(at2, h));
        at2 += h;
      }
    });
    return id;
  }

  // --- per-row batched linear algebra ---------------------------------------
  // mats row i holds a (rows x cols) matrix flattened row-major; out row i is
  // M_i * x_i.

  NodeId batched_matvec(NodeId mats, NodeId xs, Eigen::Index out_rows, Eigen::Index in_cols) {
    const Eigen::Index batch = value(mats).rows();
    if (value(mats).cols() != out_rows * in_cols || value(xs).rows() != batch ||
        value(xs).cols() != in_cols)
      throw std::invalid_argument("batched_matvec: shape");
    Mat<S> out(batch, out_rows);
    for (Eigen::Index i = 0; i < batch; ++i)
      for (Eigen::Index r = 0; r < out_rows; ++r) {
        S acc = S(0);
        for (Eigen::Index c = 0; c < in_cols; ++c)
          acc += value(mats)(i, r * in_cols + c) * value(xs)(i, c);
        out(i, r) = acc;
      }
    NodeId id = push(std::move(out), track(mats, xs));
    if (tracked(id)) set_back(id, [mats, xs, out_rows, in_cols, id](Tape& t) {
      const Eigen::Index batch2 = t.value(mats).rows();
      const Mat<S>& g = t.nodes_[id].grad;
      auto& gm = t.grad_ref(mats);
      auto& gx = t.grad_ref(xs);
      for (Eigen::Index i = 0; i < batch2; ++i) {
        for (Eigen::Index r = 0; r < out_rows; ++r) {
          const S gr = g(i, r);
          for (Eigen::Index c = 0; c < in_cols; ++c) {
            gm(i, r * in_cols + c) += gr * t.value(xs)(i, c);
            gx(i, c) += gr * t.value(mats)(i, r * in_cols + c);
          }
        }
      }
    });
    return id;
  }

  // out row i = flatten_rowmajor(r_i v_i^T), shape B x (p*q).
  NodeId batched_outer(NodeId r, NodeId v) {
    const Eigen::Index batch = value(r).rows();
    const Eigen::Index p = value(r).cols(), q = value(v).cols();
    if (value(v).rows() != batch) throw std::invalid_argument("batched_outer: shape");
    Mat<S> out(batch, p * q);
    for (Eigen::Index i = 0; i < batch; ++i)
      for (Eigen::Index a = 0; a < p; ++a)
        for (Eigen::Index b = 0; b < q; ++b) out(i, a * q + b) = value(r)(i, a) * value(v)(i, b);
    NodeId id = push(std::move(out), track(r, v));
    if (tracked(id)) set_back(id, [r, v, p, q, id](Tape& t) {
      const Eigen::Index batch2 = t.value(r).rows();
      const Mat<S>& g = t.nodes_[id].grad;
      auto& gr = t.grad_ref(r);
      auto& gv = t.grad_ref(v);
      for (Eigen::Index i = 0; i < batch2; ++i)
        for (Eigen::Index a = 0; a < p; ++a)
          for (Eigen::Index b = 0; b < q; ++b) {
            const S gg = g(i, a * q + b);
            gr(i, a) += gg * t.value(v)(i, b);
            gv(i, b) += gg * t.value(r)(i, a);
          }
    });
    return id;
  }

  // --- backward -------------------------------------------------------------

  void backward(NodeId root) {
    if (value(root).size() != 1) throw std::invalid_argument("backward: root must be scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_ref(root)(0, 0) = S(1);
    for (auto i = static_cast<std::int64_t>(nodes_.size()) - 1; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.grad.size() != 0) n.back(*this);
    }
  }

  // Zero substitute for nodes never touched by backward.
  Mat<S> grad_or_zero(NodeId id) const {
    const auto& n = nodes_[check(id)];
    if (n.grad.size() != 0) return n.grad;
    return Mat<S>::Zero(n.value.rows(), n.value.cols());
  }

  void set_record_relu_signs(bool on) { record_relu_signs_ = on; }
  const std::vector<std::uint8_t>& relu_signs() const { return relu_signs_; }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    std::function<void(Tape&)> back;
    bool tracked = false;
  };

  std::vector<Node> nodes_;
  bool record_relu_signs_ = false;
  std::vector<std::uint8_t> relu_signs_;

  NodeId push(Mat<S> v, bool tracked) {
    Node n;
    n.value = std::move(v);
    n.tracked = tracked;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  std::size_t check(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw std::out_of_range("bad node id");
    return static_cast<std::size_t>(id);
  }

  bool tracked(NodeId id) const { return nodes_[check(id)].tracked; }
  bool track(NodeId a) const { return tracked(a); }
  bool track(NodeId a, NodeId b) const { return tracked(a) || tracked(b); }

  void set_back(NodeId id, std::function<void(Tape&)> fn) {
    nodes_[check(id)].back = std::move(fn);
  }

  void same_shape(NodeId a, NodeId b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  Mat<S>& grad_ref(NodeId id) {
    auto& n = nodes_[check(id)];
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Gradient only accumulates into tracked subtrees.
  template <typename Expr>
  void accum(NodeId id, const Expr& g) {
    if (!tracked(id)) return;
    grad_ref(id) += g;
  }
  template <typename Expr>
  void accum_neg(NodeId id, const Expr& g) {
    if (!tracked(id)) return;
    grad_ref(id) -= g;
  }
};

}  // namespace vcnode::approx
