#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "specfed/error.hpp"
#include "specfed/rng.hpp"

namespace specfed {

// Reverse-mode automatic differentiation over dense 64-bit arrays.
//
// The graph is define-by-run: every op that touches a differentiable input
// creates a fresh interior node holding a backward closure, so the tape is
// rebuilt on each forward pass and a node is consumed by exactly one
// backward() call. Calling backward() twice over the same interior nodes is
// a contract error. Leaf tensors (parameters, constants) persist across
// passes; their gradients accumulate until sgd_step() or zero_grad().
//
// Tensors are value-like handles onto shared storage. A graph is built and
// differentiated by a single thread; distinct graphs are independent, so
// concurrent workers each running their own forward/backward never interact.

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until needed; same length as value once allocated
    bool requires_grad = false;
    bool backward_done = false;  // interior nodes only
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    bool is_leaf() const { return parents.empty(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Gradient recording can be suspended (evaluation passes); ops then produce
// detached constants.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

struct NoGradGuard {
    bool previous;
    NoGradGuard() : previous(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ContractError("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
        node_ = std::make_shared<detail::TensorNode>();
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
        if (requires_grad) node_->ensure_grad();
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        return Tensor(shape, std::vector<double>(shape_numel(shape), v), requires_grad);
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    // Gaussian-initialized parameter, stddev `scale`, gradient storage attached.
    static Tensor randn(Shape shape, std::mt19937_64& g, double scale = 1.0, bool requires_grad = true) {
        std::vector<double> d(shape_numel(shape));
        for (double& x : d) x = gaussian(g, 0.0, scale);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.size() == 2 ? node_->shape[0] : 1; }
    std::size_t cols() const { return node_->shape.size() == 2 ? node_->shape[1] : node_->shape[0]; }

    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& mutable_data() {
        if (!node_->is_leaf())
            throw ContractError("only leaf tensors may be mutated in place");
        return node_->value;
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw ContractError("gradient requested but never populated");
        return node_->grad;
    }
    void zero_grad() {
        if (node_->requires_grad) {
            node_->ensure_grad();
            std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
        }
    }

    double item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    // Identity in the differentiation graph.
    const void* node_id() const { return node_.get(); }

    // Same values, no graph history.
    Tensor detached() const { return Tensor(node_->shape, node_->value, false); }

    detail::TensorNode* node() const { return node_.get(); }
    std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }

private:
    friend Tensor make_op_result(Shape shape, std::vector<double> value,
                                 std::vector<Tensor> parents,
                                 std::function<void(detail::TensorNode&)> backprop);
    std::shared_ptr<detail::TensorNode> node_;
};

inline Tensor make_op_result(Shape shape, std::vector<double> value,
                             std::vector<Tensor> parents,
                             std::function<void(detail::TensorNode&)> backprop) {
    Tensor out(std::move(shape), std::move(value), false);
    bool track = detail::grad_mode();
    bool any_grad = false;
    if (track)
        for (const Tensor& p : parents) any_grad = any_grad || p.requires_grad();
    if (track && any_grad) {
        out.node_->requires_grad = true;
        out.node_->parents.reserve(parents.size());
        for (const Tensor& p : parents) out.node_->parents.push_back(p.node_ptr());
        out.node_->backprop = std::move(backprop);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

namespace detail {
inline void check_matrix(const Tensor& t, const char* who) {
    if (t.shape().size() != 2)
        throw DimensionError(std::string(who) + " expects a matrix, got " + shape_str(t.shape()));
}
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(who) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_matrix(a, "matmul lhs");
    detail::check_matrix(b, "matmul rhs");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = &bv[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_op_result({m, n}, std::move(out), {a, b},
                          [m, k, n, an, bn](detail::TensorNode& node) {
                              const auto& g = node.grad;
                              if (an->requires_grad) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t p = 0; p < k; ++p) {
                                          double acc = 0.0;
                                          for (std::size_t j = 0; j < n; ++j)
                                              acc += g[i * n + j] * bn->value[p * n + j];
                                          an->grad[i * k + p] += acc;
                                      }
                              }
                              if (bn->requires_grad) {
                                  bn->ensure_grad();
                                  for (std::size_t p = 0; p < k; ++p)
                                      for (std::size_t j = 0; j < n; ++j) {
                                          double acc = 0.0;
                                          for (std::size_t i = 0; i < m; ++i)
                                              acc += an->value[i * k + p] * g[i * n + j];
                                          bn->grad[p * n + j] += acc;
                                      }
                              }
                          });
}

inline Tensor transpose(const Tensor& x) {
    detail::check_matrix(x, "transpose");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
    auto xn = x.node_ptr();
    return make_op_result({n, m}, std::move(out), {x}, [m, n, xn](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) xn->grad[i * n + j] += node.grad[j * m + i];
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode& node) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] += node.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode& node) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] -= node.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode& node) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] += node.grad[i] * an->value[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
    auto xn = x.node_ptr();
    return make_op_result(x.shape(), std::move(out), {x}, [c, xn](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) xn->grad[i] += node.grad[i] * c;
    });
}

inline Tensor add_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + c;
    auto xn = x.node_ptr();
    return make_op_result(x.shape(), std::move(out), {x}, [xn](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) xn->grad[i] += node.grad[i];
    });
}

// Broadcast a 1xN (or length-N) row over every row of an MxN matrix.
inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    detail::check_matrix(m, "add_rowvec lhs");
    const std::size_t rows = m.shape()[0], cols = m.shape()[1];
    if (v.numel() != cols)
        throw DimensionError("add_rowvec: row " + shape_str(v.shape()) + " does not span " +
                             shape_str(m.shape()));
    std::vector<double> out(m.numel());
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = m.data()[i * cols + j] + v.data()[j];
    auto mn = m.node_ptr();
    auto vn = v.node_ptr();
    return make_op_result(m.shape(), std::move(out), {m, v},
                          [rows, cols, mn, vn](detail::TensorNode& node) {
                              if (mn->requires_grad) {
                                  mn->ensure_grad();
                                  for (std::size_t i = 0; i < node.grad.size(); ++i) mn->grad[i] += node.grad[i];
                              }
                              if (vn->requires_grad) {
                                  vn->ensure_grad();
                                  for (std::size_t i = 0; i < rows; ++i)
                                      for (std::size_t j = 0; j < cols; ++j)
                                          vn->grad[j] += node.grad[i * cols + j];
                              }
                          });
}

inline Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
    detail::check_matrix(m, "mul_rowvec lhs");
    const std::size_t rows = m.shape()[0], cols = m.shape()[1];
    if (v.numel() != cols)
        throw DimensionError("mul_rowvec: row " + shape_str(v.shape()) + " does not span " +
                             shape_str(m.shape()));
    std::vector<double> out(m.numel());
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = m.data()[i * cols + j] * v.data()[j];
    auto mn = m.node_ptr();
    auto vn = v.node_ptr();
    return make_op_result(m.shape(), std::move(out), {m, v},
                          [rows, cols, mn, vn](detail::TensorNode& node) {
                              if (mn->requires_grad) {
                                  mn->ensure_grad();
                                  for (std::size_t i = 0; i < rows; ++i)
                                      for (std::size_t j = 0; j < cols; ++j)
                                          mn->grad[i * cols + j] += node.grad[i * cols + j] * vn->value[j];
                              }
                              if (vn->requires_grad) {
                                  vn->ensure_grad();
                                  for (std::size_t i = 0; i < rows; ++i)
                                      for (std::size_t j = 0; j < cols; ++j)
                                          vn->grad[j] += node.grad[i * cols + j] * mn->value[i * cols + j];
                              }
                          });
}

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    auto xn = x.node_ptr();
    return make_op_result(x.shape(), std::move(out), {x}, [xn](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i)
            if (xn->value[i] > 0.0) xn->grad[i] += node.grad[i];
    });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double z = x.data()[i];
        out[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    auto xn = x.node_ptr();
    auto sn = std::make_shared<std::vector<double>>(out);
    return make_op_result(x.shape(), std::move(out), {x}, [xn, sn](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            const double s = (*sn)[i];
            xn->grad[i] += node.grad[i] * s * (1.0 - s);
        }
    });
}

// Row-stabilized softmax: rows become probability vectors.
inline Tensor softmax_rows(const Tensor& x) {
    detail::check_matrix(x, "softmax_rows");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < rows; ++i) {
        const double* in = &x.data()[i * cols];
        double* o = &out[i * cols];
        double mx = in[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < cols; ++j) o[j] /= sum;
    }
    auto xn = x.node_ptr();
    auto yv = std::make_shared<std::vector<double>>(out);
    return make_op_result(x.shape(), std::move(out), {x},
                          [rows, cols, xn, yv](detail::TensorNode& node) {
                              if (!xn->requires_grad) return;
                              xn->ensure_grad();
                              for (std::size_t i = 0; i < rows; ++i) {
                                  const double* y = &(*yv)[i * cols];
                                  const double* g = &node.grad[i * cols];
                                  double dot = 0.0;
                                  for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
                                  for (std::size_t j = 0; j < cols; ++j)
                                      xn->grad[i * cols + j] += (g[j] - dot) * y[j];
                              }
                          });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows on empty list");
    const std::size_t cols = parts[0].cols();
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
        detail::check_matrix(p, "concat_rows");
        if (p.shape()[1] != cols)
            throw DimensionError("concat_rows: column mismatch, " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(p.shape()));
        rows += p.shape()[0];
    }
    std::vector<double> out;
    out.reserve(rows * cols);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::shared_ptr<detail::TensorNode>> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node_ptr());
    return make_op_result({rows, cols}, std::move(out), parts, [nodes](detail::TensorNode& node) {
        std::size_t off = 0;
        for (auto& pn : nodes) {
            const std::size_t n = pn->value.size();
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) pn->grad[i] += node.grad[off + i];
            }
            off += n;
        }
    });
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::check_matrix(x, "slice_rows");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (begin > end || end > rows)
        throw ContractError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") invalid for " + shape_str(x.shape()));
    std::vector<double> out(x.data().begin() + begin * cols, x.data().begin() + end * cols);
    auto xn = x.node_ptr();
    return make_op_result({end - begin, cols}, std::move(out), {x},
                          [begin, cols, xn](detail::TensorNode& node) {
                              if (!xn->requires_grad) return;
                              xn->ensure_grad();
                              for (std::size_t i = 0; i < node.grad.size(); ++i)
                                  xn->grad[begin * cols + i] += node.grad[i];
                          });
}

// Mean over rows: MxN -> 1xN.
inline Tensor mean_rows(const Tensor& x) {
    detail::check_matrix(x, "mean_rows");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    std::vector<double> out(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j] += x.data()[i * cols + j];
    for (double& v : out) v /= static_cast<double>(rows);
    auto xn = x.node_ptr();
    return make_op_result({1, cols}, std::move(out), {x}, [rows, cols, xn](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) xn->grad[i * cols + j] += node.grad[j] * inv;
    });
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto xn = x.node_ptr();
    return make_op_result({1}, {s}, {x}, [xn](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (double& g : xn->grad) g += node.grad[0];
    });
}

inline Tensor mean_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    const double n = static_cast<double>(x.numel());
    auto xn = x.node_ptr();
    return make_op_result({1}, {s / n}, {x}, [n, xn](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (double& g : xn->grad) g += node.grad[0] / n;
    });
}

// out[i] = x[index[i]]; duplicated indices replicate values, backward
// scatter-adds. Covers pixel-shuffle and nearest-neighbor upsampling.
inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& index, Shape out_shape) {
    if (shape_numel(out_shape) != index.size())
        throw ContractError("gather: index length " + std::to_string(index.size()) +
                            " does not fill shape " + shape_str(out_shape));
    std::vector<double> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.numel())
            throw ContractError("gather: index " + std::to_string(index[i]) + " out of range for " +
                                shape_str(x.shape()));
        out[i] = x.data()[index[i]];
    }
    auto xn = x.node_ptr();
    auto idx = std::make_shared<std::vector<std::size_t>>(index);
    return make_op_result(std::move(out_shape), std::move(out), {x}, [xn, idx](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < idx->size(); ++i) xn->grad[(*idx)[i]] += node.grad[i];
    });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                             " changes element count");
    auto xn = x.node_ptr();
    return make_op_result(std::move(shape), x.data(), {x}, [xn](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) xn->grad[i] += node.grad[i];
    });
}

// L2 normalization of a vector (or 1xN row). Caller must reject degenerate
// inputs; a near-zero norm is a contract error here.
inline Tensor l2_normalize(const Tensor& x) {
    double nsq = 0.0;
    for (double v : x.data()) nsq += v * v;
    const double norm = std::sqrt(nsq);
    if (norm < 1e-12) throw ContractError("l2_normalize: input norm is numerically zero");
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] / norm;
    auto xn = x.node_ptr();
    auto yv = std::make_shared<std::vector<double>>(out);
    return make_op_result(x.shape(), std::move(out), {x}, [norm, xn, yv](detail::TensorNode& node) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        double dot = 0.0;
        for (std::size_t i = 0; i < node.grad.size(); ++i) dot += node.grad[i] * (*yv)[i];
        for (std::size_t i = 0; i < node.grad.size(); ++i)
            xn->grad[i] += (node.grad[i] - dot * (*yv)[i]) / norm;
    });
}

// Cross-entropy between a single row of logits and a class index,
// computed via the stabilized log-sum-exp.
inline Tensor cross_entropy_with_logits(const Tensor& logits, std::size_t target) {
    if (logits.rows() != 1)
        throw DimensionError("cross_entropy_with_logits expects one logit row, got " +
                             shape_str(logits.shape()));
    const std::size_t n = logits.numel();
    if (target >= n)
        throw ContractError("cross_entropy_with_logits: class " + std::to_string(target) +
                            " out of range for " + std::to_string(n) + " logits");
    const auto& z = logits.data();
    double mx = z[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(z[j] - mx);
    const double lse = mx + std::log(sum);
    auto ln = logits.node_ptr();
    return make_op_result({1}, {lse - z[target]}, {logits}, [n, target, ln](detail::TensorNode& node) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const auto& z = ln->value;
        double mx = z[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(z[j] - mx);
        for (std::size_t j = 0; j < n; ++j) {
            double p = std::exp(z[j] - mx) / sum;
            ln->grad[j] += node.grad[0] * (p - (j == target ? 1.0 : 0.0));
        }
    });
}

// Mean binary cross-entropy from logits against fixed {0,1} targets,
// in the overflow-safe max(z,0) - z*t + log1p(exp(-|z|)) form.
inline Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<double>& targets) {
    if (logits.numel() != targets.size())
        throw DimensionError("bce_with_logits_mean: " + shape_str(logits.shape()) + " vs " +
                             std::to_string(targets.size()) + " targets");
    const std::size_t n = logits.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = logits.data()[i];
        acc += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    auto ln = logits.node_ptr();
    auto tg = std::make_shared<std::vector<double>>(targets);
    return make_op_result({1}, {acc / static_cast<double>(n)}, {logits},
                          [n, ln, tg](detail::TensorNode& node) {
                              if (!ln->requires_grad) return;
                              ln->ensure_grad();
                              for (std::size_t i = 0; i < n; ++i) {
                                  const double z = ln->value[i];
                                  const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                                            : std::exp(z) / (1.0 + std::exp(z));
                                  ln->grad[i] += node.grad[0] * (s - (*tg)[i]) / static_cast<double>(n);
                              }
                          });
}

// ---------------------------------------------------------------------------
// Backward pass and optimizer
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    detail::TensorNode* root = loss.node();
    if (!root->requires_grad) return;  // constant graph, nothing to do

    // Deterministic iterative post-order topological sort.
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> seen;
    struct Frame {
        detail::TensorNode* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::TensorNode* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    for (detail::TensorNode* n : order) {
        if (!n->is_leaf() && n->backward_done)
            throw ContractError("backward called twice over the same graph; rebuild the forward pass");
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorNode* n = *it;
        if (n->is_leaf()) continue;
        n->ensure_grad();
        n->backward_done = true;
        if (n->backprop) n->backprop(*n);
    }
}

// p <- p - lr * grad(p), then grads are cleared. Every parameter must carry
// populated gradient storage (allocated at parameter creation, filled or left
// zero by backward passes).
inline void sgd_step(const std::vector<Tensor>& params, double lr) {
    if (lr < 0.0) throw ContractError("sgd_step: negative learning rate");
    for (const Tensor& p : params) {
        Tensor t = p;
        if (!t.requires_grad() || !t.has_grad())
            throw ContractError("sgd_step: parameter is missing its gradient");
    }
    for (const Tensor& p : params) {
        detail::TensorNode* n = p.node();
        for (std::size_t i = 0; i < n->value.size(); ++i) {
            n->value[i] -= lr * n->grad[i];
            n->grad[i] = 0.0;
        }
    }
}

}  // namespace specfed
