#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mogen/tensor.hpp"

namespace mogen {

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_shapes_match(a.shape(), b.shape(), "add");
  std::vector<S> out(a.values());
  const S* bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<S>& n) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
    }
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_shapes_match(a.shape(), b.shape(), "sub");
  std::vector<S> out(a.values());
  const S* bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<S>& n) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_shapes_match(a.shape(), b.shape(), "mul");
  std::vector<S> out(a.values());
  const S* bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<S>& n) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->values[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->values[i];
    }
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  std::vector<S> out(a.values());
  for (auto& v : out) v += c;
  auto an = a.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a}, [an](detail::Node<S>& n) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
  });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  std::vector<S> out(a.values());
  for (auto& v : out) v *= c;
  auto an = a.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a}, [an, c](detail::Node<S>& n) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
  });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return mul_scalar(a, S(-1));
}

// Adds a width-matching bias vector to every row (last axis).
template <typename S>
Tensor<S> add_row(const Tensor<S>& x, const Tensor<S>& b) {
  const std::int64_t width = x.dim(x.rank() - 1);
  if (b.rank() != 1 || b.dim(0) != width) {
    throw ShapeError("add_row: bias " + shape_str(b.shape()) + " vs rows of " +
                     shape_str(x.shape()));
  }
  std::vector<S> out(x.values());
  const S* bv = b.data();
  const std::int64_t rows = x.numel() / width;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < width; ++c) out[static_cast<std::size_t>(r * width + c)] += bv[c];
  auto xn = x.node(), bn = b.node();
  return Tensor<S>::make_op(x.shape(), std::move(out), {x, b},
                            [xn, bn, rows, width](detail::Node<S>& n) {
                              if (xn->requires_grad) {
                                xn->ensure_grad();
                                for (std::size_t i = 0; i < n.grad.size(); ++i)
                                  xn->grad[i] += n.grad[i];
                              }
                              if (bn->requires_grad) {
                                bn->ensure_grad();
                                for (std::int64_t r = 0; r < rows; ++r)
                                  for (std::int64_t c = 0; c < width; ++c)
                                    bn->grad[static_cast<std::size_t>(c)] +=
                                        n.grad[static_cast<std::size_t>(r * width + c)];
                              }
                            });
}

// Multiplies each row of x (R x C) by the matching entry of a column (R x 1).
template <typename S>
Tensor<S> mul_col(const Tensor<S>& x, const Tensor<S>& col) {
  if (x.rank() != 2 || col.rank() != 2 || col.dim(1) != 1 || col.dim(0) != x.dim(0)) {
    throw ShapeError("mul_col: " + shape_str(x.shape()) + " vs " + shape_str(col.shape()));
  }
  const std::int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(x.values());
  const S* cv = col.data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) out[static_cast<std::size_t>(r * cols + c)] *= cv[r];
  auto xn = x.node(), cn = col.node();
  return Tensor<S>::make_op(
      x.shape(), std::move(out), {x, col}, [xn, cn, rows, cols](detail::Node<S>& n) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < cols; ++c)
              xn->grad[static_cast<std::size_t>(r * cols + c)] +=
                  n.grad[static_cast<std::size_t>(r * cols + c)] * cn->values[static_cast<std::size_t>(r)];
        }
        if (cn->requires_grad) {
          cn->ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r) {
            S acc = 0;
            for (std::int64_t c = 0; c < cols; ++c)
              acc += n.grad[static_cast<std::size_t>(r * cols + c)] *
                     xn->values[static_cast<std::size_t>(r * cols + c)];
            cn->grad[static_cast<std::size_t>(r)] += acc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<std::size_t>(m * n), S(0));
  {
    const S* av = a.data();
    const S* bv = b.data();
    for (std::int64_t i = 0; i < m; ++i) {
      S* orow = out.data() + i * n;
      const S* arow = av + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const S aik = arow[p];
        const S* brow = bv + p * n;
        for (std::int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
      }
    }
  }
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_op(
      {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node<S>& g) {
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = dY * B^T
          for (std::int64_t i = 0; i < m; ++i) {
            const S* grow = g.grad.data() + i * n;
            S* arow = an->grad.data() + i * k;
            for (std::int64_t p = 0; p < k; ++p) {
              const S* brow = bn->values.data() + p * n;
              S acc = 0;
              for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              arow[p] += acc;
            }
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = A^T * dY
          for (std::int64_t i = 0; i < m; ++i) {
            const S* arow = an->values.data() + i * k;
            const S* grow = g.grad.data() + i * n;
            for (std::int64_t p = 0; p < k; ++p) {
              const S aik = arow[p];
              S* brow = bn->grad.data() + p * n;
              for (std::int64_t j = 0; j < n; ++j) brow[j] += aik * grow[j];
            }
          }
        }
      });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 expected, got " + shape_str(a.shape()));
  const std::int64_t r = a.dim(0), c = a.dim(1);
  std::vector<S> out(static_cast<std::size_t>(r * c));
  const S* av = a.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(j * r + i)] = av[i * c + j];
  auto an = a.node();
  return Tensor<S>::make_op({c, r}, std::move(out), {a}, [an, r, c](detail::Node<S>& n) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j)
        an->grad[static_cast<std::size_t>(i * c + j)] += n.grad[static_cast<std::size_t>(j * r + i)];
  });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  auto an = a.node();
  return Tensor<S>::make_op(std::move(shape), a.values(), {a}, [an](detail::Node<S>& n) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
  });
}

// Row-vector convention throughout: y = x * W + b with W of shape [in x out].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add_row(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Slicing / assembly
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, std::int64_t r0, std::int64_t r1) {
  if (x.rank() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1) {
    throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " +
                     shape_str(x.shape()));
  }
  const std::int64_t cols = x.dim(1);
  std::vector<S> out(x.values().begin() + r0 * cols, x.values().begin() + r1 * cols);
  auto xn = x.node();
  return Tensor<S>::make_op({r1 - r0, cols}, std::move(out), {x},
                            [xn, r0, cols](detail::Node<S>& n) {
                              if (!xn->requires_grad) return;
                              xn->ensure_grad();
                              for (std::size_t i = 0; i < n.grad.size(); ++i)
                                xn->grad[static_cast<std::size_t>(r0 * cols) + i] += n.grad[i];
                            });
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::int64_t cols = parts[0].dim(1);
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols)
      throw ShapeError("concat_rows: width mismatch at " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<S> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<std::shared_ptr<detail::Node<S>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return Tensor<S>::make_op({rows, cols}, std::move(out), parts, [nodes](detail::Node<S>& n) {
    std::size_t off = 0;
    for (const auto& pn : nodes) {
      const std::size_t len = pn->values.size();
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (std::size_t i = 0; i < len; ++i) pn->grad[i] += n.grad[off + i];
      }
      off += len;
    }
  });
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::int64_t rows = parts[0].dim(0);
  std::int64_t cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows)
      throw ShapeError("concat_cols: height mismatch at " + shape_str(p.shape()));
    cols += p.dim(1);
  }
  std::vector<S> out(static_cast<std::size_t>(rows * cols));
  std::int64_t coff = 0;
  for (const auto& p : parts) {
    const std::int64_t pc = p.dim(1);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < pc; ++c)
        out[static_cast<std::size_t>(r * cols + coff + c)] = p.at(r, c);
    coff += pc;
  }
  std::vector<std::shared_ptr<detail::Node<S>>> nodes;
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.dim(1));
  }
  return Tensor<S>::make_op({rows, cols}, std::move(out), parts,
                            [nodes, widths, rows, cols](detail::Node<S>& n) {
                              std::int64_t coff = 0;
                              for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                                const std::int64_t pc = widths[pi];
                                if (nodes[pi]->requires_grad) {
                                  nodes[pi]->ensure_grad();
                                  for (std::int64_t r = 0; r < rows; ++r)
                                    for (std::int64_t c = 0; c < pc; ++c)
                                      nodes[pi]->grad[static_cast<std::size_t>(r * pc + c)] +=
                                          n.grad[static_cast<std::size_t>(r * cols + coff + c)];
                                }
                                coff += pc;
                              }
                            });
}

template <typename S>
Tensor<S> gather_cols(const Tensor<S>& x, const std::vector<std::int64_t>& idx) {
  if (x.rank() != 2) throw ShapeError("gather_cols: rank-2 expected");
  const std::int64_t rows = x.dim(0), cols = x.dim(1), k = static_cast<std::int64_t>(idx.size());
  for (std::int64_t j : idx) {
    if (j < 0 || j >= cols)
      throw ShapeError("gather_cols: column " + std::to_string(j) + " outside " +
                       shape_str(x.shape()));
  }
  std::vector<S> out(static_cast<std::size_t>(rows * k));
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < k; ++j)
      out[static_cast<std::size_t>(r * k + j)] = x.at(r, idx[static_cast<std::size_t>(j)]);
  auto xn = x.node();
  return Tensor<S>::make_op({rows, k}, std::move(out), {x},
                            [xn, idx, rows, cols, k](detail::Node<S>& n) {
                              if (!xn->requires_grad) return;
                              xn->ensure_grad();
                              for (std::int64_t r = 0; r < rows; ++r)
                                for (std::int64_t j = 0; j < k; ++j)
                                  xn->grad[static_cast<std::size_t>(
                                      r * cols + idx[static_cast<std::size_t>(j)])] +=
                                      n.grad[static_cast<std::size_t>(r * k + j)];
                            });
}

template <typename S>
Tensor<S> reverse_rows(const Tensor<S>& x) {
  if (x.rank() != 2) throw ShapeError("reverse_rows: rank-2 expected");
  const std::int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<S> out(static_cast<std::size_t>(rows * cols));
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c)
      out[static_cast<std::size_t>((rows - 1 - r) * cols + c)] = x.at(r, c);
  auto xn = x.node();
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [xn, rows, cols](detail::Node<S>& n) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < cols; ++c)
        xn->grad[static_cast<std::size_t>(r * cols + c)] +=
            n.grad[static_cast<std::size_t>((rows - 1 - r) * cols + c)];
  });
}

// Rank-3 batch -> one rank-2 item.
template <typename S>
Tensor<S> select_item(const Tensor<S>& x, std::int64_t b) {
  if (x.rank() != 3 || b < 0 || b >= x.dim(0))
    throw ShapeError("select_item: index " + std::to_string(b) + " of " + shape_str(x.shape()));
  const std::int64_t len = x.dim(1) * x.dim(2);
  std::vector<S> out(x.values().begin() + b * len, x.values().begin() + (b + 1) * len);
  auto xn = x.node();
  return Tensor<S>::make_op({x.dim(1), x.dim(2)}, std::move(out), {x},
                            [xn, b, len](detail::Node<S>& n) {
                              if (!xn->requires_grad) return;
                              xn->ensure_grad();
                              for (std::int64_t i = 0; i < len; ++i)
                                xn->grad[static_cast<std::size_t>(b * len + i)] +=
                                    n.grad[static_cast<std::size_t>(i)];
                            });
}

// Stacks equally shaped rank-2 items into a rank-3 batch.
template <typename S>
Tensor<S> stack_items(const std::vector<Tensor<S>>& items) {
  if (items.empty()) throw ShapeError("stack_items: no inputs");
  const Shape& s0 = items[0].shape();
  for (const auto& t : items) check_shapes_match(t.shape(), s0, "stack_items");
  const std::int64_t len = shape_numel(s0);
  std::vector<S> out;
  out.reserve(static_cast<std::size_t>(len) * items.size());
  for (const auto& t : items) out.insert(out.end(), t.values().begin(), t.values().end());
  std::vector<std::shared_ptr<detail::Node<S>>> nodes;
  for (const auto& t : items) nodes.push_back(t.node());
  return Tensor<S>::make_op({static_cast<std::int64_t>(items.size()), s0[0], s0[1]},
                            std::move(out), items, [nodes, len](detail::Node<S>& n) {
                              for (std::size_t b = 0; b < nodes.size(); ++b) {
                                if (!nodes[b]->requires_grad) continue;
                                nodes[b]->ensure_grad();
                                for (std::int64_t i = 0; i < len; ++i)
                                  nodes[b]->grad[static_cast<std::size_t>(i)] +=
                                      n.grad[b * static_cast<std::size_t>(len) +
                                             static_cast<std::size_t>(i)];
                              }
                            });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
S sigmoid_val(S x) {
  if (x >= S(0)) {
    const S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}
}  // namespace detail

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) v = detail::sigmoid_val(v);
  auto xn = x.node();
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [xn](detail::Node<S>& n) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const S y = n.values[i];
      xn->grad[i] += n.grad[i] * y * (S(1) - y);
    }
  });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) v = v * detail::sigmoid_val(v);
  auto xn = x.node();
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [xn](detail::Node<S>& n) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const S xi = xn->values[i];
      const S s = detail::sigmoid_val(xi);
      xn->grad[i] += n.grad[i] * (s + xi * s * (S(1) - s));
    }
  });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) v = (v > S(30)) ? v : std::log1p(std::exp(v));
  auto xn = x.node();
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [xn](detail::Node<S>& n) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      xn->grad[i] += n.grad[i] * detail::sigmoid_val(xn->values[i]);
  });
}

template <typename S>
Tensor<S> exp_op(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) v = std::exp(v);
  auto xn = x.node();
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [xn](detail::Node<S>& n) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i] * n.values[i];
  });
}

template <typename S>
Tensor<S> abs_op(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (auto& v : out) v = std::abs(v);
  auto xn = x.node();
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [xn](detail::Node<S>& n) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const S xi = xn->values[i];
      const S sign = xi > S(0) ? S(1) : (xi < S(0) ? S(-1) : S(0));
      xn->grad[i] += n.grad[i] * sign;
    }
  });
}

// Smooth rotation coefficients as functions of u = theta^2. Series expansions
// below the threshold keep them differentiable through zero rotation.
namespace detail {
template <typename S>
S rot_cos(S u) {
  return (u < S(1e-4)) ? S(1) - u / S(2) + u * u / S(24) - u * u * u / S(720)
                       : std::cos(std::sqrt(u));
}
template <typename S>
S rot_sinc(S u) {
  return (u < S(1e-4)) ? S(1) - u / S(6) + u * u / S(120) - u * u * u / S(5040)
                       : std::sin(std::sqrt(u)) / std::sqrt(u);
}
template <typename S>
S rot_vers(S u) {
  return (u < S(1e-4)) ? S(0.5) - u / S(24) + u * u / S(720) - u * u * u / S(40320)
                       : (S(1) - std::cos(std::sqrt(u))) / u;
}
template <typename S>
S rot_cos_d(S u) {
  return -rot_sinc(u) / S(2);
}
template <typename S>
S rot_sinc_d(S u) {
  return (u < S(1e-4)) ? S(-1) / S(6) + u / S(60) - u * u / S(1680)
                       : (rot_cos(u) - rot_sinc(u)) / (S(2) * u);
}
template <typename S>
S rot_vers_d(S u) {
  return (u < S(1e-4)) ? S(-1) / S(24) + u / S(360) - u * u / S(13440)
                       : (rot_sinc(u) - S(2) * rot_vers(u)) / (S(2) * u);
}
}  // namespace detail

template <typename S>
Tensor<S> rot_coef_cos(const Tensor<S>& u) {
  std::vector<S> out(u.values());
  for (auto& v : out) v = detail::rot_cos(v);
  auto un = u.node();
  return Tensor<S>::make_op(u.shape(), std::move(out), {u}, [un](detail::Node<S>& n) {
    if (!un->requires_grad) return;
    un->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      un->grad[i] += n.grad[i] * detail::rot_cos_d(un->values[i]);
  });
}

template <typename S>
Tensor<S> rot_coef_sinc(const Tensor<S>& u) {
  std::vector<S> out(u.values());
  for (auto& v : out) v = detail::rot_sinc(v);
  auto un = u.node();
  return Tensor<S>::make_op(u.shape(), std::move(out), {u}, [un](detail::Node<S>& n) {
    if (!un->requires_grad) return;
    un->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      un->grad[i] += n.grad[i] * detail::rot_sinc_d(un->values[i]);
  });
}

template <typename S>
Tensor<S> rot_coef_versine(const Tensor<S>& u) {
  std::vector<S> out(u.values());
  for (auto& v : out) v = detail::rot_vers(v);
  auto un = u.node();
  return Tensor<S>::make_op(u.shape(), std::move(out), {u}, [un](detail::Node<S>& n) {
    if (!un->requires_grad) return;
    un->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      un->grad[i] += n.grad[i] * detail::rot_vers_d(un->values[i]);
  });
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  const auto& sh = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= sh[static_cast<std::size_t>(i)];
  const std::int64_t len = sh[static_cast<std::size_t>(axis)];
  std::vector<S> out(x.values());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      S* base = out.data() + o * len * inner + in;
      S mx = base[0];
      for (std::int64_t t = 1; t < len; ++t) mx = std::max(mx, base[t * inner]);
      S sum = 0;
      for (std::int64_t t = 0; t < len; ++t) {
        base[t * inner] = std::exp(base[t * inner] - mx);
        sum += base[t * inner];
      }
      for (std::int64_t t = 0; t < len; ++t) base[t * inner] /= sum;
    }
  }
  auto xn = x.node();
  return Tensor<S>::make_op(
      x.shape(), std::move(out), {x}, [xn, outer, inner, len](detail::Node<S>& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t off = o * len * inner + in;
            S dot = 0;
            for (std::int64_t t = 0; t < len; ++t)
              dot += n.grad[static_cast<std::size_t>(off + t * inner)] *
                     n.values[static_cast<std::size_t>(off + t * inner)];
            for (std::int64_t t = 0; t < len; ++t) {
              const std::size_t i = static_cast<std::size_t>(off + t * inner);
              xn->grad[i] += (n.grad[i] - dot) * n.values[i];
            }
          }
        }
      });
}

// Normalizes each row over the last axis then applies gain/bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5)) {
  const std::int64_t width = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != width || bias.rank() != 1 || bias.dim(0) != width) {
    throw ShapeError("layer_norm: gain/bias must match last extent " + std::to_string(width));
  }
  const std::int64_t rows = x.numel() / width;
  std::vector<S> out(x.values().size());
  std::vector<S> xhat(x.values().size());
  std::vector<S> inv_std(static_cast<std::size_t>(rows));
  const S* xv = x.data();
  const S* gv = gain.data();
  const S* bv = bias.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* row = xv + r * width;
    S mean = 0;
    for (std::int64_t c = 0; c < width; ++c) mean += row[c];
    mean /= static_cast<S>(width);
    S var = 0;
    for (std::int64_t c = 0; c < width; ++c) {
      const S d = row[c] - mean;
      var += d * d;
    }
    var /= static_cast<S>(width);
    const S istd = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = istd;
    for (std::int64_t c = 0; c < width; ++c) {
      const std::size_t i = static_cast<std::size_t>(r * width + c);
      xhat[i] = (row[c] - mean) * istd;
      out[i] = xhat[i] * gv[c] + bv[c];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return Tensor<S>::make_op(
      x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, rows, width, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::Node<S>& n) {
        for (std::int64_t r = 0; r < rows; ++r) {
          const std::size_t off = static_cast<std::size_t>(r * width);
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (std::int64_t c = 0; c < width; ++c)
              gn->grad[static_cast<std::size_t>(c)] +=
                  n.grad[off + static_cast<std::size_t>(c)] * xhat[off + static_cast<std::size_t>(c)];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::int64_t c = 0; c < width; ++c)
              bn->grad[static_cast<std::size_t>(c)] += n.grad[off + static_cast<std::size_t>(c)];
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            S mean_dxhat = 0, mean_dxhat_xhat = 0;
            for (std::int64_t c = 0; c < width; ++c) {
              const std::size_t i = off + static_cast<std::size_t>(c);
              const S dxh = n.grad[i] * gn->values[static_cast<std::size_t>(c)];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhat[i];
            }
            mean_dxhat /= static_cast<S>(width);
            mean_dxhat_xhat /= static_cast<S>(width);
            const S istd = inv_std[static_cast<std::size_t>(r)];
            for (std::int64_t c = 0; c < width; ++c) {
              const std::size_t i = off + static_cast<std::size_t>(c);
              const S dxh = n.grad[i] * gn->values[static_cast<std::size_t>(c)];
              xn->grad[i] += istd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

enum class Padding { Same, Valid };

namespace detail {
inline std::int64_t conv_out_len(std::int64_t t, std::int64_t k, std::int64_t stride,
                                 mogen::Padding pad, std::int64_t* pad_left) {
  // Same padding is zero, symmetric, biased left when the total is odd.
  const std::int64_t total = (pad == mogen::Padding::Same) ? k - 1 : 0;
  *pad_left = (pad == mogen::Padding::Same) ? k / 2 : 0;
  const std::int64_t padded = t + total;
  if (padded < k) {
    throw mogen::ShapeError("conv1d: kernel width " + std::to_string(k) +
                            " exceeds padded length " + std::to_string(padded));
  }
  return (padded - k) / stride + 1;
}
}  // namespace detail

// 1D cross-correlation over the leading (time) axis of x [T x C].
// Kernel shapes: [K] one kernel shared by all channels, [K x C] depthwise,
// [K x Cin x Cout] full.
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& kernel, std::int64_t stride = 1,
                 Padding pad = Padding::Same) {
  if (x.rank() != 2) throw ShapeError("conv1d: input rank-2 expected, got " + shape_str(x.shape()));
  if (stride < 1) throw ShapeError("conv1d: stride must be positive");
  const std::int64_t t_len = x.dim(0), cin = x.dim(1), k = kernel.dim(0);
  std::int64_t pad_left = 0;
  const std::int64_t t_out = detail::conv_out_len(t_len, k, stride, pad, &pad_left);

  const int krank = kernel.rank();
  std::int64_t cout = cin;
  if (krank == 2) {
    if (kernel.dim(1) != cin)
      throw ShapeError("conv1d: depthwise kernel " + shape_str(kernel.shape()) + " vs input " +
                       shape_str(x.shape()));
  } else if (krank == 3) {
    if (kernel.dim(1) != cin)
      throw ShapeError("conv1d: kernel " + shape_str(kernel.shape()) + " vs input " +
                       shape_str(x.shape()));
    cout = kernel.dim(2);
  } else if (krank != 1) {
    throw ShapeError("conv1d: kernel rank must be 1, 2 or 3");
  }

  std::vector<S> out(static_cast<std::size_t>(t_out * cout), S(0));
  const S* xv = x.data();
  const S* kv = kernel.data();
  for (std::int64_t to = 0; to < t_out; ++to) {
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const std::int64_t ti = to * stride + kk - pad_left;
      if (ti < 0 || ti >= t_len) continue;
      const S* xrow = xv + ti * cin;
      S* orow = out.data() + to * cout;
      if (krank == 1) {
        const S w = kv[kk];
        for (std::int64_t c = 0; c < cin; ++c) orow[c] += w * xrow[c];
      } else if (krank == 2) {
        const S* krow = kv + kk * cin;
        for (std::int64_t c = 0; c < cin; ++c) orow[c] += krow[c] * xrow[c];
      } else {
        const S* kmat = kv + kk * cin * cout;
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          const S xi = xrow[ci];
          const S* kvec = kmat + ci * cout;
          for (std::int64_t co = 0; co < cout; ++co) orow[co] += xi * kvec[co];
        }
      }
    }
  }

  auto xn = x.node(), kn = kernel.node();
  return Tensor<S>::make_op(
      {t_out, cout}, std::move(out), {x, kernel},
      [xn, kn, t_len, cin, cout, k, t_out, stride, pad_left, krank](detail::Node<S>& n) {
        const bool gx = xn->requires_grad, gk = kn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gk) kn->ensure_grad();
        if (!gx && !gk) return;
        for (std::int64_t to = 0; to < t_out; ++to) {
          const S* grow = n.grad.data() + to * cout;
          for (std::int64_t kk = 0; kk < k; ++kk) {
            const std::int64_t ti = to * stride + kk - pad_left;
            if (ti < 0 || ti >= t_len) continue;
            const S* xrow = xn->values.data() + ti * cin;
            S* gxrow = gx ? xn->grad.data() + ti * cin : nullptr;
            if (krank == 1) {
              const S w = kn->values[static_cast<std::size_t>(kk)];
              S acc = 0;
              for (std::int64_t c = 0; c < cin; ++c) {
                if (gx) gxrow[c] += w * grow[c];
                acc += grow[c] * xrow[c];
              }
              if (gk) kn->grad[static_cast<std::size_t>(kk)] += acc;
            } else if (krank == 2) {
              const S* krow = kn->values.data() + kk * cin;
              S* gkrow = gk ? kn->grad.data() + kk * cin : nullptr;
              for (std::int64_t c = 0; c < cin; ++c) {
                if (gx) gxrow[c] += krow[c] * grow[c];
                if (gk) gkrow[c] += grow[c] * xrow[c];
              }
            } else {
              const S* kmat = kn->values.data() + kk * cin * cout;
              S* gkmat = gk ? kn->grad.data() + kk * cin * cout : nullptr;
              for (std::int64_t ci = 0; ci < cin; ++ci) {
                const S xi = xrow[ci];
                const S* kvec = kmat + ci * cout;
                S acc = 0;
                for (std::int64_t co = 0; co < cout; ++co) {
                  acc += kvec[co] * grow[co];
                  if (gk) gkmat[ci * cout + co] += xi * grow[co];
                }
                if (gx) gxrow[ci] += acc;
              }
            }
          }
        }
      });
}

// Single-plane 2D cross-correlation, stride 1, same padding (top/left biased).
template <typename S>
Tensor<S> conv2d_plane(const Tensor<S>& x, const Tensor<S>& kernel) {
  if (x.rank() != 2 || kernel.rank() != 2)
    throw ShapeError("conv2d_plane: rank-2 input and kernel expected");
  const std::int64_t h = x.dim(0), w = x.dim(1), kh = kernel.dim(0), kw = kernel.dim(1);
  const std::int64_t ph = kh / 2, pw = kw / 2;
  std::vector<S> out(static_cast<std::size_t>(h * w), S(0));
  const S* xv = x.data();
  const S* kv = kernel.data();
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t a = 0; a < kh; ++a) {
      const std::int64_t ii = i + a - ph;
      if (ii < 0 || ii >= h) continue;
      for (std::int64_t j = 0; j < w; ++j) {
        S acc = 0;
        for (std::int64_t b = 0; b < kw; ++b) {
          const std::int64_t jj = j + b - pw;
          if (jj < 0 || jj >= w) continue;
          acc += kv[a * kw + b] * xv[ii * w + jj];
        }
        out[static_cast<std::size_t>(i * w + j)] += acc;
      }
    }
  }
  auto xn = x.node(), kn = kernel.node();
  return Tensor<S>::make_op(
      x.shape(), std::move(out), {x, kernel}, [xn, kn, h, w, kh, kw, ph, pw](detail::Node<S>& n) {
        const bool gx = xn->requires_grad, gk = kn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gk) kn->ensure_grad();
        if (!gx && !gk) return;
        for (std::int64_t i = 0; i < h; ++i) {
          for (std::int64_t a = 0; a < kh; ++a) {
            const std::int64_t ii = i + a - ph;
            if (ii < 0 || ii >= h) continue;
            for (std::int64_t j = 0; j < w; ++j) {
              const S g = n.grad[static_cast<std::size_t>(i * w + j)];
              for (std::int64_t b = 0; b < kw; ++b) {
                const std::int64_t jj = j + b - pw;
                if (jj < 0 || jj >= w) continue;
                if (gx)
                  xn->grad[static_cast<std::size_t>(ii * w + jj)] +=
                      kn->values[static_cast<std::size_t>(a * kw + b)] * g;
                if (gk)
                  kn->grad[static_cast<std::size_t>(a * kw + b)] +=
                      xn->values[static_cast<std::size_t>(ii * w + jj)] * g;
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  for (S v : x.values()) acc += v;
  auto xn = x.node();
  return Tensor<S>::make_op({1}, {acc}, {x}, [xn](detail::Node<S>& n) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S g = n.grad[0];
    for (auto& v : xn->grad) v += g;
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return mul_scalar(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> d = sub(a, b);
  return mean(mul(d, d));
}

}  // namespace mogen
