#include "s0lab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace s0lab {

namespace {

using detail::BackwardFn;
using detail::Node;
using detail::NodePtr;

NodePtr new_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
    for (const auto& t : inputs) {
        if (t.requires_grad()) {
            return true;
        }
    }
    return false;
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) {
        throw ContractError(std::string(op) + ": undefined tensor");
    }
}

}  // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) {
            throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        }
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << shape[i] << (i + 1 < shape.size() ? "," : "");
    }
    os << ")";
    return os.str();
}

// Builds the result node of an op; records parents and the pullback only when
// some input needs gradients, so inference paths stay graph-free.
Tensor make_op_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                      BackwardFn backward) {
    auto n = new_node(std::move(shape), std::move(value));
    if (any_requires_grad(inputs)) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto& t : inputs) {
            n->parents.push_back(t.node());
        }
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

// ----------------------------- Tensor basics -----------------------------

Tensor Tensor::zeros(Shape shape) {
    const auto n = numel(shape);
    return Tensor(new_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0)));
}

Tensor Tensor::full(Shape shape, double fill) {
    const auto n = numel(shape);
    return Tensor(new_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), fill)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    return Tensor(new_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::eye(int n) {
    std::vector<double> d(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        d[static_cast<std::size_t>(i) * n + i] = 1.0;
    }
    return from({n, n}, std::move(d));
}

const Shape& Tensor::shape() const {
    check_defined(*this, "shape");
    return node_->shape;
}

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(node_->value.size()); }

int Tensor::dim(int i) const {
    const auto& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size())) {
        throw IndexError("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
    }
    return s[static_cast<std::size_t>(i)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && node_->leaf; }

std::span<const double> Tensor::data() const {
    check_defined(*this, "data");
    return {node_->value.data(), node_->value.size()};
}

double Tensor::item() const {
    check_defined(*this, "item");
    if (size() != 1) {
        throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
}

double Tensor::at(std::int64_t i) const {
    check_defined(*this, "at");
    if (i < 0 || i >= size()) {
        throw IndexError("flat index " + std::to_string(i) + " out of range for " +
                         shape_str(shape()));
    }
    return node_->value[static_cast<std::size_t>(i)];
}

Tensor Tensor::detach() const {
    check_defined(*this, "detach");
    return Tensor(new_node(node_->shape, node_->value));
}

void Tensor::set_data(std::span<const double> values) {
    check_defined(*this, "set_data");
    if (values.size() != node_->value.size()) {
        throw ShapeError("set_data length mismatch");
    }
    std::copy(values.begin(), values.end(), node_->value.begin());
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        return false;
    }
    return std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(double)) == 0;
}

bool all_finite(const Tensor& a) {
    for (double v : a.data()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    double m = 0.0;
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        m = std::max(m, std::fabs(da[i] - db[i]));
    }
    return m;
}

double frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v * v;
    }
    return std::sqrt(s);
}

// ----------------------------- elementwise ops -----------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!same_shape(a, b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto da = a.data();
    auto db = b.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] + db[i];
    }
    return make_op_result(a.shape(), std::move(out), {a, b},
                          [](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
                              for (int p = 0; p < 2; ++p) {
                                  if (pg[static_cast<std::size_t>(p)]) {
                                      auto& acc = *pg[static_cast<std::size_t>(p)];
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                          acc[i] += g[i];
                                      }
                                  }
                              }
                          });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto da = a.data();
    auto db = b.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] - db[i];
    }
    return make_op_result(a.shape(), std::move(out), {a, b},
                          [](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*pg[0])[i] += g[i];
                                  }
                              }
                              if (pg[1]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*pg[1])[i] -= g[i];
                                  }
                              }
                          });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto da = a.data();
    auto db = b.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] * db[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op_result(a.shape(), std::move(out), {a, b},
                          [an, bn](const std::vector<double>& g,
                                   const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*pg[0])[i] += g[i] * bn->value[i];
                                  }
                              }
                              if (pg[1]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*pg[1])[i] += g[i] * an->value[i];
                                  }
                              }
                          });
}

Tensor scale(const Tensor& a, double s) {
    auto da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] * s;
    }
    return make_op_result(a.shape(), std::move(out), {a},
                          [s](const std::vector<double>& g,
                              const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*pg[0])[i] += g[i] * s;
                                  }
                              }
                          });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) {
        throw ShapeError("scale_by: scale tensor must have one element, got " +
                         shape_str(s.shape()));
    }
    const double sv = s.data()[0];
    auto da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] * sv;
    }
    auto an = a.node();
    return make_op_result(a.shape(), std::move(out), {a, s},
                          [an, sv](const std::vector<double>& g,
                                   const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*pg[0])[i] += g[i] * sv;
                                  }
                              }
                              if (pg[1]) {
                                  double acc = 0.0;
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      acc += g[i] * an->value[i];
                                  }
                                  (*pg[1])[0] += acc;
                              }
                          });
}

// ----------------------------- linear algebra -----------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw ShapeError("matmul expects 2-D operands, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int m = a.dim(0);
    const int k = a.dim(1);
    const int n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul inner dimension mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    auto da = a.data();
    auto db = b.data();
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = da[static_cast<std::size_t>(i) * k + p];
            if (av == 0.0) {
                continue;
            }
            const std::size_t bo = static_cast<std::size_t>(p) * n;
            const std::size_t oo = static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                out[oo + j] += av * db[bo + j];
            }
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op_result({m, n}, std::move(out), {a, b},
                          [an, bn, m, k, n](const std::vector<double>& g,
                                            const std::vector<std::vector<double>*>& pg) {
                              // dA = G B^T, dB = A^T G
                              if (pg[0]) {
                                  auto& ga = *pg[0];
                                  for (int i = 0; i < m; ++i) {
                                      for (int p = 0; p < k; ++p) {
                                          double acc = 0.0;
                                          for (int j = 0; j < n; ++j) {
                                              acc += g[static_cast<std::size_t>(i) * n + j] *
                                                     bn->value[static_cast<std::size_t>(p) * n + j];
                                          }
                                          ga[static_cast<std::size_t>(i) * k + p] += acc;
                                      }
                                  }
                              }
                              if (pg[1]) {
                                  auto& gb = *pg[1];
                                  for (int p = 0; p < k; ++p) {
                                      for (int j = 0; j < n; ++j) {
                                          double acc = 0.0;
                                          for (int i = 0; i < m; ++i) {
                                              acc += an->value[static_cast<std::size_t>(i) * k + p] *
                                                     g[static_cast<std::size_t>(i) * n + j];
                                          }
                                          gb[static_cast<std::size_t>(p) * n + j] += acc;
                                      }
                                  }
                              }
                          });
}

Tensor matvec(const Tensor& m, const Tensor& v) {
    if (m.ndim() != 2 || v.ndim() != 1) {
        throw ShapeError("matvec expects (r,c) x (c), got " + shape_str(m.shape()) + " x " +
                         shape_str(v.shape()));
    }
    const int r = m.dim(0);
    const int c = m.dim(1);
    if (v.dim(0) != c) {
        throw ShapeError("matvec dimension mismatch " + shape_str(m.shape()) + " x " +
                         shape_str(v.shape()));
    }
    auto dm = m.data();
    auto dv = v.data();
    std::vector<double> out(static_cast<std::size_t>(r), 0.0);
    for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) {
            acc += dm[static_cast<std::size_t>(i) * c + j] * dv[static_cast<std::size_t>(j)];
        }
        out[static_cast<std::size_t>(i)] = acc;
    }
    auto mn = m.node();
    auto vn = v.node();
    return make_op_result({r}, std::move(out), {m, v},
                          [mn, vn, r, c](const std::vector<double>& g,
                                         const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  auto& gm = *pg[0];
                                  for (int i = 0; i < r; ++i) {
                                      for (int j = 0; j < c; ++j) {
                                          gm[static_cast<std::size_t>(i) * c + j] +=
                                              g[static_cast<std::size_t>(i)] *
                                              vn->value[static_cast<std::size_t>(j)];
                                      }
                                  }
                              }
                              if (pg[1]) {
                                  auto& gv = *pg[1];
                                  for (int j = 0; j < c; ++j) {
                                      double acc = 0.0;
                                      for (int i = 0; i < r; ++i) {
                                          acc += mn->value[static_cast<std::size_t>(i) * c + j] *
                                                 g[static_cast<std::size_t>(i)];
                                      }
                                      gv[static_cast<std::size_t>(j)] += acc;
                                  }
                              }
                          });
}

Tensor outer(const Tensor& u, const Tensor& v) {
    if (u.ndim() != 1 || v.ndim() != 1) {
        throw ShapeError("outer expects two vectors, got " + shape_str(u.shape()) + " and " +
                         shape_str(v.shape()));
    }
    const int m = u.dim(0);
    const int n = v.dim(0);
    auto du = u.data();
    auto dv = v.data();
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out[static_cast<std::size_t>(i) * n + j] = du[static_cast<std::size_t>(i)] *
                                                       dv[static_cast<std::size_t>(j)];
        }
    }
    auto un = u.node();
    auto vn = v.node();
    return make_op_result({m, n}, std::move(out), {u, v},
                          [un, vn, m, n](const std::vector<double>& g,
                                         const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (int i = 0; i < m; ++i) {
                                      double acc = 0.0;
                                      for (int j = 0; j < n; ++j) {
                                          acc += g[static_cast<std::size_t>(i) * n + j] *
                                                 vn->value[static_cast<std::size_t>(j)];
                                      }
                                      (*pg[0])[static_cast<std::size_t>(i)] += acc;
                                  }
                              }
                              if (pg[1]) {
                                  for (int j = 0; j < n; ++j) {
                                      double acc = 0.0;
                                      for (int i = 0; i < m; ++i) {
                                          acc += g[static_cast<std::size_t>(i) * n + j] *
                                                 un->value[static_cast<std::size_t>(i)];
                                      }
                                      (*pg[1])[static_cast<std::size_t>(j)] += acc;
                                  }
                              }
                          });
}

Tensor transpose(const Tensor& m) {
    if (m.ndim() != 2) {
        throw ShapeError("transpose expects a matrix, got " + shape_str(m.shape()));
    }
    const int r = m.dim(0);
    const int c = m.dim(1);
    auto dm = m.data();
    std::vector<double> out(dm.size());
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
            out[static_cast<std::size_t>(j) * r + i] = dm[static_cast<std::size_t>(i) * c + j];
        }
    }
    return make_op_result({c, r}, std::move(out), {m},
                          [r, c](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (int i = 0; i < r; ++i) {
                                      for (int j = 0; j < c; ++j) {
                                          (*pg[0])[static_cast<std::size_t>(i) * c + j] +=
                                              g[static_cast<std::size_t>(j) * r + i];
                                      }
                                  }
                              }
                          });
}

// ----------------------------- reductions & nonlinearity -----------------------------

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    return make_op_result({1}, {s}, {a},
                          [](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (auto& x : *pg[0]) {
                                      x += g[0];
                                  }
                              }
                          });
}

Tensor sum_squares(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v * v;
    }
    auto an = a.node();
    return make_op_result({1}, {s}, {a},
                          [an](const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (std::size_t i = 0; i < pg[0]->size(); ++i) {
                                      (*pg[0])[i] += 2.0 * an->value[i] * g[0];
                                  }
                              }
                          });
}

Tensor sigmoid(const Tensor& a) {
    auto da = a.data();
    std::vector<double> out(da.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = da[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    auto result = make_op_result(a.shape(), std::move(out), {a}, nullptr);
    if (result.requires_grad()) {
        auto rn = result.node();
        rn->backward = [rn](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& pg) {
            if (pg[0]) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double s = rn->value[i];
                    (*pg[0])[i] += g[i] * s * (1.0 - s);
                }
            }
        };
    }
    return result;
}

Tensor rms_norm_rows(const Tensor& x, const Tensor& gain, double eps) {
    if (x.ndim() != 2 || gain.ndim() != 1 || gain.dim(0) != x.dim(1)) {
        throw ShapeError("rms_norm_rows expects (n,d) with gain (d), got " +
                         shape_str(x.shape()) + " and " + shape_str(gain.shape()));
    }
    const int n = x.dim(0);
    const int d = x.dim(1);
    auto dx = x.data();
    auto dg = gain.data();
    std::vector<double> out(dx.size());
    std::vector<double> inv_rms(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double ms = 0.0;
        for (int j = 0; j < d; ++j) {
            const double v = dx[static_cast<std::size_t>(i) * d + j];
            ms += v * v;
        }
        ms /= d;
        const double r = 1.0 / std::sqrt(ms + eps);
        inv_rms[static_cast<std::size_t>(i)] = r;
        for (int j = 0; j < d; ++j) {
            out[static_cast<std::size_t>(i) * d + j] =
                dx[static_cast<std::size_t>(i) * d + j] * r * dg[static_cast<std::size_t>(j)];
        }
    }
    auto xn = x.node();
    auto gn = gain.node();
    return make_op_result(
        x.shape(), std::move(out), {x, gain},
        [xn, gn, n, d, inv_rms](const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& pg) {
            for (int i = 0; i < n; ++i) {
                const double r = inv_rms[static_cast<std::size_t>(i)];
                const std::size_t off = static_cast<std::size_t>(i) * d;
                if (pg[0]) {
                    // dL/dx = g.go*r - (r^3 x / d) * sum_j(go_j g_j x_j)
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j) {
                        dot += g[off + j] * gn->value[static_cast<std::size_t>(j)] *
                               xn->value[off + j];
                    }
                    const double coef = r * r * r * dot / d;
                    for (int j = 0; j < d; ++j) {
                        (*pg[0])[off + j] += g[off + j] *
                                                 gn->value[static_cast<std::size_t>(j)] * r -
                                             coef * xn->value[off + j];
                    }
                }
                if (pg[1]) {
                    for (int j = 0; j < d; ++j) {
                        (*pg[1])[static_cast<std::size_t>(j)] += g[off + j] * xn->value[off + j] * r;
                    }
                }
            }
        });
}

Tensor unit_rows(const Tensor& x, double eps) {
    if (x.ndim() != 2) {
        throw ShapeError("unit_rows expects a matrix, got " + shape_str(x.shape()));
    }
    const int n = x.dim(0);
    const int d = x.dim(1);
    auto dx = x.data();
    std::vector<double> out(dx.size());
    std::vector<double> inv_norm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double ss = eps * eps;
        for (int j = 0; j < d; ++j) {
            const double v = dx[static_cast<std::size_t>(i) * d + j];
            ss += v * v;
        }
        const double r = 1.0 / std::sqrt(ss);
        inv_norm[static_cast<std::size_t>(i)] = r;
        for (int j = 0; j < d; ++j) {
            out[static_cast<std::size_t>(i) * d + j] = dx[static_cast<std::size_t>(i) * d + j] * r;
        }
    }
    auto xn = x.node();
    return make_op_result(
        x.shape(), std::move(out), {x},
        [xn, n, d, inv_norm](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) {
                return;
            }
            for (int i = 0; i < n; ++i) {
                const double r = inv_norm[static_cast<std::size_t>(i)];
                const std::size_t off = static_cast<std::size_t>(i) * d;
                double dot = 0.0;
                for (int j = 0; j < d; ++j) {
                    dot += g[off + j] * xn->value[off + j];
                }
                // dL/dx = r*go - r^3 * x * <go, x>
                const double coef = r * r * r * dot;
                for (int j = 0; j < d; ++j) {
                    (*pg[0])[off + j] += g[off + j] * r - coef * xn->value[off + j];
                }
            }
        });
}

namespace {

// Shared softmax backward over a row span: dx = p .* (g - <g,p>).
void softmax_row_backward(std::span<const double> p, std::span<const double> g,
                          std::span<double> dx) {
    double dot = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        dot += g[j] * p[j];
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
        dx[j] += p[j] * (g[j] - dot);
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
    if (x.ndim() != 2) {
        throw ShapeError("softmax_rows expects a matrix, got " + shape_str(x.shape()));
    }
    const int n = x.dim(0);
    const int d = x.dim(1);
    auto dx = x.data();
    std::vector<double> out(dx.size());
    for (int i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * d;
        double mx = dx[off];
        for (int j = 1; j < d; ++j) {
            mx = std::max(mx, dx[off + j]);
        }
        double z = 0.0;
        for (int j = 0; j < d; ++j) {
            out[off + j] = std::exp(dx[off + j] - mx);
            z += out[off + j];
        }
        for (int j = 0; j < d; ++j) {
            out[off + j] /= z;
        }
    }
    auto result = make_op_result(x.shape(), std::move(out), {x}, nullptr);
    if (result.requires_grad()) {
        auto rn = result.node();
        rn->backward = [rn, n, d](const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) {
                return;
            }
            for (int i = 0; i < n; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * d;
                softmax_row_backward({rn->value.data() + off, static_cast<std::size_t>(d)},
                                     {g.data() + off, static_cast<std::size_t>(d)},
                                     {pg[0]->data() + off, static_cast<std::size_t>(d)});
            }
        };
    }
    return result;
}

Tensor causal_softmax_rows(const Tensor& x) {
    if (x.ndim() != 2 || x.dim(0) != x.dim(1)) {
        throw ShapeError("causal_softmax_rows expects a square matrix, got " +
                         shape_str(x.shape()));
    }
    const int n = x.dim(0);
    auto dx = x.data();
    std::vector<double> out(dx.size(), 0.0);
    for (int i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * n;
        double mx = dx[off];
        for (int j = 1; j <= i; ++j) {
            mx = std::max(mx, dx[off + j]);
        }
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
            out[off + j] = std::exp(dx[off + j] - mx);
            z += out[off + j];
        }
        for (int j = 0; j <= i; ++j) {
            out[off + j] /= z;
        }
    }
    auto result = make_op_result(x.shape(), std::move(out), {x}, nullptr);
    if (result.requires_grad()) {
        auto rn = result.node();
        rn->backward = [rn, n](const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& pg) {
            if (!pg[0]) {
                return;
            }
            for (int i = 0; i < n; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * n;
                const std::size_t w = static_cast<std::size_t>(i) + 1;
                softmax_row_backward({rn->value.data() + off, w}, {g.data() + off, w},
                                     {pg[0]->data() + off, w});
            }
        };
    }
    return result;
}

Tensor log_softmax_cross_entropy(const Tensor& logits, int target) {
    if (logits.ndim() != 1) {
        throw ShapeError("log_softmax_cross_entropy expects a vector of logits, got " +
                         shape_str(logits.shape()));
    }
    const int v = logits.dim(0);
    if (v < 2) {
        throw ContractError("log_softmax_cross_entropy requires vocab >= 2, got " +
                            std::to_string(v));
    }
    if (target < 0 || target >= v) {
        throw IndexError("cross-entropy target " + std::to_string(target) +
                         " out of range for vocab " + std::to_string(v));
    }
    auto dl = logits.data();
    double mx = dl[0];
    for (int j = 1; j < v; ++j) {
        mx = std::max(mx, dl[static_cast<std::size_t>(j)]);
    }
    double z = 0.0;
    for (int j = 0; j < v; ++j) {
        z += std::exp(dl[static_cast<std::size_t>(j)] - mx);
    }
    const double lse = mx + std::log(z);
    const double loss = lse - dl[static_cast<std::size_t>(target)];
    auto ln = logits.node();
    return make_op_result({1}, {loss}, {logits},
                          [ln, target, mx, z, v](const std::vector<double>& g,
                                                 const std::vector<std::vector<double>*>& pg) {
                              if (!pg[0]) {
                                  return;
                              }
                              for (int j = 0; j < v; ++j) {
                                  const double p =
                                      std::exp(ln->value[static_cast<std::size_t>(j)] - mx) / z;
                                  (*pg[0])[static_cast<std::size_t>(j)] +=
                                      g[0] * (p - (j == target ? 1.0 : 0.0));
                              }
                          });
}

// ----------------------------- structural ops -----------------------------

Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
    if (table.ndim() != 2) {
        throw ShapeError("embedding_rows expects (vocab,d) table, got " +
                         shape_str(table.shape()));
    }
    const int vocab = table.dim(0);
    const int d = table.dim(1);
    const int n = static_cast<int>(ids.size());
    auto dt = table.data();
    std::vector<double> out(static_cast<std::size_t>(n) * d);
    std::vector<int> idv(ids.begin(), ids.end());
    for (int i = 0; i < n; ++i) {
        const int id = idv[static_cast<std::size_t>(i)];
        if (id < 0 || id >= vocab) {
            throw IndexError("token id " + std::to_string(id) + " out of range for vocab " +
                             std::to_string(vocab));
        }
        std::copy_n(dt.data() + static_cast<std::size_t>(id) * d, d,
                    out.data() + static_cast<std::size_t>(i) * d);
    }
    return make_op_result({n, d}, std::move(out), {table},
                          [idv, d](const std::vector<double>& g,
                                   const std::vector<std::vector<double>*>& pg) {
                              if (!pg[0]) {
                                  return;
                              }
                              for (std::size_t i = 0; i < idv.size(); ++i) {
                                  const std::size_t src = i * static_cast<std::size_t>(d);
                                  const std::size_t dst =
                                      static_cast<std::size_t>(idv[i]) * static_cast<std::size_t>(d);
                                  for (int j = 0; j < d; ++j) {
                                      (*pg[0])[dst + j] += g[src + j];
                                  }
                              }
                          });
}

Tensor row(const Tensor& m, int r) {
    if (m.ndim() != 2) {
        throw ShapeError("row expects a matrix, got " + shape_str(m.shape()));
    }
    const int rows = m.dim(0);
    const int cols = m.dim(1);
    if (r < 0 || r >= rows) {
        throw IndexError("row " + std::to_string(r) + " out of range for " +
                         shape_str(m.shape()));
    }
    auto dm = m.data();
    std::vector<double> out(dm.begin() + static_cast<std::ptrdiff_t>(r) * cols,
                            dm.begin() + (static_cast<std::ptrdiff_t>(r) + 1) * cols);
    return make_op_result({cols}, std::move(out), {m},
                          [r, cols](const std::vector<double>& g,
                                    const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  const std::size_t off =
                                      static_cast<std::size_t>(r) * static_cast<std::size_t>(cols);
                                  for (int j = 0; j < cols; ++j) {
                                      (*pg[0])[off + j] += g[static_cast<std::size_t>(j)];
                                  }
                              }
                          });
}

Tensor slice_cols(const Tensor& m, int c0, int c1) {
    if (m.ndim() != 2) {
        throw ShapeError("slice_cols expects a matrix, got " + shape_str(m.shape()));
    }
    const int rows = m.dim(0);
    const int cols = m.dim(1);
    if (c0 < 0 || c1 > cols || c0 >= c1) {
        throw IndexError("column slice [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") invalid for " + shape_str(m.shape()));
    }
    const int w = c1 - c0;
    auto dm = m.data();
    std::vector<double> out(static_cast<std::size_t>(rows) * w);
    for (int i = 0; i < rows; ++i) {
        std::copy_n(dm.data() + static_cast<std::size_t>(i) * cols + c0, w,
                    out.data() + static_cast<std::size_t>(i) * w);
    }
    return make_op_result({rows, w}, std::move(out), {m},
                          [rows, cols, c0, w](const std::vector<double>& g,
                                              const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (int i = 0; i < rows; ++i) {
                                      for (int j = 0; j < w; ++j) {
                                          (*pg[0])[static_cast<std::size_t>(i) * cols + c0 + j] +=
                                              g[static_cast<std::size_t>(i) * w + j];
                                      }
                                  }
                              }
                          });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) {
        throw ContractError("stack_rows: empty row list");
    }
    const int cols = rows.front().dim(0);
    for (const auto& r : rows) {
        if (r.ndim() != 1 || r.dim(0) != cols) {
            throw ShapeError("stack_rows: inconsistent row shapes");
        }
    }
    const int n = static_cast<int>(rows.size());
    std::vector<double> out(static_cast<std::size_t>(n) * cols);
    for (int i = 0; i < n; ++i) {
        auto d = rows[static_cast<std::size_t>(i)].data();
        std::copy(d.begin(), d.end(), out.begin() + static_cast<std::ptrdiff_t>(i) * cols);
    }
    return make_op_result({n, cols}, std::move(out), rows,
                          [cols](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& pg) {
                              for (std::size_t i = 0; i < pg.size(); ++i) {
                                  if (pg[i]) {
                                      const std::size_t off = i * static_cast<std::size_t>(cols);
                                      for (int j = 0; j < cols; ++j) {
                                          (*pg[i])[static_cast<std::size_t>(j)] += g[off + j];
                                      }
                                  }
                              }
                          });
}

Tensor concat_cols(const std::vector<Tensor>& mats) {
    if (mats.empty()) {
        throw ContractError("concat_cols: empty list");
    }
    const int rows = mats.front().dim(0);
    int total = 0;
    for (const auto& m : mats) {
        if (m.ndim() != 2 || m.dim(0) != rows) {
            throw ShapeError("concat_cols: inconsistent row counts");
        }
        total += m.dim(1);
    }
    std::vector<double> out(static_cast<std::size_t>(rows) * total);
    int c = 0;
    for (const auto& m : mats) {
        const int w = m.dim(1);
        auto dm = m.data();
        for (int i = 0; i < rows; ++i) {
            std::copy_n(dm.data() + static_cast<std::size_t>(i) * w, w,
                        out.data() + static_cast<std::size_t>(i) * total + c);
        }
        c += w;
    }
    std::vector<int> widths;
    widths.reserve(mats.size());
    for (const auto& m : mats) {
        widths.push_back(m.dim(1));
    }
    return make_op_result({rows, total}, std::move(out), mats,
                          [rows, total, widths](const std::vector<double>& g,
                                                const std::vector<std::vector<double>*>& pg) {
                              int c = 0;
                              for (std::size_t p = 0; p < pg.size(); ++p) {
                                  const int w = widths[p];
                                  if (pg[p]) {
                                      for (int i = 0; i < rows; ++i) {
                                          for (int j = 0; j < w; ++j) {
                                              (*pg[p])[static_cast<std::size_t>(i) * w + j] +=
                                                  g[static_cast<std::size_t>(i) * total + c + j];
                                          }
                                      }
                                  }
                                  c += w;
                              }
                          });
}

Tensor add_row_broadcast(const Tensor& m, const Tensor& b) {
    if (m.ndim() != 2 || b.ndim() != 1 || b.dim(0) != m.dim(1)) {
        throw ShapeError("add_row_broadcast expects (n,d) + (d), got " + shape_str(m.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const int n = m.dim(0);
    const int d = m.dim(1);
    auto dm = m.data();
    auto db = b.data();
    std::vector<double> out(dm.size());
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            out[static_cast<std::size_t>(i) * d + j] =
                dm[static_cast<std::size_t>(i) * d + j] + db[static_cast<std::size_t>(j)];
        }
    }
    return make_op_result(m.shape(), std::move(out), {m, b},
                          [n, d](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*pg[0])[i] += g[i];
                                  }
                              }
                              if (pg[1]) {
                                  for (int i = 0; i < n; ++i) {
                                      for (int j = 0; j < d; ++j) {
                                          (*pg[1])[static_cast<std::size_t>(j)] +=
                                              g[static_cast<std::size_t>(i) * d + j];
                                      }
                                  }
                              }
                          });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_op_result(std::move(shape), std::move(out), {a},
                          [](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      (*pg[0])[i] += g[i];
                                  }
                              }
                          });
}

Tensor elem(const Tensor& a, std::int64_t flat_index) {
    if (flat_index < 0 || flat_index >= a.size()) {
        throw IndexError("elem index " + std::to_string(flat_index) + " out of range for " +
                         shape_str(a.shape()));
    }
    return make_op_result({1}, {a.data()[static_cast<std::size_t>(flat_index)]}, {a},
                          [flat_index](const std::vector<double>& g,
                                       const std::vector<std::vector<double>*>& pg) {
                              if (pg[0]) {
                                  (*pg[0])[static_cast<std::size_t>(flat_index)] += g[0];
                              }
                          });
}

std::vector<double> softmax_values(std::span<const double> logits, double temperature) {
    if (temperature <= 0.0) {
        throw ContractError("softmax temperature must be positive");
    }
    std::vector<double> p(logits.size());
    double mx = logits[0] / temperature;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        mx = std::max(mx, logits[i] / temperature);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] / temperature - mx);
        z += p[i];
    }
    for (auto& v : p) {
        v /= z;
    }
    return p;
}

// ----------------------------- grad tape -----------------------------

Tensor GradTape::leaf(Shape shape, std::vector<double> init) {
    auto t = Tensor::from(std::move(shape), std::move(init));
    t.node()->requires_grad = true;
    t.node()->leaf = true;
    leaves_.push_back(t);
    return t;
}

Tensor GradTape::leaf_zeros(Shape shape) {
    const auto n = numel(shape);
    return leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor GradTape::leaf_like(const Tensor& values) {
    return leaf(values.shape(), {values.data().begin(), values.data().end()});
}

const Tensor& GradMap::grad(const Tensor& leaf) const {
    auto it = grads_.find(leaf.node().get());
    if (it == grads_.end()) {
        throw ContractError("grad requested for a tensor that is not a leaf of this tape");
    }
    return it->second;
}

bool GradMap::has(const Tensor& leaf) const {
    return grads_.count(leaf.node().get()) > 0;
}

GradMap GradTape::backward(const Tensor& loss) const {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward requires a scalar loss");
    }
    GradMap result;
    // Zero gradients for every registered leaf up front; unused leaves keep them.
    for (const auto& l : leaves_) {
        result.grads_.emplace(l.node().get(), Tensor::zeros(l.shape()));
    }
    if (!loss.requires_grad()) {
        return result;
    }

    // Iterative post-order topological sort over grad-requiring nodes.
    std::vector<Node*> order;
    std::unordered_map<Node*, int> state;  // 0 unseen, 1 in progress, 2 done
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    state[loss.node().get()] = 1;
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* parent = node->parents[idx].get();
            ++idx;
            if (parent->requires_grad && state[parent] == 0) {
                state[parent] = 1;
                stack.emplace_back(parent, 0);
            }
        } else {
            state[node] = 2;
            order.push_back(node);
            stack.pop_back();
        }
    }

    std::unordered_map<Node*, std::vector<double>> grad_buf;
    grad_buf[loss.node().get()] = {1.0};

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        auto git = grad_buf.find(node);
        if (git == grad_buf.end() || node->parents.empty() || !node->backward) {
            continue;
        }
        std::vector<std::vector<double>*> parent_grads(node->parents.size(), nullptr);
        for (std::size_t p = 0; p < node->parents.size(); ++p) {
            Node* parent = node->parents[p].get();
            if (!parent->requires_grad) {
                continue;
            }
            auto [pit, inserted] = grad_buf.try_emplace(parent);
            if (inserted) {
                pit->second.assign(parent->value.size(), 0.0);
            }
            parent_grads[p] = &pit->second;
        }
        node->backward(git->second, parent_grads);
    }

    for (const auto& l : leaves_) {
        auto git = grad_buf.find(l.node().get());
        if (git != grad_buf.end()) {
            result.grads_[l.node().get()] = Tensor::from(l.shape(), std::move(git->second));
        }
    }
    return result;
}

// ----------------------------- rng -----------------------------

namespace {

std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

}  // namespace

std::uint64_t Prng::next_u64() {
    ++counter_;
    return mix64(seed_ + counter_ * kGolden);
}

double Prng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Prng::normal(double mean, double stddev) {
    if (have_spare_) {
        have_spare_ = false;
        return mean + stddev * spare_;
    }
    // Box-Muller; u1 in (0,1] so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
}

int Prng::uniform_int(int n) {
    if (n <= 0) {
        throw ContractError("uniform_int requires n > 0");
    }
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x = next_u64();
    while (x >= limit) {
        x = next_u64();
    }
    return static_cast<int>(x % bound);
}

Prng Prng::split(std::uint64_t stream) const {
    return Prng(mix64(seed_ ^ mix64(stream + kGolden)));
}

std::vector<double> Prng::normal_vec(std::int64_t n, double mean, double stddev) {
    std::vector<double> out(static_cast<std::size_t>(n));
    for (auto& v : out) {
        v = normal(mean, stddev);
    }
    return out;
}

// ----------------------------- adam -----------------------------

AdamResult adam_step(const Tensor& param, const Tensor& grad, const Tensor& moment1,
                     const Tensor& moment2, int step_index, const AdamHyper& hp) {
    if (!same_shape(param, grad) || !same_shape(param, moment1) || !same_shape(param, moment2)) {
        throw ShapeError("adam_step: parameter/gradient/moment shapes disagree");
    }
    if (step_index < 1) {
        throw ContractError("adam_step: step_index must be >= 1");
    }
    auto p = param.data();
    auto g = grad.data();
    auto m = moment1.data();
    auto v = moment2.data();
    std::vector<double> np(p.size()), nm(p.size()), nv(p.size());
    const double bc1 = 1.0 - std::pow(hp.beta1, step_index);
    const double bc2 = 1.0 - std::pow(hp.beta2, step_index);
    for (std::size_t i = 0; i < p.size(); ++i) {
        nm[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        nv[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        const double mhat = nm[i] / bc1;
        const double vhat = nv[i] / bc2;
        np[i] = p[i] - hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
    return AdamResult{Tensor::from(param.shape(), std::move(np)),
                      Tensor::from(param.shape(), std::move(nm)),
                      Tensor::from(param.shape(), std::move(nv))};
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, AdamHyper hp)
    : params_(std::move(params)), hp_(hp) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }
}

void AdamOptimizer::step(const GradMap& grads) {
    ++step_;
    const double bc1 = 1.0 - std::pow(hp_.beta1, step_);
    const double bc2 = 1.0 - std::pow(hp_.beta2, step_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& param = params_[k];
        auto g = grads.grad(param).data();
        auto pv = param.node()->value.data();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < m.size(); ++i) {
            m[i] = hp_.beta1 * m[i] + (1.0 - hp_.beta1) * g[i];
            v[i] = hp_.beta2 * v[i] + (1.0 - hp_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            pv[i] -= hp_.lr * mhat / (std::sqrt(vhat) + hp_.eps);
        }
    }
}

}  // namespace s0lab
