#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "handfit/errors.hpp"
#include "handfit/tensor.hpp"

namespace handfit::diff {

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid for the tape's lifetime.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// An optimizable leaf living outside any tape. Gradients accumulate across
// backward passes until zero_grad().
struct Param {
    Tensor value;
    Tensor grad;
    bool requires_grad = true;

    Param() = default;
    explicit Param(Tensor v) : value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

    void zero_grad() { grad = Tensor::zeros(value.shape()); }
};

// Append-only reverse-mode tape. Nodes reference strictly earlier nodes, so
// the graph is topologically ordered by construction and backward() is a
// single reverse sweep that visits each node once.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    const Tensor& value(Value v) const {
        const Node& n = nodes_[check(v)];
        return n.external ? *n.external : n.value;
    }

    const Tensor& node_value(int id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        return n.external ? *n.external : n.value;
    }

    double scalar(Value v) const {
        const Tensor& t = value(v);
        if (t.numel() != 1) throw ContractError("scalar(): node has numel " + std::to_string(t.numel()));
        return t[0];
    }

    // ---- leaves ----------------------------------------------------------

    Value constant(Tensor t) { return push(std::move(t), false, nullptr, "constant"); }

    Value constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // The param's value is referenced, not copied; it must stay alive and
    // unmodified for the tape's reads (mutate it only between iterations).
    Value param(Param& p) {
        Param* pp = &p;
        Node n;
        n.external = &p.value;
        n.needs = p.requires_grad;
        if (n.needs)
            n.back = [pp](Tape&, const Tensor& g) {
                if (pp->requires_grad) pp->grad.add_scaled(g, 1.0);
            };
        n.op = "param";
        nodes_.push_back(std::move(n));
        return Value{this, static_cast<int>(nodes_.size()) - 1};
    }

    // ---- elementwise binary (scalar operands broadcast) ------------------

    Value add(Value a, Value b) { return binary(a, b, "add", BinKind::Add); }
    Value sub(Value a, Value b) { return binary(a, b, "sub", BinKind::Sub); }
    Value mul(Value a, Value b) { return binary(a, b, "mul", BinKind::Mul); }
    Value div(Value a, Value b) { return binary(a, b, "div", BinKind::Div); }

    Value scale(Value a, double k) {
        const Tensor& x = value(a);
        Tensor out = x;
        for (double& v : out.data()) v *= k;
        int ia = a.id;
        return push(std::move(out), needs_grad(a),
                    [ia, k](Tape& t, const Tensor& g) { t.add_grad_scaled(ia, g, k); }, "scale");
    }

    Value neg(Value a) { return scale(a, -1.0); }

    // ---- elementwise unary ------------------------------------------------

    Value relu(Value a) {
        return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                     [](double x) { return x > 0 ? 1.0 : 0.0; });
    }

    Value max_with(Value a, double c) {
        int ia = a.id;
        const Tensor& x = value(a);
        Tensor out = x;
        Tensor part = Tensor::zeros(x.shape());
        for (std::size_t i = 0; i < out.numel(); ++i) {
            if (out[i] > c) {
                part[i] = 1.0;
            } else {
                out[i] = c;
            }
        }
        auto dp = std::make_shared<Tensor>(std::move(part));
        return push(std::move(out), needs_grad(a),
                    [ia, dp](Tape& t, const Tensor& g) { t.add_grad_weighted(ia, g, *dp); },
                    "max_with");
    }

    Value tanh(Value a) {
        return unary(a, "tanh", [](double x) { return std::tanh(x); },
                     [](double x) {
                         double t = std::tanh(x);
                         return 1.0 - t * t;
                     });
    }

    Value abs(Value a) {
        return unary(a, "abs", [](double x) { return std::fabs(x); },
                     [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
    }

    // Subgradient 0 at the origin keeps norm chains finite.
    Value sqrt(Value a) {
        return unary(a, "sqrt", [](double x) { return std::sqrt(x); },
                     [](double x) { return x > 0 ? 0.5 / std::sqrt(x) : 0.0; });
    }

    Value sin(Value a) {
        return unary(a, "sin", [](double x) { return std::sin(x); },
                     [](double x) { return std::cos(x); });
    }

    Value cos(Value a) {
        return unary(a, "cos", [](double x) { return std::cos(x); },
                     [](double x) { return -std::sin(x); });
    }

    // Generic elementwise op recorded with explicit local partials.
    Value unary(Value a, const char* name, double (*f)(double), double (*df)(double)) {
        const Tensor& x = value(a);
        Tensor out = Tensor::zeros(x.shape());
        Tensor part = Tensor::zeros(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) {
            out[i] = f(x[i]);
            part[i] = df(x[i]);
        }
        int ia = a.id;
        auto dp = std::make_shared<Tensor>(std::move(part));
        return push(std::move(out), needs_grad(a),
                    [ia, dp](Tape& t, const Tensor& g) { t.add_grad_weighted(ia, g, *dp); }, name);
    }

    // ---- linear algebra ----------------------------------------------------

    // [m,k] x [k,n] -> [m,n], or [m,k] x [k] -> [m].
    Value matmul(Value a, Value b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.rank() != 2 || B.rank() < 1 || B.rank() > 2 || A.cols() != B.rows())
            throw ShapeError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
        Tensor out = matmul_plain(A, B);
        int ia = a.id, ib = b.id;
        return push(std::move(out), needs_grad(a) || needs_grad(b),
                    [ia, ib](Tape& t, const Tensor& g) {
                        const Tensor& A2 = t.node_value(ia);
                        const Tensor& B2 = t.node_value(ib);
                        const std::size_t m = A2.rows(), k = A2.cols();
                        const std::size_t n = B2.rank() == 1 ? 1 : B2.cols();
                        if (t.wants_grad(ia)) {
                            Tensor ga = Tensor::zeros(A2.shape());
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t p = 0; p < k; ++p) {
                                    double s = 0;
                                    for (std::size_t j = 0; j < n; ++j)
                                        s += g[i * n + j] * B2[p * n + j];
                                    ga[i * k + p] = s;
                                }
                            t.accumulate(ia, ga);
                        }
                        if (t.wants_grad(ib)) {
                            Tensor gb = Tensor::zeros(B2.shape());
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t p = 0; p < k; ++p) {
                                    const double av = A2[i * k + p];
                                    if (av == 0.0) continue;
                                    for (std::size_t j = 0; j < n; ++j)
                                        gb[p * n + j] += av * g[i * n + j];
                                }
                            t.accumulate(ib, gb);
                        }
                    },
                    "matmul");
    }

    Value transpose(Value a) {
        const Tensor& A = value(a);
        if (A.rank() != 2) throw ShapeError("transpose: rank-2 required, got " + shape_str(A.shape()));
        int ia = a.id;
        return push(transpose_plain(A), needs_grad(a),
                    [ia](Tape& t, const Tensor& g) {
                        if (t.wants_grad(ia)) t.accumulate(ia, transpose_plain(g));
                    },
                    "transpose");
    }

    // ---- reductions --------------------------------------------------------

    Value sum(Value a) {
        const Tensor& x = value(a);
        double s = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
        int ia = a.id;
        return push(Tensor::scalar(s), needs_grad(a),
                    [ia](Tape& t, const Tensor& g) {
                        const Tensor& x2 = t.node_value(ia);
                        Tensor gx = Tensor::full(x2.shape(), g[0]);
                        t.accumulate(ia, gx);
                    },
                    "sum");
    }

    Value mean(Value a) {
        const std::size_t n = value(a).numel();
        return scale(sum(a), 1.0 / static_cast<double>(n));
    }

    // [m,n] -> [m] row sums.
    Value sum_rows(Value a) {
        const Tensor& x = value(a);
        if (x.rank() != 2) throw ShapeError("sum_rows: rank-2 required, got " + shape_str(x.shape()));
        const std::size_t m = x.rows(), n = x.cols();
        Tensor out = Tensor::zeros({m});
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < n; ++j) s += x[i * n + j];
            out[i] = s;
        }
        int ia = a.id;
        return push(std::move(out), needs_grad(a),
                    [ia, m, n](Tape& t, const Tensor& g) {
                        Tensor gx = Tensor::zeros({m, n});
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] = g[i];
                        t.accumulate(ia, gx);
                    },
                    "sum_rows");
    }

    // ---- indexing ----------------------------------------------------------

    Value gather(Value a, std::vector<std::size_t> idx) {
        const Tensor& x = value(a);
        for (std::size_t i : idx)
            if (i >= x.numel()) throw ShapeError("gather: index " + std::to_string(i) + " out of range");
        Tensor out = Tensor::zeros({idx.size()});
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x[idx[i]];
        int ia = a.id;
        auto ix = std::make_shared<const std::vector<std::size_t>>(std::move(idx));
        return push(std::move(out), needs_grad(a),
                    [ia, ix](Tape& t, const Tensor& g) {
                        const Tensor& x2 = t.node_value(ia);
                        Tensor gx = Tensor::zeros(x2.shape());
                        for (std::size_t i = 0; i < ix->size(); ++i) gx[(*ix)[i]] += g[i];
                        t.accumulate(ia, gx);
                    },
                    "gather");
    }

    // [m,n] + row list -> [r,n].
    Value gather_rows(Value a, std::vector<std::size_t> rows) {
        const Tensor& x = value(a);
        if (x.rank() != 2) throw ShapeError("gather_rows: rank-2 required, got " + shape_str(x.shape()));
        const std::size_t n = x.cols();
        for (std::size_t r : rows)
            if (r >= x.rows()) throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range");
        Tensor out = Tensor::zeros({rows.size(), n});
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[rows[i] * n + j];
        int ia = a.id;
        auto ix = std::make_shared<const std::vector<std::size_t>>(std::move(rows));
        return push(std::move(out), needs_grad(a),
                    [ia, ix, n](Tape& t, const Tensor& g) {
                        const Tensor& x2 = t.node_value(ia);
                        Tensor gx = Tensor::zeros(x2.shape());
                        for (std::size_t i = 0; i < ix->size(); ++i)
                            for (std::size_t j = 0; j < n; ++j) gx[(*ix)[i] * n + j] += g[i * n + j];
                        t.accumulate(ia, gx);
                    },
                    "gather_rows");
    }

    // out[idx[i]] += src[i] over a zero tensor of the given shape.
    Value scatter_add(Value src, std::vector<std::size_t> idx, Shape out_shape) {
        const Tensor& x = value(src);
        if (idx.size() != x.numel())
            throw ShapeError("scatter_add: " + std::to_string(idx.size()) + " indices for " +
                             std::to_string(x.numel()) + " values");
        Tensor out = Tensor::zeros(std::move(out_shape));
        for (std::size_t i : idx)
            if (i >= out.numel()) throw ShapeError("scatter_add: index " + std::to_string(i) + " out of range");
        for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] += x[i];
        int ia = src.id;
        auto ix = std::make_shared<const std::vector<std::size_t>>(std::move(idx));
        return push(std::move(out), needs_grad(src),
                    [ia, ix](Tape& t, const Tensor& g) {
                        Tensor gx = Tensor::zeros({ix->size()});
                        for (std::size_t i = 0; i < ix->size(); ++i) gx[i] = g[(*ix)[i]];
                        t.accumulate(ia, gx);
                    },
                    "scatter_add");
    }

    Value stop_gradient(Value a) { return push(value(a), false, nullptr, "stop_gradient"); }

    Value reshape(Value a, Shape s) {
        const Tensor& x = value(a);
        Tensor out = x.reshaped(std::move(s));
        int ia = a.id;
        return push(std::move(out), needs_grad(a),
                    [ia](Tape& t, const Tensor& g) {
                        const Tensor& x2 = t.node_value(ia);
                        t.accumulate(ia, g.reshaped(x2.shape()));
                    },
                    "reshape");
    }

    // n values of shape [k] (or scalars) stacked into [n,k].
    Value stack_rows(const std::vector<Value>& vs) {
        if (vs.empty()) throw ContractError("stack_rows: no inputs");
        const std::size_t k = value(vs[0]).numel();
        Tensor out = Tensor::zeros({vs.size(), k});
        bool req = false;
        std::vector<int> ids(vs.size());
        for (std::size_t i = 0; i < vs.size(); ++i) {
            const Tensor& x = value(vs[i]);
            if (x.numel() != k) throw ShapeError("stack_rows: ragged inputs");
            for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x[j];
            req = req || needs_grad(vs[i]);
            ids[i] = vs[i].id;
        }
        auto pids = std::make_shared<const std::vector<int>>(std::move(ids));
        return push(std::move(out), req,
                    [pids, k](Tape& t, const Tensor& g) {
                        for (std::size_t i = 0; i < pids->size(); ++i) {
                            const int id = (*pids)[i];
                            if (!t.wants_grad(id)) continue;
                            const Tensor& x2 = t.node_value(id);
                            Tensor gx = Tensor::zeros(x2.shape());
                            for (std::size_t j = 0; j < k; ++j) gx[j] = g[i * k + j];
                            t.accumulate(id, gx);
                        }
                    },
                    "stack_rows");
    }

    // ---- broadcast helpers ---------------------------------------------------

    // X[m,n] + r[n] per row.
    Value add_rowvec(Value a, Value b) {
        const Tensor& X = value(a);
        const Tensor& r = value(b);
        if (X.rank() != 2 || r.numel() != X.cols())
            throw ShapeError("add_rowvec: " + shape_str(X.shape()) + " + " + shape_str(r.shape()));
        const std::size_t m = X.rows(), n = X.cols();
        Tensor out = X;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += r[j];
        int ia = a.id, ib = b.id;
        return push(std::move(out), needs_grad(a) || needs_grad(b),
                    [ia, ib, m, n](Tape& t, const Tensor& g) {
                        t.add_grad_scaled(ia, g, 1.0);
                        if (t.wants_grad(ib)) {
                            Tensor gr = Tensor::zeros({n});
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
                            t.accumulate(ib, gr);
                        }
                    },
                    "add_rowvec");
    }

    // X[m,n] * c[m] per column.
    Value mul_colvec(Value a, Value b) {
        const Tensor& X = value(a);
        const Tensor& c = value(b);
        if (X.rank() != 2 || c.numel() != X.rows())
            throw ShapeError("mul_colvec: " + shape_str(X.shape()) + " * " + shape_str(c.shape()));
        const std::size_t m = X.rows(), n = X.cols();
        Tensor out = X;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= c[i];
        int ia = a.id, ib = b.id;
        return push(std::move(out), needs_grad(a) || needs_grad(b),
                    [ia, ib, m, n](Tape& t, const Tensor& g) {
                        const Tensor& X2 = t.node_value(ia);
                        const Tensor& c2 = t.node_value(ib);
                        if (t.wants_grad(ia)) {
                            Tensor gx = Tensor::zeros({m, n});
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] = g[i * n + j] * c2[i];
                            t.accumulate(ia, gx);
                        }
                        if (t.wants_grad(ib)) {
                            Tensor gc = Tensor::zeros({m});
                            for (std::size_t i = 0; i < m; ++i) {
                                double s = 0;
                                for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * X2[i * n + j];
                                gc[i] = s;
                            }
                            t.accumulate(ib, gc);
                        }
                    },
                    "mul_colvec");
    }

    // ---- fused / user-defined ops ---------------------------------------------

    // Record a node with a caller-supplied backward closure. The closure
    // receives the output gradient and must route contributions to the input
    // node ids via accumulate().
    Value custom(Tensor out, const std::vector<Value>& inputs, const char* name,
                 std::function<void(Tape&, const Tensor&)> backward) {
        bool req = false;
        for (Value v : inputs) req = req || needs_grad(v);
        return push(std::move(out), req, req ? std::move(backward) : nullptr, name);
    }

    // ---- backward ---------------------------------------------------------------

    // Reverse sweep from a scalar root. Param gradients accumulate; calling
    // twice without zero_grad doubles them.
    void backward(Value root) {
        check(root);
        if (value(root).numel() != 1)
            throw ContractError("backward: root must be scalar, has shape " +
                                shape_str(value(root).shape()));
        grads_.assign(nodes_.size(), Tensor{});
        grads_[static_cast<std::size_t>(root.id)] = Tensor::full(value(root).shape(), 1.0);
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.needs || grads_[static_cast<std::size_t>(i)].empty() || !n.back) continue;
            n.back(*this, grads_[static_cast<std::size_t>(i)]);
        }
        grads_.clear();
    }

    // Gradient routing used by op closures.
    bool wants_grad(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs; }

    void accumulate(int id, const Tensor& g) {
        if (!wants_grad(id)) return;
        Tensor& slot = grads_[static_cast<std::size_t>(id)];
        if (slot.empty())
            slot = g;
        else
            slot.add_scaled(g, 1.0);
    }

    void add_grad_scaled(int id, const Tensor& g, double k) {
        if (!wants_grad(id)) return;
        const Tensor& x = node_value(id);
        if (x.numel() == g.numel()) {
            Tensor& slot = grads_[static_cast<std::size_t>(id)];
            if (slot.empty()) slot = Tensor::zeros(x.shape());
            slot.add_scaled(g, k);
        } else {
            // operand was broadcast from a single element
            double s = 0;
            for (std::size_t i = 0; i < g.numel(); ++i) s += g[i];
            Tensor gx = Tensor::full(x.shape(), s * k);
            accumulate(id, gx);
        }
    }

    void add_grad_weighted(int id, const Tensor& g, const Tensor& w) {
        if (!wants_grad(id)) return;
        const Tensor& x = node_value(id);
        Tensor& slot = grads_[static_cast<std::size_t>(id)];
        if (slot.empty()) slot = Tensor::zeros(x.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) slot[i] += g[i] * w[i];
    }

private:
    enum class BinKind { Add, Sub, Mul, Div };

    struct Node {
        Tensor value;
        const Tensor* external = nullptr;  // param leaves reference, not copy
        bool needs = false;
        std::function<void(Tape&, const Tensor&)> back;
        const char* op = "";
    };

    // deque: references to node values stay valid while new nodes are recorded
    std::deque<Node> nodes_;
    std::vector<Tensor> grads_;

    std::size_t check(Value v) const {
        if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw ContractError("Value does not belong to this tape");
        return static_cast<std::size_t>(v.id);
    }

    bool needs_grad(Value v) const { return nodes_[check(v)].needs; }

    Value push(Tensor value, bool req, std::function<void(Tape&, const Tensor&)> back, const char* op) {
        Node n;
        n.value = std::move(value);
        n.needs = req;
        n.back = req ? std::move(back) : nullptr;
        n.op = op;
        nodes_.push_back(std::move(n));
        return Value{this, static_cast<int>(nodes_.size()) - 1};
    }

    Value binary(Value a, Value b, const char* name, BinKind kind) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        const bool sa = A.numel() == 1, sb = B.numel() == 1;
        if (!sa && !sb && !A.same_shape(B))
            throw ShapeError(std::string(name) + ": " + shape_str(A.shape()) + " vs " +
                             shape_str(B.shape()));
        const Tensor& big = sa ? B : A;
        Tensor out = Tensor::zeros(big.shape());
        const std::size_t n = out.numel();
        for (std::size_t i = 0; i < n; ++i) {
            const double x = A[sa ? 0 : i], y = B[sb ? 0 : i];
            switch (kind) {
                case BinKind::Add: out[i] = x + y; break;
                case BinKind::Sub: out[i] = x - y; break;
                case BinKind::Mul: out[i] = x * y; break;
                case BinKind::Div: out[i] = x / y; break;
            }
        }
        int ia = a.id, ib = b.id;
        std::function<void(Tape&, const Tensor&)> back;
        switch (kind) {
            case BinKind::Add:
                back = [ia, ib](Tape& t, const Tensor& g) {
                    t.add_grad_scaled(ia, g, 1.0);
                    t.add_grad_scaled(ib, g, 1.0);
                };
                break;
            case BinKind::Sub:
                back = [ia, ib](Tape& t, const Tensor& g) {
                    t.add_grad_scaled(ia, g, 1.0);
                    t.add_grad_scaled(ib, g, -1.0);
                };
                break;
            case BinKind::Mul:
                back = [ia, ib](Tape& t, const Tensor& g) {
                    const Tensor& A2 = t.node_value(ia);
                    const Tensor& B2 = t.node_value(ib);
                    t.add_grad_broadcast(ia, g, B2);
                    t.add_grad_broadcast(ib, g, A2);
                };
                break;
            case BinKind::Div:
                back = [ia, ib](Tape& t, const Tensor& g) {
                    const Tensor& A2 = t.node_value(ia);
                    const Tensor& B2 = t.node_value(ib);
                    const bool sa2 = A2.numel() == 1, sb2 = B2.numel() == 1;
                    if (t.wants_grad(ia)) {
                        Tensor w = Tensor::zeros(g.shape());
                        for (std::size_t i = 0; i < w.numel(); ++i) w[i] = 1.0 / B2[sb2 ? 0 : i];
                        t.add_grad_product(ia, g, w);
                    }
                    if (t.wants_grad(ib)) {
                        Tensor w = Tensor::zeros(g.shape());
                        for (std::size_t i = 0; i < w.numel(); ++i) {
                            const double y = B2[sb2 ? 0 : i];
                            w[i] = -A2[sa2 ? 0 : i] / (y * y);
                        }
                        t.add_grad_product(ib, g, w);
                    }
                };
                break;
        }
        return push(std::move(out), needs_grad(a) || needs_grad(b), std::move(back), name);
    }

    // grad contribution g * w routed to id, reducing if id's value was broadcast.
    void add_grad_broadcast(int id, const Tensor& g, const Tensor& other) {
        if (!wants_grad(id)) return;
        const Tensor& x = node_value(id);
        const bool so = other.numel() == 1;
        if (x.numel() == g.numel()) {
            Tensor& slot = grads_[static_cast<std::size_t>(id)];
            if (slot.empty()) slot = Tensor::zeros(x.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) slot[i] += g[i] * other[so ? 0 : i];
        } else {
            double s = 0;
            for (std::size_t i = 0; i < g.numel(); ++i) s += g[i] * other[so ? 0 : i];
            Tensor gx = Tensor::full(x.shape(), s);
            accumulate(id, gx);
        }
    }

    void add_grad_product(int id, const Tensor& g, const Tensor& w) {
        const Tensor& x = node_value(id);
        if (x.numel() == g.numel()) {
            Tensor& slot = grads_[static_cast<std::size_t>(id)];
            if (slot.empty()) slot = Tensor::zeros(x.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) slot[i] += g[i] * w[i];
        } else {
            double s = 0;
            for (std::size_t i = 0; i < g.numel(); ++i) s += g[i] * w[i];
            Tensor gx = Tensor::full(x.shape(), s);
            accumulate(id, gx);
        }
    }
};

// Operator sugar; both operands must live on the same tape.
inline Value operator+(Value a, Value b) { return a.tape->add(a, b); }
inline Value operator-(Value a, Value b) { return a.tape->sub(a, b); }
inline Value operator*(Value a, Value b) { return a.tape->mul(a, b); }
inline Value operator/(Value a, Value b) { return a.tape->div(a, b); }

}  // namespace handfit::diff
