#include "chat/numerics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <utility>

#include "chat/errors.hpp"

namespace chat {

namespace detail {

namespace {
std::atomic<std::size_t> g_live_bytes{0};
std::atomic<std::size_t> g_peak_bytes{0};
} // namespace

void record_alloc(std::size_t bytes) noexcept {
    std::size_t live = g_live_bytes.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t peak = g_peak_bytes.load(std::memory_order_relaxed);
    while (live > peak &&
           !g_peak_bytes.compare_exchange_weak(peak, live, std::memory_order_relaxed)) {
    }
}

void record_free(std::size_t bytes) noexcept {
    g_live_bytes.fetch_sub(bytes, std::memory_order_relaxed);
}

} // namespace detail

MemoryStats memory_stats() noexcept {
    return {detail::g_live_bytes.load(std::memory_order_relaxed),
            detail::g_peak_bytes.load(std::memory_order_relaxed)};
}

void reset_peak_memory() noexcept {
    detail::g_peak_bytes.store(detail::g_live_bytes.load(std::memory_order_relaxed),
                               std::memory_order_relaxed);
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : shape_{0} {}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::span<const double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (data_.size() != shape_numel(shape_)) {
        throw DimensionError("tensor: " + std::to_string(data_.size()) +
                             " values do not fill shape " + shape_to_string(shape_));
    }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : Tensor(std::move(shape), std::span<const double>(values.begin(), values.size())) {}

Tensor Tensor::scalar(double value) {
    Tensor t(Shape{});
    t.data_[0] = value;
    return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Tensor t({r, c});
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("from_rows: ragged rows");
        for (double v : row) t.data_[i++] = v;
    }
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                             shape_to_string(shape_));
    }
    return shape_[axis];
}

std::span<const double> Tensor::row(std::size_t r) const {
    const std::size_t c = shape_.back();
    return std::span<const double>(data_).subspan(r * c, c);
}

std::span<double> Tensor::row(std::size_t r) {
    const std::size_t c = shape_.back();
    return std::span<double>(data_).subspan(r * c, c);
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_to_string(shape_));
    }
    return data_[0];
}

std::span<double> Tensor::ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    return *grad_;
}

std::span<const double> Tensor::grad() const {
    if (!grad_) return {};
    return *grad_;
}

void Tensor::zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

bool Tensor::bitwise_equal(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    // Compare representations so that -0.0 != 0.0 and NaN payloads count.
    for (std::size_t i = 0; i < data_.size(); ++i) {
        std::uint64_t a = 0;
        std::uint64_t b = 0;
        std::memcpy(&a, &data_[i], sizeof a);
        std::memcpy(&b, &other.data_[i], sizeof b);
        if (a != b) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const {
    if (!graph_) throw GraphError("use of an unbound Var");
    return graph_->value(*this);
}

Graph::Graph(GradMode mode) : mode_(mode) {}

Var Graph::push(Node node) {
    if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
        throw GraphError("graph node limit reached");
    }
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
}

Var Graph::constant_ref(const Tensor& value) {
    Node n;
    n.ref = &value;
    return push(std::move(n));
}

Var Graph::variable(Tensor value) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = recording();
    return push(std::move(n));
}

Var Graph::parameter(Tensor& p) {
    Node n;
    n.ref = &p;
    if (recording()) {
        n.param = &p;
        n.requires_grad = true;
    }
    return push(std::move(n));
}

const Tensor& Graph::value(Var v) const {
    if (v.graph_ != this || v.id_ >= nodes_.size()) {
        throw GraphError("Var does not belong to this graph");
    }
    return node_value(nodes_[v.id_]);
}

std::span<const double> Graph::grad(Var v) const {
    if (v.graph_ != this) throw GraphError("Var does not belong to this graph");
    return nodes_.at(v.id_).grad;
}

bool Graph::requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }

Var Graph::record(Tensor value, bool requires_grad, BackwardFn fn) {
    for (double x : value.data()) {
        if (std::isnan(x)) throw NumericError("NaN produced during forward pass");
    }
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad && recording();
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
}

std::span<const double> Graph::out_grad(std::uint32_t self) const { return nodes_[self].grad; }

std::span<double> Graph::grad_sink(Var v) {
    Node& n = nodes_[v.id_];
    if (n.grad.empty()) n.grad.assign(node_value(n).numel(), 0.0);
    return n.grad;
}

void Graph::backward(Var loss) {
    if (!recording()) throw GraphError("backward() on an inference-mode graph");
    if (backward_done_) throw GraphError("backward() called twice on the same graph");
    if (loss.graph_ != this) throw GraphError("loss Var does not belong to this graph");
    if (value(loss).numel() != 1) {
        throw DimensionError("backward() needs a one-element loss, got " +
                             shape_to_string(value(loss).shape()));
    }
    backward_done_ = true;
    if (!nodes_[loss.id_].requires_grad) return;
    grad_sink(loss)[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty()) continue;
        if (n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
        if (n.param) {
            auto sink = n.param->ensure_grad();
            for (std::size_t j = 0; j < sink.size(); ++j) sink[j] += n.grad[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

// out[m x n] = x[m x k] w[n x k]^T. Four output columns share each pass over
// a row of x; every element is still summed in plain order over k.
void linear_kernel(const double* x, const double* w, double* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = x + i * k;
        double* oi = out + i * n;
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) {
            const double* w0 = w + j * k;
            const double* w1 = w0 + k;
            const double* w2 = w1 + k;
            const double* w3 = w2 + k;
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double v = xi[p];
                a0 += v * w0[p];
                a1 += v * w1[p];
                a2 += v * w2[p];
                a3 += v * w3[p];
            }
            oi[j] = a0;
            oi[j + 1] = a1;
            oi[j + 2] = a2;
            oi[j + 3] = a3;
        }
        for (; j < n; ++j) {
            const double* wj = w + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += xi[p] * wj[p];
            oi[j] = acc;
        }
    }
}

Graph& same_graph(Var a, Var b, const char* op) {
    if (!a.valid() || !b.valid() || &a.graph() != &b.graph()) {
        throw GraphError(std::string(op) + ": operands belong to different graphs");
    }
    return a.graph();
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a) +
                         " and " + shape_to_string(b));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got " + shape_to_string(t.shape()));
    }
}

std::size_t normalise_axis(const char* op, int axis, std::size_t rank) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

struct AxisLayout {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
    AxisLayout l;
    for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
    l.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
    return l;
}

} // namespace

Var matmul(Var a, Var b) {
    Graph& g = same_graph(a, b, "matmul");
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
        shape_error("matmul", A.shape(), B.shape());
    }
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    Tensor out({m, n});
    auto o = out.data();
    auto x = A.data();
    auto y = B.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double s = x[i * k + p];
            for (std::size_t j = 0; j < n; ++j) o[i * n + j] += s * y[p * n + j];
        }
    }
    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    return g.record(std::move(out), rg, [a, b, m, k, n](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        if (g.requires_grad(a)) {
            auto da = g.grad_sink(a);
            auto y = g.value(b).data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += d[i * n + j] * y[p * n + j];
                    da[i * k + p] += acc;
                }
        }
        if (g.requires_grad(b)) {
            auto db = g.grad_sink(b);
            auto x = g.value(a).data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double s = x[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) db[p * n + j] += s * d[i * n + j];
                }
        }
    });
}

Var linear(Var x, Var w) {
    Graph& g = same_graph(x, w, "linear");
    const Tensor& X = x.value();
    const Tensor& W = w.value();
    if (X.rank() != 2 || W.rank() != 2 || X.cols() != W.cols()) {
        shape_error("linear", X.shape(), W.shape());
    }
    const std::size_t m = X.rows(), k = X.cols(), n = W.rows();
    Tensor out({m, n});
    auto o = out.data();
    auto xd = X.data();
    auto wd = W.data();
    linear_kernel(xd.data(), wd.data(), o.data(), m, k, n);
    const bool rg = g.requires_grad(x) || g.requires_grad(w);
    return g.record(std::move(out), rg, [x, w, m, k, n](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        if (g.requires_grad(x)) {
            auto dx = g.grad_sink(x);
            auto wd = g.value(w).data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double s = d[i * n + j];
                    if (s == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) dx[i * k + p] += s * wd[j * k + p];
                }
        }
        if (g.requires_grad(w)) {
            auto dw = g.grad_sink(w);
            auto xd = g.value(x).data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double s = d[i * n + j];
                    if (s == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p) dw[j * k + p] += s * xd[i * k + p];
                }
        }
    });
}

Var transpose(Var a) {
    Graph& g = a.graph();
    const Tensor& A = a.value();
    require_rank("transpose", A, 2);
    const std::size_t m = A.rows(), n = A.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
    return g.record(std::move(out), g.requires_grad(a), [a, m, n](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        auto da = g.grad_sink(a);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) da[i * n + j] += d[j * m + i];
    });
}

namespace {

Var elementwise_sum(Var a, Var b, double sign, const char* op) {
    Graph& g = same_graph(a, b, op);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.shape() != B.shape()) shape_error(op, A.shape(), B.shape());
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i] + sign * B[i];
    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    return g.record(std::move(out), rg, [a, b, sign](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        if (g.requires_grad(a)) {
            auto da = g.grad_sink(a);
            for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i];
        }
        if (g.requires_grad(b)) {
            auto db = g.grad_sink(b);
            for (std::size_t i = 0; i < d.size(); ++i) db[i] += sign * d[i];
        }
    });
}

} // namespace

Var add(Var a, Var b) { return elementwise_sum(a, b, 1.0, "add"); }
Var sub(Var a, Var b) { return elementwise_sum(a, b, -1.0, "sub"); }

Var scale(Var a, double factor) {
    Graph& g = a.graph();
    const Tensor& A = a.value();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i] * factor;
    return g.record(std::move(out), g.requires_grad(a), [a, factor](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        auto da = g.grad_sink(a);
        for (std::size_t i = 0; i < d.size(); ++i) da[i] += factor * d[i];
    });
}

Var relu(Var a) {
    Graph& g = a.graph();
    const Tensor& A = a.value();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.numel(); ++i) out[i] = A[i] > 0.0 ? A[i] : 0.0;
    return g.record(std::move(out), g.requires_grad(a), [a](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        auto x = g.value(a).data();
        auto da = g.grad_sink(a);
        for (std::size_t i = 0; i < d.size(); ++i)
            if (x[i] > 0.0) da[i] += d[i];
    });
}

Var pairwise_add(Var a, Var b) {
    Graph& g = same_graph(a, b, "pairwise_add");
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols()) {
        shape_error("pairwise_add", A.shape(), B.shape());
    }
    const std::size_t na = A.rows(), nb = B.rows(), d = A.cols();
    Tensor out({na * nb, d});
    for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nb; ++j)
            for (std::size_t c = 0; c < d; ++c) out[(i * nb + j) * d + c] = A[i * d + c] + B[j * d + c];
    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    return g.record(std::move(out), rg, [a, b, na, nb, d](Graph& g, std::uint32_t self) {
        auto o = g.out_grad(self);
        if (g.requires_grad(a)) {
            auto da = g.grad_sink(a);
            for (std::size_t i = 0; i < na; ++i)
                for (std::size_t j = 0; j < nb; ++j)
                    for (std::size_t c = 0; c < d; ++c) da[i * d + c] += o[(i * nb + j) * d + c];
        }
        if (g.requires_grad(b)) {
            auto db = g.grad_sink(b);
            for (std::size_t i = 0; i < na; ++i)
                for (std::size_t j = 0; j < nb; ++j)
                    for (std::size_t c = 0; c < d; ++c) db[j * d + c] += o[(i * nb + j) * d + c];
        }
    });
}

namespace {

// Shared body of softmax / log_softmax along one axis.
Tensor normalise_along(const Tensor& x, const AxisLayout& l, bool log_space) {
    Tensor out(x.shape());
    for (std::size_t o = 0; o < l.outer; ++o)
        for (std::size_t in = 0; in < l.inner; ++in) {
            const std::size_t base = o * l.extent * l.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < l.extent; ++i) mx = std::max(mx, x[base + i * l.inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < l.extent; ++i) {
                const double e = std::exp(x[base + i * l.inner] - mx);
                if (!log_space) out[base + i * l.inner] = e;
                z += e;
            }
            if (log_space) {
                const double lz = mx + std::log(z);
                for (std::size_t i = 0; i < l.extent; ++i)
                    out[base + i * l.inner] = x[base + i * l.inner] - lz;
            } else {
                for (std::size_t i = 0; i < l.extent; ++i) out[base + i * l.inner] /= z;
            }
        }
    return out;
}

} // namespace

Var softmax(Var x, int axis) {
    Graph& g = x.graph();
    const Tensor& X = x.value();
    const std::size_t ax = normalise_axis("softmax", axis, X.rank());
    const AxisLayout l = axis_layout(X.shape(), ax);
    if (l.extent == 0) throw EmptyInputError("softmax over an empty dimension");
    Tensor out = normalise_along(X, l, false);
    return g.record(std::move(out), g.requires_grad(x), [x, l](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        const Tensor& y = g.self_value(self);
        auto dx = g.grad_sink(x);
        for (std::size_t o = 0; o < l.outer; ++o)
            for (std::size_t in = 0; in < l.inner; ++in) {
                const std::size_t base = o * l.extent * l.inner + in;
                double dot = 0.0;
                for (std::size_t i = 0; i < l.extent; ++i) {
                    const std::size_t k = base + i * l.inner;
                    dot += d[k] * y[k];
                }
                for (std::size_t i = 0; i < l.extent; ++i) {
                    const std::size_t k = base + i * l.inner;
                    dx[k] += y[k] * (d[k] - dot);
                }
            }
    });
}

Var log_softmax(Var x, int axis) {
    Graph& g = x.graph();
    const Tensor& X = x.value();
    const std::size_t ax = normalise_axis("log_softmax", axis, X.rank());
    const AxisLayout l = axis_layout(X.shape(), ax);
    if (l.extent == 0) throw EmptyInputError("log_softmax over an empty dimension");
    Tensor out = normalise_along(X, l, true);
    return g.record(std::move(out), g.requires_grad(x), [x, l](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        const Tensor& y = g.self_value(self);
        auto dx = g.grad_sink(x);
        for (std::size_t o = 0; o < l.outer; ++o)
            for (std::size_t in = 0; in < l.inner; ++in) {
                const std::size_t base = o * l.extent * l.inner + in;
                double total = 0.0;
                for (std::size_t i = 0; i < l.extent; ++i) total += d[base + i * l.inner];
                if (total == 0.0) {
                    for (std::size_t i = 0; i < l.extent; ++i)
                        dx[base + i * l.inner] += d[base + i * l.inner];
                    continue;
                }
                for (std::size_t i = 0; i < l.extent; ++i) {
                    const std::size_t k = base + i * l.inner;
                    dx[k] += d[k] - std::exp(y[k]) * total;
                }
            }
    });
}

Var masked_softmax(Var x, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
    Graph& g = x.graph();
    const Tensor& X = x.value();
    require_rank("masked_softmax", X, 2);
    if (!mask || mask->size() != X.numel()) {
        throw DimensionError("masked_softmax: mask size does not match " +
                             shape_to_string(X.shape()));
    }
    const std::size_t m = X.rows(), n = X.cols();
    const auto& mk = *mask;
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (mk[i * n + j]) mx = std::max(mx, X[i * n + j]);
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw ContractError("masked_softmax: row " + std::to_string(i) + " is fully masked");
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!mk[i * n + j]) continue;
            const double e = std::exp(X[i * n + j] - mx);
            out[i * n + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    return g.record(std::move(out), g.requires_grad(x), [x, m, n](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        const Tensor& y = g.self_value(self);
        auto dx = g.grad_sink(x);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += d[i * n + j] * y[i * n + j];
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += y[i * n + j] * (d[i * n + j] - dot);
        }
    });
}

double log_sum_exp(std::span<const double> values) {
    if (values.empty()) throw EmptyInputError("log_sum_exp of an empty set");
    const double mx = *std::max_element(values.begin(), values.end());
    if (mx == -std::numeric_limits<double>::infinity()) return mx;
    double s = 0.0;
    for (double v : values) s += std::exp(v - mx);
    return mx + std::log(s);
}

Var log_sum_exp(Var x) {
    Graph& g = x.graph();
    const Tensor& X = x.value();
    const double r = log_sum_exp(X.data());
    return g.record(Tensor::scalar(r), g.requires_grad(x), [x](Graph& g, std::uint32_t self) {
        const double d = g.out_grad(self)[0];
        const double r = g.self_value(self)[0];
        if (r == -std::numeric_limits<double>::infinity()) return;
        auto xv = g.value(x).data();
        auto dx = g.grad_sink(x);
        for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += d * std::exp(xv[i] - r);
    });
}

Var log_add_exp(Var a, Var b) {
    Graph& g = same_graph(a, b, "log_add_exp");
    const double pair[2] = {a.value().item(), b.value().item()};
    const double r = log_sum_exp(pair);
    const bool rg = g.requires_grad(a) || g.requires_grad(b);
    return g.record(Tensor::scalar(r), rg, [a, b](Graph& g, std::uint32_t self) {
        const double d = g.out_grad(self)[0];
        const double r = g.self_value(self)[0];
        if (r == -std::numeric_limits<double>::infinity()) return;
        if (g.requires_grad(a)) g.grad_sink(a)[0] += d * std::exp(g.value(a)[0] - r);
        if (g.requires_grad(b)) g.grad_sink(b)[0] += d * std::exp(g.value(b)[0] - r);
    });
}

Var pick(Var x, std::size_t flat_index) {
    Graph& g = x.graph();
    const Tensor& X = x.value();
    if (flat_index >= X.numel()) {
        throw DimensionError("pick: index " + std::to_string(flat_index) + " outside " +
                             shape_to_string(X.shape()));
    }
    return g.record(Tensor::scalar(X[flat_index]), g.requires_grad(x),
                    [x, flat_index](Graph& g, std::uint32_t self) {
                        g.grad_sink(x)[flat_index] += g.out_grad(self)[0];
                    });
}

Var sum(Var x) {
    Graph& g = x.graph();
    const Tensor& X = x.value();
    double s = 0.0;
    for (double v : X.data()) s += v;
    return g.record(Tensor::scalar(s), g.requires_grad(x), [x](Graph& g, std::uint32_t self) {
        const double d = g.out_grad(self)[0];
        for (double& v : g.grad_sink(x)) v += d;
    });
}

Var reshape(Var x, Shape shape) {
    Graph& g = x.graph();
    const Tensor& X = x.value();
    if (shape_numel(shape) != X.numel()) shape_error("reshape", X.shape(), shape);
    Tensor out(std::move(shape), X.data());
    return g.record(std::move(out), g.requires_grad(x), [x](Graph& g, std::uint32_t self) {
        auto d = g.out_grad(self);
        auto dx = g.grad_sink(x);
        for (std::size_t i = 0; i < d.size(); ++i) dx[i] += d[i];
    });
}

Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) throw EmptyInputError("concat of zero tensors");
    Graph& g = parts[0].graph();
    const Shape& first = parts[0].shape();
    const std::size_t ax = normalise_axis("concat", axis, first.size());
    Shape out_shape = first;
    out_shape[ax] = 0;
    bool rg = false;
    for (const Var& p : parts) {
        same_graph(parts[0], p, "concat");
        const Shape& s = p.shape();
        if (s.size() != first.size()) shape_error("concat", first, s);
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != ax && s[i] != first[i]) shape_error("concat", first, s);
        out_shape[ax] += s[ax];
        rg = rg || g.requires_grad(p);
    }
    const AxisLayout ol = axis_layout(out_shape, ax);
    Tensor out(out_shape);
    std::vector<std::size_t> widths;
    widths.reserve(parts.size());
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const Tensor& t = p.value();
        const std::size_t w = t.shape()[ax] * ol.inner;
        for (std::size_t o = 0; o < ol.outer; ++o)
            std::copy_n(t.data().begin() + o * w, w,
                        out.data().begin() + o * ol.extent * ol.inner + offset);
        offset += w;
        widths.push_back(w);
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    const std::size_t row = ol.extent * ol.inner;
    return g.record(std::move(out), rg,
                    [inputs = std::move(inputs), widths = std::move(widths), outer = ol.outer,
                     row](Graph& g, std::uint32_t self) {
                        auto d = g.out_grad(self);
                        std::size_t offset = 0;
                        for (std::size_t p = 0; p < inputs.size(); ++p) {
                            const std::size_t w = widths[p];
                            if (g.requires_grad(inputs[p])) {
                                auto dp = g.grad_sink(inputs[p]);
                                for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < w; ++i)
                                        dp[o * w + i] += d[o * row + offset + i];
                            }
                            offset += w;
                        }
                    });
}

Var slice(Var x, int axis, std::size_t begin, std::size_t end) {
    Graph& g = x.graph();
    const Tensor& X = x.value();
    const std::size_t ax = normalise_axis("slice", axis, X.rank());
    const AxisLayout l = axis_layout(X.shape(), ax);
    if (begin > end || end > l.extent) {
        throw DimensionError("slice: range [" + std::to_string(begin) + ", " +
                             std::to_string(end) + ") outside " + shape_to_string(X.shape()));
    }
    Shape out_shape = X.shape();
    out_shape[ax] = end - begin;
    Tensor out(out_shape);
    const std::size_t w = (end - begin) * l.inner;
    const std::size_t row = l.extent * l.inner;
    const std::size_t off = begin * l.inner;
    for (std::size_t o = 0; o < l.outer; ++o)
        std::copy_n(X.data().begin() + o * row + off, w, out.data().begin() + o * w);
    return g.record(std::move(out), g.requires_grad(x),
                    [x, outer = l.outer, w, row, off](Graph& g, std::uint32_t self) {
                        auto d = g.out_grad(self);
                        auto dx = g.grad_sink(x);
                        for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < w; ++i) dx[o * row + off + i] += d[o * w + i];
                    });
}

Var gather_rows(Var x, std::vector<std::ptrdiff_t> indices) {
    Graph& g = x.graph();
    const Tensor& X = x.value();
    require_rank("gather_rows", X, 2);
    const std::size_t m = X.rows(), d = X.cols();
    Tensor out({indices.size(), d});
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const std::ptrdiff_t src = indices[r];
        if (src < -1 || src >= static_cast<std::ptrdiff_t>(m)) {
            throw DimensionError("gather_rows: index " + std::to_string(src) + " outside " +
                                 shape_to_string(X.shape()));
        }
        if (src >= 0) std::copy_n(X.data().begin() + src * d, d, out.data().begin() + r * d);
    }
    return g.record(std::move(out), g.requires_grad(x),
                    [x, d, indices = std::move(indices)](Graph& g, std::uint32_t self) {
                        auto o = g.out_grad(self);
                        auto dx = g.grad_sink(x);
                        for (std::size_t r = 0; r < indices.size(); ++r) {
                            if (indices[r] < 0) continue;
                            const std::size_t src = static_cast<std::size_t>(indices[r]);
                            for (std::size_t c = 0; c < d; ++c) dx[src * d + c] += o[r * d + c];
                        }
                    });
}

Var embedding_bag_mean(Var table, std::vector<std::vector<std::size_t>> bags) {
    Graph& g = table.graph();
    const Tensor& T = table.value();
    require_rank("embedding_bag_mean", T, 2);
    const std::size_t rows = T.rows(), d = T.cols();
    Tensor out({bags.size(), d});
    for (std::size_t b = 0; b < bags.size(); ++b) {
        if (bags[b].empty()) throw EmptyInputError("embedding_bag_mean: empty bag");
        const double w = 1.0 / static_cast<double>(bags[b].size());
        for (std::size_t r : bags[b]) {
            if (r >= rows) {
                throw DimensionError("embedding_bag_mean: row " + std::to_string(r) +
                                     " outside " + shape_to_string(T.shape()));
            }
            for (std::size_t c = 0; c < d; ++c) out[b * d + c] += T[r * d + c];
        }
        for (std::size_t c = 0; c < d; ++c) out[b * d + c] *= w;
    }
    return g.record(std::move(out), g.requires_grad(table),
                    [table, d, bags = std::move(bags)](Graph& g, std::uint32_t self) {
                        auto o = g.out_grad(self);
                        auto dt = g.grad_sink(table);
                        for (std::size_t b = 0; b < bags.size(); ++b) {
                            const double w = 1.0 / static_cast<double>(bags[b].size());
                            for (std::size_t r : bags[b])
                                for (std::size_t c = 0; c < d; ++c) dt[r * d + c] += w * o[b * d + c];
                        }
                    });
}

Var attention_weights(Var q, Var keys, std::size_t heads,
                      std::shared_ptr<const std::vector<std::uint8_t>> mask) {
    Graph& g = same_graph(q, keys, "attention_weights");
    const Tensor& Q = q.value();
    const Tensor& K = keys.value();
    if (Q.rank() != 2 || K.rank() != 2 || Q.cols() != K.cols()) {
        shape_error("attention_weights", Q.shape(), K.shape());
    }
    const std::size_t k = Q.rows(), n = K.rows(), d = Q.cols();
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention_weights: width " + std::to_string(d) +
                             " not divisible by " + std::to_string(heads) + " heads");
    }
    if (n == 0) throw EmptyInputError("attention_weights over zero keys");
    if (mask && mask->size() != k * n) {
        throw DimensionError("attention_weights: mask size does not match " + std::to_string(k) +
                             "x" + std::to_string(n));
    }
    const std::size_t dh = d / heads;
    const double root = std::sqrt(static_cast<double>(dh));
    Tensor out({heads, k, n});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < k; ++i) {
            // Scores go straight into the output row, then become weights.
            double* o = &out[(h * k + i) * n];
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                if (mask && !(*mask)[i * n + j]) continue;
                double dot = 0.0;
                for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += Q[i * d + c] * K[j * d + c];
                o[j] = dot / root;
                mx = std::max(mx, o[j]);
            }
            if (mx == -std::numeric_limits<double>::infinity()) {
                throw ContractError("attention_weights: query " + std::to_string(i) +
                                    " sees no key");
            }
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (mask && !(*mask)[i * n + j]) continue;
                o[j] = std::exp(o[j] - mx);
                z += o[j];
            }
            for (std::size_t j = 0; j < n; ++j) o[j] /= z;
        }
    const bool rg = g.requires_grad(q) || g.requires_grad(keys);
    return g.record(std::move(out), rg, [q, keys, heads, k, n, d, dh, root](Graph& g, std::uint32_t self) {
        auto dw = g.out_grad(self);
        const Tensor& w = g.self_value(self);
        const Tensor& Q = g.value(q);
        const Tensor& K = g.value(keys);
        const bool gq = g.requires_grad(q);
        const bool gk = g.requires_grad(keys);
        std::span<double> dq = gq ? g.grad_sink(q) : std::span<double>{};
        std::span<double> dk = gk ? g.grad_sink(keys) : std::span<double>{};
        std::vector<double> ds(n);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t base = (h * k + i) * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += dw[base + j] * w[base + j];
                for (std::size_t j = 0; j < n; ++j) ds[j] = w[base + j] * (dw[base + j] - dot) / root;
                for (std::size_t j = 0; j < n; ++j) {
                    if (ds[j] == 0.0) continue;
                    for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                        if (gq) dq[i * d + c] += ds[j] * K[j * d + c];
                        if (gk) dk[j * d + c] += ds[j] * Q[i * d + c];
                    }
                }
            }
    });
}

Var attention_context(Var weights, Var values) {
    Graph& g = same_graph(weights, values, "attention_context");
    const Tensor& W = weights.value();
    const Tensor& V = values.value();
    if (W.rank() != 3 || V.rank() != 2 || W.dim(2) != V.rows() || W.dim(0) == 0 ||
        V.cols() % W.dim(0) != 0) {
        shape_error("attention_context", W.shape(), V.shape());
    }
    const std::size_t heads = W.dim(0), k = W.dim(1), n = W.dim(2), d = V.cols();
    const std::size_t dh = d / heads;
    Tensor out({k, d});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < k; ++i) {
            double* o = &out[i * d + h * dh];
            for (std::size_t j = 0; j < n; ++j) {
                const double a = W[(h * k + i) * n + j];
                for (std::size_t c = 0; c < dh; ++c) o[c] += a * V[j * d + h * dh + c];
            }
        }
    const bool rg = g.requires_grad(weights) || g.requires_grad(values);
    return g.record(std::move(out), rg, [weights, values, heads, k, n, d, dh](Graph& g, std::uint32_t self) {
        auto dout = g.out_grad(self);
        const Tensor& W = g.value(weights);
        const Tensor& V = g.value(values);
        if (g.requires_grad(weights)) {
            auto dw = g.grad_sink(weights);
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c)
                            acc += dout[i * d + h * dh + c] * V[j * d + h * dh + c];
                        dw[(h * k + i) * n + j] += acc;
                    }
        }
        if (g.requires_grad(values)) {
            auto dv = g.grad_sink(values);
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double a = W[(h * k + i) * n + j];
                        if (a == 0.0) continue;
                        for (std::size_t c = 0; c < dh; ++c)
                            dv[j * d + h * dh + c] += a * dout[i * d + h * dh + c];
                    }
        }
    });
}

} // namespace chat
