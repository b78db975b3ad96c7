#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
//
// A Graph records every operation applied during a forward pass. Each op
// returns a Var, a lightweight handle (graph pointer + node index). Calling
// Graph::backward on a scalar Var sweeps the tape once in exact reverse order
// and accumulates gradients into:
//   - graph-owned buffers (readable through Graph::grad), and
//   - the grad accumulator of every Tensor bound with Graph::parameter.
//
// All 2-D tensors are row-major [rows x cols]. Projections use the
// Linear convention: weights are stored [out x in] and linear(x, w) = x w^T.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace chat {

namespace detail {

// Process-wide accounting of tensor storage. Every Tensor buffer (values and
// gradients, parameters and graph intermediates) is allocated through
// TrackingAllocator.
void record_alloc(std::size_t bytes) noexcept;
void record_free(std::size_t bytes) noexcept;

template <class T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <class U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        T* p = std::allocator<T>{}.allocate(n);
        record_alloc(n * sizeof(T));
        return p;
    }
    void deallocate(T* p, std::size_t n) noexcept {
        record_free(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <class U>
    bool operator==(const TrackingAllocator<U>&) const noexcept {
        return true;
    }
};

} // namespace detail

struct MemoryStats {
    std::size_t live_bytes = 0;
    std::size_t peak_bytes = 0;
};

MemoryStats memory_stats() noexcept;
// Sets the peak watermark to the current live byte count.
void reset_peak_memory() noexcept;

using Buffer = std::vector<double, detail::TrackingAllocator<double>>;
using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
  public:
    // Rank-1 tensor with zero extent.
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::span<const double> values);
    Tensor(Shape shape, std::initializer_list<double> values);

    static Tensor scalar(double value);
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return data_.size(); }
    // Rank-2 helpers.
    std::size_t rows() const { return dim(0); }
    std::size_t cols() const { return dim(1); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
    std::span<const double> row(std::size_t r) const;
    std::span<double> row(std::size_t r);
    double item() const;

    bool has_grad() const { return grad_.has_value(); }
    // Allocates a zero accumulator on first use.
    std::span<double> ensure_grad();
    std::span<const double> grad() const;
    void zero_grad();
    void drop_grad() { grad_.reset(); }

    bool bitwise_equal(const Tensor& other) const;

  private:
    Shape shape_;
    Buffer data_;
    std::optional<Buffer> grad_;
};

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
  public:
    Var() = default;

    Graph& graph() const { return *graph_; }
    std::uint32_t id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    double item() const { return value().item(); }

  private:
    friend class Graph;
    Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

    Graph* graph_ = nullptr;
    std::uint32_t id_ = 0;
};

enum class GradMode { kRecord, kInference };

class Graph {
  public:
    using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

    explicit Graph(GradMode mode = GradMode::kRecord);
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaf without gradient. The graph owns a copy.
    Var constant(Tensor value);
    // Leaf without gradient referencing external storage (no copy). `value`
    // must outlive the graph.
    Var constant_ref(const Tensor& value);
    // Leaf whose gradient is readable via grad() after backward.
    Var variable(Tensor value);
    // Leaf referencing a parameter. backward() accumulates into p's grad.
    Var parameter(Tensor& p);

    const Tensor& value(Var v) const;
    // Empty span if no gradient reached the node.
    std::span<const double> grad(Var v) const;
    bool requires_grad(Var v) const;
    bool recording() const { return mode_ == GradMode::kRecord; }

    // Single reverse sweep from a one-element Var. A graph supports exactly
    // one backward pass.
    void backward(Var loss);

    std::size_t num_nodes() const { return nodes_.size(); }

    // --- op implementation surface ---
    // Appends an op node. `fn` is dropped in inference mode or when no input
    // requires grad.
    Var record(Tensor value, bool requires_grad, BackwardFn fn);
    std::span<const double> out_grad(std::uint32_t self) const;
    const Tensor& self_value(std::uint32_t self) const { return node_value(nodes_[self]); }
    // Gradient accumulator of `v`, zero-initialised on first access.
    std::span<double> grad_sink(Var v);

  private:
    struct Node {
        Tensor owned;
        const Tensor* ref = nullptr;
        Tensor* param = nullptr;
        bool requires_grad = false;
        BackwardFn backward;
        Buffer grad;
    };

    Var push(Node node);
    const Tensor& node_value(const Node& n) const { return n.ref ? *n.ref : n.owned; }

    GradMode mode_;
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// ---- Operations -----------------------------------------------------------
// All inputs must belong to the same graph. Shape violations raise
// DimensionError naming both shapes.

// a[m x k] * b[k x n] -> [m x n]
Var matmul(Var a, Var b);
// x[m x k] * w[n x k]^T -> [m x n]
Var linear(Var x, Var w);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);
// a[A x d], b[B x d] -> [(A*B) x d] with row i*B + j = a_i + b_j.
Var pairwise_add(Var a, Var b);
// Normalises along `axis` (negative counts from the back), max-shifted.
Var softmax(Var x, int axis = -1);
Var log_softmax(Var x, int axis = -1);
// Row softmax of x[m x n] restricted to positions where mask[i*n+j] != 0.
// Masked positions are exactly zero. Every row needs one unmasked entry.
Var masked_softmax(Var x, std::shared_ptr<const std::vector<std::uint8_t>> mask);
// log(sum(exp(x))) over all elements; -inf entries contribute nothing.
Var log_sum_exp(Var x);
// Two-scalar specialisation of log_sum_exp.
Var log_add_exp(Var a, Var b);
// Element at flat index -> scalar.
Var pick(Var x, std::size_t flat_index);
Var sum(Var x);
Var reshape(Var x, Shape shape);
Var concat(std::span<const Var> parts, int axis);
Var slice(Var x, int axis, std::size_t begin, std::size_t end);
// Row gather from x[m x d]; index -1 yields a zero row.
Var gather_rows(Var x, std::vector<std::ptrdiff_t> indices);
// Row b of the result is the mean of table rows listed in bags[b].
Var embedding_bag_mean(Var table, std::vector<std::vector<std::size_t>> bags);

// Multi-head scaled dot-product attention in two stages.
// attention_weights: q[k x d], keys[n x d] -> [heads x k x n]; head h uses
// columns [h*d/heads, (h+1)*d/heads) and scales scores by 1/sqrt(d/heads)
// before a softmax over n. With a mask ([k x n], nonzero = visible), hidden
// positions get exactly zero weight.
Var attention_weights(Var q, Var keys, std::size_t heads,
                      std::shared_ptr<const std::vector<std::uint8_t>> mask = nullptr);
// attention_context: weights[heads x k x n], values[n x d] -> [k x d], heads
// written side by side.
Var attention_context(Var weights, Var values);

// Plain scalar helper, max-shifted and -inf aware.
double log_sum_exp(std::span<const double> values);

} // namespace chat
