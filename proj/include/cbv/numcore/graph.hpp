#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbv/numcore/tensor.hpp"

namespace cbv::numcore {

using NodeId = std::uint32_t;

enum class OpKind : std::uint8_t {
    Input,
    Param,
    Const,
    Add,
    Sub,
    Mul,
    Scale,
    Log,
    MatMul,
    Transpose,
    Conv2d,
    ChannelBias,
    Relu,
    AvgPool2d,
    SpatialMean,
    Softmax,
    L2Normalize,
    Inner,
    Sum,
    Reshape,
    Stack,
    Row,
};

struct Node {
    OpKind kind;
    std::vector<NodeId> args;
    Shape shape;
    float fscalar = 0.0f;     // Scale factor
    std::uint32_t iattr = 0;  // pool width / row index
    std::string name;         // Input and Param leaves only
    Tensor value;             // leaf payload
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    Tensor per_coordinate;  // one relative error per checked coordinate
    std::vector<std::string> coordinate_names;
    double h = 0.0;
};

/// A replayable static compute graph. Nodes are appended in topological
/// order by construction; forward evaluates them in id order and backward
/// sweeps in reverse, so replays are bit-deterministic. The public forward
/// and backward passes run in 32-bit floats; grad_check shadows the whole
/// program in 64-bit for both the analytic and finite-difference sides.
class Program {
public:
    // -- leaves -----------------------------------------------------------
    /// Named leaves are unique: re-declaring a name returns the existing
    /// node (the shape must match; the stored value is refreshed).
    NodeId input(const std::string& name, Shape shape);
    NodeId parameter(const std::string& name, const Tensor& value);
    NodeId constant(Tensor value);
    NodeId constant_scalar(float v);

    // -- ops --------------------------------------------------------------
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, float s);
    NodeId log(NodeId a);
    NodeId matmul(NodeId a, NodeId b);  // [m,k]x[k,n] -> [m,n], or [m,k]x[k] -> [m]
    NodeId transpose(NodeId a);
    NodeId conv2d(NodeId x, NodeId w);  // same padding, stride 1, odd kernel
    NodeId channel_bias(NodeId x, NodeId b);
    NodeId relu(NodeId a);
    NodeId avg_pool2d(NodeId a, std::size_t k);
    NodeId spatial_mean(NodeId a);  // [C,H,W] -> [C]
    NodeId softmax(NodeId a);       // rank 1, or row-wise on rank 2
    NodeId l2_normalize(NodeId a);  // rank 1
    NodeId inner(NodeId a, NodeId b);
    NodeId sum(NodeId a);
    NodeId reshape(NodeId a, Shape s);
    NodeId stack(std::span<const NodeId> rows);  // B rank-1 nodes -> [B,d]
    NodeId row(NodeId table, std::uint32_t r);   // [n,d] -> [d]

    // -- data binding -----------------------------------------------------
    void set_input(NodeId id, const Tensor& v);
    void set_parameter(NodeId id, const Tensor& v);
    std::optional<NodeId> find(const std::string& name) const;

    // -- execution --------------------------------------------------------
    /// Evaluates every node in id order; value() reads results out.
    void run_forward();
    /// Reverse sweep from a single-element objective. Runs forward first if
    /// bindings changed.
    void run_backward(NodeId objective);

    Tensor value(NodeId id);
    float scalar_value(NodeId id);
    Tensor gradient(NodeId id) const;

    /// d objective / d input for one input leaf (forward + backward).
    Tensor input_gradient(NodeId objective, NodeId input);
    /// Gradients of all Param leaves, keyed by name.
    std::map<std::string, Tensor> parameter_gradients(NodeId objective);

    /// Central-difference check of every coordinate of every input and
    /// parameter against the analytic gradient, both sides evaluated with
    /// 64-bit arithmetic. Requires 0 < h <= 0.1.
    GradCheckReport grad_check(NodeId objective, double h = 1e-3);

    // -- introspection ----------------------------------------------------
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    const Node& node(NodeId id) const;
    const Shape& shape_of(NodeId id) const;
    std::vector<NodeId> leaf_ids(bool inputs, bool params) const;

    /// Routes heavy ops through the serial reference kernels when true.
    /// Results must be bit-identical either way; tests rely on this.
    static void use_serial_kernels(bool on);
    static bool serial_kernels();

private:
    template <typename T>
    struct Buffers {
        std::vector<std::vector<T>> val;
        std::vector<std::vector<T>> grad;
    };

    NodeId push(Node n);
    const Node& checked(NodeId id, const char* who) const;
    void require_scalar(NodeId id, const char* who) const;

    template <typename T>
    void forward_pass(Buffers<T>& b, bool reload_leaves) const;
    template <typename T>
    void backward_pass(Buffers<T>& b, NodeId objective) const;

    std::vector<Node> nodes_;
    std::map<std::string, NodeId> by_name_;
    Buffers<float> buf_;
    bool fwd_valid_ = false;
    bool bwd_valid_ = false;
    NodeId bwd_obj_ = 0;
};

}  // namespace cbv::numcore
