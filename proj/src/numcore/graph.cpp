#include "cbv/numcore/graph.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

#include "cbv/numcore/kernels.hpp"

namespace cbv::numcore {

namespace {
std::atomic<bool> g_serial_kernels{false};
}

void Program::use_serial_kernels(bool on) { g_serial_kernels.store(on); }
bool Program::serial_kernels() { return g_serial_kernels.load(); }

const Node& Program::checked(NodeId id, const char* who) const {
    if (id >= nodes_.size()) {
        throw UnknownNode(std::string(who) + ": node id " + std::to_string(id) + " out of range");
    }
    return nodes_[id];
}

const Node& Program::node(NodeId id) const { return checked(id, "node"); }
const Shape& Program::shape_of(NodeId id) const { return checked(id, "shape_of").shape; }

void Program::require_scalar(NodeId id, const char* who) const {
    if (shape_numel(checked(id, who).shape) != 1) {
        throw ShapeMismatch(std::string(who) + ": objective must be a single-element node, got shape " +
                            shape_str(nodes_[id].shape));
    }
}

NodeId Program::push(Node n) {
    nodes_.push_back(std::move(n));
    fwd_valid_ = false;
    bwd_valid_ = false;
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Program::input(const std::string& name, Shape shape) {
    auto it = by_name_.find(name);
    if (it != by_name_.end()) {
        Node& n = nodes_[it->second];
        if (n.kind != OpKind::Input) throw UnknownNode("name '" + name + "' already bound to a parameter");
        if (!shape_eq(n.shape, shape)) {
            throw ShapeMismatch("input '" + name + "' re-declared with shape " + shape_str(shape) +
                                ", have " + shape_str(n.shape));
        }
        return it->second;
    }
    Node n;
    n.kind = OpKind::Input;
    n.shape = shape;
    n.name = name;
    n.value = Tensor(std::move(shape));
    NodeId id = push(std::move(n));
    by_name_[name] = id;
    return id;
}

NodeId Program::parameter(const std::string& name, const Tensor& value) {
    auto it = by_name_.find(name);
    if (it != by_name_.end()) {
        Node& n = nodes_[it->second];
        if (n.kind != OpKind::Param) throw UnknownNode("name '" + name + "' already bound to an input");
        if (!n.value.same_shape(value)) {
            throw ShapeMismatch("parameter '" + name + "' re-declared with shape " + shape_str(value.shape()) +
                                ", have " + shape_str(n.shape));
        }
        n.value = value;
        fwd_valid_ = false;
        bwd_valid_ = false;
        return it->second;
    }
    Node n;
    n.kind = OpKind::Param;
    n.shape = value.shape();
    n.name = name;
    n.value = value;
    NodeId id = push(std::move(n));
    by_name_[name] = id;
    return id;
}

NodeId Program::constant(Tensor value) {
    Node n;
    n.kind = OpKind::Const;
    n.shape = value.shape();
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Program::constant_scalar(float v) { return constant(Tensor::scalar(v)); }

namespace {
void check_same(const Shape& a, const Shape& b, const char* op) {
    if (!shape_eq(a, b)) {
        throw ShapeMismatch(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
    }
}
}  // namespace

NodeId Program::add(NodeId a, NodeId b) {
    check_same(checked(a, "add").shape, checked(b, "add").shape, "add");
    Node n;
    n.kind = OpKind::Add;
    n.args = {a, b};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

NodeId Program::sub(NodeId a, NodeId b) {
    check_same(checked(a, "sub").shape, checked(b, "sub").shape, "sub");
    Node n;
    n.kind = OpKind::Sub;
    n.args = {a, b};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

NodeId Program::mul(NodeId a, NodeId b) {
    check_same(checked(a, "mul").shape, checked(b, "mul").shape, "mul");
    Node n;
    n.kind = OpKind::Mul;
    n.args = {a, b};
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

NodeId Program::scale(NodeId a, float s) {
    Node n;
    n.kind = OpKind::Scale;
    n.args = {a};
    n.shape = checked(a, "scale").shape;
    n.fscalar = s;
    return push(std::move(n));
}

NodeId Program::log(NodeId a) {
    Node n;
    n.kind = OpKind::Log;
    n.args = {a};
    n.shape = checked(a, "log").shape;
    return push(std::move(n));
}

NodeId Program::matmul(NodeId a, NodeId b) {
    const Shape& sa = checked(a, "matmul").shape;
    const Shape& sb = checked(b, "matmul").shape;
    if (sa.size() != 2) throw ShapeMismatch("matmul: left operand must be rank 2, got " + shape_str(sa));
    Node n;
    n.kind = OpKind::MatMul;
    n.args = {a, b};
    if (sb.size() == 2) {
        if (sa[1] != sb[0]) throw ShapeMismatch("matmul: " + shape_str(sa) + " x " + shape_str(sb));
        n.shape = {sa[0], sb[1]};
    } else if (sb.size() == 1) {
        if (sa[1] != sb[0]) throw ShapeMismatch("matmul: " + shape_str(sa) + " x " + shape_str(sb));
        n.shape = {sa[0]};
    } else {
        throw ShapeMismatch("matmul: right operand must be rank 1 or 2, got " + shape_str(sb));
    }
    return push(std::move(n));
}

NodeId Program::transpose(NodeId a) {
    const Shape& s = checked(a, "transpose").shape;
    if (s.size() != 2) throw ShapeMismatch("transpose: need rank 2, got " + shape_str(s));
    Node n;
    n.kind = OpKind::Transpose;
    n.args = {a};
    n.shape = {s[1], s[0]};
    return push(std::move(n));
}

NodeId Program::conv2d(NodeId x, NodeId w) {
    const Shape& sx = checked(x, "conv2d").shape;
    const Shape& sw = checked(w, "conv2d").shape;
    if (sx.size() != 3) throw ShapeMismatch("conv2d: input must be [C,H,W], got " + shape_str(sx));
    if (sw.size() != 4) throw ShapeMismatch("conv2d: weight must be [F,C,KH,KW], got " + shape_str(sw));
    if (sw[1] != sx[0]) throw ShapeMismatch("conv2d: channel mismatch " + shape_str(sx) + " vs " + shape_str(sw));
    if (sw[2] % 2 == 0 || sw[3] % 2 == 0) throw ShapeMismatch("conv2d: kernel extents must be odd");
    Node n;
    n.kind = OpKind::Conv2d;
    n.args = {x, w};
    n.shape = {sw[0], sx[1], sx[2]};
    return push(std::move(n));
}

NodeId Program::channel_bias(NodeId x, NodeId b) {
    const Shape& sx = checked(x, "channel_bias").shape;
    const Shape& sb = checked(b, "channel_bias").shape;
    if (sx.size() != 3) throw ShapeMismatch("channel_bias: input must be [C,H,W], got " + shape_str(sx));
    if (sb.size() != 1 || sb[0] != sx[0]) {
        throw ShapeMismatch("channel_bias: bias " + shape_str(sb) + " does not match channels of " + shape_str(sx));
    }
    Node n;
    n.kind = OpKind::ChannelBias;
    n.args = {x, b};
    n.shape = sx;
    return push(std::move(n));
}

NodeId Program::relu(NodeId a) {
    Node n;
    n.kind = OpKind::Relu;
    n.args = {a};
    n.shape = checked(a, "relu").shape;
    return push(std::move(n));
}

NodeId Program::avg_pool2d(NodeId a, std::size_t k) {
    const Shape& s = checked(a, "avg_pool2d").shape;
    if (s.size() != 3) throw ShapeMismatch("avg_pool2d: input must be [C,H,W], got " + shape_str(s));
    if (k == 0 || s[1] % k != 0 || s[2] % k != 0) {
        throw ShapeMismatch("avg_pool2d: window " + std::to_string(k) + " does not divide " + shape_str(s));
    }
    Node n;
    n.kind = OpKind::AvgPool2d;
    n.args = {a};
    n.iattr = static_cast<std::uint32_t>(k);
    n.shape = {s[0], s[1] / k, s[2] / k};
    return push(std::move(n));
}

NodeId Program::spatial_mean(NodeId a) {
    const Shape& s = checked(a, "spatial_mean").shape;
    if (s.size() != 3) throw ShapeMismatch("spatial_mean: input must be [C,H,W], got " + shape_str(s));
    Node n;
    n.kind = OpKind::SpatialMean;
    n.args = {a};
    n.shape = {s[0]};
    return push(std::move(n));
}

NodeId Program::softmax(NodeId a) {
    const Shape& s = checked(a, "softmax").shape;
    if (s.size() != 1 && s.size() != 2) {
        throw ShapeMismatch("softmax: need rank 1 or 2, got " + shape_str(s));
    }
    Node n;
    n.kind = OpKind::Softmax;
    n.args = {a};
    n.shape = s;
    return push(std::move(n));
}

NodeId Program::l2_normalize(NodeId a) {
    const Shape& s = checked(a, "l2_normalize").shape;
    if (s.size() != 1) throw ShapeMismatch("l2_normalize: need rank 1, got " + shape_str(s));
    Node n;
    n.kind = OpKind::L2Normalize;
    n.args = {a};
    n.shape = s;
    return push(std::move(n));
}

NodeId Program::inner(NodeId a, NodeId b) {
    check_same(checked(a, "inner").shape, checked(b, "inner").shape, "inner");
    Node n;
    n.kind = OpKind::Inner;
    n.args = {a, b};
    n.shape = {};
    return push(std::move(n));
}

NodeId Program::sum(NodeId a) {
    checked(a, "sum");
    Node n;
    n.kind = OpKind::Sum;
    n.args = {a};
    n.shape = {};
    return push(std::move(n));
}

NodeId Program::reshape(NodeId a, Shape s) {
    const Shape& sa = checked(a, "reshape").shape;
    if (shape_numel(sa) != shape_numel(s)) {
        throw ShapeMismatch("reshape: cannot view " + shape_str(sa) + " as " + shape_str(s));
    }
    Node n;
    n.kind = OpKind::Reshape;
    n.args = {a};
    n.shape = std::move(s);
    return push(std::move(n));
}

NodeId Program::stack(std::span<const NodeId> rows) {
    if (rows.empty()) throw ShapeMismatch("stack: need at least one row");
    const Shape& s0 = checked(rows[0], "stack").shape;
    if (s0.size() != 1) throw ShapeMismatch("stack: rows must be rank 1, got " + shape_str(s0));
    for (NodeId r : rows) check_same(checked(r, "stack").shape, s0, "stack");
    Node n;
    n.kind = OpKind::Stack;
    n.args.assign(rows.begin(), rows.end());
    n.shape = {rows.size(), s0[0]};
    return push(std::move(n));
}

NodeId Program::row(NodeId table, std::uint32_t r) {
    const Shape& s = checked(table, "row").shape;
    if (s.size() != 2) throw ShapeMismatch("row: table must be rank 2, got " + shape_str(s));
    if (r >= s[0]) throw ShapeMismatch("row: index " + std::to_string(r) + " out of range for " + shape_str(s));
    Node n;
    n.kind = OpKind::Row;
    n.args = {table};
    n.iattr = r;
    n.shape = {s[1]};
    return push(std::move(n));
}

void Program::set_input(NodeId id, const Tensor& v) {
    const Node& n = checked(id, "set_input");
    if (n.kind != OpKind::Input) throw UnknownNode("set_input: node " + std::to_string(id) + " is not an input");
    if (!shape_eq(n.shape, v.shape())) {
        throw ShapeMismatch("set_input '" + n.name + "': shape " + shape_str(v.shape()) + ", want " +
                            shape_str(n.shape));
    }
    nodes_[id].value = v;
    fwd_valid_ = false;
    bwd_valid_ = false;
}

void Program::set_parameter(NodeId id, const Tensor& v) {
    const Node& n = checked(id, "set_parameter");
    if (n.kind != OpKind::Param) {
        throw UnknownNode("set_parameter: node " + std::to_string(id) + " is not a parameter");
    }
    if (!shape_eq(n.shape, v.shape())) {
        throw ShapeMismatch("set_parameter '" + n.name + "': shape " + shape_str(v.shape()) + ", want " +
                            shape_str(n.shape));
    }
    nodes_[id].value = v;
    fwd_valid_ = false;
    bwd_valid_ = false;
}

std::optional<NodeId> Program::find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
}

std::vector<NodeId> Program::leaf_ids(bool inputs, bool params) const {
    std::vector<NodeId> out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        if ((inputs && nodes_[id].kind == OpKind::Input) || (params && nodes_[id].kind == OpKind::Param)) {
            out.push_back(id);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Execution

namespace k = kernels;

template <typename T>
void Program::forward_pass(Buffers<T>& b, bool reload_leaves) const {
    const bool serial = serial_kernels();
    b.val.resize(nodes_.size());
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        std::vector<T>& out = b.val[id];
        const std::size_t count = shape_numel(n.shape);
        switch (n.kind) {
            case OpKind::Input:
            case OpKind::Param:
            case OpKind::Const: {
                if (reload_leaves || out.size() != count) {
                    out.resize(count);
                    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<T>(n.value[i]);
                }
                break;
            }
            case OpKind::Add: {
                const auto& x = b.val[n.args[0]];
                const auto& y = b.val[n.args[1]];
                out.resize(count);
                for (std::size_t i = 0; i < count; ++i) out[i] = x[i] + y[i];
                break;
            }
            case OpKind::Sub: {
                const auto& x = b.val[n.args[0]];
                const auto& y = b.val[n.args[1]];
                out.resize(count);
                for (std::size_t i = 0; i < count; ++i) out[i] = x[i] - y[i];
                break;
            }
            case OpKind::Mul: {
                const auto& x = b.val[n.args[0]];
                const auto& y = b.val[n.args[1]];
                out.resize(count);
                for (std::size_t i = 0; i < count; ++i) out[i] = x[i] * y[i];
                break;
            }
            case OpKind::Scale: {
                const auto& x = b.val[n.args[0]];
                const T s = static_cast<T>(n.fscalar);
                out.resize(count);
                for (std::size_t i = 0; i < count; ++i) out[i] = x[i] * s;
                break;
            }
            case OpKind::Log: {
                const auto& x = b.val[n.args[0]];
                out.resize(count);
                for (std::size_t i = 0; i < count; ++i) out[i] = std::log(x[i]);
                break;
            }
            case OpKind::MatMul: {
                const Node& na = nodes_[n.args[0]];
                const Node& nb = nodes_[n.args[1]];
                const std::size_t m = na.shape[0], kk = na.shape[1];
                const std::size_t nn = nb.shape.size() == 2 ? nb.shape[1] : 1;
                out.resize(count);
                if (serial)
                    k::serial::matmul(b.val[n.args[0]].data(), b.val[n.args[1]].data(), out.data(), m, kk, nn);
                else
                    k::matmul(b.val[n.args[0]].data(), b.val[n.args[1]].data(), out.data(), m, kk, nn);
                break;
            }
            case OpKind::Transpose: {
                const Shape& s = nodes_[n.args[0]].shape;
                const auto& x = b.val[n.args[0]];
                out.resize(count);
                for (std::size_t i = 0; i < s[0]; ++i)
                    for (std::size_t j = 0; j < s[1]; ++j) out[j * s[0] + i] = x[i * s[1] + j];
                break;
            }
            case OpKind::Conv2d: {
                const Shape& sx = nodes_[n.args[0]].shape;
                const Shape& sw = nodes_[n.args[1]].shape;
                out.resize(count);
                if (serial)
                    k::serial::conv2d(b.val[n.args[0]].data(), b.val[n.args[1]].data(), out.data(), sx[0],
                                      sx[1], sx[2], sw[0], sw[2], sw[3]);
                else
                    k::conv2d(b.val[n.args[0]].data(), b.val[n.args[1]].data(), out.data(), sx[0], sx[1],
                              sx[2], sw[0], sw[2], sw[3]);
                break;
            }
            case OpKind::ChannelBias: {
                const Shape& sx = nodes_[n.args[0]].shape;
                const auto& x = b.val[n.args[0]];
                const auto& bias = b.val[n.args[1]];
                out.resize(count);
                const std::size_t hw = sx[1] * sx[2];
                for (std::size_t c = 0; c < sx[0]; ++c)
                    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = x[c * hw + i] + bias[c];
                break;
            }
            case OpKind::Relu: {
                const auto& x = b.val[n.args[0]];
                out.resize(count);
                if (serial)
                    k::serial::relu(x.data(), out.data(), count);
                else
                    k::relu(x.data(), out.data(), count);
                break;
            }
            case OpKind::AvgPool2d: {
                const Shape& sx = nodes_[n.args[0]].shape;
                out.resize(count);
                if (serial)
                    k::serial::avgpool2d(b.val[n.args[0]].data(), out.data(), sx[0], sx[1], sx[2], n.iattr);
                else
                    k::avgpool2d(b.val[n.args[0]].data(), out.data(), sx[0], sx[1], sx[2], n.iattr);
                break;
            }
            case OpKind::SpatialMean: {
                const Shape& sx = nodes_[n.args[0]].shape;
                const auto& x = b.val[n.args[0]];
                out.resize(count);
                const std::size_t hw = sx[1] * sx[2];
                const T inv = T(1) / static_cast<T>(hw);
                for (std::size_t c = 0; c < sx[0]; ++c) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < hw; ++i) acc += x[c * hw + i];
                    out[c] = acc * inv;
                }
                break;
            }
            case OpKind::Softmax: {
                const Shape& s = n.shape;
                const std::size_t rows = s.size() == 2 ? s[0] : 1;
                const std::size_t cols = s.size() == 2 ? s[1] : s[0];
                out.resize(count);
                if (serial)
                    k::serial::softmax_rows(b.val[n.args[0]].data(), out.data(), rows, cols);
                else
                    k::softmax_rows(b.val[n.args[0]].data(), out.data(), rows, cols);
                break;
            }
            case OpKind::L2Normalize: {
                const auto& x = b.val[n.args[0]];
                double nrm = 0.0;
                for (std::size_t i = 0; i < count; ++i) {
                    nrm += static_cast<double>(x[i]) * static_cast<double>(x[i]);
                }
                nrm = std::sqrt(nrm);
                if (nrm <= kEpsFloor) throw ZeroVector("l2_normalize: vector norm " + std::to_string(nrm));
                const T inv = static_cast<T>(1.0 / nrm);
                out.resize(count);
                for (std::size_t i = 0; i < count; ++i) out[i] = x[i] * inv;
                break;
            }
            case OpKind::Inner: {
                const auto& x = b.val[n.args[0]];
                const auto& y = b.val[n.args[1]];
                T acc = T(0);
                for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
                out.assign(1, acc);
                break;
            }
            case OpKind::Sum: {
                const auto& x = b.val[n.args[0]];
                T acc = T(0);
                for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
                out.assign(1, acc);
                break;
            }
            case OpKind::Reshape: {
                out = b.val[n.args[0]];
                break;
            }
            case OpKind::Stack: {
                const std::size_t d = n.shape[1];
                out.resize(count);
                for (std::size_t r = 0; r < n.args.size(); ++r) {
                    const auto& x = b.val[n.args[r]];
                    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = x[i];
                }
                break;
            }
            case OpKind::Row: {
                const Shape& s = nodes_[n.args[0]].shape;
                const auto& x = b.val[n.args[0]];
                out.resize(count);
                for (std::size_t i = 0; i < s[1]; ++i) out[i] = x[n.iattr * s[1] + i];
                break;
            }
        }
    }
}

template <typename T>
void Program::backward_pass(Buffers<T>& b, NodeId objective) const {
    const bool serial = serial_kernels();
    b.grad.resize(nodes_.size());
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        if (id <= objective)
            b.grad[id].assign(b.val[id].size(), T(0));
        else
            b.grad[id].clear();
    }
    b.grad[objective][0] = T(1);

    for (NodeId id = objective + 1; id-- > 0;) {
        const Node& n = nodes_[id];
        const std::vector<T>& g = b.grad[id];
        switch (n.kind) {
            case OpKind::Input:
            case OpKind::Param:
            case OpKind::Const:
                break;
            case OpKind::Add: {
                auto& ga = b.grad[n.args[0]];
                auto& gb = b.grad[n.args[1]];
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i];
                    gb[i] += g[i];
                }
                break;
            }
            case OpKind::Sub: {
                auto& ga = b.grad[n.args[0]];
                auto& gb = b.grad[n.args[1]];
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i];
                    gb[i] -= g[i];
                }
                break;
            }
            case OpKind::Mul: {
                auto& ga = b.grad[n.args[0]];
                auto& gb = b.grad[n.args[1]];
                const auto& x = b.val[n.args[0]];
                const auto& y = b.val[n.args[1]];
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i] * y[i];
                    gb[i] += g[i] * x[i];
                }
                break;
            }
            case OpKind::Scale: {
                auto& ga = b.grad[n.args[0]];
                const T s = static_cast<T>(n.fscalar);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                break;
            }
            case OpKind::Log: {
                auto& ga = b.grad[n.args[0]];
                const auto& x = b.val[n.args[0]];
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
                break;
            }
            case OpKind::MatMul: {
                const Node& na = nodes_[n.args[0]];
                const Node& nb = nodes_[n.args[1]];
                const std::size_t m = na.shape[0], kk = na.shape[1];
                const std::size_t nn = nb.shape.size() == 2 ? nb.shape[1] : 1;
                // gA += g B^T ; gB += A^T g
                if (serial) {
                    k::serial::matmul_nt<true>(g.data(), b.val[n.args[1]].data(), b.grad[n.args[0]].data(),
                                               m, kk, nn);
                    k::serial::matmul_tn<true>(b.val[n.args[0]].data(), g.data(), b.grad[n.args[1]].data(),
                                               m, kk, nn);
                } else {
                    k::matmul_nt<true>(g.data(), b.val[n.args[1]].data(), b.grad[n.args[0]].data(), m, kk, nn);
                    k::matmul_tn<true>(b.val[n.args[0]].data(), g.data(), b.grad[n.args[1]].data(), m, kk, nn);
                }
                break;
            }
            case OpKind::Transpose: {
                const Shape& s = nodes_[n.args[0]].shape;
                auto& ga = b.grad[n.args[0]];
                for (std::size_t i = 0; i < s[0]; ++i)
                    for (std::size_t j = 0; j < s[1]; ++j) ga[i * s[1] + j] += g[j * s[0] + i];
                break;
            }
            case OpKind::Conv2d: {
                const Shape& sx = nodes_[n.args[0]].shape;
                const Shape& sw = nodes_[n.args[1]].shape;
                if (serial) {
                    k::serial::conv2d_grad_input<true>(g.data(), b.val[n.args[1]].data(),
                                                       b.grad[n.args[0]].data(), sx[0], sx[1], sx[2], sw[0],
                                                       sw[2], sw[3]);
                    k::serial::conv2d_grad_weight<true>(g.data(), b.val[n.args[0]].data(),
                                                        b.grad[n.args[1]].data(), sx[0], sx[1], sx[2], sw[0],
                                                        sw[2], sw[3]);
                } else {
                    k::conv2d_grad_input<true>(g.data(), b.val[n.args[1]].data(), b.grad[n.args[0]].data(),
                                               sx[0], sx[1], sx[2], sw[0], sw[2], sw[3]);
                    k::conv2d_grad_weight<true>(g.data(), b.val[n.args[0]].data(), b.grad[n.args[1]].data(),
                                                sx[0], sx[1], sx[2], sw[0], sw[2], sw[3]);
                }
                break;
            }
            case OpKind::ChannelBias: {
                const Shape& sx = nodes_[n.args[0]].shape;
                auto& gx = b.grad[n.args[0]];
                auto& gb = b.grad[n.args[1]];
                const std::size_t hw = sx[1] * sx[2];
                for (std::size_t c = 0; c < sx[0]; ++c) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < hw; ++i) {
                        gx[c * hw + i] += g[c * hw + i];
                        acc += g[c * hw + i];
                    }
                    gb[c] += acc;
                }
                break;
            }
            case OpKind::Relu: {
                const auto& x = b.val[n.args[0]];
                if (serial)
                    k::serial::relu_grad(x.data(), g.data(), b.grad[n.args[0]].data(), g.size());
                else
                    k::relu_grad(x.data(), g.data(), b.grad[n.args[0]].data(), g.size());
                break;
            }
            case OpKind::AvgPool2d: {
                const Shape& sx = nodes_[n.args[0]].shape;
                if (serial)
                    k::serial::avgpool2d_grad(g.data(), b.grad[n.args[0]].data(), sx[0], sx[1], sx[2], n.iattr);
                else
                    k::avgpool2d_grad(g.data(), b.grad[n.args[0]].data(), sx[0], sx[1], sx[2], n.iattr);
                break;
            }
            case OpKind::SpatialMean: {
                const Shape& sx = nodes_[n.args[0]].shape;
                auto& gx = b.grad[n.args[0]];
                const std::size_t hw = sx[1] * sx[2];
                const T inv = T(1) / static_cast<T>(hw);
                for (std::size_t c = 0; c < sx[0]; ++c) {
                    const T gc = g[c] * inv;
                    for (std::size_t i = 0; i < hw; ++i) gx[c * hw + i] += gc;
                }
                break;
            }
            case OpKind::Softmax: {
                const Shape& s = n.shape;
                const std::size_t rows = s.size() == 2 ? s[0] : 1;
                const std::size_t cols = s.size() == 2 ? s[1] : s[0];
                const auto& y = b.val[id];
                auto& gx = b.grad[n.args[0]];
                for (std::size_t r = 0; r < rows; ++r) {
                    T dotgy = T(0);
                    for (std::size_t j = 0; j < cols; ++j) dotgy += g[r * cols + j] * y[r * cols + j];
                    for (std::size_t j = 0; j < cols; ++j) {
                        gx[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dotgy);
                    }
                }
                break;
            }
            case OpKind::L2Normalize: {
                const auto& x = b.val[n.args[0]];
                const auto& y = b.val[id];
                auto& gx = b.grad[n.args[0]];
                double nrm = 0.0;
                for (std::size_t i = 0; i < x.size(); ++i) {
                    nrm += static_cast<double>(x[i]) * static_cast<double>(x[i]);
                }
                nrm = std::sqrt(nrm);
                double gy = 0.0;
                for (std::size_t i = 0; i < x.size(); ++i) {
                    gy += static_cast<double>(g[i]) * static_cast<double>(y[i]);
                }
                // d/dx of x/||x||: (g - y <g,y>) / ||x||
                for (std::size_t i = 0; i < x.size(); ++i) {
                    gx[i] += static_cast<T>((static_cast<double>(g[i]) - static_cast<double>(y[i]) * gy) / nrm);
                }
                break;
            }
            case OpKind::Inner: {
                const auto& x = b.val[n.args[0]];
                const auto& y = b.val[n.args[1]];
                auto& ga = b.grad[n.args[0]];
                auto& gb = b.grad[n.args[1]];
                const T gs = g[0];
                for (std::size_t i = 0; i < x.size(); ++i) {
                    ga[i] += gs * y[i];
                    gb[i] += gs * x[i];
                }
                break;
            }
            case OpKind::Sum: {
                auto& ga = b.grad[n.args[0]];
                const T gs = g[0];
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gs;
                break;
            }
            case OpKind::Reshape: {
                auto& ga = b.grad[n.args[0]];
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                break;
            }
            case OpKind::Stack: {
                const std::size_t d = n.shape[1];
                for (std::size_t r = 0; r < n.args.size(); ++r) {
                    auto& ga = b.grad[n.args[r]];
                    for (std::size_t i = 0; i < d; ++i) ga[i] += g[r * d + i];
                }
                break;
            }
            case OpKind::Row: {
                const Shape& s = nodes_[n.args[0]].shape;
                auto& ga = b.grad[n.args[0]];
                for (std::size_t i = 0; i < s[1]; ++i) ga[n.iattr * s[1] + i] += g[i];
                break;
            }
        }
    }
}

void Program::run_forward() {
    if (nodes_.empty()) throw EmptyProgram("run_forward: program has no nodes");
    forward_pass(buf_, true);
    fwd_valid_ = true;
    bwd_valid_ = false;
}

void Program::run_backward(NodeId objective) {
    checked(objective, "run_backward");
    require_scalar(objective, "run_backward");
    if (!fwd_valid_) run_forward();
    backward_pass(buf_, objective);
    bwd_valid_ = true;
    bwd_obj_ = objective;
}

Tensor Program::value(NodeId id) {
    checked(id, "value");
    if (!fwd_valid_) run_forward();
    return Tensor(nodes_[id].shape, std::vector<float>(buf_.val[id].begin(), buf_.val[id].end()));
}

float Program::scalar_value(NodeId id) {
    require_scalar(id, "scalar_value");
    if (!fwd_valid_) run_forward();
    return buf_.val[id][0];
}

Tensor Program::gradient(NodeId id) const {
    checked(id, "gradient");
    if (!bwd_valid_) throw Error("gradient: no backward pass has been run");
    if (id > bwd_obj_ || buf_.grad[id].empty()) return Tensor(nodes_[id].shape);
    return Tensor(nodes_[id].shape, std::vector<float>(buf_.grad[id].begin(), buf_.grad[id].end()));
}

Tensor Program::input_gradient(NodeId objective, NodeId input) {
    const Node& n = checked(input, "input_gradient");
    if (n.kind != OpKind::Input) {
        throw UnknownNode("input_gradient: node " + std::to_string(input) + " is not an input");
    }
    run_backward(objective);
    return gradient(input);
}

std::map<std::string, Tensor> Program::parameter_gradients(NodeId objective) {
    run_backward(objective);
    std::map<std::string, Tensor> out;
    for (NodeId id : leaf_ids(false, true)) out.emplace(nodes_[id].name, gradient(id));
    return out;
}

GradCheckReport Program::grad_check(NodeId objective, double h) {
    if (nodes_.empty()) throw EmptyProgram("grad_check: program has no nodes");
    checked(objective, "grad_check");
    require_scalar(objective, "grad_check");
    if (!(h > 0.0) || h > 0.1) throw BadRange("grad_check: step h must satisfy 0 < h <= 0.1");

    Buffers<double> b;
    forward_pass(b, true);
    backward_pass(b, objective);

    const std::vector<NodeId> leaves = leaf_ids(true, true);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (NodeId id : leaves) analytic.push_back(b.grad[id]);

    GradCheckReport rep;
    rep.h = h;
    std::vector<float> errs;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const NodeId id = leaves[li];
        std::vector<double>& v = b.val[id];
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double keep = v[i];
            v[i] = keep + h;
            forward_pass(b, false);
            const double fp = b.val[objective][0];
            v[i] = keep - h;
            forward_pass(b, false);
            const double fm = b.val[objective][0];
            v[i] = keep;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = analytic[li][i];
            const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-12});
            errs.push_back(static_cast<float>(rel));
            rep.coordinate_names.push_back(nodes_[id].name + "[" + std::to_string(i) + "]");
            rep.max_rel_error = std::max(rep.max_rel_error, rel);
        }
    }
    if (!errs.empty()) {
        const std::size_t n_coords = errs.size();
        rep.per_coordinate = Tensor({n_coords}, std::move(errs));
    }
    return rep;
}

template void Program::forward_pass<float>(Buffers<float>&, bool) const;
template void Program::forward_pass<double>(Buffers<double>&, bool) const;
template void Program::backward_pass<float>(Buffers<float>&, NodeId) const;
template void Program::backward_pass<double>(Buffers<double>&, NodeId) const;

}  // namespace cbv::numcore
