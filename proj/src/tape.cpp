#include "oattn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "oattn/parallel.hpp"

namespace oattn {

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::ScalarMul: return "scalar-mul";
        case Op::ScalarAdd: return "scalar-add";
        case Op::ClampMin: return "clamp-min";
        case Op::Relu: return "relu";
        case Op::LeakyRelu: return "leaky-relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Abs: return "absolute-value";
        case Op::Square: return "square";
        case Op::Sqrt: return "square-root";
        case Op::Log: return "natural-log";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::SoftmaxRows: return "softmax-over-rows";
        case Op::Matmul: return "matmul";
        case Op::Conv2d: return "conv2d";
        case Op::NearestUp2: return "nearest-upsample";
        case Op::SumPool2: return "sum-pool";
        case Op::ConcatC: return "channel-concat";
        case Op::ConcatN: return "batch-concat";
        case Op::SliceC: return "channel-slice";
        case Op::SliceN: return "batch-slice";
        case Op::SliceHW: return "spatial-slice";
        case Op::PadHW: return "spatial-pad";
        case Op::GatherRows: return "gather-rows";
        case Op::ScatterRows: return "scatter-rows";
        case Op::Transpose2d: return "transpose";
        case Op::Reshape: return "reshape";
        case Op::ExpandScalar: return "expand-scalar";
        case Op::RowSum: return "row-sum";
        case Op::RowBroadcast: return "row-broadcast";
        case Op::BroadcastC: return "broadcast-channel";
        case Op::ReduceSumNC: return "reduce-sum-channel";
        case Op::ConvInputGrad: return "conv2d-input-grad";
        case Op::ConvWeightGrad: return "conv2d-weight-grad";
        case Op::SoftmaxRowsVjp: return "softmax-over-rows (gradient)";
        case Op::Gate: return "gate";
    }
    return "?";
}

namespace {

constexpr double kParallelFlops = 1 << 18;

[[noreturn]] void fail(Op op, const std::string& msg) {
    throw TapeError(std::string("op '") + op_name(op) + "': " + msg);
}

int conv_out_side(int n, int k, int stride, int pad) {
    return (n + 2 * pad - k) / stride + 1;
}

// ---- dense kernels ---------------------------------------------------------

// C(n x m) = A(n x k) * B(k x m)
template <typename T>
void mm_nn(const T* A, const T* B, T* C, std::int64_t n, std::int64_t k, std::int64_t m) {
    auto rows = [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            T* c = C + i * m;
            std::fill(c, c + m, T(0));
            const T* a = A + i * k;
            for (std::int64_t kk = 0; kk < k; ++kk) {
                const T av = a[kk];
                const T* b = B + kk * m;
                for (std::int64_t j = 0; j < m; ++j) c[j] += av * b[j];
            }
        }
    };
    if (2.0 * static_cast<double>(n) * k * m > kParallelFlops)
        parallel_for(n, rows);
    else
        rows(0, n);
}

// C(n x m) = A(n x k) * B(m x k)^T
template <typename T>
void mm_nt(const T* A, const T* B, T* C, std::int64_t n, std::int64_t k, std::int64_t m) {
    auto rows = [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            const T* a = A + i * k;
            T* c = C + i * m;
            for (std::int64_t j = 0; j < m; ++j) {
                const T* b = B + j * k;
                T acc = T(0);
                for (std::int64_t kk = 0; kk < k; ++kk) acc += a[kk] * b[kk];
                c[j] = acc;
            }
        }
    };
    if (2.0 * static_cast<double>(n) * k * m > kParallelFlops)
        parallel_for(n, rows);
    else
        rows(0, n);
}

// C(n x m) = A(k x n)^T * B(k x m)
template <typename T>
void mm_tn(const T* A, const T* B, T* C, std::int64_t n, std::int64_t k, std::int64_t m) {
    auto rows = [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i) {
            T* c = C + i * m;
            std::fill(c, c + m, T(0));
            for (std::int64_t kk = 0; kk < k; ++kk) {
                const T av = A[kk * n + i];
                const T* b = B + kk * m;
                for (std::int64_t j = 0; j < m; ++j) c[j] += av * b[j];
            }
        }
    };
    if (2.0 * static_cast<double>(n) * k * m > kParallelFlops)
        parallel_for(n, rows);
    else
        rows(0, n);
}

// C(n x m) = A(k x n)^T * B(m x k)^T
template <typename T>
void mm_tt(const T* A, const T* B, T* C, std::int64_t n, std::int64_t k, std::int64_t m) {
    for (std::int64_t i = 0; i < n; ++i) {
        T* c = C + i * m;
        for (std::int64_t j = 0; j < m; ++j) {
            const T* b = B + j * k;
            T acc = T(0);
            for (std::int64_t kk = 0; kk < k; ++kk) acc += A[kk * n + i] * b[kk];
            c[j] = acc;
        }
    }
}

template <typename T>
void im2col(const T* x, int cin, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
    for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* dst = col + static_cast<std::int64_t>((ci * k + ky) * k + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    T* drow = dst + static_cast<std::int64_t>(oy) * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(drow, drow + wo, T(0));
                        continue;
                    }
                    const T* srow = x + static_cast<std::int64_t>(ci * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, int cin, int h, int w, int k, int stride, int pad, int ho, int wo, T* x) {
    for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* src = col + static_cast<std::int64_t>((ci * k + ky) * k + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    T* drow = x + static_cast<std::int64_t>(ci * h + iy) * w;
                    const T* srow = src + static_cast<std::int64_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) drow[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---- tape ------------------------------------------------------------------

template <typename T>
Tape<T>::Tape() {
    nodes_.reserve(256);
}

template <typename T>
Tape<T>::~Tape() = default;

template <typename T>
void Tape<T>::check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
        throw TapeError("invalid tape handle");
}

template <typename T>
Var Tape<T>::push(Node n) {
    exec(n);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
const Shape& Tape<T>::shape(Var v) const {
    check(v);
    return nodes_[static_cast<std::size_t>(v.id)].shape;
}

template <typename T>
const std::vector<T>& Tape<T>::val(Var v) const {
    check(v);
    return nodes_[static_cast<std::size_t>(v.id)].val;
}

template <typename T>
Tensor<T> Tape<T>::tensor(Var v) const {
    check(v);
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return Tensor<T>(n.shape, n.val);
}

template <typename T>
T Tape<T>::scalar_value(Var v) const {
    check(v);
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (numel(n.shape) != 1) throw TapeError("scalar_value: node is not scalar, shape " + shape_str(n.shape));
    return n.val[0];
}

template <typename T>
bool Tape<T>::requires_grad(Var v) const {
    check(v);
    return nodes_[static_cast<std::size_t>(v.id)].rg;
}

template <typename T>
std::size_t Tape<T>::node_count() const {
    return nodes_.size();
}

template <typename T>
void Tape<T>::reset() {
    nodes_.clear();
}

template <typename T>
Var Tape<T>::leaf(Tensor<T>& external, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.shape = external.shape;
    n.val = external.data;
    n.rg = requires_grad;
    n.sink = requires_grad ? &external : nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::input(const Tensor<T>& value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.shape = value.shape;
    n.val = value.data;
    n.rg = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::constant(const Tensor<T>& value) {
    return constant(value.shape, value.data);
}

template <typename T>
Var Tape<T>::constant(Shape shape, std::vector<T> data) {
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
        throw TapeError("constant: data length does not match shape " + shape_str(shape));
    Node n;
    n.op = Op::Const;
    n.shape = std::move(shape);
    n.val = std::move(data);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::scalar_const(T v) {
    return constant(Shape{1}, std::vector<T>{v});
}

template <typename T>
Var Tape<T>::zeros(Shape shape) {
    std::vector<T> data(static_cast<std::size_t>(numel(shape)), T(0));
    return constant(std::move(shape), std::move(data));
}

namespace {
template <typename T, typename Node>
Node binary_node(Op op, Var a, Var b, const Node& na, const Node& nb) {
    if (na.shape != nb.shape)
        fail(op, "shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
    Node n;
    n.op = op;
    n.in = {a.id, b.id};
    n.shape = na.shape;
    n.rg = na.rg || nb.rg;
    return n;
}
}  // namespace

#define OATTN_NODE(v) nodes_[static_cast<std::size_t>((v).id)]

template <typename T>
Var Tape<T>::add(Var a, Var b) {
    check(a);
    check(b);
    return push(binary_node<T>(Op::Add, a, b, OATTN_NODE(a), OATTN_NODE(b)));
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
    check(a);
    check(b);
    return push(binary_node<T>(Op::Sub, a, b, OATTN_NODE(a), OATTN_NODE(b)));
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
    check(a);
    check(b);
    return push(binary_node<T>(Op::Mul, a, b, OATTN_NODE(a), OATTN_NODE(b)));
}

template <typename T>
Var Tape<T>::div(Var a, Var b) {
    check(a);
    check(b);
    return push(binary_node<T>(Op::Div, a, b, OATTN_NODE(a), OATTN_NODE(b)));
}

namespace {
template <typename NodeT>
NodeT unary_node(Op op, Var a, const NodeT& na, double s0 = 0.0) {
    NodeT n;
    n.op = op;
    n.in = {a.id};
    n.shape = na.shape;
    n.rg = na.rg;
    n.s0 = s0;
    return n;
}
}  // namespace

template <typename T>
Var Tape<T>::scalar_mul(Var a, double s) {
    check(a);
    return push(unary_node(Op::ScalarMul, a, OATTN_NODE(a), s));
}

template <typename T>
Var Tape<T>::scalar_add(Var a, double s) {
    check(a);
    return push(unary_node(Op::ScalarAdd, a, OATTN_NODE(a), s));
}

template <typename T>
Var Tape<T>::clamp_min(Var a, double lo) {
    check(a);
    return push(unary_node(Op::ClampMin, a, OATTN_NODE(a), lo));
}

template <typename T>
Var Tape<T>::relu(Var a) {
    check(a);
    return push(unary_node(Op::Relu, a, OATTN_NODE(a)));
}

template <typename T>
Var Tape<T>::leaky_relu(Var a, double slope) {
    check(a);
    return push(unary_node(Op::LeakyRelu, a, OATTN_NODE(a), slope));
}

template <typename T>
Var Tape<T>::sigmoid(Var a) {
    check(a);
    return push(unary_node(Op::Sigmoid, a, OATTN_NODE(a)));
}

template <typename T>
Var Tape<T>::abs(Var a) {
    check(a);
    return push(unary_node(Op::Abs, a, OATTN_NODE(a)));
}

template <typename T>
Var Tape<T>::square(Var a) {
    check(a);
    return push(unary_node(Op::Square, a, OATTN_NODE(a)));
}

template <typename T>
Var Tape<T>::sqrt(Var a) {
    check(a);
    return push(unary_node(Op::Sqrt, a, OATTN_NODE(a)));
}

template <typename T>
Var Tape<T>::log(Var a) {
    check(a);
    return push(unary_node(Op::Log, a, OATTN_NODE(a)));
}

template <typename T>
Var Tape<T>::sum(Var a) {
    check(a);
    Node n = unary_node(Op::Sum, a, OATTN_NODE(a));
    n.shape = {1};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::mean(Var a) {
    check(a);
    if (OATTN_NODE(a).val.empty()) fail(Op::Mean, "empty input");
    Node n = unary_node(Op::Mean, a, OATTN_NODE(a));
    n.shape = {1};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::expand_scalar(Var a, Shape shape) {
    check(a);
    if (numel(OATTN_NODE(a).shape) != 1) fail(Op::ExpandScalar, "input must be scalar");
    Node n = unary_node(Op::ExpandScalar, a, OATTN_NODE(a));
    n.shape = std::move(shape);
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::row_sum(Var a) {
    check(a);
    const Node& na = OATTN_NODE(a);
    if (na.shape.size() != 2) fail(Op::RowSum, "expects a matrix, got " + shape_str(na.shape));
    Node n = unary_node(Op::RowSum, a, na);
    n.shape = {na.shape[0], 1};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::row_broadcast(Var a, int cols) {
    check(a);
    const Node& na = OATTN_NODE(a);
    if (na.shape.size() != 2 || na.shape[1] != 1)
        fail(Op::RowBroadcast, "expects [R,1], got " + shape_str(na.shape));
    Node n = unary_node(Op::RowBroadcast, a, na);
    n.shape = {na.shape[0], cols};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::broadcast_c(Var a, int nb, int h, int w) {
    check(a);
    const Node& na = OATTN_NODE(a);
    if (na.shape.size() != 1) fail(Op::BroadcastC, "expects [C], got " + shape_str(na.shape));
    Node n = unary_node(Op::BroadcastC, a, na);
    n.shape = {nb, na.shape[0], h, w};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::reduce_sum_nc(Var a) {
    check(a);
    const Node& na = OATTN_NODE(a);
    if (na.shape.size() != 4) fail(Op::ReduceSumNC, "expects NCHW, got " + shape_str(na.shape));
    Node n = unary_node(Op::ReduceSumNC, a, na);
    n.shape = {na.shape[1]};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::softmax_rows(Var a) {
    check(a);
    const Node& na = OATTN_NODE(a);
    if (na.shape.size() != 2) fail(Op::SoftmaxRows, "expects a matrix, got " + shape_str(na.shape));
    return push(unary_node(Op::SoftmaxRows, a, na));
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b, bool trans_a, bool trans_b) {
    check(a);
    check(b);
    const Node& na = OATTN_NODE(a);
    const Node& nb = OATTN_NODE(b);
    if (na.shape.size() != 2 || nb.shape.size() != 2)
        fail(Op::Matmul, "expects matrices, got " + shape_str(na.shape) + " and " + shape_str(nb.shape));
    const int n = trans_a ? na.shape[1] : na.shape[0];
    const int k = trans_a ? na.shape[0] : na.shape[1];
    const int k2 = trans_b ? nb.shape[1] : nb.shape[0];
    const int m = trans_b ? nb.shape[0] : nb.shape[1];
    if (k != k2)
        fail(Op::Matmul, "inner dimension mismatch " + shape_str(na.shape) + (trans_a ? "^T" : "") +
                             " x " + shape_str(nb.shape) + (trans_b ? "^T" : ""));
    Node nd;
    nd.op = Op::Matmul;
    nd.in = {a.id, b.id};
    nd.shape = {n, m};
    nd.rg = na.rg || nb.rg;
    nd.i0 = trans_a ? 1 : 0;
    nd.i1 = trans_b ? 1 : 0;
    return push(std::move(nd));
}

template <typename T>
Var Tape<T>::transpose2d(Var a) {
    check(a);
    const Node& na = OATTN_NODE(a);
    if (na.shape.size() != 2) fail(Op::Transpose2d, "expects a matrix, got " + shape_str(na.shape));
    Node n = unary_node(Op::Transpose2d, a, na);
    n.shape = {na.shape[1], na.shape[0]};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::reshape(Var a, Shape shape) {
    check(a);
    const Node& na = OATTN_NODE(a);
    if (numel(shape) != numel(na.shape))
        fail(Op::Reshape, "element count mismatch " + shape_str(na.shape) + " -> " + shape_str(shape));
    Node n = unary_node(Op::Reshape, a, na);
    n.shape = std::move(shape);
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::gather_rows(Var a, IndexList idx) {
    check(a);
    const Node& na = OATTN_NODE(a);
    if (na.shape.size() != 2) fail(Op::GatherRows, "expects a matrix, got " + shape_str(na.shape));
    for (int i : *idx)
        if (i < 0 || i >= na.shape[0])
            fail(Op::GatherRows, "index " + std::to_string(i) + " out of range for " + shape_str(na.shape));
    Node n = unary_node(Op::GatherRows, a, na);
    n.shape = {static_cast<int>(idx->size()), na.shape[1]};
    n.idx = std::move(idx);
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::scatter_rows(Var a, IndexList idx, int rows) {
    check(a);
    const Node& na = OATTN_NODE(a);
    if (na.shape.size() != 2) fail(Op::ScatterRows, "expects a matrix, got " + shape_str(na.shape));
    if (static_cast<int>(idx->size()) != na.shape[0])
        fail(Op::ScatterRows, "index list length " + std::to_string(idx->size()) +
                                  " does not match input rows " + std::to_string(na.shape[0]));
    for (int i : *idx)
        if (i < 0 || i >= rows)
            fail(Op::ScatterRows, "index " + std::to_string(i) + " out of range for target rows " +
                                      std::to_string(rows));
    Node n = unary_node(Op::ScatterRows, a, na);
    n.shape = {rows, na.shape[1]};
    n.idx = std::move(idx);
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::conv2d(Var x, Var w, int stride, int pad) {
    check(x);
    check(w);
    const Node& nx = OATTN_NODE(x);
    const Node& nw = OATTN_NODE(w);
    if (nx.shape.size() != 4 || nw.shape.size() != 4)
        fail(Op::Conv2d, "expects NCHW input and OIHW weight, got " + shape_str(nx.shape) + " and " +
                             shape_str(nw.shape));
    if (nw.shape[2] != nw.shape[3]) fail(Op::Conv2d, "non-square kernel " + shape_str(nw.shape));
    if (nx.shape[1] != nw.shape[1])
        fail(Op::Conv2d, "channel mismatch: input " + shape_str(nx.shape) + ", weight " + shape_str(nw.shape));
    const int k = nw.shape[2];
    const int ho = conv_out_side(nx.shape[2], k, stride, pad);
    const int wo = conv_out_side(nx.shape[3], k, stride, pad);
    if (ho < 1 || wo < 1)
        fail(Op::Conv2d, "input " + shape_str(nx.shape) + " too small for kernel " + std::to_string(k) +
                             " stride " + std::to_string(stride) + " pad " + std::to_string(pad));
    Node n;
    n.op = Op::Conv2d;
    n.in = {x.id, w.id};
    n.shape = {nx.shape[0], nw.shape[0], ho, wo};
    n.rg = nx.rg || nw.rg;
    n.i0 = stride;
    n.i1 = pad;
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::nearest_up2(Var x) {
    check(x);
    const Node& nx = OATTN_NODE(x);
    if (nx.shape.size() != 4) fail(Op::NearestUp2, "expects NCHW, got " + shape_str(nx.shape));
    Node n = unary_node(Op::NearestUp2, x, nx);
    n.shape = {nx.shape[0], nx.shape[1], nx.shape[2] * 2, nx.shape[3] * 2};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::sum_pool2(Var x) {
    check(x);
    const Node& nx = OATTN_NODE(x);
    if (nx.shape.size() != 4 || nx.shape[2] % 2 || nx.shape[3] % 2)
        fail(Op::SumPool2, "expects NCHW with even spatial sides, got " + shape_str(nx.shape));
    Node n = unary_node(Op::SumPool2, x, nx);
    n.shape = {nx.shape[0], nx.shape[1], nx.shape[2] / 2, nx.shape[3] / 2};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::concat_c(const std::vector<Var>& xs) {
    if (xs.empty()) fail(Op::ConcatC, "no inputs");
    Node n;
    n.op = Op::ConcatC;
    int c = 0;
    for (Var v : xs) {
        check(v);
        const Node& nv = OATTN_NODE(v);
        if (nv.shape.size() != 4) fail(Op::ConcatC, "expects NCHW, got " + shape_str(nv.shape));
        const Node& n0 = OATTN_NODE(xs[0]);
        if (nv.shape[0] != n0.shape[0] || nv.shape[2] != n0.shape[2] || nv.shape[3] != n0.shape[3])
            fail(Op::ConcatC, "incompatible shapes " + shape_str(n0.shape) + " vs " + shape_str(nv.shape));
        c += nv.shape[1];
        n.in.push_back(v.id);
        n.rg = n.rg || nv.rg;
    }
    const Node& n0 = OATTN_NODE(xs[0]);
    n.shape = {n0.shape[0], c, n0.shape[2], n0.shape[3]};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::concat_n(const std::vector<Var>& xs) {
    if (xs.empty()) fail(Op::ConcatN, "no inputs");
    Node n;
    n.op = Op::ConcatN;
    int nb = 0;
    for (Var v : xs) {
        check(v);
        const Node& nv = OATTN_NODE(v);
        if (nv.shape.size() != 4) fail(Op::ConcatN, "expects NCHW, got " + shape_str(nv.shape));
        const Node& n0 = OATTN_NODE(xs[0]);
        if (nv.shape[1] != n0.shape[1] || nv.shape[2] != n0.shape[2] || nv.shape[3] != n0.shape[3])
            fail(Op::ConcatN, "incompatible shapes " + shape_str(n0.shape) + " vs " + shape_str(nv.shape));
        nb += nv.shape[0];
        n.in.push_back(v.id);
        n.rg = n.rg || nv.rg;
    }
    const Node& n0 = OATTN_NODE(xs[0]);
    n.shape = {nb, n0.shape[1], n0.shape[2], n0.shape[3]};
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::slice_c(Var x, int c0, int c1) {
    check(x);
    const Node& nx = OATTN_NODE(x);
    if (nx.shape.size() != 4 || c0 < 0 || c1 > nx.shape[1] || c0 >= c1)
        fail(Op::SliceC, "bad channel range [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") for " + shape_str(nx.shape));
    Node n = unary_node(Op::SliceC, x, nx);
    n.shape = {nx.shape[0], c1 - c0, nx.shape[2], nx.shape[3]};
    n.i0 = c0;
    n.i1 = c1;
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::slice_n(Var x, int n0, int n1) {
    check(x);
    const Node& nx = OATTN_NODE(x);
    if (nx.shape.size() != 4 || n0 < 0 || n1 > nx.shape[0] || n0 >= n1)
        fail(Op::SliceN, "bad batch range [" + std::to_string(n0) + "," + std::to_string(n1) +
                             ") for " + shape_str(nx.shape));
    Node n = unary_node(Op::SliceN, x, nx);
    n.shape = {n1 - n0, nx.shape[1], nx.shape[2], nx.shape[3]};
    n.i0 = n0;
    n.i1 = n1;
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::slice_hw(Var x, int r0, int c0, int h, int w) {
    check(x);
    const Node& nx = OATTN_NODE(x);
    if (nx.shape.size() != 4 || r0 < 0 || c0 < 0 || h < 1 || w < 1 || r0 + h > nx.shape[2] ||
        c0 + w > nx.shape[3])
        fail(Op::SliceHW, "bad crop " + std::to_string(r0) + "," + std::to_string(c0) + " " +
                              std::to_string(h) + "x" + std::to_string(w) + " for " + shape_str(nx.shape));
    Node n = unary_node(Op::SliceHW, x, nx);
    n.shape = {nx.shape[0], nx.shape[1], h, w};
    n.i0 = r0;
    n.i1 = c0;
    return push(std::move(n));
}

template <typename T>
Var Tape<T>::pad_hw(Var x, int out_h, int out_w, int r0, int c0) {
    check(x);
    const Node& nx = OATTN_NODE(x);
    if (nx.shape.size() != 4 || r0 < 0 || c0 < 0 || r0 + nx.shape[2] > out_h || c0 + nx.shape[3] > out_w)
        fail(Op::PadHW, "bad embed at " + std::to_string(r0) + "," + std::to_string(c0) + " into " +
                            std::to_string(out_h) + "x" + std::to_string(out_w) + " from " +
                            shape_str(nx.shape));
    Node n = unary_node(Op::PadHW, x, nx);
    n.shape = {nx.shape[0], nx.shape[1], out_h, out_w};
    n.i0 = r0;
    n.i1 = c0;
    return push(std::move(n));
}

// internal: gradient gates (zero-derivative masks); never differentiable
template <typename T>
static typename Tape<T>::Node gate_node(Var a, const typename Tape<T>::Node& na, int kind, double s0) {
    typename Tape<T>::Node n;
    n.op = Op::Gate;
    n.in = {a.id};
    n.shape = na.shape;
    n.rg = false;
    n.i0 = kind;
    n.s0 = s0;
    return n;
}

template <typename T>
Var Tape<T>::batch_norm_train(Var x, Var gamma, Var beta, double eps, std::vector<T>* batch_mean_out,
                              std::vector<T>* batch_var_out) {
    check(x);
    const Shape xs = OATTN_NODE(x).shape;
    if (xs.size() != 4) throw TapeError("batch-normalization: expects NCHW, got " + shape_str(xs));
    const double count = static_cast<double>(xs[0]) * xs[2] * xs[3];
    Var mu = scalar_mul(reduce_sum_nc(x), 1.0 / count);
    Var xc = sub(x, broadcast_c(mu, xs[0], xs[2], xs[3]));
    Var var = scalar_mul(reduce_sum_nc(square(xc)), 1.0 / count);
    if (batch_mean_out) *batch_mean_out = val(mu);
    if (batch_var_out) *batch_var_out = val(var);
    Var denom = sqrt(scalar_add(var, eps));
    Var xhat = div(xc, broadcast_c(denom, xs[0], xs[2], xs[3]));
    return add(mul(xhat, broadcast_c(gamma, xs[0], xs[2], xs[3])),
               broadcast_c(beta, xs[0], xs[2], xs[3]));
}

template <typename T>
Var Tape<T>::batch_norm_eval(Var x, Var gamma, Var beta, const Tensor<T>& running_mean,
                             const Tensor<T>& running_var, double eps) {
    check(x);
    const Shape xs = OATTN_NODE(x).shape;
    if (xs.size() != 4) throw TapeError("batch-normalization: expects NCHW, got " + shape_str(xs));
    Var rm = constant(running_mean);
    Var rv = constant(running_var);
    Var xc = sub(x, broadcast_c(rm, xs[0], xs[2], xs[3]));
    Var denom = sqrt(scalar_add(rv, eps));
    Var xhat = div(xc, broadcast_c(denom, xs[0], xs[2], xs[3]));
    return add(mul(xhat, broadcast_c(gamma, xs[0], xs[2], xs[3])),
               broadcast_c(beta, xs[0], xs[2], xs[3]));
}

// ---- execution ---------------------------------------------------------------

template <typename T>
void Tape<T>::exec(Node& n) const {
    const auto in_val = [&](int slot) -> const std::vector<T>& {
        return nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(slot)])].val;
    };
    const auto in_shape = [&](int slot) -> const Shape& {
        return nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(slot)])].shape;
    };
    n.val.resize(static_cast<std::size_t>(numel(n.shape)));
    switch (n.op) {
        case Op::Leaf:
        case Op::Const:
            return;
        case Op::Add: {
            const auto &a = in_val(0), &b = in_val(1);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] + b[i];
            return;
        }
        case Op::Sub: {
            const auto &a = in_val(0), &b = in_val(1);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] - b[i];
            return;
        }
        case Op::Mul: {
            const auto &a = in_val(0), &b = in_val(1);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] * b[i];
            return;
        }
        case Op::Div: {
            const auto &a = in_val(0), &b = in_val(1);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] / b[i];
            return;
        }
        case Op::ScalarMul: {
            const auto& a = in_val(0);
            const T s = static_cast<T>(n.s0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] * s;
            return;
        }
        case Op::ScalarAdd: {
            const auto& a = in_val(0);
            const T s = static_cast<T>(n.s0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] + s;
            return;
        }
        case Op::ClampMin: {
            const auto& a = in_val(0);
            const T lo = static_cast<T>(n.s0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] > lo ? a[i] : lo;
            return;
        }
        case Op::Relu: {
            const auto& a = in_val(0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] > T(0) ? a[i] : T(0);
            return;
        }
        case Op::LeakyRelu: {
            const auto& a = in_val(0);
            const T s = static_cast<T>(n.s0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] > T(0) ? a[i] : s * a[i];
            return;
        }
        case Op::Sigmoid: {
            const auto& a = in_val(0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = T(1) / (T(1) + std::exp(-a[i]));
            return;
        }
        case Op::Abs: {
            const auto& a = in_val(0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] < T(0) ? -a[i] : a[i];
            return;
        }
        case Op::Square: {
            const auto& a = in_val(0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] * a[i];
            return;
        }
        case Op::Sqrt: {
            const auto& a = in_val(0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::sqrt(a[i]);
            return;
        }
        case Op::Log: {
            const auto& a = in_val(0);
            for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::log(a[i]);
            return;
        }
        case Op::Sum: {
            const auto& a = in_val(0);
            T acc = T(0);
            for (const T v : a) acc += v;
            n.val[0] = acc;
            return;
        }
        case Op::Mean: {
            const auto& a = in_val(0);
            T acc = T(0);
            for (const T v : a) acc += v;
            n.val[0] = acc / static_cast<T>(a.size());
            return;
        }
        case Op::ExpandScalar: {
            const T v = in_val(0)[0];
            std::fill(n.val.begin(), n.val.end(), v);
            return;
        }
        case Op::RowSum: {
            const auto& a = in_val(0);
            const int rows = n.shape[0];
            const int cols = in_shape(0)[1];
            for (int r = 0; r < rows; ++r) {
                T acc = T(0);
                const T* row = a.data() + static_cast<std::int64_t>(r) * cols;
                for (int c = 0; c < cols; ++c) acc += row[c];
                n.val[static_cast<std::size_t>(r)] = acc;
            }
            return;
        }
        case Op::RowBroadcast: {
            const auto& a = in_val(0);
            const int rows = n.shape[0], cols = n.shape[1];
            for (int r = 0; r < rows; ++r)
                std::fill(n.val.begin() + static_cast<std::int64_t>(r) * cols,
                          n.val.begin() + static_cast<std::int64_t>(r + 1) * cols, a[static_cast<std::size_t>(r)]);
            return;
        }
        case Op::BroadcastC: {
            const auto& a = in_val(0);
            const int nb = n.shape[0], c = n.shape[1];
            const std::int64_t hw = static_cast<std::int64_t>(n.shape[2]) * n.shape[3];
            for (int b = 0; b < nb; ++b)
                for (int ci = 0; ci < c; ++ci)
                    std::fill(n.val.begin() + ((static_cast<std::int64_t>(b) * c + ci) * hw),
                              n.val.begin() + ((static_cast<std::int64_t>(b) * c + ci + 1) * hw),
                              a[static_cast<std::size_t>(ci)]);
            return;
        }
        case Op::ReduceSumNC: {
            const auto& a = in_val(0);
            const Shape& s = in_shape(0);
            const int nb = s[0], c = s[1];
            const std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
            std::fill(n.val.begin(), n.val.end(), T(0));
            for (int b = 0; b < nb; ++b)
                for (int ci = 0; ci < c; ++ci) {
                    const T* p = a.data() + (static_cast<std::int64_t>(b) * c + ci) * hw;
                    T acc = T(0);
                    for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
                    n.val[static_cast<std::size_t>(ci)] += acc;
                }
            return;
        }
        case Op::SoftmaxRows: {
            const auto& a = in_val(0);
            const int rows = n.shape[0], cols = n.shape[1];
            auto body = [&](std::int64_t r0, std::int64_t r1) {
                for (std::int64_t r = r0; r < r1; ++r) {
                    const T* src = a.data() + r * cols;
                    T* dst = n.val.data() + r * cols;
                    T mx = src[0];
                    for (int c = 1; c < cols; ++c) mx = std::max(mx, src[c]);
                    T denom = T(0);
                    for (int c = 0; c < cols; ++c) {
                        dst[c] = std::exp(src[c] - mx);
                        denom += dst[c];
                    }
                    for (int c = 0; c < cols; ++c) dst[c] /= denom;
                }
            };
            if (static_cast<std::int64_t>(rows) * cols > 1 << 16)
                parallel_for(rows, body);
            else
                body(0, rows);
            return;
        }
        case Op::SoftmaxRowsVjp: {
            // inputs: upstream gradient g, softmax output y
            const auto& g = in_val(0);
            const auto& y = in_val(1);
            const int rows = n.shape[0], cols = n.shape[1];
            for (int r = 0; r < rows; ++r) {
                const T* gr = g.data() + static_cast<std::int64_t>(r) * cols;
                const T* yr = y.data() + static_cast<std::int64_t>(r) * cols;
                T* dst = n.val.data() + static_cast<std::int64_t>(r) * cols;
                T dot = T(0);
                for (int c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                for (int c = 0; c < cols; ++c) dst[c] = (gr[c] - dot) * yr[c];
            }
            return;
        }
        case Op::Matmul: {
            const auto& a = in_val(0);
            const auto& b = in_val(1);
            const bool ta = n.i0 != 0, tb = n.i1 != 0;
            const Shape& sa = in_shape(0);
            const int nn = n.shape[0], m = n.shape[1];
            const int k = ta ? sa[0] : sa[1];
            if (!ta && !tb)
                mm_nn(a.data(), b.data(), n.val.data(), nn, k, m);
            else if (!ta && tb)
                mm_nt(a.data(), b.data(), n.val.data(), nn, k, m);
            else if (ta && !tb)
                mm_tn(a.data(), b.data(), n.val.data(), nn, k, m);
            else
                mm_tt(a.data(), b.data(), n.val.data(), nn, k, m);
            return;
        }
        case Op::Transpose2d: {
            const auto& a = in_val(0);
            const int rows = n.shape[0], cols = n.shape[1];  // output dims
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    n.val[static_cast<std::size_t>(r) * cols + c] =
                        a[static_cast<std::size_t>(c) * rows + r];
            return;
        }
        case Op::Reshape: {
            n.val = in_val(0);
            return;
        }
        case Op::GatherRows: {
            const auto& a = in_val(0);
            const int cols = n.shape[1];
            const auto& idx = *n.idx;
            for (std::size_t r = 0; r < idx.size(); ++r)
                std::memcpy(n.val.data() + r * static_cast<std::size_t>(cols),
                            a.data() + static_cast<std::size_t>(idx[r]) * cols,
                            sizeof(T) * static_cast<std::size_t>(cols));
            return;
        }
        case Op::ScatterRows: {
            const auto& a = in_val(0);
            const int cols = n.shape[1];
            const auto& idx = *n.idx;
            std::fill(n.val.begin(), n.val.end(), T(0));
            for (std::size_t r = 0; r < idx.size(); ++r) {
                T* dst = n.val.data() + static_cast<std::size_t>(idx[r]) * cols;
                const T* src = a.data() + r * static_cast<std::size_t>(cols);
                for (int c = 0; c < cols; ++c) dst[c] += src[c];
            }
            return;
        }
        case Op::Conv2d: {
            const auto& x = in_val(0);
            const auto& w = in_val(1);
            const Shape& sx = in_shape(0);
            const Shape& sw = in_shape(1);
            const int nb = sx[0], cin = sx[1], h = sx[2], wd = sx[3];
            const int cout = sw[0], k = sw[2];
            const int ho = n.shape[2], wo = n.shape[3];
            const std::int64_t ckk = static_cast<std::int64_t>(cin) * k * k;
            const std::int64_t howo = static_cast<std::int64_t>(ho) * wo;
            std::vector<T> col(static_cast<std::size_t>(ckk * howo));
            for (int b = 0; b < nb; ++b) {
                im2col(x.data() + static_cast<std::int64_t>(b) * cin * h * wd, cin, h, wd, k, n.i0,
                       n.i1, ho, wo, col.data());
                mm_nn(w.data(), col.data(), n.val.data() + static_cast<std::int64_t>(b) * cout * howo,
                      cout, ckk, howo);
            }
            return;
        }
        case Op::ConvInputGrad: {
            // inputs: gy [N,Cout,Ho,Wo], w [Cout,Cin,k,k]; output x-shaped
            const auto& gy = in_val(0);
            const auto& w = in_val(1);
            const Shape& sg = in_shape(0);
            const Shape& sw = in_shape(1);
            const int nb = sg[0], cout = sg[1], ho = sg[2], wo = sg[3];
            const int cin = sw[1], k = sw[2];
            const int h = n.shape[2], wd = n.shape[3];
            const std::int64_t ckk = static_cast<std::int64_t>(cin) * k * k;
            const std::int64_t howo = static_cast<std::int64_t>(ho) * wo;
            std::vector<T> colg(static_cast<std::size_t>(ckk * howo));
            std::fill(n.val.begin(), n.val.end(), T(0));
            for (int b = 0; b < nb; ++b) {
                mm_tn(w.data(), gy.data() + static_cast<std::int64_t>(b) * cout * howo, colg.data(),
                      ckk, cout, howo);
                col2im_add(colg.data(), cin, h, wd, k, n.i0, n.i1, ho, wo,
                           n.val.data() + static_cast<std::int64_t>(b) * cin * h * wd);
            }
            return;
        }
        case Op::ConvWeightGrad: {
            // inputs: gy [N,Cout,Ho,Wo], x [N,Cin,H,W]; output [Cout,Cin,k,k]
            const auto& gy = in_val(0);
            const auto& x = in_val(1);
            const Shape& sg = in_shape(0);
            const Shape& sx = in_shape(1);
            const int nb = sg[0], cout = sg[1], ho = sg[2], wo = sg[3];
            const int cin = sx[1], h = sx[2], wd = sx[3];
            const int k = n.shape[2];
            const std::int64_t ckk = static_cast<std::int64_t>(cin) * k * k;
            const std::int64_t howo = static_cast<std::int64_t>(ho) * wo;
            std::vector<T> col(static_cast<std::size_t>(ckk * howo));
            std::vector<T> gw(static_cast<std::size_t>(cout * ckk));
            std::fill(n.val.begin(), n.val.end(), T(0));
            for (int b = 0; b < nb; ++b) {
                im2col(x.data() + static_cast<std::int64_t>(b) * cin * h * wd, cin, h, wd, k, n.i0,
                       n.i1, ho, wo, col.data());
                mm_nt(gy.data() + static_cast<std::int64_t>(b) * cout * howo, col.data(), gw.data(),
                      cout, howo, ckk);
                for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] += gw[i];
            }
            return;
        }
        case Op::NearestUp2: {
            const auto& a = in_val(0);
            const Shape& s = in_shape(0);
            const int nc = s[0] * s[1], h = s[2], w = s[3];
            for (int p = 0; p < nc; ++p) {
                const T* src = a.data() + static_cast<std::int64_t>(p) * h * w;
                T* dst = n.val.data() + static_cast<std::int64_t>(p) * 4 * h * w;
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        const T v = src[y * w + x];
                        T* d = dst + (2 * y) * (2 * w) + 2 * x;
                        d[0] = v;
                        d[1] = v;
                        d[2 * w] = v;
                        d[2 * w + 1] = v;
                    }
            }
            return;
        }
        case Op::SumPool2: {
            const auto& a = in_val(0);
            const Shape& s = in_shape(0);
            const int nc = s[0] * s[1], h = s[2], w = s[3];
            for (int p = 0; p < nc; ++p) {
                const T* src = a.data() + static_cast<std::int64_t>(p) * h * w;
                T* dst = n.val.data() + static_cast<std::int64_t>(p) * (h / 2) * (w / 2);
                for (int y = 0; y < h / 2; ++y)
                    for (int x = 0; x < w / 2; ++x) {
                        const T* sp = src + (2 * y) * w + 2 * x;
                        dst[y * (w / 2) + x] = sp[0] + sp[1] + sp[w] + sp[w + 1];
                    }
            }
            return;
        }
        case Op::ConcatC: {
            const int nb = n.shape[0];
            const std::int64_t hw = static_cast<std::int64_t>(n.shape[2]) * n.shape[3];
            const std::int64_t row = static_cast<std::int64_t>(n.shape[1]) * hw;
            std::int64_t off = 0;
            for (std::size_t s = 0; s < n.in.size(); ++s) {
                const auto& a = in_val(static_cast<int>(s));
                const int ci = in_shape(static_cast<int>(s))[1];
                for (int b = 0; b < nb; ++b)
                    std::memcpy(n.val.data() + b * row + off,
                                a.data() + static_cast<std::int64_t>(b) * ci * hw,
                                sizeof(T) * static_cast<std::size_t>(ci * hw));
                off += static_cast<std::int64_t>(ci) * hw;
            }
            return;
        }
        case Op::ConcatN: {
            std::int64_t off = 0;
            for (std::size_t s = 0; s < n.in.size(); ++s) {
                const auto& a = in_val(static_cast<int>(s));
                std::memcpy(n.val.data() + off, a.data(), sizeof(T) * a.size());
                off += static_cast<std::int64_t>(a.size());
            }
            return;
        }
        case Op::SliceC: {
            const auto& a = in_val(0);
            const Shape& s = in_shape(0);
            const std::int64_t hw = static_cast<std::int64_t>(s[2]) * s[3];
            const std::int64_t in_row = static_cast<std::int64_t>(s[1]) * hw;
            const std::int64_t out_row = static_cast<std::int64_t>(n.shape[1]) * hw;
            for (int b = 0; b < s[0]; ++b)
                std::memcpy(n.val.data() + b * out_row, a.data() + b * in_row + n.i0 * hw,
                            sizeof(T) * static_cast<std::size_t>(out_row));
            return;
        }
        case Op::SliceN: {
            const auto& a = in_val(0);
            const Shape& s = in_shape(0);
            const std::int64_t item = static_cast<std::int64_t>(s[1]) * s[2] * s[3];
            std::memcpy(n.val.data(), a.data() + n.i0 * item, sizeof(T) * n.val.size());
            return;
        }
        case Op::SliceHW: {
            const auto& a = in_val(0);
            const Shape& s = in_shape(0);
            const int nc = s[0] * s[1], h = s[2], w = s[3];
            const int oh = n.shape[2], ow = n.shape[3];
            for (int p = 0; p < nc; ++p) {
                const T* src = a.data() + static_cast<std::int64_t>(p) * h * w;
                T* dst = n.val.data() + static_cast<std::int64_t>(p) * oh * ow;
                for (int y = 0; y < oh; ++y)
                    std::memcpy(dst + static_cast<std::int64_t>(y) * ow,
                                src + static_cast<std::int64_t>(n.i0 + y) * w + n.i1,
                                sizeof(T) * static_cast<std::size_t>(ow));
            }
            return;
        }
        case Op::PadHW: {
            const auto& a = in_val(0);
            const Shape& s = in_shape(0);
            const int nc = s[0] * s[1], ih = s[2], iw = s[3];
            const int oh = n.shape[2], ow = n.shape[3];
            std::fill(n.val.begin(), n.val.end(), T(0));
            for (int p = 0; p < nc; ++p) {
                const T* src = a.data() + static_cast<std::int64_t>(p) * ih * iw;
                T* dst = n.val.data() + static_cast<std::int64_t>(p) * oh * ow;
                for (int y = 0; y < ih; ++y)
                    std::memcpy(dst + static_cast<std::int64_t>(n.i0 + y) * ow + n.i1,
                                src + static_cast<std::int64_t>(y) * iw,
                                sizeof(T) * static_cast<std::size_t>(iw));
            }
            return;
        }
        case Op::Gate: {
            const auto& a = in_val(0);
            const T s = static_cast<T>(n.s0);
            switch (n.i0) {
                case 0:  // relu gate
                    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] > T(0) ? T(1) : T(0);
                    return;
                case 1:  // leaky-relu gate
                    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] > T(0) ? T(1) : s;
                    return;
                case 2:  // sign
                    for (std::size_t i = 0; i < n.val.size(); ++i)
                        n.val[i] = a[i] > T(0) ? T(1) : (a[i] < T(0) ? T(-1) : T(0));
                    return;
                default:  // clamp-min gate
                    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = a[i] > s ? T(1) : T(0);
                    return;
            }
        }
    }
    throw TapeError("unhandled op in exec");
}

// ---- differentiation ----------------------------------------------------------

template <typename T>
Var Tape<T>::vjp_inputs(int id, Var g, int which) {
    // Copy what we need before emitting: emission reallocates nodes_.
    const Op op = nodes_[static_cast<std::size_t>(id)].op;
    const std::vector<int> in = nodes_[static_cast<std::size_t>(id)].in;
    const Shape out_shape = nodes_[static_cast<std::size_t>(id)].shape;
    const double s0 = nodes_[static_cast<std::size_t>(id)].s0;
    const int i0 = nodes_[static_cast<std::size_t>(id)].i0;
    const int i1 = nodes_[static_cast<std::size_t>(id)].i1;
    const IndexList idx = nodes_[static_cast<std::size_t>(id)].idx;
    const Shape in_shape = nodes_[static_cast<std::size_t>(in[static_cast<std::size_t>(which)])].shape;
    const Var self{id};
    const Var x{in[0]};

    auto gate = [&](int kind, double param) {
        return push(gate_node<T>(x, OATTN_NODE(x), kind, param));
    };

    switch (op) {
        case Op::Add:
            return g;
        case Op::Sub:
            return which == 0 ? g : scalar_mul(g, -1.0);
        case Op::Mul:
            return mul(g, Var{in[which == 0 ? 1 : 0]});
        case Op::Div: {
            if (which == 0) return div(g, Var{in[1]});
            return scalar_mul(mul(g, div(self, Var{in[1]})), -1.0);
        }
        case Op::ScalarMul:
            return scalar_mul(g, s0);
        case Op::ScalarAdd:
            return g;
        case Op::ClampMin:
            return mul(g, gate(3, s0));
        case Op::Relu:
            return mul(g, gate(0, 0.0));
        case Op::LeakyRelu:
            return mul(g, gate(1, s0));
        case Op::Sigmoid:
            return mul(g, mul(self, scalar_add(scalar_mul(self, -1.0), 1.0)));
        case Op::Abs:
            return mul(g, gate(2, 0.0));
        case Op::Square:
            return mul(g, scalar_mul(x, 2.0));
        case Op::Sqrt:
            return div(g, scalar_mul(self, 2.0));
        case Op::Log:
            return div(g, x);
        case Op::Sum:
            return expand_scalar(g, in_shape);
        case Op::Mean:
            return scalar_mul(expand_scalar(g, in_shape), 1.0 / static_cast<double>(numel(in_shape)));
        case Op::ExpandScalar:
            return reshape(sum(g), in_shape);
        case Op::RowSum:
            return row_broadcast(g, in_shape[1]);
        case Op::RowBroadcast:
            return row_sum(g);
        case Op::BroadcastC:
            return reduce_sum_nc(g);
        case Op::ReduceSumNC:
            return broadcast_c(g, in_shape[0], in_shape[2], in_shape[3]);
        case Op::SoftmaxRows: {
            Node n;
            n.op = Op::SoftmaxRowsVjp;
            n.in = {g.id, id};
            n.shape = out_shape;
            n.rg = OATTN_NODE(g).rg || nodes_[static_cast<std::size_t>(id)].rg;
            return push(std::move(n));
        }
        case Op::SoftmaxRowsVjp:
            throw TapeError(
                "second-order differentiation is not supported through op 'softmax-over-rows'");
        case Op::Matmul: {
            const Var a{in[0]}, b{in[1]};
            const bool ta = i0 != 0, tb = i1 != 0;
            if (which == 0) return ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
            return tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
        }
        case Op::Transpose2d:
            return transpose2d(g);
        case Op::Reshape:
            return reshape(g, in_shape);
        case Op::GatherRows:
            return scatter_rows(g, idx, in_shape[0]);
        case Op::ScatterRows:
            return gather_rows(g, idx);
        case Op::Conv2d: {
            const Var w{in[1]};
            if (which == 0) {
                Node n;
                n.op = Op::ConvInputGrad;
                n.in = {g.id, w.id};
                n.shape = in_shape;  // x shape
                n.rg = OATTN_NODE(g).rg || OATTN_NODE(w).rg;
                n.i0 = i0;
                n.i1 = i1;
                return push(std::move(n));
            }
            Node n;
            n.op = Op::ConvWeightGrad;
            n.in = {g.id, in[0]};
            n.shape = in_shape;  // w shape
            n.rg = OATTN_NODE(g).rg || nodes_[static_cast<std::size_t>(in[0])].rg;
            n.i0 = i0;
            n.i1 = i1;
            return push(std::move(n));
        }
        case Op::ConvInputGrad: {
            // out = conv_input_grad(gy, w); upstream u is x-shaped
            const Var gy{in[0]}, w{in[1]};
            if (which == 0) return conv2d(g, w, i0, i1);  // d/d gy
            Node n;  // d/d w
            n.op = Op::ConvWeightGrad;
            n.in = {gy.id, g.id};
            n.shape = in_shape;  // w shape
            n.rg = OATTN_NODE(gy).rg || OATTN_NODE(g).rg;
            n.i0 = i0;
            n.i1 = i1;
            return push(std::move(n));
        }
        case Op::ConvWeightGrad: {
            // out = conv_weight_grad(gy, x); upstream u is w-shaped
            const Var gy{in[0]}, xin{in[1]};
            if (which == 0) return conv2d(xin, g, i0, i1);  // d/d gy
            Node n;  // d/d x
            n.op = Op::ConvInputGrad;
            n.in = {gy.id, g.id};
            n.shape = in_shape;  // x shape
            n.rg = OATTN_NODE(gy).rg || OATTN_NODE(g).rg;
            n.i0 = i0;
            n.i1 = i1;
            return push(std::move(n));
        }
        case Op::NearestUp2:
            return sum_pool2(g);
        case Op::SumPool2:
            return nearest_up2(g);
        case Op::ConcatC: {
            int off = 0;
            for (int s = 0; s < which; ++s) off += nodes_[static_cast<std::size_t>(in[static_cast<std::size_t>(s)])].shape[1];
            return slice_c(g, off, off + in_shape[1]);
        }
        case Op::ConcatN: {
            int off = 0;
            for (int s = 0; s < which; ++s) off += nodes_[static_cast<std::size_t>(in[static_cast<std::size_t>(s)])].shape[0];
            return slice_n(g, off, off + in_shape[0]);
        }
        case Op::SliceC: {
            std::vector<Var> parts;
            const Shape& full = nodes_[static_cast<std::size_t>(in[0])].shape;
            if (i0 > 0) parts.push_back(zeros({full[0], i0, full[2], full[3]}));
            parts.push_back(g);
            if (i1 < full[1]) parts.push_back(zeros({full[0], full[1] - i1, full[2], full[3]}));
            return parts.size() == 1 ? g : concat_c(parts);
        }
        case Op::SliceN: {
            std::vector<Var> parts;
            const Shape& full = nodes_[static_cast<std::size_t>(in[0])].shape;
            if (i0 > 0) parts.push_back(zeros({i0, full[1], full[2], full[3]}));
            parts.push_back(g);
            if (i1 < full[0]) parts.push_back(zeros({full[0] - i1, full[1], full[2], full[3]}));
            return parts.size() == 1 ? g : concat_n(parts);
        }
        case Op::SliceHW:
            return pad_hw(g, in_shape[2], in_shape[3], i0, i1);
        case Op::PadHW:
            return slice_hw(g, i0, i1, in_shape[2], in_shape[3]);
        case Op::Gate:
        case Op::Leaf:
        case Op::Const:
            break;
    }
    throw TapeError(std::string("no gradient rule for op '") + op_name(op) + "'");
}

template <typename T>
void Tape<T>::build_adjoints(Var root, std::vector<Var>& adj) {
    check(root);
    const int r = root.id;
    if (numel(nodes_[static_cast<std::size_t>(r)].shape) != 1)
        throw TapeError("backward: root must be a scalar, got shape " +
                        shape_str(nodes_[static_cast<std::size_t>(r)].shape));
    std::vector<char> need(static_cast<std::size_t>(r) + 1, 0);
    need[static_cast<std::size_t>(r)] = 1;
    for (int id = r; id >= 0; --id) {
        if (!need[static_cast<std::size_t>(id)]) continue;
        for (int i : nodes_[static_cast<std::size_t>(id)].in) need[static_cast<std::size_t>(i)] = 1;
    }
    adj.assign(static_cast<std::size_t>(r) + 1, Var{});
    adj[static_cast<std::size_t>(r)] = constant(nodes_[static_cast<std::size_t>(r)].shape, {T(1)});
    for (int id = r; id >= 0; --id) {
        if (!need[static_cast<std::size_t>(id)] || !adj[static_cast<std::size_t>(id)].valid()) continue;
        if (!nodes_[static_cast<std::size_t>(id)].rg) continue;
        const std::vector<int> in = nodes_[static_cast<std::size_t>(id)].in;
        for (std::size_t w = 0; w < in.size(); ++w) {
            if (!nodes_[static_cast<std::size_t>(in[w])].rg) continue;
            const Var gi = vjp_inputs(id, adj[static_cast<std::size_t>(id)], static_cast<int>(w));
            Var& slot = adj[static_cast<std::size_t>(in[w])];
            slot = slot.valid() ? add(slot, gi) : gi;
        }
    }
}

template <typename T>
void Tape<T>::backward(Var root) {
    std::vector<Var> adj;
    build_adjoints(root, adj);
    for (int id = 0; id <= root.id; ++id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.sink || !n.rg || !adj[static_cast<std::size_t>(id)].valid()) continue;
        const auto& gv = val(adj[static_cast<std::size_t>(id)]);
        if (n.sink->grad.empty()) n.sink->enable_grad();
        for (std::size_t i = 0; i < gv.size(); ++i) n.sink->grad[i] += gv[i];
    }
}

template <typename T>
Var Tape<T>::grad(Var root, Var wrt) {
    check(wrt);
    std::vector<Var> adj;
    build_adjoints(root, adj);
    if (wrt.id <= root.id && adj[static_cast<std::size_t>(wrt.id)].valid())
        return adj[static_cast<std::size_t>(wrt.id)];
    return zeros(nodes_[static_cast<std::size_t>(wrt.id)].shape);
}

template <typename T>
void Tape<T>::replay_and_check() const {
    for (const Node& n : nodes_) {
        if (n.op == Op::Leaf || n.op == Op::Const) continue;
        Node copy;
        copy.op = n.op;
        copy.in = n.in;
        copy.shape = n.shape;
        copy.s0 = n.s0;
        copy.i0 = n.i0;
        copy.i1 = n.i1;
        copy.i2 = n.i2;
        copy.i3 = n.i3;
        copy.idx = n.idx;
        exec(copy);
        if (copy.val.size() != n.val.size() ||
            std::memcmp(copy.val.data(), n.val.data(), sizeof(T) * n.val.size()) != 0)
            throw TapeError(std::string("replay mismatch at op '") + op_name(n.op) + "'");
    }
}

#undef OATTN_NODE

template class Tape<float>;
template class Tape<double>;

}  // namespace oattn
