#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "tensor.hpp"

namespace oattn {

// Node kinds. The first block is the public operation set; the second block
// holds internal kinds used to express composite ops and emitted gradients.
enum class Op : std::uint8_t {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul,
    ScalarAdd,
    ClampMin,
    Relu,
    LeakyRelu,
    Sigmoid,
    Abs,
    Square,
    Sqrt,
    Log,
    Sum,
    Mean,
    SoftmaxRows,
    Matmul,
    Conv2d,
    NearestUp2,
    SumPool2,
    ConcatC,
    ConcatN,
    SliceC,
    SliceN,
    SliceHW,
    PadHW,
    GatherRows,
    ScatterRows,
    Transpose2d,
    Reshape,
    // internal kinds
    ExpandScalar,
    RowSum,
    RowBroadcast,
    BroadcastC,
    ReduceSumNC,
    ConvInputGrad,
    ConvWeightGrad,
    SoftmaxRowsVjp,
    Gate,
};

const char* op_name(Op op);

// Handle to a tape node.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape with eager evaluation: every op computes its value when
// appended. backward() emits the gradient expressions as further tape nodes,
// so a second backward through a gradient (the penalty path in critic
// training) differentiates the emitted nodes like any others. Ops whose
// gradient is emitted as a fused kind (softmax) support first order only.
//
// A tape is single-writer: confined to one thread for its whole life.
// Tensors passed in are copied; read-only sharing of inputs across threads
// is safe.
template <typename T>
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // -- leaves and constants ------------------------------------------------
    // Binds `external`: backward() accumulates d(root)/d(leaf) into
    // external.grad (never touched when requires_grad is false).
    Var leaf(Tensor<T>& external, bool requires_grad = true);
    // Unbound differentiable input (e.g. the interpolate a gradient norm is
    // taken against); read its gradient with grad().
    Var input(const Tensor<T>& value, bool requires_grad);
    Var constant(const Tensor<T>& value);
    Var constant(Shape shape, std::vector<T> data);
    Var scalar_const(T v);
    Var zeros(Shape shape);

    // -- elementwise ---------------------------------------------------------
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var scalar_mul(Var a, double s);
    Var scalar_add(Var a, double s);
    Var clamp_min(Var a, double lo);
    Var relu(Var a);
    Var leaky_relu(Var a, double slope);
    Var sigmoid(Var a);
    Var abs(Var a);
    Var square(Var a);
    Var sqrt(Var a);
    Var log(Var a);

    // -- reductions / broadcasts ----------------------------------------------
    Var sum(Var a);
    Var mean(Var a);
    Var expand_scalar(Var a, Shape shape);
    Var row_sum(Var a);                 // [R,C] -> [R,1]
    Var row_broadcast(Var a, int cols); // [R,1] -> [R,cols]
    Var broadcast_c(Var a, int n, int h, int w);  // [C] -> [n,C,h,w]
    Var reduce_sum_nc(Var a);                     // [N,C,H,W] -> [C]

    // -- matrices ------------------------------------------------------------
    Var softmax_rows(Var a);  // per-row max-subtracted softmax on [R,C]
    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
    Var transpose2d(Var a);
    Var reshape(Var a, Shape shape);
    Var gather_rows(Var a, IndexList idx);
    Var scatter_rows(Var a, IndexList idx, int rows);

    // -- image ops (NCHW) ------------------------------------------------------
    Var conv2d(Var x, Var w, int stride, int pad);
    Var nearest_up2(Var x);
    Var sum_pool2(Var x);
    Var concat_c(const std::vector<Var>& xs);
    Var concat_n(const std::vector<Var>& xs);
    Var slice_c(Var x, int c0, int c1);
    Var slice_n(Var x, int n0, int n1);
    Var slice_hw(Var x, int r0, int c0, int h, int w);
    Var pad_hw(Var x, int out_h, int out_w, int r0, int c0);

    // Batch normalization as a composite. The training form normalizes with
    // per-batch statistics and reports them so the caller can maintain
    // running averages; the inference form normalizes with supplied running
    // statistics.
    Var batch_norm_train(Var x, Var gamma, Var beta, double eps,
                         std::vector<T>* batch_mean_out = nullptr,
                         std::vector<T>* batch_var_out = nullptr);
    Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor<T>& running_mean,
                        const Tensor<T>& running_var, double eps);

    // -- inspection ------------------------------------------------------------
    const Shape& shape(Var v) const;
    const std::vector<T>& val(Var v) const;
    Tensor<T> tensor(Var v) const;
    T scalar_value(Var v) const;
    bool requires_grad(Var v) const;
    std::size_t node_count() const;

    // -- differentiation --------------------------------------------------------
    // Accumulates d(root)/d(leaf) into every bound leaf's grad. root must be
    // scalar. Calling twice accumulates.
    void backward(Var root);
    // Emits the adjoint graph of `root` and returns d(root)/d(wrt) as a Var
    // (zeros when unconnected). No bound gradients are written.
    Var grad(Var root, Var wrt);

    // Re-executes every node from the leaves and verifies each recomputed
    // value is bit-identical to the stored one. Throws on mismatch.
    void replay_and_check() const;

    void reset();

    struct Node {
        Op op;
        std::vector<int> in;
        Shape shape;
        std::vector<T> val;
        double s0 = 0.0;
        int i0 = 0, i1 = 0, i2 = 0, i3 = 0;
        IndexList idx;
        bool rg = false;
        Tensor<T>* sink = nullptr;
    };

private:
    Var push(Node n);
    void exec(Node& n) const;
    void check(Var v) const;
    Var vjp_inputs(int id, Var g, int which);
    void build_adjoints(Var root, std::vector<Var>& adj);

    std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace oattn
