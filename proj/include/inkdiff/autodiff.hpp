#pragma once

// A small tape-based reverse-mode autodiff engine over dense tensors.
//
// Ops append nodes to a Tape. When the tape is recording, each node keeps a
// vector-Jacobian closure; Tape::backward replays them in reverse and finally
// accumulates leaf gradients into the Tensor objects that own the parameters.
// A non-recording tape is a plain forward evaluator (no closures, no grads).
//
// Layout conventions: images are [C, H, W], matrices [rows, cols], all
// row-major. Every op is instantiated for float and double.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace inkdiff {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a backward pass touches it

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), value(numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> v);

    std::size_t size() const { return value.size(); }
    void zero_grad() { grad.assign(value.size(), T(0)); }
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }

    /// Parameter leaf. Reads param.value in place; backward adds into
    /// param.grad.
    Var param(Tensor<T>& p);
    Var constant(Shape shape, std::vector<T> values);

    std::span<const T> value(Var v) const;
    const Shape& shape(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).shape; }
    bool needs_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).needs_grad; }
    /// Gradient of the last backward pass w.r.t. v (empty if none reached it).
    std::span<const T> grad(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    /// Reverse pass from a scalar node, seeding d(root) = seed.
    void backward(Var root, T seed = T(1));

    // Internal API used by the op implementations.
    using Backward = std::function<void(Tape&, int self)>;
    Var push(Shape shape, std::vector<T> value, std::initializer_list<Var> inputs, Backward bw);
    std::vector<T>& grad_buffer(Var v);  // allocates zeros on first use
    std::span<const T> out_grad(int self) const { return nodes_[static_cast<std::size_t>(self)].grad; }

private:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;
        Tensor<T>* param = nullptr;
        bool needs_grad = false;
        Backward backward;
    };

    bool recording_;
    std::vector<Node> nodes_;
};

namespace ad {

template <class T> Var add(Tape<T>& tp, Var a, Var b);
template <class T> Var sub(Tape<T>& tp, Var a, Var b);
template <class T> Var mul(Tape<T>& tp, Var a, Var b);
template <class T> Var scale(Tape<T>& tp, Var a, T s);
/// Reinterprets the element order under a new shape of equal size.
template <class T> Var reshape(Tape<T>& tp, Var a, Shape shape);

/// [m,k] x [k,n] -> [m,n]
template <class T> Var matmul(Tape<T>& tp, Var a, Var b);
/// [m,n] -> [n,m]
template <class T> Var transpose(Tape<T>& tp, Var a);
/// X[m,n] + b[n] broadcast over rows.
template <class T> Var add_row_vector(Tape<T>& tp, Var x, Var b);
/// X[C,H,W] + v[C] broadcast over each channel plane.
template <class T> Var add_channel_vector(Tape<T>& tp, Var x, Var v);
/// Concatenates [C1,H,W] and [C2,H,W] along channels.
template <class T> Var concat_channels(Tape<T>& tp, Var a, Var b);

/// x[Ci,H,W], w[Co,Ci,k,k], optional b[Co]; zero padding k/2.
template <class T> Var conv2d(Tape<T>& tp, Var x, Var w, Var b, int stride);
/// 2x upsampling by a stride-2, 2x2 transposed convolution.
/// x[Ci,H,W], w[Ci,Co,2,2], optional b[Co] -> [Co,2H,2W].
template <class T> Var conv_transpose2x2(Tape<T>& tp, Var x, Var w, Var b);

template <class T> Var silu(Tape<T>& tp, Var x);
/// Group normalisation of x[C,H,W] with per-channel affine gamma/beta.
template <class T> Var group_norm(Tape<T>& tp, Var x, Var gamma, Var beta, int groups, T eps = T(1e-5));

/// softmax(Q K^T / sqrt(d) + mask) V with Q[n,d], K[L,d], V[L,dv]. Keys with
/// mask 0 are excluded; a row with no visible key yields zeros.
template <class T>
Var attention(Tape<T>& tp, Var q, Var k, Var v, std::span<const unsigned char> mask);

/// Rows of table[V,d] selected by ids -> [ids.size(), d].
template <class T> Var embedding(Tape<T>& tp, Var table, std::span<const int> ids);
/// Mean of the rows of x[L,d] whose mask is set -> [d]; zeros if none.
template <class T> Var masked_mean_rows(Tape<T>& tp, Var x, std::span<const unsigned char> mask);

/// mean((x - target)^2) -> scalar [1].
template <class T> Var mse(Tape<T>& tp, Var x, std::span<const T> target);

}  // namespace ad

}  // namespace inkdiff
