#include "inkdiff/autodiff.hpp"

#include "inkdiff/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace inkdiff {

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

template <class T>
Tensor<T>::Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), value(std::move(v)) {
    if (value.size() != numel(shape))
        throw Error(ErrorCode::ShapeMismatch, "tensor of shape " + shape_str(shape) + " given " +
                                                  std::to_string(value.size()) + " values");
}

// Tape ---------------------------------------------------------------------------

template <class T>
Var Tape<T>::param(Tensor<T>& p) {
    Node n;
    n.shape = p.shape;
    n.param = &p;
    n.needs_grad = recording_;
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
}

template <class T>
Var Tape<T>::constant(Shape shape, std::vector<T> values) {
    if (values.size() != numel(shape)) throw Error(ErrorCode::ShapeMismatch, "constant size does not match shape");
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(values);
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
}

template <class T>
std::span<const T> Tape<T>::value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.param ? std::span<const T>(n.param->value) : std::span<const T>(n.value);
}

template <class T>
std::span<const T> Tape<T>::grad(Var v) const {
    return nodes_.at(static_cast<std::size_t>(v.id)).grad;
}

template <class T>
Var Tape<T>::push(Shape shape, std::vector<T> value, std::initializer_list<Var> inputs, Backward bw) {
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    if (recording_) {
        for (Var in : inputs)
            if (in.valid() && nodes_[static_cast<std::size_t>(in.id)].needs_grad) n.needs_grad = true;
        if (n.needs_grad) n.backward = std::move(bw);
    }
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
}

template <class T>
std::vector<T>& Tape<T>::grad_buffer(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.empty()) n.grad.assign(numel(n.shape), T(0));
    return n.grad;
}

template <class T>
void Tape<T>::backward(Var root, T seed) {
    if (!recording_ || !root.valid() || !nodes_.at(static_cast<std::size_t>(root.id)).needs_grad)
        throw Error(ErrorCode::MissingTrace, "backward requires a recorded computation");
    for (auto& n : nodes_) n.grad.clear();
    nodes_[static_cast<std::size_t>(root.id)].grad.assign(numel(nodes_[static_cast<std::size_t>(root.id)].shape), seed);
    for (int i = root.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
        if (!n.param || n.grad.empty()) continue;
        auto& g = n.param->grad;
        if (g.empty()) g.assign(n.param->value.size(), T(0));
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
}

// Ops ----------------------------------------------------------------------------

namespace ad {

namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const Mat<T>>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;

void require(bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

template <class T>
void accumulate(Tape<T>& tp, Var v, std::span<const T> g, T s = T(1)) {
    if (!tp.needs_grad(v)) return;
    auto& buf = tp.grad_buffer(v);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += s * g[i];
}

}  // namespace

template <class T>
Var add(Tape<T>& tp, Var a, Var b) {
    require(tp.shape(a) == tp.shape(b), "add: shape mismatch");
    auto va = tp.value(a);
    auto vb = tp.value(b);
    std::vector<T> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    return tp.push(tp.shape(a), std::move(out), {a, b}, [a, b](Tape<T>& t, int self) {
        accumulate(t, a, t.out_grad(self));
        accumulate(t, b, t.out_grad(self));
    });
}

template <class T>
Var sub(Tape<T>& tp, Var a, Var b) {
    require(tp.shape(a) == tp.shape(b), "sub: shape mismatch");
    auto va = tp.value(a);
    auto vb = tp.value(b);
    std::vector<T> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
    return tp.push(tp.shape(a), std::move(out), {a, b}, [a, b](Tape<T>& t, int self) {
        accumulate(t, a, t.out_grad(self));
        accumulate(t, b, t.out_grad(self), T(-1));
    });
}

template <class T>
Var mul(Tape<T>& tp, Var a, Var b) {
    require(tp.shape(a) == tp.shape(b), "mul: shape mismatch");
    auto va = tp.value(a);
    auto vb = tp.value(b);
    std::vector<T> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    return tp.push(tp.shape(a), std::move(out), {a, b}, [a, b](Tape<T>& t, int self) {
        auto g = t.out_grad(self);
        auto va = t.value(a);
        auto vb = t.value(b);
        if (t.needs_grad(a)) {
            auto& ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (t.needs_grad(b)) {
            auto& gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

template <class T>
Var scale(Tape<T>& tp, Var a, T s) {
    auto va = tp.value(a);
    std::vector<T> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * va[i];
    return tp.push(tp.shape(a), std::move(out), {a}, [a, s](Tape<T>& t, int self) {
        accumulate(t, a, t.out_grad(self), s);
    });
}

template <class T>
Var reshape(Tape<T>& tp, Var a, Shape shape) {
    require(numel(shape) == numel(tp.shape(a)), "reshape: element count changes");
    auto va = tp.value(a);
    return tp.push(std::move(shape), std::vector<T>(va.begin(), va.end()), {a},
                   [a](Tape<T>& t, int self) { accumulate(t, a, t.out_grad(self)); });
}

template <class T>
Var matmul(Tape<T>& tp, Var a, Var b) {
    const Shape& sa = tp.shape(a);
    const Shape& sb = tp.shape(b);
    require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
            "matmul: " + shape_str(sa) + " x " + shape_str(sb));
    const int m = sa[0], k = sa[1], n = sb[1];
    std::vector<T> out(static_cast<std::size_t>(m) * n);
    MapM<T>(out.data(), m, n).noalias() = MapC<T>(tp.value(a).data(), m, k) * MapC<T>(tp.value(b).data(), k, n);
    return tp.push({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, int self) {
        MapC<T> g(t.out_grad(self).data(), m, n);
        if (t.needs_grad(a))
            MapM<T>(t.grad_buffer(a).data(), m, k).noalias() += g * MapC<T>(t.value(b).data(), k, n).transpose();
        if (t.needs_grad(b))
            MapM<T>(t.grad_buffer(b).data(), k, n).noalias() += MapC<T>(t.value(a).data(), m, k).transpose() * g;
    });
}

template <class T>
Var transpose(Tape<T>& tp, Var a) {
    const Shape& s = tp.shape(a);
    require(s.size() == 2, "transpose: expects a matrix");
    const int m = s[0], n = s[1];
    std::vector<T> out(static_cast<std::size_t>(m) * n);
    MapM<T>(out.data(), n, m) = MapC<T>(tp.value(a).data(), m, n).transpose();
    return tp.push({n, m}, std::move(out), {a}, [a, m, n](Tape<T>& t, int self) {
        MapM<T>(t.grad_buffer(a).data(), m, n) += MapC<T>(t.out_grad(self).data(), n, m).transpose();
    });
}

template <class T>
Var add_row_vector(Tape<T>& tp, Var x, Var b) {
    const Shape& s = tp.shape(x);
    require(s.size() == 2 && numel(tp.shape(b)) == static_cast<std::size_t>(s[1]), "add_row_vector: shape mismatch");
    const int m = s[0], n = s[1];
    auto vx = tp.value(x);
    auto vb = tp.value(b);
    std::vector<T> out(vx.begin(), vx.end());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] += vb[static_cast<std::size_t>(j)];
    return tp.push(s, std::move(out), {x, b}, [x, b, m, n](Tape<T>& t, int self) {
        auto g = t.out_grad(self);
        accumulate(t, x, g);
        if (t.needs_grad(b)) {
            auto& gb = t.grad_buffer(b);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
        }
    });
}

template <class T>
Var add_channel_vector(Tape<T>& tp, Var x, Var v) {
    const Shape& s = tp.shape(x);
    require(s.size() == 3 && numel(tp.shape(v)) == static_cast<std::size_t>(s[0]),
            "add_channel_vector: shape mismatch");
    const int c = s[0];
    const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
    auto vx = tp.value(x);
    auto vv = tp.value(v);
    std::vector<T> out(vx.begin(), vx.end());
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] += vv[static_cast<std::size_t>(ch)];
    return tp.push(s, std::move(out), {x, v}, [x, v, c, plane](Tape<T>& t, int self) {
        auto g = t.out_grad(self);
        accumulate(t, x, g);
        if (t.needs_grad(v)) {
            auto& gv = t.grad_buffer(v);
            for (int ch = 0; ch < c; ++ch) {
                T acc = 0;
                for (std::size_t i = 0; i < plane; ++i) acc += g[ch * plane + i];
                gv[static_cast<std::size_t>(ch)] += acc;
            }
        }
    });
}

template <class T>
Var concat_channels(Tape<T>& tp, Var a, Var b) {
    const Shape& sa = tp.shape(a);
    const Shape& sb = tp.shape(b);
    require(sa.size() == 3 && sb.size() == 3 && sa[1] == sb[1] && sa[2] == sb[2], "concat_channels: shape mismatch");
    auto va = tp.value(a);
    auto vb = tp.value(b);
    std::vector<T> out;
    out.reserve(va.size() + vb.size());
    out.insert(out.end(), va.begin(), va.end());
    out.insert(out.end(), vb.begin(), vb.end());
    const std::size_t na = va.size();
    return tp.push({sa[0] + sb[0], sa[1], sa[2]}, std::move(out), {a, b}, [a, b, na](Tape<T>& t, int self) {
        auto g = t.out_grad(self);
        accumulate(t, a, g.subspan(0, na));
        accumulate(t, b, g.subspan(na));
    });
}

// Convolutions --------------------------------------------------------------------

namespace {

struct ConvGeom {
    int ci, h, w, co, k, stride, pad, ho, wo;
    int rows() const { return ci * k * k; }
    int cols() const { return ho * wo; }
};

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
    const int n = g.cols();
    for (int c = 0; c < g.ci; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                T* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * n;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    T* dst = row + static_cast<std::size_t>(oy) * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill_n(dst, g.wo, T(0));
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
                    }
                }
            }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
    const int n = g.cols();
    for (int c = 0; c < g.ci; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                const T* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * n;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    T* dst = dx + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    const T* src = row + static_cast<std::size_t>(oy) * g.wo;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace

template <class T>
Var conv2d(Tape<T>& tp, Var x, Var w, Var b, int stride) {
    const Shape& sx = tp.shape(x);
    const Shape& sw = tp.shape(w);
    require(sx.size() == 3 && sw.size() == 4 && sw[1] == sx[0] && sw[2] == sw[3] && sw[2] % 2 == 1 && stride >= 1,
            "conv2d: input " + shape_str(sx) + " weight " + shape_str(sw));
    if (b.valid()) require(numel(tp.shape(b)) == static_cast<std::size_t>(sw[0]), "conv2d: bias size");
    ConvGeom g{sx[0], sx[1], sx[2], sw[0], sw[2], stride, sw[2] / 2, 0, 0};
    g.ho = (g.h + 2 * g.pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * g.pad - g.k) / stride + 1;

    auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(g.rows()) * g.cols());
    im2col(tp.value(x).data(), g, cols->data());
    std::vector<T> out(static_cast<std::size_t>(g.co) * g.cols());
    MapM<T> y(out.data(), g.co, g.cols());
    y.noalias() = MapC<T>(tp.value(w).data(), g.co, g.rows()) * MapC<T>(cols->data(), g.rows(), g.cols());
    if (b.valid()) {
        auto vb = tp.value(b);
        for (int c = 0; c < g.co; ++c) y.row(c).array() += vb[static_cast<std::size_t>(c)];
    }
    if (!tp.recording()) cols.reset();
    return tp.push({g.co, g.ho, g.wo}, std::move(out), {x, w, b}, [x, w, b, g, cols](Tape<T>& t, int self) {
        MapC<T> gy(t.out_grad(self).data(), g.co, g.cols());
        MapC<T> cm(cols->data(), g.rows(), g.cols());
        if (t.needs_grad(w)) MapM<T>(t.grad_buffer(w).data(), g.co, g.rows()).noalias() += gy * cm.transpose();
        if (b.valid() && t.needs_grad(b)) {
            auto& gb = t.grad_buffer(b);
            // Plain loop: Eigen's vectorised sum peels by address, which would make the
            // rounding depend on where the heap put the buffer.
            const T* row = t.out_grad(self).data();
            for (int c = 0; c < g.co; ++c, row += g.cols()) {
                T acc = 0;
                for (int i = 0; i < g.cols(); ++i) acc += row[i];
                gb[static_cast<std::size_t>(c)] += acc;
            }
        }
        if (t.needs_grad(x)) {
            Mat<T> dcols = MapC<T>(t.value(w).data(), g.co, g.rows()).transpose() * gy;
            col2im_add(dcols.data(), g, t.grad_buffer(x).data());
        }
    });
}

template <class T>
Var conv_transpose2x2(Tape<T>& tp, Var x, Var w, Var b) {
    const Shape& sx = tp.shape(x);
    const Shape& sw = tp.shape(w);
    require(sx.size() == 3 && sw.size() == 4 && sw[0] == sx[0] && sw[2] == 2 && sw[3] == 2,
            "conv_transpose2x2: input " + shape_str(sx) + " weight " + shape_str(sw));
    const int ci = sx[0], h = sx[1], wd = sx[2], co = sw[1];
    const int hw = h * wd;
    if (b.valid()) require(numel(tp.shape(b)) == static_cast<std::size_t>(co), "conv_transpose2x2: bias size");
    // taps[co*4 + tap, pixel] = sum_ci w[ci, co*4 + tap] x[ci, pixel]
    Mat<T> taps = MapC<T>(tp.value(w).data(), ci, co * 4).transpose() * MapC<T>(tp.value(x).data(), ci, hw);
    const int ow = 2 * wd;
    std::vector<T> out(static_cast<std::size_t>(co) * 4 * hw);
    auto vb = b.valid() ? tp.value(b) : std::span<const T>();
    for (int c = 0; c < co; ++c)
        for (int tap = 0; tap < 4; ++tap) {
            const int dy = tap / 2, dx = tap % 2;
            const T bias = b.valid() ? vb[static_cast<std::size_t>(c)] : T(0);
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < wd; ++j)
                    out[(static_cast<std::size_t>(c) * 2 * h + 2 * i + dy) * ow + 2 * j + dx] =
                        taps(c * 4 + tap, i * wd + j) + bias;
        }
    return tp.push({co, 2 * h, ow}, std::move(out), {x, w, b}, [x, w, b, ci, h, wd, co, hw, ow](Tape<T>& t, int self) {
        auto g = t.out_grad(self);
        Mat<T> gt(co * 4, hw);
        for (int c = 0; c < co; ++c)
            for (int tap = 0; tap < 4; ++tap) {
                const int dy = tap / 2, dx = tap % 2;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < wd; ++j)
                        gt(c * 4 + tap, i * wd + j) = g[(static_cast<std::size_t>(c) * 2 * h + 2 * i + dy) * ow + 2 * j + dx];
            }
        if (t.needs_grad(w))
            MapM<T>(t.grad_buffer(w).data(), ci, co * 4).noalias() +=
                MapC<T>(t.value(x).data(), ci, hw) * gt.transpose();
        if (t.needs_grad(x))
            MapM<T>(t.grad_buffer(x).data(), ci, hw).noalias() += MapC<T>(t.value(w).data(), ci, co * 4) * gt;
        if (b.valid() && t.needs_grad(b)) {
            auto& gb = t.grad_buffer(b);
            for (int c = 0; c < co; ++c) gb[static_cast<std::size_t>(c)] += gt.middleRows(c * 4, 4).sum();
        }
    });
}

// Pointwise and normalisation -----------------------------------------------------

template <class T>
Var silu(Tape<T>& tp, Var x) {
    auto vx = tp.value(x);
    std::vector<T> out(vx.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] / (T(1) + std::exp(-vx[i]));
    return tp.push(tp.shape(x), std::move(out), {x}, [x](Tape<T>& t, int self) {
        auto g = t.out_grad(self);
        auto vx = t.value(x);
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-vx[i]));
            gx[i] += g[i] * s * (T(1) + vx[i] * (T(1) - s));
        }
    });
}

template <class T>
Var group_norm(Tape<T>& tp, Var x, Var gamma, Var beta, int groups, T eps) {
    const Shape& s = tp.shape(x);
    require(s.size() == 3 && groups >= 1 && s[0] % groups == 0, "group_norm: channels not divisible by groups");
    require(numel(tp.shape(gamma)) == static_cast<std::size_t>(s[0]) &&
                numel(tp.shape(beta)) == static_cast<std::size_t>(s[0]),
            "group_norm: affine size");
    const int c = s[0];
    const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
    const int cg = c / groups;
    const std::size_t n = plane * cg;
    auto vx = tp.value(x);
    auto vg = tp.value(gamma);
    auto vb = tp.value(beta);
    auto xhat = std::make_shared<std::vector<T>>(vx.size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(groups));
    std::vector<T> out(vx.size());
    for (int gi = 0; gi < groups; ++gi) {
        const std::size_t off = gi * n;
        T mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += vx[off + i];
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t i = 0; i < n; ++i) var += (vx[off + i] - mean) * (vx[off + i] - mean);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(gi)] = is;
        for (std::size_t i = 0; i < n; ++i) (*xhat)[off + i] = (vx[off + i] - mean) * is;
    }
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i)
            out[ch * plane + i] = vg[static_cast<std::size_t>(ch)] * (*xhat)[ch * plane + i] + vb[static_cast<std::size_t>(ch)];
    return tp.push(s, std::move(out), {x, gamma, beta},
                   [x, gamma, beta, c, plane, cg, n, groups, xhat, inv_std](Tape<T>& t, int self) {
                       auto g = t.out_grad(self);
                       auto vg = t.value(gamma);
                       if (t.needs_grad(gamma) || t.needs_grad(beta)) {
                           for (int ch = 0; ch < c; ++ch) {
                               T dg = 0, db = 0;
                               for (std::size_t i = 0; i < plane; ++i) {
                                   dg += g[ch * plane + i] * (*xhat)[ch * plane + i];
                                   db += g[ch * plane + i];
                               }
                               if (t.needs_grad(gamma)) t.grad_buffer(gamma)[static_cast<std::size_t>(ch)] += dg;
                               if (t.needs_grad(beta)) t.grad_buffer(beta)[static_cast<std::size_t>(ch)] += db;
                           }
                       }
                       if (!t.needs_grad(x)) return;
                       auto& gx = t.grad_buffer(x);
                       std::vector<T> dxhat(n);
                       for (int gi = 0; gi < groups; ++gi) {
                           const std::size_t off = gi * n;
                           T sum = 0, dot = 0;
                           for (std::size_t i = 0; i < n; ++i) {
                               const int ch = gi * cg + static_cast<int>(i / plane);
                               dxhat[i] = g[off + i] * vg[static_cast<std::size_t>(ch)];
                               sum += dxhat[i];
                               dot += dxhat[i] * (*xhat)[off + i];
                           }
                           const T is = (*inv_std)[static_cast<std::size_t>(gi)];
                           const T inv_n = T(1) / static_cast<T>(n);
                           for (std::size_t i = 0; i < n; ++i)
                               gx[off + i] += is * (dxhat[i] - inv_n * sum - (*xhat)[off + i] * inv_n * dot);
                       }
                   });
}

// Attention and embeddings ----------------------------------------------------------

template <class T>
Var attention(Tape<T>& tp, Var q, Var k, Var v, std::span<const unsigned char> mask) {
    const Shape& sq = tp.shape(q);
    const Shape& sk = tp.shape(k);
    const Shape& sv = tp.shape(v);
    require(sq.size() == 2 && sk.size() == 2 && sv.size() == 2 && sq[1] == sk[1] && sk[0] == sv[0] &&
                mask.size() == static_cast<std::size_t>(sk[0]),
            "attention: q " + shape_str(sq) + " k " + shape_str(sk) + " v " + shape_str(sv));
    const int n = sq[0], d = sq[1], len = sk[0], dv = sv[1];
    const T scale_f = T(1) / std::sqrt(static_cast<T>(d));
    MapC<T> Q(tp.value(q).data(), n, d);
    MapC<T> K(tp.value(k).data(), len, d);
    MapC<T> V(tp.value(v).data(), len, dv);
    auto probs = std::make_shared<Mat<T>>(Q * K.transpose());
    Mat<T>& P = *probs;
    for (int i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < len; ++j)
            if (mask[static_cast<std::size_t>(j)]) mx = std::max(mx, P(i, j) * scale_f);
        T denom = 0;
        for (int j = 0; j < len; ++j) {
            const T e = mask[static_cast<std::size_t>(j)] ? std::exp(P(i, j) * scale_f - mx) : T(0);
            P(i, j) = e;
            denom += e;
        }
        if (denom > 0) P.row(i) /= denom;
    }
    std::vector<T> out(static_cast<std::size_t>(n) * dv);
    MapM<T>(out.data(), n, dv).noalias() = P * V;
    return tp.push({n, dv}, std::move(out), {q, k, v}, [q, k, v, n, d, len, dv, scale_f, probs](Tape<T>& t, int self) {
        MapC<T> G(t.out_grad(self).data(), n, dv);
        const Mat<T>& P = *probs;
        MapC<T> Q(t.value(q).data(), n, d);
        MapC<T> K(t.value(k).data(), len, d);
        MapC<T> V(t.value(v).data(), len, dv);
        if (t.needs_grad(v)) MapM<T>(t.grad_buffer(v).data(), len, dv).noalias() += P.transpose() * G;
        if (!t.needs_grad(q) && !t.needs_grad(k)) return;
        Mat<T> dP = G * V.transpose();
        Mat<T> dS(n, len);
        for (int i = 0; i < n; ++i) {
            const T dot = dP.row(i).dot(P.row(i));
            dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix() * scale_f;
        }
        if (t.needs_grad(q)) MapM<T>(t.grad_buffer(q).data(), n, d).noalias() += dS * K;
        if (t.needs_grad(k)) MapM<T>(t.grad_buffer(k).data(), len, d).noalias() += dS.transpose() * Q;
    });
}

template <class T>
Var embedding(Tape<T>& tp, Var table, std::span<const int> ids) {
    const Shape& s = tp.shape(table);
    require(s.size() == 2, "embedding: table must be a matrix");
    const int rows = s[0], d = s[1];
    auto vt = tp.value(table);
    std::vector<int> idx(ids.begin(), ids.end());
    std::vector<T> out(idx.size() * static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= rows)
            throw Error(ErrorCode::InvalidRange, "embedding id " + std::to_string(idx[i]) + " out of range", i);
        std::copy_n(vt.begin() + static_cast<std::ptrdiff_t>(idx[i]) * d, d, out.begin() + static_cast<std::ptrdiff_t>(i) * d);
    }
    const int count = static_cast<int>(idx.size());
    return tp.push({count, d}, std::move(out), {table}, [table, idx = std::move(idx), d](Tape<T>& t, int self) {
        auto g = t.out_grad(self);
        auto& gt = t.grad_buffer(table);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j)
                gt[static_cast<std::size_t>(idx[i]) * d + j] += g[i * d + j];
    });
}

template <class T>
Var masked_mean_rows(Tape<T>& tp, Var x, std::span<const unsigned char> mask) {
    const Shape& s = tp.shape(x);
    require(s.size() == 2 && mask.size() == static_cast<std::size_t>(s[0]), "masked_mean_rows: mask length");
    const int rows = s[0], d = s[1];
    int count = 0;
    for (auto m : mask) count += m ? 1 : 0;
    auto vx = tp.value(x);
    std::vector<T> out(static_cast<std::size_t>(d), T(0));
    std::vector<unsigned char> keep(mask.begin(), mask.end());
    if (count > 0) {
        for (int i = 0; i < rows; ++i)
            if (keep[static_cast<std::size_t>(i)])
                for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += vx[static_cast<std::size_t>(i) * d + j];
        for (auto& o : out) o /= static_cast<T>(count);
    }
    return tp.push({d}, std::move(out), {x}, [x, rows, d, count, keep = std::move(keep)](Tape<T>& t, int self) {
        if (count == 0) return;
        auto g = t.out_grad(self);
        auto& gx = t.grad_buffer(x);
        const T inv = T(1) / static_cast<T>(count);
        for (int i = 0; i < rows; ++i)
            if (keep[static_cast<std::size_t>(i)])
                for (int j = 0; j < d; ++j) gx[static_cast<std::size_t>(i) * d + j] += g[static_cast<std::size_t>(j)] * inv;
    });
}

template <class T>
Var mse(Tape<T>& tp, Var x, std::span<const T> target) {
    auto vx = tp.value(x);
    require(vx.size() == target.size() && !vx.empty(), "mse: target size mismatch");
    std::vector<T> diff(vx.size());
    T acc = 0;
    for (std::size_t i = 0; i < vx.size(); ++i) {
        diff[i] = vx[i] - target[i];
        acc += diff[i] * diff[i];
    }
    const T n = static_cast<T>(vx.size());
    std::vector<T> out{acc / n};
    return tp.push({1}, std::move(out), {x}, [x, diff = std::move(diff), n](Tape<T>& t, int self) {
        const T g = t.out_grad(self)[0] * T(2) / n;
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < diff.size(); ++i) gx[i] += g * diff[i];
    });
}

#define INKDIFF_INSTANTIATE_OPS(T)                                                              \
    template Var add<T>(Tape<T>&, Var, Var);                                                   \
    template Var sub<T>(Tape<T>&, Var, Var);                                                   \
    template Var mul<T>(Tape<T>&, Var, Var);                                                   \
    template Var scale<T>(Tape<T>&, Var, T);                                                   \
    template Var reshape<T>(Tape<T>&, Var, Shape);                                             \
    template Var matmul<T>(Tape<T>&, Var, Var);                                                \
    template Var transpose<T>(Tape<T>&, Var);                                                  \
    template Var add_row_vector<T>(Tape<T>&, Var, Var);                                        \
    template Var add_channel_vector<T>(Tape<T>&, Var, Var);                                    \
    template Var concat_channels<T>(Tape<T>&, Var, Var);                                       \
    template Var conv2d<T>(Tape<T>&, Var, Var, Var, int);                                      \
    template Var conv_transpose2x2<T>(Tape<T>&, Var, Var, Var);                                \
    template Var silu<T>(Tape<T>&, Var);                                                       \
    template Var group_norm<T>(Tape<T>&, Var, Var, Var, int, T);                               \
    template Var attention<T>(Tape<T>&, Var, Var, Var, std::span<const unsigned char>);        \
    template Var embedding<T>(Tape<T>&, Var, std::span<const int>);                            \
    template Var masked_mean_rows<T>(Tape<T>&, Var, std::span<const unsigned char>);           \
    template Var mse<T>(Tape<T>&, Var, std::span<const T>);

INKDIFF_INSTANTIATE_OPS(float)
INKDIFF_INSTANTIATE_OPS(double)

#undef INKDIFF_INSTANTIATE_OPS

}  // namespace ad

template struct Tensor<float>;
template struct Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace inkdiff
