#pragma once
// Reverse-mode autodiff on a flat tape. Each primitive stores its output
// value and enough aux data for an exact backward pass; gradients accumulate
// additively at fan-out. The SSM scan is a fused primitive with a
// hand-written backward (BPTT over the serialized dimension).

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <unordered_map>
#include <vector>

#include "tensor.hpp"

namespace pointcsp {

enum class SsmVariant { static_gate, input_gate };
enum class SsmNonlinearity { identity, gated_tanh };

struct SsmSpec {
    SsmVariant variant = SsmVariant::static_gate;
    SsmNonlinearity nonlin = SsmNonlinearity::gated_tanh;
};

namespace detail {

// Saved forward state of one scan node, reused by the backward pass.
template <typename T>
struct ScanSaved {
    TensorT<T> h;    // T x Ch hidden states
    TensorT<T> tau;  // T x Ch tanh(z) (gated_tanh only)
    TensorT<T> sig;  // gate sigmoids: T x Ch (input_gate) or 1 x Ch (static)
};

// C = A * B, row-major, ikj order
template <typename T>
void matmul_into(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& c) {
    const int64_t n = a.shape[0], k = a.shape[1], m = b.shape[1];
    const T* pa = a.data.data();
    const T* pb = b.data.data();
    T* pc = c.data.data();
    std::fill(c.data.begin(), c.data.end(), T(0));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            if (av == T(0)) continue;
            const T* brow = pb + p * m;
            T* crow = pc + i * m;
            for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A^T * B  (A: n x k, B: n x m, C: k x m)
template <typename T>
void matmul_at_b_acc(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& c) {
    const int64_t n = a.shape[0], k = a.shape[1], m = b.shape[1];
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const T av = a.data[static_cast<size_t>(i * k + p)];
            if (av == T(0)) continue;
            const T* brow = b.data.data() + i * m;
            T* crow = c.data.data() + p * m;
            for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T  (A: n x k, B: m x k, C: n x m)
template <typename T>
void matmul_a_bt_acc(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& c) {
    const int64_t n = a.shape[0], k = a.shape[1], m = b.shape[0];
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < m; ++j) {
            const T* arow = a.data.data() + i * k;
            const T* brow = b.data.data() + j * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c.data[static_cast<size_t>(i * m + j)] += acc;
        }
    }
}

}  // namespace detail

// Runs the Eq.-style recursion over one serialized token sequence.
//   u_t = B f_t   (+ gate path)     z_t = A h_{t-1} + u_t
//   h_t = f_theta(z_t)              y_t = C h_t
// Input/output projections are batched into whole-sequence matmuls; only the
// hidden-state recursion itself is stepped.
template <typename T>
TensorT<T> ssm_scan_values(const TensorT<T>& tokens, const TensorT<T>& a_mat, const TensorT<T>& b_mat,
                           const TensorT<T>& c_mat, const TensorT<T>& gate, const SsmSpec& spec,
                           detail::ScanSaved<T>* saved) {
    const int64_t len = tokens.shape[0];
    const int64_t ch = a_mat.shape[0];
    const int64_t cw = tokens.shape[1];
    if (a_mat.shape[1] != ch) throw Error("ssm_scan: A must be square");
    if (b_mat.shape[0] != ch || b_mat.shape[1] != cw) throw Error("ssm_scan: B must be Ch x C");
    if (c_mat.shape[1] != ch) throw Error("ssm_scan: C must be C x Ch");
    const bool gated = spec.nonlin == SsmNonlinearity::gated_tanh;
    if (gated) {
        if (spec.variant == SsmVariant::static_gate && gate.numel() != ch)
            throw Error("ssm_scan: static gate must have Ch entries");
        if (spec.variant == SsmVariant::input_gate && (gate.shape.size() != 2 || gate.shape[0] != ch || gate.shape[1] != cw))
            throw Error("ssm_scan: input gate weight must be Ch x C");
    }

    TensorT<T> u({len, ch});  // u = tokens * B^T
    detail::matmul_a_bt_acc(tokens, b_mat, u);

    TensorT<T> sig;
    if (gated) {
        if (spec.variant == SsmVariant::input_gate) {
            sig = TensorT<T>({len, ch});
            detail::matmul_a_bt_acc(tokens, gate, sig);
            for (auto& v : sig.data) v = T(1) / (T(1) + std::exp(-static_cast<double>(v)));
        } else {
            sig = TensorT<T>({1, ch});
            for (int64_t j = 0; j < ch; ++j)
                sig.data[static_cast<size_t>(j)] = T(1) / (T(1) + std::exp(-static_cast<double>(gate.data[static_cast<size_t>(j)])));
        }
    }

    TensorT<T> h({len, ch});
    TensorT<T> tau;
    if (gated) tau = TensorT<T>({len, ch});
    std::vector<T> hprev(static_cast<size_t>(ch), T(0));  // h0 = 0
    std::vector<T> z(static_cast<size_t>(ch));
    for (int64_t t = 0; t < len; ++t) {
        for (int64_t i = 0; i < ch; ++i) {
            const T* arow = a_mat.data.data() + i * ch;
            T acc = u.data[static_cast<size_t>(t * ch + i)];
            for (int64_t j = 0; j < ch; ++j) acc += arow[j] * hprev[static_cast<size_t>(j)];
            z[static_cast<size_t>(i)] = acc;
        }
        for (int64_t i = 0; i < ch; ++i) {
            T hv;
            if (gated) {
                const T tv = std::tanh(z[static_cast<size_t>(i)]);
                tau.data[static_cast<size_t>(t * ch + i)] = tv;
                const T sv = spec.variant == SsmVariant::input_gate ? sig.data[static_cast<size_t>(t * ch + i)]
                                                                    : sig.data[static_cast<size_t>(i)];
                hv = sv * tv;
            } else {
                hv = z[static_cast<size_t>(i)];
            }
            h.data[static_cast<size_t>(t * ch + i)] = hv;
            hprev[static_cast<size_t>(i)] = hv;
        }
    }

    TensorT<T> y({len, c_mat.shape[0]});
    std::fill(y.data.begin(), y.data.end(), T(0));
    detail::matmul_a_bt_acc(h, c_mat, y);
    if (!y.all_finite() || !h.all_finite()) throw Error("ssm_scan: non-finite state");

    if (saved) {
        saved->h = std::move(h);
        if (gated) {
            saved->tau = std::move(tau);
            saved->sig = std::move(sig);
        }
    }
    return y;
}

template <typename T>
class GraphT {
    enum class Op {
        leaf,
        add,
        sub,
        mul,
        scale,
        add_scalar,
        matmul,
        transpose2d,
        reshape,
        add_rowvec,
        mul_rowvec,
        exp_,
        log_,
        tanh_,
        sigmoid_,
        softmax_rows,
        layer_norm_rows,
        sum_all,
        mean_all,
        gather_rows,
        scatter_rows,
        slice_rows,
        concat_rows,
        segment_mean,
        ssm_scan
    };

    struct Node {
        Op op;
        std::vector<int> in;
        TensorT<T> value;
        bool requires_grad = false;
        const TensorT<T>* leaf_src = nullptr;
        double c = 0.0;                               // scalar / clamp eps / ln eps
        std::vector<int64_t> idx;                     // indices, slice bounds, segment ends
        std::shared_ptr<detail::ScanSaved<T>> scan;   // ssm_scan only
        SsmSpec spec;
    };

public:
    struct Var {
        GraphT* g = nullptr;
        int id = -1;
    };

    bool check_finite = true;

    // -- leaves ------------------------------------------------------------

    Var constant(TensorT<T> v) { return push(Op::leaf, {}, std::move(v), false); }

    // Tracked parameter leaf. One leaf per underlying tensor per graph so
    // weight sharing accumulates into a single gradient.
    Var param(const TensorT<T>* p) {
        auto it = param_nodes_.find(p);
        if (it != param_nodes_.end()) return Var{this, it->second};
        Var v = push(Op::leaf, {}, *p, true);
        node(v.id).leaf_src = p;
        param_nodes_[p] = v.id;
        return v;
    }

    // -- elementwise and linear algebra -------------------------------------

    Var add(Var a, Var b) {
        require_same_shape(a, b, "add");
        TensorT<T> out = val(a);
        const auto& bv = val(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
        return push(Op::add, {a.id, b.id}, std::move(out));
    }

    Var sub(Var a, Var b) {
        require_same_shape(a, b, "sub");
        TensorT<T> out = val(a);
        const auto& bv = val(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
        return push(Op::sub, {a.id, b.id}, std::move(out));
    }

    Var mul(Var a, Var b) {
        require_same_shape(a, b, "mul");
        TensorT<T> out = val(a);
        const auto& bv = val(b);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
        return push(Op::mul, {a.id, b.id}, std::move(out));
    }

    Var scale(Var a, double c) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(v * c);
        Var r = push(Op::scale, {a.id}, std::move(out));
        node(r.id).c = c;
        return r;
    }

    Var add_scalar(Var a, double c) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(v + c);
        Var r = push(Op::add_scalar, {a.id}, std::move(out));
        node(r.id).c = c;
        return r;
    }

    Var matmul(Var a, Var b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        if (av.rank() != 2 || bv.rank() != 2) throw Error("matmul: both operands must be rank-2");
        if (av.shape[1] != bv.shape[0])
            throw Error("matmul: inner dims differ, " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
        TensorT<T> out({av.shape[0], bv.shape[1]});
        detail::matmul_into(av, bv, out);
        return push(Op::matmul, {a.id, b.id}, std::move(out));
    }

    Var transpose(Var a) {
        const auto& av = val(a);
        if (av.rank() != 2) throw Error("transpose: rank-2 only");
        TensorT<T> out({av.shape[1], av.shape[0]});
        for (int64_t i = 0; i < av.shape[0]; ++i)
            for (int64_t j = 0; j < av.shape[1]; ++j)
                out.data[static_cast<size_t>(j * av.shape[0] + i)] = av.data[static_cast<size_t>(i * av.shape[1] + j)];
        return push(Op::transpose2d, {a.id}, std::move(out));
    }

    Var reshape(Var a, Shape s) {
        const auto& av = val(a);
        if (shape_numel(s) != av.numel()) throw Error("reshape: numel mismatch");
        TensorT<T> out(std::move(s), av.data);
        return push(Op::reshape, {a.id}, std::move(out));
    }

    // M (R x C) + row vector v (C)
    Var add_rowvec(Var m, Var v) {
        const auto& mv = val(m);
        const auto& vv = val(v);
        if (vv.numel() != mv.cols()) throw Error("add_rowvec: vector length must equal column count");
        TensorT<T> out = mv;
        const int64_t c = mv.cols();
        for (int64_t r = 0; r < mv.rows(); ++r)
            for (int64_t j = 0; j < c; ++j) out.data[static_cast<size_t>(r * c + j)] += vv.data[static_cast<size_t>(j)];
        return push(Op::add_rowvec, {m.id, v.id}, std::move(out));
    }

    Var mul_rowvec(Var m, Var v) {
        const auto& mv = val(m);
        const auto& vv = val(v);
        if (vv.numel() != mv.cols()) throw Error("mul_rowvec: vector length must equal column count");
        TensorT<T> out = mv;
        const int64_t c = mv.cols();
        for (int64_t r = 0; r < mv.rows(); ++r)
            for (int64_t j = 0; j < c; ++j) out.data[static_cast<size_t>(r * c + j)] *= vv.data[static_cast<size_t>(j)];
        return push(Op::mul_rowvec, {m.id, v.id}, std::move(out));
    }

    Var exp(Var a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(std::exp(static_cast<double>(v)));
        return push(Op::exp_, {a.id}, std::move(out));
    }

    // log(max(x, clamp)); clamp = 0 gives the plain log
    Var log(Var a, double clamp = 0.0) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(std::log(std::max(static_cast<double>(v), clamp)));
        Var r = push(Op::log_, {a.id}, std::move(out));
        node(r.id).c = clamp;
        return r;
    }

    Var tanh(Var a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(std::tanh(static_cast<double>(v)));
        return push(Op::tanh_, {a.id}, std::move(out));
    }

    Var sigmoid(Var a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
        return push(Op::sigmoid_, {a.id}, std::move(out));
    }

    // softmax over the last axis, numerically stabilized
    Var softmax(Var a) {
        TensorT<T> out = val(a);
        const int64_t c = out.cols();
        for (int64_t r = 0; r < out.rows(); ++r) {
            T* row = out.data.data() + r * c;
            T mx = row[0];
            for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            double denom = 0;
            for (int64_t j = 0; j < c; ++j) {
                row[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)));
                denom += static_cast<double>(row[j]);
            }
            for (int64_t j = 0; j < c; ++j) row[j] = static_cast<T>(row[j] / denom);
        }
        return push(Op::softmax_rows, {a.id}, std::move(out));
    }

    // per-row normalization over the last axis: (x - mean) / sqrt(var + eps)
    Var layer_norm(Var a, double eps = 1e-5) {
        TensorT<T> out = val(a);
        const int64_t c = out.cols();
        for (int64_t r = 0; r < out.rows(); ++r) {
            T* row = out.data.data() + r * c;
            double mean = 0;
            for (int64_t j = 0; j < c; ++j) mean += static_cast<double>(row[j]);
            mean /= static_cast<double>(c);
            double var = 0;
            for (int64_t j = 0; j < c; ++j) {
                const double d = static_cast<double>(row[j]) - mean;
                var += d * d;
            }
            var /= static_cast<double>(c);
            const double inv = 1.0 / std::sqrt(var + eps);
            for (int64_t j = 0; j < c; ++j) row[j] = static_cast<T>((static_cast<double>(row[j]) - mean) * inv);
        }
        Var r = push(Op::layer_norm_rows, {a.id}, std::move(out));
        node(r.id).c = eps;
        return r;
    }

    Var sum_all(Var a) {
        double s = 0;
        for (T v : val(a).data) s += static_cast<double>(v);
        return push(Op::sum_all, {a.id}, TensorT<T>::scalar(static_cast<T>(s)));
    }

    Var mean_all(Var a) {
        double s = 0;
        for (T v : val(a).data) s += static_cast<double>(v);
        s /= static_cast<double>(val(a).numel());
        return push(Op::mean_all, {a.id}, TensorT<T>::scalar(static_cast<T>(s)));
    }

    // -- index / layout ops --------------------------------------------------

    Var gather_rows(Var a, std::vector<int64_t> indices) {
        const auto& av = val(a);
        const int64_t c = av.cols();
        TensorT<T> out({static_cast<int64_t>(indices.size()), c});
        for (size_t i = 0; i < indices.size(); ++i) {
            const int64_t src = indices[i];
            if (src < 0 || src >= av.rows()) throw Error("gather_rows: index out of range");
            std::copy_n(av.data.data() + src * c, c, out.data.data() + static_cast<int64_t>(i) * c);
        }
        Var r = push(Op::gather_rows, {a.id}, std::move(out));
        node(r.id).idx = std::move(indices);
        return r;
    }

    // place row i of input at row indices[i] of a zero (out_rows x C) tensor
    Var scatter_rows(Var a, const std::vector<int64_t>& indices, int64_t out_rows) {
        const auto& av = val(a);
        if (static_cast<int64_t>(indices.size()) != av.rows()) throw Error("scatter_rows: one index per input row required");
        const int64_t c = av.cols();
        TensorT<T> out({out_rows, c});
        for (size_t i = 0; i < indices.size(); ++i) {
            const int64_t dst = indices[i];
            if (dst < 0 || dst >= out_rows) throw Error("scatter_rows: index out of range");
            for (int64_t j = 0; j < c; ++j)
                out.data[static_cast<size_t>(dst * c + j)] += av.data[static_cast<size_t>(static_cast<int64_t>(i) * c + j)];
        }
        Var r = push(Op::scatter_rows, {a.id}, std::move(out));
        node(r.id).idx = indices;
        return r;
    }

    Var slice_rows(Var a, int64_t begin, int64_t end) {
        const auto& av = val(a);
        if (begin < 0 || end > av.rows() || begin > end) throw Error("slice_rows: bad range");
        const int64_t c = av.cols();
        TensorT<T> out({end - begin, c});
        std::copy_n(av.data.data() + begin * c, (end - begin) * c, out.data.data());
        Var r = push(Op::slice_rows, {a.id}, std::move(out));
        node(r.id).idx = {begin, end};
        return r;
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw Error("concat_rows: empty input");
        const int64_t c = val(parts[0]).cols();
        int64_t rows = 0;
        std::vector<int> ins;
        for (const Var& p : parts) {
            if (val(p).cols() != c) throw Error("concat_rows: column mismatch");
            rows += val(p).rows();
            ins.push_back(p.id);
        }
        TensorT<T> out({rows, c});
        int64_t at = 0;
        std::vector<int64_t> offsets;
        for (const Var& p : parts) {
            const auto& pv = val(p);
            offsets.push_back(at);
            std::copy_n(pv.data.data(), pv.numel(), out.data.data() + at * c);
            at += pv.rows();
        }
        offsets.push_back(at);
        Var r = push_multi(Op::concat_rows, ins, std::move(out));
        node(r.id).idx = std::move(offsets);
        return r;
    }

    // mean over each contiguous row segment; `ends` are exclusive end offsets
    Var segment_mean(Var a, std::vector<int64_t> ends) {
        const auto& av = val(a);
        const int64_t c = av.cols();
        TensorT<T> out({static_cast<int64_t>(ends.size()), c});
        int64_t begin = 0;
        for (size_t s = 0; s < ends.size(); ++s) {
            const int64_t end = ends[s];
            if (end <= begin || end > av.rows()) throw Error("segment_mean: bad segment bounds");
            const double inv = 1.0 / static_cast<double>(end - begin);
            for (int64_t r = begin; r < end; ++r)
                for (int64_t j = 0; j < c; ++j)
                    out.data[static_cast<size_t>(static_cast<int64_t>(s) * c + j)] +=
                        static_cast<T>(static_cast<double>(av.data[static_cast<size_t>(r * c + j)]) * inv);
            begin = end;
        }
        Var r = push(Op::segment_mean, {a.id}, std::move(out));
        node(r.id).idx = std::move(ends);
        return r;
    }

    // -- fused scan ------------------------------------------------------------

    Var ssm_scan(Var tokens, Var a_mat, Var b_mat, Var c_mat, Var gate, const SsmSpec& spec) {
        auto saved = std::make_shared<detail::ScanSaved<T>>();
        TensorT<T> y = ssm_scan_values(val(tokens), val(a_mat), val(b_mat), val(c_mat), val(gate), spec, saved.get());
        Var r = push_multi(Op::ssm_scan, {tokens.id, a_mat.id, b_mat.id, c_mat.id, gate.id}, std::move(y));
        node(r.id).scan = std::move(saved);
        node(r.id).spec = spec;
        return r;
    }

    // -- access / backward -------------------------------------------------------

    const TensorT<T>& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }

    // Backward from a scalar output; returns the gradient per tracked
    // parameter tensor. Fan-out contributions accumulate additively.
    std::unordered_map<const TensorT<T>*, TensorT<T>> backward(Var out) {
        const Node& on = node(out.id);
        if (on.value.numel() != 1) throw Error("backward: output must be scalar, got shape " + shape_str(on.value.shape));
        std::vector<TensorT<T>> grads(nodes_.size());
        std::vector<char> has(nodes_.size(), 0);
        grads[static_cast<size_t>(out.id)] = TensorT<T>::scalar(T(1));
        has[static_cast<size_t>(out.id)] = 1;

        for (int i = out.id; i >= 0; --i) {
            if (!has[static_cast<size_t>(i)] || !nodes_[static_cast<size_t>(i)].requires_grad) continue;
            backprop_node(i, grads, has);
        }

        std::unordered_map<const TensorT<T>*, TensorT<T>> result;
        for (const auto& [ptr, id] : param_nodes_) {
            if (has[static_cast<size_t>(id)])
                result.emplace(ptr, std::move(grads[static_cast<size_t>(id)]));
            else
                result.emplace(ptr, TensorT<T>::zeros(ptr->shape));
        }
        return result;
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    std::unordered_map<const TensorT<T>*, int> param_nodes_;

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const TensorT<T>& val(Var v) const {
        if (v.g != this) throw Error("graph: variable belongs to a different graph");
        return nodes_[static_cast<size_t>(v.id)].value;
    }

    void require_same_shape(Var a, Var b, const char* what) {
        if (!val(a).same_shape(val(b)))
            throw Error(std::string(what) + ": shape mismatch " + shape_str(val(a).shape) + " vs " + shape_str(val(b).shape));
    }

    Var push(Op op, std::vector<int> in, TensorT<T> value, bool force_grad = false) {
        return push_multi(op, std::move(in), std::move(value), force_grad);
    }

    Var push_multi(Op op, std::vector<int> in, TensorT<T> value, bool force_grad = false) {
        if (check_finite && !value.all_finite()) throw Error("graph: non-finite values produced by an operation");
        Node n;
        n.op = op;
        n.in = std::move(in);
        n.requires_grad = force_grad;
        for (int i : n.in)
            if (nodes_[static_cast<size_t>(i)].requires_grad) n.requires_grad = true;
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    void acc(std::vector<TensorT<T>>& grads, std::vector<char>& has, int id, const TensorT<T>& g) {
        if (!nodes_[static_cast<size_t>(id)].requires_grad) return;
        if (!has[static_cast<size_t>(id)]) {
            grads[static_cast<size_t>(id)] = g;
            has[static_cast<size_t>(id)] = 1;
        } else {
            auto& dst = grads[static_cast<size_t>(id)];
            for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
        }
    }

    void backprop_node(int id, std::vector<TensorT<T>>& grads, std::vector<char>& has) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        const TensorT<T>& g = grads[static_cast<size_t>(id)];
        switch (n.op) {
            case Op::leaf:
                return;
            case Op::add:
                acc(grads, has, n.in[0], g);
                acc(grads, has, n.in[1], g);
                return;
            case Op::sub: {
                acc(grads, has, n.in[0], g);
                TensorT<T> neg = g;
                for (auto& v : neg.data) v = -v;
                acc(grads, has, n.in[1], neg);
                return;
            }
            case Op::mul: {
                const auto& av = nodes_[static_cast<size_t>(n.in[0])].value;
                const auto& bv = nodes_[static_cast<size_t>(n.in[1])].value;
                TensorT<T> ga = g, gb = g;
                for (size_t i = 0; i < g.data.size(); ++i) {
                    ga.data[i] *= bv.data[i];
                    gb.data[i] *= av.data[i];
                }
                acc(grads, has, n.in[0], ga);
                acc(grads, has, n.in[1], gb);
                return;
            }
            case Op::scale: {
                TensorT<T> ga = g;
                for (auto& v : ga.data) v = static_cast<T>(v * n.c);
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::add_scalar:
                acc(grads, has, n.in[0], g);
                return;
            case Op::matmul: {
                const auto& av = nodes_[static_cast<size_t>(n.in[0])].value;
                const auto& bv = nodes_[static_cast<size_t>(n.in[1])].value;
                TensorT<T> ga({av.shape[0], av.shape[1]});
                TensorT<T> gb({bv.shape[0], bv.shape[1]});
                detail::matmul_a_bt_acc(g, bv, ga);   // dA = g * B^T
                detail::matmul_at_b_acc(av, g, gb);   // dB = A^T * g
                acc(grads, has, n.in[0], ga);
                acc(grads, has, n.in[1], gb);
                return;
            }
            case Op::transpose2d: {
                const auto& out = n.value;
                TensorT<T> ga({out.shape[1], out.shape[0]});
                for (int64_t i = 0; i < out.shape[0]; ++i)
                    for (int64_t j = 0; j < out.shape[1]; ++j)
                        ga.data[static_cast<size_t>(j * out.shape[0] + i)] = g.data[static_cast<size_t>(i * out.shape[1] + j)];
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::reshape: {
                const auto& src = nodes_[static_cast<size_t>(n.in[0])].value;
                TensorT<T> ga(src.shape, g.data);
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::add_rowvec: {
                acc(grads, has, n.in[0], g);
                const int64_t c = g.cols();
                TensorT<T> gv(nodes_[static_cast<size_t>(n.in[1])].value.shape);
                for (int64_t r = 0; r < g.rows(); ++r)
                    for (int64_t j = 0; j < c; ++j) gv.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(r * c + j)];
                acc(grads, has, n.in[1], gv);
                return;
            }
            case Op::mul_rowvec: {
                const auto& mv = nodes_[static_cast<size_t>(n.in[0])].value;
                const auto& vv = nodes_[static_cast<size_t>(n.in[1])].value;
                const int64_t c = g.cols();
                TensorT<T> gm = g;
                TensorT<T> gv(vv.shape);
                for (int64_t r = 0; r < g.rows(); ++r)
                    for (int64_t j = 0; j < c; ++j) {
                        gm.data[static_cast<size_t>(r * c + j)] *= vv.data[static_cast<size_t>(j)];
                        gv.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(r * c + j)] * mv.data[static_cast<size_t>(r * c + j)];
                    }
                acc(grads, has, n.in[0], gm);
                acc(grads, has, n.in[1], gv);
                return;
            }
            case Op::exp_: {
                TensorT<T> ga = g;
                for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] *= n.value.data[i];
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::log_: {
                const auto& xv = nodes_[static_cast<size_t>(n.in[0])].value;
                TensorT<T> ga = g;
                for (size_t i = 0; i < ga.data.size(); ++i) {
                    const double x = static_cast<double>(xv.data[i]);
                    ga.data[i] = x > n.c ? static_cast<T>(static_cast<double>(ga.data[i]) / x) : T(0);
                }
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::tanh_: {
                TensorT<T> ga = g;
                for (size_t i = 0; i < ga.data.size(); ++i) {
                    const T t = n.value.data[i];
                    ga.data[i] *= (T(1) - t * t);
                }
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::sigmoid_: {
                TensorT<T> ga = g;
                for (size_t i = 0; i < ga.data.size(); ++i) {
                    const T s = n.value.data[i];
                    ga.data[i] *= s * (T(1) - s);
                }
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::softmax_rows: {
                const auto& p = n.value;
                const int64_t c = p.cols();
                TensorT<T> ga(p.shape);
                for (int64_t r = 0; r < p.rows(); ++r) {
                    double dot = 0;
                    for (int64_t j = 0; j < c; ++j)
                        dot += static_cast<double>(g.data[static_cast<size_t>(r * c + j)]) * static_cast<double>(p.data[static_cast<size_t>(r * c + j)]);
                    for (int64_t j = 0; j < c; ++j)
                        ga.data[static_cast<size_t>(r * c + j)] =
                            static_cast<T>(p.data[static_cast<size_t>(r * c + j)] * (static_cast<double>(g.data[static_cast<size_t>(r * c + j)]) - dot));
                }
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::layer_norm_rows: {
                const auto& y = n.value;  // normalized output
                const auto& x = nodes_[static_cast<size_t>(n.in[0])].value;
                const int64_t c = y.cols();
                TensorT<T> ga(y.shape);
                for (int64_t r = 0; r < y.rows(); ++r) {
                    double mean = 0, var = 0;
                    for (int64_t j = 0; j < c; ++j) mean += static_cast<double>(x.data[static_cast<size_t>(r * c + j)]);
                    mean /= static_cast<double>(c);
                    for (int64_t j = 0; j < c; ++j) {
                        const double d = static_cast<double>(x.data[static_cast<size_t>(r * c + j)]) - mean;
                        var += d * d;
                    }
                    var /= static_cast<double>(c);
                    const double inv = 1.0 / std::sqrt(var + n.c);
                    double gmean = 0, gymean = 0;
                    for (int64_t j = 0; j < c; ++j) {
                        gmean += static_cast<double>(g.data[static_cast<size_t>(r * c + j)]);
                        gymean += static_cast<double>(g.data[static_cast<size_t>(r * c + j)]) * static_cast<double>(y.data[static_cast<size_t>(r * c + j)]);
                    }
                    gmean /= static_cast<double>(c);
                    gymean /= static_cast<double>(c);
                    for (int64_t j = 0; j < c; ++j) {
                        const double gy = static_cast<double>(g.data[static_cast<size_t>(r * c + j)]);
                        const double yv = static_cast<double>(y.data[static_cast<size_t>(r * c + j)]);
                        ga.data[static_cast<size_t>(r * c + j)] = static_cast<T>(inv * (gy - gmean - yv * gymean));
                    }
                }
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::sum_all: {
                const auto& src = nodes_[static_cast<size_t>(n.in[0])].value;
                TensorT<T> ga = TensorT<T>::full(src.shape, g.data[0]);
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::mean_all: {
                const auto& src = nodes_[static_cast<size_t>(n.in[0])].value;
                TensorT<T> ga = TensorT<T>::full(src.shape, static_cast<T>(static_cast<double>(g.data[0]) / static_cast<double>(src.numel())));
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::gather_rows: {
                const auto& src = nodes_[static_cast<size_t>(n.in[0])].value;
                TensorT<T> ga(src.shape);
                const int64_t c = src.cols();
                for (size_t i = 0; i < n.idx.size(); ++i)
                    for (int64_t j = 0; j < c; ++j)
                        ga.data[static_cast<size_t>(n.idx[i] * c + j)] += g.data[static_cast<size_t>(static_cast<int64_t>(i) * c + j)];
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::scatter_rows: {
                const auto& src = nodes_[static_cast<size_t>(n.in[0])].value;
                TensorT<T> ga(src.shape);
                const int64_t c = src.cols();
                for (size_t i = 0; i < n.idx.size(); ++i)
                    for (int64_t j = 0; j < c; ++j)
                        ga.data[static_cast<size_t>(static_cast<int64_t>(i) * c + j)] = g.data[static_cast<size_t>(n.idx[i] * c + j)];
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::slice_rows: {
                const auto& src = nodes_[static_cast<size_t>(n.in[0])].value;
                TensorT<T> ga(src.shape);
                const int64_t c = src.cols();
                std::copy_n(g.data.data(), g.numel(), ga.data.data() + n.idx[0] * c);
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::concat_rows: {
                const int64_t c = n.value.cols();
                for (size_t k = 0; k < n.in.size(); ++k) {
                    const int64_t b = n.idx[k], e = n.idx[k + 1];
                    TensorT<T> ga({e - b, c});
                    std::copy_n(g.data.data() + b * c, (e - b) * c, ga.data.data());
                    acc(grads, has, n.in[static_cast<int>(k)], ga);
                }
                return;
            }
            case Op::segment_mean: {
                const auto& src = nodes_[static_cast<size_t>(n.in[0])].value;
                TensorT<T> ga(src.shape);
                const int64_t c = src.cols();
                int64_t begin = 0;
                for (size_t s = 0; s < n.idx.size(); ++s) {
                    const int64_t end = n.idx[s];
                    const double inv = 1.0 / static_cast<double>(end - begin);
                    for (int64_t r = begin; r < end; ++r)
                        for (int64_t j = 0; j < c; ++j)
                            ga.data[static_cast<size_t>(r * c + j)] =
                                static_cast<T>(static_cast<double>(g.data[static_cast<size_t>(static_cast<int64_t>(s) * c + j)]) * inv);
                    begin = end;
                }
                acc(grads, has, n.in[0], ga);
                return;
            }
            case Op::ssm_scan: {
                backprop_scan(n, g, grads, has);
                return;
            }
        }
    }

    // BPTT through the fused scan. Mirrors ssm_scan_values exactly.
    void backprop_scan(const Node& n, const TensorT<T>& gy, std::vector<TensorT<T>>& grads, std::vector<char>& has) {
        const auto& tokens = nodes_[static_cast<size_t>(n.in[0])].value;
        const auto& a_mat = nodes_[static_cast<size_t>(n.in[1])].value;
        const auto& b_mat = nodes_[static_cast<size_t>(n.in[2])].value;
        const auto& c_mat = nodes_[static_cast<size_t>(n.in[3])].value;
        const auto& gate = nodes_[static_cast<size_t>(n.in[4])].value;
        const auto& sv = *n.scan;
        const int64_t len = tokens.shape[0];
        const int64_t ch = a_mat.shape[0];
        const bool gated = n.spec.nonlin == SsmNonlinearity::gated_tanh;
        const bool input_gate = n.spec.variant == SsmVariant::input_gate;

        // dH = gy * C
        TensorT<T> dh({len, ch});
        std::fill(dh.data.begin(), dh.data.end(), T(0));
        detail::matmul_into(gy, c_mat, dh);
        TensorT<T> gc({c_mat.shape[0], c_mat.shape[1]});
        detail::matmul_at_b_acc(gy, sv.h, gc);  // dC = gy^T * H

        TensorT<T> dz({len, ch});
        TensorT<T> dgate_vec(gate.shape);  // static gate grad (or reused for Wg below)
        TensorT<T> da_pre;                 // input-gate preactivation grads
        if (gated && input_gate) da_pre = TensorT<T>({len, ch});
        TensorT<T> ga({ch, ch});
        std::vector<T> carry(static_cast<size_t>(ch), T(0));

        for (int64_t t = len - 1; t >= 0; --t) {
            for (int64_t i = 0; i < ch; ++i) {
                const size_t o = static_cast<size_t>(t * ch + i);
                const T dht = dh.data[o] + carry[static_cast<size_t>(i)];
                if (gated) {
                    const T tau = sv.tau.data[o];
                    const T sg = input_gate ? sv.sig.data[o] : sv.sig.data[static_cast<size_t>(i)];
                    dz.data[o] = dht * sg * (T(1) - tau * tau);
                    const T ds = dht * tau;
                    const T dpre = ds * sg * (T(1) - sg);
                    if (input_gate)
                        da_pre.data[o] = dpre;
                    else
                        dgate_vec.data[static_cast<size_t>(i)] += dpre;
                } else {
                    dz.data[o] = dht;
                }
            }
            // dA += dz_t h_{t-1}^T ; carry = A^T dz_t
            if (t > 0) {
                const T* hprev = sv.h.data.data() + (t - 1) * ch;
                const T* dzt = dz.data.data() + t * ch;
                for (int64_t i = 0; i < ch; ++i) {
                    const T dzi = dzt[i];
                    if (dzi != T(0)) {
                        T* garow = ga.data.data() + i * ch;
                        for (int64_t j = 0; j < ch; ++j) garow[j] += dzi * hprev[j];
                    }
                }
                for (int64_t j = 0; j < ch; ++j) {
                    T acc = 0;
                    for (int64_t i = 0; i < ch; ++i) acc += a_mat.data[static_cast<size_t>(i * ch + j)] * dzt[i];
                    carry[static_cast<size_t>(j)] = acc;
                }
            } else {
                std::fill(carry.begin(), carry.end(), T(0));
            }
        }

        // dB = dZ^T * F ; dF = dZ * B (+ gate path)
        TensorT<T> gb({b_mat.shape[0], b_mat.shape[1]});
        detail::matmul_at_b_acc(dz, tokens, gb);
        TensorT<T> gtokens(tokens.shape);
        std::fill(gtokens.data.begin(), gtokens.data.end(), T(0));
        detail::matmul_into(dz, b_mat, gtokens);
        if (gated && input_gate) {
            TensorT<T> gw({gate.shape[0], gate.shape[1]});
            detail::matmul_at_b_acc(da_pre, tokens, gw);
            TensorT<T> extra(tokens.shape);
            std::fill(extra.data.begin(), extra.data.end(), T(0));
            detail::matmul_into(da_pre, gate, extra);
            for (size_t i = 0; i < gtokens.data.size(); ++i) gtokens.data[i] += extra.data[i];
            acc(grads, has, n.in[4], gw);
        } else if (gated) {
            acc(grads, has, n.in[4], dgate_vec);
        } else {
            acc(grads, has, n.in[4], TensorT<T>::zeros(gate.shape));
        }
        acc(grads, has, n.in[0], gtokens);
        acc(grads, has, n.in[1], ga);
        acc(grads, has, n.in[2], gb);
        acc(grads, has, n.in[3], gc);
    }
};

using Graph = GraphT<double>;
template <typename T>
using VarT = typename GraphT<T>::Var;
using Var = Graph::Var;

template <typename T>
using GradMapT = std::unordered_map<const TensorT<T>*, TensorT<T>>;
using GradMap = GradMapT<double>;

// Scalar-output backward that also insists every listed parameter actually
// participated in the graph.
template <typename T>
GradMapT<T> forward_backward(GraphT<T>& g, VarT<T> output, const std::vector<const TensorT<T>*>& params) {
    GradMapT<T> grads = g.backward(output);
    for (const TensorT<T>* p : params)
        if (grads.find(p) == grads.end()) throw Error("forward_backward: detached parameter (never entered the graph)");
    return grads;
}

}  // namespace pointcsp
