#include "retrolens/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>

#include "retrolens/rng.hpp"

namespace retrolens {

namespace {

thread_local Tape* g_tape = nullptr;

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive");
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

using NodePtr = std::shared_ptr<TensorNode>;

std::vector<double>& ensure_grad(const NodePtr& n) {
    if (!n->grad_alloc) {
        n->grad.assign(n->data.size(), 0.0);
        n->grad_alloc = true;
    }
    return n->grad;
}

bool want_record(std::initializer_list<const Tensor*> inputs) {
    if (g_tape == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

Tensor make_out(std::vector<int> shape) {
    return Tensor::zeros(std::move(shape));
}

void mark_recorded(Tensor& out) { out.set_requires_grad(true); }

// Suspends recording for finite-difference probes.
struct TapeOff {
    Tape* prev;
    TapeOff() : prev(g_tape) { g_tape = nullptr; }
    ~TapeOff() { g_tape = prev; }
};

// Shared rule for ops whose gradient is a per-element factor times the
// output gradient: dx_i += factor_i * dout_i.
// Gradient routing is fixed when the op is recorded: each closure captures
// which inputs required grad at that moment, so later requires_grad flips
// (freezing a player between forward and backward) cannot reroute credit.
void record_unary(const Tensor& in, Tensor& out, std::vector<double> factor) {
    mark_recorded(out);
    NodePtr ni = in.node(), no = out.node();
    g_tape->push([ni, no, f = std::move(factor)] {
        const auto& og = ensure_grad(no);
        auto& gi = ensure_grad(ni);
        for (std::size_t i = 0; i < og.size(); ++i) gi[i] += f[i] * og[i];
    });
}

}  // namespace

TapeScope::TapeScope(Tape& tape) : prev_(g_tape) { g_tape = &tape; }
TapeScope::~TapeScope() { g_tape = prev_; }
Tape* active_tape() { return g_tape; }

Tensor Tensor::zeros(std::vector<int> shape) {
    auto n = std::make_shared<TensorNode>();
    n->data.assign(shape_numel(shape), 0.0);
    n->shape = std::move(shape);
    return wrap(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node()->data.begin(), t.node()->data.end(), v);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("from_data: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return wrap(std::move(n));
}

Tensor Tensor::param(std::vector<int> shape, std::vector<double> data) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.set_requires_grad(true);
    return t;
}

Tensor Tensor::wrap(std::shared_ptr<TensorNode> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

double Tensor::value() const {
    if (numel() != 1) throw ContractError("value(): tensor is not scalar");
    return node_->data[0];
}

const std::vector<double>& Tensor::grad() const {
    if (!node_->grad_alloc) throw ContractError("grad(): no gradient present");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_->grad_alloc) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    return from_data(node_->shape, node_->data);
}

Tensor Tensor::clone() const {
    Tensor t = from_data(node_->shape, node_->data);
    t.set_requires_grad(node_->requires_grad);
    return t;
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = da[i] + db[i];
    if (want_record({&a, &b})) {
        mark_recorded(out);
        NodePtr na = a.node(), nb = b.node(), no = out.node();
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        g_tape->push([na, nb, no, ga, gb] {
            const auto& og = ensure_grad(no);
            if (ga) {
                auto& g = ensure_grad(na);
                for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
            }
            if (gb) {
                auto& g = ensure_grad(nb);
                for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = da[i] - db[i];
    if (want_record({&a, &b})) {
        mark_recorded(out);
        NodePtr na = a.node(), nb = b.node(), no = out.node();
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        g_tape->push([na, nb, no, ga, gb] {
            const auto& og = ensure_grad(no);
            if (ga) {
                auto& g = ensure_grad(na);
                for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
            }
            if (gb) {
                auto& g = ensure_grad(nb);
                for (std::size_t i = 0; i < og.size(); ++i) g[i] -= og[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = da[i] * db[i];
    if (want_record({&a, &b})) {
        mark_recorded(out);
        NodePtr na = a.node(), nb = b.node(), no = out.node();
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        g_tape->push([na, nb, no, ga, gb] {
            const auto& og = ensure_grad(no);
            if (ga) {
                auto& g = ensure_grad(na);
                for (std::size_t i = 0; i < og.size(); ++i) g[i] += nb->data[i] * og[i];
            }
            if (gb) {
                auto& g = ensure_grad(nb);
                for (std::size_t i = 0; i < og.size(); ++i) g[i] += na->data[i] * og[i];
            }
        });
    }
    return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = da[i] + c;
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = c * da[i];
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no, c] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (std::size_t i = 0; i < og.size(); ++i) g[i] += c * og[i];
        });
    }
    return out;
}

Tensor exp_t(const Tensor& a) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(da[i]);
    if (want_record({&a})) record_unary(a, out, o);
    return out;
}

Tensor log_t(const Tensor& a) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::vector<double> f(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = std::log(da[i]);
        f[i] = 1.0 / da[i];
    }
    if (want_record({&a})) record_unary(a, out, std::move(f));
    return out;
}

Tensor abs_t(const Tensor& a) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::vector<double> f(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = std::fabs(da[i]);
        f[i] = da[i] > 0.0 ? 1.0 : (da[i] < 0.0 ? -1.0 : 0.0);
    }
    if (want_record({&a})) record_unary(a, out, std::move(f));
    return out;
}

Tensor square(const Tensor& a) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::vector<double> f(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = da[i] * da[i];
        f[i] = 2.0 * da[i];
    }
    if (want_record({&a})) record_unary(a, out, std::move(f));
    return out;
}

Tensor sqrt_t(const Tensor& a) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::vector<double> f(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = std::sqrt(da[i]);
        f[i] = 0.5 / o[i];
    }
    if (want_record({&a})) record_unary(a, out, std::move(f));
    return out;
}

Tensor tanh_t(const Tensor& a) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::vector<double> f(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = std::tanh(da[i]);
        f[i] = 1.0 - o[i] * o[i];
    }
    if (want_record({&a})) record_unary(a, out, std::move(f));
    return out;
}

Tensor sigmoid_t(const Tensor& a) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::vector<double> f(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double x = da[i];
        o[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
        f[i] = o[i] * (1.0 - o[i]);
    }
    if (want_record({&a})) record_unary(a, out, std::move(f));
    return out;
}

Tensor softplus_t(const Tensor& a) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::vector<double> f(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double x = da[i];
        o[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
        f[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
    }
    if (want_record({&a})) record_unary(a, out, std::move(f));
    return out;
}

Tensor pow_scalar(const Tensor& a, double p) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::vector<double> f(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = std::pow(da[i], p);
        // p == 0 makes the output a constant 1; the factor must be exactly 0
        // rather than 0 * pow(x, -1), which is NaN at x == 0.
        f[i] = p == 0.0 ? 0.0 : p * std::pow(da[i], p - 1.0);
    }
    if (want_record({&a})) record_unary(a, out, std::move(f));
    return out;
}

Tensor leaky_relu(const Tensor& a, double slope) {
    Tensor out = make_out(a.shape());
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::vector<double> f(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) {
        const bool pos = da[i] >= 0.0;
        o[i] = pos ? da[i] : slope * da[i];
        f[i] = pos ? 1.0 : slope;
    }
    if (want_record({&a})) record_unary(a, out, std::move(f));
    return out;
}

Tensor select_mask(const Tensor& cond, const Tensor& on_one, const Tensor& on_zero) {
    check_same_shape(cond, on_one, "select_mask");
    check_same_shape(cond, on_zero, "select_mask");
    Tensor out = make_out(cond.shape());
    auto& o = out.mutable_data();
    const auto& dc = cond.data();
    const auto& d1 = on_one.data();
    const auto& d0 = on_zero.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = dc[i] != 0.0 ? d1[i] : d0[i];
    if (want_record({&on_one, &on_zero})) {
        mark_recorded(out);
        NodePtr nc = cond.node(), n1 = on_one.node(), n0 = on_zero.node(), no = out.node();
        const bool g1 = on_one.requires_grad(), g0 = on_zero.requires_grad();
        g_tape->push([nc, n1, n0, no, g1, g0] {
            const auto& og = ensure_grad(no);
            if (g1) {
                auto& g = ensure_grad(n1);
                for (std::size_t i = 0; i < og.size(); ++i)
                    if (nc->data[i] != 0.0) g[i] += og[i];
            }
            if (g0) {
                auto& g = ensure_grad(n0);
                for (std::size_t i = 0; i < og.size(); ++i)
                    if (nc->data[i] == 0.0) g[i] += og[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += og[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor out = Tensor::scalar(s * inv);
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no, inv] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += inv * og[0];
        });
    }
    return out;
}

Tensor mean_per_sample(const Tensor& a) {
    if (a.ndim() < 2) throw ShapeError("mean_per_sample: need at least 2 dims");
    const int n = a.dim(0);
    const std::size_t per = a.numel() / static_cast<std::size_t>(n);
    const double inv = 1.0 / static_cast<double>(per);
    Tensor out = make_out({n});
    auto& o = out.mutable_data();
    const auto& da = a.data();
    for (int s = 0; s < n; ++s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < per; ++i) acc += da[static_cast<std::size_t>(s) * per + i];
        o[static_cast<std::size_t>(s)] = acc * inv;
    }
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no, n, per, inv] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (int s = 0; s < n; ++s)
                for (std::size_t i = 0; i < per; ++i)
                    g[static_cast<std::size_t>(s) * per + i] += inv * og[static_cast<std::size_t>(s)];
        });
    }
    return out;
}

// ---------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: element count mismatch for " + shape_str(shape));
    Tensor out = Tensor::from_data(std::move(shape), a.data());
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i];
        });
    }
    return out;
}

Tensor transpose2d(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose2d: need a 2-d tensor");
    const int r = a.dim(0), c = a.dim(1);
    Tensor out = make_out({c, r});
    auto& o = out.mutable_data();
    const auto& da = a.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            o[static_cast<std::size_t>(j) * r + i] = da[static_cast<std::size_t>(i) * c + j];
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no, r, c] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    g[static_cast<std::size_t>(i) * c + j] += og[static_cast<std::size_t>(j) * r + i];
        });
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 4 || b.ndim() != 4)
        throw ShapeError("concat_channels: need [N,C,H,W] tensors");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: N/H/W mismatch");
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor out = make_out({n, ca + cb, h, w});
    auto& o = out.mutable_data();
    const auto& da = a.data();
    const auto& db = b.data();
    for (int s = 0; s < n; ++s) {
        std::copy_n(da.begin() + static_cast<std::ptrdiff_t>(s * ca * plane), ca * plane,
                    o.begin() + static_cast<std::ptrdiff_t>(s * (ca + cb) * plane));
        std::copy_n(db.begin() + static_cast<std::ptrdiff_t>(s * cb * plane), cb * plane,
                    o.begin() + static_cast<std::ptrdiff_t>(s * (ca + cb) * plane + ca * plane));
    }
    if (want_record({&a, &b})) {
        mark_recorded(out);
        NodePtr na = a.node(), nb = b.node(), no = out.node();
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        g_tape->push([na, nb, no, ga, gb, n, ca, cb, plane] {
            const auto& og = ensure_grad(no);
            if (ga) {
                auto& g = ensure_grad(na);
                for (int s = 0; s < n; ++s)
                    for (std::size_t i = 0; i < static_cast<std::size_t>(ca) * plane; ++i)
                        g[static_cast<std::size_t>(s * ca) * plane + i] +=
                            og[static_cast<std::size_t>(s * (ca + cb)) * plane + i];
            }
            if (gb) {
                auto& g = ensure_grad(nb);
                for (int s = 0; s < n; ++s)
                    for (std::size_t i = 0; i < static_cast<std::size_t>(cb) * plane; ++i)
                        g[static_cast<std::size_t>(s * cb) * plane + i] +=
                            og[static_cast<std::size_t>(s * (ca + cb)) * plane +
                               static_cast<std::size_t>(ca) * plane + i];
            }
        });
    }
    return out;
}

Tensor slice_batch(const Tensor& a, int n) {
    if (a.ndim() < 1) throw ShapeError("slice_batch: need a batched tensor");
    if (n < 0 || n >= a.dim(0)) throw ShapeError("slice_batch: index out of range");
    std::vector<int> shape = a.shape();
    shape[0] = 1;
    const std::size_t stride = a.numel() / static_cast<std::size_t>(a.dim(0));
    const std::size_t off = static_cast<std::size_t>(n) * stride;
    Tensor out = make_out(shape);
    auto& o = out.mutable_data();
    const auto& da = a.data();
    std::copy_n(da.begin() + static_cast<std::ptrdiff_t>(off), stride, o.begin());
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no, off, stride] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (std::size_t i = 0; i < stride; ++i) g[off + i] += og[i];
        });
    }
    return out;
}

Tensor concat_batch(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValueError("concat_batch: no parts");
    const auto& head = parts.front().shape();
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != static_cast<int>(head.size()))
            throw ShapeError("concat_batch: rank mismatch");
        for (std::size_t d = 1; d < head.size(); ++d)
            if (p.shape()[d] != head[d]) throw ShapeError("concat_batch: trailing dims differ");
        total += p.dim(0);
    }
    std::vector<int> shape = head;
    shape[0] = total;
    Tensor out = make_out(shape);
    auto& o = out.mutable_data();
    std::size_t at = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data().begin(), p.numel(), o.begin() + static_cast<std::ptrdiff_t>(at));
        at += p.numel();
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (g_tape != nullptr && any) {
        mark_recorded(out);
        std::vector<NodePtr> nodes;
        std::vector<char> wants;
        nodes.reserve(parts.size());
        wants.reserve(parts.size());
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            wants.push_back(p.requires_grad() ? 1 : 0);
        }
        NodePtr no = out.node();
        g_tape->push([nodes = std::move(nodes), wants = std::move(wants), no] {
            const auto& og = ensure_grad(no);
            std::size_t at = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                const auto& ni = nodes[k];
                const std::size_t sz = ni->data.size();
                if (wants[k]) {
                    auto& g = ensure_grad(ni);
                    for (std::size_t i = 0; i < sz; ++i) g[i] += og[at + i];
                }
                at += sz;
            }
        });
    }
    return out;
}

Tensor upsample_nearest2(const Tensor& a) {
    if (a.ndim() != 4) throw ShapeError("upsample_nearest2: need [N,C,H,W]");
    const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    Tensor out = make_out({n, c, 2 * h, 2 * w});
    auto& o = out.mutable_data();
    const auto& da = a.data();
    const int W2 = 2 * w;
    for (int s = 0; s < n; ++s)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t ibase = (static_cast<std::size_t>(s) * c + ch) * h * w;
            const std::size_t obase = (static_cast<std::size_t>(s) * c + ch) * (4u * h * w);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double v = da[ibase + static_cast<std::size_t>(y) * w + x];
                    const std::size_t p = obase + static_cast<std::size_t>(2 * y) * W2 + 2 * x;
                    o[p] = v;
                    o[p + 1] = v;
                    o[p + W2] = v;
                    o[p + W2 + 1] = v;
                }
        }
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no, n, c, h, w, W2] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (int s = 0; s < n; ++s)
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t ibase = (static_cast<std::size_t>(s) * c + ch) * h * w;
                    const std::size_t obase = (static_cast<std::size_t>(s) * c + ch) * (4u * h * w);
                    for (int y = 0; y < h; ++y)
                        for (int x = 0; x < w; ++x) {
                            const std::size_t p = obase + static_cast<std::size_t>(2 * y) * W2 + 2 * x;
                            g[ibase + static_cast<std::size_t>(y) * w + x] +=
                                og[p] + og[p + 1] + og[p + W2] + og[p + W2 + 1];
                        }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: need 2-d tensors");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Tensor out = make_out({m, n});
    {
        ConstMatMap ma(a.data().data(), m, k);
        ConstMatMap mb(b.data().data(), k, n);
        MatMap mo(out.mutable_data().data(), m, n);
        mo.noalias() = ma * mb;
    }
    if (want_record({&a, &b})) {
        mark_recorded(out);
        NodePtr na = a.node(), nb = b.node(), no = out.node();
        const bool ga_w = a.requires_grad(), gb_w = b.requires_grad();
        g_tape->push([na, nb, no, ga_w, gb_w, m, k, n] {
            const auto& og = ensure_grad(no);
            ConstMatMap mg(og.data(), m, n);
            if (ga_w) {
                auto& ga = ensure_grad(na);
                ConstMatMap mb(nb->data.data(), k, n);
                MatMap mga(ga.data(), m, k);
                mga.noalias() += mg * mb.transpose();
            }
            if (gb_w) {
                auto& gb = ensure_grad(nb);
                ConstMatMap ma(na->data.data(), m, k);
                MatMap mgb(gb.data(), k, n);
                mgb.noalias() += ma.transpose() * mg;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- softmax

namespace {

Tensor softmax_rows_impl(const Tensor& a, const Tensor* mask_bias) {
    if (a.ndim() != 2) throw ShapeError("softmax_rows: need a 2-d tensor");
    if (mask_bias != nullptr) check_same_shape(a, *mask_bias, "softmax_rows");
    const int r = a.dim(0), c = a.dim(1);
    Tensor out = make_out({r, c});
    auto& o = out.mutable_data();
    const auto& da = a.data();
    const double* bias = mask_bias ? mask_bias->data().data() : nullptr;
    for (int i = 0; i < r; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j) {
            const double z = da[base + j] + (bias ? bias[base + j] : 0.0);
            mx = std::max(mx, z);
        }
        if (bias != nullptr && mx <= 0.5 * kMaskBias)
            throw FullyMaskedError("softmax_rows: row " + std::to_string(i) +
                                   " has every column masked");
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            const double z = da[base + j] + (bias ? bias[base + j] : 0.0);
            o[base + j] = std::exp(z - mx);
            s += o[base + j];
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < c; ++j) o[base + j] *= inv;
    }
    if (want_record({&a})) {
        mark_recorded(out);
        NodePtr ni = a.node(), no = out.node();
        g_tape->push([ni, no, r, c] {
            const auto& og = ensure_grad(no);
            auto& g = ensure_grad(ni);
            for (int i = 0; i < r; ++i) {
                const std::size_t base = static_cast<std::size_t>(i) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += og[base + j] * no->data[base + j];
                for (int j = 0; j < c; ++j)
                    g[base + j] += no->data[base + j] * (og[base + j] - dot);
            }
        });
    }
    return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& a) { return softmax_rows_impl(a, nullptr); }
Tensor softmax_rows(const Tensor& a, const Tensor& mask_bias) {
    return softmax_rows_impl(a, &mask_bias);
}

// ---------------------------------------------------------------- conv2d

namespace {

struct ConvDims {
    int n, c, h, w, k, kh, kw, ho, wo, stride, pad;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weight, const Tensor& bias,
                   int stride, int pad) {
    if (input.ndim() != 4) throw ShapeError("conv2d: input must be [N,C,H,W]");
    if (weight.ndim() != 4) throw ShapeError("conv2d: weight must be [K,C,kh,kw]");
    if (bias.ndim() != 1 || bias.dim(0) != weight.dim(0))
        throw ShapeError("conv2d: bias must be [K]");
    if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
    if (pad < 0) throw ValueError("conv2d: pad must be >= 0");
    ConvDims d;
    d.n = input.dim(0);
    d.c = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.k = weight.dim(0);
    d.kh = weight.dim(2);
    d.kw = weight.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (weight.dim(1) != d.c)
        throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                         " input channels, got " + std::to_string(d.c));
    if (d.kh > d.h + 2 * pad || d.kw > d.w + 2 * pad)
        throw ShapeError("conv2d: kernel larger than padded input");
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

// col is [C*kh*kw, Ho*Wo] row-major for one sample.
void im2col(const double* in, const ConvDims& d, double* col) {
    const int patch = d.ho * d.wo;
    for (int c = 0; c < d.c; ++c)
        for (int ky = 0; ky < d.kh; ++ky)
            for (int kx = 0; kx < d.kw; ++kx) {
                double* row = col + (static_cast<std::size_t>(c) * d.kh * d.kw +
                                     static_cast<std::size_t>(ky) * d.kw + kx) *
                                        patch;
                for (int oy = 0; oy < d.ho; ++oy) {
                    const int iy = oy * d.stride - d.pad + ky;
                    for (int ox = 0; ox < d.wo; ++ox) {
                        const int ix = ox * d.stride - d.pad + kx;
                        row[oy * d.wo + ox] =
                            (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
                                ? in[(static_cast<std::size_t>(c) * d.h + iy) * d.w + ix]
                                : 0.0;
                    }
                }
            }
}

void col2im_add(const double* col, const ConvDims& d, double* din) {
    for (int c = 0; c < d.c; ++c)
        for (int ky = 0; ky < d.kh; ++ky)
            for (int kx = 0; kx < d.kw; ++kx) {
                const double* row = col + (static_cast<std::size_t>(c) * d.kh * d.kw +
                                           static_cast<std::size_t>(ky) * d.kw + kx) *
                                              (d.ho * d.wo);
                for (int oy = 0; oy < d.ho; ++oy) {
                    const int iy = oy * d.stride - d.pad + ky;
                    if (iy < 0 || iy >= d.h) continue;
                    for (int ox = 0; ox < d.wo; ++ox) {
                        const int ix = ox * d.stride - d.pad + kx;
                        if (ix < 0 || ix >= d.w) continue;
                        din[(static_cast<std::size_t>(c) * d.h + iy) * d.w + ix] +=
                            row[oy * d.wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad) {
    const ConvDims d = conv_dims(input, weight, bias, stride, pad);
    Tensor out = make_out({d.n, d.k, d.ho, d.wo});
    const int rows = d.c * d.kh * d.kw;
    const int patch = d.ho * d.wo;
    std::vector<double> col(static_cast<std::size_t>(rows) * patch);
    const auto& din = input.data();
    auto& dout = out.mutable_data();
    ConstMatMap wm(weight.data().data(), d.k, rows);
    for (int s = 0; s < d.n; ++s) {
        im2col(din.data() + static_cast<std::size_t>(s) * d.c * d.h * d.w, d, col.data());
        ConstMatMap cm(col.data(), rows, patch);
        MatMap om(dout.data() + static_cast<std::size_t>(s) * d.k * patch, d.k, patch);
        om.noalias() = wm * cm;
        for (int k = 0; k < d.k; ++k)
            om.row(k).array() += bias.data()[static_cast<std::size_t>(k)];
    }
    if (want_record({&input, &weight, &bias})) {
        mark_recorded(out);
        NodePtr nin = input.node(), nw = weight.node(), nb = bias.node(), no = out.node();
        const bool gin = input.requires_grad(), gw_w = weight.requires_grad(),
                   gb_w = bias.requires_grad();
        g_tape->push([nin, nw, nb, no, gin, gw_w, gb_w, d, rows, patch] {
            const auto& og = ensure_grad(no);
            std::vector<double> col(static_cast<std::size_t>(rows) * patch);
            std::vector<double> dcol;
            if (gin) dcol.resize(col.size());
            ConstMatMap wm(nw->data.data(), d.k, rows);
            for (int s = 0; s < d.n; ++s) {
                ConstMatMap gm(og.data() + static_cast<std::size_t>(s) * d.k * patch, d.k, patch);
                if (gw_w) {
                    im2col(nin->data.data() + static_cast<std::size_t>(s) * d.c * d.h * d.w, d,
                           col.data());
                    auto& gw = ensure_grad(nw);
                    ConstMatMap cm(col.data(), rows, patch);
                    MatMap gwm(gw.data(), d.k, rows);
                    gwm.noalias() += gm * cm.transpose();
                }
                if (gb_w) {
                    auto& gb = ensure_grad(nb);
                    for (int k = 0; k < d.k; ++k) gb[static_cast<std::size_t>(k)] += gm.row(k).sum();
                }
                if (gin) {
                    auto& gi = ensure_grad(nin);
                    MatMap dcm(dcol.data(), rows, patch);
                    dcm.noalias() = wm.transpose() * gm;
                    col2im_add(dcol.data(), d,
                               gi.data() + static_cast<std::size_t>(s) * d.c * d.h * d.w);
                }
            }
        });
    }
    return out;
}

Tensor upsample_conv(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (weight.ndim() != 4) throw ShapeError("upsample_conv: weight must be [K,C,kh,kw]");
    const int kh = weight.dim(2), kw = weight.dim(3);
    if ((kh - 1) / 2 != (kw - 1) / 2)
        throw ShapeError("upsample_conv: kernel must admit a single symmetric pad");
    return conv2d(upsample_nearest2(input), weight, bias, 1, (kh - 1) / 2);
}

// ---------------------------------------------------------------- instance norm

Tensor instance_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                     double eps) {
    if (input.ndim() != 4) throw ShapeError("instance_norm: input must be [N,C,H,W]");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c)
        throw ShapeError("instance_norm: gamma/beta must be [C]");
    const int m = h * w;
    if (m < 2) throw ValueError("instance_norm: degenerate 1-pixel plane");
    Tensor out = make_out(input.shape());
    auto& o = out.mutable_data();
    const auto& x = input.data();
    std::vector<double> invstd(static_cast<std::size_t>(n) * c);
    std::vector<double> meanv(static_cast<std::size_t>(n) * c);
    for (int s = 0; s < n; ++s)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * m;
            double mu = 0.0;
            for (int i = 0; i < m; ++i) mu += x[base + i];
            mu /= m;
            double var = 0.0;
            for (int i = 0; i < m; ++i) {
                const double dv = x[base + i] - mu;
                var += dv * dv;
            }
            var /= m;
            const double is = 1.0 / std::sqrt(var + eps);
            meanv[static_cast<std::size_t>(s) * c + ch] = mu;
            invstd[static_cast<std::size_t>(s) * c + ch] = is;
            const double g = gamma.data()[static_cast<std::size_t>(ch)];
            const double b = beta.data()[static_cast<std::size_t>(ch)];
            for (int i = 0; i < m; ++i) o[base + i] = g * (x[base + i] - mu) * is + b;
        }
    if (want_record({&input, &gamma, &beta})) {
        mark_recorded(out);
        NodePtr nin = input.node(), ng = gamma.node(), nb = beta.node(), no = out.node();
        const bool gin = input.requires_grad(), gg_w = gamma.requires_grad(),
                   gb_w = beta.requires_grad();
        g_tape->push([nin, ng, nb, no, gin, gg_w, gb_w, n, c, m, meanv = std::move(meanv),
                      invstd = std::move(invstd)] {
            const auto& og = ensure_grad(no);
            for (int s = 0; s < n; ++s)
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * m;
                    const double mu = meanv[static_cast<std::size_t>(s) * c + ch];
                    const double is = invstd[static_cast<std::size_t>(s) * c + ch];
                    const double g = ng->data[static_cast<std::size_t>(ch)];
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (int i = 0; i < m; ++i) {
                        const double xhat = (nin->data[base + i] - mu) * is;
                        sum_dy += og[base + i];
                        sum_dy_xhat += og[base + i] * xhat;
                    }
                    if (gg_w) ensure_grad(ng)[static_cast<std::size_t>(ch)] += sum_dy_xhat;
                    if (gb_w) ensure_grad(nb)[static_cast<std::size_t>(ch)] += sum_dy;
                    if (gin) {
                        auto& gi = ensure_grad(nin);
                        const double mean_dy = sum_dy / m;
                        const double mean_dy_xhat = sum_dy_xhat / m;
                        for (int i = 0; i < m; ++i) {
                            const double xhat = (nin->data[base + i] - mu) * is;
                            gi[base + i] += g * is * (og[base + i] - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------- backward

void backward(Tape& tape, const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
    ensure_grad(loss.node())[0] += 1.0;
    for (auto it = tape.records_.rbegin(); it != tape.records_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------- grad check

namespace {

double rel_err(double a, double n) {
    const double denom = std::max({std::fabs(a), std::fabs(n), 1.0});
    return std::fabs(a - n) / denom;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double h, double tol) {
    // analytic pass
    Tensor x = point.detach();
    x.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor y = f(x);
        if (y.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
        if (!std::isfinite(y.value()))
            throw std::runtime_error("grad_check: f is not finite at the point");
        backward(tape, y);
        analytic = x.has_grad() ? x.grad() : std::vector<double>(x.numel(), 0.0);
    }
    GradCheckReport report;
    report.rel_err.resize(point.numel());
    Tensor probe = point.detach();
    auto& pd = probe.mutable_data();
    TapeOff off;
    for (std::size_t i = 0; i < pd.size(); ++i) {
        const double keep = pd[i];
        pd[i] = keep + h;
        const double up = f(probe).value();
        pd[i] = keep - h;
        const double dn = f(probe).value();
        pd[i] = keep;
        if (!std::isfinite(up) || !std::isfinite(dn))
            throw std::runtime_error("grad_check: f is not finite at point +/- h");
        const double numeric = (up - dn) / (2.0 * h);
        report.rel_err[i] = rel_err(analytic[i], numeric);
        if (report.rel_err[i] >= report.max_rel_err) {
            report.max_rel_err = report.rel_err[i];
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

std::vector<ParamGradCheck> grad_check_params(
    const std::function<Tensor()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor>>& params,
    int coords_per_param, double h, double tol, std::uint64_t seed) {
    // one analytic backward at the current parameter values
    for (const auto& [name, p] : params) {
        Tensor t = p;
        t.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = loss_fn();
        if (loss.numel() != 1) throw ContractError("grad_check_params: loss must be scalar");
        backward(tape, loss);
    }
    analytic.reserve(params.size());
    for (const auto& [name, p] : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));

    std::vector<ParamGradCheck> out;
    Rng rng(seed);
    TapeOff off;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi].second;
        ParamGradCheck r;
        r.name = params[pi].first;
        for (int k = 0; k < coords_per_param; ++k) {
            const std::size_t i =
                static_cast<std::size_t>(rng.bits() % static_cast<std::uint64_t>(p.numel()));
            auto& d = p.mutable_data();
            const double keep = d[i];
            d[i] = keep + h;
            const double up = loss_fn().value();
            d[i] = keep - h;
            const double dn = loss_fn().value();
            d[i] = keep;
            const double numeric = (up - dn) / (2.0 * h);
            r.max_rel_err = std::max(r.max_rel_err, rel_err(analytic[pi][i], numeric));
        }
        r.pass = r.max_rel_err <= tol;
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace retrolens
