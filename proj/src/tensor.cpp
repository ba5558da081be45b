#include "fvlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fvlm {

namespace {

std::size_t element_count(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return s.empty() ? 0 : n;
}

void require_same_tape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.tape() != b.tape())
        throw ContractError(std::string(op) + ": operands live on different tapes");
}

void require_2d(const Tensor& x, const char* op) {
    if (x.shape().size() != 2)
        throw DimensionError(std::string(op) + ": expected 2-D tensor, got " +
                             shape_str(x.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void ensure_grad(TensorData& d) {
    if (d.grad.size() != d.value.size()) d.grad.assign(d.value.size(), 0.0);
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::size_t Tensor::rows() const {
    if (shape().size() != 2)
        throw DimensionError("rows(): tensor is not 2-D: " + shape_str(shape()));
    return shape()[0];
}

std::size_t Tensor::cols() const {
    if (shape().size() != 2)
        throw DimensionError("cols(): tensor is not 2-D: " + shape_str(shape()));
    return shape()[1];
}

const std::vector<double>& Tensor::grad() const {
    if (!data_->requires_grad)
        throw ContractError("grad(): tensor does not require gradients");
    return data_->grad;
}

double Tensor::scalar() const {
    if (size() != 1)
        throw DimensionError("scalar(): tensor has shape " + shape_str(shape()));
    return data_->value[0];
}

Tensor Tape::alloc(const char* op, Shape shape, bool requires_grad) {
    if (shape.empty() || element_count(shape) == 0)
        throw DimensionError(std::string(op) + ": empty shape " + shape_str(shape));
    Node node;
    node.data = std::make_shared<TensorData>();
    node.data->shape = std::move(shape);
    node.data->value.assign(element_count(node.data->shape), 0.0);
    node.data->requires_grad = requires_grad;
    node.data->id = static_cast<std::uint32_t>(nodes_.size());
    node.op = op;
    Tensor t;
    t.tape_ = this;
    t.data_ = node.data;
    nodes_.push_back(std::move(node));
    return t;
}

void Tape::define(const Tensor& out, std::function<void()> fwd,
                  std::function<void()> bwd) {
    Node& node = nodes_.at(out.ptr()->id);
    node.fwd = std::move(fwd);
    node.bwd = std::move(bwd);
    if (node.fwd) node.fwd();
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    Tensor t = alloc("leaf", std::move(shape), requires_grad);
    if (values.size() != t.size())
        throw DimensionError("leaf: got " + std::to_string(values.size()) +
                             " values for shape " + shape_str(t.shape()));
    t.ptr()->value = std::move(values);
    return t;
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
    Tensor t = alloc("constant", std::move(shape), false);
    if (values.size() != t.size())
        throw DimensionError("constant: got " + std::to_string(values.size()) +
                             " values for shape " + shape_str(t.shape()));
    t.ptr()->value = std::move(values);
    return t;
}

void Tape::backward(const Tensor& root) {
    if (root.tape() != this) throw ContractError("backward: root is not on this tape");
    if (root.size() != 1)
        throw DimensionError("backward: root must be scalar, got " +
                             shape_str(root.shape()));
    for (Node& n : nodes_) {
        if (n.data->requires_grad) {
            ensure_grad(*n.data);
            std::fill(n.data->grad.begin(), n.data->grad.end(), 0.0);
        }
    }
    if (!root.requires_grad()) return;
    root.ptr()->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->bwd && it->data->requires_grad) it->bwd();
    }
}

void Tape::replay() {
    for (Node& n : nodes_)
        if (n.fwd) n.fwd();
}

namespace {

// Shorthand used by every op: grab the raw data block.
using Data = std::shared_ptr<TensorData>;

bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_tape(a, b, "add");
    require_same_shape(a, b, "add");
    Tensor out = a.tape()->alloc("add", a.shape(), any_grad({&a, &b}));
    Data o = out.ptr(), x = a.ptr(), y = b.ptr();
    a.tape()->define(
        out,
        [o, x, y] {
            for (std::size_t i = 0; i < o->value.size(); ++i)
                o->value[i] = x->value[i] + y->value[i];
        },
        [o, x, y] {
            if (x->requires_grad) {
                ensure_grad(*x);
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    x->grad[i] += o->grad[i];
            }
            if (y->requires_grad) {
                ensure_grad(*y);
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    y->grad[i] += o->grad[i];
            }
        });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_tape(a, b, "sub");
    require_same_shape(a, b, "sub");
    Tensor out = a.tape()->alloc("sub", a.shape(), any_grad({&a, &b}));
    Data o = out.ptr(), x = a.ptr(), y = b.ptr();
    a.tape()->define(
        out,
        [o, x, y] {
            for (std::size_t i = 0; i < o->value.size(); ++i)
                o->value[i] = x->value[i] - y->value[i];
        },
        [o, x, y] {
            if (x->requires_grad) {
                ensure_grad(*x);
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    x->grad[i] += o->grad[i];
            }
            if (y->requires_grad) {
                ensure_grad(*y);
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    y->grad[i] -= o->grad[i];
            }
        });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_tape(a, b, "mul");
    require_same_shape(a, b, "mul");
    Tensor out = a.tape()->alloc("mul", a.shape(), any_grad({&a, &b}));
    Data o = out.ptr(), x = a.ptr(), y = b.ptr();
    a.tape()->define(
        out,
        [o, x, y] {
            for (std::size_t i = 0; i < o->value.size(); ++i)
                o->value[i] = x->value[i] * y->value[i];
        },
        [o, x, y] {
            if (x->requires_grad) {
                ensure_grad(*x);
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    x->grad[i] += o->grad[i] * y->value[i];
            }
            if (y->requires_grad) {
                ensure_grad(*y);
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    y->grad[i] += o->grad[i] * x->value[i];
            }
        });
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
    require_same_tape(x, bias, "add_rowvec");
    require_2d(x, "add_rowvec");
    const std::size_t c = x.cols();
    const bool ok = (bias.shape().size() == 1 && bias.shape()[0] == c) ||
                    (bias.shape().size() == 2 && bias.shape()[0] == 1 &&
                     bias.shape()[1] == c);
    if (!ok)
        throw DimensionError("add_rowvec: bias " + shape_str(bias.shape()) +
                             " does not broadcast over " + shape_str(x.shape()));
    Tensor out = x.tape()->alloc("add_rowvec", x.shape(), any_grad({&x, &bias}));
    Data o = out.ptr(), xd = x.ptr(), bd = bias.ptr();
    const std::size_t r = x.rows();
    x.tape()->define(
        out,
        [o, xd, bd, r, c] {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    o->value[i * c + j] = xd->value[i * c + j] + bd->value[j];
        },
        [o, xd, bd, r, c] {
            if (xd->requires_grad) {
                ensure_grad(*xd);
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    xd->grad[i] += o->grad[i];
            }
            if (bd->requires_grad) {
                ensure_grad(*bd);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        bd->grad[j] += o->grad[i * c + j];
            }
        });
    return out;
}

Tensor scale(const Tensor& x, double factor) {
    Tensor out = x.tape()->alloc("scale", x.shape(), x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd, factor] {
            for (std::size_t i = 0; i < o->value.size(); ++i)
                o->value[i] = xd->value[i] * factor;
        },
        [o, xd, factor] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                xd->grad[i] += o->grad[i] * factor;
        });
    return out;
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
    require_same_tape(x, s, "scale_by");
    if (s.size() != 1)
        throw DimensionError("scale_by: scale must be [1], got " +
                             shape_str(s.shape()));
    Tensor out = x.tape()->alloc("scale_by", x.shape(), any_grad({&x, &s}));
    Data o = out.ptr(), xd = x.ptr(), sd = s.ptr();
    x.tape()->define(
        out,
        [o, xd, sd] {
            const double f = sd->value[0];
            for (std::size_t i = 0; i < o->value.size(); ++i)
                o->value[i] = xd->value[i] * f;
        },
        [o, xd, sd] {
            if (xd->requires_grad) {
                ensure_grad(*xd);
                const double f = sd->value[0];
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    xd->grad[i] += o->grad[i] * f;
            }
            if (sd->requires_grad) {
                ensure_grad(*sd);
                double acc = 0.0;
                for (std::size_t i = 0; i < o->grad.size(); ++i)
                    acc += o->grad[i] * xd->value[i];
                sd->grad[0] += acc;
            }
        });
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_same_tape(a, b, "matmul");
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner dims disagree: " + shape_str(a.shape()) +
                             " * " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = a.tape()->alloc("matmul", {m, n}, any_grad({&a, &b}));
    Data o = out.ptr(), ad = a.ptr(), bd = b.ptr();
    a.tape()->define(
        out,
        [o, ad, bd, m, k, n] {
            std::fill(o->value.begin(), o->value.end(), 0.0);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t t = 0; t < k; ++t) {
                    const double av = ad->value[i * k + t];
                    if (av == 0.0) continue;
                    const double* brow = &bd->value[t * n];
                    double* orow = &o->value[i * n];
                    for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
                }
        },
        [o, ad, bd, m, k, n] {
            if (ad->requires_grad) {
                ensure_grad(*ad);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        const double* grow = &o->grad[i * n];
                        const double* brow = &bd->value[t * n];
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ad->grad[i * k + t] += acc;
                    }
            }
            if (bd->requires_grad) {
                ensure_grad(*bd);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        const double av = ad->value[i * k + t];
                        if (av == 0.0) continue;
                        const double* grow = &o->grad[i * n];
                        double* brow = &bd->grad[t * n];
                        for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
            }
        });
    return out;
}

Tensor transpose(const Tensor& x) {
    require_2d(x, "transpose");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = x.tape()->alloc("transpose", {c, r}, x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd, r, c] {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    o->value[j * r + i] = xd->value[i * c + j];
        },
        [o, xd, r, c] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    xd->grad[i * c + j] += o->grad[j * r + i];
        });
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = x.tape()->alloc("sigmoid", x.shape(), x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd] {
            for (std::size_t i = 0; i < o->value.size(); ++i)
                o->value[i] = sigmoid_scalar(xd->value[i]);
        },
        [o, xd] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < o->grad.size(); ++i) {
                const double y = o->value[i];
                xd->grad[i] += o->grad[i] * y * (1.0 - y);
            }
        });
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = x.tape()->alloc("silu", x.shape(), x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd] {
            for (std::size_t i = 0; i < o->value.size(); ++i)
                o->value[i] = xd->value[i] * sigmoid_scalar(xd->value[i]);
        },
        [o, xd] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < o->grad.size(); ++i) {
                const double s = sigmoid_scalar(xd->value[i]);
                xd->grad[i] += o->grad[i] * (s + xd->value[i] * s * (1.0 - s));
            }
        });
    return out;
}

Tensor exp_elem(const Tensor& x) {
    Tensor out = x.tape()->alloc("exp", x.shape(), x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd] {
            for (std::size_t i = 0; i < o->value.size(); ++i)
                o->value[i] = std::exp(xd->value[i]);
        },
        [o, xd] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < o->grad.size(); ++i)
                xd->grad[i] += o->grad[i] * o->value[i];
        });
    return out;
}

namespace {

// Rows of a tensor viewed as [r x c]; 1-D acts as a single row.
void row_view(const Tensor& x, std::size_t& r, std::size_t& c) {
    if (x.shape().size() == 1) {
        r = 1;
        c = x.shape()[0];
    } else if (x.shape().size() == 2) {
        r = x.shape()[0];
        c = x.shape()[1];
    } else {
        throw DimensionError("expected 1-D or 2-D tensor, got " + shape_str(x.shape()));
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
    std::size_t r, c;
    row_view(x, r, c);
    Tensor out = x.tape()->alloc("softmax", x.shape(), x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd, r, c] {
            for (std::size_t i = 0; i < r; ++i) {
                const double* in = &xd->value[i * c];
                double* y = &o->value[i * c];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < c; ++j) {
                    if (std::isnan(in[j]))
                        throw NumericError("softmax: NaN at row " + std::to_string(i) +
                                           ", col " + std::to_string(j));
                    mx = std::max(mx, in[j]);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    y[j] = std::exp(in[j] - mx);
                    sum += y[j];
                }
                for (std::size_t j = 0; j < c; ++j) y[j] /= sum;
            }
        },
        [o, xd, r, c] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < r; ++i) {
                const double* y = &o->value[i * c];
                const double* gy = &o->grad[i * c];
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
                for (std::size_t j = 0; j < c; ++j)
                    xd->grad[i * c + j] += y[j] * (gy[j] - dot);
            }
        });
    return out;
}

Tensor log_softmax_rows(const Tensor& x) {
    std::size_t r, c;
    row_view(x, r, c);
    Tensor out = x.tape()->alloc("log_softmax", x.shape(), x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd, r, c] {
            for (std::size_t i = 0; i < r; ++i) {
                const double* in = &xd->value[i * c];
                double* y = &o->value[i * c];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < c; ++j) {
                    if (std::isnan(in[j]))
                        throw NumericError("log_softmax: NaN at row " +
                                           std::to_string(i) + ", col " +
                                           std::to_string(j));
                    mx = std::max(mx, in[j]);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j < c; ++j) sum += std::exp(in[j] - mx);
                const double lse = mx + std::log(sum);
                for (std::size_t j = 0; j < c; ++j) y[j] = in[j] - lse;
            }
        },
        [o, xd, r, c] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < r; ++i) {
                const double* y = &o->value[i * c];
                const double* gy = &o->grad[i * c];
                double gsum = 0.0;
                for (std::size_t j = 0; j < c; ++j) gsum += gy[j];
                for (std::size_t j = 0; j < c; ++j)
                    xd->grad[i * c + j] += gy[j] - std::exp(y[j]) * gsum;
            }
        });
    return out;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps) {
    require_same_tape(x, gamma, "layer_norm");
    require_same_tape(x, beta, "layer_norm");
    std::size_t r, c;
    row_view(x, r, c);
    if (gamma.size() != c || beta.size() != c)
        throw DimensionError("layer_norm: gamma/beta sized " +
                             std::to_string(gamma.size()) + "/" +
                             std::to_string(beta.size()) + " for width " +
                             std::to_string(c));
    Tensor out = x.tape()->alloc("layer_norm", x.shape(),
                                 any_grad({&x, &gamma, &beta}));
    Data o = out.ptr(), xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr();
    auto cache = std::make_shared<std::vector<double>>();  // xhat rows + inv per row
    x.tape()->define(
        out,
        [o, xd, gd, bd, cache, r, c, eps] {
            cache->assign(r * c + r, 0.0);
            for (std::size_t i = 0; i < r; ++i) {
                const double* in = &xd->value[i * c];
                double mean = 0.0;
                for (std::size_t j = 0; j < c; ++j) mean += in[j];
                mean /= static_cast<double>(c);
                double var = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double d = in[j] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(c);
                const double inv = 1.0 / std::sqrt(var + eps);
                (*cache)[r * c + i] = inv;
                for (std::size_t j = 0; j < c; ++j) {
                    const double xh = (in[j] - mean) * inv;
                    (*cache)[i * c + j] = xh;
                    o->value[i * c + j] = xh * gd->value[j] + bd->value[j];
                }
            }
        },
        [o, xd, gd, bd, cache, r, c] {
            const double* xhat = cache->data();
            const double* inv = cache->data() + r * c;
            if (gd->requires_grad) {
                ensure_grad(*gd);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        gd->grad[j] += o->grad[i * c + j] * xhat[i * c + j];
            }
            if (bd->requires_grad) {
                ensure_grad(*bd);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        bd->grad[j] += o->grad[i * c + j];
            }
            if (xd->requires_grad) {
                ensure_grad(*xd);
                const double dc = static_cast<double>(c);
                for (std::size_t i = 0; i < r; ++i) {
                    double sum1 = 0.0, sum2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = o->grad[i * c + j] * gd->value[j];
                        sum1 += dxh;
                        sum2 += dxh * xhat[i * c + j];
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = o->grad[i * c + j] * gd->value[j];
                        xd->grad[i * c + j] +=
                            inv[i] * (dxh - sum1 / dc - xhat[i * c + j] * sum2 / dc);
                    }
                }
            }
        });
    return out;
}

Tensor sum_all(const Tensor& x) {
    Tensor out = x.tape()->alloc("sum_all", {1}, x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd] {
            double acc = 0.0;
            for (double v : xd->value) acc += v;
            o->value[0] = acc;
        },
        [o, xd] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < xd->grad.size(); ++i)
                xd->grad[i] += o->grad[0];
        });
    return out;
}

Tensor mean_rows(const Tensor& x) {
    require_2d(x, "mean_rows");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = x.tape()->alloc("mean_rows", {1, c}, x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd, r, c] {
            for (std::size_t j = 0; j < c; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < r; ++i) acc += xd->value[i * c + j];
                o->value[j] = acc / static_cast<double>(r);
            }
        },
        [o, xd, r, c] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    xd->grad[i * c + j] += o->grad[j] / static_cast<double>(r);
        });
    return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
    require_2d(x, "l2_normalize_rows");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = x.tape()->alloc("l2_normalize", x.shape(), x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    auto norms = std::make_shared<std::vector<double>>();
    x.tape()->define(
        out,
        [o, xd, norms, r, c] {
            norms->assign(r, 0.0);
            for (std::size_t i = 0; i < r; ++i) {
                double sq = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double v = xd->value[i * c + j];
                    sq += v * v;
                }
                const double n = std::sqrt(sq);
                if (!(n > 0.0))
                    throw NumericError("l2_normalize_rows: zero-norm row " +
                                       std::to_string(i));
                (*norms)[i] = n;
                for (std::size_t j = 0; j < c; ++j)
                    o->value[i * c + j] = xd->value[i * c + j] / n;
            }
        },
        [o, xd, norms, r, c] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j)
                    dot += o->grad[i * c + j] * o->value[i * c + j];
                for (std::size_t j = 0; j < c; ++j)
                    xd->grad[i * c + j] +=
                        (o->grad[i * c + j] - o->value[i * c + j] * dot) / (*norms)[i];
            }
        });
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_same_tape(parts[0], p, "concat_rows");
        require_2d(p, "concat_rows");
        if (p.cols() != c)
            throw DimensionError("concat_rows: column mismatch " +
                                 shape_str(p.shape()) + " vs width " +
                                 std::to_string(c));
        total += p.rows();
        rg = rg || p.requires_grad();
    }
    Tensor out = parts[0].tape()->alloc("concat_rows", {total, c}, rg);
    Data o = out.ptr();
    std::vector<Data> ins;
    ins.reserve(parts.size());
    for (const Tensor& p : parts) ins.push_back(p.ptr());
    parts[0].tape()->define(
        out,
        [o, ins, c] {
            std::size_t row = 0;
            for (const Data& in : ins) {
                std::copy(in->value.begin(), in->value.end(), &o->value[row * c]);
                row += in->value.size() / c;
            }
        },
        [o, ins, c] {
            std::size_t row = 0;
            for (const Data& in : ins) {
                const std::size_t n = in->value.size();
                if (in->requires_grad) {
                    ensure_grad(*in);
                    for (std::size_t i = 0; i < n; ++i)
                        in->grad[i] += o->grad[row * c + i];
                }
                row += n / c;
            }
        });
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
    require_2d(x, "slice_rows");
    if (count == 0 || start + count > x.rows())
        throw DimensionError("slice_rows: [" + std::to_string(start) + ", " +
                             std::to_string(start + count) + ") out of " +
                             std::to_string(x.rows()) + " rows");
    const std::size_t c = x.cols();
    Tensor out = x.tape()->alloc("slice_rows", {count, c}, x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd, start, count, c] {
            std::copy(&xd->value[start * c], &xd->value[(start + count) * c],
                      o->value.begin());
        },
        [o, xd, start, count, c] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < count * c; ++i)
                xd->grad[start * c + i] += o->grad[i];
        });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_same_tape(parts[0], p, "concat_cols");
        require_2d(p, "concat_cols");
        if (p.rows() != r)
            throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()) +
                                 " vs height " + std::to_string(r));
        total += p.cols();
        rg = rg || p.requires_grad();
    }
    Tensor out = parts[0].tape()->alloc("concat_cols", {r, total}, rg);
    Data o = out.ptr();
    std::vector<Data> ins;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) {
        ins.push_back(p.ptr());
        widths.push_back(p.cols());
    }
    parts[0].tape()->define(
        out,
        [o, ins, widths, r, total] {
            std::size_t off = 0;
            for (std::size_t p = 0; p < ins.size(); ++p) {
                const std::size_t w = widths[p];
                for (std::size_t i = 0; i < r; ++i)
                    std::copy(&ins[p]->value[i * w], &ins[p]->value[(i + 1) * w],
                              &o->value[i * total + off]);
                off += w;
            }
        },
        [o, ins, widths, r, total] {
            std::size_t off = 0;
            for (std::size_t p = 0; p < ins.size(); ++p) {
                const std::size_t w = widths[p];
                if (ins[p]->requires_grad) {
                    ensure_grad(*ins[p]);
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            ins[p]->grad[i * w + j] += o->grad[i * total + off + j];
                }
                off += w;
            }
        });
    return out;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    require_2d(x, "slice_cols");
    if (count == 0 || start + count > x.cols())
        throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                             std::to_string(start + count) + ") out of " +
                             std::to_string(x.cols()) + " cols");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = x.tape()->alloc("slice_cols", {r, count}, x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd, start, count, r, c] {
            for (std::size_t i = 0; i < r; ++i)
                std::copy(&xd->value[i * c + start], &xd->value[i * c + start + count],
                          &o->value[i * count]);
        },
        [o, xd, start, count, r, c] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < count; ++j)
                    xd->grad[i * c + start + j] += o->grad[i * count + j];
        });
    return out;
}

Tensor gather_rows(const Tensor& table, std::vector<std::size_t> ids) {
    require_2d(table, "gather_rows");
    if (ids.empty()) throw ContractError("gather_rows: empty id list");
    const std::size_t v = table.rows(), c = table.cols();
    for (std::size_t id : ids)
        if (id >= v)
            throw ContractError("gather_rows: id " + std::to_string(id) +
                                " out of range " + std::to_string(v));
    Tensor out = table.tape()->alloc("gather_rows", {ids.size(), c},
                                     table.requires_grad());
    Data o = out.ptr(), td = table.ptr();
    auto idp = std::make_shared<std::vector<std::size_t>>(std::move(ids));
    table.tape()->define(
        out,
        [o, td, idp, c] {
            for (std::size_t i = 0; i < idp->size(); ++i)
                std::copy(&td->value[(*idp)[i] * c], &td->value[((*idp)[i] + 1) * c],
                          &o->value[i * c]);
        },
        [o, td, idp, c] {
            if (!td->requires_grad) return;
            ensure_grad(*td);
            for (std::size_t i = 0; i < idp->size(); ++i)
                for (std::size_t j = 0; j < c; ++j)
                    td->grad[(*idp)[i] * c + j] += o->grad[i * c + j];
        });
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (element_count(shape) != x.size())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " +
                             shape_str(shape) + " changes element count");
    Tensor out = x.tape()->alloc("reshape", std::move(shape), x.requires_grad());
    Data o = out.ptr(), xd = x.ptr();
    x.tape()->define(
        out,
        [o, xd] { std::copy(xd->value.begin(), xd->value.end(), o->value.begin()); },
        [o, xd] {
            if (!xd->requires_grad) return;
            ensure_grad(*xd);
            for (std::size_t i = 0; i < o->grad.size(); ++i) xd->grad[i] += o->grad[i];
        });
    return out;
}

Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down) {
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            bool causal) {
    require_2d(q, "attention");
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    const std::size_t n = q.rows(), dh = q.cols();
    Tensor s = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (causal) {
        std::vector<double> mask(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) mask[i * n + j] = -1e30;
        s = add(s, q.tape()->constant({n, n}, std::move(mask)));
    }
    return matmul(softmax_rows(s), v);
}

Tensor multilabel_bce_with_logits(const Tensor& logits, const Tensor& targets,
                                  double eps) {
    require_same_tape(logits, targets, "multilabel_bce");
    require_2d(logits, "multilabel_bce");
    require_same_shape(logits, targets, "multilabel_bce");
    const std::size_t n = logits.rows(), c = logits.cols();
    Tensor out = logits.tape()->alloc("multilabel_bce", {1}, logits.requires_grad());
    Data o = out.ptr(), zd = logits.ptr(), yd = targets.ptr();
    logits.tape()->define(
        out,
        [o, zd, yd, n, c, eps] {
            double total = 0.0;
            for (std::size_t i = 0; i < n * c; ++i) {
                const double p =
                    std::clamp(sigmoid_scalar(zd->value[i]), eps, 1.0 - eps);
                const double y = yd->value[i];
                total += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
            }
            o->value[0] = total / static_cast<double>(n);
        },
        [o, zd, yd, n, c, eps] {
            if (!zd->requires_grad) return;
            ensure_grad(*zd);
            const double g = o->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n * c; ++i) {
                const double p = sigmoid_scalar(zd->value[i]);
                if (p < eps || p > 1.0 - eps) continue;  // clamp active: zero grad
                zd->grad[i] += g * (p - yd->value[i]);
            }
        });
    return out;
}

Tensor masked_token_nll(const Tensor& logits, std::vector<std::size_t> targets,
                        std::vector<std::uint8_t> mask) {
    require_2d(logits, "masked_token_nll");
    const std::size_t t = logits.rows(), v = logits.cols();
    if (targets.size() != t || mask.size() != t)
        throw DimensionError("masked_token_nll: " + std::to_string(targets.size()) +
                             " targets / " + std::to_string(mask.size()) +
                             " mask entries for " + std::to_string(t) + " rows");
    bool any = false;
    for (std::size_t i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        any = true;
        if (targets[i] >= v)
            throw ContractError("masked_token_nll: target " +
                                std::to_string(targets[i]) + " out of vocab " +
                                std::to_string(v));
    }
    if (!any) throw ContractError("masked_token_nll: mask selects no positions");
    Tensor out = logits.tape()->alloc("masked_token_nll", {1}, logits.requires_grad());
    Data o = out.ptr(), zd = logits.ptr();
    auto tg = std::make_shared<std::vector<std::size_t>>(std::move(targets));
    auto mk = std::make_shared<std::vector<std::uint8_t>>(std::move(mask));
    logits.tape()->define(
        out,
        [o, zd, tg, mk, t, v] {
            double total = 0.0;
            for (std::size_t i = 0; i < t; ++i) {
                if (!(*mk)[i]) continue;
                const double* z = &zd->value[i * v];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < v; ++j) {
                    if (std::isnan(z[j]))
                        throw NumericError("masked_token_nll: NaN logit at row " +
                                           std::to_string(i));
                    mx = std::max(mx, z[j]);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j < v; ++j) sum += std::exp(z[j] - mx);
                total += mx + std::log(sum) - z[(*tg)[i]];
            }
            o->value[0] = total;
        },
        [o, zd, tg, mk, t, v] {
            if (!zd->requires_grad) return;
            ensure_grad(*zd);
            const double g = o->grad[0];
            for (std::size_t i = 0; i < t; ++i) {
                if (!(*mk)[i]) continue;
                const double* z = &zd->value[i * v];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, z[j]);
                double sum = 0.0;
                for (std::size_t j = 0; j < v; ++j) sum += std::exp(z[j] - mx);
                for (std::size_t j = 0; j < v; ++j)
                    zd->grad[i * v + j] += g * std::exp(z[j] - mx) / sum;
                zd->grad[i * v + (*tg)[i]] -= g;
            }
        });
    return out;
}

GradCheckResult grad_check(const GraphBuilder& build,
                           const std::vector<GradCheckParam>& params,
                           double step) {
    Tape tape;
    std::map<std::string, Tensor> leaves;
    for (const GradCheckParam& p : params) {
        if (leaves.count(p.name))
            throw ContractError("grad_check: duplicate param '" + p.name + "'");
        leaves[p.name] = tape.leaf(p.shape, p.value, true);
    }
    Tensor root = build(tape, leaves);
    if (root.size() != 1)
        throw ContractError("grad_check: builder must return a scalar, got " +
                            shape_str(root.shape()));
    if (!std::isfinite(root.scalar()))
        throw NumericError("grad_check: loss is not finite");
    tape.backward(root);

    std::map<std::string, std::vector<double>> analytic;
    for (const GradCheckParam& p : params) analytic[p.name] = leaves[p.name].grad();

    GradCheckResult res;
    for (const GradCheckParam& p : params) {
        auto data = leaves[p.name].ptr();
        for (std::size_t i = 0; i < data->value.size(); ++i) {
            const double orig = data->value[i];
            data->value[i] = orig + step;
            tape.replay();
            const double fp = root.scalar();
            data->value[i] = orig - step;
            tape.replay();
            const double fm = root.scalar();
            data->value[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite loss perturbing '" +
                                   p.name + "' [" + std::to_string(i) + "]");
            const double num = (fp - fm) / (2.0 * step);
            const double ana = analytic[p.name][i];
            const double rel = std::abs(ana - num) /
                               std::max({std::abs(ana), std::abs(num), 1.0});
            ++res.checked;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = p.name;
                res.worst_index = i;
                res.analytic = ana;
                res.numeric = num;
            }
        }
    }
    tape.replay();
    return res;
}

}  // namespace fvlm
