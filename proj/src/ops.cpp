#include "distillforge/ops.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "distillforge/kernels.hpp"

namespace distillforge {
namespace ops {

namespace {

NodePtr make_node(Tensor value, std::vector<NodePtr> inputs) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in->requires_grad;
    n->requires_grad = rg;
    if (rg) n->inputs = std::move(inputs);
    return n;
}

void check_same_shape(const NodePtr& a, const NodePtr& b, const char* op) {
    if (a->shape() != b->shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                                    " vs " + b->value.shape_str());
    if (a->dtype() != b->dtype())
        throw std::invalid_argument(std::string(op) + ": dtype mismatch");
}

template <typename T>
void axpy(T alpha, const T* x, T* y, long n) {
    for (long i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const std::vector<PrimitiveInfo>& primitive_set() {
    static const std::vector<PrimitiveInfo> kSet = {
        {"matmul", "dense [M,K]x[K,N] product; batched variant bmm with optional B-transpose"},
        {"conv2d", "2-D convolution, stride 1 or 2, zero padding"},
        {"upsample_nearest2x", "nearest-neighbor 2x spatial upsampling"},
        {"group_norm", "per-group normalization over (C/G,H,W), affine, eps 1e-5"},
        {"layer_norm", "normalization over the last dimension, affine, eps 1e-5"},
        {"softmax", "softmax over the last dimension with max subtraction"},
        {"silu", "x * sigmoid(x)"},
        {"gelu", "0.5 x (1 + erf(x/sqrt(2)))"},
        {"add/mul", "elementwise arithmetic, plus row/channel bias broadcasts"},
        {"reshape/permute", "shape-only views (materialized copies)"},
        {"concat/slice", "channel concatenation and last-dim slicing"},
        {"embedding", "row lookup in a table with scatter-add gradient"},
        {"mse", "mean-squared reduction to a scalar"},
        {"sdpa", "scaled dot-product attention, composed from bmm/softmax/scale"},
    };
    return kSet;
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
    check_same_shape(a, b, "add");
    Tensor y(a->shape(), a->dtype());
    dispatch_dtype(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a->value.data<T>();
        const T* pb = b->value.data<T>();
        T* py = y.data<T>();
        long n = y.numel();
        for (long i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
    });
    auto out = make_node(std::move(y), {a, b});
    if (out->requires_grad)
        out->backward_fn = [a, b](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                long n = self.numel();
                if (a->requires_grad) axpy(T(1), g, a->ensure_grad().data<T>(), n);
                if (b->requires_grad) axpy(T(1), g, b->ensure_grad().data<T>(), n);
            });
        };
    return out;
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
    check_same_shape(a, b, "sub");
    Tensor y(a->shape(), a->dtype());
    dispatch_dtype(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a->value.data<T>();
        const T* pb = b->value.data<T>();
        T* py = y.data<T>();
        for (long i = 0; i < y.numel(); ++i) py[i] = pa[i] - pb[i];
    });
    auto out = make_node(std::move(y), {a, b});
    if (out->requires_grad)
        out->backward_fn = [a, b](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                long n = self.numel();
                if (a->requires_grad) axpy(T(1), g, a->ensure_grad().data<T>(), n);
                if (b->requires_grad) axpy(T(-1), g, b->ensure_grad().data<T>(), n);
            });
        };
    return out;
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
    check_same_shape(a, b, "mul");
    Tensor y(a->shape(), a->dtype());
    dispatch_dtype(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a->value.data<T>();
        const T* pb = b->value.data<T>();
        T* py = y.data<T>();
        for (long i = 0; i < y.numel(); ++i) py[i] = pa[i] * pb[i];
    });
    auto out = make_node(std::move(y), {a, b});
    if (out->requires_grad)
        out->backward_fn = [a, b](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                long n = self.numel();
                if (a->requires_grad) {
                    T* ga = a->ensure_grad().data<T>();
                    const T* pb = b->value.data<T>();
                    for (long i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
                }
                if (b->requires_grad) {
                    T* gb = b->ensure_grad().data<T>();
                    const T* pa = a->value.data<T>();
                    for (long i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
                }
            });
        };
    return out;
}

NodePtr scale(const NodePtr& a, double s) {
    Tensor y(a->shape(), a->dtype());
    dispatch_dtype(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T alpha = static_cast<T>(s);
        const T* pa = a->value.data<T>();
        T* py = y.data<T>();
        for (long i = 0; i < y.numel(); ++i) py[i] = alpha * pa[i];
    });
    auto out = make_node(std::move(y), {a});
    if (out->requires_grad)
        out->backward_fn = [a, s](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                axpy(static_cast<T>(s), self.grad.data<T>(), a->ensure_grad().data<T>(),
                     self.numel());
            });
        };
    return out;
}

NodePtr silu(const NodePtr& x) {
    Tensor y(x->shape(), x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* py = y.data<T>();
        for (long i = 0; i < y.numel(); ++i) {
            T s = T(1) / (T(1) + std::exp(-px[i]));
            py[i] = px[i] * s;
        }
    });
    auto out = make_node(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                const T* px = x->value.data<T>();
                T* gx = x->ensure_grad().data<T>();
                for (long i = 0; i < self.numel(); ++i) {
                    T s = T(1) / (T(1) + std::exp(-px[i]));
                    gx[i] += g[i] * s * (T(1) + px[i] * (T(1) - s));
                }
            });
        };
    return out;
}

NodePtr gelu(const NodePtr& x) {
    Tensor y(x->shape(), x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* py = y.data<T>();
        const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
        for (long i = 0; i < y.numel(); ++i)
            py[i] = T(0.5) * px[i] * (T(1) + std::erf(px[i] * inv_sqrt2));
    });
    auto out = make_node(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                const T* px = x->value.data<T>();
                T* gx = x->ensure_grad().data<T>();
                const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
                const T inv_sqrt2pi = static_cast<T>(0.3989422804014326779);
                for (long i = 0; i < self.numel(); ++i) {
                    T cdf = T(0.5) * (T(1) + std::erf(px[i] * inv_sqrt2));
                    T pdf = inv_sqrt2pi * std::exp(T(-0.5) * px[i] * px[i]);
                    gx[i] += g[i] * (cdf + px[i] * pdf);
                }
            });
        };
    return out;
}

NodePtr add_bias_rows(const NodePtr& x, const NodePtr& b) {
    if (x->value.rank() < 1 || b->value.rank() != 1 ||
        x->shape().back() != b->shape()[0])
        throw std::invalid_argument("add_bias_rows: incompatible shapes");
    long n = b->shape()[0];
    long rows = x->numel() / n;
    Tensor y(x->shape(), x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        const T* pb = b->value.data<T>();
        T* py = y.data<T>();
        for (long r = 0; r < rows; ++r)
            for (long j = 0; j < n; ++j) py[r * n + j] = px[r * n + j] + pb[j];
    });
    auto out = make_node(std::move(y), {x, b});
    if (out->requires_grad)
        out->backward_fn = [x, b, rows, n](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                if (x->requires_grad) axpy(T(1), g, x->ensure_grad().data<T>(), self.numel());
                if (b->requires_grad) {
                    T* gb = b->ensure_grad().data<T>();
                    for (long j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (long r = 0; r < rows; ++r) acc += static_cast<double>(g[r * n + j]);
                        gb[j] += static_cast<T>(acc);
                    }
                }
            });
        };
    return out;
}

NodePtr add_bias_channels(const NodePtr& x, const NodePtr& b) {
    if (x->value.rank() != 4 || b->value.rank() != 1 || x->dim(1) != b->shape()[0])
        throw std::invalid_argument("add_bias_channels: incompatible shapes");
    long bs = x->dim(0), c = x->dim(1), hw = x->dim(2) * x->dim(3);
    Tensor y(x->shape(), x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        const T* pb = b->value.data<T>();
        T* py = y.data<T>();
        for (long i = 0; i < bs; ++i)
            for (long ch = 0; ch < c; ++ch) {
                const T bias = pb[ch];
                const T* src = px + (i * c + ch) * hw;
                T* dst = py + (i * c + ch) * hw;
                for (long p = 0; p < hw; ++p) dst[p] = src[p] + bias;
            }
    });
    auto out = make_node(std::move(y), {x, b});
    if (out->requires_grad)
        out->backward_fn = [x, b, bs, c, hw](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                if (x->requires_grad) axpy(T(1), g, x->ensure_grad().data<T>(), self.numel());
                if (b->requires_grad) {
                    T* gb = b->ensure_grad().data<T>();
                    for (long ch = 0; ch < c; ++ch) {
                        double acc = 0.0;
                        for (long i = 0; i < bs; ++i) {
                            const T* src = g + (i * c + ch) * hw;
                            for (long p = 0; p < hw; ++p) acc += static_cast<double>(src[p]);
                        }
                        gb[ch] += static_cast<T>(acc);
                    }
                }
            });
        };
    return out;
}

NodePtr add_per_sample_channels(const NodePtr& x, const NodePtr& v) {
    if (x->value.rank() != 4 || v->value.rank() != 2 || x->dim(0) != v->dim(0) ||
        x->dim(1) != v->dim(1))
        throw std::invalid_argument("add_per_sample_channels: incompatible shapes " +
                                    x->value.shape_str() + " vs " + v->value.shape_str());
    long bs = x->dim(0), c = x->dim(1), hw = x->dim(2) * x->dim(3);
    Tensor y(x->shape(), x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        const T* pv = v->value.data<T>();
        T* py = y.data<T>();
        for (long i = 0; i < bs; ++i)
            for (long ch = 0; ch < c; ++ch) {
                const T bias = pv[i * c + ch];
                const T* src = px + (i * c + ch) * hw;
                T* dst = py + (i * c + ch) * hw;
                for (long p = 0; p < hw; ++p) dst[p] = src[p] + bias;
            }
    });
    auto out = make_node(std::move(y), {x, v});
    if (out->requires_grad)
        out->backward_fn = [x, v, bs, c, hw](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                if (x->requires_grad) axpy(T(1), g, x->ensure_grad().data<T>(), self.numel());
                if (v->requires_grad) {
                    T* gv = v->ensure_grad().data<T>();
                    for (long i = 0; i < bs; ++i)
                        for (long ch = 0; ch < c; ++ch) {
                            double acc = 0.0;
                            const T* src = g + (i * c + ch) * hw;
                            for (long p = 0; p < hw; ++p) acc += static_cast<double>(src[p]);
                            gv[i * c + ch] += static_cast<T>(acc);
                        }
                }
            });
        };
    return out;
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->dim(1) != b->dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + a->value.shape_str() + " x " +
                                    b->value.shape_str());
    long m = a->dim(0), k = a->dim(1), n = b->dim(1);
    Tensor y({m, n}, a->dtype());
    dispatch_dtype(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        gemm<T>(a->value.data<T>(), b->value.data<T>(), y.data<T>(), m, k, n);
    });
    auto out = make_node(std::move(y), {a, b});
    if (out->requires_grad)
        out->backward_fn = [a, b, m, k, n](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                if (a->requires_grad) {
                    // dA = dC * B^T
                    std::vector<T> bt(static_cast<std::size_t>(k * n));
                    transpose<T>(b->value.data<T>(), bt.data(), k, n);
                    gemm<T>(g, bt.data(), a->ensure_grad().data<T>(), m, n, k, true);
                }
                if (b->requires_grad) {
                    // dB = A^T * dC
                    std::vector<T> at(static_cast<std::size_t>(m * k));
                    transpose<T>(a->value.data<T>(), at.data(), m, k);
                    gemm<T>(at.data(), g, b->ensure_grad().data<T>(), k, m, n, true);
                }
            });
        };
    return out;
}

NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& bias) {
    if (x->value.rank() < 1 || w->value.rank() != 2)
        throw std::invalid_argument("linear: bad ranks");
    long in = w->dim(1), outf = w->dim(0);
    if (x->shape().back() != in)
        throw std::invalid_argument("linear: input features " +
                                    std::to_string(x->shape().back()) + " != " +
                                    std::to_string(in));
    if (bias && (bias->value.rank() != 1 || bias->shape()[0] != outf))
        throw std::invalid_argument("linear: bad bias shape");
    long rows = x->numel() / in;
    std::vector<long> out_shape = x->shape();
    out_shape.back() = outf;
    Tensor y(out_shape, x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        // y = x * w^T (+ bias)
        std::vector<T> wt(static_cast<std::size_t>(in * outf));
        transpose<T>(w->value.data<T>(), wt.data(), outf, in);
        gemm<T>(x->value.data<T>(), wt.data(), y.data<T>(), rows, in, outf);
        if (bias) {
            const T* pb = bias->value.data<T>();
            T* py = y.data<T>();
            for (long r = 0; r < rows; ++r)
                for (long j = 0; j < outf; ++j) py[r * outf + j] += pb[j];
        }
    });
    auto out = make_node(std::move(y), bias ? std::vector<NodePtr>{x, w, bias}
                                            : std::vector<NodePtr>{x, w});
    if (out->requires_grad)
        out->backward_fn = [x, w, bias, rows, in, outf](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                if (x->requires_grad) {
                    // dX = dY * W
                    gemm<T>(g, w->value.data<T>(), x->ensure_grad().data<T>(), rows, outf, in,
                            true);
                }
                if (w->requires_grad) {
                    // dW = dY^T * X
                    std::vector<T> gt(static_cast<std::size_t>(rows * outf));
                    transpose<T>(g, gt.data(), rows, outf);
                    gemm<T>(gt.data(), x->value.data<T>(), w->ensure_grad().data<T>(), outf, rows,
                            in, true);
                }
                if (bias && bias->requires_grad) {
                    T* gb = bias->ensure_grad().data<T>();
                    for (long j = 0; j < outf; ++j) {
                        double acc = 0.0;
                        for (long r = 0; r < rows; ++r) acc += static_cast<double>(g[r * outf + j]);
                        gb[j] += static_cast<T>(acc);
                    }
                }
            });
        };
    return out;
}

NodePtr bmm(const NodePtr& a, const NodePtr& b, bool transpose_b) {
    if (a->value.rank() != 3 || b->value.rank() != 3 || a->dim(0) != b->dim(0))
        throw std::invalid_argument("bmm: bad shapes");
    long g = a->dim(0), m = a->dim(1), k = a->dim(2);
    long n = transpose_b ? b->dim(1) : b->dim(2);
    long bk = transpose_b ? b->dim(2) : b->dim(1);
    if (bk != k) throw std::invalid_argument("bmm: inner dimension mismatch");
    Tensor y({g, m, n}, a->dtype());
    dispatch_dtype(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> scratch;
        if (transpose_b) scratch.resize(static_cast<std::size_t>(k * n));
        for (long i = 0; i < g; ++i) {
            const T* pa = a->value.data<T>() + i * m * k;
            const T* pb = b->value.data<T>() + i * (transpose_b ? n * k : k * n);
            T* py = y.data<T>() + i * m * n;
            if (transpose_b) {
                transpose<T>(pb, scratch.data(), n, k);
                gemm<T>(pa, scratch.data(), py, m, k, n);
            } else {
                gemm<T>(pa, pb, py, m, k, n);
            }
        }
    });
    auto out = make_node(std::move(y), {a, b});
    if (out->requires_grad)
        out->backward_fn = [a, b, transpose_b, g, m, k, n](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                for (long i = 0; i < g; ++i) {
                    const T* gy = self.grad.data<T>() + i * m * n;
                    const T* pa = a->value.data<T>() + i * m * k;
                    const T* pb = b->value.data<T>() + i * (transpose_b ? n * k : k * n);
                    if (a->requires_grad) {
                        T* ga = a->ensure_grad().data<T>() + i * m * k;
                        if (transpose_b) {
                            // dA = dC * B  ([m,n] x [n,k])
                            gemm<T>(gy, pb, ga, m, n, k, true);
                        } else {
                            std::vector<T> bt(static_cast<std::size_t>(k * n));
                            transpose<T>(pb, bt.data(), k, n);
                            gemm<T>(gy, bt.data(), ga, m, n, k, true);
                        }
                    }
                    if (b->requires_grad) {
                        T* gb = b->ensure_grad().data<T>() + i * (transpose_b ? n * k : k * n);
                        std::vector<T> t(static_cast<std::size_t>(m * (transpose_b ? n : k)));
                        if (transpose_b) {
                            // dB = dC^T * A  ([n,m] x [m,k])
                            std::vector<T> gt(static_cast<std::size_t>(m * n));
                            transpose<T>(gy, gt.data(), m, n);
                            gemm<T>(gt.data(), pa, gb, n, m, k, true);
                        } else {
                            // dB = A^T * dC
                            std::vector<T> at(static_cast<std::size_t>(m * k));
                            transpose<T>(pa, at.data(), m, k);
                            gemm<T>(at.data(), gy, gb, k, m, n, true);
                        }
                    }
                }
            });
        };
    return out;
}

NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& bias, long stride, long pad) {
    if (x->value.rank() != 4 || w->value.rank() != 4)
        throw std::invalid_argument("conv2d: bad ranks");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    long bs = x->dim(0), c = x->dim(1), h = x->dim(2), wd = x->dim(3);
    long o = w->dim(0), wc = w->dim(1), kh = w->dim(2), kw = w->dim(3);
    if (wc != c)
        throw std::invalid_argument("conv2d: channel mismatch input " + std::to_string(c) +
                                    " vs weight " + std::to_string(wc));
    if (bias && (bias->value.rank() != 1 || bias->shape()[0] != o))
        throw std::invalid_argument("conv2d: bad bias shape");
    long oh = (h + 2 * pad - kh) / stride + 1;
    long ow = (wd + 2 * pad - kw) / stride + 1;
    long ck = c * kh * kw;
    Tensor y({bs, o, oh, ow}, x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> cols(static_cast<std::size_t>(ck * oh * ow));
        for (long i = 0; i < bs; ++i) {
            im2col<T>(x->value.data<T>() + i * c * h * wd, cols.data(), c, h, wd, kh, kw, stride,
                      pad, oh, ow);
            T* py = y.data<T>() + i * o * oh * ow;
            gemm<T>(w->value.data<T>(), cols.data(), py, o, ck, oh * ow);
            if (bias) {
                const T* pb = bias->value.data<T>();
                for (long ch = 0; ch < o; ++ch) {
                    const T bv = pb[ch];
                    T* dst = py + ch * oh * ow;
                    for (long p = 0; p < oh * ow; ++p) dst[p] += bv;
                }
            }
        }
    });
    auto out = make_node(std::move(y), bias ? std::vector<NodePtr>{x, w, bias}
                                            : std::vector<NodePtr>{x, w});
    if (out->requires_grad)
        out->backward_fn = [x, w, bias, stride, pad, bs, c, h, wd, o, kh, kw, oh, ow,
                            ck](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                std::vector<T> cols(static_cast<std::size_t>(ck * oh * ow));
                std::vector<T> wt;
                if (x->requires_grad) {
                    wt.resize(static_cast<std::size_t>(ck * o));
                    transpose<T>(w->value.data<T>(), wt.data(), o, ck);
                }
                std::vector<T> colst(static_cast<std::size_t>(ck * oh * ow));
                for (long i = 0; i < bs; ++i) {
                    const T* gy = self.grad.data<T>() + i * o * oh * ow;
                    if (w->requires_grad || x->requires_grad)
                        im2col<T>(x->value.data<T>() + i * c * h * wd, cols.data(), c, h, wd, kh,
                                  kw, stride, pad, oh, ow);
                    if (w->requires_grad) {
                        // dW += dY * cols^T
                        transpose<T>(cols.data(), colst.data(), ck, oh * ow);
                        gemm<T>(gy, colst.data(), w->ensure_grad().data<T>(), o, oh * ow, ck,
                                true);
                    }
                    if (x->requires_grad) {
                        // dCols = W^T * dY, then scatter back.
                        std::vector<T> dcols(static_cast<std::size_t>(ck * oh * ow));
                        gemm<T>(wt.data(), gy, dcols.data(), ck, o, oh * ow);
                        col2im_add<T>(dcols.data(), x->ensure_grad().data<T>() + i * c * h * wd, c,
                                      h, wd, kh, kw, stride, pad, oh, ow);
                    }
                    if (bias && bias->requires_grad) {
                        T* gb = bias->ensure_grad().data<T>();
                        for (long ch = 0; ch < o; ++ch) {
                            double acc = 0.0;
                            const T* src = gy + ch * oh * ow;
                            for (long p = 0; p < oh * ow; ++p) acc += static_cast<double>(src[p]);
                            gb[ch] += static_cast<T>(acc);
                        }
                    }
                }
            });
        };
    return out;
}

NodePtr upsample_nearest2x(const NodePtr& x) {
    if (x->value.rank() != 4) throw std::invalid_argument("upsample_nearest2x: rank must be 4");
    long bs = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    Tensor y({bs, c, 2 * h, 2 * w}, x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* py = y.data<T>();
        for (long bc = 0; bc < bs * c; ++bc) {
            const T* src = px + bc * h * w;
            T* dst = py + bc * 4 * h * w;
            for (long i = 0; i < h; ++i)
                for (long j = 0; j < w; ++j) {
                    T v = src[i * w + j];
                    T* d = dst + (2 * i) * (2 * w) + 2 * j;
                    d[0] = v;
                    d[1] = v;
                    d[2 * w] = v;
                    d[2 * w + 1] = v;
                }
        }
    });
    auto out = make_node(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x, bs, c, h, w](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                T* gx = x->ensure_grad().data<T>();
                for (long bc = 0; bc < bs * c; ++bc) {
                    const T* src = g + bc * 4 * h * w;
                    T* dst = gx + bc * h * w;
                    for (long i = 0; i < h; ++i)
                        for (long j = 0; j < w; ++j) {
                            const T* s = src + (2 * i) * (2 * w) + 2 * j;
                            dst[i * w + j] += s[0] + s[1] + s[2 * w] + s[2 * w + 1];
                        }
                }
            });
        };
    return out;
}

NodePtr group_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, long groups,
                   double eps) {
    if (x->value.rank() != 4) throw std::invalid_argument("group_norm: rank must be 4");
    long bs = x->dim(0), c = x->dim(1), hw = x->dim(2) * x->dim(3);
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    if (gamma->numel() != c || beta->numel() != c)
        throw std::invalid_argument("group_norm: affine shape mismatch");
    long cg = c / groups;
    long gsize = cg * hw;
    Tensor y(x->shape(), x->dtype());
    Tensor xhat(x->shape(), x->dtype());
    Tensor inv_std({bs * groups}, Dtype::F64);
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        const T* pg = gamma->value.data<T>();
        const T* pb = beta->value.data<T>();
        T* py = y.data<T>();
        T* ph = xhat.data<T>();
        double* pis = inv_std.data<double>();
        for (long b = 0; b < bs; ++b)
            for (long g = 0; g < groups; ++g) {
                const T* src = px + (b * c + g * cg) * hw;
                double mean = 0.0;
                for (long i = 0; i < gsize; ++i) mean += static_cast<double>(src[i]);
                mean /= static_cast<double>(gsize);
                double var = 0.0;
                for (long i = 0; i < gsize; ++i) {
                    double d = static_cast<double>(src[i]) - mean;
                    var += d * d;
                }
                var /= static_cast<double>(gsize);
                double is = 1.0 / std::sqrt(var + eps);
                pis[b * groups + g] = is;
                T* hdst = ph + (b * c + g * cg) * hw;
                T* ydst = py + (b * c + g * cg) * hw;
                for (long ci = 0; ci < cg; ++ci) {
                    const T gma = pg[g * cg + ci];
                    const T bta = pb[g * cg + ci];
                    for (long p = 0; p < hw; ++p) {
                        T hval = static_cast<T>((static_cast<double>(src[ci * hw + p]) - mean) * is);
                        hdst[ci * hw + p] = hval;
                        ydst[ci * hw + p] = gma * hval + bta;
                    }
                }
            }
    });
    auto out = make_node(std::move(y), {x, gamma, beta});
    if (out->requires_grad) {
        auto xhat_t = std::make_shared<Tensor>(std::move(xhat));
        auto inv_std_t = std::make_shared<Tensor>(std::move(inv_std));
        out->backward_fn = [x, gamma, beta, groups, bs, c, hw, cg, gsize, xhat_t,
                            inv_std_t](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                const T* ph = xhat_t->data<T>();
                const double* pis = inv_std_t->data<double>();
                const T* pg = gamma->value.data<T>();
                if (gamma->requires_grad || beta->requires_grad) {
                    T* ggam = gamma->requires_grad ? gamma->ensure_grad().data<T>() : nullptr;
                    T* gbet = beta->requires_grad ? beta->ensure_grad().data<T>() : nullptr;
                    for (long ch = 0; ch < c; ++ch) {
                        double accg = 0.0, accb = 0.0;
                        for (long b = 0; b < bs; ++b) {
                            const T* gyr = g + (b * c + ch) * hw;
                            const T* hr = ph + (b * c + ch) * hw;
                            for (long p = 0; p < hw; ++p) {
                                accg += static_cast<double>(gyr[p]) * static_cast<double>(hr[p]);
                                accb += static_cast<double>(gyr[p]);
                            }
                        }
                        if (ggam) ggam[ch] += static_cast<T>(accg);
                        if (gbet) gbet[ch] += static_cast<T>(accb);
                    }
                }
                if (x->requires_grad) {
                    T* gx = x->ensure_grad().data<T>();
                    for (long b = 0; b < bs; ++b)
                        for (long gi = 0; gi < groups; ++gi) {
                            const double is = pis[b * groups + gi];
                            double sum_dh = 0.0, sum_dh_h = 0.0;
                            for (long ci = 0; ci < cg; ++ci) {
                                const T gma = pg[gi * cg + ci];
                                const T* gyr = g + (b * c + gi * cg + ci) * hw;
                                const T* hr = ph + (b * c + gi * cg + ci) * hw;
                                for (long p = 0; p < hw; ++p) {
                                    double dh = static_cast<double>(gyr[p]) * static_cast<double>(gma);
                                    sum_dh += dh;
                                    sum_dh_h += dh * static_cast<double>(hr[p]);
                                }
                            }
                            const double mean_dh = sum_dh / static_cast<double>(gsize);
                            const double mean_dh_h = sum_dh_h / static_cast<double>(gsize);
                            for (long ci = 0; ci < cg; ++ci) {
                                const T gma = pg[gi * cg + ci];
                                const T* gyr = g + (b * c + gi * cg + ci) * hw;
                                const T* hr = ph + (b * c + gi * cg + ci) * hw;
                                T* gxr = gx + (b * c + gi * cg + ci) * hw;
                                for (long p = 0; p < hw; ++p) {
                                    double dh = static_cast<double>(gyr[p]) * static_cast<double>(gma);
                                    double v = is * (dh - mean_dh -
                                                     static_cast<double>(hr[p]) * mean_dh_h);
                                    gxr[p] += static_cast<T>(v);
                                }
                            }
                        }
                }
            });
        };
    }
    return out;
}

NodePtr layer_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps) {
    long d = x->shape().back();
    if (gamma->numel() != d || beta->numel() != d)
        throw std::invalid_argument("layer_norm: affine shape mismatch");
    long rows = x->numel() / d;
    Tensor y(x->shape(), x->dtype());
    Tensor xhat(x->shape(), x->dtype());
    Tensor inv_std({rows}, Dtype::F64);
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        const T* pg = gamma->value.data<T>();
        const T* pb = beta->value.data<T>();
        T* py = y.data<T>();
        T* ph = xhat.data<T>();
        double* pis = inv_std.data<double>();
        for (long r = 0; r < rows; ++r) {
            const T* src = px + r * d;
            double mean = 0.0;
            for (long i = 0; i < d; ++i) mean += static_cast<double>(src[i]);
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (long i = 0; i < d; ++i) {
                double df = static_cast<double>(src[i]) - mean;
                var += df * df;
            }
            var /= static_cast<double>(d);
            double is = 1.0 / std::sqrt(var + eps);
            pis[r] = is;
            for (long i = 0; i < d; ++i) {
                T h = static_cast<T>((static_cast<double>(src[i]) - mean) * is);
                ph[r * d + i] = h;
                py[r * d + i] = pg[i] * h + pb[i];
            }
        }
    });
    auto out = make_node(std::move(y), {x, gamma, beta});
    if (out->requires_grad) {
        auto xhat_t = std::make_shared<Tensor>(std::move(xhat));
        auto inv_std_t = std::make_shared<Tensor>(std::move(inv_std));
        out->backward_fn = [x, gamma, beta, rows, d, xhat_t, inv_std_t](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                const T* ph = xhat_t->data<T>();
                const double* pis = inv_std_t->data<double>();
                const T* pg = gamma->value.data<T>();
                if (gamma->requires_grad || beta->requires_grad) {
                    T* ggam = gamma->requires_grad ? gamma->ensure_grad().data<T>() : nullptr;
                    T* gbet = beta->requires_grad ? beta->ensure_grad().data<T>() : nullptr;
                    for (long i = 0; i < d; ++i) {
                        double accg = 0.0, accb = 0.0;
                        for (long r = 0; r < rows; ++r) {
                            accg += static_cast<double>(g[r * d + i]) *
                                    static_cast<double>(ph[r * d + i]);
                            accb += static_cast<double>(g[r * d + i]);
                        }
                        if (ggam) ggam[i] += static_cast<T>(accg);
                        if (gbet) gbet[i] += static_cast<T>(accb);
                    }
                }
                if (x->requires_grad) {
                    T* gx = x->ensure_grad().data<T>();
                    for (long r = 0; r < rows; ++r) {
                        const double is = pis[r];
                        double sum_dh = 0.0, sum_dh_h = 0.0;
                        for (long i = 0; i < d; ++i) {
                            double dh = static_cast<double>(g[r * d + i]) *
                                        static_cast<double>(pg[i]);
                            sum_dh += dh;
                            sum_dh_h += dh * static_cast<double>(ph[r * d + i]);
                        }
                        const double mean_dh = sum_dh / static_cast<double>(d);
                        const double mean_dh_h = sum_dh_h / static_cast<double>(d);
                        for (long i = 0; i < d; ++i) {
                            double dh = static_cast<double>(g[r * d + i]) *
                                        static_cast<double>(pg[i]);
                            gx[r * d + i] += static_cast<T>(
                                is * (dh - mean_dh - static_cast<double>(ph[r * d + i]) * mean_dh_h));
                        }
                    }
                }
            });
        };
    }
    return out;
}

NodePtr softmax_lastdim(const NodePtr& x) {
    long d = x->shape().back();
    long rows = x->numel() / d;
    Tensor y(x->shape(), x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* py = y.data<T>();
        for (long r = 0; r < rows; ++r) {
            const T* src = px + r * d;
            T* dst = py + r * d;
            T mx = src[0];
            for (long i = 1; i < d; ++i) mx = std::max(mx, src[i]);
            double sum = 0.0;
            for (long i = 0; i < d; ++i) {
                T e = std::exp(src[i] - mx);
                dst[i] = e;
                sum += static_cast<double>(e);
            }
            const T inv = static_cast<T>(1.0 / sum);
            for (long i = 0; i < d; ++i) dst[i] *= inv;
        }
    });
    auto out = make_node(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x, rows, d](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                const T* py = self.value.data<T>();
                T* gx = x->ensure_grad().data<T>();
                for (long r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (long i = 0; i < d; ++i)
                        dot += static_cast<double>(g[r * d + i]) *
                               static_cast<double>(py[r * d + i]);
                    for (long i = 0; i < d; ++i)
                        gx[r * d + i] += static_cast<T>(
                            static_cast<double>(py[r * d + i]) *
                            (static_cast<double>(g[r * d + i]) - dot));
                }
            });
        };
    return out;
}

NodePtr reshape(const NodePtr& x, std::vector<long> shape) {
    Tensor y = x->value.reshaped(shape);
    auto out = make_node(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                axpy(T(1), self.grad.data<T>(), x->ensure_grad().data<T>(), self.numel());
            });
        };
    return out;
}

namespace {

std::vector<long> permute_shape(const std::vector<long>& shape, const std::vector<int>& dims) {
    std::vector<long> out(shape.size());
    for (std::size_t i = 0; i < dims.size(); ++i) out[i] = shape[static_cast<std::size_t>(dims[i])];
    return out;
}

template <typename T>
void permute_copy(const T* src, T* dst, const std::vector<long>& in_shape,
                  const std::vector<int>& dims) {
    const int r = static_cast<int>(in_shape.size());
    long in_strides[4] = {0, 0, 0, 0};
    long stride = 1;
    for (int i = r - 1; i >= 0; --i) {
        in_strides[i] = stride;
        stride *= in_shape[static_cast<std::size_t>(i)];
    }
    std::vector<long> out_shape = permute_shape(in_shape, dims);
    long os[4] = {1, 1, 1, 1};
    long is[4] = {0, 0, 0, 0};
    for (int i = 0; i < r; ++i) {
        os[i] = out_shape[static_cast<std::size_t>(i)];
        is[i] = in_strides[dims[static_cast<std::size_t>(i)]];
    }
    for (int i = r; i < 4; ++i) {
        os[i] = 1;
        is[i] = 0;
    }
    long idx = 0;
    for (long a = 0; a < os[0]; ++a)
        for (long b = 0; b < os[1]; ++b)
            for (long c = 0; c < os[2]; ++c) {
                const T* base = src + a * is[0] + b * is[1] + c * is[2];
                for (long dd = 0; dd < os[3]; ++dd) dst[idx++] = base[dd * is[3]];
            }
}

}  // namespace

NodePtr permute(const NodePtr& x, std::vector<int> dims) {
    const int r = x->value.rank();
    if (r > 4 || static_cast<int>(dims.size()) != r)
        throw std::invalid_argument("permute: rank must be <= 4 and match dims");
    Tensor y(permute_shape(x->shape(), dims), x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        permute_copy<T>(x->value.data<T>(), y.data<T>(), x->shape(), dims);
    });
    auto out = make_node(std::move(y), {x});
    if (out->requires_grad) {
        std::vector<int> inv(dims.size());
        for (std::size_t i = 0; i < dims.size(); ++i) inv[static_cast<std::size_t>(dims[i])] =
            static_cast<int>(i);
        out->backward_fn = [x, inv](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                Tensor tmp(x->shape(), self.dtype());
                permute_copy<T>(self.grad.data<T>(), tmp.data<T>(), self.shape(), inv);
                axpy(T(1), tmp.data<T>(), x->ensure_grad().data<T>(), tmp.numel());
            });
        };
    }
    return out;
}

NodePtr concat_channels(const NodePtr& a, const NodePtr& b) {
    if (a->value.rank() != 4 || b->value.rank() != 4)
        throw std::invalid_argument("concat_channels: rank must be 4");
    if (a->dim(0) != b->dim(0) || a->dim(2) != b->dim(2) || a->dim(3) != b->dim(3))
        throw std::invalid_argument("concat_channels: non-channel dims differ: " +
                                    a->value.shape_str() + " vs " + b->value.shape_str());
    long bs = a->dim(0), ca = a->dim(1), cb = b->dim(1), hw = a->dim(2) * a->dim(3);
    Tensor y({bs, ca + cb, a->dim(2), a->dim(3)}, a->dtype());
    dispatch_dtype(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a->value.data<T>();
        const T* pb = b->value.data<T>();
        T* py = y.data<T>();
        for (long i = 0; i < bs; ++i) {
            std::memcpy(py + i * (ca + cb) * hw, pa + i * ca * hw,
                        sizeof(T) * static_cast<std::size_t>(ca * hw));
            std::memcpy(py + i * (ca + cb) * hw + ca * hw, pb + i * cb * hw,
                        sizeof(T) * static_cast<std::size_t>(cb * hw));
        }
    });
    auto out = make_node(std::move(y), {a, b});
    if (out->requires_grad)
        out->backward_fn = [a, b, bs, ca, cb, hw](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                if (a->requires_grad) {
                    T* ga = a->ensure_grad().data<T>();
                    for (long i = 0; i < bs; ++i)
                        axpy(T(1), g + i * (ca + cb) * hw, ga + i * ca * hw, ca * hw);
                }
                if (b->requires_grad) {
                    T* gb = b->ensure_grad().data<T>();
                    for (long i = 0; i < bs; ++i)
                        axpy(T(1), g + i * (ca + cb) * hw + ca * hw, gb + i * cb * hw, cb * hw);
                }
            });
        };
    return out;
}

NodePtr slice_lastdim(const NodePtr& x, long start, long len) {
    long d = x->shape().back();
    if (start < 0 || len <= 0 || start + len > d)
        throw std::invalid_argument("slice_lastdim: out of range");
    long rows = x->numel() / d;
    std::vector<long> shape = x->shape();
    shape.back() = len;
    Tensor y(shape, x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* py = y.data<T>();
        for (long r = 0; r < rows; ++r)
            std::memcpy(py + r * len, px + r * d + start, sizeof(T) * static_cast<std::size_t>(len));
    });
    auto out = make_node(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x, start, len, d, rows](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                T* gx = x->ensure_grad().data<T>();
                for (long r = 0; r < rows; ++r)
                    axpy(T(1), g + r * len, gx + r * d + start, len);
            });
        };
    return out;
}

NodePtr embedding(const NodePtr& table, const std::vector<long>& ids) {
    if (table->value.rank() != 2) throw std::invalid_argument("embedding: table must be 2-D");
    long v = table->dim(0), d = table->dim(1);
    for (long id : ids)
        if (id < 0 || id >= v)
            throw std::invalid_argument("embedding: token id " + std::to_string(id) +
                                        " out of range [0," + std::to_string(v) + ")");
    long n = static_cast<long>(ids.size());
    Tensor y({n, d}, table->dtype());
    dispatch_dtype(table->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pt = table->value.data<T>();
        T* py = y.data<T>();
        for (long i = 0; i < n; ++i)
            std::memcpy(py + i * d, pt + ids[static_cast<std::size_t>(i)] * d,
                        sizeof(T) * static_cast<std::size_t>(d));
    });
    auto out = make_node(std::move(y), {table});
    if (out->requires_grad)
        out->backward_fn = [table, ids, d](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = self.grad.data<T>();
                T* gt = table->ensure_grad().data<T>();
                for (std::size_t i = 0; i < ids.size(); ++i)
                    axpy(T(1), g + static_cast<long>(i) * d, gt + ids[i] * d, d);
            });
        };
    return out;
}

namespace {

NodePtr squared_error_reduce(const NodePtr& a, const NodePtr& b, bool mean) {
    check_same_shape(a, b, "mse");
    long n = a->numel();
    double denom = mean ? static_cast<double>(n) : 1.0;
    Tensor y({1}, a->dtype());
    dispatch_dtype(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a->value.data<T>();
        const T* pb = b->value.data<T>();
        double acc = 0.0;
        for (long i = 0; i < n; ++i) {
            double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
            acc += d * d;
        }
        y.set(0, acc / denom);
    });
    auto out = make_node(std::move(y), {a, b});
    if (out->requires_grad)
        out->backward_fn = [a, b, n, denom](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T g = self.grad.data<T>()[0];
                const T coef = static_cast<T>(2.0 / denom) * g;
                const T* pa = a->value.data<T>();
                const T* pb = b->value.data<T>();
                if (a->requires_grad) {
                    T* ga = a->ensure_grad().data<T>();
                    for (long i = 0; i < n; ++i) ga[i] += coef * (pa[i] - pb[i]);
                }
                if (b->requires_grad) {
                    T* gb = b->ensure_grad().data<T>();
                    for (long i = 0; i < n; ++i) gb[i] -= coef * (pa[i] - pb[i]);
                }
            });
        };
    return out;
}

}  // namespace

NodePtr mse(const NodePtr& a, const NodePtr& b) { return squared_error_reduce(a, b, true); }

NodePtr mse_sum(const NodePtr& a, const NodePtr& b) { return squared_error_reduce(a, b, false); }

NodePtr mean_all(const NodePtr& x) {
    long n = x->numel();
    Tensor y({1}, x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        double acc = 0.0;
        for (long i = 0; i < n; ++i) acc += static_cast<double>(px[i]);
        y.set(0, acc / static_cast<double>(n));
    });
    auto out = make_node(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x, n](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T coef = self.grad.data<T>()[0] / static_cast<T>(n);
                T* gx = x->ensure_grad().data<T>();
                for (long i = 0; i < n; ++i) gx[i] += coef;
            });
        };
    return out;
}

NodePtr sum_all(const NodePtr& x) {
    long n = x->numel();
    Tensor y({1}, x->dtype());
    dispatch_dtype(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        double acc = 0.0;
        for (long i = 0; i < n; ++i) acc += static_cast<double>(px[i]);
        y.set(0, acc);
    });
    auto out = make_node(std::move(y), {x});
    if (out->requires_grad)
        out->backward_fn = [x, n](Node& self) {
            dispatch_dtype(self.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T g = self.grad.data<T>()[0];
                T* gx = x->ensure_grad().data<T>();
                for (long i = 0; i < n; ++i) gx[i] += g;
            });
        };
    return out;
}

}  // namespace ops
}  // namespace distillforge
