#pragma once

// Reverse-mode autodiff over small dense tensors. Each op allocates a graph
// node holding the forward value and a closure that routes the node's gradient
// to its parents. Graphs are built per training step and discarded after the
// parameter update. Single-threaded by design: evaluation order is fixed, so
// results are bitwise reproducible.

#include <functional>
#include <memory>
#include <unordered_set>

#include "whismm/tensor.hpp"

namespace whismm::ag {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
    }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return n;
}

template <typename T>
NodePtr<T> leaf(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return n;
}

template <typename T>
NodePtr<T> make_op(Tensor<T> v, std::vector<NodePtr<T>> parents,
                   std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->parents = std::move(parents);
    for (auto& p : n->parents) {
        if (p->requires_grad) { n->requires_grad = true; break; }
    }
    if (n->requires_grad) n->backward_fn = std::move(backward);
    return n;
}

// ---------------------------------------------------------------------------
// gemm on raw tensors: C = alpha * op(A) * op(B) + beta * C
// Loop orders chosen so the innermost index walks contiguous memory.
// ---------------------------------------------------------------------------
template <typename T>
void gemm(bool ta, bool tb, T alpha, const Tensor<T>& A, const Tensor<T>& B, T beta, Tensor<T>& C) {
    size_t m = ta ? A.cols() : A.rows();
    size_t k = ta ? A.rows() : A.cols();
    size_t kb = tb ? B.cols() : B.rows();
    size_t n = tb ? B.rows() : B.cols();
    require(k == kb, "gemm: inner dimensions mismatch");
    if (C.data.empty()) C = Tensor<T>::zeros({m, n});
    require(C.rows() == m && C.cols() == n, "gemm: output shape mismatch");
    if (beta == T(0)) std::fill(C.data.begin(), C.data.end(), T(0));
    else if (beta != T(1))
        for (auto& c : C.data) c *= beta;

    const T* a = A.data.data();
    const T* b = B.data.data();
    T* c = C.data.data();
    if (!ta && !tb) {
        for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
                T av = alpha * a[i * k + p];
                const T* brow = b + p * n;
                T* crow = c + i * n;
                for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    } else if (!ta && tb) {
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) {
                const T* arow = a + i * k;
                const T* brow = b + j * k;
                T s = 0;
                for (size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                c[i * n + j] += alpha * s;
            }
    } else if (ta && !tb) {
        for (size_t p = 0; p < k; ++p)
            for (size_t i = 0; i < m; ++i) {
                T av = alpha * a[p * m + i];
                const T* brow = b + p * n;
                T* crow = c + i * n;
                for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    } else {
        fail("gemm: transposed/transposed not supported");
    }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> add(NodePtr<T> a, NodePtr<T> b) {
    require(a->value.shape == b->value.shape, "add: shape mismatch");
    Tensor<T> v = a->value;
    for (size_t i = 0; i < v.numel(); ++i) v.data[i] += b->value.data[i];
    return make_op<T>(std::move(v), {a, b}, [](Node<T>& n) {
        for (auto& p : n.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) p->grad.data[i] += n.grad.data[i];
        }
    });
}

template <typename T>
NodePtr<T> sub(NodePtr<T> a, NodePtr<T> b) {
    require(a->value.shape == b->value.shape, "sub: shape mismatch");
    Tensor<T> v = a->value;
    for (size_t i = 0; i < v.numel(); ++i) v.data[i] -= b->value.data[i];
    return make_op<T>(std::move(v), {a, b}, [](Node<T>& n) {
        auto& a_ = n.parents[0];
        auto& b_ = n.parents[1];
        if (a_->requires_grad) {
            a_->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) a_->grad.data[i] += n.grad.data[i];
        }
        if (b_->requires_grad) {
            b_->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) b_->grad.data[i] -= n.grad.data[i];
        }
    });
}

template <typename T>
NodePtr<T> mul(NodePtr<T> a, NodePtr<T> b) {
    require(a->value.shape == b->value.shape, "mul: shape mismatch");
    Tensor<T> v = a->value;
    for (size_t i = 0; i < v.numel(); ++i) v.data[i] *= b->value.data[i];
    return make_op<T>(std::move(v), {a, b}, [](Node<T>& n) {
        auto& a_ = n.parents[0];
        auto& b_ = n.parents[1];
        if (a_->requires_grad) {
            a_->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i)
                a_->grad.data[i] += n.grad.data[i] * b_->value.data[i];
        }
        if (b_->requires_grad) {
            b_->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i)
                b_->grad.data[i] += n.grad.data[i] * a_->value.data[i];
        }
    });
}

template <typename T>
NodePtr<T> scale(NodePtr<T> a, double c) {
    Tensor<T> v = a->value;
    for (auto& x : v.data) x *= static_cast<T>(c);
    return make_op<T>(std::move(v), {a}, [c](Node<T>& n) {
        auto& a_ = n.parents[0];
        a_->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i)
            a_->grad.data[i] += n.grad.data[i] * static_cast<T>(c);
    });
}

template <typename T>
NodePtr<T> neg(NodePtr<T> a) { return scale(a, -1.0); }

// Sum of k same-shaped tensors in one node (keeps batch reductions shallow).
template <typename T>
NodePtr<T> add_many(std::vector<NodePtr<T>> xs) {
    require(!xs.empty(), "add_many: empty input");
    Tensor<T> v = xs[0]->value;
    for (size_t j = 1; j < xs.size(); ++j) {
        require(xs[j]->value.shape == v.shape, "add_many: shape mismatch");
        for (size_t i = 0; i < v.numel(); ++i) v.data[i] += xs[j]->value.data[i];
    }
    return make_op<T>(std::move(v), std::move(xs), [](Node<T>& n) {
        for (auto& p : n.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) p->grad.data[i] += n.grad.data[i];
        }
    });
}

// X (m x c) + v broadcast over rows; v has c elements.
template <typename T>
NodePtr<T> add_rowvec(NodePtr<T> x, NodePtr<T> v) {
    size_t c = x->value.cols();
    require(v->value.numel() == c, "add_rowvec: width mismatch");
    Tensor<T> out = x->value;
    for (size_t r = 0; r < out.rows(); ++r)
        for (size_t j = 0; j < c; ++j) out.at(r, j) += v->value.data[j];
    return make_op<T>(std::move(out), {x, v}, [c](Node<T>& n) {
        auto& x_ = n.parents[0];
        auto& v_ = n.parents[1];
        if (x_->requires_grad) {
            x_->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) x_->grad.data[i] += n.grad.data[i];
        }
        if (v_->requires_grad) {
            v_->ensure_grad();
            for (size_t r = 0; r < n.grad.rows(); ++r)
                for (size_t j = 0; j < c; ++j) v_->grad.data[j] += n.grad.at(r, j);
        }
    });
}

template <typename T>
NodePtr<T> matmul(NodePtr<T> a, NodePtr<T> b) {
    Tensor<T> v;
    gemm<T>(false, false, T(1), a->value, b->value, T(0), v);
    return make_op<T>(std::move(v), {a, b}, [](Node<T>& n) {
        auto& a_ = n.parents[0];
        auto& b_ = n.parents[1];
        if (a_->requires_grad) {
            a_->ensure_grad();
            gemm<T>(false, true, T(1), n.grad, b_->value, T(1), a_->grad);
        }
        if (b_->requires_grad) {
            b_->ensure_grad();
            gemm<T>(true, false, T(1), a_->value, n.grad, T(1), b_->grad);
        }
    });
}

// A * B^T
template <typename T>
NodePtr<T> matmul_nt(NodePtr<T> a, NodePtr<T> b) {
    Tensor<T> v;
    gemm<T>(false, true, T(1), a->value, b->value, T(0), v);
    return make_op<T>(std::move(v), {a, b}, [](Node<T>& n) {
        auto& a_ = n.parents[0];
        auto& b_ = n.parents[1];
        if (a_->requires_grad) {
            a_->ensure_grad();
            gemm<T>(false, false, T(1), n.grad, b_->value, T(1), a_->grad);
        }
        if (b_->requires_grad) {
            b_->ensure_grad();
            gemm<T>(true, false, T(1), n.grad, a_->value, T(1), b_->grad);
        }
    });
}

template <typename T>
NodePtr<T> transpose(NodePtr<T> a) {
    size_t m = a->value.rows(), c = a->value.cols();
    Tensor<T> v({c, m});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < c; ++j) v.at(j, i) = a->value.at(i, j);
    return make_op<T>(std::move(v), {a}, [m, c](Node<T>& n) {
        auto& a_ = n.parents[0];
        a_->ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < c; ++j) a_->grad.at(i, j) += n.grad.at(j, i);
    });
}

// x * W + b, with x (m x din), W (din x dout), b (dout)
template <typename T>
NodePtr<T> linear(NodePtr<T> x, NodePtr<T> w, NodePtr<T> b) {
    return add_rowvec(matmul(x, w), b);
}

template <typename T>
NodePtr<T> gelu(NodePtr<T> x) {
    static const double kInvSqrt2 = 0.7071067811865475244;
    static const double kInvSqrt2Pi = 0.3989422804014326779;
    Tensor<T> v = x->value;
    for (auto& e : v.data) {
        double xd = static_cast<double>(e);
        e = static_cast<T>(xd * 0.5 * (1.0 + std::erf(xd * kInvSqrt2)));
    }
    return make_op<T>(std::move(v), {x}, [](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            double xd = static_cast<double>(x_->value.data[i]);
            double phi = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
            x_->grad.data[i] += n.grad.data[i] * static_cast<T>(phi + xd * pdf);
        }
    });
}

template <typename T>
NodePtr<T> softplus(NodePtr<T> x) {
    Tensor<T> v = x->value;
    for (auto& e : v.data) {
        double xd = static_cast<double>(e);
        e = static_cast<T>(std::max(xd, 0.0) + std::log1p(std::exp(-std::abs(xd))));
    }
    return make_op<T>(std::move(v), {x}, [](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            double xd = static_cast<double>(x_->value.data[i]);
            double sig = 1.0 / (1.0 + std::exp(-xd));
            x_->grad.data[i] += n.grad.data[i] * static_cast<T>(sig);
        }
    });
}

// Per-row layer norm with learnable gain/bias.
template <typename T>
NodePtr<T> layer_norm(NodePtr<T> x, NodePtr<T> gain, NodePtr<T> bias, double eps = 1e-5) {
    size_t m = x->value.rows(), c = x->value.cols();
    require(gain->value.numel() == c && bias->value.numel() == c, "layer_norm: param width mismatch");
    Tensor<T> xhat({m, c});
    Tensor<T> inv_sigma({m});
    for (size_t r = 0; r < m; ++r) {
        double mu = 0;
        for (size_t j = 0; j < c; ++j) mu += x->value.at(r, j);
        mu /= static_cast<double>(c);
        double var = 0;
        for (size_t j = 0; j < c; ++j) {
            double d = x->value.at(r, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma.data[r] = static_cast<T>(is);
        for (size_t j = 0; j < c; ++j)
            xhat.at(r, j) = static_cast<T>((x->value.at(r, j) - mu) * is);
    }
    Tensor<T> out({m, c});
    for (size_t r = 0; r < m; ++r)
        for (size_t j = 0; j < c; ++j)
            out.at(r, j) = xhat.at(r, j) * gain->value.data[j] + bias->value.data[j];
    return make_op<T>(std::move(out), {x, gain, bias},
                      [m, c, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Node<T>& n) {
        auto& x_ = n.parents[0];
        auto& g_ = n.parents[1];
        auto& b_ = n.parents[2];
        if (g_->requires_grad) {
            g_->ensure_grad();
            for (size_t r = 0; r < m; ++r)
                for (size_t j = 0; j < c; ++j) g_->grad.data[j] += n.grad.at(r, j) * xhat.at(r, j);
        }
        if (b_->requires_grad) {
            b_->ensure_grad();
            for (size_t r = 0; r < m; ++r)
                for (size_t j = 0; j < c; ++j) b_->grad.data[j] += n.grad.at(r, j);
        }
        if (x_->requires_grad) {
            x_->ensure_grad();
            for (size_t r = 0; r < m; ++r) {
                double mean_dxhat = 0, mean_dxhat_xhat = 0;
                for (size_t j = 0; j < c; ++j) {
                    double dxh = static_cast<double>(n.grad.at(r, j)) * g_->value.data[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat.at(r, j);
                }
                mean_dxhat /= static_cast<double>(c);
                mean_dxhat_xhat /= static_cast<double>(c);
                for (size_t j = 0; j < c; ++j) {
                    double dxh = static_cast<double>(n.grad.at(r, j)) * g_->value.data[j];
                    x_->grad.at(r, j) += static_cast<T>(
                        inv_sigma.data[r] * (dxh - mean_dxhat - xhat.at(r, j) * mean_dxhat_xhat));
                }
            }
        }
    });
}

template <typename T>
NodePtr<T> softmax_rows(NodePtr<T> x) {
    size_t m = x->value.rows(), c = x->value.cols();
    Tensor<T> v({m, c});
    for (size_t r = 0; r < m; ++r) {
        double mx = -1e300;
        for (size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(x->value.at(r, j)));
        double z = 0;
        for (size_t j = 0; j < c; ++j) {
            double e = std::exp(static_cast<double>(x->value.at(r, j)) - mx);
            v.at(r, j) = static_cast<T>(e);
            z += e;
        }
        for (size_t j = 0; j < c; ++j) v.at(r, j) = static_cast<T>(v.at(r, j) / z);
    }
    return make_op<T>(std::move(v), {x}, [m, c](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (size_t r = 0; r < m; ++r) {
            double dotv = 0;
            for (size_t j = 0; j < c; ++j) dotv += static_cast<double>(n.grad.at(r, j)) * n.value.at(r, j);
            for (size_t j = 0; j < c; ++j)
                x_->grad.at(r, j) += static_cast<T>(n.value.at(r, j) *
                                                    (static_cast<double>(n.grad.at(r, j)) - dotv));
        }
    });
}

template <typename T>
NodePtr<T> log_softmax_rows(NodePtr<T> x) {
    size_t m = x->value.rows(), c = x->value.cols();
    Tensor<T> v({m, c});
    for (size_t r = 0; r < m; ++r) {
        double mx = -1e300;
        for (size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(x->value.at(r, j)));
        double z = 0;
        for (size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(x->value.at(r, j)) - mx);
        double lz = mx + std::log(z);
        for (size_t j = 0; j < c; ++j)
            v.at(r, j) = static_cast<T>(static_cast<double>(x->value.at(r, j)) - lz);
    }
    return make_op<T>(std::move(v), {x}, [m, c](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (size_t r = 0; r < m; ++r) {
            double gsum = 0;
            for (size_t j = 0; j < c; ++j) gsum += n.grad.at(r, j);
            for (size_t j = 0; j < c; ++j) {
                double p = std::exp(static_cast<double>(n.value.at(r, j)));
                x_->grad.at(r, j) += static_cast<T>(static_cast<double>(n.grad.at(r, j)) - p * gsum);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Indexing / assembly
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> row(NodePtr<T> x, size_t r) {
    size_t c = x->value.cols();
    require(r < x->value.rows(), "row: index out of range");
    Tensor<T> v({1, c});
    for (size_t j = 0; j < c; ++j) v.data[j] = x->value.at(r, j);
    return make_op<T>(std::move(v), {x}, [r, c](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (size_t j = 0; j < c; ++j) x_->grad.at(r, j) += n.grad.data[j];
    });
}

template <typename T>
NodePtr<T> rows(NodePtr<T> x, std::vector<size_t> idx) {
    size_t c = x->value.cols();
    Tensor<T> v({idx.size(), c});
    for (size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] < x->value.rows(), "rows: index out of range");
        for (size_t j = 0; j < c; ++j) v.at(i, j) = x->value.at(idx[i], j);
    }
    return make_op<T>(std::move(v), {x}, [idx = std::move(idx), c](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i)
            for (size_t j = 0; j < c; ++j) x_->grad.at(idx[i], j) += n.grad.at(i, j);
    });
}

template <typename T>
NodePtr<T> slice_rows(NodePtr<T> x, size_t begin, size_t end) {
    require(begin <= end && end <= x->value.rows(), "slice_rows: bad range");
    size_t c = x->value.cols();
    Tensor<T> v({end - begin, c});
    for (size_t i = begin; i < end; ++i)
        for (size_t j = 0; j < c; ++j) v.at(i - begin, j) = x->value.at(i, j);
    return make_op<T>(std::move(v), {x}, [begin, c](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (size_t i = 0; i < n.grad.rows(); ++i)
            for (size_t j = 0; j < c; ++j) x_->grad.at(begin + i, j) += n.grad.at(i, j);
    });
}

template <typename T>
NodePtr<T> slice_cols(NodePtr<T> x, size_t begin, size_t end) {
    require(begin <= end && end <= x->value.cols(), "slice_cols: bad range");
    size_t m = x->value.rows();
    Tensor<T> v({m, end - begin});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = begin; j < end; ++j) v.at(i, j - begin) = x->value.at(i, j);
    return make_op<T>(std::move(v), {x}, [begin, m](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n.grad.cols(); ++j) x_->grad.at(i, begin + j) += n.grad.at(i, j);
    });
}

template <typename T>
NodePtr<T> concat_rows(std::vector<NodePtr<T>> xs) {
    require(!xs.empty(), "concat_rows: empty input");
    size_t c = xs[0]->value.cols();
    size_t m = 0;
    for (auto& x : xs) {
        require(x->value.cols() == c, "concat_rows: width mismatch");
        m += x->value.rows();
    }
    Tensor<T> v({m, c});
    size_t r0 = 0;
    for (auto& x : xs) {
        for (size_t i = 0; i < x->value.rows(); ++i)
            for (size_t j = 0; j < c; ++j) v.at(r0 + i, j) = x->value.at(i, j);
        r0 += x->value.rows();
    }
    return make_op<T>(std::move(v), std::move(xs), [c](Node<T>& n) {
        size_t r0 = 0;
        for (auto& p : n.parents) {
            size_t pr = p->value.rows();
            if (p->requires_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < pr; ++i)
                    for (size_t j = 0; j < c; ++j) p->grad.at(i, j) += n.grad.at(r0 + i, j);
            }
            r0 += pr;
        }
    });
}

template <typename T>
NodePtr<T> concat_cols(std::vector<NodePtr<T>> xs) {
    require(!xs.empty(), "concat_cols: empty input");
    size_t m = xs[0]->value.rows();
    size_t c = 0;
    for (auto& x : xs) {
        require(x->value.rows() == m, "concat_cols: height mismatch");
        c += x->value.cols();
    }
    Tensor<T> v({m, c});
    size_t c0 = 0;
    for (auto& x : xs) {
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < x->value.cols(); ++j) v.at(i, c0 + j) = x->value.at(i, j);
        c0 += x->value.cols();
    }
    return make_op<T>(std::move(v), std::move(xs), [m](Node<T>& n) {
        size_t c0 = 0;
        for (auto& p : n.parents) {
            size_t pc = p->value.cols();
            if (p->requires_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < pc; ++j) p->grad.at(i, j) += n.grad.at(i, c0 + j);
            }
            c0 += pc;
        }
    });
}

// Scalars (shape {1}) stacked into a 1 x n row vector.
template <typename T>
NodePtr<T> stack_scalars(std::vector<NodePtr<T>> xs) {
    require(!xs.empty(), "stack_scalars: empty input");
    Tensor<T> v({size_t(1), xs.size()});
    for (size_t i = 0; i < xs.size(); ++i) {
        require(xs[i]->value.numel() == 1, "stack_scalars: non-scalar input");
        v.data[i] = xs[i]->value.data[0];
    }
    return make_op<T>(std::move(v), std::move(xs), [](Node<T>& n) {
        for (size_t i = 0; i < n.parents.size(); ++i) {
            auto& p = n.parents[i];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            p->grad.data[0] += n.grad.data[i];
        }
    });
}

// Rows at `positions` (sorted, unique) replaced by the single row `r`.
// Replaced rows route their gradient to r, the rest to x.
template <typename T>
NodePtr<T> replace_rows(NodePtr<T> x, std::vector<size_t> positions, NodePtr<T> r) {
    size_t c = x->value.cols();
    require(r->value.numel() == c, "replace_rows: replacement width mismatch");
    Tensor<T> v = x->value;
    for (size_t p : positions) {
        require(p < v.rows(), "replace_rows: position out of range");
        for (size_t j = 0; j < c; ++j) v.at(p, j) = r->value.data[j];
    }
    return make_op<T>(std::move(v), {x, r}, [positions = std::move(positions), c](Node<T>& n) {
        auto& x_ = n.parents[0];
        auto& r_ = n.parents[1];
        if (x_->requires_grad) {
            x_->ensure_grad();
            size_t pi = 0;
            for (size_t i = 0; i < n.grad.rows(); ++i) {
                if (pi < positions.size() && positions[pi] == i) { ++pi; continue; }
                for (size_t j = 0; j < c; ++j) x_->grad.at(i, j) += n.grad.at(i, j);
            }
        }
        if (r_->requires_grad) {
            r_->ensure_grad();
            for (size_t p : positions)
                for (size_t j = 0; j < c; ++j) r_->grad.data[j] += n.grad.at(p, j);
        }
    });
}

template <typename T>
NodePtr<T> take(NodePtr<T> x, size_t r, size_t c) {
    require(r < x->value.rows() && c < x->value.cols(), "take: index out of range");
    Tensor<T> v({1});
    v.data[0] = x->value.at(r, c);
    return make_op<T>(std::move(v), {x}, [r, c](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        x_->grad.at(r, c) += n.grad.data[0];
    });
}

// ---------------------------------------------------------------------------
// Reductions and scalar arithmetic
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> sum_all(NodePtr<T> x) {
    Tensor<T> v({1});
    double s = 0;
    for (T e : x->value.data) s += e;
    v.data[0] = static_cast<T>(s);
    return make_op<T>(std::move(v), {x}, [](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (auto& g : x_->grad.data) g += n.grad.data[0];
    });
}

template <typename T>
NodePtr<T> mean_all(NodePtr<T> x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x->value.numel()));
}

template <typename T>
NodePtr<T> dot(NodePtr<T> a, NodePtr<T> b) {
    require(a->value.numel() == b->value.numel(), "dot: length mismatch");
    Tensor<T> v({1});
    double s = 0;
    for (size_t i = 0; i < a->value.numel(); ++i)
        s += static_cast<double>(a->value.data[i]) * b->value.data[i];
    v.data[0] = static_cast<T>(s);
    return make_op<T>(std::move(v), {a, b}, [](Node<T>& n) {
        auto& a_ = n.parents[0];
        auto& b_ = n.parents[1];
        T g = n.grad.data[0];
        if (a_->requires_grad) {
            a_->ensure_grad();
            for (size_t i = 0; i < a_->grad.numel(); ++i) a_->grad.data[i] += g * b_->value.data[i];
        }
        if (b_->requires_grad) {
            b_->ensure_grad();
            for (size_t i = 0; i < b_->grad.numel(); ++i) b_->grad.data[i] += g * a_->value.data[i];
        }
    });
}

// cos(a, b) with an epsilon in the norm product denominator; finite for zero
// vectors, gradient guarded at vanishing norms.
template <typename T>
NodePtr<T> cosine(NodePtr<T> a, NodePtr<T> b, double eps = 1e-8) {
    require(a->value.numel() == b->value.numel(), "cosine: length mismatch");
    size_t n_el = a->value.numel();
    double s = 0, na2 = 0, nb2 = 0;
    for (size_t i = 0; i < n_el; ++i) {
        double av = a->value.data[i], bv = b->value.data[i];
        s += av * bv;
        na2 += av * av;
        nb2 += bv * bv;
    }
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    double denom = na * nb + eps;
    Tensor<T> v({1});
    v.data[0] = static_cast<T>(s / denom);
    return make_op<T>(std::move(v), {a, b}, [s, na, nb, denom](Node<T>& n) {
        auto& a_ = n.parents[0];
        auto& b_ = n.parents[1];
        double g = n.grad.data[0];
        double y = s / denom;
        if (a_->requires_grad) {
            a_->ensure_grad();
            double k = (na > 1e-12) ? y * nb / na / denom : 0.0;
            for (size_t i = 0; i < a_->grad.numel(); ++i)
                a_->grad.data[i] += static_cast<T>(
                    g * (b_->value.data[i] / denom - k * a_->value.data[i]));
        }
        if (b_->requires_grad) {
            b_->ensure_grad();
            double k = (nb > 1e-12) ? y * na / nb / denom : 0.0;
            for (size_t i = 0; i < b_->grad.numel(); ++i)
                b_->grad.data[i] += static_cast<T>(
                    g * (a_->value.data[i] / denom - k * b_->value.data[i]));
        }
    });
}

// Rows scaled to unit L2 norm (norm clamped away from zero).
template <typename T>
NodePtr<T> l2_normalize_rows(NodePtr<T> x, double eps = 1e-12) {
    size_t m = x->value.rows(), c = x->value.cols();
    Tensor<T> v({m, c});
    Tensor<T> inv_norm({m});
    for (size_t r = 0; r < m; ++r) {
        double n2 = 0;
        for (size_t j = 0; j < c; ++j) {
            double e = x->value.at(r, j);
            n2 += e * e;
        }
        double inv = 1.0 / std::max(std::sqrt(n2), eps);
        inv_norm.data[r] = static_cast<T>(inv);
        for (size_t j = 0; j < c; ++j) v.at(r, j) = static_cast<T>(x->value.at(r, j) * inv);
    }
    return make_op<T>(std::move(v), {x}, [m, c, inv_norm = std::move(inv_norm)](Node<T>& n) {
        auto& x_ = n.parents[0];
        x_->ensure_grad();
        for (size_t r = 0; r < m; ++r) {
            double ydotg = 0;
            for (size_t j = 0; j < c; ++j)
                ydotg += static_cast<double>(n.value.at(r, j)) * n.grad.at(r, j);
            for (size_t j = 0; j < c; ++j)
                x_->grad.at(r, j) += static_cast<T>(
                    inv_norm.data[r] * (static_cast<double>(n.grad.at(r, j)) -
                                        static_cast<double>(n.value.at(r, j)) * ydotg));
        }
    });
}

// Y = X / s with scalar node s.
template <typename T>
NodePtr<T> div_by_scalar(NodePtr<T> x, NodePtr<T> s) {
    require(s->value.numel() == 1, "div_by_scalar: s must be scalar");
    T sv = s->value.data[0];
    require(sv != T(0), "div_by_scalar: division by zero");
    Tensor<T> v = x->value;
    for (auto& e : v.data) e /= sv;
    return make_op<T>(std::move(v), {x, s}, [sv](Node<T>& n) {
        auto& x_ = n.parents[0];
        auto& s_ = n.parents[1];
        if (x_->requires_grad) {
            x_->ensure_grad();
            for (size_t i = 0; i < n.grad.numel(); ++i) x_->grad.data[i] += n.grad.data[i] / sv;
        }
        if (s_->requires_grad) {
            s_->ensure_grad();
            double acc = 0;
            for (size_t i = 0; i < n.grad.numel(); ++i)
                acc += static_cast<double>(n.grad.data[i]) * x_->value.data[i];
            s_->grad.data[0] += static_cast<T>(-acc / (static_cast<double>(sv) * sv));
        }
    });
}

// Detach: forwards the value, blocks the gradient.
template <typename T>
NodePtr<T> stop_grad(NodePtr<T> x) {
    return constant(x->value);
}

// ---------------------------------------------------------------------------
// 1-D convolution over frames: X (frames x in_ch), W (out_ch x in_ch x k),
// b (out_ch). TF-style SAME padding: out = ceil(frames / stride), left pad
// pad_total/2 (extra sample goes on the right).
// ---------------------------------------------------------------------------
template <typename T>
NodePtr<T> conv1d_same(NodePtr<T> x, NodePtr<T> w, NodePtr<T> b, size_t stride) {
    require(w->value.shape.size() == 3, "conv1d: weight must be rank 3");
    size_t frames = x->value.rows(), in_ch = x->value.cols();
    size_t out_ch = w->value.shape[0], w_in = w->value.shape[1], k = w->value.shape[2];
    require(w_in == in_ch, "conv1d: channel mismatch");
    require(b->value.numel() == out_ch, "conv1d: bias size mismatch");
    require(stride >= 1, "conv1d: stride must be >= 1");
    require(frames >= 1, "conv1d: empty input");
    size_t out_len = (frames + stride - 1) / stride;
    size_t span = (out_len - 1) * stride + k;
    size_t pad_total = span > frames ? span - frames : 0;
    size_t pad_left = pad_total / 2;

    Tensor<T> v({out_len, out_ch});
    const T* xd = x->value.data.data();
    const T* wd = w->value.data.data();
    for (size_t o = 0; o < out_len; ++o) {
        long start = static_cast<long>(o * stride) - static_cast<long>(pad_left);
        for (size_t oc = 0; oc < out_ch; ++oc) {
            double acc = b->value.data[oc];
            const T* wk = wd + oc * in_ch * k;
            for (size_t t = 0; t < k; ++t) {
                long fi = start + static_cast<long>(t);
                if (fi < 0 || fi >= static_cast<long>(frames)) continue;
                const T* xrow = xd + static_cast<size_t>(fi) * in_ch;
                for (size_t ic = 0; ic < in_ch; ++ic) acc += static_cast<double>(wk[ic * k + t]) * xrow[ic];
            }
            v.at(o, oc) = static_cast<T>(acc);
        }
    }
    return make_op<T>(std::move(v), {x, w, b},
                      [frames, in_ch, out_ch, k, stride, pad_left, out_len](Node<T>& n) {
        auto& x_ = n.parents[0];
        auto& w_ = n.parents[1];
        auto& b_ = n.parents[2];
        if (b_->requires_grad) {
            b_->ensure_grad();
            for (size_t o = 0; o < out_len; ++o)
                for (size_t oc = 0; oc < out_ch; ++oc) b_->grad.data[oc] += n.grad.at(o, oc);
        }
        if (w_->requires_grad) {
            w_->ensure_grad();
            for (size_t o = 0; o < out_len; ++o) {
                long start = static_cast<long>(o * stride) - static_cast<long>(pad_left);
                for (size_t t = 0; t < k; ++t) {
                    long fi = start + static_cast<long>(t);
                    if (fi < 0 || fi >= static_cast<long>(frames)) continue;
                    const T* xrow = x_->value.data.data() + static_cast<size_t>(fi) * in_ch;
                    for (size_t oc = 0; oc < out_ch; ++oc) {
                        T g = n.grad.at(o, oc);
                        if (g == T(0)) continue;
                        T* wg = w_->grad.data.data() + oc * in_ch * k;
                        for (size_t ic = 0; ic < in_ch; ++ic) wg[ic * k + t] += g * xrow[ic];
                    }
                }
            }
        }
        if (x_->requires_grad) {
            x_->ensure_grad();
            for (size_t o = 0; o < out_len; ++o) {
                long start = static_cast<long>(o * stride) - static_cast<long>(pad_left);
                for (size_t t = 0; t < k; ++t) {
                    long fi = start + static_cast<long>(t);
                    if (fi < 0 || fi >= static_cast<long>(frames)) continue;
                    T* xg = x_->grad.data.data() + static_cast<size_t>(fi) * in_ch;
                    for (size_t oc = 0; oc < out_ch; ++oc) {
                        T g = n.grad.at(o, oc);
                        if (g == T(0)) continue;
                        const T* wk = w_->value.data.data() + oc * in_ch * k;
                        for (size_t ic = 0; ic < in_ch; ++ic) xg[ic] += g * wk[ic * k + t];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Backward pass: reverse topological order from `root` (a scalar).
// ---------------------------------------------------------------------------
template <typename T>
void backward(const NodePtr<T>& root) {
    require(root->value.numel() == 1, "backward: root must be scalar");
    // Iterative post-order DFS.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (!node->requires_grad) {
            order.push_back(node);
            stack.pop_back();
            continue;
        }
        if (child < node->parents.size()) {
            Node<T>* next = node->parents[child].get();
            ++child;
            if (next->requires_grad && !visited.count(next)) {
                visited.insert(next);
                stack.push_back({next, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad.data[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn && !node->grad.data.empty()) node->backward_fn(*node);
    }
}

}  // namespace whismm::ag
