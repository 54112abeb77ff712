#include "mlfd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "mlfd/error.hpp"
#include "mlfd/rng.hpp"

namespace mlfd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void dim_error(const char* op, const std::string& detail) {
    throw DimensionError(std::string(op) + ": " + detail);
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) dim_error(op, "shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank)
        dim_error(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
}

/// Channel layout shared by bias_add and batchnorm: (N,C) or (N,C,H,W).
struct ChannelLayout {
    std::size_t batch, channels, spatial;
};

ChannelLayout channel_layout(const char* op, const Tensor& x) {
    if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
    if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
    dim_error(op, "expected rank 2 or 4 input, got " + shape_str(x.shape()));
}

template <class F>
Var unary(const char* op, Var x, F forward_and_derivative) {
    Tape& tape = x.tape();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    Tensor deriv(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) forward_and_derivative(xv[i], out[i], deriv[i]);
    const auto xi = x.id();
    return tape.record(op, std::move(out), {xi}, [xi, deriv = std::move(deriv)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        Tensor& gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv[i];
    });
}

void im2col(const double* img, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, double* col) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                double* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (std::size_t oi = 0; oi < Ho; ++oi) {
                    const auto ii = static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t oj = 0; oj < Wo; ++oj) {
                        const auto jj =
                            static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                        const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(H) &&
                                            jj < static_cast<std::ptrdiff_t>(W);
                        row[oi * Wo + oj] = inside ? img[(c * H + static_cast<std::size_t>(ii)) * W +
                                                         static_cast<std::size_t>(jj)]
                                                   : 0.0;
                    }
                }
            }
}

void col2im(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, double* img) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const double* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (std::size_t oi = 0; oi < Ho; ++oi) {
                    const auto ii = static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t oj = 0; oj < Wo; ++oj) {
                        const auto jj =
                            static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                        img[(c * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj)] +=
                            row[oi * Wo + oj];
                    }
                }
            }
}

}  // namespace

namespace ops {

Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank("matmul", av, 2, "lhs");
    require_rank("matmul", bv, 2, "rhs");
    if (av.dim(1) != bv.dim(0))
        dim_error("matmul", "inner axes differ: lhs axis 1 = " + std::to_string(av.dim(1)) +
                                ", rhs axis 0 = " + std::to_string(bv.dim(0)));
    const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
    Tensor out({n, m});
    // Row by row with a fixed summation order so a sample's output does not depend on its batch.
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::Map<Eigen::RowVectorXd> row(out.ptr() + i * m, static_cast<Eigen::Index>(m));
        for (std::size_t j = 0; j < k; ++j)
            row.noalias() += av[i * k + j] * Eigen::Map<const Eigen::RowVectorXd>(bv.ptr() + j * m, static_cast<Eigen::Index>(m));
    }
    const auto ai = a.id(), bi = b.id();
    return a.tape().record("matmul", std::move(out), {ai, bi}, [ai, bi, n, k, m](Tape& t, std::size_t self) {
        CMapMat g(t.grad_buffer(self).ptr(), n, m);
        if (t.requires_grad(ai))
            MapMat(t.grad_buffer(ai).ptr(), n, k).noalias() += g * CMapMat(t.value(bi).ptr(), k, m).transpose();
        if (t.requires_grad(bi))
            MapMat(t.grad_buffer(bi).ptr(), k, m).noalias() += CMapMat(t.value(ai).ptr(), n, k).transpose() * g;
    });
}

Var bias_add(Var x, Var bias) {
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    const auto L = channel_layout("bias_add", xv);
    if (bv.rank() != 1 || bv.dim(0) != L.channels)
        dim_error("bias_add", "bias " + shape_str(bv.shape()) + " does not match channel axis 1 of " +
                                  shape_str(xv.shape()));
    Tensor out = xv;
    for (std::size_t n = 0; n < L.batch; ++n)
        for (std::size_t c = 0; c < L.channels; ++c) {
            double* p = out.ptr() + (n * L.channels + c) * L.spatial;
            for (std::size_t s = 0; s < L.spatial; ++s) p[s] += bv[c];
        }
    const auto xi = x.id(), bi = bias.id();
    return x.tape().record("bias_add", std::move(out), {xi, bi}, [xi, bi, L](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        if (t.requires_grad(xi)) {
            Tensor& gx = t.grad_buffer(xi);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(bi)) {
            Tensor& gb = t.grad_buffer(bi);
            for (std::size_t n = 0; n < L.batch; ++n)
                for (std::size_t c = 0; c < L.channels; ++c) {
                    const double* p = g.ptr() + (n * L.channels + c) * L.spatial;
                    double acc = 0.0;
                    for (std::size_t s = 0; s < L.spatial; ++s) acc += p[s];
                    gb[c] += acc;
                }
        }
    });
}

namespace {

template <class Fwd, class Da, class Db>
Var binary(const char* op, Var a, Var b, Fwd fwd, Da da, Db db) {
    require_same(op, a.value(), b.value());
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
    const auto ai = a.id(), bi = b.id();
    return a.tape().record(op, std::move(out), {ai, bi}, [ai, bi, da, db](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        const Tensor& av = t.value(ai);
        const Tensor& bv = t.value(bi);
        if (t.requires_grad(ai)) {
            Tensor& ga = t.grad_buffer(ai);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(av[i], bv[i]);
        }
        if (t.requires_grad(bi)) {
            Tensor& gb = t.grad_buffer(bi);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(av[i], bv[i]);
        }
    });
}

}  // namespace

Var add(Var a, Var b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Var scale(Var a, double s) {
    return unary("scale", a, [s](double x, double& y, double& d) {
        y = x * s;
        d = s;
    });
}

Var sum(Var a) {
    const Tensor& av = a.value();
    double acc = 0.0;
    for (double v : av.values()) acc += v;
    const auto ai = a.id();
    return a.tape().record("sum", Tensor::scalar(acc), {ai}, [ai](Tape& t, std::size_t self) {
        const double g = t.grad_buffer(self)[0];
        Tensor& ga = t.grad_buffer(ai);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var relu(Var x) {
    return unary("relu", x, [](double v, double& y, double& d) {
        y = v > 0.0 ? v : 0.0;
        d = v > 0.0 ? 1.0 : 0.0;
    });
}

Var gelu(Var x) {
    return unary("gelu", x, [](double v, double& y, double& d) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        y = v * cdf;
        d = cdf + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
    });
}

Var sigmoid(Var x) {
    return unary("sigmoid", x, [](double v, double& y, double& d) {
        y = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        d = y * (1.0 - y);
    });
}

Var conv2d(Var x, Var w, std::size_t stride, std::size_t padding) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    require_rank("conv2d", xv, 4, "input");
    require_rank("conv2d", wv, 4, "weight");
    if (stride == 0) dim_error("conv2d", "stride must be positive");
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t O = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != C)
        dim_error("conv2d", "input channels (axis 1) = " + std::to_string(C) + " but weight axis 1 = " +
                                std::to_string(wv.dim(1)));
    if (H + 2 * padding < kh || W + 2 * padding < kw)
        dim_error("conv2d", "kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " larger than padded input " +
                                shape_str(xv.shape()));
    const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
    const std::size_t K = C * kh * kw, P = Ho * Wo;

    Tensor out({N, O, Ho, Wo});
    std::vector<double> col(K * P);
    CMapMat wm(wv.ptr(), O, K);
    for (std::size_t n = 0; n < N; ++n) {
        im2col(xv.ptr() + n * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
        MapMat(out.ptr() + n * O * P, O, P).noalias() = wm * CMapMat(col.data(), K, P);
    }
    const auto xi = x.id(), wi = w.id();
    return x.tape().record(
        "conv2d", std::move(out), {xi, wi},
        [=](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buffer(self);
            const Tensor& xv = t.value(xi);
            const Tensor& wv = t.value(wi);
            const bool need_x = t.requires_grad(xi), need_w = t.requires_grad(wi);
            std::vector<double> col(K * P);
            CMapMat wm(wv.ptr(), O, K);
            for (std::size_t n = 0; n < N; ++n) {
                CMapMat gn(g.ptr() + n * O * P, O, P);
                if (need_w) {
                    im2col(xv.ptr() + n * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
                    MapMat(t.grad_buffer(wi).ptr(), O, K).noalias() += gn * CMapMat(col.data(), K, P).transpose();
                }
                if (need_x) {
                    MapMat(col.data(), K, P).noalias() = wm.transpose() * gn;
                    col2im(col.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
                           t.grad_buffer(xi).ptr() + n * C * H * W);
                }
            }
        });
}

Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats& stats, Mode mode, double momentum, double eps) {
    const Tensor& xv = x.value();
    const auto L = channel_layout("batchnorm", xv);
    for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma.value(), &beta.value(), &stats.running_mean, &stats.running_var})
        if (p->rank() != 1 || p->dim(0) != L.channels)
            dim_error("batchnorm", "per-channel tensor " + shape_str(p->shape()) + " does not match axis 1 of " +
                                       shape_str(xv.shape()));
    const double M = static_cast<double>(L.batch * L.spatial);
    Tensor mu({L.channels}), inv_std({L.channels});
    if (mode == Mode::Train) {
        if (L.batch * L.spatial < 2) dim_error("batchnorm", "train mode needs at least 2 values per channel");
        for (std::size_t c = 0; c < L.channels; ++c) {
            double s = 0.0;
            for (std::size_t n = 0; n < L.batch; ++n) {
                const double* p = xv.ptr() + (n * L.channels + c) * L.spatial;
                for (std::size_t k = 0; k < L.spatial; ++k) s += p[k];
            }
            const double m = s / M;
            double v = 0.0;
            for (std::size_t n = 0; n < L.batch; ++n) {
                const double* p = xv.ptr() + (n * L.channels + c) * L.spatial;
                for (std::size_t k = 0; k < L.spatial; ++k) v += (p[k] - m) * (p[k] - m);
            }
            v /= M;
            mu[c] = m;
            inv_std[c] = 1.0 / std::sqrt(v + eps);
            stats.running_mean[c] = (1.0 - momentum) * stats.running_mean[c] + momentum * m;
            stats.running_var[c] = (1.0 - momentum) * stats.running_var[c] + momentum * v * M / (M - 1.0);
        }
    } else {
        for (std::size_t c = 0; c < L.channels; ++c) {
            mu[c] = stats.running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + eps);
        }
    }
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    Tensor xhat(xv.shape()), out(xv.shape());
    for (std::size_t n = 0; n < L.batch; ++n)
        for (std::size_t c = 0; c < L.channels; ++c) {
            const std::size_t off = (n * L.channels + c) * L.spatial;
            for (std::size_t k = 0; k < L.spatial; ++k) {
                const double h = (xv[off + k] - mu[c]) * inv_std[c];
                xhat[off + k] = h;
                out[off + k] = gv[c] * h + bv[c];
            }
        }
    const auto xi = x.id(), gi = gamma.id(), bi = beta.id();
    const bool train = mode == Mode::Train;
    return x.tape().record(
        "batchnorm", std::move(out), {xi, gi, bi},
        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
            const Tensor& g = t.grad_buffer(self);
            const Tensor& gv = t.value(gi);
            std::vector<double> sum_g(L.channels, 0.0), sum_gx(L.channels, 0.0);
            for (std::size_t n = 0; n < L.batch; ++n)
                for (std::size_t c = 0; c < L.channels; ++c) {
                    const std::size_t off = (n * L.channels + c) * L.spatial;
                    for (std::size_t k = 0; k < L.spatial; ++k) {
                        sum_g[c] += g[off + k];
                        sum_gx[c] += g[off + k] * xhat[off + k];
                    }
                }
            if (t.requires_grad(gi)) {
                Tensor& gg = t.grad_buffer(gi);
                for (std::size_t c = 0; c < L.channels; ++c) gg[c] += sum_gx[c];
            }
            if (t.requires_grad(bi)) {
                Tensor& gb = t.grad_buffer(bi);
                for (std::size_t c = 0; c < L.channels; ++c) gb[c] += sum_g[c];
            }
            if (!t.requires_grad(xi)) return;
            Tensor& gx = t.grad_buffer(xi);
            for (std::size_t n = 0; n < L.batch; ++n)
                for (std::size_t c = 0; c < L.channels; ++c) {
                    const std::size_t off = (n * L.channels + c) * L.spatial;
                    const double a = gv[c] * inv_std[c];
                    for (std::size_t k = 0; k < L.spatial; ++k) {
                        if (train)
                            gx[off + k] += a * (g[off + k] - sum_g[c] / M - xhat[off + k] * sum_gx[c] / M);
                        else
                            gx[off + k] += a * g[off + k];
                    }
                }
        });
}

Var dropout(Var x, double p, std::uint64_t stream_seed, Mode mode) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
    if (mode == Mode::Eval || p == 0.0) return x;
    const Tensor& xv = x.value();
    Rng rng(stream_seed);
    const double keep_scale = 1.0 / (1.0 - p);
    Tensor mask(xv.shape()), out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        mask[i] = uniform01(rng) >= p ? keep_scale : 0.0;
        out[i] = xv[i] * mask[i];
    }
    const auto xi = x.id();
    return x.tape().record("dropout", std::move(out), {xi}, [xi, mask = std::move(mask)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        Tensor& gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

Var avg_pool2d(Var x, std::size_t k) {
    const Tensor& xv = x.value();
    require_rank("avg_pool2d", xv, 4, "input");
    const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (k == 0 || H % k != 0 || W % k != 0)
        dim_error("avg_pool2d", "window " + std::to_string(k) + " does not divide spatial axes 2,3 of " +
                                    shape_str(xv.shape()));
    const std::size_t Ho = H / k, Wo = W / k;
    const double inv = 1.0 / static_cast<double>(k * k);
    Tensor out({N, C, Ho, Wo});
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j) {
                double acc = 0.0;
                for (std::size_t a = 0; a < k; ++a)
                    for (std::size_t b = 0; b < k; ++b) acc += xv[(nc * H + i * k + a) * W + j * k + b];
                out[(nc * Ho + i) * Wo + j] = acc * inv;
            }
    const auto xi = x.id();
    return x.tape().record("avg_pool2d", std::move(out), {xi}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        Tensor& gx = t.grad_buffer(xi);
        for (std::size_t nc = 0; nc < N * C; ++nc)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    const double v = g[(nc * Ho + i) * Wo + j] * inv;
                    for (std::size_t a = 0; a < k; ++a)
                        for (std::size_t b = 0; b < k; ++b) gx[(nc * H + i * k + a) * W + j * k + b] += v;
                }
    });
}

Var global_avg_pool(Var x) {
    const Tensor& xv = x.value();
    require_rank("global_avg_pool", xv, 4, "input");
    const std::size_t N = xv.dim(0), C = xv.dim(1), S = xv.dim(2) * xv.dim(3);
    const double inv = 1.0 / static_cast<double>(S);
    Tensor out({N, C});
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        double acc = 0.0;
        for (std::size_t s = 0; s < S; ++s) acc += xv[nc * S + s];
        out[nc] = acc * inv;
    }
    const auto xi = x.id();
    return x.tape().record("global_avg_pool", std::move(out), {xi}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        Tensor& gx = t.grad_buffer(xi);
        for (std::size_t nc = 0; nc < N * C; ++nc)
            for (std::size_t s = 0; s < S; ++s) gx[nc * S + s] += g[nc] * inv;
    });
}

Var concat_channels(std::span<const Var> parts) {
    if (parts.empty()) dim_error("concat_channels", "no inputs");
    const Tensor& first = parts[0].value();
    if (first.rank() < 2) dim_error("concat_channels", "inputs need rank >= 2, got " + shape_str(first.shape()));
    const std::size_t N = first.dim(0);
    const std::size_t inner = first.size() / (N * first.dim(1));
    std::size_t total_c = 0;
    std::vector<std::size_t> chans, ids;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        bool ok = v.rank() == first.rank() && v.dim(0) == N;
        for (std::size_t a = 2; ok && a < v.rank(); ++a) ok = v.dim(a) == first.dim(a);
        if (!ok)
            dim_error("concat_channels", "all axes except 1 must agree: " + shape_str(v.shape()) + " vs " +
                                             shape_str(first.shape()));
        chans.push_back(v.dim(1));
        ids.push_back(p.id());
        total_c += v.dim(1);
    }
    Shape shape = first.shape();
    shape[1] = total_c;
    Tensor out(shape);
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            const Tensor& v = parts[i].value();
            std::memcpy(out.ptr() + (n * total_c + c0) * inner, v.ptr() + n * chans[i] * inner,
                        chans[i] * inner * sizeof(double));
            c0 += chans[i];
        }
    }
    return parts[0].tape().record("concat_channels", std::move(out), ids, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        std::size_t c0 = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (t.requires_grad(ids[i])) {
                Tensor& gi = t.grad_buffer(ids[i]);
                for (std::size_t n = 0; n < N; ++n) {
                    const double* src = g.ptr() + (n * total_c + c0) * inner;
                    double* dst = gi.ptr() + n * chans[i] * inner;
                    for (std::size_t k = 0; k < chans[i] * inner; ++k) dst[k] += src[k];
                }
            }
            c0 += chans[i];
        }
    });
}

Var reshape(Var x, Shape shape) {
    const Tensor& xv = x.value();
    if (numel(shape) != xv.size()) dim_error("reshape", shape_str(xv.shape()) + " -> " + shape_str(shape));
    const auto xi = x.id();
    return x.tape().record("reshape", xv.reshaped(std::move(shape)), {xi}, [xi](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        Tensor& gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Var flatten(Var x) {
    const Tensor& xv = x.value();
    if (xv.rank() < 2) dim_error("flatten", "input needs a batch axis, got " + shape_str(xv.shape()));
    if (xv.rank() == 2) return x;
    return reshape(x, {xv.dim(0), xv.size() / xv.dim(0)});
}

Var channel_scale(Var x, Var s) {
    const Tensor& xv = x.value();
    const Tensor& sv = s.value();
    require_rank("channel_scale", xv, 4, "input");
    if (sv.rank() != 2 || sv.dim(0) != xv.dim(0) || sv.dim(1) != xv.dim(1))
        dim_error("channel_scale", "scale " + shape_str(sv.shape()) + " does not match axes 0,1 of " +
                                       shape_str(xv.shape()));
    const std::size_t NC = xv.dim(0) * xv.dim(1), S = xv.dim(2) * xv.dim(3);
    Tensor out(xv.shape());
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t k = 0; k < S; ++k) out[nc * S + k] = xv[nc * S + k] * sv[nc];
    const auto xi = x.id(), si = s.id();
    return x.tape().record("channel_scale", std::move(out), {xi, si}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        const Tensor& xv = t.value(xi);
        const Tensor& sv = t.value(si);
        if (t.requires_grad(xi)) {
            Tensor& gx = t.grad_buffer(xi);
            for (std::size_t nc = 0; nc < NC; ++nc)
                for (std::size_t k = 0; k < S; ++k) gx[nc * S + k] += g[nc * S + k] * sv[nc];
        }
        if (t.requires_grad(si)) {
            Tensor& gs = t.grad_buffer(si);
            for (std::size_t nc = 0; nc < NC; ++nc) {
                double acc = 0.0;
                for (std::size_t k = 0; k < S; ++k) acc += g[nc * S + k] * xv[nc * S + k];
                gs[nc] += acc;
            }
        }
    });
}

Var softmax_with_temperature(Var logits, double tau) {
    if (!(tau > 0.0)) throw PreconditionError("softmax_with_temperature: tau must be positive, got " + std::to_string(tau));
    const Tensor& xv = logits.value();
    require_rank("softmax_with_temperature", xv, 2, "logits");
    Tensor out = softmax(xv, tau);
    const std::size_t N = xv.dim(0), C = xv.dim(1);
    const auto xi = logits.id();
    return logits.tape().record("softmax_with_temperature", std::move(out), {xi}, [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad_buffer(xi);
        for (std::size_t n = 0; n < N; ++n) {
            double dot = 0.0;
            for (std::size_t c = 0; c < C; ++c) dot += g[n * C + c] * y[n * C + c];
            for (std::size_t c = 0; c < C; ++c) gx[n * C + c] += y[n * C + c] * (g[n * C + c] - dot) / tau;
        }
    });
}

Var cross_entropy(Var pred_probs, Var target_probs) {
    const Tensor& p = pred_probs.value();
    const Tensor& q = target_probs.value();
    require_rank("cross_entropy", p, 2, "predictions");
    require_same("cross_entropy", p, q);
    const std::size_t N = p.dim(0), C = p.dim(1);
    for (const Tensor* t : {&p, &q})
        for (std::size_t n = 0; n < N; ++n) {
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                if ((*t)[n * C + c] < -1e-12)
                    throw NumericError("cross_entropy: negative probability in row " + std::to_string(n));
                s += (*t)[n * C + c];
            }
            if (std::abs(s - 1.0) > 1e-6)
                throw NumericError("cross_entropy: row " + std::to_string(n) + " sums to " + std::to_string(s) +
                                   ", not a probability distribution");
        }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc -= q[i] * std::log(p[i] + kLogEpsilon);
    const double invN = 1.0 / static_cast<double>(N);
    const auto pi = pred_probs.id(), qi = target_probs.id();
    return pred_probs.tape().record("cross_entropy", Tensor::scalar(acc * invN), {pi, qi},
                                    [=](Tape& t, std::size_t self) {
                                        const double g = t.grad_buffer(self)[0] * invN;
                                        const Tensor& p = t.value(pi);
                                        const Tensor& q = t.value(qi);
                                        if (t.requires_grad(pi)) {
                                            Tensor& gp = t.grad_buffer(pi);
                                            for (std::size_t i = 0; i < p.size(); ++i)
                                                gp[i] -= g * q[i] / (p[i] + kLogEpsilon);
                                        }
                                        if (t.requires_grad(qi)) {
                                            Tensor& gq = t.grad_buffer(qi);
                                            for (std::size_t i = 0; i < p.size(); ++i)
                                                gq[i] -= g * std::log(p[i] + kLogEpsilon);
                                        }
                                    });
}

Var mse(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_same("mse", av, bv);
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double invN = 1.0 / static_cast<double>(av.size());
    const auto ai = a.id(), bi = b.id();
    return a.tape().record("mse", Tensor::scalar(acc * invN), {ai, bi}, [=](Tape& t, std::size_t self) {
        const double g = 2.0 * t.grad_buffer(self)[0] * invN;
        const Tensor& av = t.value(ai);
        const Tensor& bv = t.value(bi);
        if (t.requires_grad(ai)) {
            Tensor& ga = t.grad_buffer(ai);
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (av[i] - bv[i]);
        }
        if (t.requires_grad(bi)) {
            Tensor& gb = t.grad_buffer(bi);
            for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
        }
    });
}

}  // namespace ops

Tensor softmax(const Tensor& logits, double tau) {
    if (!(tau > 0.0)) throw PreconditionError("softmax: tau must be positive, got " + std::to_string(tau));
    if (logits.rank() != 2) dim_error("softmax", "logits must have rank 2, got " + shape_str(logits.shape()));
    const std::size_t N = logits.dim(0), C = logits.dim(1);
    Tensor out(logits.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const double* x = logits.ptr() + n * C;
        double* y = out.ptr() + n * C;
        double mx = x[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            y[c] = std::exp((x[c] - mx) / tau);
            z += y[c];
        }
        for (std::size_t c = 0; c < C; ++c) y[c] /= z;
    }
    return out;
}

Tensor xavier_normal(Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
    if (fan_in == 0 || fan_out == 0) throw PreconditionError("xavier init: fan_in and fan_out must be >= 1");
    const double stdev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    Tensor out(std::move(shape));
    Rng rng(seed);
    for (double& v : out.values()) v = stdev * standard_normal(rng);
    return out;
}

Tensor xavier_init(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
    if (fan_in == 0 || fan_out == 0) throw PreconditionError("xavier init: fan_in and fan_out must be >= 1");
    return xavier_normal({fan_in, fan_out}, fan_in, fan_out, seed);
}

}  // namespace mlfd
