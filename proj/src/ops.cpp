#include "avih/ops.hpp"

#include <Eigen/Core>
#include <omp.h>

#include <cmath>
#include <cstring>

namespace avih {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

// Coarse parallelism lives at the batch level; Eigen is kept single-threaded
// so results do not depend on the thread count (every output element is
// written by exactly one thread, serial accumulation order inside).
bool parallel_ok(std::int64_t n) {
    static const bool eigen_off = [] {
        Eigen::setNbThreads(1);
        return true;
    }();
    (void)eigen_off;
    return n > 1 && !omp_in_parallel();
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    AVIH_CHECK(a->value.same_shape(b->value),
               std::string(op) + ": shape mismatch " + a->value.shape_str() + " vs " +
                   b->value.shape_str());
}

void check_image(const Var& x, const char* op) {
    AVIH_CHECK(x->value.rank() == 4, std::string(op) + ": expected B x C x H x W tensor");
}

void axpy(Tensor& dst, const Tensor& src, double s = 1.0) {
    double* d = dst.data();
    const double* p = src.data();
    for (std::int64_t i = 0; i < dst.numel(); ++i) d[i] += s * p[i];
}

}  // namespace

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a->value.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) axpy(a->ensure_grad(), n.grad);
        if (b->requires_grad) axpy(b->ensure_grad(), n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a->value.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) axpy(a->ensure_grad(), n.grad);
        if (b->requires_grad) axpy(b->ensure_grad(), n.grad, -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a->value.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * a->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out(a->value.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * s;
    return make_node(std::move(out), {a}, [a, s](Node& n) {
        axpy(a->ensure_grad(), n.grad, s);
    });
}

Var relu(const Var& a) {
    Tensor out(a->value.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
    return make_node(std::move(out), {a}, [a](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            if (a->value[i] > 0.0) g[i] += n.grad[i];
        }
    });
}

Var leaky_relu(const Var& a, double negative_slope) {
    Tensor out(a->value.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double v = a->value[i];
        out[i] = v > 0.0 ? v : negative_slope * v;
    }
    return make_node(std::move(out), {a}, [a, negative_slope](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            g[i] += n.grad[i] * (a->value[i] > 0.0 ? 1.0 : negative_slope);
        }
    });
}

Var tanh_probability(const Var& z, double eps) {
    AVIH_CHECK(eps > 0.0 && eps < 0.5, "tanh_probability: eps must be in (0, 0.5)");
    Tensor out(z->value.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double p = 0.5 * (std::tanh(z->value[i]) + 1.0);
        out[i] = std::min(std::max(p, eps), 1.0 - eps);
    }
    return make_node(std::move(out), {z}, [z, eps](Node& n) {
        Tensor& g = z->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            double p = n.value[i];
            if (p > eps && p < 1.0 - eps) {
                double t = std::tanh(z->value[i]);
                g[i] += n.grad[i] * 0.5 * (1.0 - t * t);
            }
        }
    });
}

Var mean_log(const Var& a) {
    const std::int64_t n = a->value.numel();
    AVIH_CHECK(n > 0, "mean_log: empty input");
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        AVIH_CHECK(a->value[i] > 0.0, "mean_log: inputs must be positive");
        acc += std::log(a->value[i]);
    }
    return make_node(Tensor::scalar(acc / static_cast<double>(n)), {a}, [a, n](Node& out) {
        double g = out.grad[0] / static_cast<double>(n);
        Tensor& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += g / a->value[i];
    });
}

Var mean_log1m(const Var& a) {
    const std::int64_t n = a->value.numel();
    AVIH_CHECK(n > 0, "mean_log1m: empty input");
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        AVIH_CHECK(a->value[i] < 1.0, "mean_log1m: inputs must be < 1");
        acc += std::log1p(-a->value[i]);
    }
    return make_node(Tensor::scalar(acc / static_cast<double>(n)), {a}, [a, n](Node& out) {
        double g = out.grad[0] / static_cast<double>(n);
        Tensor& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) ga[i] -= g / (1.0 - a->value[i]);
    });
}

Var batch_l2_norm_mean(const Var& a) {
    AVIH_CHECK(a->value.rank() >= 2, "batch_l2_norm_mean: rank must be >= 2");
    const std::int64_t batch = a->value.dim(0);
    AVIH_CHECK(batch > 0, "batch_l2_norm_mean: empty batch");
    const std::int64_t per = a->value.numel() / batch;
    auto norms = std::make_shared<std::vector<double>>(batch);
    double acc = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
        double s = 0.0;
        const double* p = a->value.data() + b * per;
        for (std::int64_t i = 0; i < per; ++i) s += p[i] * p[i];
        (*norms)[b] = std::sqrt(s);
        acc += (*norms)[b];
    }
    double value = acc / static_cast<double>(batch);
    return make_node(Tensor::scalar(value), {a}, [a, batch, per, norms](Node& out) {
        double g = out.grad[0] / static_cast<double>(batch);
        Tensor& ga = a->ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
            double nb = (*norms)[b];
            if (nb <= 0.0) continue;  // subgradient 0 at the kink
            const double* p = a->value.data() + b * per;
            double* gp = ga.data() + b * per;
            double k = g / nb;
            for (std::int64_t i = 0; i < per; ++i) gp[i] += k * p[i];
        }
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    AVIH_CHECK(logits->value.rank() == 2, "cross_entropy: logits must be B x K");
    const std::int64_t batch = logits->value.dim(0);
    const std::int64_t k = logits->value.dim(1);
    AVIH_CHECK(static_cast<std::int64_t>(labels.size()) == batch,
               "cross_entropy: labels size mismatch");
    auto probs = std::make_shared<Tensor>(logits->value.shape());
    double loss = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
        AVIH_CHECK(labels[b] >= 0 && labels[b] < k, "cross_entropy: label out of range");
        const double* z = logits->value.data() + b * k;
        double m = z[0];
        for (std::int64_t j = 1; j < k; ++j) m = std::max(m, z[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < k; ++j) sum += std::exp(z[j] - m);
        double lse = m + std::log(sum);
        loss += lse - z[labels[b]];
        double* p = probs->data() + b * k;
        for (std::int64_t j = 0; j < k; ++j) p[j] = std::exp(z[j] - lse);
    }
    loss /= static_cast<double>(batch);
    return make_node(Tensor::scalar(loss), {logits}, [logits, probs, labels, batch, k](Node& out) {
        double g = out.grad[0] / static_cast<double>(batch);
        Tensor& gl = logits->ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
            const double* p = probs->data() + b * k;
            double* gz = gl.data() + b * k;
            for (std::int64_t j = 0; j < k; ++j) gz[j] += g * p[j];
            gz[labels[b]] -= g;
        }
    });
}

Var reshape(const Var& a, std::vector<std::int64_t> shape) {
    AVIH_CHECK(Tensor::numel_of(shape) == a->value.numel(), "reshape: element count mismatch");
    Tensor out(std::move(shape));
    std::memcpy(out.data(), a->value.data(), sizeof(double) * a->value.numel());
    return make_node(std::move(out), {a}, [a](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

Var concat_channels(const Var& a, const Var& b) {
    check_image(a, "concat_channels");
    check_image(b, "concat_channels");
    const auto& sa = a->value.shape();
    const auto& sb = b->value.shape();
    AVIH_CHECK(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
               "concat_channels: batch/spatial dims must match");
    const std::int64_t batch = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
    Tensor out({batch, ca + cb, sa[2], sa[3]});
    for (std::int64_t i = 0; i < batch; ++i) {
        std::memcpy(out.data() + i * (ca + cb) * hw, a->value.data() + i * ca * hw,
                    sizeof(double) * ca * hw);
        std::memcpy(out.data() + i * (ca + cb) * hw + ca * hw, b->value.data() + i * cb * hw,
                    sizeof(double) * cb * hw);
    }
    return make_node(std::move(out), {a, b}, [a, b, batch, ca, cb, hw](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < batch; ++i) {
                const double* src = n.grad.data() + i * (ca + cb) * hw;
                double* dst = g.data() + i * ca * hw;
                for (std::int64_t j = 0; j < ca * hw; ++j) dst[j] += src[j];
            }
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::int64_t i = 0; i < batch; ++i) {
                const double* src = n.grad.data() + i * (ca + cb) * hw + ca * hw;
                double* dst = g.data() + i * cb * hw;
                for (std::int64_t j = 0; j < cb * hw; ++j) dst[j] += src[j];
            }
        }
    });
}

Var detach(const Var& a) { return constant(a->value); }

namespace {

void im2col(const double* img, std::int64_t c_in, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t oh, std::int64_t ow, double* col) {
    for (std::int64_t ci = 0; ci < c_in; ++ci) {
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                double* dst = col + ((ci * kh + ky) * kw + kx) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    std::int64_t sy = oy * stride - pad + ky;
                    if (sy < 0 || sy >= h) {
                        for (std::int64_t ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = 0.0;
                        continue;
                    }
                    const double* src = img + (ci * h + sy) * w;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        std::int64_t sx = ox * stride - pad + kx;
                        dst[oy * ow + ox] = (sx >= 0 && sx < w) ? src[sx] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, std::int64_t c_in, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                std::int64_t oh, std::int64_t ow, double* img) {
    for (std::int64_t ci = 0; ci < c_in; ++ci) {
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                const double* src = col + ((ci * kh + ky) * kw + kx) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    std::int64_t sy = oy * stride - pad + ky;
                    if (sy < 0 || sy >= h) continue;
                    double* dst = img + (ci * h + sy) * w;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        std::int64_t sx = ox * stride - pad + kx;
                        if (sx >= 0 && sx < w) dst[sx] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

// Fixed chunk count keeps weight-gradient accumulation order independent of
// the number of worker threads.
constexpr int kGradChunks = 4;

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    check_image(x, "conv2d");
    AVIH_CHECK(w->value.rank() == 4, "conv2d: weight must be Cout x Cin x kh x kw");
    AVIH_CHECK(stride >= 1 && pad >= 0, "conv2d: invalid stride/pad");
    const std::int64_t batch = x->value.dim(0), c_in = x->value.dim(1);
    const std::int64_t h = x->value.dim(2), wd = x->value.dim(3);
    const std::int64_t c_out = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    AVIH_CHECK(w->value.dim(1) == c_in, "conv2d: channel mismatch");
    AVIH_CHECK(b->value.rank() == 1 && b->value.dim(0) == c_out, "conv2d: bias shape mismatch");
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    AVIH_CHECK(h + 2 * pad >= kh && wd + 2 * pad >= kw && oh >= 1 && ow >= 1,
               "conv2d: input too small for kernel");
    const std::int64_t k = c_in * kh * kw, p = oh * ow;

    Tensor out({batch, c_out, oh, ow});
    {
        CMapRM wm(w->value.data(), c_out, k);
        const bool par = parallel_ok(batch);
#pragma omp parallel for schedule(static) if (par)
        for (std::int64_t i = 0; i < batch; ++i) {
            std::vector<double> col(static_cast<std::size_t>(k * p));
            im2col(x->value.data() + i * c_in * h * wd, c_in, h, wd, kh, kw, stride, pad, oh, ow,
                   col.data());
            CMapRM cm(col.data(), k, p);
            MapRM ym(out.data() + i * c_out * p, c_out, p);
            ym.noalias() = wm * cm;
            for (std::int64_t co = 0; co < c_out; ++co) ym.row(co).array() += b->value[co];
        }
    }

    return make_node(std::move(out), {x, w, b},
                     [x, w, b, batch, c_in, h, wd, c_out, kh, kw, stride, pad, oh, ow, k,
                      p](Node& n) {
        CMapRM wm(w->value.data(), c_out, k);
        const bool need_x = x->requires_grad;
        const bool need_w = w->requires_grad;
        const bool need_b = b->requires_grad;
        if (need_x) x->ensure_grad();
        std::vector<Tensor> dw_parts, db_parts;
        if (need_w || need_b) {
            for (int c = 0; c < kGradChunks; ++c) {
                dw_parts.emplace_back(w->value.shape());
                db_parts.emplace_back(b->value.shape());
            }
        }
        const bool par = parallel_ok(kGradChunks);
#pragma omp parallel for schedule(static) if (par)
        for (int chunk = 0; chunk < kGradChunks; ++chunk) {
            const std::int64_t lo = batch * chunk / kGradChunks;
            const std::int64_t hi = batch * (chunk + 1) / kGradChunks;
            if (lo == hi) continue;
            std::vector<double> col(static_cast<std::size_t>(k * p));
            std::vector<double> dcol(static_cast<std::size_t>(k * p));
            for (std::int64_t i = lo; i < hi; ++i) {
                CMapRM gy(n.grad.data() + i * c_out * p, c_out, p);
                im2col(x->value.data() + i * c_in * h * wd, c_in, h, wd, kh, kw, stride, pad, oh,
                       ow, col.data());
                CMapRM cm(col.data(), k, p);
                if (need_w) {
                    MapRM dwm(dw_parts[chunk].data(), c_out, k);
                    dwm.noalias() += gy * cm.transpose();
                }
                if (need_b) {
                    for (std::int64_t co = 0; co < c_out; ++co)
                        db_parts[chunk][co] += gy.row(co).sum();
                }
                if (need_x) {
                    MapRM dcm(dcol.data(), k, p);
                    dcm.noalias() = wm.transpose() * gy;
                    col2im_add(dcol.data(), c_in, h, wd, kh, kw, stride, pad, oh, ow,
                               x->grad.data() + i * c_in * h * wd);
                }
            }
        }
        if (need_w) {
            Tensor& gw = w->ensure_grad();
            for (int c = 0; c < kGradChunks; ++c) axpy(gw, dw_parts[c]);
        }
        if (need_b) {
            Tensor& gb = b->ensure_grad();
            for (int c = 0; c < kGradChunks; ++c) axpy(gb, db_parts[c]);
        }
    });
}

Var conv_transpose2d_k2s2(const Var& x, const Var& w, const Var& b) {
    check_image(x, "conv_transpose2d");
    AVIH_CHECK(w->value.rank() == 4 && w->value.dim(2) == 2 && w->value.dim(3) == 2,
               "conv_transpose2d: weight must be Cin x Cout x 2 x 2");
    const std::int64_t batch = x->value.dim(0), c_in = x->value.dim(1);
    const std::int64_t h = x->value.dim(2), wd = x->value.dim(3);
    const std::int64_t c_out = w->value.dim(1);
    AVIH_CHECK(w->value.dim(0) == c_in, "conv_transpose2d: channel mismatch");
    AVIH_CHECK(b->value.rank() == 1 && b->value.dim(0) == c_out,
               "conv_transpose2d: bias shape mismatch");
    const std::int64_t p = h * wd;

    Tensor out({batch, c_out, 2 * h, 2 * wd});
    {
        CMapRM wm(w->value.data(), c_in, c_out * 4);
        const bool par = parallel_ok(batch);
#pragma omp parallel for schedule(static) if (par)
        for (std::int64_t i = 0; i < batch; ++i) {
            std::vector<double> tmp(static_cast<std::size_t>(c_out * 4 * p));
            CMapRM xm(x->value.data() + i * c_in * p, c_in, p);
            MapRM tm(tmp.data(), c_out * 4, p);
            tm.noalias() = wm.transpose() * xm;
            double* dst = out.data() + i * c_out * 4 * p;
            for (std::int64_t co = 0; co < c_out; ++co) {
                for (std::int64_t a = 0; a < 2; ++a) {
                    for (std::int64_t bb = 0; bb < 2; ++bb) {
                        const double* src = tmp.data() + ((co * 2 + a) * 2 + bb) * p;
                        for (std::int64_t y = 0; y < h; ++y) {
                            for (std::int64_t xx = 0; xx < wd; ++xx) {
                                dst[(co * 2 * h + 2 * y + a) * 2 * wd + 2 * xx + bb] =
                                    src[y * wd + xx] + b->value[co];
                            }
                        }
                    }
                }
            }
        }
    }

    return make_node(std::move(out), {x, w, b},
                     [x, w, b, batch, c_in, h, wd, c_out, p](Node& n) {
        CMapRM wm(w->value.data(), c_in, c_out * 4);
        const bool need_x = x->requires_grad;
        const bool need_w = w->requires_grad;
        const bool need_b = b->requires_grad;
        if (need_x) x->ensure_grad();
        std::vector<Tensor> dw_parts, db_parts;
        if (need_w || need_b) {
            for (int c = 0; c < kGradChunks; ++c) {
                dw_parts.emplace_back(w->value.shape());
                db_parts.emplace_back(b->value.shape());
            }
        }
        const bool par = parallel_ok(kGradChunks);
#pragma omp parallel for schedule(static) if (par)
        for (int chunk = 0; chunk < kGradChunks; ++chunk) {
            const std::int64_t lo = batch * chunk / kGradChunks;
            const std::int64_t hi = batch * (chunk + 1) / kGradChunks;
            if (lo == hi) continue;
            std::vector<double> dtmp(static_cast<std::size_t>(c_out * 4 * p));
            for (std::int64_t i = lo; i < hi; ++i) {
                const double* gsrc = n.grad.data() + i * c_out * 4 * p;
                for (std::int64_t co = 0; co < c_out; ++co) {
                    double bsum = 0.0;
                    for (std::int64_t a = 0; a < 2; ++a) {
                        for (std::int64_t bb = 0; bb < 2; ++bb) {
                            double* dst = dtmp.data() + ((co * 2 + a) * 2 + bb) * p;
                            for (std::int64_t y = 0; y < h; ++y) {
                                for (std::int64_t xx = 0; xx < wd; ++xx) {
                                    double g = gsrc[(co * 2 * h + 2 * y + a) * 2 * wd + 2 * xx + bb];
                                    dst[y * wd + xx] = g;
                                    bsum += g;
                                }
                            }
                        }
                    }
                    if (need_b) db_parts[chunk][co] += bsum;
                }
                CMapRM gtm(dtmp.data(), c_out * 4, p);
                if (need_x) {
                    MapRM gxm(x->grad.data() + i * c_in * p, c_in, p);
                    gxm.noalias() += wm * gtm;
                }
                if (need_w) {
                    CMapRM xm(x->value.data() + i * c_in * p, c_in, p);
                    MapRM dwm(dw_parts[chunk].data(), c_in, c_out * 4);
                    dwm.noalias() += xm * gtm.transpose();
                }
            }
        }
        if (need_w) {
            Tensor& gw = w->ensure_grad();
            for (int c = 0; c < kGradChunks; ++c) axpy(gw, dw_parts[c]);
        }
        if (need_b) {
            Tensor& gb = b->ensure_grad();
            for (int c = 0; c < kGradChunks; ++c) axpy(gb, db_parts[c]);
        }
    });
}

Var maxpool2x2(const Var& x) {
    check_image(x, "maxpool2x2");
    const std::int64_t batch = x->value.dim(0), c = x->value.dim(1);
    const std::int64_t h = x->value.dim(2), w = x->value.dim(3);
    AVIH_CHECK(h % 2 == 0 && w % 2 == 0, "maxpool2x2: H and W must be even");
    const std::int64_t oh = h / 2, ow = w / 2;
    Tensor out({batch, c, oh, ow});
    auto arg = std::make_shared<std::vector<std::uint8_t>>(
        static_cast<std::size_t>(batch * c * oh * ow));
    const std::int64_t planes = batch * c;
    const bool par = parallel_ok(planes);
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t pc = 0; pc < planes; ++pc) {
        const double* src = x->value.data() + pc * h * w;
        double* dst = out.data() + pc * oh * ow;
        std::uint8_t* am = arg->data() + pc * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
            for (std::int64_t xx = 0; xx < ow; ++xx) {
                double best = src[(2 * y) * w + 2 * xx];
                std::uint8_t bi = 0;
                const double cand1 = src[(2 * y) * w + 2 * xx + 1];
                const double cand2 = src[(2 * y + 1) * w + 2 * xx];
                const double cand3 = src[(2 * y + 1) * w + 2 * xx + 1];
                if (cand1 > best) { best = cand1; bi = 1; }
                if (cand2 > best) { best = cand2; bi = 2; }
                if (cand3 > best) { best = cand3; bi = 3; }
                dst[y * ow + xx] = best;
                am[y * ow + xx] = bi;
            }
        }
    }
    return make_node(std::move(out), {x}, [x, arg, planes, h, w, oh, ow](Node& n) {
        Tensor& g = x->ensure_grad();
        const bool par = parallel_ok(planes);
#pragma omp parallel for schedule(static) if (par)
        for (std::int64_t pc = 0; pc < planes; ++pc) {
            const double* gs = n.grad.data() + pc * oh * ow;
            const std::uint8_t* am = arg->data() + pc * oh * ow;
            double* gd = g.data() + pc * h * w;
            for (std::int64_t y = 0; y < oh; ++y) {
                for (std::int64_t xx = 0; xx < ow; ++xx) {
                    std::uint8_t bi = am[y * ow + xx];
                    std::int64_t sy = 2 * y + bi / 2, sx = 2 * xx + bi % 2;
                    gd[sy * w + sx] += gs[y * ow + xx];
                }
            }
        }
    });
}

Var global_avg_pool(const Var& x) {
    check_image(x, "global_avg_pool");
    const std::int64_t batch = x->value.dim(0), c = x->value.dim(1);
    const std::int64_t hw = x->value.dim(2) * x->value.dim(3);
    Tensor out({batch, c});
    for (std::int64_t pc = 0; pc < batch * c; ++pc) {
        const double* src = x->value.data() + pc * hw;
        double s = 0.0;
        for (std::int64_t i = 0; i < hw; ++i) s += src[i];
        out[pc] = s / static_cast<double>(hw);
    }
    return make_node(std::move(out), {x}, [x, batch, c, hw](Node& n) {
        Tensor& g = x->ensure_grad();
        for (std::int64_t pc = 0; pc < batch * c; ++pc) {
            double gv = n.grad[pc] / static_cast<double>(hw);
            double* gd = g.data() + pc * hw;
            for (std::int64_t i = 0; i < hw; ++i) gd[i] += gv;
        }
    });
}

namespace {

// Shared machinery: normalize over groups of `span` contiguous values per
// sample, with per-channel affine. InstanceNorm: span = HW; GroupNorm:
// span = (C/groups) * HW.
Var norm_impl(const Var& x, const Var& gamma, const Var& beta, std::int64_t groups, double eps,
              const char* name) {
    check_image(x, name);
    const std::int64_t batch = x->value.dim(0), c = x->value.dim(1);
    const std::int64_t hw = x->value.dim(2) * x->value.dim(3);
    AVIH_CHECK(c % groups == 0, std::string(name) + ": channels not divisible by groups");
    AVIH_CHECK(gamma->value.rank() == 1 && gamma->value.dim(0) == c &&
                   beta->value.rank() == 1 && beta->value.dim(0) == c,
               std::string(name) + ": affine parameter shape mismatch");
    const std::int64_t cpg = c / groups;       // channels per group
    const std::int64_t span = cpg * hw;        // values per normalization group
    const std::int64_t ng = batch * groups;    // number of groups overall

    auto mean = std::make_shared<std::vector<double>>(ng);
    auto inv = std::make_shared<std::vector<double>>(ng);
    Tensor out(x->value.shape());
    {
        const bool par = parallel_ok(ng);
#pragma omp parallel for schedule(static) if (par)
        for (std::int64_t g = 0; g < ng; ++g) {
            const double* src = x->value.data() + g * span;
            double m = 0.0;
            for (std::int64_t i = 0; i < span; ++i) m += src[i];
            m /= static_cast<double>(span);
            double v = 0.0;
            for (std::int64_t i = 0; i < span; ++i) {
                double d = src[i] - m;
                v += d * d;
            }
            v /= static_cast<double>(span);
            (*mean)[g] = m;
            (*inv)[g] = 1.0 / std::sqrt(v + eps);
            const std::int64_t c0 = (g % groups) * cpg;
            double* dst = out.data() + g * span;
            for (std::int64_t cc = 0; cc < cpg; ++cc) {
                const double ga = gamma->value[c0 + cc], be = beta->value[c0 + cc];
                for (std::int64_t i = 0; i < hw; ++i) {
                    dst[cc * hw + i] = ga * (src[cc * hw + i] - m) * (*inv)[g] + be;
                }
            }
        }
    }

    return make_node(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, mean, inv, batch, groups, cpg, hw, span, ng](Node& n) {
        const bool need_x = x->requires_grad;
        // Affine gradients accumulate serially over groups: deterministic.
        if (gamma->requires_grad || beta->requires_grad) {
            Tensor& gg = gamma->ensure_grad();
            Tensor& gb = beta->ensure_grad();
            for (std::int64_t g = 0; g < ng; ++g) {
                const double* src = x->value.data() + g * span;
                const double* gr = n.grad.data() + g * span;
                const std::int64_t c0 = (g % groups) * cpg;
                for (std::int64_t cc = 0; cc < cpg; ++cc) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        double xhat = (src[cc * hw + i] - (*mean)[g]) * (*inv)[g];
                        s1 += gr[cc * hw + i];
                        s2 += gr[cc * hw + i] * xhat;
                    }
                    gb[c0 + cc] += s1;
                    gg[c0 + cc] += s2;
                }
            }
        }
        if (need_x) {
            Tensor& gx = x->ensure_grad();
            const bool par = parallel_ok(ng);
#pragma omp parallel for schedule(static) if (par)
            for (std::int64_t g = 0; g < ng; ++g) {
                const double* src = x->value.data() + g * span;
                const double* gr = n.grad.data() + g * span;
                double* gd = gx.data() + g * span;
                const std::int64_t c0 = (g % groups) * cpg;
                // dy/dx through the shared mean/variance of the group.
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::int64_t cc = 0; cc < cpg; ++cc) {
                    const double ga = gamma->value[c0 + cc];
                    for (std::int64_t i = 0; i < hw; ++i) {
                        double xhat = (src[cc * hw + i] - (*mean)[g]) * (*inv)[g];
                        double gy = gr[cc * hw + i] * ga;
                        sum_g += gy;
                        sum_gx += gy * xhat;
                    }
                }
                const double inv_span = 1.0 / static_cast<double>(span);
                for (std::int64_t cc = 0; cc < cpg; ++cc) {
                    const double ga = gamma->value[c0 + cc];
                    for (std::int64_t i = 0; i < hw; ++i) {
                        double xhat = (src[cc * hw + i] - (*mean)[g]) * (*inv)[g];
                        double gy = gr[cc * hw + i] * ga;
                        gd[cc * hw + i] +=
                            (*inv)[g] * (gy - inv_span * (sum_g + xhat * sum_gx));
                    }
                }
            }
        }
    });
}

}  // namespace

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    return norm_impl(x, gamma, beta, x->value.dim(1), eps, "instance_norm");
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    AVIH_CHECK(groups >= 1, "group_norm: groups must be >= 1");
    return norm_impl(x, gamma, beta, groups, eps, "group_norm");
}

Var linear(const Var& x, const Var& w, const Var& b) {
    AVIH_CHECK(x->value.rank() == 2, "linear: input must be B x D");
    AVIH_CHECK(w->value.rank() == 2, "linear: weight must be O x D");
    const std::int64_t batch = x->value.dim(0), d = x->value.dim(1), o = w->value.dim(0);
    AVIH_CHECK(w->value.dim(1) == d, "linear: dimension mismatch");
    AVIH_CHECK(b->value.rank() == 1 && b->value.dim(0) == o, "linear: bias shape mismatch");
    Tensor out({batch, o});
    {
        CMapRM xm(x->value.data(), batch, d);
        CMapRM wm(w->value.data(), o, d);
        MapRM ym(out.data(), batch, o);
        ym.noalias() = xm * wm.transpose();
        for (std::int64_t i = 0; i < batch; ++i)
            for (std::int64_t j = 0; j < o; ++j) out[i * o + j] += b->value[j];
    }
    return make_node(std::move(out), {x, w, b}, [x, w, b, batch, d, o](Node& n) {
        CMapRM gy(n.grad.data(), batch, o);
        if (x->requires_grad) {
            CMapRM wm(w->value.data(), o, d);
            MapRM gx(x->ensure_grad().data(), batch, d);
            gx.noalias() += gy * wm;
        }
        if (w->requires_grad) {
            CMapRM xm(x->value.data(), batch, d);
            MapRM gw(w->ensure_grad().data(), o, d);
            gw.noalias() += gy.transpose() * xm;
        }
        if (b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (std::int64_t i = 0; i < batch; ++i)
                for (std::int64_t j = 0; j < o; ++j) gb[j] += n.grad[i * o + j];
        }
    });
}

Var l2_normalize_rows(const Var& x, double eps) {
    AVIH_CHECK(x->value.rank() == 2, "l2_normalize_rows: input must be B x D");
    const std::int64_t batch = x->value.dim(0), d = x->value.dim(1);
    auto norms = std::make_shared<std::vector<double>>(batch);
    Tensor out(x->value.shape());
    for (std::int64_t b = 0; b < batch; ++b) {
        const double* p = x->value.data() + b * d;
        double s = 0.0;
        for (std::int64_t i = 0; i < d; ++i) s += p[i] * p[i];
        double nb = std::sqrt(s);
        (*norms)[b] = nb;
        double k = 1.0 / (nb + eps);
        double* q = out.data() + b * d;
        for (std::int64_t i = 0; i < d; ++i) q[i] = p[i] * k;
    }
    return make_node(std::move(out), {x}, [x, norms, batch, d, eps](Node& n) {
        Tensor& g = x->ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
            const double nb = (*norms)[b];
            const double denom = nb + eps;
            const double* p = x->value.data() + b * d;
            const double* gr = n.grad.data() + b * d;
            double* gd = g.data() + b * d;
            double dot = 0.0;
            for (std::int64_t i = 0; i < d; ++i) dot += gr[i] * p[i];
            const double k1 = 1.0 / denom;
            const double k2 = nb > 0.0 ? dot / (nb * denom * denom) : 0.0;
            for (std::int64_t i = 0; i < d; ++i) gd[i] += gr[i] * k1 - p[i] * k2;
        }
    });
}

Var patch_sum_variance(const Var& x, int patch_h, int patch_w, int stride) {
    check_image(x, "patch_sum_variance");
    const std::int64_t batch = x->value.dim(0), c = x->value.dim(1);
    const std::int64_t h = x->value.dim(2), w = x->value.dim(3);
    AVIH_CHECK(c == 3, "patch_sum_variance: defined for 3-channel images");
    AVIH_CHECK(patch_h >= 1 && patch_h <= h && patch_w >= 1 && patch_w <= w,
               "patch_sum_variance: patch size out of range");
    AVIH_CHECK(stride >= 1, "patch_sum_variance: stride must be >= 1");
    const std::int64_t ny = (h - patch_h) / stride + 1;
    const std::int64_t nx = (w - patch_w) / stride + 1;
    const std::int64_t np = ny * nx;
    AVIH_CHECK(np >= 2, "patch_sum_variance: patch grid must contain at least 2 patches");

    // Patch sums per (b, c, patch); kept for the backward pass.
    auto sums = std::make_shared<Tensor>(Tensor({batch, c, np}));
    double total = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t cc = 0; cc < c; ++cc) {
            const double* plane = x->value.data() + (b * c + cc) * h * w;
            double* srow = sums->data() + (b * c + cc) * np;
            for (std::int64_t py = 0; py < ny; ++py) {
                for (std::int64_t px = 0; px < nx; ++px) {
                    double s = 0.0;
                    for (std::int64_t dy = 0; dy < patch_h; ++dy) {
                        const double* r = plane + (py * stride + dy) * w + px * stride;
                        for (std::int64_t dx = 0; dx < patch_w; ++dx) s += r[dx];
                    }
                    srow[py * nx + px] = s;
                }
            }
            double m = 0.0;
            for (std::int64_t i = 0; i < np; ++i) m += srow[i];
            m /= static_cast<double>(np);
            double v = 0.0;
            for (std::int64_t i = 0; i < np; ++i) {
                double dvi = srow[i] - m;
                v += dvi * dvi;
            }
            total += v / static_cast<double>(np);
        }
    }
    total /= static_cast<double>(batch);

    return make_node(Tensor::scalar(total), {x},
                     [x, sums, batch, c, h, w, patch_h, patch_w, stride, ny, nx, np](Node& n) {
        const double g = n.grad[0] / static_cast<double>(batch);
        Tensor& gx = x->ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
            for (std::int64_t cc = 0; cc < c; ++cc) {
                const double* srow = sums->data() + (b * c + cc) * np;
                double m = 0.0;
                for (std::int64_t i = 0; i < np; ++i) m += srow[i];
                m /= static_cast<double>(np);
                double* gplane = gx.data() + (b * c + cc) * h * w;
                for (std::int64_t py = 0; py < ny; ++py) {
                    for (std::int64_t px = 0; px < nx; ++px) {
                        // d var / d S_n = 2 (S_n - mean) / N, then every pixel
                        // of patch n receives that amount.
                        double gs = g * 2.0 * (srow[py * nx + px] - m) / static_cast<double>(np);
                        for (std::int64_t dy = 0; dy < patch_h; ++dy) {
                            double* r = gplane + (py * stride + dy) * w + px * stride;
                            for (std::int64_t dx = 0; dx < patch_w; ++dx) r[dx] += gs;
                        }
                    }
                }
            }
        }
    });
}

Var translate_flip(const Var& x, const std::vector<TranslateFlipSpec>& specs) {
    check_image(x, "translate_flip");
    const std::int64_t batch = x->value.dim(0), c = x->value.dim(1);
    const std::int64_t h = x->value.dim(2), w = x->value.dim(3);
    AVIH_CHECK(static_cast<std::int64_t>(specs.size()) == batch,
               "translate_flip: one descriptor per batch element required");
    for (const auto& s : specs) {
        AVIH_CHECK(s.pad >= 0 && s.dy >= 0 && s.dx >= 0 && s.dy <= 2 * s.pad && s.dx <= 2 * s.pad,
                   "translate_flip: crop offset outside padded range");
    }
    auto ds = std::make_shared<std::vector<TranslateFlipSpec>>(specs);
    Tensor out(x->value.shape());
    for (std::int64_t b = 0; b < batch; ++b) {
        const auto& s = (*ds)[b];
        for (std::int64_t cc = 0; cc < c; ++cc) {
            const double* src = x->value.data() + (b * c + cc) * h * w;
            double* dst = out.data() + (b * c + cc) * h * w;
            for (std::int64_t y = 0; y < h; ++y) {
                std::int64_t sy = y + s.dy - s.pad;
                for (std::int64_t xx = 0; xx < w; ++xx) {
                    std::int64_t sx = xx + s.dx - s.pad;
                    double v = 0.0;
                    if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
                        v = src[sy * w + (s.flip ? (w - 1 - sx) : sx)];
                    }
                    dst[y * w + xx] = v;
                }
            }
        }
    }
    return make_node(std::move(out), {x}, [x, ds, batch, c, h, w](Node& n) {
        Tensor& g = x->ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
            const auto& s = (*ds)[b];
            for (std::int64_t cc = 0; cc < c; ++cc) {
                const double* gr = n.grad.data() + (b * c + cc) * h * w;
                double* gd = g.data() + (b * c + cc) * h * w;
                for (std::int64_t y = 0; y < h; ++y) {
                    std::int64_t sy = y + s.dy - s.pad;
                    if (sy < 0 || sy >= h) continue;
                    for (std::int64_t xx = 0; xx < w; ++xx) {
                        std::int64_t sx = xx + s.dx - s.pad;
                        if (sx < 0 || sx >= w) continue;
                        gd[sy * w + (s.flip ? (w - 1 - sx) : sx)] += gr[y * w + xx];
                    }
                }
            }
        }
    });
}

Var pad_flip(const Var& x, int pad, const std::vector<bool>& flips) {
    check_image(x, "pad_flip");
    AVIH_CHECK(pad >= 0, "pad_flip: pad must be >= 0");
    const std::int64_t batch = x->value.dim(0), c = x->value.dim(1);
    const std::int64_t h = x->value.dim(2), w = x->value.dim(3);
    AVIH_CHECK(static_cast<std::int64_t>(flips.size()) == batch,
               "pad_flip: one flip flag per batch element required");
    const std::int64_t oh = h + 2 * pad, ow = w + 2 * pad;
    auto fl = std::make_shared<std::vector<bool>>(flips);
    Tensor out({batch, c, oh, ow});
    for (std::int64_t b = 0; b < batch; ++b) {
        const bool flip = (*fl)[b];
        for (std::int64_t cc = 0; cc < c; ++cc) {
            const double* src = x->value.data() + (b * c + cc) * h * w;
            double* dst = out.data() + (b * c + cc) * oh * ow;
            for (std::int64_t y = 0; y < h; ++y) {
                for (std::int64_t xx = 0; xx < w; ++xx) {
                    dst[(y + pad) * ow + xx + pad] = src[y * w + (flip ? (w - 1 - xx) : xx)];
                }
            }
        }
    }
    return make_node(std::move(out), {x}, [x, fl, pad, batch, c, h, w, oh, ow](Node& n) {
        Tensor& g = x->ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
            const bool flip = (*fl)[b];
            for (std::int64_t cc = 0; cc < c; ++cc) {
                const double* gr = n.grad.data() + (b * c + cc) * oh * ow;
                double* gd = g.data() + (b * c + cc) * h * w;
                for (std::int64_t y = 0; y < h; ++y) {
                    for (std::int64_t xx = 0; xx < w; ++xx) {
                        gd[y * w + (flip ? (w - 1 - xx) : xx)] += gr[(y + pad) * ow + xx + pad];
                    }
                }
            }
        }
    });
}

}  // namespace avih
