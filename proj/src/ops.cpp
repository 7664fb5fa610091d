#include "lnprune/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "lnprune/errors.hpp"

namespace lnprune {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

i64 conv_out_extent(i64 in, i64 k, i64 stride, i64 pad) {
    return (in + 2 * pad - k) / stride + 1;
}

void check_conv_args(const Tensor& input, const Tensor& weights, i64 stride, i64 pad) {
    require(input.rank() == 4, "conv2d: input must be rank 4, got " + shape_str(input.shape));
    require(weights.rank() == 4, "conv2d: weights must be rank 4, got " + shape_str(weights.shape));
    require(weights.dim(2) == weights.dim(3),
            "conv2d: kernel must be square, got " + shape_str(weights.shape));
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(pad >= 0, "conv2d: pad must be >= 0");
    require(input.dim(1) == weights.dim(1),
            "conv2d: input channels (" + std::to_string(input.dim(1)) +
                ") != weights channels (" + std::to_string(weights.dim(1)) + ")");
    i64 k = weights.dim(2);
    require(k <= input.dim(2) + 2 * pad && k <= input.dim(3) + 2 * pad,
            "conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                shape_str(input.shape) + " with pad " + std::to_string(pad));
}

// Gathers one sample's padded receptive fields into a [P, K] matrix,
// P = H'*W' output positions, K = C*k*k. Out-of-image taps are zero.
void im2col(const Tensor& input, i64 n, i64 k, i64 stride, i64 pad,
            i64 out_h, i64 out_w, std::vector<float>& col) {
    const i64 C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const i64 K = C * k * k;
    col.assign(static_cast<std::size_t>(out_h * out_w * K), 0.0f);
    const float* in = input.data.data() + n * C * H * W;
    for (i64 oh = 0; oh < out_h; ++oh) {
        for (i64 ow = 0; ow < out_w; ++ow) {
            float* row = col.data() + (oh * out_w + ow) * K;
            for (i64 c = 0; c < C; ++c) {
                for (i64 kh = 0; kh < k; ++kh) {
                    i64 ih = oh * stride + kh - pad;
                    if (ih < 0 || ih >= H) continue;
                    for (i64 kw = 0; kw < k; ++kw) {
                        i64 iw = ow * stride + kw - pad;
                        if (iw < 0 || iw >= W) continue;
                        row[(c * k + kh) * k + kw] = in[(c * H + ih) * W + iw];
                    }
                }
            }
        }
    }
}

}  // namespace

void GradPair::check() const {
    if (has_grad() && grad.shape != value.shape) {
        throw ShapeError("GradPair: grad shape " + shape_str(grad.shape) +
                         " != value shape " + shape_str(value.shape));
    }
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      i64 stride, i64 pad) {
    check_conv_args(input, weights, stride, pad);
    const i64 D = weights.dim(0);
    require(bias.rank() == 1 && bias.dim(0) == D,
            "conv2d: bias shape " + shape_str(bias.shape) + " != [" + std::to_string(D) + "]");

    const i64 N = input.dim(0), k = weights.dim(2);
    const i64 out_h = conv_out_extent(input.dim(2), k, stride, pad);
    const i64 out_w = conv_out_extent(input.dim(3), k, stride, pad);
    const i64 K = input.dim(1) * k * k;
    const i64 P = out_h * out_w;

    // Weights transposed to [K, D] so the inner accumulation loops run over
    // contiguous, independent per-channel accumulators.
    std::vector<float> wt(static_cast<std::size_t>(K * D));
    for (i64 d = 0; d < D; ++d)
        for (i64 kk = 0; kk < K; ++kk) wt[kk * D + d] = weights.data[d * K + kk];

    Tensor out({N, D, out_h, out_w});
    parallel_chunks(N, [&](i64 n0, i64 n1, int) {
        std::vector<float> col;
        std::vector<double> acc(static_cast<std::size_t>(D));
        for (i64 n = n0; n < n1; ++n) {
            im2col(input, n, k, stride, pad, out_h, out_w, col);
            for (i64 p = 0; p < P; ++p) {
                for (i64 d = 0; d < D; ++d) acc[d] = static_cast<double>(bias.data[d]);
                const float* row = col.data() + p * K;
                for (i64 kk = 0; kk < K; ++kk) {
                    const double x = row[kk];
                    const float* w = wt.data() + kk * D;
                    for (i64 d = 0; d < D; ++d) acc[d] += x * static_cast<double>(w[d]);
                }
                const i64 oh = p / out_w, ow = p % out_w;
                for (i64 d = 0; d < D; ++d)
                    out.at(n, d, oh, ow) = static_cast<float>(acc[d]);
            }
        }
    });
    return out;
}

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const Tensor& weights,
                          i64 stride, i64 pad) {
    check_conv_args(input, weights, stride, pad);
    const i64 N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const i64 D = weights.dim(0), k = weights.dim(2);
    const i64 out_h = conv_out_extent(H, k, stride, pad);
    const i64 out_w = conv_out_extent(W, k, stride, pad);
    require(grad_out.shape == Shape{N, D, out_h, out_w},
            "conv2d_backward: grad_out shape " + shape_str(grad_out.shape) +
                " != expected " + shape_str({N, D, out_h, out_w}));

    const i64 K = C * k * k;
    const i64 P = out_h * out_w;

    ConvGrads g{Tensor(input.shape), Tensor(weights.shape), Tensor(Shape{D})};

    // Per-chunk 64-bit partials for the weight/bias reductions, combined in
    // chunk order so totals do not depend on the worker count.
    const int chunks = static_cast<int>(std::min<i64>(N, kParallelChunks));
    std::vector<std::vector<double>> gw_part(static_cast<std::size_t>(chunks)),
        gb_part(static_cast<std::size_t>(chunks));

    parallel_chunks(N, [&](i64 n0, i64 n1, int chunk) {
        auto& gw = gw_part[static_cast<std::size_t>(chunk)];
        auto& gb = gb_part[static_cast<std::size_t>(chunk)];
        gw.assign(static_cast<std::size_t>(D * K), 0.0);
        gb.assign(static_cast<std::size_t>(D), 0.0);
        std::vector<float> col;
        std::vector<double> colgrad(static_cast<std::size_t>(P * K));
        std::vector<double> gin_pad(static_cast<std::size_t>(C * (H + 2 * pad) * (W + 2 * pad)));
        for (i64 n = n0; n < n1; ++n) {
            im2col(input, n, k, stride, pad, out_h, out_w, col);
            std::fill(colgrad.begin(), colgrad.end(), 0.0);
            const float* go = grad_out.data.data() + n * D * P;
            for (i64 d = 0; d < D; ++d) {
                double* gwd = gw.data() + d * K;
                const float* god = go + d * P;
                double gbsum = 0.0;
                for (i64 p = 0; p < P; ++p) {
                    const double gv = god[p];
                    gbsum += gv;
                    const float* row = col.data() + p * K;
                    double* cg = colgrad.data() + p * K;
                    const float* wd = weights.data.data() + d * K;
                    for (i64 kk = 0; kk < K; ++kk) {
                        gwd[kk] += gv * static_cast<double>(row[kk]);
                        cg[kk] += gv * static_cast<double>(wd[kk]);
                    }
                }
                gb[d] += gbsum;
            }
            // col2im: scatter receptive-field gradients back, overlaps add in
            // fixed (p, kk) order.
            std::fill(gin_pad.begin(), gin_pad.end(), 0.0);
            const i64 HP = H + 2 * pad, WP = W + 2 * pad;
            for (i64 p = 0; p < P; ++p) {
                const i64 oh = p / out_w, ow = p % out_w;
                const double* cg = colgrad.data() + p * K;
                for (i64 c = 0; c < C; ++c) {
                    for (i64 kh = 0; kh < k; ++kh) {
                        const i64 ih = oh * stride + kh;
                        double* dst = gin_pad.data() + (c * HP + ih) * WP + ow * stride;
                        const double* src = cg + (c * k + kh) * k;
                        for (i64 kw = 0; kw < k; ++kw) dst[kw] += src[kw];
                    }
                }
            }
            float* gi = g.input.data.data() + n * C * H * W;
            for (i64 c = 0; c < C; ++c)
                for (i64 ih = 0; ih < H; ++ih)
                    for (i64 iw = 0; iw < W; ++iw)
                        gi[(c * H + ih) * W + iw] = static_cast<float>(
                            gin_pad[(c * HP + ih + pad) * WP + iw + pad]);
        }
    });

    std::vector<double> gw_total(static_cast<std::size_t>(D * K), 0.0),
        gb_total(static_cast<std::size_t>(D), 0.0);
    for (int c = 0; c < chunks; ++c) {
        for (i64 i = 0; i < D * K; ++i) gw_total[i] += gw_part[static_cast<std::size_t>(c)][i];
        for (i64 d = 0; d < D; ++d) gb_total[d] += gb_part[static_cast<std::size_t>(c)][d];
    }
    for (i64 i = 0; i < D * K; ++i) g.weights.data[i] = static_cast<float>(gw_total[i]);
    for (i64 d = 0; d < D; ++d) g.bias.data[d] = static_cast<float>(gb_total[d]);
    return g;
}

Tensor relu_forward(const Tensor& x) {
    Tensor out(x.shape);
    for (i64 i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] > 0.0f ? x.data[i] : 0.0f;
    return out;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& x) {
    require(same_shape(grad_out, x), "relu_backward: grad shape " + shape_str(grad_out.shape) +
                                         " != input shape " + shape_str(x.shape));
    Tensor out(x.shape);
    for (i64 i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] > 0.0f ? grad_out.data[i] : 0.0f;
    return out;
}

MaxPoolOut maxpool2d_forward(const Tensor& x, i64 window, i64 stride) {
    require(x.rank() == 4, "maxpool2d: input must be rank 4, got " + shape_str(x.shape));
    require(window >= 1 && stride >= 1, "maxpool2d: window and stride must be >= 1");
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(window <= H && window <= W,
            "maxpool2d: window " + std::to_string(window) + " larger than input " +
                shape_str(x.shape));
    const i64 out_h = (H - window) / stride + 1;
    const i64 out_w = (W - window) / stride + 1;

    MaxPoolOut r{Tensor({N, C, out_h, out_w}), {}};
    r.argmax.resize(static_cast<std::size_t>(r.out.numel()));
    i64 oi = 0;
    for (i64 n = 0; n < N; ++n) {
        for (i64 c = 0; c < C; ++c) {
            const float* plane = x.data.data() + (n * C + c) * H * W;
            for (i64 oh = 0; oh < out_h; ++oh) {
                for (i64 ow = 0; ow < out_w; ++ow, ++oi) {
                    float best = -std::numeric_limits<float>::infinity();
                    i64 best_idx = -1;
                    for (i64 kh = 0; kh < window; ++kh) {
                        for (i64 kw = 0; kw < window; ++kw) {
                            const i64 ih = oh * stride + kh, iw = ow * stride + kw;
                            const float v = plane[ih * W + iw];
                            if (v > best) {  // strict: ties keep the lowest flat index
                                best = v;
                                best_idx = (n * C + c) * H * W + ih * W + iw;
                            }
                        }
                    }
                    r.out.data[oi] = best;
                    r.argmax[static_cast<std::size_t>(oi)] = best_idx;
                }
            }
        }
    }
    return r;
}

Tensor maxpool2d_backward(const Tensor& grad_out, const std::vector<i64>& argmax,
                          const Shape& input_shape) {
    require(static_cast<i64>(argmax.size()) == grad_out.numel(),
            "maxpool2d_backward: argmax count " + std::to_string(argmax.size()) +
                " != grad elements " + std::to_string(grad_out.numel()));
    Tensor gin(input_shape);
    for (i64 i = 0; i < grad_out.numel(); ++i)
        gin.data[argmax[static_cast<std::size_t>(i)]] += grad_out.data[i];
    return gin;
}

Tensor gap_forward(const Tensor& x) {
    require(x.rank() == 4, "gap: input must be rank 4, got " + shape_str(x.shape));
    const i64 N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out({N, C});
    for (i64 n = 0; n < N; ++n) {
        for (i64 c = 0; c < C; ++c) {
            const float* plane = x.data.data() + (n * C + c) * HW;
            double sum = 0.0;
            for (i64 i = 0; i < HW; ++i) sum += plane[i];
            out.at(n, c) = static_cast<float>(sum / static_cast<double>(HW));
        }
    }
    return out;
}

Tensor gap_backward(const Tensor& grad_out, i64 height, i64 width) {
    require(grad_out.rank() == 2, "gap_backward: grad must be rank 2");
    const i64 N = grad_out.dim(0), C = grad_out.dim(1), HW = height * width;
    Tensor gin({N, C, height, width});
    for (i64 n = 0; n < N; ++n) {
        for (i64 c = 0; c < C; ++c) {
            const float g = static_cast<float>(static_cast<double>(grad_out.at(n, c)) /
                                               static_cast<double>(HW));
            float* plane = gin.data.data() + (n * C + c) * HW;
            for (i64 i = 0; i < HW; ++i) plane[i] = g;
        }
    }
    return gin;
}

Tensor dense_forward(const Tensor& x, const Tensor& weights, const Tensor& bias) {
    require(x.rank() == 2, "dense: input must be rank 2, got " + shape_str(x.shape));
    require(weights.rank() == 2, "dense: weights must be rank 2, got " + shape_str(weights.shape));
    const i64 N = x.dim(0), F = x.dim(1), O = weights.dim(0);
    require(weights.dim(1) == F, "dense: input features (" + std::to_string(F) +
                                     ") != weight columns (" + std::to_string(weights.dim(1)) + ")");
    require(bias.rank() == 1 && bias.dim(0) == O,
            "dense: bias shape " + shape_str(bias.shape) + " != [" + std::to_string(O) + "]");

    Tensor out({N, O});
    std::vector<double> acc(static_cast<std::size_t>(O));
    for (i64 n = 0; n < N; ++n) {
        for (i64 o = 0; o < O; ++o) acc[o] = static_cast<double>(bias.data[o]);
        const float* xr = x.data.data() + n * F;
        for (i64 f = 0; f < F; ++f) {
            const double xv = xr[f];
            for (i64 o = 0; o < O; ++o)
                acc[o] += xv * static_cast<double>(weights.data[o * F + f]);
        }
        for (i64 o = 0; o < O; ++o) out.at(n, o) = static_cast<float>(acc[o]);
    }
    return out;
}

DenseGrads dense_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weights) {
    const i64 N = x.dim(0), F = x.dim(1), O = weights.dim(0);
    require(grad_out.shape == Shape{N, O}, "dense_backward: grad_out shape " +
                                               shape_str(grad_out.shape) + " != expected " +
                                               shape_str({N, O}));
    require(weights.dim(1) == F, "dense_backward: input features (" + std::to_string(F) +
                                     ") != weight columns (" + std::to_string(weights.dim(1)) + ")");

    DenseGrads g{Tensor(x.shape), Tensor(weights.shape), Tensor({O})};
    std::vector<double> gw(static_cast<std::size_t>(O * F), 0.0),
        gb(static_cast<std::size_t>(O), 0.0), gx(static_cast<std::size_t>(F));
    for (i64 n = 0; n < N; ++n) {
        const float* xr = x.data.data() + n * F;
        const float* go = grad_out.data.data() + n * O;
        std::fill(gx.begin(), gx.end(), 0.0);
        for (i64 o = 0; o < O; ++o) {
            const double gv = go[o];
            gb[o] += gv;
            const float* wr = weights.data.data() + o * F;
            double* gwr = gw.data() + o * F;
            for (i64 f = 0; f < F; ++f) {
                gwr[f] += gv * static_cast<double>(xr[f]);
                gx[f] += gv * static_cast<double>(wr[f]);
            }
        }
        float* gxr = g.input.data.data() + n * F;
        for (i64 f = 0; f < F; ++f) gxr[f] = static_cast<float>(gx[f]);
    }
    for (i64 i = 0; i < O * F; ++i) g.weights.data[i] = static_cast<float>(gw[i]);
    for (i64 o = 0; o < O; ++o) g.bias.data[o] = static_cast<float>(gb[o]);
    return g;
}

Tensor softmax_forward(const Tensor& logits) {
    require(logits.rank() == 2, "softmax: input must be rank 2, got " + shape_str(logits.shape));
    const i64 N = logits.dim(0), C = logits.dim(1);
    Tensor out(logits.shape);
    for (i64 n = 0; n < N; ++n) {
        const float* row = logits.data.data() + n * C;
        float m = row[0];
        for (i64 c = 1; c < C; ++c) m = std::max(m, row[c]);
        double denom = 0.0;
        for (i64 c = 0; c < C; ++c) denom += std::exp(static_cast<double>(row[c] - m));
        for (i64 c = 0; c < C; ++c)
            out.at(n, c) = static_cast<float>(std::exp(static_cast<double>(row[c] - m)) / denom);
    }
    return out;
}

XentOut softmax_xent(const Tensor& logits, const std::vector<i64>& labels) {
    require(logits.rank() == 2, "softmax_xent: logits must be rank 2, got " + shape_str(logits.shape));
    const i64 N = logits.dim(0), C = logits.dim(1);
    if (static_cast<i64>(labels.size()) != N) {
        throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(N));
    }
    for (i64 n = 0; n < N; ++n) {
        if (labels[static_cast<std::size_t>(n)] < 0 || labels[static_cast<std::size_t>(n)] >= C) {
            throw DataError("softmax_xent: label " + std::to_string(labels[static_cast<std::size_t>(n)]) +
                            " out of range [0, " + std::to_string(C) + ") at row " + std::to_string(n));
        }
    }

    XentOut r;
    r.grad_logits = Tensor(logits.shape);
    double total = 0.0;
    for (i64 n = 0; n < N; ++n) {
        const float* row = logits.data.data() + n * C;
        const i64 y = labels[static_cast<std::size_t>(n)];
        float m = row[0];
        for (i64 c = 1; c < C; ++c) m = std::max(m, row[c]);
        double denom = 0.0;
        for (i64 c = 0; c < C; ++c) denom += std::exp(static_cast<double>(row[c] - m));
        total += std::log(denom) - static_cast<double>(row[y] - m);
        for (i64 c = 0; c < C; ++c) {
            double p = std::exp(static_cast<double>(row[c] - m)) / denom;
            if (c == y) p -= 1.0;
            r.grad_logits.at(n, c) = static_cast<float>(p / static_cast<double>(N));
        }
    }
    r.loss = total / static_cast<double>(N);
    return r;
}

}  // namespace lnprune
